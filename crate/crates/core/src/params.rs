//! Uniform access to the trainable tensors of a model, used by the optimizer,
//! gradient accumulation and finite differencing.

use crate::scalar::Scalar;

pub trait Parameters<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[T]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| out.extend_from_slice(t));
        out
    }

    fn assign_flat(&mut self, flat: &[T]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter vector has the wrong length");
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name.to_string()));
        names
    }

    fn fill_zero(&mut self) {
        self.visit_mut(&mut |_, t| t.iter_mut().for_each(|x| *x = T::zero()));
    }

    /// `self += alpha * other`, tensor by tensor.
    fn add_scaled(&mut self, alpha: T, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            for (x, y) in t.iter_mut().zip(&flat[offset..]) {
                *x += alpha * *y;
            }
            offset += t.len();
        });
    }

    fn sum_squares(&self) -> T {
        let mut s = T::zero();
        self.visit(&mut |_, t| s += t.iter().map(|x| *x * *x).sum::<T>());
        s
    }
}

/// Same shapes as `p`, all zeros.
pub fn zeros_like<T: Scalar, P: Parameters<T> + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.fill_zero();
    z
}
