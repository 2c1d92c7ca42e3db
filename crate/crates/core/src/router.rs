//! Top-k memory routing and the Switch-style load-balance loss.
//!
//! The router applies a softmax over all `M` logits, keeps the `k` largest
//! probabilities and renormalizes them into mixing weights.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax, Matrix};

/// Default coefficient of the auxiliary load-balance loss.
pub const DEFAULT_AUX_SCALE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<T> {
    /// `d × M` gating weights.
    pub w_g: Matrix<T>,
    pub top_k: usize,
}

impl<T: Scalar> RouterParams<T> {
    pub fn new(w_g: Matrix<T>, top_k: usize) -> Result<Self> {
        let m = w_g.cols();
        if m == 0 {
            return invalid("router needs at least one memory");
        }
        if top_k == 0 || top_k > m {
            return invalid(format!("top_k = {top_k} outside [1, {m}]"));
        }
        Ok(Self { w_g, top_k })
    }

    pub fn init<R: Rng + ?Sized>(d: usize, num_memories: usize, top_k: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (d.max(1) as f64).sqrt();
        Self::new(Matrix::uniform(d, num_memories, bound, rng), top_k)
    }

    pub fn num_memories(&self) -> usize {
        self.w_g.cols()
    }

    pub fn logits(&self, x: &[T]) -> Vec<T> {
        self.w_g.left_mul(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision<T> {
    /// Selected memories, ascending.
    pub indices: Vec<usize>,
    /// Mixing weights aligned with `indices`; positive, sum to one.
    pub weights: Vec<T>,
    /// Softmax over all memories, kept for the load-balance loss.
    pub full_probs: Vec<T>,
}

impl<T: Scalar> RouterDecision<T> {
    pub fn weight_of(&self, memory: usize) -> Option<T> {
        self.indices
            .iter()
            .position(|&m| m == memory)
            .map(|i| self.weights[i])
    }

    pub fn selects(&self, memory: usize) -> bool {
        self.indices.contains(&memory)
    }
}

/// Route one token.
pub fn route<T: Scalar>(x: &[T], params: &RouterParams<T>) -> Result<RouterDecision<T>> {
    if x.len() != params.w_g.rows() {
        return invalid(format!("router input has length {}, expected {}", x.len(), params.w_g.rows()));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return invalid("non-finite router input");
    }
    route_logits(&params.logits(x), params.top_k)
}

/// Top-k over precomputed logits. Ranking uses the logits themselves, which
/// orders identically to the softmax but cannot merge distinct scores through
/// rounding. Ties go to the lowest index.
pub fn route_logits<T: Scalar>(logits: &[T], top_k: usize) -> Result<RouterDecision<T>> {
    if top_k == 0 || top_k > logits.len() {
        return invalid(format!("top_k = {top_k} outside [1, {}]", logits.len()));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&i, &j| logits[j].partial_cmp(&logits[i]).unwrap().then(i.cmp(&j)));
    let mut indices = order[..top_k].to_vec();
    indices.sort_unstable();
    Ok(decision_for(softmax(logits), indices))
}

/// Decision with a fixed selection; weights still follow the probabilities.
pub fn route_with_selection<T: Scalar>(logits: &[T], indices: &[usize]) -> Result<RouterDecision<T>> {
    let mut indices = indices.to_vec();
    indices.sort_unstable();
    indices.dedup();
    if indices.is_empty() || indices.iter().any(|&m| m >= logits.len()) {
        return invalid(format!("selection {indices:?} invalid for {} memories", logits.len()));
    }
    Ok(decision_for(softmax(logits), indices))
}

fn decision_for<T: Scalar>(full_probs: Vec<T>, indices: Vec<usize>) -> RouterDecision<T> {
    let total: T = indices.iter().map(|&m| full_probs[m]).sum();
    let weights = indices.iter().map(|&m| full_probs[m] / total).collect();
    RouterDecision { indices, weights, full_probs }
}

/// Gap between the k-th and (k+1)-th largest logit; `None` when `k == M`.
pub fn selection_margin<T: Scalar>(logits: &[T], top_k: usize) -> Option<T> {
    if top_k >= logits.len() {
        return None;
    }
    let mut sorted = logits.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Some(sorted[top_k - 1] - sorted[top_k])
}

/// Running sums behind the load-balance loss. Shards of a batch can be
/// accumulated separately and merged.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadBalance<T> {
    /// Per-memory selection counts.
    pub selections: Vec<T>,
    /// Per-memory sums of full softmax probabilities.
    pub prob_sums: Vec<T>,
    pub tokens: usize,
}

impl<T: Scalar> LoadBalance<T> {
    pub fn new(num_memories: usize) -> Self {
        Self {
            selections: vec![T::zero(); num_memories],
            prob_sums: vec![T::zero(); num_memories],
            tokens: 0,
        }
    }

    pub fn add(&mut self, decision: &RouterDecision<T>) -> Result<()> {
        let m = self.selections.len();
        if decision.full_probs.len() != m || decision.indices.iter().any(|&i| i >= m) {
            return invalid(format!("decision does not match {m} memories"));
        }
        for &i in &decision.indices {
            self.selections[i] += T::one();
        }
        for (s, p) in self.prob_sums.iter_mut().zip(&decision.full_probs) {
            *s += *p;
        }
        self.tokens += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.selections.iter_mut().zip(&other.selections) {
            *a += *b;
        }
        for (a, b) in self.prob_sums.iter_mut().zip(&other.prob_sums) {
            *a += *b;
        }
        self.tokens += other.tokens;
    }

    /// Selection fractions `f_m`, normalized to sum to one.
    pub fn fractions(&self) -> Vec<T> {
        let total: T = self.selections.iter().copied().sum();
        if total == T::zero() {
            return vec![T::zero(); self.selections.len()];
        }
        self.selections.iter().map(|c| *c / total).collect()
    }

    pub fn mean_probs(&self) -> Vec<T> {
        let n = T::from_usize(self.tokens.max(1)).unwrap();
        self.prob_sums.iter().map(|s| *s / n).collect()
    }

    /// `scale · M · Σ_m f_m · P_m`
    pub fn loss(&self, scale: T) -> Result<T> {
        if self.tokens == 0 {
            return invalid("load-balance loss over zero tokens");
        }
        let m = T::from_usize(self.selections.len()).unwrap();
        let sum: T = self
            .fractions()
            .iter()
            .zip(self.mean_probs())
            .map(|(f, p)| *f * p)
            .sum();
        Ok(scale * m * sum)
    }

    /// Gradient of [`LoadBalance::loss`] with respect to each token's
    /// `full_probs`, identical for every token since `f` is held constant.
    pub fn prob_grad(&self, scale: T) -> Vec<T> {
        let m = T::from_usize(self.selections.len()).unwrap();
        let n = T::from_usize(self.tokens.max(1)).unwrap();
        self.fractions().iter().map(|f| scale * m * *f / n).collect()
    }
}

pub fn aux_load_balance_loss<T: Scalar>(
    decisions: &[RouterDecision<T>],
    num_memories: usize,
    scale: T,
) -> Result<T> {
    if decisions.is_empty() {
        return invalid("load-balance loss needs at least one decision");
    }
    let mut acc = LoadBalance::new(num_memories);
    for d in decisions {
        acc.add(d)?;
    }
    acc.loss(scale)
}
