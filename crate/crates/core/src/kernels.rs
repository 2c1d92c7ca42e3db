//! Matrix-valued memory update rules.
//!
//! Every rule is a single-step transition `M' = f(M, k, v, gates)` over a
//! `d_k × d_v` state, where keys and values are row vectors and `kᵀv` is
//! their outer product. Rules that descend on an online regression loss use
//! `ℓ(M; k, v) = ½‖kM − v‖²`, so `∇_M ℓ = kᵀ(kM − v)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, l2_norm, Matrix};

/// Default data-independent decay for RetNet.
pub const DEFAULT_RETNET_GAMMA: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    LinearAttn,
    RetNet,
    Gla,
    DeltaNet,
    GatedDeltaNet,
    Ttt,
    Titans,
    Mamba2,
    Hgrn2,
    Rwkv6,
    Rwkv7,
}

impl RuleKind {
    pub const ALL: [RuleKind; 11] = [
        RuleKind::LinearAttn,
        RuleKind::RetNet,
        RuleKind::Gla,
        RuleKind::DeltaNet,
        RuleKind::GatedDeltaNet,
        RuleKind::Ttt,
        RuleKind::Titans,
        RuleKind::Mamba2,
        RuleKind::Hgrn2,
        RuleKind::Rwkv6,
        RuleKind::Rwkv7,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RuleKind::LinearAttn => "linear_attn",
            RuleKind::RetNet => "ret_net",
            RuleKind::Gla => "gla",
            RuleKind::DeltaNet => "delta_net",
            RuleKind::GatedDeltaNet => "gated_delta_net",
            RuleKind::Ttt => "ttt",
            RuleKind::Titans => "titans",
            RuleKind::Mamba2 => "mamba2",
            RuleKind::Hgrn2 => "hgrn2",
            RuleKind::Rwkv6 => "rwkv6",
            RuleKind::Rwkv7 => "rwkv7",
        }
    }

    /// Which gates the rule consumes.
    pub fn gate_shape(self) -> GateShape {
        let (a_scalar, a_vector, b_scalar) = match self {
            RuleKind::LinearAttn | RuleKind::RetNet => (false, false, false),
            RuleKind::Gla | RuleKind::Hgrn2 => (false, true, false),
            RuleKind::DeltaNet | RuleKind::Ttt => (false, false, true),
            RuleKind::GatedDeltaNet | RuleKind::Titans | RuleKind::Mamba2 => (true, false, true),
            RuleKind::Rwkv6 => (true, false, false),
            RuleKind::Rwkv7 => (false, true, true),
        };
        GateShape { a_scalar, a_vector, b_scalar }
    }

    /// Rules whose transition contains `(I − c·kᵀk)`; these need `‖k‖₂ ≤ 1`.
    pub fn needs_unit_keys(self) -> bool {
        matches!(
            self,
            RuleKind::DeltaNet
                | RuleKind::GatedDeltaNet
                | RuleKind::Ttt
                | RuleKind::Titans
                | RuleKind::Rwkv7
        )
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        RuleKind::ALL
            .into_iter()
            .find(|k| k.name() == norm || k.name().replace('_', "") == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown rule kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateShape {
    pub a_scalar: bool,
    pub a_vector: bool,
    pub b_scalar: bool,
}

/// A rule kind plus its data-independent constant (RetNet's γ).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateRule<T> {
    kind: RuleKind,
    gamma: Option<T>,
}

impl<T: Scalar> UpdateRule<T> {
    /// Rule with default constants (γ = 0.9 for RetNet).
    pub fn new(kind: RuleKind) -> Self {
        let gamma = (kind == RuleKind::RetNet).then(|| T::of(DEFAULT_RETNET_GAMMA));
        Self { kind, gamma }
    }

    pub fn with_gamma(kind: RuleKind, gamma: Option<T>) -> Result<Self> {
        match (kind, gamma) {
            (RuleKind::RetNet, Some(g)) if g > T::zero() && g <= T::one() => {
                Ok(Self { kind, gamma })
            }
            (RuleKind::RetNet, Some(g)) => invalid(format!("RetNet gamma {g} outside (0, 1]")),
            (RuleKind::RetNet, None) => invalid("RetNet requires gamma"),
            (_, Some(_)) => invalid(format!("gamma is only meaningful for RetNet, not {kind}")),
            (_, None) => Ok(Self { kind, gamma }),
        }
    }

    pub fn retnet(gamma: T) -> Result<Self> {
        Self::with_gamma(RuleKind::RetNet, Some(gamma))
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    pub fn gamma(&self) -> Option<T> {
        self.gamma
    }

    pub fn cast<U: Scalar>(&self) -> UpdateRule<U> {
        UpdateRule { kind: self.kind, gamma: self.gamma.map(|g| U::of(g.as_f64())) }
    }
}

/// Data-dependent gates for one token. Which fields must be set depends on
/// the rule kind, see [`RuleKind::gate_shape`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateValues<T> {
    pub a_scalar: Option<T>,
    pub a_vector: Option<Vec<T>>,
    pub b_scalar: Option<T>,
}

impl<T: Scalar> GateValues<T> {
    pub fn none() -> Self {
        Self { a_scalar: None, a_vector: None, b_scalar: None }
    }

    pub fn with_a(mut self, a: T) -> Self {
        self.a_scalar = Some(a);
        self
    }

    pub fn with_a_vector(mut self, a: Vec<T>) -> Self {
        self.a_vector = Some(a);
        self
    }

    pub fn with_b(mut self, b: T) -> Self {
        self.b_scalar = Some(b);
        self
    }

    fn validate(&self, kind: RuleKind, d_k: usize) -> Result<()> {
        let shape = kind.gate_shape();
        check_presence("a_scalar", shape.a_scalar, self.a_scalar.is_some(), kind)?;
        check_presence("a_vector", shape.a_vector, self.a_vector.is_some(), kind)?;
        check_presence("b_scalar", shape.b_scalar, self.b_scalar.is_some(), kind)?;
        if let Some(a) = self.a_scalar {
            check_gate_range("a_scalar", a)?;
        }
        if let Some(b) = self.b_scalar {
            check_gate_range("b_scalar", b)?;
        }
        if let Some(av) = &self.a_vector {
            if av.len() != d_k {
                return invalid(format!("a_vector has length {}, expected {d_k}", av.len()));
            }
            for a in av {
                check_gate_range("a_vector", *a)?;
            }
        }
        Ok(())
    }
}

fn check_presence(name: &str, required: bool, present: bool, kind: RuleKind) -> Result<()> {
    match (required, present) {
        (true, false) => invalid(format!("{kind} requires gate {name}")),
        (false, true) => invalid(format!("{kind} does not take gate {name}")),
        _ => Ok(()),
    }
}

// Closed at both ends: pinned gates (a = 1) are legal, and a saturated
// sigmoid rounds to exactly 0 or 1 in single precision.
fn check_gate_range<T: Scalar>(name: &str, g: T) -> Result<()> {
    if g.is_finite() && g >= T::zero() && g <= T::one() {
        Ok(())
    } else {
        invalid(format!("gate {name} = {g} outside [0, 1]"))
    }
}

/// One memory's recurrent state, a `d_k × d_v` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState<T> {
    data: Matrix<T>,
}

impl<T: Scalar> MemoryState<T> {
    pub fn zeros(d_k: usize, d_v: usize) -> Self {
        Self { data: Matrix::zeros(d_k, d_v) }
    }

    pub fn from_matrix(data: Matrix<T>) -> Self {
        Self { data }
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.data
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix<T> {
        &mut self.data
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.data
    }

    pub fn d_k(&self) -> usize {
        self.data.rows()
    }

    pub fn d_v(&self) -> usize {
        self.data.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.data.is_finite()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.data.shape() == other.data.shape()
            && self
                .data
                .as_slice()
                .iter()
                .zip(other.data.as_slice())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

fn validate_inputs<T: Scalar>(
    rule: &UpdateRule<T>,
    state: &MemoryState<T>,
    k: &[T],
    v: &[T],
    gates: &GateValues<T>,
) -> Result<()> {
    if k.len() != state.d_k() || v.len() != state.d_v() {
        return invalid(format!(
            "key/value lengths ({}, {}) do not match state {}x{}",
            k.len(),
            v.len(),
            state.d_k(),
            state.d_v()
        ));
    }
    if !k.iter().chain(v).all(|x| x.is_finite()) {
        return invalid("non-finite key or value");
    }
    gates.validate(rule.kind, state.d_k())?;
    if rule.kind.needs_unit_keys() {
        let tol = T::epsilon().sqrt();
        let norm = l2_norm(k);
        if norm > T::one() + tol {
            return invalid(format!("{} expects L2-normalized keys, got norm {norm}", rule.kind));
        }
    }
    Ok(())
}

/// Apply one transition in place. Inputs are validated first, so on error
/// the state is untouched.
pub fn step_in_place<T: Scalar>(
    rule: &UpdateRule<T>,
    state: &mut MemoryState<T>,
    k: &[T],
    v: &[T],
    gates: &GateValues<T>,
) -> Result<()> {
    validate_inputs(rule, state, k, v, gates)?;
    let m = &mut state.data;
    let one = T::one();
    match rule.kind {
        RuleKind::LinearAttn => m.add_outer(one, k, v),
        RuleKind::RetNet => {
            m.scale(rule.gamma.expect("RetNet gamma checked at construction"));
            m.add_outer(one, k, v);
        }
        RuleKind::Gla => {
            scale_rows(m, gates.a_vector.as_deref().unwrap());
            m.add_outer(one, k, v);
        }
        RuleKind::DeltaNet => {
            let b = gates.b_scalar.unwrap();
            let u = m.left_mul(k);
            let w: Vec<T> = v.iter().zip(&u).map(|(vi, ui)| b * *vi - *ui).collect();
            m.add_outer(one, k, &w);
        }
        RuleKind::GatedDeltaNet => {
            let (a, b) = (gates.a_scalar.unwrap(), gates.b_scalar.unwrap());
            let u = m.left_mul(k);
            let w: Vec<T> = v.iter().zip(&u).map(|(vi, ui)| b * *vi - a * *ui).collect();
            m.scale(a);
            m.add_outer(one, k, &w);
        }
        RuleKind::Mamba2 => {
            let (a, b) = (gates.a_scalar.unwrap(), gates.b_scalar.unwrap());
            m.scale(a);
            m.add_outer(b, k, v);
        }
        RuleKind::Hgrn2 => {
            let a = gates.a_vector.as_deref().unwrap();
            let forget: Vec<T> = a.iter().map(|ai| one - *ai).collect();
            scale_rows(m, a);
            m.add_outer(one, &forget, v);
        }
        RuleKind::Rwkv6 => {
            m.scale(gates.a_scalar.unwrap());
            m.add_outer(one, k, v);
        }
        RuleKind::Ttt => {
            let w = regression_step(m, k, v, gates.b_scalar.unwrap());
            m.add_outer(one, k, &w);
        }
        RuleKind::Titans => {
            let w = regression_step(m, k, v, gates.b_scalar.unwrap());
            m.scale(gates.a_scalar.unwrap());
            m.add_outer(one, k, &w);
        }
        RuleKind::Rwkv7 => {
            let w = regression_step(m, k, v, gates.b_scalar.unwrap());
            scale_rows(m, gates.a_vector.as_deref().unwrap());
            m.add_outer(one, k, &w);
        }
    }
    Ok(())
}

/// `b·(v − kM)`: minus `b` times the row factor of `∇_M ℓ = kᵀ(kM − v)`,
/// evaluated at the pre-update state.
fn regression_step<T: Scalar>(m: &Matrix<T>, k: &[T], v: &[T], b: T) -> Vec<T> {
    let u = m.left_mul(k);
    v.iter().zip(&u).map(|(vi, ui)| b * (*vi - *ui)).collect()
}

fn scale_rows<T: Scalar>(m: &mut Matrix<T>, a: &[T]) {
    for (i, ai) in a.iter().enumerate() {
        m.row_mut(i).iter_mut().for_each(|x| *x *= *ai);
    }
}

/// Pure single-step transition; the input state is left untouched.
pub fn step<T: Scalar>(
    rule: &UpdateRule<T>,
    state: &MemoryState<T>,
    k: &[T],
    v: &[T],
    gates: &GateValues<T>,
) -> Result<MemoryState<T>> {
    let mut next = state.clone();
    step_in_place(rule, &mut next, k, v, gates)?;
    Ok(next)
}

/// Query readout `q · M`.
pub fn read<T: Scalar>(state: &MemoryState<T>, q: &[T]) -> Result<Vec<T>> {
    if q.len() != state.d_k() {
        return invalid(format!("query length {} does not match d_k = {}", q.len(), state.d_k()));
    }
    Ok(state.data.left_mul(q))
}

/// Every intermediate state of the recurrence started at `initial`:
/// element `t` is the state after `t + 1` steps.
pub fn scan<T: Scalar>(
    rule: &UpdateRule<T>,
    initial: &MemoryState<T>,
    keys: &Matrix<T>,
    values: &Matrix<T>,
    gates: &[GateValues<T>],
) -> Result<Vec<MemoryState<T>>> {
    let len = keys.rows();
    if values.rows() != len || gates.len() != len {
        return invalid(format!(
            "scan lengths disagree: {} keys, {} values, {} gates",
            len,
            values.rows(),
            gates.len()
        ));
    }
    let mut out = Vec::with_capacity(len);
    let mut current = initial.clone();
    for t in 0..len {
        step_in_place(rule, &mut current, keys.row(t), values.row(t), &gates[t])?;
        out.push(current.clone());
    }
    Ok(out)
}

/// `k·M − v`, the residual of the online regression objective.
pub fn recall_residual<T: Scalar>(state: &MemoryState<T>, k: &[T], v: &[T]) -> Vec<T> {
    let u = state.data.left_mul(k);
    u.iter().zip(v).map(|(a, b)| *a - *b).collect()
}

/// `½‖kM − v‖²`
pub fn regression_loss<T: Scalar>(state: &MemoryState<T>, k: &[T], v: &[T]) -> T {
    let r = recall_residual(state, k, v);
    T::of(0.5) * dot(&r, &r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[Vec<f64>]) -> MemoryState<f64> {
        MemoryState::from_matrix(Matrix::from_rows(rows).unwrap())
    }

    fn gates_for(kind: RuleKind, d_k: usize, rng: &mut ChaCha8Rng) -> GateValues<f64> {
        let shape = kind.gate_shape();
        let mut g = GateValues::none();
        if shape.a_scalar {
            g = g.with_a(rng.gen_range(0.05..0.95));
        }
        if shape.a_vector {
            g = g.with_a_vector((0..d_k).map(|_| rng.gen_range(0.05..0.95)).collect());
        }
        if shape.b_scalar {
            g = g.with_b(rng.gen_range(0.05..0.95));
        }
        g
    }

    fn unit(mut k: Vec<f64>) -> Vec<f64> {
        let n = l2_norm(&k);
        k.iter_mut().for_each(|x| *x /= n);
        k
    }

    #[test]
    fn linear_attn_onto_zero_state() {
        let rule = UpdateRule::new(RuleKind::LinearAttn);
        let out = step(&rule, &MemoryState::zeros(2, 2), &[1.0, 0.0], &[2.0, 3.0], &GateValues::none())
            .unwrap();
        assert_eq!(out, mat(&[vec![2.0, 3.0], vec![0.0, 0.0]]));
    }

    #[test]
    fn retnet_half_decay() {
        let rule = UpdateRule::retnet(0.5).unwrap();
        let m = mat(&[vec![2.0, 3.0], vec![0.0, 0.0]]);
        let out = step(&rule, &m, &[0.0, 1.0], &[1.0, 1.0], &GateValues::none()).unwrap();
        assert_eq!(out, mat(&[vec![1.0, 1.5], vec![1.0, 1.0]]));
    }

    #[test]
    fn delta_net_overwrites_row() {
        let rule = UpdateRule::new(RuleKind::DeltaNet);
        let m = mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let out = step(&rule, &m, &[1.0, 0.0], &[5.0, 7.0], &GateValues::none().with_b(1.0)).unwrap();
        assert_eq!(out, mat(&[vec![5.0, 7.0], vec![3.0, 4.0]]));
    }

    #[test]
    fn read_examples() {
        let m = mat(&[vec![2.0, 3.0], vec![9.0, 9.0]]);
        assert_eq!(read(&m, &[1.0, 0.0]).unwrap(), vec![2.0, 3.0]);
        assert_eq!(read(&m, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let m = mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(read(&m, &[1.0, 1.0]).unwrap(), vec![4.0, 6.0]);
        assert!(read(&m, &[1.0]).is_err());
    }

    #[test]
    fn scan_edge_cases() {
        let rule = UpdateRule::new(RuleKind::LinearAttn);
        let m0 = MemoryState::<f64>::zeros(2, 3);
        let empty = scan(&rule, &m0, &Matrix::zeros(0, 2), &Matrix::zeros(0, 3), &[]).unwrap();
        assert!(empty.is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let keys = Matrix::<f64>::uniform(3, 2, 1.0, &mut rng);
        let values = Matrix::<f64>::uniform(3, 3, 1.0, &mut rng);
        let gates = vec![GateValues::none(); 3];
        let states = scan(&rule, &m0, &keys, &values, &gates).unwrap();
        assert_eq!(states[0], step(&rule, &m0, keys.row(0), values.row(0), &gates[0]).unwrap());

        let mut closed = Matrix::zeros(2, 3);
        for t in 0..3 {
            closed.add_outer(1.0, keys.row(t), values.row(t));
        }
        assert!(states[2].matrix().max_abs_diff(&closed) < 1e-14);
    }

    #[test]
    fn gate_presence_is_enforced() {
        let m = MemoryState::<f64>::zeros(2, 2);
        let k = [0.6, 0.8];
        let v = [1.0, 1.0];
        let gla = UpdateRule::new(RuleKind::Gla);
        assert!(step(&gla, &m, &k, &v, &GateValues::none()).is_err());
        assert!(step(&gla, &m, &k, &v, &GateValues::none().with_a_vector(vec![0.5; 2]).with_b(0.5))
            .is_err());
        let mamba = UpdateRule::new(RuleKind::Mamba2);
        assert!(step(&mamba, &m, &k, &v, &GateValues::none().with_a(0.5)).is_err());
        assert!(step(&mamba, &m, &k, &v, &GateValues::none().with_a(0.5).with_b(0.5)).is_ok());
        assert!(step(&mamba, &m, &k, &v, &GateValues::none().with_a(1.5).with_b(0.5)).is_err());
        let lin = UpdateRule::new(RuleKind::LinearAttn);
        assert!(step(&lin, &m, &k, &v, &GateValues::none().with_a(0.5)).is_err());
    }

    #[test]
    fn shape_and_norm_errors() {
        let m = MemoryState::<f64>::zeros(2, 2);
        let lin = UpdateRule::new(RuleKind::LinearAttn);
        assert!(step(&lin, &m, &[1.0], &[1.0, 1.0], &GateValues::none()).is_err());
        assert!(step(&lin, &m, &[f64::NAN, 0.0], &[1.0, 1.0], &GateValues::none()).is_err());
        let delta = UpdateRule::new(RuleKind::DeltaNet);
        assert!(step(&delta, &m, &[2.0, 0.0], &[1.0, 1.0], &GateValues::none().with_b(0.5)).is_err());
    }

    #[test]
    fn gamma_only_for_retnet() {
        assert!(UpdateRule::<f64>::with_gamma(RuleKind::RetNet, None).is_err());
        assert!(UpdateRule::<f64>::with_gamma(RuleKind::Gla, Some(0.5)).is_err());
        assert!(UpdateRule::<f64>::retnet(1.5).is_err());
        assert_eq!(UpdateRule::<f64>::new(RuleKind::RetNet).gamma(), Some(0.9));
        assert_eq!(UpdateRule::<f64>::new(RuleKind::Gla).gamma(), None);
    }

    #[test]
    fn rule_names_round_trip() {
        for kind in RuleKind::ALL {
            assert_eq!(kind.name().parse::<RuleKind>().unwrap(), kind);
        }
        assert_eq!("GatedDeltaNet".parse::<RuleKind>().unwrap(), RuleKind::GatedDeltaNet);
        assert!("lstm".parse::<RuleKind>().is_err());
    }

    #[test]
    fn gradient_rules_descend_regression_loss() {
        // A small descent step on ½‖kM − v‖² must not increase it.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in [RuleKind::Ttt, RuleKind::DeltaNet] {
            let rule = UpdateRule::new(kind);
            let m = MemoryState::from_matrix(Matrix::uniform(4, 3, 1.0, &mut rng));
            let k = unit((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let next = step(&rule, &m, &k, &v, &GateValues::none().with_b(0.3)).unwrap();
            assert!(regression_loss(&next, &k, &v) <= regression_loss(&m, &k, &v));
        }
    }

    #[test]
    fn every_rule_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in RuleKind::ALL {
            let rule = UpdateRule::new(kind);
            let mut m = MemoryState::zeros(4, 5);
            for _ in 0..200 {
                let k = unit((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
                let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let g = gates_for(kind, 4, &mut rng);
                step_in_place(&rule, &mut m, &k, &v, &g).unwrap();
            }
            assert!(m.is_finite(), "{kind}");
        }
    }

    proptest! {
        #[test]
        fn step_is_pure_and_repeatable(seed in any::<u64>(), kind_idx in 0usize..11) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kind = RuleKind::ALL[kind_idx];
            let rule = UpdateRule::new(kind);
            let m = MemoryState::from_matrix(Matrix::uniform(3, 4, 1.0, &mut rng));
            let before = m.clone();
            let k = unit((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = gates_for(kind, 3, &mut rng);
            let a = step(&rule, &m, &k, &v, &g).unwrap();
            let b = step(&rule, &m, &k, &v, &g).unwrap();
            prop_assert!(m.bit_identical(&before));
            prop_assert!(a.bit_identical(&b));
        }

        #[test]
        fn read_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m1 = Matrix::<f64>::uniform(4, 3, 1.0, &mut rng);
            let m2 = Matrix::<f64>::uniform(4, 3, 1.0, &mut rng);
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut mix = m1.clone();
            mix.scale(alpha);
            mix.add_scaled(beta, &m2);
            let lhs = read(&MemoryState::from_matrix(mix), &q).unwrap();
            let r1 = read(&MemoryState::from_matrix(m1), &q).unwrap();
            let r2 = read(&MemoryState::from_matrix(m2), &q).unwrap();
            for j in 0..3 {
                let rhs = alpha * r1[j] + beta * r2[j];
                prop_assert!((lhs[j] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
        }
    }
}
