//! One mixture-of-memories token-mixing layer.
//!
//! Per token: route, update the selected memories (and the shared memory)
//! with their own key/value projections, mix the updated states with the
//! routing weights, read the mixture with a shared query projection, then
//! RMS-normalize and project out.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kernels::{read, step_in_place, GateValues, MemoryState, RuleKind, UpdateRule};
use crate::params::Parameters;
use crate::router::{route, route_with_selection, RouterDecision, RouterParams};
use crate::scalar::Scalar;
use crate::tensor::{l2_norm, rms_norm, Matrix};

/// Added under the square root when L2-normalizing keys, so a zero key maps to zero.
pub const KEY_NORM_EPS: f64 = 1e-12;

fn default_norm_eps() -> f64 {
    1e-6
}

fn default_decay_bias() -> f64 {
    2.0
}

/// Shape and rule of a layer, as written in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub num_memories: usize,
    pub top_k: usize,
    pub shared_memory: bool,
    pub rule: RuleKind,
    /// RetNet decay; defaults to 0.9 when the rule is RetNet.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    /// Initial bias of the decay gate `a`; `sigmoid(2) ≈ 0.88`.
    #[serde(default = "default_decay_bias")]
    pub decay_bias: f64,
}

impl LayerConfig {
    /// Square single-head layout with the given rule.
    pub fn new(d: usize, num_memories: usize, top_k: usize, shared_memory: bool, rule: RuleKind) -> Self {
        Self {
            d,
            d_k: d,
            d_v: d,
            num_memories,
            top_k,
            shared_memory,
            rule,
            gamma: None,
            norm_eps: default_norm_eps(),
            decay_bias: default_decay_bias(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_k == 0 || self.d_v == 0 {
            return invalid("layer dimensions must be positive");
        }
        if self.num_memories == 0 || self.top_k == 0 || self.top_k > self.num_memories {
            return invalid(format!(
                "top_k = {} must lie in [1, num_memories = {}]",
                self.top_k, self.num_memories
            ));
        }
        if self.norm_eps <= 0.0 {
            return invalid("norm_eps must be positive");
        }
        self.update_rule::<f64>().map(|_| ())
    }

    pub fn update_rule<T: Scalar>(&self) -> Result<UpdateRule<T>> {
        match (self.rule, self.gamma) {
            (RuleKind::RetNet, None) => Ok(UpdateRule::new(RuleKind::RetNet)),
            (kind, gamma) => UpdateRule::with_gamma(kind, gamma.map(T::of)),
        }
    }
}

/// `sigmoid(x·W + bias)`
#[derive(Clone, Debug, PartialEq)]
pub struct Gate<T> {
    pub w: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Gate<T> {
    fn init<R: Rng + ?Sized>(d: usize, width: usize, bias: f64, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self { w: Matrix::uniform(d, width, bound, rng), bias: vec![T::of(bias); width] }
    }

    pub fn width(&self) -> usize {
        self.bias.len()
    }

    pub fn pre_activation(&self, x: &[T]) -> Vec<T> {
        let mut z = self.w.left_mul(x);
        z.iter_mut().zip(&self.bias).for_each(|(z, b)| *z += *b);
        z
    }

    fn cast<U: Scalar>(&self) -> Gate<U> {
        Gate { w: self.w.cast(), bias: self.bias.iter().map(|b| U::of(b.as_f64())).collect() }
    }
}

/// Key/value projections and gate maps of one memory.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryProjection<T> {
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    /// Decay gate `a`, scalar or per key channel depending on the rule.
    pub decay: Option<Gate<T>>,
    /// Write strength `b`.
    pub write: Option<Gate<T>>,
}

impl<T: Scalar> MemoryProjection<T> {
    fn init<R: Rng + ?Sized>(cfg: &LayerConfig, rng: &mut R) -> Self {
        let bound = 1.0 / (cfg.d as f64).sqrt();
        let shape = cfg.rule.gate_shape();
        let decay = if shape.a_vector {
            Some(Gate::init(cfg.d, cfg.d_k, cfg.decay_bias, rng))
        } else if shape.a_scalar {
            Some(Gate::init(cfg.d, 1, cfg.decay_bias, rng))
        } else {
            None
        };
        let write = shape.b_scalar.then(|| Gate::init(cfg.d, 1, 0.0, rng));
        Self {
            w_k: Matrix::uniform(cfg.d, cfg.d_k, bound, rng),
            w_v: Matrix::uniform(cfg.d, cfg.d_v, bound, rng),
            decay,
            write,
        }
    }

    fn cast<U: Scalar>(&self) -> MemoryProjection<U> {
        MemoryProjection {
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            decay: self.decay.as_ref().map(Gate::cast),
            write: self.write.as_ref().map(Gate::cast),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&format!("{prefix}.w_k"), self.w_k.as_slice());
        f(&format!("{prefix}.w_v"), self.w_v.as_slice());
        if let Some(g) = &self.decay {
            f(&format!("{prefix}.decay.w"), g.w.as_slice());
            f(&format!("{prefix}.decay.bias"), &g.bias);
        }
        if let Some(g) = &self.write {
            f(&format!("{prefix}.write.w"), g.w.as_slice());
            f(&format!("{prefix}.write.bias"), &g.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&format!("{prefix}.w_k"), self.w_k.as_mut_slice());
        f(&format!("{prefix}.w_v"), self.w_v.as_mut_slice());
        if let Some(g) = &mut self.decay {
            f(&format!("{prefix}.decay.w"), g.w.as_mut_slice());
            f(&format!("{prefix}.decay.bias"), &mut g.bias);
        }
        if let Some(g) = &mut self.write {
            f(&format!("{prefix}.write.w"), g.w.as_mut_slice());
            f(&format!("{prefix}.write.bias"), &mut g.bias);
        }
    }
}

/// A token projected for one memory.
#[derive(Clone, Debug)]
pub struct Projected<T> {
    /// `x·W_k` before normalization.
    pub key_raw: Vec<T>,
    /// Key handed to the update rule (L2-normalized for the delta family).
    pub key: Vec<T>,
    pub value: Vec<T>,
    pub decay_pre: Option<Vec<T>>,
    pub write_pre: Option<T>,
    pub gates: GateValues<T>,
}

/// Project `x` into the key, value and gates one memory consumes.
pub fn project<T: Scalar>(proj: &MemoryProjection<T>, rule: &UpdateRule<T>, x: &[T]) -> Projected<T> {
    let kind = rule.kind();
    let key_raw = proj.w_k.left_mul(x);
    let key = if kind.needs_unit_keys() {
        let inv = (l2_norm(&key_raw).powi(2) + T::of(KEY_NORM_EPS)).sqrt().recip();
        key_raw.iter().map(|k| *k * inv).collect()
    } else {
        key_raw.clone()
    };
    let value = proj.w_v.left_mul(x);
    let shape = kind.gate_shape();
    let mut gates = GateValues::none();
    let decay_pre = proj.decay.as_ref().map(|g| g.pre_activation(x));
    if let Some(z) = &decay_pre {
        if shape.a_vector {
            gates.a_vector = Some(z.iter().map(|v| v.sigmoid()).collect());
        } else {
            gates.a_scalar = Some(z[0].sigmoid());
        }
    }
    let write_pre = proj.write.as_ref().map(|g| g.pre_activation(x)[0]);
    gates.b_scalar = write_pre.map(Scalar::sigmoid);
    Projected { key_raw, key, value, decay_pre, write_pre, gates }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomLayerParams<T> {
    pub router: RouterParams<T>,
    /// Query projection shared by all memories, `d × d_k`.
    pub w_q: Matrix<T>,
    pub memories: Vec<MemoryProjection<T>>,
    pub shared: Option<MemoryProjection<T>>,
    pub rule: UpdateRule<T>,
    /// Output projection, `d_v × d`.
    pub w_o: Matrix<T>,
    pub norm_eps: T,
}

impl<T: Scalar> MomLayerParams<T> {
    /// Projections uniform in `±1/sqrt(fan_in)`; gate biases from the config.
    pub fn init<R: Rng + ?Sized>(cfg: &LayerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let router = RouterParams::init(cfg.d, cfg.num_memories, cfg.top_k, rng)?;
        let w_q = Matrix::uniform(cfg.d, cfg.d_k, 1.0 / (cfg.d as f64).sqrt(), rng);
        let memories = (0..cfg.num_memories).map(|_| MemoryProjection::init(cfg, rng)).collect();
        let shared = cfg.shared_memory.then(|| MemoryProjection::init(cfg, rng));
        let w_o = Matrix::uniform(cfg.d_v, cfg.d, 1.0 / (cfg.d_v as f64).sqrt(), rng);
        Ok(Self {
            router,
            w_q,
            memories,
            shared,
            rule: cfg.update_rule()?,
            w_o,
            norm_eps: T::of(cfg.norm_eps),
        })
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.cols()
    }

    pub fn d_v(&self) -> usize {
        self.w_o.rows()
    }

    pub fn num_memories(&self) -> usize {
        self.memories.len()
    }

    pub fn top_k(&self) -> usize {
        self.router.top_k
    }

    pub fn validate(&self) -> Result<()> {
        let (d, d_k, d_v) = (self.d(), self.d_k(), self.d_v());
        if self.router.w_g.shape() != (d, self.memories.len()) {
            return invalid("router weights do not match d x M");
        }
        if self.w_o.cols() != d {
            return invalid("output projection does not map back to d");
        }
        let shape = self.rule.kind().gate_shape();
        for proj in self.memories.iter().chain(self.shared.as_ref()) {
            if proj.w_k.shape() != (d, d_k) || proj.w_v.shape() != (d, d_v) {
                return invalid("memory projection shape mismatch");
            }
            let decay_width = proj.decay.as_ref().map(Gate::width);
            let expected = if shape.a_vector {
                Some(d_k)
            } else if shape.a_scalar {
                Some(1)
            } else {
                None
            };
            if decay_width != expected || proj.write.is_some() != shape.b_scalar {
                return invalid(format!("gate projections do not match rule {}", self.rule.kind()));
            }
        }
        let mut finite = true;
        self.visit(&mut |_, t| finite &= t.iter().all(|x| x.is_finite()));
        if !finite {
            return invalid("non-finite parameter");
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> MomLayerParams<U> {
        MomLayerParams {
            router: RouterParams { w_g: self.router.w_g.cast(), top_k: self.router.top_k },
            w_q: self.w_q.cast(),
            memories: self.memories.iter().map(MemoryProjection::cast).collect(),
            shared: self.shared.as_ref().map(MemoryProjection::cast),
            rule: self.rule.cast(),
            w_o: self.w_o.cast(),
            norm_eps: U::of(self.norm_eps.as_f64()),
        }
    }

    pub fn zero_state(&self) -> MomState<T> {
        MomState {
            memories: vec![MemoryState::zeros(self.d_k(), self.d_v()); self.num_memories()],
            shared: self.shared.as_ref().map(|_| MemoryState::zeros(self.d_k(), self.d_v())),
        }
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.d() {
            return invalid(format!("layer input has length {}, expected {}", x.len(), self.d()));
        }
        Ok(())
    }
}

impl<T: Scalar> Parameters<T> for MomLayerParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[T])) {
        f("router.w_g", self.router.w_g.as_slice());
        f("w_q", self.w_q.as_slice());
        for (m, proj) in self.memories.iter().enumerate() {
            proj.visit(&format!("memory{m}"), f);
        }
        if let Some(proj) = &self.shared {
            proj.visit("shared", f);
        }
        f("w_o", self.w_o.as_slice());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        f("router.w_g", self.router.w_g.as_mut_slice());
        f("w_q", self.w_q.as_mut_slice());
        for (m, proj) in self.memories.iter_mut().enumerate() {
            proj.visit_mut(&format!("memory{m}"), f);
        }
        if let Some(proj) = &mut self.shared {
            proj.visit_mut("shared", f);
        }
        f("w_o", self.w_o.as_mut_slice());
    }
}

/// Recurrent state of one sequence: the routed memories plus the shared one.
#[derive(Clone, Debug, PartialEq)]
pub struct MomState<T> {
    pub memories: Vec<MemoryState<T>>,
    pub shared: Option<MemoryState<T>>,
}

impl<T: Scalar> MomState<T> {
    fn check(&self, params: &MomLayerParams<T>) -> Result<()> {
        let dims_ok = |s: &MemoryState<T>| s.d_k() == params.d_k() && s.d_v() == params.d_v();
        if self.memories.len() != params.num_memories()
            || self.shared.is_some() != params.shared.is_some()
            || !self.memories.iter().chain(self.shared.as_ref()).all(dims_ok)
        {
            return invalid("state does not match layer parameters");
        }
        Ok(())
    }
}

/// RMS-normalize the readout and project it back to the model width.
pub fn output_head<T: Scalar>(o: &[T], params: &MomLayerParams<T>) -> Result<Vec<T>> {
    if o.len() != params.d_v() {
        return invalid(format!("readout has length {}, expected {}", o.len(), params.d_v()));
    }
    let (normed, _) = rms_norm(o, params.norm_eps);
    Ok(params.w_o.left_mul(&normed))
}

#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub y: Vec<T>,
    pub decision: RouterDecision<T>,
}

/// Advance `state` by one token. With `selection`, the router's top-k choice
/// is replaced by the given memory indices (weights still follow the softmax).
pub fn forward_step_in_place<T: Scalar>(
    params: &MomLayerParams<T>,
    state: &mut MomState<T>,
    x: &[T],
    selection: Option<&[usize]>,
) -> Result<StepOutput<T>> {
    params.check_input(x)?;
    state.check(params)?;
    let decision = match selection {
        None => route(x, &params.router)?,
        Some(sel) => route_with_selection(&params.router.logits(x), sel)?,
    };

    for &m in &decision.indices {
        let p = project(&params.memories[m], &params.rule, x);
        step_in_place(&params.rule, &mut state.memories[m], &p.key, &p.value, &p.gates)?;
    }
    if let (Some(proj), Some(shared)) = (&params.shared, &mut state.shared) {
        let p = project(proj, &params.rule, x);
        step_in_place(&params.rule, shared, &p.key, &p.value, &p.gates)?;
    }

    let mut mixed = match &state.shared {
        Some(s) => s.matrix().clone(),
        None => Matrix::zeros(params.d_k(), params.d_v()),
    };
    for (&m, &g) in decision.indices.iter().zip(&decision.weights) {
        mixed.add_scaled(g, state.memories[m].matrix());
    }
    let q = params.w_q.left_mul(x);
    let o = read(&MemoryState::from_matrix(mixed), &q)?;
    let y = output_head(&o, params)?;
    Ok(StepOutput { y, decision })
}

/// Pure single-token forward: returns the output and the advanced state.
pub fn forward_step<T: Scalar>(
    params: &MomLayerParams<T>,
    state: &MomState<T>,
    x: &[T],
) -> Result<(Vec<T>, MomState<T>)> {
    let mut next = state.clone();
    let out = forward_step_in_place(params, &mut next, x, None)?;
    Ok((out.y, next))
}

#[derive(Clone, Debug)]
pub struct SequenceOutput<T> {
    /// `T × d` outputs.
    pub y: Matrix<T>,
    pub decisions: Vec<RouterDecision<T>>,
}

/// Token-by-token reference forward from a zero state.
pub fn forward_sequence_naive<T: Scalar>(params: &MomLayerParams<T>, xs: &Matrix<T>) -> Result<SequenceOutput<T>> {
    run_sequence(params, xs, None)
}

/// Reference forward with the routing selection pinned per token.
pub fn forward_sequence_frozen<T: Scalar>(
    params: &MomLayerParams<T>,
    xs: &Matrix<T>,
    selections: &[Vec<usize>],
) -> Result<SequenceOutput<T>> {
    if selections.len() != xs.rows() {
        return invalid("one selection per token required");
    }
    run_sequence(params, xs, Some(selections))
}

fn run_sequence<T: Scalar>(
    params: &MomLayerParams<T>,
    xs: &Matrix<T>,
    selections: Option<&[Vec<usize>]>,
) -> Result<SequenceOutput<T>> {
    if xs.rows() == 0 {
        return invalid("sequence must contain at least one token");
    }
    let mut state = params.zero_state();
    let mut y = Matrix::zeros(xs.rows(), params.d());
    let mut decisions = Vec::with_capacity(xs.rows());
    for t in 0..xs.rows() {
        let sel = selections.map(|s| s[t].as_slice());
        let out = forward_step_in_place(params, &mut state, xs.row(t), sel)?;
        y.row_mut(t).copy_from_slice(&out.y);
        decisions.push(out.decision);
    }
    Ok(SequenceOutput { y, decisions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{scan, step};
    use crate::tensor::{dot, max_abs_diff, softmax};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(t: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::uniform(t, d, 1.0, rng)
    }

    #[test]
    fn all_selected_identical_memories_equal_single_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = LayerConfig::new(5, 3, 3, false, RuleKind::LinearAttn);
        let mut params = MomLayerParams::<f64>::init(&cfg, &mut rng).unwrap();
        let first = params.memories[0].clone();
        params.memories.iter_mut().for_each(|m| *m = first.clone());
        let single_cfg = LayerConfig::new(5, 1, 1, false, RuleKind::LinearAttn);
        let mut single = MomLayerParams::<f64>::init(&single_cfg, &mut rng).unwrap();
        single.memories[0] = first;
        single.w_q = params.w_q.clone();
        single.w_o = params.w_o.clone();

        let xs = random_input(6, 5, &mut rng);
        let a = forward_sequence_naive(&params, &xs).unwrap();
        let b = forward_sequence_naive(&single, &xs).unwrap();
        assert!(a.y.max_abs_diff(&b.y) < 1e-12);
    }

    #[test]
    fn zero_input_leaves_linear_memories_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = LayerConfig::new(4, 4, 2, true, RuleKind::LinearAttn);
        let params = MomLayerParams::<f64>::init(&cfg, &mut rng).unwrap();
        let state = params.zero_state();
        let (y, next) = forward_step(&params, &state, &[0.0; 4]).unwrap();
        assert_eq!(next, state);
        assert_eq!(y, output_head(&[0.0; 4], &params).unwrap());
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_head_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = LayerConfig::new(3, 2, 1, false, RuleKind::LinearAttn);
        cfg.d_v = 4;
        let mut params = MomLayerParams::<f64>::init(&cfg, &mut rng).unwrap();
        params.w_o = Matrix::zeros(4, 3);
        for i in 0..3 {
            params.w_o[(i, i)] = 1.0;
        }
        params.norm_eps = 1e-12;
        let y = output_head(&[2.5; 4], &params).unwrap();
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-9));

        params.norm_eps = 1e-6;
        let o: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let (normed, _) = rms_norm(&o, params.norm_eps);
        let rms = (dot(&normed, &normed) / 4.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-6);
        assert!(output_head(&[1.0; 3], &params).is_err());
    }

    #[test]
    fn single_memory_without_shared_matches_plain_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in RuleKind::ALL {
            let cfg = LayerConfig::new(4, 1, 1, false, kind);
            let params = MomLayerParams::<f64>::init(&cfg, &mut rng).unwrap();
            let xs = random_input(7, 4, &mut rng);
            let mom = forward_sequence_naive(&params, &xs).unwrap();

            let mut keys = Matrix::zeros(7, 4);
            let mut values = Matrix::zeros(7, 4);
            let mut gates = Vec::new();
            for t in 0..7 {
                let p = project(&params.memories[0], &params.rule, xs.row(t));
                keys.row_mut(t).copy_from_slice(&p.key);
                values.row_mut(t).copy_from_slice(&p.value);
                gates.push(p.gates);
            }
            let states = scan(&params.rule, &MemoryState::zeros(4, 4), &keys, &values, &gates).unwrap();
            for t in 0..7 {
                let o = read(&states[t], &params.w_q.left_mul(xs.row(t))).unwrap();
                let y = output_head(&o, &params).unwrap();
                assert_eq!(y.as_slice(), mom.y.row(t), "{kind}");
            }
        }
    }

    /// Straight-line transcription of route → project → update → mix → read
    /// → head, written without any of the layer's helpers.
    fn transcribed_step(
        params: &MomLayerParams<f64>,
        mems: &mut [Matrix<f64>],
        shared: &mut Option<Matrix<f64>>,
        x: &[f64],
    ) -> Vec<f64> {
        let (d, d_k, d_v) = (params.d(), params.d_k(), params.d_v());
        let n_mem = params.num_memories();
        let mut logits = vec![0.0; n_mem];
        for m in 0..n_mem {
            for i in 0..d {
                logits[m] += x[i] * params.router.w_g[(i, m)];
            }
        }
        let probs = softmax(&logits);
        let mut order: Vec<usize> = (0..n_mem).collect();
        order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
        let chosen = &order[..params.top_k()];
        let total: f64 = chosen.iter().map(|&m| probs[m]).sum();

        let update = |proj: &MemoryProjection<f64>, mat: &mut Matrix<f64>| {
            let mut k = vec![0.0; d_k];
            let mut v = vec![0.0; d_v];
            for i in 0..d {
                for j in 0..d_k {
                    k[j] += x[i] * proj.w_k[(i, j)];
                }
                for j in 0..d_v {
                    v[j] += x[i] * proj.w_v[(i, j)];
                }
            }
            let norm = (k.iter().map(|z| z * z).sum::<f64>() + KEY_NORM_EPS).sqrt();
            k.iter_mut().for_each(|z| *z /= norm);
            let gate = |g: &Gate<f64>| {
                let mut z = g.bias[0];
                for i in 0..d {
                    z += x[i] * g.w[(i, 0)];
                }
                1.0 / (1.0 + (-z).exp())
            };
            let a = gate(proj.decay.as_ref().unwrap());
            let b = gate(proj.write.as_ref().unwrap());
            // a (I - kᵀk) M + b kᵀv
            let old = mat.clone();
            for r in 0..d_k {
                for c in 0..d_v {
                    let mut proj_term = 0.0;
                    for s in 0..d_k {
                        proj_term += k[r] * k[s] * old[(s, c)];
                    }
                    mat[(r, c)] = a * (old[(r, c)] - proj_term) + b * k[r] * v[c];
                }
            }
        };
        for &m in chosen {
            update(&params.memories[m], &mut mems[m]);
        }
        if let (Some(p), Some(s)) = (&params.shared, shared.as_mut()) {
            update(p, s);
        }

        let mut q = vec![0.0; d_k];
        for i in 0..d {
            for j in 0..d_k {
                q[j] += x[i] * params.w_q[(i, j)];
            }
        }
        let mut o = vec![0.0; d_v];
        for c in 0..d_v {
            for r in 0..d_k {
                let mut entry = shared.as_ref().map_or(0.0, |s| s[(r, c)]);
                for &m in chosen {
                    entry += probs[m] / total * mems[m][(r, c)];
                }
                o[c] += q[r] * entry;
            }
        }
        let rms = (o.iter().map(|z| z * z).sum::<f64>() / d_v as f64 + params.norm_eps).sqrt();
        let mut y = vec![0.0; d];
        for c in 0..d_v {
            for j in 0..d {
                y[j] += o[c] / rms * params.w_o[(c, j)];
            }
        }
        y
    }

    #[test]
    fn matches_transcribed_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut cfg = LayerConfig::new(6, 4, 2, true, RuleKind::GatedDeltaNet);
        cfg.d_k = 5;
        cfg.d_v = 3;
        let params = MomLayerParams::<f64>::init(&cfg, &mut rng).unwrap();
        let xs = random_input(12, 6, &mut rng);
        let out = forward_sequence_naive(&params, &xs).unwrap();

        let mut mems = vec![Matrix::zeros(5, 3); 4];
        let mut shared = Some(Matrix::zeros(5, 3));
        for t in 0..12 {
            let y = transcribed_step(&params, &mut mems, &mut shared, xs.row(t));
            assert!(max_abs_diff(&y, out.y.row(t)) < 1e-12, "token {t}");
        }
    }

    #[test]
    fn unselected_memories_are_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = LayerConfig::new(5, 6, 2, true, RuleKind::Mamba2);
        let params = MomLayerParams::<f64>::init(&cfg, &mut rng).unwrap();
        let mut state = params.zero_state();
        for _ in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, next) = forward_step(&params, &state, &x).unwrap();
            let decision = route(&x, &params.router).unwrap();
            for m in 0..6 {
                if !decision.selects(m) {
                    assert!(next.memories[m].bit_identical(&state.memories[m]));
                }
            }
            state = next;
        }
    }

    #[test]
    fn disjoint_tokens_commute_for_linear_attention() {
        // Two tokens routed to different memories: swapping them leaves the
        // final per-memory states unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = LayerConfig::new(4, 3, 1, false, RuleKind::LinearAttn);
        let params = MomLayerParams::<f64>::init(&cfg, &mut rng).unwrap();
        let (a, b) = loop {
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let da = route(&a, &params.router).unwrap();
            let db = route(&b, &params.router).unwrap();
            if da.indices != db.indices {
                break (a, b);
            }
        };
        let run = |first: &[f64], second: &[f64]| {
            let mut s = params.zero_state();
            forward_step_in_place(&params, &mut s, first, None).unwrap();
            forward_step_in_place(&params, &mut s, second, None).unwrap();
            s
        };
        let ab = run(&a, &b);
        let ba = run(&b, &a);
        for m in 0..3 {
            assert!(ab.memories[m].matrix().max_abs_diff(ba.memories[m].matrix()) < 1e-15);
        }
    }

    #[test]
    fn state_and_input_shapes_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = LayerConfig::new(3, 2, 1, true, RuleKind::LinearAttn);
        let params = MomLayerParams::<f64>::init(&cfg, &mut rng).unwrap();
        let mut wrong = params.zero_state();
        wrong.shared = None;
        assert!(forward_step(&params, &wrong, &[0.0; 3]).is_err());
        assert!(forward_step(&params, &params.zero_state(), &[0.0; 2]).is_err());
        assert!(forward_sequence_naive(&params, &Matrix::zeros(0, 3)).is_err());
        assert!(params.validate().is_ok());
    }

    #[test]
    fn deterministic() {
        let cfg = LayerConfig::new(4, 4, 2, true, RuleKind::Gla);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let params = MomLayerParams::<f64>::init(&cfg, &mut rng).unwrap();
            let xs = random_input(10, 4, &mut rng);
            forward_sequence_naive(&params, &xs).unwrap().y
        };
        let (a, b) = (run(), run());
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn transition_used_by_layer_is_kernel_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LayerConfig::new(4, 1, 1, false, RuleKind::Titans);
        let params = MomLayerParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = project(&params.memories[0], &params.rule, &x);
        assert!((l2_norm(&p.key) - 1.0).abs() < 1e-9);
        let expected = step(&params.rule, &MemoryState::zeros(4, 4), &p.key, &p.value, &p.gates).unwrap();
        let (_, next) = forward_step(&params, &params.zero_state(), &x).unwrap();
        assert_eq!(next.memories[0], expected);
    }
}
