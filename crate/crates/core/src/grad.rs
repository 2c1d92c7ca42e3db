//! Reverse-mode gradients of the layer and the tools that check them.
//!
//! The backward pass walks the bucketed execution in reverse: output head,
//! routing-weighted recombination, then each bucket's recurrence from its
//! last token to its first, and finally the router softmax. Routing
//! selections are treated as constants; gradients reach the router through
//! the renormalized weights of the selected memories (and, optionally,
//! through the load-balance loss).
//!
//! Supported rules: linear attention, RetNet, GLA, Mamba2, Gated DeltaNet.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::kernels::{read, step_in_place, MemoryState, RuleKind, UpdateRule};
use crate::layer::{forward_sequence_frozen, project, MemoryProjection, MomLayerParams, Projected, KEY_NORM_EPS};
use crate::params::{zeros_like, Parameters};
use crate::router::{selection_margin, RouterDecision};
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, rms_norm, rms_norm_backward, Matrix};
use crate::varlen::{build_plan, route_batch, VarlenPlan};

/// Selections closer than this to a tie are rejected as finite-difference points.
pub const ROUTING_TIE_MARGIN: f64 = 1e-4;
pub const DEFAULT_FD_EPSILON: f64 = 1e-5;
pub const DEFAULT_GRAD_TOLERANCE: f64 = 1e-6;
pub const GRADIENT_FLOOR: f64 = 1e-8;

pub fn supports_backward(kind: RuleKind) -> bool {
    matches!(
        kind,
        RuleKind::LinearAttn | RuleKind::RetNet | RuleKind::Gla | RuleKind::Mamba2 | RuleKind::GatedDeltaNet
    )
}

/// Causal quadratic form `o_t = Σ_{i≤t} (q_t·k_i) v_i` with no normalizer.
pub fn parallel_form_oracle<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    let len = q.rows();
    if len == 0 {
        return invalid("oracle needs at least one token");
    }
    if k.rows() != len || v.rows() != len || q.cols() != k.cols() {
        return invalid("query, key and value shapes disagree");
    }
    let mut out = Matrix::zeros(len, v.cols());
    for t in 0..len {
        for i in 0..=t {
            let score = dot(q.row(t), k.row(i));
            axpy(score, v.row(i), out.row_mut(t));
        }
    }
    Ok(out)
}

/// One bucket's recorded recurrence.
#[derive(Clone, Debug)]
struct SegmentTape<T> {
    /// `None` for the shared memory.
    memory: Option<usize>,
    batch: usize,
    times: Vec<usize>,
    projected: Vec<Projected<T>>,
    /// `states[j]` is the state before step `j`; one extra entry at the end.
    states: Vec<Matrix<T>>,
    outputs: Vec<Vec<T>>,
}

/// Everything the backward pass needs from a forward pass over a batch.
#[derive(Clone, Debug)]
pub struct LayerTape<T> {
    pub xs: Vec<Matrix<T>>,
    pub decisions: Vec<Vec<RouterDecision<T>>>,
    pub plan: VarlenPlan<T>,
    segments: Vec<SegmentTape<T>>,
    queries: Vec<Matrix<T>>,
    /// Readout before the head, `T × d_v` per batch element.
    pub mixed: Vec<Matrix<T>>,
    inv_rms: Vec<Vec<T>>,
    /// Layer outputs, `T × d` per batch element.
    pub y: Vec<Matrix<T>>,
}

fn record_segment<T: Scalar>(
    proj: &MemoryProjection<T>,
    rule: &UpdateRule<T>,
    x: &Matrix<T>,
    queries: &Matrix<T>,
    times: Vec<usize>,
    memory: Option<usize>,
    batch: usize,
) -> Result<SegmentTape<T>> {
    let mut state = MemoryState::zeros(queries.cols(), proj.w_v.cols());
    let mut states = Vec::with_capacity(times.len() + 1);
    let mut projected = Vec::with_capacity(times.len());
    let mut outputs = Vec::with_capacity(times.len());
    states.push(state.matrix().clone());
    for &t in &times {
        let p = project(proj, rule, x.row(t));
        step_in_place(rule, &mut state, &p.key, &p.value, &p.gates)?;
        outputs.push(read(&state, queries.row(t))?);
        states.push(state.matrix().clone());
        projected.push(p);
    }
    Ok(SegmentTape { memory, batch, times, projected, states, outputs })
}

/// Bucketed forward that keeps every intermediate needed by [`backward_recorded`].
pub fn forward_recorded<T: Scalar>(
    params: &MomLayerParams<T>,
    xs: &[Matrix<T>],
    selections: Option<&[Vec<Vec<usize>>]>,
) -> Result<LayerTape<T>> {
    let seq_len = xs.first().map_or(0, Matrix::rows);
    if seq_len == 0 || xs.iter().any(|x| x.shape() != (seq_len, params.d())) {
        return invalid("batch must hold non-empty sequences of equal length and layer width");
    }
    let decisions = route_batch(params, xs, selections)?;
    let plan = build_plan(&decisions, params.num_memories())?;
    let queries: Vec<Matrix<T>> = xs
        .iter()
        .map(|x| {
            let mut q = Matrix::zeros(seq_len, params.d_k());
            for t in 0..seq_len {
                params.w_q.left_mul_into(x.row(t), q.row_mut(t));
            }
            q
        })
        .collect();

    let mut segments = Vec::new();
    for p in 0..plan.num_buckets() {
        let (b, m) = (p / plan.num_memories(), p % plan.num_memories());
        let times = plan.index_set(b, m).to_vec();
        if times.is_empty() {
            continue;
        }
        segments.push(record_segment(&params.memories[m], &params.rule, &xs[b], &queries[b], times, Some(m), b)?);
    }
    if let Some(shared) = &params.shared {
        for (b, x) in xs.iter().enumerate() {
            segments.push(record_segment(shared, &params.rule, x, &queries[b], (0..seq_len).collect(), None, b)?);
        }
    }

    let mut mixed = vec![Matrix::zeros(seq_len, params.d_v()); xs.len()];
    for seg in &segments {
        for (&t, o) in seg.times.iter().zip(&seg.outputs) {
            let w = match seg.memory {
                Some(m) => plan.weight(seg.batch, t, m),
                None => T::one(),
            };
            axpy(w, o, mixed[seg.batch].row_mut(t));
        }
    }
    let mut inv_rms = Vec::with_capacity(xs.len());
    let mut y = Vec::with_capacity(xs.len());
    for o in &mixed {
        let mut inv = Vec::with_capacity(seq_len);
        let mut out = Matrix::zeros(seq_len, params.d());
        for t in 0..seq_len {
            let (r, s) = rms_norm(o.row(t), params.norm_eps);
            params.w_o.left_mul_into(&r, out.row_mut(t));
            inv.push(s);
        }
        inv_rms.push(inv);
        y.push(out);
    }
    Ok(LayerTape { xs: xs.to_vec(), decisions, plan, segments, queries, mixed, inv_rms, y })
}

#[derive(Clone, Debug)]
pub struct LayerGradients<T> {
    pub params: MomLayerParams<T>,
    /// Gradient with respect to each input sequence.
    pub xs: Vec<Matrix<T>>,
}

/// Gradients of `Σ ⟨upstream, y⟩` (plus `Σ ⟨prob_grad, full_probs⟩` per
/// token when given) with respect to every parameter and input.
pub fn backward_recorded<T: Scalar>(
    params: &MomLayerParams<T>,
    tape: &LayerTape<T>,
    upstream: &[Matrix<T>],
    prob_grad: Option<&[T]>,
) -> Result<LayerGradients<T>> {
    let kind = params.rule.kind();
    if !supports_backward(kind) {
        return Err(Error::Unsupported(format!("no analytic backward for rule {kind}")));
    }
    if upstream.len() != tape.y.len() || upstream.iter().zip(&tape.y).any(|(u, y)| u.shape() != y.shape()) {
        return invalid("upstream gradient shape does not match layer output");
    }
    if prob_grad.is_some_and(|g| g.len() != params.num_memories()) {
        return invalid("probability gradient must have one entry per memory");
    }
    let seq_len = tape.plan.seq_len();
    let mut grads = zeros_like(params);
    let mut dxs = vec![Matrix::zeros(seq_len, params.d()); tape.xs.len()];

    // output head
    let mut d_mixed = vec![Matrix::zeros(seq_len, params.d_v()); tape.xs.len()];
    for b in 0..tape.xs.len() {
        for t in 0..seq_len {
            let o = tape.mixed[b].row(t);
            let inv = tape.inv_rms[b][t];
            let dy = upstream[b].row(t);
            let r: Vec<T> = o.iter().map(|v| *v * inv).collect();
            grads.w_o.add_outer(T::one(), &r, dy);
            let dr = params.w_o.right_mul(dy);
            d_mixed[b].row_mut(t).copy_from_slice(&rms_norm_backward(o, inv, &dr));
        }
    }

    // recurrences, each bucket in reverse
    let m_count = params.num_memories();
    let mut d_alpha = vec![T::zero(); tape.xs.len() * seq_len * m_count];
    let mut dqs = vec![Matrix::zeros(seq_len, params.d_k()); tape.xs.len()];
    for seg in &tape.segments {
        let b = seg.batch;
        let (proj, grad_proj) = match seg.memory {
            Some(m) => (&params.memories[m], &mut grads.memories[m]),
            None => (params.shared.as_ref().unwrap(), grads.shared.as_mut().unwrap()),
        };
        let mut d_state = Matrix::zeros(params.d_k(), params.d_v());
        for j in (0..seg.times.len()).rev() {
            let t = seg.times[j];
            let d_out: Vec<T> = match seg.memory {
                Some(m) => {
                    let dm = d_mixed[b].row(t);
                    d_alpha[(b * seq_len + t) * m_count + m] = dot(dm, &seg.outputs[j]);
                    let w = tape.plan.weight(b, t, m);
                    dm.iter().map(|v| *v * w).collect()
                }
                None => d_mixed[b].row(t).to_vec(),
            };
            let q = tape.queries[b].row(t);
            d_state.add_outer(T::one(), q, &d_out);
            let dq = seg.states[j + 1].right_mul(&d_out);
            axpy(T::one(), &dq, dqs[b].row_mut(t));

            let step = step_backward(&params.rule, &seg.states[j], &seg.projected[j], &mut d_state);
            accumulate_projection(
                proj,
                grad_proj,
                kind,
                tape.xs[b].row(t),
                &seg.projected[j],
                &step,
                dxs[b].row_mut(t),
            );
        }
    }

    // shared query projection
    for b in 0..tape.xs.len() {
        for t in 0..seq_len {
            let x = tape.xs[b].row(t);
            let dq = dqs[b].row(t);
            grads.w_q.add_outer(T::one(), x, dq);
            axpy(T::one(), &params.w_q.right_mul(dq), dxs[b].row_mut(t));
        }
    }

    // router: renormalized top-k weights, then softmax
    for b in 0..tape.xs.len() {
        for t in 0..seq_len {
            let d = &tape.decisions[b][t];
            let mut dp = match prob_grad {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); m_count],
            };
            let total: T = d.indices.iter().map(|&m| d.full_probs[m]).sum();
            let da: Vec<T> = d.indices.iter().map(|&m| d_alpha[(b * seq_len + t) * m_count + m]).collect();
            let mean: T = d.weights.iter().zip(&da).map(|(w, g)| *w * *g).sum();
            for (&m, g) in d.indices.iter().zip(&da) {
                dp[m] += (*g - mean) / total;
            }
            let centre = dot(&d.full_probs, &dp);
            let dlogits: Vec<T> = d.full_probs.iter().zip(&dp).map(|(p, g)| *p * (*g - centre)).collect();
            let x = tape.xs[b].row(t);
            grads.router.w_g.add_outer(T::one(), x, &dlogits);
            axpy(T::one(), &params.router.w_g.right_mul(&dlogits), dxs[b].row_mut(t));
        }
    }
    Ok(LayerGradients { params: grads, xs: dxs })
}

/// Gradients of one transition with respect to the rule's inputs.
struct StepGrad<T> {
    key: Vec<T>,
    value: Vec<T>,
    /// Scalar or per-channel decay gradient.
    decay: Option<Vec<T>>,
    write: Option<T>,
}

/// Backpropagate through one transition. On entry `d_state` holds the
/// gradient of the post-step state; on exit, of the pre-step state.
fn step_backward<T: Scalar>(
    rule: &UpdateRule<T>,
    prev: &Matrix<T>,
    p: &Projected<T>,
    d_state: &mut Matrix<T>,
) -> StepGrad<T> {
    let (k, v) = (&p.key, &p.value);
    match rule.kind() {
        RuleKind::LinearAttn | RuleKind::RetNet => {
            let key = d_state.right_mul(v);
            let value = d_state.left_mul(k);
            if let Some(g) = rule.gamma() {
                d_state.scale(g);
            }
            StepGrad { key, value, decay: None, write: None }
        }
        RuleKind::Gla => {
            let a = p.gates.a_vector.as_ref().unwrap();
            let key = d_state.right_mul(v);
            let value = d_state.left_mul(k);
            let decay = (0..a.len()).map(|i| dot(d_state.row(i), prev.row(i))).collect();
            for (i, ai) in a.iter().enumerate() {
                d_state.row_mut(i).iter_mut().for_each(|x| *x *= *ai);
            }
            StepGrad { key, value, decay: Some(decay), write: None }
        }
        RuleKind::Mamba2 => {
            let (a, b) = (p.gates.a_scalar.unwrap(), p.gates.b_scalar.unwrap());
            let dv_k = d_state.right_mul(v);
            let write = dot(k, &dv_k);
            let key = dv_k.iter().map(|x| *x * b).collect();
            let value = d_state.left_mul(k).iter().map(|x| *x * b).collect();
            let decay = vec![d_state.frobenius(prev)];
            d_state.scale(a);
            StepGrad { key, value, decay: Some(decay), write: Some(write) }
        }
        RuleKind::GatedDeltaNet => {
            // M' = a (M − kᵀ(kM)) + b kᵀv
            let (a, b) = (p.gates.a_scalar.unwrap(), p.gates.b_scalar.unwrap());
            let u = prev.left_mul(k);
            let w = d_state.left_mul(k);
            let decay = vec![d_state.frobenius(prev) - dot(&u, &w)];
            let write = dot(&w, v);
            let value = w.iter().map(|x| *x * b).collect();
            let mix: Vec<T> = v.iter().zip(&u).map(|(vi, ui)| b * *vi - a * *ui).collect();
            let mut key = d_state.right_mul(&mix);
            axpy(-a, &prev.right_mul(&w), &mut key);
            d_state.add_outer(-T::one(), k, &w);
            d_state.scale(a);
            StepGrad { key, value, decay: Some(decay), write: Some(write) }
        }
        other => unreachable!("backward for {other} rejected earlier"),
    }
}

fn accumulate_projection<T: Scalar>(
    proj: &MemoryProjection<T>,
    grad: &mut MemoryProjection<T>,
    kind: RuleKind,
    x: &[T],
    p: &Projected<T>,
    step: &StepGrad<T>,
    dx: &mut [T],
) {
    let d_key_raw = if kind.needs_unit_keys() {
        // k̂ = k / n with n = sqrt(‖k‖² + ε)
        let k = &p.key_raw;
        let n = (dot(k, k) + T::of(KEY_NORM_EPS)).sqrt();
        let c = dot(k, &step.key) / (n * n * n);
        k.iter().zip(&step.key).map(|(ki, gi)| *gi / n - c * *ki).collect()
    } else {
        step.key.clone()
    };
    grad.w_k.add_outer(T::one(), x, &d_key_raw);
    axpy(T::one(), &proj.w_k.right_mul(&d_key_raw), dx);
    grad.w_v.add_outer(T::one(), x, &step.value);
    axpy(T::one(), &proj.w_v.right_mul(&step.value), dx);

    if let (Some(d_gate), Some(gate), Some(g_gate)) = (&step.decay, &proj.decay, &mut grad.decay) {
        let a: Vec<T> = match (&p.gates.a_vector, p.gates.a_scalar) {
            (Some(av), _) => av.clone(),
            (None, Some(a)) => vec![a],
            _ => unreachable!(),
        };
        let dz: Vec<T> = d_gate.iter().zip(&a).map(|(g, a)| *g * *a * (T::one() - *a)).collect();
        g_gate.w.add_outer(T::one(), x, &dz);
        axpy(T::one(), &dz, &mut g_gate.bias);
        axpy(T::one(), &gate.w.right_mul(&dz), dx);
    }
    if let (Some(d_write), Some(gate), Some(g_gate)) = (step.write, &proj.write, &mut grad.write) {
        let b = p.gates.b_scalar.unwrap();
        let dz = [d_write * b * (T::one() - b)];
        g_gate.w.add_outer(T::one(), x, &dz);
        g_gate.bias[0] += dz[0];
        axpy(T::one(), &gate.w.right_mul(&dz), dx);
    }
}

/// Gradients of `Σ_t ⟨upstream_t, y_t⟩` for one sequence.
pub fn backward<T: Scalar>(
    params: &MomLayerParams<T>,
    xs: &Matrix<T>,
    upstream: &Matrix<T>,
) -> Result<(MomLayerParams<T>, Matrix<T>)> {
    if !supports_backward(params.rule.kind()) {
        return Err(Error::Unsupported(format!("no analytic backward for rule {}", params.rule.kind())));
    }
    let tape = forward_recorded(params, std::slice::from_ref(xs), None)?;
    let g = backward_recorded(params, &tape, std::slice::from_ref(upstream), None)?;
    Ok((g.params, g.xs.into_iter().next().unwrap()))
}

impl<T: Scalar> Parameters<T> for Matrix<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[T])) {
        f("matrix", self.as_slice());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        f("matrix", self.as_mut_slice());
    }
}

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` for every scalar parameter.
/// The base point is evaluated twice; differing results mean the function
/// is not deterministic and the differences would be meaningless.
pub fn finite_diff_grad<T, P, F>(mut loss_fn: F, params: &P, epsilon: T) -> Result<P>
where
    T: Scalar,
    P: Parameters<T> + Clone,
    F: FnMut(&P) -> Result<T>,
{
    if !(epsilon > T::zero()) {
        return invalid("finite-difference epsilon must be positive");
    }
    let first = loss_fn(params)?;
    let second = loss_fn(params)?;
    if first.as_f64().to_bits() != second.as_f64().to_bits() {
        return Err(Error::InconsistentFunction(format!(
            "two evaluations at the same point gave {first} and {second}"
        )));
    }
    let base = params.flatten();
    let mut work = params.clone();
    let mut grad = Vec::with_capacity(base.len());
    let mut point = base.clone();
    for i in 0..base.len() {
        point[i] = base[i] + epsilon;
        work.assign_flat(&point);
        let plus = loss_fn(&work)?;
        point[i] = base[i] - epsilon;
        work.assign_flat(&point);
        let minus = loss_fn(&work)?;
        point[i] = base[i];
        grad.push((plus - minus) / (epsilon + epsilon));
    }
    let mut out = params.clone();
    out.assign_flat(&grad);
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_grad: f64,
    /// Whether the tensor's gradient clears the floor and so counts toward `pass`.
    pub checked: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub fingerprint: String,
    pub tolerance: f64,
    pub floor: f64,
    pub tensors: Vec<TensorReport>,
    pub pass: bool,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().filter(|t| t.checked).map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Compare two gradients tensor by tensor. A tensor's relative error is its
/// largest entrywise difference over its largest gradient magnitude; tensors
/// whose gradient stays below `floor` are reported but not judged.
pub fn compare_gradients<T: Scalar, P: Parameters<T>>(
    analytic: &P,
    numeric: &P,
    tolerance: f64,
    floor: f64,
    fingerprint: impl Into<String>,
) -> GradReport {
    let mut numeric_tensors = Vec::new();
    numeric.visit(&mut |_, t| numeric_tensors.push(t.iter().map(|x| x.as_f64()).collect::<Vec<_>>()));
    let mut tensors = Vec::new();
    let mut idx = 0;
    analytic.visit(&mut |name, a| {
        let n = &numeric_tensors[idx];
        idx += 1;
        let max_grad = a.iter().map(|x| x.as_f64().abs()).chain(n.iter().map(|x| x.abs())).fold(0.0, f64::max);
        let max_abs_error = a.iter().zip(n).map(|(x, y)| (x.as_f64() - y).abs()).fold(0.0, f64::max);
        let checked = max_grad > floor;
        let max_rel_error = if checked { max_abs_error / max_grad } else { 0.0 };
        tensors.push(TensorReport { name: name.to_string(), max_rel_error, max_abs_error, max_grad, checked });
    });
    let pass = tensors.iter().all(|t| !t.checked || t.max_rel_error < tolerance);
    GradReport { fingerprint: fingerprint.into(), tolerance, floor, tensors, pass }
}

/// Smallest gap between the last selected and first unselected logit over a sequence.
pub fn min_routing_margin<T: Scalar>(params: &MomLayerParams<T>, xs: &Matrix<T>) -> Option<T> {
    xs.iter_rows()
        .filter_map(|x| selection_margin(&params.router.logits(x), params.top_k()))
        .fold(None, |acc: Option<T>, m| Some(acc.map_or(m, |a| a.min(m))))
}

pub fn layer_fingerprint<T: Scalar>(params: &MomLayerParams<T>, seq_len: usize) -> String {
    format!(
        "rule={} d={} d_k={} d_v={} memories={} top_k={} shared={} seq_len={}",
        params.rule.kind(),
        params.d(),
        params.d_k(),
        params.d_v(),
        params.num_memories(),
        params.top_k(),
        params.shared.is_some(),
        seq_len
    )
}

/// Check [`backward`] against central differences of the token-by-token
/// forward with routing pinned at the base point. Parameter tensors and the
/// input (reported as `input`) are both checked.
pub fn check_layer_gradients(
    params: &MomLayerParams<f64>,
    xs: &Matrix<f64>,
    upstream: &Matrix<f64>,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradReport> {
    if let Some(margin) = min_routing_margin(params, xs) {
        if margin < ROUTING_TIE_MARGIN {
            return invalid(format!("routing margin {margin:e} too close to a tie for finite differences"));
        }
    }
    let (analytic, analytic_x) = backward(params, xs, upstream)?;
    let selections = current_selection(params, xs)?;
    let objective = |p: &MomLayerParams<f64>, x: &Matrix<f64>| -> Result<f64> {
        let out = forward_sequence_frozen(p, x, &selections)?;
        Ok(dot(out.y.as_slice(), upstream.as_slice()))
    };
    let numeric = finite_diff_grad(|p| objective(p, xs), params, epsilon)?;
    let numeric_x = finite_diff_grad(|x| objective(params, x), xs, epsilon)?;
    let fingerprint = layer_fingerprint(params, xs.rows());
    let mut report = compare_gradients(&analytic, &numeric, tolerance, GRADIENT_FLOOR, fingerprint);
    let mut input = compare_gradients(&analytic_x, &numeric_x, tolerance, GRADIENT_FLOOR, "");
    input.tensors[0].name = "input".into();
    report.pass &= input.pass;
    report.tensors.extend(input.tensors);
    Ok(report)
}

fn current_selection<T: Scalar>(params: &MomLayerParams<T>, xs: &Matrix<T>) -> Result<Vec<Vec<usize>>> {
    let decisions = route_batch(params, std::slice::from_ref(xs), None)?;
    Ok(decisions[0].iter().map(|d| d.indices.clone()).collect())
}
