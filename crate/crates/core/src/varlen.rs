//! Bucketed execution of a mixture-of-memories layer.
//!
//! Tokens are grouped per (batch element, memory) in their original order,
//! concatenated into one flat variable-length batch, scanned bucket by bucket
//! from zero states, scattered back and recombined with the routing weights.
//! Reading each memory separately and then mixing is the same as reading the
//! mixture, so this path reproduces [`crate::layer::forward_sequence_naive`].
//!
//! Buckets are indexed `p = b·M + m` (zero-based) and laid out back to back;
//! `boundaries[p]..boundaries[p + 1]` is bucket `p`'s flat range. Empty
//! buckets keep a zero-width range.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::kernels::{read, step_in_place, MemoryState, UpdateRule};
use crate::layer::{output_head, project, MemoryProjection, MomLayerParams};
use crate::router::{route_logits, route_with_selection, RouterDecision};
use crate::scalar::Scalar;
use crate::tensor::{axpy, Matrix};

/// Source of one flat row: batch element, time step, memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FlatSource {
    pub batch: usize,
    pub time: usize,
    pub memory: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarlenPlan<T> {
    batch: usize,
    seq_len: usize,
    num_memories: usize,
    index_sets: Vec<Vec<usize>>,
    boundaries: Vec<usize>,
    flat_to_src: Vec<FlatSource>,
    /// Dense `B × T × M` routing weights, zero where a memory is not selected.
    weights: Vec<T>,
}

impl<T: Scalar> VarlenPlan<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_memories(&self) -> usize {
        self.num_memories
    }

    pub fn num_buckets(&self) -> usize {
        self.batch * self.num_memories
    }

    pub fn bucket_index(&self, batch: usize, memory: usize) -> usize {
        batch * self.num_memories + memory
    }

    /// Ordered time indices routed to `memory` in batch element `batch`.
    pub fn index_set(&self, batch: usize, memory: usize) -> &[usize] {
        &self.index_sets[self.bucket_index(batch, memory)]
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn bucket_range(&self, p: usize) -> std::ops::Range<usize> {
        self.boundaries[p]..self.boundaries[p + 1]
    }

    pub fn flat_len(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    pub fn flat_to_src(&self) -> &[FlatSource] {
        &self.flat_to_src
    }

    pub fn weight(&self, batch: usize, time: usize, memory: usize) -> T {
        self.weights[(batch * self.seq_len + time) * self.num_memories + memory]
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Structural checks: temporal order inside buckets, boundary arithmetic,
    /// and one flat row per positive weight.
    pub fn check_invariants(&self) -> Result<()> {
        if self.boundaries.len() != self.num_buckets() + 1 || self.boundaries[0] != 0 {
            return invalid("boundaries must start at zero with one entry per bucket plus one");
        }
        for (p, set) in self.index_sets.iter().enumerate() {
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return invalid(format!("bucket {p} is not in temporal order"));
            }
            if self.boundaries[p + 1] - self.boundaries[p] != set.len() {
                return invalid(format!("boundary {p} disagrees with bucket length"));
            }
            let (b, m) = (p / self.num_memories, p % self.num_memories);
            for (j, &t) in set.iter().enumerate() {
                let src = self.flat_to_src[self.boundaries[p] + j];
                if src != (FlatSource { batch: b, time: t, memory: m }) {
                    return invalid(format!("flat row {} does not match bucket {p}", self.boundaries[p] + j));
                }
            }
        }
        let positive = self.weights.iter().filter(|w| **w > T::zero()).count();
        if positive != self.flat_to_src.len() {
            return invalid("flat rows and positive routing weights disagree");
        }
        for src in &self.flat_to_src {
            if self.weight(src.batch, src.time, src.memory) <= T::zero() {
                return invalid("flat row with zero routing weight");
            }
        }
        Ok(())
    }

    /// Debug dump: `boundaries`, `flat_to_src` as `[b, t, m]` triples and the
    /// dense row-major `weights`.
    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct PlanJson {
            boundaries: Vec<usize>,
            flat_to_src: Vec<[usize; 3]>,
            weights: Vec<f64>,
        }
        let view = PlanJson {
            boundaries: self.boundaries.clone(),
            flat_to_src: self.flat_to_src.iter().map(|s| [s.batch, s.time, s.memory]).collect(),
            weights: self.weights.iter().map(|w| w.as_f64()).collect(),
        };
        serde_json::to_value(view).expect("plan serializes")
    }
}

/// Group routed tokens per (batch, memory) bucket.
pub fn build_plan<T: Scalar>(decisions: &[Vec<RouterDecision<T>>], num_memories: usize) -> Result<VarlenPlan<T>> {
    let batch = decisions.len();
    let seq_len = decisions.first().map_or(0, Vec::len);
    if decisions.iter().any(|row| row.len() != seq_len) {
        return invalid("every batch element needs the same number of decisions");
    }
    let mut index_sets = vec![Vec::new(); batch * num_memories];
    let mut weights = vec![T::zero(); batch * seq_len * num_memories];
    for (b, row) in decisions.iter().enumerate() {
        for (t, d) in row.iter().enumerate() {
            if d.indices.len() != d.weights.len() {
                return invalid("decision indices and weights differ in length");
            }
            for (&m, &w) in d.indices.iter().zip(&d.weights) {
                if m >= num_memories {
                    return invalid(format!("memory index {m} out of range for {num_memories} memories"));
                }
                if w <= T::zero() {
                    // An underflowed probability routes nothing.
                    continue;
                }
                index_sets[b * num_memories + m].push(t);
                weights[(b * seq_len + t) * num_memories + m] = w;
            }
        }
    }
    let mut boundaries = Vec::with_capacity(index_sets.len() + 1);
    boundaries.push(0);
    let mut flat_to_src = Vec::new();
    for (p, set) in index_sets.iter().enumerate() {
        let (b, m) = (p / num_memories, p % num_memories);
        flat_to_src.extend(set.iter().map(|&t| FlatSource { batch: b, time: t, memory: m }));
        boundaries.push(flat_to_src.len());
    }
    let plan = VarlenPlan { batch, seq_len, num_memories, index_sets, boundaries, flat_to_src, weights };
    debug_assert!(plan.check_invariants().is_ok());
    Ok(plan)
}

fn check_batch<T: Scalar>(xs: &[Matrix<T>], batch: usize, seq_len: usize, width: usize) -> Result<()> {
    if xs.len() != batch || xs.iter().any(|x| x.shape() != (seq_len, width)) {
        return invalid(format!("expected {batch} sequences of shape {seq_len}x{width}"));
    }
    Ok(())
}

/// Copy each routed token into its flat row.
pub fn gather<T: Scalar>(xs: &[Matrix<T>], plan: &VarlenPlan<T>) -> Result<Matrix<T>> {
    let width = xs.first().map_or(0, Matrix::cols);
    check_batch(xs, plan.batch, plan.seq_len, width)?;
    let mut flat = Matrix::zeros(plan.flat_len(), width);
    for (u, src) in plan.flat_to_src.iter().enumerate() {
        flat.row_mut(u).copy_from_slice(xs[src.batch].row(src.time));
    }
    Ok(flat)
}

/// Scan one segment of inputs through a single memory from a zero state,
/// reading every position with the shared query projection.
pub fn scan_segment<'a, T: Scalar>(
    proj: &MemoryProjection<T>,
    rule: &UpdateRule<T>,
    w_q: &Matrix<T>,
    rows: impl Iterator<Item = &'a [T]>,
    out: &mut [Vec<T>],
) -> Result<()> {
    let mut state = MemoryState::zeros(w_q.cols(), proj.w_v.cols());
    for (x, o) in rows.zip(out.iter_mut()) {
        let p = project(proj, rule, x);
        step_in_place(rule, &mut state, &p.key, &p.value, &p.gates)?;
        *o = read(&state, &w_q.left_mul(x))?;
    }
    Ok(())
}

/// Run every bucket's memory-specific recurrence over its flat segment.
/// Buckets share nothing, so their execution order does not matter.
pub fn dispatch<T: Scalar>(plan: &VarlenPlan<T>, flat: &Matrix<T>, params: &MomLayerParams<T>) -> Result<Matrix<T>> {
    if flat.rows() != plan.flat_len() || flat.cols() != params.d() {
        return invalid("flat input does not match plan and layer width");
    }
    if plan.num_memories != params.num_memories() {
        return invalid("plan and layer disagree on the number of memories");
    }
    let mut out = Matrix::zeros(plan.flat_len(), params.d_v());
    let mut rows = vec![Vec::new(); 0];
    for p in 0..plan.num_buckets() {
        let range = plan.bucket_range(p);
        if range.is_empty() {
            continue;
        }
        let m = p % plan.num_memories;
        rows.resize(range.len(), Vec::new());
        scan_segment(
            &params.memories[m],
            &params.rule,
            &params.w_q,
            range.clone().map(|u| flat.row(u)),
            &mut rows,
        )?;
        for (u, o) in range.zip(&rows) {
            out.row_mut(u).copy_from_slice(o);
        }
    }
    Ok(out)
}

/// Weighted recombination `y[b,t] = Σ_m α[b,t,m] · ô[b,t,m]`.
pub fn scatter_combine<T: Scalar>(outputs: &Matrix<T>, plan: &VarlenPlan<T>) -> Result<Vec<Matrix<T>>> {
    if outputs.rows() != plan.flat_len() {
        return invalid("flat outputs do not match plan");
    }
    let mut ys = vec![Matrix::zeros(plan.seq_len, outputs.cols()); plan.batch];
    for (u, src) in plan.flat_to_src.iter().enumerate() {
        let w = plan.weight(src.batch, src.time, src.memory);
        axpy(w, outputs.row(u), ys[src.batch].row_mut(src.time));
    }
    Ok(ys)
}

#[derive(Clone, Debug)]
pub struct VarlenOutput<T> {
    /// One `T × d` output per batch element.
    pub y: Vec<Matrix<T>>,
    pub decisions: Vec<Vec<RouterDecision<T>>>,
    pub plan: VarlenPlan<T>,
}

/// Route every token, pinning the selection when `selections` is given.
pub fn route_batch<T: Scalar>(
    params: &MomLayerParams<T>,
    xs: &[Matrix<T>],
    selections: Option<&[Vec<Vec<usize>>]>,
) -> Result<Vec<Vec<RouterDecision<T>>>> {
    xs.iter()
        .enumerate()
        .map(|(b, x)| {
            (0..x.rows())
                .map(|t| {
                    let row = x.row(t);
                    if !row.iter().all(|v| v.is_finite()) {
                        return invalid("non-finite router input");
                    }
                    let logits = params.router.logits(row);
                    match selections {
                        None => route_logits(&logits, params.top_k()),
                        Some(sel) => route_with_selection(&logits, &sel[b][t]),
                    }
                })
                .collect()
        })
        .collect()
}

/// Bucketed forward of a batch of equal-length sequences.
pub fn forward_varlen<T: Scalar>(params: &MomLayerParams<T>, xs: &[Matrix<T>]) -> Result<VarlenOutput<T>> {
    run(params, xs, None)
}

/// Bucketed forward with the routing selection pinned per token.
pub fn forward_varlen_frozen<T: Scalar>(
    params: &MomLayerParams<T>,
    xs: &[Matrix<T>],
    selections: &[Vec<Vec<usize>>],
) -> Result<VarlenOutput<T>> {
    run(params, xs, Some(selections))
}

fn run<T: Scalar>(
    params: &MomLayerParams<T>,
    xs: &[Matrix<T>],
    selections: Option<&[Vec<Vec<usize>>]>,
) -> Result<VarlenOutput<T>> {
    let seq_len = xs.first().map_or(0, Matrix::rows);
    if seq_len == 0 {
        return invalid("sequences must contain at least one token");
    }
    check_batch(xs, xs.len(), seq_len, params.d())?;
    if let Some(sel) = selections {
        if sel.len() != xs.len() || sel.iter().any(|s| s.len() != seq_len) {
            return invalid("one selection per token required");
        }
    }
    let decisions = route_batch(params, xs, selections)?;
    let plan = build_plan(&decisions, params.num_memories())?;
    let flat = gather(xs, &plan)?;
    let flat_out = dispatch(&plan, &flat, params)?;
    let mut mixed = scatter_combine(&flat_out, &plan)?;

    // The shared memory is one extra always-on bucket per batch element.
    if let Some(shared) = &params.shared {
        let mut rows = vec![Vec::new(); seq_len];
        for (x, o) in xs.iter().zip(mixed.iter_mut()) {
            scan_segment(shared, &params.rule, &params.w_q, x.iter_rows(), &mut rows)?;
            for (t, r) in rows.iter().enumerate() {
                axpy(T::one(), r, o.row_mut(t));
            }
        }
    }

    let mut y = Vec::with_capacity(xs.len());
    for o in &mixed {
        let mut out = Matrix::zeros(seq_len, params.d());
        for t in 0..seq_len {
            out.row_mut(t).copy_from_slice(&output_head(o.row(t), params)?);
        }
        y.push(out);
    }
    Ok(VarlenOutput { y, decisions, plan })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::RuleKind;
    use crate::layer::{forward_sequence_naive, LayerConfig};
    use crate::router::route_logits;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn top1(memories: &[usize], num_memories: usize) -> Vec<RouterDecision<f64>> {
        memories
            .iter()
            .map(|&m| {
                let mut logits = vec![0.0; num_memories];
                logits[m] = 5.0;
                route_logits(&logits, 1).unwrap()
            })
            .collect()
    }

    #[test]
    fn alternating_top1_plan() {
        // memories 1,2,1,2 in one-based terms
        let plan = build_plan(&[top1(&[0, 1, 0, 1], 2)], 2).unwrap();
        assert_eq!(plan.index_set(0, 0), &[0, 2]);
        assert_eq!(plan.index_set(0, 1), &[1, 3]);
        assert_eq!(plan.boundaries(), &[0, 2, 4]);
        plan.check_invariants().unwrap();
    }

    #[test]
    fn degenerate_routing_keeps_empty_buckets() {
        let plan = build_plan(&[top1(&[2, 2, 2, 2, 2], 3)], 3).unwrap();
        assert_eq!(plan.boundaries(), &[0, 0, 0, 5]);
        assert!(plan.bucket_range(0).is_empty());
        assert_eq!(plan.index_set(0, 2), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn top2_duplicates_each_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let decisions: Vec<Vec<_>> = (0..3)
            .map(|_| {
                (0..7)
                    .map(|_| {
                        let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        route_logits(&logits, 2).unwrap()
                    })
                    .collect()
            })
            .collect();
        let plan = build_plan(&decisions, 4).unwrap();
        assert_eq!(plan.flat_len(), 2 * 3 * 7);
        let mut seen = vec![0usize; 21];
        for src in plan.flat_to_src() {
            seen[src.batch * 7 + src.time] += 1;
        }
        assert!(seen.iter().all(|&c| c == 2));
    }

    #[test]
    fn gather_materializes_plan() {
        let xs = vec![Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap()];
        let plan = build_plan(&[top1(&[0, 1, 0, 1], 2)], 2).unwrap();
        let flat = gather(&xs, &plan).unwrap();
        assert_eq!(flat.as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert!(gather(&[Matrix::<f64>::zeros(3, 1)], &plan).is_err());
    }

    #[test]
    fn gather_scatter_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<Matrix<f64>> = (0..2).map(|_| Matrix::uniform(5, 3, 1.0, &mut rng)).collect();
        let decisions: Vec<_> = (0..2)
            .map(|_| top1(&(0..5).map(|_| rng.gen_range(0..3)).collect::<Vec<_>>(), 3))
            .collect();
        let plan = build_plan(&decisions, 3).unwrap();
        let back = scatter_combine(&gather(&xs, &plan).unwrap(), &plan).unwrap();
        assert_eq!(back, xs);
    }

    #[test]
    fn scatter_weights_equal_outputs() {
        let logits = [0.0, 0.0];
        let decisions = vec![vec![route_logits(&logits, 2).unwrap()]];
        let plan = build_plan(&decisions, 2).unwrap();
        let outputs = Matrix::from_rows(&[vec![3.0, -1.0], vec![3.0, -1.0]]).unwrap();
        let y = scatter_combine(&outputs, &plan).unwrap();
        assert_eq!(y[0].row(0), &[3.0, -1.0]);
    }

    #[test]
    fn scatter_top2_weighted_sum() {
        let decisions = vec![vec![route_logits(&[0.3, -0.2, 1.1], 2).unwrap()]];
        let plan = build_plan(&decisions, 3).unwrap();
        let outputs = Matrix::<f64>::from_rows(&[vec![1.0, 2.0], vec![-4.0, 0.5]]).unwrap();
        let y = scatter_combine(&outputs, &plan).unwrap();
        let d = &decisions[0][0];
        assert_eq!(d.indices, vec![0, 2]);
        let expected = [d.weights[0] * 1.0 + d.weights[1] * -4.0, d.weights[0] * 2.0 + d.weights[1] * 0.5];
        assert!((y[0][(0, 0)] - expected[0]).abs() < 1e-15);
        assert!((y[0][(0, 1)] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn two_bucket_dispatch_matches_subsequence_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = LayerConfig::new(3, 2, 1, false, RuleKind::LinearAttn);
        let params = MomLayerParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x = Matrix::uniform(4, 3, 1.0, &mut rng);
        let plan = build_plan(&[top1(&[0, 1, 0, 1], 2)], 2).unwrap();
        let out = dispatch(&plan, &gather(&[x.clone()], &plan).unwrap(), &params).unwrap();

        // hand trace: memory 0 sees tokens 0 and 2, memory 1 sees 1 and 3
        for (m, times) in [(0usize, [0usize, 2]), (1, [1, 3])] {
            let proj = &params.memories[m];
            let mut state = Matrix::zeros(3, 3);
            for (j, &t) in times.iter().enumerate() {
                let k = proj.w_k.left_mul(x.row(t));
                let v = proj.w_v.left_mul(x.row(t));
                state.add_outer(1.0, &k, &v);
                let expected = state.left_mul(&params.w_q.left_mul(x.row(t)));
                let u = plan.boundaries()[m] + j;
                for c in 0..3 {
                    assert!((out[(u, c)] - expected[c]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn gated_delta_dual_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = LayerConfig::new(8, 4, 2, true, RuleKind::GatedDeltaNet);
        let params = MomLayerParams::<f64>::init(&cfg, &mut rng).unwrap();
        let xs: Vec<_> = (0..2).map(|_| Matrix::uniform(32, 8, 1.0, &mut rng)).collect();
        let varlen = forward_varlen(&params, &xs).unwrap();
        varlen.plan.check_invariants().unwrap();
        for (b, x) in xs.iter().enumerate() {
            let naive = forward_sequence_naive(&params, x).unwrap();
            assert!(naive.y.max_abs_diff(&varlen.y[b]) < 1e-10);
        }
    }

    #[test]
    fn relabeling_memories_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = LayerConfig::new(5, 4, 2, true, RuleKind::Gla);
        let params = MomLayerParams::<f64>::init(&cfg, &mut rng).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut relabeled = params.clone();
        for (old, &new) in perm.iter().enumerate() {
            relabeled.memories[new] = params.memories[old].clone();
            for i in 0..5 {
                relabeled.router.w_g[(i, new)] = params.router.w_g[(i, old)];
            }
        }
        let xs: Vec<_> = (0..3).map(|_| Matrix::uniform(9, 5, 1.0, &mut rng)).collect();
        let a = forward_varlen(&params, &xs).unwrap();
        let b = forward_varlen(&relabeled, &xs).unwrap();
        for (ya, yb) in a.y.iter().zip(&b.y) {
            assert!(ya.max_abs_diff(yb) < 1e-12);
        }
    }

    #[test]
    fn plan_json_layout() {
        let plan = build_plan(&[top1(&[1, 0], 2)], 2).unwrap();
        let json = plan.to_json();
        assert_eq!(json["boundaries"], serde_json::json!([0, 1, 2]));
        assert_eq!(json["flat_to_src"], serde_json::json!([[0, 1, 0], [0, 0, 1]]));
        assert_eq!(json["weights"], serde_json::json!([0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn bad_memory_index_rejected() {
        assert!(build_plan(&[top1(&[0, 3], 4)], 2).is_err());
    }

    proptest! {
        #[test]
        fn conservation_and_order(seed in any::<u64>(), b in 1usize..4, t in 1usize..20, m in 1usize..6, k in 1usize..4) {
            let k = k.min(m);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let decisions: Vec<Vec<_>> = (0..b)
                .map(|_| (0..t).map(|_| {
                    let logits: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    route_logits(&logits, k).unwrap()
                }).collect())
                .collect();
            let plan = build_plan(&decisions, m).unwrap();
            prop_assert!(plan.check_invariants().is_ok());
            prop_assert_eq!(plan.flat_len(), k * b * t);
            for bi in 0..b {
                for ti in 0..t {
                    let s: f64 = (0..m).map(|mi| plan.weight(bi, ti, mi)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
