//! Randomized self-checks exposed through the CLI: bucketed versus
//! token-by-token forward agreement, and gradient verification runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grad::{check_layer_gradients, min_routing_margin, supports_backward, GradReport, ROUTING_TIE_MARGIN};
use crate::kernels::RuleKind;
use crate::layer::{forward_sequence_naive, LayerConfig, MomLayerParams};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::varlen::forward_varlen;

pub const EQUIVALENCE_TOL_F64: f64 = 1e-10;
pub const EQUIVALENCE_TOL_F32: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceTrial {
    pub trial: usize,
    pub rule: RuleKind,
    pub batch: usize,
    pub seq_len: usize,
    pub num_memories: usize,
    pub top_k: usize,
    pub shared_memory: bool,
    pub max_err_f64: f64,
    pub max_err_f32: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub seed: u64,
    pub trials: Vec<EquivalenceTrial>,
    pub max_err_f64: f64,
    pub max_err_f32: f64,
    pub pass: bool,
}

/// Largest entrywise gap between the bucketed forward of the batch and the
/// token-by-token forward of each sequence.
pub fn max_path_difference<T: Scalar>(params: &MomLayerParams<T>, xs: &[Matrix<T>]) -> Result<f64> {
    let fast = forward_varlen(params, xs)?;
    let mut worst = 0.0f64;
    for (x, y) in xs.iter().zip(&fast.y) {
        let slow = forward_sequence_naive(params, x)?;
        worst = worst.max(slow.y.max_abs_diff(y).as_f64());
    }
    Ok(worst)
}

/// One random configuration: batch ≤ 4, length ≤ 64, memories ≤ 8, top-k ≤ 4.
pub fn equivalence_trial<R: Rng + ?Sized>(trial: usize, rule: RuleKind, rng: &mut R) -> Result<EquivalenceTrial> {
    let num_memories = rng.gen_range(1..=8);
    let top_k = rng.gen_range(1..=num_memories.min(4));
    let shared = rng.gen_bool(0.5);
    let mut cfg = LayerConfig::new(rng.gen_range(2..=8), num_memories, top_k, shared, rule);
    cfg.d_k = rng.gen_range(1..=6);
    cfg.d_v = rng.gen_range(1..=6);
    let batch = rng.gen_range(1..=4);
    let seq_len = rng.gen_range(1..=64);
    let params = MomLayerParams::<f64>::init(&cfg, rng)?;
    let xs: Vec<Matrix<f64>> = (0..batch).map(|_| Matrix::uniform(seq_len, cfg.d, 1.0, rng)).collect();
    let max_err_f64 = max_path_difference(&params, &xs)?;
    let xs32: Vec<Matrix<f32>> = xs.iter().map(Matrix::cast).collect();
    let max_err_f32 = max_path_difference(&params.cast::<f32>(), &xs32)?;
    Ok(EquivalenceTrial { trial, rule, batch, seq_len, num_memories, top_k, shared_memory: shared, max_err_f64, max_err_f32 })
}

/// `trials` random configurations cycling through every rule.
pub fn run_equivalence(trials: usize, seed: u64) -> Result<EquivalenceReport> {
    if trials == 0 {
        return invalid("need at least one trial");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = (0..trials)
        .map(|i| equivalence_trial(i, RuleKind::ALL[i % RuleKind::ALL.len()], &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let max_err_f64 = trials.iter().map(|t| t.max_err_f64).fold(0.0, f64::max);
    let max_err_f32 = trials.iter().map(|t| t.max_err_f32).fold(0.0, f64::max);
    let pass = max_err_f64 < EQUIVALENCE_TOL_F64 && max_err_f32 < EQUIVALENCE_TOL_F32;
    Ok(EquivalenceReport { seed, trials, max_err_f64, max_err_f32, pass })
}

/// What `gradcheck` runs: one randomized layer per rule and trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    #[serde(default = "default_rules")]
    pub rules: Vec<RuleKind>,
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub num_memories: usize,
    pub top_k: usize,
    #[serde(default = "default_true")]
    pub shared_memory: bool,
    pub seq_len: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_rules() -> Vec<RuleKind> {
    RuleKind::ALL.iter().copied().filter(|k| supports_backward(*k)).collect()
}
fn default_true() -> bool {
    true
}
fn default_trials() -> usize {
    1
}
fn default_epsilon() -> f64 {
    crate::grad::DEFAULT_FD_EPSILON
}
fn default_tolerance() -> f64 {
    crate::grad::DEFAULT_GRAD_TOLERANCE
}

impl GradcheckConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckRun {
    pub reports: Vec<GradReport>,
    /// Inputs redrawn because some token sat too close to a routing tie.
    pub resampled: usize,
    pub pass: bool,
}

const MAX_RESAMPLES: usize = 100;

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    let mut resampled = 0;
    for trial in 0..cfg.trials {
        for &rule in &cfg.rules {
            let mut layer = LayerConfig::new(cfg.d, cfg.num_memories, cfg.top_k, cfg.shared_memory, rule);
            layer.d_k = cfg.d_k;
            layer.d_v = cfg.d_v;
            let params = MomLayerParams::<f64>::init(&layer, &mut rng)?;
            let mut attempts = 0;
            let xs = loop {
                let xs = Matrix::uniform(cfg.seq_len, cfg.d, 1.0, &mut rng);
                if min_routing_margin(&params, &xs).map_or(true, |m| m >= ROUTING_TIE_MARGIN) {
                    break xs;
                }
                attempts += 1;
                if attempts == MAX_RESAMPLES {
                    return invalid("could not draw an input away from routing ties");
                }
            };
            resampled += attempts;
            let upstream = Matrix::uniform(cfg.seq_len, cfg.d, 1.0, &mut rng);
            let mut report = check_layer_gradients(&params, &xs, &upstream, cfg.epsilon, cfg.tolerance)?;
            report.fingerprint = format!("{} trial={trial} seed={}", report.fingerprint, cfg.seed);
            reports.push(report);
        }
    }
    let pass = reports.iter().all(|r| r.pass);
    Ok(GradcheckRun { reports, resampled, pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equivalence_small_run() {
        let report = run_equivalence(22, 5).unwrap();
        assert!(report.pass, "f64 {} f32 {}", report.max_err_f64, report.max_err_f32);
        let rules: std::collections::HashSet<_> = report.trials.iter().map(|t| t.rule).collect();
        assert_eq!(rules.len(), 11);
        assert!(run_equivalence(0, 0).is_err());
    }

    #[test]
    fn gradcheck_config_defaults_to_supported_rules() {
        let cfg = GradcheckConfig::from_toml("d = 4\nd_k = 3\nd_v = 2\nnum_memories = 3\ntop_k = 2\nseq_len = 4\n").unwrap();
        assert_eq!(cfg.rules.len(), 5);
        let run = run_gradcheck(&cfg).unwrap();
        assert_eq!(run.reports.len(), 5);
        assert!(run.pass);
    }

    #[test]
    fn gradcheck_rejects_forward_only_rule() {
        let cfg = GradcheckConfig::from_toml("rules = [\"ttt\"]\nd = 4\nd_k = 3\nd_v = 2\nnum_memories = 3\ntop_k = 2\nseq_len = 4\n").unwrap();
        assert!(matches!(run_gradcheck(&cfg), Err(Error::Unsupported(_))));
    }
}
