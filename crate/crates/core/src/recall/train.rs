//! Experiment configuration, the training loop, and multi-seed comparisons.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::Parameters;
use crate::recall::model::{evaluate, loss_and_grad, ModelConfig, RecallModel};
use crate::recall::optim::{AdamW, OptimConfig};
use crate::recall::task::{gen_recall_dataset, RecallDataset, RecallSequence, RecallTaskConfig};
use crate::router::LoadBalance;
use crate::scalar::Scalar;

pub const ROUTING_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub num_pairs: usize,
    pub num_queries: usize,
    pub seq_len: usize,
    /// Held-out sequences used for the reported accuracy.
    #[serde(default = "default_eval_sequences")]
    pub eval_sequences: usize,
    /// Size of the training set; 0 draws `steps * batch_size` fresh sequences.
    #[serde(default)]
    pub train_sequences: usize,
}

fn default_eval_sequences() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    /// Routing snapshots are taken every `log_every` steps.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainSpec,
    #[serde(default)]
    pub optim: OptimConfig,
}

fn default_name() -> String {
    "experiment".into()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Training data uses even seeds and evaluation odd ones, so the two never coincide.
    pub fn task_config(&self, eval: bool) -> RecallTaskConfig {
        RecallTaskConfig {
            vocab_size: self.task.vocab_size,
            num_pairs: self.task.num_pairs,
            num_queries: self.task.num_queries,
            seq_len: self.task.seq_len,
            seed: self.seed.wrapping_mul(2).wrapping_add(u64::from(eval)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task_config(false).validate()?;
        self.model.validate()?;
        self.optim.validate()?;
        if self.train.batch_size == 0 || self.train.log_every == 0 {
            return invalid("batch_size and log_every must be positive");
        }
        if self.task.eval_sequences == 0 {
            return invalid("eval_sequences must be positive");
        }
        Ok(())
    }

    /// Stable hex digest of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        // FNV-1a, 64 bit
        let hash = json.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x100_0000_01b3));
        format!("{hash:016x}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub aux_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingSnapshot {
    pub step: usize,
    pub fractions: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub config: ExperimentConfig,
    pub loss: Vec<LossPoint>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    /// Per-layer, per-memory share of routed selections on the evaluation set.
    pub routing_fractions: Vec<Vec<f64>>,
    /// Per-layer max/min routing fraction; `None` when some memory is never chosen.
    pub routing_imbalance: Vec<Option<f64>>,
    pub routing_history: Vec<RoutingSnapshot>,
    pub invariants: Vec<InvariantCheck>,
    /// Kept out of `run.json` so repeated runs serialize identically.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl RunRecord {
    pub fn passed(&self) -> bool {
        self.invariants.iter().all(|c| c.pass)
    }

    pub fn max_imbalance(&self) -> Option<f64> {
        self.routing_imbalance.iter().try_fold(1.0f64, |acc, r| r.map(|r| acc.max(r)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    /// `run.json`, `loss.csv` and `routing.csv`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("run.json"), self.to_json() + "\n")?;
        let mut w = csv::Writer::from_path(dir.join("loss.csv"))?;
        w.write_record(["step", "loss", "aux_loss"])?;
        for p in &self.loss {
            w.write_record([p.step.to_string(), p.loss.to_string(), p.aux_loss.to_string()])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("routing.csv"))?;
        w.write_record(["layer", "memory", "fraction"])?;
        for (l, layer) in self.routing_fractions.iter().enumerate() {
            for (m, f) in layer.iter().enumerate() {
                w.write_record([l.to_string(), m.to_string(), f.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn fractions<T: Scalar>(balance: &[LoadBalance<T>]) -> Vec<Vec<f64>> {
    balance.iter().map(|lb| lb.fractions().iter().map(|f| f.as_f64()).collect()).collect()
}

fn imbalance(fractions: &[f64]) -> Option<f64> {
    let max = fractions.iter().copied().fold(0.0, f64::max);
    let min = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    (min > 0.0).then(|| max / min)
}

pub struct Datasets {
    pub train: RecallDataset,
    pub eval: RecallDataset,
}

pub fn make_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let count = match cfg.task.train_sequences {
        0 => cfg.train.steps * cfg.train.batch_size,
        n => n,
    };
    Ok(Datasets {
        train: gen_recall_dataset(&cfg.task_config(false), count)?,
        eval: gen_recall_dataset(&cfg.task_config(true), cfg.task.eval_sequences)?,
    })
}

/// Train from the config's seed and evaluate on the held-out set.
/// `progress` receives every loss point as it is produced.
pub fn train<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &Datasets,
    progress: &mut dyn FnMut(&LossPoint),
) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut model = RecallModel::<T>::init(&cfg.model, cfg.task.vocab_size, &mut rng)?;
    let batch_size = cfg.train.batch_size;
    let eval_batch = batch_size.max(32);
    let initial = evaluate(&model, &data.eval.sequences, eval_batch)?;

    let mut opt = AdamW::new(cfg.optim.clone(), model.num_params());
    let aux_scale = T::of(cfg.model.aux_scale);
    let mut loss = Vec::with_capacity(cfg.train.steps);
    let mut history = Vec::new();
    let train_len = data.train.len();
    if cfg.train.steps > 0 && train_len < batch_size {
        return invalid("training set is smaller than one batch");
    }
    for step in 0..cfg.train.steps {
        let offset = (step * batch_size) % train_len;
        let batch: Vec<&RecallSequence> = (0..batch_size).map(|i| &data.train.sequences[(offset + i) % train_len]).collect();
        let (outcome, grads) = loss_and_grad(&model, &batch, aux_scale)?;
        let point = LossPoint { step, loss: outcome.loss.as_f64(), aux_loss: outcome.aux_loss.as_f64() };
        if !(point.loss.is_finite() && point.aux_loss.is_finite()) {
            return Err(Error::Diverged { step, detail: format!("loss {} aux {}", point.loss, point.aux_loss) });
        }
        let norm = opt.step(&mut model, &grads, cfg.optim.lr_at(step, cfg.train.steps));
        if !norm.is_finite() {
            return Err(Error::Diverged { step, detail: format!("gradient norm {norm}") });
        }
        if step % cfg.train.log_every == 0 || step + 1 == cfg.train.steps {
            history.push(RoutingSnapshot { step, fractions: fractions(&outcome.balance) });
        }
        progress(&point);
        loss.push(point);
    }

    let last = evaluate(&model, &data.eval.sequences, eval_batch)?;
    let routing_fractions = fractions(&last.balance);
    let routing_imbalance = routing_fractions.iter().map(|f| imbalance(f)).collect();

    let worst_sum = routing_fractions
        .iter()
        .map(|f| (f.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let invariants = vec![
        InvariantCheck {
            name: "loss_finite".into(),
            pass: loss.iter().all(|p| p.loss.is_finite() && p.aux_loss.is_finite()),
            detail: format!("{} steps", loss.len()),
        },
        InvariantCheck {
            name: "routing_fractions_sum_to_one".into(),
            pass: worst_sum <= ROUTING_SUM_TOLERANCE,
            detail: format!("max |sum - 1| = {worst_sum:e}"),
        },
        InvariantCheck {
            name: "accuracy_in_unit_interval".into(),
            pass: (0.0..=1.0).contains(&last.accuracy) && (0.0..=1.0).contains(&initial.accuracy),
            detail: format!("initial {} final {}", initial.accuracy, last.accuracy),
        },
    ];
    Ok(RunRecord {
        fingerprint: cfg.fingerprint(),
        config: cfg.clone(),
        loss,
        initial_accuracy: initial.accuracy,
        final_accuracy: last.accuracy,
        routing_fractions,
        routing_imbalance,
        routing_history: history,
        invariants,
        wall_time: start.elapsed(),
    })
}

/// Generate data and train at the configured precision.
pub fn run_experiment(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&LossPoint)) -> Result<RunRecord> {
    cfg.validate()?;
    let data = make_datasets(cfg)?;
    match cfg.precision {
        Precision::F32 => train::<f32>(cfg, &data, progress),
        Precision::F64 => train::<f64>(cfg, &data, progress),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = match sorted.len() {
            0 => 0.0,
            l if l % 2 == 1 => sorted[l / 2],
            l => 0.5 * (sorted[l / 2 - 1] + sorted[l / 2]),
        };
        Self { mean, std: var.sqrt(), median }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmSummary {
    pub name: String,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub accuracy: Summary,
    /// Per-layer, per-memory routing fractions averaged over seeds.
    pub mean_routing: Vec<Vec<f64>>,
    pub max_imbalance: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub arms: Vec<ArmSummary>,
    #[serde(skip)]
    pub runs: Vec<Vec<RunRecord>>,
}

impl CompareReport {
    pub fn passed(&self) -> bool {
        self.runs.iter().flatten().all(RunRecord::passed)
    }

    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.name == name)
    }

    /// `compare.json`, `compare.csv`, `compare_routing.csv`, and each run's
    /// artifacts under `<arm>/seed-<s>/`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("compare.json"), serde_json::to_string_pretty(self)? + "\n")?;
        let mut w = csv::Writer::from_path(dir.join("compare.csv"))?;
        w.write_record(["arm", "seed", "accuracy", "final_loss"])?;
        for (arm, runs) in self.arms.iter().zip(&self.runs) {
            for run in runs {
                let final_loss = run.loss.last().map_or(f64::NAN, |p| p.loss);
                w.write_record([arm.name.clone(), run.config.seed.to_string(), run.final_accuracy.to_string(), final_loss.to_string()])?;
            }
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("compare_routing.csv"))?;
        w.write_record(["arm", "layer", "memory", "fraction"])?;
        for arm in &self.arms {
            for (l, layer) in arm.mean_routing.iter().enumerate() {
                for (m, f) in layer.iter().enumerate() {
                    w.write_record([arm.name.clone(), l.to_string(), m.to_string(), f.to_string()])?;
                }
            }
        }
        w.flush()?;
        for (arm, runs) in self.arms.iter().zip(&self.runs) {
            for run in runs {
                run.write_artifacts(&dir.join(&arm.name).join(format!("seed-{}", run.config.seed)))?;
            }
        }
        Ok(())
    }
}

pub fn summarize_arm(name: &str, runs: &[RunRecord]) -> ArmSummary {
    let accuracies: Vec<f64> = runs.iter().map(|r| r.final_accuracy).collect();
    let mut mean_routing: Vec<Vec<f64>> = runs.first().map(|r| r.routing_fractions.clone()).unwrap_or_default();
    for layer in mean_routing.iter_mut() {
        layer.iter_mut().for_each(|f| *f = 0.0);
    }
    for run in runs {
        for (acc, layer) in mean_routing.iter_mut().zip(&run.routing_fractions) {
            for (a, f) in acc.iter_mut().zip(layer) {
                *a += f / runs.len() as f64;
            }
        }
    }
    let layers = mean_routing.len();
    let max_imbalance = (0..layers)
        .map(|l| runs.iter().try_fold(1.0f64, |acc, r| r.routing_imbalance[l].map(|x| acc.max(x))))
        .collect();
    ArmSummary {
        name: name.to_string(),
        fingerprint: runs.first().map(|r| r.config.with_seed(0).fingerprint()).unwrap_or_default(),
        seeds: runs.iter().map(|r| r.config.seed).collect(),
        accuracy: Summary::of(&accuracies),
        accuracies,
        mean_routing,
        max_imbalance,
    }
}

/// Run every arm for each seed. Arms must share the task and training budget.
pub fn compare(
    arms: &[ExperimentConfig],
    seeds: &[u64],
    progress: &mut dyn FnMut(&str, u64, &LossPoint),
) -> Result<CompareReport> {
    let Some(first) = arms.first() else {
        return invalid("compare needs at least one arm");
    };
    if seeds.is_empty() {
        return invalid("compare needs at least one seed");
    }
    for arm in arms {
        if arm.task != first.task || arm.train != first.train {
            return invalid(format!("arm {} differs from {} in task or training budget", arm.name, first.name));
        }
    }
    let mut names: Vec<&str> = arms.iter().map(|a| a.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return invalid("arm names must be distinct");
    }
    let mut summaries = Vec::with_capacity(arms.len());
    let mut runs = Vec::with_capacity(arms.len());
    for arm in arms {
        let arm_runs = seeds
            .iter()
            .map(|&s| run_experiment(&arm.with_seed(s), &mut |p| progress(&arm.name, s, p)))
            .collect::<Result<Vec<_>>>()?;
        summaries.push(summarize_arm(&arm.name, &arm_runs));
        runs.push(arm_runs);
    }
    Ok(CompareReport { arms: summaries, runs })
}
