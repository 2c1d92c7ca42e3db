//! Token-mixing model for the recall task: embedding (plus an optional
//! learned previous-token embedding), a stack of pre-norm residual MoM
//! layers, a final normalization, and logits tied to the embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grad::{backward_recorded, forward_recorded, supports_backward, LayerTape};
use crate::kernels::RuleKind;
use crate::layer::{LayerConfig, MomLayerParams};
use crate::params::{zeros_like, Parameters};
use crate::recall::task::{RecallSequence, PAD};
use crate::router::{LoadBalance, DEFAULT_AUX_SCALE};
use crate::scalar::Scalar;
use crate::tensor::{axpy, rms_norm, rms_norm_backward, softmax, Matrix};
use crate::varlen::forward_varlen;

const HIDDEN_NORM_EPS: f64 = 1e-6;
const EMBED_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Routed memories as configured.
    Mom,
    /// One memory of the configured size, no router, no shared memory.
    Single,
    /// One memory whose value width matches all memories a MoM token activates.
    Expanded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub rule: RuleKind,
    #[serde(default = "default_memories")]
    pub num_memories: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_true")]
    pub shared_memory: bool,
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    #[serde(default = "default_true")]
    pub token_shift: bool,
    #[serde(default = "default_aux_scale")]
    pub aux_scale: f64,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_decay_bias")]
    pub decay_bias: f64,
}

fn default_memories() -> usize {
    4
}
fn default_top_k() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_layers() -> usize {
    2
}
fn default_aux_scale() -> f64 {
    DEFAULT_AUX_SCALE
}
fn default_decay_bias() -> f64 {
    2.0
}

impl ModelConfig {
    pub fn layer_config(&self) -> LayerConfig {
        let (num_memories, top_k, shared, d_v) = match self.kind {
            ModelKind::Mom => (self.num_memories, self.top_k, self.shared_memory, self.d_v),
            ModelKind::Single => (1, 1, false, self.d_v),
            ModelKind::Expanded => (1, 1, false, (self.top_k + usize::from(self.shared_memory)) * self.d_v),
        };
        let mut cfg = LayerConfig::new(self.d, num_memories, top_k, shared, self.rule);
        cfg.d_k = self.d_k;
        cfg.d_v = d_v;
        cfg.gamma = self.gamma;
        cfg.decay_bias = self.decay_bias;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return invalid("model needs at least one layer");
        }
        if !supports_backward(self.rule) {
            return invalid(format!("rule {} has no analytic backward and cannot be trained", self.rule));
        }
        if !(self.aux_scale >= 0.0 && self.aux_scale.is_finite()) {
            return invalid("aux_scale must be finite and non-negative");
        }
        self.layer_config().validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallModel<T> {
    /// `vocab × d`, also the output projection.
    pub embed: Matrix<T>,
    /// Embedding of the previous token, added to the current one.
    pub shift: Option<Matrix<T>>,
    pub layers: Vec<MomLayerParams<T>>,
}

impl<T: Scalar> RecallModel<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let embed = Matrix::uniform(vocab_size, cfg.d, EMBED_INIT, rng);
        let shift = cfg.token_shift.then(|| Matrix::zeros(vocab_size, cfg.d));
        let layer_cfg = cfg.layer_config();
        let layers = (0..cfg.num_layers)
            .map(|_| MomLayerParams::init(&layer_cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { embed, shift, layers })
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    pub fn d(&self) -> usize {
        self.embed.cols()
    }

    fn embed_tokens(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        let mut h = Matrix::zeros(tokens.len(), self.d());
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.vocab_size() {
                return invalid(format!("token {tok} outside vocabulary of {}", self.vocab_size()));
            }
            let row = h.row_mut(t);
            row.copy_from_slice(self.embed.row(tok as usize));
            if let Some(shift) = &self.shift {
                let prev = if t == 0 { PAD } else { tokens[t - 1] };
                axpy(T::one(), shift.row(prev as usize), row);
            }
        }
        Ok(h)
    }
}

impl<T: Scalar> Parameters<T> for RecallModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[T])) {
        f("embed", self.embed.as_slice());
        if let Some(s) = &self.shift {
            f("shift", s.as_slice());
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&mut |name, t| f(&format!("layer{l}.{name}"), t));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        f("embed", self.embed.as_mut_slice());
        if let Some(s) = &mut self.shift {
            f("shift", s.as_mut_slice());
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&mut |name, t| f(&format!("layer{l}.{name}"), t));
        }
    }
}

fn normalize_batch<T: Scalar>(hs: &[Matrix<T>]) -> (Vec<Matrix<T>>, Vec<Vec<T>>) {
    let eps = T::of(HIDDEN_NORM_EPS);
    hs.iter()
        .map(|h| {
            let mut z = Matrix::zeros(h.rows(), h.cols());
            let mut inv = Vec::with_capacity(h.rows());
            for t in 0..h.rows() {
                let (r, s) = rms_norm(h.row(t), eps);
                z.row_mut(t).copy_from_slice(&r);
                inv.push(s);
            }
            (z, inv)
        })
        .unzip()
}

fn check_batch(batch: &[&RecallSequence]) -> Result<usize> {
    let len = batch.first().map_or(0, |s| s.tokens.len());
    if len == 0 || batch.iter().any(|s| s.tokens.len() != len) {
        return invalid("batch must hold non-empty sequences of equal length");
    }
    Ok(len)
}

#[derive(Clone, Debug)]
pub struct BatchOutcome<T> {
    /// Mean cross-entropy over query positions.
    pub loss: T,
    /// Load-balance loss summed over layers.
    pub aux_loss: T,
    pub correct: usize,
    pub queries: usize,
    /// Routing statistics per layer.
    pub balance: Vec<LoadBalance<T>>,
}

/// Loss, accuracy and gradients for one batch.
pub fn loss_and_grad<T: Scalar>(
    model: &RecallModel<T>,
    batch: &[&RecallSequence],
    aux_scale: T,
) -> Result<(BatchOutcome<T>, RecallModel<T>)> {
    check_batch(batch)?;
    let mut hs: Vec<Matrix<T>> = batch.iter().map(|s| model.embed_tokens(&s.tokens)).collect::<Result<_>>()?;
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut tapes: Vec<LayerTape<T>> = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let (z, inv) = normalize_batch(&hs);
        let tape = forward_recorded(layer, &z, None)?;
        let next = hs
            .iter()
            .zip(&tape.y)
            .map(|(h, y)| {
                let mut n = h.clone();
                n.add_scaled(T::one(), y);
                n
            })
            .collect();
        inputs.push((std::mem::replace(&mut hs, next), inv));
        tapes.push(tape);
    }

    let mut grads = zeros_like(model);
    let mut balance = Vec::with_capacity(model.layers.len());
    let mut aux_loss = T::zero();
    for (layer, tape) in model.layers.iter().zip(&tapes) {
        let mut lb = LoadBalance::new(layer.num_memories());
        for d in tape.decisions.iter().flatten() {
            lb.add(d)?;
        }
        aux_loss += lb.loss(aux_scale)?;
        balance.push(lb);
    }

    let queries: usize = batch.iter().map(|s| s.queries.len()).sum();
    let inv_q = T::one() / T::from_usize(queries.max(1)).unwrap();
    let eps = T::of(HIDDEN_NORM_EPS);
    let mut loss = T::zero();
    let mut correct = 0;
    let mut dh: Vec<Matrix<T>> = hs.iter().map(|h| Matrix::zeros(h.rows(), h.cols())).collect();
    for (b, seq) in batch.iter().enumerate() {
        for &(pos, target) in &seq.queries {
            let (r, inv) = rms_norm(hs[b].row(pos), eps);
            let logits = model.embed.right_mul(&r);
            correct += usize::from(argmax(&logits) == target as usize);
            let mut p = softmax(&logits);
            loss -= p[target as usize].max(T::min_positive_value()).ln() * inv_q;
            p[target as usize] -= T::one();
            p.iter_mut().for_each(|g| *g *= inv_q);
            grads.embed.add_outer(T::one(), &p, &r);
            let dr = model.embed.left_mul(&p);
            let dx = rms_norm_backward(hs[b].row(pos), inv, &dr);
            axpy(T::one(), &dx, dh[b].row_mut(pos));
        }
    }
    if !loss.is_finite() {
        return Err(crate::Error::Diverged { step: 0, detail: format!("cross-entropy is {loss}") });
    }

    for l in (0..model.layers.len()).rev() {
        let prob_grad = balance[l].prob_grad(aux_scale);
        let g = backward_recorded(&model.layers[l], &tapes[l], &dh, Some(&prob_grad))?;
        grads.layers[l] = g.params;
        let (h_in, inv) = &inputs[l];
        for b in 0..dh.len() {
            for t in 0..h_in[b].rows() {
                let dx = rms_norm_backward(h_in[b].row(t), inv[b][t], g.xs[b].row(t));
                axpy(T::one(), &dx, dh[b].row_mut(t));
            }
        }
    }

    for (b, seq) in batch.iter().enumerate() {
        for (t, &tok) in seq.tokens.iter().enumerate() {
            let g = dh[b].row(t);
            axpy(T::one(), g, grads.embed.row_mut(tok as usize));
            if let Some(shift) = &mut grads.shift {
                let prev = if t == 0 { PAD } else { seq.tokens[t - 1] };
                axpy(T::one(), g, shift.row_mut(prev as usize));
            }
        }
    }
    Ok((BatchOutcome { loss, aux_loss, correct, queries, balance }, grads))
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub accuracy: f64,
    pub correct: usize,
    pub queries: usize,
    pub balance: Vec<LoadBalance<T>>,
}

/// Argmax accuracy at query positions, using the bucketed forward.
pub fn evaluate<T: Scalar>(model: &RecallModel<T>, sequences: &[RecallSequence], batch_size: usize) -> Result<Evaluation<T>> {
    let mut balance: Vec<LoadBalance<T>> = model.layers.iter().map(|l| LoadBalance::new(l.num_memories())).collect();
    let (mut correct, mut queries) = (0, 0);
    for chunk in sequences.chunks(batch_size.max(1)) {
        let batch: Vec<&RecallSequence> = chunk.iter().collect();
        check_batch(&batch)?;
        let mut hs: Vec<Matrix<T>> = batch.iter().map(|s| model.embed_tokens(&s.tokens)).collect::<Result<_>>()?;
        for (layer, lb) in model.layers.iter().zip(&mut balance) {
            let (z, _) = normalize_batch(&hs);
            let out = forward_varlen(layer, &z)?;
            for d in out.decisions.iter().flatten() {
                lb.add(d)?;
            }
            for (h, y) in hs.iter_mut().zip(&out.y) {
                h.add_scaled(T::one(), y);
            }
        }
        for (b, seq) in batch.iter().enumerate() {
            for &(pos, target) in &seq.queries {
                let (r, _) = rms_norm(hs[b].row(pos), T::of(HIDDEN_NORM_EPS));
                correct += usize::from(argmax(&model.embed.right_mul(&r)) == target as usize);
                queries += 1;
            }
        }
    }
    let accuracy = if queries == 0 { 0.0 } else { correct as f64 / queries as f64 };
    Ok(Evaluation { accuracy, correct, queries, balance })
}
