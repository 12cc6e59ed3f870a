//! Loss with the z-loss regularizer, Adam with warmup/decay schedules and
//! global-norm clipping, synthetic copy tasks, and the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::inference::masked_accuracy;
use crate::model::{
    bind_params, forward_on_tape, init_params, save_checkpoint, target_position, ForwardOptions,
    ModelConfig, ParameterSet,
};
use crate::numerics::{Array, NodeId, Scalar, Tape};
use crate::{Error, Result, Token};

/// Fixed number of gradient-accumulation slices per batch. Slice boundaries
/// depend only on the batch size, so results are bit-identical no matter
/// how many worker threads run them.
const GRAD_CHUNKS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    None,
    Cosine,
}

fn default_b1() -> f64 {
    0.1
}
fn default_b2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_lr() -> f64 {
    3e-4
}
fn default_warmup() -> usize {
    10_000
}
fn default_clip() -> f64 {
    1.0
}
fn default_z_loss() -> f64 {
    1e-4
}
fn default_log_interval() -> usize {
    50
}
fn default_checkpoint_interval() -> usize {
    1000
}
fn default_eval_interval() -> usize {
    250
}
fn default_eval_sequences() -> usize {
    12
}
fn default_decay() -> Decay {
    Decay::None
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_decay")]
    pub decay: Decay,
    /// Cosine decay window; defaults to the steps remaining after warmup.
    #[serde(default)]
    pub decay_steps: Option<usize>,
    /// Adam b1 as printed in the training recipe (0.1; the conventional 0.9
    /// is one config line away).
    #[serde(default = "default_b1")]
    pub adam_b1: f64,
    #[serde(default = "default_b2")]
    pub adam_b2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_clip")]
    pub max_grad_norm: f64,
    #[serde(default = "default_z_loss")]
    pub z_loss_coeff: f64,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "default_eval_sequences")]
    pub eval_sequences: usize,
    /// Stop as soon as held-out masked accuracy reaches this value.
    #[serde(default)]
    pub stop_accuracy: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1".to_string()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps {} > total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.base_lr <= 0.0 || self.adam_eps <= 0.0 || self.max_grad_norm <= 0.0 {
            return Err(Error::config("rates must be positive".to_string()));
        }
        if self.log_interval == 0 || self.checkpoint_interval == 0 || self.eval_interval == 0 {
            return Err(Error::config("intervals must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Linear ramp to `base_lr` over the warmup, then constant or cosine to
/// zero over the decay window.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    match cfg.decay {
        Decay::None => cfg.base_lr,
        Decay::Cosine => {
            let window = cfg.decay_steps.unwrap_or(cfg.total_steps - cfg.warmup_steps);
            if window == 0 {
                return cfg.base_lr;
            }
            let t = (step - cfg.warmup_steps).min(window) as f64 / window as f64;
            cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// A batch of fixed-length sequences. `loss_mask[i][p - 1]` says whether
/// predicting the token at position `p` of sequence `i` contributes to the
/// loss.
#[derive(Clone, Debug)]
pub struct Batch {
    pub seq_len: usize,
    tokens: Vec<Token>,
    loss_mask: Vec<bool>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn sequence(&self, i: usize) -> &[Token] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn mask(&self, i: usize) -> &[bool] {
        let targets = self.seq_len - 1;
        &self.loss_mask[i * targets..(i + 1) * targets]
    }
}

/// Mirror-copy sequences: `[BOS, r_1..r_k, r_k..r_1, EOS]`, with loss on
/// the mirrored half plus the EOS only. BOS/EOS take the two token ids just
/// above the data vocabulary.
pub fn gen_copy_batch(
    k_half: usize,
    vocab: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let (bos, eos) = (vocab as Token, vocab as Token + 1);
    let seq_len = 2 * k_half + 2;
    let mut tokens = Vec::with_capacity(batch * seq_len);
    let mut loss_mask = Vec::with_capacity(batch * (seq_len - 1));
    for _ in 0..batch {
        tokens.push(bos);
        let start = tokens.len();
        for _ in 0..k_half {
            tokens.push(rng.gen_range(0..vocab) as Token);
        }
        for j in (0..k_half).rev() {
            let t = tokens[start + j];
            tokens.push(t);
        }
        tokens.push(eos);
        // Positions 1..=k are noise; k+1..=2k+1 (mirror plus EOS) are scored.
        for p in 1..seq_len {
            loss_mask.push(p > k_half);
        }
    }
    Batch { seq_len, tokens, loss_mask }
}

/// Periodic sequences where every target equals the token `offset`
/// positions earlier: `offset` random tokens followed by `window` copies.
/// A model whose context cannot reach back `offset` positions can do no
/// better than chance on the scored block.
pub fn gen_offset_copy_batch(
    window: usize,
    offset: usize,
    vocab: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let seq_len = offset + window;
    let mut tokens = Vec::with_capacity(batch * seq_len);
    let mut loss_mask = Vec::with_capacity(batch * (seq_len - 1));
    for _ in 0..batch {
        let start = tokens.len();
        for _ in 0..offset {
            tokens.push(rng.gen_range(0..vocab) as Token);
        }
        for j in 0..window {
            let t = tokens[start + j];
            tokens.push(t);
        }
        for p in 1..seq_len {
            loss_mask.push(p >= offset);
        }
    }
    Batch { seq_len, tokens, loss_mask }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Copy { k_half: usize, vocab: usize },
    OffsetCopy { window: usize, offset: usize, vocab: usize },
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::Copy { k_half, vocab } => {
                if k_half == 0 || vocab < 2 {
                    return Err(Error::config("copy task needs k_half >= 1, vocab >= 2".to_string()));
                }
            }
            TaskSpec::OffsetCopy { window, offset, vocab } => {
                if window == 0 || vocab < 2 {
                    return Err(Error::config(
                        "offset copy needs window >= 1, vocab >= 2".to_string(),
                    ));
                }
                if offset < window {
                    return Err(Error::config(format!(
                        "offset {} must be >= window {}",
                        offset, window
                    )));
                }
            }
        }
        Ok(())
    }

    /// Vocabulary the model must provide (including specials).
    pub fn required_vocab(&self) -> usize {
        match *self {
            TaskSpec::Copy { vocab, .. } => vocab + 2,
            TaskSpec::OffsetCopy { vocab, .. } => vocab,
        }
    }

    pub fn seq_len(&self) -> usize {
        match *self {
            TaskSpec::Copy { k_half, .. } => 2 * k_half + 2,
            TaskSpec::OffsetCopy { window, offset, .. } => offset + window,
        }
    }

    pub fn gen_batch(&self, batch: usize, rng: &mut ChaCha8Rng) -> Batch {
        match *self {
            TaskSpec::Copy { k_half, vocab } => gen_copy_batch(k_half, vocab, batch, rng),
            TaskSpec::OffsetCopy { window, offset, vocab } => {
                gen_offset_copy_batch(window, offset, vocab, batch, rng)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossMetrics {
    pub loss: f64,
    pub ce: f64,
    pub z_loss: f64,
    pub token_accuracy: f64,
    pub count: usize,
}

struct LossParts {
    sum: NodeId,
    count: usize,
    loss_sum: f64,
    ce_sum: f64,
    z_sum: f64,
    hits: usize,
}

/// Sum over unmasked positions of cross-entropy plus
/// `z_loss_coeff * log(partition)^2`, left unscaled so per-sequence sums
/// can be pooled across a batch before dividing by the pooled count.
fn masked_loss_sum<S: Scalar>(
    tape: &mut Tape<S>,
    logits: NodeId,
    targets: &[Token],
    loss_mask: &[bool],
    z_loss_coeff: f64,
) -> Result<LossParts> {
    let n = tape.value(logits).rows();
    if targets.len() != n || loss_mask.len() != n {
        return Err(Error::shape(
            "loss",
            format!("{} logit rows vs {} targets, {} mask bits", n, targets.len(), loss_mask.len()),
        ));
    }
    let count = loss_mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::config("loss mask selects no positions".to_string()));
    }

    let lse = tape.logsumexp_rows(logits)?;
    let picked = tape.take_per_row(logits, Arc::new(targets.to_vec()))?;
    let ce = tape.sub(lse, picked)?;
    let z_sq = tape.mul(lse, lse)?;
    let z_term = tape.scale(z_sq, S::of_f64(z_loss_coeff))?;
    let per_position = tape.add(ce, z_term)?;
    let mask_arr =
        Array::from_fn(vec![n], |i| if loss_mask[i] { S::one() } else { S::zero() });
    let mask_node = tape.leaf(mask_arr);
    let masked = tape.mul(per_position, mask_node)?;
    let sum = tape.sum_all(masked)?;

    let mut ce_sum = 0f64;
    let mut z_sum = 0f64;
    let mut hits = 0usize;
    let logit_vals = tape.value(logits);
    let ce_vals = tape.value(ce);
    let lse_vals = tape.value(lse);
    for q in 0..n {
        if !loss_mask[q] {
            continue;
        }
        ce_sum += ce_vals.data()[q].as_f64();
        let z = lse_vals.data()[q].as_f64();
        z_sum += z_loss_coeff * z * z;
        let row = logit_vals.row(q);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == targets[q] as usize {
            hits += 1;
        }
    }
    let loss_sum = tape.value(sum).data()[0].as_f64();
    Ok(LossParts { sum, count, loss_sum, ce_sum, z_sum, hits })
}

/// Token-mean loss over unmasked positions: cross-entropy plus the z-loss
/// regularizer, with per-batch metrics.
pub fn loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: NodeId,
    targets: &[Token],
    loss_mask: &[bool],
    z_loss_coeff: f64,
) -> Result<(NodeId, LossMetrics)> {
    let parts = masked_loss_sum(tape, logits, targets, loss_mask, z_loss_coeff)?;
    let inv = 1.0 / parts.count as f64;
    let mean = tape.scale(parts.sum, S::of_f64(inv))?;
    Ok((
        mean,
        LossMetrics {
            loss: parts.loss_sum * inv,
            ce: parts.ce_sum * inv,
            z_loss: parts.z_sum * inv,
            token_accuracy: parts.hits as f64 * inv,
            count: parts.count,
        },
    ))
}

/// Scale all gradients down to a global L2 norm of `max_norm` when they
/// exceed it. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Array<f32>], max_norm: f64) -> f64 {
    let mut total = 0f64;
    for g in grads.iter() {
        for &v in g.data() {
            total += (v as f64) * (v as f64);
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let factor = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(cfg: &TrainConfig) -> Self {
        AdamHyper { b1: cfg.adam_b1, b2: cfg.adam_b2, eps: cfg.adam_eps }
    }
}

/// Parameters plus Adam moments and the step counter.
pub struct TrainState {
    pub params: ParameterSet<f32>,
    pub moment1: Vec<Array<f32>>,
    pub moment2: Vec<Array<f32>>,
    pub step: usize,
    pub seed: u64,
    names: Vec<String>,
}

impl TrainState {
    pub fn new(params: ParameterSet<f32>, seed: u64) -> TrainState {
        let flat = params.flatten();
        TrainState {
            moment1: flat.iter().map(|(_, a)| Array::zeros(a.shape().to_vec())).collect(),
            moment2: flat.iter().map(|(_, a)| Array::zeros(a.shape().to_vec())).collect(),
            names: flat.into_iter().map(|(n, _)| n).collect(),
            params,
            step: 0,
            seed,
        }
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }
}

/// One Adam update with bias correction:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    state: &mut TrainState,
    grads: &[Array<f32>],
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if grads.len() != state.names.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradient arrays for {} parameters", grads.len(), state.names.len()),
        ));
    }
    for (g, name) in grads.iter().zip(&state.names) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }
    let t = state.step + 1;
    let bc1 = 1.0 - hyper.b1.powi(t as i32);
    let bc2 = 1.0 - hyper.b2.powi(t as i32);
    let (b1, b2, eps) = (hyper.b1, hyper.b2, hyper.eps);

    // Per-element math in f64 with f32 state, so updates round once.
    let mut idx = 0usize;
    state.params.visit_mut(|param| {
        let p = Arc::make_mut(param);
        let m = state.moment1[idx].data_mut();
        let v = state.moment2[idx].data_mut();
        let g = grads[idx].data();
        let out = p.data_mut();
        for i in 0..out.len() {
            let gi = g[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            out[i] = (out[i] as f64 - lr * (mi / bc1) / ((vi / bc2).sqrt() + eps)) as f32;
        }
        idx += 1;
    });
    state.step = t;
    Ok(())
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub z_loss: f64,
    pub token_accuracy: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub step_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<MetricsRecord>,
    pub final_accuracy: Option<f64>,
    pub stopped_early: bool,
    pub final_checkpoint: Option<PathBuf>,
}

struct ChunkStats {
    grads: Vec<Array<f32>>,
    loss_sum: f64,
    ce_sum: f64,
    z_sum: f64,
    hits: usize,
    count: usize,
}

fn derive_rng(seed: u64, step: usize, sequence: usize) -> ChaCha8Rng {
    let tag = (step as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(sequence as u64)
        .wrapping_add(0xD6E8_FEB8_6659_FD93);
    ChaCha8Rng::seed_from_u64(seed ^ tag)
}

/// Forward + loss + backward for one sequence, cropped to the trailing
/// model context. Gradients are of the masked loss SUM, so a batch pools
/// them and divides by the pooled count once.
fn sequence_pass(
    model_cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    tokens: &[Token],
    full_mask: &[bool],
    z_loss_coeff: f64,
    mut dropout_rng: ChaCha8Rng,
) -> Result<(Vec<Array<f32>>, LossParts)> {
    let n_eff = model_cfg.num_latents;
    let m_in = (tokens.len() - 1).min(model_cfg.max_context);
    let start = tokens.len() - 1 - m_in;
    let inputs = &tokens[start..start + m_in];

    let mut targets = Vec::with_capacity(n_eff);
    let mut mask = Vec::with_capacity(n_eff);
    for q in 0..n_eff {
        let pos = start + target_position(m_in, n_eff, q);
        targets.push(tokens[pos]);
        mask.push(full_mask[pos - 1]);
    }

    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let uses_dropout =
        model_cfg.cross_attend_dropout > 0.0 || model_cfg.post_attention_dropout > 0.0;
    let mut opts = ForwardOptions {
        position_offset: start,
        train_rng: uses_dropout.then_some(&mut dropout_rng),
        ..Default::default()
    };
    let logits = forward_on_tape(&mut tape, inputs, model_cfg, &bound, &mut opts)?;
    let parts = masked_loss_sum(&mut tape, logits, &targets, &mask, z_loss_coeff)?;
    let grads = tape.grad(parts.sum, &bound.ordered)?;
    Ok((grads, parts))
}

fn run_train_step(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    state: &TrainState,
    batch: &Batch,
) -> Result<(Vec<Array<f32>>, LossMetrics)> {
    let b = batch.batch_size();
    let chunks: Vec<(usize, usize)> = (0..GRAD_CHUNKS.min(b))
        .map(|c| {
            let lo = c * b / GRAD_CHUNKS.min(b);
            let hi = (c + 1) * b / GRAD_CHUNKS.min(b);
            (lo, hi)
        })
        .filter(|(lo, hi)| hi > lo)
        .collect();

    let step = state.step;
    let results: Vec<Result<ChunkStats>> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut acc: Option<Vec<Array<f32>>> = None;
            let mut stats =
                ChunkStats { grads: Vec::new(), loss_sum: 0.0, ce_sum: 0.0, z_sum: 0.0, hits: 0, count: 0 };
            for i in lo..hi {
                let (grads, parts) = sequence_pass(
                    model_cfg,
                    &state.params,
                    batch.sequence(i),
                    batch.mask(i),
                    cfg.z_loss_coeff,
                    derive_rng(cfg.seed, step, i),
                )?;
                stats.loss_sum += parts.loss_sum;
                stats.ce_sum += parts.ce_sum;
                stats.z_sum += parts.z_sum;
                stats.hits += parts.hits;
                stats.count += parts.count;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(sum) => {
                        for (s, g) in sum.iter_mut().zip(&grads) {
                            let sd = s.data_mut();
                            for (x, y) in sd.iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            stats.grads = acc.expect("non-empty chunk");
            Ok(stats)
        })
        .collect();

    let mut grads: Option<Vec<Array<f32>>> = None;
    let mut loss_sum = 0f64;
    let mut ce_sum = 0f64;
    let mut z_sum = 0f64;
    let mut hits = 0usize;
    let mut count = 0usize;
    for r in results {
        let stats = r?;
        loss_sum += stats.loss_sum;
        ce_sum += stats.ce_sum;
        z_sum += stats.z_sum;
        hits += stats.hits;
        count += stats.count;
        match grads.as_mut() {
            None => grads = Some(stats.grads),
            Some(sum) => {
                for (s, g) in sum.iter_mut().zip(&stats.grads) {
                    let sd = s.data_mut();
                    for (x, y) in sd.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut grads = grads.expect("non-empty batch");
    let inv = 1.0 / count as f64;
    let inv_f = inv as f32;
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v *= inv_f;
        }
    }
    let metrics = LossMetrics {
        loss: loss_sum * inv,
        ce: ce_sum * inv,
        z_loss: z_sum * inv,
        token_accuracy: hits as f64 * inv,
        count,
    };
    Ok((grads, metrics))
}

/// Held-out sequences for periodic evaluation, drawn from an rng stream
/// disjoint from the training data stream.
pub fn heldout_set(task: &TaskSpec, count: usize, seed: u64) -> Vec<(Vec<Token>, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let batch = task.gen_batch(count, &mut rng);
    (0..count).map(|i| (batch.sequence(i).to_vec(), batch.mask(i).to_vec())).collect()
}

/// Deterministic training loop: generates batches, pools per-sequence
/// gradients, clips, applies Adam, and periodically logs metrics, writes
/// checkpoints, and evaluates held-out masked accuracy.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    task: &TaskSpec,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    task.validate()?;
    if model_cfg.vocab_size < task.required_vocab() {
        return Err(Error::config(format!(
            "model vocab {} is smaller than the task's {}",
            model_cfg.vocab_size,
            task.required_vocab()
        )));
    }
    let m_in = (task.seq_len() - 1).min(model_cfg.max_context);
    if m_in < model_cfg.num_latents {
        return Err(Error::config(format!(
            "cropped context {} shorter than num_latents {}",
            m_in, model_cfg.num_latents
        )));
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut metrics_file = match out_dir {
        Some(dir) => {
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };

    let params = init_params::<f32>(model_cfg, cfg.seed)?;
    let mut state = TrainState::new(params, cfg.seed);
    let hyper = AdamHyper::from(cfg);

    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(1);
    let heldout = if cfg.eval_sequences > 0 {
        heldout_set(task, cfg.eval_sequences, cfg.seed)
    } else {
        Vec::new()
    };

    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut final_accuracy = None;
    let mut stopped_early = false;
    let mut last_metrics = LossMetrics::default();

    let mut emit = |record: MetricsRecord,
                    records: &mut Vec<MetricsRecord>,
                    file: &mut Option<std::io::BufWriter<std::fs::File>>|
     -> Result<()> {
        if let Some(f) = file.as_mut() {
            serde_json::to_writer(&mut *f, &record)
                .map_err(|e| Error::Config(format!("metrics serialization: {e}")))?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        records.push(record);
        Ok(())
    };

    for step in 0..cfg.total_steps {
        let t0 = Instant::now();
        let batch = task.gen_batch(cfg.batch_size, &mut data_rng);
        let (mut grads, metrics) = run_train_step(model_cfg, cfg, &state, &batch)?;
        if !metrics.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.max_grad_norm);
        let lr = lr_schedule(step, cfg);
        adam_step(&mut state, &grads, lr, &hyper)?;
        let step_time = t0.elapsed().as_secs_f64();
        last_metrics = metrics;

        let mut eval_accuracy = None;
        if !heldout.is_empty() && (step + 1) % cfg.eval_interval == 0 {
            let acc =
                masked_accuracy(model_cfg, &state.params, &heldout, model_cfg.num_latents)?;
            eval_accuracy = Some(acc);
            final_accuracy = Some(acc);
            if let Some(threshold) = cfg.stop_accuracy {
                if acc >= threshold {
                    stopped_early = true;
                }
            }
        }

        let last_step = step + 1 == cfg.total_steps || stopped_early;
        if (step + 1) % cfg.log_interval == 0 || last_step || eval_accuracy.is_some() {
            emit(
                MetricsRecord {
                    step,
                    loss: metrics.loss,
                    ce: metrics.ce,
                    z_loss: metrics.z_loss,
                    token_accuracy: metrics.token_accuracy,
                    lr,
                    grad_norm,
                    step_time_s: step_time,
                    eval_accuracy,
                },
                &mut records,
                &mut metrics_file,
            )?;
        }
        if let Some(dir) = out_dir {
            if (step + 1) % cfg.checkpoint_interval == 0 && !last_step {
                save_checkpoint(
                    &dir.join(format!("checkpoint_step{}.ckpt", step + 1)),
                    model_cfg,
                    &state.params,
                )?;
            }
        }
        if stopped_early {
            break;
        }
    }

    // Final held-out evaluation when the cadence missed the last step.
    if !heldout.is_empty() && cfg.total_steps > 0 {
        let missing = records.last().map_or(true, |r| r.eval_accuracy.is_none());
        if missing {
            let acc = masked_accuracy(model_cfg, &state.params, &heldout, model_cfg.num_latents)?;
            final_accuracy = Some(acc);
            emit(
                MetricsRecord {
                    step: state.step.saturating_sub(1),
                    loss: last_metrics.loss,
                    ce: last_metrics.ce,
                    z_loss: last_metrics.z_loss,
                    token_accuracy: last_metrics.token_accuracy,
                    lr: lr_schedule(state.step.saturating_sub(1), cfg),
                    grad_norm: 0.0,
                    step_time_s: 0.0,
                    eval_accuracy: Some(acc),
                },
                &mut records,
                &mut metrics_file,
            )?;
        }
    }

    let final_checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("checkpoint_final.ckpt");
            save_checkpoint(&path, model_cfg, &state.params)?;
            Some(path)
        }
        None => None,
    };

    Ok(TrainOutcome { state, records, final_accuracy, stopped_early, final_checkpoint })
}
