//! Masked multi-head QKV attention and its supporting pieces: the two causal
//! mask constructors, rotary position encoding, the pre-layernorm residual
//! block, cross-attend key dropout, and head-chunked cross-attention.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Array, BoolMat, NodeId, Scalar, Tape};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Boolean attention restriction, queries x keys.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    allowed: Arc<BoolMat>,
}

impl AttentionMask {
    pub fn num_queries(&self) -> usize {
        self.allowed.rows()
    }

    pub fn num_keys(&self) -> usize {
        self.allowed.cols()
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed.get(query, key)
    }

    pub fn allowed_count(&self, query: usize) -> usize {
        self.allowed.count_row(query)
    }

    pub(crate) fn mat(&self) -> Arc<BoolMat> {
        Arc::clone(&self.allowed)
    }

    /// The rightmost allowed key of each query: its own sequence position.
    /// These columns are what key dropout must never remove.
    fn self_positions(&self) -> Vec<usize> {
        (0..self.num_queries())
            .map(|q| {
                (0..self.num_keys())
                    .rev()
                    .find(|&k| self.allowed.get(q, k))
                    .expect("mask row with no allowed key")
            })
            .collect()
    }
}

/// Causal self-attention mask: query q may read keys k <= q.
pub fn make_self_mask(n: usize) -> AttentionMask {
    AttentionMask { allowed: Arc::new(BoolMat::new(n, n, |q, k| k <= q)) }
}

/// Causal cross-attention mask for latents aligned to the trailing `n` of
/// `m` input positions: latent q sits at input position m - n + q and may
/// read keys at or before that position, never after.
pub fn make_cross_mask(m: usize, n: usize) -> Result<AttentionMask> {
    if n == 0 || n > m {
        return Err(Error::config(format!("cross mask needs 1 <= n <= m, got n={} m={}", n, m)));
    }
    let offset = m - n;
    Ok(AttentionMask { allowed: Arc::new(BoolMat::new(n, m, |q, k| k <= offset + q)) })
}

/// Head count, per-head width, and the fraction of each head that rotary
/// encoding rotates.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeadConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub rotary_fraction: f64,
}

impl HeadConfig {
    pub fn new(num_heads: usize, head_dim: usize, rotary_fraction: f64) -> Self {
        HeadConfig { num_heads, head_dim, rotary_fraction }
    }

    /// Internal attention width: heads times head dim.
    pub fn width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Number of leading head dims rotated; must come out even because
    /// rotation acts on dimension pairs.
    pub fn rotated_span(&self) -> Result<usize> {
        if !(0.0..=1.0).contains(&self.rotary_fraction) {
            return Err(Error::config(format!(
                "rotary_fraction {} outside [0, 1]",
                self.rotary_fraction
            )));
        }
        let span = (self.rotary_fraction * self.head_dim as f64).round() as usize;
        if span % 2 != 0 {
            return Err(Error::config(format!(
                "rotary fraction {} of head dim {} gives odd span {}",
                self.rotary_fraction, self.head_dim, span
            )));
        }
        Ok(span)
    }
}

/// Rotate the leading fraction of each row's dims pairwise by angles
/// proportional to the row's absolute position; geometric frequencies.
pub fn rotary_encode<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    positions: Arc<Vec<usize>>,
    cfg: &HeadConfig,
) -> Result<NodeId> {
    let span = cfg.rotated_span()?;
    if tape.value(x).cols() != cfg.head_dim {
        return Err(Error::shape(
            "rotary_encode",
            format!("{} dims vs head_dim {}", tape.value(x).cols(), cfg.head_dim),
        ));
    }
    tape.rotary(x, positions, span)
}

/// Tape handles for one attention module's projections.
#[derive(Clone, Copy, Debug)]
pub struct QkvNodes {
    pub q_w: NodeId,
    pub q_b: NodeId,
    pub k_w: NodeId,
    pub k_b: NodeId,
    pub v_w: NodeId,
    pub v_b: NodeId,
    pub o_w: NodeId,
    pub o_b: NodeId,
}

/// Tape handles for a full pre-layernorm residual block.
#[derive(Clone, Debug)]
pub struct BlockNodes {
    pub norm_q: (NodeId, NodeId),
    /// Separate key/value input norm; `None` means self-attention (the
    /// shared input reuses the query norm).
    pub norm_kv: Option<(NodeId, NodeId)>,
    pub attn: QkvNodes,
    pub norm_mlp: (NodeId, NodeId),
    pub mlp_in_w: NodeId,
    pub mlp_in_b: NodeId,
    pub mlp_out_w: NodeId,
    pub mlp_out_b: NodeId,
}

/// Train-time randomness: one rng plus the post-attention dropout rate.
pub struct TrainCtx<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub post_attention_dropout: f64,
}

/// Key/value arrays captured for the generation cache: keys are stored
/// rotated, exactly as attention consumed them.
pub struct AttnCapture<S> {
    pub keys: Array<S>,
    pub values: Array<S>,
}

impl<S: Scalar> Default for AttnCapture<S> {
    fn default() -> Self {
        AttnCapture { keys: Array::zeros(vec![0, 0]), values: Array::zeros(vec![0, 0]) }
    }
}

/// Multi-head QKV attention. Queries and keys are rotary-encoded at their
/// absolute positions (values are not), then scaled masked softmax and the
/// output projection.
#[allow(clippy::too_many_arguments)]
pub fn qkv_attention<S: Scalar>(
    tape: &mut Tape<S>,
    xq: NodeId,
    xkv: NodeId,
    mask: &AttentionMask,
    params: &QkvNodes,
    heads: &HeadConfig,
    query_positions: Arc<Vec<usize>>,
    key_positions: Arc<Vec<usize>>,
) -> Result<NodeId> {
    chunked_cross_attend(
        tape,
        xq,
        xkv,
        mask,
        params,
        heads,
        query_positions,
        key_positions,
        heads.num_heads,
        None,
    )
}

/// Same computation as [`qkv_attention`] with attention maps materialized
/// for only `heads_per_chunk` heads at a time, bounding transient map
/// memory at `heads_per_chunk * queries * keys` elements.
#[allow(clippy::too_many_arguments)]
pub fn chunked_cross_attend<S: Scalar>(
    tape: &mut Tape<S>,
    xq: NodeId,
    xkv: NodeId,
    mask: &AttentionMask,
    params: &QkvNodes,
    heads: &HeadConfig,
    query_positions: Arc<Vec<usize>>,
    key_positions: Arc<Vec<usize>>,
    heads_per_chunk: usize,
    mut capture: Option<&mut AttnCapture<S>>,
) -> Result<NodeId> {
    if heads_per_chunk == 0 || heads.num_heads % heads_per_chunk != 0 {
        return Err(Error::config(format!(
            "heads_per_chunk {} does not divide num_heads {}",
            heads_per_chunk, heads.num_heads
        )));
    }
    if tape.value(xq).rows() != mask.num_queries() || tape.value(xkv).rows() != mask.num_keys() {
        return Err(Error::shape(
            "attention",
            format!(
                "mask {}x{} vs queries {} keys {}",
                mask.num_queries(),
                mask.num_keys(),
                tape.value(xq).rows(),
                tape.value(xkv).rows()
            ),
        ));
    }
    let dim = heads.head_dim;
    let scale = S::of_f64(1.0 / (dim as f64).sqrt());

    let q_all = tape.matmul(xq, params.q_w)?;
    let q_all = tape.add_row(q_all, params.q_b)?;
    let k_all = tape.matmul(xkv, params.k_w)?;
    let k_all = tape.add_row(k_all, params.k_b)?;
    let v_all = tape.matmul(xkv, params.v_w)?;
    let v_all = tape.add_row(v_all, params.v_b)?;

    let mut head_outputs = Vec::with_capacity(heads.num_heads);
    let mut captured_keys: Vec<NodeId> = Vec::new();
    for chunk_start in (0..heads.num_heads).step_by(heads_per_chunk) {
        // Within a chunk: all rotations, then all score maps, then softmax
        // and the weighted sums, so only this chunk's maps are in flight.
        let mut rotated: Vec<(NodeId, NodeId)> = Vec::with_capacity(heads_per_chunk);
        for h in chunk_start..chunk_start + heads_per_chunk {
            let q_h = tape.slice_cols(q_all, h * dim, dim)?;
            let q_h = rotary_encode(tape, q_h, Arc::clone(&query_positions), heads)?;
            let k_h = tape.slice_cols(k_all, h * dim, dim)?;
            let k_h = rotary_encode(tape, k_h, Arc::clone(&key_positions), heads)?;
            rotated.push((q_h, k_h));
        }
        let mut maps = Vec::with_capacity(heads_per_chunk);
        for &(q_h, k_h) in &rotated {
            let scores = tape.matmul_bt(q_h, k_h)?;
            maps.push(tape.masked_softmax(scores, mask.mat(), scale)?);
        }
        for (i, probs) in maps.into_iter().enumerate() {
            let h = chunk_start + i;
            let v_h = tape.slice_cols(v_all, h * dim, dim)?;
            head_outputs.push(tape.matmul(probs, v_h)?);
            if capture.is_some() {
                captured_keys.push(rotated[i].1);
            }
        }
    }

    if let Some(cap) = capture.as_deref_mut() {
        let keys = tape.concat_cols(&captured_keys)?;
        cap.keys = tape.value(keys).clone();
        cap.values = tape.value(v_all).clone();
    }

    let merged = tape.concat_cols(&head_outputs)?;
    let out = tape.matmul(merged, params.o_w)?;
    tape.add_row(out, params.o_b)
}

/// Pre-layernorm residual attention block:
/// `h = xq + Attn(LN(xq), LN(xkv)); out = h + MLP(LN(h))`
/// with a linear -> squared-ReLU -> linear MLP of hidden width 4x.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<S: Scalar>(
    tape: &mut Tape<S>,
    xq: NodeId,
    xkv: NodeId,
    mask: &AttentionMask,
    block: &BlockNodes,
    heads: &HeadConfig,
    query_positions: Arc<Vec<usize>>,
    key_positions: Arc<Vec<usize>>,
    heads_per_chunk: usize,
    mut train: Option<&mut TrainCtx<'_>>,
    capture: Option<&mut AttnCapture<S>>,
) -> Result<NodeId> {
    let eps = S::of_f64(LAYER_NORM_EPS);
    let nq = tape.layer_norm(xq, block.norm_q.0, block.norm_q.1, eps)?;
    let nkv = match block.norm_kv {
        Some((gain, bias)) => tape.layer_norm(xkv, gain, bias, eps)?,
        None => nq,
    };

    let attn = chunked_cross_attend(
        tape,
        nq,
        nkv,
        mask,
        &block.attn,
        heads,
        query_positions,
        key_positions,
        heads_per_chunk,
        capture,
    )?;
    let attn = apply_dropout(tape, attn, train.as_deref_mut())?;
    let h = tape.add(xq, attn)?;

    let nh = tape.layer_norm(h, block.norm_mlp.0, block.norm_mlp.1, eps)?;
    let hidden = tape.matmul(nh, block.mlp_in_w)?;
    let hidden = tape.add_row(hidden, block.mlp_in_b)?;
    let hidden = tape.squared_relu(hidden)?;
    let mlp = tape.matmul(hidden, block.mlp_out_w)?;
    let mlp = tape.add_row(mlp, block.mlp_out_b)?;
    let mlp = apply_dropout(tape, mlp, train)?;
    tape.add(h, mlp)
}

fn apply_dropout<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    train: Option<&mut TrainCtx<'_>>,
) -> Result<NodeId> {
    let Some(ctx) = train else { return Ok(x) };
    if ctx.post_attention_dropout <= 0.0 {
        return Ok(x);
    }
    let rate = ctx.post_attention_dropout;
    if rate >= 1.0 {
        return Err(Error::config(format!("dropout rate {} must be < 1", rate)));
    }
    let keep = S::of_f64(1.0 / (1.0 - rate));
    let shape = tape.value(x).shape().to_vec();
    let mask = Array::from_fn(shape, |_| if ctx.rng.gen_bool(rate) { S::zero() } else { keep });
    let mask = tape.leaf(mask);
    tape.mul(x, mask)
}

/// Drop whole key columns from a cross-attention mask with probability
/// `rate`, never touching any query's own position, and without rescaling
/// the survivors (attention renormalizes by itself).
pub fn cross_attend_key_dropout(
    mask: &AttentionMask,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<AttentionMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("key dropout rate {} must be in [0, 1)", rate)));
    }
    if rate == 0.0 {
        return Ok(mask.clone());
    }
    let mut protected = vec![false; mask.num_keys()];
    for pos in mask.self_positions() {
        protected[pos] = true;
    }
    let mut out = (*mask.allowed).clone();
    for key in 0..mask.num_keys() {
        let drop = rng.gen_bool(rate);
        if drop && !protected[key] {
            for q in 0..mask.num_queries() {
                out.set(q, key, false);
            }
        }
    }
    Ok(AttentionMask { allowed: Arc::new(out) })
}
