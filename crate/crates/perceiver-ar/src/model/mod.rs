//! Model assembly: embeddings, the causally masked cross-attend, the latent
//! self-attention stack, and the output head, plus the decoder-only baseline
//! and closed-form attention cost estimates.

mod checkpoint;

pub use checkpoint::{load_checkpoint, manifest_entries, save_checkpoint, ManifestEntry};

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_block, cross_attend_key_dropout, make_cross_mask, make_self_mask, AttnCapture,
    BlockNodes, HeadConfig, QkvNodes, TrainCtx,
};
use crate::numerics::{kernels, Array, NodeId, Scalar, Tape};
use crate::{Error, Result, Token};

pub const INIT_STD: f64 = 0.02;

/// How the cross-attention queries are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// Queries are the embeddings of the trailing `num_latents` inputs.
    TrailingQuery,
    /// Queries are free parameters (one learned vector per latent slot).
    Learned,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Maximum input length M.
    pub max_context: usize,
    /// Latent count N used at train time.
    pub num_latents: usize,
    /// Self-attention stack depth L.
    pub num_layers: usize,
    /// Embedding width C.
    pub channels: usize,
    pub cross_heads: HeadConfig,
    pub self_heads: HeadConfig,
    pub latent_mode: LatentMode,
    #[serde(default)]
    pub cross_attend_dropout: f64,
    #[serde(default)]
    pub post_attention_dropout: f64,
    /// Additive fixed sinusoidal embedding of absolute position.
    #[serde(default)]
    pub absolute_position_embedding: bool,
    /// Multiply token embeddings by sqrt(C) before use.
    #[serde(default)]
    pub scale_embeddings: bool,
    /// Compute the cross-attend with this many heads at a time.
    #[serde(default)]
    pub cross_heads_per_chunk: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config(format!("vocab_size {} < 2", self.vocab_size)));
        }
        if self.num_latents == 0 || self.num_latents > self.max_context {
            return Err(Error::config(format!(
                "num_latents {} outside 1..={}",
                self.num_latents, self.max_context
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::config("num_layers must be >= 1".to_string()));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be >= 1".to_string()));
        }
        self.cross_heads.rotated_span()?;
        self.self_heads.rotated_span()?;
        if let Some(chunk) = self.cross_heads_per_chunk {
            if chunk == 0 || self.cross_heads.num_heads % chunk != 0 {
                return Err(Error::config(format!(
                    "cross_heads_per_chunk {} does not divide {} heads",
                    chunk, self.cross_heads.num_heads
                )));
            }
        }
        if !(0.0..1.0).contains(&self.cross_attend_dropout) {
            return Err(Error::config("cross_attend_dropout must be in [0, 1)".to_string()));
        }
        if !(0.0..1.0).contains(&self.post_attention_dropout) {
            return Err(Error::config("post_attention_dropout must be in [0, 1)".to_string()));
        }
        Ok(())
    }

    fn cross_chunk(&self) -> usize {
        self.cross_heads_per_chunk.unwrap_or(self.cross_heads.num_heads)
    }
}

/// Target position in the input sequence predicted by logit row `q` of a
/// forward pass over `m` inputs with `n_eff` latents. The final row
/// (q = n_eff - 1) predicts the unseen next token at position m.
pub fn target_position(m: usize, n_eff: usize, q: usize) -> usize {
    m - n_eff + q + 1
}

pub type SharedArray<S> = Arc<Array<S>>;

#[derive(Clone, Debug)]
pub struct LinearParams<S> {
    pub w: SharedArray<S>,
    pub b: SharedArray<S>,
}

#[derive(Clone, Debug)]
pub struct NormParams<S> {
    pub gain: SharedArray<S>,
    pub bias: SharedArray<S>,
}

#[derive(Clone, Debug)]
pub struct AttnParams<S> {
    pub q: LinearParams<S>,
    pub k: LinearParams<S>,
    pub v: LinearParams<S>,
    pub o: LinearParams<S>,
}

#[derive(Clone, Debug)]
pub struct BlockParamSet<S> {
    pub norm_q: NormParams<S>,
    /// Present only on the cross-attend block, whose key/value input is a
    /// different array than its query input.
    pub norm_kv: Option<NormParams<S>>,
    pub attn: AttnParams<S>,
    pub norm_mlp: NormParams<S>,
    pub mlp_in: LinearParams<S>,
    pub mlp_out: LinearParams<S>,
}

/// Every learnable array in the model. No parameter anywhere is indexed by
/// sequence position, which is what allows changing the latent count at
/// evaluation time without retraining.
#[derive(Clone, Debug)]
pub struct ParameterSet<S> {
    pub token_embedding: SharedArray<S>,
    pub learned_latents: Option<SharedArray<S>>,
    pub cross_block: BlockParamSet<S>,
    pub self_blocks: Vec<BlockParamSet<S>>,
    pub final_norm: NormParams<S>,
    pub output: LinearParams<S>,
}

fn visit_linear<'a, S>(
    name: &str,
    p: &'a LinearParams<S>,
    f: &mut impl FnMut(String, &'a SharedArray<S>),
) {
    f(format!("{name}.w"), &p.w);
    f(format!("{name}.b"), &p.b);
}

fn visit_norm<'a, S>(
    name: &str,
    p: &'a NormParams<S>,
    f: &mut impl FnMut(String, &'a SharedArray<S>),
) {
    f(format!("{name}.gain"), &p.gain);
    f(format!("{name}.bias"), &p.bias);
}

fn visit_block<'a, S>(
    name: &str,
    b: &'a BlockParamSet<S>,
    f: &mut impl FnMut(String, &'a SharedArray<S>),
) {
    visit_norm(&format!("{name}.norm_q"), &b.norm_q, f);
    if let Some(kv) = &b.norm_kv {
        visit_norm(&format!("{name}.norm_kv"), kv, f);
    }
    visit_linear(&format!("{name}.attn.q"), &b.attn.q, f);
    visit_linear(&format!("{name}.attn.k"), &b.attn.k, f);
    visit_linear(&format!("{name}.attn.v"), &b.attn.v, f);
    visit_linear(&format!("{name}.attn.o"), &b.attn.o, f);
    visit_norm(&format!("{name}.norm_mlp"), &b.norm_mlp, f);
    visit_linear(&format!("{name}.mlp_in"), &b.mlp_in, f);
    visit_linear(&format!("{name}.mlp_out"), &b.mlp_out, f);
}

impl<S: Scalar> ParameterSet<S> {
    /// Walk every parameter in the fixed traversal order that defines the
    /// checkpoint manifest, optimizer state layout, and gradient order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a SharedArray<S>)) {
        f("token_embedding".to_string(), &self.token_embedding);
        if let Some(latents) = &self.learned_latents {
            f("learned_latents".to_string(), latents);
        }
        visit_block("cross", &self.cross_block, &mut f);
        for (i, block) in self.self_blocks.iter().enumerate() {
            visit_block(&format!("self.{i}"), block, &mut f);
        }
        visit_norm("final_norm", &self.final_norm, &mut f);
        visit_linear("output", &self.output, &mut f);
    }

    /// Same traversal with mutable access (optimizer updates).
    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut SharedArray<S>)) {
        f(&mut self.token_embedding);
        if let Some(latents) = &mut self.learned_latents {
            f(latents);
        }
        let mut block = |b: &mut BlockParamSet<S>, f: &mut dyn FnMut(&mut SharedArray<S>)| {
            f(&mut b.norm_q.gain);
            f(&mut b.norm_q.bias);
            if let Some(kv) = &mut b.norm_kv {
                f(&mut kv.gain);
                f(&mut kv.bias);
            }
            for lin in [&mut b.attn.q, &mut b.attn.k, &mut b.attn.v, &mut b.attn.o] {
                f(&mut lin.w);
                f(&mut lin.b);
            }
            f(&mut b.norm_mlp.gain);
            f(&mut b.norm_mlp.bias);
            f(&mut b.mlp_in.w);
            f(&mut b.mlp_in.b);
            f(&mut b.mlp_out.w);
            f(&mut b.mlp_out.b);
        };
        block(&mut self.cross_block, &mut f);
        for b in &mut self.self_blocks {
            block(b, &mut f);
        }
        f(&mut self.final_norm.gain);
        f(&mut self.final_norm.bias);
        f(&mut self.output.w);
        f(&mut self.output.b);
    }

    pub fn flatten(&self) -> Vec<(String, SharedArray<S>)> {
        let mut out = Vec::new();
        self.visit(|name, arr| out.push((name, Arc::clone(arr))));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, a| n += a.len());
        n
    }

    pub fn to_f64(&self) -> ParameterSet<f64> {
        ParameterSet {
            token_embedding: Arc::new(self.token_embedding.to_f64()),
            learned_latents: self.learned_latents.as_ref().map(|l| Arc::new(l.to_f64())),
            cross_block: block_to_f64(&self.cross_block),
            self_blocks: self.self_blocks.iter().map(block_to_f64).collect(),
            final_norm: NormParams {
                gain: Arc::new(self.final_norm.gain.to_f64()),
                bias: Arc::new(self.final_norm.bias.to_f64()),
            },
            output: LinearParams {
                w: Arc::new(self.output.w.to_f64()),
                b: Arc::new(self.output.b.to_f64()),
            },
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.token_embedding.shape() != [cfg.vocab_size, cfg.channels] {
            return Err(Error::config("token embedding shape mismatch".to_string()));
        }
        match (&self.learned_latents, cfg.latent_mode) {
            (None, LatentMode::Learned) => {
                return Err(Error::config(
                    "latent_mode=learned requires a learned latent array".to_string(),
                ))
            }
            (Some(l), _) if l.shape() != [cfg.num_latents, cfg.channels] => {
                return Err(Error::config("learned latent shape mismatch".to_string()));
            }
            _ => {}
        }
        if self.self_blocks.len() != cfg.num_layers {
            return Err(Error::config(format!(
                "{} self blocks for {} layers",
                self.self_blocks.len(),
                cfg.num_layers
            )));
        }
        let mut ok = true;
        self.visit(|_, a| ok &= a.is_finite());
        if !ok {
            return Err(Error::config("non-finite parameter values".to_string()));
        }
        Ok(())
    }
}

fn block_to_f64<S: Scalar>(b: &BlockParamSet<S>) -> BlockParamSet<f64> {
    let lin = |l: &LinearParams<S>| LinearParams {
        w: Arc::new(l.w.to_f64()),
        b: Arc::new(l.b.to_f64()),
    };
    let norm = |n: &NormParams<S>| NormParams {
        gain: Arc::new(n.gain.to_f64()),
        bias: Arc::new(n.bias.to_f64()),
    };
    BlockParamSet {
        norm_q: norm(&b.norm_q),
        norm_kv: b.norm_kv.as_ref().map(norm),
        attn: AttnParams {
            q: lin(&b.attn.q),
            k: lin(&b.attn.k),
            v: lin(&b.attn.v),
            o: lin(&b.attn.o),
        },
        norm_mlp: norm(&b.norm_mlp),
        mlp_in: lin(&b.mlp_in),
        mlp_out: lin(&b.mlp_out),
    }
}

fn truncated_normal<S: Scalar>(rng: &mut ChaCha8Rng, std: f64) -> S {
    loop {
        let u1 = rng.gen::<f64>().max(1e-12);
        let u2 = rng.gen::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos();
        if z.abs() <= 2.0 {
            return S::of_f64(std * z);
        }
    }
}

fn init_matrix<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> SharedArray<S> {
    Arc::new(Array::from_fn(vec![rows, cols], |_| truncated_normal(rng, INIT_STD)))
}

fn init_linear<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> LinearParams<S> {
    LinearParams { w: init_matrix(rng, rows, cols), b: Arc::new(Array::zeros(vec![cols])) }
}

fn init_norm<S: Scalar>(c: usize) -> NormParams<S> {
    NormParams {
        gain: Arc::new(Array::from_fn(vec![c], |_| S::one())),
        bias: Arc::new(Array::zeros(vec![c])),
    }
}

fn init_block<S: Scalar>(
    rng: &mut ChaCha8Rng,
    c: usize,
    heads: &HeadConfig,
    cross: bool,
) -> BlockParamSet<S> {
    let w = heads.width();
    BlockParamSet {
        norm_q: init_norm(c),
        norm_kv: cross.then(|| init_norm(c)),
        attn: AttnParams {
            q: init_linear(rng, c, w),
            k: init_linear(rng, c, w),
            v: init_linear(rng, c, w),
            o: init_linear(rng, w, c),
        },
        norm_mlp: init_norm(c),
        mlp_in: init_linear(rng, c, 4 * c),
        mlp_out: init_linear(rng, 4 * c, c),
    }
}

/// Fresh parameters: truncated-normal (std 0.02) projections and embeddings,
/// unit-gain zero-bias norms, zero linear biases.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.channels;
    Ok(ParameterSet {
        token_embedding: init_matrix(&mut rng, cfg.vocab_size, c),
        learned_latents: match cfg.latent_mode {
            LatentMode::Learned => Some(init_matrix(&mut rng, cfg.num_latents, c)),
            LatentMode::TrailingQuery => None,
        },
        cross_block: init_block(&mut rng, c, &cfg.cross_heads, true),
        self_blocks: (0..cfg.num_layers)
            .map(|_| init_block(&mut rng, c, &cfg.self_heads, false))
            .collect(),
        final_norm: init_norm(c),
        output: init_linear(&mut rng, c, cfg.vocab_size),
    })
}

/// Tape handles for one bound parameter set, in the same traversal order as
/// [`ParameterSet::visit`] (asserted by tests).
pub struct BoundParams {
    pub ordered: Vec<NodeId>,
    pub token_embedding: NodeId,
    pub learned_latents: Option<NodeId>,
    pub cross: BlockNodes,
    pub selfs: Vec<BlockNodes>,
    pub final_norm: (NodeId, NodeId),
    pub output: (NodeId, NodeId),
}

pub fn bind_params<S: Scalar>(tape: &mut Tape<S>, params: &ParameterSet<S>) -> BoundParams {
    let mut ordered = Vec::new();
    let mut leaf = |tape: &mut Tape<S>, arr: &SharedArray<S>| {
        let id = tape.leaf_shared(Arc::clone(arr));
        ordered.push(id);
        id
    };
    let token_embedding = leaf(tape, &params.token_embedding);
    let learned_latents = params.learned_latents.as_ref().map(|l| leaf(tape, l));
    let mut bind_block = |tape: &mut Tape<S>, b: &BlockParamSet<S>| -> BlockNodes {
        let norm_q = (leaf(tape, &b.norm_q.gain), leaf(tape, &b.norm_q.bias));
        let norm_kv = b.norm_kv.as_ref().map(|kv| (leaf(tape, &kv.gain), leaf(tape, &kv.bias)));
        let attn = QkvNodes {
            q_w: leaf(tape, &b.attn.q.w),
            q_b: leaf(tape, &b.attn.q.b),
            k_w: leaf(tape, &b.attn.k.w),
            k_b: leaf(tape, &b.attn.k.b),
            v_w: leaf(tape, &b.attn.v.w),
            v_b: leaf(tape, &b.attn.v.b),
            o_w: leaf(tape, &b.attn.o.w),
            o_b: leaf(tape, &b.attn.o.b),
        };
        let norm_mlp = (leaf(tape, &b.norm_mlp.gain), leaf(tape, &b.norm_mlp.bias));
        let mlp_in_w = leaf(tape, &b.mlp_in.w);
        let mlp_in_b = leaf(tape, &b.mlp_in.b);
        let mlp_out_w = leaf(tape, &b.mlp_out.w);
        let mlp_out_b = leaf(tape, &b.mlp_out.b);
        BlockNodes { norm_q, norm_kv, attn, norm_mlp, mlp_in_w, mlp_in_b, mlp_out_w, mlp_out_b }
    };
    let cross = bind_block(tape, &params.cross_block);
    let selfs: Vec<BlockNodes> = params.self_blocks.iter().map(|b| bind_block(tape, b)).collect();
    let final_norm = (leaf(tape, &params.final_norm.gain), leaf(tape, &params.final_norm.bias));
    let output = (leaf(tape, &params.output.w), leaf(tape, &params.output.b));
    BoundParams { ordered, token_embedding, learned_latents, cross, selfs, final_norm, output }
}

/// Per-layer key/value activations captured during a forward pass, for the
/// generation cache. Keys are stored rotated at their absolute positions.
pub struct ForwardCapture<S> {
    pub cross: AttnCapture<S>,
    pub layers: Vec<AttnCapture<S>>,
    pub latent_positions: Vec<usize>,
}

impl<S: Scalar> Default for ForwardCapture<S> {
    fn default() -> Self {
        ForwardCapture { cross: AttnCapture::default(), layers: Vec::new(), latent_positions: Vec::new() }
    }
}

pub struct ForwardOptions<'a, S> {
    /// Latent count override; defaults to the trained `num_latents`.
    pub eval_latents: Option<usize>,
    /// Absolute position of the first token (nonzero once a sampling window
    /// has slid past the sequence start).
    pub position_offset: usize,
    /// Train mode: enables cross-attend key dropout and post-attention
    /// dropout, driven by this rng.
    pub train_rng: Option<&'a mut ChaCha8Rng>,
    pub capture: Option<&'a mut ForwardCapture<S>>,
}

impl<S> Default for ForwardOptions<'_, S> {
    fn default() -> Self {
        ForwardOptions { eval_latents: None, position_offset: 0, train_rng: None, capture: None }
    }
}

/// Whole-model forward pass on an existing tape. Returns the logits node,
/// one row per latent; row q predicts the token at
/// [`target_position`]`(m, n_eff, q)`.
pub fn forward_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: &[Token],
    cfg: &ModelConfig,
    bound: &BoundParams,
    opts: &mut ForwardOptions<'_, S>,
) -> Result<NodeId> {
    let m = tokens.len();
    let n_eff = opts.eval_latents.unwrap_or(cfg.num_latents);
    if n_eff == 0 || n_eff > m {
        return Err(Error::config(format!("eval_latents {} outside 1..={} inputs", n_eff, m)));
    }
    if m > cfg.max_context {
        return Err(Error::config(format!("{} tokens exceed max_context {}", m, cfg.max_context)));
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { id: t, vocab: cfg.vocab_size });
        }
    }

    let offset = opts.position_offset;
    let c = cfg.channels;

    // Embed tokens; positions enter through rotary inside attention, plus
    // optionally an additive sinusoid here.
    let ids = Arc::new(tokens.to_vec());
    let mut embedded = tape.embed_rows(bound.token_embedding, ids)?;
    if cfg.scale_embeddings {
        embedded = tape.scale(embedded, S::of_f64((c as f64).sqrt()))?;
    }
    if cfg.absolute_position_embedding {
        let mut sinusoid = Array::zeros(vec![m, c]);
        for r in 0..m {
            kernels::sinusoid_row(offset + r, &mut sinusoid.data_mut()[r * c..(r + 1) * c]);
        }
        let sin_node = tape.leaf(sinusoid);
        embedded = tape.add(embedded, sin_node)?;
    }

    // Latent queries, each identified with one of the trailing input
    // positions.
    let latent_positions: Arc<Vec<usize>> =
        Arc::new((0..n_eff).map(|q| offset + m - n_eff + q).collect());
    let key_positions: Arc<Vec<usize>> = Arc::new((offset..offset + m).collect());
    let queries = match cfg.latent_mode {
        LatentMode::TrailingQuery => tape.slice_rows(embedded, m - n_eff, n_eff)?,
        LatentMode::Learned => {
            let latents = bound
                .learned_latents
                .ok_or_else(|| Error::config("learned latent mode without latents".to_string()))?;
            let n_train = cfg.num_latents;
            // Learned vectors are assigned by absolute position, cyclically.
            // The assignment is stable as the window extends, so cached
            // latents stay valid, and any latent count can be served.
            let idx: Vec<Token> =
                latent_positions.iter().map(|&p| (p % n_train) as Token).collect();
            tape.embed_rows(latents, Arc::new(idx))?
        }
    };

    let mut cross_mask = make_cross_mask(m, n_eff)?;
    let mut train_ctx = None;
    if let Some(rng) = opts.train_rng.as_deref_mut() {
        if cfg.cross_attend_dropout > 0.0 {
            cross_mask = cross_attend_key_dropout(&cross_mask, cfg.cross_attend_dropout, rng)?;
        }
        train_ctx = Some(TrainCtx { rng, post_attention_dropout: cfg.post_attention_dropout });
    }

    let mut capture = std::mem::take(&mut opts.capture);
    if let Some(cap) = capture.as_deref_mut() {
        cap.layers.clear();
        cap.latent_positions = latent_positions.to_vec();
    }

    let mut latents = attention_block(
        tape,
        queries,
        embedded,
        &cross_mask,
        &bound.cross,
        &cfg.cross_heads,
        Arc::clone(&latent_positions),
        key_positions,
        cfg.cross_chunk(),
        train_ctx.as_mut(),
        capture.as_deref_mut().map(|c| &mut c.cross),
    )?;

    let self_mask = make_self_mask(n_eff);
    for block in &bound.selfs {
        let mut layer_capture = capture.as_deref_mut().map(|_| AttnCapture::default());
        latents = attention_block(
            tape,
            latents,
            latents,
            &self_mask,
            block,
            &cfg.self_heads,
            Arc::clone(&latent_positions),
            Arc::clone(&latent_positions),
            cfg.self_heads.num_heads,
            train_ctx.as_mut(),
            layer_capture.as_mut(),
        )?;
        if let (Some(cap), Some(layer)) = (capture.as_deref_mut(), layer_capture) {
            cap.layers.push(layer);
        }
    }

    let eps = S::of_f64(crate::attention::LAYER_NORM_EPS);
    let normed = tape.layer_norm(latents, bound.final_norm.0, bound.final_norm.1, eps)?;
    let logits = tape.matmul(normed, bound.output.0)?;
    tape.add_row(logits, bound.output.1)
}

/// Convenience single-shot forward pass: builds a tape, binds parameters,
/// and returns the logits array `[n_eff, vocab]`.
pub fn forward<S: Scalar>(
    tokens: &[Token],
    cfg: &ModelConfig,
    params: &ParameterSet<S>,
    opts: &mut ForwardOptions<'_, S>,
) -> Result<Array<S>> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let logits = forward_on_tape(&mut tape, tokens, cfg, &bound, opts)?;
    Ok(tape.value(logits).clone())
}

/// The speed/quality baseline: every block spans all `m` positions, i.e. a
/// forward pass whose latent count equals the input length. Returns one
/// logit row per input position.
pub fn decoder_only_forward<S: Scalar>(
    tokens: &[Token],
    cfg: &ModelConfig,
    params: &ParameterSet<S>,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<Array<S>> {
    let mut opts = ForwardOptions {
        eval_latents: Some(tokens.len()),
        position_offset: 0,
        train_rng,
        capture: None,
    };
    forward(tokens, cfg, params, &mut opts)
}

/// Closed-form per-forward attention cost decomposition, in flops
/// (multiply-add = 2). `cross_term` is the cross-attention map against all
/// `m` inputs, `self_term` the latent self-attention maps, and
/// `projection_term` everything else (QKV/output projections, MLPs, head).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopEstimate {
    pub cross_term: u64,
    pub self_term: u64,
    pub projection_term: u64,
}

impl FlopEstimate {
    pub fn total(&self) -> u64 {
        self.cross_term + self.self_term + self.projection_term
    }
}

fn block_projection_flops(nq: u64, nkv: u64, c: u64, w: u64) -> u64 {
    // f_Q on queries, f_K/f_V on keys, f_O on queries, then the 4x MLP.
    2 * c * w * (2 * nq + 2 * nkv) + 16 * nq * c * c
}

/// Cost of one forward pass over `m` inputs with the trained latent count.
pub fn count_attention_flops(cfg: &ModelConfig, m: usize) -> FlopEstimate {
    let (m, n, l, c) = (m as u64, cfg.num_latents as u64, cfg.num_layers as u64, cfg.channels as u64);
    let wc = cfg.cross_heads.width() as u64;
    let ws = cfg.self_heads.width() as u64;
    let vocab = cfg.vocab_size as u64;
    FlopEstimate {
        cross_term: 4 * n * m * wc,
        self_term: l * 4 * n * n * ws,
        projection_term: block_projection_flops(n, m, c, wc)
            + l * block_projection_flops(n, n, c, ws)
            + 2 * n * c * vocab,
    }
}

/// Cost of one decoder-only baseline pass: L+1 blocks over all `m`
/// positions. The map cost is reported in `self_term`.
pub fn count_decoder_flops(cfg: &ModelConfig, m: usize) -> FlopEstimate {
    let (m, l, c) = (m as u64, cfg.num_layers as u64, cfg.channels as u64);
    let wc = cfg.cross_heads.width() as u64;
    let ws = cfg.self_heads.width() as u64;
    let vocab = cfg.vocab_size as u64;
    FlopEstimate {
        cross_term: 0,
        self_term: 4 * m * m * (wc + l * ws),
        projection_term: block_projection_flops(m, m, c, wc)
            + l * block_projection_flops(m, m, c, ws)
            + 2 * m * c * vocab,
    }
}

/// Peak number of attention-map elements materialized at once during one
/// forward pass; the cross-attend map [heads, inputs, latents] dominates
/// unless head chunking caps it.
pub fn peak_attention_map_elements(cfg: &ModelConfig, m: usize, n_eff: Option<usize>) -> usize {
    let n = n_eff.unwrap_or(cfg.num_latents);
    let cross = cfg.cross_chunk() * n * m;
    let selfs = cfg.self_heads.num_heads * n * n;
    cross.max(selfs)
}
