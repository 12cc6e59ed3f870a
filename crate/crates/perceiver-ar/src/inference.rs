//! Autoregressive sampling with temperature, activation caching with the
//! buffer-reset protocol, and strided long-sequence evaluation.
//!
//! The cached sampler computes one new latent per step against cached
//! key/value rows. When the latent buffer reaches its train-time width, it
//! is discarded and refilled by one full pass with half the latents, so no
//! cached activation ever depends on latent histories longer than those
//! seen at training time. Keys are rotated at write time with their
//! absolute positions; queries are rotated at read time; positions are
//! never re-based during a cache epoch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    forward, target_position, ForwardCapture, ForwardOptions, LatentMode, ModelConfig,
    ParameterSet,
};
use crate::numerics::{kernels, Array};
use crate::{Error, Result, Token};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub eval_latents: usize,
    pub greedy: bool,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_latents == 0 {
            return Err(Error::config("eval_latents must be >= 1".to_string()));
        }
        if !self.greedy && self.temperature <= 0.0 {
            return Err(Error::config(format!(
                "temperature {} must be positive unless sampling greedily",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn pick_token(row: &[f32], sampler: &SamplerConfig, rng: &mut ChaCha8Rng) -> Token {
    if sampler.greedy {
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        return best as Token;
    }
    let scaled: Vec<f64> = row.iter().map(|&v| v as f64 / sampler.temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        draw -= w;
        if draw <= 0.0 {
            return i as Token;
        }
    }
    (row.len() - 1) as Token
}

/// Sliding token window with absolute positions preserved after truncation.
struct ContextWindow {
    tokens: Vec<Token>,
    offset: usize,
}

impl ContextWindow {
    fn new(prompt: &[Token], max_context: usize) -> Self {
        let start = prompt.len().saturating_sub(max_context);
        ContextWindow { tokens: prompt[start..].to_vec(), offset: start }
    }

    fn push(&mut self, token: Token, max_context: usize) -> bool {
        self.tokens.push(token);
        if self.tokens.len() > max_context {
            self.tokens.remove(0);
            self.offset += 1;
            true
        } else {
            false
        }
    }

    fn len(&self) -> usize {
        self.tokens.len()
    }
}

/// Latent membership trajectory shared by the cached sampler and its
/// uncached reference: fill grows by one per step until the buffer is full,
/// then one full pass with half the train-time latents refills it.
struct ResetSchedule {
    capacity: usize,
    fill: usize,
}

enum StepKind {
    Append { n_eff: usize },
    Reset { n_eff: usize },
}

impl ResetSchedule {
    fn new(cfg: &ModelConfig, eval_latents: usize, prompt_len: usize) -> Result<Self> {
        if cfg.num_latents % 2 != 0 {
            return Err(Error::config(format!(
                "cached generation needs an even latent count, got {}",
                cfg.num_latents
            )));
        }
        let fill = eval_latents.min(cfg.num_latents).min(prompt_len);
        Ok(ResetSchedule { capacity: cfg.num_latents, fill })
    }

    fn next(&mut self) -> StepKind {
        if self.fill == self.capacity {
            self.fill = self.capacity / 2;
            StepKind::Reset { n_eff: self.capacity / 2 }
        } else {
            self.fill += 1;
            StepKind::Append { n_eff: self.fill }
        }
    }
}

fn check_prompt(prompt: &[Token], sampler: &SamplerConfig) -> Result<()> {
    sampler.validate()?;
    if prompt.len() < sampler.eval_latents {
        return Err(Error::config(format!(
            "prompt of {} tokens is shorter than eval_latents {}; provide at least that much context",
            prompt.len(),
            sampler.eval_latents
        )));
    }
    Ok(())
}

/// Full-recompute sampling: every step runs a fresh forward pass over the
/// current window, with the latent set covering the trailing `eval_latents`
/// prompt positions plus everything generated so far. The context slides
/// once it exceeds `max_context`, keeping absolute positions.
pub fn sample_uncached(
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    prompt: &[Token],
    sampler: &SamplerConfig,
    mut on_token: impl FnMut(Token),
) -> Result<Vec<Token>> {
    check_prompt(prompt, sampler)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut out = prompt.to_vec();
    let mut window = ContextWindow::new(prompt, cfg.max_context);
    let mut resident = sampler.eval_latents.min(window.len());

    for _ in 0..sampler.max_new_tokens {
        let mut opts = ForwardOptions {
            eval_latents: Some(resident.min(window.len())),
            position_offset: window.offset,
            ..Default::default()
        };
        let logits = forward(&window.tokens, cfg, params, &mut opts)?;
        let token = pick_token(logits.row(logits.rows() - 1), sampler, &mut rng);
        out.push(token);
        on_token(token);
        window.push(token, cfg.max_context);
        resident = (resident + 1).min(window.len());
    }
    Ok(out)
}

/// Reference oracle for cache testing: no activations are reused, but every
/// step runs a full pass with exactly the latent membership the cached
/// sampler would have, including the periodic buffer resets.
pub fn sample_uncached_matching_resets(
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    prompt: &[Token],
    sampler: &SamplerConfig,
    mut on_token: impl FnMut(Token),
) -> Result<Vec<Token>> {
    let (tokens, _) = sample_matching_resets_with_logits(cfg, params, prompt, sampler, &mut |t| {
        on_token(t)
    })?;
    Ok(tokens)
}

fn sample_matching_resets_with_logits(
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    prompt: &[Token],
    sampler: &SamplerConfig,
    on_token: &mut dyn FnMut(Token),
) -> Result<(Vec<Token>, Vec<Vec<f32>>)> {
    check_prompt(prompt, sampler)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut out = prompt.to_vec();
    let mut window = ContextWindow::new(prompt, cfg.max_context);
    let mut schedule = ResetSchedule::new(cfg, sampler.eval_latents, window.len())?;
    let mut rows = Vec::new();

    for step in 0..sampler.max_new_tokens {
        let n_eff = if step == 0 {
            schedule.fill
        } else {
            match schedule.next() {
                StepKind::Append { n_eff } | StepKind::Reset { n_eff } => n_eff,
            }
        };
        let mut opts = ForwardOptions {
            eval_latents: Some(n_eff.min(window.len())),
            position_offset: window.offset,
            ..Default::default()
        };
        let logits = forward(&window.tokens, cfg, params, &mut opts)?;
        let row = logits.row(logits.rows() - 1).to_vec();
        let token = pick_token(&row, sampler, &mut rng);
        rows.push(row);
        out.push(token);
        on_token(token);
        window.push(token, cfg.max_context);
    }
    Ok((out, rows))
}

/// Per-layer key/value buffers for cached generation, plus the cross-attend
/// store over processed inputs. `fill` never exceeds the train-time latent
/// count; cached rows are bit-comparable to what a fresh forward pass with
/// the same latent membership would compute.
pub struct KvCache {
    capacity: usize,
    fill: usize,
    /// Rotated keys and values per self-attention layer, `fill` rows each.
    layer_k: Vec<Vec<f32>>,
    layer_v: Vec<Vec<f32>>,
    /// Cross-attend keys (rotated) and values over the current window.
    cross_k: Vec<f32>,
    cross_v: Vec<f32>,
    cross_rows: usize,
}

impl KvCache {
    fn new(cfg: &ModelConfig) -> KvCache {
        KvCache {
            capacity: cfg.num_latents,
            fill: 0,
            layer_k: vec![Vec::new(); cfg.num_layers],
            layer_v: vec![Vec::new(); cfg.num_layers],
            cross_k: Vec::new(),
            cross_v: Vec::new(),
            cross_rows: 0,
        }
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn restore_from(&mut self, capture: &ForwardCapture<f32>) {
        self.fill = capture.latent_positions.len();
        for (l, layer) in capture.layers.iter().enumerate() {
            self.layer_k[l] = layer.keys.data().to_vec();
            self.layer_v[l] = layer.values.data().to_vec();
        }
    }

    fn set_cross(&mut self, keys: &Array<f32>, values: &Array<f32>) {
        self.cross_k = keys.data().to_vec();
        self.cross_v = values.data().to_vec();
        self.cross_rows = keys.rows();
    }

    fn push_cross(&mut self, k_row: &[f32], v_row: &[f32], max_rows: usize) {
        self.cross_k.extend_from_slice(k_row);
        self.cross_v.extend_from_slice(v_row);
        self.cross_rows += 1;
        if self.cross_rows > max_rows {
            let (wk, wv) = (k_row.len(), v_row.len());
            self.cross_k.drain(..wk);
            self.cross_v.drain(..wv);
            self.cross_rows -= 1;
        }
    }
}

/// One row times a weight matrix plus bias.
fn linear_row(x: &[f32], w: &Array<f32>, b: &Array<f32>, out: &mut [f32]) {
    kernels::matmul_into(x, w.data(), 1, w.rows(), w.cols(), out);
    for (o, &bv) in out.iter_mut().zip(b.data()) {
        *o += bv;
    }
}

/// Single-query multi-head attention against cached rotated keys/values.
/// Every cached row is visible (the new latent trails everything).
fn attend_row(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    rows: usize,
    heads: &crate::attention::HeadConfig,
    out: &mut [f32],
) {
    let f = heads.head_dim;
    let w = heads.width();
    let scale = 1.0 / (f as f32).sqrt();
    let mut scores = vec![0f32; rows];
    for h in 0..heads.num_heads {
        let qh = &q[h * f..(h + 1) * f];
        let mut max = f32::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * w + h * f..j * w + (h + 1) * f];
            let mut dot = 0f32;
            for i in 0..f {
                dot += qh[i] * kh[i];
            }
            *s = dot * scale;
            if *s > max {
                max = *s;
            }
        }
        let mut sum = 0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let inv = 1.0 / sum;
        let oh = &mut out[h * f..(h + 1) * f];
        oh.fill(0.0);
        for (j, &s) in scores.iter().enumerate() {
            let p = s * inv;
            let vh = &values[j * w + h * f..j * w + (h + 1) * f];
            for i in 0..f {
                oh[i] += p * vh[i];
            }
        }
    }
}

fn rotate_heads(row: &mut [f32], pos: usize, heads: &crate::attention::HeadConfig) -> Result<()> {
    let span = heads.rotated_span()?;
    let f = heads.head_dim;
    let mut tmp = vec![0f32; f];
    for h in 0..heads.num_heads {
        let slice = &mut row[h * f..(h + 1) * f];
        kernels::rotary_row(slice, pos, span, false, &mut tmp);
        slice.copy_from_slice(&tmp);
    }
    Ok(())
}

struct RowModel<'a> {
    cfg: &'a ModelConfig,
    params: &'a ParameterSet<f32>,
}

impl RowModel<'_> {
    fn embed_row(&self, token: Token, pos: usize) -> Result<Vec<f32>> {
        let c = self.cfg.channels;
        if token as usize >= self.cfg.vocab_size {
            return Err(Error::TokenOutOfRange { id: token, vocab: self.cfg.vocab_size });
        }
        let mut e = self.params.token_embedding.row(token as usize).to_vec();
        if self.cfg.scale_embeddings {
            let s = (c as f32).sqrt();
            for v in e.iter_mut() {
                *v *= s;
            }
        }
        if self.cfg.absolute_position_embedding {
            let mut sin = vec![0f32; c];
            kernels::sinusoid_row(pos, &mut sin);
            for (v, s) in e.iter_mut().zip(&sin) {
                *v += s;
            }
        }
        Ok(e)
    }

    fn norm_row(&self, x: &[f32], norm: &crate::model::NormParams<f32>) -> Vec<f32> {
        let mut out = vec![0f32; x.len()];
        kernels::layer_norm_row(
            x,
            norm.gain.data(),
            norm.bias.data(),
            crate::attention::LAYER_NORM_EPS as f32,
            &mut out,
        );
        out
    }

    /// Cross-attend K/V rows for one input token, keys rotated at `pos`.
    fn cross_kv_row(&self, embedded: &[f32], pos: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let block = &self.params.cross_block;
        let heads = &self.cfg.cross_heads;
        let nkv = self.norm_row(embedded, block.norm_kv.as_ref().unwrap_or(&block.norm_q));
        let mut k = vec![0f32; heads.width()];
        linear_row(&nkv, &block.attn.k.w, &block.attn.k.b, &mut k);
        rotate_heads(&mut k, pos, heads)?;
        let mut v = vec![0f32; heads.width()];
        linear_row(&nkv, &block.attn.v.w, &block.attn.v.b, &mut v);
        Ok((k, v))
    }

    fn mlp_row(&self, x: &[f32], block: &crate::model::BlockParamSet<f32>) -> Vec<f32> {
        let normed = self.norm_row(x, &block.norm_mlp);
        let mut hidden = vec![0f32; block.mlp_in.w.cols()];
        linear_row(&normed, &block.mlp_in.w, &block.mlp_in.b, &mut hidden);
        for v in hidden.iter_mut() {
            let r = v.max(0.0);
            *v = r * r;
        }
        let mut out = vec![0f32; block.mlp_out.w.cols()];
        linear_row(&hidden, &block.mlp_out.w, &block.mlp_out.b, &mut out);
        out
    }

    /// Advance the cache by one latent at absolute position `pos` whose
    /// query input is `query_row`, returning its vocabulary logits.
    fn latent_step(&self, cache: &mut KvCache, query_row: &[f32], pos: usize) -> Result<Vec<f32>> {
        let cfg = self.cfg;
        let cross = &self.params.cross_block;

        // Cross-attend block against the cached input keys/values.
        let nq = self.norm_row(query_row, &cross.norm_q);
        let heads = &cfg.cross_heads;
        let mut q = vec![0f32; heads.width()];
        linear_row(&nq, &cross.attn.q.w, &cross.attn.q.b, &mut q);
        rotate_heads(&mut q, pos, heads)?;
        let mut merged = vec![0f32; heads.width()];
        attend_row(&q, &cache.cross_k, &cache.cross_v, cache.cross_rows, heads, &mut merged);
        let mut attn = vec![0f32; cfg.channels];
        linear_row(&merged, &cross.attn.o.w, &cross.attn.o.b, &mut attn);
        let mut z: Vec<f32> = query_row.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let mlp = self.mlp_row(&z, cross);
        for (zv, m) in z.iter_mut().zip(&mlp) {
            *zv += m;
        }

        // Latent self-attention stack: append this latent's K/V, then attend
        // over everything resident including itself.
        let heads = &cfg.self_heads;
        for (l, block) in self.params.self_blocks.iter().enumerate() {
            let normed = self.norm_row(&z, &block.norm_q);
            let mut q = vec![0f32; heads.width()];
            linear_row(&normed, &block.attn.q.w, &block.attn.q.b, &mut q);
            rotate_heads(&mut q, pos, heads)?;
            let mut k = vec![0f32; heads.width()];
            linear_row(&normed, &block.attn.k.w, &block.attn.k.b, &mut k);
            rotate_heads(&mut k, pos, heads)?;
            let mut v = vec![0f32; heads.width()];
            linear_row(&normed, &block.attn.v.w, &block.attn.v.b, &mut v);
            cache.layer_k[l].extend_from_slice(&k);
            cache.layer_v[l].extend_from_slice(&v);

            let rows = cache.fill + 1;
            let mut merged = vec![0f32; heads.width()];
            attend_row(&q, &cache.layer_k[l], &cache.layer_v[l], rows, heads, &mut merged);
            let mut attn = vec![0f32; cfg.channels];
            linear_row(&merged, &block.attn.o.w, &block.attn.o.b, &mut attn);
            for (zv, a) in z.iter_mut().zip(&attn) {
                *zv += a;
            }
            let mlp = self.mlp_row(&z, block);
            for (zv, m) in z.iter_mut().zip(&mlp) {
                *zv += m;
            }
        }
        cache.fill += 1;

        let normed = self.norm_row(&z, &self.params.final_norm);
        let mut logits = vec![0f32; cfg.vocab_size];
        linear_row(&normed, &self.params.output.w, &self.params.output.b, &mut logits);
        Ok(logits)
    }
}

/// Cached generation. Emits the same token stream as
/// [`sample_uncached_matching_resets`] under the same seed (and, for runs
/// short enough that no reset occurs, the same stream as plain
/// [`sample_uncached`]), reusing cached activations for speed.
pub fn sample_cached(
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    prompt: &[Token],
    sampler: &SamplerConfig,
    mut on_token: impl FnMut(Token),
) -> Result<Vec<Token>> {
    let (tokens, _) = sample_cached_with_logits(cfg, params, prompt, sampler, &mut |t| on_token(t))?;
    Ok(tokens)
}

fn sample_cached_with_logits(
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    prompt: &[Token],
    sampler: &SamplerConfig,
    on_token: &mut dyn FnMut(Token),
) -> Result<(Vec<Token>, Vec<Vec<f32>>)> {
    check_prompt(prompt, sampler)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut out = prompt.to_vec();
    let mut window = ContextWindow::new(prompt, cfg.max_context);
    let mut schedule = ResetSchedule::new(cfg, sampler.eval_latents, window.len())?;
    let mut cache = KvCache::new(cfg);
    let model = RowModel { cfg, params };
    let mut rows = Vec::new();
    if sampler.max_new_tokens == 0 {
        return Ok((out, rows));
    }

    // Initial full pass over the prompt window, capturing activations.
    let mut capture = ForwardCapture::default();
    let mut opts = ForwardOptions {
        eval_latents: Some(schedule.fill),
        position_offset: window.offset,
        capture: Some(&mut capture),
        ..Default::default()
    };
    let logits = forward(&window.tokens, cfg, params, &mut opts)?;
    cache.restore_from(&capture);
    cache.set_cross(&capture.cross.keys, &capture.cross.values);
    let row = logits.row(logits.rows() - 1).to_vec();
    let token = pick_token(&row, sampler, &mut rng);
    rows.push(row);
    out.push(token);
    on_token(token);
    window.push(token, cfg.max_context);

    for _ in 1..sampler.max_new_tokens {
        let pos = window.offset + window.len() - 1;
        let newest = *window.tokens.last().expect("non-empty window");
        let row = match schedule.next() {
            StepKind::Reset { n_eff } => {
                // Buffer exhausted: one full pass with half the latents, no
                // cached activations, refilling the buffer half full. The
                // cross-attend store is rebuilt from the same pass.
                let mut capture = ForwardCapture::default();
                let mut opts = ForwardOptions {
                    eval_latents: Some(n_eff.min(window.len())),
                    position_offset: window.offset,
                    capture: Some(&mut capture),
                    ..Default::default()
                };
                let logits = forward(&window.tokens, cfg, params, &mut opts)?;
                cache.restore_from(&capture);
                cache.set_cross(&capture.cross.keys, &capture.cross.values);
                logits.row(logits.rows() - 1).to_vec()
            }
            StepKind::Append { .. } => {
                // Extend the cross store with the newest input, then compute
                // exactly one new latent against the cached rows.
                let embedded = model.embed_row(newest, pos)?;
                let (k_row, v_row) = model.cross_kv_row(&embedded, pos)?;
                cache.push_cross(&k_row, &v_row, cfg.max_context);
                let query_row = match cfg.latent_mode {
                    LatentMode::TrailingQuery => embedded,
                    // Learned vectors are assigned by absolute position
                    // (mod N), matching the full pass.
                    LatentMode::Learned => params
                        .learned_latents
                        .as_ref()
                        .ok_or_else(|| {
                            Error::config("learned latent mode without latents".to_string())
                        })?
                        .row(pos % cfg.num_latents)
                        .to_vec(),
                };
                model.latent_step(&mut cache, &query_row, pos)?
            }
        };
        let token = pick_token(&row, sampler, &mut rng);
        rows.push(row);
        out.push(token);
        on_token(token);
        window.push(token, cfg.max_context);
    }
    Ok((out, rows))
}

/// Compare cached and matching-resets logits step by step; used by the
/// cache-fidelity checks.
pub fn cache_fidelity_probe(
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    prompt: &[Token],
    sampler: &SamplerConfig,
) -> Result<(Vec<Token>, Vec<Token>, f32)> {
    let (cached_tokens, cached_rows) =
        sample_cached_with_logits(cfg, params, prompt, sampler, &mut |_| {})?;
    let (ref_tokens, ref_rows) =
        sample_matching_resets_with_logits(cfg, params, prompt, sampler, &mut |_| {})?;
    let mut max_diff = 0f32;
    for (a, b) in cached_rows.iter().zip(&ref_rows) {
        for (x, y) in a.iter().zip(b) {
            max_diff = max_diff.max((x - y).abs());
        }
    }
    Ok((cached_tokens, ref_tokens, max_diff))
}

/// One evaluation window: feed `tokens[start..end]`, score logit rows whose
/// absolute target position exceeds `scored_after`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalWindow {
    pub start: usize,
    pub end: usize,
    pub n_eff: usize,
    pub scored_after: usize,
}

/// Tile a corpus with overlapping windows advancing by `stride`, scoring
/// each token exactly once. The first window scores all its latents; later
/// windows score only their final `stride` targets.
pub fn plan_eval_windows(
    len: usize,
    max_context: usize,
    eval_latents: usize,
    stride: usize,
) -> Result<Vec<EvalWindow>> {
    plan_windows(len, max_context, eval_latents, stride, false)
}

/// Window plan whose first window is only as long as the latent count, so
/// scoring starts at the first position in the corpus. Used for accuracy
/// checks that must cover every maskable target.
pub fn plan_full_coverage_windows(
    len: usize,
    max_context: usize,
    eval_latents: usize,
    stride: usize,
) -> Result<Vec<EvalWindow>> {
    plan_windows(len, max_context, eval_latents, stride, true)
}

fn plan_windows(
    len: usize,
    max_context: usize,
    eval_latents: usize,
    stride: usize,
    from_start: bool,
) -> Result<Vec<EvalWindow>> {
    if len < 2 {
        return Err(Error::config("corpus too short to score".to_string()));
    }
    if stride == 0 || stride > eval_latents {
        return Err(Error::config(format!(
            "stride {} outside 1..=eval_latents {}",
            stride, eval_latents
        )));
    }
    // Single-window degeneration covers corpora shorter than
    // eval_latents + 1 automatically.
    let m0 = if from_start {
        eval_latents.min(len - 1).min(max_context)
    } else {
        (len - 1).min(max_context)
    };
    let n0 = eval_latents.min(m0);
    let mut windows = vec![EvalWindow { start: 0, end: m0, n_eff: n0, scored_after: m0 - n0 }];
    let mut scored_to = m0;
    while scored_to < len - 1 {
        let p_end = (scored_to + stride).min(len - 1);
        let m = p_end.min(max_context);
        windows.push(EvalWindow {
            start: p_end - m,
            end: p_end,
            n_eff: eval_latents.min(m),
            scored_after: scored_to,
        });
        scored_to = p_end;
    }
    Ok(windows)
}

#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct EvalSummary {
    pub tokens_scored: usize,
    pub nll_nats_total: f64,
    pub nll_nats_per_token: f64,
    pub bits_per_token: f64,
    pub perplexity: f64,
}

impl EvalSummary {
    fn from_totals(nll: f64, tokens: usize) -> EvalSummary {
        let per = if tokens > 0 { nll / tokens as f64 } else { 0.0 };
        EvalSummary {
            tokens_scored: tokens,
            nll_nats_total: nll,
            nll_nats_per_token: per,
            bits_per_token: per / std::f64::consts::LN_2,
            perplexity: per.exp(),
        }
    }

    pub fn merged(parts: &[EvalSummary]) -> EvalSummary {
        let nll = parts.iter().map(|p| p.nll_nats_total).sum();
        let tokens = parts.iter().map(|p| p.tokens_scored).sum();
        EvalSummary::from_totals(nll, tokens)
    }
}

/// Detailed per-token scoring used by both density evaluation and accuracy
/// checks: negative log-likelihood and argmax hits over the positions
/// selected by `score_mask` (None scores every coverable position).
pub fn scored_stats(
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    corpus: &[Token],
    eval_latents: usize,
    stride: usize,
    score_mask: Option<&[bool]>,
    full_coverage: bool,
) -> Result<(f64, usize, usize)> {
    let windows = if full_coverage {
        plan_full_coverage_windows(corpus.len(), cfg.max_context, eval_latents, stride)?
    } else {
        plan_eval_windows(corpus.len(), cfg.max_context, eval_latents, stride)?
    };
    let mut nll = 0f64;
    let mut tokens = 0usize;
    let mut hits = 0usize;
    for w in windows {
        let input = &corpus[w.start..w.end];
        let mut opts = ForwardOptions {
            eval_latents: Some(w.n_eff),
            position_offset: w.start,
            ..Default::default()
        };
        let logits = forward(input, cfg, params, &mut opts)?;
        for q in 0..w.n_eff {
            let target_abs = w.start + target_position(input.len(), w.n_eff, q);
            if target_abs <= w.scored_after || target_abs >= corpus.len() {
                continue;
            }
            if let Some(mask) = score_mask {
                if !mask[target_abs - 1] {
                    continue;
                }
            }
            let row = logits.row(q);
            let target = corpus[target_abs] as usize;
            let row64: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let lse = kernels::logsumexp_row(&row64);
            nll += lse - row64[target];
            tokens += 1;
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if argmax == target {
                hits += 1;
            }
        }
    }
    Ok((nll, tokens, hits))
}

/// Slide a window through the corpus, scoring each token once past the
/// first window, and report density in nats, bits, and perplexity.
pub fn strided_eval(
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    corpus: &[Token],
    eval_latents: usize,
    stride: usize,
) -> Result<EvalSummary> {
    let (nll, tokens, _) = scored_stats(cfg, params, corpus, eval_latents, stride, None, false)?;
    Ok(EvalSummary::from_totals(nll, tokens))
}

/// Fraction of mask-selected targets predicted exactly (greedy argmax),
/// evaluated with the same strided window mechanism.
pub fn masked_accuracy(
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    sequences: &[(Vec<Token>, Vec<bool>)],
    eval_latents: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (tokens, mask) in sequences {
        let (_, t, h) =
            scored_stats(cfg, params, tokens, eval_latents, eval_latents, Some(mask), true)?;
        hits += h;
        total += t;
    }
    if total == 0 {
        return Err(Error::config("no masked targets were coverable".to_string()));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests;
