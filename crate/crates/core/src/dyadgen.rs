//! Chain-ordered autoregressive generation of speaker and listener codes.
//!
//! A clip becomes one token stream: for each latent step `i` the five code
//! indices `[S^b, S^h, L^f, L^b, L^h]` occupy positions `5i..5i+5`. The
//! transformer input is a conditioning prefix (one projected token per
//! pooled feature column, then one identity token) followed by the motion
//! tokens.
//!
//! Logits at motion position `t` predict token `t` from tokens before `t`.
//! The first layer reads token content only through keys and values: its
//! queries at motion positions carry position and stream embeddings alone,
//! and it masks strictly (`u < t`). Every later layer masks inclusively
//! (`u <= t`) over hidden states that already exclude their own token.
//!
//! The mode decides which earlier tokens a position may see:
//! - `full_chain`: every earlier token, so the listener at step `i` sees the
//!   speaker at step `i`;
//! - `no_sl_chain`: earlier tokens of the same role;
//! - `no_chain`: earlier tokens of the same stream.
//!
//! All three relations are transitive, so stacking layers never leaks
//! information across a masked pair. Conditioning tokens attend each other
//! and are visible to every position.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::split_corpus;
use crate::error::{Error, Result};
use crate::facereg::FaceCheckpoint;
use crate::features::{assemble, pool_to_latent_rate, FeatureNorm, FeatureSequence, IdentityCode, MOTION_FEATURE_DIM};
use crate::motion::{DyadicClip, MotionSequence, Part, Role, Stream};
use crate::nn::{self, Adam, AdamConfig, Embedding, LayerNorm, Linear, ParamStore};
use crate::tensorio::{read_json, write_json, TensorBundle};
use crate::vqvae::{shuffled_batches, IndexSequence, VqCheckpoint};

/// Streams per latent step.
pub const STEP: usize = Stream::COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainMode {
    FullChain,
    NoSlChain,
    NoChain,
}

impl ChainMode {
    pub const ALL: [ChainMode; 3] = [ChainMode::FullChain, ChainMode::NoSlChain, ChainMode::NoChain];

    /// Whether a position of stream `to` may see a token of stream `from`.
    pub fn permits(self, from: Stream, to: Stream) -> bool {
        match self {
            ChainMode::FullChain => true,
            ChainMode::NoSlChain => from.role() == to.role(),
            ChainMode::NoChain => from == to,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChainMode::FullChain => "full_chain",
            ChainMode::NoSlChain => "no_sl_chain",
            ChainMode::NoChain => "no_chain",
        }
    }
}

impl FromStr for ChainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown mode {s:?}; expected full_chain, no_sl_chain or no_chain"
            ))
        })
    }
}

impl std::fmt::Display for ChainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Interleaved code indices of the five streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    tokens: Vec<usize>,
    vocab: [usize; STEP],
}

impl TokenStream {
    pub fn new(tokens: Vec<usize>, vocab: [usize; STEP]) -> Result<Self> {
        if tokens.is_empty() || !tokens.len().is_multiple_of(STEP) {
            return Err(Error::shape(
                "token stream",
                format!("length {} is not a positive multiple of {STEP}", tokens.len()),
            ));
        }
        for (p, &tok) in tokens.iter().enumerate() {
            let k = vocab[p % STEP];
            if tok >= k {
                return Err(Error::InvalidInput(format!(
                    "token {tok} at position {p} ({}) >= K = {k}",
                    Stream::from_index(p % STEP)
                )));
            }
        }
        Ok(Self { tokens, vocab })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn vocab(&self) -> [usize; STEP] {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of latent steps.
    pub fn gamma(&self) -> usize {
        self.tokens.len() / STEP
    }

    pub fn position(step: usize, stream: Stream) -> usize {
        STEP * step + stream.index()
    }

    pub fn locate(position: usize) -> (usize, Stream) {
        (position / STEP, Stream::from_index(position % STEP))
    }

    pub fn stream_tokens(&self, stream: Stream) -> Vec<usize> {
        self.tokens.iter().skip(stream.index()).step_by(STEP).copied().collect()
    }
}

/// Interleaves speaker `[body, hand]` and listener `[face, body, hand]`
/// indices.
pub fn build_token_stream(speaker: &[IndexSequence], listener: &[IndexSequence]) -> Result<TokenStream> {
    if speaker.len() != 2 || listener.len() != 3 {
        return Err(Error::InvalidInput(format!(
            "expected 2 speaker and 3 listener index sequences, got {} and {}",
            speaker.len(),
            listener.len()
        )));
    }
    let parts: Vec<&IndexSequence> = speaker.iter().chain(listener).collect();
    let gamma = parts[0].len();
    if let Some((s, p)) = parts.iter().enumerate().find(|(_, p)| p.len() != gamma) {
        return Err(Error::shape(
            Stream::from_index(s).name(),
            format!("{} latent steps, {} has {gamma}", p.len(), Stream::SpeakerBody),
        ));
    }
    let mut tokens = Vec::with_capacity(STEP * gamma);
    for i in 0..gamma {
        tokens.extend(parts.iter().map(|p| p.indices[i]));
    }
    let vocab = [0, 1, 2, 3, 4].map(|s| parts[s].num_codes);
    TokenStream::new(tokens, vocab)
}

/// Inverse of [`build_token_stream`].
pub fn split_token_stream(stream: &TokenStream) -> (Vec<IndexSequence>, Vec<IndexSequence>) {
    let seqs: Vec<IndexSequence> = Stream::ALL
        .iter()
        .map(|&s| IndexSequence {
            indices: stream.stream_tokens(s),
            num_codes: stream.vocab[s.index()],
        })
        .collect();
    let mut it = seqs.into_iter();
    let speaker = it.by_ref().take(2).collect();
    (speaker, it.collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
    pub mode: ChainMode,
    /// Positional table size. Derived from the clip length when unset; an
    /// explicit value acts as a ceiling and must fit the layout.
    pub block_size: Option<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            layers: 9,
            heads: 16,
            width: 512,
            mlp_ratio: 4,
            mode: ChainMode::FullChain,
            block_size: None,
        }
    }
}

impl GenConfig {
    pub fn desk() -> Self {
        Self {
            layers: 4,
            heads: 8,
            width: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "generator layers, heads, width and mlp_ratio must be positive".into(),
            ));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Conditioning prefix length for `gamma` steps: one token per pooled
/// feature column plus the identity token.
pub fn prefix_len(gamma: usize) -> usize {
    gamma + 1
}

/// Sequence length the transformer sees for `gamma` steps.
pub fn required_block(gamma: usize) -> usize {
    prefix_len(gamma) + STEP * gamma
}

/// `allowed[q][k]` over the full sequence (prefix then motion tokens).
/// `strict` gives the first-layer mask.
pub fn attention_allowed(mode: ChainMode, gamma: usize, strict: bool) -> Vec<Vec<bool>> {
    attention_allowed_partial(mode, prefix_len(gamma), STEP * gamma, strict)
}

/// [`attention_allowed`] for a prefix of `p` conditioning tokens followed
/// by the first `n` motion tokens.
fn attention_allowed_partial(mode: ChainMode, p: usize, n: usize, strict: bool) -> Vec<Vec<bool>> {
    let l = p + n;
    (0..l)
        .map(|q| {
            (0..l)
                .map(|k| {
                    if k < p {
                        return true;
                    }
                    if q < p {
                        return false;
                    }
                    let (tq, tk) = (q - p, k - p);
                    let before = if strict { tk < tq } else { tk <= tq };
                    before && mode.permits(Stream::from_index(tk % STEP), Stream::from_index(tq % STEP))
                })
                .collect()
        })
        .collect()
}

fn additive_mask(mode: ChainMode, p: usize, n: usize, strict: bool, dtype: DType) -> Result<Tensor> {
    let allowed = attention_allowed_partial(mode, p, n, strict);
    let l = allowed.len();
    let v: Vec<f32> = allowed
        .iter()
        .flatten()
        .map(|&a| if a { 0.0 } else { f32::NEG_INFINITY })
        .collect();
    Ok(Tensor::from_vec(v, (l, l), &Device::Cpu)?.to_dtype(dtype)?)
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new(ps: &mut ParamStore, name: &str, cfg: &GenConfig) -> Result<Self> {
        let w = cfg.width;
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), w)?,
            q: Linear::new(ps, &format!("{name}.q"), w, w)?,
            k: Linear::new(ps, &format!("{name}.k"), w, w)?,
            v: Linear::new(ps, &format!("{name}.v"), w, w)?,
            o: Linear::new(ps, &format!("{name}.o"), w, w)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), w)?,
            fc1: Linear::new(ps, &format!("{name}.fc1"), w, w * cfg.mlp_ratio)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), w * cfg.mlp_ratio, w)?,
            heads: cfg.heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, w) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, w / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Queries from `xq`, keys and values from `xkv`.
    fn forward(&self, xq: &Tensor, xkv: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, l, w) = xq.dims3()?;
        let nq = self.ln1.forward(xq)?;
        let nkv = if std::ptr::eq(xq, xkv) {
            nq.clone()
        } else {
            self.ln1.forward(xkv)?
        };
        let q = self.split_heads(&self.q.forward(&nq)?)?;
        let k = self.split_heads(&self.k.forward(&nkv)?)?;
        let v = self.split_heads(&self.v.forward(&nkv)?)?;
        let scale = 1.0 / ((w / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(mask)?;
        let att = softmax_last(&scores)?.matmul(&v)?;
        let att = att.transpose(1, 2)?.contiguous()?.reshape((b, l, w))?;
        let h = (xq + self.o.forward(&att)?)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&h)?)?.silu()?)?;
        Ok((h + m)?)
    }
}

/// Per-stream logits, each `(B, gamma, K_s)`.
pub struct Logits {
    pub per_stream: Vec<Tensor>,
}

impl Logits {
    pub fn gamma(&self) -> Result<usize> {
        Ok(self.per_stream[0].dim(1)?)
    }

    /// Logits at motion position `pos` of batch row `b`.
    pub fn position(&self, b: usize, pos: usize) -> Result<Vec<f32>> {
        let (step, stream) = TokenStream::locate(pos);
        Ok(self.per_stream[stream.index()]
            .get(b)?
            .get(step)?
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?)
    }
}

/// Mean cross-entropy over every motion position of every batch row.
pub fn nll_loss(logits: &Logits, targets: &[&TokenStream]) -> Result<Tensor> {
    let b = targets.len();
    let gamma = logits.gamma()?;
    let mut total: Option<Tensor> = None;
    for (s, lg) in logits.per_stream.iter().enumerate() {
        let (lb, lgam, k) = lg.dims3()?;
        if lb != b || lgam != gamma {
            return Err(Error::shape(
                "logits",
                format!("({lb}, {lgam}) vs {b} targets of {gamma} steps"),
            ));
        }
        let mut onehot = vec![0f32; b * gamma * k];
        for (bi, t) in targets.iter().enumerate() {
            if t.gamma() != gamma {
                return Err(Error::shape(
                    "targets",
                    format!("{} steps, logits have {gamma}", t.gamma()),
                ));
            }
            for (i, &tok) in t.stream_tokens(Stream::from_index(s)).iter().enumerate() {
                if tok >= k {
                    return Err(Error::InvalidInput(format!("target {tok} outside vocabulary {k}")));
                }
                onehot[(bi * gamma + i) * k + tok] = 1.0;
            }
        }
        let onehot = Tensor::from_vec(onehot, (b, gamma, k), &Device::Cpu)?.to_dtype(lg.dtype())?;
        let picked = (log_softmax_last(lg)? * onehot)?.sum_all()?;
        total = Some(match total {
            None => picked,
            Some(t) => (t + picked)?,
        });
    }
    let total = total.expect("five streams");
    Ok((total * (-1.0 / (b * STEP * gamma) as f64))?)
}

/// The transformer over `[feature tokens | identity token | motion tokens]`.
pub struct Generator {
    config: GenConfig,
    vocab: [usize; STEP],
    feature_dim: usize,
    num_identities: usize,
    gamma: usize,
    block: usize,
    params: ParamStore,
    feat_proj: Linear,
    id_embed: Embedding,
    tok_embed: Vec<Embedding>,
    stream_embed: Embedding,
    pos_embed: Embedding,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    heads: Vec<Linear>,
}

impl Generator {
    pub fn new(
        config: &GenConfig,
        vocab: [usize; STEP],
        feature_dim: usize,
        num_identities: usize,
        gamma: usize,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        if gamma == 0 {
            return Err(Error::InvalidInput("generator needs at least one latent step".into()));
        }
        if vocab.contains(&0) || num_identities == 0 || feature_dim == 0 {
            return Err(Error::Config(
                "vocabularies, identities and feature dim must be positive".into(),
            ));
        }
        let need = required_block(gamma);
        let block = config.block_size.unwrap_or(need);
        if block < need {
            return Err(Error::Config(format!(
                "block_size {block} is smaller than the {need} positions needed for {gamma} steps"
            )));
        }
        let w = config.width;
        let mut ps = ParamStore::new(seed, dtype);
        let feat_proj = Linear::new(&mut ps, "feat_proj", feature_dim, w)?;
        let id_embed = Embedding::new(&mut ps, "identity", num_identities, w)?;
        let tok_embed = Stream::ALL
            .iter()
            .map(|s| Embedding::new(&mut ps, &format!("tok.{}", s.name()), vocab[s.index()], w))
            .collect::<Result<Vec<_>>>()?;
        let stream_embed = Embedding::new(&mut ps, "stream", STEP, w)?;
        let pos_embed = Embedding::new(&mut ps, "pos", block, w)?;
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut ps, &format!("block{i}"), config))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut ps, "ln_f", w)?;
        let heads = Stream::ALL
            .iter()
            .map(|s| Linear::new(&mut ps, &format!("head.{}", s.name()), w, vocab[s.index()]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            vocab,
            feature_dim,
            num_identities,
            gamma,
            block,
            params: ps,
            feat_proj,
            id_embed,
            tok_embed,
            stream_embed,
            pos_embed,
            blocks,
            ln_f,
            heads,
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    pub fn mode(&self) -> ChainMode {
        self.config.mode
    }

    pub fn vocab(&self) -> [usize; STEP] {
        self.vocab
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    /// Latent steps per clip the model was built for.
    pub fn gamma(&self) -> usize {
        self.gamma
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn index_tensor(v: impl IntoIterator<Item = usize>) -> Result<Tensor> {
        let v: Vec<u32> = v.into_iter().map(|i| i as u32).collect();
        let n = v.len();
        Ok(Tensor::from_vec(v, n, &Device::Cpu)?)
    }

    /// Teacher-forced logits for a batch of streams with matching features
    /// (`(B, feature_dim, gamma)`, normalized) and identities. Streams may
    /// cover only the first steps of the clip; the conditioning prefix
    /// always spans all `gamma` feature columns.
    pub fn forward(&self, streams: &[&TokenStream], features: &Tensor, ids: &[usize]) -> Result<Logits> {
        let b = streams.len();
        if b == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let gamma = streams[0].gamma();
        let n = STEP * gamma;
        for s in streams {
            if s.gamma() != gamma {
                return Err(Error::shape("token stream", "batch mixes stream lengths"));
            }
            if s.vocab() != self.vocab {
                return Err(Error::InvalidInput(format!(
                    "stream vocabulary {:?} does not match the generator's {:?}",
                    s.vocab(),
                    self.vocab
                )));
            }
        }
        let (fb, fd, fg) = features.dims3()?;
        if (fb, fd) != (b, self.feature_dim) || fg < gamma {
            return Err(Error::shape(
                "generator features",
                format!("({fb}, {fd}, {fg}), expected ({b}, {}, >= {gamma})", self.feature_dim),
            ));
        }
        if ids.len() != b {
            return Err(Error::shape("identity", format!("{} ids for batch {b}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.num_identities) {
            return Err(Error::InvalidInput(format!(
                "identity {bad} outside [0, {})",
                self.num_identities
            )));
        }
        let p = prefix_len(fg);
        let need = p + n;
        if required_block(fg) > self.block {
            return Err(Error::InvalidInput(format!(
                "{fg} steps need {} positions, block size is {}",
                required_block(fg),
                self.block
            )));
        }
        let w = self.config.width;
        let dtype = self.params.dtype();

        let pos = self.pos_embed.forward(&Self::index_tensor(0..need)?)?;
        let feat = self.feat_proj.forward(&features.transpose(1, 2)?.contiguous()?)?;
        let id = self
            .id_embed
            .forward(&Self::index_tensor(ids.iter().copied())?)?
            .unsqueeze(1)?;
        let cond = Tensor::cat(&[feat, id], 1)?.broadcast_add(&pos.narrow(0, 0, p)?)?;

        let stream_ids = Self::index_tensor((0..n).map(|t| t % STEP))?;
        let query = (self.stream_embed.forward(&stream_ids)? + pos.narrow(0, p, n)?)?;
        let query = query.unsqueeze(0)?.broadcast_as((b, n, w))?.contiguous()?;
        let mut per_stream = Vec::with_capacity(STEP);
        for s in 0..STEP {
            let idx = Self::index_tensor(
                streams
                    .iter()
                    .flat_map(|st| st.tokens().iter().skip(s).step_by(STEP).copied()),
            )?;
            per_stream.push(self.tok_embed[s].forward(&idx)?.reshape((b, gamma, 1, w))?);
        }
        let content = Tensor::cat(&per_stream, 2)?.reshape((b, n, w))?;
        let content = (content + &query)?;

        let xq = Tensor::cat(&[&cond, &query], 1)?;
        let xkv = Tensor::cat(&[&cond, &content], 1)?;
        let strict = additive_mask(self.config.mode, p, n, true, dtype)?;
        let inclusive = additive_mask(self.config.mode, p, n, false, dtype)?;
        let mut h = self.blocks[0].forward(&xq, &xkv, &strict)?;
        for blk in &self.blocks[1..] {
            h = blk.forward(&h, &h, &inclusive)?;
        }
        let h = self.ln_f.forward(&h)?.narrow(1, p, n)?.reshape((b, gamma, STEP, w))?;
        let per_stream = (0..STEP)
            .map(|s| self.heads[s].forward(&h.narrow(2, s, 1)?.squeeze(2)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Logits { per_stream })
    }
}

/// Logits at every motion position of one stream, as plain vectors.
pub fn forward_logits(
    model: &Generator,
    stream: &TokenStream,
    pooled_features: &Array2<f32>,
    identity: &IdentityCode,
) -> Result<Vec<Vec<f32>>> {
    let x = nn::batch_tensor(&[pooled_features], model.params().dtype())?;
    let logits = model.forward(&[stream], &x, &[identity.speaker_id()])?;
    (0..stream.len()).map(|p| logits.position(0, p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// 0 selects the argmax.
    pub temperature: f64,
    pub top_k: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
        }
    }
}

impl SamplingConfig {
    pub fn argmax() -> Self {
        Self {
            temperature: 0.0,
            top_k: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Draws one index from temperature-scaled, optionally top-k truncated
/// logits. Ties in the top-k cut keep the lower index.
pub fn sample_index(logits: &[f32], cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> usize {
    if cfg.temperature == 0.0 {
        return argmax(logits);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if let Some(k) = cfg.top_k {
        order.truncate(k.max(1));
    }
    if order.len() == 1 {
        return order[0];
    }
    let max = logits[order[0]] as f64;
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i] as f64 - max) / cfg.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &wt) in order.iter().zip(&weights) {
        if u < wt {
            return i;
        }
        u -= wt;
    }
    *order.last().expect("non-empty")
}

/// Generates all `5 * gamma` tokens in stream order. `pooled_features` is
/// normalized, `feature_dim x gamma`.
pub fn sample_stream(
    model: &Generator,
    pooled_features: &Array2<f32>,
    identity: usize,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<TokenStream> {
    Ok(sample_streams(model, &[pooled_features], &[identity], sampling, &[seed])?.remove(0))
}

/// Batched [`sample_stream`]: row `b` draws from its own generator seeded
/// with `seeds[b]`. All rows must share one step count.
pub fn sample_streams(
    model: &Generator,
    pooled_features: &[&Array2<f32>],
    identities: &[usize],
    sampling: &SamplingConfig,
    seeds: &[u64],
) -> Result<Vec<TokenStream>> {
    sampling.validate()?;
    let b = pooled_features.len();
    if b == 0 || identities.len() != b || seeds.len() != b {
        return Err(Error::InvalidInput(format!(
            "sampling needs matching features, identities and seeds, got {b}, {} and {}",
            identities.len(),
            seeds.len()
        )));
    }
    let gamma = pooled_features[0].ncols();
    if gamma == 0 {
        return Err(Error::InvalidInput("cannot sample zero latent steps".into()));
    }
    if pooled_features.iter().any(|f| f.ncols() != gamma) {
        return Err(Error::shape("generator features", "batch mixes step counts"));
    }
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let x = nn::batch_tensor(pooled_features, model.params().dtype())?;
    let mut tokens = vec![vec![0usize; STEP * gamma]; b];
    for t in 0..STEP * gamma {
        // Later steps cannot influence position t, so only the steps up to
        // and including t's are fed.
        let upto = STEP * (t / STEP + 1);
        let partial = tokens
            .iter()
            .map(|row| TokenStream::new(row[..upto].to_vec(), model.vocab()))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TokenStream> = partial.iter().collect();
        let logits = model.forward(&refs, &x, identities)?;
        for (row, (out, rng)) in tokens.iter_mut().zip(rngs.iter_mut()).enumerate() {
            out[t] = sample_index(&logits.position(row, t)?, sampling, rng);
        }
    }
    tokens
        .into_iter()
        .map(|row| TokenStream::new(row, model.vocab()))
        .collect()
}

/// Speaker `[body, hand]` and listener `[face, body, hand]` index sequences.
pub fn sample_dyad(
    model: &Generator,
    pooled_features: &Array2<f32>,
    identity: &IdentityCode,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<(Vec<IndexSequence>, Vec<IndexSequence>)> {
    let stream = sample_stream(model, pooled_features, identity.speaker_id(), sampling, seed)?;
    Ok(split_token_stream(&stream))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub val_fraction: f64,
    /// Cosine-decay the learning rate to a tenth over the run.
    pub cosine_decay: bool,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            adam: AdamConfig::default(),
            val_fraction: 0.1,
            cosine_decay: false,
        }
    }
}

impl GenTrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            val_fraction: 0.1,
            cosine_decay: true,
        }
    }
}

/// One teacher-forcing example.
#[derive(Debug, Clone, PartialEq)]
pub struct GenExample {
    pub tokens: TokenStream,
    /// Normalized pooled features, `feature_dim x gamma`.
    pub features: Array2<f32>,
    pub identity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenEpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenTrainLog {
    pub mode: ChainMode,
    pub train_examples: usize,
    pub val_examples: usize,
    /// NLL of per-stream token frequencies (add-one smoothed) from the
    /// training split, scored on the validation split.
    pub unigram_val_nll: Option<f64>,
    pub final_val_nll: Option<f64>,
    pub epochs: Vec<GenEpochLog>,
}

fn batch_inputs<'a>(
    model: &Generator,
    examples: &'a [GenExample],
    idx: &[usize],
) -> Result<(Vec<&'a TokenStream>, Tensor, Vec<usize>)> {
    let streams = idx.iter().map(|&i| &examples[i].tokens).collect();
    let feats: Vec<&Array2<f32>> = idx.iter().map(|&i| &examples[i].features).collect();
    let x = nn::batch_tensor(&feats, model.params().dtype())?;
    Ok((streams, x, idx.iter().map(|&i| examples[i].identity).collect()))
}

/// Mean per-token NLL of `model` over `examples`.
pub fn evaluate_nll(model: &Generator, examples: &[GenExample], batch: usize) -> Result<f64> {
    let lengths: Vec<usize> = examples.iter().map(|e| e.tokens.len()).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for b in shuffled_batches(&lengths, batch, &mut ChaCha8Rng::seed_from_u64(0)) {
        let (streams, x, ids) = batch_inputs(model, examples, &b)?;
        let loss = nll_loss(&model.forward(&streams, &x, &ids)?, &streams)?;
        let tokens: usize = streams.iter().map(|s| s.len()).sum();
        sum += nn::scalar(&loss)? * tokens as f64;
        n += tokens;
    }
    Ok(sum / n.max(1) as f64)
}

/// Add-one smoothed per-stream unigram NLL of `eval` under `train` counts.
pub fn unigram_nll(train: &[GenExample], eval: &[GenExample]) -> Result<f64> {
    let vocab = train
        .first()
        .ok_or_else(|| Error::InvalidInput("unigram baseline needs training examples".into()))?
        .tokens
        .vocab();
    let mut counts: Vec<Vec<f64>> = vocab.iter().map(|&k| vec![1.0; k]).collect();
    for e in train {
        for (p, &t) in e.tokens.tokens().iter().enumerate() {
            counts[p % STEP][t] += 1.0;
        }
    }
    let totals: Vec<f64> = counts.iter().map(|c| c.iter().sum()).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for e in eval {
        for (p, &t) in e.tokens.tokens().iter().enumerate() {
            let s = p % STEP;
            sum -= (counts[s][t] / totals[s]).ln();
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// Teacher-forced NLL training on prepared examples. Deterministic for a
/// seed.
pub fn train_on_examples(
    model: &Generator,
    train: &[GenExample],
    val: &[GenExample],
    cfg: &GenTrainConfig,
    seed: u64,
) -> Result<GenTrainLog> {
    if train.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    let mut opt = Adam::new(model.params().vars(), cfg.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e_4e_7a);
    let lengths: Vec<usize> = train.iter().map(|e| e.tokens.len()).collect();
    let per_epoch = shuffled_batches(&lengths, cfg.batch_size, &mut ChaCha8Rng::seed_from_u64(0)).len();
    let total = per_epoch * cfg.epochs;
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut sum, mut nb) = (0.0, 0usize);
        for (bi, b) in shuffled_batches(&lengths, cfg.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let (streams, x, ids) = batch_inputs(model, train, &b)?;
            let loss = nll_loss(&model.forward(&streams, &x, &ids)?, &streams)?;
            let v = nn::scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::NumericFailure {
                    stage: "generator".into(),
                    epoch,
                    batch: bi,
                    clips: format!("{b:?}"),
                });
            }
            if cfg.cosine_decay {
                opt.set_lr(nn::cosine_lr(cfg.adam.lr, 0.1, step, total));
            }
            opt.backward_step(&loss)?;
            step += 1;
            sum += v;
            nb += 1;
        }
        let val_nll = if val.is_empty() {
            None
        } else {
            Some(evaluate_nll(model, val, cfg.batch_size)?)
        };
        let log = GenEpochLog {
            epoch,
            train_nll: sum / nb.max(1) as f64,
            val_nll,
        };
        log::debug!("generator epoch {epoch}: {log:?}");
        epochs.push(log);
    }
    Ok(GenTrainLog {
        mode: model.mode(),
        train_examples: train.len(),
        val_examples: val.len(),
        unigram_val_nll: if val.is_empty() {
            None
        } else {
            Some(unigram_nll(train, val)?)
        },
        final_val_nll: epochs.last().and_then(|e| e.val_nll),
        epochs,
    })
}

/// Checks that `vqs` holds one checkpoint per stream in stream order with a
/// shared window, and returns that window and the vocabularies.
pub fn check_tokenizers(vqs: &[VqCheckpoint]) -> Result<(usize, [usize; STEP])> {
    if vqs.len() != STEP {
        return Err(Error::InvalidInput(format!(
            "expected {STEP} VQ checkpoints, got {}",
            vqs.len()
        )));
    }
    for (vq, want) in vqs.iter().zip(Stream::ALL) {
        if vq.stream != want {
            return Err(Error::InvalidInput(format!(
                "VQ checkpoint for {} found where {want} was expected",
                vq.stream
            )));
        }
    }
    let w = vqs[0].config().window;
    if let Some(vq) = vqs.iter().find(|v| v.config().window != w) {
        return Err(Error::Config(format!(
            "VQ window {} for {} differs from {w}",
            vq.config().window,
            vq.stream
        )));
    }
    Ok((w, [0, 1, 2, 3, 4].map(|s| vqs[s].num_codes())))
}

/// Tokenizes every stream of a clip.
pub fn tokenize_clip(clip: &DyadicClip, vqs: &[VqCheckpoint]) -> Result<TokenStream> {
    let seqs = vqs
        .iter()
        .map(|vq| vq.tokenize(clip.stream_track(vq.stream)))
        .collect::<Result<Vec<_>>>()?;
    build_token_stream(&seqs[..2], &seqs[2..])
}

/// Pooled motion features (`898 x gamma`) before normalization.
pub fn pooled_features(features: &FeatureSequence, window: usize) -> Result<Array2<f32>> {
    pool_to_latent_rate(&assemble(features).motion_features, window)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenMeta {
    kind: String,
    mode: ChainMode,
    stream_order: Vec<String>,
    vocab: [usize; STEP],
    feature_dim: usize,
    num_identities: usize,
    gamma: usize,
    window: usize,
    config: GenConfig,
}

/// A trained generator with the pooled-feature normalization and the VQ
/// window it was trained against.
pub struct GenCheckpoint {
    pub model: Generator,
    pub feature_norm: FeatureNorm,
    pub window: usize,
}

impl GenCheckpoint {
    pub fn example(&self, clip: &DyadicClip, vqs: &[VqCheckpoint]) -> Result<GenExample> {
        Ok(GenExample {
            tokens: tokenize_clip(clip, vqs)?,
            features: self
                .feature_norm
                .normalize(&pooled_features(&clip.features, self.window)?),
            identity: clip.identity()?.speaker_id(),
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bundle = TensorBundle::new();
        self.model.params().store(&mut bundle, "model")?;
        self.feature_norm.store(&mut bundle, "feature_norm")?;
        bundle.save(dir)?;
        write_json(
            dir.join("config.json"),
            &GenMeta {
                kind: "generator".into(),
                mode: self.model.mode(),
                stream_order: Stream::ALL.iter().map(|s| s.name().to_string()).collect(),
                vocab: self.model.vocab(),
                feature_dim: self.model.feature_dim(),
                num_identities: self.model.num_identities(),
                gamma: self.model.gamma(),
                window: self.window,
                config: self.model.config().clone(),
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: GenMeta = read_json(dir.join("config.json"))?;
        if meta.kind != "generator" {
            return Err(Error::InvalidInput(format!(
                "{}: expected a generator checkpoint, found {}",
                dir.display(),
                meta.kind
            )));
        }
        let order: Vec<String> = Stream::ALL.iter().map(|s| s.name().to_string()).collect();
        if meta.stream_order != order {
            return Err(Error::InvalidInput(format!(
                "{}: stream order {:?} differs from {:?}",
                dir.display(),
                meta.stream_order,
                order
            )));
        }
        if meta.mode != meta.config.mode {
            return Err(Error::InvalidInput(format!(
                "{}: mode disagrees with config",
                dir.display()
            )));
        }
        let bundle = TensorBundle::load(dir)?;
        let model = Generator::new(
            &meta.config,
            meta.vocab,
            meta.feature_dim,
            meta.num_identities,
            meta.gamma,
            0,
            DType::F32,
        )?;
        model.params().load(&bundle, "model")?;
        Ok(Self {
            model,
            feature_norm: FeatureNorm::load(&bundle, "feature_norm")?,
            window: meta.window,
        })
    }
}

/// Tokenizes `corpus` with frozen VQ checkpoints and trains the generator.
pub fn train_generator(
    corpus: &[DyadicClip],
    vqs: &[VqCheckpoint],
    config: &GenConfig,
    train: &GenTrainConfig,
    seed: u64,
) -> Result<(GenCheckpoint, GenTrainLog)> {
    let (window, vocab) = check_tokenizers(vqs)?;
    let (train_clips, val_clips) = split_corpus(corpus, train.val_fraction);
    let first = train_clips
        .first()
        .ok_or_else(|| Error::InvalidInput("no clips to train the generator on".into()))?;
    if first.num_frames() % window != 0 {
        return Err(Error::InvalidInput(format!(
            "clip {} has {} frames, not a multiple of window {window}",
            first.clip_id,
            first.num_frames()
        )));
    }
    let gamma = first.num_frames() / window;
    let num_identities = first.num_identities;
    if let Some(c) = corpus.iter().find(|c| c.num_identities != num_identities) {
        return Err(Error::InvalidInput(format!(
            "clip {} declares {} identities, expected {num_identities}",
            c.clip_id, c.num_identities
        )));
    }
    let pooled: Vec<Array2<f32>> = train_clips
        .iter()
        .map(|c| pooled_features(&c.features, window))
        .collect::<Result<_>>()?;
    let feature_norm = FeatureNorm::fit(&pooled)?;
    let model = Generator::new(
        config,
        vocab,
        MOTION_FEATURE_DIM,
        num_identities,
        gamma,
        seed,
        DType::F32,
    )?;
    let ckpt = GenCheckpoint {
        model,
        feature_norm,
        window,
    };
    let train_ex = train_clips
        .iter()
        .map(|c| ckpt.example(c, vqs))
        .collect::<Result<Vec<_>>>()?;
    let val_ex = val_clips
        .iter()
        .map(|c| ckpt.example(c, vqs))
        .collect::<Result<Vec<_>>>()?;
    let log = train_on_examples(&ckpt.model, &train_ex, &val_ex, train, seed)?;
    Ok((ckpt, log))
}

/// Checkpoint layout under a model root.
pub fn vq_dir(root: &Path, stream: Stream) -> PathBuf {
    root.join("vqvae").join(stream.name())
}

pub fn face_dir(root: &Path) -> PathBuf {
    root.join("face")
}

pub fn generator_dir(root: &Path) -> PathBuf {
    root.join("generator")
}

fn require(part: &str, dir: PathBuf) -> Result<PathBuf> {
    if dir.join("config.json").is_file() {
        Ok(dir)
    } else {
        Err(Error::MissingCheckpoint {
            part: part.to_string(),
            path: dir,
        })
    }
}

/// Loads the five VQ checkpoints in stream order.
pub fn load_tokenizers(root: &Path) -> Result<Vec<VqCheckpoint>> {
    Stream::ALL
        .iter()
        .map(|&s| VqCheckpoint::load(require(&format!("vqvae:{}", s.name()), vq_dir(root, s))?))
        .collect()
}

/// Every checkpoint generation needs.
pub struct DyadModels {
    pub vqs: Vec<VqCheckpoint>,
    pub face: FaceCheckpoint,
    pub generator: GenCheckpoint,
}

impl DyadModels {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let vqs = load_tokenizers(root)?;
        let face = FaceCheckpoint::load(require("face", face_dir(root))?)?;
        let generator = GenCheckpoint::load(require("generator", generator_dir(root))?)?;
        let (window, vocab) = check_tokenizers(&vqs)?;
        if window != generator.window || vocab != generator.model.vocab() {
            return Err(Error::InvalidInput(format!(
                "generator expects window {} and vocab {:?}, VQ checkpoints give {window} and {vocab:?}",
                generator.window,
                generator.model.vocab()
            )));
        }
        Ok(Self { vqs, face, generator })
    }
}

/// Speaker and listener motion for one feature sequence.
pub fn generate(
    features: &FeatureSequence,
    identity: &IdentityCode,
    models: &DyadModels,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<(MotionSequence, MotionSequence)> {
    let t = features.num_frames();
    let w = models.generator.window;
    if t == 0 || !t.is_multiple_of(w) {
        return Err(Error::InvalidInput(format!(
            "feature sequence of {t} frames is not a positive multiple of window {w}"
        )));
    }
    let pooled = models.generator.feature_norm.normalize(&pooled_features(features, w)?);
    let (speaker_idx, listener_idx) = sample_dyad(&models.generator.model, &pooled, identity, sampling, seed)?;
    let decode = |s: Stream, seq: &IndexSequence| models.vqs[s.index()].decode_indices(seq);
    let face = models.face.regress(&assemble(features).face_features, identity)?;
    let speaker = MotionSequence::new(
        Role::Speaker,
        face,
        decode(Stream::SpeakerBody, &speaker_idx[0])?,
        decode(Stream::SpeakerHand, &speaker_idx[1])?,
    )?;
    let listener = MotionSequence::new(
        Role::Listener,
        decode(Stream::ListenerFace, &listener_idx[0])?,
        decode(Stream::ListenerBody, &listener_idx[1])?,
        decode(Stream::ListenerHand, &listener_idx[2])?,
    )?;
    debug_assert_eq!(speaker.part(Part::Body).ncols(), t);
    Ok((speaker, listener))
}

/// A generated clip carrying `template`'s features, identity and metadata.
pub fn generate_clip(
    template: &DyadicClip,
    models: &DyadModels,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<DyadicClip> {
    let (speaker, listener) = generate(&template.features, &template.identity()?, models, sampling, seed)?;
    let clip = DyadicClip {
        speaker,
        listener,
        ..template.clone()
    };
    clip.validate()?;
    Ok(clip)
}
