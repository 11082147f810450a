//! Per-part motion VQ-VAE.
//!
//! A strided 1-D convolutional encoder maps a `(channels, T)` motion track
//! to `T / w` latent columns, each latent is snapped to its nearest codebook
//! entry, and a decoder built from kernel-2/stride-2 transposed convolutions
//! restores the frame rate. Training minimizes
//!
//! ```text
//! MSE(x_hat, x) + |sg[z] - zq|^2 + beta * |z - sg[zq]|^2
//! ```
//!
//! with a straight-through estimator carrying the decoder-input gradient
//! back to the encoder output. Squared norms are summed over the code
//! dimension and averaged over latent columns.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureNorm;
use crate::motion::{DyadicClip, Stream};
use crate::nn::{self, Adam, AdamConfig, Conv1d, Init, ParamStore, ResBlock1d, UpsampleConv};
use crate::tensorio::{read_json, write_json, TensorBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    /// Codebook entries `K`.
    pub num_codes: usize,
    pub code_dim: usize,
    /// Temporal window `w`; a power of two, one stride-2 stage per factor.
    pub window: usize,
    pub commitment_beta: f64,
    /// Hidden channel width of encoder and decoder.
    pub width: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            num_codes: 2048,
            code_dim: 256,
            window: 4,
            commitment_beta: 0.25,
            width: 256,
        }
    }
}

impl VqConfig {
    /// Small profile that trains in seconds on one CPU core.
    pub fn desk() -> Self {
        Self {
            num_codes: 256,
            code_dim: 64,
            window: 4,
            commitment_beta: 0.25,
            width: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_codes < 2 {
            return Err(Error::Config(format!("num_codes must be >= 2, got {}", self.num_codes)));
        }
        if self.window == 0 || !self.window.is_power_of_two() {
            return Err(Error::Config(format!(
                "window must be a power of two, got {}",
                self.window
            )));
        }
        if self.commitment_beta.is_nan() || self.commitment_beta < 0.0 {
            return Err(Error::Config("commitment_beta must be >= 0".into()));
        }
        if self.code_dim == 0 || self.width == 0 {
            return Err(Error::Config("code_dim and width must be positive".into()));
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        self.window.trailing_zeros() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Re-seed codes unused during an epoch from that epoch's encoder outputs.
    pub restart_dead_codes: bool,
    /// Cosine-decay the learning rate to a tenth over the run.
    pub cosine_decay: bool,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            adam: AdamConfig::default(),
            restart_dead_codes: false,
            cosine_decay: false,
        }
    }
}

impl VqTrainConfig {
    /// 30 epochs sized for one CPU core.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 2,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            restart_dead_codes: true,
            cosine_decay: true,
        }
    }
}

/// The `K x d_code` code table.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codes: Array2<f32>,
}

impl Codebook {
    pub fn new(codes: Array2<f32>) -> Result<Self> {
        if codes.nrows() < 2 {
            return Err(Error::shape("codebook", "needs at least two codes"));
        }
        if codes.iter().any(|v| v.is_nan()) {
            return Err(Error::shape("codebook", "contains NaN"));
        }
        Ok(Self { codes })
    }

    pub fn num_codes(&self) -> usize {
        self.codes.nrows()
    }

    pub fn code_dim(&self) -> usize {
        self.codes.ncols()
    }

    pub fn codes(&self) -> &Array2<f32> {
        &self.codes
    }

    pub fn code(&self, k: usize) -> ndarray::ArrayView1<'_, f32> {
        self.codes.row(k)
    }
}

/// Continuous latents `(d_code, gamma)` at `1/w` of the motion frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub z: Array2<f32>,
    pub window: usize,
}

impl LatentSequence {
    pub fn gamma(&self) -> usize {
        self.z.ncols()
    }

    pub fn num_frames(&self) -> usize {
        self.gamma() * self.window
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSequence {
    pub indices: Vec<usize>,
    pub num_codes: usize,
}

impl IndexSequence {
    pub fn new(indices: Vec<usize>, num_codes: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= num_codes) {
            return Err(Error::InvalidInput(format!("code index {bad} >= K = {num_codes}")));
        }
        Ok(Self { indices, num_codes })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Nearest code by squared Euclidean distance; ties go to the lowest index.
pub fn nearest_code(z: &[f32], codes: &Array2<f32>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in codes.rows().into_iter().enumerate() {
        let d: f64 = z
            .iter()
            .zip(c.iter())
            .map(|(&a, &b)| {
                let diff = a as f64 - b as f64;
                diff * diff
            })
            .sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

pub fn quantize(z: &LatentSequence, codebook: &Codebook) -> Result<(IndexSequence, LatentSequence)> {
    if z.z.nrows() != codebook.code_dim() {
        return Err(Error::shape(
            "latent",
            format!("code dim {} vs codebook {}", z.z.nrows(), codebook.code_dim()),
        ));
    }
    let mut indices = Vec::with_capacity(z.gamma());
    let mut zq = Array2::zeros(z.z.dim());
    for (i, col) in z.z.columns().into_iter().enumerate() {
        let col: Vec<f32> = col.to_vec();
        let k = nearest_code(&col, codebook.codes());
        zq.column_mut(i).assign(&codebook.code(k));
        indices.push(k);
    }
    Ok((
        IndexSequence::new(indices, codebook.num_codes())?,
        LatentSequence {
            z: zq,
            window: z.window,
        },
    ))
}

/// The three loss terms and their sum; `commit_term` already includes beta.
pub struct VqLoss {
    pub total: Tensor,
    pub recon: Tensor,
    pub codebook_term: Tensor,
    pub commit_term: Tensor,
}

/// Loss over `(B, d, T)` motion and `(B, d_code, gamma)` latents. `zq` must
/// be the raw codebook lookup so that the codebook term reaches the codes.
pub fn vq_loss(x: &Tensor, x_hat: &Tensor, z: &Tensor, zq: &Tensor, beta: f64) -> Result<VqLoss> {
    let recon = (x_hat - x)?.sqr()?.mean_all()?;
    let codebook_term = (z.detach() - zq)?.sqr()?.sum(1)?.mean_all()?;
    let commit_term = ((z - zq.detach())?.sqr()?.sum(1)?.mean_all()? * beta)?;
    let total = ((&recon + &codebook_term)? + &commit_term)?;
    Ok(VqLoss {
        total,
        recon,
        codebook_term,
        commit_term,
    })
}

struct Encoder {
    conv_in: Conv1d,
    stages: Vec<(Conv1d, ResBlock1d)>,
    conv_out: Conv1d,
}

impl Encoder {
    fn new(ps: &mut ParamStore, cfg: &VqConfig, input_dim: usize) -> Result<Self> {
        let w = cfg.width;
        let conv_in = Conv1d::same(ps, "enc.conv_in", input_dim, w, 3, 1)?;
        let stages = (0..cfg.stages())
            .map(|s| {
                Ok((
                    Conv1d::new(ps, &format!("enc.down{s}"), w, w, 4, 2, 1, 1)?,
                    ResBlock1d::new(ps, &format!("enc.res{s}"), w, 1)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let conv_out = Conv1d::same(ps, "enc.conv_out", w, cfg.code_dim, 3, 1)?;
        Ok(Self {
            conv_in,
            stages,
            conv_out,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(x)?;
        for (down, res) in &self.stages {
            h = down.forward(&h.silu()?)?;
            h = res.forward(&h)?;
        }
        self.conv_out.forward(&h.silu()?)
    }
}

struct Decoder {
    conv_in: Conv1d,
    stages: Vec<(ResBlock1d, UpsampleConv)>,
    conv_out: Conv1d,
}

impl Decoder {
    fn new(ps: &mut ParamStore, cfg: &VqConfig, output_dim: usize) -> Result<Self> {
        let w = cfg.width;
        let conv_in = Conv1d::same(ps, "dec.conv_in", cfg.code_dim, w, 3, 1)?;
        let stages = (0..cfg.stages())
            .map(|s| {
                Ok((
                    ResBlock1d::new(ps, &format!("dec.res{s}"), w, 1)?,
                    UpsampleConv::new(ps, &format!("dec.up{s}"), w, w, 2)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let conv_out = Conv1d::same(ps, "dec.conv_out", w, output_dim, 3, 1)?;
        Ok(Self {
            conv_in,
            stages,
            conv_out,
        })
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(z)?;
        for (res, up) in &self.stages {
            h = res.forward(&h)?;
            h = up.forward(&h.silu()?)?;
        }
        self.conv_out.forward(&h.silu()?)
    }
}

/// Encoder, decoder and codebook for one motion part. Operates in the
/// normalized space of its training data; [`VqCheckpoint`] handles scaling.
pub struct VqVae {
    config: VqConfig,
    input_dim: usize,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    codebook: Tensor,
}

pub struct VqForward {
    pub loss: VqLoss,
    pub x_hat: Tensor,
    pub z: Tensor,
    pub indices: Vec<usize>,
}

impl VqVae {
    pub fn new(config: &VqConfig, input_dim: usize, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed, dtype);
        let encoder = Encoder::new(&mut params, config, input_dim)?;
        let decoder = Decoder::new(&mut params, config, input_dim)?;
        let bound = 1.0 / config.num_codes as f64;
        let codebook = params.add("codebook", &[config.num_codes, config.code_dim], Init::Uniform(bound))?;
        Ok(Self {
            config: config.clone(),
            input_dim,
            params,
            encoder,
            decoder,
            codebook,
        })
    }

    pub fn config(&self) -> &VqConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn codebook_tensor(&self) -> &Tensor {
        &self.codebook
    }

    pub fn codebook(&self) -> Result<Codebook> {
        let v = self.codebook.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let (k, d) = (v.len(), v[0].len());
        Codebook::new(Array2::from_shape_vec((k, d), v.concat()).expect("rows of equal length"))
    }

    fn check_frames(&self, t: usize) -> Result<()> {
        if t == 0 || !t.is_multiple_of(self.config.window) {
            return Err(Error::InvalidInput(format!(
                "window {} does not divide {t} frames",
                self.config.window
            )));
        }
        Ok(())
    }

    /// `(B, d, T)` to `(B, d_code, T / w)`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.check_frames(x.dim(2)?)?;
        self.encoder.forward(x)
    }

    /// `(B, d_code, gamma)` to `(B, d, gamma * w)`.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z)
    }

    /// Nearest-code indices (row-major over batch then step) and the
    /// codebook lookup `(B, d_code, gamma)`, differentiable w.r.t. the codes.
    pub fn quantize_tensor(&self, z: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        let (b, d, g) = z.dims3()?;
        let cols = z
            .transpose(1, 2)?
            .contiguous()?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let codes = self.codebook()?;
        let indices: Vec<usize> = cols.chunks_exact(d).map(|c| nearest_code(c, codes.codes())).collect();
        let idx = Tensor::from_vec(
            indices.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            b * g,
            &Device::Cpu,
        )?;
        let zq = self
            .codebook
            .index_select(&idx, 0)?
            .reshape((b, g, d))?
            .transpose(1, 2)?
            .contiguous()?;
        Ok((indices, zq))
    }

    /// Full training forward pass with the straight-through estimator.
    pub fn forward(&self, x: &Tensor) -> Result<VqForward> {
        let z = self.encode_tensor(x)?;
        let (indices, zq) = self.quantize_tensor(&z)?;
        let zq_st = (&z + (&zq - &z)?.detach())?;
        let x_hat = self.decode_tensor(&zq_st)?;
        let loss = vq_loss(x, &x_hat, &z, &zq, self.config.commitment_beta)?;
        Ok(VqForward {
            loss,
            x_hat,
            z,
            indices,
        })
    }

    pub fn encode(&self, motion: &Array2<f32>) -> Result<LatentSequence> {
        let x = nn::batch_tensor(&[motion], self.dtype())?;
        let z = self.encode_tensor(&x)?;
        Ok(LatentSequence {
            z: nn::unbatch(&z)?.remove(0),
            window: self.config.window,
        })
    }

    pub fn decode(&self, latent: &LatentSequence) -> Result<Array2<f32>> {
        let z = nn::batch_tensor(&[&latent.z], self.dtype())?;
        Ok(nn::unbatch(&self.decode_tensor(&z)?)?.remove(0))
    }

    pub fn lookup(&self, indices: &IndexSequence) -> Result<LatentSequence> {
        let codes = self.codebook()?;
        if indices.num_codes != codes.num_codes() {
            return Err(Error::InvalidInput(format!(
                "indices use K = {}, codebook has {}",
                indices.num_codes,
                codes.num_codes()
            )));
        }
        let mut z = Array2::zeros((codes.code_dim(), indices.len()));
        for (i, &k) in indices.indices.iter().enumerate() {
            z.column_mut(i).assign(&codes.code(k));
        }
        Ok(LatentSequence {
            z,
            window: self.config.window,
        })
    }

    fn reset_codes(&self, dead: &[usize], pool: &[Vec<f32>], rng: &mut ChaCha8Rng) -> Result<()> {
        if dead.is_empty() || pool.is_empty() {
            return Ok(());
        }
        let var = self.params.get("codebook").expect("codebook registered");
        let mut table = var.as_tensor().to_dtype(DType::F32)?.to_vec2::<f32>()?;
        for &k in dead {
            let src = pool.choose(rng).expect("non-empty pool");
            table[k].copy_from_slice(src);
        }
        let (k, d) = (table.len(), table[0].len());
        let t = Tensor::from_vec(table.concat(), (k, d), &Device::Cpu)?.to_dtype(self.dtype())?;
        var.set(&t)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VqCheckpointMeta {
    kind: String,
    stream: Stream,
    input_dim: usize,
    config: VqConfig,
}

/// A trained part model plus the channel normalization of its training data.
pub struct VqCheckpoint {
    pub stream: Stream,
    pub norm: FeatureNorm,
    pub model: VqVae,
}

impl VqCheckpoint {
    pub fn config(&self) -> &VqConfig {
        self.model.config()
    }

    pub fn num_codes(&self) -> usize {
        self.model.config().num_codes
    }

    pub fn encode_motion(&self, track: &Array2<f32>) -> Result<LatentSequence> {
        self.model.encode(&self.norm.normalize(track))
    }

    pub fn tokenize(&self, track: &Array2<f32>) -> Result<IndexSequence> {
        let z = self.encode_motion(track)?;
        Ok(quantize(&z, &self.model.codebook()?)?.0)
    }

    /// Code lookup, decode, and de-normalization back to motion units.
    pub fn decode_indices(&self, indices: &IndexSequence) -> Result<Array2<f32>> {
        let z = self.model.lookup(indices)?;
        Ok(self.norm.denormalize(&self.model.decode(&z)?))
    }

    pub fn reconstruct(&self, track: &Array2<f32>) -> Result<Array2<f32>> {
        self.decode_indices(&self.tokenize(track)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bundle = TensorBundle::new();
        self.model.params().store(&mut bundle, "model")?;
        self.norm.store(&mut bundle, "norm")?;
        bundle.save(dir)?;
        write_json(
            dir.join("config.json"),
            &VqCheckpointMeta {
                kind: "vqvae".into(),
                stream: self.stream,
                input_dim: self.model.input_dim(),
                config: self.model.config().clone(),
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: VqCheckpointMeta = read_json(dir.join("config.json"))?;
        if meta.kind != "vqvae" {
            return Err(Error::InvalidInput(format!(
                "{}: expected a vqvae checkpoint, found {}",
                dir.display(),
                meta.kind
            )));
        }
        let bundle = TensorBundle::load(dir)?;
        let model = VqVae::new(&meta.config, meta.input_dim, 0, DType::F32)?;
        model.params().load(&bundle, "model")?;
        Ok(Self {
            stream: meta.stream,
            norm: FeatureNorm::load(&bundle, "norm")?,
            model,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub distinct_codes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqTrainLog {
    pub stream: Stream,
    /// Reconstruction MSE (normalized units) of the untrained model.
    pub initial_recon: f64,
    /// Reconstruction MSE after the last epoch, same evaluation.
    pub final_recon: f64,
    pub final_distinct_codes: usize,
    pub epochs: Vec<VqEpochLog>,
}

/// Batches of clip indices with equal frame counts, shuffled per epoch.
pub(crate) fn shuffled_batches(lengths: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &t) in lengths.iter().enumerate() {
        groups.entry(t).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in groups {
        idx.shuffle(rng);
        batches.extend(idx.chunks(batch.max(1)).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Latent columns of a `(B, d, gamma)` tensor as plain vectors.
fn latent_columns(z: &Tensor) -> Result<Vec<Vec<f32>>> {
    let (_, d, _) = z.dims3()?;
    let cols = z
        .transpose(1, 2)?
        .contiguous()?
        .flatten_all()?
        .to_dtype(DType::F32)?
        .to_vec1::<f32>()?;
    Ok(cols.chunks_exact(d).map(<[f32]>::to_vec).collect())
}

fn eval_recon(model: &VqVae, tracks: &[Array2<f32>], batch: usize) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut used = vec![false; model.config().num_codes];
    let lengths: Vec<usize> = tracks.iter().map(|t| t.ncols()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for b in shuffled_batches(&lengths, batch, &mut rng) {
        let mats: Vec<&Array2<f32>> = b.iter().map(|&i| &tracks[i]).collect();
        let x = nn::batch_tensor(&mats, model.dtype())?;
        let out = model.forward(&x)?;
        let elems = x.elem_count();
        sum += nn::scalar(&out.loss.recon)? * elems as f64;
        n += elems;
        out.indices.iter().for_each(|&k| used[k] = true);
    }
    Ok((sum / n as f64, used.iter().filter(|&&u| u).count()))
}

/// Trains the VQ-VAE of one stream on `corpus`. Deterministic for a seed.
pub fn train_vqvae(
    corpus: &[DyadicClip],
    stream: Stream,
    config: &VqConfig,
    train: &VqTrainConfig,
    seed: u64,
) -> Result<(VqCheckpoint, VqTrainLog)> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty training corpus".into()));
    }
    config.validate()?;
    for c in corpus {
        if c.num_frames() % config.window != 0 {
            return Err(Error::InvalidInput(format!(
                "clip {} has {} frames, not a multiple of window {}",
                c.clip_id,
                c.num_frames(),
                config.window
            )));
        }
    }
    let raw: Vec<&Array2<f32>> = corpus.iter().map(|c| c.stream_track(stream)).collect();
    let norm = FeatureNorm::fit(raw.iter().copied())?;
    let tracks: Vec<Array2<f32>> = raw.iter().map(|t| norm.normalize(t)).collect();
    let model = VqVae::new(config, norm.dim(), seed, DType::F32)?;
    let mut opt = Adam::new(model.params().vars(), train.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_b47c);
    let lengths: Vec<usize> = tracks.iter().map(|t| t.ncols()).collect();

    let (initial_recon, _) = eval_recon(&model, &tracks, train.batch_size)?;
    let mut epochs = Vec::with_capacity(train.epochs);
    let batches_per_epoch = shuffled_batches(&lengths, train.batch_size, &mut ChaCha8Rng::seed_from_u64(0)).len();
    let total_steps = train.epochs * batches_per_epoch;
    let mut step = 0usize;
    for epoch in 0..train.epochs {
        let mut acc = [0.0f64; 4];
        let mut nb = 0usize;
        let mut used = vec![false; config.num_codes];
        let mut pool: Vec<Vec<f32>> = Vec::new();
        for (bi, b) in shuffled_batches(&lengths, train.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let mats: Vec<&Array2<f32>> = b.iter().map(|&i| &tracks[i]).collect();
            let x = nn::batch_tensor(&mats, model.dtype())?;
            let out = model.forward(&x)?;
            let vals = [
                nn::scalar(&out.loss.total)?,
                nn::scalar(&out.loss.recon)?,
                nn::scalar(&out.loss.codebook_term)?,
                nn::scalar(&out.loss.commit_term)?,
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFailure {
                    stage: format!("vqvae:{stream}"),
                    epoch,
                    batch: bi,
                    clips: b
                        .iter()
                        .map(|&i| corpus[i].clip_id.as_str())
                        .collect::<Vec<_>>()
                        .join(", "),
                });
            }
            if train.cosine_decay {
                opt.set_lr(nn::cosine_lr(train.adam.lr, 0.1, step, total_steps));
            }
            opt.backward_step(&out.loss.total)?;
            step += 1;
            out.indices.iter().for_each(|&k| used[k] = true);
            if train.restart_dead_codes {
                pool.extend(latent_columns(&out.z)?);
            }
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += v;
            }
            nb += 1;
        }
        if train.restart_dead_codes && epoch + 1 < train.epochs {
            let dead: Vec<usize> = (0..config.num_codes).filter(|&k| !used[k]).collect();
            model.reset_codes(&dead, &pool, &mut rng)?;
        }
        let nb = nb.max(1) as f64;
        let log = VqEpochLog {
            epoch,
            loss: acc[0] / nb,
            recon: acc[1] / nb,
            codebook: acc[2] / nb,
            commit: acc[3] / nb,
            distinct_codes: used.iter().filter(|&&u| u).count(),
        };
        log::debug!("vqvae:{stream} epoch {epoch}: {log:?}");
        epochs.push(log);
    }
    let (final_recon, final_distinct_codes) = eval_recon(&model, &tracks, train.batch_size)?;
    Ok((
        VqCheckpoint { stream, norm, model },
        VqTrainLog {
            stream,
            initial_recon,
            final_recon,
            final_distinct_codes,
            epochs,
        },
    ))
}

/// Occurrence counts of code indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookUsage {
    pub counts: Vec<u64>,
}

impl CodebookUsage {
    pub fn from_indices<'a>(seqs: impl IntoIterator<Item = &'a IndexSequence>, num_codes: usize) -> Self {
        let mut counts = vec![0u64; num_codes];
        for s in seqs {
            for &k in &s.indices {
                counts[k] += 1;
            }
        }
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn distinct(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// `exp(H)` of the empirical code distribution.
    pub fn perplexity(&self) -> f64 {
        let total = self.total() as f64;
        if total == 0.0 {
            return 0.0;
        }
        let h: f64 = self
            .counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.ln()
            })
            .sum();
        h.exp()
    }
}

pub fn codebook_usage(corpus: &[DyadicClip], ckpt: &VqCheckpoint) -> Result<CodebookUsage> {
    let seqs = corpus
        .iter()
        .map(|c| ckpt.tokenize(c.stream_track(ckpt.stream)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CodebookUsage::from_indices(&seqs, ckpt.num_codes()))
}
