//! Evaluation metrics for generated dyadic motion.
//!
//! Conventions (also listed in `METRICS.md`):
//! - L2 and LVD average the per-frame Euclidean norm over frames.
//! - Gaussian fits use the unbiased (n - 1) covariance.
//! - Variation and CCC use population moments.
//! - Beat consistency smooths the central-difference velocity magnitude with
//!   a 5-tap Gaussian (sigma 1 frame) and takes strict local minima as beats.
//! - TLCC correlates `speaker[t]` with `listener[t + lag]`; a positive lag
//!   means the listener follows.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{detect_onsets, FeatureNorm};
use crate::motion::{DyadicClip, Role};
use crate::nn::{self, Adam, AdamConfig, Linear, ParamStore};
use crate::tensorio::{read_json, write_json, TensorBundle};

fn check_same_shape(what: &str, a: &Array2<f32>, b: &Array2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(what, format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean over columns of the column norms of a row-major difference stream.
fn column_norm_mean(diff: impl Iterator<Item = f64>, cols: usize) -> f64 {
    let mut sums = vec![0.0f64; cols];
    for (i, v) in diff.enumerate() {
        sums[i % cols] += v * v;
    }
    sums.iter().map(|s| s.sqrt()).sum::<f64>() / cols as f64
}

/// Mean over frames of `||pred_t - gt_t||`.
pub fn l2_face(pred: &Array2<f32>, gt: &Array2<f32>) -> Result<f64> {
    check_same_shape("l2", pred, gt)?;
    if pred.ncols() == 0 {
        return Err(Error::InvalidInput("l2 on empty track".into()));
    }
    let diff = pred.iter().zip(gt.iter()).map(|(&p, &g)| p as f64 - g as f64);
    Ok(column_norm_mean(diff, pred.ncols()))
}

/// Mean over frames of the velocity difference norm, with
/// `v_t = x_{t+1} - x_t`.
pub fn lvd(pred: &Array2<f32>, gt: &Array2<f32>) -> Result<f64> {
    check_same_shape("lvd", pred, gt)?;
    let t = pred.ncols();
    if t < 2 {
        return Err(Error::InvalidInput(format!("lvd needs at least 2 frames, got {t}")));
    }
    let mut total = 0.0;
    for f in 0..t - 1 {
        let mut sq = 0.0f64;
        for r in 0..pred.nrows() {
            let vp = pred[[r, f + 1]] as f64 - pred[[r, f]] as f64;
            let vg = gt[[r, f + 1]] as f64 - gt[[r, f]] as f64;
            sq += (vp - vg).powi(2);
        }
        total += sq.sqrt();
    }
    Ok(total / (t - 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `samples` (`n x d`).
pub fn fit_gaussian(samples: &Array2<f64>) -> Result<GaussianStats> {
    let (n, d) = samples.dim();
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 samples, got {n}")));
    }
    let mean = samples.mean_axis(Axis(0)).expect("n >= 2");
    let centered = samples - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let mut cov = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats {
        mean: DVector::from_iterator(d, mean.iter().copied()),
        cov,
        n,
    })
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lam = eig.eigenvalues.map(|l| {
        if l < -1e-6 {
            log::warn!("{what}: clipping negative eigenvalue {l:.3e}");
        }
        l.max(0.0).sqrt()
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// The trace of the product root is taken from the symmetric matrix
/// `S_a^{1/2} S_b S_a^{1/2}`, which has the same eigenvalues.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet", format!("dimension {} vs {}", a.dim(), b.dim())));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov, "frechet sqrt(cov_a)");
    let inner = &ra * &b.cov * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut tr_root = 0.0;
    for &l in eig.eigenvalues.iter() {
        if l < -1e-6 {
            log::warn!("frechet: clipping negative eigenvalue {l:.3e}");
        }
        tr_root += l.max(0.0).sqrt();
    }
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_root;
    Ok(d.max(0.0))
}

/// Smoothed per-frame speed: central differences (one-sided at the ends),
/// then a normalized 5-tap Gaussian with sigma of one frame.
pub fn smoothed_speed(motion: &Array2<f32>) -> Vec<f64> {
    let t = motion.ncols();
    let speed: Vec<f64> = (0..t)
        .map(|f| {
            let (a, b, scale) = match (f, t) {
                (_, 1) => (0, 0, 1.0),
                (0, _) => (0, 1, 1.0),
                (f, t) if f == t - 1 => (f - 1, f, 1.0),
                (f, _) => (f - 1, f + 1, 0.5),
            };
            motion
                .column(b)
                .iter()
                .zip(motion.column(a).iter())
                .map(|(&x, &y)| ((x as f64 - y as f64) * scale).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let kernel: Vec<f64> = (-2i32..=2).map(|k| (-(k * k) as f64 / 2.0).exp()).collect();
    (0..t)
        .map(|f| {
            let (mut acc, mut w) = (0.0, 0.0);
            for (j, &kw) in kernel.iter().enumerate() {
                let idx = f as i64 + j as i64 - 2;
                if (0..t as i64).contains(&idx) {
                    acc += kw * speed[idx as usize];
                    w += kw;
                }
            }
            acc / w
        })
        .collect()
}

/// Motion beats: interior frames where the smoothed speed has a strict local
/// minimum (the first frame of a flat bottom counts).
pub fn motion_beats(motion: &Array2<f32>) -> Vec<usize> {
    let s = smoothed_speed(motion);
    let mut beats = Vec::new();
    let mut f = 1;
    while f + 1 < s.len() {
        if s[f] < s[f - 1] {
            let mut g = f;
            while g + 1 < s.len() && s[g + 1] == s[g] {
                g += 1;
            }
            if g + 1 < s.len() && s[g + 1] > s[g] {
                beats.push(f);
            }
            f = g + 1;
        } else {
            f += 1;
        }
    }
    beats
}

/// Mean over onsets of `exp(-d^2 / (2 sigma^2))`, `d` the distance in frames
/// to the nearest beat. An onset with no beat at all scores 0.
pub fn beat_score(beats: &[usize], onsets: &[usize], sigma_frames: f64) -> Result<f64> {
    if onsets.is_empty() {
        return Err(Error::InvalidInput("beat consistency needs at least one onset".into()));
    }
    if sigma_frames.is_nan() || sigma_frames <= 0.0 {
        return Err(Error::Config(format!(
            "beat sigma must be positive, got {sigma_frames}"
        )));
    }
    let total: f64 = onsets
        .iter()
        .map(|&o| {
            beats
                .iter()
                .map(|&b| (o as f64 - b as f64).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
        .map(|d2| {
            if d2.is_finite() {
                (-d2 / (2.0 * sigma_frames * sigma_frames)).exp()
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / onsets.len() as f64)
}

/// Beat consistency of one motion part against audio onsets; `sigma_s` is
/// converted to frames with `fps`.
pub fn beat_consistency(motion: &Array2<f32>, onsets: &[usize], sigma_s: f64, fps: f64) -> Result<f64> {
    if motion.ncols() < 3 {
        return Err(Error::InvalidInput(format!(
            "beat consistency needs at least 3 frames, got {}",
            motion.ncols()
        )));
    }
    beat_score(&motion_beats(motion), onsets, sigma_s * fps)
}

/// Per-channel population variance over time, averaged over channels, then
/// over clips.
pub fn variation<'a>(clips: impl IntoIterator<Item = &'a Array2<f32>>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for m in clips {
        if m.ncols() < 2 {
            return Err(Error::InvalidInput(format!(
                "variation needs at least 2 frames, got {}",
                m.ncols()
            )));
        }
        let per_channel: f64 = m
            .rows()
            .into_iter()
            .map(|r| {
                let mean = r.iter().map(|&v| v as f64).sum::<f64>() / r.len() as f64;
                r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / r.len() as f64
            })
            .sum();
        sum += per_channel / m.nrows() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("variation of an empty set".into()));
    }
    Ok(sum / n as f64)
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Concordance correlation with population moments. Two constant series
/// give 1 when equal and 0 otherwise.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "ccc needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (mx, vx) = moments(x);
    let (my, vy) = moments(y);
    let denom = vx + vy + (mx - my).powi(2);
    if denom == 0.0 {
        return Ok(if vx == 0.0 && vy == 0.0 && mx == my { 1.0 } else { 0.0 });
    }
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64;
    Ok((2.0 * cov / denom).clamp(-1.0, 1.0))
}

/// Mean of per-channel CCC over matched rows.
pub fn ccc_multichannel(pred: &Array2<f32>, gt: &Array2<f32>) -> Result<f64> {
    check_same_shape("ccc", pred, gt)?;
    let mut total = 0.0;
    for (p, g) in pred.rows().into_iter().zip(gt.rows()) {
        let p: Vec<f64> = p.iter().map(|&v| v as f64).collect();
        let g: Vec<f64> = g.iter().map(|&v| v as f64).collect();
        total += ccc(&p, &g)?;
    }
    Ok(total / pred.nrows().max(1) as f64)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, vx) = moments(x);
    let (my, vy) = moments(y);
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64;
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlccResult {
    /// Mean of `|lag*|` over non-constant channels.
    pub lag: f64,
    /// Mean correlation at each channel's `lag*`.
    pub peak_corr: f64,
    /// Signed `lag*` per channel; `None` for skipped constant channels.
    pub channel_lags: Vec<Option<i64>>,
}

/// Pearson correlation of `speaker[t]` against `listener[t + lag]` for
/// `lag` in `-max_lag..=max_lag`.
pub fn lagged_correlations(speaker: &[f64], listener: &[f64], max_lag: usize) -> Vec<(i64, f64)> {
    let t = speaker.len();
    (-(max_lag as i64)..=max_lag as i64)
        .map(|lag| {
            let (s, l) = if lag >= 0 {
                let k = lag as usize;
                (&speaker[..t - k], &listener[k..])
            } else {
                let k = (-lag) as usize;
                (&speaker[k..], &listener[..t - k])
            };
            (lag, pearson(s, l))
        })
        .collect()
}

pub fn tlcc(speaker: &Array2<f32>, listener: &Array2<f32>, max_lag: usize) -> Result<TlccResult> {
    check_same_shape("tlcc", speaker, listener)?;
    let t = speaker.ncols();
    if t <= 2 * max_lag {
        return Err(Error::InvalidInput(format!(
            "tlcc needs T > 2 * max_lag ({t} <= {})",
            2 * max_lag
        )));
    }
    let mut lags = Vec::with_capacity(speaker.nrows());
    let (mut lag_sum, mut corr_sum, mut used) = (0.0, 0.0, 0usize);
    for (s, l) in speaker.rows().into_iter().zip(listener.rows()) {
        let s: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        let l: Vec<f64> = l.iter().map(|&v| v as f64).collect();
        if moments(&s).1 == 0.0 || moments(&l).1 == 0.0 {
            lags.push(None);
            continue;
        }
        let mut best = (0i64, 0.0f64);
        let mut best_abs = -1.0;
        for (lag, c) in lagged_correlations(&s, &l, max_lag) {
            let better = c.abs() > best_abs || (c.abs() == best_abs && lag.abs() < best.0.abs());
            if better {
                best = (lag, c);
                best_abs = c.abs();
            }
        }
        lags.push(Some(best.0));
        lag_sum += best.0.unsigned_abs() as f64;
        corr_sum += best.1;
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidInput("tlcc: every channel is constant".into()));
    }
    Ok(TlccResult {
        lag: lag_sum / used as f64,
        peak_corr: corr_sum / used as f64,
        channel_lags: lags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FgdConfig {
    /// Frames per embedded window.
    pub window: usize,
    pub stride: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for FgdConfig {
    fn default() -> Self {
        Self {
            window: 8,
            stride: 4,
            latent_dim: 32,
            hidden: 256,
            epochs: 30,
            batch_size: 64,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        }
    }
}

/// Bottleneck autoencoder over flattened motion windows whose encoder
/// provides the embedding space for FGD.
pub struct FgdModel {
    config: FgdConfig,
    input_dim: usize,
    norm: FeatureNorm,
    params: ParamStore,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FgdMeta {
    kind: String,
    input_dim: usize,
    config: FgdConfig,
}

impl FgdModel {
    pub fn new(config: &FgdConfig, norm: FeatureNorm, seed: u64) -> Result<Self> {
        if config.window == 0 || config.stride == 0 || config.latent_dim == 0 || config.hidden == 0 {
            return Err(Error::Config(
                "fgd window, stride, latent_dim and hidden must be positive".into(),
            ));
        }
        let input_dim = norm.dim();
        let flat = input_dim * config.window;
        let mut params = ParamStore::new(seed, DType::F32);
        let enc1 = Linear::new(&mut params, "enc1", flat, config.hidden)?;
        let enc2 = Linear::new(&mut params, "enc2", config.hidden, config.latent_dim)?;
        let dec1 = Linear::new(&mut params, "dec1", config.latent_dim, config.hidden)?;
        let dec2 = Linear::new(&mut params, "dec2", config.hidden, flat)?;
        Ok(Self {
            config: config.clone(),
            input_dim,
            norm,
            params,
            enc1,
            enc2,
            dec1,
            dec2,
        })
    }

    pub fn config(&self) -> &FgdConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Normalized, flattened (frame-major) windows of one track.
    fn windows(&self, track: &Array2<f32>) -> Result<Vec<Vec<f32>>> {
        if track.nrows() != self.input_dim {
            return Err(Error::shape(
                "fgd input",
                format!("{} channels, encoder expects {}", track.nrows(), self.input_dim),
            ));
        }
        let (w, s) = (self.config.window, self.config.stride);
        if track.ncols() < w {
            return Err(Error::InvalidInput(format!(
                "track of {} frames shorter than fgd window {w}",
                track.ncols()
            )));
        }
        let x = self.norm.normalize(track);
        Ok((0..=(track.ncols() - w))
            .step_by(s)
            .map(|start| {
                let mut v = Vec::with_capacity(w * self.input_dim);
                for f in start..start + w {
                    v.extend(x.column(f).iter());
                }
                v
            })
            .collect())
    }

    fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.enc2.forward(&self.enc1.forward(x)?.silu()?)
    }

    fn reconstruct_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encode_tensor(x)?;
        self.dec2.forward(&self.dec1.forward(&z)?.silu()?)
    }

    /// Window embeddings of every track, one row per window.
    pub fn embed<'a>(&self, tracks: impl IntoIterator<Item = &'a Array2<f32>>) -> Result<Array2<f64>> {
        let mut rows = Vec::new();
        for t in tracks {
            rows.extend(self.windows(t)?);
        }
        if rows.is_empty() {
            return Err(Error::InvalidInput("no tracks to embed".into()));
        }
        let n = rows.len();
        let flat = self.input_dim * self.config.window;
        let x = Tensor::from_vec(rows.concat(), (n, flat), &Device::Cpu)?;
        let z = self.encode_tensor(&x)?.to_dtype(DType::F64)?;
        let v = z.flatten_all()?.to_vec1::<f64>()?;
        Ok(Array2::from_shape_vec((n, self.config.latent_dim), v).expect("encoder output shape"))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bundle = TensorBundle::new();
        self.params.store(&mut bundle, "model")?;
        self.norm.store(&mut bundle, "norm")?;
        bundle.save(dir)?;
        write_json(
            dir.join("config.json"),
            &FgdMeta {
                kind: "fgd".into(),
                input_dim: self.input_dim,
                config: self.config.clone(),
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: FgdMeta = read_json(dir.join("config.json"))?;
        if meta.kind != "fgd" {
            return Err(Error::InvalidInput(format!(
                "{}: expected an fgd checkpoint, found {}",
                dir.display(),
                meta.kind
            )));
        }
        let bundle = TensorBundle::load(dir)?;
        let norm = FeatureNorm::load(&bundle, "norm")?;
        if norm.dim() != meta.input_dim {
            return Err(Error::shape("fgd norm", "dimension disagrees with config"));
        }
        let model = Self::new(&meta.config, norm, 0)?;
        model.params.load(&bundle, "model")?;
        Ok(model)
    }
}

/// Trains the FGD autoencoder on reference tracks; returns the model and the
/// mean reconstruction loss per epoch.
pub fn train_fgd_model<'a>(
    tracks: impl IntoIterator<Item = &'a Array2<f32>>,
    config: &FgdConfig,
    seed: u64,
) -> Result<(FgdModel, Vec<f64>)> {
    let tracks: Vec<&Array2<f32>> = tracks.into_iter().collect();
    let norm = FeatureNorm::fit(tracks.iter().copied())?;
    let model = FgdModel::new(config, norm, seed)?;
    let mut rows = Vec::new();
    for t in &tracks {
        rows.extend(model.windows(t)?);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("no windows to train the fgd model on".into()));
    }
    let flat = model.input_dim * config.window;
    let mut opt = Adam::new(model.params.vars(), config.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf6d);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut nb) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(config.batch_size.max(1)).enumerate() {
            let data: Vec<f32> = chunk.iter().flat_map(|&i| rows[i].iter().copied()).collect();
            let x = Tensor::from_vec(data, (chunk.len(), flat), &Device::Cpu)?;
            let loss = (model.reconstruct_tensor(&x)? - &x)?.sqr()?.mean_all()?;
            let v = nn::scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::NumericFailure {
                    stage: "fgd".into(),
                    epoch,
                    batch: bi,
                    clips: format!("{} windows", chunk.len()),
                });
            }
            opt.backward_step(&loss)?;
            sum += v;
            nb += 1;
        }
        curve.push(sum / nb as f64);
    }
    Ok((model, curve))
}

/// Fréchet distance between Gaussian fits of predicted and reference
/// window embeddings.
pub fn fgd<'a>(
    model: &FgdModel,
    pred: impl IntoIterator<Item = &'a Array2<f32>>,
    reference: impl IntoIterator<Item = &'a Array2<f32>>,
) -> Result<f64> {
    let a = fit_gaussian(&model.embed(pred)?)?;
    let b = fit_gaussian(&model.embed(reference)?)?;
    frechet_distance(&a, &b)
}

/// The two FGD embedding models: speaker pose (body + hand) and listener
/// full motion (face + body + hand).
pub struct FgdSuite {
    pub speaker: FgdModel,
    pub listener: FgdModel,
}

impl FgdSuite {
    pub fn train(reference: &[DyadicClip], config: &FgdConfig, seed: u64) -> Result<(Self, Vec<f64>, Vec<f64>)> {
        let sp: Vec<Array2<f32>> = reference.iter().map(|c| c.speaker.pose()).collect();
        let li: Vec<Array2<f32>> = reference.iter().map(|c| c.listener.full()).collect();
        let (speaker, sc) = train_fgd_model(&sp, config, seed)?;
        let (listener, lc) = train_fgd_model(&li, config, seed.wrapping_add(1))?;
        Ok((Self { speaker, listener }, sc, lc))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.speaker.save(dir.as_ref().join("speaker"))?;
        self.listener.save(dir.as_ref().join("listener"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            speaker: FgdModel::load(dir.as_ref().join("speaker"))?,
            listener: FgdModel::load(dir.as_ref().join("listener"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Beat consistency tolerance in seconds.
    pub bc_sigma_s: f64,
    pub tlcc_max_lag: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bc_sigma_s: 0.1,
            tlcc_max_lag: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub speaker_face_l2: f64,
    pub speaker_face_lvd: f64,
    pub speaker_bc: Option<f64>,
    pub listener_bc: Option<f64>,
    pub speaker_variation: f64,
    pub listener_variation: f64,
    pub listener_ccc: f64,
    pub tlcc_pred_lag: f64,
    pub tlcc_ref_lag: f64,
}

impl ClipMetrics {
    pub const CSV_HEADER: &'static str = "clip_id,speaker_face_l2,speaker_face_lvd,speaker_bc,listener_bc,\
speaker_variation,listener_variation,listener_ccc,tlcc_pred_lag,tlcc_ref_lag";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.clip_id,
            self.speaker_face_l2,
            self.speaker_face_lvd,
            opt(self.speaker_bc),
            opt(self.listener_bc),
            self.speaker_variation,
            self.listener_variation,
            self.listener_ccc,
            self.tlcc_pred_lag,
            self.tlcc_ref_lag
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerMetrics {
    pub fgd: f64,
    pub bc: f64,
    pub variation: f64,
    /// Face expression distance to ground truth.
    pub l2: f64,
    pub lvd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListenerMetrics {
    pub fgd: f64,
    pub bc: f64,
    pub variation: f64,
    pub ccc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadMetrics {
    /// `|pred lag - reference lag|` in frames, averaged over clips.
    pub tlcc: f64,
    pub tlcc_pred_lag: f64,
    pub tlcc_ref_lag: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clips: usize,
    pub config_hash: String,
    pub config: MetricConfig,
    pub speaker: SpeakerMetrics,
    pub listener: ListenerMetrics,
    pub dyad: DyadMetrics,
}

impl MetricReport {
    /// Flat `name -> value` view for the seven metric families.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("speaker.fgd", self.speaker.fgd),
            ("speaker.bc", self.speaker.bc),
            ("speaker.variation", self.speaker.variation),
            ("speaker.l2", self.speaker.l2),
            ("speaker.lvd", self.speaker.lvd),
            ("listener.fgd", self.listener.fgd),
            ("listener.bc", self.listener.bc),
            ("listener.variation", self.listener.variation),
            ("listener.ccc", self.listener.ccc),
            ("dyad.tlcc", self.dyad.tlcc),
        ]
    }
}

/// Onsets stored with the clip, or detected from its energy track.
pub fn clip_onsets(clip: &DyadicClip) -> Vec<usize> {
    match &clip.audio_onsets {
        Some(o) => o.clone(),
        None => {
            let e: Vec<f32> = clip.features.energy().to_vec();
            detect_onsets(&e)
        }
    }
}

fn config_hash(config: &MetricConfig, fgd: &FgdSuite) -> String {
    let text = serde_json::json!({
        "metrics": config,
        "fgd_speaker": fgd.speaker.config(),
        "fgd_listener": fgd.listener.config(),
    })
    .to_string();
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Scores predicted clips against references matched by `clip_id`.
pub fn evaluate(
    pred: &[DyadicClip],
    reference: &[DyadicClip],
    fgd_models: &FgdSuite,
    config: &MetricConfig,
) -> Result<(MetricReport, Vec<ClipMetrics>)> {
    if pred.is_empty() {
        return Err(Error::InvalidInput("no predicted clips to evaluate".into()));
    }
    let mut pairs = Vec::with_capacity(pred.len());
    for p in pred {
        let r = reference
            .iter()
            .find(|r| r.clip_id == p.clip_id)
            .ok_or_else(|| Error::InvalidInput(format!("no reference clip with id {}", p.clip_id)))?;
        if r.num_frames() != p.num_frames() {
            return Err(Error::Consistency {
                clip_id: p.clip_id.clone(),
                tracks: format!("prediction has {} frames, reference {}", p.num_frames(), r.num_frames()),
            });
        }
        pairs.push((p, r));
    }

    let mut rows = Vec::with_capacity(pairs.len());
    for (p, r) in &pairs {
        let onsets = clip_onsets(r);
        let bc = |m: &Array2<f32>| -> Result<Option<f64>> {
            if onsets.is_empty() {
                Ok(None)
            } else {
                beat_consistency(m, &onsets, config.bc_sigma_s, r.fps).map(Some)
            }
        };
        let s_pose = p.speaker.pose();
        let l_full = p.listener.full();
        rows.push(ClipMetrics {
            clip_id: p.clip_id.clone(),
            speaker_face_l2: l2_face(&p.speaker.face, &r.speaker.face)?,
            speaker_face_lvd: lvd(&p.speaker.face, &r.speaker.face)?,
            speaker_bc: bc(&s_pose)?,
            listener_bc: bc(&p.listener.pose())?,
            speaker_variation: variation([&s_pose])?,
            listener_variation: variation([&l_full])?,
            listener_ccc: ccc_multichannel(&l_full, &r.listener.full())?,
            tlcc_pred_lag: tlcc(&p.speaker.full(), &l_full, config.tlcc_max_lag)?.lag,
            tlcc_ref_lag: tlcc(&r.speaker.full(), &r.listener.full(), config.tlcc_max_lag)?.lag,
        });
    }

    let pose = |cs: &[&DyadicClip], role: Role| -> Vec<Array2<f32>> {
        cs.iter()
            .map(|c| match role {
                Role::Speaker => c.speaker.pose(),
                Role::Listener => c.listener.full(),
            })
            .collect()
    };
    let preds: Vec<&DyadicClip> = pairs.iter().map(|(p, _)| *p).collect();
    let refs: Vec<&DyadicClip> = pairs.iter().map(|(_, r)| *r).collect();
    let speaker_fgd = fgd(
        &fgd_models.speaker,
        &pose(&preds, Role::Speaker),
        &pose(&refs, Role::Speaker),
    )?;
    let listener_fgd = fgd(
        &fgd_models.listener,
        &pose(&preds, Role::Listener),
        &pose(&refs, Role::Listener),
    )?;

    let report = MetricReport {
        clips: rows.len(),
        config_hash: config_hash(config, fgd_models),
        config: config.clone(),
        speaker: SpeakerMetrics {
            fgd: speaker_fgd,
            bc: mean(rows.iter().filter_map(|r| r.speaker_bc)),
            variation: mean(rows.iter().map(|r| r.speaker_variation)),
            l2: mean(rows.iter().map(|r| r.speaker_face_l2)),
            lvd: mean(rows.iter().map(|r| r.speaker_face_lvd)),
        },
        listener: ListenerMetrics {
            fgd: listener_fgd,
            bc: mean(rows.iter().filter_map(|r| r.listener_bc)),
            variation: mean(rows.iter().map(|r| r.listener_variation)),
            ccc: mean(rows.iter().map(|r| r.listener_ccc)),
        },
        dyad: DyadMetrics {
            tlcc: mean(rows.iter().map(|r| (r.tlcc_pred_lag - r.tlcc_ref_lag).abs())),
            tlcc_pred_lag: mean(rows.iter().map(|r| r.tlcc_pred_lag)),
            tlcc_ref_lag: mean(rows.iter().map(|r| r.tlcc_ref_lag)),
        },
    };
    if let Some((name, v)) = report.values().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "metric {name} is not finite ({v}); are audio onsets missing for every clip?"
        )));
    }
    Ok((report, rows))
}
