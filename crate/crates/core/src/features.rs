//! Verbal conditioning features.
//!
//! Acoustic frames are 80 log-mel filterbank energies per motion frame. The
//! decoupled track stacks a per-frame energy, a pitch estimate and a 128-dim
//! style projection. Text and phoneme embeddings come from pretrained
//! encoders upstream and are ingested from `MTSR` files. Two assemblies feed
//! the models: motion features `[decoupled; text]` (898 rows) and face
//! features `[decoupled; phoneme]` (642 rows).

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensorio::{read_track, TensorBlob, TensorBundle};

pub const MFCC_DIM: usize = 80;
pub const STYLE_DIM: usize = 128;
pub const DECOUPLED_DIM: usize = 2 + STYLE_DIM;
pub const TEXT_DIM: usize = 768;
pub const PHONEME_DIM: usize = 512;
pub const MOTION_FEATURE_DIM: usize = DECOUPLED_DIM + TEXT_DIM;
pub const FACE_FEATURE_DIM: usize = DECOUPLED_DIM + PHONEME_DIM;

pub const LOG_FLOOR: f64 = 1e-10;
pub const MIN_SAMPLE_RATE: u32 = 8000;
const PITCH_MIN_HZ: f64 = 50.0;
const PITCH_MAX_HZ: f64 = 1000.0;

/// One-hot speaker identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityCode {
    speaker_id: usize,
    num_identities: usize,
}

impl IdentityCode {
    pub fn new(speaker_id: usize, num_identities: usize) -> Result<Self> {
        if speaker_id >= num_identities {
            return Err(Error::InvalidInput(format!(
                "speaker id {speaker_id} outside [0, {num_identities})"
            )));
        }
        Ok(Self {
            speaker_id,
            num_identities,
        })
    }

    pub fn speaker_id(&self) -> usize {
        self.speaker_id
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn onehot(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.num_identities];
        v[self.speaker_id] = 1.0;
        v
    }
}

/// Per-frame verbal features, every track stored `(dims, frames)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub mfcc: Array2<f32>,
    pub decoupled: Array2<f32>,
    pub text: Array2<f32>,
    pub phoneme: Array2<f32>,
    pub fps: f64,
    /// Set when the text track was absent and zero-filled.
    pub text_missing: bool,
    /// Set when the phoneme track was absent and zero-filled.
    pub phoneme_missing: bool,
}

impl FeatureSequence {
    /// Builds a sequence, zero-filling absent text/phoneme tracks.
    pub fn new(
        mfcc: Array2<f32>,
        decoupled: Array2<f32>,
        text: Option<Array2<f32>>,
        phoneme: Option<Array2<f32>>,
        fps: f64,
    ) -> Result<Self> {
        let t = mfcc.ncols();
        check_rows("mfcc", &mfcc, MFCC_DIM)?;
        check_rows("decoupled", &decoupled, DECOUPLED_DIM)?;
        if let Some(m) = &text {
            check_rows("text", m, TEXT_DIM)?;
        }
        if let Some(m) = &phoneme {
            check_rows("phoneme", m, PHONEME_DIM)?;
        }
        let seq = Self {
            text_missing: text.is_none(),
            phoneme_missing: phoneme.is_none(),
            text: text.unwrap_or_else(|| Array2::zeros((TEXT_DIM, t))),
            phoneme: phoneme.unwrap_or_else(|| Array2::zeros((PHONEME_DIM, t))),
            mfcc,
            decoupled,
            fps,
        };
        if let Some((name, n)) = seq.track_lengths().into_iter().find(|&(_, n)| n != t) {
            return Err(Error::shape(name, format!("{n} frames, mfcc has {t}")));
        }
        if t == 0 {
            return Err(Error::shape("mfcc", "zero frames"));
        }
        Ok(seq)
    }

    pub fn num_frames(&self) -> usize {
        self.mfcc.ncols()
    }

    pub fn track_lengths(&self) -> [(&'static str, usize); 4] {
        [
            ("mfcc", self.mfcc.ncols()),
            ("decoupled", self.decoupled.ncols()),
            ("text", self.text.ncols()),
            ("phoneme", self.phoneme.ncols()),
        ]
    }

    pub fn energy(&self) -> ndarray::ArrayView1<'_, f32> {
        self.decoupled.row(0)
    }

    pub fn pitch(&self) -> ndarray::ArrayView1<'_, f32> {
        self.decoupled.row(1)
    }
}

fn check_rows(track: &str, m: &Array2<f32>, rows: usize) -> Result<()> {
    if m.nrows() != rows {
        return Err(Error::shape(
            track,
            format!("expected {rows} feature rows, found {}", m.nrows()),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledFeatures {
    /// `[decoupled; text]`, 898 x T.
    pub motion_features: Array2<f32>,
    /// `[decoupled; phoneme]`, 642 x T.
    pub face_features: Array2<f32>,
}

pub fn assemble(seq: &FeatureSequence) -> AssembledFeatures {
    let stack = |lower: &Array2<f32>| {
        ndarray::concatenate(Axis(0), &[seq.decoupled.view(), lower.view()]).expect("tracks validated to share T")
    };
    AssembledFeatures {
        motion_features: stack(&seq.text),
        face_features: stack(&seq.phoneme),
    }
}

/// Mean-pools `(d, T)` features over non-overlapping windows of `w` frames.
pub fn pool_to_latent_rate(features: &Array2<f32>, w: usize) -> Result<Array2<f32>> {
    let t = features.ncols();
    if w == 0 || t == 0 || !t.is_multiple_of(w) {
        return Err(Error::InvalidInput(format!(
            "window {w} does not divide {t} frames; crop the clip to a multiple of {w}"
        )));
    }
    let steps = t / w;
    let mut out = Array2::zeros((features.nrows(), steps));
    for i in 0..steps {
        let block = features.slice(s![.., i * w..(i + 1) * w]);
        out.column_mut(i)
            .assign(&block.mean_axis(Axis(1)).expect("non-empty window"));
    }
    Ok(out)
}

/// Files backing one clip's feature tracks, each stored time-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturePaths {
    pub mfcc: PathBuf,
    pub decoupled: PathBuf,
    pub text: Option<PathBuf>,
    pub phoneme: Option<PathBuf>,
}

pub fn ingest_features(paths: &FeaturePaths, fps: f64) -> Result<FeatureSequence> {
    let load = |p: &Path, name: &str, rows: usize| -> Result<Array2<f32>> {
        let m = read_track(p, name)?;
        check_rows(name, &m, rows)?;
        Ok(m)
    };
    let mfcc = load(&paths.mfcc, "mfcc", MFCC_DIM)?;
    let decoupled = load(&paths.decoupled, "decoupled", DECOUPLED_DIM)?;
    let text = paths.text.as_deref().map(|p| load(p, "text", TEXT_DIM)).transpose()?;
    let phoneme = paths
        .phoneme
        .as_deref()
        .map(|p| load(p, "phoneme", PHONEME_DIM))
        .transpose()?;
    if text.is_none() {
        log::warn!("text track absent; zero-filling {TEXT_DIM} rows");
    }
    if phoneme.is_none() {
        log::warn!("phoneme track absent; zero-filling {PHONEME_DIM} rows");
    }
    FeatureSequence::new(mfcc, decoupled, text, phoneme, fps)
}

/// Reads 16-bit PCM WAV, keeping the first channel, scaled to [-1, 1).
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f32>, u32)> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::InvalidInput(format!(
            "{}: only 16-bit PCM WAV is supported",
            path.display()
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let samples = reader
        .into_samples::<i16>()
        .step_by(channels)
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    Ok((samples, spec.sample_rate))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other}", path.display())),
    }
}

/// Writes mono 16-bit PCM; samples are clamped to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &x in samples {
        let v = (x.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

/// Analysis framing tied to the motion frame rate: one analysis window per
/// motion frame, hop `sr / fps`, window twice the hop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLayout {
    pub sample_rate: u32,
    pub fps: f64,
    pub hop: f64,
    pub win_len: usize,
    pub n_fft: usize,
    pub frames: usize,
}

impl FrameLayout {
    pub fn new(num_samples: usize, sample_rate: u32, fps: f64) -> Result<Self> {
        if num_samples == 0 {
            return Err(Error::InvalidInput("empty waveform".into()));
        }
        if sample_rate < MIN_SAMPLE_RATE {
            return Err(Error::InvalidInput(format!(
                "sample rate {sample_rate} below {MIN_SAMPLE_RATE}"
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidInput(format!("invalid frame rate {fps}")));
        }
        let hop = sample_rate as f64 / fps;
        let frames = (num_samples as f64 * fps / sample_rate as f64).floor() as usize;
        if frames == 0 {
            return Err(Error::InvalidInput(format!(
                "waveform of {num_samples} samples is shorter than one hop ({hop:.1} samples)"
            )));
        }
        let win_len = 2 * (hop.round() as usize).max(1);
        Ok(Self {
            sample_rate,
            fps,
            hop,
            win_len,
            n_fft: win_len.next_power_of_two(),
            frames,
        })
    }

    pub fn frame_start(&self, t: usize) -> usize {
        (t as f64 * self.hop).round() as usize
    }

    /// Copies frame `t` into `buf`, zero-padding past the end of the signal.
    fn fill_frame(&self, samples: &[f32], t: usize, buf: &mut [f64]) {
        let start = self.frame_start(t);
        for (i, b) in buf.iter_mut().enumerate().take(self.win_len) {
            *b = samples.get(start + i).copied().unwrap_or(0.0) as f64;
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the mel scale from 0 Hz to Nyquist,
/// unit peak height.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    sample_rate: u32,
    n_fft: usize,
    /// `(n_mels, n_fft / 2 + 1)`.
    weights: Array2<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = Array2::zeros((n_mels, bins));
        for k in 0..n_mels {
            let (l, c, r) = (edges[k], edges[k + 1], edges[k + 2]);
            for b in 0..bins {
                let f = b as f64 * bin_hz;
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                weights[[k, b]] = w;
            }
        }
        Self {
            sample_rate,
            n_fft,
            weights,
            centers_hz: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn n_mels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn center_hz(&self, k: usize) -> f64 {
        self.centers_hz[k]
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// 80 log-mel energies per motion frame, `(80, T)` with `T = floor(duration * fps)`.
pub fn compute_mfcc(samples: &[f32], sample_rate: u32, fps: f64) -> Result<Array2<f32>> {
    let layout = FrameLayout::new(samples.len(), sample_rate, fps)?;
    let bank = MelFilterbank::new(sample_rate, layout.n_fft, MFCC_DIM);
    let window = hann(layout.win_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(layout.n_fft);
    let mut frame = vec![0.0; layout.win_len];
    let mut spec = vec![Complex::new(0.0, 0.0); layout.n_fft];
    let mut power = vec![0.0; layout.n_fft / 2 + 1];
    let mut out = Array2::zeros((MFCC_DIM, layout.frames));
    for t in 0..layout.frames {
        layout.fill_frame(samples, t, &mut frame);
        spec.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, (x, w)) in frame.iter().zip(&window).enumerate() {
            spec[i] = Complex::new(x * w, 0.0);
        }
        fft.process(&mut spec);
        for (p, c) in power.iter_mut().zip(&spec) {
            *p = c.norm_sqr();
        }
        for (k, e) in bank.apply(&power).into_iter().enumerate() {
            out[[k, t]] = e.max(LOG_FLOOR).ln() as f32;
        }
    }
    Ok(out)
}

fn frame_rms(samples: &[f32], layout: &FrameLayout, t: usize) -> f64 {
    let start = layout.frame_start(t).min(samples.len());
    let end = (start + layout.win_len).min(samples.len());
    let seg = &samples[start..end];
    if seg.is_empty() {
        return 0.0;
    }
    let sum_sq: f64 = seg.iter().map(|&x| (x as f64) * (x as f64)).sum();
    (sum_sq / seg.len() as f64).sqrt()
}

/// Dominant frequency of one frame from its autocorrelation, in Hz, or
/// `None` for a silent frame. The shortest lag whose autocorrelation peak
/// reaches 90% of the strongest peak wins, which keeps octave errors down.
fn frame_pitch_hz(frame: &[f64], sample_rate: u32, fft_len: usize) -> Option<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(fft_len);
    let inv = planner.plan_fft_inverse(fft_len);
    let mut buf: Vec<Complex<f64>> = (0..fft_len)
        .map(|i| Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    fwd.process(&mut buf);
    buf.iter_mut().for_each(|c| *c = Complex::new(c.norm_sqr(), 0.0));
    inv.process(&mut buf);
    let r: Vec<f64> = buf.iter().map(|c| c.re).collect();
    if r[0] <= 1e-12 * fft_len as f64 {
        return None;
    }
    let sr = sample_rate as f64;
    let min_lag = (sr / PITCH_MAX_HZ).floor().max(1.0) as usize;
    let max_lag = ((sr / PITCH_MIN_HZ).ceil() as usize).min(frame.len() / 2);
    if max_lag <= min_lag + 1 {
        return None;
    }
    let peaks: Vec<usize> = (min_lag.max(1)..max_lag)
        .filter(|&l| r[l] > 0.0 && r[l] >= r[l - 1] && r[l] > r[l + 1])
        .collect();
    let best = peaks.iter().map(|&l| r[l]).fold(f64::NEG_INFINITY, f64::max);
    let lag = *peaks.iter().find(|&&l| r[l] >= 0.9 * best)?;
    let denom = r[lag - 1] - 2.0 * r[lag] + r[lag + 1];
    let shift = if denom.abs() > 0.0 {
        (0.5 * (r[lag - 1] - r[lag + 1]) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    Some(sr / (lag as f64 + shift))
}

fn style_projection(seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (MFCC_DIM as f64).sqrt();
    Array2::from_shape_fn((STYLE_DIM, MFCC_DIM), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

/// Deterministic stand-in for a learned energy/pitch/style decoupler.
///
/// Row 0 is frame RMS energy, row 1 the autocorrelation pitch estimate
/// mapped linearly from [50, 1000] Hz onto [0, 1] (0 for silence), rows
/// 2..130 a fixed seeded projection of the log-mel column.
pub fn synth_decoupled(samples: &[f32], sample_rate: u32, fps: f64, seed: u64) -> Result<Array2<f32>> {
    let layout = FrameLayout::new(samples.len(), sample_rate, fps)?;
    let mfcc = compute_mfcc(samples, sample_rate, fps)?;
    let proj = style_projection(seed);
    let fft_len = (2 * layout.win_len).next_power_of_two();
    let mut frame = vec![0.0; layout.win_len];
    let mut out = Array2::zeros((DECOUPLED_DIM, layout.frames));
    for t in 0..layout.frames {
        out[[0, t]] = frame_rms(samples, &layout, t) as f32;
        layout.fill_frame(samples, t, &mut frame);
        let pitch = frame_pitch_hz(&frame, sample_rate, fft_len)
            .map(|f| ((f - PITCH_MIN_HZ) / (PITCH_MAX_HZ - PITCH_MIN_HZ)).clamp(0.0, 1.0))
            .unwrap_or(0.0);
        out[[1, t]] = pitch as f32;
        let col = mfcc.column(t).mapv(|v| v as f64);
        let style = proj.dot(&col);
        for (j, v) in style.iter().enumerate() {
            out[[2 + j, t]] = *v as f32;
        }
    }
    Ok(out)
}

/// Onset frames from an energy track: local maxima of the positive energy
/// rise that exceed the mean positive rise.
pub fn detect_onsets(energy: &[f32]) -> Vec<usize> {
    if energy.len() < 3 {
        return Vec::new();
    }
    let flux: Vec<f64> = std::iter::once(0.0)
        .chain(energy.windows(2).map(|w| (w[1] - w[0]).max(0.0) as f64))
        .collect();
    let positive: Vec<f64> = flux.iter().copied().filter(|&f| f > 0.0).collect();
    if positive.is_empty() {
        return Vec::new();
    }
    let thresh = positive.iter().sum::<f64>() / positive.len() as f64;
    (1..flux.len())
        .filter(|&t| {
            let next = flux.get(t + 1).copied().unwrap_or(0.0);
            flux[t] >= thresh && flux[t] > flux[t - 1] && flux[t] >= next
        })
        .collect()
}

/// Per-row standardization statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population moments over every column of every matrix. Rows with
    /// (near) zero spread keep unit scale.
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a Array2<f32>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in mats {
            if sum.is_empty() {
                sum = vec![0.0; m.nrows()];
                sum_sq = vec![0.0; m.nrows()];
            } else if m.nrows() != sum.len() {
                return Err(Error::shape(
                    "normalization",
                    format!("row count {} != {}", m.nrows(), sum.len()),
                ));
            }
            for (r, row) in m.rows().into_iter().enumerate() {
                for &v in row {
                    sum[r] += v as f64;
                    sum_sq[r] += (v as f64) * (v as f64);
                }
            }
            n += m.ncols();
        }
        if n == 0 {
            return Err(Error::InvalidInput("cannot fit normalization on no data".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = (sq / n as f64 - m * m).max(0.0);
                let sd = var.sqrt();
                if sd < 1e-6 {
                    1.0
                } else {
                    sd as f32
                }
            })
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, m: &Array2<f32>) -> Array2<f32> {
        let mut out = m.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let (mu, sd) = (self.mean[r], self.std[r]);
            row.mapv_inplace(|v| (v - mu) / sd);
        }
        out
    }

    pub fn denormalize(&self, m: &Array2<f32>) -> Array2<f32> {
        let mut out = m.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let (mu, sd) = (self.mean[r], self.std[r]);
            row.mapv_inplace(|v| v * sd + mu);
        }
        out
    }

    pub fn store(&self, bundle: &mut TensorBundle, prefix: &str) -> Result<()> {
        let d = self.dim();
        bundle.insert(
            format!("{prefix}.mean"),
            TensorBlob::from_f32(vec![d], self.mean.clone())?,
        )?;
        bundle.insert(
            format!("{prefix}.std"),
            TensorBlob::from_f32(vec![d], self.std.clone())?,
        )
    }

    pub fn load(bundle: &TensorBundle, prefix: &str) -> Result<Self> {
        let get = |name: String| -> Result<Vec<f32>> {
            let blob = bundle.require(&name)?;
            blob.as_f32()
                .map(<[f32]>::to_vec)
                .ok_or_else(|| Error::shape(name, "expected f32"))
        };
        let mean = get(format!("{prefix}.mean"))?;
        let std = get(format!("{prefix}.std"))?;
        if mean.len() != std.len() {
            return Err(Error::shape(prefix, "mean/std length mismatch"));
        }
        Ok(Self { mean, std })
    }
}
