//! Synthetic dyadic corpora with a known speaker-to-listener coupling.
//!
//! Each clip starts from a voiced waveform: harmonic syllables whose pitch
//! follows a slow contour. Features are computed from it exactly as for real
//! audio. Speaker body and hand mix a few clip-specific sinusoids through
//! corpus-level matrices, with amplitude `0.5 + 3 * pitch`. The speaker face
//! is linear in energy and pitch plus an identity offset. Listener channel
//! `j` at frame `t` is `gain * g(speaker_j[t - lag]) + noise`, and frames
//! before `lag` hold the neutral (zero) pose.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{compute_mfcc, synth_decoupled, FeatureSequence, PHONEME_DIM, TEXT_DIM};
use crate::metrics::{lagged_correlations, motion_beats, tlcc};
use crate::motion::{DyadicClip, MotionSequence, Part, PartDims, Role, SHAPE_PARAMS};

const NUM_SOURCES: usize = 3;
const MOTION_SCALE: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    Tanh,
    Identity,
}

impl Coupling {
    fn apply(self, x: f32) -> f32 {
        match self {
            Coupling::Tanh => x.tanh(),
            Coupling::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_clips: usize,
    pub frames: usize,
    pub fps: f64,
    pub dims: PartDims,
    /// Listener delay in frames.
    pub coupling_lag: usize,
    pub coupling_gain: f64,
    pub coupling: Coupling,
    pub noise_std: f64,
    pub num_identities: usize,
    pub sample_rate: u32,
    /// Emit piecewise-constant text and phoneme embeddings instead of leaving
    /// those tracks absent.
    pub text_features: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_clips: 128,
            frames: 88,
            fps: 30.0,
            dims: PartDims::default(),
            coupling_lag: 4,
            coupling_gain: 1.0,
            coupling: Coupling::Tanh,
            noise_std: 0.02,
            num_identities: 4,
            sample_rate: 16_000,
            text_features: false,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_clips == 0 {
            return bad("num_clips must be positive".into());
        }
        if self.frames < 8 {
            return bad(format!("frames must be at least 8, got {}", self.frames));
        }
        if 4 * self.coupling_lag >= self.frames {
            return bad(format!(
                "coupling_lag {} must be below frames/4 ({})",
                self.coupling_lag,
                self.frames as f64 / 4.0
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if !self.coupling_gain.is_finite() {
            return bad("coupling_gain must be finite".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("invalid fps {}", self.fps));
        }
        if self.dims.body + self.dims.hand != 156 {
            return bad(format!(
                "body + hand must be 156 pose channels, got {} + {}",
                self.dims.body, self.dims.hand
            ));
        }
        if self.dims.face == 0 {
            return bad("face needs at least one channel".into());
        }
        if self.num_identities == 0 {
            return bad("num_identities must be positive".into());
        }
        if self.sample_rate < crate::features::MIN_SAMPLE_RATE {
            return bad(format!("sample_rate {} too low", self.sample_rate));
        }
        Ok(())
    }
}

/// Mixing matrices and identity offsets shared by every clip of a corpus.
struct CorpusParams {
    body_mix: Array2<f64>,
    hand_mix: Array2<f64>,
    /// Face response to `[energy, pitch]`.
    face_mix: Array2<f64>,
    face_offsets: Vec<Array1<f64>>,
    body_offsets: Vec<Array1<f64>>,
    text_table: Array2<f32>,
    phoneme_table: Array2<f32>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

impl CorpusParams {
    fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mix_std = MOTION_SCALE * (2.0 / NUM_SOURCES as f64).sqrt();
        let d = spec.dims;
        Self {
            body_mix: gaussian_matrix(&mut rng, d.body, NUM_SOURCES, mix_std),
            hand_mix: gaussian_matrix(&mut rng, d.hand, NUM_SOURCES, mix_std),
            face_mix: gaussian_matrix(&mut rng, d.face, 2, 1.0),
            face_offsets: (0..spec.num_identities)
                .map(|_| gaussian_matrix(&mut rng, d.face, 1, 0.5).column(0).to_owned())
                .collect(),
            body_offsets: (0..spec.num_identities)
                .map(|_| gaussian_matrix(&mut rng, d.body, 1, 0.3).column(0).to_owned())
                .collect(),
            text_table: gaussian_matrix(&mut rng, TEXT_DIM, 16, 1.0).mapv(|v| v as f32),
            phoneme_table: gaussian_matrix(&mut rng, PHONEME_DIM, 16, 1.0).mapv(|v| v as f32),
        }
    }
}

fn clip_rng(seed: u64, clip: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(clip as u64 + 1);
    rng
}

/// Voiced syllables on a slow pitch contour between 100 and 400 Hz, plus the
/// syllable boundaries in seconds.
fn synth_waveform(rng: &mut ChaCha8Rng, seconds: f64, sr: u32) -> (Vec<f32>, Vec<(f64, f64)>) {
    let n = (seconds * sr as f64).ceil() as usize;
    let mut syllables = Vec::new();
    let mut t = rng.random_range(0.0..0.1);
    while t < seconds {
        let len = rng.random_range(0.15..0.4);
        let amp = rng.random_range(0.5..1.0);
        syllables.push((t, len, amp));
        t += len + rng.random_range(0.05..0.15);
    }
    let fp = rng.random_range(0.2..0.7);
    let pp = rng.random_range(0.0..2.0 * PI);
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for i in 0..n {
        let tau = i as f64 / sr as f64;
        let f0 = 100.0 + 300.0 * (0.5 + 0.5 * (2.0 * PI * fp * tau + pp).sin());
        phase += 2.0 * PI * f0 / sr as f64;
        while k < syllables.len() && tau > syllables[k].0 + syllables[k].1 {
            k += 1;
        }
        let env = match syllables.get(k) {
            Some(&(start, len, amp)) if tau >= start => amp * (PI * (tau - start) / len).sin().powi(2),
            _ => 0.0,
        };
        let v = (phase.sin() + 0.5 * (2.0 * phase).sin() + 0.25 * (3.0 * phase).sin()) / 1.75;
        out.push((0.5 * env * v) as f32);
    }
    (out, syllables.iter().map(|&(s, l, _)| (s, l)).collect())
}

/// Linear interpolation across unvoiced (zero) frames; edges hold the
/// nearest voiced value. All-unvoiced input stays zero.
fn fill_unvoiced(p: &[f64]) -> Vec<f64> {
    let voiced: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    let (Some(&first), Some(&last)) = (voiced.first(), voiced.last()) else {
        return p.to_vec();
    };
    let mut out = p.to_vec();
    out[..first].fill(p[first]);
    out[last..].fill(p[last]);
    for w in voiced.windows(2) {
        let (a, b) = (w[0], w[1]);
        for (i, o) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            *o = p[a] + (p[b] - p[a]) * (i - a) as f64 / (b - a) as f64;
        }
    }
    out
}

fn smooth(x: &[f64]) -> Vec<f64> {
    let kernel = [1.0, 4.0, 6.0, 4.0, 1.0];
    (0..x.len())
        .map(|t| {
            let (mut acc, mut w) = (0.0, 0.0);
            for (j, &k) in kernel.iter().enumerate() {
                let i = t as i64 + j as i64 - 2;
                if (0..x.len() as i64).contains(&i) {
                    acc += k * x[i as usize];
                    w += k;
                }
            }
            acc / w
        })
        .collect()
}

/// Piecewise-constant embedding rows, one segment per syllable.
fn segment_embedding(
    table: &Array2<f32>,
    syllables: &[(f64, f64)],
    frames: usize,
    fps: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f32> {
    let ids: Vec<usize> = syllables.iter().map(|_| rng.random_range(0..table.ncols())).collect();
    let mut out = Array2::zeros((table.nrows(), frames));
    for f in 0..frames {
        let tau = f as f64 / fps;
        let seg = syllables.iter().rposition(|&(s, _)| s <= tau).unwrap_or(0);
        out.column_mut(f).assign(&table.column(ids[seg]));
    }
    out
}

fn couple(speaker: &Array2<f32>, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let (d, t) = speaker.dim();
    let lag = spec.coupling_lag;
    let mut out = Array2::zeros((d, t));
    for f in lag..t {
        for j in 0..d {
            out[[j, f]] = spec.coupling_gain as f32 * spec.coupling.apply(speaker[[j, f - lag]]);
        }
    }
    if spec.noise_std > 0.0 {
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += (spec.noise_std * z) as f32;
        }
    }
    out
}

fn make_clip(spec: &SynthSpec, params: &CorpusParams, index: usize) -> Result<DyadicClip> {
    let mut rng = clip_rng(spec.seed, index);
    let t = spec.frames;
    let seconds = t as f64 / spec.fps;
    let (wave, syllables) = synth_waveform(&mut rng, seconds, spec.sample_rate);
    let mfcc = compute_mfcc(&wave, spec.sample_rate, spec.fps)?;
    let decoupled = synth_decoupled(&wave, spec.sample_rate, spec.fps, spec.seed)?;
    debug_assert_eq!(mfcc.ncols(), t);

    let energy: Vec<f64> = decoupled.row(0).iter().map(|&v| v as f64).collect();
    let pitch = smooth(&fill_unvoiced(
        &decoupled.row(1).iter().map(|&v| v as f64).collect::<Vec<_>>(),
    ));
    let speaker_id = index % spec.num_identities;

    let freqs: Vec<f64> = (0..NUM_SOURCES).map(|_| rng.random_range(0.25..1.0)).collect();
    let phases: Vec<f64> = (0..NUM_SOURCES).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let sources = Array2::from_shape_fn((NUM_SOURCES, t), |(k, f)| {
        let amp = 0.5 + 3.0 * pitch[f];
        amp * (2.0 * PI * freqs[k] * f as f64 / spec.fps + phases[k]).sin()
    });
    let body = (params.body_mix.dot(&sources) + params.body_offsets[speaker_id].view().insert_axis(ndarray::Axis(1)))
        .mapv(|v| v as f32);
    let hand = params.hand_mix.dot(&sources).mapv(|v| v as f32);
    let drive = Array2::from_shape_fn((2, t), |(k, f)| if k == 0 { 3.0 * energy[f] } else { 3.0 * pitch[f] });
    let face = (params.face_mix.dot(&drive) + params.face_offsets[speaker_id].view().insert_axis(ndarray::Axis(1)))
        .mapv(|v| v as f32);

    let listener = MotionSequence::new(
        Role::Listener,
        couple(&face, spec, &mut rng),
        couple(&body, spec, &mut rng),
        couple(&hand, spec, &mut rng),
    )?;
    let speaker = MotionSequence::new(Role::Speaker, face, body, hand)?;
    let onsets = motion_beats(&speaker.pose());

    let (text, phoneme) = if spec.text_features {
        (
            Some(segment_embedding(&params.text_table, &syllables, t, spec.fps, &mut rng)),
            Some(segment_embedding(
                &params.phoneme_table,
                &syllables,
                t,
                spec.fps,
                &mut rng,
            )),
        )
    } else {
        (None, None)
    };
    let features = FeatureSequence::new(mfcc, decoupled, text, phoneme, spec.fps)?;

    let mut shape_params = [0f32; SHAPE_PARAMS];
    shape_params.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let clip = DyadicClip {
        clip_id: format!("synth_{index:05}"),
        fps: spec.fps,
        speaker_id,
        num_identities: spec.num_identities,
        speaker,
        listener,
        features,
        shape_params,
        camera_pose: [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0],
        translation: [0.0, 0.0, rng.random_range(1.0..2.0)],
        audio_onsets: Some(onsets),
    };
    clip.validate()?;
    Ok(clip)
}

/// Generates `spec.num_clips` clips. A pure function of `spec`.
pub fn make_corpus(spec: &SynthSpec) -> Result<Vec<DyadicClip>> {
    spec.validate()?;
    let params = CorpusParams::new(spec);
    (0..spec.num_clips).map(|i| make_clip(spec, &params, i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartStats {
    pub role: Role,
    pub part: Part,
    pub channels: usize,
    /// Grand mean over channels and frames.
    pub mean: f64,
    /// Mean per-channel standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingSummary {
    pub max_lag: usize,
    /// Mean over clips of the TLCC lag between speaker and listener.
    pub mean_lag: f64,
    pub min_lag: i64,
    pub max_lag_found: i64,
    /// Per-channel Spearman correlation at each clip's modal lag, averaged
    /// over clips. 1.0 means the listener is a monotone function of the
    /// delayed speaker.
    pub channel_corr: Vec<f64>,
    pub min_corr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub clips: usize,
    pub frames: usize,
    pub pose_channels: usize,
    pub parts: Vec<PartStats>,
    pub coupling: CouplingSummary,
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation at lag 0 of two equal-length series.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    lagged_correlations(&ranks(x), &ranks(y), 0)[0].1
}

fn modal_lag(lags: &[Option<i64>]) -> Option<i64> {
    let mut counts = std::collections::BTreeMap::new();
    for l in lags.iter().flatten() {
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    counts.into_iter().max_by_key(|&(l, c)| (c, -l.abs())).map(|(l, _)| l)
}

/// Per-part moments and a coupling check between speaker and listener.
pub fn corpus_stats(corpus: &[DyadicClip], max_lag: usize) -> Result<CorpusStats> {
    let first = corpus
        .first()
        .ok_or_else(|| Error::InvalidInput("corpus_stats on an empty corpus".into()))?;
    let mut parts = Vec::new();
    for role in [Role::Speaker, Role::Listener] {
        for part in Part::ALL {
            let channels = first.track(role, part).nrows();
            let (mut sum, mut n, mut std_sum) = (0.0, 0usize, 0.0);
            for c in 0..channels {
                let vals: Vec<f64> = corpus
                    .iter()
                    .flat_map(|clip| clip.track(role, part).row(c).to_vec())
                    .map(|v| v as f64)
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                std_sum += (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
                sum += vals.iter().sum::<f64>();
                n += vals.len();
            }
            parts.push(PartStats {
                role,
                part,
                channels,
                mean: sum / n as f64,
                std: std_sum / channels as f64,
            });
        }
    }

    let channels = first.speaker.full().nrows();
    let mut corr = vec![0.0; channels];
    let (mut lag_sum, mut lo, mut hi) = (0.0, i64::MAX, i64::MIN);
    for clip in corpus {
        let s = clip.speaker.full();
        let l = clip.listener.full();
        let r = tlcc(&s, &l, max_lag)?;
        lag_sum += r.lag;
        let lag = modal_lag(&r.channel_lags).unwrap_or(0);
        lo = lo.min(lag);
        hi = hi.max(lag);
        let t = s.ncols();
        let k = lag.unsigned_abs() as usize;
        for (j, c) in corr.iter_mut().enumerate() {
            let sv: Vec<f64> = s.row(j).iter().map(|&v| v as f64).collect();
            let lv: Vec<f64> = l.row(j).iter().map(|&v| v as f64).collect();
            let (a, b) = if lag >= 0 {
                (&sv[..t - k], &lv[k..])
            } else {
                (&sv[k..], &lv[..t - k])
            };
            *c += spearman(a, b);
        }
    }
    corr.iter_mut().for_each(|c| *c /= corpus.len() as f64);
    Ok(CorpusStats {
        clips: corpus.len(),
        frames: corpus.iter().map(|c| c.num_frames()).sum(),
        pose_channels: first.speaker.pose().nrows(),
        parts,
        coupling: CouplingSummary {
            max_lag,
            mean_lag: lag_sum / corpus.len() as f64,
            min_lag: lo,
            max_lag_found: hi,
            min_corr: corr.iter().copied().fold(f64::INFINITY, f64::min),
            channel_corr: corr,
        },
    })
}
