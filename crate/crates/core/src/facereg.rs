//! Speaker expression regression from face features and identity.
//!
//! A pointwise input projection, a stack of residual dilated `k=3`
//! convolutions (dilations 1, 2, 4, ...) and a pointwise output projection.
//! The identity vector (learned embedding or raw one-hot) is concatenated to
//! every input column. Features and targets are standardized with training
//! statistics stored in the checkpoint.

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::split_corpus;
use crate::error::{Error, Result};
use crate::features::{assemble, FeatureNorm, IdentityCode, FACE_FEATURE_DIM};
use crate::metrics::{l2_face, lvd};
use crate::motion::DyadicClip;
use crate::nn::{self, Adam, AdamConfig, Conv1d, Embedding, ParamStore};
use crate::tensorio::{read_json, write_json, TensorBundle};
use crate::vqvae::shuffled_batches;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityMode {
    Embedding,
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaceRegConfig {
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
    pub id_dim: usize,
    pub identity: IdentityMode,
}

impl Default for FaceRegConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            layers: 4,
            kernel: 3,
            id_dim: 64,
            identity: IdentityMode::Embedding,
        }
    }
}

impl FaceRegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("face hidden and layers must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("face kernel must be odd, got {}", self.kernel)));
        }
        if self.identity == IdentityMode::Embedding && self.id_dim == 0 {
            return Err(Error::Config("id_dim must be positive for embedding identity".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaceTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub val_fraction: f64,
}

impl Default for FaceTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            adam: AdamConfig::default(),
            val_fraction: 0.1,
        }
    }
}

impl FaceTrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            val_fraction: 0.1,
        }
    }
}

/// The regression network over standardized inputs and targets.
pub struct FaceRegressor {
    config: FaceRegConfig,
    input_dim: usize,
    output_dim: usize,
    num_identities: usize,
    params: ParamStore,
    id_embed: Option<Embedding>,
    conv_in: Conv1d,
    layers: Vec<Conv1d>,
    conv_out: Conv1d,
}

impl FaceRegressor {
    pub fn new(
        config: &FaceRegConfig,
        input_dim: usize,
        output_dim: usize,
        num_identities: usize,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        if num_identities == 0 {
            return Err(Error::Config("num_identities must be positive".into()));
        }
        let mut ps = ParamStore::new(seed, dtype);
        let (id_embed, id_width) = match config.identity {
            IdentityMode::Embedding => (
                Some(Embedding::new(&mut ps, "identity", num_identities, config.id_dim)?),
                config.id_dim,
            ),
            IdentityMode::OneHot => (None, num_identities),
        };
        let h = config.hidden;
        let conv_in = Conv1d::same(&mut ps, "conv_in", input_dim + id_width, h, 1, 1)?;
        let layers = (0..config.layers)
            .map(|i| Conv1d::same(&mut ps, &format!("layer{i}"), h, h, config.kernel, 1 << i))
            .collect::<Result<Vec<_>>>()?;
        let conv_out = Conv1d::same(&mut ps, "conv_out", h, output_dim, 1, 1)?;
        Ok(Self {
            config: config.clone(),
            input_dim,
            output_dim,
            num_identities,
            params: ps,
            id_embed,
            conv_in,
            layers,
            conv_out,
        })
    }

    pub fn config(&self) -> &FaceRegConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    fn identity_vectors(&self, ids: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.num_identities) {
            return Err(Error::InvalidInput(format!(
                "identity {bad} outside [0, {})",
                self.num_identities
            )));
        }
        let dev = self.params.device();
        match &self.id_embed {
            Some(e) => {
                let idx = Tensor::from_vec(ids.iter().map(|&i| i as u32).collect::<Vec<_>>(), ids.len(), dev)?;
                e.forward(&idx)
            }
            None => {
                let mut v = vec![0f32; ids.len() * self.num_identities];
                for (b, &i) in ids.iter().enumerate() {
                    v[b * self.num_identities + i] = 1.0;
                }
                Ok(Tensor::from_vec(v, (ids.len(), self.num_identities), dev)?.to_dtype(self.params.dtype())?)
            }
        }
    }

    /// `(B, input_dim, T)` standardized features to `(B, output_dim, T)`.
    pub fn forward(&self, features: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (b, d, t) = features.dims3()?;
        if d != self.input_dim {
            return Err(Error::shape(
                "face features",
                format!("{d} rows, expected {}", self.input_dim),
            ));
        }
        if ids.len() != b {
            return Err(Error::shape("identity", format!("{} ids for batch {b}", ids.len())));
        }
        let id = self.identity_vectors(ids)?;
        let id = id.unsqueeze(2)?.broadcast_as((b, id.dim(1)?, t))?;
        let x = Tensor::cat(&[features, &id], 1)?;
        let mut h = self.conv_in.forward(&x)?;
        for layer in &self.layers {
            h = (&h + layer.forward(&h.silu()?)?)?;
        }
        self.conv_out.forward(&h.silu()?)
    }

    /// Mean squared error against `(B, output_dim, T)` targets.
    pub fn mse(&self, features: &Tensor, ids: &[usize], target: &Tensor) -> Result<Tensor> {
        Ok((self.forward(features, ids)? - target)?.sqr()?.mean_all()?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FaceMeta {
    kind: String,
    input_dim: usize,
    output_dim: usize,
    num_identities: usize,
    config: FaceRegConfig,
}

/// A trained regressor with its feature and target normalization.
pub struct FaceCheckpoint {
    pub in_norm: FeatureNorm,
    pub out_norm: FeatureNorm,
    pub model: FaceRegressor,
}

impl FaceCheckpoint {
    /// Expression track (`output_dim x T`) for `face_features` (`642 x T`).
    pub fn regress(&self, face_features: &Array2<f32>, identity: &IdentityCode) -> Result<Array2<f32>> {
        if identity.num_identities() != self.model.num_identities() {
            return Err(Error::InvalidInput(format!(
                "identity code has {} identities, face model was trained with {}",
                identity.num_identities(),
                self.model.num_identities()
            )));
        }
        if face_features.nrows() != self.in_norm.dim() {
            return Err(Error::shape(
                "face features",
                format!("{} rows, expected {}", face_features.nrows(), self.in_norm.dim()),
            ));
        }
        let x = nn::batch_tensor(&[&self.in_norm.normalize(face_features)], self.model.params().dtype())?;
        let y = self.model.forward(&x, &[identity.speaker_id()])?;
        let y = nn::unbatch(&y)?.remove(0);
        Ok(self.out_norm.denormalize(&y))
    }

    pub fn regress_clip(&self, clip: &DyadicClip) -> Result<Array2<f32>> {
        self.regress(&assemble(&clip.features).face_features, &clip.identity()?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bundle = TensorBundle::new();
        self.model.params().store(&mut bundle, "model")?;
        self.in_norm.store(&mut bundle, "in_norm")?;
        self.out_norm.store(&mut bundle, "out_norm")?;
        bundle.save(dir)?;
        write_json(
            dir.join("config.json"),
            &FaceMeta {
                kind: "face".into(),
                input_dim: self.model.input_dim(),
                output_dim: self.model.output_dim(),
                num_identities: self.model.num_identities(),
                config: self.model.config().clone(),
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: FaceMeta = read_json(dir.join("config.json"))?;
        if meta.kind != "face" {
            return Err(Error::InvalidInput(format!(
                "{}: expected a face checkpoint, found {}",
                dir.display(),
                meta.kind
            )));
        }
        let bundle = TensorBundle::load(dir)?;
        let model = FaceRegressor::new(
            &meta.config,
            meta.input_dim,
            meta.output_dim,
            meta.num_identities,
            0,
            DType::F32,
        )?;
        model.params().load(&bundle, "model")?;
        Ok(Self {
            in_norm: FeatureNorm::load(&bundle, "in_norm")?,
            out_norm: FeatureNorm::load(&bundle, "out_norm")?,
            model,
        })
    }
}

/// Regresses a `642 x T` face-feature track for one identity.
pub fn regress_face(
    face_features: &Array2<f32>,
    identity: &IdentityCode,
    ckpt: &FaceCheckpoint,
) -> Result<Array2<f32>> {
    ckpt.regress(face_features, identity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceEpochLog {
    pub epoch: usize,
    /// Mean training MSE in standardized target units.
    pub train_mse: f64,
    pub val_l2: Option<f64>,
    pub val_lvd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceTrainLog {
    pub train_clips: usize,
    pub val_clips: usize,
    /// Training-set MSE after the last step, standardized units.
    pub final_train_mse: f64,
    pub epochs: Vec<FaceEpochLog>,
}

struct FaceData {
    ids: Vec<usize>,
    x: Vec<Array2<f32>>,
    y: Vec<Array2<f32>>,
}

fn face_data(clips: &[DyadicClip], in_norm: &FeatureNorm, out_norm: &FeatureNorm) -> Result<FaceData> {
    let mut d = FaceData {
        ids: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
    };
    for c in clips {
        d.ids.push(c.identity()?.speaker_id());
        d.x.push(in_norm.normalize(&assemble(&c.features).face_features));
        d.y.push(out_norm.normalize(&c.speaker.face));
    }
    Ok(d)
}

fn dataset_mse(model: &FaceRegressor, data: &FaceData, batch: usize) -> Result<f64> {
    let lengths: Vec<usize> = data.x.iter().map(|m| m.ncols()).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for b in shuffled_batches(&lengths, batch, &mut ChaCha8Rng::seed_from_u64(0)) {
        let (x, ids, y) = gather(model, data, &b)?;
        let elems = y.elem_count();
        sum += nn::scalar(&model.mse(&x, &ids, &y)?)? * elems as f64;
        n += elems;
    }
    Ok(sum / n.max(1) as f64)
}

fn gather(model: &FaceRegressor, data: &FaceData, idx: &[usize]) -> Result<(Tensor, Vec<usize>, Tensor)> {
    let dtype = model.params().dtype();
    let xs: Vec<&Array2<f32>> = idx.iter().map(|&i| &data.x[i]).collect();
    let ys: Vec<&Array2<f32>> = idx.iter().map(|&i| &data.y[i]).collect();
    Ok((
        nn::batch_tensor(&xs, dtype)?,
        idx.iter().map(|&i| data.ids[i]).collect(),
        nn::batch_tensor(&ys, dtype)?,
    ))
}

/// Trains on the leading clips and reports L2/LVD on the held-out tail
/// every epoch. Deterministic for a seed.
pub fn train_face(
    corpus: &[DyadicClip],
    config: &FaceRegConfig,
    train: &FaceTrainConfig,
    seed: u64,
) -> Result<(FaceCheckpoint, FaceTrainLog)> {
    let (train_clips, val_clips) = split_corpus(corpus, train.val_fraction);
    if train_clips.is_empty() {
        return Err(Error::InvalidInput("no clips to train the face model on".into()));
    }
    let num_identities = train_clips[0].num_identities;
    if let Some(c) = corpus.iter().find(|c| c.num_identities != num_identities) {
        return Err(Error::InvalidInput(format!(
            "clip {} declares {} identities, expected {num_identities}",
            c.clip_id, c.num_identities
        )));
    }
    let feats: Vec<Array2<f32>> = train_clips
        .iter()
        .map(|c| assemble(&c.features).face_features)
        .collect();
    let in_norm = FeatureNorm::fit(&feats)?;
    let out_norm = FeatureNorm::fit(train_clips.iter().map(|c| &c.speaker.face))?;
    let model = FaceRegressor::new(
        config,
        FACE_FEATURE_DIM,
        out_norm.dim(),
        num_identities,
        seed,
        DType::F32,
    )?;
    let data = face_data(train_clips, &in_norm, &out_norm)?;
    let mut opt = Adam::new(model.params().vars(), train.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfa_ce);
    let lengths: Vec<usize> = data.x.iter().map(|m| m.ncols()).collect();
    let ckpt = FaceCheckpoint {
        in_norm,
        out_norm,
        model,
    };
    let mut epochs = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let (mut sum, mut nb) = (0.0, 0usize);
        for (bi, b) in shuffled_batches(&lengths, train.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let (x, ids, y) = gather(&ckpt.model, &data, &b)?;
            let loss = ckpt.model.mse(&x, &ids, &y)?;
            let v = nn::scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::NumericFailure {
                    stage: "face".into(),
                    epoch,
                    batch: bi,
                    clips: b
                        .iter()
                        .map(|&i| train_clips[i].clip_id.as_str())
                        .collect::<Vec<_>>()
                        .join(", "),
                });
            }
            opt.backward_step(&loss)?;
            sum += v;
            nb += 1;
        }
        let (val_l2, val_lvd) = validate(&ckpt, val_clips)?;
        let log = FaceEpochLog {
            epoch,
            train_mse: sum / nb.max(1) as f64,
            val_l2,
            val_lvd,
        };
        log::debug!("face epoch {epoch}: {log:?}");
        epochs.push(log);
    }
    let final_train_mse = dataset_mse(&ckpt.model, &data, train.batch_size)?;
    Ok((
        ckpt,
        FaceTrainLog {
            train_clips: train_clips.len(),
            val_clips: val_clips.len(),
            final_train_mse,
            epochs,
        },
    ))
}

fn validate(ckpt: &FaceCheckpoint, val: &[DyadicClip]) -> Result<(Option<f64>, Option<f64>)> {
    if val.is_empty() {
        return Ok((None, None));
    }
    let (mut l2, mut v) = (0.0, 0.0);
    for c in val {
        let pred = ckpt.regress_clip(c)?;
        l2 += l2_face(&pred, &c.speaker.face)?;
        v += lvd(&pred, &c.speaker.face)?;
    }
    let n = val.len() as f64;
    Ok((Some(l2 / n), Some(v / n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{make_corpus, SynthSpec};
    use candle_core::Device;
    use rand::Rng;

    fn toy(identity: IdentityMode, dtype: DType) -> FaceRegressor {
        let cfg = FaceRegConfig {
            hidden: 4,
            layers: 2,
            kernel: 3,
            id_dim: 2,
            identity,
        };
        FaceRegressor::new(&cfg, 5, 3, 3, 7, dtype).unwrap()
    }

    fn random_tensor(shape: (usize, usize, usize), seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap()
    }

    #[test]
    fn output_shape_follows_input() {
        let m = FaceRegressor::new(&FaceRegConfig::default(), FACE_FEATURE_DIM, 50, 4, 0, DType::F32).unwrap();
        let x = random_tensor((1, FACE_FEATURE_DIM, 88), 1, DType::F32);
        assert_eq!(m.forward(&x, &[2]).unwrap().dims(), &[1, 50, 88]);
        assert!(m.forward(&x, &[4]).is_err());
        assert!(m.forward(&random_tensor((1, 10, 88), 1, DType::F32), &[0]).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let m = toy(IdentityMode::Embedding, DType::F32);
        m.params().zero_all().unwrap();
        let y = m.forward(&random_tensor((2, 5, 6), 2, DType::F32), &[0, 1]).unwrap();
        assert!(y
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn identity_changes_output() {
        for mode in [IdentityMode::Embedding, IdentityMode::OneHot] {
            let m = toy(mode, DType::F32);
            let x = random_tensor((1, 5, 6), 3, DType::F32);
            let a = m.forward(&x, &[0]).unwrap();
            let b = m.forward(&x, &[1]).unwrap();
            let delta = nn::scalar(&(a - b).unwrap().abs().unwrap().sum_all().unwrap()).unwrap();
            assert!(delta > 0.0, "{mode:?}");
        }
    }

    #[test]
    fn mse_gradients_match_finite_differences() {
        for frames in [2, 3] {
            let m = toy(IdentityMode::Embedding, DType::F64);
            let x = random_tensor((2, 5, frames), 4, DType::F64);
            let y = random_tensor((2, 3, frames), 5, DType::F64);
            let ids = [0, 2];
            let grads = m.mse(&x, &ids, &y).unwrap().backward().unwrap();
            let eps = 1e-6;
            let (mut diff2, mut norm2) = (0.0f64, 0.0f64);
            for (name, var) in m.params().named() {
                let analytic = match grads.get(var.as_tensor()) {
                    Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                    None => vec![0.0; var.elem_count()],
                };
                let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                for i in 0..base.len() {
                    let eval = |delta: f64| {
                        let mut v = base.clone();
                        v[i] += delta;
                        var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap())
                            .unwrap();
                        nn::scalar(&m.mse(&x, &ids, &y).unwrap()).unwrap()
                    };
                    let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                    eval(0.0);
                    let a = analytic[i];
                    assert!((a - fd).abs() <= 1e-6 + 1e-3 * fd.abs(), "{name}[{i}]: {a} vs {fd}");
                    diff2 += (a - fd).powi(2);
                    norm2 += a * a;
                }
            }
            assert!(diff2.sqrt() / norm2.sqrt() <= 1e-4);
        }
    }

    fn small_corpus(n: usize, frames: usize) -> Vec<DyadicClip> {
        make_corpus(&SynthSpec {
            num_clips: n,
            frames,
            coupling_lag: 2,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn overfits_eight_clips() {
        let corpus = small_corpus(8, 16);
        let cfg = FaceRegConfig::default();
        let train = FaceTrainConfig {
            epochs: 500,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            val_fraction: 0.0,
        };
        let (_, log) = train_face(&corpus, &cfg, &train, 1).unwrap();
        assert_eq!(log.epochs.len(), 500);
        assert!(log.final_train_mse < 1e-3, "train mse {}", log.final_train_mse);
    }

    #[test]
    fn training_is_deterministic_and_reports_validation() {
        let corpus = small_corpus(6, 32);
        let cfg = FaceRegConfig {
            hidden: 16,
            id_dim: 4,
            ..FaceRegConfig::default()
        };
        let train = FaceTrainConfig {
            epochs: 3,
            batch_size: 2,
            val_fraction: 0.34,
            ..FaceTrainConfig::desk()
        };
        let (a, la) = train_face(&corpus, &cfg, &train, 9).unwrap();
        let (_, lb) = train_face(&corpus, &cfg, &train, 9).unwrap();
        assert_eq!(la, lb);
        assert_eq!((la.train_clips, la.val_clips), (3, 3));
        assert!(la.epochs.iter().all(|e| e.val_l2.is_some() && e.val_lvd.is_some()));

        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let back = FaceCheckpoint::load(dir.path()).unwrap();
        let clip = &corpus[0];
        assert_eq!(back.regress_clip(clip).unwrap(), a.regress_clip(clip).unwrap());
        assert_eq!(a.regress_clip(clip).unwrap().dim(), (50, 32));
        let wrong = IdentityCode::new(0, 7).unwrap();
        assert!(a.regress(&assemble(&clip.features).face_features, &wrong).is_err());
    }
}
