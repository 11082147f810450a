//! Offline driver: synthesize corpora, train each stage, generate dyads and
//! score them. Every command is a plain function so tests and the binary
//! share one code path.

pub mod plot;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dyadmo::dyadgen::{self, ChainMode, DyadModels, GenCheckpoint, GenConfig, GenTrainConfig, SamplingConfig};
use dyadmo::facereg::{train_face, FaceRegConfig, FaceTrainConfig};
use dyadmo::metrics::{evaluate, ClipMetrics, FgdConfig, FgdSuite, MetricConfig, MetricReport};
use dyadmo::synthdata::{make_corpus, SynthSpec};
use dyadmo::tensorio::{load_clip, save_clip, MANIFEST_FILE_NAME};
use dyadmo::vqvae::{train_vqvae, VqConfig, VqTrainConfig};
use dyadmo::{load_corpus, save_corpus, DyadicClip, Stream};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dyadmo::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("plot {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl CliError {
    fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for missing artifacts, 4 for numeric
    /// failure during training, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use dyadmo::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::Config(_)) => 2,
            CliError::Core(E::MissingCheckpoint { .. } | E::MissingTrack { .. }) => 3,
            CliError::Core(E::Io { source, .. }) | CliError::Io { source, .. }
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                3
            }
            CliError::Core(E::NumericFailure { .. }) => 4,
            _ => 1,
        }
    }
}

/// Optional overrides for the default directory layout under the data root.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub generated: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Required by `train` and `generate` unless given on the command line.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub synth: SynthSpec,
    pub vqvae: VqConfig,
    pub vq_train: VqTrainConfig,
    pub face: FaceRegConfig,
    pub face_train: FaceTrainConfig,
    pub generator: GenConfig,
    pub gen_train: GenTrainConfig,
    pub sampling: SamplingConfig,
    pub metrics: MetricConfig,
    pub fgd: FgdConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            paths: Paths::default(),
            synth: SynthSpec::default(),
            vqvae: VqConfig::desk(),
            vq_train: VqTrainConfig::desk(),
            face: FaceRegConfig::default(),
            face_train: FaceTrainConfig::desk(),
            generator: GenConfig::desk(),
            gen_train: GenTrainConfig::desk(),
            sampling: SamplingConfig::default(),
            metrics: MetricConfig::default(),
            fgd: FgdConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.vqvae.validate()?;
        self.face.validate()?;
        self.generator.validate()?;
        self.sampling.validate()?;
        Ok(())
    }

    /// `--seed` wins over the config value; one of them must be present.
    pub fn require_seed(&self, flag: Option<u64>, command: &str) -> Result<u64> {
        flag.or(self.seed)
            .ok_or_else(|| CliError::Config(format!("{command} needs a seed (--seed or \"seed\" in the config)")))
    }
}

/// Resolves default locations under the data root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub paths: Paths,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>, paths: &Paths) -> Self {
        Self {
            root: root.into(),
            paths: paths.clone(),
        }
    }

    fn pick(&self, over: &Option<PathBuf>, default: &str) -> PathBuf {
        over.clone().unwrap_or_else(|| self.root.join(default))
    }

    pub fn corpus(&self) -> PathBuf {
        self.pick(&self.paths.corpus, "corpus")
    }

    pub fn models(&self) -> PathBuf {
        self.pick(&self.paths.models, "models")
    }

    pub fn generated(&self) -> PathBuf {
        self.pick(&self.paths.generated, "generated")
    }

    pub fn eval(&self) -> PathBuf {
        self.pick(&self.paths.eval, "eval")
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// SHA-256 over every file under `dir`, keyed by relative path in sorted
/// order.
pub fn dir_digest(dir: impl AsRef<Path>) -> Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let rd = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        for entry in rd {
            let path = entry.map_err(|e| CliError::io(dir, e))?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                out.push(path.strip_prefix(base).expect("under base").to_path_buf());
            }
        }
        Ok(())
    }
    let dir = dir.as_ref();
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(dir.join(&rel)).map_err(|e| CliError::io(dir.join(&rel), e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthOutcome {
    pub dir: PathBuf,
    pub clips: usize,
    pub digest: String,
}

pub fn cmd_synth(cfg: &RunConfig, seed: Option<u64>, out: &Path) -> Result<SynthOutcome> {
    let spec = SynthSpec {
        seed: seed.unwrap_or(cfg.synth.seed),
        ..cfg.synth.clone()
    };
    let corpus = make_corpus(&spec)?;
    save_corpus(&corpus, out)?;
    write_json(&out.join("synth.json"), &spec)?;
    Ok(SynthOutcome {
        dir: out.to_path_buf(),
        clips: corpus.len(),
        digest: dir_digest(out)?,
    })
}

/// What `train` builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Vqvae(Stream),
    /// All five tokenizers in stream order.
    AllVqvae,
    Face,
    Generator,
    Fgd,
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vqvae" => Ok(Stage::AllVqvae),
            "face" => Ok(Stage::Face),
            "generator" => Ok(Stage::Generator),
            "fgd" => Ok(Stage::Fgd),
            _ => match s.strip_prefix("vqvae:") {
                Some(part) => Ok(Stage::Vqvae(part.parse()?)),
                None => Err(CliError::Config(format!(
                    "unknown stage {s:?}; expected vqvae, vqvae:<role.part>, face, generator or fgd"
                ))),
            },
        }
    }
}

pub fn fgd_dir(models: &Path) -> PathBuf {
    models.join("fgd")
}

fn load_training_corpus(dir: &Path) -> Result<Vec<DyadicClip>> {
    let corpus = load_corpus(dir)?;
    if corpus.is_empty() {
        return Err(CliError::Core(dyadmo::Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no clip manifests found"),
        }));
    }
    Ok(corpus)
}

/// Trains `stage` on the corpus under `corpus_dir` and writes the checkpoint
/// and its `train_log.json` under `models`. Returns the checkpoint
/// directories.
pub fn cmd_train(
    cfg: &RunConfig,
    stage: Stage,
    seed: u64,
    mode: Option<ChainMode>,
    corpus_dir: &Path,
    models: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    // The generator's prerequisites are checked before the corpus is read.
    let vqs = match stage {
        Stage::Generator => Some(dyadgen::load_tokenizers(models)?),
        _ => None,
    };
    let corpus = load_training_corpus(corpus_dir)?;
    let streams: Vec<Stream> = match stage {
        Stage::Vqvae(s) => vec![s],
        Stage::AllVqvae => Stream::ALL.to_vec(),
        Stage::Face => {
            let (ckpt, log) = train_face(&corpus, &cfg.face, &cfg.face_train, seed)?;
            let dir = dyadgen::face_dir(models);
            ckpt.save(&dir)?;
            write_json(&dir.join("train_log.json"), &log)?;
            return Ok(vec![dir]);
        }
        Stage::Generator => {
            let gen_cfg = GenConfig {
                mode: mode.unwrap_or(cfg.generator.mode),
                ..cfg.generator.clone()
            };
            let vqs = vqs.expect("loaded above");
            let (ckpt, log) = dyadgen::train_generator(&corpus, &vqs, &gen_cfg, &cfg.gen_train, seed)?;
            let dir = dyadgen::generator_dir(models);
            ckpt.save(&dir)?;
            write_json(&dir.join("train_log.json"), &log)?;
            return Ok(vec![dir]);
        }
        Stage::Fgd => {
            let (suite, speaker, listener) = FgdSuite::train(&corpus, &cfg.fgd, seed)?;
            let dir = fgd_dir(models);
            suite.save(&dir)?;
            #[derive(Serialize)]
            struct FgdLog {
                speaker_loss: Vec<f64>,
                listener_loss: Vec<f64>,
            }
            write_json(
                &dir.join("train_log.json"),
                &FgdLog {
                    speaker_loss: speaker,
                    listener_loss: listener,
                },
            )?;
            return Ok(vec![dir]);
        }
    };
    let mut dirs = Vec::new();
    for stream in streams {
        // Each tokenizer gets its own stream of randomness.
        let (ckpt, log) = train_vqvae(
            &corpus,
            stream,
            &cfg.vqvae,
            &cfg.vq_train,
            seed.wrapping_add(stream.index() as u64),
        )?;
        let dir = dyadgen::vq_dir(models, stream);
        ckpt.save(&dir)?;
        write_json(&dir.join("train_log.json"), &log)?;
        log::info!(
            "{stream}: recon {:.4} -> {:.4}, {} codes in use",
            log.initial_recon,
            log.final_recon,
            log.final_distinct_codes
        );
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Clip manifests to condition on: a corpus directory or a single clip
/// directory.
fn load_templates(input: &Path) -> Result<Vec<DyadicClip>> {
    let manifest = input.join(MANIFEST_FILE_NAME);
    if manifest.is_file() {
        return Ok(vec![load_clip(manifest)?]);
    }
    load_training_corpus(input)
}

/// Generates one dyad per input clip into `out/<clip_id>/`. With
/// `emit_plots`, each clip directory also gets `plots/<role>_<part>.png` and
/// `.csv`.
pub fn cmd_generate(
    cfg: &RunConfig,
    seed: u64,
    mode: Option<ChainMode>,
    input: &Path,
    models: &Path,
    out: &Path,
    emit_plots: bool,
) -> Result<Vec<PathBuf>> {
    cfg.sampling.validate()?;
    let models = DyadModels::load(models)?;
    if let Some(m) = mode {
        if m != models.generator.model.mode() {
            return Err(CliError::Config(format!(
                "--mode {m} requested but the generator checkpoint was trained as {}",
                models.generator.model.mode()
            )));
        }
    }
    let templates = load_templates(input)?;
    let mut written = Vec::with_capacity(templates.len());
    for (i, t) in templates.iter().enumerate() {
        let clip = dyadgen::generate_clip(t, &models, &cfg.sampling, seed.wrapping_add(i as u64))?;
        let dir = out.join(&clip.clip_id);
        let manifest = save_clip(&clip, &dir)?;
        if emit_plots {
            plot::emit_clip_plots(&clip, &dir.join("plots"))?;
        }
        written.push(manifest);
    }
    Ok(written)
}

/// Scores generated clips against references. Writes `report.json` and
/// `clips.csv` into `out`.
pub fn cmd_eval(cfg: &RunConfig, pred: &Path, reference: &Path, models: &Path, out: &Path) -> Result<MetricReport> {
    let dir = fgd_dir(models);
    if !dir.join("speaker").join("config.json").is_file() {
        return Err(dyadmo::Error::MissingCheckpoint {
            part: "fgd".into(),
            path: dir,
        }
        .into());
    }
    let suite = FgdSuite::load(&dir)?;
    let pred = load_training_corpus(pred)?;
    let reference = load_training_corpus(reference)?;
    let (report, rows) = evaluate(&pred, &reference, &suite, &cfg.metrics)?;
    write_json(&out.join("report.json"), &report)?;
    let path = out.join("clips.csv");
    let mut f = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    writeln!(f, "{}", ClipMetrics::CSV_HEADER).map_err(|e| CliError::io(&path, e))?;
    for r in &rows {
        writeln!(f, "{}", r.csv_row()).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(report)
}

/// The generator checkpoint under `models`, for inspection.
pub fn load_generator(models: &Path) -> Result<GenCheckpoint> {
    Ok(GenCheckpoint::load(dyadgen::generator_dir(models))?)
}
