use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::bundle::{read_json, write_json};
use super::{read_tensor, write_track};
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, DECOUPLED_DIM, MFCC_DIM, PHONEME_DIM, TEXT_DIM};
use crate::motion::{DyadicClip, MotionSequence, Part, Role, SHAPE_PARAMS};

pub const MANIFEST_FILE_NAME: &str = "manifest.json";

/// Paths of one participant's motion tracks, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionFiles {
    pub face: String,
    pub body: String,
    pub hand: String,
}

impl MotionFiles {
    fn get(&self, part: Part) -> &str {
        match part {
            Part::Face => &self.face,
            Part::Body => &self.body,
            Part::Hand => &self.hand,
        }
    }
}

/// Paths of the feature tracks. Text and phoneme are optional and are
/// zero-filled when absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFiles {
    pub mfcc: String,
    pub decoupled: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phoneme: Option<String>,
}

/// JSON description of one dyadic clip. Every referenced tensor is stored
/// time-major, so its leading dimension must equal `num_frames`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub clip_id: String,
    pub fps: f64,
    pub num_frames: usize,
    pub speaker_id: usize,
    pub num_identities: usize,
    pub speaker: MotionFiles,
    pub listener: MotionFiles,
    pub features: FeatureFiles,
    pub shape_params: [f32; SHAPE_PARAMS],
    pub camera_pose: [f32; 3],
    pub translation: [f32; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_onsets: Option<Vec<usize>>,
}

struct PendingTrack {
    name: String,
    path: PathBuf,
    rows: Option<usize>,
}

pub fn load_clip(manifest_path: impl AsRef<Path>) -> Result<DyadicClip> {
    let manifest_path = manifest_path.as_ref();
    let manifest: ClipManifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let id = manifest.clip_id.clone();

    let mut pending = Vec::new();
    for (role, files) in [(Role::Speaker, &manifest.speaker), (Role::Listener, &manifest.listener)] {
        for part in Part::ALL {
            pending.push(PendingTrack {
                name: format!("{}.{}", role.name(), part.name()),
                path: base.join(files.get(part)),
                rows: None,
            });
        }
    }
    let f = &manifest.features;
    pending.push(PendingTrack {
        name: "features.mfcc".into(),
        path: base.join(&f.mfcc),
        rows: Some(MFCC_DIM),
    });
    pending.push(PendingTrack {
        name: "features.decoupled".into(),
        path: base.join(&f.decoupled),
        rows: Some(DECOUPLED_DIM),
    });
    for (name, rel, rows) in [
        ("features.text", &f.text, TEXT_DIM),
        ("features.phoneme", &f.phoneme, PHONEME_DIM),
    ] {
        if let Some(rel) = rel {
            pending.push(PendingTrack {
                name: name.into(),
                path: base.join(rel),
                rows: Some(rows),
            });
        }
    }

    for track in &pending {
        if !track.path.is_file() {
            return Err(Error::MissingTrack {
                clip_id: id,
                track: track.name.clone(),
                path: track.path.clone(),
            });
        }
    }

    let mut mismatched = Vec::new();
    let mut loaded = Vec::with_capacity(pending.len());
    for track in &pending {
        let blob = read_tensor(&track.path)?;
        if blob.shape().len() != 2 {
            return Err(Error::shape(
                &track.name,
                format!("expected [frames, channels], found {:?}", blob.shape()),
            ));
        }
        if blob.shape()[0] != manifest.num_frames {
            mismatched.push(format!("{}={}", track.name, blob.shape()[0]));
        }
        if let Some(rows) = track.rows {
            if blob.shape()[1] != rows {
                return Err(Error::shape(
                    &track.name,
                    format!("expected {rows} channels, found {}", blob.shape()[1]),
                ));
            }
        }
        let m = blob.to_array2(&track.name)?;
        loaded.push(m.t().as_standard_layout().into_owned());
    }
    if !mismatched.is_empty() {
        return Err(Error::Consistency {
            clip_id: id,
            tracks: format!("expected {} frames; {}", manifest.num_frames, mismatched.join(", ")),
        });
    }

    let mut it = loaded.into_iter();
    let mut next = || it.next().expect("one matrix per pending track");
    let speaker = MotionSequence::new(Role::Speaker, next(), next(), next())?;
    let listener = MotionSequence::new(Role::Listener, next(), next(), next())?;
    let mfcc = next();
    let decoupled = next();
    let text = f.text.as_ref().map(|_| next());
    let phoneme = f.phoneme.as_ref().map(|_| next());
    let features = FeatureSequence::new(mfcc, decoupled, text, phoneme, manifest.fps)?;

    let clip = DyadicClip {
        clip_id: manifest.clip_id,
        fps: manifest.fps,
        speaker_id: manifest.speaker_id,
        num_identities: manifest.num_identities,
        speaker,
        listener,
        features,
        shape_params: manifest.shape_params,
        camera_pose: manifest.camera_pose,
        translation: manifest.translation,
        audio_onsets: manifest.audio_onsets,
    };
    clip.validate()?;
    Ok(clip)
}

/// Writes the clip's tensors and manifest into `dir`, returning the manifest path.
pub fn save_clip(clip: &DyadicClip, dir: impl AsRef<Path>) -> Result<PathBuf> {
    clip.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, m: &Array2<f32>| -> Result<String> {
        let file = format!("{name}.mtsr");
        write_track(m, dir.join(&file))?;
        Ok(file)
    };
    let motion_files = |m: &MotionSequence| -> Result<MotionFiles> {
        let role = m.role.name();
        Ok(MotionFiles {
            face: put(&format!("{role}_face"), &m.face)?,
            body: put(&format!("{role}_body"), &m.body)?,
            hand: put(&format!("{role}_hand"), &m.hand)?,
        })
    };
    let f = &clip.features;
    let manifest = ClipManifest {
        clip_id: clip.clip_id.clone(),
        fps: clip.fps,
        num_frames: clip.num_frames(),
        speaker_id: clip.speaker_id,
        num_identities: clip.num_identities,
        speaker: motion_files(&clip.speaker)?,
        listener: motion_files(&clip.listener)?,
        features: FeatureFiles {
            mfcc: put("mfcc", &f.mfcc)?,
            decoupled: put("decoupled", &f.decoupled)?,
            text: (!f.text_missing).then(|| put("text", &f.text)).transpose()?,
            phoneme: (!f.phoneme_missing).then(|| put("phoneme", &f.phoneme)).transpose()?,
        },
        shape_params: clip.shape_params,
        camera_pose: clip.camera_pose,
        translation: clip.translation,
        audio_onsets: clip.audio_onsets.clone(),
    };
    let path = dir.join(MANIFEST_FILE_NAME);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Manifests of every clip directory directly under `root`, sorted by path.
pub fn list_manifests(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let candidate = entry.path().join(MANIFEST_FILE_NAME);
        if candidate.is_file() {
            out.push(candidate);
        }
    }
    out.sort();
    Ok(out)
}
