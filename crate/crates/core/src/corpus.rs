use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::motion::DyadicClip;
use crate::tensorio::{list_manifests, load_clip, save_clip};

/// Loads every clip directory under `root`, in manifest path order.
pub fn load_corpus(root: impl AsRef<Path>) -> Result<Vec<DyadicClip>> {
    let manifests = list_manifests(root.as_ref())?;
    if manifests.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no clip manifests under {}",
            root.as_ref().display()
        )));
    }
    manifests.iter().map(load_clip).collect()
}

/// Writes each clip to `root/<clip_id>/`.
pub fn save_corpus(clips: &[DyadicClip], root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    clips
        .iter()
        .map(|c| save_clip(c, root.as_ref().join(&c.clip_id)))
        .collect()
}

/// Deterministic split: the last `ceil(n * val_fraction)` clips (at least one
/// when `n >= 2` and the fraction is positive) form the validation set.
pub fn split_corpus(clips: &[DyadicClip], val_fraction: f64) -> (&[DyadicClip], &[DyadicClip]) {
    let n = clips.len();
    let mut n_val = (n as f64 * val_fraction.clamp(0.0, 1.0)).ceil() as usize;
    if n >= 2 && val_fraction > 0.0 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = n_val.min(n.saturating_sub(1));
    }
    clips.split_at(n - n_val)
}
