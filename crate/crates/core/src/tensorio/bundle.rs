use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{read_tensor, write_tensor, TensorBlob};
use crate::error::{Error, Result};

const TENSOR_DIR: &str = "tensors";
const INDEX_FILE: &str = "index.json";

/// Named tensors persisted as one `MTSR` file each under `<dir>/tensors/`,
/// plus a sorted name index. Checkpoints pair a bundle with a JSON config
/// sidecar in the same directory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TensorBundle {
    tensors: BTreeMap<String, TensorBlob>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, blob: TensorBlob) -> Result<()> {
        let name = name.into();
        if !valid_name(&name) {
            return Err(Error::InvalidInput(format!("invalid tensor name {name:?}")));
        }
        self.tensors.insert(name, blob);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorBlob> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorBlob> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorBlob)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let tdir = dir.as_ref().join(TENSOR_DIR);
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        for (name, blob) in &self.tensors {
            write_tensor(blob, tdir.join(format!("{name}.mtsr")))?;
        }
        let names: Vec<&String> = self.tensors.keys().collect();
        write_json(tdir.join(INDEX_FILE), &names)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let tdir = dir.as_ref().join(TENSOR_DIR);
        let names: Vec<String> = read_json(tdir.join(INDEX_FILE))?;
        let mut bundle = Self::new();
        for name in names {
            let blob = read_tensor(tdir.join(format!("{name}.mtsr")))?;
            bundle.insert(name, blob)?;
        }
        Ok(bundle)
    }
}

pub(crate) fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}
