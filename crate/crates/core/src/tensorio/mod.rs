//! Persistence: the `MTSR` binary tensor container, clip manifests, and
//! checkpoint bundles.
//!
//! An `MTSR` file is laid out as
//!
//! ```text
//! "MTSR" | version: u32 | dtype: u8 | rank: u8 | dims: rank x u32 | payload
//! ```
//!
//! with every multi-byte quantity little-endian and the payload stored
//! row-major.

mod bundle;
mod manifest;

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use bundle::TensorBundle;
pub(crate) use bundle::{read_json, write_json};
pub use manifest::{list_manifests, load_clip, save_clip, ClipManifest, FeatureFiles, MotionFiles, MANIFEST_FILE_NAME};

pub const MAGIC: &[u8; 4] = b"MTSR";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_FIXED_LEN: usize = 4 + 4 + 1 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    I32 = 3,
    I64 = 4,
    U8 = 5,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::I32),
            4 => Some(DType::I64),
            5 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
            TensorData::I64(_) => DType::I64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I64 => TensorData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(bytes.to_vec()),
        }
    }
}

/// Equality is bitwise so NaN payloads compare equal to themselves.
impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I32(a), TensorData::I32(b)) => a == b,
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for TensorData {}

/// A dense row-major tensor with its shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorBlob {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorBlob {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::shape("tensor", "rank must be at least 1"));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::shape("tensor", format!("rank {} exceeds 255", shape.len())));
        }
        if let Some(d) = shape.iter().find(|&&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::shape(
                "tensor",
                format!("dimension {d} out of range in shape {shape:?}"),
            ));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {count} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    /// Stores a `(rows, cols)` matrix as-is.
    pub fn from_array2(a: &Array2<f32>) -> Result<Self> {
        let (r, c) = a.dim();
        Self::from_f32(vec![r, c], a.iter().copied().collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    /// Interprets a rank-2 float32 blob as a matrix.
    pub fn to_array2(&self, track: &str) -> Result<Array2<f32>> {
        let data = self
            .as_f32()
            .ok_or_else(|| Error::shape(track, format!("expected f32, found {:?}", self.dtype())))?;
        if self.shape.len() != 2 {
            return Err(Error::shape(
                track,
                format!("expected rank 2, found shape {:?}", self.shape),
            ));
        }
        Ok(Array2::from_shape_vec((self.shape[0], self.shape[1]), data.to_vec())
            .expect("shape validated at construction"))
    }

    pub fn encode(&self) -> Vec<u8> {
        let elem = self.dtype().size_in_bytes();
        let mut out = Vec::with_capacity(HEADER_FIXED_LEN + 4 * self.shape.len() + elem * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        self.data.write_le(&mut out);
        out
    }

    /// Parses an encoded blob; `path` is only used for error context.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |field: &'static str, detail: String| Error::Format {
            path: path.to_path_buf(),
            field,
            detail,
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            let found = &bytes[..bytes.len().min(4)];
            return Err(fail("magic", format!("expected \"MTSR\", found {found:?}")));
        }
        if bytes.len() < 8 {
            return Err(fail("version", "file ends inside header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(fail("version", format!("unsupported version {version}")));
        }
        let dtype_code = *bytes
            .get(8)
            .ok_or_else(|| fail("dtype", "file ends inside header".into()))?;
        let dtype =
            DType::from_code(dtype_code).ok_or_else(|| fail("dtype", format!("unknown dtype code {dtype_code}")))?;
        let rank = *bytes
            .get(9)
            .ok_or_else(|| fail("rank", "file ends inside header".into()))? as usize;
        if rank == 0 {
            return Err(fail("rank", "rank must be at least 1".into()));
        }
        let dims_end = HEADER_FIXED_LEN + 4 * rank;
        if bytes.len() < dims_end {
            return Err(fail("dims", format!("expected {rank} dimensions, file truncated")));
        }
        let shape: Vec<usize> = bytes[HEADER_FIXED_LEN..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if shape.contains(&0) {
            return Err(fail("dims", format!("zero-sized dimension in {shape:?}")));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fail("dims", format!("element count overflows for {shape:?}")))?;
        let expected = count
            .checked_mul(dtype.size_in_bytes())
            .ok_or_else(|| fail("dims", format!("payload size overflows for {shape:?}")))?;
        let payload = &bytes[dims_end..];
        if payload.len() < expected {
            return Err(fail(
                "payload",
                format!("truncated: expected {expected} bytes, found {}", payload.len()),
            ));
        }
        if payload.len() > expected {
            return Err(fail(
                "payload",
                format!(
                    "{} trailing bytes after {expected}-byte payload",
                    payload.len() - expected
                ),
            ));
        }
        Ok(Self {
            shape,
            data: TensorData::read_le(dtype, payload),
        })
    }
}

pub fn write_tensor(blob: &TensorBlob, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, blob.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorBlob> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorBlob::decode(&bytes, path)
}

/// Writes a `(channels, frames)` matrix time-major, i.e. as `[frames, channels]`.
pub fn write_track(track: &Array2<f32>, path: impl AsRef<Path>) -> Result<()> {
    let t = track.t().as_standard_layout().into_owned();
    write_tensor(&TensorBlob::from_array2(&t)?, path)
}

/// Reads a time-major `[frames, channels]` tensor back into a
/// `(channels, frames)` matrix.
pub fn read_track(path: impl AsRef<Path>, track: &str) -> Result<Array2<f32>> {
    let blob = read_tensor(path)?;
    let m = blob.to_array2(track)?;
    Ok(m.t().as_standard_layout().into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eye.mtsr");
        let blob = TensorBlob::from_f32(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        write_tensor(&blob, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 4 + 4 + 1 + 1 + 8 + 16);
        assert_eq!(read_tensor(&path).unwrap(), blob);
    }

    #[test]
    fn motion_track_payload_size() {
        let blob = TensorBlob::from_f32(vec![88, 156], vec![0.5; 88 * 156]).unwrap();
        let bytes = blob.encode();
        assert_eq!(bytes.len() - (HEADER_FIXED_LEN + 8), 88 * 156 * 4);
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(TensorBlob::from_f32(vec![0], vec![]).is_err());
        assert!(TensorBlob::from_f32(vec![], vec![1.0]).is_err());
        assert!(TensorBlob::from_f32(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn bad_magic_names_field() {
        let mut bytes = TensorBlob::from_f32(vec![1], vec![1.0]).unwrap().encode();
        bytes[..4].copy_from_slice(b"XXXX");
        match TensorBlob::decode(&bytes, Path::new("x")) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let bytes = TensorBlob::from_f32(vec![3, 4], vec![1.0; 12]).unwrap().encode();
        for cut in [bytes.len() - 1, bytes.len() - 4, 12, 9, 5, 2] {
            let err = TensorBlob::decode(&bytes[..cut], Path::new("t")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
        match TensorBlob::decode(&bytes[..bytes.len() - 1], Path::new("t")) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "payload"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_dtype_checked() {
        let good = TensorBlob::from_f32(vec![1], vec![1.0]).unwrap().encode();
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        let mut bad_dtype = good.clone();
        bad_dtype[8] = 77;
        for (bytes, want) in [(bad_version, "version"), (bad_dtype, "dtype")] {
            match TensorBlob::decode(&bytes, Path::new("t")) {
                Err(Error::Format { field, .. }) => assert_eq!(field, want),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn track_is_stored_time_major() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track.mtsr");
        let m = Array2::from_shape_fn((3, 5), |(r, c)| (r * 10 + c) as f32);
        write_track(&m, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap().shape(), &[5, 3]);
        assert_eq!(read_track(&path, "t").unwrap(), m);
    }

    fn arb_blob() -> impl Strategy<Value = TensorBlob> {
        prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            let data = prop_oneof![
                prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n).prop_map(TensorData::F32),
                prop::collection::vec(any::<u64>().prop_map(f64::from_bits), n).prop_map(TensorData::F64),
                prop::collection::vec(any::<i32>(), n).prop_map(TensorData::I32),
                prop::collection::vec(any::<i64>(), n).prop_map(TensorData::I64),
                prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8),
            ];
            data.prop_map(move |d| TensorBlob::new(shape.clone(), d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(blob in arb_blob()) {
            let back = TensorBlob::decode(&blob.encode(), Path::new("p")).unwrap();
            prop_assert_eq!(back, blob);
        }
    }
}
