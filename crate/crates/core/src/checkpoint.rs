//! Binary checkpoint format.
//!
//! See `docs/checkpoint-format.md` for the byte layout. Files are written to a
//! temporary sibling and renamed into place; loads validate the whole file
//! before any parameter is touched.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParamStore;
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{DType, Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 6] = b"RFBSR\0";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Init,
    Psnr,
    Gan,
    Ensemble,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Init => 0,
            Stage::Psnr => 1,
            Stage::Gan => 2,
            Stage::Ensemble => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Stage::Init,
            1 => Stage::Psnr,
            2 => Stage::Gan,
            3 => Stage::Ensemble,
            _ => return None,
        })
    }
}

/// Training metadata. Not part of the architecture fingerprint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Meta {
    /// Number of completed generator steps.
    pub step: u64,
    pub stage: Stage,
    pub seed: u64,
    /// Steps of the checkpoints an ensemble was averaged from.
    pub source_steps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl EntryData {
    pub fn dtype(&self) -> DType {
        match self {
            EntryData::F32(_) => DType::F32,
            EntryData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            EntryData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            EntryData::F64(v) => v.clone(),
        }
    }

    /// Rounds `values` to `dtype`.
    pub fn from_f64(values: &[f64], dtype: DType) -> Self {
        match dtype {
            DType::F32 => EntryData::F32(values.iter().map(|&x| x as f32).collect()),
            DType::F64 => EntryData::F64(values.to_vec()),
        }
    }

    fn of<T: Scalar>(data: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => EntryData::F32(data.iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => EntryData::F64(data.iter().map(|v| v.as_f64()).collect()),
        }
    }

    fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        match self {
            EntryData::F32(v) => v.iter().map(|&x| T::of_f64(x as f64)).collect(),
            EntryData::F64(v) => v.iter().map(|&x| T::of_f64(x)).collect(),
        }
    }
}

/// One named tensor with its logical dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn from_tensor<T: Scalar>(dims: &[usize], t: &Tensor<T>) -> Self {
        Entry {
            dims: dims.to_vec(),
            data: EntryData::of(t.data()),
        }
    }

    /// Tensor view with trailing dimensions padded to rank 4.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_vec(dims_to_shape(&self.dims)?, self.data.to_scalars())
    }
}

fn dims_to_shape(dims: &[usize]) -> Result<Shape> {
    if dims.len() > 4 {
        return Err(CheckpointError::Malformed(format!("rank {} exceeds 4", dims.len())).into());
    }
    let mut full = [1usize; 4];
    full[..dims.len()].copy_from_slice(dims);
    Ok(Shape::from(full))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub meta: Meta,
    pub entries: BTreeMap<String, Entry>,
}

/// Outcome of loading a checkpoint into a parameter store.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadSummary {
    pub loaded: usize,
    /// Store parameters left at their previous values (forced loads only).
    pub skipped: Vec<String>,
    /// Checkpoint entries with no usable counterpart (forced loads only).
    pub ignored: Vec<String>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, fingerprint: [u8; 32], meta: Meta) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| (p.name().to_string(), Entry::from_tensor(p.dims(), p.value())))
            .collect();
        Checkpoint {
            fingerprint,
            meta,
            entries,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&self.meta.step.to_le_bytes());
        out.push(self.meta.stage.tag());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&(self.meta.source_steps.len() as u32).to_le_bytes());
        for s in &self.meta.source_steps {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.data.dtype().tag());
            out.push(entry.dims.len() as u8);
            for &d in &entry.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &entry.data {
                EntryData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                EntryData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 2 + 8 {
            return Err(CheckpointError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = checksum(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::UnknownVersion(version));
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
        let step = r.u64()?;
        let stage = Stage::from_tag(r.u8()?).ok_or_else(|| CheckpointError::Malformed("unknown stage tag".into()))?;
        let seed = r.u64()?;
        let n_sources = r.u32()? as usize;
        let source_steps = (0..n_sources).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        let mut previous: Option<String> = None;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?;
            if previous.as_ref().is_some_and(|p| *p >= name) {
                return Err(CheckpointError::Malformed(format!(
                    "entry `{name}` out of order or duplicated"
                )));
            }
            let dtype = DType::from_tag(r.u8()?)
                .ok_or_else(|| CheckpointError::Malformed(format!("unknown dtype for `{name}`")))?;
            let rank = r.u8()? as usize;
            if rank > 4 {
                return Err(CheckpointError::Malformed(format!("rank {rank} for `{name}`")));
            }
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| CheckpointError::Malformed(format!("bad dims {dims:?} for `{name}`")))?;
            let payload = r.take(numel.checked_mul(dtype.size()).ok_or(CheckpointError::Truncated)?)?;
            let data = match dtype {
                DType::F32 => EntryData::F32(payload.chunks_exact(4).map(f32::read_le).collect()),
                DType::F64 => EntryData::F64(payload.chunks_exact(8).map(f64::read_le).collect()),
            };
            previous = Some(name.clone());
            entries.insert(name, Entry { dims, data });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes after last entry".into()));
        }
        Ok(Checkpoint {
            fingerprint,
            meta: Meta {
                step,
                stage,
                seed,
                source_steps,
            },
            entries,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Writes atomically: a temporary file in the target directory is
    /// renamed over `path`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    /// Tensors keyed by name, converted to `T`.
    pub fn tensors<T: Scalar>(&self) -> Result<BTreeMap<String, Tensor<T>>> {
        self.entries
            .iter()
            .map(|(name, e)| Ok((name.clone(), e.to_tensor()?)))
            .collect()
    }

    /// Copies checkpoint values into `store`.
    ///
    /// Without `force` the fingerprint must equal `fingerprint` and the name
    /// and shape sets must match exactly; the first offending parameter (in
    /// name order) is reported. With `force` the name/shape intersection is
    /// loaded. Either way `store` is untouched when an error is returned.
    pub fn load_into<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        fingerprint: &[u8; 32],
        force: bool,
    ) -> Result<LoadSummary> {
        if !force && self.fingerprint != *fingerprint {
            return Err(CheckpointError::FingerprintMismatch.into());
        }
        let mut params: Vec<_> = store
            .iter()
            .map(|(id, p)| (p.name().to_string(), id, p.dims().to_vec()))
            .collect();
        params.sort();
        let mut summary = LoadSummary::default();
        let mut updates = Vec::new();
        for (name, id, dims) in &params {
            match self.entries.get(name) {
                None if force => summary.skipped.push(name.clone()),
                None => return Err(CheckpointError::MissingParameter(name.clone()).into()),
                Some(e) if e.dims != *dims => {
                    if force {
                        summary.skipped.push(name.clone());
                        summary.ignored.push(name.clone());
                    } else {
                        return Err(CheckpointError::ShapeMismatch {
                            name: name.clone(),
                            expected: dims.clone(),
                            found: e.dims.clone(),
                        }
                        .into());
                    }
                }
                Some(e) => updates.push((*id, e.to_tensor::<T>()?)),
            }
        }
        for name in self.entries.keys() {
            if store.id_of(name).is_none() {
                if force {
                    summary.ignored.push(name.clone());
                } else {
                    return Err(CheckpointError::UnexpectedParameter(name.clone()).into());
                }
            }
        }
        summary.ignored.sort();
        summary.loaded = updates.len();
        for (id, value) in updates {
            store.set_value(id, value)?;
        }
        Ok(summary)
    }
}

/// First eight bytes of SHA-256, little-endian.
pub fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
