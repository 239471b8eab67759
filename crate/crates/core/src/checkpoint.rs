//! Little-endian binary containers for training checkpoints and exported
//! encoder bundles.
//!
//! Layout: 8-byte magic, `u64` length + UTF-8 config document, `u64` array
//! count, then per array `u32` name length, name, `u8` dtype tag, `u32`
//! rank, `u64` dims, `u64` byte offset into the data section. The data
//! section follows the table.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::distiller::{ModelConfig, TEACHER_PREFIXES};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BIJOUCK1";
pub const BUNDLE_MAGIC: &[u8; 8] = b"BIJOUEN1";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn tag(&self) -> u8 {
        match self {
            ArrayData::F64(_) => 0,
            ArrayData::U64(_) => 1,
            ArrayData::U8(_) => 2,
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len() * 8,
            ArrayData::U64(v) => v.len() * 8,
            ArrayData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

pub fn encode_container(magic: &[u8; 8], doc: &str, arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&(doc.len() as u64).to_le_bytes());
    out.extend_from_slice(doc.as_bytes());
    out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for a in arrays {
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.push(a.data.tag());
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += a.data.byte_len() as u64;
    }
    for a in arrays {
        match &a.data {
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U8(v) => out.extend_from_slice(v),
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("container is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length does not fit in memory".into()))
    }
}

/// Parses a container, checking the magic. A magic with the right family
/// but another version yields an error naming both versions.
pub fn decode_container(magic: &[u8; 8], bytes: &[u8]) -> Result<(String, Vec<NamedArray>)> {
    let mut c = Cursor { bytes, pos: 0 };
    let found = c.take(8)?;
    if found != magic {
        if found[..7] == magic[..7] {
            return Err(Error::Format(format!(
                "{} format version {} is not supported (this build reads version {})",
                String::from_utf8_lossy(&magic[..7]),
                found[7] as char,
                magic[7] as char
            )));
        }
        return Err(Error::Format(format!(
            "not a {} file (magic {:?})",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(found)
        )));
    }
    let doc_len = c.len()?;
    let doc = std::str::from_utf8(c.take(doc_len)?)
        .map_err(|_| Error::Format("config document is not UTF-8".into()))?
        .to_string();
    let count = c.len()?;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?
            .to_string();
        let tag = c.u8()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let offset = c.len()?;
        table.push((name, tag, shape, offset));
    }
    let data = &bytes[c.pos..];
    let mut arrays = Vec::with_capacity(table.len());
    for (name, tag, shape, offset) in table {
        let width = if tag == 2 { 1 } else { 8 };
        let raw = shape
            .iter()
            .try_fold(width, |acc: usize, &d| acc.checked_mul(d))
            .and_then(|bytes| offset.checked_add(bytes))
            .filter(|&e| e <= data.len())
            .map(|e| &data[offset..e])
            .ok_or_else(|| Error::Format(format!("array {name} lies outside the data section")))?;
        let words = || raw.chunks_exact(8).map(|w| w.try_into().expect("8 bytes"));
        let payload = match tag {
            0 => ArrayData::F64(words().map(f64::from_le_bytes).collect()),
            1 => ArrayData::U64(words().map(u64::from_le_bytes).collect()),
            2 => ArrayData::U8(raw.to_vec()),
            t => return Err(Error::Format(format!("array {name} has unknown dtype tag {t}"))),
        };
        arrays.push(NamedArray { name, shape, data: payload });
    }
    Ok((doc, arrays))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn param_arrays<'a>(prefix: &str, params: &'a ParamSet) -> impl Iterator<Item = NamedArray> + 'a {
    let prefix = prefix.to_string();
    params.iter().map(move |p| NamedArray {
        name: format!("{prefix}{}", p.name),
        shape: p.shape.clone(),
        data: ArrayData::F64(p.value.clone()),
    })
}

fn decay_flags(params: &ParamSet) -> NamedArray {
    NamedArray {
        name: "meta.decay".into(),
        shape: vec![params.len()],
        data: ArrayData::U8(params.iter().map(|p| u8::from(p.decay)).collect()),
    }
}

fn take_params(arrays: &[NamedArray], prefix: &str, decay: &[u8]) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    for a in arrays.iter().filter(|a| a.name.starts_with(prefix)) {
        let ArrayData::F64(v) = &a.data else {
            return Err(Error::Format(format!("{} must hold f64 values", a.name)));
        };
        let flag = decay.get(ps.len()).map_or(true, |&f| f != 0);
        ps.insert(&a.name[prefix.len()..], &a.shape, v.clone(), flag)?;
    }
    Ok(ps)
}

fn find<'a>(arrays: &'a [NamedArray], name: &str) -> Result<&'a ArrayData> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .map(|a| &a.data)
        .ok_or_else(|| Error::Format(format!("missing array {name}")))
}

fn u64s<'a>(arrays: &'a [NamedArray], name: &str, len: usize) -> Result<&'a [u64]> {
    match find(arrays, name)? {
        ArrayData::U64(v) if v.len() == len => Ok(v),
        _ => Err(Error::Format(format!("{name} must hold {len} u64 values"))),
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed optimizer updates.
    pub step: u64,
    pub student: ParamSet,
    pub teacher: ParamSet,
    /// Last EMA decay applied.
    pub tau: f64,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = vec![
            NamedArray { name: "meta.step".into(), shape: vec![1], data: ArrayData::U64(vec![self.step]) },
            NamedArray { name: "meta.tau".into(), shape: vec![1], data: ArrayData::F64(vec![self.tau]) },
            NamedArray { name: "rng.seed".into(), shape: vec![32], data: ArrayData::U8(self.rng.get_seed().to_vec()) },
            NamedArray {
                name: "rng.word_pos".into(),
                shape: vec![2],
                data: {
                    let w = self.rng.get_word_pos();
                    ArrayData::U64(vec![w as u64, (w >> 64) as u64])
                },
            },
            NamedArray { name: "rng.stream".into(), shape: vec![1], data: ArrayData::U64(vec![self.rng.get_stream()]) },
            decay_flags(&self.student),
        ];
        arrays.extend(param_arrays("student/", &self.student));
        arrays.extend(param_arrays("teacher/", &self.teacher));
        for (i, p) in self.student.iter().enumerate() {
            for (kind, buf) in [("adam.m/", &self.adam.m[i]), ("adam.v/", &self.adam.v[i])] {
                arrays.push(NamedArray {
                    name: format!("{kind}{}", p.name),
                    shape: p.shape.clone(),
                    data: ArrayData::F64(buf.clone()),
                });
            }
        }
        encode_container(CHECKPOINT_MAGIC, &self.config.to_document(), &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        use rand::SeedableRng;
        let (doc, arrays) = decode_container(CHECKPOINT_MAGIC, bytes)?;
        let config = TrainConfig::parse(&doc)?;
        let step = u64s(&arrays, "meta.step", 1)?[0];
        let tau = match find(&arrays, "meta.tau")? {
            ArrayData::F64(v) if v.len() == 1 => v[0],
            _ => return Err(Error::Format("meta.tau must hold one f64".into())),
        };
        let decay = match find(&arrays, "meta.decay")? {
            ArrayData::U8(v) => v.clone(),
            _ => return Err(Error::Format("meta.decay must hold u8 flags".into())),
        };
        let student = take_params(&arrays, "student/", &decay)?;
        let mut teacher = take_params(&arrays, "teacher/", &[])?;
        for p in teacher.iter_mut() {
            p.decay = student.get(&p.name).is_some_and(|s| s.decay);
        }
        let mut adam = AdamState::zeros(&student);
        for (i, p) in student.iter().enumerate() {
            for (kind, buf) in [("adam.m/", &mut adam.m[i]), ("adam.v/", &mut adam.v[i])] {
                match find(&arrays, &format!("{kind}{}", p.name))? {
                    ArrayData::F64(v) if v.len() == buf.len() => buf.copy_from_slice(v),
                    _ => return Err(Error::Format(format!("{kind}{} has the wrong size", p.name))),
                }
            }
        }
        let seed: [u8; 32] = match find(&arrays, "rng.seed")? {
            ArrayData::U8(v) => v.as_slice().try_into().map_err(|_| Error::Format("rng.seed must hold 32 bytes".into()))?,
            _ => return Err(Error::Format("rng.seed must hold bytes".into())),
        };
        let pos = u64s(&arrays, "rng.word_pos", 2)?;
        let stream = u64s(&arrays, "rng.stream", 1)?[0];
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from(pos[0]) | (u128::from(pos[1]) << 64));
        Ok(Self { config, step, student, teacher, tau, adam, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Pre-net plus student encoder, the part that downstream tasks reuse.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBundle {
    pub config: TrainConfig,
    pub params: ParamSet,
}

impl EncoderBundle {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self { config: ckpt.config.clone(), params: ckpt.student.subset(&TEACHER_PREFIXES) }
    }

    pub fn model(&self) -> &ModelConfig {
        &self.config.model
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = vec![decay_flags(&self.params)];
        arrays.extend(param_arrays("encoder/", &self.params));
        encode_container(BUNDLE_MAGIC, &self.config.to_document(), &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (doc, arrays) = decode_container(BUNDLE_MAGIC, bytes)?;
        let config = TrainConfig::parse(&doc)?;
        let decay = match find(&arrays, "meta.decay")? {
            ArrayData::U8(v) => v.clone(),
            _ => return Err(Error::Format("meta.decay must hold u8 flags".into())),
        };
        let params = take_params(&arrays, "encoder/", &decay)?;
        let expected = config.model.encoder_param_count();
        if params.scalar_count() != expected {
            return Err(Error::Format(format!(
                "bundle holds {} values, the configured encoder needs {expected}",
                params.scalar_count()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
