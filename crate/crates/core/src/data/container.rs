//! Binary container shared by checkpoints, corpora and feature files.
//!
//! Layout (little endian): magic `FS2S`, version `u16`, config hash `u64`,
//! entry count `u32`, then per entry: name length `u16`, name bytes, rank `u8`,
//! each dim as `u32`, dtype `u8` (0 f32, 1 f64, 2 bytes), payload.

use std::fs;
use std::path::Path;

use super::{ParallelCorpus, Utterance};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FS2S";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::Bytes(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Entry {
    pub fn tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = if T::NAME == "f32" {
            ArrayData::F32(t.cast::<f32>().into_data())
        } else {
            ArrayData::F64(t.cast::<f64>().into_data())
        };
        Self { name: name.into(), shape: t.shape().to_vec(), data }
    }

    pub fn bytes(name: impl Into<String>, bytes: &[u8]) -> Self {
        Self { name: name.into(), shape: vec![bytes.len()], data: ArrayData::Bytes(bytes.to_vec()) }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match &self.data {
            ArrayData::F32(v) => v.iter().map(|x| T::of(*x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|x| T::of(*x)).collect(),
            ArrayData::Bytes(_) => return Err(Error::Format(format!("entry {} holds bytes, not numbers", self.name))),
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn to_text(&self) -> Result<String> {
        match &self.data {
            ArrayData::Bytes(b) => String::from_utf8(b.clone()).map_err(|_| Error::Format(format!("entry {} is not UTF-8", self.name))),
            _ => Err(Error::Format(format!("entry {} is not text", self.name))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config_hash: u64,
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated file: needed {n} bytes at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Container {
    pub fn new(config_hash: u64) -> Self {
        Self { config_hash, entries: Vec::new() }
    }

    pub fn push(&mut self, e: Entry) {
        self.entries.push(e);
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries.iter().find(|e| e.name == name).ok_or_else(|| Error::Format(format!("missing entry {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("entry name too long: {}", e.name)))?;
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::Format(format!("entry {} shape does not match its data", e.name)));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(u8::try_from(e.shape.len()).map_err(|_| Error::Format("rank above 255".into()))?);
            for d in &e.shape {
                let d = u32::try_from(*d).map_err(|_| Error::Format("dimension above u32".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                ArrayData::F32(v) => {
                    out.push(0);
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                ArrayData::F64(v) => {
                    out.push(1);
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                ArrayData::Bytes(v) => {
                    out.push(2);
                    out.extend_from_slice(v);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a container file".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let config_hash = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match r.u8()? {
                0 => ArrayData::F32(r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
                1 => ArrayData::F64(r.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
                2 => ArrayData::Bytes(r.take(n)?.to_vec()),
                other => return Err(Error::Format(format!("unknown dtype code {other} in entry {name}"))),
            };
            entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config_hash, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// A deserialised model checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

pub fn checkpoint_container<T: Scalar>(kind: &str, config: &ModelConfig, store: &ParamStore<T>) -> Container {
    let mut c = Container::new(config.hash());
    c.push(Entry::bytes("meta/kind", kind.as_bytes()));
    c.push(Entry::bytes("meta/config", config.canonical().as_bytes()));
    for e in store.entries() {
        c.push(Entry::tensor(format!("param/{}", e.name), &e.value));
    }
    c
}

pub fn save_checkpoint<T: Scalar>(path: &Path, kind: &str, config: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    checkpoint_container(kind, config, store).save(path)
}

/// Loads a checkpoint; with `expected`, its configuration must hash identically.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let c = Container::load(path)?;
    let kind = c.get("meta/kind")?.to_text()?;
    let config = ModelConfig::from_canonical(&c.get("meta/config")?.to_text()?)?;
    if config.hash() != c.config_hash {
        return Err(Error::Format("header hash does not match the stored configuration".into()));
    }
    if let Some(exp) = expected {
        if exp.hash() != c.config_hash {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint config hash {:016x}, expected {:016x}",
                c.config_hash,
                exp.hash()
            )));
        }
    }
    let mut store = ParamStore::new();
    for e in &c.entries {
        if let Some(name) = e.name.strip_prefix("param/") {
            store.add(name, e.to_tensor()?);
        }
    }
    Ok(Checkpoint { kind, config, store })
}

pub fn save_corpus(path: &Path, corpus: &ParallelCorpus, config_hash: u64) -> Result<()> {
    let mut c = Container::new(config_hash);
    c.push(Entry::tensor::<f64>("meta/classes", &Tensor::from_f64(1, 1, &[corpus.classes as f64])?));
    for (s, t) in &corpus.pairs {
        let p = format!("pair/{}", s.id);
        c.push(Entry::tensor::<f64>(format!("{p}/classes"), &Tensor::from_f64(1, 2, &[s.class as f64, t.class as f64])?));
        c.push(Entry::tensor(format!("{p}/source"), &s.features));
        c.push(Entry::tensor(format!("{p}/target"), &t.features));
        if let Some(w) = &t.warp {
            c.push(Entry::tensor(format!("{p}/warp"), &Tensor::new(vec![w.len()], w.clone())?));
        }
    }
    c.save(path)
}

pub fn load_corpus(path: &Path) -> Result<ParallelCorpus> {
    let c = Container::load(path)?;
    let classes = c.get("meta/classes")?.to_tensor::<f64>()?.data()[0] as usize;
    let mut pairs: Vec<(Utterance, Utterance)> = Vec::new();
    for e in &c.entries {
        let Some(rest) = e.name.strip_prefix("pair/") else { continue };
        let Some((id, field)) = rest.rsplit_once('/') else {
            return Err(Error::Format(format!("bad corpus entry {}", e.name)));
        };
        match field {
            "classes" => {
                let k = e.to_tensor::<f64>()?;
                let blank = |class: f64| Utterance { id: id.to_string(), class: class as usize, features: Tensor::zeros(&[0, 0]), warp: None };
                pairs.push((blank(k.data()[0]), blank(k.data()[1])));
            }
            "source" | "target" | "warp" => {
                let pair = pairs
                    .last_mut()
                    .filter(|p| p.0.id == id)
                    .ok_or_else(|| Error::Format(format!("entry {} precedes its classes", e.name)))?;
                match field {
                    "source" => pair.0.features = e.to_tensor()?,
                    "target" => pair.1.features = e.to_tensor()?,
                    _ => pair.1.warp = Some(e.to_tensor::<f64>()?.into_data()),
                }
            }
            other => return Err(Error::Format(format!("unknown corpus field {other}"))),
        }
    }
    let corpus = ParallelCorpus { classes, pairs };
    corpus.validate()?;
    Ok(corpus)
}

/// Feature file: one `D×T` sequence and its stacking factor.
pub fn save_features<T: Scalar>(path: &Path, features: &Tensor<T>, reduction: usize) -> Result<()> {
    let mut c = Container::new(0);
    c.push(Entry::tensor("meta/reduction", &Tensor::<f64>::from_f64(1, 1, &[reduction as f64])?));
    c.push(Entry::tensor("features", features));
    c.save(path)
}

pub fn load_features<T: Scalar>(path: &Path) -> Result<(Tensor<T>, usize)> {
    let c = Container::load(path)?;
    let r = c.get("meta/reduction")?.to_tensor::<f64>()?.data()[0] as usize;
    let f = c.get("features")?.to_tensor()?;
    f.expect_matrix("features")?;
    Ok((f, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_corpus_generate, SynthConfig};

    #[test]
    fn bytes_round_trip_and_corruption() {
        let mut c = Container::new(42);
        c.push(Entry::tensor::<f64>("a", &Tensor::from_f64(2, 2, &[1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()));
        c.push(Entry::tensor("b", &Tensor::<f32>::from_fn(1, 3, |_, c| c as f32 * 0.1)));
        c.push(Entry::bytes("t", b"hello"));
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format(_))));
        let mut badv = bytes.clone();
        badv[4] = 9;
        assert!(Container::from_bytes(&badv).is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let cfg = ModelConfig { bands: 2, reduction: 2, context: 4, embedding: 2, dilations: vec![1, 2], ..ModelConfig::default() };
        let teacher = crate::model::TeacherModel::<f64>::new(cfg.clone(), 3).unwrap();
        save_checkpoint(&p, "teacher", &cfg, &teacher.store).unwrap();
        let ck = load_checkpoint::<f64>(&p, Some(&cfg)).unwrap();
        assert_eq!(ck.kind, "teacher");
        assert_eq!(ck.config, cfg);
        for (a, b) in ck.store.entries().iter().zip(teacher.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let other = ModelConfig { context: 6, ..cfg };
        assert!(matches!(load_checkpoint::<f64>(&p, Some(&other)), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn corpus_and_features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { pairs_per_class_pair: 2, length_range: (5, 8), bands: 3, reduction: 2, ..SynthConfig::default() };
        let corpus = synth_corpus_generate(&cfg).unwrap();
        let p = dir.path().join("c.fs2s");
        save_corpus(&p, &corpus, 7).unwrap();
        assert_eq!(load_corpus(&p).unwrap(), corpus);
        let f = dir.path().join("f.fs2s");
        let x = corpus.pairs[0].0.features.cast::<f32>();
        save_features(&f, &x, 2).unwrap();
        let (back, r) = load_features::<f32>(&f).unwrap();
        assert_eq!((back, r), (x, 2));
    }
}
