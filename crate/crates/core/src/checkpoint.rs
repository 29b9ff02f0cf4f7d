//! Binary container for trained models and adversarial batches.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "STPA" | u32 version | u32 len | descriptor (UTF-8, `key = value` lines)
//! u32 tensor count | per tensor: u32 len | name | u32 rank | u32 dims.. | f32 data..
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::keys::Key;
use crate::model::{ArchDescriptor, InstrumentedModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STPA";
pub const VERSION: u32 = 1;

/// Header fields plus named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn field(&self, name: &str) -> Result<&str> {
        self.header
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::Mismatch(format!("container has no `{name}` field")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Mismatch(format!("container has no tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.header {
            text.push_str(k);
            text.push_str(" = ");
            text.push_str(v);
            text.push('\n');
        }
        put_bytes(&mut out, text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Mismatch(format!(
                "{}: container version {version}, this build reads {VERSION}",
                path.display()
            )));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.err("descriptor is not UTF-8"))?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| r.err(format!("malformed descriptor line `{line}`")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.err("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

/// Summary written alongside trained weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub lambda: f64,
    pub final_accuracy: f64,
    pub final_fpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: InstrumentedModel,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(model: InstrumentedModel, meta: TrainingMeta) -> Self {
        Self { model, meta }
    }

    pub fn to_container(&self) -> Container {
        let mut header = BTreeMap::new();
        let mut put = |k: &str, v: String| header.insert(k.to_string(), v);
        put("kind", "model".into());
        put("arch", self.model.descriptor().render());
        put("key", self.model.key().map_or("none".into(), |k| k.spec().to_string()));
        put("epochs", self.meta.epochs.to_string());
        put("seed", self.meta.seed.to_string());
        put("lambda", format!("{:e}", self.meta.lambda));
        put("final_accuracy", format!("{:e}", self.meta.final_accuracy));
        put("final_fpr", format!("{:e}", self.meta.final_fpr));
        let tensors = self
            .model
            .params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Container { header, tensors }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.field("kind")? != "model" {
            return Err(Error::Mismatch(format!("expected a model, found `{}`", c.field("kind")?)));
        }
        let descriptor = ArchDescriptor::parse(c.field("arch")?)?;
        let key = match c.field("key")? {
            "none" => None,
            spec => Some(Key::parse(spec)?),
        };
        let mut model = InstrumentedModel::build(descriptor, key, 0)?;
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        if names.len() != c.tensors.len() {
            return Err(Error::Mismatch(format!(
                "architecture has {} parameter tensors, checkpoint has {}",
                names.len(),
                c.tensors.len()
            )));
        }
        for (slot, name) in model.params_mut().into_iter().zip(&names) {
            let stored = c.tensor(name)?;
            if stored.shape() != slot.shape() {
                return Err(Error::Mismatch(format!(
                    "`{name}` has shape {:?}, architecture expects {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored.clone();
        }
        let num = |k: &str| -> Result<f64> {
            c.field(k)?
                .parse()
                .map_err(|_| Error::Mismatch(format!("field `{k}` is not a number")))
        };
        let meta = TrainingMeta {
            epochs: num("epochs")? as usize,
            seed: c
                .field("seed")?
                .parse()
                .map_err(|_| Error::Mismatch("field `seed` is not an integer".into()))?,
            lambda: num("lambda")?,
            final_accuracy: num("final_accuracy")?,
            final_fpr: num("final_fpr")?,
        };
        Ok(Self { model, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn sample() -> Checkpoint {
        let model = build_model("lenet5", Some(Key::parse("0.1x^2-x+2<3").unwrap()), 5).unwrap();
        Checkpoint::new(
            model,
            TrainingMeta {
                epochs: 3,
                seed: 5,
                lambda: 0.01,
                final_accuracy: 0.9871,
                final_fpr: 0.003,
            },
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stpa");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model.key().unwrap().spec(), "0.1x^2-1x+2<3");
        let x = Tensor::from_fn(&[3, 1, 28, 28], |i| (i % 17) as f32 / 17.0);
        let a = ck.model.logits(&x).unwrap();
        let b = back.model.logits(&x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(fs::read(&path).unwrap(), back.to_container().to_bytes());
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let bytes = sample().to_container().to_bytes();
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad, p), Err(Error::Format { .. })));
        let mut newer = bytes.clone();
        newer[4] = 9;
        assert!(matches!(Container::from_bytes(&newer, p), Err(Error::Mismatch(_))));
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Container::from_bytes(&long, p).is_err());
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let mut c = sample().to_container();
        c.header.insert("key".into(), "none".into());
        assert!(matches!(Checkpoint::from_container(&c), Err(Error::Mismatch(_))));
        let mut c = sample().to_container();
        c.tensors[0].1 = Tensor::zeros(&[2]);
        assert!(matches!(Checkpoint::from_container(&c), Err(Error::Mismatch(_))));
    }
}
