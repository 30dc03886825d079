//! Binary checkpoint format. All integers are little-endian `u32`.
//!
//! ```text
//! magic        8 bytes  "DINTCKPT"
//! version      u32      = 1
//! config       u32 length + UTF-8 model config text
//! metadata     u32 count, then per entry: u32 length + key, u32 length + value
//! tensors      u32 count, then per tensor:
//!                u32 length + UTF-8 name
//!                u32 rank, rank × u32 extents
//!                numel × f32 little-endian values
//! ```
//!
//! Nothing may follow the last tensor.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"DINTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, metadata: Vec<(String, String)>) -> Self {
        Checkpoint {
            config: *model.config(),
            metadata,
            tensors: model.named_params().map(|(n, t)| (n.to_string(), t.cast())).collect(),
        }
    }

    pub fn into_model<T: Scalar>(self) -> Result<Model<T>> {
        let tensors = self.tensors.into_iter().map(|(n, t)| (n, t.cast())).collect();
        Model::from_tensors(self.config, tensors)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config.to_text());
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank() as u32);
            for &e in t.shape() {
                put_u32(&mut out, e as u32);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic bytes".into() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let at = r.pos;
        let text = r.string("config")?;
        let config = ModelConfig::parse(&text).map_err(|e| Error::Format { offset: at, msg: e.to_string() })?;
        let n_meta = r.u32("metadata count")?;
        let mut metadata = Vec::new();
        for _ in 0..n_meta {
            metadata.push((r.string("metadata key")?, r.string("metadata value")?));
        }
        let n_tensors = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = r.string("tensor name")?;
            let at = r.pos;
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Format { offset: at, msg: format!("tensor `{name}` has rank {rank}") });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).unwrap_or(usize::MAX);
            let at = r.pos;
            let raw = r.take(numel.saturating_mul(4), "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format { offset: at, msg: format!("tensor `{name}`: {e}") })?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos, msg: format!("{} trailing bytes", bytes.len() - r.pos) });
        }
        let ck = Checkpoint { config, metadata, tensors };
        // reject tables that do not describe the configured model
        Model::<f32>::from_tensors(ck.config, ck.tensors.clone())
            .map_err(|e| Error::Format { offset: at, msg: e.to_string() })?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, metadata: Vec<(String, String)>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, metadata).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    Checkpoint::load(path)?.into_model()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format { offset: at, msg: format!("{what} is not UTF-8") })
    }
}
