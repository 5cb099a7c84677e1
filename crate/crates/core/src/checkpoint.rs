//! Binary checkpoint format.
//!
//! Layout (little-endian): `b"MGMO"`, `u32` version, `u32` array count, then
//! per array `u32` name length, UTF-8 name, `u32` rank, `rank` x `u64`
//! dims, and `prod(dims)` x `f64`. The model hyperparameters are stored as
//! the array named `config`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{ModelConfig, ModelError, NatModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MGMO";
pub const VERSION: u32 = 1;
const CONFIG: &str = "config";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn config_tensor(c: &ModelConfig) -> Tensor {
    Tensor::vector(
        [c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.max_len]
            .iter()
            .map(|&v| v as f64)
            .collect(),
    )
}

fn config_from(t: &Tensor) -> Result<ModelConfig> {
    let d = t.data();
    if t.shape() != [5] || d.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
        return Err(CheckpointError::Malformed(format!(
            "config array {:?}",
            t.shape()
        )));
    }
    Ok(ModelConfig {
        vocab_size: d[0] as usize,
        d_model: d[1] as usize,
        n_heads: d[2] as usize,
        n_layers: d[3] as usize,
        max_len: d[4] as usize,
    })
}

pub fn write_arrays<W: Write>(w: &mut W, arrays: &[(&str, &Tensor)]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in arrays {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Malformed("unexpected end of file".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_arrays(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| {
            CheckpointError::Malformed(format!("array {name} too large"))
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(ModelError::from)?;
        out.push((name, t));
    }
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(out)
}

pub fn to_bytes(model: &NatModel) -> Vec<u8> {
    let cfg = config_tensor(model.config());
    let mut arrays: Vec<(&str, &Tensor)> = vec![(CONFIG, &cfg)];
    arrays.extend(model.named_params());
    let mut buf = Vec::new();
    write_arrays(&mut buf, &arrays).expect("writing to memory");
    buf
}

pub fn from_bytes(bytes: &[u8]) -> Result<NatModel> {
    let mut arrays = read_arrays(bytes)?;
    let pos = arrays
        .iter()
        .position(|(n, _)| n == CONFIG)
        .ok_or_else(|| CheckpointError::Malformed("missing config array".into()))?;
    let (_, cfg) = arrays.remove(pos);
    Ok(NatModel::from_named(config_from(&cfg)?, arrays)?)
}

pub fn save(model: &NatModel, path: &Path) -> Result<()> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&to_bytes(model)).map_err(io_err)?;
    f.sync_all().map_err(io_err)
}

pub fn load(path: &Path) -> Result<NatModel> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err)?;
    from_bytes(&bytes)
}
