//! Versioned binary checkpoints: named parameter tensors (stored as f64
//! little-endian regardless of the training dtype), the model config, and
//! the training step. Saves are write-then-rename so a crash mid-write
//! never corrupts an existing checkpoint.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::model::ModelConfig;
use crate::tensor::{ParamStore, Real};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VFCK";
const VERSION: u32 = 1;

pub struct LoadedCheckpoint<T: Real> {
    pub store: ParamStore<T>,
    pub config: ModelConfig,
    pub step: u64,
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::checkpoint(path, message)
}

pub fn save<T: Real>(
    path: &Path,
    store: &ParamStore<T>,
    config: &ModelConfig,
    step: u64,
) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| Error::io(&tmp, e);

        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&step.to_le_bytes()).map_err(io)?;

        let cfg_json = serde_json::to_vec(config)
            .map_err(|e| bad(path, format!("config serialization: {e}")))?;
        w.write_all(&(cfg_json.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&cfg_json).map_err(io)?;

        let n_params: u32 = store.iter().count() as u32;
        w.write_all(&n_params.to_le_bytes()).map_err(io)?;
        for (_, p) in store.iter() {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name).map_err(io)?;
            w.write_all(&(p.shape.len() as u32).to_le_bytes()).map_err(io)?;
            for &d in &p.shape {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            for v in &p.data {
                w.write_all(&v.into_f64().to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut read_exact = |buf: &mut [u8]| -> Result<()> {
        r.read_exact(buf)
            .map_err(|_| bad(path, "truncated or not a checkpoint file"))
    };
    macro_rules! take {
        ($n:expr) => {{
            let mut buf = [0u8; $n];
            read_exact(&mut buf)?;
            buf
        }};
    }

    if &take!(4) != MAGIC {
        return Err(bad(path, "bad magic (not a checkpoint file)"));
    }
    let version = u32::from_le_bytes(take!(4));
    if version != VERSION {
        return Err(bad(path, format!("unsupported version {version} (expected {VERSION})")));
    }
    let step = u64::from_le_bytes(take!(8));

    let cfg_len = u32::from_le_bytes(take!(4)) as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    read_exact(&mut cfg_buf)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_buf)
        .map_err(|e| bad(path, format!("config block: {e}")))?;

    let n_params = u32::from_le_bytes(take!(4)) as usize;
    let mut store: ParamStore<T> = ParamStore::new();
    for _ in 0..n_params {
        let name_len = u32::from_le_bytes(take!(4)) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| bad(path, "parameter name is not UTF-8"))?;

        let n_dims = u32::from_le_bytes(take!(4)) as usize;
        let mut shape = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            shape.push(u64::from_le_bytes(take!(8)) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(take!(8)));
        }
        store.register_f64(&name, shape, data);
    }

    // A trailing byte means the writer and reader disagree on the format.
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad(path, "trailing bytes after final parameter"));
    }
    Ok(LoadedCheckpoint { store, config, step })
}
