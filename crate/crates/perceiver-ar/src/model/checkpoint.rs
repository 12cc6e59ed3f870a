//! Checkpoint format: `PARC` magic and version, the serialized model
//! config, a manifest of (name, dtype, shape) entries, then the raw
//! little-endian f32 payloads concatenated in manifest order. Round-trips
//! are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::model::{init_params, ModelConfig, ParameterSet};
use crate::numerics::Array;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"PARC";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: &'static str,
    pub shape: Vec<usize>,
}

/// The manifest a parameter set serializes under: names, dtypes, and shapes
/// in traversal order. Identical for any two configs whose parameter shapes
/// agree, regardless of context length.
pub fn manifest_entries(params: &ParameterSet<f32>) -> Vec<ManifestEntry> {
    let mut entries = Vec::new();
    params.visit(|name, arr| {
        entries.push(ManifestEntry { name, dtype: "f32", shape: arr.shape().to_vec() })
    });
    entries
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ParameterSet<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let cfg_json = serde_json::to_vec(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(&(cfg_json.len() as u64).to_le_bytes())?;
    w.write_all(&cfg_json)?;

    let flat = params.flatten();
    w.write_all(&(flat.len() as u64).to_le_bytes())?;
    for (name, arr) in &flat {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[DTYPE_F32, arr.shape().len() as u8])?;
        for &d in arr.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, arr) in &flat {
        for v in arr.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| Error::Checkpoint("truncated file".to_string()))?;
    Ok(buf)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParameterSet<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_exact::<4>(&mut r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".to_string()));
    }
    let version = u32::from_le_bytes(read_exact::<4>(&mut r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }

    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg_json = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_json).map_err(|_| Error::Checkpoint("truncated config".to_string()))?;
    let cfg: ModelConfig =
        serde_json::from_slice(&cfg_json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    cfg.validate()?;

    let count = read_u64(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact::<2>(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| Error::Checkpoint("truncated name".to_string()))?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("bad name".to_string()))?;
        let [dtype, ndim] = read_exact::<2>(&mut r)?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("unknown dtype tag {dtype}")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        manifest.push(ManifestEntry { name, dtype: "f32", shape });
    }

    // The structural skeleton that this config implies fixes the expected
    // manifest; any mismatch means the file is corrupt or from another
    // architecture.
    let mut skeleton = init_params::<f32>(&cfg, 0)?;
    let expected = manifest_entries(&skeleton);
    if manifest != expected {
        return Err(Error::Checkpoint(format!(
            "manifest mismatch: file has {} entries, config implies {}",
            manifest.len(),
            expected.len()
        )));
    }

    let mut arrays = Vec::with_capacity(count);
    for entry in &manifest {
        let len: usize = entry.shape.iter().product();
        let mut data = vec![0f32; len];
        for v in data.iter_mut() {
            *v = f32::from_le_bytes(read_exact::<4>(&mut r)?);
        }
        arrays.push(Array::from_vec(entry.shape.clone(), data)?);
    }
    let mut iter = arrays.into_iter();
    skeleton.visit_mut(|slot| *slot = Arc::new(iter.next().expect("manifest length checked")));
    skeleton.validate(&cfg)?;
    Ok((cfg, skeleton))
}
