//! Checkpoint files: a JSON manifest line (format version + named parameter
//! shapes) followed by the raw little-endian f64 payloads in manifest order.
//! Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    params: Vec<ParamMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        params: store
            .iter()
            .map(|(name, t)| ParamMeta { name: name.to_string(), shape: t.shape().to_vec() })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    for (_, t) in store.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Parse { line: 1, msg: "checkpoint manifest line missing".into() });
        }
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
    }
    let manifest: Manifest = serde_json::from_slice(&header)
        .map_err(|e| Error::Parse { line: 1, msg: format!("bad manifest: {e}") })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported checkpoint format version {}", manifest.format_version),
        });
    }
    let mut store = ParamStore::new();
    for meta in &manifest.params {
        let numel: usize = meta.shape.iter().product();
        let mut buf = vec![0u8; numel * 8];
        r.read_exact(&mut buf).map_err(|_| Error::Parse {
            line: 1,
            msg: format!("truncated payload for parameter {}", meta.name),
        })?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(&meta.name, Tensor::new(meta.shape.clone(), data)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Parse { line: 1, msg: "trailing bytes after checkpoint payload".into() });
    }
    Ok(store)
}

/// Copy values from a loaded checkpoint into an existing store. Names and
/// shapes must match exactly.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let loaded = load(path)?;
    if loaded.len() != store.len() {
        return Err(Error::Input(format!(
            "checkpoint has {} parameters, model has {}",
            loaded.len(),
            store.len()
        )));
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let src = loaded
            .id_by_name(&name)
            .ok_or_else(|| Error::Input(format!("checkpoint missing parameter {name}")))?;
        if loaded.get(src).shape() != store.get(id).shape() {
            return Err(Error::Input(format!(
                "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                loaded.get(src).shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = loaded.get(src).clone();
    }
    Ok(())
}

/// Copy every checkpoint parameter whose name and shape match an entry of
/// `store`, leaving the rest untouched. Returns (copied, total in file).
/// This is how pretrained encoders seed a differently-shaped model: the
/// shared components load, the missing ones keep their fresh init.
pub fn load_matching(store: &mut ParamStore, path: &Path) -> Result<(usize, usize)> {
    let loaded = load(path)?;
    let mut copied = 0usize;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if let Some(src) = loaded.id_by_name(&name) {
            if loaded.get(src).shape() == store.get(id).shape() {
                *store.get_mut(id) = loaded.get(src).clone();
                copied += 1;
            }
        }
    }
    Ok((copied, loaded.len()))
}
