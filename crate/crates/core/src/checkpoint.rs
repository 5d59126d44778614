//! Model checkpoints: a directory holding `manifest.json` (spec, seed, format
//! version, parameter inventory) and `weights.bin`, a sequence of
//! `u32 key length, key bytes, KDT1 record` entries keyed by parameter path.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::serial::{read_tensor_raw, write_tensor_raw};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// Longest parameter path accepted when reading.
const MAX_KEY_LEN: u32 = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

pub fn save(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: model.spec.clone(),
        seed: model.seed,
        params: model
            .store
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;

    let wpath = dir.join(WEIGHTS_FILE);
    let file = fs::File::create(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        for p in model.store.params() {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            write_tensor_raw(w, &p.shape, &p.data)?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(&wpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Corrupt(format!(
            "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Model> {
    let manifest = read_manifest(dir)?;
    let wpath = dir.join(WEIGHTS_FILE);
    let file = fs::File::open(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut r = BufReader::new(file);
    let mut params = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)
            .map_err(|e| Error::Corrupt(format!("{}: truncated key header: {e}", wpath.display())))?;
        let len = u32::from_le_bytes(len);
        if len > MAX_KEY_LEN {
            return Err(Error::Corrupt(format!("{}: key length {len} too large", wpath.display())));
        }
        let mut key = vec![0u8; len as usize];
        r.read_exact(&mut key)
            .map_err(|e| Error::Corrupt(format!("{}: truncated key: {e}", wpath.display())))?;
        let key = String::from_utf8(key).map_err(|_| Error::Corrupt("non-UTF-8 parameter key".into()))?;
        if key != entry.name {
            return Err(Error::Corrupt(format!(
                "weights out of order: expected `{}`, found `{key}`",
                entry.name
            )));
        }
        let (shape, data) = read_tensor_raw(&mut r)?;
        params.push((key, shape, data));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(&wpath, e))? != 0 {
        return Err(Error::Corrupt(format!("{}: trailing bytes after last record", wpath.display())));
    }
    Model::from_params(&manifest.spec, manifest.seed, params)
}
