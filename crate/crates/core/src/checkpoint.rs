//! Checkpoint directory format: `manifest.json` describing named arrays
//! (with config, step count, and frozen flags) plus `params.bin` holding
//! the concatenated row-major little-endian f32 data.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::num::Scalar;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub config: serde_json::Value,
    pub step: u64,
}

/// In-memory checkpoint: parameter arrays, the config they were trained
/// under, the step count, and which arrays are frozen.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub params: ParamSet<T>,
    pub config: serde_json::Value,
    pub step: u64,
    pub frozen: BTreeSet<String>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(params: ParamSet<T>, config: serde_json::Value, step: u64) -> Self {
        Checkpoint {
            params,
            config,
            step,
            frozen: BTreeSet::new(),
        }
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .params
            .names()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }
}

const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";

/// Write the checkpoint. Arrays are stored as f32 regardless of the
/// in-memory scalar type.
pub fn save<T: Scalar>(dir: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, arr) in ckpt.params.iter() {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            dtype: "f32".to_string(),
            byte_offset: blob.len() as u64,
            frozen: ckpt.frozen.contains(name),
        });
        for v in arr.iter() {
            blob.extend_from_slice(&(v.real() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        entries,
        config: ckpt.config.clone(),
        step: ckpt.step,
    };
    let mpath = dir.join(MANIFEST);
    let mfile = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::to_writer_pretty(mfile, &manifest)?;
    let ppath = dir.join(PARAMS);
    let mut pfile = fs::File::create(&ppath).map_err(|e| Error::io(&ppath, e))?;
    pfile.write_all(&blob).map_err(|e| Error::io(&ppath, e))?;
    Ok(())
}

/// Read a checkpoint directory back into memory.
pub fn load<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let mpath = dir.join(MANIFEST);
    let mfile = fs::File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_reader(mfile)
        .map_err(|e| Error::data(format!("malformed manifest {}: {e}", mpath.display())))?;
    let ppath = dir.join(PARAMS);
    let mut blob = Vec::new();
    fs::File::open(&ppath)
        .map_err(|e| Error::io(&ppath, e))?
        .read_to_end(&mut blob)
        .map_err(|e| Error::io(&ppath, e))?;

    let mut params = ParamSet::new();
    let mut frozen = BTreeSet::new();
    for e in &manifest.entries {
        if e.dtype != "f32" {
            return Err(Error::data(format!(
                "unsupported dtype {} for {}",
                e.dtype, e.name
            )));
        }
        let count: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + count * 4;
        if end > blob.len() {
            return Err(Error::data(format!(
                "params.bin too short for {} ({} bytes, need {end})",
                e.name,
                blob.len()
            )));
        }
        let mut vals = Vec::with_capacity(count);
        for i in 0..count {
            let off = start + 4 * i;
            let bits = [blob[off], blob[off + 1], blob[off + 2], blob[off + 3]];
            vals.push(T::from_real(f32::from_le_bytes(bits) as f64));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), vals)
            .map_err(|err| Error::data(format!("bad shape for {}: {err}", e.name)))?;
        params.insert(&e.name, arr);
        if e.frozen {
            frozen.insert(e.name.clone());
        }
    }
    Ok(Checkpoint {
        params,
        config: manifest.config,
        step: manifest.step,
        frozen,
    })
}
