//! Checkpointing: every array in one flat little-endian binary file plus a
//! JSON manifest carrying the configuration, seed, and array directory.
//! Round trips are bit-exact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BnStats, ModelConfig, ModelError, ModelKind, ModelParams, ModelResult};
use crate::tensor::{ArrayD, Element, ParamSet};

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnEntry {
    site: String,
    channels: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    kind: ModelKind,
    config: ModelConfig,
    seed: u64,
    dtype: String,
    arrays: Vec<ArrayEntry>,
    bn_sites: Vec<BnEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> ModelResult<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

/// Write `<stem>.bin` and `<stem>.json`.
pub fn save_checkpoint<E: Element>(model: &ModelParams<E>, stem: &Path) -> ModelResult<()> {
    let (bin_path, json_path) = paths(stem);
    let mut blob: Vec<u8> = Vec::new();
    let mut arrays = Vec::new();
    for p in model.set.iter() {
        arrays.push(ArrayEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        });
        for &v in p.value.data() {
            v.write_le(&mut blob);
        }
    }
    let mut bn_sites = Vec::new();
    for (site, stats) in &model.bn_stats {
        bn_sites.push(BnEntry {
            site: site.clone(),
            channels: stats.mean.len(),
        });
        for &v in &stats.mean {
            v.write_le(&mut blob);
        }
        for &v in &stats.var {
            v.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        kind: model.kind,
        config: model.config.clone(),
        seed: model.seed,
        dtype: E::DTYPE.to_string(),
        arrays,
        bn_sites,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| ModelError::Manifest(e.to_string()))?;
    write_atomic(&bin_path, &blob)?;
    write_atomic(&json_path, &json)?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`] from `<stem>.bin` +
/// `<stem>.json`.
pub fn load_checkpoint<E: Element>(stem: &Path) -> ModelResult<ModelParams<E>> {
    let (bin_path, json_path) = paths(stem);
    let json = std::fs::read(&json_path).map_err(io_err(&json_path))?;
    let manifest: Manifest =
        serde_json::from_slice(&json).map_err(|e| ModelError::Manifest(e.to_string()))?;
    if manifest.dtype != E::DTYPE {
        return Err(ModelError::Manifest(format!(
            "dtype mismatch: checkpoint holds {}, caller expects {}",
            manifest.dtype,
            E::DTYPE
        )));
    }
    manifest.config.validate()?;
    let blob = std::fs::read(&bin_path).map_err(io_err(&bin_path))?;

    let param_scalars: usize = manifest
        .arrays
        .iter()
        .map(|a| a.shape.iter().product::<usize>())
        .sum();
    let bn_scalars: usize = manifest.bn_sites.iter().map(|b| 2 * b.channels).sum();
    let expect_bytes = (param_scalars + bn_scalars) * E::BYTES;
    if blob.len() != expect_bytes {
        return Err(ModelError::Manifest(format!(
            "binary payload is {} bytes, manifest implies {}",
            blob.len(),
            expect_bytes
        )));
    }

    let mut offset = 0usize;
    let mut take = |n: usize| -> Vec<E> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(E::read_le(&blob[offset..offset + E::BYTES]));
            offset += E::BYTES;
        }
        out
    };

    let mut set = ParamSet::new();
    for entry in &manifest.arrays {
        let numel: usize = entry.shape.iter().product();
        let data = take(numel);
        set.insert(&entry.name, ArrayD::from_vec(&entry.shape, data), entry.trainable);
    }
    let mut bn_stats = BTreeMap::new();
    for entry in &manifest.bn_sites {
        let mean = take(entry.channels);
        let var = take(entry.channels);
        bn_stats.insert(entry.site.clone(), BnStats { mean, var });
    }

    Ok(ModelParams {
        kind: manifest.kind,
        config: manifest.config,
        seed: manifest.seed,
        set,
        bn_stats,
    })
}
