//! Model definition files and weight blobs.
//!
//! A model definition is a JSON document holding the architecture params,
//! the init seed, and optionally a path to a weight blob. Blobs are flat
//! little-endian f32 arrays; a JSON manifest alongside lists tensor names
//! and shapes in blob order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::toy::{ToyArch, ToyModel};
use crate::error::{Error, Result};

/// On-disk model definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDefinition {
    #[serde(default)]
    pub arch: ToyArch,
    pub seed: u64,
    /// Apply decoder calibration when initializing from the seed.
    #[serde(default = "default_true")]
    pub calibrated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// Optional weight blob (flat little-endian f32), relative to the
    /// definition file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Shape manifest for the blob; defaults to `<weights>.manifest.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_manifest: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// Named views of every parameter tensor, in canonical blob order.
fn named_tensors(model: &ToyModel) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let p = model.params();
    let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let push2 = |out: &mut Vec<_>, name: String, a: &Array2<f64>| {
        out.push((name, vec![a.dim().0, a.dim().1], a.iter().copied().collect()));
    };
    let push1 = |out: &mut Vec<_>, name: String, a: &Array1<f64>| {
        out.push((name, vec![a.len()], a.to_vec()));
    };
    push2(&mut out, "patch_w".into(), &p.patch_w);
    push1(&mut out, "patch_b".into(), &p.patch_b);
    push2(&mut out, "pos".into(), &p.pos);
    for (i, b) in p.blocks.iter().enumerate() {
        push1(&mut out, format!("block{i}.ln1_g"), &b.ln1.gamma);
        push1(&mut out, format!("block{i}.ln1_b"), &b.ln1.beta);
        push2(&mut out, format!("block{i}.wq"), &b.wq);
        push1(&mut out, format!("block{i}.bq"), &b.bq);
        push2(&mut out, format!("block{i}.wk"), &b.wk);
        push1(&mut out, format!("block{i}.bk"), &b.bk);
        push2(&mut out, format!("block{i}.wv"), &b.wv);
        push1(&mut out, format!("block{i}.bv"), &b.bv);
        push2(&mut out, format!("block{i}.wo"), &b.wo);
        push1(&mut out, format!("block{i}.bo"), &b.bo);
        push1(&mut out, format!("block{i}.ln2_g"), &b.ln2.gamma);
        push1(&mut out, format!("block{i}.ln2_b"), &b.ln2.beta);
        push2(&mut out, format!("block{i}.w1"), &b.w1);
        push1(&mut out, format!("block{i}.b1"), &b.b1);
        push2(&mut out, format!("block{i}.w2"), &b.w2);
        push1(&mut out, format!("block{i}.b2"), &b.b2);
    }
    push1(&mut out, "lnf_g".into(), &p.lnf.gamma);
    push1(&mut out, "lnf_b".into(), &p.lnf.beta);
    push2(&mut out, "prompt_w".into(), &p.prompt_w);
    push1(&mut out, "prompt_b".into(), &p.prompt_b);
    out.push(("logit_scale".into(), vec![1], vec![p.logit_scale]));
    out.push(("logit_offset".into(), vec![1], vec![p.logit_offset]));
    out
}

fn assign_tensor(model: &mut ToyModel, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    let mismatch = |expect: &[usize]| {
        Error::input(format!(
            "weight tensor {name}: manifest shape {shape:?} does not match model shape {expect:?}"
        ))
    };
    let as2 = |rows: usize, cols: usize| -> Result<Array2<f64>> {
        if shape != [rows, cols] {
            return Err(mismatch(&[rows, cols]));
        }
        Ok(Array2::from_shape_vec((rows, cols), data.to_vec()).unwrap())
    };
    let as1 = |len: usize| -> Result<Array1<f64>> {
        if shape != [len] {
            return Err(mismatch(&[len]));
        }
        Ok(Array1::from_vec(data.to_vec()))
    };
    let arch = model.arch().clone();
    let (d, hid, fd) = (arch.dim, arch.mlp_hidden, arch.prompt_feat_dim());
    let p = model.params_mut();
    match name {
        "patch_w" => p.patch_w = as2(arch.patch_dim(), d)?,
        "patch_b" => p.patch_b = as1(d)?,
        "pos" => p.pos = as2(arch.tokens(), d)?,
        "lnf_g" => p.lnf.gamma = as1(d)?,
        "lnf_b" => p.lnf.beta = as1(d)?,
        "prompt_w" => p.prompt_w = as2(fd, d)?,
        "prompt_b" => p.prompt_b = as1(d)?,
        "logit_scale" => p.logit_scale = as1(1)?[0],
        "logit_offset" => p.logit_offset = as1(1)?[0],
        _ => {
            let (idx, field) = name
                .strip_prefix("block")
                .and_then(|rest| rest.split_once('.'))
                .ok_or_else(|| Error::input(format!("unknown weight tensor {name}")))?;
            let i: usize = idx
                .parse()
                .map_err(|_| Error::input(format!("bad block index in {name}")))?;
            let b = p
                .blocks
                .get_mut(i)
                .ok_or_else(|| Error::input(format!("block index {i} out of range")))?;
            match field {
                "ln1_g" => b.ln1.gamma = as1(d)?,
                "ln1_b" => b.ln1.beta = as1(d)?,
                "wq" => b.wq = as2(d, d)?,
                "bq" => b.bq = as1(d)?,
                "wk" => b.wk = as2(d, d)?,
                "bk" => b.bk = as1(d)?,
                "wv" => b.wv = as2(d, d)?,
                "bv" => b.bv = as1(d)?,
                "wo" => b.wo = as2(d, d)?,
                "bo" => b.bo = as1(d)?,
                "ln2_g" => b.ln2.gamma = as1(d)?,
                "ln2_b" => b.ln2.beta = as1(d)?,
                "w1" => b.w1 = as2(d, hid)?,
                "b1" => b.b1 = as1(hid)?,
                "w2" => b.w2 = as2(hid, d)?,
                "b2" => b.b2 = as1(d)?,
                _ => return Err(Error::input(format!("unknown weight tensor {name}"))),
            }
        }
    }
    Ok(())
}

/// Write model weights as an f32 little-endian blob plus a JSON manifest.
pub fn save_weights(model: &ToyModel, blob_path: &Path, manifest_path: &Path) -> Result<()> {
    let tensors = named_tensors(model);
    let mut blob = Vec::new();
    let mut manifest = Vec::new();
    for (name, shape, data) in tensors {
        for v in &data {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        manifest.push(ManifestEntry { name, shape });
    }
    fs::write(blob_path, blob).map_err(|e| Error::io(blob_path, e))?;
    fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

fn load_weights(model: &mut ToyModel, blob_path: &Path, manifest_path: &Path) -> Result<()> {
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(
        &fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?,
    )?;
    let blob = fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
    if blob.len() % 4 != 0 {
        return Err(Error::input(format!(
            "weight blob {} is not a whole number of f32 values",
            blob_path.display()
        )));
    }
    let total: usize = manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if total * 4 != blob.len() {
        return Err(Error::input(format!(
            "weight blob holds {} values but manifest describes {total}",
            blob.len() / 4
        )));
    }
    let mut offset = 0;
    for entry in &manifest {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f64> = blob[offset * 4..(offset + n) * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        assign_tensor(model, &entry.name, &entry.shape, &data)?;
        offset += n;
    }
    Ok(())
}

/// Load a model from a definition file (see [`ModelDefinition`]). Relative
/// weight paths resolve against the definition file's directory.
pub fn load_model(path: &Path) -> Result<ToyModel> {
    let def: ModelDefinition =
        serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
    def.arch.validate()?;
    let mut model = if def.calibrated {
        ToyModel::with_arch(def.arch.clone(), def.seed)?
    } else {
        ToyModel::uncalibrated(def.arch.clone(), def.seed)
    };
    if let Some(weights) = &def.weights {
        let base = path.parent().unwrap_or(Path::new("."));
        let blob = base.join(weights);
        let manifest = match &def.weight_manifest {
            Some(m) => base.join(m),
            None => {
                let mut m = blob.clone().into_os_string();
                m.push(".manifest.json");
                PathBuf::from(m)
            }
        };
        load_weights(&mut model, &blob, &manifest)?;
    }
    let id = def.id.unwrap_or_else(|| {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        stem.unwrap_or_else(|| format!("toy-s{}", def.seed))
    });
    model.set_identity(id);
    Ok(model)
}
