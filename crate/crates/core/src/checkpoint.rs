//! Checkpoint directories.
//!
//! Layout:
//! * `manifest.txt` — the [`RunManifest`] (config snapshot, backbone id,
//!   dataset id, class count, timestamp, version);
//! * `index.txt` — one `name file` line per tensor;
//! * one `.bin` blob per tensor: `u32` rank, `u32` dims, then
//!   little-endian `f32` data;
//! * `state.txt` — epoch/step counters, present on resumable checkpoints.
//!
//! Optimizer momentum buffers are stored under `optim.momentum.<param>`.
//! Stripped exports carry only `backbone.*` tensors and a manifest with
//! every toggle off.

use crate::config::RunManifest;
use crate::error::{Result, TorsdError};
use crate::model::ModelBundle;
use crate::tensor::{Element, Tensor};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

fn blob_file_name(param: &str) -> String {
    format!("{param}.bin")
}

fn write_blob<E: Element>(dir: &Path, name: &str, t: &Tensor<E>) -> Result<()> {
    let path = dir.join(blob_file_name(name));
    let file = std::fs::File::create(&path).map_err(|e| TorsdError::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| TorsdError::io(&path, e));
    write(&(t.shape().len() as u32).to_le_bytes())?;
    for d in t.shape() {
        write(&(*d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        write(&(v.to_f64() as f32).to_le_bytes())?;
    }
    w.flush().map_err(|e| TorsdError::io(&path, e))
}

fn read_blob<E: Element>(dir: &Path, file: &str, param: &str) -> Result<Tensor<E>> {
    let path = dir.join(file);
    let fh = std::fs::File::open(&path).map_err(|_| TorsdError::CorruptBlob {
        param: param.into(),
        message: format!("blob file `{file}` missing"),
    })?;
    let mut r = std::io::BufReader::new(fh);
    let corrupt = |message: String| TorsdError::CorruptBlob {
        param: param.into(),
        message,
    };
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf)
        .map_err(|_| corrupt("truncated rank header".into()))?;
    let rank = u32::from_le_bytes(u32_buf) as usize;
    if rank > 8 {
        return Err(corrupt(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32_buf)
            .map_err(|_| corrupt("truncated shape header".into()))?;
        shape.push(u32::from_le_bytes(u32_buf) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u32_buf)
            .map_err(|_| corrupt(format!("truncated data (expected {n} values)")))?;
        data.push(E::from_f64(f32::from_le_bytes(u32_buf) as f64));
    }
    // trailing bytes mean the header lies about the shape
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| TorsdError::io(&path, e))? != 0 {
        return Err(corrupt("trailing bytes after declared data".into()));
    }
    Ok(Tensor::from_vec(&shape, data))
}

/// Training-progress counters stored with resumable checkpoints.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TrainProgress {
    /// Completed epochs.
    pub epoch: u64,
    /// Global steps taken.
    pub step: u64,
}

/// Writes a checkpoint directory. `extra` carries named non-model tensors
/// (optimizer state); `progress` marks the checkpoint resumable.
pub fn save_checkpoint<E: Element>(
    dir: &Path,
    manifest: &RunManifest,
    bundle: &ModelBundle<E>,
    extra: &[(String, Tensor<E>)],
    progress: Option<TrainProgress>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| TorsdError::io(dir, e))?;
    manifest.write(&dir.join("manifest.txt"))?;
    let mut index = String::new();
    for (_, p) in bundle.store.iter() {
        index.push_str(&format!("{} {}\n", p.name, blob_file_name(&p.name)));
        write_blob(dir, &p.name, &p.value)?;
    }
    for (name, t) in extra {
        index.push_str(&format!("{} {}\n", name, blob_file_name(name)));
        write_blob(dir, name, t)?;
    }
    let index_path = dir.join("index.txt");
    std::fs::write(&index_path, index).map_err(|e| TorsdError::io(&index_path, e))?;
    if let Some(p) = progress {
        let state_path = dir.join("state.txt");
        std::fs::write(&state_path, format!("epoch = {}\nstep = {}\n", p.epoch, p.step))
            .map_err(|e| TorsdError::io(&state_path, e))?;
    }
    Ok(())
}

/// A checkpoint read back from disk.
pub struct LoadedCheckpoint<E: Element> {
    pub manifest: RunManifest,
    pub bundle: ModelBundle<E>,
    /// Non-model tensors (optimizer state), in index order.
    pub extra: Vec<(String, Tensor<E>)>,
    pub progress: Option<TrainProgress>,
}

/// Reads a checkpoint directory, rebuilding the bundle the manifest
/// describes and filling every parameter from its blob.
pub fn load_checkpoint<E: Element>(dir: &Path) -> Result<LoadedCheckpoint<E>> {
    let manifest = RunManifest::read(&dir.join("manifest.txt"))?;
    let kind = crate::backbone::BackboneKind::parse(&manifest.backbone_id)?;
    let mut bundle = ModelBundle::<E>::new(&kind, manifest.num_classes, &manifest.cfg)?;

    let index_path = dir.join("index.txt");
    let index = std::fs::read_to_string(&index_path).map_err(|e| TorsdError::io(&index_path, e))?;
    let mut extra = Vec::new();
    let mut filled = vec![false; bundle.store.len()];
    for line in index.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, file) = line.split_once(' ').ok_or_else(|| {
            TorsdError::ConfigSyntax(format!("index.txt: expected `name file`, got `{line}`"))
        })?;
        let tensor = read_blob::<E>(dir, file.trim(), name)?;
        match bundle.store.find(name) {
            Some(id) => {
                if bundle.store.value(id).shape() != tensor.shape() {
                    return Err(TorsdError::CorruptBlob {
                        param: name.into(),
                        message: format!(
                            "shape {:?} does not match model {:?}",
                            tensor.shape(),
                            bundle.store.value(id).shape()
                        ),
                    });
                }
                *bundle.store.value_mut(id) = tensor;
                filled[id.0] = true;
            }
            None if name.starts_with("optim.") => extra.push((name.to_string(), tensor)),
            None => {
                return Err(TorsdError::CorruptBlob {
                    param: name.into(),
                    message: "not a parameter of the manifested model".into(),
                })
            }
        }
    }
    if let Some((id, _)) = filled.iter().enumerate().find(|(_, f)| !**f) {
        let name = bundle.store.get(crate::nn::ParamId(id)).name.clone();
        return Err(TorsdError::CorruptBlob {
            param: name,
            message: "missing from checkpoint index".into(),
        });
    }

    let progress = read_state(&dir.join("state.txt"))?;
    Ok(LoadedCheckpoint {
        manifest,
        bundle,
        extra,
        progress,
    })
}

fn read_state(path: &Path) -> Result<Option<TrainProgress>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| TorsdError::io(path, e))?;
    let mut epoch = None;
    let mut step = None;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let v = v.trim().parse::<u64>().map_err(|_| {
                TorsdError::ConfigSyntax(format!("state.txt: bad value in `{line}`"))
            })?;
            match k.trim() {
                "epoch" => epoch = Some(v),
                "step" => step = Some(v),
                _ => {}
            }
        }
    }
    match (epoch, step) {
        (Some(epoch), Some(step)) => Ok(Some(TrainProgress { epoch, step })),
        _ => Err(TorsdError::ConfigSyntax(
            "state.txt: missing epoch or step".into(),
        )),
    }
}

/// Writes the stripped, inference-only form of a checkpoint: backbone
/// blobs only, manifest toggles off. Exporting an already-stripped
/// checkpoint reproduces it.
pub fn export_stripped<E: Element>(src_dir: &Path, out_dir: &Path) -> Result<PathBuf> {
    let loaded = load_checkpoint::<E>(src_dir)?;
    let stripped = loaded.bundle.strip_for_inference()?;
    let mut manifest = loaded.manifest.clone();
    manifest.cfg.enable_rn = false;
    manifest.cfg.enable_ac = false;
    manifest.cfg.enable_ld = false;
    manifest.cfg.enable_handcrafted_rd = false;
    save_checkpoint(out_dir, &manifest, &stripped, &[], None)?;
    Ok(out_dir.to_path_buf())
}

/// Total size in bytes of every regular file directly in `dir`.
pub fn dir_size(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for entry in std::fs::read_dir(dir).map_err(|e| TorsdError::io(dir, e))? {
        let entry = entry.map_err(|e| TorsdError::io(dir, e))?;
        let meta = entry.metadata().map_err(|e| TorsdError::io(dir, e))?;
        if meta.is_file() {
            total += meta.len();
        }
    }
    Ok(total)
}
