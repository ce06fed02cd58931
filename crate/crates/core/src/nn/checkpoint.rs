use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::Module;
use crate::error::{Error, Result};

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes every parameter as a little-endian f32 safetensors entry.
pub fn save_params<M: Module + ?Sized>(
    model: &M,
    metadata: HashMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    model.visit("", &mut |name, p| {
        let bytes = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
        entries.push((name.to_string(), p.shape.clone(), bytes));
    });
    let views = entries
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| ckpt_err(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = safetensors::serialize(views, Some(metadata)).map_err(|e| ckpt_err(path, e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}

pub fn read_metadata(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok(meta.metadata().clone().unwrap_or_default())
}

/// Loads parameters by name into an already-constructed model; every
/// parameter must be present with a matching shape.
pub fn load_params<M: Module + ?Sized>(model: &mut M, path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut failure: Option<Error> = None;
    model.visit_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        match tensors.tensor(name) {
            Ok(view) if view.dtype() == Dtype::F32 && view.shape() == p.shape.as_slice() => {
                for (dst, chunk) in p.value.iter_mut().zip(view.data().chunks_exact(4)) {
                    *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                }
            }
            Ok(view) => {
                failure = Some(ckpt_err(
                    path,
                    format!("tensor `{name}` has shape {:?}, expected {:?}", view.shape(), p.shape),
                ))
            }
            Err(_) => failure = Some(ckpt_err(path, format!("missing tensor `{name}`"))),
        }
    });
    if let Some(err) = failure {
        return Err(err);
    }
    read_metadata(path)
}
