//! Parameter files: a flat little-endian `f32` blob plus a JSON header listing
//! each parameter's name, shape and byte offset.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameterized;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamHeader {
    pub parameters: Vec<ParamEntry>,
}

pub fn save_parameters(model: &dyn Parameterized, blob_path: &Path, header_path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let mut err = None;
    model.visit(&mut |p| {
        if err.is_some() {
            return;
        }
        match p.values() {
            Ok(values) => {
                entries.push(ParamEntry {
                    name: p.name().to_string(),
                    shape: p.shape(),
                    offset: blob.len(),
                    trainable: p.is_trainable(),
                });
                blob.extend(values.iter().flat_map(|v| v.to_le_bytes()));
            }
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    fs::write(blob_path, &blob).map_err(|e| Error::io(blob_path, e))?;
    let header = serde_json::to_vec_pretty(&ParamHeader { parameters: entries })?;
    fs::write(header_path, header).map_err(|e| Error::io(header_path, e))
}

/// Overwrites every parameter of `model` from the files, matching by name.
/// With `restore_flags`, the trainable flags are restored as well.
pub fn load_parameters(model: &mut dyn Parameterized, blob_path: &Path, header_path: &Path, restore_flags: bool) -> Result<()> {
    let blob = fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
    let text = fs::read(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: ParamHeader = serde_json::from_slice(&text)?;
    let by_name: HashMap<&str, &ParamEntry> = header.parameters.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut err = None;
    model.visit_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        let Some(entry) = by_name.get(p.name()) else {
            err = Some(Error::Invalid(format!("parameter {} missing from {}", p.name(), header_path.display())));
            return;
        };
        if entry.shape != p.shape() {
            err = Some(Error::shape("stored parameter", format!("{:?}", p.shape()), format!("{:?}", entry.shape)));
            return;
        }
        let end = entry.offset + 4 * p.elem_count();
        if end > blob.len() {
            err = Some(Error::Invalid(format!("parameter {} runs past the end of the blob", p.name())));
            return;
        }
        let values: Vec<f32> = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Err(e) = p.set_values(&values) {
            err = Some(e);
        }
        if restore_flags {
            p.set_trainable(entry.trainable);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
