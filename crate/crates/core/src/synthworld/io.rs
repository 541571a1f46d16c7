//! Dataset persistence: a flat little-endian `f64` image file plus a JSON
//! sidecar with the generating spec and per-sample metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RenderConfig, Splits, SynthSample};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    version: u32,
    /// The spec that generated the data, verbatim.
    spec: serde_json::Value,
    render: RenderConfig,
    pixels: usize,
    train: Vec<SynthSample>,
    val: Vec<SynthSample>,
    test: Vec<SynthSample>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn export_dataset<S: Serialize>(stem: &Path, spec: &S, render: &RenderConfig, splits: &Splits) -> Result<()> {
    let (bin, json) = paths(stem);
    let mut bytes = Vec::with_capacity(splits.len() * render.pixels() * 8);
    for s in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        if s.image.len() != render.pixels() {
            return Err(Error::LengthMismatch {
                what: "image",
                got: s.image.len(),
                expected: render.pixels(),
            });
        }
        for v in &s.image {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sidecar = Sidecar {
        version: DATASET_FORMAT_VERSION,
        spec: serde_json::to_value(spec)?,
        render: *render,
        pixels: render.pixels(),
        train: splits.train.clone(),
        val: splits.val.clone(),
        test: splits.test.clone(),
    };
    crate::harness::write_atomic(&bin, &bytes)?;
    crate::harness::write_atomic(&json, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(())
}

/// Reads a dataset written by [`export_dataset`], returning the stored spec
/// alongside the splits.
pub fn import_dataset(stem: &Path) -> Result<(serde_json::Value, RenderConfig, Splits)> {
    let (bin, json) = paths(stem);
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(&json)?)?;
    if sidecar.version != DATASET_FORMAT_VERSION {
        return Err(Error::Corrupt {
            path: json,
            detail: format!("unsupported version {}", sidecar.version),
        });
    }
    let bytes = fs::read(&bin)?;
    let n = sidecar.train.len() + sidecar.val.len() + sidecar.test.len();
    if bytes.len() != n * sidecar.pixels * 8 {
        return Err(Error::Corrupt {
            path: bin,
            detail: format!("expected {} bytes, found {}", n * sidecar.pixels * 8, bytes.len()),
        });
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut fill = |samples: Vec<SynthSample>| -> Vec<SynthSample> {
        samples
            .into_iter()
            .map(|mut s| {
                s.image = values.by_ref().take(sidecar.pixels).collect();
                s
            })
            .collect()
    };
    let splits = Splits {
        train: fill(sidecar.train),
        val: fill(sidecar.val),
        test: fill(sidecar.test),
    };
    Ok((sidecar.spec, sidecar.render, splits))
}
