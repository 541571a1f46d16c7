//! Weight checkpoints: `<stem>.bin` holds the parameters as little-endian
//! `f64` in [`Mlp::params`] order; `<stem>.json` is the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, Mlp};
use crate::encoding::EncoderParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// `classifier` or `generator`.
    pub kind: String,
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    pub params: usize,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub encoder: Option<EncoderParams>,
}

pub fn save_checkpoint(
    stem: &Path,
    net: &Mlp,
    kind: &str,
    seed: u64,
    config_hash: &str,
    encoder: Option<EncoderParams>,
) -> Result<()> {
    let header = CheckpointHeader {
        kind: kind.to_string(),
        widths: net.widths.clone(),
        hidden: net.hidden,
        output: net.output,
        params: net.param_count(),
        seed,
        config_hash: config_hash.to_string(),
        encoder,
    };
    let bytes: Vec<u8> = net.flat().iter().flat_map(|v| v.to_le_bytes()).collect();
    crate::harness::write_atomic(&stem.with_extension("bin"), &bytes)?;
    crate::harness::write_atomic(
        &stem.with_extension("json"),
        serde_json::to_string_pretty(&header)?.as_bytes(),
    )?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<(CheckpointHeader, Mlp)> {
    let json = stem.with_extension("json");
    let header: CheckpointHeader = serde_json::from_slice(&fs::read(&json)?)?;
    let bin = stem.with_extension("bin");
    let bytes = fs::read(&bin)?;
    if bytes.len() != header.params * 8 {
        return Err(Error::Corrupt {
            path: bin,
            detail: format!("expected {} parameters, found {} bytes", header.params, bytes.len()),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut net = Mlp::new(&header.widths, header.hidden, header.output, true, 0)?;
    if net.param_count() != header.params {
        return Err(Error::Corrupt {
            path: json,
            detail: "parameter count does not match widths".into(),
        });
    }
    net.set_flat(&values)?;
    Ok((header, net))
}
