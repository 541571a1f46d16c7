//! Config-driven experiment runner.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub mod config;
pub mod manifest;
pub mod report;
pub mod results;
pub mod run;
pub mod seeds;
pub mod selftest;
pub mod svg;

pub use config::{ExperimentConfig, ExperimentKind};
pub use report::{report, CriterionResult, Report};
pub use run::{run_experiment, run_seed, RunOptions, RunOutcome};
pub use seeds::derive_seed;

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
