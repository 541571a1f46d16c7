//! Command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfaug::harness::manifest::load_run_input;
use cfaug::harness::run::{distill, make_splits, output_dir, pretrain};
use cfaug::harness::selftest::{gradient_suite, invariant_suite, Check};
use cfaug::harness::{report, run_experiment, ExperimentConfig, ExperimentKind, RunOptions};
use cfaug::models::save_checkpoint;
use cfaug::synthworld::export_dataset;
use cfaug::Result;

#[derive(Parser)]
#[command(
    name = "cfaug",
    version,
    about = "Adversarial counterfactual augmentation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config, or a manifest from an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated master seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and export each seed's dataset.
    GenerateData(Common),
    /// Pretrain the classifier for each seed and save a checkpoint.
    Pretrain(Common),
    /// Distill the neural generator for each seed and save a checkpoint.
    Distill(Common),
    /// Run an experiment over all seeds.
    Run {
        #[command(flatten)]
        common: Common,
        /// Exit nonzero if any target is missed.
        #[arg(long)]
        check: bool,
        /// Seeds run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize a finished run.
    Report {
        dir: PathBuf,
        #[arg(long)]
        check: bool,
    },
    /// Gradient and invariant self-checks.
    Selftest,
}

fn load(common: &Common) -> Result<(ExperimentConfig, Option<cfaug::harness::manifest::RunManifest>)> {
    let (mut cfg, manifest) = load_run_input(&common.config)?;
    if let Some(seeds) = &common.seed_list {
        cfg.seeds = seeds.clone();
        cfg.validate()?;
    }
    Ok((cfg, manifest))
}

fn dir_for(cfg: &ExperimentConfig, common: &Common) -> PathBuf {
    output_dir(
        cfg,
        &RunOptions {
            out: common.out.clone(),
            ..Default::default()
        },
    )
}

fn print_checks(title: &str, checks: &[Check]) -> bool {
    println!("[{title}]");
    for c in checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        if c.exact {
            println!("{verdict} {}", c.name);
        } else {
            println!(
                "{verdict} {:<56} worst {:.3e} (tol {:.0e})",
                c.name, c.worst, c.tolerance
            );
        }
    }
    checks.iter().all(|c| c.passed)
}

fn stem(dir: &Path, what: &str, seed: u64) -> PathBuf {
    dir.join(format!("{what}_seed{seed}"))
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData(common) => {
            let (cfg, _) = load(&common)?;
            let dir = dir_for(&cfg, &common);
            for &s in &cfg.seeds {
                let splits = make_splits(&cfg, s)?;
                let path = stem(&dir, "data", s);
                std::fs::create_dir_all(&dir)?;
                if cfg.kind == ExperimentKind::Spurious {
                    export_dataset(&path, &cfg.spurious, &cfg.render, &splits)?;
                } else {
                    export_dataset(&path, &cfg.dataset, &cfg.render, &splits)?;
                }
                println!("{}: {} samples", path.display(), splits.len());
            }
            Ok(true)
        }
        Command::Pretrain(common) => {
            let (cfg, _) = load(&common)?;
            let dir = dir_for(&cfg, &common);
            std::fs::create_dir_all(&dir)?;
            let hash = cfg.hash()?;
            for &s in &cfg.seeds {
                let c0 = pretrain(&cfg, s, &make_splits(&cfg, s)?)?;
                let path = stem(&dir, "classifier", s);
                save_checkpoint(&path, &c0.net, "classifier", s, &hash, None)?;
                println!("{}", path.display());
            }
            Ok(true)
        }
        Command::Distill(common) => {
            let (cfg, _) = load(&common)?;
            let dir = dir_for(&cfg, &common);
            std::fs::create_dir_all(&dir)?;
            let hash = cfg.hash()?;
            for &s in &cfg.seeds {
                let (g, _, mse) = distill(&cfg, s)?;
                let path = stem(&dir, "generator", s);
                save_checkpoint(&path, &g.net, "generator", s, &hash, Some(g.encoder.params()))?;
                println!("{}: validation MSE {mse:.5}", path.display());
            }
            Ok(true)
        }
        Command::Run { common, check, jobs } => {
            let (cfg, manifest) = load(&common)?;
            let opts = RunOptions {
                out: common.out.clone(),
                jobs,
                expect: manifest.filter(|m| m.config.seeds == cfg.seeds),
            };
            let outcome = run_experiment(&cfg, &opts)?;
            let rep = report(&outcome.dir)?;
            print!("{}", rep.render());
            println!("results in {}", outcome.dir.display());
            Ok(!check || rep.all_passed())
        }
        Command::Report { dir, check } => {
            let rep = report(&dir)?;
            print!("{}", rep.render());
            Ok(!check || rep.all_passed())
        }
        Command::Selftest => {
            let g = print_checks("gradients", &gradient_suite());
            let i = print_checks("invariants", &invariant_suite()?);
            Ok(g && i)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cfaug::Error;

    fn exec(args: &[&str]) -> Result<bool> {
        execute(Cli::try_parse_from(std::iter::once("cfaug").chain(args.iter().copied())).expect("arguments parse"))
    }

    const TINY: &str = r#"{
        "kind": "spurious",
        "render": {"size": 8},
        "spurious": {"train_ad": 12, "train_cn": 12, "val_per_class": 2, "test_per_group": 4, "split_age": 75.0, "seed": 0},
        "encoder": {"m": 8},
        "classifier": {"hidden": [6]},
        "distill": {"hidden": [6], "train_samples": 20, "val_samples": 5, "train": {"epochs": 1}},
        "pretrain": {"lr": 1e-3, "epochs": 2},
        "adversarial": {"k": 2, "n_hard": 4},
        "seeds": [3, 4]
    }"#;

    #[test]
    fn report_on_empty_dir_lists_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let err = exec(&["report", dir.path().to_str().unwrap()]).unwrap_err();
        assert!(matches!(err, Error::MissingResults { .. }));
        let msg = err.to_string();
        assert!(msg.contains("manifest.json") && msg.contains("summary.json"), "{msg}");
    }

    #[test]
    fn subcommands_write_their_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("tiny.json");
        std::fs::write(&cfg, TINY).unwrap();
        let (c, out) = (cfg.to_str().unwrap(), dir.path().join("out"));
        let o = out.to_str().unwrap();
        assert!(exec(&["generate-data", "--config", c, "--out", o, "--seed-list", "7"]).unwrap());
        assert!(out.join("data_seed7.bin").is_file() && !out.join("data_seed3.bin").exists());
        assert!(exec(&["pretrain", "--config", c, "--out", o]).unwrap());
        assert!(out.join("classifier_seed4.json").is_file());
        assert!(exec(&["distill", "--config", c, "--out", o, "--seed-list", "3"]).unwrap());
        assert!(out.join("generator_seed3.bin").is_file());

        let run = dir.path().join("run");
        let r = run.to_str().unwrap();
        exec(&["run", "--config", c, "--out", r, "--jobs", "2"]).unwrap();
        assert!(run.join("spurious.csv").is_file() && run.join("ages_cn.svg").is_file());
        exec(&["report", r]).unwrap();

        let again = dir.path().join("again");
        let manifest = run.join("manifest.json");
        exec(&[
            "run",
            "--config",
            manifest.to_str().unwrap(),
            "--out",
            again.to_str().unwrap(),
        ])
        .unwrap();
        for f in ["spurious.csv", "summary.json", "seeds/seed_4.json", "ages_ad.svg"] {
            assert_eq!(
                std::fs::read(run.join(f)).unwrap(),
                std::fs::read(again.join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn selftest_passes() {
        assert!(exec(&["selftest"]).unwrap());
    }

    #[test]
    fn bad_config_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.json");
        std::fs::write(&cfg, r#"{"kind": "main", "epochs": 3}"#).unwrap();
        assert!(exec(&["run", "--config", cfg.to_str().unwrap()]).is_err());
    }
}
