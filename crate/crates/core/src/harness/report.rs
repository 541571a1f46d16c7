//! Reads a finished run back, checks it, and scores it against the targets.

use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use super::config::ExperimentKind;
use super::manifest::RunManifest;
use super::results::{aggregate, AggTable, CellFormat, SeedResult, Summary};
use super::run::{seed_file, GVC, PROPOSED};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub dir: PathBuf,
    pub summary: Summary,
    pub manifest: RunManifest,
    pub criteria: Vec<CriterionResult>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} ({}), {} seeds, config {}",
            self.summary.name,
            self.summary.kind,
            self.summary.seeds.len(),
            &self.manifest.config_hash[..12]
        );
        for t in &self.summary.tables {
            let _ = writeln!(s, "\n[{}]", t.name);
            render_table(&mut s, t);
        }
        if !self.summary.scalars.is_empty() {
            let _ = writeln!(s, "\n[scalars]");
            for (k, v) in &self.summary.scalars {
                let _ = writeln!(s, "{k:<28} {:>12.5} ± {:.5}", v.mean, v.std);
            }
        }
        if !self.criteria.is_empty() {
            let _ = writeln!(s, "\n[criteria]");
            for c in &self.criteria {
                let _ = writeln!(s, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
        }
        s
    }
}

fn render_table(s: &mut String, t: &AggTable) {
    let fmt = |v: Option<f64>| v.map_or("N/A".to_string(), |v| t.format.format(v));
    let width = t.columns.iter().map(String::len).max().unwrap_or(0).max(10);
    let _ = write!(s, "{:<10}", "");
    for c in &t.columns {
        let _ = write!(s, " {c:>width$}");
    }
    let _ = writeln!(s);
    for r in &t.rows {
        let _ = write!(s, "{:<10}", r.method);
        for (m, sd) in r.mean.iter().zip(&r.std) {
            let cell = match (m, sd, t.format) {
                (Some(_), Some(sd), CellFormat::Percent) => format!("{}±{:.1}", fmt(*m), 100.0 * sd),
                _ => fmt(*m),
            };
            let _ = write!(s, " {cell:>width$}");
        }
        let _ = writeln!(s);
    }
    if t.rows.len() < 2 {
        return;
    }
    let _ = write!(s, "{:<10}", "best");
    for (_, best) in t.best_per_column() {
        let _ = write!(s, " {:>width$}", best.as_deref().unwrap_or("-"));
    }
    let _ = writeln!(s);
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Loads `dir`, re-aggregates the per-seed files to confirm the summary, and
/// evaluates the targets for the experiment's kind.
pub fn report(dir: &Path) -> Result<Report> {
    let expected = ["manifest.json", "summary.json"];
    let missing: Vec<String> = expected
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingResults {
            dir: dir.to_path_buf(),
            missing,
        });
    }
    let manifest_path = dir.join("manifest.json");
    let manifest: RunManifest = read_json(&manifest_path)?;
    let hash = manifest.config.hash()?;
    if hash != manifest.config_hash {
        return Err(Error::Corrupt {
            path: manifest_path,
            detail: "config hash does not match the recorded config".into(),
        });
    }
    let summary: Summary = read_json(&dir.join("summary.json"))?;
    let seed_paths: Vec<PathBuf> = summary.seeds.iter().map(|&s| seed_file(dir, s)).collect();
    let missing: Vec<String> = seed_paths
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingResults {
            dir: dir.to_path_buf(),
            missing,
        });
    }
    let seeds: Vec<SeedResult> = seed_paths.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let again = aggregate(&summary.name, &summary.kind, &seeds)?;
    if !summaries_agree(&again, &summary) {
        return Err(Error::Corrupt {
            path: dir.join("summary.json"),
            detail: "summary disagrees with the per-seed results".into(),
        });
    }
    let criteria = evaluate_criteria(manifest.config.kind, &summary, &manifest);
    Ok(Report {
        dir: dir.to_path_buf(),
        summary,
        manifest,
        criteria,
    })
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(a), Some(b)) => (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs())),
        _ => false,
    }
}

fn summaries_agree(a: &Summary, b: &Summary) -> bool {
    a.seeds == b.seeds
        && a.tables.len() == b.tables.len()
        && a.tables.iter().zip(&b.tables).all(|(x, y)| {
            x.name == y.name
                && x.columns == y.columns
                && x.rows.len() == y.rows.len()
                && x.rows
                    .iter()
                    .zip(&y.rows)
                    .all(|(r, q)| r.method == q.method && r.mean.iter().zip(&q.mean).all(|(u, v)| close(*u, *v)))
        })
        && a.scalars.len() == b.scalars.len()
        && a.scalars
            .iter()
            .zip(&b.scalars)
            .all(|((ka, sa), (kb, sb))| ka == kb && close(Some(sa.mean), Some(sb.mean)))
}

/// Pinned targets. Accuracies are fractions.
pub mod targets {
    pub const MAIN_OVERALL_GAIN: f64 = 0.02;
    pub const MAIN_WORST_GAIN: f64 = 0.05;
    pub const CONTINUAL_MARGIN: f64 = 0.03;
    pub const CONTINUAL_MONOTONE_SLACK: f64 = 0.01;
    pub const N_SWEEP_SPREAD: f64 = 0.06;
    pub const SPURIOUS_OVERALL_GAIN: f64 = 0.05;
    pub const SPURIOUS_WORST_GAIN: f64 = 0.10;
    pub const SPURIOUS_AGE_SHIFT: f64 = 2.0;
    pub const FIDELITY_RATIO: f64 = 2.0;
}

fn crit(name: &str, passed: bool, detail: String) -> CriterionResult {
    CriterionResult {
        name: name.into(),
        passed,
        detail,
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or("N/A".into(), |v| format!("{:.1}%", 100.0 * v))
}

fn gain_check(name: &str, table: Option<&AggTable>, column: &str, base: &str, gain: f64) -> CriterionResult {
    let b = table.and_then(|t| t.mean(base, column));
    let p = table.and_then(|t| t.mean(PROPOSED, column));
    let passed = matches!((b, p), (Some(b), Some(p)) if p >= b + gain - 1e-12);
    crit(
        name,
        passed,
        format!(
            "{PROPOSED} {} vs {base} {} (needs +{:.0} points)",
            pct(p),
            pct(b),
            100.0 * gain
        ),
    )
}

pub fn evaluate_criteria(kind: ExperimentKind, s: &Summary, m: &RunManifest) -> Vec<CriterionResult> {
    use targets::*;
    match kind {
        ExperimentKind::Main | ExperimentKind::Baselines => vec![
            gain_check(
                "overall accuracy gain",
                s.table("accuracy"),
                "overall",
                "Naive",
                MAIN_OVERALL_GAIN,
            ),
            gain_check(
                "worst-group gain",
                s.table("worst_group"),
                "worst group",
                "Naive",
                MAIN_WORST_GAIN,
            ),
        ],
        ExperimentKind::Continual => continual_criteria(s, m),
        ExperimentKind::NSweep => {
            let t = s.table("n_sweep");
            let vals: Vec<Option<f64>> = m
                .config
                .n_values
                .iter()
                .map(|n| t.and_then(|t| t.mean(PROPOSED, &format!("N={n}"))))
                .collect();
            let lo = vals.first().copied().flatten();
            let hi = vals.last().copied().flatten();
            let passed = matches!((lo, hi), (Some(a), Some(b)) if (a - b).abs() <= N_SWEEP_SPREAD + 1e-12);
            vec![crit(
                "robust to N",
                passed,
                format!(
                    "smallest N {} vs largest N {} (within {:.0} points)",
                    pct(lo),
                    pct(hi),
                    100.0 * N_SWEEP_SPREAD
                ),
            )]
        }
        ExperimentKind::Spurious => {
            let shift = s.scalar("young_ad_age_shift");
            vec![
                gain_check(
                    "overall gain",
                    s.table("spurious"),
                    "overall",
                    "Naive",
                    SPURIOUS_OVERALL_GAIN,
                ),
                gain_check(
                    "worst-group gain",
                    s.table("worst_group"),
                    "worst group",
                    "Naive",
                    SPURIOUS_WORST_GAIN,
                ),
                crit(
                    "young AD targets age",
                    shift.is_some_and(|v| v >= SPURIOUS_AGE_SHIFT),
                    format!(
                        "mean shift {:.2} years (needs {SPURIOUS_AGE_SHIFT})",
                        shift.unwrap_or(f64::NAN)
                    ),
                ),
            ]
        }
        ExperimentKind::GVsC => {
            let ratio = s.scalar("fidelity_ratio");
            let t = s.table("g_vs_c");
            let gvc = t.and_then(|t| t.mean(GVC, "overall"));
            let p = t.and_then(|t| t.mean(PROPOSED, "overall"));
            vec![
                crit(
                    "fidelity degrades",
                    ratio.is_some_and(|r| r >= FIDELITY_RATIO),
                    format!(
                        "final/initial MSE {:.2} (needs {FIDELITY_RATIO})",
                        ratio.unwrap_or(f64::NAN)
                    ),
                ),
                crit(
                    "G-vs-C trails fixed G",
                    matches!((gvc, p), (Some(g), Some(p)) if g < p),
                    format!("{GVC} {} vs {PROPOSED} {}", pct(gvc), pct(p)),
                ),
            ]
        }
    }
}

fn continual_criteria(s: &Summary, m: &RunManifest) -> Vec<CriterionResult> {
    use targets::*;
    let Some(t) = s.table("continual") else {
        return vec![crit("continual table", false, "missing".into())];
    };
    let mut ms = m.config.m_values.clone();
    ms.sort_by(f64::total_cmp);
    let cols: Vec<String> = ms.iter().map(|v| format!("M={v}")).collect();
    let min_col = &cols[0];
    let p = t.mean(PROPOSED, min_col);
    let h = t.mean("HSRS", min_col);
    let margin = matches!((p, h), (Some(p), Some(h)) if p >= h + CONTINUAL_MARGIN - 1e-12);
    let mut bad = Vec::new();
    for r in &t.rows {
        let vals: Vec<f64> = cols.iter().filter_map(|c| t.mean(&r.method, c)).collect();
        // Every smaller store against every larger one, not just neighbours.
        let rises = (0..vals.len()).any(|i| (i + 1..vals.len()).any(|j| vals[i] > vals[j] + CONTINUAL_MONOTONE_SLACK));
        if rises {
            bad.push(r.method.clone());
        }
    }
    vec![
        crit(
            "proposed beats HSRS at smallest M",
            margin,
            format!(
                "{min_col}: {PROPOSED} {} vs HSRS {} (needs +{:.0} points)",
                pct(p),
                pct(h),
                100.0 * CONTINUAL_MARGIN
            ),
        ),
        crit(
            "accuracy falls as memory shrinks",
            bad.is_empty(),
            if bad.is_empty() {
                "every method non-increasing".into()
            } else {
                format!("rises with less memory: {}", bad.join(", "))
            },
        ),
    ]
}
