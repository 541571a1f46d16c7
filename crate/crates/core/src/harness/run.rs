//! Per-seed experiment bodies and the multi-seed driver.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::{ExperimentConfig, ExperimentKind};
use super::manifest::{dataset_fingerprint, now_rfc3339, RunManifest, SeedRecord};
use super::results::{aggregate, write_table_csv, AgeTrace, CellFormat, SeedResult, Summary, Table};
use super::seeds::{self, derive_seed};
use super::svg::age_histogram_svg;
use super::write_atomic;
use crate::augment::{
    adversarial_train, adversarial_train_with_store, make_store, run_baseline, train_generator_adversarial, AdvConfig,
    AdvHistory, BaselineKind,
};
use crate::encoding::{Diagnosis, EncoderParams, FourierEncoder};
use crate::error::{Error, Result};
use crate::metrics::{AgeBins, MetricsReport};
use crate::models::{
    distill_generator, evaluate, pretrain_classifier, AnalyticGenerator, ClassifierModel, ConditionalGenerator,
    DistillConfig, GeneratorKind, NeuralGenerator, ProbeSet, TrainConfig,
};
use crate::synthworld::{make_spurious, sample_dataset, Splits, SpuriousSpec, SynthSample};

pub const PROPOSED: &str = "Proposed";
pub const GVC: &str = "G-vs-C";

/// Everything one seed shares across methods.
pub struct SeedContext {
    pub seed: u64,
    pub splits: Splits,
    pub bins: AgeBins,
    /// The pretrained classifier; every method starts from a clone.
    pub c0: ClassifierModel,
    pub neural: Option<NeuralGenerator>,
    pub encoder_seed: Option<u64>,
    pub distill_val_mse: Option<f64>,
    pub fingerprint: String,
    analytic: AnalyticGenerator,
    adv: AdvConfig,
}

/// The seed's dataset.
pub fn make_splits(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    let data_seed = derive_seed(seed, seeds::DATA);
    let splits = match cfg.kind {
        ExperimentKind::Spurious => make_spurious(
            &SpuriousSpec {
                seed: data_seed,
                ..cfg.spurious.clone()
            },
            &cfg.render,
        )?,
        _ => {
            let mut spec = cfg.dataset.clone();
            spec.seed = data_seed;
            sample_dataset(&spec, &cfg.render)?
        }
    };
    if splits.train.is_empty() || splits.test.is_empty() {
        return Err(Error::Empty("train or test split"));
    }
    Ok(splits)
}

/// `C0`: the classifier pretrained on the seed's training split.
pub fn pretrain(cfg: &ExperimentConfig, seed: u64, splits: &Splits) -> Result<ClassifierModel> {
    let mut c0 = ClassifierModel::new(cfg.render.pixels(), &cfg.classifier, derive_seed(seed, seeds::MODEL))?;
    let train = TrainConfig {
        seed: derive_seed(seed, seeds::SHUFFLE),
        ..cfg.pretrain
    };
    let hist = pretrain_classifier(&mut c0, &splits.train, &train)?;
    log::info!(
        "seed {seed}: pretrained on {} samples, final loss {:.4}",
        splits.train.len(),
        hist.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(c0)
}

/// The neural generator distilled from the analytic one, with its encoder seed
/// and final validation MSE.
pub fn distill(cfg: &ExperimentConfig, seed: u64) -> Result<(NeuralGenerator, u64, f64)> {
    let encoder_seed = derive_seed(seed, seeds::ENCODER);
    let enc = FourierEncoder::from_params(EncoderParams {
        seed: encoder_seed,
        ..cfg.encoder
    })?;
    let mut g = NeuralGenerator::new(
        enc,
        &cfg.distill.hidden,
        cfg.render.size,
        derive_seed(seed, seeds::GENERATOR),
    )?;
    let dc = DistillConfig {
        train: TrainConfig {
            seed: derive_seed(seed, seeds::GENERATOR),
            ..cfg.distill.train
        },
        ..cfg.distill.clone()
    };
    let rep = distill_generator(&mut g, &cfg.render, &dc)?;
    log::info!(
        "seed {seed}: generator distilled, validation MSE {:.5}",
        rep.final_val_mse
    );
    Ok((g, encoder_seed, rep.final_val_mse))
}

impl SeedContext {
    pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let splits = make_splits(cfg, seed)?;
        let c0 = pretrain(cfg, seed, &splits)?;
        let wants_neural = cfg.kind == ExperimentKind::GVsC || cfg.adversarial.generator == GeneratorKind::Neural;
        let (neural, encoder_seed, distill_val_mse) = if wants_neural {
            let (g, e, mse) = distill(cfg, seed)?;
            (Some(g), Some(e), Some(mse))
        } else {
            (None, None, None)
        };
        let fingerprint = dataset_fingerprint(&splits);
        Ok(Self {
            seed,
            bins: cfg.bins()?,
            c0,
            neural,
            encoder_seed,
            distill_val_mse,
            fingerprint,
            analytic: AnalyticGenerator { render: cfg.render },
            adv: AdvConfig {
                seed,
                ..cfg.adversarial.clone()
            },
            splits,
        })
    }

    pub fn generator(&self) -> &dyn ConditionalGenerator {
        match &self.neural {
            Some(g) if self.adv.generator == GeneratorKind::Neural => g,
            _ => &self.analytic,
        }
    }

    fn val(&self) -> Option<&[SynthSample]> {
        (!self.splits.val.is_empty()).then_some(self.splits.val.as_slice())
    }

    pub fn evaluate(&self, model: &ClassifierModel) -> Result<MetricsReport> {
        evaluate(model, &self.splits.test, &self.bins)
    }
}

pub struct SeedOutput {
    pub result: SeedResult,
    /// `(file stem, history)` of every proposed run.
    pub histories: Vec<(String, AdvHistory)>,
}

fn group_columns(bins: &AgeBins) -> Vec<String> {
    let mut cols = Vec::new();
    for d in [Diagnosis::Cn, Diagnosis::Ad] {
        for b in 0..bins.count() {
            cols.push(format!("{} {}", d.name(), bins.label(b)));
        }
    }
    cols.push("overall".into());
    cols
}

fn group_row(r: &MetricsReport) -> Vec<Option<f64>> {
    let mut v = Vec::new();
    for d in [Diagnosis::Cn, Diagnosis::Ad] {
        for b in 0..r.bins.count() {
            v.push(r.group(b, d).accuracy);
        }
    }
    v.push(Some(r.overall_accuracy));
    v
}

fn pr_columns(bins: &AgeBins) -> Vec<String> {
    let mut cols = Vec::new();
    for what in ["precision", "recall"] {
        for b in 0..bins.count() {
            let e = bins.edges();
            cols.push(format!("{what} {}-{}", e[b], e[b + 1]));
        }
        cols.push(format!("{what} overall"));
    }
    cols
}

fn pr_row(r: &MetricsReport) -> Vec<Option<f64>> {
    let mut v = r.per_bin_precision.clone();
    v.push(r.precision);
    v.extend(r.per_bin_recall.iter().copied());
    v.push(r.recall);
    v
}

fn ascent_scalars(scalars: &mut BTreeMap<String, f64>, prefix: &str, h: &AdvHistory) {
    let frac = if h.ascent_steps == 0 {
        1.0
    } else {
        h.ascent_ok as f64 / h.ascent_steps as f64
    };
    scalars.insert(format!("{prefix}ascent_ok_fraction"), frac);
    let in_bounds = h.iterations.iter().all(|r| r.in_bounds);
    scalars.insert(format!("{prefix}ages_in_bounds"), if in_bounds { 1.0 } else { 0.0 });
    scalars.insert(format!("{prefix}synthesized"), h.synthesized_total as f64);
}

/// Runs `kind` (or the proposed method for `None`) from a copy of `C0` on
/// `pool`.
fn run_method(
    ctx: &SeedContext,
    kind: Option<BaselineKind>,
    pool: &[SynthSample],
    adv: &AdvConfig,
    cfg: &ExperimentConfig,
) -> Result<(ClassifierModel, Option<AdvHistory>)> {
    let mut model = ctx.c0.clone();
    let history = match kind {
        None => Some(adversarial_train(&mut model, ctx.generator(), pool, ctx.val(), adv)?),
        Some(k) => {
            let rep = run_baseline(k, &mut model, ctx.generator(), pool, adv, &cfg.baseline_params)?;
            log::debug!("seed {}: {} synthesized {}", ctx.seed, k.name(), rep.synthesized);
            None
        }
    };
    Ok((model, history))
}

fn base_result(ctx: &SeedContext) -> SeedResult {
    let mut scalars = BTreeMap::new();
    if let Some(m) = ctx.distill_val_mse {
        scalars.insert("distill_val_mse".into(), m);
    }
    SeedResult {
        seed: ctx.seed,
        dataset_fingerprint: ctx.fingerprint.clone(),
        encoder_seed: ctx.encoder_seed,
        tables: Vec::new(),
        scalars,
        ages: None,
    }
}

fn run_main(cfg: &ExperimentConfig, ctx: &SeedContext) -> Result<SeedOutput> {
    let mut result = base_result(ctx);
    let mut acc = Table::new("accuracy", group_columns(&ctx.bins), CellFormat::Percent);
    let mut worst = Table::new("worst_group", vec!["worst group".into()], CellFormat::Percent);
    let mut pr = Table::new("precision_recall", pr_columns(&ctx.bins), CellFormat::Fraction);
    let mut histories = Vec::new();
    let methods: Vec<Option<BaselineKind>> = cfg.methods().into_iter().map(Some).chain([None]).collect();
    for kind in methods {
        let name = kind.map_or(PROPOSED, BaselineKind::name);
        let (model, history) = run_method(ctx, kind, &ctx.splits.train, &ctx.adv, cfg)?;
        let r = ctx.evaluate(&model)?;
        acc.push(name, group_row(&r));
        worst.push(name, vec![Some(r.worst_group_accuracy)]);
        pr.push(name, pr_row(&r));
        if let Some(h) = history {
            ascent_scalars(&mut result.scalars, "", &h);
            histories.push(("history_proposed".to_string(), h));
        }
    }
    result.tables = vec![acc, worst, pr];
    Ok(SeedOutput { result, histories })
}

fn column_label(prefix: &str, v: f64) -> String {
    format!("{prefix}={v}")
}

fn run_continual(cfg: &ExperimentConfig, ctx: &SeedContext) -> Result<SeedOutput> {
    let mut result = base_result(ctx);
    let cols: Vec<String> = cfg.m_values.iter().map(|&m| column_label("M", m)).collect();
    let methods = cfg.methods();
    let mut rows: Vec<Vec<Option<f64>>> = vec![Vec::new(); methods.len() + 1];
    let mut histories = Vec::new();
    for &m in &cfg.m_values {
        let store = make_store(&ctx.splits.train, m, ctx.adv.seed)?;
        for (i, &kind) in methods.iter().enumerate() {
            // Naive never retrains, so it only has a full-data entry.
            if kind == BaselineKind::Naive && m < 100.0 {
                rows[i].push(None);
                continue;
            }
            let (model, _) = run_method(ctx, Some(kind), &store, &ctx.adv, cfg)?;
            rows[i].push(Some(ctx.evaluate(&model)?.overall_accuracy));
        }
        let mut model = ctx.c0.clone();
        let h = adversarial_train_with_store(&mut model, ctx.generator(), &ctx.splits.train, m, ctx.val(), &ctx.adv)?;
        rows[methods.len()].push(Some(ctx.evaluate(&model)?.overall_accuracy));
        ascent_scalars(&mut result.scalars, &format!("M={m} "), &h);
        histories.push((format!("history_proposed_m{m}"), h));
    }
    let mut t = Table::new("continual", cols, CellFormat::Percent);
    for (i, kind) in methods.iter().enumerate() {
        t.push(kind.name(), rows[i].clone());
    }
    t.push(PROPOSED, rows[methods.len()].clone());
    result.tables = vec![t];
    Ok(SeedOutput { result, histories })
}

fn run_n_sweep(cfg: &ExperimentConfig, ctx: &SeedContext) -> Result<SeedOutput> {
    let mut result = base_result(ctx);
    let store = make_store(&ctx.splits.train, cfg.n_sweep_m, ctx.adv.seed)?;
    let cols: Vec<String> = cfg.n_values.iter().map(|&n| column_label("N", n as f64)).collect();
    let methods: Vec<Option<BaselineKind>> = cfg
        .methods()
        .into_iter()
        .filter(|k| *k != BaselineKind::Naive)
        .map(Some)
        .chain([None])
        .collect();
    let mut t = Table::new("n_sweep", cols, CellFormat::Percent);
    let mut histories = Vec::new();
    for kind in methods {
        let name = kind.map_or(PROPOSED, BaselineKind::name);
        let mut row = Vec::new();
        for &n in &cfg.n_values {
            let adv = AdvConfig {
                n_hard: n,
                ..ctx.adv.clone()
            };
            let (model, history) = run_method(ctx, kind, &store, &adv, cfg)?;
            row.push(Some(ctx.evaluate(&model)?.overall_accuracy));
            if let Some(h) = history {
                result.scalars.insert(format!("N={n} effective"), h.n_effective as f64);
                histories.push((format!("history_proposed_n{n}"), h));
            }
        }
        t.push(name, row);
    }
    result.tables = vec![t];
    Ok(SeedOutput { result, histories })
}

fn run_spurious(cfg: &ExperimentConfig, ctx: &SeedContext) -> Result<SeedOutput> {
    let mut out = run_main(cfg, ctx)?;
    out.result.tables.retain(|t| t.name != "precision_recall");
    out.result.tables[0].name = "spurious".into();
    let h = &out.histories[0].1;
    let split = cfg.spurious.split_age;
    let mut trace = AgeTrace::default();
    let (mut young_ad_before, mut young_ad_after) = (Vec::new(), Vec::new());
    for (i, &d) in h.labels.iter().enumerate() {
        let (before, after) = (h.initial_ages[i], h.final_ages()[i]);
        match d {
            Diagnosis::Ad => {
                trace.ad_before.push(before);
                trace.ad_after.push(after);
                if h.chron_ages[i] < split {
                    young_ad_before.push(before);
                    young_ad_after.push(after);
                }
            }
            Diagnosis::Cn => {
                trace.cn_before.push(before);
                trace.cn_after.push(after);
            }
        }
    }
    let shift = |a: &[f64], b: &[f64]| {
        if a.is_empty() {
            0.0
        } else {
            crate::metrics::mean(b) - crate::metrics::mean(a)
        }
    };
    let s = &mut out.result.scalars;
    s.insert("young_ad_age_shift".into(), shift(&young_ad_before, &young_ad_after));
    s.insert("cn_age_shift".into(), shift(&trace.cn_before, &trace.cn_after));
    out.result.ages = Some(trace);
    Ok(out)
}

fn run_g_vs_c(cfg: &ExperimentConfig, ctx: &SeedContext) -> Result<SeedOutput> {
    let mut result = base_result(ctx);
    let gen = ctx
        .neural
        .as_ref()
        .ok_or(Error::InvalidConfig("g_vs_c needs the neural generator".into()))?;
    let probes = ProbeSet::draw(
        &cfg.render,
        &cfg.distill.latents,
        cfg.distill.val_samples.max(1),
        derive_seed(ctx.seed, seeds::PROBE),
    )?;
    let mut acc = Table::new(
        "g_vs_c",
        vec!["overall".into(), "worst group".into()],
        CellFormat::Percent,
    );
    let r0 = ctx.evaluate(&ctx.c0)?;
    acc.push("Naive", vec![Some(r0.overall_accuracy), Some(r0.worst_group_accuracy)]);

    let mut proposed = ctx.c0.clone();
    let h = adversarial_train(&mut proposed, gen, &ctx.splits.train, ctx.val(), &ctx.adv)?;
    let rp = ctx.evaluate(&proposed)?;
    acc.push(PROPOSED, vec![Some(rp.overall_accuracy), Some(rp.worst_group_accuracy)]);

    let mut g = gen.clone();
    let mut c = ctx.c0.clone();
    let rep = train_generator_adversarial(&mut g, &mut c, &ctx.splits.train, &probes, &ctx.adv, &cfg.gvc)?;
    let rg = ctx.evaluate(&c)?;
    acc.push(GVC, vec![Some(rg.overall_accuracy), Some(rg.worst_group_accuracy)]);

    let rounds = cfg.adversarial.k + 1;
    let mut fid = Table::new(
        "fidelity",
        (0..rounds).map(|i| format!("round {i}")).collect(),
        CellFormat::Scientific,
    );
    // Rounds after a divergence have no value.
    fid.push("MSE", (0..rounds).map(|i| rep.fidelity.get(i).copied()).collect());
    let first = rep.fidelity[0];
    let last = *rep.fidelity.last().expect("non-empty");
    let s = &mut result.scalars;
    s.insert("post_distill_mse".into(), first);
    s.insert("final_mse".into(), last);
    s.insert("fidelity_ratio".into(), last / first);
    s.insert("diverged".into(), if rep.diverged.is_some() { 1.0 } else { 0.0 });
    if let Some(d) = &rep.diverged {
        log::warn!("seed {}: generator update diverged: {d}", ctx.seed);
    }
    result.tables = vec![acc, fid];
    Ok(SeedOutput {
        result,
        histories: vec![("history_proposed".into(), h)],
    })
}

/// One seed, end to end.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let ctx = SeedContext::prepare(cfg, seed)?;
    match cfg.kind {
        ExperimentKind::Main | ExperimentKind::Baselines => run_main(cfg, &ctx),
        ExperimentKind::Continual => run_continual(cfg, &ctx),
        ExperimentKind::NSweep => run_n_sweep(cfg, &ctx),
        ExperimentKind::Spurious => run_spurious(cfg, &ctx),
        ExperimentKind::GVsC => run_g_vs_c(cfg, &ctx),
    }
}

/// Runs `f` over `items` on up to `jobs` threads; results keep item order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("poisoned")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub jobs: usize,
    /// Fingerprints from an earlier run that this one must reproduce.
    pub expect: Option<RunManifest>,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: Summary,
    pub manifest: RunManifest,
}

pub fn output_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results").join(cfg.name()))
}

pub fn seed_file(dir: &Path, seed: u64) -> PathBuf {
    dir.join("seeds").join(format!("seed_{seed}.json"))
}

/// Runs every seed and writes per-seed JSON, histories, the aggregate
/// summary, CSV tables, plots and the manifest.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = now_rfc3339();
    let dir = output_dir(cfg, opts);
    log::info!(
        "running {} ({} seeds, {} jobs) into {}",
        cfg.name(),
        cfg.seeds.len(),
        opts.jobs.max(1),
        dir.display()
    );
    let outputs = parallel_map(&cfg.seeds, opts.jobs.max(1), |&s| run_seed(cfg, s));
    let outputs: Vec<SeedOutput> = outputs.into_iter().collect::<Result<_>>()?;

    if let Some(m) = &opts.expect {
        for (o, rec) in outputs.iter().zip(&m.seeds) {
            if o.result.dataset_fingerprint != rec.dataset_fingerprint || o.result.encoder_seed != rec.encoder_seed {
                return Err(Error::Inconsistent(format!(
                    "seed {} did not reproduce the manifest's dataset",
                    rec.seed
                )));
            }
        }
    }

    for o in &outputs {
        let r = &o.result;
        write_atomic(&seed_file(&dir, r.seed), &serde_json::to_vec_pretty(r)?)?;
        for (stem, h) in &o.histories {
            h.write_jsonl(
                &dir.join("seeds")
                    .join(format!("seed_{}", r.seed))
                    .join(format!("{stem}.jsonl")),
            )?;
        }
    }
    let results: Vec<SeedResult> = outputs.into_iter().map(|o| o.result).collect();
    let summary = aggregate(&cfg.name(), cfg.kind.name(), &results)?;
    write_atomic(&dir.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
    for t in &summary.tables {
        write_table_csv(&dir, t)?;
    }
    if cfg.kind == ExperimentKind::Spurious {
        let pooled = |f: fn(&AgeTrace) -> &Vec<f64>| -> Vec<f64> {
            results
                .iter()
                .filter_map(|r| r.ages.as_ref())
                .flat_map(|a| f(a).iter().copied())
                .collect()
        };
        for (file, title, before, after) in [
            (
                "ages_ad.svg",
                "AD hard samples: target ages",
                pooled(|a| &a.ad_before),
                pooled(|a| &a.ad_after),
            ),
            (
                "ages_cn.svg",
                "CN hard samples: target ages",
                pooled(|a| &a.cn_before),
                pooled(|a| &a.cn_after),
            ),
        ] {
            let svg = age_histogram_svg(title, &before, &after, cfg.histogram_width);
            write_atomic(&dir.join(file), svg.as_bytes())?;
        }
    }
    let manifest = RunManifest {
        config_hash: cfg.hash()?,
        library_version: env!("CARGO_PKG_VERSION").into(),
        started,
        finished: now_rfc3339(),
        seeds: results
            .iter()
            .map(|r| SeedRecord {
                seed: r.seed,
                encoder_seed: r.encoder_seed,
                dataset_fingerprint: r.dataset_fingerprint.clone(),
            })
            .collect(),
        config: cfg.clone(),
    };
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(RunOutcome { dir, summary, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let xs: Vec<u64> = (0..17).collect();
        assert_eq!(
            parallel_map(&xs, 4, |x| x * x),
            xs.iter().map(|x| x * x).collect::<Vec<_>>()
        );
        assert_eq!(parallel_map(&xs, 1, |x| x + 1)[16], 17);
        assert!(parallel_map(&Vec::<u64>::new(), 3, |x| *x).is_empty());
    }

    fn tiny(kind: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{
                "kind": "{kind}",
                "render": {{"size": 8, "ad_acceleration": 30.0}},
                "dataset": {{
                    "age_bins": [60.0, 70.0, 80.0, 90.0],
                    "train": {{"cn": [12, 8, 4], "ad": [4, 8, 12]}},
                    "val": {{"cn": [2, 2, 2], "ad": [2, 2, 2]}},
                    "test": {{"cn": [5, 5, 5], "ad": [5, 5, 5]}},
                    "seed": 0
                }},
                "spurious": {{"train_ad": 16, "train_cn": 16, "val_per_class": 2, "test_per_group": 5, "split_age": 75.0, "seed": 0}},
                "encoder": {{"m": 8}},
                "classifier": {{"hidden": [8]}},
                "distill": {{"hidden": [8], "train_samples": 40, "val_samples": 10, "train": {{"lr": 1e-3, "epochs": 2}}}},
                "pretrain": {{"lr": 1e-3, "epochs": 3}},
                "adversarial": {{"k": 2, "n_hard": 6, "train": {{"lr": 1e-3}}}},
                "m_values": [10.0, 100.0],
                "n_values": [1, 6],
                "n_sweep_m": 50.0,
                "seeds": [0, 1]
            }}"#
        ))
        .unwrap()
    }

    fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else if !p.ends_with("manifest.json") {
                    out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
                }
            }
        }
        out
    }

    fn run_into(cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> RunOutcome {
        run_experiment(
            cfg,
            &RunOptions {
                out: Some(dir.to_path_buf()),
                jobs,
                expect: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn every_kind_writes_its_tables() {
        let tmp = tempfile::tempdir().unwrap();
        for (kind, tables) in [
            ("main", vec!["accuracy", "worst_group", "precision_recall"]),
            ("baselines", vec!["accuracy", "worst_group", "precision_recall"]),
            ("continual", vec!["continual"]),
            ("n_sweep", vec!["n_sweep"]),
            ("spurious", vec!["spurious", "worst_group"]),
            ("g_vs_c", vec!["g_vs_c", "fidelity"]),
        ] {
            let dir = tmp.path().join(kind);
            let out = run_into(&tiny(kind), &dir, 1);
            for t in &tables {
                assert!(dir.join(format!("{t}.csv")).is_file(), "{kind}: {t}.csv");
                assert!(out.summary.table(t).is_some());
            }
            assert!(seed_file(&dir, 1).is_file());
            assert!(dir.join("seeds/seed_0/history_proposed.jsonl").is_file() || kind != "main");
            let rep = crate::harness::report(&dir).unwrap();
            assert!(!rep.criteria.is_empty(), "{kind} has targets");
            assert!(rep.render().contains("[criteria]"));
        }
        assert!(tmp.path().join("spurious/ages_ad.svg").is_file());
        let cont = crate::harness::report(&tmp.path().join("continual")).unwrap();
        let t = cont.summary.table("continual").unwrap();
        assert_eq!(t.columns, ["M=10", "M=100"]);
        assert_eq!(t.mean("Naive", "M=10"), None);
        assert!(t.mean("Naive", "M=100").is_some());
    }

    #[test]
    fn same_seed_runs_are_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny("main");
        run_into(&cfg, &tmp.path().join("a"), 1);
        run_into(&cfg, &tmp.path().join("b"), 2);
        let (a, b) = (files(&tmp.path().join("a")), files(&tmp.path().join("b")));
        assert!(a.keys().any(|p| p.extension().is_some_and(|e| e == "csv")));
        assert_eq!(a, b);
    }

    #[test]
    fn summary_matches_seed_files() {
        let tmp = tempfile::tempdir().unwrap();
        let out = run_into(&tiny("main"), tmp.path(), 1);
        let per_seed: Vec<f64> = [0, 1]
            .iter()
            .map(|&s| {
                let r: SeedResult = serde_json::from_slice(&std::fs::read(seed_file(tmp.path(), s)).unwrap()).unwrap();
                r.table("accuracy").unwrap().get(PROPOSED, "overall").unwrap()
            })
            .collect();
        let mean = (per_seed[0] + per_seed[1]) / 2.0;
        let sd = ((per_seed[0] - mean).powi(2) + (per_seed[1] - mean).powi(2)).sqrt();
        let t = out.summary.table("accuracy").unwrap();
        let row = t.rows.iter().find(|r| r.method == PROPOSED).unwrap();
        let c = t.columns.iter().position(|c| c == "overall").unwrap();
        assert!((row.mean[c].unwrap() - mean).abs() < 1e-12);
        assert!((row.std[c].unwrap() - sd).abs() < 1e-12);
        let csv = std::fs::read_to_string(tmp.path().join("accuracy.csv")).unwrap();
        assert!(csv.starts_with("Method,CN 60-70yrs,"));
        assert!(csv.contains(&format!("{PROPOSED},")));
    }

    #[test]
    fn tampered_summary_is_caught() {
        let tmp = tempfile::tempdir().unwrap();
        run_into(&tiny("spurious"), tmp.path(), 1);
        let path = tmp.path().join("summary.json");
        let mut s: Summary = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        s.tables[0].rows[0].mean[0] = Some(0.123);
        std::fs::write(&path, serde_json::to_vec(&s).unwrap()).unwrap();
        assert!(matches!(crate::harness::report(tmp.path()), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn manifest_rerun_checks_fingerprints() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny("spurious");
        let out = run_into(&cfg, &tmp.path().join("a"), 1);
        let mut expect = out.manifest.clone();
        let ok = RunOptions {
            out: Some(tmp.path().join("b")),
            jobs: 1,
            expect: Some(expect.clone()),
        };
        run_experiment(&cfg, &ok).unwrap();
        expect.seeds[0].dataset_fingerprint = "0".repeat(64);
        let bad = RunOptions {
            expect: Some(expect),
            ..ok
        };
        assert!(matches!(run_experiment(&cfg, &bad), Err(Error::Inconsistent(_))));
    }
}
