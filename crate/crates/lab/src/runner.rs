//! Subcommand implementations. Each run reads the resolved config, produces
//! its artifact files in the output directory, and never leaves partial
//! silent output: errors abort with a nonzero status.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use fuselab_core::analysis::{
    dissect, evaluate, perturbative_finetune_test, prune_sweep, weight_sparsity_stats,
};
use fuselab_core::attack::{
    AttackKind, AttackModule, LoraAdapters, ModelState, StaticPrompts, VpgParams,
};
use fuselab_core::data::generate_dataset;
use fuselab_core::defense::{anomaly_index, blend_asr, feature_proximity, reverse_trigger};
use fuselab_core::theory::concentration_study;
use fuselab_core::train::{train_clean_baseline, train_joint};

use crate::config::ExperimentConfig;
use crate::csvout::{fmt_f, read_csv, CsvWriter};
use crate::error::{LabError, Result};
use crate::io::{load_checkpoint, save_checkpoint, save_dataset};
use crate::latency::measure_latency;
use crate::svg::{write_line_plot, Series};

pub const SUBCOMMANDS: [&str; 10] = [
    "pretrain",
    "attack",
    "eval",
    "dissect",
    "perturb-test",
    "prune-sweep",
    "nc-defense",
    "proximity",
    "theory",
    "report",
];

pub struct RunContext {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl RunContext {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn backbone_path(&self) -> PathBuf {
        self.path("backbone.ckpt")
    }

    fn attack_path(&self, kind: AttackKind) -> PathBuf {
        self.path(&format!("attack_{}.ckpt", kind.label()))
    }

    fn seed(&self) -> u64 {
        self.config.train.seed
    }

    fn load_attacked(&self, kind: AttackKind) -> Result<ModelState> {
        let path = self.attack_path(kind);
        if !path.exists() {
            return Err(LabError::Config(format!(
                "missing checkpoint {}; run `attack` first",
                path.display()
            )));
        }
        load_checkpoint(&path)
    }
}

pub fn run(subcommand: &str, ctx: &RunContext) -> Result<()> {
    fs::create_dir_all(&ctx.out).map_err(LabError::io(&ctx.out))?;
    match subcommand {
        "pretrain" => pretrain(ctx),
        "attack" => attack(ctx),
        "eval" => eval(ctx),
        "dissect" => dissect_cmd(ctx),
        "perturb-test" => perturb_test(ctx),
        "prune-sweep" => prune_sweep_cmd(ctx),
        "nc-defense" => nc_defense(ctx),
        "proximity" => proximity(ctx),
        "theory" => theory(ctx),
        "report" => report(ctx),
        other => Err(LabError::Config(format!(
            "unknown subcommand '{other}' (expected one of {})",
            SUBCOMMANDS.join(", ")
        ))),
    }
}

fn pretrain(ctx: &RunContext) -> Result<()> {
    let ds = generate_dataset(&ctx.config.dataset_spec())?;
    let mut state = ModelState::new_clean(ctx.config.vit_config(), ctx.seed())?;
    let train_cfg = ctx.config.train_config();
    let acc = train_clean_baseline(&mut state, &ds, &train_cfg)?;
    save_checkpoint(&state, &ctx.backbone_path())?;
    save_dataset(&ds, &ctx.path("dataset.flab"))?;
    let mut csv = CsvWriter::new(&ctx.config, ctx.seed(), &["split", "acc"]);
    csv.row(&["test".to_string(), fmt_f(acc)]);
    csv.write(&ctx.path("pretrain_metrics.csv"))?;
    println!("pretrained backbone: clean test acc {acc:.4}");
    Ok(())
}

fn build_attack_module(ctx: &RunContext, cfg: &ModelState) -> Result<AttackModule> {
    let vit = &cfg.config;
    let layers = ctx.config.injection_layers();
    let seed = ctx.seed();
    Ok(match ctx.config.attack_kind() {
        AttackKind::Dynamic => AttackModule::Dynamic(VpgParams::init(
            vit,
            layers,
            ctx.config.attack.n_prompts,
            seed,
        )?),
        AttackKind::Static => AttackModule::Static(StaticPrompts::init(
            vit,
            layers,
            ctx.config.attack.n_prompts,
            seed,
        )?),
        AttackKind::LowRank => {
            AttackModule::LowRank(LoraAdapters::init(vit, ctx.config.attack.rank, seed)?)
        }
    })
}

fn attack(ctx: &RunContext) -> Result<()> {
    let path = ctx.backbone_path();
    if !path.exists() {
        return Err(LabError::Config(format!(
            "missing checkpoint {}; run `pretrain` first",
            path.display()
        )));
    }
    let mut state = load_checkpoint(&path)?;
    let ds = generate_dataset(&ctx.config.dataset_spec())?;
    state.attack = Some(build_attack_module(ctx, &state)?);
    state.seed = ctx.seed();
    let train_cfg = ctx.config.train_config();
    let kind = ctx.config.attack_kind();
    let log = train_joint(&mut state, &ds, &train_cfg)?;
    save_checkpoint(&state, &ctx.attack_path(kind))?;
    let mut csv = CsvWriter::new(
        &ctx.config,
        ctx.seed(),
        &["step", "epoch", "l_clean", "l_attack", "l_total"],
    );
    for s in &log.steps {
        csv.row(&[
            s.step.to_string(),
            s.epoch.to_string(),
            fmt_f(s.l_clean),
            fmt_f(s.l_attack),
            fmt_f(s.l_total),
        ]);
    }
    csv.write(&ctx.path(&format!("train_log_{}.csv", kind.label())))?;
    let last = log.epoch_means.last();
    println!(
        "trained {} attack: final epoch mean total loss {:.4}",
        kind.label(),
        last.map(|m| m.3).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval(ctx: &RunContext) -> Result<()> {
    let kind = ctx.config.attack_kind();
    let state = ctx.load_attacked(kind)?;
    let ds = generate_dataset(&ctx.config.dataset_spec())?;
    let trigger = state
        .trigger
        .clone()
        .ok_or(LabError::Config("checkpoint has no trigger".to_string()))?;
    let metrics = evaluate(
        &state,
        Some(&trigger),
        Some(ctx.config.attack.target_class),
        &ds.test_images,
        &ds.test_labels,
    )?;
    let mut csv = CsvWriter::new(
        &ctx.config,
        ctx.seed(),
        &["backend", "acc", "asr", "n_clean_eval", "n_attack_eval"],
    );
    csv.row(&[
        kind.label().to_string(),
        fmt_f(metrics.acc),
        fmt_f(metrics.asr),
        metrics.n_clean_eval.to_string(),
        metrics.n_attack_eval.to_string(),
    ]);
    csv.write(&ctx.path(&format!("metrics_{}.csv", kind.label())))?;
    let latency = measure_latency(&state, &ds.test_images[..8.min(ds.test_images.len())], 20)?;
    let mut lat = CsvWriter::new(
        &ctx.config,
        ctx.seed(),
        &["backend", "median_with_hooks_s", "median_without_hooks_s", "overhead_fraction"],
    );
    lat.row(&[
        kind.label().to_string(),
        fmt_f(latency.median_with_hooks_s),
        fmt_f(latency.median_without_hooks_s),
        fmt_f(latency.overhead_fraction),
    ]);
    lat.write(&ctx.path(&format!("latency_{}.csv", kind.label())))?;
    println!(
        "{}: acc {:.4} asr {:.4} latency overhead {:+.2}%",
        kind.label(),
        metrics.acc,
        metrics.asr,
        latency.overhead_fraction * 100.0
    );
    Ok(())
}

fn dissect_cmd(ctx: &RunContext) -> Result<()> {
    let kind = ctx.config.attack_kind();
    let state = ctx.load_attacked(kind)?;
    let ds = generate_dataset(&ctx.config.dataset_spec())?;
    let trigger = state
        .trigger
        .clone()
        .ok_or(LabError::Config("checkpoint has no trigger".to_string()))?;
    let report = dissect(
        &state,
        &trigger,
        ctx.config.attack.target_class,
        &ds.test_images,
        &ds.test_labels,
    )?;
    let flat = state.attack.as_ref().unwrap().flat_values();
    let sparsity = weight_sparsity_stats(&flat, 1e-6)?;
    let mut csv = CsvWriter::new(&ctx.config, ctx.seed(), &["config", "acc", "asr", "param_fraction"]);
    csv.row(&[
        "full".to_string(),
        fmt_f(report.full.acc),
        fmt_f(report.full.asr),
        fmt_f(sparsity.active_fraction),
    ]);
    csv.row(&[
        "core".to_string(),
        fmt_f(report.core_only.acc),
        fmt_f(report.core_only.asr),
        fmt_f(report.core_fraction),
    ]);
    csv.row(&[
        "periphery".to_string(),
        fmt_f(report.periphery_only.acc),
        fmt_f(report.periphery_only.asr),
        fmt_f(sparsity.active_fraction - report.core_fraction),
    ]);
    csv.write(&ctx.path("dissection.csv"))?;
    println!(
        "dissection: full {:.4}/{:.4}, core {:.4}/{:.4}, periphery {:.4}/{:.4}",
        report.full.acc,
        report.full.asr,
        report.core_only.acc,
        report.core_only.asr,
        report.periphery_only.acc,
        report.periphery_only.asr
    );
    Ok(())
}

fn perturb_test(ctx: &RunContext) -> Result<()> {
    let kind = ctx.config.attack_kind();
    let state = ctx.load_attacked(kind)?;
    let ds = generate_dataset(&ctx.config.dataset_spec())?;
    let (before, after) = perturbative_finetune_test(
        &state,
        &ds,
        ctx.config.attack.target_class,
        1,
        ctx.seed(),
    )?;
    let mut csv = CsvWriter::new(&ctx.config, ctx.seed(), &["phase", "acc", "asr"]);
    csv.row(&["before".to_string(), fmt_f(before.acc), fmt_f(before.asr)]);
    csv.row(&["after".to_string(), fmt_f(after.acc), fmt_f(after.asr)]);
    csv.write(&ctx.path("perturb.csv"))?;
    println!(
        "perturbative test: {:.4}/{:.4} -> {:.4}/{:.4}",
        before.acc, before.asr, after.acc, after.asr
    );
    Ok(())
}

fn prune_sweep_cmd(ctx: &RunContext) -> Result<()> {
    let ds = generate_dataset(&ctx.config.dataset_spec())?;
    let ratios: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    let mut csv = CsvWriter::new(&ctx.config, ctx.seed(), &["ratio", "acc", "asr", "backend"]);
    let mut found = 0;
    for kind in [AttackKind::Dynamic, AttackKind::Static, AttackKind::LowRank] {
        let path = ctx.attack_path(kind);
        if !path.exists() {
            continue;
        }
        found += 1;
        let state = load_checkpoint(&path)?;
        let trigger = state
            .trigger
            .clone()
            .ok_or(LabError::Config("checkpoint has no trigger".to_string()))?;
        let curve = prune_sweep(
            &state,
            &ratios,
            &trigger,
            ctx.config.attack.target_class,
            &ds.test_images,
            &ds.test_labels,
        )?;
        for (ratio, acc, asr) in curve.rows {
            csv.row(&[
                fmt_f(ratio),
                fmt_f(acc),
                fmt_f(asr),
                kind.label().to_string(),
            ]);
        }
    }
    if found == 0 {
        return Err(LabError::Config(
            "no attack checkpoints found; run `attack` first".to_string(),
        ));
    }
    csv.write(&ctx.path("prune_sweep.csv"))?;
    println!("prune sweep over {found} backend(s) written");
    Ok(())
}

fn nc_defense(ctx: &RunContext) -> Result<()> {
    let kind = ctx.config.attack_kind();
    let state = ctx.load_attacked(kind)?;
    let ds = generate_dataset(&ctx.config.dataset_spec())?;
    let batch: Vec<_> = ds
        .test_images
        .iter()
        .take(ctx.config.defense.nc_batch)
        .cloned()
        .collect();
    let classes = state.config.classes;
    let mut reversed = Vec::with_capacity(classes);
    for class in 0..classes {
        reversed.push(reverse_trigger(
            &state,
            class,
            ctx.config.defense.nc_steps,
            ctx.config.defense.lambda_l1,
            &batch,
        )?);
    }
    let l1: Vec<f64> = reversed.iter().map(|r| r.l1).collect();
    let anomaly = anomaly_index(&l1)?;
    let mut csv = CsvWriter::new(
        &ctx.config,
        ctx.seed(),
        &["class", "l1", "anomaly_index", "flagged", "recovered_asr"],
    );
    for (class, rt) in reversed.iter().enumerate() {
        let asr = blend_asr(&state, rt, &ds.test_images, &ds.test_labels)?;
        csv.row(&[
            class.to_string(),
            fmt_f(rt.l1),
            fmt_f(anomaly.index[class]),
            anomaly.flagged.contains(&class).to_string(),
            fmt_f(asr),
        ]);
    }
    csv.write(&ctx.path("nc_report.csv"))?;
    println!(
        "trigger reversal done: flagged classes {:?}",
        anomaly.flagged
    );
    Ok(())
}

fn proximity(ctx: &RunContext) -> Result<()> {
    let kind = ctx.config.attack_kind();
    let state = ctx.load_attacked(kind)?;
    let ds = generate_dataset(&ctx.config.dataset_spec())?;
    let trigger = state
        .trigger
        .clone()
        .ok_or(LabError::Config("checkpoint has no trigger".to_string()))?;
    let report = feature_proximity(
        &state,
        &trigger,
        ctx.config.attack.target_class,
        &ds.test_images,
        &ds.test_labels,
    )?;
    let mut csv = CsvWriter::new(
        &ctx.config,
        ctx.seed(),
        &["class", "n", "mean_ratio", "fraction_below_one"],
    );
    for c in &report.per_class {
        csv.row(&[
            c.class.to_string(),
            c.n.to_string(),
            fmt_f(c.mean_ratio),
            fmt_f(c.fraction_below_one),
        ]);
    }
    csv.row(&[
        "nontarget_overall".to_string(),
        String::new(),
        String::new(),
        fmt_f(report.overall_nontarget_fraction),
    ]);
    csv.write(&ctx.path("proximity.csv"))?;
    println!(
        "feature proximity: {:.4} of poisoned non-target samples merge with the target manifold",
        report.overall_nontarget_fraction
    );
    Ok(())
}

fn theory(ctx: &RunContext) -> Result<()> {
    let t = &ctx.config.theory;
    let seeds: Vec<u64> = (0..t.seeds).collect();
    let rows = concentration_study(t.p, t.n_clean, t.n_attack, t.k_shared, &t.ratios, &seeds)?;
    let mut csv = CsvWriter::new(
        &ctx.config,
        ctx.seed(),
        &[
            "seed",
            "k_shared",
            "ratio",
            "energy_fraction",
            "delta_l_core",
            "delta_l_clean_block",
            "delta_l_attack_block",
        ],
    );
    for r in &rows {
        csv.row(&[
            r.seed.to_string(),
            r.k_shared.to_string(),
            fmt_f(r.ratio),
            fmt_f(r.energy_fraction),
            fmt_f(r.delta_l_core),
            fmt_f(r.delta_l_clean_block),
            fmt_f(r.delta_l_attack_block),
        ]);
    }
    csv.write(&ctx.path("theory_report.csv"))?;
    println!("theory study written: {} rows", rows.len());
    Ok(())
}

fn report(ctx: &RunContext) -> Result<()> {
    let mut summary = String::new();
    summary.push_str("fuselab run summary\n===================\n\n");
    let mut plotted = 0;
    // metrics tables
    for name in [
        "pretrain_metrics.csv",
        "metrics_dynamic.csv",
        "metrics_static.csv",
        "metrics_lowrank.csv",
        "dissection.csv",
        "perturb.csv",
        "nc_report.csv",
        "proximity.csv",
        "latency_dynamic.csv",
    ] {
        let path = ctx.path(name);
        if !path.exists() {
            continue;
        }
        let (_, columns, rows) = read_csv(&path)?;
        summary.push_str(&format!("{name}\n"));
        summary.push_str(&format!("  {}\n", columns.join(" | ")));
        for row in rows {
            summary.push_str(&format!("  {}\n", row.join(" | ")));
        }
        summary.push('\n');
    }
    // prune sweep plot
    let prune_path = ctx.path("prune_sweep.csv");
    if prune_path.exists() {
        let (_, _, rows) = read_csv(&prune_path)?;
        let mut by_backend: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
        for row in rows {
            by_backend.entry(row[3].clone()).or_default().push((
                row[0].parse().unwrap_or(0.0),
                row[1].parse().unwrap_or(0.0),
                row[2].parse().unwrap_or(0.0),
            ));
        }
        let mut series = Vec::new();
        for (backend, rows) in &by_backend {
            series.push(Series {
                name: format!("{backend} asr"),
                points: rows.iter().map(|r| (r.0, r.2)).collect(),
            });
            series.push(Series {
                name: format!("{backend} acc"),
                points: rows.iter().map(|r| (r.0, r.1)).collect(),
            });
        }
        write_line_plot(
            &ctx.path("prune_sweep.svg"),
            "Attack metrics under magnitude pruning",
            "pruned fraction of attack parameters",
            "rate",
            &series,
        )?;
        plotted += 1;
    }
    // theory plot
    let theory_path = ctx.path("theory_report.csv");
    if theory_path.exists() {
        let (_, _, rows) = read_csv(&theory_path)?;
        let mut by_ratio: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for row in rows {
            let e = by_ratio.entry(row[2].clone()).or_insert((0.0, 0));
            e.0 += row[3].parse::<f64>().unwrap_or(0.0);
            e.1 += 1;
        }
        let mut points: Vec<(f64, f64)> = by_ratio
            .iter()
            .map(|(r, (sum, n))| (r.parse().unwrap_or(0.0), sum / *n as f64))
            .collect();
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        write_line_plot(
            &ctx.path("theory_energy.svg"),
            "Shared-direction energy fraction vs strength ratio",
            "shared-direction strength ratio",
            "mean energy fraction",
            &[Series {
                name: "mean over seeds".to_string(),
                points,
            }],
        )?;
        plotted += 1;
    }
    // training loss plot
    for kind in ["dynamic", "static", "lowrank"] {
        let path = ctx.path(&format!("train_log_{kind}.csv"));
        if !path.exists() {
            continue;
        }
        let (_, _, rows) = read_csv(&path)?;
        let series: Vec<Series> = [("l_clean", 2), ("l_attack", 3), ("l_total", 4)]
            .iter()
            .map(|(name, col)| Series {
                name: name.to_string(),
                points: rows
                    .iter()
                    .map(|r| {
                        (
                            r[0].parse().unwrap_or(0.0),
                            r[*col].parse().unwrap_or(0.0),
                        )
                    })
                    .collect(),
            })
            .collect();
        write_line_plot(
            &ctx.path(&format!("train_loss_{kind}.svg")),
            &format!("Joint training losses ({kind})"),
            "step",
            "loss",
            &series,
        )?;
        plotted += 1;
    }
    // reversal norms plot
    let nc_path = ctx.path("nc_report.csv");
    if nc_path.exists() {
        let (_, _, rows) = read_csv(&nc_path)?;
        let points: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (r[0].parse().unwrap_or(0.0), r[1].parse().unwrap_or(0.0)))
            .collect();
        write_line_plot(
            &ctx.path("nc_l1.svg"),
            "Reversed-trigger mask norms per class",
            "class",
            "mask L1",
            &[Series {
                name: "l1".to_string(),
                points,
            }],
        )?;
        plotted += 1;
    }
    summary.push_str(&format!("plots written: {plotted}\n"));
    let path = ctx.path("summary.txt");
    fs::write(&path, summary).map_err(LabError::io(&path))?;
    println!("report written ({plotted} plots)");
    Ok(())
}

/// Parsed command line.
pub struct Cli {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub backend: Option<String>,
}

impl Cli {
    pub fn parse(args: &[String]) -> Result<Cli> {
        if args.is_empty() {
            return Err(LabError::Config(usage()));
        }
        let subcommand = args[0].clone();
        let mut config_path = None;
        let mut out = PathBuf::from("out");
        let mut seed = None;
        let mut backend = None;
        let mut i = 1;
        while i < args.len() {
            let flag = args[i].as_str();
            let value = args.get(i + 1).ok_or_else(|| {
                LabError::Config(format!("flag {flag} needs a value\n{}", usage()))
            })?;
            match flag {
                "--config" => config_path = Some(PathBuf::from(value)),
                "--out" => out = PathBuf::from(value),
                "--seed" => {
                    seed = Some(value.parse().map_err(|_| {
                        LabError::Config(format!("--seed expects an integer, got '{value}'"))
                    })?)
                }
                "--backend" => backend = Some(value.clone()),
                other => {
                    return Err(LabError::Config(format!(
                        "unknown flag '{other}'\n{}",
                        usage()
                    )))
                }
            }
            i += 2;
        }
        Ok(Cli {
            subcommand,
            config_path,
            out,
            seed,
            backend,
        })
    }

    pub fn load_config(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config_path {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(LabError::io(path))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if let Some(backend) = &self.backend {
            AttackKind::parse(backend).map_err(|e| LabError::Config(e.to_string()))?;
            config.attack.kind = backend.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

pub fn usage() -> String {
    format!(
        "usage: fuselab <subcommand> [--config PATH] [--out DIR] [--seed N] [--backend {{dynamic,static,lowrank}}]\n\
         subcommands: {}",
        SUBCOMMANDS.join(", ")
    )
}

