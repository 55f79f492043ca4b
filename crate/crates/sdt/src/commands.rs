//! The work behind each subcommand, callable without the CLI.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context};
use serde::Serialize;

use sdt_core::scene::{FeasibilityTable, Scene};

use crate::ablate::{run_ablation, variants, write_ablation_csv, AblationRow};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::inspect::{collect_attention, fnda_stats, mask_rows, mhsa_stats, AttentionStats, PairSet, MASK_HEADER};
use crate::pipeline::{evaluate_model, EvalSummary};
use crate::report::{attn_rows, fmt_f64, headline, write_csv, write_eval, ATTN_HEADER};
use crate::scene_io::{load_feasibility, load_scenes, save_feasibility, save_scenes, write_json};
use crate::synth::{generate_dataset, Dataset};
use crate::train::{train_with, EpochLog};

fn create_dir(p: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn ensure_parent(p: &Path) -> anyhow::Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => create_dir(d),
        _ => Ok(()),
    }
}

/// Generates the synthetic dataset into the configured paths.
pub fn gen(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    ensure!(
        cfg.synth.d == cfg.d && cfg.synth.num_verbs == cfg.num_verbs,
        "synth.d / synth.num_verbs ({}, {}) must equal d / C ({}, {})",
        cfg.synth.d,
        cfg.synth.num_verbs,
        cfg.d,
        cfg.num_verbs
    );
    let data = generate_dataset(&cfg.synth)?;
    for p in [&cfg.paths.train, &cfg.paths.test, &cfg.paths.feasibility] {
        ensure_parent(p)?;
    }
    save_scenes(&data.train, &cfg.paths.train)?;
    save_scenes(&data.test, &cfg.paths.test)?;
    save_feasibility(&data.feasibility, &cfg.paths.feasibility)?;
    Ok(data)
}

/// Loads the configured train, test and feasibility files.
pub fn load_data(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let train = load_scenes(&cfg.paths.train)?;
    let test = load_scenes(&cfg.paths.test)?;
    let feasibility = load_feasibility(&cfg.paths.feasibility)?;
    check_data(cfg, &train, &test, &feasibility)?;
    Ok(Dataset { train, test, feasibility })
}

fn check_data(cfg: &RunConfig, train: &[Scene], test: &[Scene], feas: &FeasibilityTable) -> anyhow::Result<()> {
    ensure!(!train.is_empty(), "{}: no training scenes", cfg.paths.train.display());
    feas.validate(cfg.num_verbs)
        .with_context(|| format!("{}", cfg.paths.feasibility.display()))?;
    for (path, list) in [(&cfg.paths.train, train), (&cfg.paths.test, test)] {
        for s in list {
            s.validate(cfg.d, cfg.num_verbs)
                .with_context(|| format!("{}: scene {}", path.display(), s.id))?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Metrics<'a> {
    config_hash: String,
    trainable_parameters: usize,
    log: &'a [EpochLog],
    metrics: Vec<(&'static str, Option<f64>)>,
}

pub struct TrainResult {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub summary: EvalSummary,
}

/// Trains, saves a checkpoint and evaluates on the test split. The run
/// directory receives `config.json`, `checkpoints/final.json`,
/// `metrics.json`, `train_log.csv` and the evaluation tables.
pub fn train_run(cfg: &RunConfig, mut progress: impl FnMut(&EpochLog)) -> anyhow::Result<TrainResult> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let dir = cfg.paths.run_dir.clone();
    create_dir(&dir.join("checkpoints"))?;
    write_json(cfg, dir.join("config.json"))?;
    let t = train_with(cfg, &data.train, &mut progress)?;
    let ck_path = dir.join("checkpoints").join("final.json");
    Checkpoint::new(&t.model, &t.memory, &t.log).save(&ck_path)?;
    let summary = evaluate_model(&t.model, &t.memory, cfg, &data.train, &data.test, &data.feasibility)?;
    write_csv(
        &dir.join("train_log.csv"),
        &["epoch", "lr", "loss", "grad_norm", "alpha", "beta"],
        t.log.iter().map(|l| {
            [
                l.epoch.to_string(),
                fmt_f64(l.lr),
                fmt_f64(l.loss),
                fmt_f64(l.grad_norm),
                fmt_f64(l.alpha),
                fmt_f64(l.beta),
            ]
        }),
    )?;
    write_json(
        &Metrics {
            config_hash: cfg.model_hash(),
            trainable_parameters: t.model.trainable_parameters(),
            log: &t.log,
            metrics: headline(&summary),
        },
        dir.join("metrics.json"),
    )?;
    write_eval(&dir, &summary)?;
    Ok(TrainResult {
        run_dir: dir,
        checkpoint: ck_path,
        summary,
    })
}

/// Evaluates a checkpoint on the configured test split and writes the
/// tables to `out`.
pub fn eval_run(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> anyhow::Result<EvalSummary> {
    cfg.validate()?;
    let (model, memory) = Checkpoint::load(checkpoint)?.into_model(Some(&cfg.model_hash()))?;
    let data = load_data(cfg)?;
    let summary = evaluate_model(&model, &memory, cfg, &data.train, &data.test, &data.feasibility)?;
    write_eval(out, &summary)?;
    Ok(summary)
}

/// Runs the named ablation tables and writes `ablation.csv` and
/// `ablation.json` to `out`.
pub fn ablate_run(
    cfg: &RunConfig,
    tables: &[String],
    out: &Path,
    on_row: impl FnMut(&AblationRow),
) -> anyhow::Result<Vec<AblationRow>> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let vs = variants(tables, cfg.toggles)?;
    create_dir(out)?;
    write_json(cfg, out.join("config.json"))?;
    let rows = run_ablation(cfg, &data, &vs, on_row)?;
    write_ablation_csv(&out.join("ablation.csv"), &rows)?;
    write_json(&rows, out.join("ablation.json"))?;
    Ok(rows)
}

/// Writes the far and near masks of every scene in `scenes` to `out`.
pub fn inspect_masks(cfg: &RunConfig, scenes: &Path, out: &Path) -> anyhow::Result<usize> {
    let list = load_scenes(scenes)?;
    let mut rows = Vec::new();
    for s in &list {
        rows.extend(mask_rows(s, &cfg.filter).with_context(|| format!("scene {}", s.id))?);
    }
    ensure_parent(out)?;
    write_csv(out, &MASK_HEADER, &rows)?;
    Ok(rows.len())
}

/// Attention statistics of an FNDA and/or an MHSA checkpoint over `scenes`.
pub fn attn_stats(
    cfg: &RunConfig,
    fnda: Option<&Path>,
    mhsa: Option<&Path>,
    scenes: &[Scene],
    set: PairSet,
) -> anyhow::Result<Vec<AttentionStats>> {
    ensure!(fnda.is_some() || mhsa.is_some(), "attn-stats needs at least one checkpoint");
    let mut out = Vec::new();
    for (path, is_fnda) in [(fnda, true), (mhsa, false)] {
        let Some(path) = path else { continue };
        let (model, memory) = Checkpoint::load(path)?.into_model(None)?;
        let recs = collect_attention(&model, &memory, cfg, scenes, set)?;
        if is_fnda {
            out.extend(fnda_stats(&recs, cfg.bin_width));
        } else {
            out.push(mhsa_stats(&recs, cfg.bin_width));
        }
    }
    Ok(out)
}

pub fn write_attn_stats(out: &Path, stats: &[AttentionStats]) -> anyhow::Result<()> {
    ensure_parent(out)?;
    write_csv(out, &ATTN_HEADER, stats.iter().flat_map(|s| attn_rows(s.kind, &s.bins)))
}
