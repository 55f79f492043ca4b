use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use sdt::commands;
use sdt::config::RunConfig;
use sdt::inspect::PairSet;
use sdt::report::headline;
use sdt::scene_io::load_scenes;

#[derive(Parser)]
#[command(name = "sdt", version, about = "Spatial distance-aware interaction detection on token scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Small model for single-core experiments.
    Desk,
    /// Full-size model.
    Full,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; missing fields take the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Override a config field, e.g. `--set epochs=3 --set toggles.attention=mhsa`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let base = match self.preset {
            Preset::Desk => RunConfig::desk(),
            Preset::Full => RunConfig::default(),
        };
        let cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let user: serde_json::Value =
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                let mut v = serde_json::to_value(&base)?;
                merge(&mut v, user);
                serde_json::from_value(v).with_context(|| format!("{}", p.display()))?
            }
            None => base,
        };
        let cfg = cfg.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into the configured paths.
    Gen(ConfigArgs),
    /// Train, checkpoint and evaluate a model.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory; defaults to `<run_dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every variant of the ablation tables.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated tables: components, attention.
        #[arg(long, value_delimiter = ',', default_value = "components,attention")]
        tables: Vec<String>,
        /// Output directory; defaults to `<run_dir>/ablation`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump masks or attention statistics.
    Inspect {
        #[command(subcommand)]
        what: Inspect,
    },
}

#[derive(Subcommand)]
enum Inspect {
    /// Far and near masks of every scene as CSV.
    Masks {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Scene file; defaults to the configured test split.
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention weight against pair distance as CSV.
    AttnStats {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        fnda: Option<PathBuf>,
        #[arg(long)]
        mhsa: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Use every token pair instead of annotated interactions only.
        #[arg(long)]
        all_pairs: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_metrics(s: &sdt::pipeline::EvalSummary) {
    for (k, v) in headline(s) {
        match v {
            Some(v) => println!("{k}\t{v:.4}"),
            None => println!("{k}\t-"),
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let cfg = a.load()?;
            let data = commands::gen(&cfg)?;
            println!(
                "wrote {} train and {} test scenes to {} and {}",
                data.train.len(),
                data.test.len(),
                cfg.paths.train.display(),
                cfg.paths.test.display()
            );
        }
        Command::Train(a) => {
            let cfg = a.load()?;
            let r = commands::train_run(&cfg, |l| {
                eprintln!(
                    "epoch {:>3}  lr {:.2e}  loss {:.5}  |g| {:.4}  alpha {:.3}  beta {:.3}",
                    l.epoch, l.lr, l.loss, l.grad_norm, l.alpha, l.beta
                )
            })?;
            print_metrics(&r.summary);
            println!("checkpoint\t{}", r.checkpoint.display());
        }
        Command::Eval { cfg, checkpoint, out } => {
            let cfg = cfg.load()?;
            let out = out.unwrap_or_else(|| cfg.paths.run_dir.join("eval"));
            let s = commands::eval_run(&cfg, &checkpoint, &out)?;
            print_metrics(&s);
        }
        Command::Ablate { cfg, tables, out } => {
            let cfg = cfg.load()?;
            let out = out.unwrap_or_else(|| cfg.paths.run_dir.join("ablation"));
            commands::ablate_run(&cfg, &tables, &out, |r| {
                eprintln!(
                    "{:<12} {:<28} map {:.4}  distant {:.4}",
                    r.variant.table,
                    r.variant.name,
                    r.summary.default.map.unwrap_or(0.0),
                    r.summary.distant_map()
                )
            })?;
            println!("wrote {}", out.join("ablation.csv").display());
        }
        Command::Inspect { what } => match what {
            Inspect::Masks { cfg, scenes, out } => {
                let cfg = cfg.load()?;
                let scenes = scenes.unwrap_or_else(|| cfg.paths.test.clone());
                let n = commands::inspect_masks(&cfg, &scenes, &out)?;
                println!("wrote {n} rows to {}", out.display());
            }
            Inspect::AttnStats {
                cfg,
                fnda,
                mhsa,
                scenes,
                all_pairs,
                out,
            } => {
                let cfg = cfg.load()?;
                let path = scenes.unwrap_or_else(|| cfg.paths.test.clone());
                let list = load_scenes(&path)?;
                let set = if all_pairs { PairSet::All } else { PairSet::Interactive };
                let stats = commands::attn_stats(&cfg, fnda.as_deref(), mhsa.as_deref(), &list, set)?;
                commands::write_attn_stats(&out, &stats)?;
                println!("wrote {}", out.display());
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
