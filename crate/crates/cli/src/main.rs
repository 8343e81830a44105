//! `sonovote`: ingest ultrasound image folders, cross-validate the model zoo,
//! fuse the best models by majority vote and print the results table.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sonovote::dataset::{self, ClassLabel};
use sonovote::ensemble::TieBreak;
use sonovote::run::{
    distribution_table, fresh_run_dir, plan_ensemble, render_table, resolve_out_root, run_cv, run_ensemble,
    summary_rows, CvOptions, DatasetSource, RunConfig, RunLayout, TableFormat,
};
use sonovote::synth::{self, SynthConfig};

#[derive(Parser, Debug)]
#[command(name = "sonovote", version, about = "Cross-validated CNN ensembles for three-class ultrasound images")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (or target directory for `ingest` and `synth`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Concurrent model×fold training jobs.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    /// Validate and print what would happen without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan dataset roots, print the class distribution and write the merged manifest.
    Ingest {
        /// Dataset root as ORIGIN=PATH; repeatable. Defaults to the configured datasets.
        #[arg(long = "dataset", value_name = "ORIGIN=PATH", value_parser = parse_dataset)]
        datasets: Vec<DatasetSource>,
        /// Fold count used to check that the data can be split.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train and evaluate every configured model on every fold.
    Cv {
        /// Run configuration; same as --config.
        #[arg(value_name = "CONFIG")]
        config: Option<PathBuf>,
    },
    /// Fuse the best models of a finished run by majority vote.
    Ensemble {
        run_dir: PathBuf,
        /// Number of members; defaults to the run's configuration.
        #[arg(short, long)]
        members: Option<usize>,
        /// summed_probability or best_member; defaults to the run's configuration.
        #[arg(long)]
        tie_break: Option<TieBreak>,
    },
    /// Print one row per model plus the ensemble.
    Report {
        run_dir: PathBuf,
        #[arg(long, default_value = "md", value_name = "md|csv")]
        format: TableFormat,
        /// Ensemble directory to summarise instead of the configured one.
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
    /// Write the seeded synthetic three-class image set.
    Synth {
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "synth")]
        origin: String,
    },
    /// Print a starting configuration with every default filled in.
    Template,
}

fn parse_dataset(s: &str) -> std::result::Result<DatasetSource, String> {
    let (origin, root) = s.split_once('=').ok_or_else(|| format!("expected ORIGIN=PATH, got {s:?}"))?;
    if origin.is_empty() || root.is_empty() {
        return Err(format!("expected ORIGIN=PATH, got {s:?}"));
    }
    Ok(DatasetSource {
        origin: origin.into(),
        root: root.into(),
    })
}

/// Error carrying its own exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Exit(1, msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(Exit(code, _)) = cause.downcast_ref::<Exit>() {
            return *code;
        }
        if let Some(e) = cause.downcast_ref::<sonovote::Error>() {
            return match e {
                sonovote::Error::Config(_) | sonovote::Error::InvalidSpec(_) => 1,
                sonovote::Error::NonFiniteLoss { .. } => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Ingest { datasets, k } => cmd_ingest(g, datasets, *k),
        Command::Cv { config } => cmd_cv(g, config.as_deref()),
        Command::Ensemble {
            run_dir,
            members,
            tie_break,
        } => cmd_ensemble(g, run_dir, *members, *tie_break),
        Command::Report {
            run_dir,
            format,
            ensemble,
        } => cmd_report(run_dir, *format, ensemble.as_deref()),
        Command::Synth {
            per_class,
            size,
            origin,
        } => cmd_synth(g, *per_class, *size, origin),
        Command::Template => {
            print!("{}", RunConfig::template().to_toml()?);
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<(RunConfig, String)> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let cfg = RunConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
    Ok((cfg, text))
}

fn cmd_ingest(g: &Global, flags: &[DatasetSource], k: Option<usize>) -> Result<()> {
    let cfg = g.config.as_deref().map(load_config).transpose()?.map(|(c, _)| c);
    let sources: Vec<DatasetSource> = if !flags.is_empty() {
        flags.to_vec()
    } else if let Some(c) = &cfg {
        c.datasets.clone()
    } else {
        return Err(usage("no datasets given; pass --dataset ORIGIN=PATH or --config"));
    };
    let k = k.or(cfg.as_ref().map(|c| c.folds.k)).unwrap_or(5);
    let seed = g.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);

    let mut merged: Option<dataset::DatasetManifest> = None;
    for src in &sources {
        let m = dataset::ingest(&src.root, &src.origin).with_context(|| format!("ingesting {}", src.origin))?;
        merged = Some(match merged {
            None => m,
            Some(acc) => dataset::merge(&acc, &m)?,
        });
    }
    let manifest = merged.expect("at least one source");
    let table = distribution_table(&manifest);
    print!("{table}");
    if !manifest.skipped().is_empty() {
        log::warn!("{} unreadable files skipped", manifest.skipped().len());
    }
    let stratified = cfg.as_ref().map_or(true, |c| c.folds.stratified);
    let plan = dataset::make_folds(&manifest, k, seed, stratified)?;
    log::info!("{k}-fold plan sizes: {:?}", plan.fold_sizes());
    if g.dry_run {
        return Ok(());
    }

    let dir = match &g.out {
        Some(d) => d.clone(),
        None => {
            let root = resolve_out_root(None, cfg.as_ref().and_then(|c| c.out_root.as_deref()));
            fresh_run_dir(&root, "ingest", seed)
        }
    };
    let manifest_path = dir.join("manifest.csv");
    if manifest_path.exists() {
        return Err(usage(format!("{} already exists", manifest_path.display())));
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    manifest.write_csv(&manifest_path)?;
    fs::write(dir.join("distribution.md"), &table).with_context(|| format!("writing into {}", dir.display()))?;
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

fn cmd_cv(g: &Global, positional: Option<&Path>) -> Result<()> {
    let path = positional
        .or(g.config.as_deref())
        .ok_or_else(|| usage("cv needs a configuration file (CONFIG or --config)"))?;
    let (mut cfg, text) = load_config(path)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
        cfg.validate()?;
    }
    let opts = CvOptions {
        jobs: g.jobs as usize,
        out_root: g.out.clone(),
        dry_run: g.dry_run,
    };
    let outcome = run_cv(&cfg, Some(&text), &opts)?;
    if g.dry_run {
        print!("{}", distribution_table(&outcome.manifest));
        println!(
            "{} models x {} folds = {} training jobs; fold sizes {:?}",
            cfg.models.len(),
            cfg.folds.k,
            cfg.models.len() * cfg.folds.k,
            outcome.plan.fold_sizes()
        );
        return Ok(());
    }
    let summary = &outcome.summary;
    let mut out = std::io::stdout().lock();
    for (name, acc) in &summary.mean_accuracy {
        writeln!(out, "{name}: mean accuracy {acc:.4}")?;
    }
    let run_dir = outcome.run_dir.expect("written run");
    writeln!(out, "run: {}", run_dir.display())?;
    if !summary.failures.is_empty() {
        for f in &summary.failures {
            eprintln!("failed: {} fold {}: {}", f.model, f.fold, f.error);
        }
        return Err(Exit(3, format!("{} training jobs failed", summary.failures.len())).into());
    }
    Ok(())
}

fn cmd_ensemble(g: &Global, run_dir: &Path, members: Option<usize>, tie_break: Option<TieBreak>) -> Result<()> {
    let layout = RunLayout::new(run_dir);
    if !layout.summary().is_file() {
        return Err(usage(format!("{} is not a finished cv run", run_dir.display())));
    }
    let cfg = layout.read_config()?;
    let members = members.unwrap_or(cfg.ensemble.members);
    let tie_break = tie_break.unwrap_or(cfg.ensemble.tie_break);
    if g.dry_run {
        let chosen = plan_ensemble(run_dir, members)?;
        println!("members: {}", chosen.join(", "));
        println!("would write: {}", layout.ensemble_dir(members, tie_break).display());
        return Ok(());
    }
    let outcome = run_ensemble(run_dir, members, tie_break)?;
    println!("members: {}", outcome.spec.member_ids.join(", "));
    for id in &outcome.spec.member_ids {
        println!("  {id}: mean accuracy {:.4}", outcome.member_reports[id].accuracy);
    }
    println!("ensemble: mean accuracy {:.4}", outcome.report.accuracy);
    println!("ensemble dir: {}", outcome.dir.display());
    Ok(())
}

fn cmd_report(run_dir: &Path, format: TableFormat, ensemble: Option<&Path>) -> Result<()> {
    let rows = summary_rows(run_dir, ensemble)?;
    print!("{}", render_table(&rows, format));
    Ok(())
}

fn cmd_synth(g: &Global, per_class: usize, size: usize, origin: &str) -> Result<()> {
    let root = g.out.as_deref().ok_or_else(|| usage("synth needs --out DIR"))?;
    let cfg = SynthConfig {
        per_class,
        size,
        seed: g.seed.unwrap_or(0),
        origin: origin.into(),
    };
    if ClassLabel::ALL.iter().any(|c| root.join(c.name()).exists()) {
        return Err(usage(format!("{} already holds class directories", root.display())));
    }
    if g.dry_run {
        println!("would write {} images of {size}x{size} to {}", 3 * per_class, root.display());
        return Ok(());
    }
    let n = synth::write_dataset(root, &cfg)?;
    println!("wrote {n} images to {}", root.display());
    Ok(())
}
