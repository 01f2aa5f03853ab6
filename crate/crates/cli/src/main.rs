use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use evofa_core::data::{export_features, generate_synthetic_drift, import_features, DatasetIndex, DriftConfig, Role};
use evofa_core::harness::{
    cell_from_meta, cell_split, checkpoint_bytes, checkpoint_meta, configure_threads, embeddings_csv, evaluate_cell,
    load_checkpoint, protocol_cells, run_protocol, supervised_row, train_cell, training_log_csv,
    ExperimentConfig, Method, OutputDir, ResultTable, RunManifest, TrainedCell,
};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "evofa", version, about = "Few-shot EEG emotion recognition with test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic drifting dataset in the feature container format.
    SynthGen {
        /// Drift generator config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Load and validate an imported dataset, then print a summary.
    ImportCheck {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Meta-train one model per protocol cell and write checkpoints and training logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate checkpoints with or without test-time adaptation.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file; repeat for several cells.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "on")]
        adapt: Switch,
        /// Comma-separated shot counts; defaults to `eval.shot`.
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        /// Also write adapter-space embeddings of each test pool.
        #[arg(long)]
        export_embeddings: bool,
        /// Carry the adapted adapter from one test episode to the next.
        #[arg(long)]
        persist_adaptation: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full protocol run: train every cell, then evaluate FSL and FSL+EvoFA on paired episodes.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a results.json, optionally rewriting its CSV forms.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> Result<OutputDir> {
    let root = flag
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set output_dir in the config"))?;
    Ok(OutputDir::create(root)?)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<DatasetIndex> {
    let ds = cfg.load_dataset()?;
    cfg.validate_for(&ds)?;
    Ok(ds)
}

fn write_trained(out: &mut OutputDir, cfg: &ExperimentConfig, t: &TrainedCell) -> Result<()> {
    let stem = t.cell.stem();
    let mut models = vec![(Method::Fsl, &t.fsl, String::new())];
    if let Some(sup) = &t.supervised {
        models.push((Method::Supervised, sup, "-supervised".to_string()));
    }
    for (method, outcome, suffix) in models {
        let meta = checkpoint_meta(cfg, t.cell, outcome, method);
        out.write(&format!("checkpoints/{stem}{suffix}.ckpt"), &checkpoint_bytes(&outcome.model, &meta)?)?;
        out.write(&format!("logs/train-{stem}{suffix}.csv"), training_log_csv(&outcome.log).as_bytes())?;
    }
    Ok(())
}

fn write_table(out: &mut OutputDir, table: &ResultTable, shots_csv: bool) -> Result<()> {
    out.write("results.csv", table.to_csv().as_bytes())?;
    out.write("results.json", table.to_json()?.as_bytes())?;
    if shots_csv {
        out.write("accuracy-vs-shots.csv", table.shots_csv().as_bytes())?;
    }
    Ok(())
}

fn print_summary(table: &ResultTable) {
    for a in table.aggregates() {
        println!(
            "{:<10} shots={:<2} cells={:<3} acc={:.4} std(subjects)={:.4} std(episodes)={:.4}",
            a.method, a.shots, a.cells, a.mean_accuracy, a.std_across_subjects, a.mean_episode_std
        );
    }
}

fn synth_gen(config: &Path, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut drift: DriftConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    if let Some(s) = seed {
        drift.rng_seed = s;
    }
    let ds = generate_synthetic_drift(&drift)?;
    let mut dir = OutputDir::create(&out)?;
    let manifest = export_features(&ds, dir.root())?;
    dir.track(manifest.clone());
    for entry in std::fs::read_dir(dir.path("features"))? {
        dir.track(entry?.path());
    }
    RunManifest::new("synth-gen", drift.rng_seed, &drift)?.write(&mut dir)?;
    dir.commit();
    println!("wrote {} samples to {}", ds.len(), manifest.display());
    Ok(())
}

fn import_check(manifest: &Path) -> Result<()> {
    let ds = import_features(manifest)?;
    let schema = ds.schema();
    println!("samples: {}", ds.len());
    println!("schema: {} electrodes x {} features", schema.electrodes, schema.bands);
    println!("classes: {}", ds.class_names().join(", "));
    for s in ds.subjects() {
        let sessions = ds.sessions_of(s);
        let counts: Vec<String> = sessions
            .iter()
            .map(|&x| format!("{x}:{}", ds.session_pool(s, x).len()))
            .collect();
        println!("subject {s}: sessions {}", counts.join(" "));
    }
    Ok(())
}

fn train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let mut dir = out_dir(&cfg, out)?;
    let ds = load_dataset(&cfg)?;
    let cells = protocol_cells(&cfg, &ds)?;
    let trained: Vec<TrainedCell> = cells
        .par_iter()
        .map(|&c| train_cell(&cfg, &ds, c))
        .collect::<evofa_core::Result<_>>()?;
    for t in &trained {
        write_trained(&mut dir, &cfg, t)?;
        println!("{}: best epoch {} val acc {:.4}", t.cell, t.fsl.best_epoch, t.fsl.best_val_accuracy);
    }
    RunManifest::new("train", cfg.seed, &cfg)?.write(&mut dir)?;
    dir.commit();
    Ok(())
}

struct EvalArgs {
    checkpoints: Vec<PathBuf>,
    adapt: bool,
    shots: Option<Vec<usize>>,
    export_embeddings: bool,
    persist: bool,
}

fn evaluate(config: &Path, args: EvalArgs, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config, None)?;
    cfg.adapt.persist |= args.persist;
    let shots = args.shots.unwrap_or_else(|| vec![cfg.eval.shot]);
    if shots.is_empty() || shots.contains(&0) {
        bail!("--shots needs positive counts");
    }
    let mut dir = out_dir(&cfg, out)?;
    let ds = load_dataset(&cfg)?;
    let mut rows = Vec::new();
    for path in &args.checkpoints {
        let (model, header) = load_checkpoint(path)?;
        let (cell, method) = cell_from_meta(&header.meta)?;
        let schema = ds.schema();
        let mc = &model.config;
        if (mc.n_electrodes, mc.d_bands, mc.num_classes) != (schema.electrodes, schema.bands, ds.num_classes()) {
            bail!("{}: checkpoint shape does not match the configured dataset", path.display());
        }
        if method == Method::Supervised {
            rows.push(supervised_row(&cfg, &ds, cell, &model)?);
        } else {
            rows.extend(evaluate_cell(&cfg, &ds, cell, &model, &shots, args.adapt)?);
        }
        if args.export_embeddings {
            let split = cell_split(&cfg, &ds, cell)?;
            let pool = split.select(&ds, Role::Test);
            let stem = path.file_stem().map_or_else(|| cell.stem(), |s| s.to_string_lossy().into_owned());
            dir.write(&format!("embeddings/{stem}.csv"), embeddings_csv(&model, &pool)?.as_bytes())?;
        }
    }
    let table = ResultTable::new(rows);
    table.validate()?;
    write_table(&mut dir, &table, shots.len() > 1)?;
    RunManifest::new("evaluate", cfg.seed, &cfg)?.write(&mut dir)?;
    dir.commit();
    print_summary(&table);
    Ok(())
}

fn compare(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let mut dir = out_dir(&cfg, out)?;
    let ds = load_dataset(&cfg)?;
    let run = run_protocol(&cfg, &ds)?;
    for t in &run.cells {
        write_trained(&mut dir, &cfg, t)?;
    }
    write_table(&mut dir, &run.table, cfg.shots.len() > 1)?;
    RunManifest::new("compare", cfg.seed, &cfg)?.write(&mut dir)?;
    dir.commit();
    print_summary(&run.table);
    Ok(())
}

fn report(results: &Path, out: Option<PathBuf>) -> Result<()> {
    let text = std::fs::read_to_string(results).with_context(|| format!("reading {}", results.display()))?;
    let table = ResultTable::from_json(&text)?;
    table.validate()?;
    print_summary(&table);
    if let Some(out) = out {
        let mut dir = OutputDir::create(out)?;
        out_csvs(&mut dir, &table)?;
        RunManifest::new("report", 0, &serde_json::json!({ "results": results }))?.write(&mut dir)?;
        dir.commit();
    }
    Ok(())
}

fn out_csvs(dir: &mut OutputDir, table: &ResultTable) -> Result<()> {
    dir.write("results.csv", table.to_csv().as_bytes())?;
    dir.write("accuracy-vs-shots.csv", table.shots_csv().as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::SynthGen { config, out, seed } => synth_gen(&config, out, seed),
        Command::ImportCheck { manifest } => import_check(&manifest),
        Command::Train { config, out, seed } => train(&config, out, seed),
        Command::Evaluate {
            config,
            checkpoint,
            adapt,
            shots,
            export_embeddings,
            persist_adaptation,
            out,
        } => evaluate(
            &config,
            EvalArgs {
                checkpoints: checkpoint,
                adapt: adapt == Switch::On,
                shots,
                export_embeddings,
                persist: persist_adaptation,
            },
            out,
        ),
        Command::Compare { config, out, seed } => compare(&config, out, seed),
        Command::Report { results, out } => report(&results, out),
    }
}

/// Joins the error chain; core errors already render their own causes.
fn describe(e: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in e.chain() {
        parts.push(cause.to_string());
        if cause.is::<evofa_core::Error>() {
            break;
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
