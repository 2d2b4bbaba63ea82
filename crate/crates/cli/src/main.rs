use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pipeline_core::config::PipelineConfig;
use pipeline_core::evaluation::{summarize, FidelityRecord};
use pipeline_core::manifest::{RunManifest, RunStatus, RunStore, MANIFEST_FILE};
use pipeline_core::orchestrator::{evaluate_runs, Pipeline};
use pipeline_core::store::{AssetKind, AssetStore};
use pipeline_server::AppState;
use serde::Serialize;
use tracing::{info, warn};

#[derive(Parser)]
#[command(name = "pipeline", version, about = "Prompt-to-marketing-image pipeline")]
struct Cli {
    /// TOML configuration; built-in defaults (mock backends) when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add a directory of images to the asset store.
    Ingest {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        kind: AssetKind,
    },
    /// Print the structured brief for a prompt.
    Decompose {
        #[arg(long)]
        prompt: String,
    },
    /// Run the full pipeline and persist a run.
    Run {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Runs directory (overrides `output.runs_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Product fidelity of runs: baseline variant against the pipeline's
    /// top selection.
    Evaluate {
        /// Manifest file or run id; repeatable. Defaults to every run with
        /// candidates.
        #[arg(long = "run")]
        runs: Vec<String>,
        /// Asset store that must hold each run's chosen product.
        #[arg(long)]
        references: Option<PathBuf>,
        /// Directory for fidelity.csv and evaluation.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Serve the review API (and UI assets, if given).
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Built review UI to serve at `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
        /// Runs directory (overrides `output.runs_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let config = match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { dir, kind } => {
            let p = Pipeline::from_config(config)?;
            let report = p.assets().ingest(&dir, kind, p.backends().embedder.as_ref())?;
            for w in &report.warnings {
                warn!("{w}");
            }
            print_json(&report)?;
        }
        Command::Decompose { prompt } => {
            let backends = config.build_backends()?;
            print_json(&pipeline_core::decompose::decompose(&backends.decomposer, &prompt)?)?;
        }
        Command::Run { prompt, seed, out } => {
            if let Some(seed) = seed {
                config.run_seed = seed;
            }
            if let Some(out) = out {
                config.output.runs_dir = out;
            }
            let p = Pipeline::from_config(config)?;
            let m = p.run(&prompt)?;
            print_json(&m.summary())?;
            if m.status == RunStatus::Failed {
                for f in &m.failures {
                    eprintln!("{}: {}", f.stage, f.detail);
                }
                return Ok(ExitCode::from(2));
            }
        }
        Command::Evaluate { runs, references, out } => evaluate(&config, &runs, references.as_deref(), &out)?,
        Command::Serve { addr, ui, out } => {
            if let Some(out) = out {
                config.output.runs_dir = out;
            }
            let store = Arc::new(RunStore::open(&config.output.runs_dir)?);
            if store.list()?.is_empty() {
                warn!(dir = %store.root().display(), "no runs to review yet");
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(pipeline_server::serve(addr, AppState { runs: store }, ui))
                .with_context(|| format!("serving on {addr}"))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Resolves `--run` values to (store, manifest) pairs. A value naming an
/// existing file is a manifest path whose run store is two levels up.
fn resolve_runs(config: &PipelineConfig, specs: &[String]) -> Result<Vec<(Arc<RunStore>, RunManifest)>> {
    let default_store = || RunStore::open(&config.output.runs_dir).map(Arc::new);
    if specs.is_empty() {
        let store = default_store()?;
        let mut out = Vec::new();
        for s in store.list()? {
            if s.candidates == 0 {
                warn!(run = %s.run_id, "skipping run without candidates");
                continue;
            }
            out.push((store.clone(), store.load(&s.run_id)?));
        }
        return Ok(out);
    }
    let mut out = Vec::new();
    for spec in specs {
        let path = Path::new(spec);
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        if file.is_file() {
            let run_dir = file.parent().context("manifest has no directory")?;
            let root = run_dir.parent().context("run directory has no parent")?;
            let store = Arc::new(RunStore::open(root)?);
            let id = run_dir.file_name().and_then(|n| n.to_str()).context("run directory name")?;
            out.push((store.clone(), store.load(id)?));
        } else {
            let store = default_store()?;
            let m = store.load(spec).with_context(|| format!("run {spec}"))?;
            out.push((store, m));
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    pair_id: &'a str,
    condition: &'a str,
    ms_ssim: f64,
    embed_cosine: f64,
}

fn evaluate(config: &PipelineConfig, specs: &[String], references: Option<&Path>, out: &Path) -> Result<()> {
    let runs = resolve_runs(config, specs)?;
    if runs.is_empty() {
        bail!("no runs to evaluate");
    }
    if let Some(path) = references {
        let assets = AssetStore::open_existing(path)?;
        for (_, m) in &runs {
            match &m.retrieval.chosen_product {
                Some(id) if assets.contains(id) => {}
                Some(id) => bail!("{}: product {id} is not in {}", m.run_id, path.display()),
                None => bail!("{}: run has no product", m.run_id),
            }
        }
    }
    let backends = config.build_backends()?;
    let embedder = backends.embedder.as_ref();
    let mut baseline: Vec<FidelityRecord> = Vec::new();
    let mut pipeline: Vec<FidelityRecord> = Vec::new();
    // Runs from one store are evaluated together, in parallel.
    let mut i = 0;
    while i < runs.len() {
        let store = runs[i].0.clone();
        let mut j = i;
        while j < runs.len() && Arc::ptr_eq(&runs[j].0, &store) {
            j += 1;
        }
        let manifests: Vec<RunManifest> = runs[i..j].iter().map(|(_, m)| m.clone()).collect();
        for e in evaluate_runs(&store, &manifests, embedder)? {
            baseline.push(e.baseline);
            pipeline.push(e.pipeline);
        }
        i = j;
    }

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv_path = out.join("fidelity.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for (condition, records) in [("baseline", &baseline), ("pipeline", &pipeline)] {
        for r in records {
            w.serialize(CsvRow {
                pair_id: &r.pair_id,
                condition,
                ms_ssim: r.ms_ssim,
                embed_cosine: r.embed_cosine,
            })?;
        }
    }
    w.flush()?;
    let summary = summarize(&baseline, &pipeline)?;
    let json_path = out.join("evaluation.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary)?)?;
    info!(pairs = summary.pairs, csv = %csv_path.display(), json = %json_path.display(), "evaluation written");
    print_json(&summary)?;
    Ok(())
}
