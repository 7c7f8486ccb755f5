use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use treesynth::dataset::StrataMode;
use treesynth::pipeline::{BaselineArgs, PipelineConfig, Run, SynthesizeArgs};

#[derive(Parser)]
#[command(name = "treesynth", version, about = "Tree-guided data space partitioning and synthesis")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(short, long, global = true, default_value = "treesynth.toml")]
    config: PathBuf,

    /// Run directory; defaults to <output.dir>/<run id>.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strata {
    Uniform,
    Stratified,
}

#[derive(Subcommand)]
enum Command {
    /// Build the partition tree, continuing from a checkpoint if one exists.
    Partition {
        /// Stop after this many node splits (the checkpoint stays resumable).
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Continue an interrupted partition from its checkpoint.
    Resume,
    /// Generate records for every leaf of the finished tree.
    Synthesize {
        /// Records per leaf; defaults to partition.samples_per_leaf.
        #[arg(long)]
        per_leaf: Option<usize>,
        /// Keep only this many records.
        #[arg(long)]
        subsample: Option<usize>,
        #[arg(long, value_enum, default_value = "uniform")]
        strata: Strata,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attach answers to records that lack one.
    Answer {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Drop near-duplicate records by ROUGE-L.
    Dedup {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Records scoring above this against a kept record are removed.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Mean pairwise cosine similarity of instruction embeddings.
    Diversity {
        /// Datasets to score as NAME=PATH or PATH; several are ranked.
        datasets: Vec<String>,
        #[arg(long)]
        pair_budget: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample records from the bare task description for comparison.
    Baseline {
        #[arg(long)]
        description: Option<String>,
        /// Defaults to the size of the synthesized dataset.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the run manifest and any files it does not account for.
    Status,
}

fn named_dataset(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(arg);
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| arg.to_string());
            (name, path)
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let config = PipelineConfig::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    let mut run = Run::open(config, cli.run_dir)?;

    match cli.command {
        Command::Partition { stop_after } => {
            let s = run.partition(false, stop_after)?;
            if s.complete {
                println!(
                    "tree complete: {} nodes, {} leaves ({} terminalized early), {} generation calls -> {}",
                    s.nodes,
                    s.leaves,
                    s.terminalized,
                    s.generate_calls,
                    s.tree.display()
                );
            } else {
                println!("partition interrupted at {} nodes; run `treesynth resume` to continue", s.nodes);
            }
        }
        Command::Resume => {
            let s = run.partition(true, None)?;
            println!("tree complete: {} nodes, {} leaves -> {}", s.nodes, s.leaves, s.tree.display());
        }
        Command::Synthesize { per_leaf, subsample, strata, seed } => {
            let strata = match strata {
                Strata::Uniform => StrataMode::Uniform,
                Strata::Stratified => StrataMode::Stratified,
            };
            let s = run.synthesize(&SynthesizeArgs { per_leaf, subsample, strata, seed })?;
            println!("{} records -> {}", s.records, s.path.display());
            if s.failures > 0 {
                eprintln!("warning: {} leaves failed; the dataset is marked partial", s.failures);
            }
        }
        Command::Answer { dataset } => {
            let s = run.answer(dataset.as_deref())?;
            println!("{} records -> {}", s.records, s.path.display());
            if s.failures > 0 {
                eprintln!("warning: {} records are still unanswered; rerun to retry them", s.failures);
            }
        }
        Command::Dedup { dataset, threshold } => {
            let s = run.dedup(dataset.as_deref(), threshold)?;
            println!("{} records kept -> {}", s.records, s.path.display());
        }
        Command::Diversity { datasets, pair_budget, seed } => {
            let inputs: Vec<(String, PathBuf)> = datasets.iter().map(|d| named_dataset(d)).collect();
            let s = run.diversity(&inputs, pair_budget, seed)?;
            for (rank, (name, score)) in s.scores.iter().enumerate() {
                println!("{:>3}. {name}: {score:.6}", rank + 1);
            }
            println!("report -> {}", s.path.display());
        }
        Command::Baseline { description, count, temperature, seed } => {
            if temperature.is_some_and(|t| !(0.0..=2.0).contains(&t)) {
                bail!("temperature must lie in [0, 2]");
            }
            let s = run.baseline(&BaselineArgs { description, count, temperature, seed })?;
            println!("{} records -> {}", s.records, s.path.display());
        }
        Command::Status => {
            println!("{}", serde_json::to_string_pretty(run.manifest())?);
            for orphan in run.orphans() {
                println!("unrecorded file: {orphan}");
            }
        }
    }
    Ok(())
}
