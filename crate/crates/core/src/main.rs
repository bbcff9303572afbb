use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use survcl::experiment::{run_experiment, Checkpoint, ExperimentConfig};
use survcl::harness::routing_proportions;
use survcl::io::ingest_feature_bags;
use survcl::report::{emit_km_csv, routing_csv, write_text};
use survcl::{Error, Result};

#[derive(Parser)]
#[command(name = "survcl", version, about = "Continual multimodal survival experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    /// The validation fold the checkpoint was selected on.
    Val,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method and seed in a TOML experiment config.
    Run { config: PathBuf },
    /// Validate a feature-bag directory and print per-task summaries.
    IngestCheck { dir: PathBuf },
    /// Write Kaplan–Meier curves for a mean-risk split of one task.
    Km {
        checkpoint: PathBuf,
        task: usize,
        out: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Write expert selection proportions for one task.
    Routing {
        checkpoint: PathBuf,
        task: usize,
        out: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
}

fn cases(ck: &Checkpoint, task: usize, split: Split) -> Result<(survcl::data::TaskStream, Vec<usize>)> {
    let stream = ck.stream()?;
    if task >= stream.n_tasks() {
        return Err(Error::UnknownTask(task));
    }
    let idx = match split {
        Split::All => (0..stream.tasks[task].len()).collect(),
        Split::Val => ck.folds(&stream)?.swap_remove(task).val,
    };
    Ok((stream, idx))
}

fn km(checkpoint: &Path, task: usize, out: &Path, split: Split) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let (stream, idx) = cases(&ck, task, split)?;
    let s = emit_km_csv(&ck.model, &stream.tasks[task], &idx, task, out)?;
    println!(
        "task {task}: {} low / {} high risk, chi2 {:.4}, p {:.4}{}",
        s.n_low,
        s.n_high,
        s.test.chi2,
        s.test.p_value,
        if s.significant() { " (significant)" } else { "" }
    );
    Ok(())
}

fn routing(checkpoint: &Path, task: usize, out: &Path, split: Split) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.model.moe.is_none() {
        return Err(Error::Config(format!("{} has no expert layers", checkpoint.display())));
    }
    if !ck.model.has_task(task) {
        return Err(Error::MissingHead(task));
    }
    let (stream, idx) = cases(&ck, task, split)?;
    let records = routing_proportions(&ck.model, &stream.tasks[task], &idx, task)?;
    write_text(out, &routing_csv(&records))
}

fn ingest_check(dir: &Path) -> Result<()> {
    let s = ingest_feature_bags(dir)?;
    println!("{} tasks, patch dim {}, genomic width {}", s.n_tasks(), s.patch_dim(), s.genomic_width());
    for (k, t) in s.tasks.iter().enumerate() {
        let cens = t.cases.iter().filter(|c| c.censored).count();
        println!(
            "task {k} {}: {} cases, {:.1}% censored, bin edges {:?}",
            t.name,
            t.len(),
            100.0 * cens as f64 / t.len() as f64,
            t.bins.boundaries()
        );
    }
    Ok(())
}

fn run(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_file(config)?;
    let report = run_experiment(&cfg)?;
    for m in &report.runs {
        println!("{} seed {}: average C-index {:.4}", m.method, m.seed, m.c_index.average);
    }
    println!("reports written to {}", report.output_dir.display());
    match report.failures.into_iter().next() {
        None => Ok(()),
        Some(f) => Err(f.error),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Run { config } => run(config),
        Command::IngestCheck { dir } => ingest_check(dir),
        Command::Km {
            checkpoint,
            task,
            out,
            split,
        } => km(checkpoint, *task, out, *split),
        Command::Routing {
            checkpoint,
            task,
            out,
            split,
        } => routing(checkpoint, *task, out, *split),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
