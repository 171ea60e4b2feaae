use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use ckavg::averaging::{average_run_ca, average_runs, streaming_mean, AveragingVariant, RunSet};
use ckavg::harness::{
    dev_records, emit_report, emit_tables, load_run_dir, run_experiment, save_run, snapshot_step,
    ExperimentPlan, ExperimentReport, ReportFormat, TrainJob,
};
use ckavg::policy::{read_records, select, write_records, Selection, SelectionStrategy};
use ckavg::synth::{DatasetSplit, Role};
use ckavg::tensor_store::{open_checkpoint, write_checkpoint, CheckpointRef};
use ckavg::trainer::{accuracy_by_language, train_run, ModelParams, TrainData};

#[derive(Parser)]
#[command(name = "ckavg", version, about = "Checkpoint averaging for cross-lingual transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and save its snapshots, dev records and data splits.
    Train {
        /// JSON with `train`, `model` and `task` sections.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average checkpoints.
    ///
    /// `ca` takes snapshot files or one run directory; the run variants take
    /// one directory per run.
    Avg {
        #[arg(long)]
        variant: AveragingVariant,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Pick or build the checkpoint a selection strategy evaluates.
    ///
    /// `trg-dev` selects per language; `--out` is then a directory that
    /// receives one `<lang>.safetensors` per target language.
    Select {
        #[arg(long)]
        strategy: SelectionStrategy,
        /// Directory of snapshots.
        #[arg(long)]
        run: PathBuf,
        /// JSONL dev records, required by `src-dev` and `trg-dev`.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Per-language accuracy of a checkpoint on a JSONL dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run a full sweep and write `report.json` plus one CSV per table.
    Experiment {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-emit the tables of a saved report.
    Report {
        /// A `report.json` written by `experiment`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
        /// Only this table; otherwise all tables.
        #[arg(long)]
        table: Option<String>,
        /// Defaults to stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for anything caused by an I/O failure, 1 for everything else,
/// including invalid arguments.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.downcast_ref::<io::Error>().is_some()) {
        2
    } else {
        1
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out } => train(&config, &out),
        Command::Avg { variant, inputs, out } => avg(variant, &inputs, &out),
        Command::Select { strategy, run, records, out } => select_cmd(strategy, &run, records.as_deref(), &out),
        Command::Eval { checkpoint, data } => eval(&checkpoint, &data),
        Command::Experiment { plan, out } => experiment(&plan, &out),
        Command::Report { input, format, table, out } => report(&input, format, table.as_deref(), out.as_deref()),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let job: TrainJob = serde_json::from_str(&read_text(config)?)
        .with_context(|| format!("parsing {}", config.display()))?;
    let task = job.task.generate()?;
    let init = job.model.init(job.train.seed);
    let data = TrainData::from_examples(&task.split(Role::Train).examples);
    let config = job.train.per_epoch(&data);
    let run = train_run(&config, &init, &data, &config.schedule()?)?;

    let paths = save_run(&run.snapshots, &out.join("snapshots"))?;
    info!("saved {} snapshots under {}", paths.len(), out.display());

    let records = dev_records(
        &run.snapshots,
        &task.split(Role::SourceDev).examples,
        &task.split(Role::TargetDev).examples,
    )?;
    let mut w = create(&out.join("records.jsonl"))?;
    write_records(&records, &mut w)?;
    w.flush()?;

    for (role, split) in &task.splits {
        let mut w = create(&out.join("data").join(format!("{role}.jsonl")))?;
        split.write_jsonl(&mut w)?;
        w.flush()?;
    }
    println!("{}", out.join("snapshots").display());
    Ok(())
}

fn avg(variant: AveragingVariant, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let averaged = if variant == AveragingVariant::Ca {
        if let [dir] = inputs {
            if dir.is_dir() {
                average_run_ca(&load_run_dir(dir)?)?
            } else {
                streaming_mean(&open_sorted(inputs)?)?
            }
        } else {
            streaming_mean(&open_sorted(inputs)?)?
        }
    } else {
        let runs = inputs.iter().map(|dir| load_run_dir(dir)).collect::<Result<Vec<_>, _>>()?;
        average_runs(&RunSet::new(runs)?, variant)?
    };
    write_checkpoint(&averaged, out)?;
    println!("{}", out.display());
    Ok(())
}

/// Opens snapshot files ordered by their recorded step, then by path.
fn open_sorted(paths: &[PathBuf]) -> Result<Vec<CheckpointRef>> {
    let mut refs = Vec::with_capacity(paths.len());
    for path in paths {
        let r = open_checkpoint(path)?;
        refs.push((snapshot_step(&r), path.clone(), r));
    }
    refs.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    Ok(refs.into_iter().map(|(_, _, r)| r).collect())
}

fn select_cmd(strategy: SelectionStrategy, run: &Path, records: Option<&Path>, out: &Path) -> Result<()> {
    let snapshots = load_run_dir(run)?;
    let records = match records {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            read_records(BufReader::new(file))?
        }
        None if matches!(strategy, SelectionStrategy::SrcDev | SelectionStrategy::TrgDev) => {
            bail!("--records is required for {strategy}")
        }
        None => Vec::new(),
    };
    match select(strategy, &snapshots, &records)? {
        Selection::Single { step, checkpoint } => {
            write_checkpoint(&checkpoint.load()?, out)?;
            println!("{}", serde_json::json!({ "step": step, "checkpoint": out }));
        }
        Selection::PerLanguage(chosen) => {
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let mut steps = BTreeMap::new();
            for (lang, (step, checkpoint)) in chosen {
                write_checkpoint(&checkpoint.load()?, out.join(format!("{lang}.safetensors")))?;
                steps.insert(lang, step);
            }
            println!("{}", serde_json::to_string(&steps)?);
        }
        Selection::Averaged(cp) => {
            write_checkpoint(&cp, out)?;
            println!("{}", serde_json::json!({ "checkpoint": out }));
        }
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path) -> Result<()> {
    let params = ModelParams::from_ref(&open_checkpoint(checkpoint)?)?;
    let file = File::open(data).with_context(|| format!("opening {}", data.display()))?;
    let split = DatasetSplit::read_jsonl(Role::TargetTest, BufReader::new(file))?;
    if split.examples.is_empty() {
        bail!("{} has no examples", data.display());
    }
    if let Some(e) = split.examples.iter().find(|e| e.x.len() != params.family().inputs()) {
        bail!("example features have length {}, the model expects {}", e.x.len(), params.family().inputs());
    }
    let scores = accuracy_by_language(&params, &split.examples);
    println!("{}", serde_json::to_string(&scores)?);
    Ok(())
}

fn experiment(plan_path: &Path, out: &Path) -> Result<()> {
    let plan = ExperimentPlan::from_json(&read_text(plan_path)?)?;
    let report = run_experiment(&plan)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut w = create(&out.join("report.json"))?;
    report.write_json(&mut w)?;
    w.flush()?;
    for table in &report.tables {
        let mut w = create(&out.join(format!("{}.csv", file_stem(&table.label))))?;
        emit_report(table, &mut w, ReportFormat::Csv)?;
        w.flush()?;
    }
    emit_tables(&report.tables, io::stdout().lock(), ReportFormat::Csv)?;
    Ok(())
}

fn file_stem(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || "-.".contains(c) { c } else { '_' }).collect()
}

fn report(input: &Path, format: ReportFormat, table: Option<&str>, out: Option<&Path>) -> Result<()> {
    let report = ExperimentReport::from_json(&read_text(input)?)?;
    let mut w: Box<dyn Write> = match out {
        Some(path) => Box::new(create(path)?),
        None => Box::new(io::stdout().lock()),
    };
    match table {
        Some(label) => {
            let Some(t) = report.table(label) else {
                let known: Vec<&str> = report.tables.iter().map(|t| t.label.as_str()).collect();
                bail!("no table {label:?}; available: {}", known.join(", "));
            };
            emit_report(t, &mut w, format)?;
        }
        None => emit_tables(&report.tables, &mut w, format)?,
    }
    w.flush()?;
    Ok(())
}
