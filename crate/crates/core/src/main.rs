use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use repinv::harness::{self, ExperimentConfig, RunDir, Stage, StageOutcome, SweepAxis};
use repinv::judge::JudgeMode;
use repinv::Result;

#[derive(Parser)]
#[command(
    name = "repinv",
    version,
    about = "Train and evaluate hidden-state inverters on toy language models"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML); defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Score with the offline word-overlap judge.
    #[arg(long, global = true)]
    stub_judge: bool,
    /// Override any config key, e.g. `--set adapter.k=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Read the corpus and train the tokenizer.
    Ingest,
    /// Pretrain (or load) the target and decoder models.
    TrainLm,
    /// Capture hidden states and split train/test pairs.
    Extract,
    /// Train the adapter with the decoder frozen.
    TrainAdapter,
    /// Train adapter and decoder LoRA together.
    TrainJoint,
    /// Reconstruct the test set.
    Invert,
    /// Score reconstructions and write summary.json.
    Eval,
    /// Run every stage up to eval.
    Run,
    /// Vary one setting and run the pipeline per value.
    Sweep {
        /// layers, lengths, factor, or tokens.
        axis: SweepAxis,
        /// Comma-separated values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Ask the judge for out-of-distribution sentences.
    OodGen,
    /// Invert and score the out-of-distribution set.
    OodEval,
    /// Tabulate summaries of one or more run directories.
    Report {
        runs: Vec<PathBuf>,
        /// Run directory or summary.json that OOD rows are compared against.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Where report.csv and report.txt go.
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
}

fn config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg = cfg.with_overrides(&g.sets)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if g.stub_judge {
        cfg.judge.mode = JudgeMode::Stub;
    }
    Ok(cfg.resolved())
}

fn stage(cfg: &ExperimentConfig, stage: Stage) -> Result<()> {
    let run = RunDir::new(&cfg.out);
    std::fs::create_dir_all(&run.dir).map_err(|e| repinv::Error::io(&run.dir, e))?;
    match harness::run_stage(cfg, &run, stage)? {
        StageOutcome::Ran => println!("{}: done ({})", stage.name(), run.dir.display()),
        StageOutcome::UpToDate => println!("{}: up to date ({})", stage.name(), run.dir.display()),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli.global)?;
    match cli.command {
        Command::Ingest => stage(&cfg, Stage::Ingest),
        Command::TrainLm => stage(&cfg, Stage::TrainLm),
        Command::Extract => stage(&cfg, Stage::Extract),
        Command::TrainAdapter => stage(&cfg, Stage::TrainAdapter),
        Command::TrainJoint => stage(&cfg, Stage::TrainJoint),
        Command::Invert => stage(&cfg, Stage::Invert),
        Command::Eval => stage(&cfg, Stage::Eval),
        Command::OodGen => stage(&cfg, Stage::OodGen),
        Command::OodEval => stage(&cfg, Stage::OodEval),
        Command::Run => {
            let s = harness::run_pipeline(&cfg, &RunDir::new(&cfg.out))?;
            let report = harness::emit_report(std::slice::from_ref(&cfg.out), None, None)?;
            print!("{}", report.table);
            for n in s.notes {
                println!("note: {n}");
            }
            Ok(())
        }
        Command::Sweep { axis, values } => {
            let t = harness::run_sweep(&cfg, axis, values)?;
            for c in &t.cells {
                match (&c.summary, &c.error) {
                    (Some(s), _) => println!(
                        "{}={}: ROUGE-1 {}",
                        axis.name(),
                        c.value,
                        s.metrics.rouge1.cell()
                    ),
                    (None, Some(e)) => println!("{}={}: failed: {e}", axis.name(), c.value),
                    (None, None) => {}
                }
            }
            println!("{}", t.verdict);
            Ok(())
        }
        Command::Report {
            runs,
            reference,
            report_out,
        } => {
            let runs = if runs.is_empty() {
                vec![cfg.out.clone()]
            } else {
                runs
            };
            let r = harness::emit_report(&runs, reference.as_deref(), report_out.as_deref())?;
            print!("{}", r.table);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
