use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use reconbench::bench::{self, JudgeSettings, TableFormat};
use reconbench::data::dataset_by_id;
use reconbench::harness::{split_dataset, ExperimentPlan};
use reconbench::judge::{self, HttpJudgeClient, JudgeClient, NearestClient, QueryOptions};
use reconbench::memorization::{MemLedger, NetTrainer};

#[derive(Parser)]
#[command(name = "bench", version, about = "Data reconstruction attack benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every cell of a benchmark config, reusing cached cells.
    Run { config: PathBuf },
    /// Render the results ledger as a table.
    Table {
        ledger: PathBuf,
        #[arg(long, default_value = "md")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scatter plots, correlation heatmap, coverage, t-SNE and image grids.
    Plots {
        ledger: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ask a vision judge which condition best resembles each target.
    Judge {
        ledger: PathBuf,
        /// Comma-separated ledger row labels, 2 to 8 of them.
        #[arg(long, value_delimiter = ',', required = true)]
        conditions: Vec<String>,
        /// Target size; defaults to the largest size all conditions share.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 20)]
        targets: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Offline judge instead of the HTTP endpoint (only `nearest`).
        #[arg(long)]
        mock: Option<String>,
        /// Response log; defaults to judge.jsonl next to the ledger.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Estimate model-level memorization for every target size of a plan.
    Mem {
        plan: PathBuf,
        #[arg(long, default_value_t = 32)]
        probes: usize,
        #[arg(long, default_value_t = 8)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Run { config } => {
            let m = bench::run_benchmark(&config).with_context(|| format!("running {}", config.display()))?;
            println!(
                "{} cells: {} computed, {} cached, {} failed; ledger {}",
                m.cells.len(),
                m.computed(),
                m.cells.len() - m.computed() - m.failures(),
                m.failures(),
                m.ledger.display()
            );
            for c in m.cells.iter().filter(|c| c.error.is_some()) {
                eprintln!("failed {}/{} size {}: {}", c.key.plan_hash, c.key.attack_id, c.size, c.error.as_deref().unwrap_or(""));
            }
            Ok(m.failures() == 0)
        }
        Cmd::Table { ledger, format, out } => {
            let fmt: TableFormat = format.parse()?;
            match out {
                Some(out) => bench::emit_table(&ledger, fmt, &out)?,
                None => print!("{}", bench::render_table(&bench::read_ledger(&ledger)?, fmt)?),
            }
            Ok(true)
        }
        Cmd::Plots { ledger, out } => {
            let out = out.unwrap_or_else(|| sibling(&ledger, "plots"));
            let files = bench::emit_plots(&ledger, &out)?;
            for f in &files.files {
                println!("{}", f.display());
            }
            for (a, b) in &files.undefined_correlations {
                eprintln!("correlation {a} ~ {b} is undefined (constant column)");
            }
            Ok(true)
        }
        Cmd::Judge {
            ledger,
            conditions,
            size,
            targets,
            repeats,
            seed,
            mock,
            log,
        } => {
            let entries = bench::read_ledger(&ledger)?;
            let size = match size {
                Some(s) => s,
                None => bench::common_size(&entries, &conditions).context("conditions share no target size")?,
            };
            let settings = JudgeSettings { repeats, targets, seed };
            let tasks = bench::judge_tasks(&entries, &conditions, size, &settings)?;
            let client: Box<dyn JudgeClient> = match mock.as_deref() {
                None => Box::new(HttpJudgeClient::from_env()?),
                Some("nearest") => Box::new(NearestClient),
                Some(other) => bail!("unknown mock judge `{other}`"),
            };
            let opts = QueryOptions {
                seed,
                ..QueryOptions::default()
            };
            let run = judge::run_judge(&tasks, client.as_ref(), &opts)?;
            let log = log.unwrap_or_else(|| sibling(&ledger, "judge.jsonl"));
            judge::append_log(&log, &run.records)?;
            let tally = judge::aggregate_records(&run.records)?;
            println!("condition\tmajor\tunanimous\tselected\tpred_rate");
            for (c, t) in conditions.iter().zip(&tally.conditions) {
                println!("{c}\t{}\t{}\t{}\t{:.3}", t.major_wins, t.unanimous_wins, t.selection_count, t.pred_rate);
            }
            println!(
                "{} tasks, {} valid / {} invalid votes; log {}",
                tally.tasks,
                tally.valid_votes,
                tally.invalid_votes,
                log.display()
            );
            for t in &run.failed_tasks {
                eprintln!("task {t} failed");
            }
            Ok(run.failed_tasks.is_empty())
        }
        Cmd::Mem {
            plan,
            probes,
            trials,
            seed,
            ledger,
        } => {
            let text = std::fs::read_to_string(&plan).with_context(|| format!("reading {}", plan.display()))?;
            let p: ExperimentPlan = serde_json::from_str(&text)?;
            let ds = dataset_by_id(&p.dataset)?;
            let split = split_dataset(&ds, &p)?;
            let store = MemLedger::new(ledger.unwrap_or_else(|| sibling(&plan, "memorization.jsonl")));
            let trainer = NetTrainer::desk();
            println!("size\tmem\tstd_error");
            for (size, target) in split.sizes.iter().zip(&split.targets) {
                let m = store.model_mem(&trainer, target, probes.min(target.len()), trials, seed)?;
                let se = m.std_error.map_or("-".into(), |s| format!("{s:.4}"));
                println!("{size}\t{:.4}\t{se}", m.mean);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
