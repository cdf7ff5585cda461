use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use snip_core::error::Result;
use snip_core::io::{self, Checkpoint, OutputLock, RunConfig, RunHistory};
use snip_core::pruning::{collect_stats, evaluate, run_schedule, train_baseline};
use snip_core::spectral::log_spectral_trace;

const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "snip", version, about = "Structured pruning of small Transformers with identity priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the ungated baseline only.
    Train(Common),
    /// Run the full pruning schedule.
    Prune(Common),
    /// Evaluate a checkpoint on the configured task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Norm histograms and spectral estimates for a checkpoint.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Re-emit CSV reports from a saved history file.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        history: Option<PathBuf>,
    },
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

fn setup(c: &Common) -> Result<Run> {
    let mut cfg = io::parse_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    cfg.out_dir = out.display().to_string();
    Ok(Run { cfg, out })
}

fn finish_reports(history: &RunHistory, out: &Path) -> Result<()> {
    history.save(&out.join(io::HISTORY))?;
    for p in io::emit_reports(history, out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_train(c: &Common) -> Result<()> {
    let run = setup(c)?;
    let _lock = OutputLock::acquire(&run.out)?;
    run.cfg.echo_to(&run.out)?;
    let (train, eval) = run.cfg.load_task()?;
    let sched = run.cfg.schedule(&train);
    let (st, stats) = train_baseline(&sched, &train, &eval)?;
    let rec = &st.history[0];
    println!("baseline: train {:.4} eval {:.4} params {}", rec.train_metric, rec.eval_metric, rec.params);
    let ckpt = Checkpoint {
        state: st.model.clone(),
        gate: None,
        granularity: sched.prune.mode.granularity(),
        sn: sched.sn.clone(),
    };
    io::save_checkpoint(&ckpt, &run.out.join(CHECKPOINT_FILE))?;
    let history = RunHistory {
        records: st.history.clone(),
        reported: 0,
        baseline_metric: st.baseline_metric,
        baseline_stats: stats.into(),
        trace: st.trace.clone(),
    };
    finish_reports(&history, &run.out)
}

fn cmd_prune(c: &Common) -> Result<()> {
    let run = setup(c)?;
    let _lock = OutputLock::acquire(&run.out)?;
    run.cfg.echo_to(&run.out)?;
    let (train, eval) = run.cfg.load_task()?;
    let sched = run.cfg.schedule(&train);
    let outcome = run_schedule(&sched, &train, &eval)?;
    for r in &outcome.history {
        println!(
            "iter {:>2} {:<10} eps_att {:.4} eps_ffn {:.4} params {:>8} eval {:.4}  {}",
            r.iteration,
            format!("{:?}", r.note),
            r.eps_att,
            r.eps_ffn,
            r.params,
            r.eval_metric,
            r.arch.describe()
        );
    }
    let rep = outcome.reported_record();
    println!(
        "reported: {} ({})",
        io::table_row(outcome.fraction_pruned(), rep.eval_metric),
        rep.arch.describe()
    );
    let ckpt = Checkpoint {
        state: outcome.state.clone(),
        gate: outcome.gate,
        granularity: sched.prune.mode.granularity(),
        sn: sched.sn.clone(),
    };
    io::save_checkpoint(&ckpt, &run.out.join(CHECKPOINT_FILE))?;
    finish_reports(&RunHistory::from_outcome(&outcome), &run.out)
}

fn checkpoint_path(run: &Run, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| run.out.join(CHECKPOINT_FILE))
}

fn cmd_eval(c: &Common, checkpoint: &Option<PathBuf>) -> Result<()> {
    let run = setup(c)?;
    let ckpt = io::load_checkpoint(&checkpoint_path(&run, checkpoint))?;
    let (train, eval) = run.cfg.load_task()?;
    for (name, data) in [("train", &train), ("eval", &eval)] {
        let acc = evaluate(&ckpt.state, data, &ckpt.sn, ckpt.gate.as_ref(), ckpt.granularity)?;
        println!("{name}_accuracy {acc:.6} ({} examples)", data.len());
    }
    println!(
        "params {} architecture {}",
        snip_core::model::count_params(&ckpt.state.config, &ckpt.state.arch),
        ckpt.state.arch.describe()
    );
    Ok(())
}

fn cmd_profile(c: &Common, checkpoint: &Option<PathBuf>) -> Result<()> {
    let run = setup(c)?;
    let ckpt = io::load_checkpoint(&checkpoint_path(&run, checkpoint))?;
    let _lock = OutputLock::acquire(&run.out)?;
    let (train, _) = run.cfg.load_task()?;
    let stats = collect_stats(&ckpt.state, &train, &ckpt.sn, ckpt.gate.as_ref(), ckpt.granularity)?;
    let trace = log_spectral_trace(&ckpt.state.effective_params(&ckpt.sn), ckpt.state.step);
    for (b, s) in stats.blocks() {
        println!("{b:<14} mean_maxabs {:.6} identity_rate {:.6}", s.mean_max_abs(), stats.identity_rate(b)?);
    }
    println!("wrote {}", io::write_norm_hist(&stats, &run.out)?.display());
    println!("wrote {}", io::write_spectral_trace(&trace, &run.out)?.display());
    Ok(())
}

fn cmd_report(c: &Common, history: &Option<PathBuf>) -> Result<()> {
    let run = setup(c)?;
    let path = history.clone().unwrap_or_else(|| run.out.join(io::HISTORY));
    let h = RunHistory::load(&path)?;
    let _lock = OutputLock::acquire(&run.out)?;
    for p in io::emit_reports(&h, &run.out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Prune(c) => cmd_prune(c),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Profile { common, checkpoint } => cmd_profile(common, checkpoint),
        Command::Report { common, history } => cmd_report(common, history),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}

