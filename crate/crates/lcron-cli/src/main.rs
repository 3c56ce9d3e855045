//! CLI experiment runner for cascade-ranking training.
//!
//! Every subcommand reads the same `key = value` config format (see
//! `ExperimentConfig::apply_kv`), with `--set key=value` overriding file
//! entries. Outputs land in `--out-dir`, else `$LCRON_OUT_DIR`, else `./out`.
//! Exit code is 0 iff every requested run completed.

use clap::{Args, Parser, Subcommand};
use lcron::harness::{
    diagnostics_run, read_checkpoint, run_experiment, run_last_day_with_models, save_checkpoint,
    sweep_tau, welch_t_test, EvalMode, ExperimentConfig,
};
use lcron::harness::{evaluate, init_stage_models, load_stage};
use lcron::sampling::write_dataset;
use lcron::Result;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "lcron", version, about = "Cascade-ranking training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set tau=20`. Repeatable; applied
    /// after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (falls back to $LCRON_OUT_DIR, then ./out).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            cfg.apply_file_text(&text)?;
        }
        for entry in &self.sets {
            let (k, v) = entry.split_once('=').ok_or_else(|| {
                lcron::Error::Config(format!("--set expects KEY=VALUE, got '{entry}'"))
            })?;
            cfg.apply_kv(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os("LCRON_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset and write it to a file.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on all days but the last, evaluate on the last day, write
    /// metrics and a joint checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a saved checkpoint on the configured dataset's last day.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Day-by-day streaming evaluation: each day t is tested after training
    /// on days 0..t.
    Stream {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Survival bound-gap diagnostics before vs after training (needs
    /// impressions small enough for exact enumeration).
    Diagnose {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Held-out impressions to probe.
        #[arg(long, default_value_t = 100)]
        max_impressions: usize,
    },
    /// Run the experiment once per temperature and tabulate the results.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated temperatures, e.g. `1,20,50,100`.
        #[arg(long, value_delimiter = ',', required = true)]
        tau: Vec<f64>,
    },
    /// Run one config over several seeds and compare two methods with a
    /// Welch t-test on joint recall.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Baseline method to compare the configured method against.
        #[arg(long)]
        baseline: String,
        /// Seeds to run for both methods.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3, 4, 5])]
        seeds: Vec<u64>,
    },
}

fn ensure_dir(dir: &PathBuf) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { cfg, out } => {
            let cfg = cfg.build()?;
            let data = cfg.load_data()?;
            write_dataset(&out, &data)?;
            println!(
                "wrote {} impressions over {} days to {}",
                data.impressions.len(),
                data.num_days(),
                out.display()
            );
        }
        Command::Train { cfg: args } => {
            let mut cfg = args.build()?;
            cfg.eval_mode = EvalMode::LastDay;
            let out_dir = args.out_dir();
            ensure_dir(&out_dir)?;
            let (report, stages) = run_last_day_with_models(&cfg)?;
            let tag = format!("{}_seed{}", report.method, report.seed);
            let metrics_path = out_dir.join(format!("metrics_{tag}.csv"));
            report.write_csv(&metrics_path)?;
            let ckpt_path = out_dir.join(format!("checkpoint_{tag}.txt"));
            save_checkpoint(&ckpt_path, &stages.models, stages.fusion.as_ref())?;
            print!("{}", report.summary());
            println!("metrics: {}", metrics_path.display());
            println!("checkpoint: {}", ckpt_path.display());
        }
        Command::Eval { cfg: args, checkpoint } => {
            let cfg = args.build()?;
            let dataset = cfg.load_data()?;
            cfg.validate(&dataset)?;
            let mut models = init_stage_models(&cfg, dataset.feature_dim);
            let tensors = read_checkpoint(&checkpoint)?;
            for (i, m) in models.iter_mut().enumerate() {
                load_stage(&tensors, i, m)?;
            }
            let last = dataset.num_days() - 1;
            let test = dataset.day(last);
            let (joint, recalls, ndcgs) = evaluate(&models, &test, &cfg.serving, cfg.ndcg_k)?;
            println!("day {last}: joint recall {joint:.4}");
            for (i, (r, n)) in recalls.iter().zip(ndcgs.iter()).enumerate() {
                println!("  stage {}: recall {:.4}  ndcg {:.4}", i + 1, r, n);
            }
        }
        Command::Stream { cfg: args } => {
            let mut cfg = args.build()?;
            cfg.eval_mode = EvalMode::Streaming;
            let out_dir = args.out_dir();
            ensure_dir(&out_dir)?;
            let report = run_experiment(&cfg)?;
            let path = out_dir.join(format!(
                "metrics_stream_{}_seed{}.csv",
                report.method, report.seed
            ));
            report.write_csv(&path)?;
            print!("{}", report.summary());
            println!("metrics: {}", path.display());
        }
        Command::Diagnose { cfg: args, max_impressions } => {
            let cfg = args.build()?;
            let report = diagnostics_run(&cfg, max_impressions)?;
            println!(
                "before training: mean delta {:.5}  mean delta' {:.5}  max delta' {:.5}  ({} impressions, {} degenerate)",
                report.before.mean_delta,
                report.before.mean_delta_prime,
                report.before.max_delta_prime,
                report.before.impressions,
                report.before.degenerate,
            );
            println!(
                "after  training: mean delta {:.5}  mean delta' {:.5}  max delta' {:.5}  ({} impressions, {} degenerate)",
                report.after.mean_delta,
                report.after.mean_delta_prime,
                report.after.max_delta_prime,
                report.after.impressions,
                report.after.degenerate,
            );
            let dir = args.out_dir();
            ensure_dir(&dir)?;
            let path = dir.join("diagnostics.txt");
            std::fs::write(
                &path,
                format!(
                    "phase,mean_delta,mean_delta_prime,max_delta_prime,impressions,degenerate\n\
                     before,{},{},{},{},{}\nafter,{},{},{},{},{}\n",
                    report.before.mean_delta,
                    report.before.mean_delta_prime,
                    report.before.max_delta_prime,
                    report.before.impressions,
                    report.before.degenerate,
                    report.after.mean_delta,
                    report.after.mean_delta_prime,
                    report.after.max_delta_prime,
                    report.after.impressions,
                    report.after.degenerate,
                ),
            )?;
            println!("written: {}", path.display());
        }
        Command::Sweep { cfg: args, tau } => {
            let cfg = args.build()?;
            let out_dir = args.out_dir();
            ensure_dir(&out_dir)?;
            let rows = sweep_tau(&cfg, &tau)?;
            let mut combined = String::new();
            println!("tau      joint_recall");
            for (i, (tau, report)) in rows.iter().enumerate() {
                println!("{:<8} {:.4}", tau, report.aggregate_joint_recall());
                let csv = report.to_csv();
                if i == 0 {
                    combined.push_str(&csv);
                } else if let Some(pos) = csv.find('\n') {
                    combined.push_str(&csv[pos + 1..]);
                }
            }
            let path = out_dir.join(format!("sweep_{}.csv", cfg.method.name()));
            std::fs::write(&path, combined)?;
            println!("metrics: {}", path.display());
        }
        Command::Compare { cfg: args, baseline, seeds } => {
            let cfg = args.build()?;
            let baseline_method: lcron::harness::Method = baseline.parse()?;
            let mut ours = Vec::new();
            let mut theirs = Vec::new();
            for &seed in &seeds {
                let mut a = cfg.clone();
                a.seed = seed;
                ours.push(run_experiment(&a)?.aggregate_joint_recall());
                let mut b = cfg.clone();
                b.seed = seed;
                b.method = baseline_method;
                theirs.push(run_experiment(&b)?.aggregate_joint_recall());
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let std = |v: &[f64]| {
                let m = mean(v);
                (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            };
            let (t, p) = welch_t_test(&ours, &theirs)?;
            println!(
                "{}: {:.4} ± {:.4}   {}: {:.4} ± {:.4}   t = {:.3}, p = {:.4}",
                cfg.method.name(),
                mean(&ours),
                std(&ours),
                baseline_method.name(),
                mean(&theirs),
                std(&theirs),
                t,
                p
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
