use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tcm_core::checkpoint::Checkpoint;
use tcm_core::config::TrainConfig;
use tcm_core::data::{write_samples, Dataset};
use tcm_core::experiment::{self, EvalTarget, EvalWhat, SweepRow};
use tcm_core::metrics;
use tcm_core::train::battery;
use tcm_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tcm",
    version,
    about = "Truncated consistency training on low-dimensional data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// Config file of key=value lines; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            cfg = cfg.with_override(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a builtin dataset.
    GenData {
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 2048)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        sigma_data: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage-1 checkpoint; required for stage 2.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Echo log rows to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Write a metric report CSV.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoints; repeatable.
        #[arg(long)]
        ckpt: Vec<PathBuf>,
        /// Dataset file; the configured dataset is used when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// onestep | twostep | dfid | gap | tradeoff
        #[arg(long)]
        what: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate the exact oracle instead of a checkpoint.
        #[arg(long, conflicts_with = "student")]
        oracle: bool,
        /// Evaluate the bare second-stage student, also below t'.
        #[arg(long)]
        student: bool,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        steps: u8,
        /// Re-noising time for two-step sampling; defaults to the config's.
        #[arg(long)]
        t_mid: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per value of a scalar config key.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint shared by all values (second-stage keys only).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Run each value in its own process.
        #[arg(long)]
        parallel: bool,
    },
    /// Finite-difference check of every primitive and loss.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Self-checks of the exact-score oracle.
    OracleCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1000)]
        points: usize,
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn check_stage1_key(key: &str, init: Option<&PathBuf>) -> Result<()> {
    if init.is_some() && !experiment::is_stage2_key(key) {
        return Err(Error::Usage(format!(
            "{key} changes the first stage, so a shared --init cannot be used"
        )));
    }
    Ok(())
}

fn sweep_parallel(
    cfg: &TrainConfig,
    args: &ConfigArgs,
    param: &str,
    values: &[String],
    out: &Path,
    init: Option<PathBuf>,
) -> Result<Vec<SweepRow>> {
    std::fs::create_dir_all(out)?;
    let init = match init {
        Some(p) => Some(p),
        None if experiment::is_stage2_key(param) => {
            let data = experiment::load_dataset(cfg)?;
            let dir = out.join("stage1");
            experiment::run_train(cfg, 1, None, &data, Some(&dir), &mut |_| {})?;
            Some(dir.join("final.ckpt"))
        }
        None => None,
    };
    let exe = std::env::current_exe()?;
    let children = values
        .iter()
        .map(|v| {
            let mut c = std::process::Command::new(&exe);
            c.arg("sweep")
                .arg("--param")
                .arg(param)
                .arg("--values")
                .arg(v);
            c.arg("--out").arg(experiment::sweep_dir(out, param, v));
            if let Some(p) = &args.config {
                c.arg("--config").arg(p);
            }
            for s in &args.sets {
                c.arg("--set").arg(s);
            }
            if let Some(p) = &init {
                c.arg("--init").arg(p);
            }
            Ok(c.spawn()?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (mut child, v) in children.into_iter().zip(values) {
        let status = child.wait()?;
        if !status.success() {
            return Err(Error::Usage(format!(
                "sweep value {v} failed with {status}"
            )));
        }
        let summary =
            std::fs::read_to_string(experiment::sweep_dir(out, param, v).join("summary.csv"))?;
        rows.extend(parse_sweep_rows(&summary)?);
    }
    let mut f = std::fs::File::create(out.join("summary.csv"))?;
    experiment::write_sweep(param, &rows, &mut f)?;
    Ok(rows)
}

fn parse_sweep_rows(text: &str) -> Result<Vec<SweepRow>> {
    use experiment::SweepStatus;
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad sweep summary line {l:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(SweepRow {
                value: f[1].to_string(),
                status: match f[2] {
                    "ok" => SweepStatus::Ok,
                    "diverged" => SweepStatus::Diverged,
                    "collapsed" => SweepStatus::Collapsed,
                    _ => return Err(bad()),
                },
                onestep_w2: f[3].parse().map_err(|_| bad())?,
                modes: if f[4].is_empty() {
                    None
                } else {
                    Some(f[4].parse().map_err(|_| bad())?)
                },
            })
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            name,
            n,
            d,
            seed,
            sigma_data,
            out,
        } => {
            let ds = experiment::gen_data(&name, n, d, seed, sigma_data, &out)?;
            eprintln!(
                "wrote {} points in d={} to {}",
                ds.len(),
                ds.dim(),
                out.display()
            );
        }
        Cmd::Train {
            cfg,
            stage,
            init,
            out,
            verbose,
        } => {
            let config = cfg.load()?;
            let init = match (stage, init) {
                (2, None) => {
                    return Err(Error::Usage(
                        "--stage 2 requires --init <stage-1 checkpoint>".into(),
                    ))
                }
                (1, Some(_)) => {
                    return Err(Error::Usage("--init only applies to --stage 2".into()))
                }
                (_, p) => p.map(|p| Checkpoint::load(&p)).transpose()?,
            };
            let data = experiment::load_dataset(&config)?;
            let mut echo = |r: &tcm_core::train::LogRow| {
                if verbose {
                    eprintln!(
                        "iter {} loss {:.6} grad {:.4} lr {:.2e}",
                        r.iter, r.loss, r.grad_norm, r.lr
                    );
                }
            };
            let a =
                experiment::run_train(&config, stage, init.as_ref(), &data, Some(&out), &mut echo)?;
            for (k, v) in &a.manifest.final_metrics {
                println!("{k}={v}");
            }
        }
        Cmd::Eval {
            cfg,
            ckpt,
            data,
            what,
            seed,
            oracle,
            student,
            out,
        } => {
            let config = cfg.load()?;
            let what: EvalWhat = what.parse()?;
            let data = match data {
                Some(p) => Dataset::load(&p)?,
                None => experiment::load_dataset(&config)?,
            };
            let ckpts = ckpt
                .iter()
                .map(|p| {
                    Ok((
                        p.file_stem()
                            .unwrap_or_default()
                            .to_string_lossy()
                            .into_owned(),
                        Checkpoint::load(p)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let target = match (oracle, student) {
                (true, _) => EvalTarget::Oracle,
                (_, true) => EvalTarget::Student,
                _ => EvalTarget::Model,
            };
            let rows = experiment::run_eval(&ckpts, target, &data, what, &config, seed)?;
            let mut w = output(out.as_deref())?;
            metrics::write_report(&rows, &mut w)?;
            w.flush()?;
        }
        Cmd::Sample {
            cfg,
            ckpt,
            n,
            steps,
            t_mid,
            seed,
            out,
        } => {
            let config = cfg.load()?;
            let ck = Checkpoint::load(&ckpt)?;
            let x = experiment::sample(
                &ck,
                n,
                steps,
                t_mid.unwrap_or(config.t_mid()),
                seed,
                &config,
            )?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            write_samples(&mut w, &x, ck.sigma_data())?;
            w.flush()?;
        }
        Cmd::Sweep {
            cfg: args,
            param,
            values,
            out,
            init,
            parallel,
        } => {
            let config = args.load()?;
            experiment::check_sweep(&config, &param, &values)?;
            check_stage1_key(&param, init.as_ref())?;
            let rows = if parallel {
                sweep_parallel(&config, &args, &param, &values, &out, init)?
            } else {
                std::fs::create_dir_all(&out)?;
                let init = init.map(|p| Checkpoint::load(&p)).transpose()?;
                experiment::run_sweep(&config, &param, &values, &out, init.as_ref())?
            };
            let mut w = std::io::stdout().lock();
            experiment::write_sweep(&param, &rows, &mut w)?;
        }
        Cmd::Gradcheck {
            points,
            seed,
            inject_fault,
        } => {
            let _fault = inject_fault.then(tcm_core::autodiff::inject_silu_fault);
            let rows = battery::run_battery(points, seed)?;
            println!("check,points,max_rel_err,status");
            for r in &rows {
                println!(
                    "{},{},{:e},{}",
                    r.name,
                    r.points,
                    r.max_rel_err,
                    if r.passed() { "pass" } else { "FAIL" }
                );
            }
            let failed: Vec<&str> = rows
                .iter()
                .filter(|r| !r.passed())
                .map(|r| r.name.as_str())
                .collect();
            if !failed.is_empty() {
                return Err(Error::Numeric(format!(
                    "gradient checks above {:e}: {}",
                    battery::TOLERANCE,
                    failed.join(", ")
                )));
            }
        }
        Cmd::OracleCheck {
            cfg,
            points,
            n,
            seed,
        } => {
            let config = cfg.load()?;
            let data = experiment::load_dataset(&config)?;
            let r = experiment::oracle_check(&data, &config, points, n, seed)?;
            println!("score_rel_err={:e}", r.score_rel_err);
            let ratios: Vec<String> = r.heun_ratios.iter().map(|v| format!("{v:.3}")).collect();
            println!("heun_ratios={}", ratios.join(","));
            println!("semigroup_err={:e}", r.semigroup_err);
            println!("marginal_w2={}", r.marginal_w2);
            println!("baseline_w2={}", r.baseline_w2);
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TCM_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Usage(format!("TCM_THREADS must be a positive integer, got {v:?}"))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
