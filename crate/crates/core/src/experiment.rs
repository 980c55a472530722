//! Orchestration behind the command-line tool: datasets, the two training
//! stages with their on-disk artifacts, evaluation reports and sweeps.
//!
//! A training run directory holds `config.txt`, `final.ckpt`, one
//! `snap_<iter>.ckpt` per snapshot, `log.csv`, `metrics.csv` and
//! `manifest.txt`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::autodiff::Array;
use crate::checkpoint::{Checkpoint, EvalModel};
use crate::config::TrainConfig;
use crate::data::{Builtin, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalPlan, MetricRecord, ReportRow};
use crate::net::ConsistencyFn;
use crate::oracle::OracleConsistency;
use crate::rng;
use crate::train::{self, LogRow, TrainOutput};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const MANIFEST_MAGIC: &str = "tcm-manifest v1";

/// Bookkeeping for one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub stage: u8,
    /// Unix seconds; zero when wall-clock logging is off.
    pub started: u64,
    pub finished: u64,
    pub checkpoints: Vec<PathBuf>,
    pub final_metrics: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{MANIFEST_MAGIC}")?;
        writeln!(out, "config_hash={}", self.config_hash)?;
        writeln!(out, "version={}", self.version)?;
        writeln!(out, "stage={}", self.stage)?;
        writeln!(out, "started={}", self.started)?;
        writeln!(out, "finished={}", self.finished)?;
        for p in &self.checkpoints {
            writeln!(out, "checkpoint={}", p.display())?;
        }
        for (k, v) in &self.final_metrics {
            writeln!(out, "metric.{k}={v:?}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write(&mut f)
    }
}

fn unix_now(enabled: bool) -> u64 {
    if !enabled {
        return 0;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Generates a builtin dataset and writes it to `out`.
pub fn gen_data(
    name: &str,
    n: usize,
    d: usize,
    seed: u64,
    sigma_data: f64,
    out: &Path,
) -> Result<Dataset> {
    let kind: Builtin = name.parse()?;
    let ds = Dataset::builtin(kind, n, d, seed, sigma_data)?;
    ds.save(out)?;
    Ok(ds)
}

/// The configured dataset: loaded from `data.path` if set, else generated.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let kind: std::result::Result<Builtin, _> = cfg.data.name.parse();
    match (&cfg.data.path, kind) {
        (Some(p), _) => Dataset::load(p),
        (None, Ok(kind)) => Dataset::builtin(
            kind,
            cfg.data.n,
            cfg.data.d,
            cfg.data.seed,
            cfg.noise.sigma_data,
        ),
        (None, Err(e)) => Err(e),
    }
}

/// Evaluation settings taken from the config.
pub fn eval_plan(cfg: &TrainConfig, seed: u64) -> EvalPlan {
    EvalPlan {
        n: cfg.eval.n,
        seed,
        t_grid: cfg.eval.t_grid.clone(),
        t_mid: cfg.t_mid(),
        gap_grid: Vec::new(),
        gap_n: cfg.eval.n.min(256),
        gap_steps: cfg.oracle_steps,
        grid: cfg.oracle_grid,
    }
}

/// A finished training run.
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub output: TrainOutput,
    pub checkpoint: Checkpoint,
    /// One record per snapshot.
    pub records: Vec<MetricRecord>,
    pub manifest: RunManifest,
}

impl TrainArtifacts {
    pub fn model(&self) -> Result<EvalModel> {
        self.checkpoint.model()
    }
}

fn checkpoint_of(
    cfg: &TrainConfig,
    stage: u8,
    iteration: u64,
    raw: &crate::net::CmParams,
    ema: &crate::net::CmParams,
    frozen: Option<&crate::net::CmParams>,
) -> Checkpoint {
    Checkpoint {
        stage,
        seed: cfg.seed,
        iteration,
        t_prime: frozen.map(|_| cfg.time.t_prime),
        config_hash: cfg.hash(),
        raw: raw.clone(),
        ema: ema.clone(),
        frozen: frozen.cloned(),
    }
}

/// Runs one stage; `init` is the first-stage checkpoint and is required for
/// stage 2. When `out_dir` is given every artifact is written there.
pub fn run_train(
    cfg: &TrainConfig,
    stage: u8,
    init: Option<&Checkpoint>,
    data: &Dataset,
    out_dir: Option<&Path>,
    on_log: &mut dyn FnMut(&LogRow),
) -> Result<TrainArtifacts> {
    let started = unix_now(cfg.log_wall_clock);
    let output = match (stage, init) {
        (1, None) => train::train_stage1(cfg, data, on_log)?,
        (1, Some(_)) => {
            return Err(Error::Usage(
                "stage 1 does not take an initial checkpoint".into(),
            ))
        }
        (2, Some(c)) => {
            if c.sigma_data() != data.sigma_data() {
                return Err(Error::Compatibility(format!(
                    "checkpoint σ_data={} but dataset σ_data={}",
                    c.sigma_data(),
                    data.sigma_data()
                )));
            }
            train::train_stage2(cfg, data, &c.ema, on_log)?
        }
        (2, None) => return Err(Error::Usage("stage 2 needs the stage-1 checkpoint".into())),
        (s, _) => return Err(Error::Usage(format!("unknown stage {s}"))),
    };
    let plan = eval_plan(cfg, cfg.seed);
    let frozen = output.frozen.as_ref();
    let mut records = Vec::new();
    let mut snaps = Vec::new();
    for s in &output.snapshots {
        let ck = checkpoint_of(cfg, stage, s.iteration, &s.raw, &s.ema, frozen);
        records.push(metrics::evaluate(
            &ck.model()?,
            s.iteration,
            data,
            &plan,
            &cfg.noise,
        )?);
        snaps.push(ck);
    }
    let checkpoint = checkpoint_of(
        cfg,
        stage,
        output.iterations,
        &output.raw,
        &output.ema,
        frozen,
    );
    let final_rec = match records.last() {
        Some(r) if r.iteration == output.iterations => r.clone(),
        _ => metrics::evaluate(
            &checkpoint.model()?,
            output.iterations,
            data,
            &plan,
            &cfg.noise,
        )?,
    };
    let mut final_metrics = vec![
        ("onestep_w2".to_string(), final_rec.one_step_div),
        ("twostep_w2".to_string(), final_rec.two_step_div),
    ];
    final_metrics.extend(
        final_rec
            .dfid_grid
            .iter()
            .map(|(t, v)| (format!("dfid_w2@{t}"), *v)),
    );

    let mut manifest = RunManifest {
        config_hash: cfg.hash(),
        version: VERSION.to_string(),
        stage,
        started,
        finished: 0,
        checkpoints: Vec::new(),
        final_metrics,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), cfg.serialize())?;
        for ck in &snaps {
            let name = format!("snap_{:06}.ckpt", ck.iteration);
            ck.save(&dir.join(&name))?;
            manifest.checkpoints.push(PathBuf::from(name));
        }
        checkpoint.save(&dir.join("final.ckpt"))?;
        manifest.checkpoints.push(PathBuf::from("final.ckpt"));
        let mut log = std::io::BufWriter::new(std::fs::File::create(dir.join("log.csv"))?);
        train::write_log_csv(&output.log, &mut log)?;
        log.flush()?;
        let rows: Vec<ReportRow> = snaps
            .iter()
            .zip(&records)
            .flat_map(|(ck, r)| r.rows(&format!("snap_{:06}", ck.iteration), &plan, &cfg.noise))
            .collect();
        let mut m = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
        metrics::write_report(&rows, &mut m)?;
        m.flush()?;
    }
    manifest.finished = unix_now(cfg.log_wall_clock);
    if let Some(dir) = out_dir {
        manifest.save(&dir.join("manifest.txt"))?;
    }
    Ok(TrainArtifacts {
        output,
        checkpoint,
        records,
        manifest,
    })
}

/// Which report `eval` produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalWhat {
    OneStep,
    TwoStep,
    Dfid,
    Gap,
    Tradeoff,
}

impl std::str::FromStr for EvalWhat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "onestep" => EvalWhat::OneStep,
            "twostep" => EvalWhat::TwoStep,
            "dfid" => EvalWhat::Dfid,
            "gap" => EvalWhat::Gap,
            "tradeoff" => EvalWhat::Tradeoff,
            _ => {
                return Err(Error::Usage(format!(
                    "unknown report {s:?}; expected onestep|twostep|dfid|gap|tradeoff"
                )))
            }
        })
    }
}

fn report_for(
    name: &str,
    iter: u64,
    model: &dyn ConsistencyFn,
    what: EvalWhat,
    data: &Dataset,
    plan: &EvalPlan,
    cfg: &TrainConfig,
) -> Result<Vec<ReportRow>> {
    let spec = &cfg.noise;
    let row = |t: f64, metric: &str, value: f64, n: usize| ReportRow {
        ckpt: name.to_string(),
        iter,
        t,
        metric: metric.to_string(),
        value,
        n,
        seed: plan.seed,
    };
    Ok(match what {
        EvalWhat::OneStep => vec![row(
            spec.t_max,
            "onestep_w2",
            metrics::one_step_divergence(model, data, plan, spec)?,
            plan.n,
        )],
        EvalWhat::TwoStep => vec![row(
            plan.t_mid,
            "twostep_w2",
            metrics::two_step_divergence(model, data, plan, spec)?,
            plan.n,
        )],
        EvalWhat::Dfid | EvalWhat::Tradeoff => metrics::dfid_grid(model, data, plan, spec)?
            .into_iter()
            .map(|(t, v)| row(t, "dfid_w2", v, plan.n))
            .collect(),
        EvalWhat::Gap => metrics::gap_grid(model, data, plan, spec)?
            .into_iter()
            .map(|(t, v)| row(t, "oracle_gap", v, plan.gap_n))
            .collect(),
    })
}

/// Which network a report evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    /// The checkpoint's evaluation model (truncated pair for stage 2).
    Model,
    /// The bare EMA student, also below `t'`.
    Student,
    /// The exact oracle; takes no checkpoints.
    Oracle,
}

/// Evaluates checkpoints, or the exact oracle.
pub fn run_eval(
    ckpts: &[(String, Checkpoint)],
    target: EvalTarget,
    data: &Dataset,
    what: EvalWhat,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    let mut plan = eval_plan(cfg, seed);
    plan.gap_grid = cfg.eval.t_grid.clone();
    if target == EvalTarget::Oracle {
        if !ckpts.is_empty() {
            return Err(Error::Usage(
                "--oracle evaluates the exact model and takes no checkpoints".into(),
            ));
        }
        let o = OracleConsistency {
            data,
            spec: cfg.noise,
            steps: cfg.oracle_steps,
            grid: cfg.oracle_grid,
        };
        return report_for("oracle", 0, &o, what, data, &plan, cfg);
    }
    if ckpts.is_empty() {
        return Err(Error::Usage("no checkpoint given".into()));
    }
    if what == EvalWhat::Tradeoff && ckpts.len() < 2 {
        return Err(Error::Usage(format!(
            "tradeoff needs at least 2 checkpoints, got {}",
            ckpts.len()
        )));
    }
    let mut rows = Vec::new();
    for (name, ck) in ckpts {
        if ck.sigma_data() != data.sigma_data() {
            return Err(Error::Compatibility(format!(
                "{name}: checkpoint σ_data={} but dataset σ_data={}",
                ck.sigma_data(),
                data.sigma_data()
            )));
        }
        if ck.arch().dim != data.dim() {
            return Err(Error::Compatibility(format!(
                "{name}: checkpoint d={} but dataset d={}",
                ck.arch().dim,
                data.dim()
            )));
        }
        let model = match target {
            EvalTarget::Student => ck.student(),
            _ => ck.model()?,
        };
        rows.extend(report_for(
            name,
            ck.iteration,
            &model,
            what,
            data,
            &plan,
            cfg,
        )?);
    }
    Ok(rows)
}

/// Draws samples from a checkpoint with one or two steps.
pub fn sample(
    ck: &Checkpoint,
    n: usize,
    steps: u8,
    t_mid: f64,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<Array> {
    let model = ck.model()?;
    let mut r = rng::stream(seed, "sample", 0);
    match steps {
        1 => metrics::sample_onestep(&model, n, &mut r, &cfg.noise),
        2 => metrics::sample_twostep(&model, n, t_mid, &mut r, &cfg.noise),
        s => Err(Error::Usage(format!("steps must be 1 or 2, got {s}"))),
    }
}

/// Keys that only affect the second stage or evaluation, so a sweep over
/// them can share one first-stage run.
pub fn is_stage2_key(key: &str) -> bool {
    key.starts_with("time.")
        || key.starts_with("stage2.")
        || key.starts_with("eval.")
        || key == "loss.w_b"
        || key == "loss.rho"
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepStatus {
    Ok,
    Diverged,
    Collapsed,
}

impl SweepStatus {
    pub fn name(self) -> &'static str {
        match self {
            SweepStatus::Ok => "ok",
            SweepStatus::Diverged => "diverged",
            SweepStatus::Collapsed => "collapsed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub status: SweepStatus,
    /// NaN after a divergence.
    pub onestep_w2: f64,
    pub modes: Option<usize>,
}

pub const SWEEP_HEADER: &str = "key,value,status,onestep_w2,modes";

pub fn write_sweep(key: &str, rows: &[SweepRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        let modes = r.modes.map_or_else(String::new, |m| m.to_string());
        writeln!(
            out,
            "{key},{},{},{},{modes}",
            r.value,
            r.status.name(),
            r.onestep_w2
        )?;
    }
    Ok(())
}

/// Mode count and collapse verdict of a model's one-step samples, against
/// the variance of a reference model's samples under the same noise.
pub fn collapse_check(
    model: &dyn ConsistencyFn,
    reference: &dyn ConsistencyFn,
    data: &Dataset,
    n: usize,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<(Option<usize>, bool)> {
    let draw = |m: &dyn ConsistencyFn| {
        metrics::sample_onestep(m, n, &mut rng::stream(seed, "collapse", 0), &cfg.noise)
    };
    let x = draw(model)?;
    let var = metrics::total_variance(&x);
    let ref_var = metrics::total_variance(&draw(reference)?);
    match data.centers() {
        Some(c) => {
            let covered = metrics::modes_covered(&x, c);
            Ok((
                Some(covered),
                metrics::collapse_detected(covered, c.rows(), var, ref_var),
            ))
        }
        None => Ok((None, var < 0.1 * ref_var)),
    }
}

/// Runs one sweep value: both stages, or only the second when `stage1` is given.
pub fn sweep_value(
    cfg: &TrainConfig,
    key: &str,
    value: &str,
    stage1: Option<&Checkpoint>,
    data: &Dataset,
    dir: &Path,
) -> Result<SweepRow> {
    let cfg = cfg.with_override(key, value)?;
    let data = if stage1.is_some() {
        data.clone()
    } else {
        load_dataset(&cfg)?
    };
    let result = (|| {
        let owned;
        let init = match stage1 {
            Some(c) => c,
            None => {
                owned = run_train(&cfg, 1, None, &data, Some(&dir.join("stage1")), &mut |_| {})?
                    .checkpoint;
                &owned
            }
        };
        let s2 = run_train(
            &cfg,
            2,
            Some(init),
            &data,
            Some(&dir.join("stage2")),
            &mut |_| {},
        )?;
        let (modes, collapsed) = collapse_check(
            &s2.model()?,
            &init.model()?,
            &data,
            cfg.eval.n,
            cfg.seed,
            &cfg,
        )?;
        let w2 = s2.manifest.final_metrics[0].1;
        Ok::<_, Error>(SweepRow {
            value: value.to_string(),
            status: if collapsed {
                SweepStatus::Collapsed
            } else {
                SweepStatus::Ok
            },
            onestep_w2: w2,
            modes,
        })
    })();
    match result {
        Err(Error::Divergence { .. }) => Ok(SweepRow {
            value: value.to_string(),
            status: SweepStatus::Diverged,
            onestep_w2: f64::NAN,
            modes: None,
        }),
        other => other,
    }
}

/// Sequential sweep. `values` must be non-empty and `key` scalar; each value
/// gets `out_dir/<key>=<value>/`.
pub fn run_sweep(
    cfg: &TrainConfig,
    key: &str,
    values: &[String],
    out_dir: &Path,
    stage1: Option<&Checkpoint>,
) -> Result<Vec<SweepRow>> {
    check_sweep(cfg, key, values)?;
    let data = load_dataset(cfg)?;
    let shared;
    let stage1 = match stage1 {
        Some(c) => Some(c),
        None if is_stage2_key(key) => {
            shared = run_train(
                cfg,
                1,
                None,
                &data,
                Some(&out_dir.join("stage1")),
                &mut |_| {},
            )?
            .checkpoint;
            Some(&shared)
        }
        None => None,
    };
    let mut rows = Vec::new();
    for v in values {
        rows.push(sweep_value(
            cfg,
            key,
            v,
            stage1,
            &data,
            &sweep_dir(out_dir, key, v),
        )?);
    }
    let mut f = std::fs::File::create(out_dir.join("summary.csv"))?;
    write_sweep(key, &rows, &mut f)?;
    Ok(rows)
}

pub fn sweep_dir(out_dir: &Path, key: &str, value: &str) -> PathBuf {
    out_dir.join(format!("{key}={value}"))
}

/// Validates a sweep request before any compute.
pub fn check_sweep(cfg: &TrainConfig, key: &str, values: &[String]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    if !TrainConfig::is_scalar_key(key) {
        return Err(Error::Usage(format!("{key:?} is not a scalar config key")));
    }
    for v in values {
        cfg.with_override(key, v)?;
    }
    Ok(())
}


/// Self-checks of the exact oracle on a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    /// Max relative error of the closed-form score against central
    /// differences of the log-density.
    pub score_rel_err: f64,
    /// Heun error ratios per halving of the step count.
    pub heun_ratios: Vec<f64>,
    /// Max distance between a direct solve and a solve split at an
    /// intermediate time, both at the configured step count.
    pub semigroup_err: f64,
    /// W2 of oracle samples against data, and of data against data.
    pub marginal_w2: f64,
    pub baseline_w2: f64,
}

/// Runs the oracle self-checks with `points` random probes and `n` samples
/// for the marginal check.
pub fn oracle_check(
    data: &Dataset,
    cfg: &TrainConfig,
    points: usize,
    n: usize,
    seed: u64,
) -> Result<OracleReport> {
    use crate::oracle::{exact_score, log_density, pf_ode_solve};
    use rand::Rng;
    let spec = &cfg.noise;
    let d = data.dim();
    let mut r = rng::stream(seed, "oracle_check.score", 0);
    let mut score_rel_err = 0.0f64;
    for _ in 0..points {
        let t = (spec.t_min.ln() + r.random::<f64>() * (spec.t_max / spec.t_min).ln()).exp();
        let x0 = data.sample(1, &mut r);
        let e = rng::normals(&mut r, d);
        let x: Vec<f64> = x0.row(0).iter().zip(&e).map(|(a, b)| a + t * b).collect();
        let g = exact_score(&x, t, data)?;
        let h = 1e-5 * t;
        let mut err = 0.0;
        for k in 0..d {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += h;
            xm[k] -= h;
            let fd = (log_density(&xp, t, data)? - log_density(&xm, t, data)?) / (2.0 * h);
            err += (g[k] - fd).powi(2);
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        score_rel_err = score_rel_err.max(err.sqrt() / norm.max(1e-300));
    }

    // Heun order on a smooth stretch of the flow.
    let mut r = rng::stream(seed, "oracle_check.heun", 0);
    let starts: Vec<Vec<f64>> = (0..8)
        .map(|_| {
            rng::normals(&mut r, d)
                .into_iter()
                .map(|v| 5.0 * v)
                .collect()
        })
        .collect();
    let (t0, t1) = (5.0, 1.0);
    let err_at = |steps: usize| -> Result<f64> {
        let mut total = 0.0;
        for x in &starts {
            let fine = pf_ode_solve(x, t0, t1, 4096, data, cfg.oracle_grid)?;
            let coarse = pf_ode_solve(x, t0, t1, steps, data, cfg.oracle_grid)?;
            total += coarse
                .iter()
                .zip(&fine)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
        }
        Ok(total)
    };
    let errs = [8, 16, 32, 64]
        .iter()
        .map(|&s| err_at(s))
        .collect::<Result<Vec<_>>>()?;
    let heun_ratios = errs.windows(2).map(|w| w[0] / w[1]).collect();

    let mut semigroup_err = 0.0f64;
    let steps = cfg.oracle_steps;
    for (k, x) in starts.iter().enumerate() {
        let x: Vec<f64> = x.iter().map(|v| v * spec.t_max / 5.0).collect();
        let t_mid = [0.5, 1.0, 2.0, 5.0][k % 4];
        let direct = pf_ode_solve(&x, spec.t_max, spec.t_min, steps, data, cfg.oracle_grid)?;
        let half = pf_ode_solve(&x, spec.t_max, t_mid, steps, data, cfg.oracle_grid)?;
        let split = pf_ode_solve(&half, t_mid, spec.t_min, steps, data, cfg.oracle_grid)?;
        let e = direct
            .iter()
            .zip(&split)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        semigroup_err = semigroup_err.max(e);
    }

    let o = OracleConsistency {
        data,
        spec: *spec,
        steps,
        grid: cfg.oracle_grid,
    };
    let gen = metrics::sample_onestep(
        &o,
        n,
        &mut rng::stream(seed, "oracle_check.marginal", 0),
        spec,
    )?;
    let mut rr = rng::stream(seed, "oracle_check.reference", 0);
    let reference = data.sample(n, &mut rr);
    let other = data.sample(n, &mut rr);
    Ok(OracleReport {
        score_rel_err,
        heun_ratios,
        semigroup_err,
        marginal_w2: metrics::w2(&gen, &reference)?,
        baseline_w2: metrics::w2(&other, &reference)?,
    })
}
