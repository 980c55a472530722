//! The two training stages.
//!
//! Every iteration draws its batch, noise and times from its own named stream
//! `(seed, "stageN.step", iteration)`, so a run is bit-reproducible and any
//! iteration can be replayed in isolation.

use std::io::Write;
use std::time::Instant;

use crate::autodiff::{Array, Tape};
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{init_params, CmParams, ParamVars};
use crate::rng;
use crate::schedule::{delta_t, sample_lognormal, split_batch};
use crate::train::loss::{ct_pair_loss_on, tcm_step_loss_on, TcmBatch};
use crate::train::optim::{Adam, Ema};

pub const LOG_HEADER: &str = "iter,wall_s,loss,loss_boundary,loss_consistency,grad_norm,lr,r";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub wall_s: f64,
    pub loss: f64,
    /// Zero in the first stage.
    pub loss_boundary: f64,
    pub loss_consistency: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub r: f64,
}

pub fn write_log_csv(rows: &[LogRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iter, r.wall_s, r.loss, r.loss_boundary, r.loss_consistency, r.grad_norm, r.lr, r.r
        )?;
    }
    Ok(())
}

/// Weights captured during a run.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub iteration: u64,
    pub raw: CmParams,
    pub ema: CmParams,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub raw: CmParams,
    pub ema: CmParams,
    /// The first-stage weights the second stage was anchored to.
    pub frozen: Option<CmParams>,
    pub iterations: u64,
    pub log: Vec<LogRow>,
    /// Every `ckpt.every` iterations and at the end.
    pub snapshots: Vec<Snapshot>,
}

/// Aborts on a non-finite loss or a run of oversized gradients.
struct Guard {
    ceiling: f64,
    patience: u32,
    streak: u32,
}

impl Guard {
    fn check(&mut self, iteration: u64, loss: f64, grad_norm: f64) -> Result<()> {
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Divergence {
                iteration,
                reason: format!("loss {loss}, gradient norm {grad_norm}"),
            });
        }
        if grad_norm > self.ceiling {
            self.streak += 1;
            if self.streak >= self.patience {
                return Err(Error::Divergence {
                    iteration,
                    reason: format!(
                        "gradient norm above {} for {} consecutive steps (last {grad_norm})",
                        self.ceiling, self.streak
                    ),
                });
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

fn grads_of(tape: &Tape, root: crate::autodiff::Var, pv: &ParamVars) -> Result<(Vec<Array>, f64)> {
    let g = tape.backward(root)?;
    let grads: Vec<Array> = pv.vars().into_iter().map(|v| g.wrt(v).clone()).collect();
    let norm = grads
        .iter()
        .map(|a| a.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    Ok((grads, norm))
}

fn check_data(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.dim() != cfg.arch.dim {
        return Err(Error::Compatibility(format!(
            "dataset has d={}, config has data.d={}",
            data.dim(),
            cfg.arch.dim
        )));
    }
    if data.sigma_data() != cfg.noise.sigma_data {
        return Err(Error::Compatibility(format!(
            "dataset σ_data={} but config noise.sigma_data={}",
            data.sigma_data(),
            cfg.noise.sigma_data
        )));
    }
    Ok(())
}

struct Run {
    start: Instant,
    wall_clock: bool,
    log_every: u64,
    ckpt_every: u64,
    iters: u64,
    log: Vec<LogRow>,
    snapshots: Vec<Snapshot>,
}

impl Run {
    fn new(cfg: &TrainConfig, iters: u64) -> Self {
        Run {
            start: Instant::now(),
            wall_clock: cfg.log_wall_clock,
            log_every: cfg.log_every,
            ckpt_every: cfg.ckpt_every,
            iters,
            log: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        it: u64,
        losses: (f64, f64, f64),
        grad_norm: f64,
        lr: f64,
        r: f64,
        raw: &CmParams,
        ema: &CmParams,
        on_log: &mut dyn FnMut(&LogRow),
    ) {
        if it.is_multiple_of(self.log_every) || it == self.iters {
            let row = LogRow {
                iter: it,
                wall_s: if self.wall_clock {
                    self.start.elapsed().as_secs_f64()
                } else {
                    0.0
                },
                loss: losses.0,
                loss_boundary: losses.1,
                loss_consistency: losses.2,
                grad_norm,
                lr,
                r,
            };
            on_log(&row);
            self.log.push(row);
        }
        if it.is_multiple_of(self.ckpt_every) || it == self.iters {
            self.snapshots.push(Snapshot {
                iteration: it,
                raw: raw.clone(),
                ema: ema.clone(),
            });
        }
    }
}

/// Plain consistency training from a fresh initialisation.
pub fn train_stage1(
    cfg: &TrainConfig,
    data: &Dataset,
    on_log: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutput> {
    check_data(cfg, data)?;
    let mut params = init_params(cfg.seed, &cfg.arch, cfg.coeff())?;
    let mut ema = Ema::new(&params, cfg.ema_beta);
    let mut opt = Adam::new(&params, cfg.stage1_lr());
    let mut guard = Guard {
        ceiling: cfg.grad_ceiling,
        patience: cfg.patience,
        streak: 0,
    };
    let loss_cfg = cfg.loss_config();
    let profile = cfg.stage1_profile();
    let (t_min, t_max) = (cfg.noise.t_min, cfg.noise.t_max);
    let batch = cfg.stage1.batch;
    let d = data.dim();
    let mut run = Run::new(cfg, cfg.stage1.iters);

    for it in 1..=cfg.stage1.iters {
        let mut rng = rng::stream(cfg.seed, "stage1.step", it);
        let x = data.sample(batch, &mut rng);
        let eps = Array::matrix(batch, d, rng::normals(&mut rng, batch * d))?;
        // Floor at 2·t_min so that Δt = min(·, t − t_min) stays positive.
        let t = sample_lognormal(
            cfg.stage1.time_mu,
            cfg.stage1.time_sigma,
            batch,
            2.0 * t_min,
            t_max,
            &mut rng,
        );
        let r = profile.r_at(it);
        let dt: Vec<f64> = t.iter().map(|&ti| delta_t(ti, r, t_min)).collect();

        let mut tape = Tape::new();
        let pv = params.register(&mut tape);
        let root = ct_pair_loss_on(
            &mut tape, &params, &pv, &pv, &x, &eps, &t, &dt, &loss_cfg, t_min,
        )?;
        let loss = tape.value(root).item();
        let (grads, norm) = grads_of(&tape, root, &pv)?;
        guard.check(it, loss, norm)?;
        let lr = opt.update(&mut params, &grads)?;
        ema.update(&params);
        run.record(
            it,
            (loss, 0.0, loss),
            norm,
            lr,
            r,
            &params,
            &ema.shadow,
            on_log,
        );
    }
    Ok(TrainOutput {
        raw: params,
        ema: ema.shadow,
        frozen: None,
        iterations: cfg.stage1.iters,
        log: run.log,
        snapshots: run.snapshots,
    })
}

/// Draws one truncated-training batch for `iteration`.
pub fn stage2_batch(cfg: &TrainConfig, data: &Dataset, iteration: u64) -> Result<TcmBatch> {
    let (t_min, t_max) = (cfg.noise.t_min, cfg.noise.t_max);
    let batch = cfg.stage2.batch;
    let d = data.dim();
    let (nb, nc) = split_batch(batch, cfg.rho)?;
    let mut rng = rng::stream(cfg.seed, "stage2.step", iteration);
    let x = data.sample(batch, &mut rng);
    let eps = Array::matrix(batch, d, rng::normals(&mut rng, batch * d))?;
    let t_c = cfg.stage2_sampler().sample(nc, t_min, t_max, &mut rng)?;
    let r = cfg.stage2_profile().r_at(iteration);
    let t_prime = cfg.time.t_prime;
    Ok(TcmBatch {
        x_b: x.slice_rows(0, nb),
        eps_b: eps.slice_rows(0, nb),
        x_c: x.slice_rows(nb, batch),
        eps_c: eps.slice_rows(nb, batch),
        dt_c: t_c.iter().map(|&t| delta_t(t, r, t_min)).collect(),
        t_c,
        t_prime,
        dt_prime: delta_t(t_prime, r, t_min),
    })
}

/// Truncated training: student, EMA and frozen anchor all start from `init`.
pub fn train_stage2(
    cfg: &TrainConfig,
    data: &Dataset,
    init: &CmParams,
    on_log: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutput> {
    check_data(cfg, data)?;
    if init.arch != cfg.arch || init.coeff != cfg.coeff() {
        return Err(Error::Compatibility(
            "first-stage checkpoint does not match the configured architecture".into(),
        ));
    }
    let frozen = init.clone();
    let mut params = init.clone();
    let mut ema = Ema::new(&params, cfg.ema_beta);
    let mut opt = Adam::new(&params, cfg.stage2_lr());
    let mut guard = Guard {
        ceiling: cfg.grad_ceiling,
        patience: cfg.patience,
        streak: 0,
    };
    let loss_cfg = cfg.loss_config();
    let r = cfg.stage2_profile().r_at(1);
    let mut run = Run::new(cfg, cfg.stage2.iters);

    for it in 1..=cfg.stage2.iters {
        let batch = stage2_batch(cfg, data, it)?;
        let mut tape = Tape::new();
        let pv = params.register(&mut tape);
        let fv = frozen.register_const(&mut tape);
        let loss = tcm_step_loss_on(
            &mut tape,
            &params,
            &pv,
            &pv,
            &fv,
            &batch,
            &loss_cfg,
            cfg.noise.t_min,
        )?;
        let values = (
            tape.value(loss.total).item(),
            tape.value(loss.boundary).item(),
            tape.value(loss.consistency).item(),
        );
        let (grads, norm) = grads_of(&tape, loss.total, &pv)?;
        guard.check(it, values.0, norm)?;
        let lr = opt.update(&mut params, &grads)?;
        ema.update(&params);
        run.record(it, values, norm, lr, r, &params, &ema.shadow, on_log);
    }
    Ok(TrainOutput {
        raw: params,
        ema: ema.shadow,
        frozen: Some(frozen),
        iterations: cfg.stage2.iters,
        log: run.log,
        snapshots: run.snapshots,
    })
}
