//! Consistency, distillation, boundary and truncated losses.
//!
//! Each taped loss takes the model (for architecture and coefficients) and
//! separate `ParamVars` for the student and teacher sides. The teacher side is
//! always wrapped in a gradient barrier here, so callers may pass the student's
//! own vars to get the usual `θ⁻ = stopgrad(θ)` teacher.

use crate::autodiff::{Array, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{CmParams, ConsistencyFn, ParamVars};
use crate::oracle;

/// Per-sample weight `ω(t)` in front of the distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    Unit,
    /// `Δt / c_out(t)²`.
    DeltaOverCout2,
}

impl Weighting {
    pub fn name(self) -> &'static str {
        match self {
            Weighting::Unit => "unit",
            Weighting::DeltaOverCout2 => "dt-over-cout2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unit" => Some(Weighting::Unit),
            "dt-over-cout2" => Some(Weighting::DeltaOverCout2),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Pseudo-Huber constant.
    pub c: f64,
    pub weighting: Weighting,
    pub w_b: f64,
    pub rho: f64,
}

impl LossConfig {
    /// Defaults for dimension `d`: `c = 0.03·√d`, unit weighting, `w_b = 0.1`, `ρ = 0.25`.
    pub fn for_dim(d: usize) -> Self {
        LossConfig {
            c: 0.03 * (d as f64).sqrt(),
            weighting: Weighting::Unit,
            w_b: 0.1,
            rho: 0.25,
        }
    }

    /// Prefactor `ω(t)/Δt` for one sample.
    pub fn prefactor(&self, model: &CmParams, t: f64, dt: f64) -> f64 {
        match self.weighting {
            Weighting::Unit => 1.0 / dt,
            Weighting::DeltaOverCout2 => {
                let c = model.coeff.c_out(t);
                1.0 / (c * c)
            }
        }
    }
}

/// `√(‖a−b‖² + c²) − c` per row.
pub fn pseudo_huber(a: &Array, b: &Array, c: f64) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "pseudo-Huber of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((0..a.rows())
        .map(|i| {
            let s: f64 = a
                .row(i)
                .iter()
                .zip(b.row(i))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            (s + c * c).sqrt() - c
        })
        .collect())
}

/// Taped pseudo-Huber, `[B, 1]`.
pub fn pseudo_huber_on(tape: &mut Tape, a: Var, b: Var, c: f64) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.row_sum(sq);
    let s = tape.add_scalar(s, c * c);
    let r = tape.sqrt(s)?;
    Ok(tape.add_scalar(r, -c))
}

fn check_teacher_times(t: &[f64], dt: &[f64], t_min: f64) -> Result<()> {
    if t.len() != dt.len() {
        return Err(Error::dim(format!(
            "{} times but {} gaps",
            t.len(),
            dt.len()
        )));
    }
    for (&ti, &di) in t.iter().zip(dt) {
        if di.is_nan() || di <= 0.0 || ti - di < t_min {
            return Err(Error::Schedule(format!(
                "teacher time {ti} − {di} falls below t_min = {t_min}"
            )));
        }
    }
    Ok(())
}

/// Rows `x_i + s_i ε_i`.
pub fn perturb_rows(x: &Array, eps: &Array, s: &[f64]) -> Result<Array> {
    if x.shape() != eps.shape() || x.rows() != s.len() {
        return Err(Error::dim(format!(
            "perturb {:?} by {:?} at {} times",
            x.shape(),
            eps.shape(),
            s.len()
        )));
    }
    let d = x.cols();
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(k, (xi, ei))| xi + s[k / d] * ei)
        .collect();
    Array::matrix(x.rows(), d, data)
}

/// `mean_i w_i · d(f_student(a_i, t_i), stopgrad f_teacher(b_i, s_i))`.
#[allow(clippy::too_many_arguments)]
fn pair_term(
    tape: &mut Tape,
    model: &CmParams,
    student: &ParamVars,
    teacher: &ParamVars,
    a: Array,
    t: &[f64],
    b: Array,
    s: &[f64],
    weights: Vec<f64>,
    c: f64,
) -> Result<Var> {
    let teacher = teacher.stop_grad(tape);
    let av = tape.constant(a);
    let bv = tape.constant(b);
    let fs = model.cm_forward_on(tape, student, av, t)?;
    let ft = model.cm_forward_on(tape, &teacher, bv, s)?;
    let d = pseudo_huber_on(tape, fs, ft, c)?;
    let w = tape.constant(Array::column(weights));
    let wd = tape.mul(w, d)?;
    tape.mean(wd)
}

/// Consistency-training loss on clean rows `x` with noise `eps`.
#[allow(clippy::too_many_arguments)]
pub fn ct_pair_loss_on(
    tape: &mut Tape,
    model: &CmParams,
    student: &ParamVars,
    teacher: &ParamVars,
    x: &Array,
    eps: &Array,
    t: &[f64],
    dt: &[f64],
    cfg: &LossConfig,
    t_min: f64,
) -> Result<Var> {
    check_teacher_times(t, dt, t_min)?;
    let s: Vec<f64> = t.iter().zip(dt).map(|(a, b)| a - b).collect();
    let a = perturb_rows(x, eps, t)?;
    let b = perturb_rows(x, eps, &s)?;
    let w = t
        .iter()
        .zip(dt)
        .map(|(&ti, &di)| cfg.prefactor(model, ti, di))
        .collect();
    pair_term(tape, model, student, teacher, a, t, b, &s, w, cfg.c)
}

/// Consistency-distillation loss: the teacher input is one Euler step of the
/// exact probability-flow ODE, `x_t + t·∇log p_t(x_t)·Δt`.
#[allow(clippy::too_many_arguments)]
pub fn cd_pair_loss_on(
    tape: &mut Tape,
    model: &CmParams,
    student: &ParamVars,
    teacher: &ParamVars,
    x_t: &Array,
    t: &[f64],
    dt: &[f64],
    data: &Dataset,
    cfg: &LossConfig,
    t_min: f64,
) -> Result<Var> {
    check_teacher_times(t, dt, t_min)?;
    let score = oracle::score_batch(x_t, t, data)?;
    let step: Vec<f64> = t.iter().zip(dt).map(|(a, b)| a * b).collect();
    let b = perturb_rows(x_t, &score, &step)?;
    let s: Vec<f64> = t.iter().zip(dt).map(|(a, b)| a - b).collect();
    let w = t
        .iter()
        .zip(dt)
        .map(|(&ti, &di)| cfg.prefactor(model, ti, di))
        .collect();
    pair_term(
        tape,
        model,
        student,
        teacher,
        x_t.clone(),
        t,
        b,
        &s,
        w,
        cfg.c,
    )
}

/// Boundary loss at the dividing time against the frozen first-stage model.
#[allow(clippy::too_many_arguments)]
pub fn boundary_loss_on(
    tape: &mut Tape,
    model: &CmParams,
    student: &ParamVars,
    frozen: &ParamVars,
    x: &Array,
    eps: &Array,
    t_prime: f64,
    dt_prime: f64,
    cfg: &LossConfig,
    t_min: f64,
) -> Result<Var> {
    let n = x.rows();
    ct_pair_loss_on(
        tape,
        model,
        student,
        frozen,
        x,
        eps,
        &vec![t_prime; n],
        &vec![dt_prime; n],
        cfg,
        t_min,
    )
}

/// One truncated-training batch, already split into boundary and consistency rows.
#[derive(Clone, Debug)]
pub struct TcmBatch {
    pub x_b: Array,
    pub eps_b: Array,
    pub x_c: Array,
    pub eps_c: Array,
    /// Consistency times, all above `t'`.
    pub t_c: Vec<f64>,
    pub dt_c: Vec<f64>,
    pub t_prime: f64,
    pub dt_prime: f64,
}

pub struct TcmLoss {
    pub total: Var,
    pub boundary: Var,
    pub consistency: Var,
}

/// `w_b·L_B(θ, θ₀) + L_C(θ, θ⁻)`; training passes the student's own vars as
/// `teacher`, giving `θ⁻ = stopgrad θ`.
#[allow(clippy::too_many_arguments)]
pub fn tcm_step_loss_on(
    tape: &mut Tape,
    model: &CmParams,
    student: &ParamVars,
    teacher: &ParamVars,
    frozen: &ParamVars,
    batch: &TcmBatch,
    cfg: &LossConfig,
    t_min: f64,
) -> Result<TcmLoss> {
    if let Some(&bad) = batch.t_c.iter().find(|&&t| t <= batch.t_prime) {
        return Err(Error::Contract(format!(
            "consistency time {bad} not above t' = {}",
            batch.t_prime
        )));
    }
    let boundary = boundary_loss_on(
        tape,
        model,
        student,
        frozen,
        &batch.x_b,
        &batch.eps_b,
        batch.t_prime,
        batch.dt_prime,
        cfg,
        t_min,
    )?;
    let consistency = ct_pair_loss_on(
        tape,
        model,
        student,
        teacher,
        &batch.x_c,
        &batch.eps_c,
        &batch.t_c,
        &batch.dt_c,
        cfg,
        t_min,
    )?;
    let wb = tape.scale(boundary, cfg.w_b);
    let total = tape.add(wb, consistency)?;
    Ok(TcmLoss {
        total,
        boundary,
        consistency,
    })
}

/// Value and flattened student gradient of a loss built on a fresh tape.
pub fn value_and_grad(
    student: &CmParams,
    build: impl FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let pv = student.register(&mut tape);
    let root = build(&mut tape, &pv)?;
    let grads = tape.backward(root)?;
    let flat = pv
        .vars()
        .into_iter()
        .flat_map(|v| grads.wrt(v).data().to_vec())
        .collect();
    Ok((tape.value(root).item(), flat))
}

/// Untaped consistency loss between any two consistency functions.
#[allow(clippy::too_many_arguments)]
pub fn ct_pair_loss_value(
    student: &dyn ConsistencyFn,
    teacher: &dyn ConsistencyFn,
    x: &Array,
    eps: &Array,
    t: &[f64],
    dt: &[f64],
    cfg: &LossConfig,
    t_min: f64,
    coeff: crate::net::CoeffSpec,
) -> Result<f64> {
    check_teacher_times(t, dt, t_min)?;
    let s: Vec<f64> = t.iter().zip(dt).map(|(a, b)| a - b).collect();
    let fs = student.eval(&perturb_rows(x, eps, t)?, t)?;
    let ft = teacher.eval(&perturb_rows(x, eps, &s)?, &s)?;
    let d = pseudo_huber(&fs, &ft, cfg.c)?;
    let total: f64 = d
        .iter()
        .zip(t.iter().zip(dt))
        .map(|(di, (&ti, &dti))| {
            let w = match cfg.weighting {
                Weighting::Unit => 1.0 / dti,
                Weighting::DeltaOverCout2 => 1.0 / coeff.c_out(ti).powi(2),
            };
            w * di
        })
        .sum();
    Ok(total / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::net::{init_params, random_head, Arch, CoeffSpec};
    use crate::rng;

    fn arch() -> Arch {
        Arch {
            dim: 2,
            hidden: vec![8, 8],
            fourier: 4,
            fourier_scale: 1.0,
        }
    }

    fn cfg() -> LossConfig {
        LossConfig::for_dim(2)
    }

    fn batch(seed: u64, n: usize) -> (Array, Array, Vec<f64>) {
        let mut r = rng::stream(seed, "test", 0);
        let x = Array::matrix(n, 2, rng::normals(&mut r, 2 * n))
            .unwrap()
            .map(|v| 0.5 * v);
        let e = Array::matrix(n, 2, rng::normals(&mut r, 2 * n)).unwrap();
        let t = (0..n).map(|i| 0.05 + 3.0 * i as f64 / n as f64).collect();
        (x, e, t)
    }

    #[test]
    fn pseudo_huber_cases() {
        let a = Array::from_rows(&[[3.0, 4.0], [1.0, 1.0]]).unwrap();
        let b = Array::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert_eq!(pseudo_huber(&a, &b, 0.0).unwrap(), vec![5.0, 0.0]);
        assert_eq!(pseudo_huber(&a, &a, 0.7).unwrap(), vec![0.0, 0.0]);
        let mut tape = Tape::new();
        let av = tape.param(a.clone());
        let bv = tape.constant(a);
        let d = pseudo_huber_on(&mut tape, av, bv, 0.1).unwrap();
        let s = tape.sum(d);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(av).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ct_gradient_matches_finite_differences() {
        let model = random_head(11, &arch());
        let (x, e, t) = batch(1, 6);
        let dt: Vec<f64> = t
            .iter()
            .map(|&ti| crate::schedule::delta_t(ti, 0.9, 0.002))
            .collect();
        let f = |p: &[f64]| {
            let student = model.unflatten(p)?;
            value_and_grad(&student, |tape, pv| {
                let teacher = model.register_const(tape);
                ct_pair_loss_on(tape, &student, pv, &teacher, &x, &e, &t, &dt, &cfg(), 0.002)
            })
        };
        let err = grad_check(f, &model.flatten(), 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn teacher_path_gets_no_gradient() {
        let model = random_head(12, &arch());
        let (x, e, t) = batch(2, 5);
        let dt: Vec<f64> = t
            .iter()
            .map(|&ti| crate::schedule::delta_t(ti, 0.9, 0.002))
            .collect();
        let mut tape = Tape::new();
        let s = model.register(&mut tape);
        let th = model.register(&mut tape);
        let l =
            ct_pair_loss_on(&mut tape, &model, &s, &th, &x, &e, &t, &dt, &cfg(), 0.002).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(th
            .vars()
            .iter()
            .all(|&v| g.wrt(v).data().iter().all(|&x| x == 0.0)));
        assert!(s
            .vars()
            .iter()
            .any(|&v| g.wrt(v).data().iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn schedule_violation_is_rejected() {
        let model = init_params(1, &arch(), CoeffSpec { sigma_data: 0.5 }).unwrap();
        let (x, e, _) = batch(3, 2);
        let mut tape = Tape::new();
        let s = model.register(&mut tape);
        let r = ct_pair_loss_on(
            &mut tape,
            &model,
            &s,
            &s,
            &x,
            &e,
            &[1.0, 1.0],
            &[0.5, 0.999],
            &cfg(),
            0.002,
        );
        assert!(matches!(r, Err(Error::Schedule(_))));
    }

    #[test]
    fn ct_loss_vanishes_with_dt() {
        let model = random_head(13, &arch());
        let (x, e, _) = batch(4, 64);
        let t = vec![1.5; 64];
        let loss = |frac: f64| {
            let dt = vec![frac * 1.5; 64];
            let mut tape = Tape::new();
            let s = model.register_const(&mut tape);
            let v =
                ct_pair_loss_on(&mut tape, &model, &s, &s, &x, &e, &t, &dt, &cfg(), 0.002).unwrap();
            tape.value(v).item()
        };
        let (a, b) = (loss(1e-2), loss(1e-3));
        assert!(a.is_finite() && b.is_finite() && b < a, "{a} {b}");
        // Quadratic regime of the pseudo-Huber: ω/Δt · O(Δt²) shrinks linearly.
        assert!((a / b - 10.0).abs() < 1.5, "ratio {}", a / b);
    }
}
