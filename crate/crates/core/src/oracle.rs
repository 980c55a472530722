//! Ground truth for a finite dataset under the variance-exploding process
//! `x_t = x + t ε`.
//!
//! The perturbed marginal is an equal-weight Gaussian mixture centred on the
//! data points with covariance `t² I`, so its log-density, score, posterior
//! mean and probability-flow trajectories are all available in closed form
//! or to solver precision.

use rayon::prelude::*;

use crate::autodiff::Array;
use crate::data::{Dataset, NoiseSpec};
use crate::error::{Error, Result};
use crate::net::ConsistencyFn;

/// Node placement for the probability-flow solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OdeGrid {
    /// Ratio-uniform spacing between the end times.
    Geometric,
    /// Polynomial spacing `(a^{1/ρ} + s (b^{1/ρ} - a^{1/ρ}))^ρ`.
    Edm { rho: f64 },
}

impl OdeGrid {
    pub fn nodes(self, t_start: f64, t_end: f64, steps: usize) -> Vec<f64> {
        let mut ts: Vec<f64> = (0..=steps)
            .map(|i| {
                let s = i as f64 / steps as f64;
                match self {
                    OdeGrid::Geometric => (t_start.ln() + s * (t_end.ln() - t_start.ln())).exp(),
                    OdeGrid::Edm { rho } => {
                        let (a, b) = (t_start.powf(1.0 / rho), t_end.powf(1.0 / rho));
                        (a + s * (b - a)).powf(rho)
                    }
                }
            })
            .collect();
        ts[0] = t_start;
        ts[steps] = t_end;
        ts
    }
}

pub fn perturb(x: &[f64], t: f64, eps: &[f64]) -> Vec<f64> {
    x.iter().zip(eps).map(|(a, e)| a + t * e).collect()
}

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "noise level must be positive, got {t}"
        )))
    }
}

/// Softmax posterior over the data points: returns `(E[x0 | x], log Σ exp)`.
fn posterior(x: &[f64], t: f64, data: &Dataset) -> (Vec<f64>, f64) {
    let pts = data.points();
    let inv = 1.0 / (2.0 * t * t);
    let logits: Vec<f64> = (0..pts.rows())
        .map(|i| {
            -pts.row(i)
                .iter()
                .zip(x)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                * inv
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut mean = vec![0.0; x.len()];
    for (i, l) in logits.iter().enumerate() {
        let w = (l - max).exp();
        z += w;
        for (m, p) in mean.iter_mut().zip(pts.row(i)) {
            *m += w * p;
        }
    }
    mean.iter_mut().for_each(|m| *m /= z);
    (mean, max + z.ln())
}

/// `log p_t(x)` for the empirical mixture, log-sum-exp stabilised.
pub fn log_density(x: &[f64], t: f64, data: &Dataset) -> Result<f64> {
    check_time(t)?;
    let d = x.len() as f64;
    let (_, lse) = posterior(x, t, data);
    Ok(lse - (data.len() as f64).ln() - 0.5 * d * (2.0 * std::f64::consts::PI * t * t).ln())
}

/// `∇ₓ log p_t(x) = (E[x0 | x] - x) / t²`.
pub fn exact_score(x: &[f64], t: f64, data: &Dataset) -> Result<Vec<f64>> {
    check_time(t)?;
    let (mean, _) = posterior(x, t, data);
    Ok(mean.iter().zip(x).map(|(m, q)| (m - q) / (t * t)).collect())
}

/// Posterior mean `E[x0 | x_t]`, i.e. `x_t + t² · score`.
pub fn oracle_denoise(x_t: &[f64], t: f64, data: &Dataset) -> Result<Vec<f64>> {
    check_time(t)?;
    Ok(posterior(x_t, t, data).0)
}

/// Row-parallel [`oracle_denoise`].
pub fn denoise_batch(x: &Array, t: f64, data: &Dataset) -> Result<Array> {
    check_time(t)?;
    let d = x.cols();
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .into_par_iter()
        .map(|i| posterior(x.row(i), t, data).0)
        .collect();
    Array::matrix(x.rows(), d, rows.concat())
}

/// Row-parallel [`exact_score`] with a per-row time.
pub fn score_batch(x: &Array, t: &[f64], data: &Dataset) -> Result<Array> {
    for &ti in t {
        check_time(ti)?;
    }
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let (m, _) = posterior(x.row(i), t[i], data);
            m.iter()
                .zip(x.row(i))
                .map(|(a, b)| (a - b) / (t[i] * t[i]))
                .collect()
        })
        .collect();
    Array::matrix(x.rows(), x.cols(), rows.concat())
}

/// Heun integration of `dx/dt = -t s_t(x) = (x - E[x0|x]) / t` from
/// `t_start` down to `t_end`.
pub fn pf_ode_solve(
    x_start: &[f64],
    t_start: f64,
    t_end: f64,
    steps: usize,
    data: &Dataset,
    grid: OdeGrid,
) -> Result<Vec<f64>> {
    check_time(t_end)?;
    if steps == 0 {
        return Err(Error::Contract("ODE solve needs at least one step".into()));
    }
    if t_start < t_end {
        return Err(Error::Contract(format!(
            "ODE runs backwards in time: {t_start} < {t_end}"
        )));
    }
    let mut x = x_start.to_vec();
    if t_start == t_end {
        return Ok(x);
    }
    let drift = |x: &[f64], t: f64| -> Vec<f64> {
        let (m, _) = posterior(x, t, data);
        x.iter().zip(&m).map(|(a, b)| (a - b) / t).collect()
    };
    let ts = grid.nodes(t_start, t_end, steps);
    for (i, w) in ts.windows(2).enumerate() {
        let (t0, t1) = (w[0], w[1]);
        let h = t1 - t0;
        let d0 = drift(&x, t0);
        let xe: Vec<f64> = x.iter().zip(&d0).map(|(a, b)| a + h * b).collect();
        let d1 = drift(&xe, t1);
        for ((xi, a), b) in x.iter_mut().zip(&d0).zip(&d1) {
            *xi += 0.5 * h * (a + b);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "ODE state became non-finite at step {i} (t = {t1})"
            )));
        }
    }
    Ok(x)
}

/// Row-parallel [`pf_ode_solve`].
pub fn pf_ode_solve_batch(
    x: &Array,
    t_start: f64,
    t_end: f64,
    steps: usize,
    data: &Dataset,
    grid: OdeGrid,
) -> Result<Array> {
    let rows: Result<Vec<Vec<f64>>> = (0..x.rows())
        .into_par_iter()
        .map(|i| pf_ode_solve(x.row(i), t_start, t_end, steps, data, grid))
        .collect();
    Array::matrix(x.rows(), x.cols(), rows?.concat())
}

/// The true consistency function: the ODE endpoint at `t_min`.
pub fn oracle_endpoint(
    x_t: &[f64],
    t: f64,
    data: &Dataset,
    steps: usize,
    spec: &NoiseSpec,
    grid: OdeGrid,
) -> Result<Vec<f64>> {
    if t < spec.t_min {
        return Err(Error::Domain(format!(
            "time {t} is below t_min = {}",
            spec.t_min
        )));
    }
    if t == spec.t_min {
        return Ok(x_t.to_vec());
    }
    pf_ode_solve(x_t, t, spec.t_min, steps, data, grid)
}

/// The exact consistency function packaged as a model, for metric self-tests.
#[derive(Clone, Debug)]
pub struct OracleConsistency<'a> {
    pub data: &'a Dataset,
    pub spec: NoiseSpec,
    pub steps: usize,
    pub grid: OdeGrid,
}

impl ConsistencyFn for OracleConsistency<'_> {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn eval(&self, x: &Array, t: &[f64]) -> Result<Array> {
        let rows: Result<Vec<Vec<f64>>> = (0..x.rows())
            .into_par_iter()
            .map(|i| {
                oracle_endpoint(
                    x.row(i),
                    t[i].max(self.spec.t_min),
                    self.data,
                    self.steps,
                    &self.spec,
                    self.grid,
                )
            })
            .collect();
        Array::matrix(x.rows(), x.cols(), rows?.concat())
    }
}
