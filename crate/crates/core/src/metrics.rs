//! Samplers and the evaluation suite.
//!
//! Divergences are 2-Wasserstein distances between point clouds. Up to
//! [`EXACT_LIMIT`] points the optimal assignment is solved exactly; above it a
//! sliced estimate over [`PROJECTIONS`] fixed directions is used, rescaled by
//! `√d` so that it matches the exact value for shifted and rescaled clouds.
//!
//! Every metric draws from streams keyed by `(seed, metric label, grid index)`
//! and never by checkpoint, so a checkpoint series is compared under common
//! random numbers.

use std::io::Write;

use rand::Rng;

use crate::autodiff::Array;
use crate::data::{nearest_center, Dataset, NoiseSpec};
use crate::error::{Error, Result};
use crate::net::ConsistencyFn;
use crate::oracle::{oracle_endpoint, OdeGrid};
use crate::rng;

pub const EXACT_LIMIT: usize = 512;
pub const PROJECTIONS: usize = 64;
const PROJECTION_SEED: u64 = 0x5eed_51ce;

/// Minimum share of samples a mode needs to count as covered.
pub const MODE_THRESHOLD: f64 = 0.02;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum-cost perfect assignment (Hungarian method with potentials).
/// Returns `assign[row] = col`.
pub fn optimal_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    // 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// Exact `W2` between equal-size clouds.
pub fn w2_exact(a: &Array, b: &Array) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Contract(format!(
            "exact W2 needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::Contract("W2 of empty point sets".into()));
    }
    let mut cost = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            cost.push(sq_dist(a.row(i), b.row(j)));
        }
    }
    let assign = optimal_assignment(&cost, n);
    let total: f64 = assign
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok((total / n as f64).sqrt())
}

/// 1-D `W2²` between empirical quantile functions.
fn w2_1d_sq(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    // Merge the breakpoints of both step quantile functions.
    let (mut i, mut j, mut pos, mut total) = (0, 0, 0.0f64, 0.0);
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - pos) * (a[i] - b[j]).powi(2);
        pos = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// Sliced estimate `√d · √(mean_θ W2²(θ·a, θ·b))`; sizes may differ.
pub fn w2_sliced(a: &Array, b: &Array) -> Result<f64> {
    if a.cols() != b.cols() || a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Contract(format!(
            "sliced W2 of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let d = a.cols();
    let mut r = rng::stream(PROJECTION_SEED, "w2.projections", d as u64);
    let mut acc = 0.0;
    for _ in 0..PROJECTIONS {
        let mut theta = rng::normals(&mut r, d);
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        theta.iter_mut().for_each(|v| *v /= norm);
        let proj = |x: &Array| {
            (0..x.rows())
                .map(|i| x.row(i).iter().zip(&theta).map(|(p, q)| p * q).sum())
                .collect()
        };
        acc += w2_1d_sq(proj(a), proj(b));
    }
    Ok((d as f64 * acc / PROJECTIONS as f64).sqrt())
}

/// Exact up to [`EXACT_LIMIT`] points (equal sizes required), sliced above.
pub fn w2(a: &Array, b: &Array) -> Result<f64> {
    if a.rows().max(b.rows()) <= EXACT_LIMIT {
        w2_exact(a, b)
    } else {
        w2_sliced(a, b)
    }
}

fn noise(n: usize, d: usize, rng: &mut impl Rng) -> Result<Array> {
    Array::matrix(n, d, rng::normals(rng, n * d))
}

/// `f(T·ε, T)`.
pub fn sample_onestep(
    model: &dyn ConsistencyFn,
    n: usize,
    rng: &mut impl Rng,
    spec: &NoiseSpec,
) -> Result<Array> {
    if n == 0 {
        return Err(Error::Contract("sample count must be positive".into()));
    }
    let x = noise(n, model.dim(), rng)?.map(|v| spec.t_max * v);
    model.eval(&x, &vec![spec.t_max; n])
}

/// One step from `T`, re-noise to `t_mid` with fresh noise, one more step.
pub fn sample_twostep(
    model: &dyn ConsistencyFn,
    n: usize,
    t_mid: f64,
    rng: &mut impl Rng,
    spec: &NoiseSpec,
) -> Result<Array> {
    if !(t_mid >= spec.t_min && t_mid < spec.t_max) {
        return Err(Error::Contract(format!(
            "t_mid = {t_mid} outside [{}, {})",
            spec.t_min, spec.t_max
        )));
    }
    let x0 = sample_onestep(model, n, rng, spec)?;
    let e = noise(n, model.dim(), rng)?;
    let x_mid = Array::matrix(
        n,
        model.dim(),
        x0.data()
            .iter()
            .zip(e.data())
            .map(|(a, b)| a + t_mid * b)
            .collect(),
    )?;
    model.eval(&x_mid, &vec![t_mid; n])
}

fn check_t(t: f64, spec: &NoiseSpec) -> Result<()> {
    if t >= spec.t_min && t <= spec.t_max {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "evaluation time {t} outside [{}, {}]",
            spec.t_min, spec.t_max
        )))
    }
}

/// `W2(f(x + tε, t), fresh clean points)`; at `t = T` the inputs are pure
/// noise and this is the generation divergence.
pub fn denoising_divergence(
    model: &dyn ConsistencyFn,
    t: f64,
    data: &Dataset,
    n: usize,
    rng: &mut impl Rng,
    spec: &NoiseSpec,
) -> Result<f64> {
    check_t(t, spec)?;
    let reference = data.sample(n, rng);
    let out = if t >= spec.t_max {
        sample_onestep(model, n, rng, spec)?
    } else {
        let x = data.sample(n, rng);
        let e = noise(n, data.dim(), rng)?;
        let xt = Array::matrix(
            n,
            data.dim(),
            x.data()
                .iter()
                .zip(e.data())
                .map(|(a, b)| a + t * b)
                .collect(),
        )?;
        model.eval(&xt, &vec![t; n])?
    };
    w2(&out, &reference)
}

/// Mean `‖f(x_t, t) − Φ(x_t, t)‖` against the exact probability-flow endpoint.
#[allow(clippy::too_many_arguments)]
pub fn oracle_gap(
    model: &dyn ConsistencyFn,
    t: f64,
    data: &Dataset,
    n: usize,
    rng: &mut impl Rng,
    steps: usize,
    spec: &NoiseSpec,
    grid: OdeGrid,
) -> Result<f64> {
    use rayon::prelude::*;
    check_t(t, spec)?;
    let x = data.sample(n, rng);
    let e = noise(n, data.dim(), rng)?;
    let xt = Array::matrix(
        n,
        data.dim(),
        x.data()
            .iter()
            .zip(e.data())
            .map(|(a, b)| a + t * b)
            .collect(),
    )?;
    let f = model.eval(&xt, &vec![t; n])?;
    let errs: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let target = oracle_endpoint(xt.row(i), t, data, steps, spec, grid)?;
            Ok(sq_dist(f.row(i), &target).sqrt())
        })
        .collect();
    Ok(errs?.iter().sum::<f64>() / n as f64)
}

/// Share of `points` nearest to each centre.
pub fn mode_fractions(points: &Array, centers: &Array) -> Vec<f64> {
    let mut counts = vec![0usize; centers.rows()];
    for k in nearest_center(points, centers) {
        counts[k] += 1;
    }
    counts
        .iter()
        .map(|&c| c as f64 / points.rows().max(1) as f64)
        .collect()
}

/// Number of modes holding at least [`MODE_THRESHOLD`] of the samples.
pub fn modes_covered(points: &Array, centers: &Array) -> usize {
    mode_fractions(points, centers)
        .iter()
        .filter(|&&f| f >= MODE_THRESHOLD)
        .count()
}

/// Total per-dimension variance of a cloud.
pub fn total_variance(points: &Array) -> f64 {
    let (n, d) = (points.rows(), points.cols());
    (0..d)
        .map(|k| {
            let mean = (0..n).map(|i| points.row(i)[k]).sum::<f64>() / n as f64;
            (0..n)
                .map(|i| (points.row(i)[k] - mean).powi(2))
                .sum::<f64>()
                / n as f64
        })
        .sum()
}

/// Collapse: lost modes, or output variance down more than 90% from a reference.
pub fn collapse_detected(
    covered: usize,
    modes: usize,
    variance: f64,
    reference_variance: f64,
) -> bool {
    covered < modes || variance < 0.1 * reference_variance
}

/// One row of the long-format report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub ckpt: String,
    pub iter: u64,
    pub t: f64,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

pub const REPORT_HEADER: &str = "ckpt,iter,t,metric,value,n,seed";

pub fn write_report(rows: &[ReportRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.ckpt, r.iter, r.t, r.metric, r.value, r.n, r.seed
        )?;
    }
    Ok(())
}

/// Per-checkpoint summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub iteration: u64,
    pub one_step_div: f64,
    pub two_step_div: f64,
    pub dfid_grid: Vec<(f64, f64)>,
    pub oracle_gap_grid: Vec<(f64, f64)>,
    pub sample_count: usize,
}

/// What to compute for a checkpoint.
#[derive(Clone, Debug)]
pub struct EvalPlan {
    pub n: usize,
    pub seed: u64,
    pub t_grid: Vec<f64>,
    pub t_mid: f64,
    /// Oracle-gap times and solver steps; empty skips the gap.
    pub gap_grid: Vec<f64>,
    pub gap_n: usize,
    pub gap_steps: usize,
    pub grid: OdeGrid,
}

pub fn one_step_divergence(
    model: &dyn ConsistencyFn,
    data: &Dataset,
    plan: &EvalPlan,
    spec: &NoiseSpec,
) -> Result<f64> {
    let mut r = rng::stream(plan.seed, "eval.onestep", 0);
    let x = sample_onestep(model, plan.n, &mut r, spec)?;
    let reference = data.sample(plan.n, &mut rng::stream(plan.seed, "eval.reference", 0));
    w2(&x, &reference)
}

pub fn two_step_divergence(
    model: &dyn ConsistencyFn,
    data: &Dataset,
    plan: &EvalPlan,
    spec: &NoiseSpec,
) -> Result<f64> {
    let mut r = rng::stream(plan.seed, "eval.twostep", 0);
    let x = sample_twostep(model, plan.n, plan.t_mid, &mut r, spec)?;
    let reference = data.sample(plan.n, &mut rng::stream(plan.seed, "eval.reference", 0));
    w2(&x, &reference)
}

/// Denoising divergence at every grid time.
pub fn dfid_grid(
    model: &dyn ConsistencyFn,
    data: &Dataset,
    plan: &EvalPlan,
    spec: &NoiseSpec,
) -> Result<Vec<(f64, f64)>> {
    plan.t_grid
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut r = rng::stream(plan.seed, "eval.dfid", k as u64);
            Ok((
                t,
                denoising_divergence(model, t, data, plan.n, &mut r, spec)?,
            ))
        })
        .collect()
}

pub fn gap_grid(
    model: &dyn ConsistencyFn,
    data: &Dataset,
    plan: &EvalPlan,
    spec: &NoiseSpec,
) -> Result<Vec<(f64, f64)>> {
    plan.gap_grid
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut r = rng::stream(plan.seed, "eval.gap", k as u64);
            Ok((
                t,
                oracle_gap(
                    model,
                    t,
                    data,
                    plan.gap_n,
                    &mut r,
                    plan.gap_steps,
                    spec,
                    plan.grid,
                )?,
            ))
        })
        .collect()
}

pub fn evaluate(
    model: &dyn ConsistencyFn,
    iteration: u64,
    data: &Dataset,
    plan: &EvalPlan,
    spec: &NoiseSpec,
) -> Result<MetricRecord> {
    Ok(MetricRecord {
        iteration,
        one_step_div: one_step_divergence(model, data, plan, spec)?,
        two_step_div: two_step_divergence(model, data, plan, spec)?,
        dfid_grid: dfid_grid(model, data, plan, spec)?,
        oracle_gap_grid: gap_grid(model, data, plan, spec)?,
        sample_count: plan.n,
    })
}

impl MetricRecord {
    /// Long-format rows for the report CSV.
    pub fn rows(&self, ckpt: &str, plan: &EvalPlan, spec: &NoiseSpec) -> Vec<ReportRow> {
        let row = |t: f64, metric: &str, value: f64, n: usize| ReportRow {
            ckpt: ckpt.to_string(),
            iter: self.iteration,
            t,
            metric: metric.to_string(),
            value,
            n,
            seed: plan.seed,
        };
        let mut out = vec![
            row(
                spec.t_max,
                "onestep_w2",
                self.one_step_div,
                self.sample_count,
            ),
            row(
                plan.t_mid,
                "twostep_w2",
                self.two_step_div,
                self.sample_count,
            ),
        ];
        out.extend(
            self.dfid_grid
                .iter()
                .map(|&(t, v)| row(t, "dfid_w2", v, self.sample_count)),
        );
        out.extend(
            self.oracle_gap_grid
                .iter()
                .map(|&(t, v)| row(t, "oracle_gap", v, plan.gap_n)),
        );
        out
    }
}

/// Denoising divergence over a checkpoint series, one row per (checkpoint, t).
pub fn tradeoff_report(
    ckpts: &[(String, u64, &dyn ConsistencyFn)],
    data: &Dataset,
    plan: &EvalPlan,
    spec: &NoiseSpec,
) -> Result<Vec<ReportRow>> {
    if ckpts.len() < 2 {
        return Err(Error::Contract(format!(
            "trade-off report needs at least 2 checkpoints, got {}",
            ckpts.len()
        )));
    }
    let mut rows = Vec::new();
    for (name, iter, model) in ckpts {
        for (t, v) in dfid_grid(*model, data, plan, spec)? {
            rows.push(ReportRow {
                ckpt: name.clone(),
                iter: *iter,
                t,
                metric: "dfid_w2".into(),
                value: v,
                n: plan.n,
                seed: plan.seed,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Builtin;
    use crate::net::{init_params, Arch, CoeffSpec};
    use crate::oracle::OracleConsistency;

    fn cloud(seed: u64, n: usize, shift: [f64; 2], scale: f64) -> Array {
        let mut r = rng::stream(seed, "test", 0);
        let v = rng::normals(&mut r, 2 * n);
        Array::matrix(
            n,
            2,
            v.iter()
                .enumerate()
                .map(|(i, z)| shift[i % 2] + scale * z)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut r = rng::stream(1, "test", 0);
        for n in 1..=6 {
            let cost: Vec<f64> = (0..n * n).map(|_| r.random::<f64>()).collect();
            let a = optimal_assignment(&cost, n);
            let got: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            permute(&mut perm, 0, &mut |p| {
                best = best.min(p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum());
            });
            assert!((got - best).abs() < 1e-12, "n={n}");
        }
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn w2_basic_cases() {
        let a = cloud(1, 50, [0.0, 0.0], 1.0);
        assert_eq!(w2(&a, &a).unwrap(), 0.0);
        let p = Array::from_rows(&[[0.0, 0.0]]).unwrap();
        let q = Array::from_rows(&[[3.0, 4.0]]).unwrap();
        assert!((w2(&p, &q).unwrap() - 5.0).abs() < 1e-15);
        assert!(matches!(
            w2(&a, &cloud(2, 49, [0.0, 0.0], 1.0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sliced_tracks_exact_on_distinct_clouds() {
        let a = cloud(3, 256, [0.0, 0.0], 1.0);
        let b = cloud(4, 256, [1.5, -0.5], 0.6);
        let exact = w2_exact(&a, &b).unwrap();
        let sliced = w2_sliced(&a, &b).unwrap();
        assert!((sliced / exact - 1.0).abs() < 0.25, "{sliced} vs {exact}");
    }

    #[test]
    fn sliced_shift_is_exact() {
        let a = cloud(5, 600, [0.0, 0.0], 1.0);
        let b = Array::matrix(
            600,
            2,
            a.data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + [0.3, -0.4][i % 2])
                .collect(),
        )
        .unwrap();
        assert!((w2_sliced(&a, &b).unwrap() - 0.5).abs() < 0.03);
        assert!((w2(&a, &b).unwrap() - w2_sliced(&a, &b).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn quantile_w2_handles_unequal_sizes() {
        assert!((w2_1d_sq(vec![0.0, 1.0], vec![0.0, 0.0, 1.0, 1.0])).abs() < 1e-15);
        assert!((w2_1d_sq(vec![0.0], vec![2.0, 2.0, 2.0]) - 4.0).abs() < 1e-15);
    }

    fn ring() -> Dataset {
        Dataset::builtin(Builtin::Ring8, 256, 2, 7, 0.5).unwrap()
    }

    #[test]
    fn sampler_contracts() {
        let spec = NoiseSpec::default();
        let p = init_params(
            1,
            &Arch {
                dim: 2,
                hidden: vec![8],
                fourier: 4,
                fourier_scale: 1.0,
            },
            CoeffSpec { sigma_data: 0.5 },
        )
        .unwrap();
        let mut r = rng::stream(1, "test", 0);
        assert!(sample_onestep(&p, 0, &mut r, &spec).is_err());
        assert!(sample_twostep(&p, 4, 80.0, &mut r, &spec).is_err());
        assert_eq!(
            sample_onestep(&p, 5, &mut r, &spec).unwrap().shape(),
            &[5, 2]
        );
    }

    #[test]
    fn single_point_oracle_samples_are_the_point() {
        let ds = Dataset::from_points(Array::from_rows(&[[0.3, -0.2]]).unwrap(), 0.5).unwrap();
        let spec = NoiseSpec::default();
        let o = OracleConsistency {
            data: &ds,
            spec,
            steps: 50,
            grid: OdeGrid::Geometric,
        };
        let mut r = rng::stream(2, "test", 0);
        // The flow of a point mass is a straight line, so the endpoint sits
        // t_min·|ε| away from the point.
        for x in [
            sample_onestep(&o, 8, &mut r, &spec).unwrap(),
            sample_twostep(&o, 8, 0.5, &mut r, &spec).unwrap(),
        ] {
            for i in 0..8 {
                assert!(sq_dist(x.row(i), &[0.3, -0.2]).sqrt() < 0.02);
            }
        }
    }

    #[test]
    fn oracle_gap_of_oracle_is_zero() {
        let ds = ring();
        let spec = NoiseSpec::default();
        let o = OracleConsistency {
            data: &ds,
            spec,
            steps: 400,
            grid: OdeGrid::Geometric,
        };
        let mut r = rng::stream(3, "test", 0);
        let g = oracle_gap(&o, 5.0, &ds, 16, &mut r, 400, &spec, OdeGrid::Geometric).unwrap();
        assert!(g < 1e-12, "{g}");
    }

    #[test]
    fn untrained_gap_is_the_skip_error() {
        let ds = ring();
        let spec = NoiseSpec::default();
        let arch = Arch {
            dim: 2,
            hidden: vec![8],
            fourier: 4,
            fourier_scale: 1.0,
        };
        let p = init_params(1, &arch, CoeffSpec { sigma_data: 0.5 }).unwrap();
        let n = 16;
        let got = oracle_gap(
            &p,
            80.0,
            &ds,
            n,
            &mut rng::stream(4, "test", 0),
            400,
            &spec,
            OdeGrid::Geometric,
        )
        .unwrap();
        // Same draws, evaluated directly.
        let mut r = rng::stream(4, "test", 0);
        let x = ds.sample(n, &mut r);
        let e = rng::normals(&mut r, 2 * n);
        let cs = CoeffSpec { sigma_data: 0.5 }.c_skip(80.0);
        let mut want = 0.0;
        for i in 0..n {
            let xt: Vec<f64> = (0..2).map(|k| x.row(i)[k] + 80.0 * e[2 * i + k]).collect();
            let end = oracle_endpoint(&xt, 80.0, &ds, 400, &spec, OdeGrid::Geometric).unwrap();
            let f: Vec<f64> = xt.iter().map(|v| cs * v).collect();
            want += sq_dist(&f, &end).sqrt() / n as f64;
        }
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn denoising_at_t_min_is_near_data_baseline() {
        let ds = ring();
        let spec = NoiseSpec::default();
        let arch = Arch {
            dim: 2,
            hidden: vec![8],
            fourier: 4,
            fourier_scale: 1.0,
        };
        let p = init_params(1, &arch, CoeffSpec { sigma_data: 0.5 }).unwrap();
        let n = 256;
        let d = denoising_divergence(
            &p,
            spec.t_min,
            &ds,
            n,
            &mut rng::stream(5, "test", 0),
            &spec,
        )
        .unwrap();
        let mut r = rng::stream(6, "test", 0);
        let base = (0..5)
            .map(|_| w2(&ds.sample(n, &mut r), &ds.sample(n, &mut r)).unwrap())
            .sum::<f64>()
            / 5.0;
        assert!(d <= 2.0 * base, "{d} vs {base}");
    }

    #[test]
    fn mode_helpers() {
        let c = Array::from_rows(&[[0.0, 0.0], [10.0, 0.0]]).unwrap();
        let p = Array::from_rows(&[[0.1, 0.0], [0.2, 0.0], [9.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(mode_fractions(&p, &c), vec![0.75, 0.25]);
        assert_eq!(modes_covered(&p, &c), 2);
        assert!(collapse_detected(7, 8, 1.0, 1.0));
        assert!(collapse_detected(8, 8, 0.05, 1.0));
        assert!(!collapse_detected(8, 8, 0.5, 1.0));
    }

    #[test]
    fn report_rows_and_tradeoff() {
        let ds = ring();
        let spec = NoiseSpec::default();
        let arch = Arch {
            dim: 2,
            hidden: vec![8],
            fourier: 4,
            fourier_scale: 1.0,
        };
        let p = init_params(1, &arch, CoeffSpec { sigma_data: 0.5 }).unwrap();
        let plan = EvalPlan {
            n: 64,
            seed: 3,
            t_grid: vec![0.2, 0.5, 1.0, 2.0, 5.0, 80.0],
            t_mid: 1.0,
            gap_grid: vec![],
            gap_n: 0,
            gap_steps: 400,
            grid: OdeGrid::Geometric,
        };
        let rows = tradeoff_report(
            &[("a".into(), 1, &p), ("a".into(), 1, &p)],
            &ds,
            &plan,
            &spec,
        )
        .unwrap();
        assert_eq!(rows.len(), 12);
        for k in 0..6 {
            assert_eq!(rows[k].value, rows[k + 6].value);
        }
        assert!(tradeoff_report(&[("a".into(), 1, &p)], &ds, &plan, &spec).is_err());
        let rec = evaluate(&p, 0, &ds, &plan, &spec).unwrap();
        assert_eq!(rec.rows("a", &plan, &spec).len(), 8);
        let mut buf = Vec::new();
        write_report(&rec.rows("a", &plan, &spec), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(REPORT_HEADER));
        assert_eq!(text.lines().count(), 9);
    }
}
