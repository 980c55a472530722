//! Finite-difference check of every tape primitive and every loss.

use rand::Rng;

use crate::autodiff::{grad_check, Array, Tape, Var};
use crate::data::Dataset;
use crate::error::Result;
use crate::net::{init_params, Arch, CmParams, CoeffSpec, ParamVars};
use crate::rng::{self, StreamRng};
use crate::schedule::delta_t;
use crate::train::loss::{
    boundary_loss_on, cd_pair_loss_on, ct_pair_loss_on, tcm_step_loss_on, value_and_grad,
    LossConfig, TcmBatch,
};

/// Pass threshold on the max relative error.
pub const TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-6;
const T_MIN: f64 = 0.002;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rand_array(rng: &mut StreamRng, rows: usize, cols: usize, scale: f64) -> Array {
    Array::matrix(
        rows,
        cols,
        rng::normals(rng, rows * cols)
            .into_iter()
            .map(|v| scale * v)
            .collect(),
    )
    .expect("shape")
}

/// Positive entries for the square root.
fn rand_positive(rng: &mut StreamRng, rows: usize, cols: usize) -> Array {
    Array::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| 0.5 + rng.random::<f64>())
            .collect(),
    )
    .expect("shape")
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Scalar reduction of a primitive's output against fixed random weights,
/// so every output entry contributes a distinct coefficient.
fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    let v = tape.value(out).clone();
    let w: Vec<f64> = (0..v.len()).map(|i| 0.3 + 0.1 * (i % 7) as f64).collect();
    let w = tape.constant(Array::new(v.shape().to_vec(), w)?);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Name, input shapes, whether inputs must be positive, and the builder.
type Case = (&'static str, Vec<(usize, usize)>, bool, Build);

fn primitive_cases() -> Vec<Case> {
    vec![
        ("matmul", vec![(3, 4), (4, 2)], false, |t, v| {
            t.matmul(v[0], v[1])
        }),
        ("add_bias", vec![(3, 4), (1, 4)], false, |t, v| {
            t.add_bias(v[0], v[1])
        }),
        ("add", vec![(3, 2), (3, 2)], false, |t, v| t.add(v[0], v[1])),
        ("sub", vec![(3, 2), (3, 2)], false, |t, v| t.sub(v[0], v[1])),
        ("mul", vec![(3, 2), (3, 2)], false, |t, v| t.mul(v[0], v[1])),
        (
            "mul_scalar_broadcast",
            vec![(3, 2), (1, 1)],
            false,
            |t, v| t.mul(v[0], v[1]),
        ),
        ("scale", vec![(3, 2)], false, |t, v| Ok(t.scale(v[0], -1.7))),
        ("add_scalar", vec![(3, 2)], false, |t, v| {
            Ok(t.add_scalar(v[0], 0.4))
        }),
        ("sqrt", vec![(3, 2)], true, |t, v| t.sqrt(v[0])),
        ("silu", vec![(3, 4)], false, |t, v| Ok(t.silu(v[0]))),
        ("tanh", vec![(3, 4)], false, |t, v| Ok(t.tanh(v[0]))),
        ("row_sum", vec![(3, 4)], false, |t, v| Ok(t.row_sum(v[0]))),
        ("concat_cols", vec![(3, 2), (3, 3)], false, |t, v| {
            t.concat_cols(v[0], v[1])
        }),
        ("select_rows", vec![(4, 2), (4, 2)], false, |t, v| {
            t.select_rows(&[true, false, false, true], v[0], v[1])
        }),
        ("mean", vec![(3, 4)], false, |t, v| t.mean(v[0])),
        ("sum", vec![(3, 4)], false, |t, v| Ok(t.sum(v[0]))),
    ]
}

fn check_primitive(
    shapes: &[(usize, usize)],
    positive: bool,
    build: Build,
    rng: &mut StreamRng,
) -> Result<f64> {
    let inputs: Vec<Array> = shapes
        .iter()
        .map(|&(r, c)| {
            if positive {
                rand_positive(rng, r, c)
            } else {
                rand_array(rng, r, c, 1.0)
            }
        })
        .collect();
    let sizes: Vec<usize> = inputs.iter().map(Array::len).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|a| a.data().to_vec()).collect();
    let f = |p: &[f64]| {
        let mut tape = Tape::new();
        let mut off = 0;
        let vars: Vec<Var> = shapes
            .iter()
            .zip(&sizes)
            .map(|(&(r, c), &n)| {
                let a = Array::matrix(r, c, p[off..off + n].to_vec()).expect("shape");
                off += n;
                tape.param(a)
            })
            .collect();
        let out = build(&mut tape, &vars)?;
        let root = reduce(&mut tape, out)?;
        let g = tape.backward(root)?;
        let grad = vars
            .iter()
            .flat_map(|&v| g.wrt(v).data().to_vec())
            .collect();
        Ok((tape.value(root).item(), grad))
    };
    grad_check(f, &flat, STEP)
}

/// Two hidden layers with a random output head.
fn small_net(rng: &mut StreamRng) -> CmParams {
    let arch = Arch {
        dim: 2,
        hidden: vec![12, 12],
        fourier: 8,
        fourier_scale: 1.0,
    };
    let mut p =
        init_params(rng.random(), &arch, CoeffSpec { sigma_data: 0.5 }).expect("valid arch");
    let last = p.layers.len() - 1;
    let w = rand_array(rng, p.layers[last].weight.rows(), 2, 0.3);
    p.layers[last].weight = w;
    p.layers[last].bias = rand_array(rng, 1, 2, 0.1);
    p
}

fn times(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| (rng.random::<f64>() * 8.0 - 4.0).exp().clamp(0.01, 80.0))
        .collect()
}

/// Checks a loss of the student parameters with every teacher-side network
/// held at the base point.
fn check_loss(
    base: &CmParams,
    build: impl Fn(&mut Tape, &CmParams, &ParamVars, &ParamVars) -> Result<Var>,
) -> Result<f64> {
    let f = |p: &[f64]| {
        let student = base.unflatten(p)?;
        value_and_grad(&student, |tape, pv| {
            let teacher = base.register_const(tape);
            build(tape, &student, pv, &teacher)
        })
    };
    grad_check(f, &base.flatten(), STEP)
}

/// Runs every check at `points` random points; one row per primitive and per loss.
pub fn run_battery(points: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for (i, (name, shapes, positive, build)) in primitive_cases().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..points {
            let mut rng = rng::stream(seed, "battery.primitive", (i * 1_000_000 + k) as u64);
            worst = worst.max(check_primitive(&shapes, positive, build, &mut rng)?);
        }
        rows.push(CheckRow {
            name: name.to_string(),
            points,
            max_rel_err: worst,
        });
    }

    let mut data_rng = rng::stream(seed, "battery.data", 0);
    let data = Dataset::from_points(rand_array(&mut data_rng, 12, 2, 0.5), 0.5)?;
    let cfg = LossConfig::for_dim(2);
    let n = 6;
    let names = [
        "ct_pair_loss",
        "cd_pair_loss",
        "boundary_loss",
        "tcm_step_loss",
    ];
    let mut worst = [0.0f64; 4];
    for k in 0..points {
        let mut rng = rng::stream(seed, "battery.loss", k as u64);
        let base = small_net(&mut rng);
        let x = rand_array(&mut rng, n, 2, 0.5);
        let eps = rand_array(&mut rng, n, 2, 1.0);
        let t = times(&mut rng, n);
        let r = 0.5 + 0.49 * rng.random::<f64>();
        let dt: Vec<f64> = t.iter().map(|&ti| delta_t(ti, r, T_MIN)).collect();
        let t_prime = 0.5 + rng.random::<f64>();
        let dt_prime = delta_t(t_prime, r, T_MIN);
        let x_t = crate::train::loss::perturb_rows(&x, &eps, &t)?;

        worst[0] = worst[0].max(check_loss(&base, |tape, m, s, th| {
            ct_pair_loss_on(tape, m, s, th, &x, &eps, &t, &dt, &cfg, T_MIN)
        })?);
        worst[1] = worst[1].max(check_loss(&base, |tape, m, s, th| {
            cd_pair_loss_on(tape, m, s, th, &x_t, &t, &dt, &data, &cfg, T_MIN)
        })?);
        // Use a distinct frozen network for the boundary term.
        let frozen = small_net(&mut rng);
        worst[2] = worst[2].max(check_loss(&base, |tape, m, s, _| {
            let fv = frozen.register_const(tape);
            boundary_loss_on(tape, m, s, &fv, &x, &eps, t_prime, dt_prime, &cfg, T_MIN)
        })?);
        let tc: Vec<f64> = t.iter().map(|&ti| t_prime + ti).collect();
        let batch = TcmBatch {
            x_b: x.slice_rows(0, 2),
            eps_b: eps.slice_rows(0, 2),
            x_c: x.slice_rows(2, n),
            eps_c: eps.slice_rows(2, n),
            dt_c: tc[2..].iter().map(|&ti| delta_t(ti, r, T_MIN)).collect(),
            t_c: tc[2..].to_vec(),
            t_prime,
            dt_prime,
        };
        worst[3] = worst[3].max(check_loss(&base, |tape, m, s, th| {
            let fv = frozen.register_const(tape);
            Ok(tcm_step_loss_on(tape, m, s, th, &fv, &batch, &cfg, T_MIN)?.total)
        })?);
    }
    for (name, w) in names.iter().zip(worst) {
        rows.push(CheckRow {
            name: name.to_string(),
            points,
            max_rel_err: w,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes_and_lists_every_check() {
        let rows = run_battery(3, 1).unwrap();
        assert_eq!(rows.len(), primitive_cases().len() + 4);
        for r in &rows {
            assert!(r.passed(), "{} failed with {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let _fault = crate::autodiff::inject_silu_fault();
        let rows = run_battery(1, 2).unwrap();
        let silu = rows.iter().find(|r| r.name == "silu").unwrap();
        assert!(!silu.passed());
        assert!(rows
            .iter()
            .filter(|r| r.name.ends_with("loss"))
            .all(|r| !r.passed()));
    }
}
