//! The learnable consistency function.
//!
//! `F_θ` is a SiLU MLP over `concat(c_in(t)·x, fourier(ln t / 4))`; the
//! consistency function wraps it as `f_θ(x, t) = c_out(t) F_θ(x, t) + c_skip(t) x`,
//! which pins `f_θ(x, 0) = x` for any weights.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Anything that maps `(x_t, t)` batches to predicted clean points.
pub trait ConsistencyFn: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &Array, t: &[f64]) -> Result<Array>;
}

/// EDM preconditioning coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoeffSpec {
    pub sigma_data: f64,
}

impl CoeffSpec {
    pub fn c_skip(&self, t: f64) -> f64 {
        let s2 = self.sigma_data * self.sigma_data;
        s2 / (s2 + t * t)
    }

    pub fn c_out(&self, t: f64) -> f64 {
        t * self.sigma_data / (self.sigma_data * self.sigma_data + t * t).sqrt()
    }

    /// Input scaling that gives the network unit-variance inputs at every `t`.
    pub fn c_in(&self, t: f64) -> f64 {
        1.0 / (self.sigma_data * self.sigma_data + t * t).sqrt()
    }
}

/// Layer widths and the time embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    pub dim: usize,
    pub hidden: Vec<usize>,
    /// Total Fourier features (cos and sin halves), must be even.
    pub fourier: usize,
    pub fourier_scale: f64,
}

impl Arch {
    pub fn new(dim: usize) -> Self {
        Arch {
            dim,
            hidden: vec![256, 256, 256],
            fourier: 64,
            fourier_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.dim == 0 || self.dim > crate::data::MAX_DIM {
            errs.push(format!("arch dimension {} out of range", self.dim));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            errs.push("arch.hidden: need at least one non-empty hidden layer".to_string());
        }
        if self.fourier == 0 || !self.fourier.is_multiple_of(2) {
            errs.push(format!(
                "arch.fourier: must be a positive even count, got {}",
                self.fourier
            ));
        }
        if !(self.fourier_scale > 0.0 && self.fourier_scale.is_finite()) {
            errs.push(format!(
                "arch.fourier_scale: must be positive, got {}",
                self.fourier_scale
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub(crate) fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut fan_in = self.dim + self.fourier;
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.dim));
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array,
    pub bias: Array,
}

/// MLP weights plus the frozen time-embedding frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct CmParams {
    pub arch: Arch,
    pub coeff: CoeffSpec,
    /// `[1, fourier/2]`, never touched by the optimiser.
    pub freqs: Array,
    pub layers: Vec<Layer>,
}

/// Tape handles for one registration of a [`CmParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
}

impl ParamVars {
    /// Every weight and bias, in declaration order.
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Same values behind a gradient barrier.
    pub fn stop_grad(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|&(w, b)| (tape.stop_grad(w), tape.stop_grad(b)))
                .collect(),
        }
    }
}

/// He-initialised hidden layers and a zero output layer, so a fresh model is
/// exactly the skip path `c_skip(t)·x`.
pub fn init_params(seed: u64, arch: &Arch, coeff: CoeffSpec) -> Result<CmParams> {
    arch.validate()?;
    let mut rng = rng::stream(seed, "init", 0);
    let freqs: Vec<f64> = (0..arch.fourier / 2)
        .map(|_| arch.fourier_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let dims = arch.layer_dims();
    let last = dims.len() - 1;
    let layers = dims
        .iter()
        .enumerate()
        .map(|(i, &(fan_in, fan_out))| {
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = if i == last {
                vec![0.0; fan_in * fan_out]
            } else {
                (0..fan_in * fan_out)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            Layer {
                weight: Array::matrix(fan_in, fan_out, w).expect("dims"),
                bias: Array::zeros(&[1, fan_out]),
            }
        })
        .collect();
    Ok(CmParams {
        arch: arch.clone(),
        coeff,
        freqs: Array::matrix(1, arch.fourier / 2, freqs)?,
        layers,
    })
}

impl CmParams {
    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    /// Trainable arrays in declaration order with their names.
    pub fn named_arrays(&self) -> Vec<(String, &Array)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layer{i}.weight"), &l.weight),
                    (format!("layer{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// All trainable values concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named_arrays()
            .into_iter()
            .flat_map(|(_, a)| a.data().to_vec())
            .collect()
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<CmParams> {
        if flat.len() != self.num_params() {
            return Err(Error::dim(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        for a in out.arrays_mut() {
            let n = a.len();
            a.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.freqs.all_finite()
            && self
                .layers
                .iter()
                .all(|l| l.weight.all_finite() && l.bias.all_finite())
    }

    /// Registers the weights as differentiable leaves.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Registers the weights as constants (evaluation only).
    pub fn register_const(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.constant(l.weight.clone()),
                        tape.constant(l.bias.clone()),
                    )
                })
                .collect(),
        }
    }

    fn check_batch(&self, rows: usize, cols: usize, t: &[f64]) -> Result<()> {
        if cols != self.arch.dim {
            return Err(Error::dim(format!(
                "input has {cols} columns, model dimension is {}",
                self.arch.dim
            )));
        }
        if t.len() != rows {
            return Err(Error::dim(format!(
                "{} times for a batch of {rows}",
                t.len()
            )));
        }
        Ok(())
    }

    /// `[B, fourier]` features `cos/sin(2π w · ln(t)/4)`.
    pub fn time_features(&self, t: &[f64]) -> Array {
        let half = self.freqs.len();
        let mut data = Vec::with_capacity(t.len() * 2 * half);
        for &ti in t {
            // Floor keeps the embedding finite at t = 0, where c_out = 0 anyway.
            let c_noise = ti.max(f64::MIN_POSITIVE).ln() / 4.0;
            let phases: Vec<f64> = self
                .freqs
                .data()
                .iter()
                .map(|w| std::f64::consts::TAU * w * c_noise)
                .collect();
            data.extend(phases.iter().map(|p| p.cos()));
            data.extend(phases.iter().map(|p| p.sin()));
        }
        Array::matrix(t.len(), 2 * half, data).expect("feature shape")
    }

    fn per_row(&self, t: &[f64], f: impl Fn(f64) -> f64) -> Array {
        let d = self.arch.dim;
        let data = t
            .iter()
            .flat_map(|&ti| std::iter::repeat_n(f(ti), d))
            .collect();
        Array::matrix(t.len(), d, data).expect("coefficient shape")
    }

    /// `F_θ(x, t)` recorded on `tape`.
    pub fn raw_forward_on(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        x: Var,
        t: &[f64],
    ) -> Result<Var> {
        let (rows, cols) = (tape.value(x).rows(), tape.value(x).cols());
        self.check_batch(rows, cols, t)?;
        let cin = tape.constant(self.per_row(t, |ti| self.coeff.c_in(ti)));
        let xin = tape.mul(x, cin)?;
        let feats = tape.constant(self.time_features(t));
        let mut h = tape.concat_cols(xin, feats)?;
        let last = pv.layers.len() - 1;
        for (i, &(w, b)) in pv.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add_bias(z, b)?;
            h = if i == last { z } else { tape.silu(z) };
        }
        Ok(h)
    }

    /// `f_θ(x, t) = c_out(t) F_θ(x, t) + c_skip(t) x` recorded on `tape`.
    pub fn cm_forward_on(&self, tape: &mut Tape, pv: &ParamVars, x: Var, t: &[f64]) -> Result<Var> {
        let raw = self.raw_forward_on(tape, pv, x, t)?;
        let cout = tape.constant(self.per_row(t, |ti| self.coeff.c_out(ti)));
        let cskip = tape.constant(self.per_row(t, |ti| self.coeff.c_skip(ti)));
        let a = tape.mul(cout, raw)?;
        let b = tape.mul(cskip, x)?;
        tape.add(a, b)
    }

    pub fn raw_forward(&self, x: &Array, t: &[f64]) -> Result<Array> {
        let mut tape = Tape::new();
        let pv = self.register_const(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.raw_forward_on(&mut tape, &pv, xv, t)?;
        Ok(tape.value(out).clone())
    }

    pub fn cm_forward(&self, x: &Array, t: &[f64]) -> Result<Array> {
        let mut tape = Tape::new();
        let pv = self.register_const(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.cm_forward_on(&mut tape, &pv, xv, t)?;
        Ok(tape.value(out).clone())
    }
}

impl ConsistencyFn for CmParams {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn eval(&self, x: &Array, t: &[f64]) -> Result<Array> {
        self.cm_forward(x, t)
    }
}

/// Student and frozen first-stage model split at the dividing time.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncPair {
    pub student: CmParams,
    pub frozen: CmParams,
    pub t_prime: f64,
}

impl TruncPair {
    pub fn new(student: CmParams, frozen: CmParams, t_prime: f64) -> Result<Self> {
        if student.arch != frozen.arch || student.coeff != frozen.coeff {
            return Err(Error::Compatibility(
                "student and frozen model architectures differ".into(),
            ));
        }
        if !(t_prime > 0.0 && t_prime.is_finite()) {
            return Err(Error::Config(vec![format!(
                "time.t_prime: must be positive, got {t_prime}"
            )]));
        }
        Ok(TruncPair {
            student,
            frozen,
            t_prime,
        })
    }

    /// Student where `t >= t'`, stop-gradient frozen model below.
    pub fn trunc_forward_on(
        &self,
        tape: &mut Tape,
        student: &ParamVars,
        frozen: &ParamVars,
        x: Var,
        t: &[f64],
    ) -> Result<Var> {
        let frozen = frozen.stop_grad(tape);
        let s = self.student.cm_forward_on(tape, student, x, t)?;
        let f = self.frozen.cm_forward_on(tape, &frozen, x, t)?;
        let mask: Vec<bool> = t.iter().map(|&ti| ti >= self.t_prime).collect();
        tape.select_rows(&mask, s, f)
    }

    pub fn trunc_forward(&self, x: &Array, t: &[f64]) -> Result<Array> {
        let mut tape = Tape::new();
        let s = self.student.register_const(&mut tape);
        let f = self.frozen.register_const(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.trunc_forward_on(&mut tape, &s, &f, xv, t)?;
        Ok(tape.value(out).clone())
    }
}

impl ConsistencyFn for TruncPair {
    fn dim(&self) -> usize {
        self.student.dim()
    }

    fn eval(&self, x: &Array, t: &[f64]) -> Result<Array> {
        self.trunc_forward(x, t)
    }
}

#[cfg(test)]
pub(crate) use tests::random_head;

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Arch {
        Arch {
            dim: 2,
            hidden: vec![16, 16],
            fourier: 8,
            fourier_scale: 1.0,
        }
    }

    fn coeff() -> CoeffSpec {
        CoeffSpec { sigma_data: 0.5 }
    }

    /// Fresh params with a random output layer, so `F_θ` is not identically zero.
    pub(crate) fn random_head(seed: u64, arch: &Arch) -> CmParams {
        let mut p = init_params(seed, arch, coeff()).unwrap();
        let mut r = rng::stream(seed, "head", 0);
        let last = p.layers.len() - 1;
        for v in p.layers[last].weight.data_mut() {
            *v = 0.3 * r.sample::<f64, _>(StandardNormal);
        }
        for v in p.layers[last].bias.data_mut() {
            *v = 0.1 * r.sample::<f64, _>(StandardNormal);
        }
        p
    }

    fn batch() -> (Array, Vec<f64>) {
        let x = Array::from_rows(&[[0.1, -0.4], [1.2, 0.3], [-0.7, 0.9], [0.0, 0.05]]).unwrap();
        (x, vec![0.01, 0.5, 3.0, 80.0])
    }

    #[test]
    fn coefficient_values() {
        let c = coeff();
        assert_eq!(c.c_skip(0.0), 1.0);
        assert_eq!(c.c_out(0.0), 0.0);
        assert!((c.c_skip(0.5) - 0.5).abs() < 1e-15);
        assert!((c.c_out(0.5) - 0.353_553_390_593_273_8).abs() < 1e-15);
        assert!(c.c_skip(1e8) < 1e-16);
        assert!((c.c_out(1e8) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_head_is_skip_path() {
        let p = init_params(3, &small_arch(), coeff()).unwrap();
        let (x, t) = batch();
        let raw = p.raw_forward(&x, &t).unwrap();
        assert!(raw.data().iter().all(|&v| v == 0.0));
        let f = p.cm_forward(&x, &t).unwrap();
        for i in 0..x.rows() {
            for k in 0..2 {
                assert_eq!(f.row(i)[k], coeff().c_skip(t[i]) * x.row(i)[k]);
            }
        }
    }

    #[test]
    fn boundary_identity_at_zero_time() {
        let p = random_head(5, &small_arch());
        let (x, _) = batch();
        let f = p.cm_forward(&x, &[0.0; 4]).unwrap();
        assert_eq!(f, x);
    }

    #[test]
    fn batch_permutation_equivariance() {
        let p = random_head(6, &small_arch());
        let (x, t) = batch();
        let perm = [2, 0, 3, 1];
        let xp = x.gather_rows(&perm);
        let tp: Vec<f64> = perm.iter().map(|&i| t[i]).collect();
        let a = p.raw_forward(&x, &t).unwrap();
        let b = p.raw_forward(&xp, &tp).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            for k in 0..2 {
                assert!((a.row(i)[k] - b.row(j)[k]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(1, &small_arch(), coeff()).unwrap();
        let b = init_params(1, &small_arch(), coeff()).unwrap();
        let c = init_params(2, &small_arch(), coeff()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flatten(), c.flatten());
        assert_ne!(a.freqs, c.freqs);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let p = init_params(1, &small_arch(), coeff()).unwrap();
        let x = Array::zeros(&[3, 3]);
        assert!(matches!(
            p.cm_forward(&x, &[1.0; 3]),
            Err(Error::Dimension(_))
        ));
        let x = Array::zeros(&[3, 2]);
        assert!(p.cm_forward(&x, &[1.0; 2]).is_err());
    }

    #[test]
    fn trunc_branches() {
        let student = random_head(7, &small_arch());
        let frozen = random_head(8, &small_arch());
        let pair = TruncPair::new(student.clone(), frozen.clone(), 1.0).unwrap();
        let (x, t) = batch();
        let out = pair.trunc_forward(&x, &t).unwrap();
        let s = student.cm_forward(&x, &t).unwrap();
        let f = frozen.cm_forward(&x, &t).unwrap();
        for i in 0..4 {
            let want = if t[i] >= 1.0 { s.row(i) } else { f.row(i) };
            assert_eq!(out.row(i), want);
        }
    }

    #[test]
    fn trunc_upper_branch_is_student() {
        let student = random_head(7, &small_arch());
        let pair = TruncPair::new(student.clone(), random_head(9, &small_arch()), 0.5).unwrap();
        let x = Array::from_rows(&[[0.3, 0.2], [0.1, -0.1]]).unwrap();
        let t = [0.5, 40.0];
        assert_eq!(
            pair.trunc_forward(&x, &t).unwrap(),
            student.cm_forward(&x, &t).unwrap()
        );
        let t = [0.1, 0.2];
        assert_eq!(
            pair.trunc_forward(&x, &t).unwrap(),
            pair.frozen.cm_forward(&x, &t).unwrap()
        );
    }

    #[test]
    fn trunc_lower_branch_has_no_gradient() {
        let pair = TruncPair::new(
            random_head(1, &small_arch()),
            random_head(2, &small_arch()),
            1.0,
        )
        .unwrap();
        let (x, _) = batch();
        let t = [0.1, 0.2, 0.3, 0.9];
        let mut tape = Tape::new();
        let s = pair.student.register(&mut tape);
        let f = pair.frozen.register(&mut tape);
        let xv = tape.constant(x);
        let out = pair.trunc_forward_on(&mut tape, &s, &f, xv, &t).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        for v in s.vars().into_iter().chain(f.vars()) {
            assert!(g.wrt(v).data().iter().all(|&x| x == 0.0));
        }
    }
}
