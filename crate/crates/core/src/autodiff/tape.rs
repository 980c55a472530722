use std::cell::Cell;

use super::array::Array;
use crate::error::{Error, Result};

thread_local! {
    static SILU_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Keeps a deliberately wrong SiLU backward rule active on this thread.
#[doc(hidden)]
pub struct FaultGuard(());

impl Drop for FaultGuard {
    fn drop(&mut self) {
        SILU_FAULT.set(false);
    }
}

/// Negative-control hook for the gradient battery: scales SiLU's derivative by
/// 1.1 until the guard is dropped.
#[doc(hidden)]
pub fn inject_silu_fault() -> FaultGuard {
    SILU_FAULT.set(true);
    FaultGuard(())
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Const,
    /// Value copied from the wrapped node; never propagates gradient.
    StopGrad,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sqrt(Var),
    Silu(Var),
    Tanh(Var),
    RowSum(Var),
    ConcatCols(Var, Var),
    SelectRows(Vec<bool>, Var, Var),
    Mean(Var),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of primitive operations.
///
/// Nodes are appended in evaluation order, so parents always precede
/// children and the reverse sweep in [`Tape::backward`] is a single pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root, one entry per parameter node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a parameter; panics if `v` is not a parameter.
    pub fn wrt(&self, v: Var) -> &Array {
        self.get(v)
            .expect("gradient requested for a non-parameter node")
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Array, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Leaf that receives a gradient in [`Tape::backward`].
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Param, true)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Same value as `v`, but a gradient barrier.
    pub fn stop_grad(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::StopGrad, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x + 1·bᵀ` for `x: [m, n]` and a bias of `n` values.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.shape().len() != 2 || bv.len() != xv.cols() {
            return Err(Error::dim(format!(
                "bias of shape {:?} does not fit {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let value = Array::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::AddBias(x, b), &[x, b]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            Ok(av.zip_map(bv, f))
        } else if bv.len() == 1 {
            let s = bv.item();
            Ok(av.map(|x| f(x, s)))
        } else if av.len() == 1 {
            let s = av.item();
            Ok(bv.map(|x| f(s, x)))
        } else {
            Err(Error::dim(format!(
                "{name}: shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push_op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_op(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_op(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push_op(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push_op(v, Op::AddScalar(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if let Some(bad) = av.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain(format!("sqrt of non-positive value {bad}")));
        }
        let v = av.map(f64::sqrt);
        Ok(self.push_op(v, Op::Sqrt(a), &[a]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push_op(v, Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push_op(v, Op::Tanh(a), &[a])
    }

    /// `[m, n] -> [m, 1]` sum over columns.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let sums = av.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        self.push_op(Array::column(sums), Op::RowSum(a), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::dim(format!(
                "concat needs equal row counts: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (p, q) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.rows() * (p + q));
        for i in 0..av.rows() {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let value = Array::matrix(av.rows(), p + q, data)?;
        Ok(self.push_op(value, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Row-wise splice: row `i` comes from `on` where `mask[i]`, else from `off`.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        let (ov, fv) = (self.value(on), self.value(off));
        if ov.shape() != fv.shape() || ov.rows() != mask.len() {
            return Err(Error::dim(format!(
                "select_rows: {:?} / {:?} with mask of {}",
                ov.shape(),
                fv.shape(),
                mask.len()
            )));
        }
        let mut data = Vec::with_capacity(ov.len());
        for (i, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { ov.row(i) } else { fv.row(i) });
        }
        let value = Array::new(ov.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::SelectRows(mask.to_vec(), on, off), &[on, off]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::dim("mean of an empty array"));
        }
        let v = Array::scalar(av.sum() / av.len() as f64);
        Ok(self.push_op(v, Op::Mean(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array::scalar(self.value(a).sum());
        self.push_op(v, Op::Sum(a), &[a])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Array>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Array::full(self.value(root).shape(), 1.0));
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) && grads[i].is_none() {
                grads[i] = Some(Array::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, adj: &mut [Option<Array>], v: Var, g: Array) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient of a possibly scalar-broadcast operand.
    fn unbroadcast(&self, v: Var, g: Array) -> Array {
        let target = self.value(v);
        if target.shape() == g.shape() {
            g
        } else {
            Array::full(target.shape(), g.sum())
        }
    }

    fn propagate(&self, node: &Node, g: &Array, adj: &mut [Option<Array>]) {
        match &node.op {
            Op::Param | Op::Const | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires_grad(a) {
                    let ga = g.matmul_nt(self.value(b));
                    self.accumulate(adj, a, ga);
                }
                if self.requires_grad(b) {
                    let gb = self.value(a).matmul_tn(g);
                    self.accumulate(adj, b, gb);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(adj, *x, g.clone());
                if self.requires_grad(*b) {
                    let n = g.cols();
                    let mut col = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (c, v) in col.iter_mut().zip(row) {
                            *c += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(adj, *b, Array::new(shape, col).expect("bias shape"));
                }
            }
            Op::Add(a, b) => {
                let ga = self.unbroadcast(*a, g.clone());
                self.accumulate(adj, *a, ga);
                let gb = self.unbroadcast(*b, g.clone());
                self.accumulate(adj, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.unbroadcast(*a, g.clone());
                self.accumulate(adj, *a, ga);
                let gb = self.unbroadcast(*b, g.map(|v| -v));
                self.accumulate(adj, *b, gb);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = if bv.len() == 1 && av.len() != 1 {
                        let s = bv.item();
                        g.map(|v| v * s)
                    } else if av.len() == 1 && bv.len() != 1 {
                        Array::full(av.shape(), g.dot(bv))
                    } else {
                        g.zip_map(bv, |x, y| x * y)
                    };
                    self.accumulate(adj, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = if av.len() == 1 && bv.len() != 1 {
                        let s = av.item();
                        g.map(|v| v * s)
                    } else if bv.len() == 1 && av.len() != 1 {
                        Array::full(bv.shape(), g.dot(av))
                    } else {
                        g.zip_map(av, |x, y| x * y)
                    };
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(adj, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.accumulate(adj, *a, g.clone()),
            Op::Sqrt(a) => {
                let ga = g.zip_map(&node.value, |gv, y| gv * 0.5 / y);
                self.accumulate(adj, *a, ga);
            }
            Op::Silu(a) => {
                let k = if SILU_FAULT.get() { 1.1 } else { 1.0 };
                let ga = g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    k * gv * s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(adj, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(adj, *a, ga);
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut data = Vec::with_capacity(av.len());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv, c));
                }
                let ga = Array::new(av.shape().to_vec(), data).expect("row_sum shape");
                self.accumulate(adj, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                let m = g.rows();
                let (mut ga, mut gb) = (Vec::with_capacity(m * p), Vec::with_capacity(m * q));
                for i in 0..m {
                    let r = g.row(i);
                    ga.extend_from_slice(&r[..p]);
                    gb.extend_from_slice(&r[p..]);
                }
                let ga = Array::new(self.value(*a).shape().to_vec(), ga).expect("concat lhs");
                let gb = Array::new(self.value(*b).shape().to_vec(), gb).expect("concat rhs");
                self.accumulate(adj, *a, ga);
                self.accumulate(adj, *b, gb);
            }
            Op::SelectRows(mask, on, off) => {
                let c = g.cols();
                let mut g_on = g.clone();
                let mut g_off = g.clone();
                for (i, &m) in mask.iter().enumerate() {
                    let dead = if m { &mut g_off } else { &mut g_on };
                    dead.data_mut()[i * c..(i + 1) * c].fill(0.0);
                }
                self.accumulate(adj, *on, g_on);
                self.accumulate(adj, *off, g_off);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let s = g.item() / av.len() as f64;
                self.accumulate(adj, *a, Array::full(av.shape(), s));
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(adj, *a, Array::full(av.shape(), g.item()));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Array::scalar(0.0));
        let y = tape.silu(x);
        assert_eq!(tape.value(y).item(), 0.0);
        let g = tape.backward(y).unwrap();
        assert!((g.wrt(x).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sqrt_value_and_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Array::scalar(4.0));
        let y = tape.sqrt(x).unwrap();
        assert_eq!(tape.value(y).item(), 2.0);
        assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 0.25);
    }

    #[test]
    fn sqrt_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.param(Array::from_rows(&[[1.0, 0.0]]).unwrap());
        assert!(matches!(tape.sqrt(x), Err(Error::Domain(_))));
        let y = tape.param(Array::scalar(-1.0));
        assert!(tape.sqrt(y).is_err());
    }

    #[test]
    fn tanh_grad_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Array::scalar(0.0));
        let y = tape.tanh(x);
        assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 1.0);
    }

    #[test]
    fn mean_values_and_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Array::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.value(m).item(), 2.0);

        let mut tape = Tape::new();
        let c = tape.param(Array::full(&[10], 7.25));
        let m = tape.mean(c).unwrap();
        assert_eq!(tape.value(m).item(), 7.25);
        let g = tape.backward(m).unwrap();
        assert!(g.wrt(c).data().iter().all(|&v| (v - 0.1).abs() < 1e-16));
    }

    #[test]
    fn mean_of_empty_is_error() {
        let mut tape = Tape::new();
        let e = tape.constant(Array::zeros(&[0, 2]));
        assert!(matches!(tape.mean(e), Err(Error::Dimension(_))));
    }

    #[test]
    fn sum_of_param_gives_ones() {
        let mut tape = Tape::new();
        let p = tape.param(Array::matrix(2, 2, vec![0.3, -1.0, 4.0, 2.0]).unwrap());
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(p).data(), &[1.0; 4]);
    }

    #[test]
    fn stop_grad_blocks_everything() {
        let mut tape = Tape::new();
        let p = tape.param(Array::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let q = tape.stop_grad(p);
        let sq = tape.mul(q, q).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(p).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let mut tape = Tape::new();
        let p = tape.param(Array::zeros(&[2, 2]));
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn select_rows_splices_exactly() {
        let mut tape = Tape::new();
        let a = tape.param(Array::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap());
        let b = tape.param(Array::from_rows(&[[-1.0, -2.0], [-3.0, -4.0], [-5.0, -6.0]]).unwrap());
        let s = tape.select_rows(&[true, false, true], a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0, -3.0, -4.0, 5.0, 6.0]);
        let r = tape.sum(s);
        let g = tape.backward(r).unwrap();
        assert_eq!(g.wrt(a).data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(g.wrt(b).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn scalar_broadcast_mul() {
        let mut tape = Tape::new();
        let s = tape.param(Array::scalar(2.0));
        let x = tape.param(Array::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.mul(s, x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0]);
        let r = tape.sum(y);
        let g = tape.backward(r).unwrap();
        assert_eq!(g.wrt(s).item(), 6.0);
        assert_eq!(g.wrt(x).data(), &[2.0; 3]);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Array::zeros(&[2, 3]));
        let b = tape.constant(Array::zeros(&[3, 2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.concat_cols(a, b).is_err());
    }
}
