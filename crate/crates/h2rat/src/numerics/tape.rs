//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A forward pass records each primitive on the tape; [`Tape::backward`]
//! replays the records in reverse, accumulating vector-Jacobian products.
//! One training step owns one tape; tapes are cheap to build because the
//! graph is desk-scale.
//!
//! ```
//! use h2rat::numerics::{Tape, Tensor};
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
//! let y = tape.tanh(w).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! // d/dw sum(tanh(w)) = 1 - tanh(w)^2
//! let g = grads.get(w).unwrap();
//! assert!((g.get(0, 0) - (1.0 - 1.0f64.tanh().powi(2))).abs() < 1e-15);
//! ```

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    MulElem(usize, usize),
    BroadcastAddCols(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    SoftmaxVec(usize),
    Transpose(usize),
    Scale(usize, f64),
    SelectColumn(usize, usize),
    Sum(usize),
    /// Negative log likelihood of one entry of a probability vector,
    /// with the probability clamped at 1e-12 inside the log.
    Nll(usize, usize),
}

struct Entry {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape {
    entries: Vec<Entry>,
    params: Vec<usize>,
}

/// Per-variable gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    /// Registered parameters always have a gradient (zeros if unused).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            entries: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.entries.push(Entry { value, op });
        Var(self.entries.len() - 1)
    }

    /// Record a constant (no gradient flows into it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Record a trainable parameter; backward always reports its gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf);
        self.params.push(v.0);
        v
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.entries
            .get(v.0)
            .map(|e| &e.value)
            .ok_or(Error::UnknownVar { id: v.0 })
    }

    fn val(&self, id: usize) -> &Tensor {
        &self.entries[id].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.matmul(self.value(b)?)?;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.add(self.value(b)?)?;
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.mul_elem(self.value(b)?)?;
        Ok(self.push(out, Op::MulElem(a.0, b.0)))
    }

    pub fn broadcast_add_cols(&mut self, m: Var, v: Var) -> Result<Var> {
        let out = self.value(m)?.broadcast_add_cols(self.value(v)?)?;
        Ok(self.push(out, Op::BroadcastAddCols(m.0, v.0)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x)?.tanh_elem()?;
        Ok(self.push(out, Op::Tanh(x.0)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x)?.sigmoid_elem()?;
        Ok(self.push(out, Op::Sigmoid(x.0)))
    }

    pub fn softmax_vec(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x)?.softmax_vec()?;
        Ok(self.push(out, Op::SoftmaxVec(x.0)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x)?.transpose();
        Ok(self.push(out, Op::Transpose(x.0)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x)?.scale(c)?;
        Ok(self.push(out, Op::Scale(x.0, c)))
    }

    /// Column `j` of a matrix as a column vector. The differentiable form
    /// of multiplying by a one-hot vector.
    pub fn select_column(&mut self, m: Var, j: usize) -> Result<Var> {
        let out = self.value(m)?.column(j)?;
        Ok(self.push(out, Op::SelectColumn(m.0, j)))
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x)?.sum();
        let out = Tensor::scalar(s)?;
        Ok(self.push(out, Op::Sum(x.0)))
    }

    /// `-ln(max(p[label], 1e-12))` for a probability column vector.
    pub fn nll_loss(&mut self, p: Var, label: usize) -> Result<Var> {
        let pv = self.value(p)?;
        if pv.cols() != 1 {
            return Err(Error::DimensionMismatch {
                op: "nll_loss",
                lhs: format!("{}x{}", pv.rows(), pv.cols()),
                rhs: "column vector".into(),
            });
        }
        if label >= pv.rows() {
            return Err(Error::IndexOutOfRange {
                what: "class label",
                index: label,
                bound: pv.rows(),
            });
        }
        let loss = -pv.get(label, 0).max(1e-12).ln();
        let out = Tensor::scalar(loss)?;
        Ok(self.push(out, Op::Nll(p.0, label)))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients for
    /// every registered parameter are always present in the result.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss)?;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let n = self.entries.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0)?);

        // Nodes were pushed in forward order, so reverse index order is a
        // reverse topological order.
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            match self.entries[id].op.clone() {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.val(b).transpose())?;
                    let db = self.val(a).transpose().matmul(&g)?;
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone())?;
                    accumulate(&mut grads, b, g)?;
                }
                Op::MulElem(a, b) => {
                    let da = g.mul_elem(self.val(b))?;
                    let db = g.mul_elem(self.val(a))?;
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                Op::BroadcastAddCols(m, v) => {
                    let mut dv = Tensor::zeros(self.val(v).rows(), 1);
                    for r in 0..g.rows() {
                        let mut acc = 0.0;
                        for c in 0..g.cols() {
                            acc += g.get(r, c);
                        }
                        dv.set(r, 0, acc);
                    }
                    accumulate(&mut grads, m, g)?;
                    accumulate(&mut grads, v, dv)?;
                }
                Op::Tanh(x) => {
                    let y = &self.entries[id].value;
                    let mut dx = g.clone();
                    for (d, &yv) in dx.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        *d *= 1.0 - yv * yv;
                    }
                    accumulate(&mut grads, x, dx)?;
                }
                Op::Sigmoid(x) => {
                    let y = &self.entries[id].value;
                    let mut dx = g.clone();
                    for (d, &yv) in dx.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        *d *= yv * (1.0 - yv);
                    }
                    accumulate(&mut grads, x, dx)?;
                }
                Op::SoftmaxVec(x) => {
                    // dx_i = p_i * (g_i - sum_j g_j p_j)
                    let p = &self.entries[id].value;
                    let dot: f64 = g
                        .as_slice()
                        .iter()
                        .zip(p.as_slice())
                        .map(|(&gi, &pi)| gi * pi)
                        .sum();
                    let mut dx = Tensor::zeros(p.rows(), 1);
                    for i in 0..p.rows() {
                        dx.set(i, 0, p.get(i, 0) * (g.get(i, 0) - dot));
                    }
                    accumulate(&mut grads, x, dx)?;
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads, x, g.transpose())?;
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, x, g.scale(c)?)?;
                }
                Op::SelectColumn(m, j) => {
                    let src = self.val(m);
                    let mut dm = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        dm.set(r, j, g.get(r, 0));
                    }
                    accumulate(&mut grads, m, dm)?;
                }
                Op::Sum(x) => {
                    let src = self.val(x);
                    let mut dx = Tensor::zeros(src.rows(), src.cols());
                    let gv = g.get(0, 0);
                    for d in dx.as_mut_slice() {
                        *d = gv;
                    }
                    accumulate(&mut grads, x, dx)?;
                }
                Op::Nll(p, label) => {
                    let pv = self.val(p);
                    let mut dp = Tensor::zeros(pv.rows(), 1);
                    let pl = pv.get(label, 0);
                    if pl > 1e-12 {
                        dp.set(label, 0, -g.get(0, 0) / pl);
                    }
                    accumulate(&mut grads, p, dp)?;
                }
            }
        }

        // Parameters get zero gradients if the loss never touched them.
        for &p in &self.params {
            if grads[p].is_none() {
                let t = &self.entries[p].value;
                grads[p] = Some(Tensor::zeros(t.rows(), t.cols()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) -> Result<()> {
    grads[id] = Some(match grads[id].take() {
        Some(existing) => existing.add(&delta)?,
        None => delta,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap());
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().as_slice(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn tanh_gradient_closed_form() {
        let vals = [0.3, -1.1, 2.0, 0.0];
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(2, 2, vals.to_vec()).unwrap());
        let y = tape.tanh(w).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(w).unwrap();
        for (gv, x) in g.as_slice().iter().zip(vals) {
            let expected = 1.0 - x.tanh().powi(2);
            assert!((gv - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(
            tape.backward(w),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn unknown_var_rejected() {
        let tape = Tape::new();
        assert!(matches!(
            tape.value(Var(5)),
            Err(Error::UnknownVar { id: 5 })
        ));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::scalar(2.0).unwrap());
        let unused = tape.param(Tensor::zeros(3, 2));
        let loss = tape.sum(used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(3, 2));
    }

    #[test]
    fn nll_matches_closed_form() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::col_vec(&[0.25, 0.25, 0.5]).unwrap());
        let loss = tape.nll_loss(p, 2).unwrap();
        assert!((tape.value(loss).unwrap().get(0, 0) - 2.0f64.ln()).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(p).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0, -2.0]);
    }

    /// Central finite differences, the independent gradient oracle.
    fn finite_diff_check(
        build: impl Fn(&mut Tape, Var) -> Var,
        w0: &Tensor,
        eps: f64,
        rel_tol: f64,
    ) {
        let mut tape = Tape::new();
        let w = tape.param(w0.clone());
        let loss = build(&mut tape, w);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(w).unwrap().clone();

        for i in 0..w0.len() {
            let eval = |delta: f64| {
                let mut perturbed = w0.clone();
                perturbed.as_mut_slice()[i] += delta;
                let mut t = Tape::new();
                let v = t.param(perturbed);
                let l = build(&mut t, v);
                t.value(l).unwrap().get(0, 0)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.as_slice()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < rel_tol,
                "entry {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn composed_graph_matches_finite_differences() {
        let mut rng = RngStream::new(17);
        let w0 = Tensor::uniform_init(3, 2, 0.8, &mut rng);
        let fixed = Tensor::uniform_init(2, 3, 0.8, &mut rng);
        finite_diff_check(
            |tape, w| {
                let f = tape.constant(fixed.clone());
                let prod = tape.matmul(w, f).unwrap(); // 3x3
                let t = tape.tanh(prod).unwrap();
                let s = tape.sigmoid(t).unwrap();
                tape.sum(s).unwrap()
            },
            &w0,
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn softmax_and_nll_match_finite_differences() {
        let mut rng = RngStream::new(23);
        let w0 = Tensor::uniform_init(5, 1, 1.5, &mut rng);
        finite_diff_check(
            |tape, w| {
                let p = tape.softmax_vec(w).unwrap();
                tape.nll_loss(p, 3).unwrap()
            },
            &w0,
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn broadcast_select_transpose_match_finite_differences() {
        let mut rng = RngStream::new(31);
        let w0 = Tensor::uniform_init(3, 4, 1.0, &mut rng);
        let v = Tensor::uniform_init(3, 1, 1.0, &mut rng);
        finite_diff_check(
            |tape, w| {
                let vc = tape.constant(v.clone());
                let b = tape.broadcast_add_cols(w, vc).unwrap();
                let c = tape.select_column(b, 2).unwrap();
                let t = tape.transpose(c).unwrap();
                let sm_in = tape.transpose(t).unwrap();
                let p = tape.softmax_vec(sm_in).unwrap();
                tape.nll_loss(p, 1).unwrap()
            },
            &w0,
            1e-5,
            1e-4,
        );
    }
}
