//! Reverse-mode gradient tape over rank-2 tensors.
//!
//! Every primitive stores its output value plus whatever it needs to form a
//! vector-Jacobian product. Backward walks the nodes in reverse recording
//! order, so each leaf receives its full gradient exactly once.

use std::rc::Rc;

use super::{matmul_nt_raw, matmul_raw, matmul_tn_raw, softmax_in_place, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedSoftmax(Var),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that do not influence the output.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` does not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds the vector `b` (length = columns of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(shape_err(format!(
                "add_row: {} vs {} columns",
                bv.len(),
                xv.cols()
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        self.push(out, Op::Silu(a))
    }

    /// Per-row layer normalisation with learned gain and bias vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != cols || b.len() != cols {
            return Err(shape_err("layer_norm gain/bias width"));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let out = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Row softmax where `allowed[r * cols + c] == false` pins the logit to
    /// `-inf` before normalisation, giving weight exactly zero.
    pub fn masked_softmax(&mut self, x: Var, allowed: Option<Rc<[bool]>>) -> Result<Var> {
        let mut out = self.value(x).clone();
        let cols = out.cols();
        if let Some(mask) = &allowed {
            if mask.len() != out.len() {
                return Err(shape_err(format!(
                    "mask has {} entries, scores {}",
                    mask.len(),
                    out.len()
                )));
            }
            for (v, &ok) in out.data_mut().iter_mut().zip(mask.iter()) {
                if !ok {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            if row.iter().all(|v| *v == f64::NEG_INFINITY) {
                return Err(Error::InvalidArgument(format!(
                    "row {r} of {cols} columns is fully masked"
                )));
            }
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::MaskedSoftmax(x)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    /// Output row `i` is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &r in index {
            if r >= av.rows() {
                return Err(shape_err(format!("gather row {r} of {}", av.rows())));
            }
            data.extend_from_slice(av.row(r));
        }
        let out = Tensor::matrix(index.len(), cols, data)?;
        Ok(self.push(out, Op::GatherRows(a, index.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Mean of squared differences between `a` and the constant `target`.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let t = self.leaf(target.clone());
        let d = self.sub(a, t)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Gradients of a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward needs a scalar output"));
        }
        self.backward_from(loss, &Tensor::filled(self.value(loss).shape(), 1.0))
    }

    /// Vector-Jacobian product of `out` with `cotangent`.
    pub fn backward_from(&self, out: Var, cotangent: &Tensor) -> Result<Grads> {
        if cotangent.shape() != self.value(out).shape() {
            return Err(shape_err(format!(
                "cotangent {:?} vs output {:?}",
                cotangent.shape(),
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(cotangent.clone());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                let da = matmul_nt_raw(g.data(), bv.data(), n, m, k);
                accumulate(grads, *a, av.shape(), da);
                let db = matmul_tn_raw(av.data(), g.data(), n, k, m);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                let da = matmul_raw(g.data(), bv.data(), n, m, k);
                accumulate(grads, *a, av.shape(), da);
                let db = matmul_tn_raw(g.data(), av.data(), n, m, k);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, g.shape(), g.data().to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, g.shape(), g.data().iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, *a, av.shape(), da);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::AddRow(x, b) => {
                accumulate(grads, *x, g.shape(), g.data().to_vec());
                let cols = g.cols();
                let mut db = vec![0.0; cols];
                for r in 0..g.rows() {
                    for (d, v) in db.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                let bshape = self.value(*b).shape().to_vec();
                accumulate(grads, *b, &bshape, db);
            }
            Op::Scale(a, s) => {
                accumulate(
                    grads,
                    *a,
                    g.shape(),
                    g.data().iter().map(|v| v * s).collect(),
                );
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                let da = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        gy * (s + x * s * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *a, av.shape(), da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let (rows, cols) = (g.rows(), g.cols());
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut dx = vec![0.0; rows * cols];
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gy = g.row(r);
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dgain[c] += gy[c] * xh[c];
                        dbias[c] += gy[c];
                        dxhat[c] = gy[c] * gv.data()[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx =
                        dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                    }
                }
                accumulate(grads, *x, g.shape(), dx);
                let gshape = gv.shape().to_vec();
                accumulate(grads, *gain, &gshape, dgain);
                let bshape = self.value(*bias).shape().to_vec();
                accumulate(grads, *bias, &bshape, dbias);
            }
            Op::MaskedSoftmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut da = vec![0.0; av.len()];
                da[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, av.shape(), da);
            }
            Op::GatherRows(a, index) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut da = vec![0.0; av.len()];
                for (i, &r) in index.iter().enumerate() {
                    for (d, v) in da[r * cols..(r + 1) * cols].iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                accumulate(grads, *a, av.shape(), da);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let (cols, w) = (av.cols(), g.cols());
                let mut da = vec![0.0; av.len()];
                for r in 0..g.rows() {
                    da[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, av.shape(), da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    accumulate(grads, *p, pv.shape(), g.data()[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                let total = g.cols();
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    let mut dp = Vec::with_capacity(pv.len());
                    for r in 0..g.rows() {
                        dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, *p, pv.shape(), dp);
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, av.shape(), vec![g.data()[0]; av.len()]);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let v = g.data()[0] / av.len() as f64;
                accumulate(grads, *a, av.shape(), vec![v; av.len()]);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape matches value"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Rng};

    /// Checks d(sum(w ⊙ f(x)))/dx against central differences for one unary op.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, shape: &[usize], seed: u64) -> f64 {
        let mut rng = Rng::new(seed);
        let x0 = Tensor::randn(shape, 3.0, &mut rng);
        let probe = {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let y = build(&mut t, x);
            t.value(y).shape().to_vec()
        };
        let w = Tensor::randn(&probe, 1.0, &mut rng);
        let eval = |x: &Tensor| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = build(&mut t, xv);
            t.value(y).mul(&w).unwrap().sum()
        };
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let y = build(&mut t, x);
        let grads = t.backward_from(y, &w).unwrap();
        let analytic = grads.get_or_zeros(x, &x0);
        finite_diff_check(eval, &analytic, &x0, 1e-5).unwrap()
    }

    #[test]
    fn primitive_vjps_match_finite_differences() {
        let mut rng = Rng::new(11);
        let b = Tensor::randn(&[4, 5], 2.0, &mut rng);
        let c = Tensor::randn(&[6, 4], 2.0, &mut rng);
        let row = Tensor::randn(&[4], 2.0, &mut rng);
        let gain = Tensor::randn(&[4], 1.0, &mut rng);
        let mask: Rc<[bool]> = (0..12)
            .map(|i| i % 4 != 3 || i == 3)
            .collect::<Vec<_>>()
            .into();

        let cases: Vec<(&str, &[usize], Box<dyn Fn(&mut Tape, Var) -> Var>)> = vec![
            (
                "matmul lhs",
                &[3, 4],
                Box::new(|t: &mut Tape, x| {
                    let w = t.leaf(b.clone());
                    t.matmul(x, w).unwrap()
                }),
            ),
            (
                "matmul rhs",
                &[4, 5],
                Box::new(|t: &mut Tape, x| {
                    let w = t.leaf(c.clone());
                    t.matmul(w, x).unwrap()
                }),
            ),
            (
                "matmul_nt lhs",
                &[3, 4],
                Box::new(|t: &mut Tape, x| {
                    let w = t.leaf(c.clone());
                    t.matmul_nt(x, w).unwrap()
                }),
            ),
            (
                "matmul_nt rhs",
                &[5, 4],
                Box::new(|t: &mut Tape, x| {
                    let w = t.leaf(c.clone());
                    t.matmul_nt(w, x).unwrap()
                }),
            ),
            (
                "self product",
                &[3, 4],
                Box::new(|t: &mut Tape, x| t.mul(x, x).unwrap()),
            ),
            (
                "add/sub",
                &[3, 4],
                Box::new(|t: &mut Tape, x| {
                    let s = t.scale(x, 2.0);
                    let a = t.add(x, s).unwrap();
                    t.sub(a, x).unwrap()
                }),
            ),
            (
                "add_row",
                &[3, 4],
                Box::new(|t: &mut Tape, x| {
                    let r = t.leaf(row.clone());
                    t.add_row(x, r).unwrap()
                }),
            ),
            ("silu", &[3, 4], Box::new(|t: &mut Tape, x| t.silu(x))),
            (
                "layer_norm",
                &[3, 4],
                Box::new(|t: &mut Tape, x| {
                    let g = t.leaf(gain.clone());
                    let bb = t.leaf(row.clone());
                    t.layer_norm(x, g, bb, 1e-5).unwrap()
                }),
            ),
            (
                "softmax",
                &[3, 4],
                Box::new(|t: &mut Tape, x| t.masked_softmax(x, None).unwrap()),
            ),
            (
                "masked softmax",
                &[3, 4],
                Box::new(|t: &mut Tape, x| t.masked_softmax(x, Some(mask.clone())).unwrap()),
            ),
            (
                "slices",
                &[3, 4],
                Box::new(|t: &mut Tape, x| {
                    let a = t.slice_rows(x, 1, 2).unwrap();
                    let bb = t.slice_cols(x, 1, 2).unwrap();
                    let a2 = t.slice_cols(a, 0, 2).unwrap();
                    let b2 = t.slice_rows(bb, 0, 2).unwrap();
                    t.mul(a2, b2).unwrap()
                }),
            ),
            (
                "concats",
                &[3, 4],
                Box::new(|t: &mut Tape, x| {
                    let r = t.concat_rows(&[x, x]).unwrap();
                    let cc = t.concat_cols(&[x, x]).unwrap();
                    let r2 = t.slice_cols(r, 0, 4).unwrap();
                    let c2 = t.slice_rows(cc, 0, 3).unwrap();
                    let c3 = t.slice_cols(c2, 2, 4).unwrap();
                    let r3 = t.slice_rows(r2, 3, 3).unwrap();
                    t.mul(r3, c3).unwrap()
                }),
            ),
            (
                "gather",
                &[3, 4],
                Box::new(|t: &mut Tape, x| t.gather_rows(x, &[2, 0, 2, 1]).unwrap()),
            ),
            (
                "sum",
                &[3, 4],
                Box::new(|t: &mut Tape, x| {
                    let s = t.mul(x, x).unwrap();
                    t.sum(s)
                }),
            ),
            (
                "mean",
                &[3, 4],
                Box::new(|t: &mut Tape, x| {
                    let s = t.silu(x);
                    t.mean(s)
                }),
            ),
        ];
        for (seed, (name, shape, build)) in cases.iter().enumerate() {
            let err = check_unary(|t, x| build(t, x), shape, seed as u64 + 100);
            assert!(err <= 1e-6, "{name}: relative error {err}");
        }
    }

    #[test]
    fn masked_entries_get_exact_zero_weight() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![5.0, 700.0, -3.0]]).unwrap());
        let mask: Rc<[bool]> = vec![true, false, true].into();
        let y = t.masked_softmax(x, Some(mask)).unwrap();
        let w = t.value(y);
        assert_eq!(w.get(0, 1), 0.0);
        assert!((w.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[1, 2]));
        let mask: Rc<[bool]> = vec![false, false].into();
        assert!(t.masked_softmax(x, Some(mask)).is_err());
    }

    #[test]
    fn leaf_used_twice_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }
}
