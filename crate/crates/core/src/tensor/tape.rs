//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Tape`] records every operation of one forward computation. Parameters
//! are borrowed read-only from a [`ParamStore`], so independent tapes (one per
//! sentence) can run concurrently against the same weights and hand their
//! [`Gradients`] back for an ordered reduction.

use super::array::{masked_softmax, Array, Mask, CE_FLOOR};
use super::param::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

enum Op {
    Input,
    Param(ParamId),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    PairConcat {
        x: Var,
        pairs: Vec<(usize, usize)>,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Array),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        probs: Var,
        gold: Vec<usize>,
    },
    Sum(Vec<Var>),
    SumAll(Var),
}

struct Node {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Array>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(id)) => &self.params.get(*id).value,
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Selects rows of a matrix; also serves as an embedding lookup.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let (n, d) = (src.rows(), src.cols());
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::IdOutOfRange {
                    kind: "row",
                    id: r,
                    limit: n,
                });
            }
            out.extend_from_slice(src.row(r));
        }
        let value = Array::matrix(rows.len(), d, out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Row `k` of the result is `[x[a_k]; x[b_k]]`.
    pub fn pair_concat(&mut self, x: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let src = self.value(x);
        let (n, d) = (src.rows(), src.cols());
        let mut out = Vec::with_capacity(pairs.len() * 2 * d);
        for &(a, b) in pairs {
            for r in [a, b] {
                if r >= n {
                    return Err(Error::IdOutOfRange {
                        kind: "slot",
                        id: r,
                        limit: n,
                    });
                }
                out.extend_from_slice(src.row(r));
            }
        }
        let value = Array::matrix(pairs.len(), 2 * d, out)?;
        Ok(self.push(
            value,
            Op::PairConcat {
                x,
                pairs: pairs.to_vec(),
            },
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a `[cols]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let b = self.value(bias);
        let mut value = self.value(x).clone();
        if b.len() != value.cols() {
            return Err(Error::Shape(format!(
                "bias of {} for {} columns",
                b.len(),
                value.cols()
            )));
        }
        let b = b.data().to_vec();
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bb;
            }
        }
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut value = self.value(a).clone();
        for (v, w) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= w;
        }
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Array) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::Shape("mul_const".into()));
        }
        let mut value = self.value(x).clone();
        for (v, w) in value.data_mut().iter_mut().zip(c.data()) {
            *v *= w;
        }
        Ok(self.push(value, Op::MulConst(x, c)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut value = self.value(x).clone();
        value.scale_in_place(s);
        self.push(value, Op::Scale(x, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMulNT(a, b)))
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let value = masked_softmax(self.value(x), mask)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let mask = Mask::new(v.rows(), v.cols(), true);
        self.masked_softmax(x, &mask)
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let src = self.value(x);
        let (n, d) = (src.rows(), src.cols());
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Shape("layer_norm affine size".into()));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Array::zeros(src.shape());
        let mut out = Array::zeros(src.shape());
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..d {
                xh[c] = (row[c] - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..d {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            let t = (GELU_C * (*v + GELU_K * *v * *v * *v)).tanh();
            *v = 0.5 * *v * (1.0 + t);
        }
        self.push(value, Op::Gelu(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if start + len > src.cols() {
            return Err(Error::Shape("slice_cols out of range".into()));
        }
        let n = src.rows();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let value = Array::matrix(n, len, out)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(n * width);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Array::matrix(n, width, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Sum over rows of `-ln probs[r, gold[r]]`, probabilities floored at
    /// [`CE_FLOOR`]. Returns a scalar.
    pub fn cross_entropy(&mut self, probs: Var, gold: &[usize]) -> Result<Var> {
        let p = self.value(probs);
        if p.rows() != gold.len() {
            return Err(Error::Shape(format!(
                "{} distributions, {} gold labels",
                p.rows(),
                gold.len()
            )));
        }
        let mut loss = 0.0;
        for (r, &g) in gold.iter().enumerate() {
            if g >= p.cols() {
                return Err(Error::IdOutOfRange {
                    kind: "label",
                    id: g,
                    limit: p.cols(),
                });
            }
            loss -= p.get(r, g).max(CE_FLOOR).ln();
        }
        Ok(self.push(
            Array::scalar(loss),
            Op::CrossEntropy {
                probs,
                gold: gold.to_vec(),
            },
        ))
    }

    /// Elementwise sum of same-shaped values.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let mut value = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            self.same_shape(parts[0], p, "sum")?;
            value.add_assign(self.value(p));
        }
        Ok(self.push(value, Op::Sum(parts.to_vec())))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Array::scalar(total), Op::SumAll(x))
    }

    /// Backpropagates from a scalar `loss` and returns gradients for every
    /// parameter reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar".into()));
        }
        let mut grads: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::scalar(1.0));
        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => accumulate(&mut out.grads[id.0], g),
                Op::GatherRows { x, rows } => {
                    let mut gx = Array::zeros(self.value(*x).shape());
                    for (k, &r) in rows.iter().enumerate() {
                        add_slice(gx.row_mut(r), g.row(k));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::PairConcat { x, pairs } => {
                    let mut gx = Array::zeros(self.value(*x).shape());
                    let d = gx.cols();
                    for (k, &(a, b)) in pairs.iter().enumerate() {
                        let gr = g.row(k);
                        add_slice(gx.row_mut(a), &gr[..d]);
                        add_slice(gx.row_mut(b), &gr[d..]);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddBias(x, bias) => {
                    let mut gb = Array::zeros(self.value(*bias).shape());
                    for r in 0..g.rows() {
                        add_slice(gb.data_mut(), g.row(r));
                    }
                    accumulate(&mut grads[bias.0], gb);
                    accumulate(&mut grads[x.0], g);
                }
                Op::Mul(a, b) => {
                    let mut ga = g.clone();
                    for (v, w) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *v *= w;
                    }
                    let mut gb = g;
                    for (v, w) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *v *= w;
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MulConst(x, c) => {
                    let mut gx = g;
                    for (v, w) in gx.data_mut().iter_mut().zip(c.data()) {
                        *v *= w;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Scale(x, s) => {
                    let mut gx = g;
                    gx.scale_in_place(*s);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&g, self.value(*b))?;
                    let gb = matmul_tn(self.value(*a), &g)?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = matmul(&g, self.value(*b))?;
                    let gb = matmul_tn(&g, self.value(*a))?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Softmax(x) => {
                    let p = self.nodes[i].value.as_ref().expect("softmax value");
                    let mut gx = Array::zeros(p.shape());
                    for r in 0..p.rows() {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (pp, gg)) in gx.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
                            *o = pp * (gg - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma).data();
                    let d = xhat.cols();
                    let mut gg = Array::zeros(&[d]);
                    let mut gb = Array::zeros(&[d]);
                    let mut gx = Array::zeros(xhat.shape());
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut sum_gxh = 0.0;
                        let mut sum_gxh_xh = 0.0;
                        for c in 0..d {
                            gg.data_mut()[c] += gr[c] * xr[c];
                            gb.data_mut()[c] += gr[c];
                            let gxh = gr[c] * gam[c];
                            sum_gxh += gxh;
                            sum_gxh_xh += gxh * xr[c];
                        }
                        let scale = inv / d as f64;
                        let o = gx.row_mut(r);
                        for c in 0..d {
                            let gxh = gr[c] * gam[c];
                            o[c] = scale * (d as f64 * gxh - sum_gxh - xr[c] * sum_gxh_xh);
                        }
                    }
                    accumulate(&mut grads[gamma.0], gg);
                    accumulate(&mut grads[beta.0], gb);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    for (o, &v) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        let u = GELU_C * (v + GELU_K * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *o *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Array::zeros(self.value(*x).shape());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        add_slice(&mut gx.row_mut(r)[*start..start + w], g.row(r));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.value(*p).shape().to_vec();
                        let w = shape[shape.len() - 1];
                        let mut gp = Array::zeros(&shape);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::CrossEntropy { probs, gold } => {
                    let p = self.value(*probs);
                    let mut gp = Array::zeros(p.shape());
                    let up = g.item();
                    for (r, &k) in gold.iter().enumerate() {
                        let v = p.get(r, k);
                        if v > CE_FLOOR {
                            gp.row_mut(r)[k] = -up / v;
                        }
                    }
                    accumulate(&mut grads[probs.0], gp);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        accumulate(&mut grads[p.0], g.clone());
                    }
                }
                Op::SumAll(x) => {
                    let mut gx = Array::zeros(self.value(*x).shape());
                    gx.fill(g.item());
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Array>, g: Array) {
    match slot {
        Some(a) => a.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::Shape(format!("matmul {n}x{k} by {}x{m}", b.rows())));
    }
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &bd[p * m..(p + 1) * m];
            for j in 0..m {
                o[j] += av * br[j];
            }
        }
    }
    Array::matrix(n, m, out)
}

/// `a · bᵀ` with `a: [n, k]`, `b: [m, k]`.
pub fn matmul_nt(a: &Array, b: &Array) -> Result<Array> {
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    if b.cols() != k {
        return Err(Error::Shape(format!(
            "matmul_nt {n}x{k} by ({m}x{})ᵀ",
            b.cols()
        )));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..m {
            out[i * m + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Array::matrix(n, m, out)
}

/// `aᵀ · b` with `a: [n, k]`, `b: [n, m]`.
pub fn matmul_tn(a: &Array, b: &Array) -> Result<Array> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    if b.rows() != n {
        return Err(Error::Shape("matmul_tn row mismatch".into()));
    }
    let mut out = vec![0.0; k * m];
    for r in 0..n {
        let (ar, br) = (a.row(r), b.row(r));
        for p in 0..k {
            let av = ar[p];
            if av == 0.0 {
                continue;
            }
            let o = &mut out[p * m..(p + 1) * m];
            for j in 0..m {
                o[j] += av * br[j];
            }
        }
    }
    Array::matrix(k, m, out)
}
