//! Wengert tape: primitives are evaluated eagerly on record, and a single
//! reverse sweep propagates gradients to every leaf with `requires_grad`.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ChannelBias { x: Var, b: Var },
    RowBias { x: Var, b: Var },
    ChwToRows(Var),
    RowsToChw { x: Var },
    GatherRows { x: Var, idx: Rc<Vec<usize>> },
    AddRowsByIndex { x: Var, table: Var, index: Rc<Vec<usize>> },
    RepeatRows { x: Var, times: usize },
    RowDot(Var, Var),
    SumGroups { x: Var, group: usize },
    SumAll(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    L2NormRows { x: Var, eps: f64 },
    ConcatCols(Var, Var),
    UpsampleNearest2(Var),
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        windows: Rc<Vec<Vec<usize>>>,
        // softmax probabilities saved per (window, head): wa x wa each
        probs: Rc<Vec<f64>>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Recording tape. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Exact Gaussian CDF.
pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// x * Phi(x), the exact Gaussian-CDF form.
pub fn gelu_scalar(x: f64) -> f64 {
    x * gauss_cdf(x)
}

fn gelu_grad_scalar(x: f64) -> f64 {
    gauss_cdf(x) + x * gauss_pdf(x)
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a leaf from a tensor (data copied).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape.clone(),
            t.data.clone(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// Record a constant leaf (never receives gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(vec![1], vec![v])
    }

    // ---- elementwise binary ----

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            data,
            self.ng(a) || self.ng(b),
            Op::Add(a, b),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            data,
            self.ng(a) || self.ng(b),
            Op::Sub(a, b),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            data,
            self.ng(a) || self.ng(b),
            Op::Mul(a, b),
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        self.push(
            self.nodes[x.0].shape.clone(),
            data,
            self.ng(x),
            Op::Scale(x, c),
        )
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let data = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        self.push(
            self.nodes[x.0].shape.clone(),
            data,
            self.ng(x),
            Op::AddScalar(x),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for i in 0..m {
                for l in 0..k {
                    let av = da[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &db[l * n..(l + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        Ok(self.push(
            vec![m, n],
            out,
            self.ng(a) || self.ng(b),
            Op::MatMul(a, b),
        ))
    }

    /// 2-D convolution: x [C,H,W], w [D,C,k,k], zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (
            self.nodes[x.0].shape.clone(),
            self.nodes[w.0].shape.clone(),
        );
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (d, k) = (sw[0], sw[2]);
        if k % 2 == 0 {
            return Err(Error::contract(format!("conv2d kernel size {k} must be odd")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::contract(format!("conv2d stride {stride} must be 1 or 2")));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape {
                op: "conv2d (kernel larger than padded input)",
                lhs: sx,
                rhs: sw,
            });
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; d * oh * ow];
        {
            let dx = &self.nodes[x.0].data;
            let dw = &self.nodes[w.0].data;
            for od in 0..d {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            let wbase = ((od * c + ic) * k) * k;
                            let xbase = ic * h * wd;
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + iy as usize * wd;
                                let wrow = wbase + ky * k;
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += dx[xrow + ix as usize] * dw[wrow + kx];
                                }
                            }
                        }
                        out[(od * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Ok(self.push(
            vec![d, oh, ow],
            out,
            self.ng(x) || self.ng(w),
            Op::Conv2d { x, w, stride, pad },
        ))
    }

    /// Add per-channel bias b [C] to x [C,H,W].
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[b.0].shape);
        if sx.len() != 3 || sb.len() != 1 || sb[0] != sx[0] {
            return Err(Error::Shape {
                op: "channel_bias",
                lhs: sx.clone(),
                rhs: sb.clone(),
            });
        }
        let hw = sx[1] * sx[2];
        let mut data = self.nodes[x.0].data.clone();
        for (ci, bv) in self.nodes[b.0].data.iter().enumerate() {
            for v in &mut data[ci * hw..(ci + 1) * hw] {
                *v += bv;
            }
        }
        Ok(self.push(
            sx.clone(),
            data,
            self.ng(x) || self.ng(b),
            Op::ChannelBias { x, b },
        ))
    }

    /// Add row vector b [d] to every row of x [n,d].
    pub fn row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[b.0].shape);
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Shape {
                op: "row_bias",
                lhs: sx.clone(),
                rhs: sb.clone(),
            });
        }
        let d = sx[1];
        let mut data = self.nodes[x.0].data.clone();
        for row in data.chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(&self.nodes[b.0].data) {
                *v += bv;
            }
        }
        Ok(self.push(
            sx.clone(),
            data,
            self.ng(x) || self.ng(b),
            Op::RowBias { x, b },
        ))
    }

    /// [C,H,W] -> [H*W, C] token layout.
    pub fn chw_to_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 3 {
            return Err(Error::contract(format!("chw_to_rows expects rank 3, got {sx:?}")));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        let dx = &self.nodes[x.0].data;
        for ci in 0..c {
            for p in 0..hw {
                out[p * c + ci] = dx[ci * hw + p];
            }
        }
        Ok(self.push(vec![hw, c], out, self.ng(x), Op::ChwToRows(x)))
    }

    /// [h*w, C] -> [C,h,w].
    pub fn rows_to_chw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 2 || sx[0] != h * w {
            return Err(Error::contract(format!(
                "rows_to_chw expects [{}x{}, C], got {sx:?}",
                h, w
            )));
        }
        let c = sx[1];
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        let dx = &self.nodes[x.0].data;
        for p in 0..hw {
            for ci in 0..c {
                out[ci * hw + p] = dx[p * c + ci];
            }
        }
        Ok(self.push(vec![c, h, w], out, self.ng(x), Op::RowsToChw { x }))
    }

    /// Select rows of x [n,d] by index, duplicates allowed.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 2 {
            return Err(Error::contract(format!("gather_rows expects rank 2, got {sx:?}")));
        }
        let (n, d) = (sx[0], sx[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            out.extend_from_slice(&self.nodes[x.0].data[i * d..(i + 1) * d]);
        }
        let m = idx.len();
        Ok(self.push(
            vec![m, d],
            out,
            self.ng(x),
            Op::GatherRows {
                x,
                idx: Rc::new(idx),
            },
        ))
    }

    /// Row r of the output is x[r] + table[index[r]].
    pub fn add_rows_by_index(&mut self, x: Var, table: Var, index: Vec<usize>) -> Result<Var> {
        let (sx, st) = (
            self.nodes[x.0].shape.clone(),
            self.nodes[table.0].shape.clone(),
        );
        if sx.len() != 2 || st.len() != 2 || sx[1] != st[1] || index.len() != sx[0] {
            return Err(Error::Shape {
                op: "add_rows_by_index",
                lhs: sx,
                rhs: st,
            });
        }
        let d = sx[1];
        let m = st[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::contract(format!(
                "add_rows_by_index entry {bad} out of range for {m} table rows"
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        for (r, &ti) in index.iter().enumerate() {
            let trow = &self.nodes[table.0].data[ti * d..(ti + 1) * d];
            for (v, tv) in data[r * d..(r + 1) * d].iter_mut().zip(trow) {
                *v += tv;
            }
        }
        Ok(self.push(
            sx,
            data,
            self.ng(x) || self.ng(table),
            Op::AddRowsByIndex {
                x,
                table,
                index: Rc::new(index),
            },
        ))
    }

    /// Each row of x [n,d] repeated `times` consecutively -> [n*times, d].
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 2 || times == 0 {
            return Err(Error::contract(format!(
                "repeat_rows expects rank 2 and times >= 1, got {sx:?} x{times}"
            )));
        }
        let (n, d) = (sx[0], sx[1]);
        let mut out = Vec::with_capacity(n * times * d);
        for i in 0..n {
            let row = &self.nodes[x.0].data[i * d..(i + 1) * d];
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        Ok(self.push(
            vec![n * times, d],
            out,
            self.ng(x),
            Op::RepeatRows { x, times },
        ))
    }

    /// Per-row dot product of two [n,d] matrices -> [n].
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("row_dot", a, b)?;
        let sx = self.nodes[a.0].shape.clone();
        if sx.len() != 2 {
            return Err(Error::contract(format!("row_dot expects rank 2, got {sx:?}")));
        }
        let (n, d) = (sx[0], sx[1]);
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let out: Vec<f64> = (0..n)
            .map(|i| {
                da[i * d..(i + 1) * d]
                    .iter()
                    .zip(&db[i * d..(i + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        Ok(self.push(
            vec![n],
            out,
            self.ng(a) || self.ng(b),
            Op::RowDot(a, b),
        ))
    }

    /// Sum consecutive groups of `group` elements of a flat vector.
    pub fn sum_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let n = self.nodes[x.0].data.len();
        if group == 0 || n % group != 0 {
            return Err(Error::contract(format!(
                "sum_groups: length {n} not divisible by group {group}"
            )));
        }
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .chunks(group)
            .map(|c| c.iter().sum())
            .collect();
        let m = n / group;
        Ok(self.push(vec![m], out, self.ng(x), Op::SumGroups { x, group }))
    }

    /// Sum of all elements -> scalar [1].
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(vec![1], vec![s], self.ng(x), Op::SumAll(x))
    }

    /// Mean of all elements -> scalar [1].
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- elementwise unary ----

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        self.push(self.nodes[x.0].shape.clone(), data, self.ng(x), op)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_scalar, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus_scalar, Op::Softplus(x))
    }

    /// Softmax along the last axis, max-subtracted for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let sx = self.nodes[x.0].shape.clone();
        let d = *sx.last().expect("softmax on rank-0 tensor");
        let mut out = vec![0.0; self.nodes[x.0].data.len()];
        for (orow, irow) in out
            .chunks_mut(d)
            .zip(self.nodes[x.0].data.chunks(d))
        {
            softmax_row(irow, orow);
        }
        self.push(sx, out, self.ng(x), Op::SoftmaxRows(x))
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        let d = *sx.last().ok_or_else(|| Error::contract("layernorm on rank-0"))?;
        let (sg, sb) = (&self.nodes[gain.0].shape, &self.nodes[bias.0].shape);
        if sg != &vec![d] || sb != &vec![d] {
            return Err(Error::Shape {
                op: "layernorm",
                lhs: sx,
                rhs: sg.clone(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::contract("layernorm eps must be > 0"));
        }
        let mut out = vec![0.0; self.nodes[x.0].data.len()];
        {
            let g = &self.nodes[gain.0].data;
            let b = &self.nodes[bias.0].data;
            for (orow, irow) in out.chunks_mut(d).zip(self.nodes[x.0].data.chunks(d)) {
                let mu: f64 = irow.iter().sum::<f64>() / d as f64;
                let var: f64 = irow.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for i in 0..d {
                    orow[i] = (irow[i] - mu) * inv * g[i] + b[i];
                }
            }
        }
        Ok(self.push(
            sx,
            out,
            self.ng(x) || self.ng(gain) || self.ng(bias),
            Op::LayerNorm { x, gain, bias, eps },
        ))
    }

    /// L2-normalize every row: v / max(||v||, eps).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 2 {
            return Err(Error::contract(format!(
                "l2_normalize_rows expects rank 2, got {sx:?}"
            )));
        }
        let d = sx[1];
        let mut out = vec![0.0; self.nodes[x.0].data.len()];
        for (orow, irow) in out.chunks_mut(d).zip(self.nodes[x.0].data.chunks(d)) {
            let r = irow.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = 1.0 / r.max(eps);
            for i in 0..d {
                orow[i] = irow[i] * inv;
            }
        }
        Ok(self.push(sx, out, self.ng(x), Op::L2NormRows { x, eps }))
    }

    /// Concatenate along the column axis: [n,d1] ++ [n,d2] -> [n,d1+d2].
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (
            self.nodes[a.0].shape.clone(),
            self.nodes[b.0].shape.clone(),
        );
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, d1, d2) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(n * (d1 + d2));
        for i in 0..n {
            out.extend_from_slice(&self.nodes[a.0].data[i * d1..(i + 1) * d1]);
            out.extend_from_slice(&self.nodes[b.0].data[i * d2..(i + 1) * d2]);
        }
        Ok(self.push(
            vec![n, d1 + d2],
            out,
            self.ng(a) || self.ng(b),
            Op::ConcatCols(a, b),
        ))
    }

    /// Nearest-neighbor 2x upsample of [C,H,W].
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 3 {
            return Err(Error::contract(format!(
                "upsample_nearest2 expects rank 3, got {sx:?}"
            )));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        let dx = &self.nodes[x.0].data;
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ci * 2 * h + y) * 2 * w + xx] = dx[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(
            vec![c, 2 * h, 2 * w],
            out,
            self.ng(x),
            Op::UpsampleNearest2(x),
        ))
    }

    /// Windowed multi-head attention with an additive per-key bias.
    ///
    /// q, k, v: [n,d]; `windows` lists token indices per window (equal sizes);
    /// `key_bias[j]` is added to every logit attending to key token j after the
    /// 1/sqrt(d_head) scaling.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        windows: Rc<Vec<Vec<usize>>>,
        key_bias: Rc<Vec<f64>>,
    ) -> Result<Var> {
        let sq = self.nodes[q.0].shape.clone();
        self.check_same_shape("window_attention", q, k)?;
        self.check_same_shape("window_attention", q, v)?;
        if sq.len() != 2 {
            return Err(Error::contract("window_attention expects rank-2 tokens"));
        }
        let (n, d) = (sq[0], sq[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "token dim {d} not divisible by {heads} heads"
            )));
        }
        if key_bias.len() != n {
            return Err(Error::contract(format!(
                "key_bias length {} != token count {n}",
                key_bias.len()
            )));
        }
        let covered: usize = windows.iter().map(|w| w.len()).sum();
        if covered != n {
            return Err(Error::contract(format!(
                "windows cover {covered} tokens, expected {n}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::new();
        {
            let dq = &self.nodes[q.0].data;
            let dk = &self.nodes[k.0].data;
            let dv = &self.nodes[v.0].data;
            let mut logits: Vec<f64> = Vec::new();
            for win in windows.iter() {
                let wa = win.len();
                for hd in 0..heads {
                    let off = hd * dh;
                    logits.clear();
                    logits.resize(wa * wa, 0.0);
                    for (qi, &qt) in win.iter().enumerate() {
                        let qrow = &dq[qt * d + off..qt * d + off + dh];
                        for (ki, &kt) in win.iter().enumerate() {
                            let krow = &dk[kt * d + off..kt * d + off + dh];
                            let dot: f64 =
                                qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                            logits[qi * wa + ki] = dot * scale + key_bias[kt];
                        }
                    }
                    // softmax per query row, then weighted sum of values
                    for qi in 0..wa {
                        let row = &mut logits[qi * wa..(qi + 1) * wa];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for x in row.iter_mut() {
                            *x = (*x - mx).exp();
                            sum += *x;
                        }
                        for x in row.iter_mut() {
                            *x /= sum;
                        }
                        let qt = win[qi];
                        let orow = &mut out[qt * d + off..qt * d + off + dh];
                        for (ki, &kt) in win.iter().enumerate() {
                            let p = row[ki];
                            let vrow = &dv[kt * d + off..kt * d + off + dh];
                            for (o, vv) in orow.iter_mut().zip(vrow) {
                                *o += p * vv;
                            }
                        }
                    }
                    probs.extend_from_slice(&logits);
                }
            }
        }
        let needs = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            vec![n, d],
            out,
            needs,
            Op::WindowAttention {
                q,
                k,
                v,
                heads,
                scale,
                windows,
                probs: Rc::new(probs),
            },
        ))
    }

    // ---- reverse sweep ----

    /// Backpropagate from a scalar loss; gradients retrievable via `grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f64> {
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(vec![0.0; self.nodes[v.0].data.len()]);
        }
        self.grads[v.0].as_mut().unwrap()
    }

    fn add_into(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let buf = self.grad_buf(v);
        for (a, b) in buf.iter_mut().zip(contrib) {
            *a += b;
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&mut self, id: usize, gout: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_into(a, gout);
                self.add_into(b, gout);
            }
            Op::Sub(a, b) => {
                self.add_into(a, gout);
                if self.ng(b) {
                    let neg: Vec<f64> = gout.iter().map(|v| -v).collect();
                    self.add_into(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(g, y)| g * y)
                        .collect();
                    self.add_into(a, &g);
                }
                if self.ng(b) {
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, x)| g * x)
                        .collect();
                    self.add_into(b, &g);
                }
            }
            Op::Scale(x, c) => {
                if self.ng(x) {
                    let g: Vec<f64> = gout.iter().map(|v| v * c).collect();
                    self.add_into(x, &g);
                }
            }
            Op::AddScalar(x) => self.add_into(x, gout),
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.ng(a) {
                    // dA = dC * B^T
                    let mut ga = vec![0.0; m * k];
                    let db = &self.nodes[b.0].data;
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            let brow = &db[l * n..(l + 1) * n];
                            let grow = &gout[i * n..(i + 1) * n];
                            for (bv, gv) in brow.iter().zip(grow) {
                                acc += bv * gv;
                            }
                            ga[i * k + l] = acc;
                        }
                    }
                    self.add_into(a, &ga);
                }
                if self.ng(b) {
                    // dB = A^T * dC
                    let mut gb = vec![0.0; k * n];
                    let da = &self.nodes[a.0].data;
                    for i in 0..m {
                        for l in 0..k {
                            let av = da[i * k + l];
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &gout[i * n..(i + 1) * n];
                            let brow = &mut gb[l * n..(l + 1) * n];
                            for (bv, gv) in brow.iter_mut().zip(grow) {
                                *bv += av * gv;
                            }
                        }
                    }
                    self.add_into(b, &gb);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.nodes[x.0].shape.clone();
                let sw = self.nodes[w.0].shape.clone();
                let (c, h, wd) = (sx[0], sx[1], sx[2]);
                let (d, k) = (sw[0], sw[2]);
                let oh = (h + 2 * pad - k) / stride + 1;
                let ow = (wd + 2 * pad - k) / stride + 1;
                let ngx = self.ng(x);
                let ngw = self.ng(w);
                let mut gx = vec![0.0; c * h * wd];
                let mut gw = vec![0.0; d * c * k * k];
                {
                    let dx = &self.nodes[x.0].data;
                    let dw = &self.nodes[w.0].data;
                    for od in 0..d {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = gout[(od * oh + oy) * ow + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                for ic in 0..c {
                                    let wbase = ((od * c + ic) * k) * k;
                                    let xbase = ic * h * wd;
                                    for ky in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let xrow = xbase + iy as usize * wd;
                                        let wrow = wbase + ky * k;
                                        for kx in 0..k {
                                            let ix =
                                                (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            if ngx {
                                                gx[xrow + ix as usize] += g * dw[wrow + kx];
                                            }
                                            if ngw {
                                                gw[wrow + kx] += g * dx[xrow + ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if ngx {
                    self.add_into(x, &gx);
                }
                if ngw {
                    self.add_into(w, &gw);
                }
            }
            Op::ChannelBias { x, b } => {
                self.add_into(x, gout);
                if self.ng(b) {
                    let sx = &self.nodes[x.0].shape;
                    let hw = sx[1] * sx[2];
                    let gb: Vec<f64> = gout.chunks(hw).map(|ch| ch.iter().sum()).collect();
                    self.add_into(b, &gb);
                }
            }
            Op::RowBias { x, b } => {
                self.add_into(x, gout);
                if self.ng(b) {
                    let d = self.nodes[x.0].shape[1];
                    let mut gb = vec![0.0; d];
                    for row in gout.chunks(d) {
                        for (g, r) in gb.iter_mut().zip(row) {
                            *g += r;
                        }
                    }
                    self.add_into(b, &gb);
                }
            }
            Op::ChwToRows(x) => {
                if self.ng(x) {
                    let sx = &self.nodes[x.0].shape;
                    let (c, h, w) = (sx[0], sx[1], sx[2]);
                    let hw = h * w;
                    let mut gx = vec![0.0; c * hw];
                    for p in 0..hw {
                        for ci in 0..c {
                            gx[ci * hw + p] = gout[p * c + ci];
                        }
                    }
                    self.add_into(x, &gx);
                }
            }
            Op::RowsToChw { x } => {
                if self.ng(x) {
                    let so = &self.nodes[id].shape;
                    let (c, h, w) = (so[0], so[1], so[2]);
                    let hw = h * w;
                    let mut gx = vec![0.0; c * hw];
                    for p in 0..hw {
                        for ci in 0..c {
                            gx[p * c + ci] = gout[ci * hw + p];
                        }
                    }
                    self.add_into(x, &gx);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.ng(x) {
                    let d = self.nodes[x.0].shape[1];
                    let mut gx = vec![0.0; self.nodes[x.0].data.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (g, v) in gx[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&gout[r * d..(r + 1) * d])
                        {
                            *g += v;
                        }
                    }
                    self.add_into(x, &gx);
                }
            }
            Op::AddRowsByIndex { x, table, index } => {
                self.add_into(x, gout);
                if self.ng(table) {
                    let d = self.nodes[table.0].shape[1];
                    let mut gt = vec![0.0; self.nodes[table.0].data.len()];
                    for (r, &ti) in index.iter().enumerate() {
                        for (g, v) in gt[ti * d..(ti + 1) * d]
                            .iter_mut()
                            .zip(&gout[r * d..(r + 1) * d])
                        {
                            *g += v;
                        }
                    }
                    self.add_into(table, &gt);
                }
            }
            Op::RepeatRows { x, times } => {
                if self.ng(x) {
                    let (n, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let mut gx = vec![0.0; n * d];
                    for i in 0..n {
                        for t in 0..times {
                            let src = &gout[(i * times + t) * d..(i * times + t + 1) * d];
                            for (g, v) in gx[i * d..(i + 1) * d].iter_mut().zip(src) {
                                *g += v;
                            }
                        }
                    }
                    self.add_into(x, &gx);
                }
            }
            Op::RowDot(a, b) => {
                let d = self.nodes[a.0].shape[1];
                if self.ng(a) {
                    let g: Vec<f64> = self.nodes[b.0]
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, y)| gout[i / d] * y)
                        .collect();
                    self.add_into(a, &g);
                }
                if self.ng(b) {
                    let g: Vec<f64> = self.nodes[a.0]
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, x)| gout[i / d] * x)
                        .collect();
                    self.add_into(b, &g);
                }
            }
            Op::SumGroups { x, group } => {
                if self.ng(x) {
                    let g: Vec<f64> = (0..self.nodes[x.0].data.len())
                        .map(|i| gout[i / group])
                        .collect();
                    self.add_into(x, &g);
                }
            }
            Op::SumAll(x) => {
                if self.ng(x) {
                    let g = vec![gout[0]; self.nodes[x.0].data.len()];
                    self.add_into(x, &g);
                }
            }
            Op::Exp(x) => {
                if self.ng(x) {
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[id].data)
                        .map(|(g, y)| g * y)
                        .collect();
                    self.add_into(x, &g);
                }
            }
            Op::Ln(x) => {
                if self.ng(x) {
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(g, v)| g / v)
                        .collect();
                    self.add_into(x, &g);
                }
            }
            Op::Abs(x) => {
                if self.ng(x) {
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(g, v)| {
                            if *v > 0.0 {
                                *g
                            } else if *v < 0.0 {
                                -*g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.add_into(x, &g);
                }
            }
            Op::Gelu(x) => {
                if self.ng(x) {
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(g, v)| g * gelu_grad_scalar(*v))
                        .collect();
                    self.add_into(x, &g);
                }
            }
            Op::Relu(x) => {
                if self.ng(x) {
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.add_into(x, &g);
                }
            }
            Op::Sigmoid(x) => {
                if self.ng(x) {
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[id].data)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    self.add_into(x, &g);
                }
            }
            Op::Softplus(x) => {
                if self.ng(x) {
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(g, v)| g * sigmoid_scalar(*v))
                        .collect();
                    self.add_into(x, &g);
                }
            }
            Op::SoftmaxRows(x) => {
                if self.ng(x) {
                    let d = *self.nodes[id].shape.last().unwrap();
                    let y = &self.nodes[id].data;
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..y.len() / d {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gout[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..d {
                            gx[r * d + i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    self.add_into(x, &gx);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = *self.nodes[x.0].shape.last().unwrap();
                let xd = self.nodes[x.0].data.clone();
                let g = self.nodes[gain.0].data.clone();
                let rows = xd.len() / d;
                let mut gx = vec![0.0; xd.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &gout[r * d..(r + 1) * d];
                    let mu: f64 = xr.iter().sum::<f64>() / d as f64;
                    let var: f64 =
                        xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mu) * inv).collect();
                    let dxhat: Vec<f64> =
                        gr.iter().zip(&g).map(|(gv, gainv)| gv * gainv).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        gx[r * d + i] =
                            inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                        gg[i] += gr[i] * xhat[i];
                        gb[i] += gr[i];
                    }
                }
                if self.ng(x) {
                    self.add_into(x, &gx);
                }
                if self.ng(gain) {
                    self.add_into(gain, &gg);
                }
                if self.ng(bias) {
                    self.add_into(bias, &gb);
                }
            }
            Op::L2NormRows { x, eps } => {
                if self.ng(x) {
                    let d = self.nodes[x.0].shape[1];
                    let xd = &self.nodes[x.0].data;
                    let mut gx = vec![0.0; xd.len()];
                    for r in 0..xd.len() / d {
                        let vr = &xd[r * d..(r + 1) * d];
                        let gr = &gout[r * d..(r + 1) * d];
                        let norm = vr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let inv = 1.0 / norm.max(eps);
                        let vdotg: f64 = vr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        // below eps the denominator is the constant eps
                        let second = if norm >= eps {
                            vdotg / (norm * norm * norm)
                        } else {
                            0.0
                        };
                        for i in 0..d {
                            gx[r * d + i] = gr[i] * inv - vr[i] * second;
                        }
                    }
                    self.add_into(x, &gx);
                }
            }
            Op::ConcatCols(a, b) => {
                let (d1, d2) = (self.nodes[a.0].shape[1], self.nodes[b.0].shape[1]);
                let n = self.nodes[a.0].shape[0];
                if self.ng(a) {
                    let mut ga = vec![0.0; n * d1];
                    for i in 0..n {
                        ga[i * d1..(i + 1) * d1]
                            .copy_from_slice(&gout[i * (d1 + d2)..i * (d1 + d2) + d1]);
                    }
                    self.add_into(a, &ga);
                }
                if self.ng(b) {
                    let mut gb = vec![0.0; n * d2];
                    for i in 0..n {
                        gb[i * d2..(i + 1) * d2].copy_from_slice(
                            &gout[i * (d1 + d2) + d1..(i + 1) * (d1 + d2)],
                        );
                    }
                    self.add_into(b, &gb);
                }
            }
            Op::UpsampleNearest2(x) => {
                if self.ng(x) {
                    let sx = &self.nodes[x.0].shape;
                    let (c, h, w) = (sx[0], sx[1], sx[2]);
                    let mut gx = vec![0.0; c * h * w];
                    for ci in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[(ci * h + y / 2) * w + xx / 2] +=
                                    gout[(ci * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    self.add_into(x, &gx);
                }
            }
            Op::WindowAttention {
                q,
                k,
                v,
                heads,
                scale,
                windows,
                probs,
                ..
            } => {
                let d = self.nodes[q.0].shape[1];
                let dh = d / heads;
                let n = self.nodes[q.0].shape[0];
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; n * d];
                let mut gv = vec![0.0; n * d];
                {
                    let dq = &self.nodes[q.0].data;
                    let dk = &self.nodes[k.0].data;
                    let dv = &self.nodes[v.0].data;
                    let mut poff = 0usize;
                    for win in windows.iter() {
                        let wa = win.len();
                        for hd in 0..heads {
                            let off = hd * dh;
                            let a = &probs[poff..poff + wa * wa];
                            poff += wa * wa;
                            for (qi, &qt) in win.iter().enumerate() {
                                let go = &gout[qt * d + off..qt * d + off + dh];
                                // dA[qi,ki] = go . v_ki ; dV accumulated
                                let mut da = vec![0.0; wa];
                                for (ki, &kt) in win.iter().enumerate() {
                                    let p = a[qi * wa + ki];
                                    let vrow = &dv[kt * d + off..kt * d + off + dh];
                                    let mut dot = 0.0;
                                    for (gv_, vv) in go.iter().zip(vrow) {
                                        dot += gv_ * vv;
                                    }
                                    da[ki] = dot;
                                    let gvrow = &mut gv[kt * d + off..kt * d + off + dh];
                                    for (gvv, gov) in gvrow.iter_mut().zip(go) {
                                        *gvv += p * gov;
                                    }
                                }
                                // softmax backward: dS = A .* (dA - sum(dA .* A))
                                let srow = &a[qi * wa..(qi + 1) * wa];
                                let dot: f64 =
                                    da.iter().zip(srow).map(|(x, y)| x * y).sum();
                                let qrow = &dq[qt * d + off..qt * d + off + dh];
                                let gqrow = &mut gq[qt * d + off..qt * d + off + dh];
                                for (ki, &kt) in win.iter().enumerate() {
                                    let ds = srow[ki] * (da[ki] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let krow = &dk[kt * d + off..kt * d + off + dh];
                                    for (gqv, kv) in gqrow.iter_mut().zip(krow) {
                                        *gqv += ds * kv;
                                    }
                                    let gkrow = &mut gk[kt * d + off..kt * d + off + dh];
                                    for (gkv, qv) in gkrow.iter_mut().zip(qrow) {
                                        *gkv += ds * qv;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.ng(q) {
                    self.add_into(q, &gq);
                }
                if self.ng(k) {
                    self.add_into(k, &gk);
                }
                if self.ng(v) {
                    self.add_into(v, &gv);
                }
            }
        }
    }
}
