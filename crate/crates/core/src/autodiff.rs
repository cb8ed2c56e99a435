//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are recorded on a [`Tape`] in execution order, so the node list
//! is already topologically sorted. [`Tape::backward`] walks it once in
//! reverse and returns a [`Gradients`] table indexed by [`Var`].
//!
//! The op set is deliberately small: exactly what the transformer blocks,
//! the split-learning aggregation and the baseline MLPs need.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Variance floor used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Tensor),
    Relu(Var),
    Softmax {
        x: Var,
        mask: Option<Var>,
        mask_rows_per_batch: Option<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        floored: Vec<bool>,
    },
    Reshape(Var),
    Permute0213 {
        a: Var,
        dims: [usize; 4],
    },
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Tensor,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    ClipRows {
        x: Var,
        bound: f64,
        norms: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    SumList(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
///
/// One tape per forward pass; it is not shared between threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 2-D matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// Affine map over the last axis: `x[..., in] · w[in×out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let inp = *sx.last().unwrap_or(&1);
        if sw.len() != 2 || sw[0] != inp {
            return Err(Error::dim(format!("linear: input {sx:?} with weight {sw:?}")));
        }
        let out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::dim(format!(
                    "linear: bias {:?} for output width {out}",
                    self.shape(b)
                )));
            }
        }
        let rows = self.value(x).numel() / inp.max(1);
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            inp,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut y,
            b.is_some(),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&shape, y)?,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
            rg,
        ))
    }

    /// Batched product `a[n×m×k] · b[n×k×p]`, or `a · bᵀ` with `b[n×p×k]`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dim(format!(
                "bmm: inner dims {k} and {kb} (trans_b={trans_b})"
            )));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb, name)?;
        va.zip_map(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `a + c` for a constant tensor `c`.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(a).zip_map(c, |x, y| x + y)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::AddConst(a), rg))
    }

    /// `a ⊙ c` for a constant tensor `c` (dropout masks, gates).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let v = self.value(a).zip_map(&c, |x, y| x * y)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::MulConst(a, c), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// Softmax over the last axis with an optional additive mask.
    ///
    /// The mask is either the same shape as `x`, or `[x.shape[0], n]` and
    /// broadcast over every middle axis (a per-sample key mask shared by all
    /// heads and queries).
    pub fn softmax(&mut self, x: Var, mask: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().ok_or_else(|| Error::dim("softmax of a scalar"))?;
        let numel = self.value(x).numel();
        let rows = numel / n.max(1);
        let mut mask_rows_per_batch = None;
        if let Some(m) = mask {
            let sm = self.shape(m);
            if sm != sx.as_slice() {
                if sm.len() != 2 || sx.is_empty() || sm[0] != sx[0] || sm[1] != n {
                    return Err(Error::dim(format!("softmax mask {sm:?} for logits {sx:?}")));
                }
                mask_rows_per_batch = Some(rows / sx[0]);
            }
        }
        let xd = self.value(x).data();
        let md = mask.map(|m| self.value(m).data());
        let mut y = vec![0.0; numel];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let out = &mut y[r * n..(r + 1) * n];
            out.copy_from_slice(row);
            if let Some(md) = md {
                let mrow = match mask_rows_per_batch {
                    Some(per) => &md[(r / per) * n..(r / per + 1) * n],
                    None => &md[r * n..(r + 1) * n],
                };
                for (o, m) in out.iter_mut().zip(mrow) {
                    *o += m;
                }
            }
            let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for o in out.iter_mut() {
                *o = (*o - max).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let rg = self.rg(x) || mask.is_some_and(|m| self.rg(m));
        Ok(self.push(
            Tensor::new(&sx, y)?,
            Op::Softmax {
                x,
                mask,
                mask_rows_per_batch,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis with population variance
    /// floored at [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let h = *sx.last().ok_or_else(|| Error::dim("layer_norm of a scalar"))?;
        if self.shape(gain) != [h] || self.shape(bias) != [h] {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / bias {:?} for width {h}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xd.len() / h;
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut floored = vec![false; rows];
        for r in 0..rows {
            let row = &xd[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            floored[r] = var < LAYER_NORM_EPS;
            let s = 1.0 / var.max(LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..h {
                let xh = (row[j] - mean) * s;
                xhat[r * h + j] = xh;
                y[r * h + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(&sx, y)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                floored,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Swaps the middle two axes of a 4-D tensor: `[a,b,c,d] → [a,c,b,d]`.
    pub fn permute_0213(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::dim(format!("permute_0213 needs 4-D input, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let v = permute_0213(self.value(a).data(), dims);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[dims[0], dims[2], dims[1], dims[3]], v)?,
            Op::Permute0213 { a, dims },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        p.expect_same_shape(target, "mse")?;
        let n = p.numel() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `logits[B×C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross_entropy: logits {s:?} for {} labels",
                labels.len()
            )));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &ld[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Rescales each leading-axis slice so its flattened L2 norm is at most
    /// `bound`; slices already within the bound pass through unchanged.
    pub fn clip_rows(&mut self, x: Var, bound: f64) -> Result<Var> {
        if !(bound > 0.0) {
            return Err(Error::contract(format!("clip bound must be positive, got {bound}")));
        }
        let t = self.value(x);
        let rows = t.rows();
        let width = t.row_width();
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            norms.push(Tensor::clip_slice(&mut out[r * width..(r + 1) * width], bound));
        }
        let v = Tensor::new(t.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::ClipRows { x, bound, norms }, rg))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dim(format!("concat: {s:?} against leading {lead:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            rg,
        ))
    }

    /// Elementwise sum of equally shaped tensors, accumulated in slice order.
    pub fn sum_list(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("sum of no tensors"))?;
        let mut acc = self.value(*first).clone();
        for &p in &parts[1..] {
            let v = self.value(p);
            acc.expect_same_shape(v, "sum_list")?;
            acc.add_assign(v);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(acc, Op::SumList(parts.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.value(b).data(), true, &mut da, false);
                    self.accumulate(grads, a, Tensor::new(&[m, k], da)?);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a).data(), true, gd, false, &mut db, false);
                    self.accumulate(grads, b, Tensor::new(&[k, n], db)?);
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                if self.rg(x) {
                    let mut dx = vec![0.0; rows * inp];
                    gemm(rows, out, inp, gd, false, self.value(w).data(), true, &mut dx, false);
                    self.accumulate(grads, x, Tensor::new(self.shape(x), dx)?);
                }
                if self.rg(w) {
                    let mut dw = vec![0.0; inp * out];
                    gemm(inp, rows, out, self.value(x).data(), true, gd, false, &mut dw, false);
                    self.accumulate(grads, w, Tensor::new(&[inp, out], dw)?);
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    let mut db = vec![0.0; out];
                    for row in gd.chunks_exact(out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(&[out], db)?);
                }
            }
            &Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                if self.rg(a) {
                    let bd = self.value(b).data();
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &bd[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, a, Tensor::new(&[batch, m, k], da)?);
                }
                if self.rg(b) {
                    let ad = self.value(a).data();
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let di = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // b stored n×k: d = gᵀ · a
                            gemm(n, m, k, gi, true, ai, false, di, false);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, di, false);
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(self.shape(b), db)?);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y)?);
                }
                if self.rg(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y)?);
                }
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, g.scale(c)),
            &Op::AddConst(a) => self.accumulate(grads, a, g.clone()),
            Op::MulConst(a, c) => self.accumulate(grads, *a, g.zip_map(c, |x, y| x * y)?),
            &Op::Relu(a) => {
                let d = g.zip_map(self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, a, d);
            }
            &Op::Softmax {
                x,
                mask,
                mask_rows_per_batch,
            } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(n)
                    .zip(gd.chunks_exact(n))
                    .zip(dx.chunks_exact_mut(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                if let Some(m) = mask.filter(|&m| self.rg(m)) {
                    let dm = match mask_rows_per_batch {
                        None => dx.clone(),
                        Some(per) => {
                            let batches = dx.len() / (per * n);
                            let mut dm = vec![0.0; batches * n];
                            for (r, dr) in dx.chunks_exact(n).enumerate() {
                                let bi = r / per;
                                for j in 0..n {
                                    dm[bi * n + j] += dr[j];
                                }
                            }
                            dm
                        }
                    };
                    self.accumulate(grads, m, Tensor::new(self.shape(m), dm)?);
                }
                self.accumulate(grads, x, Tensor::new(node.value.shape(), dx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                floored,
            } => {
                let h = node.value.last_dim();
                let gn = self.value(*gain).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let mut dxhat = vec![0.0; h];
                    for r in 0..rstd.len() {
                        let gr = &gd[r * h..(r + 1) * h];
                        let xr = &xhat[r * h..(r + 1) * h];
                        for j in 0..h {
                            dxhat[j] = gr[j] * gn[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / h as f64;
                        let mean_dx = if floored[r] {
                            0.0
                        } else {
                            dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / h as f64
                        };
                        for j in 0..h {
                            dx[r * h + j] = rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?);
                }
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; h];
                    let mut db = vec![0.0; h];
                    for (gr, xr) in gd.chunks_exact(h).zip(xhat.chunks_exact(h)) {
                        for j in 0..h {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(&[h], dg)?);
                    self.accumulate(grads, *bias, Tensor::new(&[h], db)?);
                }
            }
            &Op::Reshape(a) => {
                let d = g.clone().reshape(self.shape(a))?;
                self.accumulate(grads, a, d);
            }
            &Op::Permute0213 { a, dims } => {
                let back = permute_0213(gd, [dims[0], dims[2], dims[1], dims[3]]);
                self.accumulate(grads, a, Tensor::new(&dims, back)?);
            }
            &Op::Sum(a) => {
                self.accumulate(grads, a, Tensor::full(self.shape(a), g.item()));
            }
            &Op::Mean(a) => {
                let n = self.value(a).numel() as f64;
                self.accumulate(grads, a, Tensor::full(self.shape(a), g.item() / n));
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let c = 2.0 * g.item() / p.numel() as f64;
                self.accumulate(grads, *pred, p.zip_map(target, |a, b| c * (a - b))?);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b.max(1);
                let scale = g.item() / b as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, Tensor::new(&[b, c], d)?);
            }
            Op::ClipRows { x, bound, norms } => {
                let xv = self.value(*x);
                let width = xv.row_width();
                let mut d = gd.to_vec();
                for (r, &n) in norms.iter().enumerate() {
                    if n <= *bound {
                        continue;
                    }
                    let xr = &xv.data()[r * width..(r + 1) * width];
                    let dr = &mut d[r * width..(r + 1) * width];
                    let proj: f64 = xr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    let f = bound / n;
                    for j in 0..width {
                        dr[j] = f * (dr[j] - xr[j] / n * proj);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), d)?);
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = gd.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.rg(p) {
                        let mut d = vec![0.0; rows * w];
                        for r in 0..rows {
                            d[r * w..(r + 1) * w]
                                .copy_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p), d)?);
                    }
                    offset += w;
                }
            }
            Op::SumList(parts) => {
                for &p in parts {
                    self.accumulate(grads, p, g.clone());
                }
            }
        }
        Ok(())
    }
}

fn permute_0213(src: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * d;
                let t = ((i * c + k) * b + j) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let y = tape.matmul(i, z).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x, None).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(t(&[2], &[5.0, 5.0]));
        let m = tape.constant(t(&[2], &[0.0, -1e9]));
        let y = tape.softmax(x, Some(m)).unwrap();
        let p = tape.value(y).data();
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1] < 1e-12);
    }

    #[test]
    fn layer_norm_edge_rows() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::full(&[1, 3], 7.5));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[-1.0, 1.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn permute_roundtrip() {
        let src: Vec<f64> = (0..24).map(f64::from).collect();
        let p = permute_0213(&src, [1, 2, 3, 4]);
        assert_eq!(&p[..4], &src[..4]);
        assert_eq!(&p[4..8], &src[12..16]);
        assert_eq!(permute_0213(&p, [1, 3, 2, 4]), src);
    }

    #[test]
    fn clip_rows_bounds_each_sample() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[3.0, 4.0, 0.03, 0.04]));
        let y = tape.clip_rows(x, 1.0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.03, 0.04]);
    }
}
