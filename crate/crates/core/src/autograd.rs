//! Reverse-mode differentiation over a flat tape.
//!
//! Operations evaluate eagerly and append a node; [`Graph::backward`] walks
//! the tape in reverse. Only what the toy denoiser needs is here.

use crate::error::{dim_err, Result};
use crate::numerics::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Silu(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Im2col(Var, usize, usize),
    AvgPool(Var, usize, usize),
    Upsample(Var, usize, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Mse(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + numerics::exp(-x))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = numerics::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(dim_err(format!(
                "row bias of {} values for width {n}",
                b.len()
            )));
        }
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(v, Op::AddRow(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if factors.len() != m {
            return Err(dim_err(format!(
                "{} row factors for {m} rows",
                factors.len()
            )));
        }
        let mut out = self.value(a).data().to_vec();
        for (i, &f) in factors.iter().enumerate() {
            for o in &mut out[i * n..(i + 1) * n] {
                *o *= f;
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::ScaleRows(a, factors.to_vec()), ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = numerics::softmax_rows(self.value(a))?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Softmax(a), ng))
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let v = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::LayerNorm(a, rstd), ng))
    }

    pub fn im2col3(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let v = numerics::im2col3(self.value(a), h, w)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Im2col(a, h, w), ng))
    }

    pub fn avg_pool2(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let v = numerics::avg_pool2(self.value(a), h, w)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::AvgPool(a, h, w), ng))
    }

    pub fn upsample2(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let v = numerics::upsample2(self.value(a), h, w)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Upsample(a, h, w), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&tensors)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(table).gather_rows(idx)?;
        let ng = self.ng(table);
        Ok(self.push(v, Op::GatherRows(table, idx.to_vec()), ng))
    }

    /// Mean squared error against a constant target; yields a 1-element tensor.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let d = self.value(a).sub(target)?;
        let loss = d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, target.clone()), ng))
    }

    /// Gradients of the scalar `loss` with respect to every node; entries for
    /// nodes that do not lead to a parameter are `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(dim_err(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.ng(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let bt = self.value(*b).transpose()?;
                    self.accumulate(grads, *a, numerics::matmul(g, &bt)?)?;
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, numerics::matmul_tn(self.value(*a), g)?)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.ng(*bias) {
                    let (m, n) = g.dims2()?;
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, gb)?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::ScaleRows(a, f) => {
                let n = g.cols();
                let mut d = g.data().to_vec();
                for (i, &fi) in f.iter().enumerate() {
                    for v in &mut d[i * n..(i + 1) * n] {
                        *v *= fi;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?)?;
            }
            Op::Silu(a) => {
                let d = self.value(*a).zip_map(g, |x, gv| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Softmax(a) => {
                let (m, n) = out.dims2()?;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let y = out.row(i);
                    let gy = g.row(i);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = y[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], d)?)?;
            }
            Op::LayerNorm(a, rstd) => {
                let (m, n) = out.dims2()?;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let y = out.row(i);
                    let gy = g.row(i);
                    let mg = gy.iter().sum::<f64>() / n as f64;
                    let mgy = y.iter().zip(gy).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        d[i * n + j] = rstd[i] * (gy[j] - mg - y[j] * mgy);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], d)?)?;
            }
            Op::Im2col(a, h, w) => self.accumulate(grads, *a, numerics::col2im3(g, *h, *w)?)?,
            Op::AvgPool(a, h, w) => {
                let up = numerics::upsample2(g, h / 2, w / 2)?;
                self.accumulate(grads, *a, up.scale(0.25))?;
            }
            Op::Upsample(a, h, w) => {
                let down = numerics::avg_pool2(g, 2 * h, 2 * w)?;
                self.accumulate(grads, *a, down.scale(4.0))?;
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2()?;
                let len = g.cols();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], d)?)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        self.accumulate(grads, p, g.slice_cols(start, w)?)?;
                    }
                    start += w;
                }
            }
            Op::GatherRows(table, idx) => {
                let (r, c) = self.value(*table).dims2()?;
                let mut d = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for (acc, v) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *acc += v;
                    }
                }
                let shape = self.value(*table).shape().to_vec();
                self.accumulate(grads, *table, Tensor::new(shape, d)?)?;
            }
            Op::Mse(a, target) => {
                let n = target.len() as f64;
                let gs = g.data()[0];
                let d = self
                    .value(*a)
                    .zip_map(target, |x, t| 2.0 * (x - t) / n * gs)?;
                self.accumulate(grads, *a, d)?;
            }
        }
        Ok(())
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, Rng};

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for a graph builder.
    fn check(shape: &[usize], build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = Rng::new(11);
        let x0 = gaussian(&mut rng, shape);
        let probe = gaussian(&mut rng, &[1]);
        let eval = |x: &Tensor| -> (f64, Option<Tensor>) {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let y = build(&mut g, xv);
            let yv = g.value(y).clone();
            let weights = Tensor::new(
                yv.shape().to_vec(),
                (0..yv.len())
                    .map(|i| ((i as f64 + 1.0) * 0.7 + probe.data()[0]).sin())
                    .collect(),
            )
            .unwrap();
            let s = yv.mul(&weights).unwrap().sum();
            // d(mse)/dy == weights when target = y - weights * n / 2
            let n = yv.len() as f64;
            let target = yv.zip_map(&weights, |a, b| a - b * n / 2.0).unwrap();
            let loss = g.mse(y, &target).unwrap();
            let mut grads = g.backward(loss).unwrap();
            (s, grads.take(xv))
        };
        let (_, analytic) = eval(&x0);
        let analytic = analytic.expect("gradient reaches input");
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let num = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (num - a).abs() <= 1e-6 * (1.0 + num.abs()),
                "component {i}: numeric {num}, analytic {a}"
            );
        }
    }

    #[test]
    fn grad_matmul_transpose() {
        let w = gaussian(&mut Rng::new(2), &[3, 2]);
        check(&[4, 3], move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv).unwrap();
            let yt = g.transpose(y).unwrap();
            g.matmul(yt, x).unwrap()
        });
    }

    #[test]
    fn grad_softmax_layernorm_silu() {
        check(&[3, 5], |g, x| {
            let a = g.layer_norm(x).unwrap();
            let b = g.silu(a);
            g.softmax_rows(b).unwrap()
        });
    }

    #[test]
    fn grad_spatial_ops() {
        check(&[16, 2], |g, x| {
            let c = g.im2col3(x, 4, 4).unwrap();
            let p = g.avg_pool2(x, 4, 4).unwrap();
            let u = g.upsample2(p, 2, 2).unwrap();
            let s = g.slice_cols(c, 3, 5).unwrap();
            let m = g.scale_rows(u, &[0.5; 16]).unwrap();
            g.concat_cols(&[s, m]).unwrap()
        });
    }

    #[test]
    fn grad_bias_gather_sub() {
        check(&[3, 4], |g, x| {
            let rows = g.gather_rows(x, &[2, 0, 2]).unwrap();
            let bias = g.slice_cols(x, 0, 4).unwrap();
            let b1 = g.gather_rows(bias, &[1]).unwrap();
            let y = g.add_row(rows, b1).unwrap();
            let z = g.scale(y, 1.5);
            g.sub(z, rows).unwrap()
        });
    }
}
