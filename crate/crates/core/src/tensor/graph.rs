use std::rc::Rc;

use crate::error::{Result, WamError};

use super::attention::{attention_backward, attention_forward, check_attention_shapes, Spans};
use super::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    GatherRows(Var, Rc<[usize]>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    LayerNorm(Var, Vec<f64>),
    Silu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spans: Rc<Spans>,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanSquare(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only operation tape. Values are computed eagerly; `backward`
/// replays the tape in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Leaf; tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(WamError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect())
            .expect("same shape");
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `a [n, m] + bias [m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let m = ta.cols();
        if tb.len() != m {
            return Err(WamError::shape("add_row", format!("{m} columns vs bias {}", tb.len())));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(m) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        let (n, m) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx.iter() {
            if i >= n {
                return Err(WamError::OutOfRange { index: i, len: n });
            }
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::matrix(idx.len(), m, data)?;
        Ok(self.push(out, Op::GatherRows(a, idx), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Rc<[usize]> = (start..start + len).collect();
        self.gather_rows(a, idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Row-wise normalization to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.cols();
        let mut data = ta.data().to_vec();
        let mut inv = Vec::with_capacity(ta.rows());
        for row in data.chunks_mut(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            inv.push(r);
        }
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::LayerNorm(a, inv), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x / (1.0 + (-x).exp())).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Silu(a), &[a])
    }

    /// Multi-head masked attention; `spans` rows index queries, columns index keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spans: Rc<Spans>, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        check_attention_shapes(tq, tk, tv, heads, &spans)?;
        let d = tq.cols();
        let (out, probs) = attention_forward(tq.data(), tk.data(), tv.data(), d, heads, &spans);
        let out = Tensor::matrix(tq.rows(), d, out)?;
        let tracked = [q, k, v].iter().any(|x| self.nodes[x.0].tracked);
        let probs = if tracked { probs } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spans,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean of squared entries, as a one-element tensor.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let ms = ta.data().iter().map(|x| x * x).sum::<f64>() / ta.len() as f64;
        self.push(Tensor::scalar(ms), Op::MeanSquare(a), &[a])
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(WamError::shape("backward", "root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        // untracked leaves never receive gradients
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.tracked {
                grads[i] = None;
            }
        }
        Ok(Grads { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(da) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, tb.data(), true, da, 1.0);
                }
                if let Some(db) = self.acc(grads, *b) {
                    gemm(k, m, n, ta.data(), true, g, false, db, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.acc(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, y), w) in d.iter_mut().zip(g).zip(tb) {
                        *x += y * w;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((x, y), w) in d.iter_mut().zip(g).zip(ta) {
                        *x += y * w;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::AddRow(a, b) => {
                let m = self.value(*b).len();
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(d) = self.acc(grads, *b) {
                    for row in g.chunks(m) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let m = self.value(*a).cols();
                if let Some(d) = self.acc(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut d[src * m..(src + 1) * m];
                        dst.iter_mut().zip(&g[r * m..(r + 1) * m]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(d) = self.acc(grads, *p) {
                        d.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y);
                    }
                    off += n;
                }
            }
            Op::LayerNorm(a, inv) => {
                let y = node.value.data();
                let m = node.value.cols();
                if let Some(d) = self.acc(grads, *a) {
                    for (r, &istd) in inv.iter().enumerate() {
                        let gy = &g[r * m..(r + 1) * m];
                        let yr = &y[r * m..(r + 1) * m];
                        let mean_g = gy.iter().sum::<f64>() / m as f64;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for t in 0..m {
                            d[r * m + t] += istd * (gy[t] - mean_g - yr[t] * mean_gy);
                        }
                    }
                }
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((dx, gy), &xv) in d.iter_mut().zip(g).zip(x) {
                        let s = 1.0 / (1.0 + (-xv).exp());
                        *dx += gy * s * (1.0 + xv * (1.0 - s));
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spans,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![0.0; tq.len()];
                let mut dk = vec![0.0; tk.len()];
                let mut dv = vec![0.0; tv.len()];
                attention_backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    tq.cols(),
                    *heads,
                    spans,
                    probs,
                    g,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, local) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(d) = self.acc(grads, *var) {
                        d.iter_mut().zip(&local).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MeanSquare(a) => {
                let x = self.value(*a).data();
                let c = 2.0 * g[0] / x.len() as f64;
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(x).for_each(|(dx, xv)| *dx += c * xv);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::{gradcheck, BoolMatrix};

    fn rand_param(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), rng.normals(n)).unwrap().trainable()
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = Tensor::new(vec![5], vec![0.5, -1.0, 2.0, 0.1, -0.3]).unwrap().trainable();
        let report = gradcheck(
            |g, p| {
                let s = g.mean_square(p[0]);
                Ok(g.scale(s, 5.0))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_error() < 1e-7, "{report:?}");
    }

    #[test]
    fn attention_layer_gradcheck() {
        let mut rng = RngStream::new(9, 1);
        let params = vec![
            rand_param(&[5, 4], &mut rng),
            rand_param(&[4, 4], &mut rng),
            rand_param(&[4, 4], &mut rng),
            rand_param(&[4, 4], &mut rng),
            rand_param(&[4], &mut rng),
        ];
        let mask = BoolMatrix::from_fn(5, 5, |i, j| j <= i || (i == 1 && j == 4));
        let spans = Rc::new(Spans::from_mask(&mask).unwrap());
        let report = gradcheck(
            move |g, p| {
                let x = g.layer_norm(p[0]);
                let q = g.matmul(x, p[1])?;
                let k = g.matmul(x, p[2])?;
                let v = g.matmul(x, p[3])?;
                let a = g.attention(q, k, v, spans.clone(), 2)?;
                let a = g.silu(a);
                let y = g.add_row(a, p[4])?;
                let idx: Rc<[usize]> = vec![0, 3, 3, 4].into();
                let y = g.gather_rows(y, idx)?;
                let y2 = g.mul(y, y)?;
                let z = g.concat_rows(&[y, y2])?;
                Ok(g.mean_square(z))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.max_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn untracked_graph_yields_no_gradients() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::filled(&[2, 2], 1.0));
        let s = g.mean_square(a);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
    }
}
