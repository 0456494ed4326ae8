//! Masked multi-head scaled dot-product attention kernels.

use crate::error::{Result, WamError};

use super::{gemm_view, Tensor, View};

/// Dense boolean matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    pub rows: usize,
    pub cols: usize,
    pub(crate) data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn count_allowed(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    pub fn set_range(&mut self, i: usize, cols: std::ops::Range<usize>, v: bool) {
        let base = i * self.cols;
        self.data[base + cols.start..base + cols.end].fill(v);
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.data[i * self.cols..(i + 1) * self.cols]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Per-row allowed column ranges; the compact form the kernels iterate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spans {
    pub rows: usize,
    pub cols: usize,
    ranges: Vec<Vec<(usize, usize)>>,
    counts: Vec<usize>,
}

impl Spans {
    pub fn from_mask(mask: &BoolMatrix) -> Result<Self> {
        let mut ranges = Vec::with_capacity(mask.rows);
        let mut counts = Vec::with_capacity(mask.rows);
        for i in 0..mask.rows {
            let mut row = Vec::new();
            let mut j = 0;
            while j < mask.cols {
                if mask.get(i, j) {
                    let start = j;
                    while j < mask.cols && mask.get(i, j) {
                        j += 1;
                    }
                    row.push((start, j));
                } else {
                    j += 1;
                }
            }
            let count: usize = row.iter().map(|(a, b)| b - a).sum();
            if count == 0 {
                return Err(WamError::EmptyMaskRow { row: i });
            }
            ranges.push(row);
            counts.push(count);
        }
        Ok(Self {
            rows: mask.rows,
            cols: mask.cols,
            ranges,
            counts,
        })
    }

    /// Rows given directly as sorted, disjoint half-open column ranges.
    pub fn from_ranges(cols: usize, ranges: Vec<Vec<(usize, usize)>>) -> Result<Self> {
        let mut counts = Vec::with_capacity(ranges.len());
        for (i, row) in ranges.iter().enumerate() {
            let mut prev = 0;
            let mut count = 0;
            for &(a, b) in row {
                if a < prev || b < a || b > cols {
                    return Err(WamError::shape("Spans::from_ranges", format!("row {i} has bad range {a}..{b}")));
                }
                prev = b;
                count += b - a;
            }
            if count == 0 {
                return Err(WamError::EmptyMaskRow { row: i });
            }
            counts.push(count);
        }
        Ok(Self {
            rows: ranges.len(),
            cols,
            ranges,
            counts,
        })
    }

    /// Every row attends to every column.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            ranges: vec![vec![(0, cols)]; rows],
            counts: vec![cols; rows],
        }
    }

    pub fn row(&self, i: usize) -> &[(usize, usize)] {
        &self.ranges[i]
    }

    pub fn count(&self, i: usize) -> usize {
        self.counts[i]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Runs of consecutive query rows with identical allowed columns.
pub(crate) fn row_groups(spans: &Spans) -> Vec<(usize, usize)> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=spans.rows {
        if i == spans.rows || spans.ranges[i] != spans.ranges[start] {
            groups.push((start, i));
            start = i;
        }
    }
    groups
}

/// Forward pass. Returns the output `[nq, d]` and the attention probabilities,
/// laid out per row group, then per head, as a row-major `[group rows, allowed columns]` block.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    spans: &Spans,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; spans.rows * d];
    let mut probs = vec![0.0; spans.total() * heads];
    let mut base = 0;
    for (r0, r1) in row_groups(spans) {
        let (ng, m) = (r1 - r0, spans.count(r0));
        let row = spans.row(r0);
        for h in 0..heads {
            let qv = View {
                data: q,
                off: r0 * d + h * dh,
                rs: d,
                cs: 1,
            };
            let p = &mut probs[base..base + ng * m];
            let mut col = 0;
            for &(a, b) in row {
                let kt = View {
                    data: k,
                    off: a * d + h * dh,
                    rs: 1,
                    cs: d,
                };
                gemm_view(ng, dh, b - a, scale, qv, kt, 0.0, p, col, m, 1);
                col += b - a;
            }
            for r in p.chunks_exact_mut(m) {
                let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in r.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                let inv = 1.0 / sum;
                r.iter_mut().for_each(|x| *x *= inv);
            }
            let p = &probs[base..base + ng * m];
            let mut col = 0;
            for &(a, b) in row {
                let pv = View {
                    data: p,
                    off: col,
                    rs: m,
                    cs: 1,
                };
                let vv = View {
                    data: v,
                    off: a * d + h * dh,
                    rs: d,
                    cs: 1,
                };
                gemm_view(ng, b - a, dh, 1.0, pv, vv, 1.0, &mut out, r0 * d + h * dh, d, 1);
                col += b - a;
            }
            base += ng * m;
        }
    }
    (out, probs)
}

/// Accumulates gradients for `q`, `k`, `v` given the upstream gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    spans: &Spans,
    probs: &[f64],
    dout: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ds = Vec::new();
    let mut base = 0;
    for (r0, r1) in row_groups(spans) {
        let (ng, m) = (r1 - r0, spans.count(r0));
        let row = spans.row(r0);
        for h in 0..heads {
            let p = &probs[base..base + ng * m];
            base += ng * m;
            let view = |data, off, rs, cs| View { data, off, rs, cs };
            let dov = view(dout, r0 * d + h * dh, d, 1);
            let qv = view(q, r0 * d + h * dh, d, 1);
            ds.clear();
            ds.resize(ng * m, 0.0);
            let mut col = 0;
            for &(a, b) in row {
                let w = b - a;
                // dP = dO V^T and dV += P^T dO
                gemm_view(ng, dh, w, 1.0, dov, view(v, a * d + h * dh, 1, d), 0.0, &mut ds, col, m, 1);
                gemm_view(w, ng, dh, 1.0, view(p, col, 1, m), dov, 1.0, dv, a * d + h * dh, d, 1);
                col += w;
            }
            for (dr, pr) in ds.chunks_exact_mut(m).zip(p.chunks_exact(m)) {
                let weighted: f64 = dr.iter().zip(pr).map(|(g, p)| g * p).sum();
                for (g, p) in dr.iter_mut().zip(pr) {
                    *g = p * (*g - weighted) * scale;
                }
            }
            let mut col = 0;
            for &(a, b) in row {
                let w = b - a;
                let dsv = view(&ds, col, m, 1);
                gemm_view(ng, w, dh, 1.0, dsv, view(k, a * d + h * dh, d, 1), 1.0, dq, r0 * d + h * dh, d, 1);
                gemm_view(w, ng, dh, 1.0, view(&ds, col, 1, m), qv, 1.0, dk, a * d + h * dh, d, 1);
                col += w;
            }
        }
    }
}

pub(crate) fn check_attention_shapes(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    spans: &Spans,
) -> Result<()> {
    let d = q.cols();
    if d == 0 || heads == 0 || d % heads != 0 {
        return Err(WamError::shape(
            "attention",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(WamError::shape(
            "attention",
            format!(
                "q [{},{d}], k [{},{}], v [{},{}]",
                q.rows(),
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols()
            ),
        ));
    }
    if spans.rows != q.rows() || spans.cols != k.rows() {
        return Err(WamError::shape(
            "attention",
            format!(
                "mask [{},{}] vs q rows {} / k rows {}",
                spans.rows,
                spans.cols,
                q.rows(),
                k.rows()
            ),
        ));
    }
    Ok(())
}

/// Single-head masked attention on plain tensors: row `i` is the softmax over
/// allowed keys of `q_i . k_j / sqrt(d)` applied to `v`.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &BoolMatrix) -> Result<Tensor> {
    if mask.rows != q.rows() || mask.cols != k.rows() {
        return Err(WamError::shape(
            "masked_attention",
            format!("mask [{},{}] vs q rows {}, k rows {}", mask.rows, mask.cols, q.rows(), k.rows()),
        ));
    }
    let spans = Spans::from_mask(mask)?;
    check_attention_shapes(q, k, v, 1, &spans)?;
    let (out, _) = attention_forward(q.data(), k.data(), v.data(), q.cols(), 1, &spans);
    Tensor::matrix(q.rows(), q.cols(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
        Tensor::matrix(rows, cols, rng.normals(rows * cols)).unwrap()
    }

    /// Straight-line reference: explicit loops, no shared helpers.
    fn reference(q: &Tensor, k: &Tensor, v: &Tensor, mask: &BoolMatrix) -> Vec<f64> {
        let (nq, nk, d) = (q.rows(), k.rows(), q.cols());
        let mut out = vec![0.0; nq * d];
        for i in 0..nq {
            let mut logits = vec![f64::NEG_INFINITY; nk];
            for j in 0..nk {
                if mask.get(i, j) {
                    let mut s = 0.0;
                    for t in 0..d {
                        s += q.row(i)[t] * k.row(j)[t];
                    }
                    logits[j] = s / (d as f64).sqrt();
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..nk {
                for t in 0..d {
                    out[i * d + t] += w[j] / z * v.row(j)[t];
                }
            }
        }
        out
    }

    #[test]
    fn diagonal_mask_copies_values() {
        let mut rng = RngStream::new(1, 1);
        let (q, k, v) = (random(4, 3, &mut rng), random(4, 3, &mut rng), random(4, 3, &mut rng));
        let mask = BoolMatrix::from_fn(4, 4, |i, j| i == j);
        let out = masked_attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = RngStream::new(2, 1);
        let q = random(3, 2, &mut rng);
        let k = Tensor::matrix(4, 2, [0.3, -1.2].repeat(4)).unwrap();
        let v = random(4, 2, &mut rng);
        let out = masked_attention(&q, &k, &v, &BoolMatrix::from_fn(3, 4, |_, _| true)).unwrap();
        for i in 0..3 {
            for t in 0..2 {
                let mean = (0..4).map(|j| v.row(j)[t]).sum::<f64>() / 4.0;
                assert!((out.row(i)[t] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_reference_oracle() {
        let mut rng = RngStream::new(3, 1);
        let (q, k, v) = (random(2, 2, &mut rng), random(3, 2, &mut rng), random(3, 2, &mut rng));
        let mask = BoolMatrix::from_fn(2, 3, |i, j| !(i == 0 && j == 2));
        let out = masked_attention(&q, &k, &v, &mask).unwrap();
        let want = reference(&q, &k, &v, &mask);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_row_is_named() {
        let t = Tensor::zeros(&[2, 2]);
        let mask = BoolMatrix::from_fn(2, 2, |i, _| i == 0);
        match masked_attention(&t, &t, &t, &mask) {
            Err(WamError::EmptyMaskRow { row }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
        let bad = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            masked_attention(&t, &bad, &t, &BoolMatrix::from_fn(2, 2, |_, _| true)),
            Err(WamError::Shape { .. })
        ));
    }

    #[test]
    fn masked_entries_are_ignored() {
        let mut rng = RngStream::new(4, 1);
        let (q, mut k, mut v) = (random(3, 4, &mut rng), random(5, 4, &mut rng), random(5, 4, &mut rng));
        let mask = BoolMatrix::from_fn(3, 5, |_, j| j != 2);
        let before = masked_attention(&q, &k, &v, &mask).unwrap();
        for t in 0..4 {
            k.data_mut()[2 * 4 + t] = 0.0;
            v.data_mut()[2 * 4 + t] = 1e6;
        }
        let after = masked_attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let mut rng = RngStream::new(5, 1);
        let (q, k, v) = (random(6, 8, &mut rng), random(9, 8, &mut rng), random(9, 8, &mut rng));
        let mask = BoolMatrix::from_fn(6, 9, |i, j| j <= i + 2);
        let spans = Spans::from_mask(&mask).unwrap();
        let (out, probs) = attention_forward(q.data(), k.data(), v.data(), 8, 2, &spans);
        assert_eq!(probs.len(), 2 * spans.total());
        let mut off = 0;
        for (r0, r1) in row_groups(&spans) {
            for _ in 0..2 {
                for _ in r0..r1 {
                    let s: f64 = probs[off..off + spans.count(r0)].iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                    off += spans.count(r0);
                }
            }
        }
        for i in 0..6 {
            // convex hull: each output coordinate within the allowed values' range
            for t in 0..8 {
                let vals: Vec<f64> = (0..=(i + 2).min(8)).map(|j| v.row(j)[t]).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let o = out[i * 8 + t];
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }
}
