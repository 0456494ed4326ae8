use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WamError};
use crate::mask::Role;
use crate::model::LayerKv;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Full,
    Fifo,
    Selective,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Full, Strategy::Fifo, Strategy::Selective];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Fifo => "fifo",
            Strategy::Selective => "selective",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = WamError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| WamError::InvalidArgument(format!("unknown memory strategy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tag {
    pub chunk: usize,
    pub token: usize,
    pub role: Role,
}

/// Key/value memory for one modality. Every layer holds rows for the same tags, in tag order.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPool {
    pub modality: Modality,
    pub strategy: Strategy,
    pub budget: usize,
    pub lambda: f64,
    heads: usize,
    d: usize,
    tags: Vec<Tag>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub modality: Modality,
    /// Scores of the tokens present before the update, in pool order.
    pub tags: Vec<Tag>,
    pub relevance: Vec<f64>,
    pub redundancy: Vec<f64>,
    pub score: Vec<f64>,
    pub evicted: Vec<Tag>,
    pub size_after: usize,
}

impl KvPool {
    pub fn new(
        modality: Modality,
        strategy: Strategy,
        budget: usize,
        lambda: f64,
        layers: usize,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(WamError::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
        }
        if layers == 0 || heads == 0 || d % heads != 0 {
            return Err(WamError::InvalidArgument(format!(
                "pool needs layers > 0 and d divisible by heads, got {layers} layers, d={d}, {heads} heads"
            )));
        }
        if strategy != Strategy::Full && budget == 0 {
            return Err(WamError::InvalidArgument("bounded pool with zero budget".into()));
        }
        Ok(Self {
            modality,
            strategy,
            budget,
            lambda,
            heads,
            d,
            tags: Vec::new(),
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
        })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    /// Keys of one layer as `[len, d]`.
    pub fn layer_keys(&self, l: usize) -> Tensor {
        Tensor::new(vec![self.len(), self.d], self.keys[l].clone()).expect("pool rows match tags")
    }

    pub fn layer_values(&self, l: usize) -> Tensor {
        Tensor::new(vec![self.len(), self.d], self.values[l].clone()).expect("pool rows match tags")
    }

    pub fn check(&self) -> Result<()> {
        self.check_layout()?;
        if self.strategy != Strategy::Full && self.len() > self.budget {
            return Err(WamError::PoolInconsistent(format!("{} tags exceed budget {}", self.len(), self.budget)));
        }
        Ok(())
    }

    /// Layer and tag consistency, without the budget bound.
    fn check_layout(&self) -> Result<()> {
        let n = self.len();
        for (l, (k, v)) in self.keys.iter().zip(&self.values).enumerate() {
            if k.len() != n * self.d || v.len() != n * self.d {
                return Err(WamError::PoolInconsistent(format!(
                    "layer {l} holds {} keys and {} values for {n} tags",
                    k.len() / self.d,
                    v.len() / self.d
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(t) = self.tags.iter().find(|t| !seen.insert(**t)) {
            return Err(WamError::PoolInconsistent(format!("duplicate tag {t:?}")));
        }
        Ok(())
    }

    fn validate_incoming(&self, tags: &[Tag], kv: &[LayerKv]) -> Result<()> {
        if kv.len() != self.layers() {
            return Err(WamError::PoolInconsistent(format!(
                "incoming KVs cover {} layers, pool has {}",
                kv.len(),
                self.layers()
            )));
        }
        for (l, x) in kv.iter().enumerate() {
            let want = [tags.len(), self.d];
            if x.k.shape() != want || x.v.shape() != want {
                return Err(WamError::PoolInconsistent(format!(
                    "layer {l} incoming shapes {:?}/{:?}, expected {want:?}",
                    x.k.shape(),
                    x.v.shape()
                )));
            }
        }
        if tags.iter().any(|t| self.tags.contains(t)) {
            return Err(WamError::PoolInconsistent("incoming tag already cached".into()));
        }
        Ok(())
    }

    fn keep(&mut self, keep: &[usize]) {
        let d = self.d;
        for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
            let mut out = Vec::with_capacity(keep.len() * d);
            for &i in keep {
                out.extend_from_slice(&buf[i * d..(i + 1) * d]);
            }
            *buf = out;
        }
        self.tags = keep.iter().map(|&i| self.tags[i]).collect();
    }

    fn append(&mut self, tags: &[Tag], kv: &[LayerKv]) {
        for (l, x) in kv.iter().enumerate() {
            self.keys[l].extend_from_slice(x.k.data());
            self.values[l].extend_from_slice(x.v.data());
        }
        self.tags.extend_from_slice(tags);
    }

    /// Append a finished chunk's KVs, evicting per strategy. `queries` are the
    /// per-layer final-step queries of that chunk, used by the selective score.
    pub fn retention_update(&mut self, tags: &[Tag], kv: &[LayerKv], queries: &[Tensor]) -> Result<RetentionReport> {
        // an over-full pool (e.g. after switching strategy) is trimmed by this update
        self.check_layout()?;
        self.validate_incoming(tags, kv)?;
        let incoming = tags.len();
        if self.strategy != Strategy::Full && incoming > self.budget {
            return Err(WamError::BudgetTooSmall {
                budget: self.budget,
                incoming,
            });
        }
        let mut report = RetentionReport {
            modality: self.modality,
            tags: self.tags.clone(),
            relevance: Vec::new(),
            redundancy: Vec::new(),
            score: Vec::new(),
            evicted: Vec::new(),
            size_after: 0,
        };
        let room = self.budget.saturating_sub(incoming);
        let keep: Option<Vec<usize>> = match self.strategy {
            Strategy::Full => None,
            Strategy::Fifo => {
                let n = self.len();
                (n > room).then(|| (n - room..n).collect())
            }
            Strategy::Selective => {
                if self.is_empty() {
                    None
                } else {
                    let keys = self.per_layer_keys();
                    let rho = relevance_scores(queries, &keys, self.heads)?;
                    let eta = redundancy_scores(&keys, self.heads)?;
                    let sum: f64 = rho.iter().sum();
                    if (sum - 1.0).abs() > 1e-9 || rho.iter().any(|&r| r < 0.0) {
                        return Err(WamError::NonFinite(format!("relevance does not normalize (sum {sum})")));
                    }
                    if eta.iter().any(|e| !(-1.0..=1.0).contains(e)) {
                        return Err(WamError::NonFinite("redundancy outside [-1, 1]".into()));
                    }
                    let score = retention_scores(&rho, &eta, self.lambda);
                    let keep = (self.len() > room).then(|| select_top(&self.tags, &score, room));
                    report.relevance = rho;
                    report.redundancy = eta;
                    report.score = score;
                    keep
                }
            }
        };
        if let Some(keep) = keep {
            let mut kept = vec![false; self.len()];
            keep.iter().for_each(|&i| kept[i] = true);
            report.evicted = self.tags.iter().zip(&kept).filter(|(_, &k)| !k).map(|(t, _)| *t).collect();
            self.keep(&keep);
        }
        self.append(tags, kv);
        self.check()?;
        report.size_after = self.len();
        Ok(report)
    }

    fn per_layer_keys(&self) -> Vec<Tensor> {
        (0..self.layers()).map(|l| self.layer_keys(l)).collect()
    }
}

/// Per-token attention mass from the query set, softmax over pool keys per
/// (layer, head, query), averaged into one scalar per token.
pub fn relevance_scores(queries: &[Tensor], keys: &[Tensor], heads: usize) -> Result<Vec<f64>> {
    let n = keys.first().map_or(0, Tensor::rows);
    if n == 0 {
        return Err(WamError::InvalidArgument("relevance of an empty pool".into()));
    }
    if queries.len() != keys.len() {
        return Err(WamError::PoolInconsistent(format!(
            "{} query layers for {} key layers",
            queries.len(),
            keys.len()
        )));
    }
    let d = keys[0].cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut rho = vec![0.0; n];
    let mut sets = 0usize;
    let mut logits = vec![0.0; n];
    for (q, k) in queries.iter().zip(keys) {
        if q.cols() != d || k.shape() != [n, d] {
            return Err(WamError::shape("relevance_scores", "query/key widths differ across layers"));
        }
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..q.rows() {
                let qi = &q.row(i)[cols.clone()];
                for (j, l) in logits.iter_mut().enumerate() {
                    let kj = &k.row(j)[cols.clone()];
                    *l = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - m).exp();
                    z += *l;
                }
                for (r, l) in rho.iter_mut().zip(&logits) {
                    *r += l / z;
                }
                sets += 1;
            }
        }
    }
    if sets == 0 {
        return Err(WamError::InvalidArgument("relevance needs at least one query".into()));
    }
    rho.iter_mut().for_each(|r| *r /= sets as f64);
    Ok(rho)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine similarity of each key to the other keys of the pool, per
/// (layer, head), averaged. A pool of one token has redundancy 0.
pub fn redundancy_scores(keys: &[Tensor], heads: usize) -> Result<Vec<f64>> {
    let n = keys.first().map_or(0, Tensor::rows);
    if n == 0 {
        return Err(WamError::InvalidArgument("redundancy of an empty pool".into()));
    }
    if n == 1 {
        return Ok(vec![0.0]);
    }
    let d = keys[0].cols();
    let dh = d / heads;
    let mut eta = vec![0.0; n];
    for k in keys {
        if k.shape() != [n, d] {
            return Err(WamError::shape("redundancy_scores", "layers hold different key sets"));
        }
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for (j, e) in eta.iter_mut().enumerate() {
                let kj = &k.row(j)[cols.clone()];
                let s: f64 = (0..n)
                    .filter(|&l| l != j)
                    .map(|l| cosine(kj, &k.row(l)[cols.clone()]))
                    .sum();
                *e += s / (n - 1) as f64;
            }
        }
    }
    let sets = (keys.len() * heads) as f64;
    Ok(eta.into_iter().map(|e| e / sets).collect())
}

pub fn retention_scores(rho: &[f64], eta: &[f64], lambda: f64) -> Vec<f64> {
    rho.iter().zip(eta).map(|(r, e)| lambda * r - (1.0 - lambda) * e).collect()
}

/// Indices of the `count` best-scored tokens, returned in pool order.
/// Ties go to the newer chunk, then the lower token index.
pub fn select_top(tags: &[Tag], score: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tags.len()).collect();
    order.sort_by(|&a, &b| {
        score[b]
            .total_cmp(&score[a])
            .then(tags[b].chunk.cmp(&tags[a].chunk))
            .then(tags[a].token.cmp(&tags[b].token))
            .then(Ordering::Equal)
    });
    let mut keep: Vec<usize> = order.into_iter().take(count).collect();
    keep.sort_unstable();
    keep
}
