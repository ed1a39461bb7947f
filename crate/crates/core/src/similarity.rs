//! Block-pair similarity matrices and span ranking.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capture::{ActivationMeta, ActivationSet};
use crate::error::{ensure_dim, Error, Result};
use crate::model::ModelConfig;
use crate::report::{fmt_sig9, CsvTable};
use crate::span::Span;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mse,
    Cosine,
    Cka,
}

impl Metric {
    /// Whether smaller values mean more similar.
    pub fn lower_is_better(self) -> bool {
        matches!(self, Metric::Mse)
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Metric::Mse),
            "cosine" => Ok(Metric::Cosine),
            "cka" => Ok(Metric::Cka),
            other => Err(Error::Argument(format!("unknown metric {other:?} (mse, cosine, cka)"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Mse => "mse",
            Metric::Cosine => "cosine",
            Metric::Cka => "cka",
        })
    }
}

fn pair<'a>(acts: &'a ActivationSet, s: usize, e: usize) -> Result<(&'a Tensor, &'a Tensor)> {
    let x = acts.block(s)?;
    let y = acts.block(e)?;
    ensure_dim!(x.shape() == y.shape(), "blocks {} and {} have shapes {:?} and {:?}", s, e, x.shape(), y.shape());
    Ok((x, y))
}

/// Mean over rows of the squared Euclidean distance between row pairs.
pub fn mse_tensors(x: &Tensor, y: &Tensor) -> Result<f64> {
    ensure_dim!(x.shape() == y.shape(), "mse shapes {:?} vs {:?}", x.shape(), y.shape());
    let n = x.rows();
    ensure_dim!(n > 0, "mse over zero rows");
    let total: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = b as f64 - a as f64;
            d * d
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean over rows of the cosine similarity of row pairs; a pair with a zero
/// row contributes 0.
pub fn cosine_tensors(x: &Tensor, y: &Tensor) -> Result<f64> {
    ensure_dim!(x.shape() == y.shape(), "cosine shapes {:?} vs {:?}", x.shape(), y.shape());
    let n = x.rows();
    ensure_dim!(n > 0, "cosine over zero rows");
    let mut total = 0.0;
    for i in 0..n {
        let (mut dot, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
        for (&a, &b) in x.row(i).iter().zip(y.row(i)) {
            let (a, b) = (a as f64, b as f64);
            dot += a * b;
            nx += a * a;
            ny += b * b;
        }
        if nx > 0.0 && ny > 0.0 {
            total += dot / (nx.sqrt() * ny.sqrt());
        }
    }
    Ok(total / n as f64)
}

/// Linear CKA value, with a flag set when either input is constant per
/// column (the value is then defined as 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CkaValue {
    pub value: f64,
    pub degenerate: bool,
}

fn centered(x: &Tensor) -> (Vec<f64>, usize, usize) {
    let (n, d) = (x.rows(), x.last_dim());
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        out.extend(x.row(i).iter().zip(&mean).map(|(&v, m)| v as f64 - m));
    }
    (out, n, d)
}

/// `A^T B` for row-major `n x p` and `n x q`.
fn cross(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for r in 0..n {
        let ar = &a[r * p..(r + 1) * p];
        let br = &b[r * q..(r + 1) * q];
        for (i, &ai) in ar.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (o, &bj) in out[i * q..(i + 1) * q].iter_mut().zip(br) {
                *o += ai * bj;
            }
        }
    }
    out
}

fn fro2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Linear CKA on column-centered inputs:
/// `||Xc^T Yc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)`.
pub fn cka_tensors(x: &Tensor, y: &Tensor) -> Result<CkaValue> {
    ensure_dim!(x.rows() == y.rows(), "cka row counts {} vs {}", x.rows(), y.rows());
    ensure_dim!(x.rows() >= 2, "cka needs at least 2 rows");
    let (xc, n, p) = centered(x);
    let (yc, _, q) = centered(y);
    let xy = fro2(&cross(&xc, &yc, n, p, q));
    let xx = fro2(&cross(&xc, &xc, n, p, p)).sqrt();
    let yy = fro2(&cross(&yc, &yc, n, q, q)).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Ok(CkaValue {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(CkaValue {
        value: xy / (xx * yy),
        degenerate: false,
    })
}

pub fn mse(acts: &ActivationSet, s: usize, e: usize) -> Result<f64> {
    let (x, y) = pair(acts, s, e)?;
    mse_tensors(x, y)
}

pub fn cosine(acts: &ActivationSet, s: usize, e: usize) -> Result<f64> {
    let (x, y) = pair(acts, s, e)?;
    cosine_tensors(x, y)
}

pub fn cka(acts: &ActivationSet, s: usize, e: usize) -> Result<CkaValue> {
    let (x, y) = pair(acts, s, e)?;
    cka_tensors(x, y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub metric: Metric,
    /// `B x B`; entry `(i, j)` compares blocks `i + 1` and `j + 1`.
    pub values: Tensor,
    /// Off-diagonal CKA pairs that hit the degenerate case (1-based).
    pub degenerate_pairs: Vec<(usize, usize)>,
    pub provenance: ActivationMeta,
}

impl SimilarityMatrix {
    pub fn num_blocks(&self) -> usize {
        self.values.shape()[0]
    }

    /// Value for 1-based blocks `(s, e)`.
    pub fn get(&self, s: usize, e: usize) -> f64 {
        self.values.get2(s - 1, e - 1) as f64
    }

    /// Long form: `s,e,value` over all pairs, 1-based.
    pub fn to_csv(&self) -> CsvTable {
        let b = self.num_blocks();
        let mut t = CsvTable::new(&["s", "e", "value"]);
        for s in 1..=b {
            for e in 1..=b {
                t.row(&[s.to_string(), e.to_string(), fmt_sig9(self.get(s, e))]);
            }
        }
        t
    }

    /// Dense `B x B` grid without a header.
    pub fn to_dense_csv(&self) -> CsvTable {
        let b = self.num_blocks();
        let mut t = CsvTable::headerless(b);
        for s in 1..=b {
            let cells: Vec<String> = (1..=b).map(|e| fmt_sig9(self.get(s, e))).collect();
            t.row(&cells);
        }
        t
    }
}

/// All-pairs matrix over the blocks of a full activation set.
pub fn similarity_matrix(acts: &ActivationSet, metric: Metric) -> Result<SimilarityMatrix> {
    let b = acts.num_blocks();
    let expected: Vec<usize> = (1..=b).collect();
    let have: Vec<usize> = acts.blocks.keys().copied().collect();
    if have != expected {
        return Err(Error::Argument(format!("similarity needs blocks 1..={b}, activation set has {have:?}")));
    }
    let pairs: Vec<(usize, usize)> = (1..=b).flat_map(|s| (s + 1..=b).map(move |e| (s, e))).collect();
    let results: Vec<(f64, bool)> = pairs
        .par_iter()
        .map(|&(s, e)| match metric {
            Metric::Mse => mse(acts, s, e).map(|v| (v, false)),
            Metric::Cosine => cosine(acts, s, e).map(|v| (v, false)),
            Metric::Cka => cka(acts, s, e).map(|c| (c.value, c.degenerate)),
        })
        .collect::<Result<_>>()?;
    let diag = if metric == Metric::Mse { 0.0 } else { 1.0 };
    let mut values = Tensor::zeros(&[b, b]);
    let mut degenerate_pairs = Vec::new();
    for i in 0..b {
        values.set2(i, i, diag);
    }
    for (&(s, e), &(v, deg)) in pairs.iter().zip(&results) {
        values.set2(s - 1, e - 1, v as f32);
        values.set2(e - 1, s - 1, v as f32);
        if deg {
            degenerate_pairs.push((s, e));
        }
    }
    Ok(SimilarityMatrix {
        metric,
        values,
        degenerate_pairs,
        provenance: acts.meta.clone(),
    })
}

/// Parameters per block and the cost of the replacement map, for ranking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamTable {
    /// `block_params[k - 1]` is the parameter count of block `k`.
    pub block_params: Vec<u64>,
    pub map_params: u64,
}

impl ParamTable {
    pub fn for_config(cfg: &ModelConfig, bias: bool) -> Self {
        let d = cfg.d_model as u64;
        Self {
            block_params: vec![cfg.block_param_count(); cfg.num_blocks],
            map_params: d * d + if bias { d } else { 0 },
        }
    }

    /// Parameters removed minus parameters added when replacing `span`.
    pub fn saved(&self, span: Span) -> i64 {
        let removed: u64 = self.block_params[span.s..span.e].iter().sum();
        removed as i64 - self.map_params as i64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanCandidate {
    pub span: Span,
    pub score: f64,
    pub params_saved: i64,
}

/// Total order used by [`rank_spans`].
pub fn candidate_order(metric: Metric, a: &SpanCandidate, b: &SpanCandidate) -> Ordering {
    let by_score = if metric.lower_is_better() {
        a.score.total_cmp(&b.score)
    } else {
        b.score.total_cmp(&a.score)
    };
    by_score
        .then(b.params_saved.cmp(&a.params_saved))
        .then(a.span.s.cmp(&b.span.s))
        .then(a.span.e.cmp(&b.span.e))
}

/// Candidate spans `(s, e)` with `e - s <= max_span_len`, best first:
/// ascending MSE (descending cosine/CKA), then larger parameter saving,
/// then smaller `s`. Overlap is not resolved here.
pub fn rank_spans(matrix: &SimilarityMatrix, max_span_len: usize, top_k: usize, params: &ParamTable) -> Vec<SpanCandidate> {
    let b = matrix.num_blocks();
    let mut out = Vec::new();
    for s in 1..=b {
        for e in s + 1..=b.min(s + max_span_len) {
            let span = Span { s, e };
            out.push(SpanCandidate {
                span,
                score: matrix.get(s, e),
                params_saved: params.saved(span),
            });
        }
    }
    out.sort_by(|a, b| candidate_order(matrix.metric, a, b));
    out.truncate(top_k);
    out
}

pub fn candidates_csv(cands: &[SpanCandidate]) -> CsvTable {
    let mut t = CsvTable::new(&["rank", "s", "e", "span", "score", "params_saved"]);
    for (i, c) in cands.iter().enumerate() {
        t.row(&[
            (i + 1).to_string(),
            c.span.s.to_string(),
            c.span.e.to_string(),
            c.span.zero_based(),
            fmt_sig9(c.score),
            c.params_saved.to_string(),
        ]);
    }
    t
}
