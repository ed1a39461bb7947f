//! Transfer of fitted maps across datasets, drift curves, PCA exports and
//! per-class accuracy deltas.

use serde::{Deserialize, Serialize};

use crate::approx::{fit_linear, last_block_rows, patch, ApproxPlan, Approximator, Encoder, LinearMap};
use crate::capture::{capture, capture_blocks, CaptureOptions, DataSubset, Reduce};
use crate::error::{Error, Result};
use crate::eval::dataset::Dataset;
use crate::eval::probe::{evaluate, extract_features, EvalSummary, Feature, ProbeConfig, ProbeResult};
use crate::linalg::{pca_project, Pca};
use crate::model::TransformerModel;
use crate::report::{fmt_sig9, CsvTable};
use crate::similarity::mse_tensors;
use crate::span::Span;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub use_bias: bool,
    pub rcond: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            use_bias: false,
            rcond: crate::linalg::DEFAULT_RCOND,
        }
    }
}

/// Fits the span's map on `fit_subset` of `fit_dataset` (all tokens).
pub fn fit_span(model: &TransformerModel, span: Span, fit_dataset: &Dataset, fit_subset: &DataSubset, fit: &FitOptions) -> Result<LinearMap> {
    span.check_blocks(model.num_blocks())?;
    let acts = capture_blocks(model, fit_dataset, fit_subset, &CaptureOptions::new(Reduce::All), Some(&[span.s, span.e]))?;
    fit_linear(&acts, span, fit.use_bias, fit.rcond)
}

/// Map fitted on one dataset, probed on another with no further training
/// of the patched encoder.
#[allow(clippy::too_many_arguments)]
pub fn generalize(
    model: &TransformerModel,
    span: Span,
    fit_dataset: &Dataset,
    fit_subset: &DataSubset,
    apply_train: &Dataset,
    apply_test: &Dataset,
    fit: &FitOptions,
    probe: &ProbeConfig,
    seeds: &[u64],
    encoder_id: &str,
) -> Result<(LinearMap, EvalSummary)> {
    let map = fit_span(model, span, fit_dataset, fit_subset, fit)?;
    let plan = ApproxPlan::new(vec![(span, Approximator::Linear(map.clone()))])?;
    let patched = patch(model, plan)?;
    let summary = evaluate(&patched, apply_train, apply_test, probe, seeds, encoder_id)?;
    Ok((map, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub span: Span,
    /// Fitting residual of the map.
    pub residual: f64,
    pub drift: f64,
}

/// For every single-block span `(k-1, k)`, fits a map on the subset and
/// reports the last-block drift of the patched model. Length `B - 1`.
pub fn drift_curve(model: &TransformerModel, dataset: &Dataset, subset: &DataSubset, drift_opts: &CaptureOptions, fit: &FitOptions) -> Result<Vec<DriftPoint>> {
    let b = model.num_blocks();
    if b < 2 {
        return Err(Error::Argument(format!("drift curve needs at least 2 blocks, model has {b}")));
    }
    let acts = capture(model, dataset, subset, &CaptureOptions::new(Reduce::All))?;
    let original = last_block_rows(model, dataset, subset, drift_opts)?;
    let mut out = Vec::with_capacity(b - 1);
    for k in 2..=b {
        let span = Span { s: k - 1, e: k };
        let map = fit_linear(&acts, span, fit.use_bias, fit.rcond)?;
        let residual = map.meta.residual;
        let patched = patch(model, ApproxPlan::new(vec![(span, Approximator::Linear(map))])?)?;
        let rows = last_block_rows(&patched, dataset, subset, drift_opts)?;
        out.push(DriftPoint {
            span,
            residual,
            drift: mse_tensors(&original, &rows)?,
        });
    }
    Ok(out)
}

pub fn drift_csv(points: &[DriftPoint]) -> CsvTable {
    let mut t = CsvTable::new(&["block", "s", "e", "residual", "drift"]);
    for p in points {
        t.row(&[
            p.span.e.to_string(),
            p.span.s.to_string(),
            p.span.e.to_string(),
            fmt_sig9(p.residual),
            fmt_sig9(p.drift),
        ]);
    }
    t
}

/// PCA of final representations; components come from the original
/// encoder so both point clouds share axes.
pub fn pca_export(
    original: &dyn Encoder,
    patched: &dyn Encoder,
    dataset: &Dataset,
    indices: &[usize],
    k: usize,
    feature: Feature,
) -> Result<(Pca, CsvTable)> {
    let fo = extract_features(original, dataset, indices, feature)?;
    let fp = extract_features(patched, dataset, indices, feature)?;
    let pca = pca_project(&fo, k)?;
    let po = pca.projected.clone();
    let pp = pca.transform(&fp)?;
    let mut header = vec!["sample".to_string(), "label".to_string()];
    header.extend((1..=k).map(|i| format!("pc{i}")));
    header.push("variant".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = CsvTable::new(&header_refs);
    for (variant, proj) in [("original", &po), ("tba", &pp)] {
        for (r, &i) in indices.iter().enumerate() {
            let mut cells = vec![i.to_string(), dataset.labels[i].to_string()];
            cells.extend(proj.row(r).iter().map(|&v| fmt_sig9(v as f64)));
            cells.push(variant.into());
            t.row(&cells);
        }
    }
    Ok((pca, t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub original: Vec<f64>,
    pub patched: Vec<f64>,
    /// `patched - original` per class.
    pub delta: Vec<f64>,
    /// Difference of row-normalized confusion matrices.
    pub confusion_delta: Vec<Vec<f64>>,
}

fn pooled(results: &[ProbeResult]) -> Result<Vec<Vec<usize>>> {
    let first = results
        .first()
        .ok_or_else(|| Error::Argument("per-class delta needs at least one result".into()))?;
    let c = first.confusion.len();
    let mut total = vec![vec![0usize; c]; c];
    for r in results {
        if r.confusion.len() != c {
            return Err(Error::Argument(format!(
                "results disagree on class count ({c} vs {})",
                r.confusion.len()
            )));
        }
        for (row, add) in total.iter_mut().zip(&r.confusion) {
            row.iter_mut().zip(add).for_each(|(a, b)| *a += b);
        }
    }
    Ok(total)
}

fn normalize(conf: &[Vec<usize>]) -> Vec<Vec<f64>> {
    conf.iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter().map(|&v| if n == 0 { 0.0 } else { v as f64 / n as f64 }).collect()
        })
        .collect()
}

/// Per-class accuracy change from `original` to `patched`; confusion counts
/// are pooled over the seeds on each side.
pub fn per_class_delta(original: &[ProbeResult], patched: &[ProbeResult]) -> Result<ClassDelta> {
    let a = pooled(original)?;
    let b = pooled(patched)?;
    if a.len() != b.len() {
        return Err(Error::Argument(format!("class counts differ: {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (normalize(&a), normalize(&b));
    let diag = |m: &[Vec<f64>]| (0..m.len()).map(|c| m[c][c]).collect::<Vec<_>>();
    let (oa, pb) = (diag(&na), diag(&nb));
    Ok(ClassDelta {
        delta: pb.iter().zip(&oa).map(|(p, o)| p - o).collect(),
        confusion_delta: nb
            .iter()
            .zip(&na)
            .map(|(rb, ra)| rb.iter().zip(ra).map(|(x, y)| x - y).collect())
            .collect(),
        original: oa,
        patched: pb,
    })
}

impl ClassDelta {
    pub fn per_class_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["class", "original", "patched", "delta"]);
        for c in 0..self.delta.len() {
            t.row(&[
                c.to_string(),
                fmt_sig9(self.original[c]),
                fmt_sig9(self.patched[c]),
                fmt_sig9(self.delta[c]),
            ]);
        }
        t
    }

    /// `true` column then one column per predicted class.
    pub fn confusion_csv(&self) -> CsvTable {
        let c = self.delta.len();
        let mut header = vec!["true".to_string()];
        header.extend((0..c).map(|j| format!("pred{j}")));
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut t = CsvTable::new(&refs);
        for (i, row) in self.confusion_delta.iter().enumerate() {
            let mut cells = vec![i.to_string()];
            cells.extend(row.iter().map(|&v| fmt_sig9(v)));
            t.row(&cells);
        }
        t
    }
}
