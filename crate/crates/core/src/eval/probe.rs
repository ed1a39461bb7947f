//! Linear-probe classification on frozen encoder features.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::approx::Encoder;
use crate::error::{ensure_dim, Error, Result};
use crate::eval::dataset::Dataset;
use crate::report::{fmt_sig9, CsvTable};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which token representation feeds the probe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    #[default]
    Cls,
    Mean,
}

impl std::str::FromStr for Feature {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Feature::Cls),
            "mean" => Ok(Feature::Mean),
            other => Err(Error::Argument(format!("unknown probe feature {other:?} (cls, mean)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub feature: Feature,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            batch: 256,
            feature: Feature::Cls,
        }
    }
}

/// Final-representation features, one row per dataset index.
pub fn extract_features(enc: &dyn Encoder, dataset: &Dataset, indices: &[usize], feature: Feature) -> Result<Tensor> {
    let cfg = enc.config();
    if feature == Feature::Cls && !cfg.has_cls {
        return Err(Error::Argument("cls probe feature requested for a model without a CLS token".into()));
    }
    let d = cfg.d_model;
    let rows: Vec<Vec<f32>> = indices
        .par_iter()
        .map(|&i| {
            let tokens = enc.encode(&dataset.model_input(i, cfg)?)?;
            Ok(match feature {
                Feature::Cls => tokens.row(0).to_vec(),
                Feature::Mean => {
                    let mut acc = vec![0.0f64; d];
                    for r in 0..tokens.rows() {
                        for (a, &v) in acc.iter_mut().zip(tokens.row(r)) {
                            *a += v as f64;
                        }
                    }
                    acc.into_iter().map(|a| (a / tokens.rows() as f64) as f32).collect()
                }
            })
        })
        .collect::<Result<_>>()?;
    Tensor::new(vec![indices.len(), d], rows.concat())
}

/// Softmax linear classifier, weight `[d, classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub dim: usize,
    pub num_classes: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Probe {
    pub fn init(dim: usize, num_classes: usize, rng: &mut Rng) -> Self {
        let k = 1.0 / (dim as f64).sqrt();
        let w = (0..dim * num_classes).map(|_| rng.uniform_range(-k, k)).collect();
        let b = (0..num_classes).map(|_| rng.uniform_range(-k, k)).collect();
        Self { dim, num_classes, w, b }
    }

    fn logits(&self, x: &[f32]) -> Vec<f64> {
        let c = self.num_classes;
        let mut out = self.b.clone();
        for (i, &xi) in x.iter().enumerate() {
            let xi = xi as f64;
            for (o, &w) in out.iter_mut().zip(&self.w[i * c..(i + 1) * c]) {
                *o += xi * w;
            }
        }
        out
    }

    /// Arg-max class; the lowest index wins ties.
    pub fn predict_row(&self, x: &[f32]) -> usize {
        let l = self.logits(x);
        let mut best = 0;
        for (j, &v) in l.iter().enumerate() {
            if v > l[best] {
                best = j;
            }
        }
        best
    }

    pub fn predict(&self, features: &Tensor) -> Vec<usize> {
        (0..features.rows()).map(|i| self.predict_row(features.row(i))).collect()
    }

    /// Mean cross-entropy and gradients over the given rows.
    pub fn loss_grad(&self, features: &Tensor, labels: &[usize], rows: &[usize]) -> (f64, Vec<f64>, Vec<f64>) {
        let c = self.num_classes;
        let inv = 1.0 / rows.len() as f64;
        let mut dw = vec![0.0; self.w.len()];
        let mut db = vec![0.0; c];
        let mut loss = 0.0;
        for &r in rows {
            let x = features.row(r);
            let l = self.logits(x);
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
            loss += z.ln() + m - l[labels[r]];
            let g: Vec<f64> = l
                .iter()
                .enumerate()
                .map(|(j, v)| ((v - m).exp() / z - if j == labels[r] { 1.0 } else { 0.0 }) * inv)
                .collect();
            for (i, &xi) in x.iter().enumerate() {
                let xi = xi as f64;
                for (d, gj) in dw[i * c..(i + 1) * c].iter_mut().zip(&g) {
                    *d += xi * gj;
                }
            }
            db.iter_mut().zip(&g).for_each(|(d, gj)| *d += gj);
        }
        (loss * inv, dw, db)
    }
}

fn check_labels(features: &Tensor, labels: &[usize], num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::Argument(format!("a probe needs at least 2 classes, got {num_classes}")));
    }
    ensure_dim!(features.ndim() == 2, "probe features must be 2-d, got {:?}", features.shape());
    ensure_dim!(features.rows() == labels.len(), "{} feature rows vs {} labels", features.rows(), labels.len());
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Argument(format!("label {bad} outside 0..{num_classes}")));
    }
    Ok(())
}

/// Adam on shuffled mini-batches, one pass per epoch.
pub fn train_probe(features: &Tensor, labels: &[usize], num_classes: usize, cfg: &ProbeConfig, seed: u64) -> Result<Probe> {
    check_labels(features, labels, num_classes)?;
    if cfg.batch == 0 {
        return Err(Error::Argument("probe batch size must be positive".into()));
    }
    features.ensure_finite("probe features")?;
    let mut rng = Rng::new(seed);
    let mut probe = Probe::init(features.last_dim(), num_classes, &mut rng.fork(0));
    let mut order_rng = rng.fork(1);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut sw = AdamState::new(probe.w.len(), adam)?;
    let mut sb = AdamState::new(probe.b.len(), adam)?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch) {
            let (loss, dw, db) = probe.loss_grad(features, labels, batch);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("probe loss became non-finite in epoch {epoch}")));
            }
            sw.update(&mut probe.w, &dw)?;
            sb.update(&mut probe.b, &db)?;
        }
    }
    Ok(probe)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub class_counts: Vec<usize>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub seed: u64,
    pub epochs: usize,
    pub encoder: String,
    pub plan: String,
}

/// Scores predictions and checks the reported accuracy against an
/// independent recount.
pub fn score(predicted: &[usize], labels: &[usize], num_classes: usize) -> Result<(f64, Vec<f64>, Vec<usize>, Vec<Vec<usize>>)> {
    ensure_dim!(predicted.len() == labels.len() && !labels.is_empty(), "cannot score {} predictions against {} labels", predicted.len(), labels.len());
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in predicted.iter().zip(labels) {
        confusion[t][p] += 1;
    }
    let counts: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let per_class: Vec<f64> = confusion
        .iter()
        .enumerate()
        .map(|(c, r)| if counts[c] == 0 { 0.0 } else { r[c] as f64 / counts[c] as f64 })
        .collect();
    let diag: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let accuracy = diag as f64 / labels.len() as f64;
    let recount = predicted.iter().zip(labels).filter(|(p, t)| p == t).count();
    if recount != diag {
        return Err(Error::Numeric(format!("accuracy recount mismatch: {recount} vs {diag}")));
    }
    Ok((accuracy, per_class, counts, confusion))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub results: Vec<ProbeResult>,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for one seed).
    pub std: f64,
}

impl EvalSummary {
    pub fn from_results(results: Vec<ProbeResult>) -> Self {
        let n = results.len() as f64;
        let mean = results.iter().map(|r| r.accuracy).sum::<f64>() / n;
        let std = if results.len() > 1 {
            (results.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { results, mean, std }
    }
}

/// Trains a probe per seed on `train` features of the encoder and scores
/// it on `test`.
pub fn evaluate(enc: &dyn Encoder, train: &Dataset, test: &Dataset, cfg: &ProbeConfig, seeds: &[u64], encoder_id: &str) -> Result<EvalSummary> {
    if seeds.is_empty() {
        return Err(Error::Argument("evaluate needs at least one seed".into()));
    }
    let num_classes = train.num_classes();
    if test.num_classes() != num_classes {
        return Err(Error::Argument(format!(
            "train dataset has {num_classes} classes, test dataset has {}",
            test.num_classes()
        )));
    }
    let all_train: Vec<usize> = (0..train.len()).collect();
    let all_test: Vec<usize> = (0..test.len()).collect();
    let ftrain = extract_features(enc, train, &all_train, cfg.feature)?;
    let ftest = extract_features(enc, test, &all_test, cfg.feature)?;
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let probe = train_probe(&ftrain, &train.labels, num_classes, cfg, seed)?;
        let pred = probe.predict(&ftest);
        let (accuracy, per_class_accuracy, class_counts, confusion) = score(&pred, &test.labels, num_classes)?;
        results.push(ProbeResult {
            accuracy,
            per_class_accuracy,
            class_counts,
            confusion,
            seed,
            epochs: cfg.epochs,
            encoder: encoder_id.to_string(),
            plan: enc.describe(),
        });
    }
    Ok(EvalSummary::from_results(results))
}

/// `variant,seed,accuracy` rows followed by `mean` and `std` rows.
pub fn summary_csv(named: &[(&str, &EvalSummary)]) -> CsvTable {
    let mut t = CsvTable::new(&["variant", "seed", "accuracy"]);
    for (name, s) in named {
        for r in &s.results {
            t.row(&[name.to_string(), r.seed.to_string(), fmt_sig9(r.accuracy)]);
        }
        t.row(&[name.to_string(), "mean".into(), fmt_sig9(s.mean)]);
        t.row(&[name.to_string(), "std".into(), fmt_sig9(s.std)]);
    }
    t
}
