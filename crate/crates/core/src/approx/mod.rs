//! Span approximation: closed-form linear maps, identity skips, trained
//! MLP surrogates, and models patched with them.

pub mod mlp;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capture::{reduce_tokens, ActivationSet, CaptureOptions, DataSubset, Reduce};
use crate::container::Container;
use crate::error::{ensure_dim, Error, Result};
use crate::eval::dataset::Dataset;
use crate::linalg::{linear, lstsq_rows};
use crate::model::{ModelConfig, TransformerModel};
use crate::ops::GeluVariant;
use crate::similarity::mse_tensors;
use crate::span::{check_disjoint, Span};
use crate::tensor::Tensor;

pub use mlp::{MlpApprox, ResMlpApprox, TrainConfig, TrainReport, Trainable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMeta {
    pub span: Span,
    pub use_bias: bool,
    pub rcond: f64,
    pub rows: usize,
    pub reduce: Reduce,
    /// `||X_e - f(X_s)||_F^2 / rows` on the fitting rows.
    pub residual: f64,
    pub activations_fingerprint: String,
}

/// Per-token map `x -> x T (+ bias)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    /// `[d_s, d_e]`.
    pub t: Tensor,
    pub bias: Option<Tensor>,
    pub meta: LinearMeta,
}

impl LinearMap {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.t, self.bias.as_ref().map(|b| b.data()))
    }

    pub fn param_count(&self) -> u64 {
        (self.t.numel() + self.bias.as_ref().map_or(0, |b| b.numel())) as u64
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        self.write(&mut c, "")?;
        c.insert_json("__meta__", &self.meta)?;
        Ok(c)
    }

    fn write(&self, c: &mut Container, prefix: &str) -> Result<()> {
        c.insert(format!("{prefix}T"), self.t.clone());
        if let Some(b) = &self.bias {
            c.insert(format!("{prefix}bias"), b.clone());
        }
        Ok(())
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: LinearMeta = c.json("__meta__")?;
        Self::read(c, "", meta)
    }

    fn read(c: &Container, prefix: &str, meta: LinearMeta) -> Result<Self> {
        let t = c.tensor(&format!("{prefix}T"))?.clone();
        let (_, de) = t.dims2()?;
        let bias = if meta.use_bias {
            Some(c.tensor_shaped(&format!("{prefix}bias"), &[de])?.clone())
        } else {
            None
        };
        t.ensure_finite("linear map")?;
        Ok(Self { t, bias, meta })
    }
}

fn fitting_pair(acts: &ActivationSet, span: Span) -> Result<(&Tensor, &Tensor)> {
    if acts.meta.reduce != Reduce::All {
        return Err(Error::Argument(format!(
            "fitting needs activations captured with reduce=all, got reduce={}",
            acts.meta.reduce
        )));
    }
    let xs = acts.block(span.s)?;
    let xe = acts.block(span.e)?;
    ensure_dim!(xs.rows() == xe.rows(), "blocks {} and {} have {} vs {} rows", span.s, span.e, xs.rows(), xe.rows());
    ensure_dim!(xs.rows() > 0, "no fitting rows");
    Ok((xs, xe))
}

/// Hash of the activation metadata and the two fitting blocks.
pub fn activations_fingerprint(acts: &ActivationSet, span: Span) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&acts.meta).map_err(|e| Error::Argument(e.to_string()))?);
    for k in [span.s, span.e] {
        h.update((k as u64).to_le_bytes());
        for v in acts.block(k)?.data() {
            h.update(v.to_le_bytes());
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Least-squares map from block `s` rows to block `e` rows, shared across
/// all tokens.
pub fn fit_linear(acts: &ActivationSet, span: Span, use_bias: bool, rcond: f64) -> Result<LinearMap> {
    if !(rcond > 0.0 && rcond < 1.0) {
        return Err(Error::Argument(format!("rcond must be in (0, 1), got {rcond}")));
    }
    let (xs, xe) = fitting_pair(acts, span)?;
    xs.ensure_finite("fitting input")?;
    xe.ensure_finite("fitting target")?;
    let n = xs.rows();
    let (ds, de) = (xs.last_dim(), xe.last_dim());
    let p = ds + usize::from(use_bias);
    let fetch = |s: usize, e: usize| {
        let m = e - s;
        let mut out = vec![0.0; m * (p + de)];
        for (r, i) in (s..e).enumerate() {
            for (j, &v) in xs.row(i).iter().enumerate() {
                out[j * m + r] = v as f64;
            }
            if use_bias {
                out[ds * m + r] = 1.0;
            }
            for (j, &v) in xe.row(i).iter().enumerate() {
                out[(p + j) * m + r] = v as f64;
            }
        }
        out
    };
    let sol = lstsq_rows(n, p, de, &fetch, rcond);
    let t = Tensor::from_f64(vec![ds, de], &sol.data[..ds * de])?;
    let bias = if use_bias {
        Some(Tensor::from_f64(vec![de], &sol.data[ds * de..])?)
    } else {
        None
    };
    let mut map = LinearMap {
        t,
        bias,
        meta: LinearMeta {
            span,
            use_bias,
            rcond,
            rows: n,
            reduce: Reduce::All,
            residual: 0.0,
            activations_fingerprint: activations_fingerprint(acts, span)?,
        },
    };
    t_finite(&map)?;
    map.meta.residual = residual_with(xs, xe, |x| map.apply(x))?;
    Ok(map)
}

fn t_finite(map: &LinearMap) -> Result<()> {
    if !map.t.is_finite() || map.bias.as_ref().is_some_and(|b| !b.is_finite()) {
        return Err(Error::Numeric("least-squares solution is not finite".into()));
    }
    Ok(())
}

const RESIDUAL_CHUNK: usize = 4096;

/// `||xe - f(xs)||_F^2 / rows`, evaluated chunk-wise in a fixed order.
pub fn residual_with(xs: &Tensor, xe: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor> + Sync) -> Result<f64> {
    ensure_dim!(xs.rows() == xe.rows(), "residual row counts {} vs {}", xs.rows(), xe.rows());
    let n = xs.rows();
    let starts: Vec<usize> = (0..n).step_by(RESIDUAL_CHUNK).collect();
    let parts: Vec<f64> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + RESIDUAL_CHUNK).min(n);
            let y = f(&xs.slice_rows(s, e))?;
            let t = xe.slice_rows(s, e);
            ensure_dim!(y.shape() == t.shape(), "approximator output {:?} vs target {:?}", y.shape(), t.shape());
            Ok(y.data()
                .iter()
                .zip(t.data())
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum())
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum::<f64>() / n as f64)
}

/// Fitting-set residual of an approximator on a span.
pub fn span_residual(acts: &ActivationSet, span: Span, approx: &Approximator) -> Result<f64> {
    let (xs, xe) = fitting_pair(acts, span)?;
    residual_with(xs, xe, |x| approx.apply(x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Resmlp,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "resmlp" => Ok(Arch::Resmlp),
            other => Err(Error::Argument(format!("unknown approximator architecture {other:?} (mlp, resmlp)"))),
        }
    }
}

/// Trains an MLP or residual MLP on the span's fitting rows.
pub fn fit_mlp(acts: &ActivationSet, span: Span, arch: Arch, cfg: &TrainConfig) -> Result<(Approximator, TrainReport)> {
    let (xs, xe) = fitting_pair(acts, span)?;
    ensure_dim!(xs.last_dim() == xe.last_dim(), "mlp approximators need equal widths");
    xs.ensure_finite("fitting input")?;
    xe.ensure_finite("fitting target")?;
    let d = xs.last_dim();
    let mut init = crate::rng::Rng::new(cfg.seed).fork(0);
    match arch {
        Arch::Mlp => {
            let mut m = MlpApprox::new(d, &mut init)?;
            let report = mlp::train(&mut m, xs, xe, cfg)?;
            Ok((Approximator::Mlp(Box::new(m)), report))
        }
        Arch::Resmlp => {
            let mut m = ResMlpApprox::new(d, cfg.dropout_p, &mut init)?;
            let report = mlp::train(&mut m, xs, xe, cfg)?;
            Ok((Approximator::ResMlp(Box::new(m)), report))
        }
    }
}

/// Surrogate for a bypassed span, applied to every token row.
#[derive(Clone, Debug, PartialEq)]
pub enum Approximator {
    Linear(LinearMap),
    Identity,
    Mlp(Box<MlpApprox>),
    ResMlp(Box<ResMlpApprox>),
}

/// The identity skip: blocks in the span are dropped with nothing in their
/// place.
pub fn make_skipat(span: Span) -> (Span, Approximator) {
    (span, Approximator::Identity)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ApproxHeader {
    kind: String,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    linear: Option<LinearMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dropout_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gelu: Option<GeluVariant>,
}

impl Approximator {
    pub fn kind(&self) -> &'static str {
        match self {
            Approximator::Linear(_) => "linear",
            Approximator::Identity => "identity",
            Approximator::Mlp(_) => "mlp",
            Approximator::ResMlp(_) => "resmlp",
        }
    }

    /// Input width, or `None` for the identity.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Approximator::Linear(m) => Some(m.t.shape()[0]),
            Approximator::Identity => None,
            Approximator::Mlp(m) => Some(m.dim()),
            Approximator::ResMlp(m) => Some(m.dim()),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Approximator::Linear(m) => m.apply(x),
            Approximator::Identity => Ok(x.clone()),
            Approximator::Mlp(m) => mlp::apply_rows(m.as_ref(), x),
            Approximator::ResMlp(m) => mlp::apply_rows(m.as_ref(), x),
        }
    }

    pub fn param_count(&self) -> u64 {
        match self {
            Approximator::Linear(m) => m.param_count(),
            Approximator::Identity => 0,
            Approximator::Mlp(m) => m.param_count(),
            Approximator::ResMlp(m) => m.param_count(),
        }
    }

    fn header(&self) -> ApproxHeader {
        let mut h = ApproxHeader {
            kind: self.kind().into(),
            dim: self.dim().unwrap_or(0),
            linear: None,
            dropout_p: None,
            gelu: None,
        };
        match self {
            Approximator::Linear(m) => h.linear = Some(m.meta.clone()),
            Approximator::Mlp(m) => h.gelu = Some(m.gelu),
            Approximator::ResMlp(m) => h.dropout_p = Some(m.dropout_p),
            Approximator::Identity => {}
        }
        h
    }

    fn write(&self, c: &mut Container, prefix: &str) -> Result<()> {
        match self {
            Approximator::Linear(m) => m.write(c, prefix),
            Approximator::Identity => Ok(()),
            Approximator::Mlp(m) => mlp::store_params(c, prefix, &m.params(), &m.shapes()),
            Approximator::ResMlp(m) => mlp::store_params(c, prefix, &m.params(), &m.shapes()),
        }
    }

    fn read(c: &Container, prefix: &str, h: ApproxHeader) -> Result<Self> {
        let missing = |what: &str| Error::Plan(format!("{} approximator header lacks {what}", h.kind));
        match h.kind.as_str() {
            "linear" => {
                let meta = h.linear.clone().ok_or_else(|| missing("linear metadata"))?;
                Ok(Approximator::Linear(LinearMap::read(c, prefix, meta)?))
            }
            "identity" => Ok(Approximator::Identity),
            "mlp" => Ok(Approximator::Mlp(Box::new(MlpApprox::load(
                c,
                prefix,
                h.dim,
                h.gelu.unwrap_or_default(),
            )?))),
            "resmlp" => Ok(Approximator::ResMlp(Box::new(ResMlpApprox::load(
                c,
                prefix,
                h.dim,
                h.dropout_p.ok_or_else(|| missing("dropout_p"))?,
            )?))),
            other => Err(Error::Plan(format!("unknown approximator kind {other:?}"))),
        }
    }

    /// Standalone container: layer tensors plus `"__meta__"`.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        self.write(&mut c, "")?;
        c.insert_json("__meta__", &self.header())?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let h: ApproxHeader = c.json("__meta__")?;
        Self::read(c, "", h)
    }
}

/// Ordered, non-overlapping spans with their surrogates.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ApproxPlan {
    entries: Vec<(Span, Approximator)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PlanEntryHeader {
    span: Span,
    approximator: ApproxHeader,
}

impl ApproxPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(entries: Vec<(Span, Approximator)>) -> Result<Self> {
        let spans: Vec<Span> = entries.iter().map(|(s, _)| *s).collect();
        check_disjoint(&spans)?;
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(Span, Approximator)] {
        &self.entries
    }

    pub fn spans(&self) -> Vec<Span> {
        self.entries.iter().map(|(s, _)| *s).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Human-readable summary such as `"linear 3:5, identity 6:7"` (0-based).
    pub fn describe(&self) -> String {
        if self.entries.is_empty() {
            return "original".into();
        }
        self.entries
            .iter()
            .map(|(s, a)| format!("{} {}", a.kind(), s.zero_based()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (span, a) in &self.entries {
            if span.e > config.num_blocks {
                return Err(Error::Plan(format!(
                    "span {span} ends past the last block ({} blocks)",
                    config.num_blocks
                )));
            }
            if let Some(d) = a.dim() {
                if d != config.d_model {
                    return Err(Error::Plan(format!(
                        "{} approximator for span {span} has width {d}, model has d_model {}",
                        a.kind(),
                        config.d_model
                    )));
                }
            }
        }
        Ok(())
    }

    /// One container holding every entry, tensors prefixed `"plan.{i}."`.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        let mut headers = Vec::new();
        for (i, (span, a)) in self.entries.iter().enumerate() {
            a.write(&mut c, &format!("plan.{i}."))?;
            headers.push(PlanEntryHeader {
                span: *span,
                approximator: a.header(),
            });
        }
        c.insert_json("__plan__", &headers)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let headers: Vec<PlanEntryHeader> = c.json("__plan__")?;
        let entries = headers
            .into_iter()
            .enumerate()
            .map(|(i, h)| Ok((h.span, Approximator::read(c, &format!("plan.{i}."), h.approximator)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Anything that maps an image to token representations.
pub trait Encoder: Sync {
    fn config(&self) -> &ModelConfig;
    /// Residual stream after the last executed block, before the final norm.
    fn last_block(&self, image: &Tensor) -> Result<Tensor>;
    /// Final token matrix after the closing norm.
    fn encode(&self, image: &Tensor) -> Result<Tensor>;
    fn param_count(&self) -> u64;
    fn describe(&self) -> String;
}

impl Encoder for TransformerModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn last_block(&self, image: &Tensor) -> Result<Tensor> {
        let mut x = self.embed(image)?;
        for i in 0..self.num_blocks() {
            x = self.block_forward(i, &x)?;
        }
        Ok(x)
    }

    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.forward(image)
    }

    fn param_count(&self) -> u64 {
        self.count_params()
    }

    fn describe(&self) -> String {
        "original".into()
    }
}

/// A host model with spans replaced by approximators.
#[derive(Clone, Debug)]
pub struct PatchedModel<'a> {
    pub model: &'a TransformerModel,
    pub plan: ApproxPlan,
}

pub fn patch(model: &TransformerModel, plan: ApproxPlan) -> Result<PatchedModel<'_>> {
    plan.validate(&model.config)?;
    Ok(PatchedModel { model, plan })
}

impl PatchedModel<'_> {
    /// Runs the patched stack on an embedded token matrix.
    pub fn run_blocks(&self, mut x: Tensor) -> Result<Tensor> {
        let b = self.model.num_blocks();
        let mut entries = self.plan.entries.iter().peekable();
        // `done` blocks have produced output so far
        let mut done = 0;
        while done < b {
            if let Some((span, a)) = entries.peek() {
                if span.s == done {
                    x = a.apply(&x)?;
                    done = span.e;
                    entries.next();
                    continue;
                }
            }
            x = self.model.block_forward(done, &x)?;
            done += 1;
        }
        Ok(x)
    }
}

impl Encoder for PatchedModel<'_> {
    fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn last_block(&self, image: &Tensor) -> Result<Tensor> {
        self.run_blocks(self.model.embed(image)?)
    }

    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.model.final_norm(&self.last_block(image)?)
    }

    fn param_count(&self) -> u64 {
        count_params_patched(self.model, &self.plan)
    }

    fn describe(&self) -> String {
        self.plan.describe()
    }
}

/// Host parameters minus the bypassed blocks plus the approximators.
pub fn count_params_patched(model: &TransformerModel, plan: &ApproxPlan) -> u64 {
    let mut total = model.count_params();
    for (span, a) in plan.entries() {
        for k in span.skipped_blocks() {
            total -= model.blocks[k].param_count();
        }
        total += a.param_count();
    }
    total
}

/// Last-block rows of an encoder over a subset, reduced like a capture.
pub fn last_block_rows(enc: &dyn Encoder, dataset: &Dataset, subset: &DataSubset, opts: &CaptureOptions) -> Result<Tensor> {
    let cfg = enc.config();
    let rows: Vec<Vec<f32>> = subset
        .indices
        .par_iter()
        .map(|&i| {
            let image = dataset.model_input(i, cfg)?;
            reduce_tokens(&enc.last_block(&image)?, cfg.has_cls, opts)
        })
        .collect::<Result<_>>()?;
    let d = cfg.d_model;
    let n = rows.iter().map(|r| r.len()).sum::<usize>() / d;
    Tensor::new(vec![n, d], rows.concat())
}

/// MSE between the original and patched last-block outputs.
pub fn final_layer_drift(
    model: &TransformerModel,
    patched: &PatchedModel<'_>,
    dataset: &Dataset,
    subset: &DataSubset,
    opts: &CaptureOptions,
) -> Result<f64> {
    let a = last_block_rows(model, dataset, subset, opts)?;
    let b = last_block_rows(patched, dataset, subset, opts)?;
    mse_tensors(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::ActivationMeta;
    use crate::rng::Rng;
    use std::collections::BTreeMap;

    fn acts_from(xs: Tensor, xe: Tensor, reduce: Reduce) -> ActivationSet {
        let n = xs.rows();
        let mut blocks = BTreeMap::new();
        blocks.insert(1, xs);
        blocks.insert(2, xe);
        ActivationSet {
            blocks,
            meta: ActivationMeta {
                reduce,
                mean_includes_cls: true,
                num_samples: n,
                num_tokens: 1,
                seed: 0,
                model_fingerprint: String::new(),
                subset: DataSubset {
                    dataset: "test".into(),
                    dataset_len: n,
                    seed: 0,
                    indices: (0..n).collect(),
                },
            },
        }
    }

    fn random(n: usize, d: usize, rng: &mut Rng) -> Tensor {
        Tensor::from_f64(vec![n, d], &(0..n * d).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn self_map_is_identity() {
        let mut rng = Rng::new(1);
        let x = random(50, 4, &mut rng);
        let acts = acts_from(x.clone(), x.clone(), Reduce::All);
        let m = fit_linear(&acts, Span { s: 1, e: 2 }, false, 1e-6).unwrap();
        assert!(m.t.max_abs_diff(&Tensor::eye(4)) < 1e-5);
        assert!(m.meta.residual <= 1e-8 * x.frobenius().powi(2));
    }

    #[test]
    fn bias_recovers_shift() {
        let mut rng = Rng::new(2);
        let x = random(80, 3, &mut rng);
        let c = [0.5f32, -2.0, 1.25];
        let y = x.add_row_vector(&c).unwrap();
        let acts = acts_from(x, y, Reduce::All);
        let m = fit_linear(&acts, Span { s: 1, e: 2 }, true, 1e-6).unwrap();
        let b = m.bias.as_ref().unwrap();
        for (got, want) in b.data().iter().zip(c) {
            assert!((got - want).abs() < 1e-4);
        }
        assert!(m.t.max_abs_diff(&Tensor::eye(3)) < 1e-4);
        assert!(m.meta.residual < 1e-8);
    }

    #[test]
    fn requires_all_reduction() {
        let mut rng = Rng::new(3);
        let x = random(10, 2, &mut rng);
        let acts = acts_from(x.clone(), x, Reduce::Mean);
        assert!(matches!(fit_linear(&acts, Span { s: 1, e: 2 }, false, 1e-6), Err(Error::Argument(_))));
    }

    #[test]
    fn linear_container_round_trip() {
        let mut rng = Rng::new(4);
        let x = random(30, 3, &mut rng);
        let y = random(30, 3, &mut rng);
        let acts = acts_from(x, y, Reduce::All);
        let m = fit_linear(&acts, Span { s: 1, e: 2 }, true, 1e-6).unwrap();
        let back = LinearMap::from_container(&Container::from_bytes(&m.to_container().unwrap().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn plan_rejects_overlap() {
        let a = (Span { s: 1, e: 3 }, Approximator::Identity);
        let b = (Span { s: 3, e: 4 }, Approximator::Identity);
        assert!(matches!(ApproxPlan::new(vec![a, b]), Err(Error::Plan(_))));
    }

    #[test]
    fn identity_is_bitwise() {
        let mut rng = Rng::new(5);
        let x = random(7, 5, &mut rng);
        let (_, id) = make_skipat(Span { s: 1, e: 2 });
        assert!(id.apply(&x).unwrap().bitwise_eq(&x));
    }
}
