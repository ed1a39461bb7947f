//! Recording per-block representations over a data subset.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::eval::dataset::Dataset;
use crate::model::TransformerModel;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default number of samples per capture batch.
pub const DEFAULT_BATCH: usize = 64;

/// A uniformly sampled subset of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSubset {
    pub dataset: String,
    pub dataset_len: usize,
    pub seed: u64,
    pub indices: Vec<usize>,
}

impl DataSubset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The whole dataset in order.
    pub fn all(dataset: &Dataset) -> Self {
        Self {
            dataset: dataset.meta.name.clone(),
            dataset_len: dataset.len(),
            seed: 0,
            indices: (0..dataset.len()).collect(),
        }
    }
}

/// `n` distinct indices drawn uniformly without replacement.
pub fn sample_subset(dataset: &Dataset, n: usize, seed: u64) -> Result<DataSubset> {
    sample_indices(&dataset.meta.name, dataset.len(), n, seed)
}

pub fn sample_indices(name: &str, len: usize, n: usize, seed: u64) -> Result<DataSubset> {
    if n < 1 || n > len {
        return Err(Error::Argument(format!("subset size {n} must be in 1..={len}")));
    }
    let mut rng = Rng::new(seed);
    Ok(DataSubset {
        dataset: name.to_string(),
        dataset_len: len,
        seed,
        indices: rng.sample_indices(len, n),
    })
}

/// How token rows are collapsed per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    /// Arithmetic mean over tokens: one row per sample.
    Mean,
    /// The CLS token's row: one row per sample.
    Cls,
    /// Every token row, sample-major then token-major.
    All,
}

impl std::str::FromStr for Reduce {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduce::Mean),
            "cls" => Ok(Reduce::Cls),
            "all" => Ok(Reduce::All),
            other => Err(Error::Argument(format!("unknown reduction {other:?} (mean, cls, all)"))),
        }
    }
}

impl std::fmt::Display for Reduce {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduce::Mean => "mean",
            Reduce::Cls => "cls",
            Reduce::All => "all",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaptureOptions {
    pub reduce: Reduce,
    /// Whether the CLS row takes part in the token mean.
    pub mean_includes_cls: bool,
    pub batch_size: usize,
}

impl CaptureOptions {
    pub fn new(reduce: Reduce) -> Self {
        Self {
            reduce,
            mean_includes_cls: true,
            batch_size: DEFAULT_BATCH,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMeta {
    pub reduce: Reduce,
    pub mean_includes_cls: bool,
    pub num_samples: usize,
    pub num_tokens: usize,
    pub seed: u64,
    pub model_fingerprint: String,
    pub subset: DataSubset,
}

/// Captured block outputs keyed by 1-based block number.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet {
    pub blocks: BTreeMap<usize, Tensor>,
    pub meta: ActivationMeta,
}

impl ActivationSet {
    pub fn block(&self, k: usize) -> Result<&Tensor> {
        self.blocks
            .get(&k)
            .ok_or_else(|| Error::Argument(format!("block {k} was not captured")))
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn rows(&self) -> usize {
        self.blocks.values().next().map(|t| t.rows()).unwrap_or(0)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        for (k, t) in &self.blocks {
            c.insert(format!("block.{k}"), t.clone());
        }
        c.insert_json("__meta__", &self.meta)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: ActivationMeta = c.json("__meta__")?;
        let mut blocks = BTreeMap::new();
        for (name, t) in c.tensors() {
            let k = name
                .strip_prefix("block.")
                .and_then(|k| k.parse::<usize>().ok())
                .ok_or_else(|| Error::Argument(format!("unexpected tensor {name:?} in activation dump")))?;
            blocks.insert(k, t.clone());
        }
        Ok(Self { blocks, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Collapses one sample's token matrix according to `opts`.
pub fn reduce_tokens(tokens: &Tensor, has_cls: bool, opts: &CaptureOptions) -> Result<Vec<f32>> {
    let d = tokens.last_dim();
    let n = tokens.rows();
    match opts.reduce {
        Reduce::All => Ok(tokens.data().to_vec()),
        Reduce::Cls => {
            if !has_cls {
                return Err(Error::Argument("CLS reduction requested for a model without a CLS token".into()));
            }
            Ok(tokens.row(0).to_vec())
        }
        Reduce::Mean => {
            let start = usize::from(has_cls && !opts.mean_includes_cls);
            let mut acc = vec![0.0f64; d];
            for i in start..n {
                for (a, &v) in acc.iter_mut().zip(tokens.row(i)) {
                    *a += v as f64;
                }
            }
            let cnt = (n - start) as f64;
            Ok(acc.into_iter().map(|a| (a / cnt) as f32).collect())
        }
    }
}

/// Captures the outputs of the requested blocks (1-based; all blocks when
/// `blocks` is `None`).
pub fn capture_blocks(
    model: &TransformerModel,
    dataset: &Dataset,
    subset: &DataSubset,
    opts: &CaptureOptions,
    blocks: Option<&[usize]>,
) -> Result<ActivationSet> {
    let cfg = &model.config;
    if opts.reduce == Reduce::Cls && !cfg.has_cls {
        return Err(Error::Argument("CLS reduction requested for a model without a CLS token".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Argument("capture batch size must be positive".into()));
    }
    let wanted: Vec<usize> = match blocks {
        Some(b) => b.to_vec(),
        None => (1..=model.num_blocks()).collect(),
    };
    if let Some(&bad) = wanted.iter().find(|&&k| k < 1 || k > model.num_blocks()) {
        return Err(Error::Argument(format!("block {bad} outside 1..={}", model.num_blocks())));
    }
    let deepest = wanted.iter().copied().max().unwrap_or(0);
    let rows_per_sample = if opts.reduce == Reduce::All { cfg.num_tokens() } else { 1 };
    let d = cfg.d_model;
    let mut out: Vec<Vec<f32>> = wanted
        .iter()
        .map(|_| Vec::with_capacity(subset.len() * rows_per_sample * d))
        .collect();
    for batch in subset.indices.chunks(opts.batch_size) {
        let per_sample: Vec<Vec<Vec<f32>>> = batch
            .par_iter()
            .map(|&i| {
                let image = dataset.model_input(i, cfg)?;
                let mut x = model.embed(&image)?;
                let mut rows = vec![Vec::new(); wanted.len()];
                for b in 0..deepest {
                    x = model.block_forward(b, &x)?;
                    for (slot, &k) in wanted.iter().enumerate() {
                        if k == b + 1 {
                            rows[slot] = reduce_tokens(&x, cfg.has_cls, opts)?;
                        }
                    }
                }
                Ok(rows)
            })
            .collect::<Result<_>>()?;
        for sample in per_sample {
            for (slot, rows) in sample.into_iter().enumerate() {
                out[slot].extend(rows);
            }
        }
    }
    let n_rows = subset.len() * rows_per_sample;
    let mut map = BTreeMap::new();
    for (k, data) in wanted.iter().zip(out) {
        let t = Tensor::new(vec![n_rows, d], data)?;
        t.ensure_finite(&format!("block {k} activations"))?;
        map.insert(*k, t);
    }
    Ok(ActivationSet {
        blocks: map,
        meta: ActivationMeta {
            reduce: opts.reduce,
            mean_includes_cls: opts.mean_includes_cls,
            num_samples: subset.len(),
            num_tokens: cfg.num_tokens(),
            seed: subset.seed,
            model_fingerprint: model.fingerprint()?,
            subset: subset.clone(),
        },
    })
}

/// Captures every block's output.
pub fn capture(
    model: &TransformerModel,
    dataset: &Dataset,
    subset: &DataSubset,
    opts: &CaptureOptions,
) -> Result<ActivationSet> {
    capture_blocks(model, dataset, subset, opts, None)
}
