//! Synthetic models and datasets with planted, exactly known structure.
//!
//! Planted spans `(s, e)` bypass blocks `s+1..=e` (0-based indices
//! `s..e`). All blocks of a span except the last become exact identities
//! (zeroed norms and branch biases). The last block carries the planted map:
//!
//! * its attention branch is zeroed (`wo = 0`, `bo = 0`);
//! * its norms use epsilon `1e12` with gain `1e6`, so the second norm
//!   returns `x - mean(x)` up to a relative error of `var / 2e12`, far below
//!   f32 resolution;
//! * the MLP uses GELU's odd part, `gelu(z) - gelu(-z) = z`: hidden units
//!   `0..d` read `z`, units `d..2d` read `-z`, and the output weights
//!   `[G; -G]` write `z G + b`.
//!
//! The residual then becomes `x + (x - mean(x)) G + b`. Since the norm drops
//! the row mean, a linear plant `x -> x A + b` is feasible only when
//! `A - I` annihilates constant rows, i.e. every column of `A` sums to 1;
//! the generator enforces this and needs `mlp_hidden >= 2 d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::dataset::{Dataset, DatasetMeta};
use crate::linalg::{jacobi_svd, Mat64};
use crate::model::{ModelConfig, TransformerModel};
use crate::rng::Rng;
use crate::span::{check_disjoint, Span};
use crate::tensor::Tensor;

/// Epsilon used by the norms of a planted block.
pub const PLANT_NORM_EPS: f64 = 1e12;
const PLANT_NORM_GAIN: f32 = 1e6;
/// Largest admissible condition number of a planted map.
pub const MAX_PLANT_CONDITION: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub enum PlantKind {
    Identity,
    /// `x -> x A`, `A` is `d x d`.
    Linear(Tensor),
    /// `x -> x A + b`
    Affine(Tensor, Tensor),
    /// `x -> x + gelu((x - mean(x)) W_in) W_out`, or with `replace` the
    /// centered part of `x` is removed first: `x -> mean(x) + gelu(..) W_out`.
    Gelu {
        w_in: Tensor,
        w_out: Tensor,
        replace: bool,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plant {
    pub span: Span,
    pub kind: PlantKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantSpec {
    pub base: ModelConfig,
    pub plants: Vec<Plant>,
    /// Scale of the branch output weights of ordinary random blocks.
    pub noise_scale: f64,
    pub seed: u64,
}

/// Random linear map with unit column sums and bounded condition number:
/// `A = I + P N` with `P` the centering projector.
pub fn random_plant_map(d: usize, strength: f64, rng: &mut Rng) -> Tensor {
    let n: Vec<f64> = (0..d * d).map(|_| rng.normal() * strength / (d as f64).sqrt()).collect();
    let mut a = vec![0.0f64; d * d];
    for j in 0..d {
        let col_mean = (0..d).map(|i| n[i * d + j]).sum::<f64>() / d as f64;
        for i in 0..d {
            a[i * d + j] = n[i * d + j] - col_mean + if i == j { 1.0 } else { 0.0 };
        }
    }
    Tensor::from_f64(vec![d, d], &a).expect("square")
}

fn condition_number(a: &Tensor) -> Result<f64> {
    let svd = jacobi_svd(&Mat64::from_tensor(a)?);
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let smin = svd.singular_values.last().copied().unwrap_or(0.0);
    Ok(if smin > 0.0 { smax / smin } else { f64::INFINITY })
}

fn check_map(a: &Tensor, d: usize) -> Result<()> {
    if a.shape() != [d, d] {
        return Err(Error::Spec(format!("planted map must be {d}x{d}, got {:?}", a.shape())));
    }
    for j in 0..d {
        let s: f64 = (0..d).map(|i| a.get2(i, j) as f64).sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Spec(format!(
                "planted map column {j} sums to {s}; pre-norm blocks only realize maps whose columns sum to 1"
            )));
        }
    }
    let cond = condition_number(a)?;
    if cond > MAX_PLANT_CONDITION {
        return Err(Error::Spec(format!("planted map condition number {cond:.1} exceeds {MAX_PLANT_CONDITION}")));
    }
    Ok(())
}

fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| (rng.normal() * std) as f32).collect()).expect("shape")
}

/// Random encoder; branch outputs are scaled by `noise_scale`.
pub fn random_model(config: ModelConfig, noise_scale: f64, seed: u64) -> Result<TransformerModel> {
    let mut m = TransformerModel::zeros(config)?;
    let mut rng = Rng::new(seed);
    let cfg = m.config.clone();
    let (d, h) = (cfg.d_model, cfg.mlp_hidden);
    m.patch_kernel = normal_tensor(&mut rng, &[cfg.patch_dim(), d], 1.0 / (cfg.patch_dim() as f64).sqrt());
    m.patch_bias = normal_tensor(&mut rng, &[d], 0.02);
    m.pos_embed = normal_tensor(&mut rng, &[cfg.num_pos(), d], 0.1);
    if cfg.has_cls {
        m.cls_token = Some(normal_tensor(&mut rng, &[1, d], 0.5));
    }
    if cfg.num_register_tokens > 0 {
        m.register_tokens = Some(normal_tensor(&mut rng, &[cfg.num_register_tokens, d], 0.5));
    }
    let wd = 1.0 / (d as f64).sqrt();
    for b in &mut m.blocks {
        b.ln1_gamma = normal_tensor(&mut rng, &[d], 0.1).map(|v| 1.0 + v);
        b.ln1_beta = normal_tensor(&mut rng, &[d], 0.05);
        b.wq = normal_tensor(&mut rng, &[d, d], wd);
        b.bq = normal_tensor(&mut rng, &[d], 0.02);
        b.wk = normal_tensor(&mut rng, &[d, d], wd);
        b.bk = normal_tensor(&mut rng, &[d], 0.02);
        b.wv = normal_tensor(&mut rng, &[d, d], wd);
        b.bv = normal_tensor(&mut rng, &[d], 0.02);
        b.wo = normal_tensor(&mut rng, &[d, d], wd * noise_scale);
        b.bo = normal_tensor(&mut rng, &[d], 0.02);
        b.ln2_gamma = normal_tensor(&mut rng, &[d], 0.1).map(|v| 1.0 + v);
        b.ln2_beta = normal_tensor(&mut rng, &[d], 0.05);
        b.fc1_w = normal_tensor(&mut rng, &[d, h], wd);
        b.fc1_b = normal_tensor(&mut rng, &[h], 0.02);
        b.fc2_w = normal_tensor(&mut rng, &[h, d], noise_scale / (h as f64).sqrt());
        b.fc2_b = normal_tensor(&mut rng, &[d], 0.02);
    }
    m.final_gamma = normal_tensor(&mut rng, &[d], 0.1).map(|v| 1.0 + v);
    m.final_beta = normal_tensor(&mut rng, &[d], 0.05);
    Ok(m)
}

/// Builds a random model and plants every requested span.
pub fn make_planted_model(spec: &PlantSpec) -> Result<TransformerModel> {
    let mut model = random_model(spec.base.clone(), spec.noise_scale, spec.seed)?;
    let mut spans: Vec<Span> = spec.plants.iter().map(|p| p.span).collect();
    spans.sort();
    check_disjoint(&spans).map_err(|e| Error::Spec(e.to_string()))?;
    for plant in &spec.plants {
        plant_span(&mut model, plant)?;
    }
    Ok(model)
}

/// Overwrites the blocks of one span in place.
pub fn plant_span(model: &mut TransformerModel, plant: &Plant) -> Result<()> {
    let span = plant.span;
    span.check_blocks(model.num_blocks())
        .map_err(|e| Error::Spec(e.to_string()))?;
    let d = model.d_model();
    let h = model.config.mlp_hidden;
    let last = span.e - 1;
    for i in span.s..last {
        model.blocks[i].make_passthrough();
    }
    let (g, bias) = match &plant.kind {
        PlantKind::Identity => {
            model.blocks[last].make_passthrough();
            return Ok(());
        }
        PlantKind::Linear(a) => {
            check_map(a, d)?;
            (a.sub(&Tensor::eye(d))?, Tensor::zeros(&[d]))
        }
        PlantKind::Affine(a, b) => {
            check_map(a, d)?;
            if b.numel() != d {
                return Err(Error::Spec(format!("planted bias needs {d} entries, got {}", b.numel())));
            }
            (a.sub(&Tensor::eye(d))?, b.clone().reshape(vec![d])?)
        }
        PlantKind::Gelu { w_in, w_out, replace } => {
            return plant_gelu(model, last, w_in, w_out, *replace);
        }
    };
    if h < 2 * d {
        return Err(Error::Spec(format!("linear plant needs mlp_hidden >= {} (have {h})", 2 * d)));
    }
    let block = prepare_write_block(model, last);
    let mut fc1 = Tensor::zeros(&[d, h]);
    let mut fc2 = Tensor::zeros(&[h, d]);
    for i in 0..d {
        fc1.set2(i, i, 1.0);
        fc1.set2(i, d + i, -1.0);
        for j in 0..d {
            fc2.set2(i, j, g.get2(i, j));
            fc2.set2(d + i, j, -g.get2(i, j));
        }
    }
    block.fc1_w = fc1;
    block.fc2_w = fc2;
    block.fc2_b = bias;
    Ok(())
}

fn prepare_write_block(model: &mut TransformerModel, index: usize) -> &mut crate::model::Block {
    let d = model.d_model();
    let h = model.config.mlp_hidden;
    model.config.block_norm_eps.insert(index, PLANT_NORM_EPS);
    let b = &mut model.blocks[index];
    b.wo = Tensor::zeros(&[d, d]);
    b.bo = Tensor::zeros(&[d]);
    b.ln2_gamma = Tensor::full(&[d], PLANT_NORM_GAIN);
    b.ln2_beta = Tensor::zeros(&[d]);
    b.fc1_b = Tensor::zeros(&[h]);
    b.fc2_b = Tensor::zeros(&[d]);
    b
}

fn plant_gelu(model: &mut TransformerModel, index: usize, w_in: &Tensor, w_out: &Tensor, replace: bool) -> Result<()> {
    let d = model.d_model();
    let h = model.config.mlp_hidden;
    let (din, r) = w_in.dims2()?;
    let (r2, dout) = w_out.dims2()?;
    if din != d || dout != d || r != r2 {
        return Err(Error::Spec(format!(
            "gelu plant weights must be [{d}, r] and [r, {d}], got {:?} and {:?}",
            w_in.shape(),
            w_out.shape()
        )));
    }
    let needed = r + if replace { 2 * d } else { 0 };
    if h < needed {
        return Err(Error::Spec(format!("gelu plant needs mlp_hidden >= {needed} (have {h})")));
    }
    let block = prepare_write_block(model, index);
    let mut fc1 = Tensor::zeros(&[d, h]);
    let mut fc2 = Tensor::zeros(&[h, d]);
    for i in 0..d {
        for k in 0..r {
            fc1.set2(i, k, w_in.get2(i, k));
        }
    }
    for k in 0..r {
        for j in 0..d {
            fc2.set2(k, j, w_out.get2(k, j));
        }
    }
    if replace {
        // write -(x - mean(x)) through the odd-part units
        for i in 0..d {
            fc1.set2(i, r + i, 1.0);
            fc1.set2(i, r + d + i, -1.0);
            fc2.set2(r + i, i, -1.0);
            fc2.set2(r + d + i, i, 1.0);
        }
    }
    block.fc1_w = fc1;
    block.fc2_w = fc2;
    Ok(())
}

/// Parameters of a class-conditional Gaussian image set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthData {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub margin: f64,
    /// Seeds the class prototypes.
    pub seed: u64,
    /// Seeds the per-sample noise; sets sharing `seed` but differing here
    /// are train/test splits of one distribution.
    pub sample_seed: u64,
    /// Every prototype is translated by `shift` times a fixed random image
    /// derived from `seed`.
    pub shift: f64,
    pub split: String,
}

impl SynthData {
    pub fn new(num_classes: usize, samples_per_class: usize, image_size: usize, channels: usize, margin: f64, seed: u64) -> Self {
        Self {
            num_classes,
            samples_per_class,
            image_size,
            channels,
            margin,
            seed,
            sample_seed: 0,
            shift: 0.0,
            split: "train".into(),
        }
    }

    /// Same distribution, fresh noise.
    pub fn split(&self, name: &str, sample_seed: u64) -> Self {
        Self {
            sample_seed,
            split: name.into(),
            ..self.clone()
        }
    }
}

/// Class-conditional Gaussian images: sample `i` has class `i % classes`
/// and pixels `margin * prototype[class] + N(0, 1)`, with prototypes drawn
/// as standard normal images.
///
/// In pixel space the nearest-prototype rule misclassifies with probability
/// at most `(classes - 1) * Phi(-margin * min_dist / 2)`, where `min_dist`
/// is the smallest distance between prototypes; this bound is recorded in
/// the dataset metadata (`extra.pixel_error_bound`). Separability of encoder
/// features is not guaranteed by it.
pub fn make_synth_dataset(spec: &SynthData) -> Result<Dataset> {
    let SynthData {
        num_classes,
        samples_per_class,
        image_size,
        channels,
        margin,
        seed,
        sample_seed,
        shift,
        ..
    } = *spec;
    if !(margin > 0.0) {
        return Err(Error::Argument(format!("margin must be positive, got {margin}")));
    }
    if num_classes < 1 || samples_per_class < 1 || image_size < 1 || channels < 1 {
        return Err(Error::Argument("need at least one class, sample, pixel and channel".into()));
    }
    let mut root = Rng::new(seed);
    let mut proto_rng = root.fork(0);
    let mut shift_rng = root.fork(1);
    let mut noise = Rng::new(seed).fork(2 + sample_seed);
    let pix = image_size * image_size * channels;
    let offset: Vec<f64> = (0..pix).map(|_| shift * shift_rng.normal()).collect();
    let protos: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..pix).map(|_| proto_rng.normal()).collect())
        .collect();
    let total = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(total * pix);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let c = i % num_classes;
        labels.push(c);
        data.extend(
            protos[c]
                .iter()
                .zip(&offset)
                .map(|(&p, &o)| (margin * p + o + noise.normal()) as f32),
        );
    }
    let mut min_dist = f64::INFINITY;
    for a in 0..num_classes {
        for b in a + 1..num_classes {
            let d2: f64 = protos[a].iter().zip(&protos[b]).map(|(x, y)| (x - y) * (x - y)).sum();
            min_dist = min_dist.min(d2.sqrt());
        }
    }
    let bound = if num_classes > 1 {
        (num_classes - 1) as f64 * normal_cdf(-margin * min_dist / 2.0)
    } else {
        0.0
    };
    let meta = DatasetMeta {
        name: format!("synth-c{num_classes}-m{margin}-s{seed}"),
        split: spec.split.clone(),
        num_classes,
        norm_mean: vec![0.0; channels],
        norm_std: vec![1.0; channels],
        extra: Some(serde_json::json!({ "synth": spec, "pixel_error_bound": bound })),
    };
    Dataset::new(meta, Tensor::new(vec![total, image_size, image_size, channels], data)?, labels)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Serializable description of a plant, as accepted on the command line:
/// `identity:s:e`, `linear:s:e` or `affine:s:e` (0-based block numbers).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantDirective {
    pub kind: String,
    pub span: Span,
}

impl std::str::FromStr for PlantDirective {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let (kind, rest) = text
            .split_once(':')
            .ok_or_else(|| Error::Argument(format!("plant {text:?} must look like kind:s:e")))?;
        if !matches!(kind, "identity" | "linear" | "affine" | "gelu") {
            return Err(Error::Argument(format!("unknown plant kind {kind:?}")));
        }
        Ok(Self {
            kind: kind.to_string(),
            span: rest.parse()?,
        })
    }
}

impl PlantDirective {
    /// Materializes random map parameters for this directive.
    pub fn to_plant(&self, d: usize, rng: &mut Rng) -> Result<Plant> {
        let kind = match self.kind.as_str() {
            "identity" => PlantKind::Identity,
            "linear" => PlantKind::Linear(random_plant_map(d, 0.3, rng)),
            "affine" => PlantKind::Affine(random_plant_map(d, 0.3, rng), normal_tensor(rng, &[d], 0.5)),
            "gelu" => {
                let r = (d / 4).max(1);
                PlantKind::Gelu {
                    w_in: normal_tensor(rng, &[d, r], 2.0 / (d as f64).sqrt()),
                    w_out: normal_tensor(rng, &[r, d], 1.0 / (r as f64).sqrt()),
                    replace: true,
                }
            }
            other => return Err(Error::Argument(format!("unknown plant kind {other:?}"))),
        };
        Ok(Plant { span: self.span, kind })
    }
}
