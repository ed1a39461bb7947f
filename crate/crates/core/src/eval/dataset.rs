//! Labelled image datasets and their ingestion into model inputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{ensure_dim, Error, Result};
use crate::eval::idx::{self, IdxImages};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub split: String,
    pub num_classes: usize,
    /// Per-channel constants applied as `(x - mean) / std` at ingestion.
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

/// Images `[M, H, W, C]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, images: Tensor, labels: Vec<usize>) -> Result<Self> {
        ensure_dim!(images.ndim() == 4, "dataset images must be [M, H, W, C], got {:?}", images.shape());
        ensure_dim!(
            images.shape()[0] == labels.len(),
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        );
        let c = images.shape()[3];
        ensure_dim!(
            meta.norm_mean.len() == c && meta.norm_std.len() == c,
            "normalization constants must have {} channels",
            c
        );
        if meta.num_classes < 1 {
            return Err(Error::Argument("dataset needs at least one class".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= meta.num_classes) {
            return Err(Error::Argument(format!("label {bad} outside [0, {})", meta.num_classes)));
        }
        if meta.norm_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Argument("normalization std must be positive".into()));
        }
        Ok(Self { meta, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    /// `(height, width, channels)`
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn raw_image(&self, i: usize) -> Tensor {
        let (h, w, c) = self.image_dims();
        let n = h * w * c;
        Tensor::new(vec![h, w, c], self.images.data()[i * n..(i + 1) * n].to_vec()).expect("image slice")
    }

    /// Image `i` resized (bilinear, half-pixel centers) to the model's input
    /// size, normalized, and with a single channel replicated when the model
    /// expects more.
    pub fn model_input(&self, i: usize, cfg: &ModelConfig) -> Result<Tensor> {
        let (h, w, c) = self.image_dims();
        let target_c = cfg.channels;
        ensure_dim!(
            c == target_c || c == 1,
            "dataset has {} channels, model expects {}",
            c,
            target_c
        );
        let raw = self.raw_image(i);
        let mut normalized = raw.clone();
        for px in normalized.data_mut().chunks_mut(c) {
            for (ch, v) in px.iter_mut().enumerate() {
                *v = (*v - self.meta.norm_mean[ch]) / self.meta.norm_std[ch];
            }
        }
        let s = cfg.image_size;
        let resized = if h == s && w == s {
            normalized
        } else {
            resize_bilinear(&normalized, s, s)?
        };
        if c == target_c {
            return Ok(resized);
        }
        let mut out = Vec::with_capacity(s * s * target_c);
        for &v in resized.data() {
            out.extend(std::iter::repeat_n(v, target_c));
        }
        Tensor::new(vec![s, s, target_c], out)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (h, w, c) = self.image_dims();
        let n = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        Dataset {
            meta: self.meta.clone(),
            images: Tensor::new(vec![indices.len(), h, w, c], data).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.insert("images", self.images.clone());
        c.insert(
            "labels",
            Tensor::new(vec![self.len()], self.labels.iter().map(|&l| l as f32).collect())?,
        );
        c.insert_json("__meta__", &self.meta)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: DatasetMeta = c.json("__meta__")?;
        let images = c.tensor("images")?.clone();
        let labels = c
            .tensor("labels")?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Argument(format!("label {v} is not a non-negative integer")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(meta, images, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`.
    pub fn from_idx(
        images_path: &Path,
        labels_path: &Path,
        name: &str,
        split: &str,
        norm_mean: f32,
        norm_std: f32,
    ) -> Result<Self> {
        let images = idx::read_images(images_path)?;
        let labels = idx::read_labels(labels_path)?;
        Self::from_idx_parts(&images, &labels, name, split, norm_mean, norm_std)
    }

    pub fn from_idx_parts(
        images: &IdxImages,
        labels: &[u8],
        name: &str,
        split: &str,
        norm_mean: f32,
        norm_std: f32,
    ) -> Result<Self> {
        ensure_dim!(images.count == labels.len(), "{} images but {} labels", images.count, labels.len());
        let num_classes = labels.iter().copied().max().map(|m| m as usize + 1).unwrap_or(1).max(10);
        let pixels = images.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        let tensor = Tensor::new(vec![images.count, images.rows, images.cols, 1], pixels)?;
        Self::new(
            DatasetMeta {
                name: name.into(),
                split: split.into(),
                num_classes,
                norm_mean: vec![norm_mean],
                norm_std: vec![norm_std],
                extra: None,
            },
            tensor,
            labels.iter().map(|&l| l as usize).collect(),
        )
    }

    /// Inverse of [`Dataset::from_idx_parts`] for single-channel datasets
    /// whose pixels are multiples of 1/255.
    pub fn to_idx_parts(&self) -> Result<(IdxImages, Vec<u8>)> {
        let (h, w, c) = self.image_dims();
        ensure_dim!(c == 1, "IDX export needs one channel, have {}", c);
        let pixels = self
            .images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let labels = self
            .labels
            .iter()
            .map(|&l| u8::try_from(l).map_err(|_| Error::Argument(format!("label {l} does not fit in a byte"))))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            IdxImages {
                count: self.len(),
                rows: h,
                cols: w,
                pixels,
            },
            labels,
        ))
    }
}

/// Bilinear resize of an `[H, W, C]` image with half-pixel centers and edge
/// clamping.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    ensure_dim!(img.ndim() == 3, "resize expects [H, W, C], got {:?}", img.shape());
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    ensure_dim!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "resize with an empty side");
    let src = img.data();
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}
