//! ViT-style encoder: configuration, weights, forward pass and parameter
//! accounting.
//!
//! Blocks are pre-norm: `x + attn(ln1(x))`, then `+ mlp(ln2(.))`. Linear
//! weights are stored `[in, out]` so a layer computes `x * W + b`.
//!
//! Container weight names:
//!
//! ```text
//! patch_embed.kernel [P*P*C, d]   patch_embed.bias [d]
//! pos_embed [cls + patches, d]    cls_token [1, d]     register_tokens [R, d]
//! blocks.{i}.ln1.gamma / .beta    blocks.{i}.ln2.gamma / .beta        [d]
//! blocks.{i}.attn.{wq,wk,wv,wo}.weight [d, d]  .bias [d]
//! blocks.{i}.mlp.fc1.weight [d, h] .bias [h]   blocks.{i}.mlp.fc2.weight [h, d] .bias [d]
//! final_norm.gamma / .beta [d]
//! ```
//!
//! Token order is `[cls, registers.., patches..]`. Positional embeddings
//! cover the CLS and patch tokens and are added before the registers are
//! inserted. Patches are flattened in `(row, col, channel)` order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::linear;
use crate::ops::{layernorm, softmax_in_place, GeluVariant, LAYERNORM_EPS};
use crate::tensor::Tensor;

fn default_channels() -> usize {
    3
}

fn default_eps() -> f64 {
    LAYERNORM_EPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub d_model: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    #[serde(default)]
    pub num_register_tokens: usize,
    pub has_cls: bool,
    #[serde(default = "default_eps")]
    pub layernorm_eps: f64,
    #[serde(default)]
    pub gelu_variant: GeluVariant,
    /// Per-block layer-norm epsilon overrides (0-based block index), applied
    /// to both norms of that block.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub block_norm_eps: BTreeMap<usize, f64>,
}

impl ModelConfig {
    fn vit(d_model: usize, num_heads: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            d_model,
            num_blocks: 12,
            num_heads,
            mlp_hidden: 4 * d_model,
            num_register_tokens: 0,
            has_cls: true,
            layernorm_eps: 1e-6,
            gelu_variant: GeluVariant::Tanh,
            block_norm_eps: BTreeMap::new(),
        }
    }

    pub fn vit_tiny() -> Self {
        Self::vit(192, 3)
    }

    pub fn vit_small() -> Self {
        Self::vit(384, 6)
    }

    pub fn vit_base() -> Self {
        Self::vit(768, 12)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(format!("invalid model config: {m}")));
        if self.num_blocks < 1 {
            return bad("num_blocks must be >= 1".into());
        }
        if self.d_model == 0 || self.num_heads == 0 || self.mlp_hidden == 0 || self.channels == 0 {
            return bad("d_model, num_heads, mlp_hidden and channels must be positive".into());
        }
        if self.d_model % self.num_heads != 0 {
            return bad(format!("d_model {} not divisible by num_heads {}", self.d_model, self.num_heads));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if !(self.layernorm_eps > 0.0) {
            return bad("layernorm_eps must be positive".into());
        }
        for (&b, &eps) in &self.block_norm_eps {
            if b >= self.num_blocks || !(eps > 0.0) {
                return bad(format!("block_norm_eps entry {b} -> {eps} invalid"));
            }
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.has_cls) + self.num_register_tokens
    }

    /// Rows of the positional embedding (CLS plus patches).
    pub fn num_pos(&self) -> usize {
        self.num_patches() + usize::from(self.has_cls)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn block_eps(&self, block: usize) -> f64 {
        self.block_norm_eps.get(&block).copied().unwrap_or(self.layernorm_eps)
    }

    /// Parameter count of one transformer block.
    pub fn block_param_count(&self) -> u64 {
        let (d, h) = (self.d_model as u64, self.mlp_hidden as u64);
        4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)
    }

    /// Parameter count of the full encoder.
    pub fn param_count(&self) -> u64 {
        let d = self.d_model as u64;
        let embed = self.patch_dim() as u64 * d + d;
        let pos = self.num_pos() as u64 * d;
        let cls = if self.has_cls { d } else { 0 };
        let reg = self.num_register_tokens as u64 * d;
        embed + pos + cls + reg + self.num_blocks as u64 * self.block_param_count() + 2 * d
    }
}

/// Weights of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

macro_rules! block_fields {
    ($mac:ident) => {
        $mac!(
            (ln1_gamma, "ln1.gamma", |_d, _h| vec![_d]),
            (ln1_beta, "ln1.beta", |_d, _h| vec![_d]),
            (wq, "attn.wq.weight", |_d, _h| vec![_d, _d]),
            (bq, "attn.wq.bias", |_d, _h| vec![_d]),
            (wk, "attn.wk.weight", |_d, _h| vec![_d, _d]),
            (bk, "attn.wk.bias", |_d, _h| vec![_d]),
            (wv, "attn.wv.weight", |_d, _h| vec![_d, _d]),
            (bv, "attn.wv.bias", |_d, _h| vec![_d]),
            (wo, "attn.wo.weight", |_d, _h| vec![_d, _d]),
            (bo, "attn.wo.bias", |_d, _h| vec![_d]),
            (ln2_gamma, "ln2.gamma", |_d, _h| vec![_d]),
            (ln2_beta, "ln2.beta", |_d, _h| vec![_d]),
            (fc1_w, "mlp.fc1.weight", |_d, _h| vec![_d, _h]),
            (fc1_b, "mlp.fc1.bias", |_d, _h| vec![_h]),
            (fc2_w, "mlp.fc2.weight", |_d, _h| vec![_h, _d]),
            (fc2_b, "mlp.fc2.bias", |_d, _h| vec![_d])
        )
    };
}

impl Block {
    /// All-zero block with unit layer-norm gains.
    pub fn zeros(d: usize, h: usize) -> Self {
        macro_rules! build {
            ($(($f:ident, $n:expr, $s:expr)),*) => {
                Block { $($f: Tensor::zeros(&($s)(d, h))),* }
            };
        }
        let mut b = block_fields!(build);
        b.ln1_gamma = Tensor::full(&[d], 1.0);
        b.ln2_gamma = Tensor::full(&[d], 1.0);
        b
    }

    /// `(suffix, tensor)` pairs in naming-scheme order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        macro_rules! list {
            ($(($f:ident, $n:expr, $s:expr)),*) => {
                vec![$(($n, &self.$f)),*]
            };
        }
        block_fields!(list)
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        macro_rules! list {
            ($(($f:ident, $n:expr, $s:expr)),*) => {
                vec![$(($n, &mut self.$f)),*]
            };
        }
        block_fields!(list)
    }

    fn from_container(c: &Container, prefix: &str, d: usize, h: usize) -> Result<Self> {
        macro_rules! build {
            ($(($f:ident, $n:expr, $s:expr)),*) => {
                Block { $($f: c.tensor_shaped(&format!("{prefix}.{}", $n), &($s)(d, h))?.clone()),* }
            };
        }
        Ok(block_fields!(build))
    }

    /// Makes the block an exact identity: both norms output zero and every
    /// bias that could leak through the branches is cleared.
    pub fn make_passthrough(&mut self) {
        for t in [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.bv,
            &mut self.bo,
            &mut self.fc1_b,
            &mut self.fc2_b,
        ] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn param_count(&self) -> u64 {
        self.named().iter().map(|(_, t)| t.numel() as u64).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub patch_kernel: Tensor,
    pub patch_bias: Tensor,
    pub pos_embed: Tensor,
    pub cls_token: Option<Tensor>,
    pub register_tokens: Option<Tensor>,
    pub blocks: Vec<Block>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

impl TransformerModel {
    /// Zero-initialized model with unit norm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            patch_kernel: Tensor::zeros(&[config.patch_dim(), d]),
            patch_bias: Tensor::zeros(&[d]),
            pos_embed: Tensor::zeros(&[config.num_pos(), d]),
            cls_token: config.has_cls.then(|| Tensor::zeros(&[1, d])),
            register_tokens: (config.num_register_tokens > 0)
                .then(|| Tensor::zeros(&[config.num_register_tokens, d])),
            blocks: (0..config.num_blocks).map(|_| Block::zeros(d, config.mlp_hidden)).collect(),
            final_gamma: Tensor::full(&[d], 1.0),
            final_beta: Tensor::zeros(&[d]),
            config,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Every weight with its container name.
    pub fn named_weights(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_embed.kernel".to_string(), &self.patch_kernel),
            ("patch_embed.bias".to_string(), &self.patch_bias),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        if let Some(c) = &self.cls_token {
            out.push(("cls_token".into(), c));
        }
        if let Some(r) = &self.register_tokens {
            out.push(("register_tokens".into(), r));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in b.named() {
                out.push((format!("blocks.{i}.{suffix}"), t));
            }
        }
        out.push(("final_norm.gamma".into(), &self.final_gamma));
        out.push(("final_norm.beta".into(), &self.final_beta));
        out
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        for (name, t) in self.named_weights() {
            c.insert(name, t.clone());
        }
        c.insert_json("__config__", &self.config)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: ModelConfig = c.json("__config__")?;
        config.validate()?;
        let d = config.d_model;
        let get = |name: &str, shape: &[usize]| c.tensor_shaped(name, shape).cloned();
        let blocks = (0..config.num_blocks)
            .map(|i| Block::from_container(c, &format!("blocks.{i}"), d, config.mlp_hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_kernel: get("patch_embed.kernel", &[config.patch_dim(), d])?,
            patch_bias: get("patch_embed.bias", &[d])?,
            pos_embed: get("pos_embed", &[config.num_pos(), d])?,
            cls_token: if config.has_cls { Some(get("cls_token", &[1, d])?) } else { None },
            register_tokens: if config.num_register_tokens > 0 {
                Some(get("register_tokens", &[config.num_register_tokens, d])?)
            } else {
                None
            },
            blocks,
            final_gamma: get("final_norm.gamma", &[d])?,
            final_beta: get("final_norm.beta", &[d])?,
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// SHA-256 of the serialized container.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(self.to_container()?.fingerprint())
    }

    pub fn count_params(&self) -> u64 {
        self.named_weights().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Patch embedding, CLS/register tokens and positional embeddings:
    /// the residual stream entering block 0.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let (s, c, p) = (cfg.image_size, cfg.channels, cfg.patch_size);
        ensure_dim!(
            image.shape() == [s, s, c],
            "image shape {:?} does not match model input [{s}, {s}, {c}]",
            image.shape()
        );
        let g = s / p;
        let mut patches = Vec::with_capacity(g * g * cfg.patch_dim());
        let px = image.data();
        for gy in 0..g {
            for gx in 0..g {
                for y in 0..p {
                    let row = (gy * p + y) * s;
                    let start = (row + gx * p) * c;
                    patches.extend_from_slice(&px[start..start + p * c]);
                }
            }
        }
        let patches = Tensor::new(vec![g * g, cfg.patch_dim()], patches)?;
        let emb = linear(&patches, &self.patch_kernel, Some(self.patch_bias.data()))?;
        let d = cfg.d_model;
        let mut rows: Vec<f32> = Vec::with_capacity(cfg.num_tokens() * d);
        let mut pos = self.pos_embed.data().chunks(d);
        if let Some(cls) = &self.cls_token {
            let pe = pos.next().expect("pos rows");
            rows.extend(cls.data().iter().zip(pe).map(|(a, b)| a + b));
        }
        if let Some(reg) = &self.register_tokens {
            rows.extend_from_slice(reg.data());
        }
        for (tok, pe) in emb.data().chunks(d).zip(pos) {
            rows.extend(tok.iter().zip(pe).map(|(a, b)| a + b));
        }
        Tensor::new(vec![cfg.num_tokens(), d], rows)
    }

    /// One pre-norm block applied to a token matrix.
    pub fn block_forward(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        if index >= self.blocks.len() {
            return Err(Error::Argument(format!(
                "block index {index} out of range for {} blocks",
                self.blocks.len()
            )));
        }
        let cfg = &self.config;
        ensure_dim!(
            x.ndim() == 2 && x.last_dim() == cfg.d_model,
            "block input shape {:?}, expected [n, {}]",
            x.shape(),
            cfg.d_model
        );
        let b = &self.blocks[index];
        let eps = cfg.block_eps(index);
        let h = layernorm(x, b.ln1_gamma.data(), b.ln1_beta.data(), eps)?;
        let attn = self.attention(b, &h)?;
        let x1 = x.add(&attn)?;
        let h2 = layernorm(&x1, b.ln2_gamma.data(), b.ln2_beta.data(), eps)?;
        let hidden = linear(&h2, &b.fc1_w, Some(b.fc1_b.data()))?;
        let variant = cfg.gelu_variant;
        let hidden = hidden.map(|v| variant.eval(v as f64) as f32);
        let mlp = linear(&hidden, &b.fc2_w, Some(b.fc2_b.data()))?;
        x1.add(&mlp)
    }

    fn attention(&self, b: &Block, h: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let n = h.rows();
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let q = linear(h, &b.wq, Some(b.bq.data()))?;
        let k = linear(h, &b.wk, Some(b.bk.data()))?;
        let v = linear(h, &b.wv, Some(b.bv.data()))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = vec![0.0f32; n * d];
        let mut scores = vec![0.0f32; n];
        for head in 0..cfg.num_heads {
            let off = head * dh;
            for i in 0..n {
                let qi = &q.row(i)[off..off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k.row(j)[off..off + dh];
                    let dot: f64 = qi.iter().zip(kj).map(|(&a, &b)| a as f64 * b as f64).sum();
                    *s = (dot * scale) as f32;
                }
                softmax_in_place(&mut scores);
                let mut acc = vec![0.0f64; dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vj = &v.row(j)[off..off + dh];
                    for (a, &vv) in acc.iter_mut().zip(vj) {
                        *a += p as f64 * vv as f64;
                    }
                }
                for (o, a) in ctx[i * d + off..i * d + off + dh].iter_mut().zip(acc) {
                    *o = a as f32;
                }
            }
        }
        let ctx = Tensor::new(vec![n, d], ctx)?;
        linear(&ctx, &b.wo, Some(b.bo.data()))
    }

    /// Runs every block and returns each block's output (residual stream,
    /// before the final norm). `outputs[k]` is the output of block `k + 1`.
    pub fn block_outputs(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = self.embed(image)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            x = self.block_forward(i, &x)?;
            outs.push(x.clone());
        }
        Ok(outs)
    }

    pub fn final_norm(&self, x: &Tensor) -> Result<Tensor> {
        layernorm(x, self.final_gamma.data(), self.final_beta.data(), self.config.layernorm_eps)
    }

    /// Full forward pass: final token matrix after the closing layer norm.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut x = self.embed(image)?;
        for i in 0..self.blocks.len() {
            x = self.block_forward(i, &x)?;
        }
        self.final_norm(&x)
    }

    /// Model with only the first `n` blocks.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.blocks.len() {
            return Err(Error::Argument(format!("cannot truncate to {n} blocks")));
        }
        let mut m = self.clone();
        m.blocks.truncate(n);
        m.config.num_blocks = n;
        m.config.block_norm_eps.retain(|&b, _| b < n);
        Ok(m)
    }
}
