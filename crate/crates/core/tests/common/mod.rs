#![allow(dead_code)]

use tba_core::model::ModelConfig;
use tba_core::rng::Rng;
use tba_core::Tensor;

pub fn tiny(blocks: usize, d: usize) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        d_model: d,
        num_blocks: blocks,
        num_heads: 2,
        mlp_hidden: 4 * d,
        num_register_tokens: 0,
        has_cls: true,
        layernorm_eps: 1e-6,
        gelu_variant: Default::default(),
        block_norm_eps: Default::default(),
    }
}

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
}

use std::collections::BTreeMap;
use tba_core::capture::{sample_indices, ActivationMeta, ActivationSet, Reduce};
use tba_core::eval::dataset::Dataset;
use tba_core::synth::{make_synth_dataset, SynthData};

/// Wraps hand-built block outputs (block 1 first) in an activation set.
pub fn acts_from(blocks: Vec<Tensor>) -> ActivationSet {
    let rows = blocks[0].rows();
    let map: BTreeMap<usize, Tensor> = blocks.into_iter().enumerate().map(|(i, t)| (i + 1, t)).collect();
    ActivationSet {
        blocks: map,
        meta: ActivationMeta {
            reduce: Reduce::Mean,
            mean_includes_cls: true,
            num_samples: rows,
            num_tokens: 1,
            seed: 0,
            model_fingerprint: "test".into(),
            subset: sample_indices("test", rows, rows, 0).unwrap(),
        },
    }
}

/// Small synthetic dataset matching `tiny` configs (8x8x3 images).
pub fn tiny_data(classes: usize, per_class: usize, seed: u64) -> Dataset {
    make_synth_dataset(&SynthData::new(classes, per_class, 8, 3, 2.0, seed)).unwrap()
}
