// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random models for tests, demos and the acceptance suite.

use ndarray::{Array, Array1, Array2, Array3, Dimension, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{Activation, BlockLayout, ModelConfig, PositionScheme};
use super::tokenizer::Tokenizer;
use super::weights::{LayerWeights, Weights};
use super::Model;
use crate::error::Result;

/// Recipe for a random model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub n_ctx: usize,
    pub block_layout: BlockLayout,
    pub position_scheme: PositionScheme,
    pub activation: Activation,
    pub seed: u64,
    /// Standard deviation of projection weights is `weight_scale / sqrt(fan_in)`.
    pub weight_scale: f32,
    /// Random LN gains/biases and projection biases instead of 1 and 0.
    pub random_affine: bool,
    pub unembed_bias: bool,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_mlp: 32,
            vocab_size: 300,
            n_ctx: 32,
            block_layout: BlockLayout::Sequential,
            position_scheme: PositionScheme::Learned,
            activation: Activation::Gelu,
            seed: 0,
            weight_scale: 1.0,
            random_affine: true,
            unembed_bias: false,
        }
    }
}

impl ToySpec {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_head: self.d_head,
            d_mlp: self.d_mlp,
            vocab_size: self.vocab_size,
            n_ctx: self.n_ctx,
            block_layout: self.block_layout,
            position_scheme: self.position_scheme,
            activation: self.activation,
            ln_epsilon: 1e-5,
            bos_token_id: if self.vocab_size > 256 { 256 } else { 0 },
            unembed_bias: self.unembed_bias,
        }
    }

    /// Builds the model. Vocabularies of at least 257 ids get a byte-level
    /// tokenizer with `<|endoftext|>` as BOS.
    pub fn build(&self) -> Result<Model> {
        let cfg = self.config();
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut normal = |shape: Vec<usize>, std: f32| -> Vec<f32> {
            let dist = Normal::new(0.0f32, std).expect("positive std");
            let len = shape.iter().product();
            (0..len).map(|_| dist.sample(&mut rng)).collect()
        };
        let (d, h, dh, m, v) = (cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp, cfg.vocab_size);
        let ws = self.weight_scale;
        let affine = self.random_affine;
        let mut gain = |n: usize| -> Array1<f32> {
            if affine {
                Array1::from_vec(normal(vec![n], 0.2)).mapv(|x| 1.0 + x)
            } else {
                Array1::ones(n)
            }
        };
        let gains: Vec<Array1<f32>> = (0..2 * cfg.n_layers + 1).map(|_| gain(d)).collect();
        let mut bias = |shape: Vec<usize>| -> Vec<f32> {
            if affine {
                normal(shape, 0.1)
            } else {
                vec![0.0; shape.iter().product()]
            }
        };
        let biases: Vec<Vec<Vec<f32>>> = (0..cfg.n_layers)
            .map(|_| {
                vec![
                    bias(vec![d]),
                    bias(vec![h, dh]),
                    bias(vec![h, dh]),
                    bias(vec![h, dh]),
                    bias(vec![d]),
                    bias(vec![d]),
                    bias(vec![m]),
                    bias(vec![d]),
                ]
            })
            .collect();
        let final_bias = bias(vec![d]);
        let unembed_b = self.unembed_bias.then(|| bias(vec![v]));

        let tok_embed = shaped(normal(vec![v, d], 1.0), &[v, d]);
        let pos_embed = (cfg.position_scheme == PositionScheme::Learned)
            .then(|| shaped(normal(vec![cfg.n_ctx, d], 0.5), &[cfg.n_ctx, d]));
        let proj = |n_in: usize| ws / (n_in as f32).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, b) in biases.into_iter().enumerate() {
            let mut b = b.into_iter();
            let mut nb = || b.next().expect("eight bias tensors");
            layers.push(LayerWeights {
                ln1_w: gains[2 * l].clone(),
                ln1_b: shaped(nb(), &[d]),
                w_q: shaped(normal(vec![h, d, dh], proj(d)), &[h, d, dh]),
                b_q: shaped(nb(), &[h, dh]),
                w_k: shaped(normal(vec![h, d, dh], proj(d)), &[h, d, dh]),
                b_k: shaped(nb(), &[h, dh]),
                w_v: shaped(normal(vec![h, d, dh], proj(d)), &[h, d, dh]),
                b_v: shaped(nb(), &[h, dh]),
                w_o: shaped(normal(vec![h, dh, d], proj(h * dh)), &[h, dh, d]),
                b_o: shaped(nb(), &[d]),
                ln2_w: gains[2 * l + 1].clone(),
                ln2_b: shaped(nb(), &[d]),
                w_up: shaped(normal(vec![d, m], proj(d)), &[d, m]),
                b_up: shaped(nb(), &[m]),
                w_down: shaped(normal(vec![m, d], proj(m)), &[m, d]),
                b_down: shaped(nb(), &[d]),
            });
        }
        let weights = Weights {
            tok_embed,
            pos_embed,
            layers,
            lnf_w: gains[2 * cfg.n_layers].clone(),
            lnf_b: shaped(final_bias, &[d]),
            unembed: shaped(normal(vec![d, v], proj(d)), &[d, v]),
            unembed_b: unembed_b.map(|b| shaped(b, &[v])),
        };
        let tokenizer = if v > 256 {
            Some(Tokenizer::byte_level(&[])?)
        } else {
            None
        };
        Model::new(cfg, weights, tokenizer)
    }
}

fn shaped<D: Dimension>(data: Vec<f32>, shape: &[usize]) -> Array<f32, D> {
    Array::from_shape_vec(IxDyn(shape), data)
        .and_then(|a| a.into_dimensionality::<D>())
        .expect("generated data matches shape")
}

/// A model with every parameter zero except unit LN gains.
pub fn zero_model(cfg: ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let (d, h, dh, m, v) = (cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp, cfg.vocab_size);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerWeights {
            ln1_w: Array1::ones(d),
            ln1_b: Array1::zeros(d),
            w_q: Array3::zeros((h, d, dh)),
            b_q: Array2::zeros((h, dh)),
            w_k: Array3::zeros((h, d, dh)),
            b_k: Array2::zeros((h, dh)),
            w_v: Array3::zeros((h, d, dh)),
            b_v: Array2::zeros((h, dh)),
            w_o: Array3::zeros((h, dh, d)),
            b_o: Array1::zeros(d),
            ln2_w: Array1::ones(d),
            ln2_b: Array1::zeros(d),
            w_up: Array2::zeros((d, m)),
            b_up: Array1::zeros(m),
            w_down: Array2::zeros((m, d)),
            b_down: Array1::zeros(d),
        })
        .collect();
    let weights = Weights {
        tok_embed: Array2::zeros((v, d)),
        pos_embed: (cfg.position_scheme == PositionScheme::Learned)
            .then(|| Array2::zeros((cfg.n_ctx, d))),
        layers,
        lnf_w: Array1::ones(d),
        lnf_b: Array1::zeros(d),
        unembed: Array2::zeros((d, v)),
        unembed_b: cfg.unembed_bias.then(|| Array1::zeros(v)),
    };
    Model::new(cfg, weights, None)
}
