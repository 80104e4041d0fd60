// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model runtime: configuration, container I/O, tokenizer and the
//! capturing forward pass.

pub mod component;
pub mod config;
pub mod container;
pub mod forward;
pub mod tokenizer;
pub mod toy;
pub mod weights;

use ndarray::Array2;

pub use component::{ComponentId, Site, Sublayer};
pub use config::{Activation, BlockLayout, ModelConfig, PositionScheme};
pub use container::{load_model, save_model};
pub use forward::{CaptureFlags, ForwardCapture, LnOffsets};
pub use tokenizer::Tokenizer;
pub use weights::{LayerWeights, Weights};

use crate::error::{Result, UnpackError};

/// Precomputed rotary cos/sin tables, one row per position.
#[derive(Debug, Clone)]
pub struct RotaryTable {
    /// Number of rotated dims per head.
    pub dims: usize,
    pub base: f64,
    pub cos: Array2<f32>,
    pub sin: Array2<f32>,
}

impl RotaryTable {
    pub fn new(dims: usize, base: f64, n_positions: usize) -> Self {
        let half = dims / 2;
        let mut cos = Array2::zeros((n_positions, half));
        let mut sin = Array2::zeros((n_positions, half));
        for pos in 0..n_positions {
            for i in 0..half {
                let inv_freq = base.powf(-(2.0 * i as f64) / dims as f64);
                let angle = pos as f64 * inv_freq;
                cos[[pos, i]] = angle.cos() as f32;
                sin[[pos, i]] = angle.sin() as f32;
            }
        }
        Self {
            dims,
            base,
            cos,
            sin,
        }
    }

    /// Rotates the leading `dims` entries of `x` in place (half-split pairing).
    pub fn apply(&self, x: &mut [f32], pos: usize) {
        let half = self.dims / 2;
        let (c, s) = self.angles(pos);
        for i in 0..half {
            let (a, b) = (x[i], x[i + half]);
            x[i] = a * c[i] - b * s[i];
            x[i + half] = b * c[i] + a * s[i];
        }
    }

    /// Same rotation in f64, using the identical f32 cos/sin values.
    pub fn apply_f64(&self, x: &mut [f64], pos: usize) {
        let half = self.dims / 2;
        let (c, s) = self.angles(pos);
        for i in 0..half {
            let (cc, ss) = (f64::from(c[i]), f64::from(s[i]));
            let (a, b) = (x[i], x[i + half]);
            x[i] = a * cc - b * ss;
            x[i + half] = b * cc + a * ss;
        }
    }

    fn angles(&self, pos: usize) -> (Vec<f32>, Vec<f32>) {
        let half = self.dims / 2;
        if pos < self.cos.nrows() {
            (self.cos.row(pos).to_vec(), self.sin.row(pos).to_vec())
        } else {
            (0..half)
                .map(|i| {
                    let a = pos as f64 * self.base.powf(-(2.0 * i as f64) / self.dims as f64);
                    (a.cos() as f32, a.sin() as f32)
                })
                .unzip()
        }
    }
}

impl Model {
    pub fn rotary(&self) -> Option<&RotaryTable> {
        self.rotary.as_ref()
    }
}

/// An immutable, loaded transformer.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
    pub tokenizer: Option<Tokenizer>,
    pub(crate) rotary: Option<RotaryTable>,
}

impl Model {
    /// Validates weight shapes against the config.
    pub fn new(config: ModelConfig, weights: Weights, tokenizer: Option<Tokenizer>) -> Result<Self> {
        config.validate()?;
        let layout = weights::tensor_layout(&config);
        let flat = weights.flat_tensors();
        if layout.len() != flat.len() || weights.layers.len() != config.n_layers {
            return Err(UnpackError::Config(
                "weights do not match the config's tensor set".into(),
            ));
        }
        let shapes = weight_shapes(&weights);
        for ((name, expected), found) in layout.iter().zip(shapes) {
            if *expected != found {
                return Err(UnpackError::ShapeMismatch {
                    name: name.clone(),
                    expected: expected.clone(),
                    found,
                });
            }
        }
        let rotary = match config.position_scheme {
            PositionScheme::Learned => None,
            PositionScheme::Rotary { base, .. } => {
                Some(RotaryTable::new(config.rotary_dims(), base, config.n_ctx))
            }
        };
        Ok(Self {
            config,
            weights,
            tokenizer,
            rotary,
        })
    }

    /// Encodes text with the model's tokenizer.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let tok = self
            .tokenizer
            .as_ref()
            .ok_or_else(|| UnpackError::Tokenizer("model has no tokenizer".into()))?;
        Ok(tok.encode(text))
    }

    /// Tokenizes and prepends the BOS token.
    pub fn tokenize_with_bos(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = vec![self.config.bos_token_id];
        ids.extend(self.tokenize(text)?);
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let tok = self
            .tokenizer
            .as_ref()
            .ok_or_else(|| UnpackError::Tokenizer("model has no tokenizer".into()))?;
        Ok(tok.decode(ids))
    }
}

fn weight_shapes(w: &Weights) -> Vec<Vec<usize>> {
    let mut out = vec![w.tok_embed.shape().to_vec()];
    if let Some(p) = &w.pos_embed {
        out.push(p.shape().to_vec());
    }
    for l in &w.layers {
        out.extend([
            l.ln1_w.shape().to_vec(),
            l.ln1_b.shape().to_vec(),
            l.w_q.shape().to_vec(),
            l.b_q.shape().to_vec(),
            l.w_k.shape().to_vec(),
            l.b_k.shape().to_vec(),
            l.w_v.shape().to_vec(),
            l.b_v.shape().to_vec(),
            l.w_o.shape().to_vec(),
            l.b_o.shape().to_vec(),
            l.ln2_w.shape().to_vec(),
            l.ln2_b.shape().to_vec(),
            l.w_up.shape().to_vec(),
            l.b_up.shape().to_vec(),
            l.w_down.shape().to_vec(),
            l.b_down.shape().to_vec(),
        ]);
    }
    out.push(w.lnf_w.shape().to_vec());
    out.push(w.lnf_b.shape().to_vec());
    out.push(w.unembed.shape().to_vec());
    if let Some(b) = &w.unembed_b {
        out.push(b.shape().to_vec());
    }
    out
}
