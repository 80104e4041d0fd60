// SPDX-License-Identifier: MIT OR Apache-2.0

//! Architecture hyperparameters of a pre-norm decoder-only transformer.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UnpackError};

/// How the MLP reads the residual stream relative to attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockLayout {
    /// GPT-2: the MLP reads the stream after the layer's attention output was added.
    Sequential,
    /// GPT-NeoX / Pythia: attention and MLP both read the block input.
    Parallel,
}

/// Positional information scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionScheme {
    /// Learned absolute position embeddings added to the token embedding.
    Learned,
    /// Rotary embeddings on the leading `fraction * d_head` dims of Q and K
    /// (half-split pairing, as in GPT-NeoX).
    Rotary {
        fraction: f64,
        #[serde(default = "default_rotary_base")]
        base: f64,
    },
}

fn default_rotary_base() -> f64 {
    10_000.0
}

/// MLP nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact GELU, `x * Phi(x)`.
    Gelu,
    /// Tanh approximation of GELU used by GPT-2.
    GeluTanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Self::Gelu => 0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2)),
            Self::GeluTanh => {
                const C: f32 = 0.797_884_6; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
            Self::Relu => x.max(0.0),
        }
    }

    /// Derivative at zero, the limit of `phi(x) / x` as `x -> 0`.
    pub fn slope_at_zero(self) -> f64 {
        match self {
            Self::Gelu | Self::GeluTanh => 0.5,
            Self::Relu => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    /// Maximum sequence length; the learned positional table has this many rows.
    pub n_ctx: usize,
    pub block_layout: BlockLayout,
    pub position_scheme: PositionScheme,
    pub activation: Activation,
    pub ln_epsilon: f64,
    pub bos_token_id: u32,
    /// Whether the unembedding carries a bias vector.
    #[serde(default)]
    pub unembed_bias: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UnpackError::Config(m));
        if self.n_heads == 0 || self.d_model == 0 || self.d_head == 0 || self.d_mlp == 0 {
            return bad("n_heads, d_model, d_head and d_mlp must be positive".into());
        }
        if self.vocab_size == 0 || self.n_ctx == 0 {
            return bad("vocab_size and n_ctx must be positive".into());
        }
        if !(self.ln_epsilon > 0.0) {
            return bad(format!("ln_epsilon must be > 0, got {}", self.ln_epsilon));
        }
        if self.bos_token_id as usize >= self.vocab_size {
            return bad(format!(
                "bos_token_id {} outside vocabulary of {}",
                self.bos_token_id, self.vocab_size
            ));
        }
        if let PositionScheme::Rotary { fraction, base } = self.position_scheme {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return bad(format!("rotary fraction must lie in (0, 1], got {fraction}"));
            }
            let dims = fraction * self.d_head as f64;
            if (dims - dims.round()).abs() > 1e-9 || dims.round() as usize % 2 != 0 {
                return bad(format!(
                    "rotary fraction {fraction} * d_head {} must be an even integer",
                    self.d_head
                ));
            }
            if !(base > 0.0) {
                return bad(format!("rotary base must be positive, got {base}"));
            }
        }
        Ok(())
    }

    /// Number of rotated dims per head (0 for learned positions).
    pub fn rotary_dims(&self) -> usize {
        match self.position_scheme {
            PositionScheme::Learned => 0,
            PositionScheme::Rotary { fraction, .. } => {
                (fraction * self.d_head as f64).round() as usize
            }
        }
    }

    /// Total residual writers: embedding, every head, every MLP.
    pub fn n_components(&self) -> usize {
        1 + self.n_layers * (self.n_heads + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 16,
            vocab_size: 10,
            n_ctx: 8,
            block_layout: BlockLayout::Sequential,
            position_scheme: PositionScheme::Learned,
            activation: Activation::Gelu,
            ln_epsilon: 1e-5,
            bos_token_id: 0,
            unembed_bias: false,
        }
    }

    #[test]
    fn rotary_dims_must_be_even() {
        let mut c = base();
        c.position_scheme = PositionScheme::Rotary {
            fraction: 0.25,
            base: 10_000.0,
        };
        // 0.25 * 4 = 1, odd
        assert!(c.validate().is_err());
        c.position_scheme = PositionScheme::Rotary {
            fraction: 0.5,
            base: 10_000.0,
        };
        c.validate().unwrap();
        assert_eq!(c.rotary_dims(), 2);
    }

    #[test]
    fn epsilon_must_be_positive() {
        let mut c = base();
        c.ln_epsilon = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert!((Activation::Gelu.apply(1.0) - 0.841_344_7).abs() < 1e-6);
        assert!((Activation::GeluTanh.apply(1.0) - 0.841_192).abs() < 1e-5);
        assert_eq!(Activation::Gelu.slope_at_zero(), 0.5);
    }
}
