// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream writers and the sites that read them.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{BlockLayout, ModelConfig};
use crate::error::{Result, UnpackError};

/// One writer into the residual stream.
///
/// The derived order follows dataflow: the embedding first, then layer 0's
/// heads, layer 0's MLP, layer 1's heads, and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentId {
    Embedding,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
}

impl ComponentId {
    fn sort_key(&self) -> (usize, usize, usize) {
        match *self {
            Self::Embedding => (0, 0, 0),
            Self::Head { layer, head } => (layer + 1, 0, head),
            Self::Mlp { layer } => (layer + 1, 1, 0),
        }
    }

    /// Layer of the writer; the embedding has none.
    pub fn layer(&self) -> Option<usize> {
        match *self {
            Self::Embedding => None,
            Self::Head { layer, .. } | Self::Mlp { layer } => Some(layer),
        }
    }

    /// Dense index into a capture's component table.
    pub fn index(&self, n_heads: usize) -> usize {
        match *self {
            Self::Embedding => 0,
            Self::Head { layer, head } => 1 + layer * (n_heads + 1) + head,
            Self::Mlp { layer } => 1 + layer * (n_heads + 1) + n_heads,
        }
    }

    pub fn from_index(index: usize, n_heads: usize) -> Self {
        if index == 0 {
            return Self::Embedding;
        }
        let layer = (index - 1) / (n_heads + 1);
        let slot = (index - 1) % (n_heads + 1);
        if slot == n_heads {
            Self::Mlp { layer }
        } else {
            Self::Head { layer, head: slot }
        }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, Self::Head { .. })
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let ok = match *self {
            Self::Embedding => true,
            Self::Head { layer, head } => layer < cfg.n_layers && head < cfg.n_heads,
            Self::Mlp { layer } => layer < cfg.n_layers,
        };
        if ok {
            Ok(())
        } else {
            Err(UnpackError::OutOfRange(format!("component {self} for this model")))
        }
    }
}

impl Ord for ComponentId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for ComponentId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Embedding => write!(f, "emb"),
            Self::Head { layer, head } => write!(f, "A{layer}.H{head}"),
            Self::Mlp { layer } => write!(f, "MLP{layer}"),
        }
    }
}

impl FromStr for ComponentId {
    type Err = UnpackError;

    /// Parses `emb`, `A8.H6` / `8.6`, or `MLP0`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let bad = || UnpackError::InvalidArgument(format!("cannot parse component `{s}`"));
        if t.eq_ignore_ascii_case("emb") || t.eq_ignore_ascii_case("embedding") {
            return Ok(Self::Embedding);
        }
        if let Some(rest) = t.strip_prefix("MLP").or_else(|| t.strip_prefix("mlp")) {
            let layer = rest.parse().map_err(|_| bad())?;
            return Ok(Self::Mlp { layer });
        }
        let body = t.strip_prefix('A').or_else(|| t.strip_prefix('a')).unwrap_or(t);
        let (l, h) = body.split_once('.').ok_or_else(bad)?;
        let h = h.strip_prefix('H').or_else(|| h.strip_prefix('h')).unwrap_or(h);
        Ok(Self::Head {
            layer: l.parse().map_err(|_| bad())?,
            head: h.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sublayer {
    Attn,
    Mlp,
}

/// A LayerNorm input in the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Site {
    Layer { layer: usize, sublayer: Sublayer },
    Final,
}

impl Site {
    pub fn attn(layer: usize) -> Self {
        Self::Layer {
            layer,
            sublayer: Sublayer::Attn,
        }
    }

    pub fn mlp(layer: usize) -> Self {
        Self::Layer {
            layer,
            sublayer: Sublayer::Mlp,
        }
    }

    /// Dense index: `2 * layer + sublayer`, final site last.
    pub fn index(&self, n_layers: usize) -> usize {
        match *self {
            Self::Layer { layer, sublayer } => 2 * layer + usize::from(sublayer == Sublayer::Mlp),
            Self::Final => 2 * n_layers,
        }
    }

    pub fn n_sites(n_layers: usize) -> usize {
        2 * n_layers + 1
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        match *self {
            Self::Layer { layer, .. } if layer >= cfg.n_layers => Err(UnpackError::OutOfRange(
                format!("site layer {layer} >= n_layers {}", cfg.n_layers),
            )),
            _ => Ok(()),
        }
    }

    /// Number of leading components (in dataflow order) that write into
    /// this site. Every site reads a prefix of the global component order.
    pub fn n_writers(&self, cfg: &ModelConfig) -> usize {
        let per_layer = cfg.n_heads + 1;
        match *self {
            Self::Layer {
                layer,
                sublayer: Sublayer::Attn,
            } => 1 + layer * per_layer,
            Self::Layer {
                layer,
                sublayer: Sublayer::Mlp,
            } => match cfg.block_layout {
                BlockLayout::Sequential => 1 + layer * per_layer + cfg.n_heads,
                BlockLayout::Parallel => 1 + layer * per_layer,
            },
            Self::Final => cfg.n_components(),
        }
    }

    /// Whether the component writes into this site.
    pub fn reads(&self, component: ComponentId, cfg: &ModelConfig) -> bool {
        component.index(cfg.n_heads) < self.n_writers(cfg)
    }
}
