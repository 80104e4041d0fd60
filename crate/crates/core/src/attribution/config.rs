// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trace configuration and the six named variants.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UnpackError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKeySide {
    KOnly,
    Kqv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKeySide {
    Weighted,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VDispatch {
    Raw,
    Aligned,
}

/// Logit whose credit is traced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    /// Vocabulary-centered logit of one token.
    Single { token: u32 },
    /// `logit(token) - logit(distractor)`.
    LogitDiff { token: u32, distractor: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchWeights {
    pub k: f64,
    pub q: f64,
    pub v: f64,
}

impl Default for BranchWeights {
    fn default() -> Self {
        Self {
            k: 1.0 / 3.0,
            q: 1.0 / 3.0,
            v: 1.0 / 3.0,
        }
    }
}

impl std::str::FromStr for BranchWeights {
    type Err = UnpackError;

    /// Parses `wK,wQ,wV`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| UnpackError::TraceConfig(format!("branch weights `{s}`: {e}")))?;
        match parts[..] {
            [k, q, v] => Ok(Self { k, q, v }),
            _ => Err(UnpackError::TraceConfig(format!(
                "branch weights need three values, got `{s}`"
            ))),
        }
    }
}

/// Names accepted by [`TraceConfig::named`].
pub const CONFIG_NAMES: [&str; 6] = [
    "k_only_weighted",
    "k_only_l2",
    "k_only_aligned",
    "kqv_weighted",
    "kqv_l2",
    "kqv_aligned",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub attn_key_side: AttnKeySide,
    pub mlp_key_side: MlpKeySide,
    pub v_dispatch: VDispatch,
    pub beta: f64,
    /// Pruning floor for named-path enumeration.
    pub tau: f64,
    /// Pruning floor for the aggregate token credit; 0 keeps it exact.
    pub tau_aggregate: f64,
    pub top_k_paths: usize,
    pub branch_weights: BranchWeights,
    pub target: Target,
}

impl TraceConfig {
    pub fn new(
        attn_key_side: AttnKeySide,
        mlp_key_side: MlpKeySide,
        v_dispatch: VDispatch,
        target: Target,
    ) -> Self {
        Self {
            attn_key_side,
            mlp_key_side,
            v_dispatch,
            beta: 0.8,
            tau: 1e-3,
            tau_aggregate: 1e-4,
            top_k_paths: 2000,
            branch_weights: BranchWeights::default(),
            target,
        }
    }

    /// One of [`CONFIG_NAMES`] with default hyperparameters.
    pub fn named(name: &str, target: Target) -> Result<Self> {
        use AttnKeySide::*;
        use MlpKeySide::*;
        use VDispatch::*;
        let (a, m, v) = match name {
            "k_only_weighted" => (KOnly, Weighted, Raw),
            "k_only_l2" => (KOnly, L2, Raw),
            "k_only_aligned" => (KOnly, Weighted, Aligned),
            "kqv_weighted" => (Kqv, Weighted, Raw),
            "kqv_l2" => (Kqv, L2, Raw),
            "kqv_aligned" => (Kqv, Weighted, Aligned),
            _ => {
                return Err(UnpackError::TraceConfig(format!(
                    "unknown config `{name}`; expected one of: {}",
                    CONFIG_NAMES.join(", ")
                )))
            }
        };
        Ok(Self::new(a, m, v, target))
    }

    /// The named variant this config matches, ignoring hyperparameters.
    pub fn name(&self) -> Option<&'static str> {
        CONFIG_NAMES.iter().copied().find(|n| {
            Self::named(n, self.target).is_ok_and(|c| {
                c.attn_key_side == self.attn_key_side
                    && c.mlp_key_side == self.mlp_key_side
                    && c.v_dispatch == self.v_dispatch
            })
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(UnpackError::TraceConfig(msg));
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        for (name, t) in [("tau", self.tau), ("tau_aggregate", self.tau_aggregate)] {
            if !(t.is_finite() && t >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {t}"));
            }
        }
        let w = self.branch_weights;
        if [w.k, w.q, w.v].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad(format!("branch weights must be nonnegative, got {w:?}"));
        }
        if (w.k + w.q + w.v - 1.0).abs() > 1e-9 {
            return bad(format!("branch weights must sum to 1, got {w:?}"));
        }
        Ok(())
    }

    /// Effective `(w_K, w_Q, w_V)`; K-only ignores the configured weights.
    pub fn effective_weights(&self) -> BranchWeights {
        match self.attn_key_side {
            AttnKeySide::KOnly => BranchWeights {
                k: 1.0,
                q: 0.0,
                v: 0.0,
            },
            AttnKeySide::Kqv => self.branch_weights,
        }
    }

    /// Attention alignment at depth 0.
    pub fn attn_aligned(&self) -> bool {
        self.v_dispatch == VDispatch::Aligned
    }

    /// MLP alignment at depth 0; never under the L2 rule.
    pub fn mlp_aligned(&self) -> bool {
        self.v_dispatch == VDispatch::Aligned && self.mlp_key_side == MlpKeySide::Weighted
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: Target = Target::Single { token: 0 };

    #[test]
    fn named_configs_round_trip() {
        for name in CONFIG_NAMES {
            let c = TraceConfig::named(name, T).unwrap();
            c.validate().unwrap();
            assert_eq!(c.name(), Some(name));
        }
    }

    #[test]
    fn unknown_name_lists_choices() {
        let err = TraceConfig::named("kqv_fancy", T).unwrap_err().to_string();
        for name in CONFIG_NAMES {
            assert!(err.contains(name));
        }
    }

    #[test]
    fn weights_must_sum_to_one() {
        let mut c = TraceConfig::named("kqv_weighted", T).unwrap();
        c.branch_weights = BranchWeights {
            k: 0.5,
            q: 0.5,
            v: 0.5,
        };
        assert!(c.validate().is_err());
        c.branch_weights = "1,0,0".parse().unwrap();
        c.validate().unwrap();
        c.beta = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn l2_never_aligns_the_mlp() {
        let mut c = TraceConfig::named("kqv_l2", T).unwrap();
        c.v_dispatch = VDispatch::Aligned;
        assert!(c.attn_aligned());
        assert!(!c.mlp_aligned());
        assert_eq!(c.name(), None);
    }
}
