// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ranking upstream heads of a rerooted ledger.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dispatch::HopMode;
use super::CreditLedger;
use crate::error::{Result, UnpackError};
use crate::eval::RoleTable;
use crate::model::ComponentId;

/// Ranks at or above which a role counts as found.
pub const FOUND_TOP: usize = 100;

/// Which edge into the root a path must use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModeFilter {
    K,
    Q,
    V,
    All,
}

impl ModeFilter {
    pub fn admits(self, mode: HopMode) -> bool {
        match self {
            Self::All => true,
            Self::K => mode == HopMode::K,
            Self::Q => mode == HopMode::Q,
            Self::V => mode == HopMode::V,
        }
    }
}

impl FromStr for ModeFilter {
    type Err = UnpackError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(Self::K),
            "q" => Ok(Self::Q),
            "v" => Ok(Self::V),
            "all" => Ok(Self::All),
            _ => Err(UnpackError::InvalidArgument(format!(
                "mode filter `{s}`; expected K, Q, V or all"
            ))),
        }
    }
}

impl std::fmt::Display for ModeFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::K => "K",
            Self::Q => "Q",
            Self::V => "V",
            Self::All => "all",
        })
    }
}

/// Heads of layer `>= layer_floor` ordered by summed `|magnitude|` over the
/// admitted paths. The root hop is not ranked. Ties go to the lower head.
pub fn upstream_ranking(
    ledger: &CreditLedger,
    filter: ModeFilter,
    layer_floor: usize,
) -> Vec<(ComponentId, f64)> {
    let mut totals: BTreeMap<ComponentId, f64> = BTreeMap::new();
    for path in &ledger.paths {
        if !filter.admits(path.root_entry_mode()) {
            continue;
        }
        let upstream = &path.hops[..path.hops.len().saturating_sub(1)];
        for hop in upstream {
            if hop.component.is_head() && hop.component.layer().is_some_and(|l| l >= layer_floor) {
                *totals.entry(hop.component).or_default() += path.magnitude.abs();
            }
        }
    }
    let mut ranked: Vec<(ComponentId, f64)> = totals.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleRank {
    pub role: String,
    /// A head of the role ranks within [`FOUND_TOP`].
    pub found: bool,
    /// 1-based rank of the role's best head, if it appears at all.
    pub rank: Option<usize>,
}

/// Per-role rank of the best head in the filtered upstream ranking.
pub fn rank_upstream(
    ledger: &CreditLedger,
    filter: ModeFilter,
    layer_floor: usize,
    roles: &RoleTable,
) -> Result<Vec<RoleRank>> {
    if ledger.paths.is_empty() {
        return Err(UnpackError::InvalidArgument("ledger has no paths".into()));
    }
    let ranking = upstream_ranking(ledger, filter, layer_floor);
    Ok(roles
        .roles
        .iter()
        .map(|role| {
            let rank = ranking
                .iter()
                .position(|(id, _)| role.heads.contains(id))
                .map(|i| i + 1);
            RoleRank {
                role: role.name.clone(),
                found: rank.is_some_and(|r| r <= FOUND_TOP),
                rank,
            }
        })
        .collect())
}
