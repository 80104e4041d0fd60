// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rerooting at role heads and ranking upstream roles by composition mode.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::prompts::{IoiPrompt, PromptPair};
use super::roles::RoleTable;
use crate::attribution::{rank_upstream, ModeFilter, TraceConfig, Tracer};
use crate::error::Result;
use crate::model::{CaptureFlags, Model};

/// Slot a claim reroots at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootSlot {
    End,
    S2,
}

impl RootSlot {
    fn position(self, p: &IoiPrompt) -> usize {
        match self {
            Self::End => p.slots.end,
            Self::S2 => p.slots.s2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub root_role: String,
    pub slot: RootSlot,
}

/// NM and S-Inh at the final position, Ind at the second subject mention.
pub fn default_claims() -> Vec<Claim> {
    [("NM", RootSlot::End), ("S-Inh", RootSlot::End), ("Ind", RootSlot::S2)]
        .into_iter()
        .map(|(r, slot)| Claim {
            root_role: r.to_string(),
            slot,
        })
        .collect()
}

pub const FILTERS: [ModeFilter; 4] = [ModeFilter::All, ModeFilter::K, ModeFilter::Q, ModeFilter::V];

/// Ranked heads must sit at layer 1 or above.
pub const LAYER_FLOOR: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionCell {
    pub filter: ModeFilter,
    pub root_role: String,
    pub upstream_role: String,
    /// Some upstream head sits below some root head.
    pub applicable: bool,
    pub n_rerootings: usize,
    pub n_found: usize,
    /// Lower median of the found ranks.
    pub median_rank: Option<usize>,
}

impl CompositionCell {
    pub fn found_fraction(&self) -> f64 {
        if self.n_rerootings == 0 {
            0.0
        } else {
            self.n_found as f64 / self.n_rerootings as f64
        }
    }

    /// `rank / found%`, or `--` when no ordering is possible.
    pub fn display(&self) -> String {
        match (self.applicable, self.median_rank) {
            (false, _) => "--".into(),
            (true, Some(r)) => format!("{r} / {:.0}%", 100.0 * self.found_fraction()),
            (true, None) => "- / 0%".into(),
        }
    }
}

fn lower_median(mut v: Vec<usize>) -> Option<usize> {
    v.sort_unstable();
    (!v.is_empty()).then(|| v[(v.len() - 1) / 2])
}

/// Ranks of every upstream role, `[claim][root head][filter][role]`.
type PromptRanks = Vec<Vec<Vec<Vec<Option<usize>>>>>;

fn prompt_ranks(
    model: &Model,
    prompt: &IoiPrompt,
    config: &TraceConfig,
    roles: &RoleTable,
    claims: &[Claim],
) -> Result<PromptRanks> {
    let cap = model.forward(&prompt.token_ids, CaptureFlags::ALL)?;
    let tracer = Tracer::new(model, &cap, config.clone())?;
    claims
        .iter()
        .map(|c| {
            let pos = c.slot.position(prompt);
            roles
                .get(&c.root_role)?
                .heads
                .iter()
                .map(|&head| {
                    let ledger = tracer.reroot(head, pos)?;
                    FILTERS
                        .iter()
                        .map(|&f| {
                            if ledger.paths.is_empty() {
                                return Ok(vec![None; roles.roles.len()]);
                            }
                            Ok(rank_upstream(&ledger, f, LAYER_FLOOR, roles)?
                                .into_iter()
                                .map(|r| r.rank.filter(|_| r.found))
                                .collect())
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// One cell per (filter, claim, upstream role), filters outermost.
pub fn composition_verification(
    model: &Model,
    pairs: &[PromptPair],
    config: &TraceConfig,
    roles: &RoleTable,
    claims: &[Claim],
) -> Result<Vec<CompositionCell>> {
    roles.validate(&model.config)?;
    for c in claims {
        roles.get(&c.root_role)?;
    }
    let ranks: Vec<PromptRanks> = pairs
        .par_iter()
        .map(|p| prompt_ranks(model, &p.ioi, config, roles, claims))
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for (fi, &filter) in FILTERS.iter().enumerate() {
        for (ci, claim) in claims.iter().enumerate() {
            let root = roles.get(&claim.root_role)?;
            for (ri, up) in roles.roles.iter().enumerate() {
                let applicable = root.heads.iter().any(|r| {
                    up.heads
                        .iter()
                        .any(|u| u.layer().unwrap_or(0) < r.layer().unwrap_or(0) && u.layer() >= Some(LAYER_FLOOR))
                });
                let found: Vec<usize> = ranks
                    .iter()
                    .flat_map(|p| p[ci].iter().filter_map(|h| h[fi][ri]))
                    .collect();
                cells.push(CompositionCell {
                    filter,
                    root_role: claim.root_role.clone(),
                    upstream_role: up.name.clone(),
                    applicable,
                    n_rerootings: pairs.len() * root.heads.len(),
                    n_found: found.len(),
                    median_rank: lower_median(found),
                });
            }
        }
    }
    Ok(cells)
}
