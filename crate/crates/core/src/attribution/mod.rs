// SPDX-License-Identifier: MIT OR Apache-2.0

//! Backward credit recursion.
//!
//! Credit starts at the target logit (or at a rerooted component), is split
//! across the keys of each sublayer by their gated values, and then across
//! the upstream components that drove each key's selection score, until it
//! lands on token embeddings.
//!
//! Two passes share one edge function. The aggregate pass walks
//! `(component, position)` nodes top-down, merging every path that reaches
//! a node, and yields exact token credit. The enumeration pass walks the
//! same edges depth-first, pruned at `tau`, and keeps the strongest named
//! paths. Summed over all paths at `tau = 0`, it reproduces the aggregate.

pub mod config;
pub mod dispatch;
mod engine;
pub mod paths;
pub mod rank;
pub mod safe_denom;
pub mod target;

use std::io::Write;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

pub use config::{AttnKeySide, BranchWeights, MlpKeySide, Target, TraceConfig, VDispatch, CONFIG_NAMES};
pub use dispatch::{Child, HopMode, Tracer};
pub use paths::{Hop, Path};
pub use rank::{rank_upstream, upstream_ranking, ModeFilter, RoleRank, FOUND_TOP};
pub use safe_denom::safe_denom;
pub use target::{root_importances, target_direction};

use crate::error::{Result, UnpackError};
use crate::model::{ComponentId, ForwardCapture, Model};
use dispatch::unit;
use engine::Root;

/// Where a ledger's credit came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RootSpec {
    Target { target: Target, position: usize },
    /// Unit credit along the component's realized output at `position`.
    Component { component: ComponentId, position: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreditLedger {
    pub root: RootSpec,
    /// Exact signed credit per token position.
    pub token_credit: Vec<f64>,
    pub total_root_importance: f64,
    /// Importance of every root node in dataflow order.
    pub root_importances: Vec<f64>,
    /// Strongest enumerated paths, largest `|magnitude|` first.
    pub paths: Vec<Path>,
    pub n_paths_enumerated: u64,
    /// Token credit summed over every enumerated path.
    pub enumerated_credit: Vec<f64>,
    /// Denominators where the soft floor replaced the signed sum.
    pub floor_trips: u64,
    /// Credit dropped at all-zero denominators.
    pub lost_credit: f64,
    /// Credit left unexpanded by the aggregate pruning floor.
    pub pruned_credit: f64,
}

impl CreditLedger {
    /// Sum of the positive token credits.
    pub fn positive_total(&self) -> f64 {
        self.token_credit.iter().filter(|&&c| c > 0.0).sum()
    }

    /// Token credit as percent of the total positive credit.
    pub fn credit_percent(&self) -> Vec<f64> {
        let total = self.positive_total();
        self.token_credit
            .iter()
            .map(|c| if total > 0.0 { 100.0 * c / total } else { 0.0 })
            .collect()
    }

    /// Tab-separated `position, token, credit, percent`.
    pub fn write_token_table<W: Write>(&self, mut w: W, tokens: Option<&[String]>) -> std::io::Result<()> {
        writeln!(w, "position\ttoken\tcredit\tpercent")?;
        for (p, (c, pct)) in self.token_credit.iter().zip(self.credit_percent()).enumerate() {
            let tok = tokens.and_then(|t| t.get(p)).map(String::as_str).unwrap_or("");
            writeln!(w, "{p}\t{}\t{c:.9e}\t{pct:.6}", escape(tok))?;
        }
        Ok(())
    }

    /// One JSON object per path: `{magnitude, hops: [{component, position, mode}]}`.
    pub fn write_paths<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in &self.paths {
            let hops: Vec<_> = p
                .hops
                .iter()
                .map(|h| {
                    serde_json::json!({
                        "component": h.component.to_string(),
                        "position": h.position,
                        "mode": h.mode.to_string(),
                    })
                })
                .collect();
            let rec = serde_json::json!({ "magnitude": p.magnitude, "hops": hops });
            writeln!(w, "{rec}")?;
        }
        Ok(())
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

impl Tracer<'_> {
    fn run(&self, root: RootSpec, roots: Vec<Root>, importances: Vec<f64>) -> Result<CreditLedger> {
        let prop = engine::propagate(self, &roots)?;
        let en = paths::enumerate(self, &prop, &roots)?;
        let ledger = CreditLedger {
            root,
            total_root_importance: importances.iter().sum(),
            root_importances: importances,
            token_credit: prop.token_credit,
            paths: en.paths,
            n_paths_enumerated: en.n_paths,
            enumerated_credit: en.token_credit,
            floor_trips: prop.floor_trips,
            lost_credit: prop.lost_credit,
            pruned_credit: prop.pruned_credit,
        };
        if ledger.token_credit.iter().any(|c| !c.is_finite()) {
            return Err(UnpackError::Numeric("non-finite token credit".into()));
        }
        Ok(ledger)
    }

    fn target_roots(&self, position: usize) -> Result<(Vec<Root>, Vec<f64>)> {
        let d = target_direction(self.model, self.capture, self.config.target, position)?;
        let importances = root_importances(self.capture, &d, position)?;
        let u = unit(d);
        let roots = importances
            .iter()
            .enumerate()
            .map(|(comp, &credit)| Root {
                comp,
                pos: position,
                credit,
                flow: &u * credit,
            })
            .collect();
        Ok((roots, importances))
    }

    /// Full trace of the configured target at `position`.
    pub fn trace(&self, position: usize) -> Result<CreditLedger> {
        let (roots, imp) = self.target_roots(position)?;
        self.run(
            RootSpec::Target {
                target: self.config.target,
                position,
            },
            roots,
            imp,
        )
    }

    /// Exact token credit only, without path enumeration.
    pub fn aggregate_token_credit(&self, position: usize) -> Result<Vec<f64>> {
        let (roots, _) = self.target_roots(position)?;
        Ok(engine::propagate(self, &roots)?.token_credit)
    }

    /// Trace seeded at `component` with unit importance along its realized
    /// output at `position`.
    pub fn reroot(&self, component: ComponentId, position: usize) -> Result<CreditLedger> {
        component.validate(&self.model.config)?;
        self.capture.check_pos(position)?;
        if component == ComponentId::Embedding {
            return Err(UnpackError::InvalidArgument(
                "cannot reroot at the embedding: nothing is upstream".into(),
            ));
        }
        let out: Array1<f64> = self.capture.component(component, position)?.mapv(f64::from);
        let root = Root {
            comp: component.index(self.model.config.n_heads),
            pos: position,
            credit: 1.0,
            flow: unit(out),
        };
        self.run(
            RootSpec::Component {
                component,
                position,
            },
            vec![root],
            vec![1.0],
        )
    }
}

/// Traces `config.target` at `position`.
pub fn trace(model: &Model, capture: &ForwardCapture, config: &TraceConfig, position: usize) -> Result<CreditLedger> {
    Tracer::new(model, capture, config.clone())?.trace(position)
}

/// Exact token credit of `config.target` at `position`.
pub fn aggregate_token_credit(
    model: &Model,
    capture: &ForwardCapture,
    config: &TraceConfig,
    position: usize,
) -> Result<Vec<f64>> {
    Tracer::new(model, capture, config.clone())?.aggregate_token_credit(position)
}

/// Reroots at `component` at `position`.
pub fn reroot(
    model: &Model,
    capture: &ForwardCapture,
    config: &TraceConfig,
    component: ComponentId,
    position: usize,
) -> Result<CreditLedger> {
    Tracer::new(model, capture, config.clone())?.reroot(component, position)
}
