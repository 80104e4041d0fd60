// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact aggregate credit by level-wise propagation over
//! `(component, position)` nodes.

use ndarray::{s, Array1, Array2, Array3};

use super::dispatch::{OutFlow, Tracer};
use crate::error::Result;
use crate::model::ComponentId;

/// A depth-0 node.
#[derive(Debug, Clone)]
pub(crate) struct Root {
    pub comp: usize,
    pub pos: usize,
    pub credit: f64,
    /// Credit times the unit credit direction.
    pub flow: Array1<f64>,
}

/// Result of propagation. Node state is kept for path enumeration.
pub(crate) struct Propagation {
    pub token_credit: Vec<f64>,
    /// Credit of non-root nodes, `[component, pos]`.
    pub credit: Array2<f64>,
    /// Credit-weighted directions of non-root nodes, `[component, pos, d]`.
    pub flows: Option<Array3<f64>>,
    pub floor_trips: u64,
    pub lost_credit: f64,
    pub pruned_credit: f64,
}

impl Propagation {
    /// Flow of a non-root node; its direction is what the node dispatches along.
    pub fn direction(&self, comp: usize, pos: usize, d_model: usize) -> Array1<f64> {
        match &self.flows {
            Some(f) => f.slice(s![comp, pos, ..]).to_owned(),
            None => Array1::zeros(d_model),
        }
    }
}

struct Parent {
    credit: f64,
    outgoing: Array1<f64>,
    edges: Vec<(usize, f64)>,
}

/// Component-index ranges processed together, top of the model first.
/// Nothing in a level feeds another node of the same level.
fn levels(n_layers: usize, n_heads: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::with_capacity(2 * n_layers);
    for l in (0..n_layers).rev() {
        let mlp = ComponentId::Mlp { layer: l }.index(n_heads);
        let h0 = ComponentId::Head { layer: l, head: 0 }.index(n_heads);
        out.push(mlp..mlp + 1);
        out.push(h0..mlp);
    }
    out
}

pub(crate) fn propagate(tracer: &Tracer<'_>, roots: &[Root]) -> Result<Propagation> {
    let cfg = &tracer.model.config;
    let n = tracer.capture.n_positions();
    let d = cfg.d_model;
    let k_total = cfg.n_components();
    let tau = tracer.config.tau_aggregate;
    let needs_flow = tracer.needs_flow();
    let mut st = Propagation {
        token_credit: vec![0.0; n],
        credit: Array2::zeros((k_total, n)),
        flows: needs_flow.then(|| Array3::zeros((k_total, n, d))),
        floor_trips: 0,
        lost_credit: 0.0,
        pruned_credit: 0.0,
    };

    let mut parents = Vec::new();
    for r in roots {
        if r.comp == 0 {
            st.token_credit[r.pos] += r.credit;
            continue;
        }
        if let Some(p) = expand(tracer, &mut st, r.comp, r.pos, r.credit, true, r.flow.clone(), tau)? {
            parents.push(p);
        }
    }
    scatter(&mut st, &parents, k_total, n);

    for level in levels(cfg.n_layers, cfg.n_heads) {
        let mut parents = Vec::new();
        for comp in level.clone() {
            for pos in 0..n {
                let credit = st.credit[[comp, pos]];
                if credit == 0.0 {
                    continue;
                }
                let flow = st.direction(comp, pos, d);
                if let Some(p) = expand(tracer, &mut st, comp, pos, credit, false, flow, tau)? {
                    parents.push(p);
                }
            }
        }
        scatter(&mut st, &parents, level.start, n);
    }
    for pos in 0..n {
        st.token_credit[pos] += st.credit[[0, pos]];
    }
    Ok(st)
}

#[allow(clippy::too_many_arguments)]
fn expand(
    tracer: &Tracer<'_>,
    st: &mut Propagation,
    comp: usize,
    pos: usize,
    credit: f64,
    depth0: bool,
    flow: Array1<f64>,
    tau: f64,
) -> Result<Option<Parent>> {
    if tau > 0.0 && credit.abs() < tau {
        st.pruned_credit += credit.abs();
        return Ok(None);
    }
    let id = ComponentId::from_index(comp, tracer.model.config.n_heads);
    let ne = tracer.node_edges(id, pos, depth0, flow.view())?;
    st.floor_trips += ne.floor_trips;
    st.lost_credit += credit * ne.lost;
    let n = tracer.capture.n_positions();
    let mut edges = Vec::new();
    for g in &ne.groups {
        for e in &g.edges {
            let w = g.share * e.weight;
            edges.push((e.comp as usize * n + e.pos as usize, w));
        }
    }
    let outgoing = match ne.out_flow {
        OutFlow::Inherit => flow,
        OutFlow::Fixed(u) => u * credit,
    };
    Ok(Some(Parent {
        credit,
        outgoing,
        edges,
    }))
}

/// Adds parents' credit and flows to their children, all of which have
/// component index below `limit`.
fn scatter(st: &mut Propagation, parents: &[Parent], limit: usize, n: usize) {
    for p in parents {
        for &(slot, w) in &p.edges {
            st.credit[[slot / n, slot % n]] += p.credit * w;
        }
    }
    let Some(flows) = st.flows.as_mut() else {
        return;
    };
    if parents.is_empty() || limit == 0 {
        return;
    }
    let d = flows.dim().2;
    let mut w = Array2::<f64>::zeros((limit * n, parents.len()));
    let mut g = Array2::<f64>::zeros((parents.len(), d));
    for (i, p) in parents.iter().enumerate() {
        for &(slot, wt) in &p.edges {
            w[[slot, i]] += wt;
        }
        g.row_mut(i).assign(&p.outgoing);
    }
    let add = w.dot(&g);
    let mut target = flows
        .slice_mut(s![..limit, .., ..])
        .into_shape_with_order((limit * n, d))
        .expect("leading block of a standard-layout array");
    target += &add;
}
