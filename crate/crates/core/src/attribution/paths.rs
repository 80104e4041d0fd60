// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named-path enumeration over the same edges the aggregate uses.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::dispatch::{HopMode, NodeEdges, Tracer};
use super::engine::{Propagation, Root};
use crate::error::Result;
use crate::model::ComponentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hop {
    pub component: ComponentId,
    pub position: usize,
    /// Mode of the edge into the next hop downstream; `Root` on the last hop.
    pub mode: HopMode,
}

/// An embedding-to-root chain. Hops run upstream to downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub magnitude: f64,
    pub hops: Vec<Hop>,
}

impl Path {
    /// Position of the embedding the path starts from.
    pub fn terminal_position(&self) -> usize {
        self.hops[0].position
    }

    pub fn root(&self) -> &Hop {
        self.hops.last().expect("paths are nonempty")
    }

    /// Mode of the edge into the root, `Root` for single-hop paths.
    pub fn root_entry_mode(&self) -> HopMode {
        match self.hops.len() {
            0 | 1 => HopMode::Root,
            n => self.hops[n - 2].mode,
        }
    }

    /// `emb@3 -K-> A0.H1@5 -> ...`
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (i, h) in self.hops.iter().enumerate() {
            if i > 0 {
                out.push_str(&format!(" -{}-> ", self.hops[i - 1].mode));
            }
            out.push_str(&format!("{}@{}", h.component, h.position));
        }
        out
    }
}

#[derive(Debug)]
struct Ranked {
    abs: f64,
    seq: u64,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl Ord for Ranked {
    /// Larger magnitude first, earlier enumeration first.
    fn cmp(&self, other: &Self) -> Ordering {
        self.abs
            .total_cmp(&other.abs)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub(crate) struct Enumeration {
    pub paths: Vec<Path>,
    pub n_paths: u64,
    pub token_credit: Vec<f64>,
}

struct Walker<'t, 'a> {
    tracer: &'t Tracer<'a>,
    prop: &'t Propagation,
    tau: f64,
    top_k: usize,
    memo: HashMap<(u32, u32), Rc<NodeEdges>>,
    heap: BinaryHeap<Reverse<(Ranked, usize)>>,
    store: Vec<Option<Path>>,
    chain: Vec<Hop>,
    n_paths: u64,
    token_credit: Vec<f64>,
}

pub(crate) fn enumerate(tracer: &Tracer<'_>, prop: &Propagation, roots: &[Root]) -> Result<Enumeration> {
    let mut w = Walker {
        tracer,
        prop,
        tau: tracer.config.tau,
        top_k: tracer.config.top_k_paths,
        memo: HashMap::new(),
        heap: BinaryHeap::new(),
        store: Vec::new(),
        chain: Vec::new(),
        n_paths: 0,
        token_credit: vec![0.0; tracer.capture.n_positions()],
    };
    let n_heads = tracer.model.config.n_heads;
    for r in roots {
        if !w.keep(r.credit) {
            continue;
        }
        let id = ComponentId::from_index(r.comp, n_heads);
        w.chain.push(Hop {
            component: id,
            position: r.pos,
            mode: HopMode::Root,
        });
        if r.comp == 0 {
            w.deposit(r.pos, r.credit);
        } else {
            let edges = tracer.node_edges(id, r.pos, true, r.flow.view())?;
            w.descend(&edges, r.credit)?;
        }
        w.chain.pop();
    }
    let mut ranked: Vec<(Ranked, usize)> = w.heap.into_iter().map(|Reverse(x)| x).collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0));
    let paths = ranked
        .into_iter()
        .map(|(_, i)| w.store[i].take().expect("each stored path is ranked once"))
        .collect();
    Ok(Enumeration {
        paths,
        n_paths: w.n_paths,
        token_credit: w.token_credit,
    })
}

impl Walker<'_, '_> {
    fn keep(&self, credit: f64) -> bool {
        credit != 0.0 && credit.abs() >= self.tau
    }

    fn descend(&mut self, edges: &NodeEdges, credit: f64) -> Result<()> {
        for g in &edges.groups {
            let source = credit * g.share;
            if !self.keep(source) {
                continue;
            }
            for e in &g.edges {
                let child = source * e.weight;
                if self.keep(child) {
                    self.visit(e.comp, e.pos, e.mode, child)?;
                }
            }
        }
        Ok(())
    }

    fn visit(&mut self, comp: u32, pos: u32, mode: HopMode, credit: f64) -> Result<()> {
        let n_heads = self.tracer.model.config.n_heads;
        self.chain.push(Hop {
            component: ComponentId::from_index(comp as usize, n_heads),
            position: pos as usize,
            mode,
        });
        if comp == 0 {
            self.deposit(pos as usize, credit);
        } else {
            let edges = match self.memo.get(&(comp, pos)) {
                Some(e) => Rc::clone(e),
                None => {
                    let d = self.tracer.model.config.d_model;
                    let flow = self.prop.direction(comp as usize, pos as usize, d);
                    let id = ComponentId::from_index(comp as usize, n_heads);
                    let e = Rc::new(self.tracer.node_edges(id, pos as usize, false, flow.view())?);
                    self.memo.insert((comp, pos), Rc::clone(&e));
                    e
                }
            };
            self.descend(&edges, credit)?;
        }
        self.chain.pop();
        Ok(())
    }

    fn deposit(&mut self, pos: usize, credit: f64) {
        self.token_credit[pos] += credit;
        let seq = self.n_paths;
        self.n_paths += 1;
        if self.top_k == 0 {
            return;
        }
        let rank = Ranked {
            abs: credit.abs(),
            seq,
        };
        let slot = if self.heap.len() == self.top_k {
            let worst = &self.heap.peek().expect("heap is full").0 .0;
            if rank <= *worst {
                return;
            }
            let Reverse((_, slot)) = self.heap.pop().expect("heap is full");
            slot
        } else {
            self.store.push(None);
            self.store.len() - 1
        };
        let hops = self.chain.iter().rev().copied().collect();
        self.store[slot] = Some(Path {
            magnitude: credit,
            hops,
        });
        self.heap.push(Reverse((rank, slot)));
    }
}
