// SPDX-License-Identifier: MIT OR Apache-2.0

//! The three dispatch rules and the per-capture tables they read.

use std::cell::OnceCell;
use std::rc::Rc;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::config::{BranchWeights, MlpKeySide, TraceConfig};
use super::safe_denom::{floor_active, safe_denom_from_sums};
use crate::decompose::{attn_score_tables, ln_params, normalize_site, value_tables};
use crate::error::{Result, UnpackError};
use crate::model::{ComponentId, ForwardCapture, Model, Site};

/// How credit entered a hop from the next hop downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HopMode {
    K,
    Q,
    V,
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "root")]
    Root,
}

impl std::fmt::Display for HopMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::K => "K",
            Self::Q => "Q",
            Self::V => "V",
            Self::Mlp => "MLP",
            Self::Root => "root",
        })
    }
}

/// One upstream recipient of a dispatch step, as a fraction of the
/// parent's credit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Child {
    pub component: ComponentId,
    pub position: usize,
    pub mode: HopMode,
    pub share: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Edge {
    pub comp: u32,
    pub pos: u32,
    pub mode: HopMode,
    pub weight: f64,
}

/// Edges leaving through one attention source (or the single MLP step).
#[derive(Debug, Clone)]
pub(crate) struct EdgeGroup {
    pub share: f64,
    pub edges: Vec<Edge>,
}

/// Direction a node passes to its children.
#[derive(Debug, Clone)]
pub(crate) enum OutFlow {
    /// Children inherit the node's own direction.
    Inherit,
    /// Children receive this unit vector scaled by their credit.
    Fixed(Array1<f64>),
}

#[derive(Debug, Clone)]
pub(crate) struct NodeEdges {
    pub groups: Vec<EdgeGroup>,
    pub out_flow: OutFlow,
    pub floor_trips: u64,
    /// Fraction of the node's credit dropped at all-zero denominators.
    pub lost: f64,
}

impl NodeEdges {
    fn terminal() -> Self {
        Self {
            groups: Vec::new(),
            out_flow: OutFlow::Inherit,
            floor_trips: 0,
            lost: 0.0,
        }
    }

    fn dropped() -> Self {
        Self {
            lost: 1.0,
            ..Self::terminal()
        }
    }
}

struct AttnTables {
    /// `[head, query, source, writer]`
    ks: Array4<f64>,
    qs: Array4<f64>,
}

struct MlpTables {
    /// `Σ_k s_kj`, `[pos, neuron]`.
    sum: Array2<f64>,
    /// `Σ_k |s_kj|`, `[pos, neuron]`.
    abs: Array2<f64>,
    /// `‖s_k‖_2`, `[writer, pos]`.
    norms: Array2<f64>,
}

pub(crate) fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 && n.is_finite() {
        v / n
    } else {
        Array1::zeros(v.len())
    }
}

fn centered(mut v: Array1<f64>) -> Array1<f64> {
    let mean = v.sum() / v.len().max(1) as f64;
    v.mapv_inplace(|x| x - mean);
    v
}

/// Config-independent tables of one capture, built on first use.
struct TableCache {
    attn: Vec<OnceCell<AttnTables>>,
    /// `[head, writer, pos, d_head]`
    pv: Vec<OnceCell<Array4<f64>>>,
    mlp: Vec<OnceCell<MlpTables>>,
}

fn cells<T>(n: usize) -> Vec<OnceCell<T>> {
    (0..n).map(|_| OnceCell::new()).collect()
}

/// Per-capture dispatch state.
pub struct Tracer<'a> {
    pub model: &'a Model,
    pub capture: &'a ForwardCapture,
    pub config: TraceConfig,
    weights: BranchWeights,
    cache: Rc<TableCache>,
}

impl<'a> Tracer<'a> {
    pub fn new(model: &'a Model, capture: &'a ForwardCapture, config: TraceConfig) -> Result<Self> {
        config.validate()?;
        if capture.config != model.config {
            return Err(UnpackError::InvalidArgument(
                "capture was produced by a different model".into(),
            ));
        }
        capture.components()?;
        capture.residuals()?;
        capture.ln_stats()?;
        if model.config.n_layers > 0 {
            capture.attention(0)?;
            capture.mlp_pre(0)?;
        }
        let layers = model.config.n_layers;
        Ok(Self {
            model,
            capture,
            weights: config.effective_weights(),
            config,
            cache: Rc::new(TableCache {
                attn: cells(layers),
                pv: cells(layers),
                mlp: cells(layers),
            }),
        })
    }

    /// A tracer over the same capture with another config, sharing tables.
    pub fn with_config(&self, config: TraceConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model: self.model,
            capture: self.capture,
            weights: config.effective_weights(),
            config,
            cache: Rc::clone(&self.cache),
        })
    }

    pub fn set_target(&mut self, target: super::config::Target) {
        self.config.target = target;
    }

    fn n_heads(&self) -> usize {
        self.model.config.n_heads
    }

    /// Whether node directions influence any share past depth 0.
    pub(crate) fn needs_flow(&self) -> bool {
        self.weights.v > 0.0
    }

    fn attn_tables(&self, layer: usize) -> Result<&AttnTables> {
        let cell = &self.cache.attn[layer];
        if cell.get().is_none() {
            let norm = normalize_site(self.model, self.capture, Site::attn(layer))?;
            let (ks, qs) = attn_score_tables(self.model, self.capture, layer, &norm)?;
            let _ = cell.set(AttnTables { ks, qs });
        }
        Ok(cell.get().expect("initialized above"))
    }

    fn value_table(&self, layer: usize) -> Result<&Array4<f64>> {
        let cell = &self.cache.pv[layer];
        if cell.get().is_none() {
            let norm = normalize_site(self.model, self.capture, Site::attn(layer))?;
            let _ = cell.set(value_tables(self.model, layer, &norm));
        }
        Ok(cell.get().expect("initialized above"))
    }

    fn mlp_tables(&self, layer: usize) -> Result<&MlpTables> {
        let cell = &self.cache.mlp[layer];
        if cell.get().is_none() {
            let _ = cell.set(self.build_mlp_tables(layer)?);
        }
        Ok(cell.get().expect("initialized above"))
    }

    fn build_mlp_tables(&self, layer: usize) -> Result<MlpTables> {
        let cfg = &self.model.config;
        let site = Site::mlp(layer);
        let kn = site.n_writers(cfg);
        let n = self.capture.n_positions();
        let (d, m) = (cfg.d_model, cfg.d_mlp);
        let comps = self.capture.components()?;
        let (w, _) = ln_params(self.model, site);
        let w_up = &self.model.weights.layers[layer].w_up;
        let w_up64 = w_up.mapv(f64::from);
        let mut sum = Array2::zeros((n, m));
        let mut abs = Array2::zeros((n, m));
        let mut norms = Array2::zeros((kn, n));
        let mut normed = Array2::<f32>::zeros((kn, d));
        for p in 0..n {
            let (_, var) = self.capture.site_stats(site, p)?;
            let inv = 1.0 / (var + cfg.ln_epsilon).sqrt();
            let mut total = Array1::<f64>::zeros(d);
            for k in 0..kn {
                let row = comps.slice(s![k, p, ..]);
                let mean = row.iter().map(|&x| f64::from(x)).sum::<f64>() / d as f64;
                for i in 0..d {
                    let v = f64::from(w[i]) * (f64::from(row[i]) - mean) * inv;
                    normed[[k, i]] = v as f32;
                    total[i] += v;
                }
            }
            sum.row_mut(p).assign(&total.dot(&w_up64));
            let s_km = normed.dot(w_up);
            for (k, row) in s_km.outer_iter().enumerate() {
                let mut sq = 0.0f64;
                for (j, &x) in row.iter().enumerate() {
                    let x = f64::from(x);
                    abs[[p, j]] += x.abs();
                    sq += x * x;
                }
                norms[[k, p]] = sq.sqrt();
            }
        }
        Ok(MlpTables { sum, abs, norms })
    }

    /// `c̃_k(pos) · v` for every writer of `site`, from raw components.
    pub(crate) fn normalized_dot(&self, site: Site, pos: usize, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        let cfg = &self.model.config;
        let kn = site.n_writers(cfg);
        let comps = self.capture.components()?;
        let (w, _) = ln_params(self.model, site);
        let (_, var) = self.capture.site_stats(site, pos)?;
        let inv = 1.0 / (var + cfg.ln_epsilon).sqrt();
        let u: Array1<f64> = v.iter().zip(w).map(|(&a, &b)| a * f64::from(b)).collect();
        let usum = u.sum();
        let d = cfg.d_model as f64;
        Ok((0..kn)
            .map(|k| {
                let row = comps.slice(s![k, pos, ..]);
                let (mut dot, mut tot) = (0.0, 0.0);
                for (&x, &ui) in row.iter().zip(&u) {
                    let x = f64::from(x);
                    dot += x * ui;
                    tot += x;
                }
                (dot - tot / d * usum) * inv
            })
            .collect())
    }

    /// Centered bias-free value writes `z_s W_V W_O` of every head of
    /// `layer` for sources `0..=query`, `[head, source, d_model]`.
    pub fn head_values(&self, layer: usize, query: usize) -> Result<Array3<f64>> {
        let cfg = &self.model.config;
        let site = Site::attn(layer);
        let si = site.index(cfg.n_layers);
        let res = self.capture.residuals()?;
        let lw = &self.model.weights.layers[layer];
        let (w, _) = ln_params(self.model, site);
        let mut z = Array2::<f64>::zeros((query + 1, cfg.d_model));
        for s_ in 0..=query {
            let (mean, var) = self.capture.site_stats(site, s_)?;
            let inv = 1.0 / (var + cfg.ln_epsilon).sqrt();
            for i in 0..cfg.d_model {
                z[[s_, i]] = f64::from(w[i]) * (f64::from(res[[si, s_, i]]) - mean) * inv;
            }
        }
        let mut out = Array3::zeros((cfg.n_heads, query + 1, cfg.d_model));
        for h in 0..cfg.n_heads {
            let wv = lw.w_v.index_axis(Axis(0), h).mapv(f64::from);
            let wo = lw.w_o.index_axis(Axis(0), h).mapv(f64::from);
            let u = z.dot(&wv).dot(&wo);
            for (s_, row) in u.outer_iter().enumerate() {
                out.slice_mut(s![h, s_, ..]).assign(&centered(row.to_owned()));
            }
        }
        Ok(out)
    }

    /// Realized bias-free attention output of all heads at `query`.
    pub fn attention_output(&self, layer: usize, query: usize) -> Result<Array1<f64>> {
        let vals = self.head_values(layer, query)?;
        let alpha = &self.capture.attention(layer)?.alpha;
        let mut out = Array1::zeros(self.model.config.d_model);
        for h in 0..self.n_heads() {
            for s_ in 0..=query {
                out.scaled_add(f64::from(alpha[[h, query, s_]]), &vals.slice(s![h, s_, ..]));
            }
        }
        Ok(out)
    }

    fn activations(&self, layer: usize, pos: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let act = self.model.config.activation;
        let pre = self.capture.mlp_pre(layer)?.row(pos);
        let phi: Vec<f64> = pre.iter().map(|&x| f64::from(act.apply(x))).collect();
        let slope = pre
            .iter()
            .zip(&phi)
            .map(|(&x, &y)| {
                if x.abs() < 1e-6 {
                    act.slope_at_zero()
                } else {
                    y / f64::from(x)
                }
            })
            .collect();
        Ok((phi, slope))
    }

    /// Realized bias-free MLP output at `pos`.
    pub fn mlp_output(&self, layer: usize, pos: usize) -> Result<Array1<f64>> {
        let (phi, _) = self.activations(layer, pos)?;
        let w_down = &self.model.weights.layers[layer].w_down;
        let mut out = Array1::zeros(self.model.config.d_model);
        for (j, &a) in phi.iter().enumerate() {
            if a != 0.0 {
                out.scaled_add(a, &w_down.row(j).mapv(f64::from));
            }
        }
        Ok(out)
    }

    /// Source shares of head `(layer, head)` at `query`, indexed by source.
    /// Returns the shares, whether the floor tripped, and whether the credit
    /// was dropped.
    fn value_shares(
        &self,
        layer: usize,
        head: usize,
        query: usize,
        depth0: bool,
        direction: ArrayView1<f64>,
    ) -> Result<(Vec<f64>, bool, bool)> {
        let alpha = &self.capture.attention(layer)?.alpha;
        let r: Vec<f64> = if depth0 {
            let vals = self.head_values(layer, query)?;
            let d = if self.config.attn_aligned() {
                self.attention_output(layer, query)?
            } else {
                direction.to_owned()
            };
            (0..=query)
                .map(|s_| f64::from(alpha[[head, query, s_]]) * vals.slice(s![head, s_, ..]).dot(&d))
                .collect()
        } else {
            (0..=query).map(|s_| f64::from(alpha[[head, query, s_]])).collect()
        };
        Ok(self.normalize(&r))
    }

    fn normalize(&self, r: &[f64]) -> (Vec<f64>, bool, bool) {
        let (sum, abs) = r.iter().fold((0.0, 0.0), |(a, b), &x| (a + x, b + x.abs()));
        let den = safe_denom_from_sums(sum, abs, self.config.beta);
        if den == 0.0 {
            return (vec![0.0; r.len()], false, true);
        }
        (
            r.iter().map(|x| x / den).collect(),
            floor_active(sum, abs, self.config.beta),
            false,
        )
    }

    /// Branch edges from source `source` of head `(layer, head)` at `query`,
    /// as fractions of the source's credit.
    fn branch_edges(
        &self,
        layer: usize,
        head: usize,
        query: usize,
        source: usize,
        v_read: Option<&Array1<f64>>,
        out: &mut NodeEdges,
        group_share: f64,
    ) -> Result<Vec<Edge>> {
        let t = self.attn_tables(layer)?;
        let kn = Site::attn(layer).n_writers(&self.model.config);
        let w = self.weights;
        let mut edges = Vec::new();
        let mut branch = |vals: Vec<f64>, weight: f64, pos: usize, mode: HopMode, out: &mut NodeEdges| {
            let (shares, trip, dropped) = self.normalize(&vals);
            if dropped {
                out.lost += group_share * weight;
                return;
            }
            out.floor_trips += u64::from(trip);
            for (j, sh) in shares.into_iter().enumerate() {
                if sh != 0.0 {
                    edges.push(Edge {
                        comp: j as u32,
                        pos: pos as u32,
                        mode,
                        weight: weight * sh,
                    });
                }
            }
        };
        if w.k > 0.0 {
            let vals = t.ks.slice(s![head, query, source, ..kn]).to_vec();
            branch(vals, w.k, source, HopMode::K, out);
        }
        if w.q > 0.0 {
            let vals = t.qs.slice(s![head, query, source, ..kn]).to_vec();
            branch(vals, w.q, query, HopMode::Q, out);
        }
        if w.v > 0.0 {
            let pv = self.value_table(layer)?;
            let read = v_read.expect("read vector supplied when w_V > 0");
            let vals = (0..kn)
                .map(|j| pv.slice(s![head, j, source, ..]).dot(read))
                .collect();
            branch(vals, w.v, source, HopMode::V, out);
        }
        edges.sort_by_key(|e| (e.comp, e.pos, e.mode));
        Ok(edges)
    }

    fn attention_edges(
        &self,
        layer: usize,
        head: usize,
        query: usize,
        depth0: bool,
        direction: ArrayView1<f64>,
    ) -> Result<NodeEdges> {
        let (shares, trip, dropped) = self.value_shares(layer, head, query, depth0, direction)?;
        if dropped {
            return Ok(NodeEdges::dropped());
        }
        let mut out = NodeEdges::terminal();
        out.floor_trips += u64::from(trip);
        let v_read = if self.weights.v > 0.0 {
            let wo = self.model.weights.layers[layer]
                .w_o
                .index_axis(Axis(0), head)
                .mapv(f64::from);
            Some(wo.dot(&centered(direction.to_owned())))
        } else {
            None
        };
        for (source, &share) in shares.iter().enumerate() {
            if share == 0.0 {
                continue;
            }
            let edges =
                self.branch_edges(layer, head, query, source, v_read.as_ref(), &mut out, share)?;
            out.groups.push(EdgeGroup { share, edges });
        }
        Ok(out)
    }

    fn mlp_edges(&self, layer: usize, pos: usize, depth0: bool, direction: ArrayView1<f64>) -> Result<NodeEdges> {
        let cfg = &self.model.config;
        let site = Site::mlp(layer);
        let kn = site.n_writers(cfg);
        let t = self.mlp_tables(layer)?;
        let mut out = NodeEdges::terminal();
        let to_edges = |weights: &[f64]| -> Vec<Edge> {
            weights
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(k, &w)| Edge {
                    comp: k as u32,
                    pos: pos as u32,
                    mode: HopMode::Mlp,
                    weight: w,
                })
                .collect()
        };
        if self.config.mlp_key_side == MlpKeySide::L2 {
            let norms: Vec<f64> = (0..kn).map(|k| t.norms[[k, pos]]).collect();
            let total: f64 = norms.iter().sum();
            if total == 0.0 {
                return Ok(NodeEdges::dropped());
            }
            let fracs: Vec<f64> = norms.iter().map(|x| x / total).collect();
            out.groups.push(EdgeGroup {
                share: 1.0,
                edges: to_edges(&fracs),
            });
            return Ok(out);
        }
        let lw = &self.model.weights.layers[layer];
        let (phi, slope) = self.activations(layer, pos)?;
        let r: Vec<f64> = if depth0 {
            let d = if self.config.mlp_aligned() {
                self.mlp_output(layer, pos)?
            } else {
                direction.to_owned()
            };
            phi.iter()
                .enumerate()
                .map(|(j, &a)| {
                    if a == 0.0 {
                        return 0.0;
                    }
                    let u = centered(lw.w_down.row(j).mapv(f64::from));
                    a * u.dot(&d)
                })
                .collect()
        } else {
            phi.clone()
        };
        let (a, trip, dropped) = self.normalize(&r);
        if dropped {
            return Ok(NodeEdges::dropped());
        }
        out.floor_trips += u64::from(trip);
        let beta = self.config.beta;
        let mut b = Array1::<f64>::zeros(cfg.d_mlp);
        for (j, &aj) in a.iter().enumerate() {
            if aj == 0.0 {
                continue;
            }
            let (sum, abs) = (t.sum[[pos, j]], t.abs[[pos, j]]);
            let den = safe_denom_from_sums(sum, abs, beta);
            if den == 0.0 {
                out.lost += aj;
                continue;
            }
            out.floor_trips += u64::from(floor_active(sum, abs, beta));
            b[j] = aj / den;
        }
        let w_up = lw.w_up.mapv(f64::from);
        let weights = self.normalized_dot(site, pos, w_up.dot(&b).view())?;
        out.groups.push(EdgeGroup {
            share: 1.0,
            edges: to_edges(weights.as_slice().expect("contiguous")),
        });
        let gated: Array1<f64> = a.iter().zip(&slope).map(|(x, y)| x * y).collect();
        let raw = w_up.dot(&gated);
        let dir: Array1<f64> = raw.iter().zip(&lw.ln2_w).map(|(&x, &w)| x * f64::from(w)).collect();
        out.out_flow = OutFlow::Fixed(unit(dir));
        Ok(out)
    }

    /// All outgoing edges of node `(component, pos)`. `depth0` marks a root.
    pub(crate) fn node_edges(
        &self,
        component: ComponentId,
        pos: usize,
        depth0: bool,
        direction: ArrayView1<f64>,
    ) -> Result<NodeEdges> {
        match component {
            ComponentId::Embedding => Ok(NodeEdges::terminal()),
            ComponentId::Head { layer, head } => self.attention_edges(layer, head, pos, depth0, direction),
            ComponentId::Mlp { layer } => self.mlp_edges(layer, pos, depth0, direction),
        }
    }

    /// Source shares of head `(layer, head)` at `query` as `(source, share)`.
    pub fn attention_v_dispatch(
        &self,
        layer: usize,
        head: usize,
        query: usize,
        depth0: bool,
        direction: ArrayView1<f64>,
    ) -> Result<Vec<(usize, f64)>> {
        ComponentId::Head { layer, head }.validate(&self.model.config)?;
        self.capture.check_pos(query)?;
        let (shares, _, _) = self.value_shares(layer, head, query, depth0, direction)?;
        Ok(shares.into_iter().enumerate().collect())
    }

    /// Branch children of source `source` as fractions of its credit.
    pub fn attention_k_dispatch(
        &self,
        layer: usize,
        head: usize,
        query: usize,
        source: usize,
        direction: ArrayView1<f64>,
    ) -> Result<Vec<Child>> {
        ComponentId::Head { layer, head }.validate(&self.model.config)?;
        self.capture.check_pos(query)?;
        if source > query {
            return Err(UnpackError::OutOfRange(format!(
                "source {source} after query {query}"
            )));
        }
        let v_read = (self.weights.v > 0.0).then(|| {
            let wo = self.model.weights.layers[layer]
                .w_o
                .index_axis(Axis(0), head)
                .mapv(f64::from);
            wo.dot(&centered(direction.to_owned()))
        });
        let mut scratch = NodeEdges::terminal();
        let edges = self.branch_edges(layer, head, query, source, v_read.as_ref(), &mut scratch, 1.0)?;
        Ok(self.children(&edges))
    }

    /// MLP children at `pos` as fractions of the parent's credit.
    pub fn mlp_dispatch(
        &self,
        layer: usize,
        pos: usize,
        depth0: bool,
        direction: ArrayView1<f64>,
    ) -> Result<Vec<Child>> {
        ComponentId::Mlp { layer }.validate(&self.model.config)?;
        self.capture.check_pos(pos)?;
        let e = self.mlp_edges(layer, pos, depth0, direction)?;
        Ok(e.groups.first().map(|g| self.children(&g.edges)).unwrap_or_default())
    }

    fn children(&self, edges: &[Edge]) -> Vec<Child> {
        edges
            .iter()
            .map(|e| Child {
                component: ComponentId::from_index(e.comp as usize, self.n_heads()),
                position: e.pos as usize,
                mode: e.mode,
                share: e.weight,
            })
            .collect()
    }
}
