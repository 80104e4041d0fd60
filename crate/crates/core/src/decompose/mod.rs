// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-component contributions to each sublayer's selection score.
//!
//! Every LN input is a sum of component writes plus a bias remainder. After
//! marginal normalization the normalized pieces add up to `LN(X) - b_ln`,
//! so the attention logit (bilinear in the normalized input) and the MLP
//! pre-activation (linear in it) split exactly across components once the
//! input-independent bias terms are set aside.

pub mod panel;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnpackError};
use crate::model::{ComponentId, ForwardCapture, Model, Site, Sublayer};

pub use panel::{naive_score_panel, stream_score_panel, Receiver, ScorePanel};

/// Which projection of an attention head a contribution enters through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    K,
    Q,
    V,
}

pub(crate) fn ln_params(model: &Model, site: Site) -> (ArrayView1<'_, f32>, ArrayView1<'_, f32>) {
    let w = &model.weights;
    match site {
        Site::Layer {
            layer,
            sublayer: Sublayer::Attn,
        } => (w.layers[layer].ln1_w.view(), w.layers[layer].ln1_b.view()),
        Site::Layer {
            layer,
            sublayer: Sublayer::Mlp,
        } => (w.layers[layer].ln2_w.view(), w.layers[layer].ln2_b.view()),
        Site::Final => (w.lnf_w.view(), w.lnf_b.view()),
    }
}

pub(crate) fn to_f64<D: ndarray::Dimension>(
    a: ndarray::ArrayView<'_, f32, D>,
) -> ndarray::Array<f64, D> {
    a.mapv(f64::from)
}

/// `ln_weight * (v - mean(v)) / sqrt(variance + eps)`.
pub fn marginal_normalize(
    v: ArrayView1<f32>,
    variance: f64,
    ln_weight: ArrayView1<f32>,
    eps: f64,
) -> Array1<f64> {
    let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len().max(1) as f64;
    let inv = 1.0 / (variance + eps).sqrt();
    v.iter()
        .zip(ln_weight)
        .map(|(&x, &w)| f64::from(w) * (f64::from(x) - mean) * inv)
        .collect()
}

/// Normalized writers of one LN site at every position.
#[derive(Debug, Clone)]
pub struct NormalizedSite {
    pub site: Site,
    /// `[component, pos, d_model]`, components in dataflow order.
    pub components: Array3<f64>,
    /// Normalized bias remainder, `[pos, d_model]`.
    pub bias: Array2<f64>,
}

/// Normalizes components `range` (dense indices) at `site`.
pub fn normalize_range(
    model: &Model,
    capture: &ForwardCapture,
    site: Site,
    range: std::ops::Range<usize>,
) -> Result<Array3<f64>> {
    let comps = capture.components()?;
    let stats = capture.ln_stats()?;
    let si = site.index(model.config.n_layers);
    let (w, _) = ln_params(model, site);
    let n = capture.n_positions();
    let d = model.config.d_model;
    let mut out = Array3::zeros((range.len(), n, d));
    for (slot, k) in range.enumerate() {
        for p in 0..n {
            let v = marginal_normalize(
                comps.slice(s![k, p, ..]),
                stats[[si, p, 1]],
                w,
                model.config.ln_epsilon,
            );
            out.slice_mut(s![slot, p, ..]).assign(&v);
        }
    }
    Ok(out)
}

pub fn normalize_site(model: &Model, capture: &ForwardCapture, site: Site) -> Result<NormalizedSite> {
    site.validate(&model.config)?;
    let components = normalize_range(model, capture, site, 0..site.n_writers(&model.config))?;
    let stats = capture.ln_stats()?;
    let si = site.index(model.config.n_layers);
    let (w, _) = ln_params(model, site);
    let rem = capture.bias_remainder(site)?;
    let n = capture.n_positions();
    let mut bias = Array2::zeros((n, model.config.d_model));
    for p in 0..n {
        bias.row_mut(p).assign(&marginal_normalize(
            rem.view(),
            stats[[si, p, 1]],
            w,
            model.config.ln_epsilon,
        ));
    }
    Ok(NormalizedSite {
        site,
        components,
        bias,
    })
}

/// `[K, n, d] x [d, e] -> [K, n, e]` in f64.
pub(crate) fn project(x: ArrayView3<f64>, w: ArrayView2<f64>) -> Array3<f64> {
    let (k, n, d) = x.dim();
    let flat = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((k * n, d))
        .expect("contiguous");
    flat.dot(&w)
        .into_shape_with_order((k, n, w.ncols()))
        .expect("size preserved")
}

pub(crate) fn rotate_rows(model: &Model, x: &mut Array3<f64>) {
    if let Some(rot) = model.rotary() {
        for mut plane in x.outer_iter_mut() {
            for (p, mut row) in plane.outer_iter_mut().enumerate() {
                let mut buf = row.to_vec();
                rot.apply_f64(&mut buf, p);
                row.assign(&ArrayView1::from(&buf));
            }
        }
    }
}

pub(crate) fn rotate_vec(model: &Model, x: &mut Array1<f64>, pos: usize) {
    if let Some(rot) = model.rotary() {
        rot.apply_f64(x.as_slice_mut().expect("contiguous"), pos);
    }
}

/// Key-side and query-side logit contributions of every writer of layer
/// `layer`'s attention input, `[head, query, source, component]`. Entries
/// with `source > query` are zero.
pub fn attn_score_tables(
    model: &Model,
    capture: &ForwardCapture,
    layer: usize,
    norm: &NormalizedSite,
) -> Result<(Array4<f64>, Array4<f64>)> {
    let cfg = &model.config;
    let att = capture.attention(layer)?;
    let lw = &model.weights.layers[layer];
    let (kn, n, _) = norm.components.dim();
    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    let mut ks = Array4::zeros((cfg.n_heads, n, n, kn));
    let mut qs = Array4::zeros((cfg.n_heads, n, n, kn));
    for h in 0..cfg.n_heads {
        let q_full = to_f64(att.q.index_axis(Axis(0), h));
        let k_full = to_f64(att.k.index_axis(Axis(0), h));
        let mut pk = project(norm.components.view(), to_f64(lw.w_k.index_axis(Axis(0), h)).view());
        let mut pq = project(norm.components.view(), to_f64(lw.w_q.index_axis(Axis(0), h)).view());
        rotate_rows(model, &mut pk);
        rotate_rows(model, &mut pq);
        for q in 0..n {
            for s in 0..=q {
                for c in 0..kn {
                    ks[[h, q, s, c]] = pk.slice(s![c, s, ..]).dot(&q_full.row(q)) * scale;
                    qs[[h, q, s, c]] = pq.slice(s![c, q, ..]).dot(&k_full.row(s)) * scale;
                }
            }
        }
    }
    Ok((ks, qs))
}

/// Value-projected normalized writers of layer `layer`, `[head, component, pos, d_head]`
/// (before the output projection and without biases).
pub fn value_tables(model: &Model, layer: usize, norm: &NormalizedSite) -> Array4<f64> {
    let cfg = &model.config;
    let lw = &model.weights.layers[layer];
    let (kn, n, _) = norm.components.dim();
    let mut out = Array4::zeros((cfg.n_heads, kn, n, cfg.d_head));
    for h in 0..cfg.n_heads {
        let pv = project(norm.components.view(), to_f64(lw.w_v.index_axis(Axis(0), h)).view());
        out.index_axis_mut(Axis(0), h).assign(&pv);
    }
    out
}

/// Contributions of the writers of one sublayer input to its selection score.
#[derive(Debug, Clone)]
pub enum ContributionSlice {
    /// `contribs[k, s]` for `s <= query`; `Σ_k contribs[k, s] + bias_term[s]`
    /// is the realized attention logit.
    AttnKey {
        layer: usize,
        head: usize,
        query: usize,
        components: Vec<ComponentId>,
        contribs: Array2<f64>,
        bias_term: Array1<f64>,
    },
    /// Query-side split of the same logits.
    AttnQuery {
        layer: usize,
        head: usize,
        query: usize,
        components: Vec<ComponentId>,
        contribs: Array2<f64>,
        bias_term: Array1<f64>,
    },
    /// `contribs[k, s, :]`: centered `c̃_ks W_V W_O`, summing over `k` to the
    /// centered bias-free value output at `s`.
    AttnValue {
        layer: usize,
        head: usize,
        query: usize,
        components: Vec<ComponentId>,
        contribs: Array3<f64>,
    },
    /// `contribs[k, j]`; `Σ_k contribs[k, j] + bias_term[j]` is `pre_j`.
    MlpKey {
        layer: usize,
        position: usize,
        components: Vec<ComponentId>,
        contribs: Array2<f64>,
        bias_term: Array1<f64>,
    },
}

impl ContributionSlice {
    /// Scalar attention contributions for one source. Errors on a source
    /// after the query.
    pub fn at_source(&self, source: usize) -> Result<ArrayView1<'_, f64>> {
        match self {
            Self::AttnKey {
                query, contribs, ..
            }
            | Self::AttnQuery {
                query, contribs, ..
            } => {
                if source > *query {
                    return Err(UnpackError::OutOfRange(format!(
                        "source {source} after query {query}"
                    )));
                }
                Ok(contribs.column(source))
            }
            _ => Err(UnpackError::InvalidArgument(
                "per-source scalars exist only for K and Q slices".into(),
            )),
        }
    }
}

fn writer_ids(model: &Model, site: Site) -> Vec<ComponentId> {
    (0..site.n_writers(&model.config))
        .map(|i| ComponentId::from_index(i, model.config.n_heads))
        .collect()
}

/// Per-component contributions to head `(layer, head)` at `query`.
pub fn attn_contribs(
    model: &Model,
    capture: &ForwardCapture,
    layer: usize,
    head: usize,
    query: usize,
    side: Side,
) -> Result<ContributionSlice> {
    let cfg = &model.config;
    ComponentId::Head { layer, head }.validate(cfg)?;
    capture.check_pos(query)?;
    let site = Site::attn(layer);
    let norm = normalize_site(model, capture, site)?;
    let att = capture.attention(layer)?;
    let lw = &model.weights.layers[layer];
    let (kn, _, _) = norm.components.dim();
    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    let components = writer_ids(model, site);
    let ln_b = to_f64(lw.ln1_b.view());
    let pick = |w: &ndarray::Array3<f32>| to_f64(w.index_axis(Axis(0), head));
    match side {
        Side::K | Side::Q => {
            let (w_own, b_own, other) = match side {
                Side::K => (pick(&lw.w_k), lw.b_k.row(head), &att.q),
                _ => (pick(&lw.w_q), lw.b_q.row(head), &att.k),
            };
            let b_own = to_f64(b_own);
            let mut contribs = Array2::zeros((kn, query + 1));
            let mut bias_term = Array1::zeros(query + 1);
            for s in 0..=query {
                // the projected side sits at `s` for K and at `query` for Q
                let (own_pos, other_pos) = if side == Side::K { (s, query) } else { (query, s) };
                let fixed = to_f64(other.slice(s![head, other_pos, ..]));
                for k in 0..kn {
                    let mut p = norm.components.slice(s![k, own_pos, ..]).dot(&w_own);
                    rotate_vec(model, &mut p, own_pos);
                    contribs[[k, s]] = p.dot(&fixed) * scale;
                }
                let mut pb = (&norm.bias.row(own_pos) + &ln_b).dot(&w_own) + &b_own;
                rotate_vec(model, &mut pb, own_pos);
                bias_term[s] = pb.dot(&fixed) * scale;
            }
            Ok(if side == Side::K {
                ContributionSlice::AttnKey {
                    layer,
                    head,
                    query,
                    components,
                    contribs,
                    bias_term,
                }
            } else {
                ContributionSlice::AttnQuery {
                    layer,
                    head,
                    query,
                    components,
                    contribs,
                    bias_term,
                }
            })
        }
        Side::V => {
            let wv = pick(&lw.w_v);
            let wo = to_f64(lw.w_o.index_axis(Axis(0), head));
            let d = cfg.d_model;
            let mut contribs = Array3::zeros((kn, query + 1, d));
            for s in 0..=query {
                for k in 0..kn {
                    let u = norm.components.slice(s![k, s, ..]).dot(&wv).dot(&wo);
                    let mean = u.sum() / d as f64;
                    contribs.slice_mut(s![k, s, ..]).assign(&u.mapv(|x| x - mean));
                }
            }
            Ok(ContributionSlice::AttnValue {
                layer,
                head,
                query,
                components,
                contribs,
            })
        }
    }
}

/// Per-component contributions to every neuron's pre-activation at `position`.
pub fn mlp_contribs(
    model: &Model,
    capture: &ForwardCapture,
    layer: usize,
    position: usize,
) -> Result<ContributionSlice> {
    ComponentId::Mlp { layer }.validate(&model.config)?;
    capture.check_pos(position)?;
    let site = Site::mlp(layer);
    let norm = normalize_site(model, capture, site)?;
    let lw = &model.weights.layers[layer];
    let w_up = to_f64(lw.w_up.view());
    let contribs = norm.components.slice(s![.., position, ..]).dot(&w_up);
    let bias_in = &norm.bias.row(position) + &to_f64(lw.ln2_b.view());
    let bias_term = bias_in.dot(&w_up) + &to_f64(lw.b_up.view());
    Ok(ContributionSlice::MlpKey {
        layer,
        position,
        components: writer_ids(model, site),
        contribs,
        bias_term,
    })
}

/// Population standard deviation of a component's logit contributions
/// across sources. A single source gives 0.
pub fn score_attn(contribs: &[f64]) -> f64 {
    if contribs.len() < 2 {
        return 0.0;
    }
    let n = contribs.len() as f64;
    let mean = contribs.iter().sum::<f64>() / n;
    (contribs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Euclidean norm of a component's contributions across neurons.
pub fn score_mlp(contribs: &[f64]) -> f64 {
    contribs.iter().map(|x| x * x).sum::<f64>().sqrt()
}
