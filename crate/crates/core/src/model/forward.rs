// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass that records everything attribution needs.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::component::{ComponentId, Site};
use super::config::{BlockLayout, ModelConfig, PositionScheme};
use super::Model;
use crate::error::{Result, UnpackError};

/// What a forward pass keeps besides the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureFlags {
    /// Per-component residual writes and per-site raw residuals.
    pub components: bool,
    /// Attention weights and projected Q/K/V.
    pub attention: bool,
    /// MLP pre-activations.
    pub preacts: bool,
    /// LayerNorm mean and variance at every site.
    pub ln_stats: bool,
}

impl CaptureFlags {
    pub const ALL: Self = Self {
        components: true,
        attention: true,
        preacts: true,
        ln_stats: true,
    };

    pub const LOGITS_ONLY: Self = Self {
        components: false,
        attention: false,
        preacts: false,
        ln_stats: false,
    };
}

/// Vectors subtracted from the input of individual LayerNorms, keyed by
/// site index. The residual trunk itself is never modified.
#[derive(Debug, Clone, Default)]
pub struct LnOffsets {
    offsets: BTreeMap<usize, Array2<f32>>,
}

impl LnOffsets {
    /// Adds `delta` (`n x d_model`) to the offset subtracted at `site`.
    pub fn subtract_at(&mut self, site: usize, delta: ArrayView2<f32>) {
        self.offsets
            .entry(site)
            .and_modify(|o| *o += &delta)
            .or_insert_with(|| delta.to_owned());
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    fn get(&self, site: usize) -> Option<&Array2<f32>> {
        self.offsets.get(&site)
    }
}

/// Attention activations of one layer.
#[derive(Debug, Clone)]
pub struct AttentionCapture {
    /// Softmax weights, `[head, query, source]`.
    pub alpha: Array3<f32>,
    /// Queries after bias and rotation, `[head, pos, d_head]`.
    pub q: Array3<f32>,
    /// Keys after bias and rotation.
    pub k: Array3<f32>,
    /// Values including the LN-bias and value-bias terms.
    pub v: Array3<f32>,
}

#[derive(Debug, Clone)]
pub struct ForwardCapture {
    pub config: ModelConfig,
    pub token_ids: Vec<u32>,
    pub flags: CaptureFlags,
    /// `[component, pos, d_model]` in [`ComponentId::index`] order.
    pub components: Option<Array3<f32>>,
    /// Input-independent bias written by each sublayer, `[2 * layer + sublayer, d_model]`.
    pub sublayer_bias: Array2<f32>,
    /// Raw residual at each LN site, `[site, pos, d_model]`.
    pub residuals: Option<Array3<f32>>,
    /// `(mean, variance)` of each LN input, `[site, pos, 2]`.
    pub ln_stats: Option<Array3<f64>>,
    pub attention: Option<Vec<AttentionCapture>>,
    /// MLP pre-activations per layer, `[pos, d_mlp]`.
    pub mlp_pre: Option<Vec<Array2<f32>>>,
    /// `[pos, vocab]`
    pub logits: Array2<f32>,
}

/// LayerNorm without the additive bias: `w * (x - mean) / sqrt(var + eps)`.
/// Statistics are accumulated in f64.
pub(crate) fn ln_core(
    x: ArrayView2<f32>,
    w: ArrayView1<f32>,
    eps: f64,
) -> (Array2<f32>, Vec<(f64, f64)>) {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    let mut stats = Vec::with_capacity(n);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[[i, j]] = (f64::from(w[j]) * (f64::from(row[j]) - mean) * inv) as f32;
        }
        stats.push((mean, var));
    }
    (out, stats)
}

fn softmax_causal(scores: &mut Array2<f32>) {
    let n = scores.nrows();
    for q in 0..n {
        let mut row = scores.row_mut(q);
        let max = row
            .iter()
            .take(q + 1)
            .fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0f64;
        for s in 0..=q {
            let e = (row[s] - max).exp();
            row[s] = e;
            total += f64::from(e);
        }
        for s in 0..n {
            row[s] = if s <= q {
                (f64::from(row[s]) / total) as f32
            } else {
                0.0
            };
        }
    }
}

impl Model {
    pub fn forward(&self, token_ids: &[u32], flags: CaptureFlags) -> Result<ForwardCapture> {
        self.forward_with(token_ids, flags, &LnOffsets::default())
    }

    /// Forward pass with per-site LayerNorm input offsets.
    pub fn forward_with(
        &self,
        token_ids: &[u32],
        flags: CaptureFlags,
        offsets: &LnOffsets,
    ) -> Result<ForwardCapture> {
        let cfg = &self.config;
        let w = &self.weights;
        let n = token_ids.len();
        if n == 0 {
            return Err(UnpackError::EmptyInput);
        }
        if cfg.position_scheme == PositionScheme::Learned && n > cfg.n_ctx {
            return Err(UnpackError::SequenceTooLong {
                len: n,
                max: cfg.n_ctx,
            });
        }
        if let Some(&id) = token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(UnpackError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        for (&site, o) in &offsets.offsets {
            if site >= Site::n_sites(cfg.n_layers) || o.dim() != (n, cfg.d_model) {
                return Err(UnpackError::InvalidArgument(format!(
                    "LN offset for site {site} has shape {:?}",
                    o.dim()
                )));
            }
        }

        let (d, h_count, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
        let n_sites = Site::n_sites(cfg.n_layers);
        let mut x = Array2::<f32>::zeros((n, d));
        for (i, &id) in token_ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&w.tok_embed.row(id as usize));
            if let Some(pos) = &w.pos_embed {
                row += &pos.row(i);
            }
        }

        let mut components = flags
            .components
            .then(|| Array3::<f32>::zeros((cfg.n_components(), n, d)));
        let mut residuals = flags
            .components
            .then(|| Array3::<f32>::zeros((n_sites, n, d)));
        let mut ln_stats = flags.ln_stats.then(|| Array3::<f64>::zeros((n_sites, n, 2)));
        let mut attention = flags.attention.then(|| Vec::with_capacity(cfg.n_layers));
        let mut mlp_pre = flags.preacts.then(|| Vec::with_capacity(cfg.n_layers));
        let mut sublayer_bias = Array2::<f32>::zeros((2 * cfg.n_layers, d));
        if let Some(c) = components.as_mut() {
            c.index_axis_mut(Axis(0), 0).assign(&x);
        }

        // LN of the (possibly offset) residual at a site; returns (z, z + b).
        let mut norm_site = |site: usize,
                             resid: &Array2<f32>,
                             lw: &Array1<f32>,
                             lb: &Array1<f32>|
         -> (Array2<f32>, Array2<f32>) {
            if let Some(r) = residuals.as_mut() {
                r.index_axis_mut(Axis(0), site).assign(resid);
            }
            let input = match offsets.get(site) {
                Some(o) => resid - o,
                None => resid.clone(),
            };
            let (z, stats) = ln_core(input.view(), lw.view(), cfg.ln_epsilon);
            if let Some(st) = ln_stats.as_mut() {
                for (p, (m, v)) in stats.into_iter().enumerate() {
                    st[[site, p, 0]] = m;
                    st[[site, p, 1]] = v;
                }
            }
            let full = &z + lb;
            (z, full)
        };

        let scale = 1.0 / (dh as f32).sqrt();
        for (l, lw) in w.layers.iter().enumerate() {
            let attn_site = Site::attn(l).index(cfg.n_layers);
            let (z1, h1) = norm_site(attn_site, &x, &lw.ln1_w, &lw.ln1_b);

            let mut attn_sum = Array2::<f32>::zeros((n, d));
            let mut attn_bias = lw.b_o.clone();
            let mut cap = flags.attention.then(|| AttentionCapture {
                alpha: Array3::zeros((h_count, n, n)),
                q: Array3::zeros((h_count, n, dh)),
                k: Array3::zeros((h_count, n, dh)),
                v: Array3::zeros((h_count, n, dh)),
            });
            for h in 0..h_count {
                let wq = lw.w_q.index_axis(Axis(0), h);
                let wk = lw.w_k.index_axis(Axis(0), h);
                let wv = lw.w_v.index_axis(Axis(0), h);
                let wo = lw.w_o.index_axis(Axis(0), h);
                let mut q = h1.dot(&wq) + &lw.b_q.row(h);
                let mut k = h1.dot(&wk) + &lw.b_k.row(h);
                let v_free = z1.dot(&wv);
                if let Some(rot) = &self.rotary {
                    for p in 0..n {
                        rot.apply(q.row_mut(p).as_slice_mut().expect("contiguous"), p);
                        rot.apply(k.row_mut(p).as_slice_mut().expect("contiguous"), p);
                    }
                }
                let mut scores = q.dot(&k.t()) * scale;
                softmax_causal(&mut scores);
                let head_out = scores.dot(&v_free).dot(&wo);
                let v_const = lw.ln1_b.dot(&wv) + &lw.b_v.row(h);
                attn_bias += &v_const.dot(&wo);
                attn_sum += &head_out;
                if let Some(c) = components.as_mut() {
                    let idx = ComponentId::Head { layer: l, head: h }.index(h_count);
                    c.index_axis_mut(Axis(0), idx).assign(&head_out);
                }
                if let Some(cap) = cap.as_mut() {
                    cap.alpha.index_axis_mut(Axis(0), h).assign(&scores);
                    cap.q.index_axis_mut(Axis(0), h).assign(&q);
                    cap.k.index_axis_mut(Axis(0), h).assign(&k);
                    cap.v.index_axis_mut(Axis(0), h).assign(&(&v_free + &v_const));
                }
            }
            if let (Some(a), Some(cap)) = (attention.as_mut(), cap) {
                a.push(cap);
            }
            let attn_out = attn_sum + &attn_bias;
            sublayer_bias.row_mut(2 * l).assign(&attn_bias);

            let mlp_site = Site::mlp(l).index(cfg.n_layers);
            let mlp_in = match cfg.block_layout {
                BlockLayout::Sequential => &x + &attn_out,
                BlockLayout::Parallel => x.clone(),
            };
            let (_, h2) = norm_site(mlp_site, &mlp_in, &lw.ln2_w, &lw.ln2_b);
            let pre = h2.dot(&lw.w_up) + &lw.b_up;
            let post = pre.mapv(|v| cfg.activation.apply(v));
            let mlp_comp = post.dot(&lw.w_down);
            if let Some(c) = components.as_mut() {
                let idx = ComponentId::Mlp { layer: l }.index(h_count);
                c.index_axis_mut(Axis(0), idx).assign(&mlp_comp);
            }
            if let Some(m) = mlp_pre.as_mut() {
                m.push(pre);
            }
            sublayer_bias.row_mut(2 * l + 1).assign(&lw.b_down);
            let mlp_out = mlp_comp + &lw.b_down;
            x = match cfg.block_layout {
                BlockLayout::Sequential => mlp_in + &mlp_out,
                BlockLayout::Parallel => x + &attn_out + &mlp_out,
            };
        }

        let final_site = Site::Final.index(cfg.n_layers);
        let (_, hf) = norm_site(final_site, &x, &w.lnf_w, &w.lnf_b);
        let mut logits = hf.dot(&w.unembed);
        if let Some(b) = &w.unembed_b {
            logits += b;
        }

        Ok(ForwardCapture {
            config: cfg.clone(),
            token_ids: token_ids.to_vec(),
            flags,
            components,
            sublayer_bias,
            residuals,
            ln_stats,
            attention,
            mlp_pre,
            logits,
        })
    }
}

impl ForwardCapture {
    pub fn n_positions(&self) -> usize {
        self.token_ids.len()
    }

    pub fn components(&self) -> Result<&Array3<f32>> {
        self.components
            .as_ref()
            .ok_or(UnpackError::MissingCapture("components"))
    }

    pub fn residuals(&self) -> Result<&Array3<f32>> {
        self.residuals
            .as_ref()
            .ok_or(UnpackError::MissingCapture("components"))
    }

    pub fn ln_stats(&self) -> Result<&Array3<f64>> {
        self.ln_stats
            .as_ref()
            .ok_or(UnpackError::MissingCapture("ln_stats"))
    }

    pub fn attention(&self, layer: usize) -> Result<&AttentionCapture> {
        self.attention
            .as_ref()
            .ok_or(UnpackError::MissingCapture("attention"))?
            .get(layer)
            .ok_or_else(|| UnpackError::OutOfRange(format!("layer {layer}")))
    }

    pub fn mlp_pre(&self, layer: usize) -> Result<&Array2<f32>> {
        self.mlp_pre
            .as_ref()
            .ok_or(UnpackError::MissingCapture("preacts"))?
            .get(layer)
            .ok_or_else(|| UnpackError::OutOfRange(format!("layer {layer}")))
    }

    /// `(mean, variance)` of the LN input at a site and position.
    pub fn site_stats(&self, site: Site, pos: usize) -> Result<(f64, f64)> {
        let st = self.ln_stats()?;
        let i = site.index(self.config.n_layers);
        Ok((st[[i, pos, 0]], st[[i, pos, 1]]))
    }

    /// A component's raw residual write at one position.
    pub fn component(&self, id: ComponentId, pos: usize) -> Result<ArrayView1<'_, f32>> {
        id.validate(&self.config)?;
        self.check_pos(pos)?;
        Ok(self
            .components()?
            .slice(s![id.index(self.config.n_heads), pos, ..]))
    }

    /// Sum of the sublayer biases written before a site.
    pub fn bias_remainder(&self, site: Site) -> Result<Array1<f32>> {
        site.validate(&self.config)?;
        let n_writers = site.n_writers(&self.config);
        let mut out = Array1::zeros(self.config.d_model);
        for l in 0..self.config.n_layers {
            let head0 = ComponentId::Head { layer: l, head: 0 }.index(self.config.n_heads);
            let mlp = ComponentId::Mlp { layer: l }.index(self.config.n_heads);
            if head0 < n_writers {
                out += &self.sublayer_bias.row(2 * l);
            }
            if mlp < n_writers {
                out += &self.sublayer_bias.row(2 * l + 1);
            }
        }
        Ok(out)
    }

    /// Writers into `site` at `pos`, in dataflow order. Their sum plus
    /// [`Self::bias_remainder`] is the raw residual.
    pub fn residual_components(
        &self,
        site: Site,
        pos: usize,
    ) -> Result<Vec<(ComponentId, Array1<f32>)>> {
        site.validate(&self.config)?;
        self.check_pos(pos)?;
        let comps = self.components()?;
        Ok((0..site.n_writers(&self.config))
            .map(|i| {
                (
                    ComponentId::from_index(i, self.config.n_heads),
                    comps.slice(s![i, pos, ..]).to_owned(),
                )
            })
            .collect())
    }

    pub fn check_pos(&self, pos: usize) -> Result<()> {
        if pos < self.n_positions() {
            Ok(())
        } else {
            Err(UnpackError::OutOfRange(format!(
                "position {pos} in a sequence of {}",
                self.n_positions()
            )))
        }
    }

    /// Softmax probabilities of the next token at `pos`.
    pub fn probs(&self, pos: usize) -> Vec<f64> {
        let row = self.logits.row(pos);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let e: Vec<f64> = row.iter().map(|&v| f64::from(v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy::{zero_model, ToySpec};

    fn rel_err(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| f64::from(x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|y| f64::from(*y).powi(2)).sum::<f64>().sqrt();
        num / den.max(1e-12)
    }

    #[test]
    fn zero_model_gives_uniform_logits() {
        let model = zero_model(ToySpec::default().config()).unwrap();
        let cap = model.forward(&[1, 2, 3], CaptureFlags::ALL).unwrap();
        assert!(cap.logits.iter().all(|&v| v == 0.0));
        let p = cap.probs(2);
        assert!((p[0] - 1.0 / 300.0).abs() < 1e-12);
    }

    #[test]
    fn components_sum_to_residual_in_both_layouts() {
        for layout in [BlockLayout::Sequential, BlockLayout::Parallel] {
            let spec = ToySpec {
                block_layout: layout,
                n_layers: 3,
                ..ToySpec::default()
            };
            let model = spec.build().unwrap();
            let cap = model.forward(&[256, 5, 70, 71, 9], CaptureFlags::ALL).unwrap();
            let resid = cap.residuals().unwrap();
            for site_idx in 0..Site::n_sites(3) {
                let site = if site_idx == 6 {
                    Site::Final
                } else if site_idx % 2 == 0 {
                    Site::attn(site_idx / 2)
                } else {
                    Site::mlp(site_idx / 2)
                };
                assert_eq!(site.index(3), site_idx);
                let bias = cap.bias_remainder(site).unwrap();
                for p in 0..5 {
                    let mut sum = bias.clone();
                    for (_, v) in cap.residual_components(site, p).unwrap() {
                        sum += &v;
                    }
                    let e = rel_err(sum.view(), resid.slice(s![site_idx, p, ..]));
                    assert!(e < 1e-5, "{layout:?} site {site_idx} pos {p}: {e}");
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let spec = ToySpec {
            position_scheme: PositionScheme::Rotary {
                fraction: 0.5,
                base: 10_000.0,
            },
            ..ToySpec::default()
        };
        let model = spec.build().unwrap();
        let cap = model.forward(&[256, 1, 2, 3, 4, 5], CaptureFlags::ALL).unwrap();
        for l in 0..2 {
            let a = &cap.attention(l).unwrap().alpha;
            for h in 0..2 {
                for q in 0..6 {
                    let row = a.slice(s![h, q, ..]);
                    let total: f64 = row.iter().map(|&v| f64::from(v)).sum();
                    assert!((total - 1.0).abs() < 1e-6);
                    assert!(row.iter().skip(q + 1).all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let model = ToySpec::default().build().unwrap();
        assert!(matches!(
            model.forward(&[], CaptureFlags::ALL),
            Err(UnpackError::EmptyInput)
        ));
        assert!(matches!(
            model.forward(&[300], CaptureFlags::ALL),
            Err(UnpackError::TokenOutOfRange { .. })
        ));
        let long = vec![1u32; 33];
        assert!(matches!(
            model.forward(&long, CaptureFlags::ALL),
            Err(UnpackError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn repeated_forwards_are_bit_identical() {
        let model = ToySpec::default().build().unwrap();
        let a = model.forward(&[256, 3, 4], CaptureFlags::ALL).unwrap();
        let b = model.forward(&[256, 3, 4], CaptureFlags::ALL).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.components, b.components);
    }
}
