// SPDX-License-Identifier: MIT OR Apache-2.0

//! Communication-strength panel: how strongly each component drives each
//! downstream attention head (key side) and MLP.
//!
//! Receiver scores are averaged over every `(prompt, query)` pair jointly.
//! Attention scores use queries `>= 1`, since a single source has no spread.

use std::io::Write as _;
use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::{normalize_range, project, rotate_rows, score_attn, score_mlp, to_f64};
use crate::error::{Result, UnpackError};
use crate::model::{CaptureFlags, ComponentId, ForwardCapture, Model, Site};

pub const AVERAGING: &str = "joint mean over (prompt, query); attention queries >= 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Receiver {
    Attn { layer: usize, head: usize },
    Mlp { layer: usize },
}

impl std::fmt::Display for Receiver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Attn { layer, head } => write!(f, "attn:A{layer}.H{head}"),
            Self::Mlp { layer } => write!(f, "mlp:MLP{layer}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorePanel {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_prompts: usize,
    pub averaging: String,
    /// `[component, layer, head]`; zero where the head does not read the component.
    pub attn_score: Array3<f64>,
    /// `[component, layer]`
    pub mlp_score: Array2<f64>,
    /// Sum of attention receiver scores, per component index.
    pub attn_strength: Vec<f64>,
    pub mlp_strength: Vec<f64>,
}

impl ScorePanel {
    pub fn n_components(&self) -> usize {
        self.attn_strength.len()
    }

    pub fn component(&self, index: usize) -> ComponentId {
        ComponentId::from_index(index, self.n_heads)
    }

    /// Every (component, receiver, score) for receivers that read the component.
    pub fn entries(&self, model: &Model) -> Vec<(ComponentId, Receiver, f64)> {
        let cfg = &model.config;
        let mut out = Vec::new();
        for k in 0..self.n_components() {
            let id = self.component(k);
            for l in 0..self.n_layers {
                if Site::attn(l).reads(id, cfg) {
                    for h in 0..self.n_heads {
                        out.push((id, Receiver::Attn { layer: l, head: h }, self.attn_score[[k, l, h]]));
                    }
                }
                if Site::mlp(l).reads(id, cfg) {
                    out.push((id, Receiver::Mlp { layer: l }, self.mlp_score[[k, l]]));
                }
            }
        }
        out
    }

    /// Tab-separated `component, receiver, score` rows.
    pub fn write_table(&self, model: &Model, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| UnpackError::io(path, e))?;
        let mut body = format!("# averaging: {}\n# prompts: {}\ncomponent\treceiver\tscore\n", self.averaging, self.n_prompts);
        for (id, r, v) in self.entries(model) {
            body.push_str(&format!("{id}\t{r}\t{v:.9e}\n"));
        }
        f.write_all(body.as_bytes()).map_err(|e| UnpackError::io(path, e))
    }

    /// Binary dump in the container style: `panel.toml` index plus
    /// `panel.bin` holding little-endian f64 tensors at 64-byte offsets.
    pub fn write_binary(&self, dir: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Entry {
            name: &'static str,
            shape: Vec<usize>,
            dtype: &'static str,
            offset: u64,
        }
        #[derive(Serialize)]
        struct Index {
            format_version: u32,
            kind: &'static str,
            n_prompts: usize,
            averaging: String,
            #[serde(rename = "tensor")]
            tensors: Vec<Entry>,
        }
        std::fs::create_dir_all(dir).map_err(|e| UnpackError::io(dir, e))?;
        let parts: [(&'static str, Vec<usize>, Vec<f64>); 4] = [
            ("attn_score", self.attn_score.shape().to_vec(), self.attn_score.iter().copied().collect()),
            ("mlp_score", self.mlp_score.shape().to_vec(), self.mlp_score.iter().copied().collect()),
            ("attn_strength", vec![self.attn_strength.len()], self.attn_strength.clone()),
            ("mlp_strength", vec![self.mlp_strength.len()], self.mlp_strength.clone()),
        ];
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, data) in parts {
            while blob.len() % 64 != 0 {
                blob.push(0u8);
            }
            tensors.push(Entry {
                name,
                shape,
                dtype: "f64",
                offset: blob.len() as u64,
            });
            for x in data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let index = Index {
            format_version: 1,
            kind: "score_panel",
            n_prompts: self.n_prompts,
            averaging: self.averaging.clone(),
            tensors,
        };
        let text = toml::to_string(&index).map_err(|e| UnpackError::Manifest(e.to_string()))?;
        let p = dir.join("panel.toml");
        std::fs::write(&p, text).map_err(|e| UnpackError::io(&p, e))?;
        let p = dir.join("panel.bin");
        std::fs::write(&p, blob).map_err(|e| UnpackError::io(&p, e))
    }
}

struct Accumulator {
    attn_sum: Array3<f64>,
    attn_count: usize,
    mlp_sum: Array3<f64>,
    mlp_count: usize,
}

impl Accumulator {
    fn new(model: &Model) -> Self {
        let c = &model.config;
        Self {
            attn_sum: Array3::zeros((c.n_components(), c.n_layers, c.n_heads)),
            attn_count: 0,
            mlp_sum: Array3::zeros((c.n_components(), c.n_layers, c.d_mlp)),
            mlp_count: 0,
        }
    }

    fn finish(self, model: &Model, n_prompts: usize) -> ScorePanel {
        let c = &model.config;
        let kn = c.n_components();
        let attn_score = if self.attn_count > 0 {
            self.attn_sum / self.attn_count as f64
        } else {
            self.attn_sum
        };
        let mut mlp_score = Array2::zeros((kn, c.n_layers));
        let denom = self.mlp_count.max(1) as f64;
        for k in 0..kn {
            for l in 0..c.n_layers {
                let mean: Vec<f64> = self.mlp_sum.slice(s![k, l, ..]).iter().map(|x| x / denom).collect();
                mlp_score[[k, l]] = score_mlp(&mean);
            }
        }
        let attn_strength = (0..kn)
            .map(|k| attn_score.index_axis(Axis(0), k).sum())
            .collect();
        let mlp_strength = (0..kn).map(|k| mlp_score.row(k).sum()).collect();
        ScorePanel {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            n_prompts,
            averaging: AVERAGING.into(),
            attn_score,
            mlp_score,
            attn_strength,
            mlp_strength,
        }
    }
}

fn canonical(prompts: &[Vec<u32>]) -> Result<Vec<&Vec<u32>>> {
    if prompts.is_empty() {
        return Err(UnpackError::InvalidArgument("empty prompt set".into()));
    }
    let mut sorted: Vec<&Vec<u32>> = prompts.iter().collect();
    sorted.sort();
    Ok(sorted)
}

/// Dense component indices written by one source layer (`None` = embedding).
fn source_group(model: &Model, layer: Option<usize>) -> std::ops::Range<usize> {
    let h = model.config.n_heads;
    match layer {
        None => 0..1,
        Some(l) => {
            let first = ComponentId::Head { layer: l, head: 0 }.index(h);
            first..first + h + 1
        }
    }
}

/// Adds one source layer's contributions to every downstream receiver.
fn accumulate_source(
    model: &Model,
    cap: &ForwardCapture,
    group: std::ops::Range<usize>,
    acc: &mut Accumulator,
) -> Result<()> {
    let cfg = &model.config;
    let n = cap.n_positions();
    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    for l in 0..cfg.n_layers {
        let attn_site = Site::attn(l);
        let read = group.start..group.end.min(attn_site.n_writers(cfg));
        if !read.is_empty() {
            let norm = normalize_range(model, cap, attn_site, read.clone())?;
            let att = cap.attention(l)?;
            let lw = &model.weights.layers[l];
            for h in 0..cfg.n_heads {
                let mut pk = project(norm.view(), to_f64(lw.w_k.index_axis(Axis(0), h)).view());
                rotate_rows(model, &mut pk);
                let q_full = to_f64(att.q.index_axis(Axis(0), h));
                // [slot, source, query]
                let logits: Vec<Array2<f64>> = pk
                    .outer_iter()
                    .map(|plane| plane.dot(&q_full.t()) * scale)
                    .collect();
                for (slot, k) in read.clone().enumerate() {
                    let mut total = 0.0;
                    for q in 1..n {
                        let col: Vec<f64> = (0..=q).map(|s| logits[slot][[s, q]]).collect();
                        total += score_attn(&col);
                    }
                    acc.attn_sum[[k, l, h]] += total;
                }
            }
        }
        let mlp_site = Site::mlp(l);
        let read = group.start..group.end.min(mlp_site.n_writers(cfg));
        if !read.is_empty() {
            let norm = normalize_range(model, cap, mlp_site, read.clone())?;
            let w_up = to_f64(model.weights.layers[l].w_up.view());
            for (slot, k) in read.enumerate() {
                let summed = norm.index_axis(Axis(0), slot).sum_axis(Axis(0));
                let contrib = summed.dot(&w_up);
                let mut dst = acc.mlp_sum.slice_mut(s![k, l, ..]);
                dst += &contrib;
            }
        }
    }
    Ok(())
}

const PANEL_FLAGS: CaptureFlags = CaptureFlags {
    components: true,
    attention: true,
    preacts: false,
    ln_stats: true,
};

/// Builds the panel one prompt and one source layer at a time. Prompts are
/// processed in sorted token order, so any permutation of the input yields
/// a bit-identical panel.
pub fn stream_score_panel(model: &Model, prompts: &[Vec<u32>]) -> Result<ScorePanel> {
    let sorted = canonical(prompts)?;
    let mut acc = Accumulator::new(model);
    for ids in &sorted {
        let cap = model.forward(ids, PANEL_FLAGS)?;
        let n = cap.n_positions();
        acc.attn_count += n - 1;
        acc.mlp_count += n;
        accumulate_source(model, &cap, source_group(model, None), &mut acc)?;
        for l in 0..model.config.n_layers {
            accumulate_source(model, &cap, source_group(model, Some(l)), &mut acc)?;
        }
    }
    Ok(acc.finish(model, sorted.len()))
}

/// Reference panel from fully materialized per-(head, query) slices.
pub fn naive_score_panel(model: &Model, prompts: &[Vec<u32>]) -> Result<ScorePanel> {
    use super::{attn_contribs, mlp_contribs, ContributionSlice, Side};
    if prompts.is_empty() {
        return Err(UnpackError::InvalidArgument("empty prompt set".into()));
    }
    let cfg = &model.config;
    let mut acc = Accumulator::new(model);
    for ids in prompts {
        let cap = model.forward(ids, CaptureFlags::ALL)?;
        let n = cap.n_positions();
        acc.attn_count += n - 1;
        acc.mlp_count += n;
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                for q in 1..n {
                    let ContributionSlice::AttnKey { contribs, .. } =
                        attn_contribs(model, &cap, l, h, q, Side::K)?
                    else {
                        unreachable!("K side requested")
                    };
                    for (k, row) in contribs.outer_iter().enumerate() {
                        acc.attn_sum[[k, l, h]] += score_attn(&row.to_vec());
                    }
                }
            }
            for q in 0..n {
                let ContributionSlice::MlpKey { contribs, .. } = mlp_contribs(model, &cap, l, q)?
                else {
                    unreachable!("MLP slice requested")
                };
                for (k, row) in contribs.outer_iter().enumerate() {
                    let mut dst = acc.mlp_sum.slice_mut(s![k, l, ..]);
                    dst += &row;
                }
            }
        }
    }
    Ok(acc.finish(model, prompts.len()))
}
