// SPDX-License-Identifier: MIT OR Apache-2.0

//! In-memory parameter tensors.

use ndarray::{Array1, Array2, Array3};

use super::config::{ModelConfig, PositionScheme};

/// Parameters of one transformer block.
///
/// Projection layouts are per head: `w_q[h]` is `d_model x d_head`,
/// `w_o[h]` is `d_head x d_model`.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_w: Array1<f32>,
    pub ln1_b: Array1<f32>,
    pub w_q: Array3<f32>,
    pub b_q: Array2<f32>,
    pub w_k: Array3<f32>,
    pub b_k: Array2<f32>,
    pub w_v: Array3<f32>,
    pub b_v: Array2<f32>,
    pub w_o: Array3<f32>,
    pub b_o: Array1<f32>,
    pub ln2_w: Array1<f32>,
    pub ln2_b: Array1<f32>,
    pub w_up: Array2<f32>,
    pub b_up: Array1<f32>,
    pub w_down: Array2<f32>,
    pub b_down: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct Weights {
    /// `vocab x d_model`
    pub tok_embed: Array2<f32>,
    /// `n_ctx x d_model`, learned positions only.
    pub pos_embed: Option<Array2<f32>>,
    pub layers: Vec<LayerWeights>,
    pub lnf_w: Array1<f32>,
    pub lnf_b: Array1<f32>,
    /// `d_model x vocab`
    pub unembed: Array2<f32>,
    pub unembed_b: Option<Array1<f32>>,
}

/// Name and shape of every tensor a config requires, in container order.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, h, dh, m) = (cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp);
    let mut out = vec![("embed.tok".to_string(), vec![cfg.vocab_size, d])];
    if cfg.position_scheme == PositionScheme::Learned {
        out.push(("embed.pos".into(), vec![cfg.n_ctx, d]));
    }
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        out.extend([
            (p("ln1.w"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.w_q"), vec![h, d, dh]),
            (p("attn.b_q"), vec![h, dh]),
            (p("attn.w_k"), vec![h, d, dh]),
            (p("attn.b_k"), vec![h, dh]),
            (p("attn.w_v"), vec![h, d, dh]),
            (p("attn.b_v"), vec![h, dh]),
            (p("attn.w_o"), vec![h, dh, d]),
            (p("attn.b_o"), vec![d]),
            (p("ln2.w"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.w_up"), vec![d, m]),
            (p("mlp.b_up"), vec![m]),
            (p("mlp.w_down"), vec![m, d]),
            (p("mlp.b_down"), vec![d]),
        ]);
    }
    out.push(("ln_final.w".into(), vec![d]));
    out.push(("ln_final.b".into(), vec![d]));
    out.push(("unembed.w".into(), vec![d, cfg.vocab_size]));
    if cfg.unembed_bias {
        out.push(("unembed.b".into(), vec![cfg.vocab_size]));
    }
    out
}

impl Weights {
    /// Flattened tensors in [`tensor_layout`] order.
    pub fn flat_tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.tok_embed.as_slice().expect("standard layout")];
        if let Some(p) = &self.pos_embed {
            out.push(p.as_slice().expect("standard layout"));
        }
        for l in &self.layers {
            out.extend([
                l.ln1_w.as_slice().expect("standard layout"),
                l.ln1_b.as_slice().expect("standard layout"),
                l.w_q.as_slice().expect("standard layout"),
                l.b_q.as_slice().expect("standard layout"),
                l.w_k.as_slice().expect("standard layout"),
                l.b_k.as_slice().expect("standard layout"),
                l.w_v.as_slice().expect("standard layout"),
                l.b_v.as_slice().expect("standard layout"),
                l.w_o.as_slice().expect("standard layout"),
                l.b_o.as_slice().expect("standard layout"),
                l.ln2_w.as_slice().expect("standard layout"),
                l.ln2_b.as_slice().expect("standard layout"),
                l.w_up.as_slice().expect("standard layout"),
                l.b_up.as_slice().expect("standard layout"),
                l.w_down.as_slice().expect("standard layout"),
                l.b_down.as_slice().expect("standard layout"),
            ]);
        }
        out.push(self.lnf_w.as_slice().expect("standard layout"));
        out.push(self.lnf_b.as_slice().expect("standard layout"));
        out.push(self.unembed.as_slice().expect("standard layout"));
        if let Some(b) = &self.unembed_b {
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    /// Rebuilds weights from flat tensors in [`tensor_layout`] order.
    /// Shapes must already have been validated.
    pub(crate) fn from_flat(cfg: &ModelConfig, mut tensors: Vec<Vec<f32>>) -> Self {
        let layout = tensor_layout(cfg);
        assert_eq!(layout.len(), tensors.len());
        let mut shapes = layout.into_iter().map(|(_, s)| s);
        tensors.reverse();
        let mut next_vec = || tensors.pop().expect("tensor count checked");
        let mut shape = || shapes.next().expect("tensor count checked");
        let a1 = |v: Vec<f32>, _s: Vec<usize>| Array1::from_vec(v);
        let a2 = |v: Vec<f32>, s: Vec<usize>| {
            Array2::from_shape_vec((s[0], s[1]), v).expect("validated shape")
        };
        let a3 = |v: Vec<f32>, s: Vec<usize>| {
            Array3::from_shape_vec((s[0], s[1], s[2]), v).expect("validated shape")
        };
        let tok_embed = a2(next_vec(), shape());
        let pos_embed = (cfg.position_scheme == PositionScheme::Learned).then(|| a2(next_vec(), shape()));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerWeights {
                ln1_w: a1(next_vec(), shape()),
                ln1_b: a1(next_vec(), shape()),
                w_q: a3(next_vec(), shape()),
                b_q: a2(next_vec(), shape()),
                w_k: a3(next_vec(), shape()),
                b_k: a2(next_vec(), shape()),
                w_v: a3(next_vec(), shape()),
                b_v: a2(next_vec(), shape()),
                w_o: a3(next_vec(), shape()),
                b_o: a1(next_vec(), shape()),
                ln2_w: a1(next_vec(), shape()),
                ln2_b: a1(next_vec(), shape()),
                w_up: a2(next_vec(), shape()),
                b_up: a1(next_vec(), shape()),
                w_down: a2(next_vec(), shape()),
                b_down: a1(next_vec(), shape()),
            });
        }
        let lnf_w = a1(next_vec(), shape());
        let lnf_b = a1(next_vec(), shape());
        let unembed = a2(next_vec(), shape());
        let unembed_b = cfg.unembed_bias.then(|| a1(next_vec(), shape()));
        Self {
            tok_embed,
            pos_embed,
            layers,
            lnf_w,
            lnf_b,
            unembed,
            unembed_b,
        }
    }
}
