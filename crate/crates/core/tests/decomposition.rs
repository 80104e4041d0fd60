use ndarray::{s, Array1, Axis};
use unpack::decompose::{
    attn_contribs, mlp_contribs, naive_score_panel, normalize_site, stream_score_panel, ContributionSlice, Side,
};
use unpack::model::toy::ToySpec;
use unpack::model::{BlockLayout, CaptureFlags, ForwardCapture, Model, PositionScheme, Site};

fn toy(n_layers: usize, layout: BlockLayout, rotary: bool, seed: u64) -> Model {
    ToySpec {
        n_layers,
        n_heads: 3,
        block_layout: layout,
        position_scheme: if rotary {
            PositionScheme::Rotary {
                fraction: 0.5,
                base: 10_000.0,
            }
        } else {
            PositionScheme::Learned
        },
        seed,
        ..ToySpec::default()
    }
    .build()
    .unwrap()
}

fn variants() -> Vec<Model> {
    let mut out = Vec::new();
    for (i, layout) in [BlockLayout::Sequential, BlockLayout::Parallel].into_iter().enumerate() {
        for rotary in [false, true] {
            for n_layers in [2, 3] {
                out.push(toy(n_layers, layout, rotary, 11 + i as u64 * 7 + n_layers as u64));
            }
        }
    }
    out
}

const IDS: [u32; 7] = [256, 84, 104, 101, 32, 99, 97];

fn close(a: f64, b: f64, scale: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * scale.max(1e-12)
}

fn ln_minus_bias(model: &Model, cap: &ForwardCapture, site: Site, pos: usize) -> Array1<f64> {
    let si = site.index(model.config.n_layers);
    let x = cap.residuals().unwrap().slice(s![si, pos, ..]).mapv(f64::from);
    let (_, var) = cap.site_stats(site, pos).unwrap();
    let mean = x.mean().unwrap();
    let w = match site {
        Site::Layer { layer, sublayer } => match sublayer {
            unpack::model::Sublayer::Attn => &model.weights.layers[layer].ln1_w,
            unpack::model::Sublayer::Mlp => &model.weights.layers[layer].ln2_w,
        },
        Site::Final => &model.weights.lnf_w,
    };
    let inv = 1.0 / (var + model.config.ln_epsilon).sqrt();
    x.iter().zip(w).map(|(&v, &g)| f64::from(g) * (v - mean) * inv).collect()
}

fn sites(n_layers: usize) -> Vec<Site> {
    let mut v: Vec<Site> = (0..n_layers).flat_map(|l| [Site::attn(l), Site::mlp(l)]).collect();
    v.push(Site::Final);
    v
}

#[test]
pub fn components_sum_to_every_site_residual() {
    for m in variants() {
        let cap = m.forward(&IDS, CaptureFlags::ALL).unwrap();
        for site in sites(m.config.n_layers) {
            let si = site.index(m.config.n_layers);
            let rem = cap.bias_remainder(site).unwrap().mapv(f64::from);
            for p in 0..IDS.len() {
                let mut total = rem.clone();
                for (_, c) in cap.residual_components(site, p).unwrap() {
                    total += &c.mapv(f64::from);
                }
                let x = cap.residuals().unwrap().slice(s![si, p, ..]).mapv(f64::from);
                let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
                for (a, b) in total.iter().zip(&x) {
                    assert!(close(*a, *b, scale, 1e-5), "{site:?} p{p}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
pub fn marginal_normalization_sums_to_layernorm() {
    for m in variants() {
        let cap = m.forward(&IDS, CaptureFlags::ALL).unwrap();
        for site in sites(m.config.n_layers) {
            let norm = normalize_site(&m, &cap, site).unwrap();
            for p in 0..IDS.len() {
                let total = norm.components.slice(s![.., p, ..]).sum_axis(Axis(0)) + norm.bias.row(p);
                let want = ln_minus_bias(&m, &cap, site, p);
                let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
                for (a, b) in total.iter().zip(&want) {
                    assert!(close(*a, *b, scale, 1e-5), "{site:?} p{p}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
pub fn key_and_query_contributions_complete_the_logit() {
    for m in variants() {
        let cap = m.forward(&IDS, CaptureFlags::ALL).unwrap();
        let scale = 1.0 / (m.config.d_head as f64).sqrt();
        for l in 0..m.config.n_layers {
            let att = cap.attention(l).unwrap();
            for h in 0..m.config.n_heads {
                for q in 0..IDS.len() {
                    for side in [Side::K, Side::Q] {
                        let slice = attn_contribs(&m, &cap, l, h, q, side).unwrap();
                        let (ContributionSlice::AttnKey { contribs, bias_term, .. }
                        | ContributionSlice::AttnQuery { contribs, bias_term, .. }) = slice
                        else {
                            panic!("scalar slice expected")
                        };
                        for s in 0..=q {
                            let logit = att.q.slice(s![h, q, ..]).mapv(f64::from).dot(&att.k.slice(s![h, s, ..]).mapv(f64::from))
                                * scale;
                            let got = contribs.column(s).sum() + bias_term[s];
                            let norms = |v: ndarray::ArrayView1<f32>| v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
                            let mag = norms(att.q.slice(s![h, q, ..])) * norms(att.k.slice(s![h, s, ..])) * scale;
                            assert!(close(got, logit, mag, 1e-5), "L{l}H{h} q{q} s{s} {side:?}: {got} vs {logit}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
pub fn value_contributions_complete_the_centered_value_output() {
    for m in variants() {
        let cap = m.forward(&IDS, CaptureFlags::ALL).unwrap();
        let d = m.config.d_model;
        for l in 0..m.config.n_layers {
            let lw = &m.weights.layers[l];
            for h in 0..m.config.n_heads {
                let q = IDS.len() - 1;
                let ContributionSlice::AttnValue { contribs, .. } = attn_contribs(&m, &cap, l, h, q, Side::V).unwrap()
                else {
                    panic!("value slice expected")
                };
                let wv = lw.w_v.index_axis(Axis(0), h).mapv(f64::from);
                let wo = lw.w_o.index_axis(Axis(0), h).mapv(f64::from);
                let norm = normalize_site(&m, &cap, Site::attn(l)).unwrap();
                for s in 0..=q {
                    // bias-free: the normalized bias remainder is set aside
                    let z = ln_minus_bias(&m, &cap, Site::attn(l), s) - norm.bias.row(s);
                    let u = z.dot(&wv).dot(&wo);
                    let want = &u - u.sum() / d as f64;
                    let got = contribs.slice(s![.., s, ..]).sum_axis(Axis(0));
                    let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
                    for (a, b) in got.iter().zip(&want) {
                        assert!(close(*a, *b, scale, 1e-5), "L{l}H{h} s{s}: {a} vs {b}");
                    }
                }
            }
        }
    }
}

#[test]
pub fn mlp_contributions_complete_the_preactivation() {
    for m in variants() {
        let cap = m.forward(&IDS, CaptureFlags::ALL).unwrap();
        for l in 0..m.config.n_layers {
            let pre = cap.mlp_pre(l).unwrap();
            for p in 0..IDS.len() {
                let ContributionSlice::MlpKey { contribs, bias_term, .. } = mlp_contribs(&m, &cap, l, p).unwrap() else {
                    panic!("MLP slice expected")
                };
                let got = contribs.sum_axis(Axis(0)) + &bias_term;
                for (j, (a, b)) in got.iter().zip(pre.row(p)).enumerate() {
                    let mag = contribs.column(j).iter().map(|v| v.abs()).sum::<f64>() + f64::from(b.abs());
                    assert!(close(*a, f64::from(*b), mag, 1e-5), "L{l} p{p} j{j}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
pub fn attention_rows_sum_to_one() {
    for m in variants() {
        let cap = m.forward(&IDS, CaptureFlags::ALL).unwrap();
        for l in 0..m.config.n_layers {
            let a = &cap.attention(l).unwrap().alpha;
            for h in 0..m.config.n_heads {
                for q in 0..IDS.len() {
                    let row: f64 = a.slice(s![h, q, ..]).iter().map(|&x| f64::from(x)).sum();
                    assert!((row - 1.0).abs() < 1e-6, "L{l}H{h} q{q}: {row}");
                }
            }
        }
    }
}

#[test]
pub fn streamed_panel_matches_naive_panel() {
    let prompts: Vec<Vec<u32>> = vec![IDS.to_vec(), vec![256, 10, 20, 30], vec![256, 5, 6, 7, 8, 9]];
    for layout in [BlockLayout::Sequential, BlockLayout::Parallel] {
        let m = toy(2, layout, layout == BlockLayout::Parallel, 21);
        let a = stream_score_panel(&m, &prompts).unwrap();
        let b = naive_score_panel(&m, &prompts).unwrap();
        let pairs = a
            .attn_score
            .iter()
            .zip(&b.attn_score)
            .chain(a.mlp_score.iter().zip(&b.mlp_score))
            .chain(a.attn_strength.iter().zip(&b.attn_strength))
            .chain(a.mlp_strength.iter().zip(&b.mlp_strength));
        for (x, y) in pairs {
            assert!(close(*x, *y, y.abs(), 1e-6), "{layout:?}: {x} vs {y}");
        }
        let mut shuffled = prompts.clone();
        shuffled.reverse();
        assert_eq!(stream_score_panel(&m, &shuffled).unwrap(), a);
    }
}

#[test]
pub fn parallel_mlp_reads_only_the_block_input() {
    let m = toy(2, BlockLayout::Parallel, true, 4);
    let cfg = &m.config;
    assert_eq!(Site::mlp(0).n_writers(cfg), 1);
    assert_eq!(Site::mlp(1).n_writers(cfg), Site::attn(1).n_writers(cfg));
    let seq = toy(2, BlockLayout::Sequential, false, 4);
    assert_eq!(Site::mlp(0).n_writers(&seq.config), 1 + seq.config.n_heads);
}
