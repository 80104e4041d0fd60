// SPDX-License-Identifier: MIT OR Apache-2.0

//! Communication-specific knockouts: a component's raw write is removed
//! from the input of one kind of downstream LayerNorm, and the change in
//! perplexity is compared with its panel strength.

pub mod spearman;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use spearman::{average_ranks, spearman};

use crate::decompose::ScorePanel;
use crate::error::{Result, UnpackError};
use crate::model::{CaptureFlags, ComponentId, ForwardCapture, LnOffsets, Model, ModelConfig, Site};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    CutAttention,
    CutMlp,
}

impl Channel {
    pub const BOTH: [Self; 2] = [Self::CutAttention, Self::CutMlp];

    fn site(self, layer: usize) -> Site {
        match self {
            Self::CutAttention => Site::attn(layer),
            Self::CutMlp => Site::mlp(layer),
        }
    }

    /// Sites of this channel that read `component`.
    pub fn receivers(self, component: ComponentId, cfg: &ModelConfig) -> Vec<Site> {
        (0..cfg.n_layers)
            .map(|l| self.site(l))
            .filter(|s| s.reads(component, cfg))
            .collect()
    }
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::CutAttention => "cut_attention",
            Self::CutMlp => "cut_mlp",
        })
    }
}

impl std::str::FromStr for Channel {
    type Err = UnpackError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cut_attention" | "attn" => Ok(Self::CutAttention),
            "cut_mlp" | "mlp" => Ok(Self::CutMlp),
            _ => Err(UnpackError::InvalidArgument(format!(
                "channel `{s}`; expected cut_attention or cut_mlp"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AblationSpec {
    pub component: ComponentId,
    pub channel: Channel,
}

impl AblationSpec {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.component.validate(cfg)?;
        if self.channel.receivers(self.component, cfg).is_empty() {
            return Err(UnpackError::InvalidArgument(format!(
                "{} has no downstream {} receiver",
                self.component, self.channel
            )));
        }
        Ok(())
    }

    /// Offsets that remove the component's clean write from every receiver.
    pub fn offsets(&self, model: &Model, clean: &ForwardCapture) -> Result<LnOffsets> {
        self.validate(&model.config)?;
        let comps = clean.components()?;
        let ck = comps.slice(s![self.component.index(model.config.n_heads), .., ..]);
        let mut off = LnOffsets::default();
        for site in self.channel.receivers(self.component, &model.config) {
            off.subtract_at(site.index(model.config.n_layers), ck);
        }
        Ok(off)
    }
}

/// Logits with `spec` applied, given the clean capture of the same tokens.
pub fn ablate_forward(model: &Model, clean: &ForwardCapture, spec: &AblationSpec) -> Result<Array2<f32>> {
    let off = spec.offsets(model, clean)?;
    Ok(model.forward_with(&clean.token_ids, CaptureFlags::LOGITS_ONLY, &off)?.logits)
}

/// Summed next-token negative log-likelihood and prediction count.
pub fn nll(logits: &Array2<f32>, token_ids: &[u32]) -> (f64, usize) {
    let mut total = 0.0;
    for (p, &next) in token_ids.iter().enumerate().skip(1) {
        let row = logits.row(p - 1);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let lse = f64::from(max) + row.iter().map(|&v| f64::from(v - max).exp()).sum::<f64>().ln();
        total += lse - f64::from(row[next as usize]);
    }
    (total, token_ids.len().saturating_sub(1))
}

fn ppl(sum: f64, count: usize) -> f64 {
    (sum / count as f64).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutResult {
    pub spec: AblationSpec,
    /// Panel strength on the cut channel, when a panel was supplied.
    pub strength: Option<f64>,
    pub baseline_ppl: f64,
    pub ablated_ppl: f64,
    pub delta_ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutReport {
    pub baseline_ppl: f64,
    pub n_sentences: usize,
    pub n_tokens: usize,
    pub results: Vec<KnockoutResult>,
}

fn strength(panel: &ScorePanel, spec: &AblationSpec) -> f64 {
    let k = spec.component.index(panel.n_heads);
    match spec.channel {
        Channel::CutAttention => panel.attn_strength[k],
        Channel::CutMlp => panel.mlp_strength[k],
    }
}

/// Perplexity change of every spec over `corpus`. The baseline is computed
/// once; specs run in parallel and sentences in order.
pub fn delta_ppl(
    model: &Model,
    specs: &[AblationSpec],
    corpus: &[Vec<u32>],
    panel: Option<&ScorePanel>,
) -> Result<KnockoutReport> {
    for s in specs {
        s.validate(&model.config)?;
    }
    let flags = CaptureFlags {
        components: true,
        ..CaptureFlags::LOGITS_ONLY
    };
    let clean: Vec<ForwardCapture> = corpus
        .par_iter()
        .map(|ids| model.forward(ids, flags))
        .collect::<Result<_>>()?;
    let (sum, count) = clean
        .iter()
        .map(|c| nll(&c.logits, &c.token_ids))
        .fold((0.0, 0), |(s, n), (a, b)| (s + a, n + b));
    if count == 0 {
        return Err(UnpackError::InvalidArgument(
            "knockout corpus has no next-token predictions".into(),
        ));
    }
    let baseline = ppl(sum, count);
    let results = specs
        .par_iter()
        .map(|spec| {
            let mut total = 0.0;
            for c in &clean {
                total += nll(&ablate_forward(model, c, spec)?, &c.token_ids).0;
            }
            let ablated = ppl(total, count);
            Ok(KnockoutResult {
                spec: *spec,
                strength: panel.map(|p| strength(p, spec)),
                baseline_ppl: baseline,
                ablated_ppl: ablated,
                delta_ppl: ablated - baseline,
            })
        })
        .collect::<Result<_>>()?;
    Ok(KnockoutReport {
        baseline_ppl: baseline,
        n_sentences: corpus.len(),
        n_tokens: count,
        results,
    })
}

/// Source layer of a component; the embedding sorts before layer 0.
pub fn source_layer(id: ComponentId) -> Option<usize> {
    id.layer()
}

/// Up to `per_layer` components of each source layer, at evenly spaced
/// positions of the layer's strength order. Only components with a
/// receiver on `channel` are eligible.
pub fn select_knockout_components(
    panel: &ScorePanel,
    cfg: &ModelConfig,
    channel: Channel,
    per_layer: usize,
) -> Vec<ComponentId> {
    let mut groups: BTreeMap<Option<usize>, Vec<(f64, ComponentId)>> = BTreeMap::new();
    for k in 0..panel.n_components() {
        let id = panel.component(k);
        if channel.receivers(id, cfg).is_empty() {
            continue;
        }
        let spec = AblationSpec { component: id, channel };
        groups.entry(source_layer(id)).or_default().push((strength(panel, &spec), id));
    }
    let mut out = Vec::new();
    for (_, mut g) in groups {
        g.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let m = g.len();
        let picks: Vec<usize> = match per_layer {
            0 => Vec::new(),
            k if k >= m => (0..m).collect(),
            1 => vec![(m - 1) / 2],
            k => (0..k)
                .map(|i| (i as f64 * (m - 1) as f64 / (k - 1) as f64).round() as usize)
                .collect(),
        };
        out.extend(picks.into_iter().map(|i| g[i].1));
    }
    out
}

/// Spearman correlations of strength against `delta_ppl` for one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelCorrelation {
    pub channel: Channel,
    pub n: usize,
    /// Mean over source layers with a defined correlation.
    pub within_layer: Option<f64>,
    pub n_layers: usize,
    pub cross_layer: Option<f64>,
}

/// Per-channel correlations over results that carry a strength.
pub fn spearman_report(results: &[KnockoutResult]) -> Result<Vec<ChannelCorrelation>> {
    let mut out = Vec::new();
    for channel in Channel::BOTH {
        let rows: Vec<&KnockoutResult> = results
            .iter()
            .filter(|r| r.spec.channel == channel && r.strength.is_some())
            .collect();
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            return Err(UnpackError::InvalidArgument(format!(
                "need at least two {channel} results for a correlation"
            )));
        }
        let xy = |rs: &[&KnockoutResult]| -> (Vec<f64>, Vec<f64>) {
            rs.iter().map(|r| (r.strength.unwrap_or(0.0), r.delta_ppl)).unzip()
        };
        let mut by_layer: BTreeMap<Option<usize>, Vec<&KnockoutResult>> = BTreeMap::new();
        for r in &rows {
            by_layer.entry(source_layer(r.spec.component)).or_default().push(r);
        }
        let per_layer: Vec<f64> = by_layer
            .values()
            .filter_map(|g| {
                let (x, y) = xy(g);
                spearman(&x, &y)
            })
            .collect();
        let (x, y) = xy(&rows);
        out.push(ChannelCorrelation {
            channel,
            n: rows.len(),
            within_layer: (!per_layer.is_empty()).then(|| per_layer.iter().sum::<f64>() / per_layer.len() as f64),
            n_layers: per_layer.len(),
            cross_layer: spearman(&x, &y),
        });
    }
    Ok(out)
}

/// Tab-separated `component, channel, strength, delta_ppl` plus the two
/// perplexities.
pub fn write_results<W: Write>(mut w: W, report: &KnockoutReport) -> std::io::Result<()> {
    writeln!(w, "# baseline_ppl: {:.9e}", report.baseline_ppl)?;
    writeln!(w, "# sentences: {}", report.n_sentences)?;
    writeln!(w, "# tokens: {}", report.n_tokens)?;
    writeln!(w, "component\tchannel\tstrength\tdelta_ppl\tbaseline_ppl\tablated_ppl")?;
    for r in &report.results {
        let st = r.strength.map_or_else(|| "nan".to_string(), |s| format!("{s:.9e}"));
        writeln!(
            w,
            "{}\t{}\t{st}\t{:.9e}\t{:.9e}\t{:.9e}",
            r.spec.component, r.spec.channel, r.delta_ppl, r.baseline_ppl, r.ablated_ppl
        )?;
    }
    Ok(())
}

/// Within-layer and cross-layer correlation per channel.
pub fn write_correlations<W: Write>(mut w: W, rows: &[ChannelCorrelation]) -> std::io::Result<()> {
    let f = |x: Option<f64>| x.map_or_else(|| "--".to_string(), |v| format!("{v:.2}"));
    writeln!(w, "channel\tn\twithin-layer ρ\tcross-layer ρ")?;
    for r in rows {
        writeln!(w, "{}\t{}\t{}\t{}", r.channel, r.n, f(r.within_layer), f(r.cross_layer))?;
    }
    Ok(())
}

/// One sentence per non-empty line, BOS prepended, cut to the context size.
pub fn load_corpus(model: &Model, path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path).map_err(|e| UnpackError::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let mut ids = model.tokenize_with_bos(line)?;
        ids.truncate(model.config.n_ctx);
        out.push(ids);
    }
    if out.is_empty() {
        return Err(UnpackError::InvalidArgument(format!(
            "corpus {} has no sentences",
            path.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BlockLayout;
    use ndarray::{Array2, Array3};

    fn panel(n_layers: usize, n_heads: usize, strengths: Vec<f64>) -> ScorePanel {
        let n = strengths.len();
        ScorePanel {
            n_layers,
            n_heads,
            n_prompts: 1,
            averaging: String::new(),
            attn_score: Array3::zeros((n, n_layers, n_heads)),
            mlp_score: Array2::zeros((n, n_layers)),
            attn_strength: strengths.clone(),
            mlp_strength: strengths,
        }
    }

    fn cfg(n_layers: usize, n_heads: usize, block_layout: BlockLayout) -> ModelConfig {
        crate::model::toy::ToySpec {
            n_layers,
            n_heads,
            block_layout,
            ..Default::default()
        }
        .config()
    }

    #[test]
    fn selection_counts_and_median() {
        // Parallel blocks: nothing reads layer 11.
        let c = cfg(12, 12, BlockLayout::Parallel);
        let n = c.n_components();
        let p = panel(12, 12, (0..n).map(|i| i as f64).collect());
        for ch in Channel::BOTH {
            assert_eq!(select_knockout_components(&p, &c, ch, 5).len(), 1 + 11 * 5);
            assert!(select_knockout_components(&p, &c, ch, 0).is_empty());
        }
        let one = select_knockout_components(&p, &c, Channel::CutMlp, 1);
        // Layer 0 holds indices 1..=13; the lower median of 13 is the 7th.
        assert_eq!(one[1], ComponentId::from_index(7, 12));
    }

    #[test]
    fn small_layer_is_taken_whole() {
        let c = cfg(2, 4, BlockLayout::Sequential);
        let p = panel(2, 4, vec![0.0; c.n_components()]);
        let sel = select_knockout_components(&p, &c, Channel::CutAttention, 5);
        assert_eq!(sel.len(), 1 + 5);
        assert!(sel.iter().all(|id| id.layer().unwrap_or(0) == 0));
    }

    #[test]
    fn last_layer_cannot_be_cut() {
        let c = cfg(2, 2, BlockLayout::Sequential);
        let spec = AblationSpec {
            component: ComponentId::Mlp { layer: 1 },
            channel: Channel::CutAttention,
        };
        assert!(spec.validate(&c).is_err());
    }
}
