// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token-ranking and duplicate-position metrics over IOI/ABC pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::prompts::{check_pairing, PromptPair, Slots};
use crate::attribution::{Target, TraceConfig, Tracer};
use crate::error::{Result, UnpackError};
use crate::model::{CaptureFlags, Model};

/// Token credit of one prompt traced at its final position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCredit {
    pub slots: Slots,
    pub credit: Vec<f64>,
    /// Model probability of the IO token at the final position.
    pub p_io: f64,
}

/// Fractions in `[0, 1]`; `mean_io_share` in percent of positive credit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub io_gt_s1: f64,
    pub io_gt_s2: f64,
    pub top1: f64,
    /// Top-1 with position 0 excluded.
    pub top1_star: f64,
    pub mean_io_share: f64,
    pub mean_p_io: f64,
}

/// Percent of the positive total, zero when nothing is positive.
pub fn percent(credit: &[f64]) -> Vec<f64> {
    let total: f64 = credit.iter().filter(|&&c| c > 0.0).sum();
    credit
        .iter()
        .map(|c| if total > 0.0 { 100.0 * c / total } else { 0.0 })
        .collect()
}

fn is_top(credit: &[f64], at: usize, from: usize) -> bool {
    credit
        .iter()
        .enumerate()
        .skip(from)
        .all(|(p, &c)| p == at || credit[at] > c)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn token_metrics(prompts: &[PromptCredit]) -> Result<MetricReport> {
    if prompts.is_empty() {
        return Err(UnpackError::InvalidArgument("no prompts to score".into()));
    }
    let frac = |f: &dyn Fn(&PromptCredit) -> bool| mean(prompts.iter().map(|p| f64::from(u8::from(f(p)))));
    Ok(MetricReport {
        n: prompts.len(),
        io_gt_s1: frac(&|p| p.credit[p.slots.io] > p.credit[p.slots.s1]),
        io_gt_s2: frac(&|p| p.credit[p.slots.io] > p.credit[p.slots.s2]),
        top1: frac(&|p| is_top(&p.credit, p.slots.io, 0)),
        top1_star: frac(&|p| is_top(&p.credit, p.slots.io, 1)),
        mean_io_share: mean(prompts.iter().map(|p| percent(&p.credit)[p.slots.io])),
        mean_p_io: mean(prompts.iter().map(|p| p.p_io)),
    })
}

/// Credit of one pair under the three duplicate-position targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionCredit {
    pub ioi_slots: Slots,
    pub abc_slots: Slots,
    /// IOI prompt, subject minus IO.
    pub ioi_s: Vec<f64>,
    /// ABC prompt, C minus A.
    pub abc_c: Vec<f64>,
    /// ABC prompt, B minus A.
    pub abc_b: Vec<f64>,
}

/// Mean percent credit per condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuppressionReport {
    pub n: usize,
    pub c_to_c: f64,
    pub s2_to_s: f64,
    pub c_to_b: f64,
    pub s1_to_s: f64,
    /// `s1_to_s - s2_to_s`
    pub s1_s2_gap: f64,
}

pub fn s2_suppression(pairs: &[SuppressionCredit]) -> Result<SuppressionReport> {
    if pairs.is_empty() {
        return Err(UnpackError::InvalidArgument("no prompt pairs to score".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.ioi_slots != p.abc_slots) {
        return Err(UnpackError::InvalidArgument(format!(
            "unpaired prompts: IOI slots {:?}, ABC slots {:?}",
            p.ioi_slots, p.abc_slots
        )));
    }
    let at = |f: &dyn Fn(&SuppressionCredit) -> f64| mean(pairs.iter().map(f));
    let s1_to_s = at(&|p| percent(&p.ioi_s)[p.ioi_slots.s1]);
    let s2_to_s = at(&|p| percent(&p.ioi_s)[p.ioi_slots.s2]);
    Ok(SuppressionReport {
        n: pairs.len(),
        c_to_c: at(&|p| percent(&p.abc_c)[p.abc_slots.s2]),
        s2_to_s,
        c_to_b: at(&|p| percent(&p.abc_b)[p.abc_slots.s2]),
        s1_to_s,
        s1_s2_gap: s1_to_s - s2_to_s,
    })
}

/// Everything one config contributes for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCredit {
    pub tokens: PromptCredit,
    pub suppression: SuppressionCredit,
}

/// Traces one pair under every config. Each prompt is run forward once.
pub fn evaluate_pair(model: &Model, pair: &PromptPair, configs: &[TraceConfig]) -> Result<Vec<PairCredit>> {
    pair.ioi.validate()?;
    check_pairing(&pair.ioi, &pair.abc)?;
    let (ioi, abc) = (&pair.ioi, &pair.abc);
    let end = ioi.slots.end;
    let ioi_cap = model.forward(&ioi.token_ids, CaptureFlags::ALL)?;
    let abc_cap = model.forward(&abc.token_ids, CaptureFlags::ALL)?;
    let p_io = ioi_cap.probs(end)[ioi.io_token as usize];
    let diff = |token, distractor| Target::LogitDiff { token, distractor };
    let Some(first) = configs.first() else {
        return Ok(Vec::new());
    };
    let ioi_base = Tracer::new(model, &ioi_cap, first.clone())?;
    let abc_base = Tracer::new(model, &abc_cap, first.clone())?;
    configs
        .iter()
        .map(|cfg| {
            let mut t = ioi_base.with_config(cfg.clone())?;
            t.set_target(diff(ioi.io_token, ioi.s_token));
            let tokens = t.aggregate_token_credit(end)?;
            t.set_target(diff(ioi.s_token, ioi.io_token));
            let ioi_s = t.aggregate_token_credit(end)?;
            let mut a = abc_base.with_config(cfg.clone())?;
            a.set_target(diff(abc.c_token, abc.a_token));
            let abc_c = a.aggregate_token_credit(end)?;
            a.set_target(diff(abc.b_token, abc.a_token));
            let abc_b = a.aggregate_token_credit(end)?;
            Ok(PairCredit {
                tokens: PromptCredit {
                    slots: ioi.slots,
                    credit: tokens,
                    p_io,
                },
                suppression: SuppressionCredit {
                    ioi_slots: ioi.slots,
                    abc_slots: abc.slots,
                    ioi_s,
                    abc_c,
                    abc_b,
                },
            })
        })
        .collect()
}

/// Both reports for one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigReport {
    pub label: String,
    pub config: TraceConfig,
    pub metrics: MetricReport,
    pub suppression: SuppressionReport,
}

fn label(cfg: &TraceConfig) -> String {
    cfg.name().map_or_else(|| "custom".to_string(), str::to_string)
}

/// Reports for every config, prompts evaluated in parallel and reduced in
/// prompt order.
pub fn evaluate(model: &Model, pairs: &[PromptPair], configs: &[TraceConfig]) -> Result<Vec<ConfigReport>> {
    let per_pair: Vec<Vec<PairCredit>> = pairs
        .par_iter()
        .map(|p| evaluate_pair(model, p, configs))
        .collect::<Result<_>>()?;
    configs
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let tokens: Vec<PromptCredit> = per_pair.iter().map(|v| v[i].tokens.clone()).collect();
            let supp: Vec<SuppressionCredit> = per_pair.iter().map(|v| v[i].suppression.clone()).collect();
            Ok(ConfigReport {
                label: label(cfg),
                config: cfg.clone(),
                metrics: token_metrics(&tokens)?,
                suppression: s2_suppression(&supp)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub beta: f64,
    pub metrics: MetricReport,
    pub suppression: SuppressionReport,
}

/// `base` rerun at every `beta`.
pub fn beta_sweep(model: &Model, pairs: &[PromptPair], base: &TraceConfig, betas: &[f64]) -> Result<Vec<BetaRow>> {
    let configs: Vec<TraceConfig> = betas
        .iter()
        .map(|&beta| TraceConfig { beta, ..base.clone() })
        .collect();
    Ok(evaluate(model, pairs, &configs)?
        .into_iter()
        .map(|r| BetaRow {
            beta: r.config.beta,
            metrics: r.metrics,
            suppression: r.suppression,
        })
        .collect())
}

/// Parses `start:stop:step`, inclusive of `stop` up to rounding.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || UnpackError::InvalidArgument(format!("grid `{spec}`; expected start:stop:step"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0 && stop >= start && start.is_finite() && stop.is_finite()) {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + step * i as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots() -> Slots {
        Slots {
            io: 2,
            s1: 1,
            s2: 4,
            end: 5,
        }
    }

    #[test]
    fn dominant_io_scores_one() {
        let p = PromptCredit {
            slots: slots(),
            credit: vec![0.1, 0.2, 3.0, 0.0, 0.1, -0.4],
            p_io: 0.5,
        };
        let r = token_metrics(&[p]).unwrap();
        assert_eq!((r.io_gt_s1, r.io_gt_s2, r.top1, r.top1_star), (1.0, 1.0, 1.0, 1.0));
        assert!((r.mean_io_share - 100.0 * 3.0 / 3.4).abs() < 1e-12);
        assert_eq!(r.mean_p_io, 0.5);
    }

    #[test]
    fn top1_star_skips_position_zero() {
        let p = PromptCredit {
            slots: slots(),
            credit: vec![5.0, 0.2, 3.0, 0.0, 0.1, 0.0],
            p_io: 0.0,
        };
        let r = token_metrics(&[p]).unwrap();
        assert_eq!((r.top1, r.top1_star), (0.0, 1.0));
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(token_metrics(&[]).is_err());
        assert!(s2_suppression(&[]).is_err());
    }

    #[test]
    fn suppression_gap() {
        let s = slots();
        let pair = SuppressionCredit {
            ioi_slots: s,
            abc_slots: s,
            ioi_s: vec![0.0, 6.0, 0.0, 0.0, 2.0, 2.0],
            abc_c: vec![0.0, 0.0, 0.0, 0.0, 1.0, 3.0],
            abc_b: vec![0.0, 1.0, 0.0, 0.0, -1.0, 3.0],
        };
        let r = s2_suppression(&[pair.clone()]).unwrap();
        assert_eq!(r.s1_to_s, 60.0);
        assert_eq!(r.s2_to_s, 20.0);
        assert_eq!(r.s1_s2_gap, 40.0);
        assert_eq!(r.c_to_c, 25.0);
        assert_eq!(r.c_to_b, -25.0);
        let mut bad = pair;
        bad.abc_slots.s2 = 3;
        assert!(s2_suppression(&[bad]).is_err());
    }

    #[test]
    fn grid_is_inclusive() {
        let g = parse_grid("0:2:0.1").unwrap();
        assert_eq!(g.len(), 21);
        assert!((g[20] - 2.0).abs() < 1e-12);
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1").is_err());
    }
}
