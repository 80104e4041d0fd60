// SPDX-License-Identifier: MIT OR Apache-2.0

//! Target direction through the final LayerNorm.

use ndarray::{Array1, Axis};

use super::config::Target;
use crate::error::{Result, UnpackError};
use crate::model::{ForwardCapture, Model, Site};

fn check_token(model: &Model, token: u32) -> Result<usize> {
    let vocab = model.config.vocab_size;
    if (token as usize) < vocab {
        Ok(token as usize)
    } else {
        Err(UnpackError::TokenOutOfRange { id: token, vocab })
    }
}

/// Unembedding readout of the target before the final LayerNorm:
/// `W_U[t] - mean_v W_U[v]`, or `W_U[t] - W_U[t']` for a logit difference.
pub fn target_readout(model: &Model, target: Target) -> Result<Array1<f64>> {
    let wu = &model.weights.unembed;
    let col = |t: usize| wu.column(t).mapv(f64::from);
    match target {
        Target::Single { token } => {
            let t = check_token(model, token)?;
            let mean = wu
                .mapv(f64::from)
                .mean_axis(Axis(1))
                .expect("vocabulary is nonempty");
            Ok(col(t) - mean)
        }
        Target::LogitDiff { token, distractor } => {
            let (t, u) = (check_token(model, token)?, check_token(model, distractor)?);
            Ok(col(t) - col(u))
        }
    }
}

/// `w_lnf / sqrt(Var(X_p) + eps) * readout`: the gradient of the target
/// logit with respect to the residual at `pos`, with the final LayerNorm's
/// mean and variance frozen at their captured values.
pub fn target_direction(
    model: &Model,
    capture: &ForwardCapture,
    target: Target,
    pos: usize,
) -> Result<Array1<f64>> {
    capture.check_pos(pos)?;
    let (_, var) = capture.site_stats(Site::Final, pos)?;
    let inv = 1.0 / (var + model.config.ln_epsilon).sqrt();
    let readout = target_readout(model, target)?;
    Ok(ndarray::Zip::from(&readout)
        .and(&model.weights.lnf_w)
        .map_collect(|&r, &w| r * f64::from(w) * inv))
}

/// `⟨c_k(pos), d⟩` for every component, in dataflow order.
pub fn root_importances(
    capture: &ForwardCapture,
    direction: &Array1<f64>,
    pos: usize,
) -> Result<Vec<f64>> {
    capture.check_pos(pos)?;
    let comps = capture.components()?;
    Ok(comps
        .index_axis(Axis(1), pos)
        .outer_iter()
        .map(|c| c.iter().zip(direction).map(|(&a, b)| f64::from(a) * b).sum())
        .collect())
}
