//! Evaluation modes for trained models: single-pass block prediction,
//! frame-by-frame autoregressive rollout, test-set aggregation, and the
//! output-projection weight heatmap.

use crate::encodings::MaskKind;
use crate::error::{Error, Result};
use crate::fdsolver::Trajectory;
use crate::losses::{total_loss, LossWeights};
use crate::model::{forward_reference, ModelConfig, ModelParams};
use crate::scenario::boundary_frame;
use crate::training::{make_batch, Batch};
use ndarray::{Array1, Array2, ArrayD, Axis};

#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// [B, T, ny, nx]
    pub predicted: ArrayD<f64>,
    /// Per-case, per-frame MSE vs ground truth, [B, T].
    pub per_frame_mse: Array2<f64>,
    /// Block mode: composite loss over the whole sequence.
    /// Causal mode: plain MSE over frames >= n_visible.
    pub aggregate_loss: f64,
}

fn frame_mse(pred: &ArrayD<f64>, truth: &ArrayD<f64>) -> Array2<f64> {
    let (b, t) = (pred.shape()[0], pred.shape()[1]);
    let mut out = Array2::zeros((b, t));
    for bi in 0..b {
        for ti in 0..t {
            let p = pred.index_axis(Axis(0), bi);
            let p = p.index_axis(Axis(0), ti);
            let g = truth.index_axis(Axis(0), bi);
            let g = g.index_axis(Axis(0), ti);
            let n = p.len() as f64;
            out[[bi, ti]] = p
                .iter()
                .zip(g.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n;
        }
    }
    out
}

/// Single forward pass under the block mask. The per-frame report covers
/// every position, including the visible prefix, and always uses the model's
/// own outputs — visible frames are not copied from ground truth.
pub fn block_predict(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<RolloutResult> {
    if config.mask_kind != MaskKind::Block {
        return Err(Error::Config(
            "block_predict requires a block-mask model".into(),
        ));
    }
    let mask = config.mask()?;
    let predicted = forward_reference(params, config, &batch.src, &batch.alpha, &mask)?;
    let breakdown = total_loss(
        &predicted,
        &batch.src,
        &batch.cases,
        &batch.effective_dtau,
        config.start_predicting_from,
        weights,
    )?;
    Ok(RolloutResult {
        per_frame_mse: frame_mse(&predicted, &batch.src),
        predicted,
        aggregate_loss: breakdown.total,
    })
}

/// Rollout driven by an arbitrary forward function (tests substitute an
/// oracle). `forward(working, alpha)` must return a full [B,T,ny,nx] output.
pub fn rollout_with<F>(config: &ModelConfig, batch: &Batch, forward: F) -> Result<RolloutResult>
where
    F: Fn(&ArrayD<f64>, &Array1<f64>) -> Result<ArrayD<f64>>,
{
    if config.mask_kind != MaskKind::Causal {
        return Err(Error::Config(
            "autoregressive rollout requires a causal-mask model".into(),
        ));
    }
    let n = config.start_predicting_from;
    let t = config.seq_len;
    let b = batch.src.shape()[0];
    let overlays: Vec<_> = batch.cases.iter().map(boundary_frame).collect();

    // The working input starts as ground truth; frames >= n are overwritten
    // one at a time. The causal mask keeps not-yet-written frames out of
    // every output position the loop reads, so their initial values are
    // irrelevant to a genuine causal model.
    let mut working = batch.src.clone();
    for ti in n..t {
        let pred = forward(&working, &batch.alpha)?;
        // position ti-1 attends to frames < ti, so its output is the
        // latest-information estimate of frame ti
        let estimate = pred.index_axis(Axis(1), ti - 1).to_owned();
        working.index_axis_mut(Axis(1), ti).assign(&estimate);
        for (bi, overlay) in overlays.iter().enumerate() {
            for (y, x) in overlay.ring_coords() {
                working[[bi, ti, y, x]] = overlay.values[[y, x]];
            }
        }
    }
    let per_frame_mse = frame_mse(&working, &batch.src);
    let rolled = (b * (t - n) * config.ny * config.nx) as f64;
    let aggregate_loss = per_frame_mse
        .slice(ndarray::s![.., n..])
        .iter()
        .map(|&m| m * (config.ny * config.nx) as f64)
        .sum::<f64>()
        / rolled;
    Ok(RolloutResult {
        predicted: working,
        per_frame_mse,
        aggregate_loss,
    })
}

pub fn autoregressive_rollout(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &Batch,
) -> Result<RolloutResult> {
    let mask = config.mask()?;
    rollout_with(config, batch, |working, alpha| {
        forward_reference(params, config, working, alpha, &mask)
    })
}

/// Per-case losses plus their mean. Block mode scores each case with the
/// composite sequence loss; causal mode with the rollout MSE.
pub fn evaluate_test_set(
    params: &ModelParams,
    config: &ModelConfig,
    test_set: &[Trajectory],
    weights: &LossWeights,
) -> Result<(Vec<f64>, f64)> {
    if test_set.is_empty() {
        return Err(Error::Domain("test set is empty".into()));
    }
    let mut losses = Vec::with_capacity(test_set.len());
    for traj in test_set {
        let batch = make_batch(&[traj])?;
        let loss = match config.mask_kind {
            MaskKind::Block => block_predict(params, config, &batch, weights)?.aggregate_loss,
            MaskKind::Causal => {
                autoregressive_rollout(params, config, &batch)?.aggregate_loss
            }
        };
        losses.push(loss);
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((losses, mean))
}

/// Mean of |w| over the latent dimension of the output projection, per grid
/// node, reshaped to ny x nx.
pub fn projection_weight_heatmap(params: &ModelParams, config: &ModelConfig) -> Array2<f64> {
    let w = &params.output_proj.w; // [d_e, ny*nx]
    let d_e = w.shape()[0];
    let mut map = Array2::zeros((config.ny, config.nx));
    for y in 0..config.ny {
        for x in 0..config.nx {
            let node = y * config.nx + x;
            let mean_abs = (0..d_e).map(|d| w[[d, node]].abs()).sum::<f64>() / d_e as f64;
            map[[y, x]] = mean_abs;
        }
    }
    map
}
