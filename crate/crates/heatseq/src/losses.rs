//! Physics-informed composite loss: data MSE plus residual, boundary, and
//! initial-condition terms. Each component exists twice — as a pure scalar
//! function and as a tape builder — and tests pin the two to each other.
//!
//! The residual evaluates spatial derivatives at time level n (forward in
//! time), the same stencil the solver integrates, so solver trajectories
//! produce a residual of exactly zero up to rounding.

use crate::error::{Error, Result};
use crate::geometry::PlateGeometry;
use crate::scenario::{boundary_frame, CaseSpec};
use crate::tape::{NodeId, Tape};
use ndarray::{ArrayD, IxDyn};

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_pi: f64,
    pub lambda_bc: f64,
    pub lambda_ic: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pi: 1.0,
            lambda_bc: 1.0,
            lambda_ic: 1.0,
            eps: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_pi < 0.0 || self.lambda_bc < 0.0 || self.lambda_ic < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("loss eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub mse: f64,
    pub physics: f64,
    pub boundary: f64,
    pub initial: f64,
    pub total: f64,
}

fn check_batch_shape(pred: &ArrayD<f64>, cases: &[CaseSpec]) -> Result<(usize, usize, usize, usize)> {
    if pred.ndim() != 4 {
        return Err(Error::Domain(format!(
            "expected B x T x ny x nx predictions, got {:?}",
            pred.shape()
        )));
    }
    let (b, t, ny, nx) = (
        pred.shape()[0],
        pred.shape()[1],
        pred.shape()[2],
        pred.shape()[3],
    );
    if b != cases.len() {
        return Err(Error::Domain(format!(
            "batch size {b} does not match {} cases",
            cases.len()
        )));
    }
    for case in cases {
        if case.geometry.ny != ny || case.geometry.nx != nx {
            return Err(Error::Domain("case geometry does not match batch".into()));
        }
    }
    Ok((b, t, ny, nx))
}

pub fn mse_loss(pred: &ArrayD<f64>, target: &ArrayD<f64>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Domain(format!(
            "mse shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Residual of the explicit-Euler stencil at interior nodes:
/// R(b,n,i,j) = (pred^{n+1} - pred^n)/dtau_b - beta_b * Lap(pred^n).
pub fn physics_residual(
    pred: &ArrayD<f64>,
    beta: &[f64],
    dtau: &[f64],
    geometry: &PlateGeometry,
) -> Result<ArrayD<f64>> {
    if pred.ndim() != 4 {
        return Err(Error::Domain("residual expects B x T x ny x nx".into()));
    }
    let (b, t, ny, nx) = (
        pred.shape()[0],
        pred.shape()[1],
        pred.shape()[2],
        pred.shape()[3],
    );
    if t < 2 {
        return Err(Error::Domain("residual needs at least two frames".into()));
    }
    if beta.len() != b || dtau.len() != b {
        return Err(Error::Domain("beta/dtau length must equal batch size".into()));
    }
    if ny != geometry.ny || nx != geometry.nx {
        return Err(Error::Domain("geometry mismatch in residual".into()));
    }
    let inv_dx2 = 1.0 / (geometry.dxi * geometry.dxi);
    let inv_dy2 = 1.0 / (geometry.deta * geometry.deta);
    let mut out = ArrayD::zeros(IxDyn(&[b, t - 1, ny - 2, nx - 2]));
    for bi in 0..b {
        for n in 0..t - 1 {
            for i in 1..ny - 1 {
                for j in 1..nx - 1 {
                    let c = pred[[bi, n, i, j]];
                    let lap = (pred[[bi, n, i + 1, j]] - 2.0 * c + pred[[bi, n, i - 1, j]])
                        * inv_dy2
                        + (pred[[bi, n, i, j + 1]] - 2.0 * c + pred[[bi, n, i, j - 1]]) * inv_dx2;
                    out[[bi, n, i - 1, j - 1]] =
                        (pred[[bi, n + 1, i, j]] - c) / dtau[bi] - beta[bi] * lap;
                }
            }
        }
    }
    Ok(out)
}

fn variance(values: &ArrayD<f64>) -> f64 {
    let n = values.len() as f64;
    let mean = values.sum() / n;
    values.mapv(|v| (v - mean) * (v - mean)).sum() / n
}

/// residual / sqrt(Var(residual) + eps), variance over all elements.
pub fn normalized_residual(residual: &ArrayD<f64>, eps: f64) -> ArrayD<f64> {
    let denom = (variance(residual) + eps).sqrt();
    residual.mapv(|v| v / denom)
}

/// Mean squared normalized residual.
pub fn physics_loss(
    pred: &ArrayD<f64>,
    beta: &[f64],
    dtau: &[f64],
    geometry: &PlateGeometry,
    eps: f64,
) -> Result<f64> {
    let residual = physics_residual(pred, beta, dtau, geometry)?;
    let n = residual.len() as f64;
    let mean_sq = residual.mapv(|v| v * v).sum() / n;
    let mean = residual.sum() / n;
    let var = mean_sq - mean * mean;
    Ok(mean_sq / (var + eps))
}

/// Dirichlet target values broadcast over time plus a 0/1 ring indicator,
/// both [B,T,ny,nx] — the shared scaffolding for boundary losses.
fn boundary_targets(cases: &[CaseSpec], t: usize) -> (ArrayD<f64>, ArrayD<f64>, usize) {
    let ny = cases[0].geometry.ny;
    let nx = cases[0].geometry.nx;
    let b = cases.len();
    let mut target = ArrayD::zeros(IxDyn(&[b, t, ny, nx]));
    let mut ring = ArrayD::zeros(IxDyn(&[b, t, ny, nx]));
    let mut ring_count = 0;
    for (bi, case) in cases.iter().enumerate() {
        let overlay = boundary_frame(case);
        let coords: Vec<(usize, usize)> = overlay.ring_coords().collect();
        if bi == 0 {
            ring_count = coords.len();
        }
        for ti in 0..t {
            for &(y, x) in &coords {
                target[[bi, ti, y, x]] = overlay.values[[y, x]];
                ring[[bi, ti, y, x]] = 1.0;
            }
        }
    }
    (target, ring, ring_count)
}

/// MSE over boundary-ring nodes at all times vs the Dirichlet values.
pub fn boundary_loss(pred: &ArrayD<f64>, cases: &[CaseSpec]) -> Result<f64> {
    let (b, t, _, _) = check_batch_shape(pred, cases)?;
    let (target, ring, ring_count) = boundary_targets(cases, t);
    let mut acc = 0.0;
    for (((&p, &tv), &r), _) in pred.iter().zip(target.iter()).zip(ring.iter()).zip(0..) {
        if r != 0.0 {
            acc += (p - tv) * (p - tv);
        }
    }
    Ok(acc / (b * t * ring_count) as f64)
}

/// MSE over the first `n_visible` frames vs the target trajectory.
pub fn initial_loss(pred: &ArrayD<f64>, target: &ArrayD<f64>, n_visible: usize) -> Result<f64> {
    if pred.shape() != target.shape() || pred.ndim() != 4 {
        return Err(Error::Domain("initial loss shape mismatch".into()));
    }
    let t = pred.shape()[1];
    if n_visible < 1 || n_visible > t {
        return Err(Error::Domain(format!(
            "n_visible {n_visible} outside 1..={t}"
        )));
    }
    let ranges: Vec<(usize, usize)> = vec![
        (0, pred.shape()[0]),
        (0, n_visible),
        (0, pred.shape()[2]),
        (0, pred.shape()[3]),
    ];
    let slice = |a: &ArrayD<f64>| {
        a.slice_each_axis(|ad| {
            let (s, e) = ranges[ad.axis.index()];
            ndarray::Slice::from(s..e)
        })
        .to_owned()
    };
    mse_loss(&slice(pred), &slice(target))
}

/// Assemble the composite loss. `dtau` per case must already account for any
/// record stride (effective step between stored frames).
pub fn total_loss(
    pred: &ArrayD<f64>,
    target: &ArrayD<f64>,
    cases: &[CaseSpec],
    effective_dtau: &[f64],
    n_visible: usize,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    check_batch_shape(pred, cases)?;
    let beta: Vec<f64> = cases.iter().map(|c| c.beta).collect();
    let geometry = cases[0].geometry;
    let mse = mse_loss(pred, target)?;
    let physics = physics_loss(pred, &beta, effective_dtau, &geometry, weights.eps)?;
    let boundary = boundary_loss(pred, cases)?;
    let initial = initial_loss(pred, target, n_visible)?;
    let total = mse
        + weights.lambda_pi * physics
        + weights.lambda_bc * boundary
        + weights.lambda_ic * initial;
    Ok(LossBreakdown {
        mse,
        physics,
        boundary,
        initial,
        total,
    })
}

// ---------- tape route ----------

pub struct TapeLoss {
    pub mse: NodeId,
    pub physics: NodeId,
    pub boundary: NodeId,
    pub initial: NodeId,
    pub total: NodeId,
}

fn residual_tape(
    tape: &mut Tape,
    pred: NodeId,
    beta: &[f64],
    dtau: &[f64],
    geometry: &PlateGeometry,
) -> NodeId {
    let shape = tape.value(pred).shape().to_vec();
    let (b, t, ny, nx) = (shape[0], shape[1], shape[2], shape[3]);
    let sl = |tape: &mut Tape, ts: (usize, usize), ys: (usize, usize), xs: (usize, usize)| {
        tape.slice(pred, &[(0, b), ts, ys, xs])
    };
    let curr = sl(tape, (0, t - 1), (1, ny - 1), (1, nx - 1));
    let next = sl(tape, (1, t), (1, ny - 1), (1, nx - 1));
    let up = sl(tape, (0, t - 1), (2, ny), (1, nx - 1));
    let down = sl(tape, (0, t - 1), (0, ny - 2), (1, nx - 1));
    let right = sl(tape, (0, t - 1), (1, ny - 1), (2, nx));
    let left = sl(tape, (0, t - 1), (1, ny - 1), (0, nx - 2));

    let inv_dx2 = 1.0 / (geometry.dxi * geometry.dxi);
    let inv_dy2 = 1.0 / (geometry.deta * geometry.deta);
    let two_c = tape.scale(curr, 2.0);
    let vert_sum = tape.add(up, down);
    let vert = tape.sub(vert_sum, two_c);
    let vert_term = tape.scale(vert, inv_dy2);
    let horiz_sum = tape.add(right, left);
    let horiz = tape.sub(horiz_sum, two_c);
    let horiz_term = tape.scale(horiz, inv_dx2);
    let lap = tape.add(vert_term, horiz_term);

    let beta_arr = ArrayD::from_shape_vec(IxDyn(&[b, 1, 1, 1]), beta.to_vec()).unwrap();
    let dtau_arr = ArrayD::from_shape_vec(IxDyn(&[b, 1, 1, 1]), dtau.to_vec()).unwrap();
    let beta_id = tape.leaf(beta_arr);
    let dtau_id = tape.leaf(dtau_arr);
    let dt_num = tape.sub(next, curr);
    let dt_term = tape.div(dt_num, dtau_id);
    let diffusion = tape.mul(beta_id, lap);
    tape.sub(dt_term, diffusion)
}

/// Composite loss on the tape; `pred` is the model output node.
pub fn total_loss_tape(
    tape: &mut Tape,
    pred: NodeId,
    target: &ArrayD<f64>,
    cases: &[CaseSpec],
    effective_dtau: &[f64],
    n_visible: usize,
    weights: &LossWeights,
) -> Result<TapeLoss> {
    weights.validate()?;
    check_batch_shape(tape.value(pred), cases)?;
    if tape.value(pred).shape() != target.shape() {
        return Err(Error::Domain("target shape mismatch".into()));
    }
    let shape = target.shape().to_vec();
    let (b, t, ny, nx) = (shape[0], shape[1], shape[2], shape[3]);
    if n_visible < 1 || n_visible > t {
        return Err(Error::Domain(format!("n_visible {n_visible} outside 1..={t}")));
    }
    let beta: Vec<f64> = cases.iter().map(|c| c.beta).collect();
    let geometry = cases[0].geometry;

    let target_id = tape.leaf(target.clone());
    let diff = tape.sub(pred, target_id);
    let sq = tape.square(diff);
    let mse = tape.mean_all(sq);

    let residual = residual_tape(tape, pred, &beta, effective_dtau, &geometry);
    let r_sq = tape.square(residual);
    let mean_sq = tape.mean_all(r_sq);
    let mean_r = tape.mean_all(residual);
    let mean_r_sq = tape.square(mean_r);
    let var = tape.sub(mean_sq, mean_r_sq);
    let denom = tape.add_scalar(var, weights.eps);
    let physics = tape.div(mean_sq, denom);

    let (b_target, ring, ring_count) = boundary_targets(cases, t);
    let b_target_id = tape.leaf(b_target);
    let ring_id = tape.leaf(ring);
    let b_diff = tape.sub(pred, b_target_id);
    let b_masked = tape.mul(b_diff, ring_id);
    let b_sq = tape.square(b_masked);
    let b_sum = tape.sum_all(b_sq);
    let boundary = tape.scale(b_sum, 1.0 / (b * t * ring_count) as f64);

    let prefix = [(0, b), (0, n_visible), (0, ny), (0, nx)];
    let pred_prefix = tape.slice(pred, &prefix);
    let target_prefix = tape.slice(target_id, &prefix);
    let i_diff = tape.sub(pred_prefix, target_prefix);
    let i_sq = tape.square(i_diff);
    let initial = tape.mean_all(i_sq);

    let w_physics = tape.scale(physics, weights.lambda_pi);
    let w_boundary = tape.scale(boundary, weights.lambda_bc);
    let w_initial = tape.scale(initial, weights.lambda_ic);
    let t1 = tape.add(mse, w_physics);
    let t2 = tape.add(t1, w_boundary);
    let total = tape.add(t2, w_initial);

    Ok(TapeLoss {
        mse,
        physics,
        boundary,
        initial,
        total,
    })
}
