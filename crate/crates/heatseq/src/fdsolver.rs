//! Explicit-Euler central-difference solver and dataset assembly.

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::PlateGeometry;
use crate::scenario::{
    boundary_frame, sample_base_case, sample_challenge1_case, sample_challenge2_case, CaseSpec,
    ScenarioMode,
};

/// CFL bound for the forward-Euler diffusion update:
/// dtau_max = (1 / (2 beta)) * (1/dxi^2 + 1/deta^2)^-1.
pub fn cfl_max_timestep(geometry: &PlateGeometry, beta: f64) -> Result<f64> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    let inv = 1.0 / (geometry.dxi * geometry.dxi) + 1.0 / (geometry.deta * geometry.deta);
    Ok(1.0 / (2.0 * beta) / inv)
}

/// One explicit-Euler step. Interior nodes get the 5-point Laplacian update;
/// the Dirichlet ring is re-imposed afterwards. The input frame is untouched.
pub fn euler_step(frame: &Array2<f64>, case: &CaseSpec) -> Result<Array2<f64>> {
    let g = case.geometry;
    if frame.dim() != (g.ny, g.nx) {
        return Err(Error::Domain(format!(
            "frame shape {:?} does not match geometry {}x{}",
            frame.dim(),
            g.ny,
            g.nx
        )));
    }
    let inv_dxi2 = 1.0 / (g.dxi * g.dxi);
    let inv_deta2 = 1.0 / (g.deta * g.deta);
    let c = case.dtau * case.beta;
    let mut next = frame.clone();
    for y in 1..g.ny - 1 {
        for x in 1..g.nx - 1 {
            let lap_xi = (frame[[y, x + 1]] - 2.0 * frame[[y, x]] + frame[[y, x - 1]]) * inv_dxi2;
            let lap_eta = (frame[[y + 1, x]] - 2.0 * frame[[y, x]] + frame[[y - 1, x]]) * inv_deta2;
            next[[y, x]] = frame[[y, x]] + c * (lap_xi + lap_eta);
        }
    }
    boundary_frame(case).apply(&mut next);
    Ok(next)
}

/// Time-ordered stack of frames for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// [T, ny, nx]
    pub frames: Array3<f64>,
    pub case: CaseSpec,
    pub record_stride: usize,
    /// max |delta theta| between the last two recorded frames.
    pub steadiness: f64,
}

impl Trajectory {
    pub fn seq_len(&self) -> usize {
        self.frames.dim().0
    }

    /// Time step between recorded frames.
    pub fn effective_dtau(&self) -> f64 {
        self.case.dtau * self.record_stride as f64
    }
}

/// Run (seq_len - 1) * record_stride Euler steps from the initial frame,
/// recording every record_stride-th state (the initial frame included).
pub fn simulate(case: &CaseSpec, seq_len: usize, record_stride: usize) -> Result<Trajectory> {
    if seq_len < 2 {
        return Err(Error::Config(format!("seq_len must be >= 2, got {seq_len}")));
    }
    if record_stride < 1 {
        return Err(Error::Config("record_stride must be >= 1".into()));
    }
    let max_dtau = cfl_max_timestep(&case.geometry, case.beta)?;
    if case.dtau > max_dtau * (1.0 + 1e-12) {
        return Err(Error::Numerical(format!(
            "dtau {} violates CFL bound {} (beta {})",
            case.dtau, max_dtau, case.beta
        )));
    }

    let g = case.geometry;
    let overlay = boundary_frame(case);
    let mut frame = Array2::from_elem((g.ny, g.nx), case.theta_init);
    overlay.apply(&mut frame);

    let mut frames = Array3::zeros((seq_len, g.ny, g.nx));
    frames.index_axis_mut(ndarray::Axis(0), 0).assign(&frame);
    for t in 1..seq_len {
        for _ in 0..record_stride {
            frame = euler_step(&frame, case)?;
        }
        frames.index_axis_mut(ndarray::Axis(0), t).assign(&frame);
    }

    let last = frames.index_axis(ndarray::Axis(0), seq_len - 1);
    let prev = frames.index_axis(ndarray::Axis(0), seq_len - 2);
    let steadiness = last
        .iter()
        .zip(prev.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    Ok(Trajectory {
        frames,
        case: case.clone(),
        record_stride,
        steadiness,
    })
}

/// Train / validation / test trajectories from disjoint seed streams.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub fractions: [f64; 3],
    pub mode: ScenarioMode,
}

/// Split `n_cases` into train/val/test counts; the largest fraction absorbs
/// the rounding remainder.
pub fn split_counts(n_cases: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::Config(format!(
            "fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    let mut counts = [
        (n_cases as f64 * fractions[0]).floor() as usize,
        (n_cases as f64 * fractions[1]).floor() as usize,
        (n_cases as f64 * fractions[2]).floor() as usize,
    ];
    let assigned: usize = counts.iter().sum();
    let largest = fractions
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    counts[largest] += n_cases - assigned;
    Ok(counts)
}

/// Per-case seed derivation (splitmix64 over the split seed and case index),
/// so splits with distinct seeds share no RNG state and cases are independent.
pub fn case_seed(split_seed: u64, index: usize) -> u64 {
    let mut z = split_seed
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
pub struct DatasetParams {
    pub mode: ScenarioMode,
    pub n_cases: usize,
    pub fractions: [f64; 3],
    /// train / validation / test seed streams
    pub seeds: [u64; 3],
    pub geometry: PlateGeometry,
    pub beta_range: (f64, f64),
    pub segment_len: usize,
    pub seq_len: usize,
    pub record_stride: usize,
}

fn sample_case(params: &DatasetParams, seed: u64) -> Result<CaseSpec> {
    match params.mode {
        ScenarioMode::Base => sample_base_case(seed, params.geometry, params.beta_range),
        ScenarioMode::Challenge1 => {
            sample_challenge1_case(seed, params.geometry, params.beta_range, params.segment_len)
        }
        ScenarioMode::Challenge2 => {
            sample_challenge2_case(seed, params.geometry, params.beta_range, params.segment_len)
        }
    }
}

fn generate_split(params: &DatasetParams, split_seed: u64, count: usize) -> Result<Vec<Trajectory>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = case_seed(split_seed, i);
            let case = sample_case(params, seed)
                .map_err(|e| Error::Config(format!("case {i}: {e}")))?;
            simulate(&case, params.seq_len, params.record_stride)
                .map_err(|e| Error::Numerical(format!("case {i}: {e}")))
        })
        .collect()
}

/// Sample and simulate all cases; deterministic per seed set, simulations run
/// in parallel with results ordered by case index.
pub fn generate_dataset(params: &DatasetParams) -> Result<DatasetSplit> {
    let counts = split_counts(params.n_cases, params.fractions)?;
    Ok(DatasetSplit {
        train: generate_split(params, params.seeds[0], counts[0])?,
        validation: generate_split(params, params.seeds[1], counts[1])?,
        test: generate_split(params, params.seeds[2], counts[2])?,
        fractions: params.fractions,
        mode: params.mode,
    })
}
