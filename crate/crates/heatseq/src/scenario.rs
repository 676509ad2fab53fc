//! Randomized case sampling for the base, Challenge-1, and Challenge-2
//! configurations, plus materialization of the Dirichlet boundary ring.
//!
//! Grid convention: frames are indexed `[y, x]` with row `y = 0` the bottom
//! side (eta = 0) and column `x = 0` the left side (xi = 0). Corner nodes are
//! owned by the left/right columns: the overlay writes bottom and top rows
//! first, then the left and right columns on top of them.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fdsolver::cfl_max_timestep;
use crate::geometry::PlateGeometry;

/// Fraction of the CFL bound used when sampling time steps.
pub const CFL_SAFETY_FACTOR: f64 = 0.9;

/// Default non-dimensional diffusivity sampling range.
pub const DEFAULT_BETA_RANGE: (f64, f64) = (0.5, 1.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Top, Side::Bottom];

    /// Number of nodes along this side.
    pub fn len(&self, geometry: &PlateGeometry) -> usize {
        match self {
            Side::Left | Side::Right => geometry.ny,
            Side::Top | Side::Bottom => geometry.nx,
        }
    }
}

/// A constant-temperature run of nodes on one side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub side: Side,
    pub start: usize,
    pub len: usize,
    pub value: f64,
}

/// Per-node boundary values. Segments are baked into the side arrays; the
/// descriptors are kept so datasets and reports can recover the placement.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySpec {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub top: Vec<f64>,
    pub bottom: Vec<f64>,
    pub segments: Vec<Segment>,
}

impl BoundarySpec {
    pub fn uniform(geometry: &PlateGeometry, left: f64, right: f64, top: f64, bottom: f64) -> Self {
        BoundarySpec {
            left: vec![left; geometry.ny],
            right: vec![right; geometry.ny],
            top: vec![top; geometry.nx],
            bottom: vec![bottom; geometry.nx],
            segments: Vec::new(),
        }
    }

    fn side_values_mut(&mut self, side: Side) -> &mut Vec<f64> {
        match side {
            Side::Left => &mut self.left,
            Side::Right => &mut self.right,
            Side::Top => &mut self.top,
            Side::Bottom => &mut self.bottom,
        }
    }

    fn write_segment(&mut self, seg: Segment) {
        let values = self.side_values_mut(seg.side);
        for v in &mut values[seg.start..seg.start + seg.len] {
            *v = seg.value;
        }
        self.segments.push(seg);
    }

    pub fn all_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.left
            .iter()
            .chain(&self.right)
            .chain(&self.top)
            .chain(&self.bottom)
            .copied()
    }
}

/// One simulation's full specification.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseSpec {
    pub geometry: PlateGeometry,
    pub boundary: BoundarySpec,
    pub theta_init: f64,
    pub beta: f64,
    pub dtau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioMode {
    Base,
    Challenge1,
    Challenge2,
}

impl std::fmt::Display for ScenarioMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScenarioMode::Base => write!(f, "base"),
            ScenarioMode::Challenge1 => write!(f, "challenge1"),
            ScenarioMode::Challenge2 => write!(f, "challenge2"),
        }
    }
}

impl std::str::FromStr for ScenarioMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ScenarioMode::Base),
            "challenge1" => Ok(ScenarioMode::Challenge1),
            "challenge2" => Ok(ScenarioMode::Challenge2),
            other => Err(Error::Config(format!("unknown scenario mode '{other}'"))),
        }
    }
}

fn check_beta_range(beta_range: (f64, f64)) -> Result<()> {
    let (lo, hi) = beta_range;
    if lo <= 0.0 || lo > hi || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!(
            "invalid beta range [{lo}, {hi}]: need 0 < lo <= hi"
        )));
    }
    Ok(())
}

/// Base configuration: one uniform value per side (left/top/right in [0,1],
/// bottom in [0, 0.10]), uniform interior initial temperature, beta in range,
/// dtau = safety factor times the CFL bound. Deterministic per seed.
pub fn sample_base_case(
    seed: u64,
    geometry: PlateGeometry,
    beta_range: (f64, f64),
) -> Result<CaseSpec> {
    check_beta_range(beta_range)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_base_with_rng(&mut rng, geometry, beta_range))
}

fn sample_base_with_rng(
    rng: &mut ChaCha8Rng,
    geometry: PlateGeometry,
    beta_range: (f64, f64),
) -> CaseSpec {
    // Draw order is part of the determinism contract.
    let left = rng.gen_range(0.0..=1.0);
    let top = rng.gen_range(0.0..=1.0);
    let right = rng.gen_range(0.0..=1.0);
    let bottom = rng.gen_range(0.0..=0.10);
    let theta_init = rng.gen_range(0.0..=1.0);
    let beta = if beta_range.0 == beta_range.1 {
        beta_range.0
    } else {
        rng.gen_range(beta_range.0..=beta_range.1)
    };
    let dtau = CFL_SAFETY_FACTOR * cfl_max_timestep(&geometry, beta).expect("beta > 0 checked");
    CaseSpec {
        geometry,
        boundary: BoundarySpec::uniform(&geometry, left, right, top, bottom),
        theta_init,
        beta,
        dtau,
    }
}

/// Largest admissible start offset for a segment of `seg_len` nodes on a side
/// of `side_len` nodes. Segments stay off the corner nodes so that corner
/// ownership never clips them.
fn segment_start_bounds(side_len: usize, seg_len: usize) -> Result<(usize, usize)> {
    if seg_len == 0 || seg_len + 2 > side_len {
        return Err(Error::Config(format!(
            "segment of {seg_len} nodes does not fit inside a side of {side_len} nodes \
             (corners excluded)"
        )));
    }
    Ok((1, side_len - 1 - seg_len))
}

/// Challenge-1: fixed-position segments, theta=1 centered on the left side and
/// theta=0 centered on the right side. Positions are identical across seeds.
pub fn sample_challenge1_case(
    seed: u64,
    geometry: PlateGeometry,
    beta_range: (f64, f64),
    segment_len: usize,
) -> Result<CaseSpec> {
    let start = challenge1_segment_start(&geometry, segment_len)?;
    sample_challenge1_case_at(seed, geometry, beta_range, segment_len, start, start)
}

/// Centered placement used by default for Challenge-1.
pub fn challenge1_segment_start(geometry: &PlateGeometry, segment_len: usize) -> Result<usize> {
    let (lo, hi) = segment_start_bounds(geometry.ny, segment_len)?;
    Ok(((geometry.ny - segment_len) / 2).clamp(lo, hi))
}

/// Challenge-1 with explicit segment offsets on the left and right sides.
pub fn sample_challenge1_case_at(
    seed: u64,
    geometry: PlateGeometry,
    beta_range: (f64, f64),
    segment_len: usize,
    left_start: usize,
    right_start: usize,
) -> Result<CaseSpec> {
    check_beta_range(beta_range)?;
    let (lo, hi) = segment_start_bounds(geometry.ny, segment_len)?;
    for start in [left_start, right_start] {
        if start < lo || start > hi {
            return Err(Error::Config(format!(
                "segment start {start} out of bounds [{lo}, {hi}]"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut case = sample_base_with_rng(&mut rng, geometry, beta_range);
    case.boundary.write_segment(Segment {
        side: Side::Left,
        start: left_start,
        len: segment_len,
        value: 1.0,
    });
    case.boundary.write_segment(Segment {
        side: Side::Right,
        start: right_start,
        len: segment_len,
        value: 0.0,
    });
    Ok(case)
}

/// Challenge-2: the theta=1 and theta=0 segments land on two distinct,
/// uniformly chosen sides at uniformly random offsets.
pub fn sample_challenge2_case(
    seed: u64,
    geometry: PlateGeometry,
    beta_range: (f64, f64),
    segment_len: usize,
) -> Result<CaseSpec> {
    check_beta_range(beta_range)?;
    for side in Side::ALL {
        segment_start_bounds(side.len(&geometry), segment_len)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut case = sample_base_with_rng(&mut rng, geometry, beta_range);

    let first = Side::ALL[rng.gen_range(0..4)];
    let remaining: Vec<Side> = Side::ALL.into_iter().filter(|s| *s != first).collect();
    let second = remaining[rng.gen_range(0..3)];
    for (side, value) in [(first, 1.0), (second, 0.0)] {
        let (lo, hi) = segment_start_bounds(side.len(&geometry), segment_len)?;
        let start = rng.gen_range(lo..=hi);
        case.boundary.write_segment(Segment {
            side,
            start,
            len: segment_len,
            value,
        });
    }
    Ok(case)
}

/// Dirichlet ring materialized on the grid. Interior entries are unused;
/// `apply` rewrites only the ring, so applying twice equals applying once.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryOverlay {
    pub values: Array2<f64>,
    geometry: PlateGeometry,
}

impl BoundaryOverlay {
    pub fn apply(&self, frame: &mut Array2<f64>) {
        let (ny, nx) = (self.geometry.ny, self.geometry.nx);
        for x in 0..nx {
            frame[[0, x]] = self.values[[0, x]];
            frame[[ny - 1, x]] = self.values[[ny - 1, x]];
        }
        for y in 0..ny {
            frame[[y, 0]] = self.values[[y, 0]];
            frame[[y, nx - 1]] = self.values[[y, nx - 1]];
        }
    }

    /// Iterator over the ring coordinates, each corner exactly once.
    pub fn ring_coords(&self) -> impl Iterator<Item = (usize, usize)> {
        let (ny, nx) = (self.geometry.ny, self.geometry.nx);
        let horizontal = (0..nx).flat_map(move |x| [(0usize, x), (ny - 1, x)]);
        let vertical = (1..ny - 1).flat_map(move |y| [(y, 0usize), (y, nx - 1)]);
        horizontal.chain(vertical)
    }
}

/// Materialize the four Dirichlet sides (including segments) onto the grid.
/// Write order bakes in corner ownership: bottom/top rows first, then the
/// left/right columns overwrite the corners.
pub fn boundary_frame(spec: &CaseSpec) -> BoundaryOverlay {
    let g = spec.geometry;
    let mut values = Array2::zeros((g.ny, g.nx));
    for x in 0..g.nx {
        values[[0, x]] = spec.boundary.bottom[x];
        values[[g.ny - 1, x]] = spec.boundary.top[x];
    }
    for y in 0..g.ny {
        values[[y, 0]] = spec.boundary.left[y];
        values[[y, g.nx - 1]] = spec.boundary.right[y];
    }
    BoundaryOverlay {
        values,
        geometry: g,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom() -> PlateGeometry {
        PlateGeometry::new(16, 16).unwrap()
    }

    #[test]
    fn base_case_deterministic_per_seed() {
        let a = sample_base_case(42, geom(), DEFAULT_BETA_RANGE).unwrap();
        let b = sample_base_case(42, geom(), DEFAULT_BETA_RANGE).unwrap();
        assert_eq!(a, b);
        let c = sample_base_case(43, geom(), DEFAULT_BETA_RANGE).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_beta_range_is_exact() {
        let case = sample_base_case(7, geom(), (1.0, 1.0)).unwrap();
        assert_eq!(case.beta, 1.0);
    }

    #[test]
    fn invalid_beta_ranges_rejected() {
        assert!(sample_base_case(0, geom(), (0.0, 1.0)).is_err());
        assert!(sample_base_case(0, geom(), (2.0, 1.0)).is_err());
    }

    #[test]
    fn theta_init_mean_close_to_half() {
        let mut sum = 0.0;
        let n = 10_000;
        for seed in 0..n {
            sum += sample_base_case(seed, geom(), DEFAULT_BETA_RANGE)
                .unwrap()
                .theta_init;
        }
        let mean = sum / n as f64;
        assert!(mean > 0.48 && mean < 0.52, "mean {mean}");
    }

    #[test]
    fn challenge1_segments_fixed_across_seeds() {
        let a = sample_challenge1_case(1, geom(), DEFAULT_BETA_RANGE, 4).unwrap();
        let b = sample_challenge1_case(2, geom(), DEFAULT_BETA_RANGE, 4).unwrap();
        assert_eq!(a.boundary.segments, b.boundary.segments);
        assert_ne!(a.boundary.top, b.boundary.top);
        // left side carries exactly 4 consecutive ones
        let ones: Vec<usize> = (0..16).filter(|&y| a.boundary.left[y] == 1.0).collect();
        assert_eq!(ones.len(), 4);
        assert_eq!(ones[3] - ones[0], 3);
    }

    #[test]
    fn challenge1_oversized_segment_rejected() {
        assert!(sample_challenge1_case(1, geom(), DEFAULT_BETA_RANGE, 15).is_err());
    }

    #[test]
    fn challenge2_sides_differ_and_values_exact() {
        for seed in 0..200 {
            let case = sample_challenge2_case(seed, geom(), DEFAULT_BETA_RANGE, 4).unwrap();
            let segs = &case.boundary.segments;
            assert_eq!(segs.len(), 2);
            assert_ne!(segs[0].side, segs[1].side);
            assert_eq!(segs[0].value, 1.0);
            assert_eq!(segs[1].value, 0.0);
            for seg in segs {
                let side_len = seg.side.len(&case.geometry);
                assert!(seg.start >= 1 && seg.start + seg.len <= side_len - 1);
            }
        }
    }

    #[test]
    fn challenge2_covers_all_ordered_side_pairs() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..1000 {
            let case = sample_challenge2_case(seed, geom(), DEFAULT_BETA_RANGE, 4).unwrap();
            let segs = &case.boundary.segments;
            seen.insert((segs[0].side as u8, segs[1].side as u8));
        }
        assert_eq!(seen.len(), 12, "not all 4x3 ordered side pairs occurred");
    }

    #[test]
    fn uniform_boundary_gives_uniform_ring() {
        let mut case = sample_base_case(3, geom(), DEFAULT_BETA_RANGE).unwrap();
        case.boundary = BoundarySpec::uniform(&case.geometry, 0.3, 0.3, 0.3, 0.3);
        let overlay = boundary_frame(&case);
        for (y, x) in overlay.ring_coords() {
            assert_eq!(overlay.values[[y, x]], 0.3);
        }
    }

    #[test]
    fn overlay_is_idempotent() {
        let case = sample_challenge2_case(11, geom(), DEFAULT_BETA_RANGE, 4).unwrap();
        let overlay = boundary_frame(&case);
        let mut once = Array2::from_elem((16, 16), 0.5);
        overlay.apply(&mut once);
        let mut twice = once.clone();
        overlay.apply(&mut twice);
        assert_eq!(once, twice);
    }

    #[test]
    fn corners_owned_by_left_right_columns() {
        let mut case = sample_base_case(5, geom(), DEFAULT_BETA_RANGE).unwrap();
        case.boundary = BoundarySpec::uniform(&case.geometry, 0.1, 0.2, 0.9, 0.8);
        let overlay = boundary_frame(&case);
        assert_eq!(overlay.values[[0, 0]], 0.1); // bottom-left -> left
        assert_eq!(overlay.values[[15, 0]], 0.1); // top-left -> left
        assert_eq!(overlay.values[[0, 15]], 0.2); // bottom-right -> right
        assert_eq!(overlay.values[[15, 15]], 0.2); // top-right -> right
    }

    #[test]
    fn challenge1_left_column_carries_hot_run() {
        let case = sample_challenge1_case(9, geom(), DEFAULT_BETA_RANGE, 4).unwrap();
        let overlay = boundary_frame(&case);
        let start = challenge1_segment_start(&case.geometry, 4).unwrap();
        for y in start..start + 4 {
            assert_eq!(overlay.values[[y, 0]], 1.0);
        }
    }

    proptest! {
        #[test]
        fn sampled_values_in_range(seed in 0u64..1_000_000) {
            let case = sample_base_case(seed, geom(), DEFAULT_BETA_RANGE).unwrap();
            prop_assert!(case.boundary.all_values().all(|v| (0.0..=1.0).contains(&v)));
            prop_assert!(case.boundary.bottom.iter().all(|v| *v <= 0.10));
            prop_assert!((0.0..=1.0).contains(&case.theta_init));
            prop_assert!(case.beta >= 0.5 && case.beta <= 1.5);
        }

        #[test]
        fn challenge2_values_in_range(seed in 0u64..100_000) {
            let case = sample_challenge2_case(seed, geom(), DEFAULT_BETA_RANGE, 4).unwrap();
            prop_assert!(case.boundary.all_values().all(|v| (0.0..=1.0).contains(&v)));
        }
    }
}
