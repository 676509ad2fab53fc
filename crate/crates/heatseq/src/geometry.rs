use crate::error::{Error, Result};

/// Uniform grid over the unit square. `nx` nodes along xi (columns),
/// `ny` nodes along eta (rows). Spacings are stored explicitly so the
/// solver and the residual use bit-identical values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateGeometry {
    pub nx: usize,
    pub ny: usize,
    pub dxi: f64,
    pub deta: f64,
}

impl PlateGeometry {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::Config(format!(
                "grid must be at least 3x3 to have interior nodes, got {nx}x{ny}"
            )));
        }
        Ok(PlateGeometry {
            nx,
            ny,
            dxi: 1.0 / (nx as f64 - 1.0),
            deta: 1.0 / (ny as f64 - 1.0),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_matches_node_count() {
        let g = PlateGeometry::new(11, 21).unwrap();
        assert_eq!(g.dxi, 0.1);
        assert_eq!(g.deta, 0.05);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(PlateGeometry::new(2, 10).is_err());
        assert!(PlateGeometry::new(10, 1).is_err());
    }
}
