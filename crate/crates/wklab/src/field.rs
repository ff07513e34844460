//! Uniform grids and grid-sampled scalar fields with periodic piecewise-linear
//! (or bilinear) interpolation.
//!
//! Fields are the discrete stand-ins for `φ`, `u`, `T_t^±φ`, `B_u(t,·)`, and
//! `τ_u`. Evaluation agrees with node values exactly at nodes; between nodes
//! the interpolant is linear per cell (per axis). On a torus the grid has `n`
//! nodes per axis with spacing `1/n` and wraps; on a box it has `n` nodes
//! including both endpoints and clamps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Domain, Vec2};

/// Uniform lattice on a domain, `n ≥ 16` nodes per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    domain: Domain,
    n: usize,
}

impl Grid {
    pub fn new(domain: Domain, n: usize) -> Result<Self> {
        if n < 16 {
            return Err(Error::Argument(format!("grid needs at least 16 nodes per axis, got {n}")));
        }
        Ok(Grid { domain, n })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.n
    }

    pub fn node_count(&self) -> usize {
        match self.domain.dim() {
            1 => self.n,
            _ => self.n * self.n,
        }
    }

    /// Grid spacing along one axis.
    pub fn spacing(&self) -> f64 {
        match self.domain {
            Domain::Torus { .. } => 1.0 / self.n as f64,
            Domain::Box { lo, hi, .. } => (hi[0] - lo[0]) / (self.n - 1) as f64,
        }
    }

    /// Position of a node by flat index (row-major for dim 2).
    pub fn node_pos(&self, idx: usize) -> Vec2 {
        debug_assert!(idx < self.node_count());
        let (i, j) = match self.domain.dim() {
            1 => (idx, 0),
            _ => (idx % self.n, idx / self.n),
        };
        match self.domain {
            Domain::Torus { dim } => {
                let mut p = [0.0; 2];
                p[0] = i as f64 / self.n as f64;
                if dim == 2 {
                    p[1] = j as f64 / self.n as f64;
                }
                p
            }
            Domain::Box { dim, lo, hi } => {
                let mut p = [0.0; 2];
                let denom = (self.n - 1) as f64;
                p[0] = lo[0] + (hi[0] - lo[0]) * i as f64 / denom;
                if dim == 2 {
                    p[1] = lo[1] + (hi[1] - lo[1]) * j as f64 / denom;
                }
                p
            }
        }
    }

    /// Flat index of the node nearest to `p`.
    pub fn nearest_node(&self, p: Vec2) -> usize {
        let axis = |coord: f64, axis_idx: usize| -> usize {
            match self.domain {
                Domain::Torus { .. } => {
                    let i = (coord.rem_euclid(1.0) * self.n as f64).round() as usize;
                    i % self.n
                }
                Domain::Box { lo, hi, .. } => {
                    let t = (coord - lo[axis_idx]) / (hi[axis_idx] - lo[axis_idx]);
                    let i = (t * (self.n - 1) as f64).round();
                    (i.max(0.0) as usize).min(self.n - 1)
                }
            }
        };
        match self.domain.dim() {
            1 => axis(p[0], 0),
            _ => axis(p[0], 0) + self.n * axis(p[1], 1),
        }
    }

    /// Flat index from per-axis indices (wrapping on a torus).
    pub fn index_of(&self, i: isize, j: isize) -> usize {
        let wrap = |k: isize| -> usize {
            match self.domain {
                Domain::Torus { .. } => k.rem_euclid(self.n as isize) as usize,
                Domain::Box { .. } => k.clamp(0, self.n as isize - 1) as usize,
            }
        };
        match self.domain.dim() {
            1 => wrap(i),
            _ => wrap(i) + self.n * wrap(j),
        }
    }

    /// Per-axis indices of a flat index.
    pub fn axes_of(&self, idx: usize) -> (usize, usize) {
        match self.domain.dim() {
            1 => (idx, 0),
            _ => (idx % self.n, idx / self.n),
        }
    }
}

/// Grid-sampled scalar field with per-cell linear interpolation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::Validation(format!(
                "field has {} values for {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("field contains non-finite values".into()));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        let n = grid.node_count();
        ScalarField { grid, values: vec![c; n] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(Vec2) -> f64) -> Result<Self> {
        let values: Vec<f64> = (0..grid.node_count()).map(|i| f(grid.node_pos(i))).collect();
        ScalarField::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Per-axis cell location: (lower node index, fractional coordinate).
    fn locate(&self, coord: f64, axis: usize) -> (isize, f64) {
        let n = self.grid.n;
        match self.grid.domain {
            Domain::Torus { .. } => {
                let xr = coord.rem_euclid(1.0);
                let scaled = xr * n as f64;
                let mut i = scaled.floor() as isize;
                if i >= n as isize {
                    i = n as isize - 1;
                }
                (i, scaled - i as f64)
            }
            Domain::Box { lo, hi, .. } => {
                let t = ((coord - lo[axis]) / (hi[axis] - lo[axis])).clamp(0.0, 1.0);
                let scaled = t * (n - 1) as f64;
                let mut i = scaled.floor() as isize;
                if i >= (n - 1) as isize {
                    i = n as isize - 2;
                }
                (i, scaled - i as f64)
            }
        }
    }

    /// Interpolated value (linear per axis; exact at nodes).
    pub fn eval(&self, p: Vec2) -> f64 {
        match self.grid.domain.dim() {
            1 => {
                let (i, f) = self.locate(p[0], 0);
                let v0 = self.values[self.grid.index_of(i, 0)];
                let v1 = self.values[self.grid.index_of(i + 1, 0)];
                v0 + f * (v1 - v0)
            }
            _ => {
                let (i, fx) = self.locate(p[0], 0);
                let (j, fy) = self.locate(p[1], 1);
                let v00 = self.values[self.grid.index_of(i, j)];
                let v10 = self.values[self.grid.index_of(i + 1, j)];
                let v01 = self.values[self.grid.index_of(i, j + 1)];
                let v11 = self.values[self.grid.index_of(i + 1, j + 1)];
                let a = v00 + fx * (v10 - v00);
                let b = v01 + fx * (v11 - v01);
                a + fy * (b - a)
            }
        }
    }

    /// Centered-difference gradient at the node nearest `p` (one-sided at box
    /// edges). Meaningful away from kinks; callers near kinks should consult
    /// the superdifferential machinery instead.
    pub fn gradient_at(&self, p: Vec2) -> Vec2 {
        let idx = self.grid.nearest_node(p);
        self.node_gradient(idx)
    }

    /// Centered-difference gradient at a node.
    pub fn node_gradient(&self, idx: usize) -> Vec2 {
        let (i, j) = self.grid.axes_of(idx);
        let h = self.grid.spacing();
        let mut g = [0.0; 2];
        let one = |lo: usize, hi: usize, span: f64| -> f64 {
            (self.values[hi] - self.values[lo]) / span
        };
        match self.grid.domain {
            Domain::Torus { dim } => {
                g[0] = one(
                    self.grid.index_of(i as isize - 1, j as isize),
                    self.grid.index_of(i as isize + 1, j as isize),
                    2.0 * h,
                );
                if dim == 2 {
                    g[1] = one(
                        self.grid.index_of(i as isize, j as isize - 1),
                        self.grid.index_of(i as isize, j as isize + 1),
                        2.0 * h,
                    );
                }
            }
            Domain::Box { dim, .. } => {
                let n = self.grid.nodes_per_axis();
                let clamped = |k: isize| k.clamp(0, n as isize - 1);
                let (lo, hi) = (clamped(i as isize - 1), clamped(i as isize + 1));
                g[0] = one(
                    self.grid.index_of(lo, j as isize),
                    self.grid.index_of(hi, j as isize),
                    (hi - lo) as f64 * h,
                );
                if dim == 2 {
                    let (lo, hi) = (clamped(j as isize - 1), clamped(j as isize + 1));
                    g[1] = one(
                        self.grid.index_of(i as isize, lo),
                        self.grid.index_of(i as isize, hi),
                        (hi - lo) as f64 * h,
                    );
                }
            }
        }
        g
    }

    /// One-sided slopes `((v_i − v_{i−1})/h, (v_{i+1} − v_i)/h)` at a node
    /// along the given axis.
    pub fn one_sided_slopes(&self, idx: usize, axis: usize) -> (f64, f64) {
        let (i, j) = self.grid.axes_of(idx);
        let h = self.grid.spacing();
        let (prev, next) = match axis {
            0 => (
                self.grid.index_of(i as isize - 1, j as isize),
                self.grid.index_of(i as isize + 1, j as isize),
            ),
            _ => (
                self.grid.index_of(i as isize, j as isize - 1),
                self.grid.index_of(i as isize, j as isize + 1),
            ),
        };
        ((self.values[idx] - self.values[prev]) / h, (self.values[next] - self.values[idx]) / h)
    }

    /// Largest one-sided slope magnitude over all nodes and axes — the grid
    /// Lipschitz constant of the interpolant.
    pub fn lipschitz_constant(&self) -> f64 {
        let mut kappa: f64 = 0.0;
        for idx in 0..self.grid.node_count() {
            for axis in 0..self.grid.domain.dim() {
                let (l, r) = self.one_sided_slopes(idx, axis);
                kappa = kappa.max(l.abs()).max(r.abs());
            }
        }
        kappa
    }

    /// Supremum-norm distance to another field on the same grid.
    pub fn sup_distance(&self, other: &ScalarField) -> f64 {
        assert_eq!(self.grid, other.grid, "fields live on different grids");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Serializes as CSV lines `index,x0,x1,value` with a header.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("index,x0,x1,value\n");
        for idx in 0..self.grid.node_count() {
            let p = self.grid.node_pos(idx);
            // Default float formatting is shortest-round-trip, so parsing
            // recovers every value bit for bit.
            out.push_str(&format!("{idx},{},{},{}\n", p[0], p[1], self.values[idx]));
        }
        out
    }

    /// Parses the CSV produced by [`Self::to_csv_string`]; the grid must be
    /// supplied because CSV carries only node data.
    pub fn from_csv_str(grid: Grid, csv: &str) -> Result<Self> {
        let mut values = vec![f64::NAN; grid.node_count()];
        for (lineno, line) in csv.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let idx: usize = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Validation(format!("bad CSV index on line {lineno}")))?;
            let value: f64 = parts
                .nth(2)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Validation(format!("bad CSV value on line {lineno}")))?;
            if idx >= values.len() {
                return Err(Error::Validation(format!("CSV index {idx} out of range")));
            }
            values[idx] = value;
        }
        ScalarField::new(grid, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn torus_grid(n: usize) -> Grid {
        Grid::new(Domain::torus(1), n).unwrap()
    }

    #[test]
    fn evaluation_is_exact_at_nodes() {
        let g = torus_grid(32);
        let f = ScalarField::from_fn(g.clone(), |p| (p[0] * 7.0).sin()).unwrap();
        for idx in 0..g.node_count() {
            assert_eq!(f.eval(g.node_pos(idx)), f.values()[idx]);
        }
    }

    #[test]
    fn interpolation_is_linear_between_nodes() {
        let g = torus_grid(16);
        let f = ScalarField::from_fn(g, |p| p[0]).unwrap();
        // Between the last node (15/16) and the wrap node (0), the periodic
        // interpolant descends linearly from 15/16 toward 0.
        assert!((f.eval([0.25 + 0.5 / 16.0, 0.0]) - (0.25 + 0.5 / 16.0)).abs() < 1e-15);
        let near_seam = f.eval([1.0 - 0.5 / 16.0, 0.0]);
        assert!((near_seam - (15.0 / 16.0) * 0.5).abs() < 1e-15, "seam cell wraps to value 0");
    }

    #[test]
    fn bilinear_interpolation_reproduces_affine_fields() {
        let g = Grid::new(Domain::torus(2), 16).unwrap();
        // An affine-per-cell probe: bilinear interpolation is exact for
        // products of per-axis linear functions within a cell.
        let f = ScalarField::from_fn(g, |p| (16.0 * p[0]).floor() + (16.0 * p[1]).floor()).unwrap();
        let v = f.eval([3.4 / 16.0, 5.9 / 16.0]);
        // Inside cell (3,5): values 8 at (3,5), 9 at (4,5), 9 at (3,6), 10 at (4,6).
        let expect = 8.0 + 0.4 + 0.9;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn one_sided_slopes_see_a_kink() {
        let g = torus_grid(64);
        let f = ScalarField::from_fn(g, |p| {
            let d = (p[0] - 0.5).abs().min(1.0 - (p[0] - 0.5).abs());
            d
        })
        .unwrap();
        let kink = f.grid().nearest_node([0.5, 0.0]);
        let (l, r) = f.one_sided_slopes(kink, 0);
        assert!((l - (-1.0)).abs() < 1e-12 && (r - 1.0).abs() < 1e-12, "slopes ({l}, {r})");
        assert!((f.lipschitz_constant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let g = torus_grid(32);
        let f = ScalarField::from_fn(g.clone(), |p| (p[0] * 3.3).cos()).unwrap();
        let csv = f.to_csv_string();
        let back = ScalarField::from_csv_str(g, &csv).unwrap();
        assert_eq!(f, back, "CSV round trip must be lossless");
    }

    #[test]
    fn box_fields_clamp_instead_of_wrapping() {
        let g = Grid::new(Domain::unit_box(1), 16).unwrap();
        let f = ScalarField::from_fn(g, |p| p[0]).unwrap();
        assert!((f.eval([0.999, 0.0]) - 0.999).abs() < 1e-12);
        assert!((f.eval([1.2, 0.0]) - 1.0).abs() < 1e-12, "outside queries clamp to the edge");
    }

    #[test]
    fn grids_below_16_nodes_are_rejected() {
        assert!(Grid::new(Domain::torus(1), 8).is_err());
    }
}
