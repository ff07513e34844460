//! Flat domains and the vector algebra shared by every module.
//!
//! Positions and covectors are plain `[f64; 2]`. One-dimensional domains keep
//! the second component pinned at zero, so dot products and norms over both
//! components are always correct and no operation needs to branch on the
//! dimension. The [`Domain`] owns the dimension and all metric questions:
//! reduction to the fundamental domain, minimal displacements, geodesic
//! interpolation, and containment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position or covector; component `i ≥ dim` is identically zero.
pub type Vec2 = [f64; 2];

pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn norm(a: Vec2) -> f64 {
    dot(a, a).sqrt()
}

pub fn is_finite(a: Vec2) -> bool {
    a[0].is_finite() && a[1].is_finite()
}

/// Lexicographic comparison, used wherever a deterministic order on points is
/// needed (tie-breaking, canonical atom order).
pub fn lex_cmp(a: Vec2, b: Vec2) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1]))
}

/// Flat domain: a unit-period torus or an axis-aligned box, of dimension 1 or 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    /// `[0,1)^dim` with opposite faces identified; the metric is the minimum
    /// over integer shifts.
    Torus { dim: usize },
    /// `[lo_i, hi_i]` per axis, no identification; the metric is Euclidean.
    Box { dim: usize, lo: Vec2, hi: Vec2 },
}

impl Domain {
    pub fn torus(dim: usize) -> Self {
        assert!(dim == 1 || dim == 2, "domain dimension must be 1 or 2");
        Domain::Torus { dim }
    }

    pub fn unit_box(dim: usize) -> Self {
        assert!(dim == 1 || dim == 2, "domain dimension must be 1 or 2");
        Domain::Box { dim, lo: [0.0; 2], hi: if dim == 1 { [1.0, 0.0] } else { [1.0, 1.0] } }
    }

    pub fn dim(&self) -> usize {
        match *self {
            Domain::Torus { dim } | Domain::Box { dim, .. } => dim,
        }
    }

    pub fn is_torus(&self) -> bool {
        matches!(self, Domain::Torus { .. })
    }

    /// Reduces a point to the fundamental domain. On the torus each active
    /// component is wrapped into `[0,1)`; on a box the point is unchanged
    /// (containment is a separate question). Inactive components are zeroed.
    pub fn reduce(&self, p: Vec2) -> Vec2 {
        let mut q = [0.0; 2];
        match *self {
            Domain::Torus { dim } => {
                for i in 0..dim {
                    q[i] = p[i].rem_euclid(1.0);
                    // rem_euclid can return exactly 1.0 for tiny negatives.
                    if q[i] >= 1.0 {
                        q[i] = 0.0;
                    }
                }
            }
            Domain::Box { dim, .. } => {
                q[..dim].copy_from_slice(&p[..dim]);
            }
        }
        q
    }

    /// Whether the point lies in the domain (always true on the torus after
    /// reduction; box membership allows a 1e-12 float slack).
    pub fn contains(&self, p: Vec2) -> bool {
        match *self {
            Domain::Torus { .. } => true,
            Domain::Box { dim, lo, hi } => (0..dim)
                .all(|i| p[i] >= lo[i] - 1e-12 && p[i] <= hi[i] + 1e-12),
        }
    }

    /// Checks containment, reporting a domain error with the offending point.
    pub fn check_contains(&self, p: Vec2) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(Error::Domain(format!("{:?} is outside {:?}", p, self)))
        }
    }

    /// Minimal displacement from `a` to `b`: the representative of `b − a`
    /// with each torus component in `[-½, ½]`, ties at exactly ½ resolved to
    /// the positive direction.
    pub fn displacement(&self, a: Vec2, b: Vec2) -> Vec2 {
        let mut d = [0.0; 2];
        match *self {
            Domain::Torus { dim } => {
                for i in 0..dim {
                    let raw = b[i] - a[i];
                    let mut w = raw - raw.round();
                    if w == -0.5 {
                        w = 0.5;
                    }
                    d[i] = w;
                }
            }
            Domain::Box { dim, .. } => {
                for i in 0..dim {
                    d[i] = b[i] - a[i];
                }
            }
        }
        d
    }

    /// Geodesic distance: Euclidean length of the minimal displacement.
    pub fn dist(&self, a: Vec2, b: Vec2) -> f64 {
        norm(self.displacement(a, b))
    }

    /// Point at parameter `lambda` on the minimal geodesic from `a` to `b`,
    /// reduced to the fundamental domain. The boolean is true when some torus
    /// component was an exact antipodal tie (distance ½), in which case the
    /// positive direction was taken.
    pub fn geodesic_point(&self, a: Vec2, b: Vec2, lambda: f64) -> (Vec2, bool) {
        let d = self.displacement(a, b);
        let tie = self.is_torus() && (0..self.dim()).any(|i| d[i] == 0.5);
        (self.reduce(add(a, scale(d, lambda))), tie)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torus_reduction_wraps_into_unit_interval() {
        let t = Domain::torus(1);
        assert_eq!(t.reduce([1.25, 0.0])[0], 0.25);
        assert_eq!(t.reduce([-0.25, 0.0])[0], 0.75);
        assert_eq!(t.reduce([3.0, 0.0])[0], 0.0);
        assert_eq!(t.reduce([-1e-18, 0.0])[0], 0.0, "tiny negatives must not round up to 1");
    }

    #[test]
    fn torus_displacement_takes_minimal_representative() {
        let t = Domain::torus(1);
        assert!((t.displacement([0.1, 0.0], [0.9, 0.0])[0] - (-0.2)).abs() < 1e-15);
        assert!((t.displacement([0.9, 0.0], [0.1, 0.0])[0] - 0.2).abs() < 1e-15);
        assert!((t.dist([0.1, 0.0], [0.9, 0.0]) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn antipodal_tie_resolves_to_positive_direction() {
        let t = Domain::torus(1);
        assert_eq!(t.displacement([0.0, 0.0], [0.5, 0.0])[0], 0.5);
        assert_eq!(t.displacement([0.75, 0.0], [0.25, 0.0])[0], 0.5);
        let (mid, tie) = t.geodesic_point([0.0, 0.0], [0.5, 0.0], 0.5);
        assert!(tie, "exact half-period displacement must be flagged");
        assert_eq!(mid[0], 0.25);
    }

    #[test]
    fn two_dimensional_torus_metric_is_per_axis() {
        let t = Domain::torus(2);
        let d = t.displacement([0.9, 0.1], [0.1, 0.9]);
        assert!((d[0] - 0.2).abs() < 1e-15 && (d[1] + 0.2).abs() < 1e-15, "got {d:?}");
        assert!((t.dist([0.9, 0.1], [0.1, 0.9]) - 0.2 * 2.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn box_membership_and_metric_are_euclidean() {
        let b = Domain::unit_box(1);
        assert!(b.contains([0.5, 0.0]));
        assert!(!b.contains([1.5, 0.0]));
        assert!(b.check_contains([1.5, 0.0]).is_err());
        assert_eq!(b.dist([0.1, 0.0], [0.9, 0.0]), 0.8, "no wraparound on a box");
    }

    #[test]
    fn geodesic_point_interpolates_across_the_seam() {
        let t = Domain::torus(1);
        let (p, tie) = t.geodesic_point([0.9, 0.0], [0.1, 0.0], 0.5);
        assert!(!tie);
        assert!((p[0] - 0.0).abs() < 1e-15, "midpoint of 0.9 -> 0.1 crosses the seam at 0.0");
    }
}
