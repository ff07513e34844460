//! Mechanical Tonelli models and their Hamiltonian flows.
//!
//! The model class is `L(x,v) = ½|v|² − V(x)` with Legendre dual
//! `H(x,p) = ½|p|² + V(x)` on a flat torus or box. Fiberwise strict convexity
//! and superlinearity hold with the quadratic envelope
//! `θ(r) = ½r²`: for every `(x,v)`,
//!
//! ```text
//! θ(|v|) − sup V ≤ L(x,v) ≤ θ(|v|) + sup(−V),
//! ```
//!
//! and those two offsets together with `θ`, `θ*` are exposed as the model's
//! growth envelope; downstream modules use them to size search radii.
//!
//! Flows are integrated by fixed-step Störmer–Verlet, which is symplectic for
//! this separable Hamiltonian; torus positions are reduced mod 1 after every
//! step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Domain, Vec2};

/// Scalar potential on the domain. All variants have analytic gradients.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Potential {
    /// `V ≡ 0`.
    Zero,
    /// `V(x) = a·Σ_i cos(2π x_i)` over the active axes.
    Cosine { amplitude: f64 },
    /// Periodic cubic-spline interpolation of uniform samples on `[0,1)`;
    /// one-dimensional tori only.
    Tabulated(PeriodicSpline),
}

/// Growth envelope of the Lagrangian: `θ(|v|) − lower_offset ≤ L ≤ θ(|v|) +
/// upper_offset` with `θ(r) = ½r²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthEnvelope {
    /// `sup V` — the constant dominated by the kinetic part from below.
    pub lower_offset: f64,
    /// `sup(−V)` — the constant dominating from above.
    pub upper_offset: f64,
}

impl GrowthEnvelope {
    /// `θ(r) = ½r²` (same envelope above and below for mechanical models).
    pub fn theta(r: f64) -> f64 {
        0.5 * r * r
    }

    /// Fenchel conjugate `θ*(k) = sup_{r≥0} (kr − θ(r)) = ½k²` for `k ≥ 0`.
    pub fn theta_star(k: f64) -> f64 {
        if k <= 0.0 {
            0.0
        } else {
            0.5 * k * k
        }
    }
}

/// A point of the cotangent bundle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Vec2,
    pub p: Vec2,
}

/// Mechanical Tonelli model: domain, potential, and cached potential range.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TonelliModel {
    domain: Domain,
    potential: Potential,
    v_min: f64,
    v_max: f64,
}

impl TonelliModel {
    pub fn new(domain: Domain, potential: Potential) -> Result<Self> {
        if let Potential::Tabulated(_) = potential {
            if !(domain.is_torus() && domain.dim() == 1) {
                return Err(Error::Argument(
                    "tabulated potentials are defined on one-dimensional tori only".into(),
                ));
            }
        }
        let (v_min, v_max) = potential_range(&domain, &potential);
        Ok(TonelliModel { domain, potential, v_min, v_max })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn potential_kind(&self) -> &Potential {
        &self.potential
    }

    /// `V(x)`; errors if `x` leaves a box domain.
    pub fn potential(&self, x: Vec2) -> Result<f64> {
        self.domain.check_contains(x)?;
        Ok(self.potential_unchecked(x))
    }

    pub(crate) fn potential_unchecked(&self, x: Vec2) -> f64 {
        match &self.potential {
            Potential::Zero => 0.0,
            Potential::Cosine { amplitude } => {
                let mut v = 0.0;
                for i in 0..self.domain.dim() {
                    v += amplitude * (2.0 * std::f64::consts::PI * x[i]).cos();
                }
                v
            }
            Potential::Tabulated(spline) => spline.eval(x[0]),
        }
    }

    /// `DV(x)` (componentwise, analytic).
    pub(crate) fn grad_potential(&self, x: Vec2) -> Vec2 {
        match &self.potential {
            Potential::Zero => [0.0; 2],
            Potential::Cosine { amplitude } => {
                let two_pi = 2.0 * std::f64::consts::PI;
                let mut g = [0.0; 2];
                for i in 0..self.domain.dim() {
                    g[i] = -amplitude * two_pi * (two_pi * x[i]).sin();
                }
                g
            }
            Potential::Tabulated(spline) => [spline.deriv(x[0]), 0.0],
        }
    }

    /// Second derivative of `V` along each axis (the potential is a sum of
    /// per-axis terms, so its Hessian is diagonal).
    pub(crate) fn potential_axis_curvature(&self, x: Vec2) -> Vec2 {
        match &self.potential {
            Potential::Zero => [0.0; 2],
            Potential::Cosine { amplitude } => {
                let two_pi = 2.0 * std::f64::consts::PI;
                let mut h = [0.0; 2];
                for i in 0..self.domain.dim() {
                    h[i] = -amplitude * two_pi * two_pi * (two_pi * x[i]).cos();
                }
                h
            }
            Potential::Tabulated(spline) => [spline.second_deriv(x[0]), 0.0],
        }
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn growth(&self) -> GrowthEnvelope {
        GrowthEnvelope { lower_offset: self.v_max, upper_offset: (-self.v_min).max(0.0) }
    }

    /// `L(x,v) = ½|v|² − V(x)`.
    pub fn lagrangian(&self, x: Vec2, v: Vec2) -> Result<f64> {
        self.domain.check_contains(x)?;
        Ok(0.5 * geom::dot(v, v) - self.potential_unchecked(x))
    }

    /// `H(x,p) = ½|p|² + V(x)`.
    pub fn hamiltonian(&self, x: Vec2, p: Vec2) -> Result<f64> {
        self.domain.check_contains(x)?;
        Ok(self.hamiltonian_unchecked(x, p))
    }

    pub(crate) fn hamiltonian_unchecked(&self, x: Vec2, p: Vec2) -> f64 {
        0.5 * geom::dot(p, p) + self.potential_unchecked(x)
    }

    /// Legendre transform `v ↦ L_v(x,v)`; the identity for mechanical models.
    pub fn legendre(&self, _x: Vec2, v: Vec2) -> Vec2 {
        v
    }

    /// Inverse Legendre transform `p ↦ H_p(x,p)`; also the identity.
    pub fn legendre_inverse(&self, _x: Vec2, p: Vec2) -> Vec2 {
        p
    }

    /// Integrates the Hamiltonian flow `Φ_H^t` from `phase` with the given
    /// fixed step count (Störmer–Verlet). Negative `t` flows backward. The
    /// returned trajectory has `steps + 1` phase points, positions reduced to
    /// the fundamental domain.
    pub fn hamiltonian_flow(
        &self,
        phase: PhasePoint,
        t: f64,
        steps: usize,
    ) -> Result<Vec<PhasePoint>> {
        if steps == 0 {
            return Err(Error::Argument("hamiltonian_flow requires steps >= 1".into()));
        }
        let h = t / steps as f64;
        let mut x = self.domain.reduce(phase.x);
        let mut p = phase.p;
        let mut traj = Vec::with_capacity(steps + 1);
        traj.push(PhasePoint { x, p });
        for step in 0..steps {
            let p_half = geom::sub(p, geom::scale(self.grad_potential(x), 0.5 * h));
            x = self.domain.reduce(geom::add(x, geom::scale(p_half, h)));
            p = geom::sub(p_half, geom::scale(self.grad_potential(x), 0.5 * h));
            if !(geom::is_finite(x) && geom::is_finite(p)) {
                return Err(Error::NonFinite { step });
            }
            traj.push(PhasePoint { x, p });
        }
        Ok(traj)
    }

    /// Endpoint of the flow only.
    pub fn flow_endpoint(&self, phase: PhasePoint, t: f64, steps: usize) -> Result<PhasePoint> {
        Ok(*self.hamiltonian_flow(phase, t, steps)?.last().unwrap())
    }
}

/// Maximum energy drift `max_s |H(x(s),p(s)) − H(x(0),p(0))|` along a
/// trajectory; the symplectic integrator keeps this `O((t/steps)²)`.
pub fn max_energy_drift(model: &TonelliModel, traj: &[PhasePoint]) -> f64 {
    let h0 = model.hamiltonian_unchecked(traj[0].x, traj[0].p);
    traj.iter()
        .map(|ph| (model.hamiltonian_unchecked(ph.x, ph.p) - h0).abs())
        .fold(0.0, f64::max)
}

fn potential_range(domain: &Domain, potential: &Potential) -> (f64, f64) {
    match potential {
        Potential::Zero => (0.0, 0.0),
        Potential::Cosine { amplitude } => {
            let per_axis = amplitude.abs();
            let dim = domain.dim() as f64;
            (-per_axis * dim, per_axis * dim)
        }
        Potential::Tabulated(spline) => spline.range(),
    }
}

/// Natural periodic cubic spline through uniform samples on `[0,1)`.
///
/// Solving the cyclic tridiagonal moment system once at construction gives an
/// interpolant with analytic first and second derivatives, which is all the
/// action minimizer needs from a tabulated potential.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeriodicSpline {
    values: Vec<f64>,
    /// Second derivatives at the knots (the spline "moments").
    moments: Vec<f64>,
}

impl PeriodicSpline {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        if n < 3 {
            return Err(Error::Argument("a periodic table needs at least 3 samples".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("tabulated potential contains non-finite values".into()));
        }
        let h = 1.0 / n as f64;
        // Periodic moment system: M_{k-1} + 4 M_k + M_{k+1} = 6 Δ²y_k / h².
        let rhs: Vec<f64> = (0..n)
            .map(|k| {
                let prev = values[(k + n - 1) % n];
                let next = values[(k + 1) % n];
                6.0 * (prev - 2.0 * values[k] + next) / (h * h)
            })
            .collect();
        let moments = solve_cyclic_tridiagonal(1.0, 4.0, 1.0, &rhs);
        Ok(PeriodicSpline { values, moments })
    }

    pub fn samples(&self) -> &[f64] {
        &self.values
    }

    fn segment(&self, x: f64) -> (usize, usize, f64, f64) {
        let n = self.values.len();
        let h = 1.0 / n as f64;
        let xr = x.rem_euclid(1.0);
        let mut k = (xr * n as f64).floor() as usize;
        if k >= n {
            k = n - 1;
        }
        let tau = xr - k as f64 * h;
        (k, (k + 1) % n, tau, h)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (k, k1, tau, h) = self.segment(x);
        let (y0, y1) = (self.values[k], self.values[k1]);
        let (m0, m1) = (self.moments[k], self.moments[k1]);
        let b = (y1 - y0) / h - h * (2.0 * m0 + m1) / 6.0;
        y0 + tau * (b + tau * (0.5 * m0 + tau * (m1 - m0) / (6.0 * h)))
    }

    pub fn deriv(&self, x: f64) -> f64 {
        let (k, k1, tau, h) = self.segment(x);
        let (y0, y1) = (self.values[k], self.values[k1]);
        let (m0, m1) = (self.moments[k], self.moments[k1]);
        let b = (y1 - y0) / h - h * (2.0 * m0 + m1) / 6.0;
        b + tau * (m0 + tau * 0.5 * (m1 - m0) / h)
    }

    pub fn second_deriv(&self, x: f64) -> f64 {
        let (k, k1, tau, h) = self.segment(x);
        self.moments[k] + tau * (self.moments[k1] - self.moments[k]) / h
    }

    /// (min, max) over the period, from dense sampling of the interpolant.
    pub fn range(&self) -> (f64, f64) {
        let n = self.values.len().max(64) * 8;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..n {
            let v = self.eval(k as f64 / n as f64);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Solves the cyclic tridiagonal system with constant bands `(a, b, c)` by the
/// Sherman–Morrison correction of two ordinary Thomas solves.
fn solve_cyclic_tridiagonal(a: f64, b: f64, c: f64, rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    assert!(n >= 3);
    let gamma = -b;
    // Perturbed tridiagonal matrix: corners removed, diagonal adjusted.
    let mut diag = vec![b; n];
    diag[0] = b - gamma;
    diag[n - 1] = b - a * c / gamma;
    let solve = |r: &[f64]| -> Vec<f64> {
        // Thomas pass on the perturbed matrix.
        let mut cp = vec![0.0; n];
        let mut dp = vec![0.0; n];
        cp[0] = c / diag[0];
        dp[0] = r[0] / diag[0];
        for i in 1..n {
            let m = diag[i] - a * cp[i - 1];
            cp[i] = c / m;
            dp[i] = (r[i] - a * dp[i - 1]) / m;
        }
        let mut x = vec![0.0; n];
        x[n - 1] = dp[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = dp[i] - cp[i] * x[i + 1];
        }
        x
    };
    let y = solve(rhs);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = c;
    let z = solve(&u);
    let vy = y[0] + a / gamma * y[n - 1];
    let vz = z[0] + a / gamma * z[n - 1];
    let factor = vy / (1.0 + vz);
    (0..n).map(|i| y[i] - factor * z[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pendulum() -> TonelliModel {
        TonelliModel::new(Domain::torus(1), Potential::Cosine { amplitude: 1.0 }).unwrap()
    }

    fn free() -> TonelliModel {
        TonelliModel::new(Domain::torus(1), Potential::Zero).unwrap()
    }

    #[test]
    fn lagrangian_of_free_particle() {
        assert_eq!(free().lagrangian([0.0, 0.0], [1.0, 0.0]).unwrap(), 0.5);
    }

    #[test]
    fn lagrangian_at_rest_is_minus_potential() {
        assert_eq!(pendulum().lagrangian([0.0, 0.0], [0.0, 0.0]).unwrap(), -1.0);
    }

    #[test]
    fn lagrangian_mixed_case() {
        // ½·4 − cos(π/2) = 2.
        let l = pendulum().lagrangian([0.25, 0.0], [2.0, 0.0]).unwrap();
        assert!((l - 2.0).abs() < 1e-15, "L(0.25, 2) = {l}");
    }

    #[test]
    fn hamiltonian_examples() {
        assert_eq!(free().hamiltonian([0.3, 0.0], [2.0, 0.0]).unwrap(), 2.0);
        assert_eq!(pendulum().hamiltonian([0.5, 0.0], [0.0, 0.0]).unwrap(), -1.0);
        assert_eq!(pendulum().hamiltonian([0.0, 0.0], [2.0, 0.0]).unwrap(), 3.0);
    }

    #[test]
    fn legendre_round_trip_is_bitwise_identity() {
        let m = pendulum();
        let v = [0.7, 0.0];
        let p = m.legendre([0.2, 0.0], v);
        assert_eq!(p, v, "mechanical Legendre transform is the identity");
        assert_eq!(m.legendre_inverse([0.2, 0.0], p), v);
    }

    #[test]
    fn fenchel_equality_at_legendre_pairs() {
        let m = pendulum();
        for &(x, v) in &[(0.1, -1.3), (0.37, 0.0), (0.8, 2.5)] {
            let xs = [x, 0.0];
            let vs = [v, 0.0];
            let p = m.legendre(xs, vs);
            let lhs = geom::dot(p, vs) - m.lagrangian(xs, vs).unwrap();
            let rhs = m.hamiltonian(xs, p).unwrap();
            let rel = (lhs - rhs).abs() / rhs.abs().max(1.0);
            assert!(rel <= 1e-12, "Fenchel equality violated at ({x}, {v}): {lhs} vs {rhs}");
        }
    }

    #[test]
    fn growth_envelope_brackets_the_lagrangian() {
        let m = pendulum();
        let g = m.growth();
        assert_eq!(g.lower_offset, 1.0);
        assert_eq!(g.upper_offset, 1.0);
        for i in 0..32 {
            for j in -8..8 {
                let x = [i as f64 / 32.0, 0.0];
                let v = [j as f64 / 2.0, 0.0];
                let l = m.lagrangian(x, v).unwrap();
                let r = geom::norm(v);
                assert!(GrowthEnvelope::theta(r) - g.lower_offset <= l + 1e-12);
                assert!(l <= GrowthEnvelope::theta(r) + g.upper_offset + 1e-12);
            }
        }
    }

    #[test]
    fn free_flight_wraps_around_the_torus() {
        let m = free();
        let end = m.flow_endpoint(PhasePoint { x: [0.0, 0.0], p: [0.5, 0.0] }, 1.0, 100).unwrap();
        assert!((end.x[0] - 0.5).abs() < 1e-12);
        assert!((end.p[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pendulum_equilibrium_is_a_fixed_point() {
        // x = ½ is the minimum of cos(2πx); DV vanishes there.
        let m = pendulum();
        let end = m.flow_endpoint(PhasePoint { x: [0.5, 0.0], p: [0.0, 0.0] }, 1.0, 1000).unwrap();
        assert!((end.x[0] - 0.5).abs() < 1e-12);
        assert!(end.p[0].abs() < 1e-12);
    }

    #[test]
    fn energy_drift_small_at_fine_steps() {
        let m = pendulum();
        let start = PhasePoint { x: [0.25, 0.0], p: [1.0, 0.0] };
        let traj = m.hamiltonian_flow(start, 0.3, 10_000).unwrap();
        let h = |p: &PhasePoint| m.hamiltonian_unchecked(p.x, p.p);
        let drift = (h(traj.last().unwrap()) - h(&traj[0])).abs();
        assert!(drift <= 1e-8, "energy drift {drift} exceeds 1e-8 at 10^4 steps");
        // A 100x finer run stands in as the high-accuracy endpoint oracle.
        let fine = m.flow_endpoint(start, 0.3, 1_000_000).unwrap();
        let coarse = traj.last().unwrap();
        assert!(
            (coarse.x[0] - fine.x[0]).abs() < 1e-7 && (coarse.p[0] - fine.p[0]).abs() < 1e-7,
            "endpoint ({}, {}) vs oracle ({}, {})",
            coarse.x[0],
            coarse.p[0],
            fine.x[0],
            fine.p[0]
        );
    }

    #[test]
    fn flow_reversibility() {
        let m = pendulum();
        let fwd = m.flow_endpoint(PhasePoint { x: [0.1, 0.0], p: [0.8, 0.0] }, 0.7, 4000).unwrap();
        let back = m.flow_endpoint(fwd, -0.7, 4000).unwrap();
        assert!(m.domain().dist(back.x, [0.1, 0.0]) < 1e-6);
        assert!((back.p[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn spline_interpolates_samples_exactly_and_smoothly() {
        let n = 64;
        let samples: Vec<f64> =
            (0..n).map(|k| (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()).collect();
        let spline = PeriodicSpline::new(samples.clone()).unwrap();
        for (k, &s) in samples.iter().enumerate() {
            let x = k as f64 / n as f64;
            assert!((spline.eval(x) - s).abs() < 1e-12, "interpolation must hit the knots");
        }
        // Between knots the spline tracks the smooth generator closely.
        for k in 0..(4 * n) {
            let x = k as f64 / (4 * n) as f64;
            let exact = (2.0 * std::f64::consts::PI * x).cos();
            assert!((spline.eval(x) - exact).abs() < 1e-5);
            let dexact = -2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * x).sin();
            assert!((spline.deriv(x) - dexact).abs() < 1e-3);
        }
    }

    #[test]
    fn tabulated_model_matches_cosine_model_dynamics() {
        let n = 128;
        let samples: Vec<f64> =
            (0..n).map(|k| (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()).collect();
        let tab = TonelliModel::new(
            Domain::torus(1),
            Potential::Tabulated(PeriodicSpline::new(samples).unwrap()),
        )
        .unwrap();
        let cos = pendulum();
        let start = PhasePoint { x: [0.2, 0.0], p: [0.5, 0.0] };
        let a = tab.flow_endpoint(start, 0.5, 2000).unwrap();
        let b = cos.flow_endpoint(start, 0.5, 2000).unwrap();
        assert!(
            cos.domain().dist(a.x, b.x) < 1e-5,
            "tabulated cosine should reproduce the analytic cosine flow"
        );
    }

    #[test]
    fn tabulated_potential_rejected_off_torus1() {
        let spline = PeriodicSpline::new(vec![0.0, 1.0, 0.0, -1.0]).unwrap();
        assert!(TonelliModel::new(Domain::torus(2), Potential::Tabulated(spline)).is_err());
    }

    #[test]
    fn box_domain_rejects_outside_queries() {
        let m = TonelliModel::new(Domain::unit_box(1), Potential::Zero).unwrap();
        assert!(m.lagrangian([1.5, 0.0], [0.0, 0.0]).is_err());
        assert!(m.hamiltonian([-0.1, 0.0], [0.0, 0.0]).is_err());
    }
}
