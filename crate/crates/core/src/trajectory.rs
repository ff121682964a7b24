//! Free flight inside `Ω`: backward exit times, their derivatives, the
//! functional `α` that controls distance to the grazing set, and the
//! bounce-gap lower bound.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, LevelSetDomain, DEFAULT_GRAZE_TOL};
use crate::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("velocity is zero")]
    ZeroVelocity,
    #[error("point lies outside the closed domain (distance estimate {0:.3e})")]
    OutsideDomain(f64),
    #[error("backward exit is grazing (v·n = {0:.3e}); exit-time derivatives are singular")]
    GrazingExit(f64),
    #[error("free-flight segment leaves the closed domain at s = {0}")]
    SegmentLeavesDomain(f64),
    #[error("domain is not strictly convex (smallest Hessian eigenvalue {0:.3e})")]
    NotConvex(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Vec3,
    pub v: Vec3,
}

impl PhasePoint {
    pub fn new(x: Vec3, v: Vec3) -> Self {
        Self { x, v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExitRecord {
    pub t_b: f64,
    pub x_b: Vec3,
    pub normal: Vec3,
    /// `v·n(x_b)`, never meaningfully positive.
    pub dot: f64,
    pub grazing: bool,
}

/// Backward exit with the default grazing band `|v·n| ≤ 1e-8·|v|`.
pub fn backward_exit(domain: &LevelSetDomain, p: &PhasePoint) -> Result<ExitRecord, TrajectoryError> {
    backward_exit_tol(domain, p, DEFAULT_GRAZE_TOL)
}

/// `t_b = sup{τ ≥ 0 : x - τv ∈ Ω̄}` and `x_b = x - t_b v`.
pub fn backward_exit_tol(
    domain: &LevelSetDomain,
    p: &PhasePoint,
    graze_tol: f64,
) -> Result<ExitRecord, TrajectoryError> {
    let speed = p.v.norm();
    if speed == 0.0 {
        return Err(TrajectoryError::ZeroVelocity);
    }
    if domain.xi(&p.x) > 0.0 {
        let d = domain.boundary_distance(&p.x);
        if d > domain.boundary_tol() {
            return Err(TrajectoryError::OutsideDomain(d));
        }
    }
    let t_b = domain.ray_exit(&p.x, &(-p.v)).map_err(|e| match e {
        GeometryError::ZeroDirection => TrajectoryError::ZeroVelocity,
        other => TrajectoryError::Geometry(other),
    })?;
    let x_b = p.x - p.v * t_b;
    let normal = domain.normal(&x_b)?;
    let dot = p.v.dot(&normal);
    Ok(ExitRecord {
        t_b,
        x_b,
        normal,
        dot,
        grazing: dot.abs() <= graze_tol * speed,
    })
}

/// Forward exit time `sup{τ ≥ 0 : x + τv ∈ Ω̄}`.
pub fn forward_exit(domain: &LevelSetDomain, p: &PhasePoint) -> Result<f64, TrajectoryError> {
    backward_exit(domain, &PhasePoint::new(p.x, -p.v)).map(|r| r.t_b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExitGradients {
    pub grad_x_tb: Vec3,
    pub grad_v_tb: Vec3,
    /// `[i][j] = ∂x_b^i / ∂x^j`
    pub grad_x_xb: Matrix3<f64>,
    /// `[i][j] = ∂x_b^i / ∂v^j`
    pub grad_v_xb: Matrix3<f64>,
}

/// Derivatives of `(t_b, x_b)` from implicit differentiation of
/// `ξ(x - t_b v) = 0`. Requires a non-grazing exit.
pub fn exit_gradients(domain: &LevelSetDomain, p: &PhasePoint) -> Result<ExitGradients, TrajectoryError> {
    let rec = backward_exit(domain, p)?;
    if rec.grazing {
        return Err(TrajectoryError::GrazingExit(rec.dot));
    }
    let n = rec.normal;
    let grad_x_tb = n / rec.dot;
    let grad_v_tb = -n * (rec.t_b / rec.dot);
    let grad_x_xb = Matrix3::identity() - p.v * grad_x_tb.transpose();
    let grad_v_xb = -Matrix3::identity() * rec.t_b - p.v * grad_v_tb.transpose();
    Ok(ExitGradients {
        grad_x_tb,
        grad_v_tb,
        grad_x_xb,
        grad_v_xb,
    })
}

/// `ξ² + (v·∇ξ)² - 2(v·∇²ξ·v)ξ` at a phase point.
pub fn alpha(domain: &LevelSetDomain, p: &PhasePoint) -> f64 {
    let xi = domain.xi(&p.x);
    let g = domain.grad_xi(&p.x).dot(&p.v);
    let h = (p.v.transpose() * domain.hess_xi(&p.x) * p.v)[(0, 0)];
    xi * xi + g * g - 2.0 * h * xi
}

/// Rate constant `C` in `|α'| ≤ C(|v| + 1)α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GronwallConstant {
    pub c_xi: f64,
}

impl GronwallConstant {
    pub fn new(c_xi: f64) -> Self {
        Self { c_xi }
    }

    /// `max(1, sup|∇³ξ| / c_ξ)`: exact for quadrics, sampled and doubled
    /// otherwise.
    pub fn certified(domain: &LevelSetDomain) -> Result<Self, TrajectoryError> {
        if domain.certified_c_xi().is_some() {
            // quadrics: ∇³ξ ≡ 0
            return Ok(Self { c_xi: 1.0 });
        }
        let mut rng = crate::rng::stream(0x6a0f, 5);
        let mut third: f64 = 0.0;
        let mut lower = f64::INFINITY;
        for _ in 0..400 {
            let x = domain.sample_interior(&mut rng);
            third = third.max(domain.third_derivative_norm(&x));
            lower = lower.min(SymmetricEigen::new(domain.hess_xi(&x)).eigenvalues.min());
        }
        if !(lower > 0.0) {
            return Err(TrajectoryError::NotConvex(lower));
        }
        Ok(Self {
            c_xi: (2.0 * third / lower).max(1.0),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VelocityLemmaReport {
    pub ok: bool,
    /// Smallest relative slack over all checked pairs; negative means violated.
    pub worst_margin: f64,
}

const CHECKPOINTS: usize = 32;

/// Both Gronwall comparisons for `X(s) = x + s·v`, `s ∈ [t1, t2]`, between
/// every ordered pair of the endpoints and 32 interior checkpoints.
pub fn velocity_lemma_check(
    domain: &LevelSetDomain,
    p: &PhasePoint,
    t1: f64,
    t2: f64,
    c: GronwallConstant,
) -> Result<VelocityLemmaReport, TrajectoryError> {
    let (t1, t2) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
    let slack = 1e-9 * domain.bounding_radius();
    let n = CHECKPOINTS + 2;
    let mut s = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    for i in 0..n {
        let si = t1 + (t2 - t1) * i as f64 / (n - 1) as f64;
        let x = p.x + p.v * si;
        if domain.xi(&x) > 0.0 && domain.boundary_distance(&x) > slack {
            return Err(TrajectoryError::SegmentLeavesDomain(si));
        }
        s.push(si);
        a.push(alpha(domain, &PhasePoint::new(x, p.v)));
    }
    let k = c.c_xi * (p.v.norm() + 1.0);
    let mut worst = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let grow = (k * (s[j] - s[i])).exp();
            // e^{K s_i} α_i ≤ e^{K s_j} α_j
            let lhs = a[i];
            let rhs = a[j] * grow;
            worst = worst.min(relative_slack(rhs, lhs));
            // e^{-K s_i} α_i ≥ e^{-K s_j} α_j
            let rhs = a[j] / grow;
            worst = worst.min(relative_slack(a[i], rhs));
        }
    }
    Ok(VelocityLemmaReport {
        ok: worst >= -1e-10,
        worst_margin: worst,
    })
}

/// `(big - small) / max(|big|, |small|)`, zero when both vanish.
fn relative_slack(big: f64, small: f64) -> f64 {
    let scale = big.abs().max(small.abs());
    if scale == 0.0 {
        0.0
    } else {
        (big - small) / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BounceGapReport {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

/// `|t1 - t2| ≥ |n(x1)·v| / (C|v|²)` for two boundary points joined by a
/// free flight, with `C` the maximal boundary curvature of the domain.
pub fn bounce_gap_bound(
    domain: &LevelSetDomain,
    x1: &Vec3,
    x2: &Vec3,
    v: &Vec3,
    t1: f64,
    t2: f64,
) -> Result<BounceGapReport, TrajectoryError> {
    let speed2 = v.norm_squared();
    if speed2 == 0.0 {
        return Err(TrajectoryError::ZeroVelocity);
    }
    let n1 = domain.outward_normal(x1)?;
    domain.outward_normal(x2)?;
    let tol = 1e-9 * domain.bounding_radius();
    // x1 = x2 + v (t1 - t2)
    if (x1 - x2 - v * (t1 - t2)).norm() > tol {
        return Err(TrajectoryError::SegmentLeavesDomain(t1));
    }
    let mid = (x1 + x2) * 0.5;
    if domain.xi(&mid) > 0.0 && domain.boundary_distance(&mid) > tol {
        return Err(TrajectoryError::SegmentLeavesDomain(0.5 * (t1 + t2)));
    }
    let lhs = (t1 - t2).abs();
    let rhs = n1.dot(v).abs() / (domain.curvature_bound() * speed2);
    Ok(BounceGapReport {
        lhs,
        rhs,
        ok: lhs >= rhs * (1.0 - 1e-12),
    })
}
