//! Level-set description of the spatial domain `Ω = {ξ < 0}`.
//!
//! Builtin balls and ellipsoids carry closed-form derivatives. Custom domains
//! supply only `ξ`; their gradient and Hessian come from central differences.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::Vec3;

/// Default band on `v·n` treated as grazing.
pub const DEFAULT_GRAZE_TOL: f64 = 1e-8;

/// Scalar level-set function for custom domains.
pub type LevelFn = Arc<dyn Fn(&Vec3) -> f64 + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("gradient of the level set vanishes at {0:?}")]
    ZeroGradient([f64; 3]),
    #[error("point is not on the boundary (distance estimate {distance:.3e} exceeds {tol:.3e})")]
    NotOnBoundary { distance: f64, tol: f64 },
    #[error("no boundary point found along the ray from {origin:?} in direction {direction:?}")]
    ProjectionFailed { origin: [f64; 3], direction: [f64; 3] },
    #[error("ray never leaves the bounding ball; the level set is inconsistent with its bounding radius")]
    NoExit,
    #[error("direction vector has zero length")]
    ZeroDirection,
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Ball,
    Ellipsoid,
    Custom,
}

#[derive(Clone)]
enum Shape {
    /// `Σ (x_i - c_i)² / a_i² - 1`
    Ellipsoid { center: Vec3, semi_axes: Vec3 },
    Custom { xi: LevelFn },
}

/// Strictly convex (or custom) region `Ω = {x : ξ(x) < 0}`.
#[derive(Clone)]
pub struct LevelSetDomain {
    shape: Shape,
    kind: DomainKind,
    level_scale: f64,
    center: Vec3,
    bounding_radius: f64,
    witness: Vec3,
}

impl fmt::Debug for LevelSetDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("LevelSetDomain");
        d.field("kind", &self.kind);
        if let Shape::Ellipsoid { center, semi_axes } = &self.shape {
            d.field("center", center).field("semi_axes", semi_axes);
        }
        d.field("level_scale", &self.level_scale)
            .field("bounding_radius", &self.bounding_radius)
            .finish()
    }
}

impl LevelSetDomain {
    pub fn unit_ball() -> Self {
        Self::ball(1.0).expect("unit ball is valid")
    }

    pub fn ball(radius: f64) -> Result<Self, GeometryError> {
        Self::ball_at(Vector3::zeros(), radius)
    }

    pub fn ball_at(center: Vec3, radius: f64) -> Result<Self, GeometryError> {
        let mut d = Self::ellipsoid(center, Vector3::new(radius, radius, radius))?;
        d.kind = DomainKind::Ball;
        Ok(d)
    }

    pub fn ellipsoid(center: Vec3, semi_axes: Vec3) -> Result<Self, GeometryError> {
        if semi_axes.iter().any(|a| !(a.is_finite() && *a > 0.0)) || !center.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::InvalidDomain(format!(
                "semi-axes must be positive and finite, got {:?}",
                semi_axes.as_slice()
            )));
        }
        Ok(Self {
            shape: Shape::Ellipsoid { center, semi_axes },
            kind: DomainKind::Ellipsoid,
            level_scale: 1.0,
            center,
            bounding_radius: semi_axes.max(),
            witness: center,
        })
    }

    /// Custom level set. `witness` must satisfy `ξ(witness) < 0` and every
    /// point of `Ω` must lie within `bounding_radius` of it.
    pub fn custom(xi: LevelFn, witness: Vec3, bounding_radius: f64) -> Result<Self, GeometryError> {
        if !(bounding_radius.is_finite() && bounding_radius > 0.0) {
            return Err(GeometryError::InvalidDomain("bounding radius must be positive".into()));
        }
        if !(xi(&witness) < 0.0) {
            return Err(GeometryError::InvalidDomain(
                "interior witness must satisfy xi < 0".into(),
            ));
        }
        Ok(Self {
            shape: Shape::Custom { xi },
            kind: DomainKind::Custom,
            level_scale: 1.0,
            center: witness,
            bounding_radius,
            witness,
        })
    }

    /// Same region described by `s·ξ`.
    pub fn scaled(&self, s: f64) -> Result<Self, GeometryError> {
        if !(s.is_finite() && s > 0.0) {
            return Err(GeometryError::InvalidDomain("level scale must be positive".into()));
        }
        let mut d = self.clone();
        d.level_scale *= s;
        Ok(d)
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn bounding_radius(&self) -> f64 {
        self.bounding_radius
    }

    pub fn bounding_center(&self) -> Vec3 {
        self.center
    }

    pub fn interior_witness(&self) -> Vec3 {
        self.witness
    }

    /// Semi-axes of builtin domains.
    pub fn semi_axes(&self) -> Option<(Vec3, Vec3)> {
        match &self.shape {
            Shape::Ellipsoid { center, semi_axes } => Some((*center, *semi_axes)),
            Shape::Custom { .. } => None,
        }
    }

    /// Distance band around `ξ = 0` accepted as "on the boundary".
    pub fn boundary_tol(&self) -> f64 {
        1e-10 * self.bounding_radius
    }

    fn fd_step(&self) -> f64 {
        1e-6 * self.bounding_radius
    }

    fn fd_step_second(&self) -> f64 {
        1e-4 * self.bounding_radius
    }

    pub fn xi(&self, x: &Vec3) -> f64 {
        let raw = match &self.shape {
            Shape::Ellipsoid { center, semi_axes } => {
                let d = x - center;
                (0..3).map(|i| (d[i] / semi_axes[i]).powi(2)).sum::<f64>() - 1.0
            }
            Shape::Custom { xi } => xi(x),
        };
        self.level_scale * raw
    }

    pub fn grad_xi(&self, x: &Vec3) -> Vec3 {
        match &self.shape {
            Shape::Ellipsoid { center, semi_axes } => {
                let d = x - center;
                Vector3::from_fn(|i, _| 2.0 * self.level_scale * d[i] / (semi_axes[i] * semi_axes[i]))
            }
            Shape::Custom { .. } => {
                let h = self.fd_step();
                Vector3::from_fn(|i, _| {
                    let mut e = Vector3::zeros();
                    e[i] = h;
                    (self.xi(&(x + e)) - self.xi(&(x - e))) / (2.0 * h)
                })
            }
        }
    }

    /// Symmetric Hessian of `ξ`.
    pub fn hess_xi(&self, x: &Vec3) -> Matrix3<f64> {
        match &self.shape {
            Shape::Ellipsoid { semi_axes, .. } => Matrix3::from_diagonal(&Vector3::from_fn(|i, _| {
                2.0 * self.level_scale / (semi_axes[i] * semi_axes[i])
            })),
            Shape::Custom { .. } => {
                let h = self.fd_step_second();
                let f0 = self.xi(x);
                let mut m = Matrix3::zeros();
                for i in 0..3 {
                    let mut ei = Vector3::zeros();
                    ei[i] = h;
                    m[(i, i)] = (self.xi(&(x + ei)) - 2.0 * f0 + self.xi(&(x - ei))) / (h * h);
                    for j in (i + 1)..3 {
                        let mut ej = Vector3::zeros();
                        ej[j] = h;
                        let v = (self.xi(&(x + ei + ej)) - self.xi(&(x + ei - ej)) - self.xi(&(x - ei + ej))
                            + self.xi(&(x - ei - ej)))
                            / (4.0 * h * h);
                        m[(i, j)] = v;
                        m[(j, i)] = v;
                    }
                }
                m
            }
        }
    }

    /// Frobenius norm of the third-derivative tensor of `ξ` at `x`.
    pub fn third_derivative_norm(&self, x: &Vec3) -> f64 {
        match &self.shape {
            Shape::Ellipsoid { .. } => 0.0,
            Shape::Custom { .. } => {
                let h = 1e-3 * self.bounding_radius;
                let mut sq = 0.0;
                for k in 0..3 {
                    let mut e = Vector3::zeros();
                    e[k] = h;
                    let d = (self.hess_xi(&(x + e)) - self.hess_xi(&(x - e))) / (2.0 * h);
                    sq += d.norm_squared();
                }
                sq.sqrt()
            }
        }
    }

    /// First-order distance estimate `|ξ|/|∇ξ|`.
    pub fn boundary_distance(&self, x: &Vec3) -> f64 {
        let g = self.grad_xi(x).norm();
        if g == 0.0 {
            f64::INFINITY
        } else {
            self.xi(x).abs() / g
        }
    }

    pub fn is_on_boundary(&self, x: &Vec3) -> bool {
        self.boundary_distance(x) <= self.boundary_tol()
    }

    /// `∇ξ/|∇ξ|` wherever the gradient is nonzero; no boundary check.
    pub fn normal(&self, x: &Vec3) -> Result<Vec3, GeometryError> {
        let g = self.grad_xi(x);
        let n = g.norm();
        if n < 1e-14 {
            return Err(GeometryError::ZeroGradient([x.x, x.y, x.z]));
        }
        Ok(g / n)
    }

    /// Outward unit normal at a boundary point.
    pub fn outward_normal(&self, x: &Vec3) -> Result<Vec3, GeometryError> {
        let g = self.grad_xi(x);
        let gn = g.norm();
        if gn < 1e-14 {
            return Err(GeometryError::ZeroGradient([x.x, x.y, x.z]));
        }
        let distance = self.xi(x).abs() / gn;
        let tol = self.boundary_tol();
        if distance > tol {
            return Err(GeometryError::NotOnBoundary { distance, tol });
        }
        Ok(g / gn)
    }

    /// Reflection `R(x)v = v - 2(n·v)n`.
    pub fn reflect(&self, x: &Vec3, v: &Vec3) -> Result<Vec3, GeometryError> {
        let n = self.normal(x)?;
        Ok(v - n * (2.0 * n.dot(v)))
    }

    /// `sup{τ ≥ 0 : x + τ·dir ∈ Ω̄}`.
    ///
    /// Marches with step `R/64` (in length) from the first interior sample,
    /// then bisects the bracketing step and polishes with Newton. Points in
    /// the boundary band look for an interior sample by halving the first
    /// step, so short near-grazing chords are still found.
    pub fn ray_exit(&self, x: &Vec3, dir: &Vec3) -> Result<f64, GeometryError> {
        let speed = dir.norm();
        if speed == 0.0 {
            return Err(GeometryError::ZeroDirection);
        }
        let r = self.bounding_radius;
        let h = r / 64.0 / speed;
        let near_wall = self.boundary_distance(x) <= 1e3 * self.boundary_tol();
        if let Shape::Ellipsoid { center, semi_axes } = &self.shape {
            return quadric_exit(&(x - center), dir, semi_axes, near_wall, h);
        }
        let at = |tau: f64| self.xi(&(x + dir * tau));

        let mut tau_in = if at(0.0) < 0.0 && !near_wall { Some(0.0) } else { None };
        let mut step = h;
        if tau_in.is_none() {
            let mut tau = h;
            for _ in 0..60 {
                if at(tau) < 0.0 {
                    tau_in = Some(tau);
                    break;
                }
                tau *= 0.5;
            }
            match tau_in {
                Some(t) => step = step.min(t.max(h / 64.0)),
                None => {
                    if at(0.0) <= 0.0 || near_wall {
                        return Ok(0.0);
                    }
                    return Err(GeometryError::ProjectionFailed {
                        origin: [x.x, x.y, x.z],
                        direction: [dir.x, dir.y, dir.z],
                    });
                }
            }
        }
        let mut lo = tau_in.unwrap();
        let tau_max = lo + 2.0 * r / speed + 2.0 * h;
        let mut hi = lo + step;
        loop {
            if at(hi) > 0.0 {
                break;
            }
            lo = hi;
            hi += h;
            if hi > tau_max {
                return Err(GeometryError::NoExit);
            }
        }
        while hi - lo > 1e-13 * hi.max(h * 1e-6) {
            let mid = 0.5 * (lo + hi);
            if at(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let mut tau = 0.5 * (lo + hi);
        for _ in 0..2 {
            let p = x + dir * tau;
            let slope = self.grad_xi(&p).dot(dir);
            if slope <= 0.0 {
                break;
            }
            let next = tau - self.xi(&p) / slope;
            if next >= lo - 1e-15 * hi && next <= hi + 1e-15 * hi {
                tau = next;
            } else {
                break;
            }
        }
        Ok(tau)
    }

    /// Boundary point hit by the ray from the interior witness along `dir`.
    pub fn project_from_witness(&self, dir: &Vec3) -> Result<Vec3, GeometryError> {
        let tau = self.ray_exit(&self.witness, dir)?;
        if tau == 0.0 {
            return Err(GeometryError::ProjectionFailed {
                origin: [self.witness.x, self.witness.y, self.witness.z],
                direction: [dir.x, dir.y, dir.z],
            });
        }
        Ok(self.witness + dir * tau)
    }

    /// Curvature constant `C` with `|t₁ - t₂| ≥ |n(x₁)·v| / (C|v|²)` for
    /// boundary-to-boundary chords: the maximum of `λ_max(∇²ξ)/|∇ξ|` on the
    /// boundary. Closed form for builtins, sampled maximum times 2 otherwise.
    pub fn curvature_bound(&self) -> f64 {
        match &self.shape {
            Shape::Ellipsoid { semi_axes, .. } => semi_axes.max() / semi_axes.min().powi(2),
            Shape::Custom { .. } => {
                let mut rng = rng::stream(0x5eed_c0de, 11);
                let mut worst: f64 = 0.0;
                for _ in 0..2000 {
                    let d = random_direction(&mut rng);
                    if let Ok(x) = self.project_from_witness(&d) {
                        let h = SymmetricEigen::new(self.hess_xi(&x)).eigenvalues.max();
                        let g = self.grad_xi(&x).norm();
                        if g > 0.0 {
                            worst = worst.max(h / g);
                        }
                    }
                }
                2.0 * worst
            }
        }
    }

    /// Strict-convexity constant known in closed form (builtins only).
    pub fn certified_c_xi(&self) -> Option<f64> {
        match &self.shape {
            Shape::Ellipsoid { semi_axes, .. } => Some(2.0 * self.level_scale / semi_axes.max().powi(2)),
            Shape::Custom { .. } => None,
        }
    }

    /// Uniform sample from `Ω̄` by rejection from the bounding ball.
    pub fn sample_interior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        loop {
            let p = self.center
                + Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ) * self.bounding_radius;
            if (p - self.center).norm() <= self.bounding_radius && self.xi(&p) < 0.0 {
                return p;
            }
        }
    }
}

pub(crate) fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Axis of rotational symmetry: pivot `x0` and direction `varpi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetryAxis {
    pub x0: Vec3,
    pub varpi: Vec3,
}

impl SymmetryAxis {
    pub fn new(x0: Vec3, varpi: Vec3) -> Result<Self, GeometryError> {
        if varpi.norm() == 0.0 {
            return Err(GeometryError::ZeroDirection);
        }
        Ok(Self { x0, varpi })
    }

    /// `{(x - x0) × ϖ̂}`: the rigid-rotation field whose moment is conserved.
    pub fn rotation_field(&self, x: &Vec3) -> Vec3 {
        (x - self.x0).cross(&self.varpi.normalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryClass {
    Incoming,
    Outgoing,
    Grazing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub passed: bool,
    pub observed_c_xi: f64,
    pub samples: usize,
}

/// Sample-based strict-convexity certificate: smallest Hessian eigenvalue
/// over the interior witness and `sample_count` random points of `Ω̄`.
pub fn check_convexity(domain: &LevelSetDomain, sample_count: usize, seed: u64) -> ConvexityReport {
    let mut rng = rng::stream(seed, 0xc0de);
    let min_eig = |x: &Vec3| SymmetricEigen::new(domain.hess_xi(x)).eigenvalues.min();
    let mut observed = min_eig(&domain.interior_witness());
    for _ in 0..sample_count.max(1) {
        let x = domain.sample_interior(&mut rng);
        observed = observed.min(min_eig(&x));
    }
    ConvexityReport {
        passed: observed > 0.0,
        observed_c_xi: observed,
        samples: sample_count.max(1) + 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymmetryReport {
    pub max_violation: f64,
    pub samples: usize,
}

/// Largest `|{(x - x0) × ϖ̂}·n(x)|` over boundary points obtained by
/// projecting random directions from the interior witness. `ϖ` is normalised.
pub fn check_rotational_symmetry(
    domain: &LevelSetDomain,
    axis: &SymmetryAxis,
    sample_count: usize,
    seed: u64,
) -> Result<SymmetryReport, GeometryError> {
    let mut rng = rng::stream(seed, 0xa815);
    let mut worst: f64 = 0.0;
    for _ in 0..sample_count {
        let d = random_direction(&mut rng);
        let x = domain.project_from_witness(&d)?;
        let n = domain.normal(&x)?;
        worst = worst.max(axis.rotation_field(&x).dot(&n).abs());
    }
    Ok(SymmetryReport {
        max_violation: worst,
        samples: sample_count,
    })
}

/// Split of the phase boundary by the sign of `n(x)·v` against `graze_tol`.
pub fn classify_boundary(
    domain: &LevelSetDomain,
    x: &Vec3,
    v: &Vec3,
    graze_tol: f64,
) -> Result<BoundaryClass, GeometryError> {
    let n = domain.outward_normal(x)?;
    let d = n.dot(v);
    Ok(if d > graze_tol {
        BoundaryClass::Outgoing
    } else if d < -graze_tol {
        BoundaryClass::Incoming
    } else {
        BoundaryClass::Grazing
    })
}

/// Domain description as it appears in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    #[serde(rename = "type")]
    pub kind: DomainKind,
    #[serde(default = "unit_axes")]
    pub semi_axes: [f64; 3],
    #[serde(default)]
    pub center: [f64; 3],
}

fn unit_axes() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            kind: DomainKind::Ball,
            semi_axes: unit_axes(),
            center: [0.0; 3],
        }
    }
}

impl DomainSpec {
    pub fn build(&self) -> Result<LevelSetDomain, GeometryError> {
        let center = Vector3::from(self.center);
        match self.kind {
            DomainKind::Ball => {
                let [a, b, c] = self.semi_axes;
                if (a - b).abs() > 0.0 || (a - c).abs() > 0.0 {
                    return Err(GeometryError::InvalidDomain(
                        "a ball needs three equal semi-axes".into(),
                    ));
                }
                LevelSetDomain::ball_at(center, a)
            }
            DomainKind::Ellipsoid => LevelSetDomain::ellipsoid(center, Vector3::from(self.semi_axes)),
            DomainKind::Custom => Err(GeometryError::InvalidDomain(
                "custom domains need a level-set closure and must be built through the library".into(),
            )),
        }
    }
}

/// Largest root of `|(y + τ d)/a|² = 1`, with the same wall conventions as
/// the marching search.
fn quadric_exit(y: &Vec3, dir: &Vec3, semi_axes: &Vec3, near_wall: bool, h: f64) -> Result<f64, GeometryError> {
    let ys = y.component_div(semi_axes);
    let ds = dir.component_div(semi_axes);
    let a = ds.norm_squared();
    let b = ys.dot(&ds);
    let c = ys.norm_squared() - 1.0;
    let disc = b * b - a * c;
    let failed = || GeometryError::ProjectionFailed {
        origin: [y.x, y.y, y.z],
        direction: [dir.x, dir.y, dir.z],
    };
    if near_wall || c >= 0.0 {
        if b >= 0.0 || disc < 0.0 {
            return if near_wall || c <= 0.0 { Ok(0.0) } else { Err(failed()) };
        }
        let sq = disc.sqrt();
        let (lo, hi) = ((-b - sq) / a, (-b + sq) / a);
        if !near_wall && lo > h {
            return Err(failed());
        }
        return Ok(hi.max(0.0));
    }
    let sq = disc.max(0.0).sqrt();
    Ok(if b > 0.0 { -c / (b + sq) } else { (-b + sq) / a })
}
