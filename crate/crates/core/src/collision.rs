//! Maxwellian, weights, collision frequency, the linearized gain operator
//! `K`, the bilinear collision term `Γ`, kernel majorant bounds and the
//! wall flux measure.
//!
//! Collision integrals are computed directly from the definition: the
//! relative velocity `η = u - v` runs over a spherical product rule whose
//! pole follows `-v`, and the impact direction `ω` over a hemisphere about
//! `η` (the integrand is even in `ω`).

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::{frame_from_axis, Rule1d, SphereRule};
use crate::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollisionError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("{quantity} is under-resolved: refinement changes it by {rel_diff:.3e} (limit {limit:.1e})")]
    QuadratureUnderResolved {
        quantity: &'static str,
        rel_diff: f64,
        limit: f64,
    },
    #[error("majorant is singular on the diagonal (|v - v'| = {0:.3e})")]
    DiagonalSingularity(f64),
}

pub fn maxwellian(v: &Vec3) -> f64 {
    (-0.5 * v.norm_squared()).exp()
}

pub fn sqrt_maxwellian(v: &Vec3) -> f64 {
    (-0.25 * v.norm_squared()).exp()
}

/// `w(v) = (1 + ρ|v|²)^β e^{θ|v|²}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub rho: f64,
    pub beta: f64,
    pub theta: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        Self {
            rho: 1.0,
            beta: 0.0,
            theta: 0.2,
        }
    }
}

impl WeightParams {
    pub fn new(rho: f64, beta: f64, theta: f64) -> Result<Self, CollisionError> {
        let p = Self { rho, beta, theta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CollisionError> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(CollisionError::InvalidParams(format!("rho must be positive, got {}", self.rho)));
        }
        if !(0.0..0.25).contains(&self.theta) {
            return Err(CollisionError::InvalidParams(format!(
                "theta must lie in [0, 1/4), got {}",
                self.theta
            )));
        }
        if !self.beta.is_finite() {
            return Err(CollisionError::InvalidParams("beta must be finite".into()));
        }
        Ok(())
    }

    /// Whether `w^{-2}(1 + |v|)³` is integrable: always for `θ > 0`,
    /// otherwise the polynomial factor must beat `|v|^5`, i.e. `β > 3/2`.
    pub fn integrable(&self) -> bool {
        self.theta > 0.0 || 4.0 * self.beta > 6.0
    }

    pub fn w(&self, v: &Vec3) -> f64 {
        let s = v.norm_squared();
        (1.0 + self.rho * s).powf(self.beta) * (self.theta * s).exp()
    }

    /// `w̃ = 1 / (w √μ) = e^{(1/4 - θ)|v|²} / (1 + ρ|v|²)^β`.
    pub fn wtilde(&self, v: &Vec3) -> f64 {
        let s = v.norm_squared();
        ((0.25 - self.theta) * s).exp() / (1.0 + self.rho * s).powf(self.beta)
    }
}

pub fn weight_w(params: &WeightParams, v: &Vec3) -> f64 {
    params.w(v)
}

pub fn weight_wtilde(params: &WeightParams, v: &Vec3) -> f64 {
    params.wtilde(v)
}

/// Node counts for the relative-velocity rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UQuadrature {
    /// Radial truncation beyond `|v|`.
    pub u_max: f64,
    /// Gauss points per unit radial panel.
    pub radial_nodes: usize,
    /// Gauss points per polar panel (four graded panels).
    pub polar_nodes: usize,
    pub azimuth_nodes: usize,
}

impl Default for UQuadrature {
    fn default() -> Self {
        Self {
            u_max: 8.0,
            radial_nodes: 6,
            polar_nodes: 6,
            azimuth_nodes: 16,
        }
    }
}

/// Hemisphere rule for the impact direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OmegaQuadrature {
    pub polar_nodes: usize,
    pub azimuth_nodes: usize,
}

impl Default for OmegaQuadrature {
    fn default() -> Self {
        Self {
            polar_nodes: 4,
            azimuth_nodes: 8,
        }
    }
}

/// Cross section `|v - u|^γ q0(θ̃)` with `q0 = angular_scale·|cos θ̃|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub gamma: f64,
    pub angular_scale: f64,
    pub u_quadrature: UQuadrature,
    pub omega_quadrature: OmegaQuadrature,
    pub seed: u64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            angular_scale: 1.0,
            u_quadrature: UQuadrature::default(),
            omega_quadrature: OmegaQuadrature::default(),
            seed: 0,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<(), CollisionError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(CollisionError::InvalidParams(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.angular_scale > 0.0 && self.angular_scale.is_finite()) {
            return Err(CollisionError::InvalidParams("angular_scale must be positive".into()));
        }
        let u = &self.u_quadrature;
        let o = &self.omega_quadrature;
        if u.radial_nodes == 0 || u.polar_nodes == 0 || u.azimuth_nodes == 0 || o.polar_nodes == 0 || o.azimuth_nodes == 0 {
            return Err(CollisionError::InvalidParams("quadrature node counts must be positive".into()));
        }
        if !(u.u_max > 0.0) {
            return Err(CollisionError::InvalidParams("u_max must be positive".into()));
        }
        Ok(())
    }

    /// Same cross section with `angular_scale` chosen so that `ν(0) = 1`.
    pub fn normalized(mut self) -> Self {
        self.angular_scale = 1.0;
        let nu0 = nu_radial(&self, 0.0, 1);
        self.angular_scale = 1.0 / nu0;
        self
    }

    /// Every node count doubled, for refinement checks.
    pub fn refined(mut self) -> Self {
        self.u_quadrature.radial_nodes *= 2;
        self.u_quadrature.polar_nodes *= 2;
        self.u_quadrature.azimuth_nodes *= 2;
        self.omega_quadrature.polar_nodes *= 2;
        self.omega_quadrature.azimuth_nodes *= 2;
        self
    }
}

/// `ν` at speed `s` without the refinement check.
pub fn nu_at_speed(cfg: &KernelConfig, s: f64) -> f64 {
    nu_radial(cfg, s, 1)
}

/// `ν(v) = (2π·scale)·∫|η|^γ μ(v + η) dη`; the angular and polar
/// integrals are done in closed form, leaving one radial integral.
fn nu_radial(cfg: &KernelConfig, s: f64, refine: usize) -> f64 {
    let top = s + 14.0;
    let panels = (2.0 * top).ceil() as usize * refine;
    let rule = Rule1d::composite(0.0, top, panels, 8);
    let g = cfg.gamma;
    let radial = if s < 1e-8 {
        rule.integrate(|r| 2.0 * r.powf(2.0 + g) * (-0.5 * r * r).exp())
    } else {
        rule.integrate(|r| r.powf(1.0 + g) * (-0.5 * (r - s) * (r - s)).exp() * -(-2.0 * r * s).exp_m1()) / s
    };
    cfg.angular_scale * 4.0 * PI * PI * radial
}

/// Collision frequency with a refinement check at tolerance `1e-4`.
pub fn collision_frequency(cfg: &KernelConfig, v: &Vec3) -> Result<f64, CollisionError> {
    let s = v.norm();
    let a = nu_radial(cfg, s, 1);
    let b = nu_radial(cfg, s, 2);
    let rel = (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
    if rel > 1e-4 {
        return Err(CollisionError::QuadratureUnderResolved {
            quantity: "collision frequency",
            rel_diff: rel,
            limit: 1e-4,
        });
    }
    Ok(b)
}

/// Quadrature engine for collision integrals at a fixed configuration.
#[derive(Debug, Clone)]
pub struct CollisionQuadrature {
    cfg: KernelConfig,
    hemisphere: SphereRule,
    polar: Rule1d,
    azimuth: Rule1d,
}

const POLAR_BREAKS: [f64; 5] = [-1.0, 0.0, 0.6, 0.9, 1.0];

impl CollisionQuadrature {
    pub fn new(cfg: KernelConfig) -> Result<Self, CollisionError> {
        cfg.validate()?;
        let o = cfg.omega_quadrature;
        let hemisphere = SphereRule::band(&Vector3::z(), 0.0, 1.0, o.polar_nodes, o.azimuth_nodes);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for w in POLAR_BREAKS.windows(2) {
            let r = Rule1d::gauss(w[0], w[1], cfg.u_quadrature.polar_nodes);
            nodes.extend(r.nodes);
            weights.extend(r.weights);
        }
        Ok(Self {
            cfg,
            hemisphere,
            polar: Rule1d { nodes, weights },
            azimuth: Rule1d::periodic(cfg.u_quadrature.azimuth_nodes),
        })
    }

    pub fn config(&self) -> &KernelConfig {
        &self.cfg
    }

    pub fn nu(&self, v: &Vec3) -> f64 {
        nu_radial(&self.cfg, v.norm(), 1)
    }

    /// Calls `visit(weight, u)` over the relative-velocity rule, where
    /// `weight` carries `|η|^γ dη` and `u = v + η`.
    pub fn for_each_u(&self, v: &Vec3, mut visit: impl FnMut(f64, &Vec3)) {
        let s = v.norm();
        let axis = if s > 1e-12 { -v / s } else { Vector3::z() };
        let (e1, e2, a) = frame_from_axis(&axis);
        let top = s + self.cfg.u_quadrature.u_max;
        let radial = Rule1d::composite(0.0, top, top.ceil() as usize, self.cfg.u_quadrature.radial_nodes);
        let g = self.cfg.gamma;
        let trig: Vec<(f64, f64)> = self.azimuth.nodes.iter().map(|p| (p.cos(), p.sin())).collect();
        for (&r, &wr) in radial.nodes.iter().zip(&radial.weights) {
            let wr = wr * r * r * r.powf(g);
            for (&c, &wc) in self.polar.nodes.iter().zip(&self.polar.weights) {
                let sn = (1.0 - c * c).max(0.0).sqrt();
                for (&(cp, sp), &wp) in trig.iter().zip(&self.azimuth.weights) {
                    let eta = (a * c + (e1 * cp + e2 * sp) * sn) * r;
                    visit(wr * wc * wp, &(v + eta));
                }
            }
        }
    }

    /// Calls `visit(weight, u, u', v')` over the full collision rule;
    /// `weight` carries `|η|^γ q0 dω dη` for the whole sphere of `ω`.
    pub fn for_each_collision(&self, v: &Vec3, mut visit: impl FnMut(f64, &Vec3, &Vec3, &Vec3)) {
        let scale = self.cfg.angular_scale;
        let hemi = &self.hemisphere;
        self.for_each_u(v, |w, u| {
            let eta = u - v;
            let r = eta.norm();
            if r == 0.0 {
                return;
            }
            let (f1, f2, f3) = frame_from_axis(&eta);
            for ((d, &c), &wo) in hemi.directions.iter().zip(&hemi.cosines).zip(&hemi.weights) {
                let omega = f1 * d.x + f2 * d.y + f3 * d.z;
                // (v - u)·ω = -r cos
                let shift = omega * (r * c);
                let up = u - shift;
                let vp = v + shift;
                visit(2.0 * w * wo * scale * c, u, &up, &vp);
            }
        });
    }

    /// `(Kf)(v) = ∫∫ B √μ(u)[√μ(u')f(v') + √μ(v')f(u') - √μ(v)f(u)]`.
    pub fn apply_k(&self, f: &dyn Fn(&Vec3) -> f64, v: &Vec3) -> f64 {
        let mut gain = 0.0;
        self.for_each_collision(v, |w, u, up, vp| {
            gain += w * sqrt_maxwellian(u) * (sqrt_maxwellian(up) * f(vp) + sqrt_maxwellian(vp) * f(up));
        });
        gain - self.loss_integral(&|u| sqrt_maxwellian(u) * f(u), v) * sqrt_maxwellian(v)
    }

    /// `(2π·scale)∫|η|^γ g(v + η) dη`, the `ω`-integrated loss moment.
    pub fn loss_integral(&self, g: &dyn Fn(&Vec3) -> f64, v: &Vec3) -> f64 {
        let mut acc = 0.0;
        self.for_each_u(v, |w, u| acc += w * g(u));
        2.0 * PI * self.cfg.angular_scale * acc
    }

    /// Several `Kf_i(v)` sharing one sweep of the rule.
    pub fn apply_k_many(&self, fs: &[&dyn Fn(&Vec3) -> f64], v: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; fs.len()];
        self.for_each_collision(v, |w, u, up, vp| {
            let su = sqrt_maxwellian(u);
            let (sup, svp) = (sqrt_maxwellian(up), sqrt_maxwellian(vp));
            for (o, f) in out.iter_mut().zip(fs) {
                *o += w * su * (sup * f(vp) + svp * f(up));
            }
        });
        let mut loss = vec![0.0; fs.len()];
        self.for_each_u(v, |w, u| {
            let su = sqrt_maxwellian(u);
            for (l, f) in loss.iter_mut().zip(fs) {
                *l += w * su * f(u);
            }
        });
        let c = 2.0 * PI * self.cfg.angular_scale * sqrt_maxwellian(v);
        out.iter().zip(&loss).map(|(g, l)| g - c * l).collect()
    }

    /// `(gain, loss)` of `Γ(f1, f2)(v)`.
    pub fn gamma_parts(&self, f1: &dyn Fn(&Vec3) -> f64, f2: &dyn Fn(&Vec3) -> f64, v: &Vec3) -> (f64, f64) {
        let mut gain = 0.0;
        self.for_each_collision(v, |w, u, up, vp| {
            gain += w * sqrt_maxwellian(u) * f1(up) * f2(vp);
        });
        let loss = f2(v) * self.loss_integral(&|u| sqrt_maxwellian(u) * f1(u), v);
        (gain, loss)
    }

    pub fn gamma(&self, f1: &dyn Fn(&Vec3) -> f64, f2: &dyn Fn(&Vec3) -> f64, v: &Vec3) -> f64 {
        let (g, l) = self.gamma_parts(f1, f2, v);
        g - l
    }

    /// `Q_gain(F, F)(v) = ∫∫ B F(u')F(v')`.
    pub fn q_gain(&self, big_f: &dyn Fn(&Vec3) -> f64, v: &Vec3) -> f64 {
        let mut acc = 0.0;
        self.for_each_collision(v, |w, _, up, vp| acc += w * big_f(up) * big_f(vp));
        acc
    }

    /// `ν(F)(v) = ∫∫ B F(u)`, so that `Q_loss(F, F) = F·ν(F)`.
    pub fn nu_of(&self, big_f: &dyn Fn(&Vec3) -> f64, v: &Vec3) -> f64 {
        self.loss_integral(big_f, v)
    }
}

fn refinement_gap(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(f64::MIN_POSITIVE)
}

/// `(Kf)(v)` with a refinement check: the value is recomputed with every
/// node count doubled and must agree to `1e-3` of the loss magnitude.
pub fn apply_k(cfg: &KernelConfig, f: &dyn Fn(&Vec3) -> f64, v: &Vec3) -> Result<f64, CollisionError> {
    let base = CollisionQuadrature::new(*cfg)?;
    let fine = CollisionQuadrature::new(cfg.refined())?;
    let a = base.apply_k(f, v);
    let b = fine.apply_k(f, v);
    let scale = fine.loss_integral(&|u| sqrt_maxwellian(u) * f(u).abs(), v) * sqrt_maxwellian(v);
    let gap = refinement_gap(a, b, scale.max(b.abs()));
    if gap > 1e-3 {
        return Err(CollisionError::QuadratureUnderResolved {
            quantity: "K",
            rel_diff: gap,
            limit: 1e-3,
        });
    }
    Ok(b)
}

/// `(K_w h)(v) = w(v)·K(h/w)(v)`.
pub fn apply_kw(
    cfg: &KernelConfig,
    params: &WeightParams,
    h: &dyn Fn(&Vec3) -> f64,
    v: &Vec3,
) -> Result<f64, CollisionError> {
    let f = |u: &Vec3| h(u) / params.w(u);
    Ok(params.w(v) * apply_k(cfg, &f, v)?)
}

/// `Γ(f1, f2)(v)` with the same refinement check as [`apply_k`].
pub fn gamma_bilinear(
    cfg: &KernelConfig,
    f1: &dyn Fn(&Vec3) -> f64,
    f2: &dyn Fn(&Vec3) -> f64,
    v: &Vec3,
) -> Result<f64, CollisionError> {
    let base = CollisionQuadrature::new(*cfg)?;
    let fine = CollisionQuadrature::new(cfg.refined())?;
    let a = base.gamma(f1, f2, v);
    let (g, l) = fine.gamma_parts(f1, f2, v);
    let gap = refinement_gap(a, g - l, g.abs().max(l.abs()));
    if gap > 1e-3 {
        return Err(CollisionError::QuadratureUnderResolved {
            quantity: "Gamma",
            rel_diff: gap,
            limit: 1e-3,
        });
    }
    Ok(g - l)
}

/// `(|η| + |η|⁻¹) exp(-(1-ε)/8 |η|² - (1-ε)/8 (|v|² - |v'|²)²/|η|²)`,
/// `η = v - v'`.
pub fn grad_majorant(v: &Vec3, vprime: &Vec3, epsilon: f64) -> Result<f64, CollisionError> {
    let a = (v - vprime).norm();
    if a < 1e-12 {
        return Err(CollisionError::DiagonalSingularity(a));
    }
    let d = v.norm_squared() - vprime.norm_squared();
    Ok(majorant_from(a, d, epsilon))
}

fn majorant_from(a: f64, energy_gap: f64, epsilon: f64) -> f64 {
    let k = (1.0 - epsilon) / 8.0;
    (a + 1.0 / a) * (-k * a * a - k * energy_gap * energy_gap / (a * a)).exp()
}

/// Coefficients of the exponent `A|η|² + B|η|y + Cy²`, `y = v·η/|η|`, of
/// majorant × weight ratio, and whether the form is negative definite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadraticFormCheck {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub discriminant: f64,
    pub negative_definite: bool,
}

pub fn exponent_form(theta: f64, epsilon: f64) -> QuadraticFormCheck {
    let a = -(1.0 - epsilon) / 4.0 - theta;
    let b = (1.0 - epsilon) / 2.0 + 2.0 * theta;
    let c = -(1.0 - epsilon) / 2.0;
    let discriminant = b * b - 4.0 * a * c;
    QuadraticFormCheck {
        a,
        b,
        c,
        discriminant,
        negative_definite: a < 0.0 && discriminant < 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KwBoundReport {
    pub form: QuadraticFormCheck,
    /// `max (1 + |v|)·I(v)` at the finer level; absent when the precheck fails.
    pub max_product: Option<f64>,
    pub coarse_max_product: Option<f64>,
    pub refinement_gap: Option<f64>,
    pub products: Vec<(f64, f64)>,
    pub ok: bool,
}

/// `I(v) = ∫ majorant(v, v', ε)·w(v)/w(v') dv'` as a 2-D integral in
/// `a = |v - v'|` and the cosine `c` between `v` and `v - v'`.
pub fn kw_integral(params: &WeightParams, speed: f64, epsilon: f64, level: usize) -> f64 {
    let s = speed;
    let top = 2.0 * s + 16.0;
    let a_rule = Rule1d::composite(0.0, top, (top.ceil() as usize) * level, 8);
    let c_rule = Rule1d::composite(-1.0, 1.0, 16 * level, 8);
    let mut acc = 0.0;
    for (&a, &wa) in a_rule.nodes.iter().zip(&a_rule.weights) {
        let mut inner = 0.0;
        for (&c, &wc) in c_rule.nodes.iter().zip(&c_rule.weights) {
            // |v|² - |v'|² = 2|v|ac - a²
            let gap = 2.0 * s * a * c - a * a;
            let vp2 = s * s - gap;
            let k = (1.0 - epsilon) / 8.0;
            // exponents combined before exp to avoid inf·0 at large |v|
            let log_ratio = params.beta * ((1.0 + params.rho * s * s) / (1.0 + params.rho * vp2)).ln()
                + params.theta * gap;
            let expo = -k * a * a - k * gap * gap / (a * a) + log_ratio;
            inner += wc * (a + 1.0 / a) * expo.exp();
        }
        acc += wa * a * a * inner;
    }
    2.0 * PI * acc
}

/// Bound `(1 + |v|)·I(v) ≤ C` on the given speeds, with a negative
/// definiteness precheck and a two-level refinement comparison (2%).
pub fn kw_bound_check(params: &WeightParams, speeds: &[f64], epsilon: f64) -> KwBoundReport {
    let form = exponent_form(params.theta, epsilon);
    if !form.negative_definite {
        return KwBoundReport {
            form,
            max_product: None,
            coarse_max_product: None,
            refinement_gap: None,
            products: Vec::new(),
            ok: false,
        };
    }
    let mut coarse_max: f64 = 0.0;
    let mut fine_max: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    let mut finite = true;
    let mut products = Vec::with_capacity(speeds.len());
    for &s in speeds {
        let c = (1.0 + s) * kw_integral(params, s, epsilon, 1);
        let f = (1.0 + s) * kw_integral(params, s, epsilon, 2);
        finite &= c.is_finite() && f.is_finite();
        coarse_max = coarse_max.max(c);
        fine_max = fine_max.max(f);
        worst_gap = worst_gap.max((c - f).abs() / f.abs());
        products.push((s, f));
    }
    let gap = (coarse_max - fine_max).abs() / fine_max;
    let ok = finite && fine_max.is_finite() && gap <= 0.02 && worst_gap <= 0.02;
    KwBoundReport {
        form,
        max_product: Some(fine_max),
        coarse_max_product: Some(coarse_max),
        refinement_gap: Some(worst_gap.max(gap)),
        products,
        ok,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FluxMeasureReport {
    pub c_mu: f64,
    pub total_mass: f64,
    pub wtilde_sq_integral: f64,
}

/// `∫_{v·n>0} g(v)(n·v) dv` on an aligned Cartesian product rule.
fn half_space_flux(n: &Vec3, extent: f64, panels: usize, g: impl Fn(&Vec3) -> f64) -> f64 {
    let (e1, e2, axis) = frame_from_axis(n);
    let tang = Rule1d::composite(-extent, extent, 2 * panels, 8);
    let normal = Rule1d::composite(0.0, extent, panels, 8);
    let mut acc = 0.0;
    for (&s, &ws) in normal.nodes.iter().zip(&normal.weights) {
        for (&a, &wa) in tang.nodes.iter().zip(&tang.weights) {
            for (&b, &wb) in tang.nodes.iter().zip(&tang.weights) {
                let v = e1 * a + e2 * b + axis * s;
                acc += ws * wa * wb * s * g(&v);
            }
        }
    }
    acc
}

/// Normalising constant of the flux measure, its total mass on a separate
/// spherical rule, and `∫ w̃² dσ`.
pub fn flux_measure(params: &WeightParams, n: &Vec3) -> Result<FluxMeasureReport, CollisionError> {
    let n = n.normalize();
    let c_mu = 1.0 / half_space_flux(&n, 12.0, 8, maxwellian);

    let radial = Rule1d::composite(0.0, 12.0, 12, 8);
    let hemi = SphereRule::band(&n, 0.0, 1.0, 8, 8);
    let mut mass = 0.0;
    for (&r, &wr) in radial.nodes.iter().zip(&radial.weights) {
        for (&c, &wo) in hemi.cosines.iter().zip(&hemi.weights) {
            mass += wr * wo * r * r * (r * c) * (-0.5 * r * r).exp();
        }
    }
    let total_mass = c_mu * mass;

    let wt = |level: usize| {
        let decay = (2.0 * params.theta).min(0.5).max(1e-3);
        let extent = (40.0 / decay).sqrt();
        c_mu * half_space_flux(&n, extent, 8 * level, |v| {
            params.wtilde(v).powi(2) * maxwellian(v)
        })
    };
    let coarse = wt(1);
    let fine = wt(2);
    let rel = (coarse - fine).abs() / fine.abs();
    if !fine.is_finite() || rel > 1e-6 {
        return Err(CollisionError::QuadratureUnderResolved {
            quantity: "flux-measure weight integral",
            rel_diff: rel,
            limit: 1e-6,
        });
    }
    Ok(FluxMeasureReport {
        c_mu,
        total_mass,
        wtilde_sq_integral: fine,
    })
}

/// Uniform cell-centred tensor grid on `[-V, V]³`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VelocityGrid {
    pub v_max: f64,
    pub n: usize,
    pub h: f64,
    pub nodes: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl VelocityGrid {
    pub fn new(v_max: f64, n: usize) -> Result<Self, CollisionError> {
        if !(v_max > 0.0) || n < 2 {
            return Err(CollisionError::InvalidParams("velocity grid needs V > 0 and n >= 2".into()));
        }
        let h = 2.0 * v_max / n as f64;
        let coord = |i: usize| -v_max + (i as f64 + 0.5) * h;
        let mut nodes = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    nodes.push(Vector3::new(coord(i), coord(j), coord(k)));
                }
            }
        }
        let weights = vec![h * h * h; nodes.len()];
        Ok(Self {
            v_max,
            n,
            h,
            nodes,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.v_max + (i as f64 + 0.5) * self.h
    }

    /// Index of the node `-v` (the grid is symmetric).
    pub fn reflect_index(&self, idx: usize) -> usize {
        let n = self.n;
        let (i, j, k) = (idx / (n * n), (idx / n) % n, idx % n);
        self.index(n - 1 - i, n - 1 - j, n - 1 - k)
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.weights).map(|(a, w)| a * w).sum()
    }

    /// Trilinear hat-function weights at `v`: nodes within one spacing,
    /// extended by zero beyond the outermost nodes.
    pub fn hat_weights(&self, v: &Vec3, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let mut axes = [[(0usize, 0.0f64); 2]; 3];
        let mut counts = [0usize; 3];
        for d in 0..3 {
            let x = (v[d] + self.v_max) / self.h - 0.5;
            let lo = x.floor();
            let t = x - lo;
            let lo = lo as i64;
            for (off, wt) in [(0i64, 1.0 - t), (1, t)] {
                let i = lo + off;
                if i >= 0 && (i as usize) < self.n && wt > 0.0 {
                    axes[d][counts[d]] = (i as usize, wt);
                    counts[d] += 1;
                }
            }
            if counts[d] == 0 {
                return;
            }
        }
        for a in &axes[0][..counts[0]] {
            for b in &axes[1][..counts[1]] {
                for c in &axes[2][..counts[2]] {
                    out.push((self.index(a.0, b.0, c.0), a.1 * b.1 * c.1));
                }
            }
        }
    }

    /// Triquadratic Lagrange weights on the 3×3×3 block of nodes nearest
    /// `v`; exact for quadratics. Empty outside `[-V, V]³`.
    pub fn quadratic_weights(&self, v: &Vec3, out: &mut Vec<(usize, f64)>) {
        out.clear();
        if self.n < 3 || v.iter().any(|c| c.abs() > self.v_max) {
            return;
        }
        let mut axes = [[(0usize, 0.0f64); 3]; 3];
        for d in 0..3 {
            let x = (v[d] + self.v_max) / self.h - 0.5;
            let mid = (x.round() as usize).clamp(1, self.n - 2);
            let t = x - mid as f64;
            axes[d] = [
                (mid - 1, 0.5 * t * (t - 1.0)),
                (mid, 1.0 - t * t),
                (mid + 1, 0.5 * t * (t + 1.0)),
            ];
        }
        for a in &axes[0] {
            for b in &axes[1] {
                for c in &axes[2] {
                    out.push((self.index(a.0, b.0, c.0), a.1 * b.1 * c.1));
                }
            }
        }
    }

    pub fn interpolate(&self, values: &[f64], v: &Vec3) -> f64 {
        let mut w = Vec::with_capacity(8);
        self.hat_weights(v, &mut w);
        w.iter().map(|&(i, c)| c * values[i]).sum()
    }

    /// Relative error of the grid integral of `μ` against `(2π)^{3/2}`.
    pub fn maxwellian_mass_error(&self) -> f64 {
        let m: f64 = self.nodes.iter().zip(&self.weights).map(|(v, w)| w * maxwellian(v)).sum();
        let exact = (2.0 * PI).powf(1.5);
        (m - exact).abs() / exact
    }

    /// Nodes with `0 < v1 ≤ v2 ≤ v3`: one representative per orbit of the
    /// cube symmetry group.
    pub fn octahedral_representatives(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                let v = self.nodes[i];
                v.x > 0.0 && v.x <= v.y && v.y <= v.z
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NullSpaceReport {
    pub labels: Vec<String>,
    pub rel_errors: Vec<f64>,
    pub nodes_checked: usize,
}

/// `sup|K(φ√μ) - νφ√μ| / sup|νφ√μ|` over the grid for the five collision
/// invariants. The cube symmetry of the grid and the rotation invariance of
/// `K` reduce the sup to orbit representatives, where all three `v_i`
/// components are evaluated.
pub fn null_space_check(cfg: &KernelConfig, grid: &VelocityGrid) -> Result<NullSpaceReport, CollisionError> {
    use rayon::prelude::*;
    let q = CollisionQuadrature::new(*cfg)?;
    let reps = grid.octahedral_representatives();
    let one = |u: &Vec3| sqrt_maxwellian(u);
    let v1 = |u: &Vec3| u.x * sqrt_maxwellian(u);
    let v2 = |u: &Vec3| u.y * sqrt_maxwellian(u);
    let v3 = |u: &Vec3| u.z * sqrt_maxwellian(u);
    let e = |u: &Vec3| u.norm_squared() * sqrt_maxwellian(u);
    let fs: [&(dyn Fn(&Vec3) -> f64 + Sync); 5] = [&one, &v1, &v2, &v3, &e];
    let rows: Vec<(Vec<f64>, Vec<f64>)> = reps
        .par_iter()
        .map(|&i| {
            let v = grid.nodes[i];
            let dyn_fs: Vec<&dyn Fn(&Vec3) -> f64> = fs.iter().map(|f| *f as &dyn Fn(&Vec3) -> f64).collect();
            let k = q.apply_k_many(&dyn_fs, &v);
            let nu = q.nu(&v);
            let target: Vec<f64> = fs.iter().map(|f| nu * f(&v)).collect();
            (k, target)
        })
        .collect();
    // invariants 1, v, |v|²: the three v_i columns are folded into one label
    let mut err = [0.0f64; 3];
    let mut scale = [0.0f64; 3];
    for (k, t) in &rows {
        for (m, slot) in [0usize, 1, 1, 1, 2].iter().enumerate() {
            err[*slot] = err[*slot].max((k[m] - t[m]).abs());
            scale[*slot] = scale[*slot].max(t[m].abs());
        }
    }
    Ok(NullSpaceReport {
        labels: vec!["1".into(), "v_i".into(), "|v|^2".into()],
        rel_errors: (0..3).map(|s| err[s] / scale[s]).collect(),
        nodes_checked: reps.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_at_origin_and_identity() {
        let p = WeightParams::new(0.3, 1.5, 0.1).unwrap();
        let z = Vector3::zeros();
        assert_eq!((maxwellian(&z), p.w(&z), p.wtilde(&z)), (1.0, 1.0, 1.0));
        let v = Vector3::new(0.7, -1.2, 2.0);
        assert!((p.w(&v) * p.wtilde(&v) * sqrt_maxwellian(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_params_validation() {
        assert!(WeightParams::new(1.0, 0.0, 0.25).is_err());
        assert!(WeightParams::new(0.0, 0.0, 0.1).is_err());
        assert!(!WeightParams::new(1.0, 1.0, 0.0).unwrap().integrable());
        assert!(WeightParams::new(1.0, 2.0, 0.0).unwrap().integrable());
    }

    #[test]
    fn nu_is_constant_for_gamma_zero() {
        let cfg = KernelConfig {
            gamma: 0.0,
            ..Default::default()
        };
        // (∫|cos θ| dω)·∫μ = 2π·(2π)^{3/2}
        let expect = 2.0 * PI * (2.0 * PI).powf(1.5);
        for s in [0.0, 0.3, 1.0, 4.0, 8.0] {
            let nu = collision_frequency(&cfg, &Vector3::new(0.0, s, 0.0)).unwrap();
            assert!((nu - expect).abs() < 1e-10 * expect, "{s} {nu}");
        }
    }

    #[test]
    fn normalized_config_has_unit_nu_at_rest() {
        let cfg = KernelConfig::default().normalized();
        assert!((collision_frequency(&cfg, &Vector3::zeros()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn majorant_value_and_symmetry() {
        let v = Vector3::zeros();
        let vp = Vector3::x();
        let m = grad_majorant(&v, &vp, 0.0).unwrap();
        assert!((m - 2.0 * (-0.25f64).exp()).abs() < 1e-15);
        let a = Vector3::new(0.3, 1.0, -0.2);
        let b = Vector3::new(-1.0, 0.4, 0.9);
        assert_eq!(grad_majorant(&a, &b, 0.1).unwrap(), grad_majorant(&b, &a, 0.1).unwrap());
        assert!(grad_majorant(&a, &a, 0.0).is_err());
    }

    #[test]
    fn exponent_form_discriminant() {
        let f = exponent_form(0.2, 0.0);
        assert!((f.discriminant - (4.0 * 0.04 - 0.25)).abs() < 1e-15);
        assert!(f.negative_definite);
        assert!(!exponent_form(0.25, 0.0).negative_definite);
    }

    #[test]
    fn grid_integrates_maxwellian() {
        let g = VelocityGrid::new(6.0, 24).unwrap();
        assert!(g.maxwellian_mass_error() < 1e-6);
        assert_eq!(g.octahedral_representatives().len(), 12 * 13 * 14 / 6);
    }

    #[test]
    fn hat_weights_partition_unity() {
        let g = VelocityGrid::new(3.0, 6).unwrap();
        let mut w = Vec::new();
        g.hat_weights(&Vector3::new(0.1, -1.3, 2.0), &mut w);
        let s: f64 = w.iter().map(|p| p.1).sum();
        assert!((s - 1.0).abs() < 1e-12);
        let vals: Vec<f64> = g.nodes.iter().map(|v| 2.0 * v.x - v.y + 0.5 * v.z + 1.0).collect();
        let p = Vector3::new(0.1, -1.3, 2.0);
        assert!((g.interpolate(&vals, &p) - (2.0 * p.x - p.y + 0.5 * p.z + 1.0)).abs() < 1e-12);
        g.hat_weights(&Vector3::new(10.0, 0.0, 0.0), &mut w);
        assert!(w.is_empty());
    }

    #[test]
    fn k_of_zero_is_zero() {
        let q = CollisionQuadrature::new(KernelConfig::default()).unwrap();
        assert_eq!(q.apply_k(&|_| 0.0, &Vector3::new(0.5, 0.1, 0.0)), 0.0);
    }

    #[test]
    fn flux_measure_constants() {
        let p = WeightParams::new(1e-12, 0.0, 0.2).unwrap();
        let r = flux_measure(&p, &Vector3::new(0.3, -0.4, 0.8)).unwrap();
        assert!((r.c_mu - 1.0 / (2.0 * PI)).abs() < 1e-12);
        assert!((r.total_mass - 1.0).abs() < 1e-8);
        // c_mu ∫ e^{-2θ|v|²}(n·v) dv = 1/(16θ²) after rescaling v
        assert!((r.wtilde_sq_integral - 1.0 / (16.0 * 0.04)).abs() < 1e-6);
    }

    #[test]
    fn kw_bound_precheck() {
        let bad = WeightParams::new(1.0, 0.0, 0.2499999).unwrap();
        let r = kw_bound_check(&WeightParams { theta: 0.25, ..bad }, &[0.0, 1.0], 0.0);
        assert!(!r.ok && r.max_product.is_none());
        let good = WeightParams::new(1.0, 0.0, 0.1).unwrap();
        let r = kw_bound_check(&good, &[0.0, 2.0, 6.0], 0.05);
        assert!(r.ok, "{r:?}");
    }

    #[test]
    fn collision_invariants_in_kernel_of_l() {
        let cfg = KernelConfig::default();
        let q = CollisionQuadrature::new(cfg).unwrap();
        for v in [Vector3::new(0.2, -0.5, 1.1), Vector3::new(2.0, 0.0, -1.0)] {
            let nu = q.nu(&v);
            let f = |u: &Vec3| (1.0 + u.y - 0.5 * u.norm_squared()) * sqrt_maxwellian(u);
            let k = q.apply_k(&f, &v);
            assert!((k - nu * f(&v)).abs() < 1e-4 * nu, "{v:?}: {k} {}", nu * f(&v));
        }
    }
}
