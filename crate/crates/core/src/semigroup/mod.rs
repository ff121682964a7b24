//! Damped transport semigroup `G(t)` under the four wall laws, the
//! Duhamel construction of the linearized semigroup, and the diagnostics
//! run on its output: hydrodynamic projection, conservation, decay rates,
//! coercivity, and the nonlinear and positivity iterations.

pub mod operators;
pub mod solver;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collision::{CollisionError, VelocityGrid, WeightParams};
use crate::cycles::{
    bounce_back_cycle, diffuse_cycle_sample, specular_cycle, CycleError, DiffuseSampler, Termination,
};
use crate::geometry::{GeometryError, LevelSetDomain};
use crate::trajectory::{backward_exit, PhasePoint, TrajectoryError};
use crate::Vec3;

pub use operators::{GainForm, GammaForm, KernelMatrix, NuProfile};
pub use solver::{
    boundary_norm_sq, coercivity_ratio, conservation_check, moments, CoercivityReport, ConservationReport,
    DuhamelResult, FieldSample, Moments, NonlinearResult, PhaseGrid, PositivityResult, SolverSetup, SpatialCells,
    TimeGrid, WeightMode,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemigroupError {
    #[error("backward characteristic is grazing")]
    GrazingAbort,
    #[error("cycle did not reach time zero within {0} bounces")]
    MaxBounces(usize),
    #[error("diffuse stuck fraction {stuck_fraction:.3e} exceeds the cap {cap:.3e}")]
    RemainderTooLarge { stuck_fraction: f64, cap: f64 },
    #[error("Picard differences grew for three consecutive steps (through step {step})")]
    NonConvergence { step: usize },
    #[error("nonlinear iterate differences failed to decrease for three steps (through step {step})")]
    NonContraction { step: usize },
    #[error("Gram matrix of the collision invariants is singular on this grid")]
    SingularGram,
    #[error("norm at sample {index} is not positive")]
    NonPositiveNorms { index: usize },
    #[error("initial datum is negative at phase point {index} (value {value:.3e})")]
    NegativeInitialData { index: usize, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Collision(#[from] CollisionError),
    #[error(transparent)]
    Cycle(#[from] CycleError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Incoming datum `(wg)(t, x, v)` on the wall.
pub type InflowDatum = Arc<dyn Fn(f64, &Vec3, &Vec3) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum BcSpec {
    Inflow(InflowDatum),
    BounceBack,
    Specular,
    /// Truncated diffuse representation estimated from `mc_paths` sampled
    /// cycles; `remainder_cap` bounds the accepted stuck fraction.
    Diffuse {
        k_trunc: usize,
        mc_paths: usize,
        remainder_cap: f64,
    },
}

impl fmt::Debug for BcSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BcSpec::Inflow(_) => write!(f, "Inflow(..)"),
            BcSpec::BounceBack => write!(f, "BounceBack"),
            BcSpec::Specular => write!(f, "Specular"),
            BcSpec::Diffuse {
                k_trunc,
                mc_paths,
                remainder_cap,
            } => write!(f, "Diffuse {{ k_trunc: {k_trunc}, mc_paths: {mc_paths}, remainder_cap: {remainder_cap} }}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcKind {
    Inflow,
    BounceBack,
    Specular,
    Diffuse,
}

impl BcSpec {
    /// Zero incoming datum.
    pub fn absorbing() -> Self {
        BcSpec::Inflow(Arc::new(|_, _, _| 0.0))
    }

    pub fn kind(&self) -> BcKind {
        match self {
            BcSpec::Inflow(_) => BcKind::Inflow,
            BcSpec::BounceBack => BcKind::BounceBack,
            BcSpec::Specular => BcKind::Specular,
            BcSpec::Diffuse { .. } => BcKind::Diffuse,
        }
    }

    pub fn validate(&self) -> Result<(), SemigroupError> {
        if let BcSpec::Diffuse {
            k_trunc,
            mc_paths,
            remainder_cap,
        } = self
        {
            if *k_trunc < 2 || *mc_paths == 0 || !(*remainder_cap >= 0.0) {
                return Err(SemigroupError::InvalidArgument(
                    "diffuse walls need k_trunc >= 2, mc_paths >= 1 and a non-negative remainder cap".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One evaluation of `G(t)h0` with its error budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GValue {
    pub value: f64,
    /// Monte Carlo standard error (zero for deterministic walls).
    pub stderr: f64,
    /// Bound on the contribution of cycles still above time zero after
    /// `k_trunc` bounces.
    pub remainder_bound: f64,
    pub stuck_fraction: f64,
}

impl GValue {
    fn exact(value: f64) -> Self {
        Self {
            value,
            stderr: 0.0,
            remainder_bound: 0.0,
            stuck_fraction: 0.0,
        }
    }
}

/// Everything `G(t)` needs besides the evaluation point.
pub struct TransportProblem<'a> {
    pub domain: &'a LevelSetDomain,
    pub bc: &'a BcSpec,
    pub nu: &'a NuProfile,
    pub params: WeightParams,
    pub h0: &'a (dyn Fn(&Vec3, &Vec3) -> f64 + Sync),
    /// `sup |w̃ h0|`; enters the diffuse remainder bound only.
    pub h0_wtilde_sup: f64,
    pub max_bounces: usize,
}

impl TransportProblem<'_> {
    /// `G(t)h0` at `p`. `sampler` is used by diffuse walls only.
    pub fn eval(&self, t: f64, p: &PhasePoint, sampler: &mut DiffuseSampler) -> Result<GValue, SemigroupError> {
        if !(t >= 0.0) {
            return Err(SemigroupError::InvalidArgument(format!("time must be non-negative, got {t}")));
        }
        self.bc.validate()?;
        let h0 = self.h0;
        if t == 0.0 {
            return Ok(GValue::exact(h0(&p.x, &p.v)));
        }
        let nu_v = self.nu.at(&p.v);
        match self.bc {
            BcSpec::Inflow(g) => {
                let rec = backward_exit(self.domain, p)?;
                if rec.grazing {
                    return Err(SemigroupError::GrazingAbort);
                }
                if t <= rec.t_b {
                    Ok(GValue::exact((-nu_v * t).exp() * h0(&(p.x - p.v * t), &p.v)))
                } else {
                    Ok(GValue::exact((-nu_v * rec.t_b).exp() * g(t - rec.t_b, &rec.x_b, &p.v)))
                }
            }
            BcSpec::BounceBack | BcSpec::Specular => {
                let cycle = if matches!(self.bc, BcSpec::BounceBack) {
                    bounce_back_cycle(self.domain, t, p, 0.0, self.max_bounces)?
                } else {
                    specular_cycle(self.domain, t, p, 0.0, self.max_bounces)?
                };
                match cycle.termination {
                    Termination::GrazingAbort => return Err(SemigroupError::GrazingAbort),
                    Termination::MaxBounces => return Err(SemigroupError::MaxBounces(self.max_bounces)),
                    Termination::ReachedTime => {}
                }
                let (xx, vv) = cycle.state_at(0.0).expect("cycle reaches time zero");
                // |V| = |v| along these cycles, so the damping is e^{-ν(v)t}
                Ok(GValue::exact((-nu_v * t).exp() * h0(&xx, &vv)))
            }
            BcSpec::Diffuse {
                k_trunc,
                mc_paths,
                remainder_cap,
            } => self.eval_diffuse(t, p, nu_v, *k_trunc, *mc_paths, *remainder_cap, sampler),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_diffuse(
        &self,
        t: f64,
        p: &PhasePoint,
        nu_v: f64,
        k_trunc: usize,
        mc_paths: usize,
        cap: f64,
        sampler: &mut DiffuseSampler,
    ) -> Result<GValue, SemigroupError> {
        let rec = backward_exit(self.domain, p)?;
        if rec.grazing {
            return Err(SemigroupError::GrazingAbort);
        }
        let t1 = t - rec.t_b;
        if t1 <= 0.0 {
            return Ok(GValue::exact((-nu_v * t).exp() * (self.h0)(&(p.x - p.v * t), &p.v)));
        }
        let pre = (-nu_v * (t - t1)).exp() / self.params.wtilde(&p.v);
        let (mut sum, mut sum_sq, mut stuck, mut stuck_damp) = (0.0, 0.0, 0usize, 0.0);
        for _ in 0..mc_paths {
            let cycle = diffuse_cycle_sample(self.domain, t, p, 0.0, k_trunc, sampler)?;
            let nodes = &cycle.nodes;
            // damping over the completed legs 1..l-1
            let leg = |j: usize| (-self.nu.at(&nodes[j].v) * (nodes[j].t - nodes[j + 1].t)).exp();
            match cycle.termination {
                Termination::ReachedTime => {
                    let l = nodes.len() - 2;
                    let damp: f64 = (1..l).map(leg).product();
                    let n = &nodes[l];
                    let x0 = n.x - n.v * n.t;
                    let term = (self.h0)(&x0, &n.v)
                        * self.params.wtilde(&n.v)
                        * (-self.nu.at(&n.v) * n.t).exp()
                        * damp;
                    sum += term;
                    sum_sq += term * term;
                }
                Termination::MaxBounces => {
                    stuck += 1;
                    stuck_damp += (1..nodes.len() - 1).map(leg).product::<f64>();
                }
                Termination::GrazingAbort => return Err(SemigroupError::GrazingAbort),
            }
        }
        let m = mc_paths as f64;
        let stuck_fraction = stuck as f64 / m;
        if stuck_fraction > cap {
            return Err(SemigroupError::RemainderTooLarge {
                stuck_fraction,
                cap,
            });
        }
        let mean = sum / m;
        let var = if mc_paths > 1 {
            ((sum_sq / m - mean * mean) * m / (m - 1.0)).max(0.0)
        } else {
            0.0
        };
        Ok(GValue {
            value: pre * mean,
            stderr: pre * (var / m).sqrt(),
            remainder_bound: if stuck == 0 { 0.0 } else { pre * (stuck_damp / m) * self.h0_wtilde_sup },
            stuck_fraction,
        })
    }
}

/// Free-function form of [`TransportProblem::eval`].
pub fn transport_g(
    problem: &TransportProblem<'_>,
    t: f64,
    p: &PhasePoint,
    sampler: &mut DiffuseSampler,
) -> Result<GValue, SemigroupError> {
    problem.eval(t, p, sampler)
}

/// Coefficients of `Pf = {a + b·v + c|v|²}√μ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HydroCoeffs {
    pub a: f64,
    pub b: Vector3<f64>,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coeffs: HydroCoeffs,
    pub projected: Vec<f64>,
    pub residual: Vec<f64>,
}

/// `L²(dv)` projection of grid values onto the collision invariants.
pub fn hydro_projection(grid: &VelocityGrid, f: &[f64]) -> Result<Projection, SemigroupError> {
    if f.len() != grid.len() {
        return Err(SemigroupError::InvalidArgument(format!(
            "expected {} velocity values, got {}",
            grid.len(),
            f.len()
        )));
    }
    let psi = operators::invariant_basis(grid);
    let weighted = DMatrix::from_fn(psi.nrows(), 5, |i, k| grid.weights[i] * psi[(i, k)]);
    let gram = weighted.transpose() * &psi;
    let rhs = weighted.transpose() * DVector::from_column_slice(f);
    let chol = gram.cholesky().ok_or(SemigroupError::SingularGram)?;
    let coef = chol.solve(&rhs);
    let projected: Vec<f64> = (&psi * &coef).iter().copied().collect();
    let residual = f.iter().zip(&projected).map(|(a, b)| a - b).collect();
    Ok(Projection {
        coeffs: HydroCoeffs {
            a: coef[0],
            b: Vector3::new(coef[1], coef[2], coef[3]),
            c: coef[4],
        },
        projected,
        residual,
    })
}

/// Samples earlier than this are left out of the rate fit.
pub const DECAY_FIT_START: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    pub lambda_hat: f64,
    /// RMS of the residuals of `ln(norm)` about the fitted line.
    pub fit_residual: f64,
    pub fit_start: f64,
    pub samples_used: usize,
}

/// `λ̂ = -slope` of the least-squares line through `ln(norm)` for
/// `t ≥ 0.25`.
pub fn decay_fit(times: &[f64], norms: &[f64]) -> Result<DecayReport, SemigroupError> {
    if times.len() != norms.len() {
        return Err(SemigroupError::InvalidArgument("times and norms differ in length".into()));
    }
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0)) {
        return Err(SemigroupError::NonPositiveNorms { index: i });
    }
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(norms)
        .filter(|(t, _)| **t >= DECAY_FIT_START)
        .map(|(&t, &n)| (t, n.ln()))
        .collect();
    if pts.len() < 5 {
        return Err(SemigroupError::InvalidArgument(format!(
            "decay fit needs at least 5 samples with t >= {DECAY_FIT_START}, got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    if sxx == 0.0 {
        return Err(SemigroupError::InvalidArgument("decay fit needs distinct times".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    let slope = sxy / sxx;
    let rss: f64 = pts.iter().map(|p| (p.1 - ym - slope * (p.0 - tm)).powi(2)).sum();
    Ok(DecayReport {
        times: times.to_vec(),
        norms: norms.to_vec(),
        lambda_hat: -slope,
        fit_residual: (rss / n).sqrt(),
        fit_start: DECAY_FIT_START,
        samples_used: pts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{sqrt_maxwellian, KernelConfig};
    use crate::cycles::DEFAULT_MAX_BOUNCES;

    fn profile() -> NuProfile {
        NuProfile::new(&KernelConfig::default().normalized()).unwrap()
    }

    fn problem<'a>(
        domain: &'a LevelSetDomain,
        bc: &'a BcSpec,
        nu: &'a NuProfile,
        h0: &'a (dyn Fn(&Vec3, &Vec3) -> f64 + Sync),
    ) -> TransportProblem<'a> {
        TransportProblem {
            domain,
            bc,
            nu,
            params: WeightParams::default(),
            h0,
            h0_wtilde_sup: 1.0,
            max_bounces: DEFAULT_MAX_BOUNCES,
        }
    }

    #[test]
    fn inflow_interior_value_is_damped_shift() {
        let d = LevelSetDomain::unit_ball();
        let nu = profile();
        let bc = BcSpec::absorbing();
        let h0 = |x: &Vec3, v: &Vec3| 1.0 + x[0] + 0.5 * v[1];
        let pr = problem(&d, &bc, &nu, &h0);
        let p = PhasePoint::new(Vec3::new(0.1, 0.2, 0.0), Vec3::new(1.0, 0.5, 0.0));
        let t = 0.3;
        let got = pr.eval(t, &p, &mut DiffuseSampler::new(0, 0)).unwrap().value;
        let want = (-nu.at(&p.v) * t).exp() * h0(&(p.x - p.v * t), &p.v);
        assert!((got - want).abs() < 1e-15);
        // past the exit time only the wall datum survives
        let late = pr.eval(5.0, &p, &mut DiffuseSampler::new(0, 0)).unwrap().value;
        assert_eq!(late, 0.0);
    }

    #[test]
    fn inflow_datum_enters_after_exit() {
        let d = LevelSetDomain::unit_ball();
        let nu = profile();
        let bc = BcSpec::Inflow(Arc::new(|t, x, _| t + x[0]));
        let h0 = |_: &Vec3, _: &Vec3| 0.0;
        let pr = problem(&d, &bc, &nu, &h0);
        // from the centre with |v| = 1 the wall is one unit back
        let p = PhasePoint::new(Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0));
        let got = pr.eval(2.5, &p, &mut DiffuseSampler::new(0, 0)).unwrap().value;
        let want = (-nu.at(&p.v)).exp() * (1.5 - 1.0);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn bounce_back_diameter_matches_hand_trace() {
        let d = LevelSetDomain::unit_ball();
        let nu = profile();
        let bc = BcSpec::BounceBack;
        let h0 = |x: &Vec3, v: &Vec3| 2.0 + x[0] + 0.25 * v[0];
        let pr = problem(&d, &bc, &nu, &h0);
        let p = PhasePoint::new(Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0));
        // backward: centre → (-1,0,0) at t=2, reversed → (1,0,0) at t=0
        let got = pr.eval(3.0, &p, &mut DiffuseSampler::new(0, 0)).unwrap().value;
        let want = (-3.0 * nu.at(&p.v)).exp() * h0(&Vec3::new(1.0, 0.0, 0.0), &Vec3::new(-1.0, 0.0, 0.0));
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn constant_datum_gives_pure_damping() {
        let d = LevelSetDomain::unit_ball();
        let nu = profile();
        let h0 = |_: &Vec3, _: &Vec3| 1.0;
        let p = PhasePoint::new(Vec3::new(0.2, -0.1, 0.3), Vec3::new(0.7, 1.1, -0.4));
        for bc in [BcSpec::BounceBack, BcSpec::Specular] {
            let pr = problem(&d, &bc, &nu, &h0);
            let got = pr.eval(1.7, &p, &mut DiffuseSampler::new(0, 0)).unwrap().value;
            assert!((got - (-1.7 * nu.at(&p.v)).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn diffuse_rejects_short_truncation() {
        let bc = BcSpec::Diffuse {
            k_trunc: 1,
            mc_paths: 10,
            remainder_cap: 1.0,
        };
        assert!(bc.validate().is_err());
    }

    #[test]
    fn projection_examples() {
        let grid = VelocityGrid::new(8.0, 20).unwrap();
        let sm: Vec<f64> = grid.nodes.iter().map(sqrt_maxwellian).collect();
        let p = hydro_projection(&grid, &sm).unwrap();
        assert!((p.coeffs.a - 1.0).abs() < 1e-10 && p.coeffs.b.norm() < 1e-10 && p.coeffs.c.abs() < 1e-10);
        assert!(p.residual.iter().all(|r| r.abs() < 1e-10));

        let f: Vec<f64> = grid.nodes.iter().map(|v| v[0].powi(3) * sqrt_maxwellian(v)).collect();
        let p = hydro_projection(&grid, &f).unwrap();
        assert!((p.coeffs.b[0] - 3.0).abs() < 1e-6, "b1 = {}", p.coeffs.b[0]);
        assert!(p.coeffs.a.abs() < 1e-10 && p.coeffs.c.abs() < 1e-10);
        for (j, v) in grid.nodes.iter().enumerate() {
            let want = (v[0].powi(3) - 3.0 * v[0]) * sqrt_maxwellian(v);
            assert!((p.residual[j] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn decay_fit_recovers_exact_rate() {
        let times: Vec<f64> = (0..=20).map(|i| 0.1 * i as f64).collect();
        let norms: Vec<f64> = times.iter().map(|t| (-0.3 * t).exp()).collect();
        let r = decay_fit(&times, &norms).unwrap();
        assert!((r.lambda_hat - 0.3).abs() < 1e-10);
        assert!(r.fit_residual < 1e-12);
        assert!(matches!(
            decay_fit(&times, &vec![0.0; times.len()]),
            Err(SemigroupError::NonPositiveNorms { index: 0 })
        ));
    }
}
