//! Backward generalized characteristics under bounce-back, specular and
//! diffuse reflection, the specular velocity Jacobian, and the stuck-mass
//! estimate for diffuse cycles.

use std::sync::{Mutex, OnceLock};

use nalgebra::Matrix3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{LevelSetDomain, DEFAULT_GRAZE_TOL};
use crate::quadrature::frame_from_axis;
use crate::rng;
use crate::trajectory::{backward_exit, PhasePoint, TrajectoryError};
use crate::Vec3;

pub const DEFAULT_MAX_BOUNCES: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CycleError {
    #[error("cycle hit a grazing bounce at node {node}")]
    GrazingAbort { node: usize },
    #[error("finite-difference Jacobian is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CycleKind {
    BounceBack,
    Specular,
    Diffuse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    ReachedTime,
    GrazingAbort,
    MaxBounces,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CycleNode {
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
}

/// `nodes[0]` is the starting phase point, `nodes[k]` the k-th wall visit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cycle {
    pub kind: CycleKind,
    pub nodes: Vec<CycleNode>,
    pub termination: Termination,
}

impl Cycle {
    pub fn start(&self) -> &CycleNode {
        &self.nodes[0]
    }

    pub fn bounces(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Total backward flight time `t_0 - t_last`.
    pub fn elapsed(&self) -> f64 {
        self.nodes[0].t - self.nodes[self.nodes.len() - 1].t
    }

    /// Index `k` of the flight leg `[t_{k+1}, t_k)` containing time `s`,
    /// or `None` when the cycle does not reach back to `s`.
    pub fn leg_containing(&self, s: f64) -> Option<usize> {
        if s > self.nodes[0].t {
            return None;
        }
        (0..self.nodes.len() - 1).find(|&k| self.nodes[k + 1].t <= s && (s < self.nodes[k].t || k == 0))
    }

    /// Position and velocity at time `s` on the cycle.
    pub fn state_at(&self, s: f64) -> Option<(Vec3, Vec3)> {
        if self.nodes.len() == 1 {
            let n = &self.nodes[0];
            return (s == n.t).then_some((n.x, n.v));
        }
        let k = self.leg_containing(s)?;
        let n = &self.nodes[k];
        Some((n.x - n.v * (n.t - s), n.v))
    }
}

/// Draws from `c_μ μ(v)(n·v) dv` on `{n·v > 0}`.
#[derive(Debug, Clone)]
pub struct DiffuseSampler {
    pub seed: u64,
    pub stream_id: u64,
    rng: ChaCha8Rng,
}

impl DiffuseSampler {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self {
            seed,
            stream_id,
            rng: rng::stream(seed, stream_id),
        }
    }

    /// Independent sampler for batch `batch` of this stream.
    pub fn fork(&self, batch: u64) -> Self {
        Self::new(self.seed, rng::substream(self.stream_id, batch))
    }

    pub fn sample(&mut self, n: &Vec3) -> Vec3 {
        sample_flux(&mut self.rng, n)
    }
}

/// Tangential components standard normal, normal component Rayleigh.
pub fn sample_flux<R: Rng + ?Sized>(rng: &mut R, n: &Vec3) -> Vec3 {
    let (e1, e2, axis) = frame_from_axis(n);
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    let u: f64 = rng.sample(Open01);
    let s = (-2.0 * u.ln()).sqrt();
    e1 * a + e2 * b + axis * s
}

enum Law<'a> {
    BounceBack,
    Specular,
    Diffuse(&'a mut DiffuseSampler),
}

fn trace(
    domain: &LevelSetDomain,
    t: f64,
    p: &PhasePoint,
    stop_time: f64,
    max_bounces: usize,
    mut law: Law<'_>,
) -> Result<Cycle, CycleError> {
    if stop_time > t {
        return Err(CycleError::InvalidArgument(format!(
            "stop time {stop_time} is later than start time {t}"
        )));
    }
    let kind = match law {
        Law::BounceBack => CycleKind::BounceBack,
        Law::Specular => CycleKind::Specular,
        Law::Diffuse(_) => CycleKind::Diffuse,
    };
    let mut nodes = vec![CycleNode { t, x: p.x, v: p.v }];
    if t <= stop_time {
        return Ok(Cycle {
            kind,
            nodes,
            termination: Termination::ReachedTime,
        });
    }
    loop {
        let last = *nodes.last().unwrap();
        if nodes.len() > max_bounces {
            return Ok(Cycle {
                kind,
                nodes,
                termination: Termination::MaxBounces,
            });
        }
        let rec = backward_exit(domain, &PhasePoint::new(last.x, last.v))?;
        let t_next = last.t - rec.t_b;
        let speed = last.v.norm();
        let grazing = rec.dot.abs() < DEFAULT_GRAZE_TOL * speed;
        let check_grazing = !matches!(law, Law::Diffuse(_)) || nodes.len() == 1;
        if grazing && check_grazing {
            return Ok(Cycle {
                kind,
                nodes,
                termination: Termination::GrazingAbort,
            });
        }
        let n = rec.normal;
        let v_next = match &mut law {
            Law::BounceBack => -last.v,
            Law::Specular => last.v - n * (2.0 * n.dot(&last.v)),
            Law::Diffuse(s) => s.sample(&n),
        };
        nodes.push(CycleNode {
            t: t_next,
            x: rec.x_b,
            v: v_next,
        });
        if t_next <= stop_time {
            return Ok(Cycle {
                kind,
                nodes,
                termination: Termination::ReachedTime,
            });
        }
    }
}

/// `(t_{k+1}, x_{k+1}, v_{k+1}) = (t_k - t_b, x_b(x_k, v_k), -v_k)`.
pub fn bounce_back_cycle(
    domain: &LevelSetDomain,
    t: f64,
    p: &PhasePoint,
    stop_time: f64,
    max_bounces: usize,
) -> Result<Cycle, CycleError> {
    trace(domain, t, p, stop_time, max_bounces, Law::BounceBack)
}

/// `v_{k+1} = R(x_{k+1}) v_k`.
pub fn specular_cycle(
    domain: &LevelSetDomain,
    t: f64,
    p: &PhasePoint,
    stop_time: f64,
    max_bounces: usize,
) -> Result<Cycle, CycleError> {
    trace(domain, t, p, stop_time, max_bounces, Law::Specular)
}

/// `v_{k+1}` drawn from the wall flux measure at `x_{k+1}`.
pub fn diffuse_cycle_sample(
    domain: &LevelSetDomain,
    t: f64,
    p: &PhasePoint,
    stop_time: f64,
    max_bounces: usize,
    sampler: &mut DiffuseSampler,
) -> Result<Cycle, CycleError> {
    trace(domain, t, p, stop_time, max_bounces, Law::Diffuse(sampler))
}

fn zeta_table() -> &'static Mutex<Vec<i128>> {
    static TABLE: OnceLock<Mutex<Vec<i128>>> = OnceLock::new();
    TABLE.get_or_init(|| Mutex::new(vec![0, 0]))
}

/// `ζ(1) = 0`, and for `k ≥ 2`
/// `ζ(k) = 4Σ_{p=1}^{k-2} (-1)^{k-p+1} + 4Σ_{p=1}^{k-2} (-1)^{k-1-p} ζ(p) + 2 + 3ζ(k-1)`.
/// Index 0 of the memo table is unused.
pub fn zeta(k: usize) -> i128 {
    assert!(k >= 1, "zeta is defined for k >= 1");
    let mut table = zeta_table().lock().expect("zeta table poisoned");
    while table.len() <= k {
        let k = table.len();
        let sign = |e: usize| if e % 2 == 0 { 1i128 } else { -1 };
        let mut z: i128 = 2 + 3 * table[k - 1];
        for p in 1..=k.saturating_sub(2) {
            z += 4 * sign(k - p + 1);
            z += 4 * sign(k - 1 - p) * table[p];
        }
        table.push(z);
    }
    table[k]
}

/// Velocity `v_k` after `k - 1` specular reflections starting from
/// `(x1, v1)`, together with the elapsed backward time.
pub fn specular_velocity_map(
    domain: &LevelSetDomain,
    x1: &Vec3,
    v1: &Vec3,
    k: usize,
) -> Result<(Vec3, f64), CycleError> {
    if k == 0 {
        return Err(CycleError::InvalidArgument("k must be at least 1".into()));
    }
    let c = specular_cycle(domain, 0.0, &PhasePoint::new(*x1, *v1), f64::NEG_INFINITY, k - 1)?;
    if c.termination == Termination::GrazingAbort {
        return Err(CycleError::GrazingAbort { node: c.bounces() });
    }
    Ok((c.nodes[k - 1].v, c.elapsed()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JacobianSetup {
    /// `|v1| = ε0`, `v1·n(x1) = ε0²`, launched from the wall point `x1`.
    NearTangent,
    /// `v1 = -ε0 n(x1)` launched from `x1 - ε0² n(x1)`: immediate exit.
    NormalIncidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JacobianReport {
    pub k: usize,
    pub eps0: f64,
    pub setup: JacobianSetup,
    pub det_fd: f64,
    pub zeta_pred: i64,
    pub predicted_det: f64,
    pub rel_gap: f64,
    pub condition: f64,
    pub cumulative_time: f64,
    pub long_cycle: bool,
}

/// Determinant of `∂v_k/∂v_1` by central differences (step `1e-6·ε0`) for
/// the near-tangent launch at `x1`.
pub fn specular_jacobian_fd(
    domain: &LevelSetDomain,
    x1: &Vec3,
    eps0: f64,
    k: usize,
) -> Result<JacobianReport, CycleError> {
    specular_jacobian_fd_with(domain, x1, eps0, k, JacobianSetup::NearTangent)
}

pub fn specular_jacobian_fd_with(
    domain: &LevelSetDomain,
    x1: &Vec3,
    eps0: f64,
    k: usize,
    setup: JacobianSetup,
) -> Result<JacobianReport, CycleError> {
    if !(eps0 > 0.0 && eps0 < 1.0) {
        return Err(CycleError::InvalidArgument("eps0 must lie in (0, 1)".into()));
    }
    if k == 0 {
        return Err(CycleError::InvalidArgument("k must be at least 1".into()));
    }
    let n = domain.outward_normal(x1).map_err(TrajectoryError::from)?;
    let (start, v1, predicted) = match setup {
        JacobianSetup::NearTangent => {
            let (tangent, _, _) = frame_from_axis(&n);
            let v1 = n * eps0 * eps0 + tangent * (eps0 * eps0 - eps0.powi(4)).sqrt();
            (*x1, v1, (zeta(k) + 1) as f64)
        }
        JacobianSetup::NormalIncidence => (*x1 - n * eps0 * eps0, -n * eps0, -1.0),
    };
    let h = 1e-6 * eps0;
    let mut jac = Matrix3::zeros();
    for l in 0..3 {
        let mut dv = Vec3::zeros();
        dv[l] = h;
        let (plus, _) = specular_velocity_map(domain, &start, &(v1 + dv), k)?;
        let (minus, _) = specular_velocity_map(domain, &start, &(v1 - dv), k)?;
        jac.set_column(l, &((plus - minus) / (2.0 * h)));
    }
    let sv = jac.singular_values();
    let condition = if sv.min() > 0.0 { sv.max() / sv.min() } else { f64::INFINITY };
    if condition > 1e8 {
        return Err(CycleError::IllConditioned(condition));
    }
    let (_, cumulative_time) = specular_velocity_map(domain, &start, &v1, k)?;
    let det_fd = jac.determinant();
    Ok(JacobianReport {
        k,
        eps0,
        setup,
        det_fd,
        zeta_pred: zeta(k) as i64,
        predicted_det: predicted,
        rel_gap: (det_fd - predicted).abs() / predicted.abs(),
        condition,
        cumulative_time,
        long_cycle: cumulative_time > 10.0 * domain.bounding_radius() / eps0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StuckEstimate {
    pub k: usize,
    pub fraction: f64,
    pub stderr: f64,
}

const MC_BATCH: usize = 4096;

/// Number of wall nodes `l ≥ 1` with `t_l > 0` along one sampled diffuse
/// cycle, capped at `k_max`.
fn surviving_nodes(
    domain: &LevelSetDomain,
    t: f64,
    p: &PhasePoint,
    k_max: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize, CycleError> {
    let first = backward_exit(domain, p)?;
    let mut t_l = t - first.t_b;
    let mut x_l = first.x_b;
    let mut n_l = first.normal;
    let mut count = 0;
    while t_l > 0.0 && count < k_max {
        count += 1;
        if count == k_max {
            break;
        }
        let v = sample_flux(rng, &n_l);
        let rec = backward_exit(domain, &PhasePoint::new(x_l, v))?;
        t_l -= rec.t_b;
        x_l = rec.x_b;
        n_l = rec.normal;
    }
    Ok(count)
}

/// Monte Carlo estimate of `∫ 1_{t_k > 0} Π dσ_l` for every `k` in
/// `2..=k_max`, reusing the same sampled paths for all `k`.
pub fn stuck_fraction_sweep(
    domain: &LevelSetDomain,
    t: f64,
    p: &PhasePoint,
    k_max: usize,
    samples: usize,
    sampler: &DiffuseSampler,
) -> Result<Vec<StuckEstimate>, CycleError> {
    if k_max < 2 {
        return Err(CycleError::InvalidArgument("k must be at least 2".into()));
    }
    if samples < 100 {
        return Err(CycleError::InvalidArgument("need at least 100 samples".into()));
    }
    let batches = samples.div_ceil(MC_BATCH);
    let per_batch: Vec<Vec<usize>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = sampler.fork(b as u64).rng;
            let len = MC_BATCH.min(samples - b * MC_BATCH);
            let mut hist = vec![0usize; k_max + 1];
            for _ in 0..len {
                hist[surviving_nodes(domain, t, p, k_max, &mut rng)?] += 1;
            }
            Ok(hist)
        })
        .collect::<Result<_, CycleError>>()?;
    let mut hist = vec![0usize; k_max + 1];
    for h in &per_batch {
        for (a, b) in hist.iter_mut().zip(h) {
            *a += b;
        }
    }
    let n = samples as f64;
    Ok((2..=k_max)
        .map(|k| {
            let hits: usize = hist[k..].iter().sum();
            let f = hits as f64 / n;
            StuckEstimate {
                k,
                fraction: f,
                stderr: (f * (1.0 - f) / n).sqrt(),
            }
        })
        .collect())
}

pub fn stuck_fraction_mc(
    domain: &LevelSetDomain,
    t: f64,
    p: &PhasePoint,
    k: usize,
    samples: usize,
    sampler: &DiffuseSampler,
) -> Result<StuckEstimate, CycleError> {
    let sweep = stuck_fraction_sweep(domain, t, p, k, samples, sampler)?;
    Ok(*sweep.last().unwrap())
}
