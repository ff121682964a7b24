//! Collocation solver for the Duhamel iteration on a desk-scale phase grid.
//!
//! Phase points are (spatial cell centre, velocity node) pairs. Every
//! evaluation traces the backward characteristic from a phase point and
//! reads the source term where the characteristic sits at each quadrature
//! time: nearest cell in space, an exact node or a local stencil in
//! velocity, Lagrange interpolation in time inside a panel.

use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use super::operators::{GainForm, GammaForm, KernelMatrix, NuProfile};
use super::{BcKind, BcSpec, SemigroupError};
use crate::collision::{maxwellian, sqrt_maxwellian, VelocityGrid, WeightParams};
use crate::cycles::{bounce_back_cycle, specular_cycle, Cycle, Termination};
use crate::geometry::{LevelSetDomain, SymmetryAxis};
use crate::quadrature::{lagrange_weights, tail_integration_matrix, Rule1d};
use crate::trajectory::{backward_exit, PhasePoint};
use crate::Vec3;

/// Cubes of side `h` whose centres lie in the domain.
#[derive(Debug, Clone)]
pub struct SpatialCells {
    pub h: f64,
    pub centers: Vec<Vec3>,
    pub volumes: Vec<f64>,
    origin: Vec3,
    dims: [usize; 3],
    lookup: Vec<u32>,
}

impl SpatialCells {
    pub fn new(domain: &LevelSetDomain, h: f64) -> Result<Self, SemigroupError> {
        if !(h > 0.0) {
            return Err(SemigroupError::InvalidArgument("cell size must be positive".into()));
        }
        let (center, half) = match domain.semi_axes() {
            Some((c, a)) => (c, a),
            None => {
                let r = domain.bounding_radius();
                (domain.bounding_center(), Vector3::new(r, r, r))
            }
        };
        let dims = [0, 1, 2].map(|d| ((2.0 * half[d] / h).ceil() as usize).max(1));
        let origin = center - Vector3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64) * (0.5 * h);
        let cube_center =
            |a: usize, b: usize, c: usize| origin + Vector3::new(a as f64 + 0.5, b as f64 + 0.5, c as f64 + 0.5) * h;
        let total = dims[0] * dims[1] * dims[2];
        let mut lookup = vec![u32::MAX; total];
        let mut centers = Vec::new();
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    let x = cube_center(a, b, c);
                    if domain.xi(&x) < 0.0 {
                        lookup[(a * dims[1] + b) * dims[2] + c] = centers.len() as u32;
                        centers.push(x);
                    }
                }
            }
        }
        if centers.is_empty() {
            return Err(SemigroupError::InvalidArgument("cell size leaves no interior cells".into()));
        }
        // cubes outside the domain point at the nearest interior cell
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    let idx = (a * dims[1] + b) * dims[2] + c;
                    if lookup[idx] == u32::MAX {
                        let x = cube_center(a, b, c);
                        let best = centers
                            .iter()
                            .enumerate()
                            .min_by(|p, q| (p.1 - x).norm_squared().total_cmp(&(q.1 - x).norm_squared()))
                            .map(|p| p.0)
                            .unwrap();
                        lookup[idx] = best as u32;
                    }
                }
            }
        }
        let volumes = vec![h * h * h; centers.len()];
        Ok(Self {
            h,
            centers,
            volumes,
            origin,
            dims,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Cell whose cube contains `x` (nearest interior cell near the wall).
    pub fn locate(&self, x: &Vec3) -> usize {
        let idx = [0, 1, 2].map(|d| {
            let i = ((x[d] - self.origin[d]) / self.h).floor();
            (i.max(0.0) as usize).min(self.dims[d] - 1)
        });
        self.lookup[(idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]] as usize
    }
}

/// Cells × velocity nodes; phase point `m·N + j` is `(centers[m], nodes[j])`.
#[derive(Debug, Clone)]
pub struct PhaseGrid {
    pub cells: SpatialCells,
    pub velocities: VelocityGrid,
}

impl PhaseGrid {
    pub fn len(&self) -> usize {
        self.cells.len() * self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, idx: usize) -> PhasePoint {
        let n = self.velocities.len();
        PhasePoint::new(self.cells.centers[idx / n], self.velocities.nodes[idx % n])
    }

    /// Grid values of `h(x, v)`.
    pub fn sample(&self, h: &(dyn Fn(&Vec3, &Vec3) -> f64 + Sync)) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let p = self.point(i);
                h(&p.x, &p.v)
            })
            .collect()
    }

    pub fn weights_w(&self, params: &WeightParams) -> Vec<f64> {
        self.velocities.nodes.iter().map(|v| params.w(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WeightMode {
    WeightedH,
    UnweightedF,
}

/// Field values at every phase point of a [`PhaseGrid`] at one time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldSample {
    pub time: f64,
    pub mode: WeightMode,
    pub values: Vec<f64>,
}

impl FieldSample {
    /// Converts between `h = w f` and `f`.
    pub fn to_mode(&self, phase: &PhaseGrid, params: &WeightParams, mode: WeightMode) -> FieldSample {
        if mode == self.mode {
            return self.clone();
        }
        let w = phase.weights_w(params);
        let n = w.len();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| match mode {
                WeightMode::UnweightedF => x / w[i % n],
                WeightMode::WeightedH => x * w[i % n],
            })
            .collect();
        FieldSample {
            time: self.time,
            mode,
            values,
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

#[derive(Debug, Clone)]
struct EvalPoint {
    sigma: f64,
    omega: f64,
    panel: usize,
    /// Stored node index when `sigma` is a node, otherwise Lagrange weights
    /// over the panel's nodes.
    exact: Option<usize>,
    lagrange: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Segment {
    start: usize,
    len: usize,
    tail: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct TargetRule {
    points: Vec<EvalPoint>,
    segments: Vec<Segment>,
}

/// Composite Gauss panels on `[0, T]` and, for each output time, a rule
/// for `∫_0^{s}` built from them.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    pub t_final: f64,
    pub panel_nodes: usize,
    pub panels: Vec<(f64, f64)>,
    pub nodes: Vec<f64>,
    pub node_weights: Vec<f64>,
    /// Stored nodes followed by `t_final`.
    pub targets: Vec<f64>,
    rules: Vec<TargetRule>,
}

impl TimeGrid {
    pub fn new(t_final: f64, nodes_per_unit: usize, panel_nodes: usize) -> Result<Self, SemigroupError> {
        if !(t_final > 0.0) || nodes_per_unit == 0 || panel_nodes == 0 {
            return Err(SemigroupError::InvalidArgument(
                "time grid needs t > 0 and positive node counts".into(),
            ));
        }
        let count = ((t_final * nodes_per_unit as f64) / panel_nodes as f64).ceil().max(1.0) as usize;
        let width = t_final / count as f64;
        let panels: Vec<(f64, f64)> = (0..count).map(|k| (k as f64 * width, (k + 1) as f64 * width)).collect();
        let mut nodes = Vec::new();
        let mut node_weights = Vec::new();
        for &(a, b) in &panels {
            let r = Rule1d::gauss(a, b, panel_nodes);
            nodes.extend(r.nodes);
            node_weights.extend(r.weights);
        }
        let full_segment = |k: usize, start: usize| {
            let (a, b) = panels[k];
            Segment {
                start,
                len: panel_nodes,
                tail: tail_integration_matrix(a, b, panel_nodes),
            }
        };
        let mut rules = Vec::new();
        let mut targets = nodes.clone();
        targets.push(t_final);
        for (q, &s) in targets.iter().enumerate() {
            let own = if q < nodes.len() { q / panel_nodes } else { count };
            let mut points = Vec::new();
            let mut segments = Vec::new();
            for k in 0..own {
                segments.push(full_segment(k, points.len()));
                for r in 0..panel_nodes {
                    let idx = k * panel_nodes + r;
                    points.push(EvalPoint {
                        sigma: nodes[idx],
                        omega: node_weights[idx],
                        panel: k,
                        exact: Some(idx),
                        lagrange: Vec::new(),
                    });
                }
            }
            if own < count {
                let a = panels[own].0;
                let sub = Rule1d::gauss(a, s, panel_nodes);
                let panel_nodes_slice = &nodes[own * panel_nodes..(own + 1) * panel_nodes];
                segments.push(Segment {
                    start: points.len(),
                    len: panel_nodes,
                    tail: tail_integration_matrix(a, s, panel_nodes),
                });
                for (&sig, &om) in sub.nodes.iter().zip(&sub.weights) {
                    points.push(EvalPoint {
                        sigma: sig,
                        omega: om,
                        panel: own,
                        exact: None,
                        lagrange: lagrange_weights(panel_nodes_slice, sig),
                    });
                }
            }
            rules.push(TargetRule { points, segments });
        }
        Ok(Self {
            t_final,
            panel_nodes,
            panels,
            nodes,
            node_weights,
            targets,
            rules,
        })
    }
}

/// Backward path from a phase point.
enum Path {
    Line { x: Vec3, v: Vec3, t_b: f64, x_b: Vec3 },
    Cycle { cycle: Cycle, t0: f64 },
}

impl Path {
    fn at_lag(&self, lag: f64) -> Option<(Vec3, Vec3)> {
        match self {
            Path::Line { x, v, t_b, .. } => (lag <= *t_b).then(|| (x - v * lag, *v)),
            Path::Cycle { cycle, t0 } => cycle.state_at(t0 - lag),
        }
    }
}

/// Ingredients shared by every run on one phase grid.
pub struct SolverSetup<'a> {
    pub domain: &'a LevelSetDomain,
    pub bc: &'a BcSpec,
    pub params: WeightParams,
    pub phase: &'a PhaseGrid,
    pub kernel: &'a KernelMatrix,
    pub time: &'a TimeGrid,
    pub max_bounces: usize,
    w: Vec<f64>,
    /// `1 / (ν w√μ)` at the velocity nodes.
    inv_envelope: Vec<f64>,
}

/// Picard history and the field at every output time.
#[derive(Debug, Clone)]
pub struct DuhamelResult {
    pub times: Vec<f64>,
    pub fields: Vec<FieldSample>,
    /// `sup|U⁽ⁿ⁺¹⁾ - U⁽ⁿ⁾|` per iteration.
    pub diffs: Vec<f64>,
    pub converged: bool,
}

impl DuhamelResult {
    pub fn final_field(&self) -> &FieldSample {
        self.fields.last().expect("at least one output time")
    }
}

fn check_growth(diffs: &[f64]) -> bool {
    let n = diffs.len();
    n >= 4 && (n - 3..n).all(|k| diffs[k] > diffs[k - 1])
}

impl<'a> SolverSetup<'a> {
    pub fn new(
        domain: &'a LevelSetDomain,
        bc: &'a BcSpec,
        params: WeightParams,
        phase: &'a PhaseGrid,
        kernel: &'a KernelMatrix,
        time: &'a TimeGrid,
        max_bounces: usize,
    ) -> Result<Self, SemigroupError> {
        bc.validate()?;
        if kernel.n != phase.velocities.len() {
            return Err(SemigroupError::InvalidArgument(
                "kernel matrix and phase grid use different velocity grids".into(),
            ));
        }
        Ok(Self {
            domain,
            bc,
            params,
            phase,
            kernel,
            time,
            max_bounces,
            w: phase.weights_w(&params),
            inv_envelope: phase
                .velocities
                .nodes
                .iter()
                .zip(&kernel.nu)
                .map(|(v, nu)| params.wtilde(v) / nu)
                .collect(),
        })
    }

    fn path(&self, p: &PhasePoint) -> Result<Path, SemigroupError> {
        let t0 = self.time.t_final;
        match self.bc {
            BcSpec::Inflow(_) => {
                let rec = backward_exit(self.domain, p)?;
                if rec.grazing {
                    return Err(SemigroupError::GrazingAbort);
                }
                Ok(Path::Line {
                    x: p.x,
                    v: p.v,
                    t_b: rec.t_b,
                    x_b: rec.x_b,
                })
            }
            BcSpec::BounceBack | BcSpec::Specular => {
                let cycle = if matches!(self.bc, BcSpec::BounceBack) {
                    bounce_back_cycle(self.domain, t0, p, 0.0, self.max_bounces)?
                } else {
                    specular_cycle(self.domain, t0, p, 0.0, self.max_bounces)?
                };
                match cycle.termination {
                    Termination::ReachedTime => Ok(Path::Cycle { cycle, t0 }),
                    Termination::GrazingAbort => Err(SemigroupError::GrazingAbort),
                    Termination::MaxBounces => Err(SemigroupError::MaxBounces(self.max_bounces)),
                }
            }
            BcSpec::Diffuse { .. } => Err(SemigroupError::Unsupported(
                "the collocation solver handles inflow, bounce-back and specular walls".into(),
            )),
        }
    }

    /// Velocity stencil at `vv`: exact for the reversed or unchanged node,
    /// hat weights otherwise. With `envelope`, a triquadratic stencil acts
    /// on `S / (ν w√μ)`, so the sources `K_w(φ w√μ) = ν φ w√μ` of the
    /// invariants are reproduced exactly. Only used where `|vv| = |v_j|`.
    fn velocity_stencil(&self, j: usize, vv: &Vec3, envelope: bool, out: &mut Vec<(usize, f64)>) {
        let grid = &self.phase.velocities;
        out.clear();
        let v = grid.nodes[j];
        if *vv == v {
            out.push((j, 1.0));
        } else if *vv == -v {
            out.push((grid.reflect_index(j), 1.0));
        } else {
            if envelope {
                grid.quadratic_weights(vv, out);
                let target = self.kernel.nu[j] / self.params.wtilde(vv);
                for (k, c) in out.iter_mut() {
                    *c *= target * self.inv_envelope[*k];
                }
            } else {
                grid.hat_weights(vv, out);
            }
        }
    }

    /// `G(s)h0` at phase point `p` (velocity node `j`) along `path`.
    fn free_term(
        &self,
        path: &Path,
        nu: f64,
        s: f64,
        h0: &(dyn Fn(&Vec3, &Vec3) -> f64 + Sync),
    ) -> f64 {
        match path {
            Path::Line { x, v, t_b, x_b } => {
                if s <= *t_b {
                    (-nu * s).exp() * h0(&(x - v * s), v)
                } else if let BcSpec::Inflow(g) = self.bc {
                    (-nu * t_b).exp() * g(s - t_b, x_b, v)
                } else {
                    0.0
                }
            }
            Path::Cycle { .. } => {
                let (xx, vv) = path.at_lag(s).expect("cycle reaches time zero");
                (-nu * s).exp() * h0(&xx, &vv)
            }
        }
    }

    /// `K_w U(s_p) + extra(s_p)` per stored node.
    fn sources(&self, u: &[Vec<f64>], extra: Option<&[Vec<f64>]>) -> Vec<Vec<f64>> {
        let n = self.phase.velocities.len();
        let cells = self.phase.cells.len();
        let w = &self.w;
        (0..self.time.nodes.len())
            .into_par_iter()
            .map(|p| {
                // column m holds f = h/w in cell m
                let f = DMatrix::from_fn(n, cells, |j, m| u[p][m * n + j] / w[j]);
                let kf = &self.kernel.k * f;
                let mut out: Vec<f64> = kf.as_slice().to_vec();
                for (i, o) in out.iter_mut().enumerate() {
                    *o *= w[i % n];
                }
                if let Some(e) = extra {
                    for (o, x) in out.iter_mut().zip(&e[p]) {
                        *o += x;
                    }
                }
                out
            })
            .collect()
    }

    fn read(&self, field: &[f64], cell: usize, stencil: &[(usize, f64)]) -> f64 {
        let base = cell * self.phase.velocities.len();
        stencil.iter().map(|&(j, c)| c * field[base + j]).sum()
    }

    fn read_time(&self, src: &[Vec<f64>], e: &EvalPoint, cell: usize, stencil: &[(usize, f64)]) -> f64 {
        match e.exact {
            Some(p) => self.read(&src[p], cell, stencil),
            None => {
                let first = e.panel * self.time.panel_nodes;
                e.lagrange
                    .iter()
                    .enumerate()
                    .map(|(r, l)| l * self.read(&src[first + r], cell, stencil))
                    .sum()
            }
        }
    }

    /// `U(s) = G(s)h0 + ∫_0^s G(s - σ) S(σ) dσ` at every phase point and
    /// output time, for stored-node sources `S`.
    fn integrate(
        &self,
        nu: &[f64],
        free: &[Vec<f64>],
        src: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>, SemigroupError> {
        let n = self.phase.velocities.len();
        let targets = &self.time.targets;
        let per_point: Vec<Result<Vec<f64>, SemigroupError>> = (0..self.phase.len())
            .into_par_iter()
            .map(|idx| {
                let p = self.phase.point(idx);
                let j = idx % n;
                let path = self.path(&p)?;
                let mut stencil = Vec::with_capacity(8);
                let mut out = Vec::with_capacity(targets.len());
                for (q, &s) in targets.iter().enumerate() {
                    let mut acc = free[q][idx];
                    for e in &self.time.rules[q].points {
                        let lag = s - e.sigma;
                        let Some((xx, vv)) = path.at_lag(lag) else { continue };
                        let cell = self.phase.cells.locate(&xx);
                        self.velocity_stencil(j, &vv, true, &mut stencil);
                        acc += e.omega * (-nu[j] * lag).exp() * self.read_time(src, e, cell, &stencil);
                    }
                    out.push(acc);
                }
                Ok(out)
            })
            .collect();
        let mut fields = vec![vec![0.0; self.phase.len()]; targets.len()];
        for (idx, r) in per_point.into_iter().enumerate() {
            for (q, v) in r?.into_iter().enumerate() {
                fields[q][idx] = v;
            }
        }
        Ok(fields)
    }

    fn free_terms(&self, nu: &[f64], h0: &(dyn Fn(&Vec3, &Vec3) -> f64 + Sync)) -> Result<Vec<Vec<f64>>, SemigroupError> {
        let n = self.phase.velocities.len();
        let targets = &self.time.targets;
        let per_point: Vec<Result<Vec<f64>, SemigroupError>> = (0..self.phase.len())
            .into_par_iter()
            .map(|idx| {
                let p = self.phase.point(idx);
                let path = self.path(&p)?;
                Ok(targets.iter().map(|&s| self.free_term(&path, nu[idx % n], s, h0)).collect())
            })
            .collect();
        let mut free = vec![vec![0.0; self.phase.len()]; targets.len()];
        for (idx, r) in per_point.into_iter().enumerate() {
            for (q, v) in r?.into_iter().enumerate() {
                free[q][idx] = v;
            }
        }
        Ok(free)
    }

    /// Picard iteration `U⁽⁰⁾ = G h0`, `U⁽ⁿ⁺¹⁾ = G h0 + ∫ G K_w U⁽ⁿ⁾ (+ source)`.
    /// Stops early once the iterate change drops below `tol·sup|U|`.
    pub fn duhamel(
        &self,
        h0: &(dyn Fn(&Vec3, &Vec3) -> f64 + Sync),
        picard_iters: usize,
        tol: Option<f64>,
        extra: Option<&[Vec<f64>]>,
    ) -> Result<DuhamelResult, SemigroupError> {
        if picard_iters == 0 {
            return Err(SemigroupError::InvalidArgument("picard_iters must be at least 1".into()));
        }
        let nu = &self.kernel.nu;
        let free = self.free_terms(nu, h0)?;
        let stored = self.time.nodes.len();
        let mut u = free.clone();
        let mut diffs = Vec::new();
        let mut converged = false;
        for _ in 0..picard_iters {
            let src = self.sources(&u[..stored], extra);
            let next = self.integrate(nu, &free, &src)?;
            let diff = sup_diff(&next, &u);
            let size = next.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
            u = next;
            diffs.push(diff);
            if check_growth(&diffs) {
                return Err(SemigroupError::NonConvergence { step: diffs.len() });
            }
            if let Some(t) = tol {
                if diff <= t * size.max(f64::MIN_POSITIVE) {
                    converged = true;
                    break;
                }
            }
        }
        Ok(self.package(u, diffs, converged))
    }

    fn package(&self, u: Vec<Vec<f64>>, diffs: Vec<f64>, converged: bool) -> DuhamelResult {
        let fields = u
            .into_iter()
            .zip(&self.time.targets)
            .map(|(values, &time)| FieldSample {
                time,
                mode: WeightMode::WeightedH,
                values,
            })
            .collect();
        DuhamelResult {
            times: self.time.targets.clone(),
            fields,
            diffs,
            converged,
        }
    }

    /// Iterates `h^{m+1} = U h0 + ∫ U wΓ(h^m/w, h^m/w)` from `h^0 = 0`;
    /// each linear solve runs `picard_iters` Picard steps.
    pub fn nonlinear(
        &self,
        gamma: &GammaForm,
        h0: &(dyn Fn(&Vec3, &Vec3) -> f64 + Sync),
        m_steps: usize,
        picard_iters: usize,
    ) -> Result<NonlinearResult, SemigroupError> {
        if m_steps == 0 {
            return Err(SemigroupError::InvalidArgument("m_steps must be at least 1".into()));
        }
        let n = self.phase.velocities.len();
        let w = &self.w;
        let stored = self.time.nodes.len();
        let mut current: Vec<Vec<f64>> = vec![vec![0.0; self.phase.len()]; self.time.targets.len()];
        let mut diffs = Vec::new();
        let mut last = None;
        for _ in 0..m_steps {
            let source: Vec<Vec<f64>> = current[..stored]
                .par_iter()
                .map(|h| {
                    let mut out = vec![0.0; h.len()];
                    let mut f = vec![0.0; n];
                    for (m, chunk) in out.chunks_mut(n).enumerate() {
                        for j in 0..n {
                            f[j] = h[m * n + j] / w[j];
                        }
                        gamma.apply(&f, chunk);
                        for (c, wj) in chunk.iter_mut().zip(w.iter()) {
                            *c *= wj;
                        }
                    }
                    out
                })
                .collect();
            let res = self.duhamel(h0, picard_iters, None, Some(&source))?;
            let next: Vec<Vec<f64>> = res.fields.iter().map(|f| f.values.clone()).collect();
            diffs.push(sup_diff(&next, &current));
            current = next;
            last = Some(res);
            let k = diffs.len();
            if k >= 4 && (k - 3..k).all(|i| diffs[i] >= diffs[i - 1]) {
                return Err(SemigroupError::NonContraction { step: k });
            }
        }
        let res = last.expect("at least one step");
        let contraction = (diffs.len() >= 3).then(|| diffs[2] / diffs[1]);
        Ok(NonlinearResult {
            result: res,
            diffs,
            contraction,
        })
    }

    /// Mild-form iteration
    /// `F^{m+1}(s) = I(s,0) F0 + ∫ I(s,σ) Q_gain(F^m, F^m)(σ) dσ`,
    /// `I(s,σ) = exp(-∫_σ^s ν(F^m))`, along backward characteristics.
    pub fn positivity(
        &self,
        gain: &GainForm,
        big_f0: &(dyn Fn(&Vec3, &Vec3) -> f64 + Sync),
        m_steps: usize,
    ) -> Result<PositivityResult, SemigroupError> {
        let n = self.phase.velocities.len();
        let f0 = self.phase.sample(big_f0);
        if let Some(bad) = f0.iter().position(|&x| x < 0.0) {
            return Err(SemigroupError::NegativeInitialData {
                index: bad,
                value: f0[bad],
            });
        }
        let stored = self.time.nodes.len();
        let mu: Vec<f64> = self.phase.velocities.nodes.iter().map(maxwellian).collect();
        let mut current = vec![f0.clone(); self.time.targets.len()];
        let mut minima = Vec::new();
        for _ in 0..m_steps {
            let (qg, nuf): (Vec<Vec<f64>>, Vec<Vec<f64>>) = current[..stored]
                .par_iter()
                .map(|big_f| {
                    let mut q = vec![0.0; big_f.len()];
                    let mut nu = vec![0.0; big_f.len()];
                    for ((fc, qc), nc) in big_f.chunks(n).zip(q.chunks_mut(n)).zip(nu.chunks_mut(n)) {
                        gain.apply(fc, qc, nc);
                    }
                    // stored as Q/μ so that the velocity interpolant keeps the sign
                    for (i, x) in q.iter_mut().enumerate() {
                        *x /= mu[i % n];
                    }
                    (q, nu)
                })
                .unzip();
            let per_point: Vec<Result<Vec<f64>, SemigroupError>> = (0..self.phase.len())
                .into_par_iter()
                .map(|idx| {
                    let p = self.phase.point(idx);
                    let j = idx % n;
                    let path = self.path(&p)?;
                    let mut stencil = Vec::with_capacity(8);
                    let mut out = Vec::with_capacity(self.time.targets.len());
                    for (q, &s) in self.time.targets.iter().enumerate() {
                        let rule = &self.time.rules[q];
                        let mut nu_e = vec![0.0; rule.points.len()];
                        let mut q_e = vec![0.0; rule.points.len()];
                        let mut alive = vec![false; rule.points.len()];
                        for (k, e) in rule.points.iter().enumerate() {
                            let Some((xx, vv)) = path.at_lag(s - e.sigma) else { continue };
                            let cell = self.phase.cells.locate(&xx);
                            self.velocity_stencil(j, &vv, false, &mut stencil);
                            nu_e[k] = self.read_time(&nuf, e, cell, &stencil);
                            q_e[k] = maxwellian(&vv) * self.read_time(&qg, e, cell, &stencil);
                            alive[k] = true;
                        }
                        // Φ(σ_k) = ∫_{σ_k}^{s} ν(F) along the path
                        let mut phi = vec![0.0; rule.points.len()];
                        let mut later = 0.0;
                        for seg in rule.segments.iter().rev() {
                            let vals = &nu_e[seg.start..seg.start + seg.len];
                            for r in 0..seg.len {
                                phi[seg.start + r] =
                                    later + seg.tail[r].iter().zip(vals).map(|(a, b)| a * b).sum::<f64>();
                            }
                            let whole: f64 = rule.points[seg.start..seg.start + seg.len]
                                .iter()
                                .zip(vals)
                                .map(|(e, v)| e.omega * v)
                                .sum();
                            later += whole;
                        }
                        let start = match path.at_lag(s) {
                            Some((xx, vv)) => (-later).exp() * big_f0(&xx, &vv),
                            None => 0.0,
                        };
                        let integral: f64 = rule
                            .points
                            .iter()
                            .enumerate()
                            .filter(|(k, _)| alive[*k])
                            .map(|(k, e)| e.omega * (-phi[k]).exp() * q_e[k])
                            .sum();
                        out.push(start + integral);
                    }
                    Ok(out)
                })
                .collect();
            let mut next = vec![vec![0.0; self.phase.len()]; self.time.targets.len()];
            for (idx, r) in per_point.into_iter().enumerate() {
                for (q, v) in r?.into_iter().enumerate() {
                    next[q][idx] = v;
                }
            }
            minima.push(next.iter().flatten().fold(f64::INFINITY, |m, &x| m.min(x)));
            current = next;
        }
        let min_value = minima.iter().copied().fold(f64::INFINITY, f64::min);
        let max_dev_from_mu = current
            .iter()
            .map(|field| {
                field
                    .iter()
                    .enumerate()
                    .map(|(i, x)| (x - mu[i % n]).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        Ok(PositivityResult {
            min_value,
            minima,
            final_field: FieldSample {
                time: self.time.t_final,
                mode: WeightMode::UnweightedF,
                values: current.pop().expect("targets are non-empty"),
            },
            max_deviation_from_maxwellian: max_dev_from_mu,
        })
    }
}

fn sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct NonlinearResult {
    pub result: DuhamelResult,
    /// `sup|h^{m+1} - h^m|` for `m = 0, 1, ...`.
    pub diffs: Vec<f64>,
    /// `sup|h³ - h²| / sup|h² - h¹|` when at least three steps ran.
    pub contraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PositivityResult {
    pub min_value: f64,
    pub minima: Vec<f64>,
    #[serde(skip)]
    pub final_field: FieldSample,
    pub max_deviation_from_maxwellian: f64,
}

/// Mass, energy and (optionally) axial angular moments of `f = h/w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mass: f64,
    pub energy: f64,
    pub angular: Option<f64>,
}

pub fn moments(phase: &PhaseGrid, params: &WeightParams, field: &FieldSample, axis: Option<&SymmetryAxis>) -> Moments {
    let f = field.to_mode(phase, params, WeightMode::UnweightedF);
    let grid = &phase.velocities;
    let n = grid.len();
    let (mut mass, mut energy, mut ang) = (0.0, 0.0, 0.0);
    for (m, x) in phase.cells.centers.iter().enumerate() {
        let rot = axis.map(|a| a.rotation_field(x));
        let vol = phase.cells.volumes[m];
        for j in 0..n {
            let v = &grid.nodes[j];
            let c = vol * grid.weights[j] * f.values[m * n + j] * sqrt_maxwellian(v);
            mass += c;
            energy += c * v.norm_squared();
            if let Some(r) = rot {
                ang += c * r.dot(v);
            }
        }
    }
    Moments {
        mass,
        energy,
        angular: axis.map(|_| ang),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConservationReport {
    pub initial: Moments,
    pub mass_drift: f64,
    pub energy_drift: f64,
    pub angular_drift: Option<f64>,
}

/// `max_t |moment(t) - moment(0)|` over the given fields; `initial` is
/// the moment of the initial datum on the same grid.
pub fn conservation_check(
    phase: &PhaseGrid,
    params: &WeightParams,
    initial: &FieldSample,
    fields: &[FieldSample],
    axis: Option<&SymmetryAxis>,
) -> ConservationReport {
    let m0 = moments(phase, params, initial, axis);
    let (mut dm, mut de, mut da) = (0.0f64, 0.0f64, 0.0f64);
    for f in fields {
        let m = moments(phase, params, f, axis);
        dm = dm.max((m.mass - m0.mass).abs());
        de = de.max((m.energy - m0.energy).abs());
        if let (Some(a), Some(a0)) = (m.angular, m0.angular) {
            da = da.max((a - a0).abs());
        }
    }
    ConservationReport {
        initial: m0,
        mass_drift: dm,
        energy_drift: de,
        angular_drift: axis.map(|_| da),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoercivityReport {
    pub numerator: f64,
    pub interior: f64,
    pub boundary: f64,
    /// `M̂`; infinite when the denominator vanishes.
    pub ratio: f64,
}

/// Outgoing-boundary quadrature `∫_{γ+} |f|² |n·v|` using the nearest cell
/// value, with boundary points from a spiral set of directions about the
/// interior witness.
pub fn boundary_norm_sq(domain: &LevelSetDomain, phase: &PhaseGrid, f: &[f64], directions: usize) -> Result<f64, SemigroupError> {
    let grid = &phase.velocities;
    let n = grid.len();
    let c = domain.interior_witness();
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let d_omega = 4.0 * std::f64::consts::PI / directions as f64;
    let mut acc = 0.0;
    for k in 0..directions {
        let z = 1.0 - (2.0 * k as f64 + 1.0) / directions as f64;
        let r = (1.0 - z * z).sqrt();
        let th = golden * k as f64;
        let dir = Vector3::new(r * th.cos(), r * th.sin(), z);
        let xb = domain.project_from_witness(&dir)?;
        let nrm = domain.outward_normal(&xb)?;
        let rho = (xb - c).norm();
        // dS = ρ² dω / (n·r̂)
        let ds = rho * rho * d_omega / nrm.dot(&dir).max(1e-12);
        let cell = phase.cells.locate(&xb);
        for j in 0..n {
            let dot = nrm.dot(&grid.nodes[j]);
            if dot > 0.0 {
                let val = f[cell * n + j];
                acc += ds * grid.weights[j] * dot * val * val;
            }
        }
    }
    Ok(acc)
}

/// `∫‖Pf‖²_ν / (∫‖(I-P)f‖²_ν + boundary)` over weighted snapshots; the
/// boundary term enters only for inflow.
pub fn coercivity_ratio(
    domain: &LevelSetDomain,
    phase: &PhaseGrid,
    params: &WeightParams,
    nu: &NuProfile,
    snapshots: &[(f64, &FieldSample)],
    bc: BcKind,
) -> Result<CoercivityReport, SemigroupError> {
    if bc == BcKind::Diffuse {
        return Err(SemigroupError::Unsupported("coercivity for diffuse walls needs boundary projections".into()));
    }
    let grid = &phase.velocities;
    let n = grid.len();
    let nu_j: Vec<f64> = grid.nodes.iter().map(|v| nu.at(v)).collect();
    let (mut num, mut den, mut bnd) = (0.0, 0.0, 0.0);
    for &(wt, snap) in snapshots {
        let f = snap.to_mode(phase, params, WeightMode::UnweightedF);
        for m in 0..phase.cells.len() {
            let slice = &f.values[m * n..(m + 1) * n];
            let proj = super::hydro_projection(grid, slice)?;
            let vol = phase.cells.volumes[m];
            for j in 0..n {
                let c = wt * vol * grid.weights[j] * nu_j[j];
                num += c * proj.projected[j].powi(2);
                den += c * proj.residual[j].powi(2);
            }
        }
        if bc == BcKind::Inflow {
            bnd += wt * boundary_norm_sq(domain, phase, &f.values, 256)?;
        }
    }
    let total = den + bnd;
    Ok(CoercivityReport {
        numerator: num,
        interior: den,
        boundary: bnd,
        ratio: if total > 0.0 { num / total } else { f64::INFINITY },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{KernelConfig, VelocityGrid};
    use crate::cycles::DiffuseSampler;
    use crate::semigroup::TransportProblem;
    use nalgebra::DMatrix;

    fn phase(domain: &LevelSetDomain) -> PhaseGrid {
        PhaseGrid {
            cells: SpatialCells::new(domain, 0.25).unwrap(),
            velocities: VelocityGrid::new(4.0, 4).unwrap(),
        }
    }

    #[test]
    fn time_grid_integrates_polynomials_to_every_target() {
        let g = TimeGrid::new(1.3, 8, 4).unwrap();
        assert!((g.node_weights.iter().sum::<f64>() - 1.3).abs() < 1e-13);
        assert_eq!(g.targets.len(), g.nodes.len() + 1);
        let cubic = |s: f64| s * s * s - 2.0 * s;
        let exact = |s: f64| s.powi(4) / 4.0 - s * s;
        for (q, &s) in g.targets.iter().enumerate() {
            let approx: f64 = g.rules[q].points.iter().map(|p| p.omega * cubic(p.sigma)).sum();
            assert!((approx - exact(s)).abs() < 1e-12, "target {s}");
        }
    }

    #[test]
    fn cells_locate_their_own_centres() {
        let d = LevelSetDomain::ellipsoid(Vec3::zeros(), Vec3::new(0.5, 0.5, 0.35)).unwrap();
        let cells = SpatialCells::new(&d, 0.125).unwrap();
        for (m, c) in cells.centers.iter().enumerate() {
            assert_eq!(cells.locate(c), m);
            assert!(d.xi(c) < 0.0);
        }
        // far outside maps to some interior cell
        assert!(cells.locate(&Vec3::new(5.0, 5.0, 5.0)) < cells.len());
    }

    #[test]
    fn weight_modes_round_trip() {
        let d = LevelSetDomain::ball(0.5).unwrap();
        let ph = phase(&d);
        let params = WeightParams::default();
        let h = FieldSample {
            time: 0.0,
            mode: WeightMode::WeightedH,
            values: ph.sample(&|x: &Vec3, v: &Vec3| x[0] + v[1] * v[2] - 0.3),
        };
        let f = h.to_mode(&ph, &params, WeightMode::UnweightedF);
        let back = f.to_mode(&ph, &params, WeightMode::WeightedH);
        for (i, (a, b)) in back.values.iter().zip(&h.values).enumerate() {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
            let w = params.w(&ph.point(i).v);
            assert_eq!(f.values[i], h.values[i] / w);
        }
    }

    #[test]
    fn zero_kernel_duhamel_is_the_transport_semigroup() {
        let d = LevelSetDomain::ball(0.5).unwrap();
        let ph = phase(&d);
        let cfg = KernelConfig::default().normalized();
        let nu = NuProfile::new(&cfg).unwrap();
        let n = ph.velocities.len();
        let kernel = KernelMatrix {
            n,
            k: DMatrix::zeros(n, n),
            nu: ph.velocities.nodes.iter().map(|v| nu.at(v)).collect(),
        };
        let params = WeightParams::default();
        let time = TimeGrid::new(0.75, 8, 4).unwrap();
        let h0 = |x: &Vec3, v: &Vec3| (x[0] - 0.2 * v[2]).cos() * (-v.norm_squared() / 8.0).exp();
        for bc in [BcSpec::BounceBack, BcSpec::Specular] {
            let setup = SolverSetup::new(&d, &bc, params, &ph, &kernel, &time, 10_000).unwrap();
            let r = setup.duhamel(&h0, 2, None, None).unwrap();
            assert_eq!(r.diffs.iter().copied().fold(0.0, f64::max), 0.0);
            let problem = TransportProblem {
                domain: &d,
                bc: &bc,
                nu: &nu,
                params,
                h0: &h0,
                h0_wtilde_sup: f64::INFINITY,
                max_bounces: 10_000,
            };
            let last = r.final_field();
            assert_eq!(last.time, 0.75);
            for i in (0..ph.len()).step_by(37) {
                let g = problem.eval(0.75, &ph.point(i), &mut DiffuseSampler::new(0, 0)).unwrap();
                assert!((last.values[i] - g.value).abs() <= 1e-12, "{bc:?} point {i}");
            }
        }
    }
}
