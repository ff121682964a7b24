//! Velocity-grid discretizations of `ν`, `K`, `Γ` and `Q_gain`.
//!
//! Off-grid values of a grid function are trilinear hat interpolants, so
//! every operator below is the collision quadrature applied to that
//! interpolant.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, DVectorView, DVectorViewMut};
use rayon::prelude::*;

use crate::collision::{
    maxwellian, nu_at_speed, sqrt_maxwellian, CollisionError, CollisionQuadrature, KernelConfig, VelocityGrid,
};
use crate::Vec3;

const PROFILE_STEP: f64 = 1.0 / 64.0;
const PROFILE_MAX: f64 = 24.0;

/// `ν` tabulated in `|v|` with linear interpolation; direct evaluation
/// beyond the table.
#[derive(Debug, Clone)]
pub struct NuProfile {
    cfg: KernelConfig,
    table: Vec<f64>,
}

impl NuProfile {
    pub fn new(cfg: &KernelConfig) -> Result<Self, CollisionError> {
        cfg.validate()?;
        let n = (PROFILE_MAX / PROFILE_STEP).round() as usize + 1;
        let table = (0..n).map(|i| nu_at_speed(cfg, i as f64 * PROFILE_STEP)).collect();
        Ok(Self { cfg: *cfg, table })
    }

    pub fn at_speed(&self, s: f64) -> f64 {
        let x = s / PROFILE_STEP;
        let i = x.floor() as usize;
        if i + 1 >= self.table.len() {
            return nu_at_speed(&self.cfg, s);
        }
        let t = x - i as f64;
        self.table[i] * (1.0 - t) + self.table[i + 1] * t
    }

    pub fn at(&self, v: &Vec3) -> f64 {
        self.at_speed(v.norm())
    }

    /// Minimum of `ν` over the grid nodes and the origin.
    pub fn nu0(&self, grid: &VelocityGrid) -> f64 {
        grid.nodes.iter().map(|v| self.at(v)).fold(self.at_speed(0.0), f64::min)
    }

    pub fn config(&self) -> &KernelConfig {
        &self.cfg
    }
}

/// Grid values of the five collision invariants times `√μ`, as columns.
pub fn invariant_basis(grid: &VelocityGrid) -> DMatrix<f64> {
    DMatrix::from_fn(grid.len(), 5, |i, l| {
        let v = &grid.nodes[i];
        let phi = match l {
            0 => 1.0,
            1..=3 => v[l - 1],
            _ => v.norm_squared(),
        };
        phi * sqrt_maxwellian(v)
    })
}

/// Dense `K` on the velocity grid acting on unweighted values `f`.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub n: usize,
    pub k: DMatrix<f64>,
    pub nu: Vec<f64>,
}

impl KernelMatrix {
    pub fn assemble(cfg: &KernelConfig, grid: &VelocityGrid, nu: &NuProfile) -> Result<Self, CollisionError> {
        let q = CollisionQuadrature::new(*cfg)?;
        let n = grid.len();
        let loss_scale = 2.0 * PI * cfg.angular_scale;
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let v = grid.nodes[i];
                let mut row = vec![0.0; n];
                let mut hats = Vec::with_capacity(8);
                q.for_each_collision(&v, |w, u, up, vp| {
                    let c = w * sqrt_maxwellian(u);
                    grid.hat_weights(vp, &mut hats);
                    let a = c * sqrt_maxwellian(up);
                    for &(j, h) in &hats {
                        row[j] += a * h;
                    }
                    grid.hat_weights(up, &mut hats);
                    let b = c * sqrt_maxwellian(vp);
                    for &(j, h) in &hats {
                        row[j] += b * h;
                    }
                });
                let sv = sqrt_maxwellian(&v);
                q.for_each_u(&v, |w, u| {
                    let c = loss_scale * w * sqrt_maxwellian(u) * sv;
                    grid.hat_weights(u, &mut hats);
                    for &(j, h) in &hats {
                        row[j] -= c * h;
                    }
                });
                row
            })
            .collect();
        let k = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        Ok(Self {
            n,
            k,
            nu: grid.nodes.iter().map(|v| nu.at(v)).collect(),
        })
    }

    /// Replaces `L = diag(ν) - K` by `P L P`, with `P` the grid-weighted
    /// orthogonal projection onto the complement of the invariants. Afterwards
    /// `L` kills the invariants and its range is orthogonal to them, so the
    /// discrete collision step conserves mass, momentum and energy.
    pub fn make_conservative(&mut self, grid: &VelocityGrid) {
        let psi = invariant_basis(grid);
        let w = DVector::from_column_slice(&grid.weights);
        let c = DMatrix::from_fn(self.n, 5, |i, l| w[i] * psi[(i, l)]);
        let gram = c.transpose() * &psi;
        let ginv = gram.try_inverse().expect("invariant Gram matrix is singular");
        let mut l = -self.k.clone();
        for i in 0..self.n {
            l[(i, i)] += self.nu[i];
        }
        // L P = L - (L Ψ) G⁻¹ Cᵀ
        let lp = &l - (&l * &psi) * (&ginv * c.transpose());
        // P (L P) = L P - Ψ G⁻¹ (Cᵀ L P)
        let plp = &lp - &psi * (&ginv * (c.transpose() * &lp));
        let mut k = -plp;
        for i in 0..self.n {
            k[(i, i)] += self.nu[i];
        }
        self.k = k;
    }

    /// `out = K f`.
    pub fn apply(&self, f: &[f64], out: &mut [f64]) {
        let f = DVectorView::from_slice(f, self.n);
        let mut o = DVectorViewMut::from_slice(out, self.n);
        o.gemv(1.0, &self.k, &f, 0.0);
    }

    /// `out = K_w h = w K(h/w)` for grid weights `w`.
    pub fn apply_weighted(&self, w: &[f64], h: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
        scratch.clear();
        scratch.extend(h.iter().zip(w).map(|(a, b)| a / b));
        self.apply(scratch, out);
        for (o, wi) in out.iter_mut().zip(w) {
            *o *= wi;
        }
    }

    /// `max_l |Σ_i w_i ψ_l(v_i) (L f)_i|` over unit basis vectors `f`,
    /// relative to `max|L|`.
    pub fn conservation_defect(&self, grid: &VelocityGrid) -> f64 {
        let psi = invariant_basis(grid);
        let mut l = -self.k.clone();
        for i in 0..self.n {
            l[(i, i)] += self.nu[i];
        }
        let c = DMatrix::from_fn(self.n, 5, |i, m| grid.weights[i] * psi[(i, m)]);
        let defect = c.transpose() * &l;
        let scale = c.abs().max() * l.abs().max();
        defect.abs().max() / scale
    }
}

/// `Γ(f, f)_i = Σ_{jk} g_ijk f_j f_k - f_i Σ_j λ_ij f_j` on the grid.
#[derive(Debug, Clone)]
pub struct GammaForm {
    gain: Vec<Vec<(u32, u32, f64)>>,
    loss: Vec<Vec<(u32, f64)>>,
}

/// Sparse rows of a bilinear form from a dense accumulator.
fn compress_pairs(acc: &[f64], n: usize) -> Vec<(u32, u32, f64)> {
    acc.iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(idx, &c)| ((idx / n) as u32, (idx % n) as u32, c))
        .collect()
}

fn compress_row(acc: &[f64]) -> Vec<(u32, f64)> {
    acc.iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(j, &c)| (j as u32, c))
        .collect()
}

impl GammaForm {
    pub fn assemble(cfg: &KernelConfig, grid: &VelocityGrid) -> Result<Self, CollisionError> {
        let q = CollisionQuadrature::new(*cfg)?;
        let n = grid.len();
        let loss_scale = 2.0 * PI * cfg.angular_scale;
        let rows: Vec<_> = (0..n)
            .into_par_iter()
            .map(|i| {
                let v = grid.nodes[i];
                let mut pairs = vec![0.0; n * n];
                let mut lin = vec![0.0; n];
                let (mut hu, mut hv) = (Vec::with_capacity(8), Vec::with_capacity(8));
                q.for_each_collision(&v, |w, u, up, vp| {
                    let c = w * sqrt_maxwellian(u);
                    grid.hat_weights(up, &mut hu);
                    grid.hat_weights(vp, &mut hv);
                    for &(j, a) in &hu {
                        for &(k, b) in &hv {
                            pairs[j * n + k] += c * a * b;
                        }
                    }
                });
                q.for_each_u(&v, |w, u| {
                    grid.hat_weights(u, &mut hu);
                    let c = loss_scale * w * sqrt_maxwellian(u);
                    for &(j, a) in &hu {
                        lin[j] += c * a;
                    }
                });
                (compress_pairs(&pairs, n), compress_row(&lin))
            })
            .collect();
        let (gain, loss) = rows.into_iter().unzip();
        Ok(Self { gain, loss })
    }

    /// `Γ(f, f)` at every grid node.
    pub fn apply(&self, f: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let g: f64 = self.gain[i].iter().map(|&(j, k, c)| c * f[j as usize] * f[k as usize]).sum();
            let l: f64 = self.loss[i].iter().map(|&(j, c)| c * f[j as usize]).sum();
            *o = g - f[i] * l;
        }
    }
}

/// `Q_gain(F, F)` and `ν(F)` for `F = μ(1 + g)` with `g` hat-interpolated,
/// so `F ≥ 0` on the grid implies `F ≥ 0` everywhere and every quadrature
/// term is nonnegative.
#[derive(Debug, Clone)]
pub struct GainForm {
    constant: Vec<f64>,
    linear: Vec<Vec<(u32, f64)>>,
    pairs: Vec<Vec<(u32, u32, f64)>>,
    nu_constant: Vec<f64>,
    nu_linear: Vec<Vec<(u32, f64)>>,
    mu: Vec<f64>,
}

impl GainForm {
    pub fn assemble(cfg: &KernelConfig, grid: &VelocityGrid) -> Result<Self, CollisionError> {
        let q = CollisionQuadrature::new(*cfg)?;
        let n = grid.len();
        let loss_scale = 2.0 * PI * cfg.angular_scale;
        type Row = (f64, Vec<(u32, f64)>, Vec<(u32, u32, f64)>, f64, Vec<(u32, f64)>);
        let rows: Vec<Row> = (0..n)
            .into_par_iter()
            .map(|i| {
                let v = grid.nodes[i];
                let mut constant = 0.0;
                let mut lin = vec![0.0; n];
                let mut pairs = vec![0.0; n * n];
                let (mut hu, mut hv) = (Vec::with_capacity(8), Vec::with_capacity(8));
                // μ(u')μ(v') = μ(u)μ(v): the factor μ(v) is applied at evaluation
                q.for_each_collision(&v, |w, u, up, vp| {
                    let c = w * maxwellian(u);
                    constant += c;
                    grid.hat_weights(up, &mut hu);
                    grid.hat_weights(vp, &mut hv);
                    for &(j, a) in &hu {
                        lin[j] += c * a;
                    }
                    for &(k, b) in &hv {
                        lin[k] += c * b;
                    }
                    for &(j, a) in &hu {
                        for &(k, b) in &hv {
                            pairs[j * n + k] += c * a * b;
                        }
                    }
                });
                let mut nu_c = 0.0;
                let mut nu_lin = vec![0.0; n];
                q.for_each_u(&v, |w, u| {
                    let c = loss_scale * w * maxwellian(u);
                    nu_c += c;
                    grid.hat_weights(u, &mut hu);
                    for &(j, a) in &hu {
                        nu_lin[j] += c * a;
                    }
                });
                (constant, compress_row(&lin), compress_pairs(&pairs, n), nu_c, compress_row(&nu_lin))
            })
            .collect();
        let mut out = Self {
            constant: Vec::with_capacity(n),
            linear: Vec::with_capacity(n),
            pairs: Vec::with_capacity(n),
            nu_constant: Vec::with_capacity(n),
            nu_linear: Vec::with_capacity(n),
            mu: grid.nodes.iter().map(maxwellian).collect(),
        };
        for (c, l, p, nc, nl) in rows {
            out.constant.push(c);
            out.linear.push(l);
            out.pairs.push(p);
            out.nu_constant.push(nc);
            out.nu_linear.push(nl);
        }
        Ok(out)
    }

    /// `(Q_gain(F, F), ν(F))` at every node from grid values of `F`.
    pub fn apply(&self, big_f: &[f64], q_out: &mut [f64], nu_out: &mut [f64]) {
        let g: Vec<f64> = big_f.iter().zip(&self.mu).map(|(f, m)| f / m - 1.0).collect();
        for i in 0..q_out.len() {
            let lin: f64 = self.linear[i].iter().map(|&(j, c)| c * g[j as usize]).sum();
            let bil: f64 = self.pairs[i].iter().map(|&(j, k, c)| c * g[j as usize] * g[k as usize]).sum();
            q_out[i] = self.mu[i] * (self.constant[i] + lin + bil);
            let nl: f64 = self.nu_linear[i].iter().map(|&(j, c)| c * g[j as usize]).sum();
            nu_out[i] = self.nu_constant[i] + nl;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coarse_cfg() -> KernelConfig {
        let mut cfg = KernelConfig::default().normalized();
        cfg.u_quadrature.radial_nodes = 3;
        cfg.u_quadrature.polar_nodes = 3;
        cfg.u_quadrature.azimuth_nodes = 8;
        cfg.omega_quadrature.polar_nodes = 2;
        cfg.omega_quadrature.azimuth_nodes = 6;
        cfg
    }

    #[test]
    fn profile_matches_direct_nu() {
        let cfg = KernelConfig::default();
        let p = NuProfile::new(&cfg).unwrap();
        for s in [0.0, 0.37, 2.5, 7.9, 30.0] {
            let d = nu_at_speed(&cfg, s);
            assert!((p.at_speed(s) - d).abs() < 1e-5 * d);
        }
    }

    #[test]
    fn conservative_kernel_has_exact_invariants() {
        let cfg = coarse_cfg();
        let grid = VelocityGrid::new(3.0, 6).unwrap();
        let nu = NuProfile::new(&cfg).unwrap();
        let mut k = KernelMatrix::assemble(&cfg, &grid, &nu).unwrap();
        let before = k.conservation_defect(&grid);
        k.make_conservative(&grid);
        let after = k.conservation_defect(&grid);
        assert!(after < 1e-12 && after < before, "{before} {after}");
        let psi = invariant_basis(&grid);
        let mut out = vec![0.0; grid.len()];
        for l in 0..5 {
            let col: Vec<f64> = psi.column(l).iter().copied().collect();
            k.apply(&col, &mut out);
            for i in 0..grid.len() {
                assert!((out[i] - k.nu[i] * col[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gain_form_fixes_maxwellian() {
        let cfg = coarse_cfg();
        let grid = VelocityGrid::new(3.0, 5).unwrap();
        let form = GainForm::assemble(&cfg, &grid).unwrap();
        let f: Vec<f64> = grid.nodes.iter().map(maxwellian).collect();
        let (mut q, mut nu) = (vec![0.0; grid.len()], vec![0.0; grid.len()]);
        form.apply(&f, &mut q, &mut nu);
        for i in 0..grid.len() {
            assert!((q[i] - nu[i] * f[i]).abs() < 1e-12 * nu[i]);
        }
    }

    #[test]
    fn gamma_form_vanishes_at_zero() {
        let cfg = coarse_cfg();
        let grid = VelocityGrid::new(3.0, 4).unwrap();
        let form = GammaForm::assemble(&cfg, &grid).unwrap();
        let mut out = vec![1.0; grid.len()];
        form.apply(&vec![0.0; grid.len()], &mut out);
        assert!(out.iter().all(|&x| x == 0.0));
    }
}
