//! One-dimensional and product quadrature rules shared by the collision,
//! flux-measure and time-integration code.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, OnceLock};

use gauss_quad::legendre::GaussLegendre;
use nalgebra::Vector3;

use crate::Vec3;

/// Gauss-Legendre nodes and weights on [-1, 1].
#[derive(Debug, Clone)]
pub struct ReferenceRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn cache() -> &'static Mutex<HashMap<usize, Arc<ReferenceRule>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<ReferenceRule>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Reference Gauss-Legendre rule with `n` points, cached per `n`.
pub fn gauss_legendre(n: usize) -> Arc<ReferenceRule> {
    let n = n.max(1);
    let mut guard = cache().lock().expect("quadrature cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| {
            let rule = GaussLegendre::new(NonZeroUsize::new(n).expect("n >= 1"));
            let mut pairs: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            Arc::new(ReferenceRule {
                nodes: pairs.iter().map(|p| p.0).collect(),
                weights: pairs.iter().map(|p| p.1).collect(),
            })
        })
        .clone()
}

/// A rule mapped onto a concrete interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule1d {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule1d {
    pub fn gauss(a: f64, b: f64, n: usize) -> Self {
        let r = gauss_legendre(n);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        Self {
            nodes: r.nodes.iter().map(|x| mid + half * x).collect(),
            weights: r.weights.iter().map(|w| half * w).collect(),
        }
    }

    /// Composite Gauss-Legendre: `panels` equal panels of `n` points each.
    pub fn composite(a: f64, b: f64, panels: usize, n: usize) -> Self {
        let panels = panels.max(1);
        let h = (b - a) / panels as f64;
        let mut nodes = Vec::with_capacity(panels * n);
        let mut weights = Vec::with_capacity(panels * n);
        for p in 0..panels {
            let lo = a + h * p as f64;
            let piece = Self::gauss(lo, lo + h, n);
            nodes.extend(piece.nodes);
            weights.extend(piece.weights);
        }
        Self { nodes, weights }
    }

    /// Periodic trapezoid rule on [0, 2π); spectrally accurate for smooth periodic integrands.
    pub fn periodic(n: usize) -> Self {
        let n = n.max(1);
        let h = 2.0 * PI / n as f64;
        Self {
            nodes: (0..n).map(|i| (i as f64 + 0.5) * h).collect(),
            weights: vec![h; n],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Orthonormal frame `(e1, e2, axis)` with `axis` the normalised input.
pub fn frame_from_axis(axis: &Vec3) -> (Vec3, Vec3, Vec3) {
    let a = axis.normalize();
    let helper = if a.x.abs() < 0.9 {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        Vector3::new(0.0, 1.0, 0.0)
    };
    let e1 = helper.cross(&a).normalize();
    let e2 = a.cross(&e1);
    (e1, e2, a)
}

/// Product rule on (a subset of) the unit sphere: Gauss in the polar cosine,
/// periodic trapezoid in azimuth, expressed in a frame whose pole is `axis`.
#[derive(Debug, Clone)]
pub struct SphereRule {
    pub directions: Vec<Vec3>,
    pub cosines: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SphereRule {
    /// Directions with polar cosine in [`c_lo`, `c_hi`] about `axis`.
    pub fn band(axis: &Vec3, c_lo: f64, c_hi: f64, n_polar: usize, n_azimuth: usize) -> Self {
        let (e1, e2, pole) = frame_from_axis(axis);
        let polar = Rule1d::gauss(c_lo, c_hi, n_polar);
        let az = Rule1d::periodic(n_azimuth);
        let mut directions = Vec::with_capacity(polar.len() * az.len());
        let mut cosines = Vec::with_capacity(directions.capacity());
        let mut weights = Vec::with_capacity(directions.capacity());
        for (&c, &wc) in polar.nodes.iter().zip(&polar.weights) {
            let s = (1.0 - c * c).max(0.0).sqrt();
            for (&phi, &wp) in az.nodes.iter().zip(&az.weights) {
                directions.push(pole * c + e1 * (s * phi.cos()) + e2 * (s * phi.sin()));
                cosines.push(c);
                weights.push(wc * wp);
            }
        }
        Self {
            directions,
            cosines,
            weights,
        }
    }

    pub fn full(axis: &Vec3, n_polar: usize, n_azimuth: usize) -> Self {
        Self::band(axis, -1.0, 1.0, n_polar, n_azimuth)
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Lagrange basis weights at `x` for interpolation through `nodes`.
pub fn lagrange_weights(nodes: &[f64], x: f64) -> Vec<f64> {
    let n = nodes.len();
    let mut out = vec![1.0; n];
    for (j, o) in out.iter_mut().enumerate() {
        for m in 0..n {
            if m != j {
                *o *= (x - nodes[m]) / (nodes[j] - nodes[m]);
            }
        }
    }
    out
}

/// Matrix `m` such that `∫_{x_k}^{b} p(s) ds = Σ_j m[k][j] p(x_j)` for the
/// polynomial interpolating values at the `n` Gauss nodes of [a, b].
pub fn tail_integration_matrix(a: f64, b: f64, n: usize) -> Vec<Vec<f64>> {
    let rule = Rule1d::gauss(a, b, n);
    let mut m = vec![vec![0.0; n]; n];
    for k in 0..n {
        let xk = rule.nodes[k];
        let sub = Rule1d::gauss(xk, b, n);
        for (&s, &w) in sub.nodes.iter().zip(&sub.weights) {
            let lw = lagrange_weights(&rule.nodes, s);
            for j in 0..n {
                m[k][j] += w * lw[j];
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_integrates_polynomials_exactly() {
        let r = Rule1d::gauss(0.0, 2.0, 4);
        let v = r.integrate(|x| x.powi(7));
        assert!((v - 2f64.powi(8) / 8.0).abs() < 1e-11);
    }

    #[test]
    fn composite_matches_exact_exponential() {
        let r = Rule1d::composite(0.0, 3.0, 6, 8);
        let v = r.integrate(|x| (-x).exp());
        assert!((v - (1.0 - (-3.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn sphere_rule_area_and_abs_cos() {
        let axis = Vector3::new(0.3, -0.2, 0.9);
        let s = SphereRule::full(&axis, 8, 8);
        let area: f64 = s.weights.iter().sum();
        assert!((area - 4.0 * PI).abs() < 1e-12);
        let hemi = SphereRule::band(&axis, 0.0, 1.0, 4, 8);
        let m: f64 = hemi.weights.iter().zip(&hemi.cosines).map(|(w, c)| w * c).sum();
        assert!((m - PI).abs() < 1e-12);
    }

    #[test]
    fn tail_matrix_is_exact_for_cubics() {
        let m = tail_integration_matrix(1.0, 2.0, 4);
        let rule = Rule1d::gauss(1.0, 2.0, 4);
        let p = |s: f64| 1.0 + s - 2.0 * s * s + 0.5 * s.powi(3);
        let antider = |s: f64| s + s * s / 2.0 - 2.0 * s.powi(3) / 3.0 + s.powi(4) / 8.0;
        for k in 0..4 {
            let approx: f64 = (0..4).map(|j| m[k][j] * p(rule.nodes[j])).sum();
            let exact = antider(2.0) - antider(rule.nodes[k]);
            assert!((approx - exact).abs() < 1e-12);
        }
    }
}
