use kinetic_core::collision::*;
use kinetic_core::cycles::*;
use kinetic_core::geometry::*;
use kinetic_core::semigroup::*;
use kinetic_core::trajectory::*;
use kinetic_core::Vec3;
use nalgebra::{DMatrix, DVector, Matrix3, Rotation3};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn domain(which: u8) -> LevelSetDomain {
    match which % 3 {
        0 => LevelSetDomain::unit_ball(),
        1 => LevelSetDomain::ellipsoid(Vec3::new(0.1, -0.2, 0.0), Vec3::new(1.5, 1.0, 0.7)).unwrap(),
        _ => LevelSetDomain::ball_at(Vec3::new(0.0, 0.3, 0.0), 0.6).unwrap(),
    }
}

fn point(d: &LevelSetDomain, seed: u64) -> PhasePoint {
    let mut rng = kinetic_core::rng::stream(seed, 3);
    let x = d.sample_interior(&mut rng);
    let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    PhasePoint::new(x, v)
}

fn vec3() -> impl Strategy<Value = Vec3> {
    (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b, c)| Vec3::new(a, b, c))
}

fn direction() -> impl Strategy<Value = Vec3> {
    vec3().prop_filter("non-zero", |v| v.norm() > 1e-3).prop_map(|v| v.normalize())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normals_survive_level_rescaling(which in 0u8..3, dir in direction()) {
        let d = domain(which);
        let d2 = d.scaled(2.0).unwrap();
        let x = d.project_from_witness(&dir).unwrap();
        let gap = (d.outward_normal(&x).unwrap() - d2.outward_normal(&x).unwrap()).norm();
        prop_assert!(gap <= 1e-12);
    }

    #[test]
    fn ellipsoid_normal_matches_closed_form(dir in direction()) {
        let c = Vec3::new(0.1, -0.2, 0.0);
        let a = Vec3::new(1.5, 1.0, 0.7);
        let d = LevelSetDomain::ellipsoid(c, a).unwrap();
        let x = d.project_from_witness(&dir).unwrap();
        let y = x - c;
        let exact = Vec3::new(y[0] / (a[0] * a[0]), y[1] / (a[1] * a[1]), y[2] / (a[2] * a[2])).normalize();
        prop_assert!((d.outward_normal(&x).unwrap() - exact).norm() <= 1e-12);
    }

    #[test]
    fn boundary_classification_follows_normal_sign(which in 0u8..3, dir in direction(), v in vec3()) {
        let d = domain(which);
        let x = d.project_from_witness(&dir).unwrap();
        let dot = d.outward_normal(&x).unwrap().dot(&v);
        let class = classify_boundary(&d, &x, &v, 1e-8).unwrap();
        let expected = if dot > 1e-8 {
            BoundaryClass::Outgoing
        } else if dot < -1e-8 {
            BoundaryClass::Incoming
        } else {
            BoundaryClass::Grazing
        };
        prop_assert_eq!(class, expected);
    }

    #[test]
    fn exit_time_scales_inversely_with_speed(which in 0u8..3, seed in any::<u64>(), c in 0.1..10.0f64) {
        let d = domain(which);
        let p = point(&d, seed);
        let a = backward_exit(&d, &p).unwrap();
        let b = backward_exit(&d, &PhasePoint::new(p.x, p.v * c)).unwrap();
        prop_assert!((b.t_b * c - a.t_b).abs() <= 1e-10 * a.t_b);
        prop_assert!((b.x_b - a.x_b).norm() <= 1e-10 * d.bounding_radius());
    }

    #[test]
    fn alpha_is_nonnegative_inside(which in 0u8..3, seed in any::<u64>()) {
        let d = domain(which);
        prop_assert!(alpha(&d, &point(&d, seed)) >= 0.0);
    }

    #[test]
    fn specular_cycles_keep_speed_and_alpha_bound(which in 0u8..3, seed in any::<u64>()) {
        let d = domain(which);
        let p = point(&d, seed);
        let t = 4.0;
        let cycle = specular_cycle(&d, t, &p, 0.0, 100).unwrap();
        let c = GronwallConstant::certified(&d).unwrap();
        let a0 = alpha(&d, &p);
        let speed2 = p.v.norm_squared();
        for node in &cycle.nodes[1..] {
            prop_assert!((node.v.norm_squared() - speed2).abs() <= 1e-10 * speed2.max(1.0));
            let a_k = alpha(&d, &PhasePoint::new(node.x, node.v));
            let lower = (-c.c_xi * (p.v.norm() + 1.0) * (t - node.t)).exp() * a0;
            prop_assert!(a_k >= lower * (1.0 - 1e-9), "alpha {} below {}", a_k, lower);
        }
    }

    #[test]
    fn nu_is_rotation_invariant(v in vec3(), axis in direction(), angle in 0.0..6.28f64) {
        let cfg = KernelConfig::default();
        let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let a = collision_frequency(&cfg, &v).unwrap();
        let b = collision_frequency(&cfg, &(r * v)).unwrap();
        prop_assert!((a - b).abs() <= 1e-6 * a);
    }

    #[test]
    fn flux_measure_is_a_probability_measure(n in direction()) {
        let r = flux_measure(&WeightParams::default(), &n).unwrap();
        prop_assert!((r.total_mass - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn loss_term_is_nonnegative_for_nonnegative_f(v in vec3(), amp in -1.0..1.0f64, shift in vec3()) {
        // a perturbed Maxwellian clipped at zero
        let q = CollisionQuadrature::new(KernelConfig::default()).unwrap();
        let big_f = move |u: &Vec3| (maxwellian(u) * (1.0 + amp * (-(u - shift).norm_squared()).exp())).max(0.0);
        prop_assert!(big_f(&v) * q.nu_of(&big_f, &v) >= 0.0);
    }

    #[test]
    fn flux_samples_are_outgoing(n in direction(), seed in any::<u64>()) {
        let mut s = DiffuseSampler::new(seed, 0);
        for _ in 0..100 {
            prop_assert!(s.sample(&n).dot(&n) > 0.0);
        }
    }

    #[test]
    fn projection_is_orthogonal_and_idempotent(coeffs in prop::collection::vec(-1.0..1.0f64, 8)) {
        let grid = VelocityGrid::new(6.0, 16).unwrap();
        let f: Vec<f64> = grid
            .nodes
            .iter()
            .map(|v| {
                let poly = coeffs[0] + coeffs[1] * v[0] + coeffs[2] * v[1] * v[2] + coeffs[3] * v[0].powi(3)
                    + coeffs[4] * v.norm_squared() + coeffs[5] * v[2].powi(2) + coeffs[6] * v[1].powi(4);
                poly * sqrt_maxwellian(v) * (coeffs[7] * v[0]).cos()
            })
            .collect();
        let p = hydro_projection(&grid, &f).unwrap();
        let scale = f.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
        for phi in [
            &(|_: &Vec3| 1.0) as &dyn Fn(&Vec3) -> f64,
            &|v: &Vec3| v[0],
            &|v: &Vec3| v[1],
            &|v: &Vec3| v[2],
            &|v: &Vec3| v.norm_squared(),
        ] {
            let inner: Vec<f64> = grid.nodes.iter().zip(&p.residual).map(|(v, r)| r * phi(v) * sqrt_maxwellian(v)).collect();
            prop_assert!(grid.integrate(&inner).abs() <= 1e-8 * scale);
        }
        let again = hydro_projection(&grid, &p.projected).unwrap();
        for (a, b) in again.projected.iter().zip(&p.projected) {
            prop_assert!((a - b).abs() <= 1e-10 * scale);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn inflow_value_at_incoming_boundary_is_damped_datum(which in 0u8..3, dir in direction(), v in vec3(), t in 0.0..3.0f64) {
        let d = domain(which);
        let x = d.project_from_witness(&dir).unwrap();
        let n = d.outward_normal(&x).unwrap();
        prop_assume!(n.dot(&v) < -1e-3);
        let nu = NuProfile::new(&KernelConfig::default().normalized()).unwrap();
        let datum: InflowDatum = std::sync::Arc::new(|s, _x, v| (1.0 + s) * (-v.norm_squared() / 8.0).exp());
        let bc = BcSpec::Inflow(datum.clone());
        let h0 = |_: &Vec3, _: &Vec3| 7.0;
        let problem = TransportProblem {
            domain: &d,
            bc: &bc,
            nu: &nu,
            params: WeightParams::default(),
            h0: &h0,
            h0_wtilde_sup: f64::INFINITY,
            max_bounces: 100,
        };
        let g = problem.eval(t, &PhasePoint::new(x, v), &mut DiffuseSampler::new(0, 0)).unwrap();
        // t_b = 0 on the incoming boundary
        let expected = datum(t, &x, &v);
        prop_assert!((g.value - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn diffuse_chain_is_sub_probability(seed in any::<u64>(), t in 0.5..3.0f64) {
        // h0 = 1/w̃ is a fixed point of the diffuse law, so only damping and lost mass remain
        let d = LevelSetDomain::unit_ball();
        let params = WeightParams::default();
        let nu = NuProfile::new(&KernelConfig::default().normalized()).unwrap();
        let nu0 = nu.at_speed(0.0);
        let h0 = move |_: &Vec3, v: &Vec3| 1.0 / params.wtilde(v);
        let bc = BcSpec::Diffuse { k_trunc: 20, mc_paths: 400, remainder_cap: 1.0 };
        let problem = TransportProblem { domain: &d, bc: &bc, nu: &nu, params, h0: &h0, h0_wtilde_sup: 1.0, max_bounces: 10_000 };
        let p = point(&d, seed);
        let g = problem.eval(t, &p, &mut DiffuseSampler::new(seed, 1)).unwrap();
        let wt = params.wtilde(&p.v);
        prop_assert!(g.value * wt <= (-nu0 * t).exp() + 3.0 * g.stderr * wt + 1e-12);
        prop_assert!(g.value >= 0.0);
    }

    #[test]
    fn bounce_back_jacobian_is_cubic_in_time(which in 0u8..3, seed in any::<u64>()) {
        let d = domain(which);
        let p = point(&d, seed);
        let t = 3.0;
        let cycle = bounce_back_cycle(&d, t, &p, 0.0, 1000).unwrap();
        prop_assume!(cycle.nodes.len() >= 3);
        // second flight leg [t_2, t_1], kept away from its ends
        let (lo, hi) = (cycle.nodes[2].t.max(0.0), cycle.nodes[1].t);
        prop_assume!(hi - lo > 0.2);
        let det_at = |s: f64| {
            let h = 1e-6;
            let mut j = Matrix3::zeros();
            for l in 0..3 {
                let mut e = Vec3::zeros();
                e[l] = h;
                let pos = |v: Vec3| bounce_back_cycle(&d, t, &PhasePoint::new(p.x, v), 0.0, 1000).unwrap().state_at(s).unwrap().0;
                j.set_column(l, &((pos(p.v + e) - pos(p.v - e)) / (2.0 * h)));
            }
            j.determinant()
        };
        let samples: Vec<f64> = (0..9).map(|i| lo + (hi - lo) * (0.2 + 0.6 * i as f64 / 8.0)).collect();
        let dets: Vec<f64> = samples.iter().map(|&s| det_at(s)).collect();
        let a = DMatrix::from_fn(9, 4, |i, k| samples[i].powi(k as i32));
        let b = DVector::from_vec(dets.clone());
        let coef = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
        let resid = (a * coef - b).amax();
        let scale = dets.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-12);
        prop_assert!(resid <= 1e-6 * scale, "residual {} scale {}", resid, scale);
    }
}

/// χ² at the 0.001 level with 19 degrees of freedom.
const CHI2_19_999: f64 = 43.82;

fn chi_square(samples: &[f64], cdf: impl Fn(f64) -> f64, bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for &s in samples {
        let b = ((cdf(s) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let expected = samples.len() as f64 / bins as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

fn normal_cdf(x: f64) -> f64 {
    // Gauss quadrature of the density from 0
    let rule = kinetic_core::quadrature::Rule1d::composite(0.0, x.abs(), 64, 8);
    let half = rule.integrate(|s| (-0.5 * s * s).exp()) / (2.0 * std::f64::consts::PI).sqrt();
    if x >= 0.0 {
        0.5 + half
    } else {
        0.5 - half
    }
}

#[test]
fn flux_sampler_passes_chi_square() {
    let n = Vec3::new(0.2, -0.5, 0.7).normalize();
    let (e1, e2, _) = kinetic_core::quadrature::frame_from_axis(&n);
    let mut s = DiffuseSampler::new(2024, 0);
    let draws: Vec<Vec3> = (0..100_000).map(|_| s.sample(&n)).collect();
    // normal component is Rayleigh, tangential components are standard normal
    let normal: Vec<f64> = draws.iter().map(|v| v.dot(&n)).collect();
    let t1: Vec<f64> = draws.iter().map(|v| v.dot(&e1)).collect();
    let t2: Vec<f64> = draws.iter().map(|v| v.dot(&e2)).collect();
    let rayleigh = |x: f64| 1.0 - (-0.5 * x * x).exp();
    let c_n = chi_square(&normal, rayleigh, 20);
    let c_1 = chi_square(&t1, normal_cdf, 20);
    let c_2 = chi_square(&t2, normal_cdf, 20);
    assert!(c_n < CHI2_19_999, "normal component chi2 {c_n}");
    assert!(c_1 < CHI2_19_999, "tangential chi2 {c_1}");
    assert!(c_2 < CHI2_19_999, "tangential chi2 {c_2}");
}

#[test]
fn convexity_check_reports_exact_hessian_eigenvalue() {
    let ball = LevelSetDomain::ball(0.5).unwrap();
    let ell = LevelSetDomain::ellipsoid(Vec3::zeros(), Vec3::new(1.5, 1.0, 0.7)).unwrap();
    let r_ball = check_convexity(&ball, 200, 1);
    let r_ell = check_convexity(&ell, 200, 1);
    // ξ = Σ y_i²/a_i² - 1 has Hessian diag(2/a_i²)
    let lam_ball = ball.hess_xi(&Vec3::zeros())[(0, 0)];
    assert!(r_ball.passed && r_ell.passed);
    assert!((r_ball.observed_c_xi - lam_ball).abs() <= 1e-12);
    assert!((r_ell.observed_c_xi - 2.0 / 1.5f64.powi(2)).abs() <= 1e-12);
}
