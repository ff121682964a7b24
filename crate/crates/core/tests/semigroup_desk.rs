use kinetic_core::collision::*;
use kinetic_core::geometry::LevelSetDomain;
use kinetic_core::semigroup::*;
use kinetic_core::Vec3;

fn desk_kernel() -> KernelConfig {
    let mut cfg = KernelConfig::default().normalized();
    cfg.u_quadrature.radial_nodes = 3;
    cfg.u_quadrature.polar_nodes = 3;
    cfg.u_quadrature.azimuth_nodes = 8;
    cfg.omega_quadrature.polar_nodes = 2;
    cfg.omega_quadrature.azimuth_nodes = 6;
    cfg
}

struct Desk {
    cfg: KernelConfig,
    nu: NuProfile,
    domain: LevelSetDomain,
    phase: PhaseGrid,
    kernel: KernelMatrix,
    params: WeightParams,
}

fn desk(v_max: f64, n: usize) -> Desk {
    let cfg = desk_kernel();
    let grid = VelocityGrid::new(v_max, n).unwrap();
    let nu = NuProfile::new(&cfg).unwrap();
    let mut kernel = KernelMatrix::assemble(&cfg, &grid, &nu).unwrap();
    kernel.make_conservative(&grid);
    let domain = LevelSetDomain::ball(0.5).unwrap();
    let phase = PhaseGrid {
        cells: SpatialCells::new(&domain, 0.25).unwrap(),
        velocities: grid,
    };
    Desk {
        cfg,
        nu,
        domain,
        phase,
        kernel,
        params: WeightParams::default(),
    }
}

#[test]
fn nonlinear_iteration_contracts_and_scales_linearly() {
    let d = desk(4.5, 6);
    let gamma = GammaForm::assemble(&d.cfg, &d.phase.velocities).unwrap();
    let time = TimeGrid::new(1.0, 8, 4).unwrap();
    let bc = BcSpec::BounceBack;
    let setup = SolverSetup::new(&d.domain, &bc, d.params, &d.phase, &d.kernel, &time, 10_000).unwrap();

    let zero = |_: &Vec3, _: &Vec3| 0.0;
    let r = setup.nonlinear(&gamma, &zero, 2, 3).unwrap();
    assert!(r.diffs.iter().all(|&x| x == 0.0));
    assert!(r.result.fields.iter().all(|f| f.sup_norm() == 0.0));

    let run = |amp: f64| {
        let h0 = move |x: &Vec3, v: &Vec3| amp * (1.0 + x[0]) * (-(v - Vec3::x()).norm_squared()).exp();
        setup.nonlinear(&gamma, &h0, 3, 10).unwrap()
    };
    let small = run(1e-3);
    let double = run(2e-3);
    let c = small.contraction.unwrap();
    assert!(c < 1.0, "contraction {c}");
    // first update is the quadratic source, so doubling the data doubles ‖h¹ - h⁰‖ to first order
    let ratio = double.diffs[0] / small.diffs[0];
    assert!((ratio - 2.0).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn positivity_iteration_keeps_maxwellian_and_small_bumps() {
    let d = desk(4.5, 6);
    let gain = GainForm::assemble(&d.cfg, &d.phase.velocities).unwrap();
    let time = TimeGrid::new(1.0, 8, 4).unwrap();
    for bc in [BcSpec::BounceBack, BcSpec::Specular] {
        let setup = SolverSetup::new(&d.domain, &bc, d.params, &d.phase, &d.kernel, &time, 10_000).unwrap();
        let mu = |_: &Vec3, v: &Vec3| maxwellian(v);
        let r = setup.positivity(&gain, &mu, 3).unwrap();
        assert!(r.min_value >= -1e-8);
        // the gain form is exact to quadrature accuracy, the spread is the wall interpolation
        assert!(r.max_deviation_from_maxwellian < 1e-5, "{bc:?}: {}", r.max_deviation_from_maxwellian);

        let bump = |x: &Vec3, v: &Vec3| {
            maxwellian(v)
                + 0.01
                    * sqrt_maxwellian(v)
                    * (-(x.norm_squared() / 0.1)).exp()
                    * (-(v - Vec3::new(1.0, 0.5, 0.0)).norm_squared()).exp()
        };
        let r = setup.positivity(&gain, &bump, 3).unwrap();
        assert!(r.min_value >= -1e-8);
        assert_eq!(r.minima.len(), 3);
    }
    let setup = SolverSetup::new(&d.domain, &BcSpec::BounceBack, d.params, &d.phase, &d.kernel, &time, 10_000).unwrap();
    let negative = |x: &Vec3, v: &Vec3| maxwellian(v) * (1.0 - 3.0 * x[0].abs());
    assert!(matches!(
        setup.positivity(&gain, &negative, 1),
        Err(SemigroupError::NegativeInitialData { .. })
    ));
}

#[test]
fn coercivity_ratio_properties() {
    let d = desk(5.0, 8);
    let grid = &d.phase.velocities;
    // a purely microscopic field: the projection residual of a fixed polynomial
    let micro: Vec<f64> = grid.nodes.iter().map(|v| v[0].powi(3) * sqrt_maxwellian(v)).collect();
    let residual = hydro_projection(grid, &micro).unwrap().residual;
    let values: Vec<f64> = (0..d.phase.cells.len()).flat_map(|_| residual.iter().copied()).collect();
    let f = FieldSample {
        time: 0.0,
        mode: WeightMode::UnweightedF,
        values,
    };
    let r = coercivity_ratio(&d.domain, &d.phase, &d.params, &d.nu, &[(1.0, &f)], BcKind::BounceBack).unwrap();
    assert!(r.ratio.abs() < 1e-12 && r.interior > 0.0);

    // bounce-back ratio finite and stable under time refinement
    let params = d.params;
    let h0 = move |x: &Vec3, v: &Vec3| params.w(v) * (v[0] + x[1] * v[2]) * sqrt_maxwellian(v);
    let bc = BcSpec::BounceBack;
    let mut ratios = Vec::new();
    for npu in [8, 16] {
        let time = TimeGrid::new(1.0, npu, 4).unwrap();
        let setup = SolverSetup::new(&d.domain, &bc, params, &d.phase, &d.kernel, &time, 10_000).unwrap();
        let sol = setup.duhamel(&h0, 60, Some(1e-9), None).unwrap();
        let snaps: Vec<(f64, &FieldSample)> = time.node_weights.iter().copied().zip(&sol.fields).collect();
        ratios.push(coercivity_ratio(&d.domain, &d.phase, &params, &d.nu, &snaps, BcKind::BounceBack).unwrap().ratio);
    }
    assert!(ratios.iter().all(|r| r.is_finite() && *r > 0.0));
    assert!((ratios[1] - ratios[0]).abs() <= 0.2 * ratios[1], "{ratios:?}");

    // inflow with a large boundary datum: the boundary term dominates
    let datum: InflowDatum = std::sync::Arc::new(|_, _, v| 10.0 * (-v.norm_squared() / 8.0).exp());
    let bc = BcSpec::Inflow(datum);
    let time = TimeGrid::new(1.0, 8, 4).unwrap();
    let setup = SolverSetup::new(&d.domain, &bc, params, &d.phase, &d.kernel, &time, 10_000).unwrap();
    let zero = |_: &Vec3, _: &Vec3| 0.0;
    let sol = setup.duhamel(&zero, 60, Some(1e-9), None).unwrap();
    let snaps: Vec<(f64, &FieldSample)> = time.node_weights.iter().copied().zip(&sol.fields).collect();
    let r = coercivity_ratio(&d.domain, &d.phase, &params, &d.nu, &snaps, BcKind::Inflow).unwrap();
    assert!(r.boundary > r.interior, "{r:?}");
    assert!(r.ratio < 1.0, "{r:?}");
}

#[test]
fn conservation_moments_of_odd_data_vanish() {
    let d = desk(5.0, 8);
    let params = d.params;
    let f0 = FieldSample {
        time: 0.0,
        mode: WeightMode::WeightedH,
        values: d.phase.sample(&move |_: &Vec3, v: &Vec3| params.w(v) * v[0] * sqrt_maxwellian(v)),
    };
    let m = moments(&d.phase, &params, &f0, None);
    assert!(m.mass.abs() < 1e-14 && m.energy.abs() < 1e-14);
}
