//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line (run with `--nocapture` to see them on success).

use nalgebra::{DMatrix, DVector};

use finsler_lab::analytic::{
    self, adaptive_simpson, annulus_gradient, annulus_solution, lambda_0, neck_arctan_limit,
    neck_asymptote, neck_integral, AnnulusSpec, BlowupPrediction, CutoffSpec,
};
use finsler_lab::fem::{self, transform_mesh, Affine, DofMap, InclusionBc, SolveOpts};
use finsler_lab::geometry::{
    radii_expansion_inner_refined, radii_expansion_outer_refined, symmetric_sqrt,
    touching_radii_inner, touching_radii_outer, WulffConfig,
};
use finsler_lab::harness::{self, FitBlock, MeshBlock, NeckBlock, OutputBlock, PredictBlock};
use finsler_lab::mesh::{
    build_mesh, build_structured_annulus, build_structured_half_annulus, Grading, Mesh,
};
use finsler_lab::norms::NormModel;

fn criterion(n: usize, name: &str, ok: bool, detail: &str) {
    println!(
        "criterion {n:2} [{name}] {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} [{name}] failed: {detail}");
}

fn vecn(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&vecn(v))
}

fn ellipse(v: &[f64]) -> NormModel {
    NormModel::ellipse(diag(v)).unwrap()
}

fn coarse_grading() -> Grading {
    Grading {
        h_min: 0.02,
        h_max: 0.6,
        ..Grading::default()
    }
}

/// P1 gradient on one element from the 2×signed-area formula.
fn tri_gradient(mesh: &Mesh, values: &[f64], t: usize) -> [f64; 2] {
    let [a, b, c] = mesh.triangles[t];
    let (pa, pb, pc) = (mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
    let det = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0]);
    let grads = [
        [(pb[1] - pc[1]) / det, (pc[0] - pb[0]) / det],
        [(pc[1] - pa[1]) / det, (pa[0] - pc[0]) / det],
        [(pa[1] - pb[1]) / det, (pb[0] - pa[0]) / det],
    ];
    let mut g = [0.0; 2];
    for (i, v) in [a, b, c].into_iter().enumerate() {
        g[0] += values[v] * grads[i][0];
        g[1] += values[v] * grads[i][1];
    }
    g
}

// 1. Norm identity suite: Euler relation, H₀(∇H) = 1, dual-map round
//    trip, A(ξ)ξ·ξ = H².
#[test]
fn criterion_01_norm_identities() {
    use rand::{Rng, SeedableRng};
    let families: Vec<NormModel> = vec![
        NormModel::euclidean(2),
        NormModel::euclidean(3),
        NormModel::ellipse(DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.8])).unwrap(),
        ellipse(&[1.0, 1.0, 2.5]),
        NormModel::perturbed_ellipse(diag(&[1.0, 1.5]), 0.04, 4).unwrap(),
    ];
    let mut worst = 0.0f64;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xacce97);
    for norm in &families {
        for _ in 0..1000 {
            let xi = DVector::from_fn(norm.dim(), |_, _| rng.gen_range(-1.0..1.0f64))
                * 10f64.powf(rng.gen_range(-3.0..3.0));
            if xi.norm() < 1e-6 {
                continue;
            }
            let jet = norm.jet(&xi).unwrap();
            let h = jet.value;
            let euler = (jet.gradient.dot(&xi) - h).abs() / h;
            assert!(euler <= 1e-10, "Euler relation residual {euler}");
            let dual_of_grad = (norm.dual(&jet.gradient) - 1.0).abs();
            assert!(dual_of_grad <= 1e-8, "H0(grad H) residual {dual_of_grad}");
            let round = norm.inverse_dual_map(&norm.dual_map(&xi)).unwrap();
            let rt = (&round - &xi).norm() / xi.norm();
            assert!(rt <= 1e-8, "dual-map round trip {rt}");
            let a = norm.energy_hessian(&xi).unwrap();
            let quad = ((&a.matrix * &xi).dot(&xi) - h * h).abs() / (h * h);
            assert!(quad <= 1e-10, "A(xi)xi.xi residual {quad}");
            worst = worst.max(euler).max(dual_of_grad).max(rt).max(quad);
        }
    }
    criterion(
        1,
        "norm identities",
        true,
        &format!("5 families x 1000 samples, worst residual {worst:.2e}"),
    );
}

// 2. Annulus oracle: field order ≥ 1.8 at off-vertex probes, gradient
//    order ≥ 0.9 at centroids, midpoint value within 1e−3.
#[test]
fn criterion_02_annulus_convergence() {
    use rand::{Rng, SeedableRng};
    let mut detail = String::new();
    let mut all_ok = true;
    for (label, n, section, ambient) in [
        ("N=2 euclid", 2usize, NormModel::euclidean(2), NormModel::euclidean(2)),
        ("N=2 ellipse", 2, ellipse(&[1.0, 2.0]), ellipse(&[1.0, 2.0])),
        ("N=3 euclid", 3, NormModel::euclidean(2), NormModel::euclidean(3)),
        ("N=3 ellipse", 3, ellipse(&[1.0, 2.0]), ellipse(&[1.0, 1.0, 2.0])),
    ] {
        let (r, big_r) = (1.0, 2.0);
        let spec =
            AnnulusSpec::new(ambient.clone(), DVector::zeros(ambient.dim()), r, big_r, 0.0, 1.0)
                .unwrap();
        let embed = |p: [f64; 2]| -> DVector<f64> {
            if n == 2 {
                vecn(&[p[0], p[1]])
            } else {
                vecn(&[p[0], 0.0, p[1]])
            }
        };
        let phi = Affine::constant(1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut probes = Vec::new();
        while probes.len() < 40 {
            let p = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.9..2.9)];
            if n == 3 && p[0] < 0.05 {
                continue;
            }
            let h0 = section.dual(&vecn(&p));
            if h0 > 1.1 && h0 < 1.9 {
                probes.push(p);
            }
        }
        let mut field_errs = Vec::new();
        let mut grad_errs = Vec::new();
        let mut mid_err = f64::NAN;
        for level in 0..4 {
            let mesh = if n == 2 {
                build_structured_annulus(&section, r, big_r, 4 << level, 24 << level).unwrap()
            } else {
                build_structured_half_annulus(&section, r, big_r, 4 << level, 12 << level)
                    .unwrap()
            };
            let dofs = DofMap::build(
                &mesh,
                &phi,
                [InclusionBc::Fixed(0.0), InclusionBc::Tied],
                false,
            )
            .unwrap();
            let (field, _) = fem::solve(&mesh, &section, &dofs, &phi, &SolveOpts::default())
                .unwrap();
            let mut fe = 0.0f64;
            for p in &probes {
                let uh = fem::interpolate(&mesh, &field.vertex_values, *p).unwrap();
                fe = fe.max((uh - annulus_solution(&spec, &embed(*p)).unwrap()).abs());
            }
            let mut ge = 0.0f64;
            for t in 0..mesh.triangles.len() {
                let c = mesh.centroid(t);
                // the axisymmetric weight degenerates on the axis; the
                // L∞ gradient rate is measured on the bulk x ≥ 0.1
                if n == 3 && c[0] < 0.1 {
                    continue;
                }
                let g = tri_gradient(&mesh, &field.vertex_values, t);
                let exact = annulus_gradient(&spec, &embed(c)).unwrap();
                let (ex, ez) = (exact[0], exact[ambient.dim() - 1]);
                ge = ge.max(((g[0] - ex).powi(2) + (g[1] - ez).powi(2)).sqrt());
            }
            field_errs.push(fe);
            grad_errs.push(ge);
            if level == 3 {
                // geometric-mean radius probe on the finest mesh
                let dir = vecn(&[0.96f64.cos(), 0.96f64.sin()]);
                let pm = &dir * ((r * big_r).sqrt() / section.dual(&dir));
                let p = [pm[0], pm[1]];
                let uh = fem::interpolate(&mesh, &field.vertex_values, p).unwrap();
                let exact = annulus_solution(&spec, &embed(p)).unwrap();
                if n == 2 {
                    // log profile: the geometric-mean radius carries the mean value
                    assert!((exact - 0.5).abs() < 1e-12);
                }
                mid_err = (uh - exact).abs();
            }
        }
        // observed order: least-squares slope of log2(error) vs level,
        // robust to the argmax probe switching between levels
        let order = |e: &[f64]| {
            let m = e.len() as f64;
            let xbar = (m - 1.0) / 2.0;
            let ybar = e.iter().map(|v| v.log2()).sum::<f64>() / m;
            let sxy: f64 = e
                .iter()
                .enumerate()
                .map(|(i, v)| (i as f64 - xbar) * (v.log2() - ybar))
                .sum();
            let sxx: f64 = (0..e.len()).map(|i| (i as f64 - xbar).powi(2)).sum();
            -sxy / sxx
        };
        let (fo, go) = (order(&field_errs), order(&grad_errs));
        all_ok &= fo >= 1.8 && go >= 0.9 && mid_err <= 1e-3;
        detail.push_str(&format!(
            "{label} orders ({fo:.2}, {go:.2}) mid {mid_err:.0e}; "
        ));
    }
    criterion(2, "annulus oracle", all_ok, detail.trim_end());
}

fn two_inclusion_solve(
    norm: &NormModel,
    delta: f64,
    phi: &Affine,
    merged: bool,
) -> (WulffConfig, Mesh, DofMap, fem::DiscreteField, fem::SolveReport) {
    let cfg = WulffConfig::canonical(norm.clone(), 1.0, 1.0, delta).unwrap();
    let mesh = build_mesh(&cfg, 8.0, &coarse_grading()).unwrap();
    let dofs =
        DofMap::build(&mesh, phi, [InclusionBc::Tied, InclusionBc::Tied], merged).unwrap();
    let (field, report) = fem::solve(&mesh, norm, &dofs, phi, &SolveOpts::default()).unwrap();
    (cfg, mesh, dofs, field, report)
}

// 3. Maximum principles at λ = λ₀ on solved scenarios.
#[test]
fn criterion_03_maximum_principles() {
    let phi = Affine {
        a: [0.3, 1.0],
        b: 0.0,
    };
    let mut all_ok = true;
    let mut detail = String::new();
    for (label, norm) in [
        ("euclid", NormModel::euclidean(2)),
        ("ellipse", ellipse(&[1.0, 1.5])),
    ] {
        let delta = 0.05f64;
        let (cfg, mesh, dofs, field, _) = two_inclusion_solve(&norm, delta, &phi, false);
        let w = delta.sqrt();
        let spec = CutoffSpec::new(w, &cfg.q);
        let cut = |x: [f64; 2]| analytic::cutoff_f(&vecn(&x), &spec).0;
        let rep = fem::verify_max_principles(&field, &mesh, &dofs, &norm, lambda_0(w), &cut);
        let scale = rep.u_outer_max - rep.u_outer_min;
        all_ok &= rep.u_violation <= 1e-10 * scale
            && rep.grad_interior_max <= 1.05 * rep.grad_boundary_max
            && rep.p_interior_max <= rep.p_boundary_max + 0.05 * rep.p_boundary_max.abs();
        detail.push_str(&format!(
            "{label}: u viol {:.0e}, grad int/bnd {:.3}, P int/bnd {:.3}; ",
            rep.u_violation,
            rep.grad_interior_max / rep.grad_boundary_max,
            rep.p_interior_max / rep.p_boundary_max
        ));
    }
    criterion(3, "maximum principles", all_ok, detail.trim_end());
}

// 4. Well-posedness: uniqueness probe, vanishing tied fluxes, merged
//    fluxes equal and opposite.
#[test]
fn criterion_04_well_posedness() {
    let norm = ellipse(&[1.0, 1.5]);
    let phi = Affine {
        a: [0.2, 1.0],
        b: 0.1,
    };
    let cfg = WulffConfig::canonical(norm.clone(), 1.0, 1.0, 0.05).unwrap();
    let mesh = build_mesh(&cfg, 8.0, &coarse_grading()).unwrap();
    let opts = SolveOpts::default();
    let dofs = DofMap::build(&mesh, &phi, [InclusionBc::Tied, InclusionBc::Tied], false).unwrap();
    let probe = fem::uniqueness_probe(&mesh, &norm, &dofs, &phi, &opts, 42).unwrap();
    let (_, report) = fem::solve(&mesh, &norm, &dofs, &phi, &opts).unwrap();
    // "10x solver tolerance" with the solver's relative tolerance applied
    // to the boundary-data scale seen by the residual
    let scale = 8.0 * (phi.a[0].abs() + phi.a[1].abs()) + phi.b.abs();
    let flux_tol = 10.0 * opts.tol * scale;
    let merged_dofs =
        DofMap::build(&mesh, &phi, [InclusionBc::Tied, InclusionBc::Tied], true).unwrap();
    let (_, mrep) = fem::solve(&mesh, &norm, &merged_dofs, &phi, &opts).unwrap();
    let opposite = (mrep.flux1 + mrep.flux2).abs() <= 0.01 * mrep.flux1.abs();
    let ok = probe <= 1e-8
        && report.flux1.abs() <= flux_tol
        && report.flux2.abs() <= flux_tol
        && (mrep.flux1 + mrep.flux2).abs() <= flux_tol
        && opposite;
    criterion(
        4,
        "well-posedness",
        ok,
        &format!(
            "uniqueness {probe:.1e}, fluxes ({:.1e}, {:.1e}) vs tol {flux_tol:.1e}, merged sum {:.1e} of {:.1e}",
            report.flux1,
            report.flux2,
            mrep.flux1 + mrep.flux2,
            mrep.flux1
        ),
    );
}

// 5. Affine-equivalence oracle at δ = 0.05.
#[test]
fn criterion_05_affine_equivalence() {
    let m = DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.8]);
    let norm = NormModel::ellipse(m.clone()).unwrap();
    let phi = Affine {
        a: [0.4, 1.0],
        b: 0.2,
    };
    let cfg = WulffConfig::canonical(norm.clone(), 1.0, 1.0, 0.05).unwrap();
    let mesh = build_mesh(&cfg, 8.0, &coarse_grading()).unwrap();
    let opts = SolveOpts::default();
    let dofs = DofMap::build(&mesh, &phi, [InclusionBc::Tied, InclusionBc::Tied], false).unwrap();
    let (field, _) = fem::solve(&mesh, &norm, &dofs, &phi, &opts).unwrap();

    let sqrt_m = symmetric_sqrt(&m);
    let inv_sqrt = sqrt_m.clone().try_inverse().unwrap();
    let mapped = transform_mesh(&mesh, &inv_sqrt);
    let a2 = &sqrt_m * vecn(&phi.a);
    let phi2 = Affine {
        a: [a2[0], a2[1]],
        b: phi.b,
    };
    let dofs2 =
        DofMap::build(&mapped, &phi2, [InclusionBc::Tied, InclusionBc::Tied], false).unwrap();
    let (field2, _) =
        fem::solve(&mapped, &NormModel::euclidean(2), &dofs2, &phi2, &opts).unwrap();
    let scale = 8.0 * (phi.a[0].abs() + phi.a[1].abs()) + phi.b.abs();
    let mut worst = 0.0f64;
    for (a, b) in field.vertex_values.iter().zip(&field2.vertex_values) {
        worst = worst.max((a - b).abs());
    }
    let tol = 10.0 * opts.tol * scale;
    criterion(
        5,
        "affine equivalence",
        worst <= tol,
        &format!("max vertex difference {worst:.2e} vs tol {tol:.1e}"),
    );
}

fn sweep_config(
    dim: usize,
    family: &str,
    matrix: Option<Vec<Vec<f64>>>,
    deltas: Vec<f64>,
    h_min: f64,
) -> harness::ScenarioConfig {
    harness::ScenarioConfig {
        version: 1,
        dim,
        norm: harness::NormBlock {
            family: family.into(),
            matrix,
            beta: None,
            k: None,
        },
        inclusions: harness::InclusionBlock {
            r1: 1.0,
            r2: 1.0,
            deltas,
            r_out: None,
        },
        phi: harness::PhiBlock {
            a: [0.0, 1.0],
            b: 0.0,
        },
        mesh: MeshBlock {
            h_min,
            ..MeshBlock::default()
        },
        solver: harness::SolverBlock::default(),
        neck: NeckBlock::default(),
        fit: FitBlock::default(),
        output: OutputBlock::default(),
        predict: PredictBlock::default(),
    }
}

fn log_spaced(hi: f64, lo: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| hi * (lo / hi).powf(i as f64 / (count - 1) as f64))
        .collect()
}

// 6. N = 2 blow-up rate: fitted slope −0.50 ± 0.07 and prefactor
//    variation ≤ 25% over the final half-decade.
#[test]
fn criterion_06_rate_n2() {
    let cfg = sweep_config(
        2,
        "ellipse",
        Some(vec![vec![1.0, 0.0], vec![0.0, 1.5]]),
        log_spaced(1e-1, 1e-3, 8),
        2e-3,
    );
    let rows: Vec<harness::SweepRow> = cfg
        .inclusions
        .deltas
        .iter()
        .map(|d| harness::solve_row(&cfg, *d).unwrap())
        .collect();
    let fit = harness::fit_rate(&rows, 2, 0.25).unwrap();
    let ok = (fit.slope + 0.5).abs() <= 0.07 && fit.prefactor_spread <= 0.25;
    criterion(
        6,
        "N=2 blow-up rate",
        ok,
        &format!(
            "slope {:.4} (target −0.5 ± 0.07), prefactor spread {:.1}%",
            fit.slope,
            100.0 * fit.prefactor_spread
        ),
    );
}

// 7. Prefactor structure: measured prefactor ratio between two
//    configurations matches the predicted ratio within 30%.
#[test]
fn criterion_07_prefactor_structure() {
    let norm = NormModel::euclidean(2);
    let phi = Affine {
        a: [0.0, 1.0],
        b: 0.0,
    };
    let opts = SolveOpts::default();
    let grading = Grading {
        h_min: 0.01,
        h_max: 0.6,
        ..Grading::default()
    };
    let measure = |r2: f64| -> (f64, f64) {
        let r_out = 4.0 * (1.0 + r2);
        let mut pref = 0.0;
        for d in [2e-3, 1e-3] {
            let cfg = WulffConfig::canonical(norm.clone(), 1.0, r2, d).unwrap();
            let mesh = build_mesh(
                &cfg,
                r_out,
                &Grading {
                    h_min: 2e-3,
                    h_max: 0.6,
                    ..Grading::default()
                },
            )
            .unwrap();
            let dofs =
                DofMap::build(&mesh, &phi, [InclusionBc::Tied, InclusionBc::Tied], false)
                    .unwrap();
            let (_, rep) = fem::solve(&mesh, &norm, &dofs, &phi, &opts).unwrap();
            pref += rep.max_grad * d.sqrt() / 2.0;
        }
        let r0 = fem::compute_r0(&norm, 1.0, r2, r_out, &phi, 2e-2, &grading, &opts)
            .unwrap()
            .value;
        let cfg = WulffConfig::canonical(norm.clone(), 1.0, r2, 1e-3).unwrap();
        let pred = BlowupPrediction::from_config(&cfg, r0, 0.25).unwrap();
        (pref, pred.delta_u_prefactor())
    };
    let (meas_a, pred_a) = measure(1.0);
    let (meas_b, pred_b) = measure(2.0);
    let measured = meas_b / meas_a;
    let predicted = pred_b / pred_a;
    let rel = (measured / predicted - 1.0).abs();
    criterion(
        7,
        "prefactor structure",
        rel <= 0.30,
        &format!("measured ratio {measured:.4} vs predicted {predicted:.4} ({:.0}% off)", 100.0 * rel),
    );
}

// 8. Homogeneity of the full pipeline under φ → κφ.
#[test]
fn criterion_08_homogeneity() {
    let norm = ellipse(&[1.0, 1.5]);
    let phi = Affine {
        a: [0.2, 1.0],
        b: 0.1,
    };
    let cfg = WulffConfig::canonical(norm.clone(), 1.0, 1.0, 0.05).unwrap();
    let mesh = build_mesh(&cfg, 8.0, &coarse_grading()).unwrap();
    let opts = SolveOpts::default();
    let dofs = DofMap::build(&mesh, &phi, [InclusionBc::Tied, InclusionBc::Tied], false).unwrap();
    let (base, base_rep) = fem::solve(&mesh, &norm, &dofs, &phi, &opts).unwrap();
    let grading = Grading {
        h_min: 0.01,
        h_max: 0.6,
        ..Grading::default()
    };
    let r0_base = fem::compute_r0(&norm, 1.0, 1.0, 8.0, &phi, 2e-2, &grading, &opts)
        .unwrap()
        .value;
    let mut worst = 0.0f64;
    for kappa in [2.0, -1.0] {
        let phik = phi.scaled(kappa);
        let dofsk =
            DofMap::build(&mesh, &phik, [InclusionBc::Tied, InclusionBc::Tied], false).unwrap();
        let (fk, repk) = fem::solve(&mesh, &norm, &dofsk, &phik, &opts).unwrap();
        for (a, b) in base.vertex_values.iter().zip(&fk.vertex_values) {
            worst = worst.max((kappa * a - b).abs());
        }
        worst = worst.max((kappa.abs() * base_rep.max_grad - repk.max_grad).abs());
        let r0k = fem::compute_r0(&norm, 1.0, 1.0, 8.0, &phik, 2e-2, &grading, &opts)
            .unwrap()
            .value;
        worst = worst.max((kappa * r0_base - r0k).abs());
    }
    criterion(
        8,
        "homogeneity",
        worst <= 1e-8,
        &format!("worst scaling residual {worst:.2e} over kappa in {{2, -1}}"),
    );
}

// 9. Neck integral against its asymptote and the arctan closed form.
#[test]
fn criterion_09_neck_integral() {
    let mut detail = String::new();
    let mut ok = true;
    for (label, norm) in [
        ("euclid", NormModel::euclidean(2)),
        ("ellipse", ellipse(&[1.0, 2.0])),
    ] {
        let cfg = WulffConfig::canonical(norm, 1.0, 1.0, 1e-4).unwrap();
        let quad = neck_integral(&cfg, 1.0, 0.2, 1e-4).unwrap();
        let asym = neck_asymptote(&cfg, 1.0, 1e-4).unwrap();
        let rel = (quad / asym - 1.0).abs();
        ok &= rel <= 0.05;
        detail.push_str(&format!("{label} ratio off {:.2}%; ", 100.0 * rel));
    }
    // flat-graph limit: the 1-D kernel integral has the arctan closed form
    let (c, w, delta) = (0.7, 0.15, 1e-5);
    let flat = adaptive_simpson(&|x: f64| 1.0 / (delta + c * x * x), -w, w, 1e-10);
    let arctan_rel = (flat / neck_arctan_limit(c, w, delta) - 1.0).abs();
    ok &= arctan_rel <= 1e-6;
    detail.push_str(&format!("arctan residual {arctan_rel:.1e}"));
    criterion(9, "neck integral", ok, &detail);
}

// 10. Radii expansions: normalized residual strictly decreasing over
//     three halvings of (δ, |P⊥|).
#[test]
fn criterion_10_radii_richardson() {
    let mut ok = true;
    let mut detail = String::new();
    for norm in [NormModel::euclidean(2), ellipse(&[1.0, 2.0])] {
        for t in [0.25, 0.5] {
            for inner in [true, false] {
                let mut res = Vec::new();
                for k in 0..3 {
                    let scale = 0.5f64.powi(k);
                    let delta = 2.5e-4 * scale;
                    let off = 5e-3 * scale;
                    let cfg = WulffConfig::canonical(norm.clone(), 1.0, 1.5, delta).unwrap();
                    let dir = vecn(&[off, -1.0]);
                    let p = cfg.shape1.boundary_point(&dir, &cfg.norm);
                    let (exact, predicted) = if inner {
                        let (r1, r2) = touching_radii_inner(&cfg, &p, t).unwrap();
                        (r2 - r1, radii_expansion_inner_refined(&cfg, &p, t, delta))
                    } else {
                        let (rho1, rho2) = touching_radii_outer(&cfg, &p, t).unwrap();
                        (rho2 - rho1, radii_expansion_outer_refined(&cfg, &p, t, delta))
                    };
                    let denom = delta * delta + (&p - &cfg.p0).norm_squared();
                    res.push((exact - predicted).abs() / denom);
                }
                ok &= res[0] > res[1] && res[1] > res[2];
                detail = format!("last sequence {res:?}");
            }
        }
    }
    criterion(
        10,
        "radii expansions",
        ok,
        &format!("2 norms x t in {{0.25, 0.5}} x inner/outer; {detail}"),
    );
}

// 11. R₀ stability: Richardson-extrapolated estimates at δ_ref and
//     δ_ref/2 agree within 2%.
#[test]
fn criterion_11_r0_stability() {
    let norm = ellipse(&[1.0, 1.5]);
    let phi = Affine {
        a: [0.0, 1.0],
        b: 0.0,
    };
    let grading = Grading {
        h_min: 0.01,
        h_max: 0.6,
        ..Grading::default()
    };
    let opts = SolveOpts::default();
    let a = fem::compute_r0(&norm, 1.0, 1.0, 8.0, &phi, 2e-2, &grading, &opts).unwrap();
    let b = fem::compute_r0(&norm, 1.0, 1.0, 8.0, &phi, 1e-2, &grading, &opts).unwrap();
    let rel = (a.value / b.value - 1.0).abs();
    criterion(
        11,
        "R0 stability",
        rel <= 0.02,
        &format!("R0 {:.6} vs {:.6} ({:.2}% apart)", a.value, b.value, 100.0 * rel),
    );
}

// 12. N = 3 log-corrected rate beats both pure power laws on residuals
//     (advisory if the mesh budget is exceeded).
#[test]
fn criterion_12_rate_n3() {
    let cfg = sweep_config(3, "euclidean", None, log_spaced(1e-1, 3e-3, 5), 3e-3);
    let mut rows = Vec::new();
    for d in &cfg.inclusions.deltas {
        match harness::solve_row(&cfg, *d) {
            Ok(r) => rows.push(r),
            Err(e) => {
                let msg = e.to_string();
                if msg.contains("budget") || msg.contains("elements") {
                    criterion(
                        12,
                        "N=3 log-rate",
                        true,
                        &format!("ADVISORY: mesh budget exceeded at delta {d:.1e}: {msg}"),
                    );
                    return;
                }
                panic!("solve failed at delta {d}: {e}");
            }
        }
    }
    let fit = harness::fit_rate(&rows, 3, 0.25).unwrap();
    let cmp = fit.model_rss.unwrap();
    let ok = cmp.winner == "log_corrected";
    criterion(
        12,
        "N=3 log-rate",
        ok,
        &format!(
            "residuals: 1/(d|ln d|) {:.3e}, d^-1/2 {:.3e}, d^-1 {:.3e}",
            cmp.log_corrected, cmp.pow_half, cmp.pow_one
        ),
    );
}
