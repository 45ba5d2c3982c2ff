//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! with the measured numbers before asserting. Tolerances are pinned here.

use std::time::Instant;

use hhom::closed_form::{
    cross_formula, cross_sigma0, fiber_xi_coefficients, homogenized_law_2d, voigt_reuss_bounds,
    BetaScaling, LimitPhases, SweepPlan,
};
use hhom::experiment::{run_cross_sweep, run_duality_harness, run_dykhne_asymptotics};
use hhom::microstructure::{
    assemble_conductivity, build_checkerboard, build_cross_cell, build_fiber_cell_3d,
    build_laminate, CellGeometry, ConductivityField,
};
use hhom::solver::{effective_tensor, fiber_average_gradient, solve_corrector, SolverConfig};
use hhom::tensor::{
    dykhne_coefficients, dykhne_transform_phase, hall_generator_3d, HallVector, Mat2,
    PerturbedPhase,
};

fn report(id: usize, pass: bool, desc: &str, detail: &str) {
    println!(
        "acceptance {:>2} [{}] {} -- {}",
        id,
        if pass { "PASS" } else { "FAIL" },
        desc,
        detail
    );
}

fn phase(a: f64, b: f64) -> PerturbedPhase {
    PerturbedPhase::new(a, b).unwrap()
}

fn tight() -> SolverConfig {
    SolverConfig {
        rel_tol: 1e-10,
        ..SolverConfig::default()
    }
}

#[test]
fn criterion_01_constant_field_exactness() {
    let start = Instant::now();
    let g = CellGeometry::square(32).unwrap();
    let a = Mat2::new([[2.5, -1.25], [0.75, 3.0]]);
    let field = ConductivityField::constant_2d(g, a).unwrap();
    let t = effective_tensor(&field, &tight()).unwrap();
    let err = t.mat2().sub(&a).max_abs();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = err <= 1e-12 && elapsed < 0.5;
    report(
        1,
        pass,
        "constant field reproduced exactly",
        &format!("max entry error {err:.3e}, {elapsed:.3}s"),
    );
    assert!(err <= 1e-12, "constant-field error {err}");
    assert!(elapsed < 0.5, "took {elapsed}s");
}

#[test]
fn criterion_02_laminate_oracle() {
    let start = Instant::now();
    let mask = build_laminate(0, 0.5, 128).unwrap();
    let field = assemble_conductivity(
        &mask,
        &phase(1.0, 0.0),
        &phase(4.0, 0.0),
        &HallVector::Plane(0.0),
    )
    .unwrap();
    let t = effective_tensor(&field, &tight()).unwrap().mat2();
    // 1D closed form: harmonic mean across, arithmetic mean along.
    let harmonic = 1.0 / (0.5 / 1.0 + 0.5 / 4.0);
    let arithmetic = 0.5 * 1.0 + 0.5 * 4.0;
    let err = (t.e[0][0] - harmonic)
        .abs()
        .max((t.e[1][1] - arithmetic).abs())
        .max(t.e[0][1].abs())
        .max(t.e[1][0].abs());
    let elapsed = start.elapsed().as_secs_f64();
    let pass = err <= 1e-6 && elapsed < 5.0;
    report(
        2,
        pass,
        "laminate matches diag(1.6, 2.5)",
        &format!("max entry error {err:.3e}, {elapsed:.3}s"),
    );
    assert!(err <= 1e-6, "laminate error {err}");
    assert!(elapsed < 5.0, "took {elapsed}s");
}

#[test]
fn criterion_03_checkerboard_geometric_mean() {
    let start = Instant::now();
    let solve = |res: u32| -> Mat2 {
        let mask = build_checkerboard(res).unwrap();
        let field = assemble_conductivity(
            &mask,
            &phase(1.0, 0.0),
            &phase(4.0, 0.0),
            &HallVector::Plane(0.0),
        )
        .unwrap();
        effective_tensor(&field, &tight()).unwrap().mat2()
    };
    let exact = Mat2::identity().scale(2.0);
    let t64 = solve(64);
    let t128 = solve(128);
    let t256 = solve(256);
    let rel256 = t256.sub(&exact).norm() / exact.norm();
    let det128 = t128.det();
    let det_err = (det128 - 4.0).abs() / 4.0;
    let d64 = t64.sub(&exact).norm();
    let d128 = t128.sub(&exact).norm();
    let d256 = t256.sub(&exact).norm();
    let monotone = d128 < d64 && d256 < d128;
    let elapsed = start.elapsed().as_secs_f64();
    let pass = rel256 <= 0.05 && det_err <= 0.02 && monotone && elapsed < 30.0;
    report(
        3,
        pass,
        "checkerboard tends to sqrt(a1 a2) I",
        &format!(
            "rel error {rel256:.3e} at 256, det error {det_err:.3e} at 128, \
             deviations {d64:.3e} > {d128:.3e} > {d256:.3e}, {elapsed:.2}s"
        ),
    );
    assert!(rel256 <= 0.05);
    assert!(det_err <= 0.02);
    assert!(monotone, "grid ladder not monotone: {d64} {d128} {d256}");
    assert!(elapsed < 30.0, "took {elapsed}s");
}

// Shared setup for the duality criteria: cross bars, contrast 50, h = 1.
fn duality_setup(res: u32) -> (hhom::PhaseMask, PerturbedPhase, PerturbedPhase, f64) {
    (
        build_cross_cell(0.15, 1.0, res).unwrap(),
        phase(1.0, 0.5),
        phase(50.0, 25.0),
        1.0,
    )
}

#[test]
fn criterion_04_keller_duality_stability() {
    let start = Instant::now();
    let (mask, p1, p2, h) = duality_setup(256);
    let rep = run_duality_harness(&mask, &p1, &p2, h, &tight()).unwrap();
    let scale = rep.sigma_star.norm();
    let (mask_c, ..) = duality_setup(128);
    let rep_coarse = run_duality_harness(&mask_c, &p1, &p2, h, &tight()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = rep.keller_deviation <= 0.01 * scale
        && rep.keller_deviation < rep_coarse.keller_deviation
        && elapsed < 60.0;
    report(
        4,
        pass,
        "dual map commutes with homogenization",
        &format!(
            "deviation {:.3e} vs budget {:.3e}; coarse-grid deviation {:.3e}; {elapsed:.2}s",
            rep.keller_deviation,
            0.01 * scale,
            rep_coarse.keller_deviation
        ),
    );
    assert!(rep.keller_deviation <= 0.01 * scale);
    assert!(
        rep.keller_deviation < rep_coarse.keller_deviation,
        "deviation did not shrink with resolution"
    );
    assert!(elapsed < 60.0, "took {elapsed}s");
}

#[test]
fn criterion_05_transform_stability() {
    let start = Instant::now();
    let (mask, p1, p2, h) = duality_setup(256);
    let rep = run_duality_harness(&mask, &p1, &p2, h, &tight()).unwrap();
    let scale = rep.sigma_star.norm();
    let check = rep.dykhne.as_ref().expect("transform exists");
    let elapsed = start.elapsed().as_secs_f64();
    let pass =
        check.deviation <= 0.01 * scale && check.max_pointwise_asymmetry <= 1e-10 && elapsed < 60.0;
    report(
        5,
        pass,
        "transformed medium matches the push-forward",
        &format!(
            "deviation {:.3e} vs budget {:.3e}; pointwise asymmetry {:.3e}; {elapsed:.2}s",
            check.deviation,
            0.01 * scale,
            check.max_pointwise_asymmetry
        ),
    );
    assert!(check.deviation <= 0.01 * scale);
    assert!(check.max_pointwise_asymmetry <= 1e-10);
    assert!(elapsed < 60.0, "took {elapsed}s");
}

#[test]
fn criterion_06_cross_sweep_convergence() {
    let start = Instant::now();
    let phases = LimitPhases::new(1.0, 0.5, 2.0, 1.0).unwrap();
    let plan = SweepPlan::cross(phases, 1.0, &[0.2, 0.1, 0.05], None, BetaScaling::Strong).unwrap();
    let result = run_cross_sweep(&phases, 1.0, 1.0, &plan, &tight());
    assert_eq!(result.failed_terms(), 0);

    let errors: Vec<&Vec<f64>> = result
        .records
        .iter()
        .map(|r| r.rel_error.as_ref().unwrap())
        .collect();
    let final_max = errors[2].iter().fold(0.0f64, |m, x| m.max(*x));
    let mut monotone = true;
    for k in 0..4 {
        if !(errors[1][k] < errors[0][k] && errors[2][k] < errors[1][k]) {
            monotone = false;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    for (i, rec) in result.records.iter().enumerate() {
        println!(
            "  term {} (t={}, theta={:.4}): computed {:?} errors {:?}",
            i + 1,
            rec.feature,
            rec.theta,
            rec.computed.as_ref().unwrap(),
            errors[i]
        );
    }
    let pass = final_max <= 0.05 && monotone && elapsed < 300.0;
    report(
        6,
        pass,
        "cross sweep reaches the thin limit at 5%",
        &format!("final-term max entry error {final_max:.3e}, monotone={monotone}, {elapsed:.2}s"),
    );
    assert!(elapsed < 300.0, "took {elapsed}s");
    assert!(
        monotone,
        "entrywise errors are not monotone along the sequence"
    );
    assert!(
        final_max <= 0.05,
        "final-term entrywise relative error {final_max:.4} exceeds 5%"
    );
}

#[test]
fn criterion_07_bracketing_of_symmetric_runs() {
    let start = Instant::now();
    let mut violations = Vec::new();
    let mut checked = 0usize;

    let mut check = |name: &str, mask: &hhom::PhaseMask, a1: f64, a2: f64, tensor: &Mat2| {
        for axis in [0usize, 1] {
            let (lo, hi) = voigt_reuss_bounds(mask, a1, a2, axis).unwrap();
            let v = tensor.e[axis][axis];
            let slack = 1e-6 * v.abs() + 1e-10;
            checked += 1;
            if !(v >= lo - slack && v <= hi + slack) {
                violations.push(format!("{name} axis {axis}: {v} outside [{lo}, {hi}]"));
            }
        }
    };

    // Laminate run of criterion 2.
    let mask = build_laminate(0, 0.5, 128).unwrap();
    let field = assemble_conductivity(
        &mask,
        &phase(1.0, 0.0),
        &phase(4.0, 0.0),
        &HallVector::Plane(0.0),
    )
    .unwrap();
    let t = effective_tensor(&field, &tight()).unwrap().mat2();
    check("laminate/128", &mask, 1.0, 4.0, &t);

    // Checkerboard runs of criterion 3.
    for res in [128u32, 256] {
        let mask = build_checkerboard(res).unwrap();
        let field = assemble_conductivity(
            &mask,
            &phase(1.0, 0.0),
            &phase(4.0, 0.0),
            &HallVector::Plane(0.0),
        )
        .unwrap();
        let t = effective_tensor(&field, &tight()).unwrap().mat2();
        check(&format!("checkerboard/{res}"), &mask, 1.0, 4.0, &t);
    }

    // Transformed (symmetric isotropic) medium of criterion 5.
    let (mask, p1, p2, h) = duality_setup(256);
    let coeffs = dykhne_coefficients(&p1, &p2, h).unwrap();
    let a1p = dykhne_transform_phase(&p1, h, &coeffs).unwrap();
    let a2p = dykhne_transform_phase(&p2, h, &coeffs).unwrap();
    let field = assemble_conductivity(
        &mask,
        &phase(a1p, 0.0),
        &phase(a2p, 0.0),
        &HallVector::Plane(0.0),
    )
    .unwrap();
    let t = effective_tensor(&field, &tight()).unwrap().mat2();
    check("transformed-cross/256", &mask, a1p, a2p, &t);

    let elapsed = start.elapsed().as_secs_f64();
    let pass = violations.is_empty();
    report(
        7,
        pass,
        "diagonal entries sit inside the nested line-average bounds",
        &format!(
            "{checked} checks, {} violations, {elapsed:.2}s",
            violations.len()
        ),
    );
    assert!(violations.is_empty(), "{violations:?}");
}

#[test]
fn criterion_08_transform_asymptotics() {
    let start = Instant::now();
    let phases = LimitPhases::new(1.0, 0.5, 2.0, 1.0).unwrap();
    let rows = run_dykhne_asymptotics(&phases, 1.0, &[1e-2, 1e-4, 1e-6]).unwrap();
    let mut monotone = true;
    for w in rows.windows(2) {
        if !(w[1].err_alpha1 < w[0].err_alpha1
            && w[1].err_theta_alpha2 < w[0].err_theta_alpha2
            && w[1].err_q < w[0].err_q
            && w[1].err_r < w[0].err_r)
        {
            monotone = false;
        }
    }
    let last = rows.last().unwrap();
    let final_ok = last.err_alpha1 <= 1e-4
        && last.err_theta_alpha2 <= 1e-4
        && last.err_q <= 1e-4
        && last.err_r <= 1e-4;
    let elapsed = start.elapsed().as_secs_f64();
    let pass = monotone && final_ok && elapsed < 1.0;
    report(
        8,
        pass,
        "transformed phases and map coefficients reach their limits",
        &format!(
            "final errors ({:.2e}, {:.2e}, {:.2e}, {:.2e}), monotone={monotone}, {elapsed:.3}s",
            last.err_alpha1, last.err_theta_alpha2, last.err_q, last.err_r
        ),
    );
    assert!(monotone);
    assert!(final_ok);
    assert!(elapsed < 1.0, "took {elapsed}s");
}

#[test]
fn criterion_09_fiber_lattice_limit() {
    let start = Instant::now();
    let phases = LimitPhases::new(1.0, 1.0, 2.0, 1.0).unwrap();
    let plan = SweepPlan::fiber(
        phases,
        &[0.25, 0.15, 0.1],
        Some(&[24, 32, 48]),
        None,
        BetaScaling::Strong,
    )
    .unwrap();
    let h = [0.0, 0.0, 1.0];
    let result = hhom::experiment::run_fiber_sweep_3d(&phases, h, &plan, &tight());
    assert_eq!(result.failed_terms(), 0);
    let last = result.records.last().unwrap();
    let computed = last.computed.as_ref().unwrap();
    let axial = computed[8];
    let axial_err = (axial - 3.0).abs() / 3.0;
    let first_axial_err = (result.records[0].computed.as_ref().unwrap()[8] - 3.0).abs() / 3.0;
    assert!(
        axial_err <= first_axial_err,
        "axial error grew along the sweep"
    );

    // Antisymmetric part against the Hall generator.
    let m = hhom::tensor::Mat3::new([
        [computed[0], computed[1], computed[2]],
        [computed[3], computed[4], computed[5]],
        [computed[6], computed[7], computed[8]],
    ]);
    let want = hall_generator_3d(h);
    let anti_err = m.antisymmetric_part().sub(&want).norm() / want.norm();

    let elapsed = start.elapsed().as_secs_f64();
    let pass = axial_err <= 0.10 && anti_err <= 0.10 && elapsed < 900.0;
    report(
        9,
        pass,
        "fiber lattice reaches the axial limit",
        &format!(
            "axial entry {axial:.4} (err {axial_err:.3e}), antisymmetric err {anti_err:.3e}, {elapsed:.2}s"
        ),
    );
    assert!(axial_err <= 0.10, "axial error {axial_err}");
    assert!(anti_err <= 0.10, "antisymmetric error {anti_err}");
    assert!(elapsed < 900.0, "took {elapsed}s");
}

#[test]
fn criterion_10_in_fiber_gradient_ratios() {
    let start = Instant::now();
    let phases = LimitPhases::new(1.0, 1.0, 2.0, 1.0).unwrap();
    let h = [1.0, 0.0, 0.0];
    let mask = build_fiber_cell_3d(0.1, 48).unwrap();
    let theta = std::f64::consts::PI * 0.01;
    let field = assemble_conductivity(
        &mask,
        &phase(1.0, 1.0),
        &phase(2.0 / theta, 1.0 / theta),
        &HallVector::Space(h),
    )
    .unwrap();
    let w = solve_corrector(&field, &[0.0, 0.0, 1.0], &tight()).unwrap();
    let xi = fiber_average_gradient(&w, &mask).unwrap();
    let ratios = [xi[0] / xi[2], xi[1] / xi[2]];
    let (c1, c2) = fiber_xi_coefficients(&phases, h);
    assert_eq!((c1, c2), (0.0, 0.5));
    // 10% of the coefficient scale, as an absolute window around (0, 1/2).
    let tol = 0.05;
    let e1 = (ratios[0] - c1).abs();
    let e2 = (ratios[1] - c2).abs();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = e1 <= tol && e2 <= tol && elapsed < 900.0;
    report(
        10,
        pass,
        "in-fiber gradient ratios match the linear relations",
        &format!(
            "measured ({:.3e}, {:.4}) vs ({c1}, {c2}), {elapsed:.2}s",
            ratios[0], ratios[1]
        ),
    );
    assert!(e1 <= tol && e2 <= tol, "ratios {ratios:?}");
    assert!(elapsed < 900.0, "took {elapsed}s");
}

#[test]
fn criterion_11_law_limit_identity() {
    let start = Instant::now();
    // Deterministic xorshift sample over the parameter box.
    let mut state = 0x243f_6a88_85a3_08d3u64;
    let mut next = |lo: f64, hi: f64| -> f64 {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        lo + (hi - lo) * (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let phases = LimitPhases::new(
            next(0.05, 20.0),
            next(-10.0, 10.0),
            next(0.05, 20.0),
            next(-10.0, 10.0),
        )
        .unwrap();
        let ell = next(1.0, 5.0);
        let h = next(-4.0, 4.0);
        let via_law = homogenized_law_2d(|a, b| cross_sigma0(a, b, ell), &phases, h);
        let direct = cross_formula(&phases, ell, h);
        worst = worst.max(via_law.sub(&direct).norm() / direct.norm().max(1.0));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-12 && elapsed < 1.0;
    report(
        11,
        pass,
        "perturbed law composed with the thin-cell map is the explicit limit",
        &format!("worst relative deviation {worst:.3e} over 1000 samples, {elapsed:.3}s"),
    );
    assert!(worst <= 1e-12, "deviation {worst}");
    assert!(elapsed < 1.0, "took {elapsed}s");
}

#[test]
fn criterion_12_deterministic_reports() {
    use hhom::cli::{dispatch, parse_config};

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let run = |out: &std::path::Path| -> String {
        let pairs: Vec<(String, String)> = [
            ("alpha1", "1"),
            ("beta1", "0.5"),
            ("alpha2", "2"),
            ("beta2", "1"),
            ("h", "1"),
            ("ell", "1"),
            ("t_list", "0.25,0.125"),
            ("res_list", "16,16"),
            ("no_timing", "true"),
            ("out", out.to_str().unwrap()),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        let cfg = parse_config(None, &pairs, "sweep-cross").unwrap();
        dispatch(&cfg).unwrap();
        std::fs::read_to_string(out.join("cross_sweep.csv")).unwrap()
    };
    let a = run(dir_a.path());
    let b = run(dir_b.path());
    let rows = a.lines().count();
    let pass = a == b && rows == 1 + 2 * 4;
    report(
        12,
        pass,
        "repeated sweeps emit byte-identical reports",
        &format!("{} bytes, {} rows, identical={}", a.len(), rows, a == b),
    );
    assert_eq!(a, b, "reports differ between identical runs");
    assert_eq!(rows, 1 + 2 * 4, "one row per tensor entry per term");
}
