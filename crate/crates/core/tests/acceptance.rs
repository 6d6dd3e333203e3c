//! Acceptance suite. Every test prints one `criterion N: PASS|FAIL` line with
//! the measured quantity and the pinned tolerance, then asserts.

mod common;

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use common::{cholesky_block_pivots, fk_dense_second_variation, fk_step, random_potential, scalar_jacobi, Direct};
use green_bundle::dynamics::{apply_map, evolve, tangent_map, PhasePoint};
use green_bundle::generating::{fk_generating, PotentialSpec, SequenceSpec};
use green_bundle::green::{
    check_theorem2_bounds, free_eigen_recursion, green_limit, invariance_check, riccati_from_base, w_increment_bound, LimitOptions,
};
use green_bundle::jacobi::{
    assemble_second_variation, coefficients_along_orbit, detect_conjugate_strict, detect_crossings_extended, first_conjugate_index,
    second_variation_analysis, JacobiCoefficients, LagrangeFrame,
};
use green_bundle::linalg::{min_eigenvalue, symplectic_j, Matrix};
use green_bundle::rigidity::{rigidity_verdict, RigidityOptions, TorusGrid, Verdict};
use green_bundle::Error;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn within(t: Instant, limit: Duration) -> (bool, Duration) {
    let e = t.elapsed();
    (e < limit, e)
}

#[test]
fn criterion_01_free_map_green_bundle() {
    let t = Instant::now();
    let mut worst_closed: f64 = 0.0;
    let mut worst_limit: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    for d in 1..=3 {
        let zero = vec![Matrix::zeros(d, d); 10_002];
        let coeffs = JacobiCoefficients::fk_from_hessians(-1, &zero).unwrap();
        let seq = riccati_from_base(&coeffs, 0, 10_000).unwrap();
        for m in 1..=10_000i64 {
            let expected = (m + 1) as f64 / m as f64;
            let err = (seq.a(m) - Matrix::identity(d, d) * expected).amax();
            worst_closed = worst_closed.max(err);
        }
        let free = SequenceSpec::fk_periodic(vec![PotentialSpec::zero(d)]).unwrap();
        let x = PhasePoint::from_slices(&vec![0.37; d], &vec![0.11; d]);
        let orbit = evolve(&free, &x, 0, 20).unwrap();
        for b in green_limit(&free, &orbit, LimitOptions::default()).unwrap() {
            worst_limit = worst_limit.max((&b.a - Matrix::identity(d, d)).amax()).max(b.w.amax());
            worst_gap = worst_gap.max(b.cauchy_gap);
        }
    }
    let (fast, elapsed) = within(t, Duration::from_secs(1));
    report(
        1,
        worst_closed <= 1e-12 && worst_limit <= 1e-12 && worst_gap <= 1e-10 && fast,
        format!(
            "max|A-(m+1)/m I| = {worst_closed:e} (tol 1e-12), max|A-I|,|W| = {worst_limit:e} (tol 1e-12), gap = {worst_gap:e} (tol 1e-10), {elapsed:?} (limit 1s)"
        ),
    );
}

#[test]
fn criterion_02_eigenvalue_recursion() {
    let t = Instant::now();
    let v = free_eigen_recursion(2.0, 1_000_000).unwrap();
    let monotone = v.windows(2).all(|w| w[1] < w[0]);
    let bounded = v.iter().all(|&l| l >= 1.0);
    let tail = v[1_000_000] - 1.0;
    let l4 = (v[4] - 1.2).abs();
    let (fast, elapsed) = within(t, Duration::from_secs(1));
    report(
        2,
        monotone && bounded && tail.abs() <= 1e-6 && l4 <= 1e-15 && fast,
        format!(
            "monotone = {monotone}, bounded = {bounded}, λ_1e6 - 1 = {tail:e} (tol 1e-6), |λ_4 - 1.2| = {l4:e} (tol 1e-15), {elapsed:?} (limit 1s)"
        ),
    );
}

fn scaled(v: &PotentialSpec, s: f64) -> PotentialSpec {
    let terms = v
        .terms()
        .iter()
        .map(|t| green_bundle::generating::FourierTerm {
            freq: t.freq.clone(),
            cos: t.cos * s,
            sin: t.sin * s,
        })
        .collect();
    PotentialSpec::new(v.dim(), terms, v.offset()).unwrap()
}

#[test]
fn criterion_03_schur_riccati_equivalence() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    while instances < 100 {
        let d = rng.random_range(1..=2usize);
        let m = rng.random_range(2..=20usize);
        let base = random_potential(&mut rng, d, 3, 2, 0.05);
        let p: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let q: Vec<f64> = (0..d).map(|_| rng.random()).collect();
        let mut scale = 1.0;
        let (v, oracle, orbit) = loop {
            let v = scaled(&base, scale);
            // Oracle orbit and Hessians from the closed-form step.
            let mut qs = vec![q.clone()];
            let mut state = (p.clone(), q.clone());
            for _ in 0..=m {
                state = fk_step(&v, &state.0, &state.1);
                qs.push(state.1.clone());
            }
            let hess: Vec<DMatrix<f64>> = (1..=m).map(|n| Direct(&v).hess(&qs[n])).collect();
            if let Some(piv) = cholesky_block_pivots(&fk_dense_second_variation(&hess), d) {
                let seq = SequenceSpec::fk_periodic(vec![v.clone()]).unwrap();
                let orbit = evolve(&seq, &PhasePoint::from_slices(&p, &q), 0, m as i64 + 1).unwrap();
                break (v, piv, orbit);
            }
            scale *= 0.5;
        };
        let seq = SequenceSpec::fk_periodic(vec![v]).unwrap();
        let coeffs = coefficients_along_orbit(&seq, &orbit).unwrap();
        let riccati = riccati_from_base(&coeffs, 0, m).unwrap();
        let ldl = second_variation_analysis(&assemble_second_variation(&coeffs, 1, m as i64).unwrap()).pivots;
        for (i, piv) in oracle.iter().enumerate() {
            let n = i as i64 + 1;
            worst = worst.max((riccati.a(n) - piv).amax()).max((&ldl[i] - piv).amax());
        }
        instances += 1;
    }
    let (fast, elapsed) = within(t, Duration::from_secs(5));
    report(
        3,
        worst <= 1e-9 && fast,
        format!("{instances} instances, max |Riccati - Cholesky block pivot| = {worst:e} (tol 1e-9), {elapsed:?} (limit 5s)"),
    );
}

#[test]
fn criterion_04_conjugate_point_oracle() {
    let t = Instant::now();
    let last = 60i64;
    let mut lines = Vec::new();
    let mut pass = true;
    for c in [-0.1, -0.5, -1.0, -1.9] {
        let theta = (1.0 + c / 2.0f64).acos();
        let ceil = (PI / theta - 1e-9).ceil() as i64;
        let coeffs = JacobiCoefficients::fk_from_hessians(-1, &vec![Matrix::from_element(1, 1, c); last as usize + 2]).unwrap();
        let first = first_conjugate_index(&coeffs, 0, last).unwrap();

        // Chebyshev closed form ξ_n = sin(nθ)/sin θ.
        let xi = |n: i64| (n as f64 * theta).sin() / theta.sin();
        let strict_oracle: Vec<i64> = (1..=last).filter(|&n| xi(n).abs() <= 1e-12).collect();
        let cross_oracle: Vec<(i64, i64)> = (0..last).filter(|&n| xi(n) * xi(n + 1) < 0.0 && xi(n).abs() > 1e-12 && xi(n + 1).abs() > 1e-12).map(|n| (n, n + 1)).collect();
        let strict = detect_conjugate_strict(&coeffs, 0, last).unwrap();
        let extended = detect_crossings_extended(&coeffs, 0, &LagrangeFrame::vertical(1), last).unwrap();
        let crossings: Vec<(i64, i64)> = extended.crossings.iter().map(|c| c.interval).collect();
        let ok = first == Some(ceil) && strict.conjugate == strict_oracle && crossings == cross_oracle;
        pass &= ok;
        lines.push(format!("c={c}: first {first:?} vs ⌈π/θ⌉ {ceil}, first crossing {:?}", crossings.first()));
    }
    let (fast, elapsed) = within(t, Duration::from_secs(1));
    report(4, pass && fast, format!("{}; {elapsed:?} (limit 1s)", lines.join("; ")));
}

#[test]
fn criterion_05_kernel_characterization() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut kernels = 0;
    let mut empty = 0;
    for _ in 0..50 {
        let d = rng.random_range(1..=2usize);
        let m = rng.random_range(2..=12usize);
        let mut hess: Vec<Matrix> = (0..=m)
            .map(|_| {
                let r = Matrix::from_fn(d, d, |_, _| rng.random_range(-0.3..0.3));
                (&r + r.transpose()) * 0.5
            })
            .collect();
        // Zero pivot at the last interior index.
        hess[m] = Matrix::zeros(d, d);
        let probe = JacobiCoefficients::fk_from_hessians(0, &hess).unwrap();
        let pivot = riccati_from_base(&probe, 0, m).map(|s| s.a(m as i64).clone());
        let pivot = match pivot {
            Ok(p) => p,
            Err(_) => {
                let sv = assemble_second_variation(&probe, 1, m as i64).unwrap();
                second_variation_analysis(&sv).pivots.last().unwrap().clone()
            }
        };
        hess[m] = Matrix::identity(d, d) * -min_eigenvalue(&pivot);
        let coeffs = JacobiCoefficients::fk_from_hessians(0, &hess).unwrap();
        let sv = assemble_second_variation(&coeffs, 1, m as i64).unwrap();
        let analysis = second_variation_analysis(&sv);
        if analysis.kernel_basis.is_empty() {
            empty += 1;
        }
        for v in &analysis.kernel_basis {
            kernels += 1;
            // ξ_0 = ξ_{m+1} = 0, ξ_n = v block n.
            let xi = |n: usize| -> nalgebra::DVector<f64> {
                if n == 0 || n == m + 1 {
                    nalgebra::DVector::zeros(d)
                } else {
                    v.rows((n - 1) * d, d).into_owned()
                }
            };
            let scale = v.amax();
            for n in 1..=m {
                let mut a = hess[n].clone();
                for r in 0..d {
                    a[(r, r)] += 2.0;
                }
                let r = -xi(n - 1) + a * xi(n) - xi(n + 1);
                worst = worst.max(r.amax() / scale);
            }
        }
    }
    let (fast, elapsed) = within(t, Duration::from_secs(5));
    report(
        5,
        empty == 0 && kernels >= 50 && worst <= 1e-8 && fast,
        format!("{kernels} kernel vectors ({empty} instances without kernel), max Jacobi residual = {worst:e} (tol 1e-8), {elapsed:?} (limit 5s)"),
    );
}

struct Corpus {
    windows: usize,
    worst_lower: f64,
    worst_upper: f64,
    worst_increment: f64,
    free_equalities: usize,
    free_windows: usize,
    worst_free_characterization: f64,
    worst_invariance: f64,
}

fn corpus() -> Corpus {
    let mut c = Corpus {
        windows: 0,
        worst_lower: f64::INFINITY,
        worst_upper: f64::INFINITY,
        worst_increment: f64::INFINITY,
        free_equalities: 0,
        free_windows: 0,
        worst_free_characterization: 0.0,
        worst_invariance: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cases: Vec<(SequenceSpec, PhasePoint, bool)> = Vec::new();
    for d in 1..=3 {
        let free = SequenceSpec::fk_periodic(vec![PotentialSpec::zero(d)]).unwrap();
        for _ in 0..40 {
            let p: Vec<f64> = (0..d).map(|_| rng.random()).collect();
            let q: Vec<f64> = (0..d).map(|_| rng.random()).collect();
            cases.push((free.clone(), PhasePoint::from_slices(&p, &q), true));
        }
    }
    for k in [0.3, 0.6, 1.0, 2.0] {
        let bump = SequenceSpec::fk_compact_support(0, vec![PotentialSpec::chirikov(k)]).unwrap();
        let grid = TorusGrid::new(1, 16).unwrap();
        for i in 0..grid.node_count() {
            cases.push((bump.clone(), grid.node(i), false));
        }
    }
    for _ in 0..60 {
        let v = random_potential(&mut rng, 2, 3, 2, 0.01);
        let bump = SequenceSpec::fk_compact_support(0, vec![v.clone(), v]).unwrap();
        let p: Vec<f64> = (0..2).map(|_| rng.random()).collect();
        let q: Vec<f64> = (0..2).map(|_| rng.random()).collect();
        cases.push((bump, PhasePoint::from_slices(&p, &q), false));
    }
    for k in [0.5, 1.0, 2.0, 4.0] {
        let seq = SequenceSpec::fk_periodic(vec![PotentialSpec::chirikov(k)]).unwrap();
        cases.push((seq, PhasePoint::from_slices(&[0.0], &[0.0]), false));
    }
    let sep = SequenceSpec::fk_periodic(vec![PotentialSpec::separable_chirikov(&[1.0, 2.0])]).unwrap();
    cases.push((sep, PhasePoint::from_slices(&[0.0, 0.0], &[0.0, 0.0]), false));

    for (seq, x, free) in cases {
        let orbit = evolve(&seq, &x, 0, 12).unwrap();
        let bundle = match green_limit(&seq, &orbit, LimitOptions::default()) {
            Ok(b) => b,
            Err(Error::PositivityLost { .. }) => continue,
            Err(e) => panic!("corpus orbit failed: {e}"),
        };
        c.windows += 1;
        for b in check_theorem2_bounds(&seq, &orbit, &bundle).unwrap() {
            c.worst_lower = c.worst_lower.min(b.lower_margin);
            c.worst_upper = c.worst_upper.min(b.upper_margin);
        }
        let inc = w_increment_bound(&seq, &orbit, &bundle);
        for r in &inc {
            c.worst_increment = c.worst_increment.min(r.min_eigenvalue);
        }
        if free {
            c.free_windows += 1;
            if inc.iter().all(|r| r.equality) {
                c.free_equalities += 1;
            }
            for r in &inc {
                c.worst_free_characterization = c.worst_free_characterization.max(r.characterization_residual);
            }
        }
        c.worst_invariance = c.worst_invariance.max(invariance_check(&seq, &orbit, &bundle).unwrap().max_residual);
    }
    c
}

#[test]
fn criterion_06_bound_certification() {
    let t = Instant::now();
    let c = corpus();
    let (fast, elapsed) = within(t, Duration::from_secs(30));
    report(
        6,
        c.windows >= 500
            && c.worst_lower > 0.0
            && c.worst_upper >= -1e-9
            && c.worst_increment >= -1e-9
            && c.free_equalities == c.free_windows
            && c.worst_free_characterization <= 1e-8
            && fast,
        format!(
            "{} converged windows (min 500), min λ(A) = {:e} (> 0), min upper margin = {:e} (tol -1e-9), min λ(D) = {:e} (tol -1e-9), free equality {}/{} with max |A+b| = {:e} (tol 1e-8), {elapsed:?} (limit 30s)",
            c.windows, c.worst_lower, c.worst_upper, c.worst_increment, c.free_equalities, c.free_windows, c.worst_free_characterization
        ),
    );
}

#[test]
fn criterion_07_invariance() {
    let t = Instant::now();
    let c = corpus();
    let (fast, elapsed) = within(t, Duration::from_secs(10));
    report(
        7,
        c.worst_invariance <= 1e-8 && fast,
        format!("{} windows, max |push-forward W_n - W_(n+1)| = {:e} (tol 1e-8), {elapsed:?} (limit 10s)", c.windows, c.worst_invariance),
    );
}

#[test]
fn criterion_08_rigidity_free_side() {
    let t = Instant::now();
    let seq = SequenceSpec::fk_periodic(vec![PotentialSpec::zero(1)]).unwrap();
    let grid = TorusGrid::new(1, 32).unwrap();
    let r = rigidity_verdict(&seq, &grid, &RigidityOptions::default()).unwrap();
    let (fast, elapsed) = within(t, Duration::from_secs(10));
    report(
        8,
        r.converged == 1024 && r.max_abs_w <= 1e-12 && r.verdict == Verdict::PotentialsConstant && fast,
        format!(
            "{}/1024 converged, max |W| = {:e} (tol 1e-12), verdict \"{}\", {elapsed:?} (limit 10s)",
            r.converged, r.max_abs_w, r.verdict
        ),
    );
}

#[test]
fn criterion_09_rigidity_nonconstant_side() {
    let t = Instant::now();
    let k = 1.0;
    let v = PotentialSpec::chirikov(k);
    let seq = SequenceSpec::fk_periodic(vec![v.clone()]).unwrap();
    let grid = TorusGrid::new(1, 32).unwrap();
    let opts = RigidityOptions::default();
    assert!(opts.limit.max_horizon <= 1 << 12);
    let r = rigidity_verdict(&seq, &grid, &opts).unwrap();

    // Re-confirm every witness with the closed-form map and scalar Jacobi field.
    let mut confirmed = 0;
    for w in &r.witnesses {
        let mut p = vec![w.point.p[0]];
        let mut q = vec![w.point.q[0]];
        for _ in w.base..w.start {
            (p, q) = common::fk_step_back(&v, &p, &q);
        }
        let mut c = Vec::new();
        for _ in w.base..=w.window.1 {
            c.push(k * (2.0 * PI * q[0]).cos());
            (p, q) = fk_step(&v, &p, &q);
        }
        let xi = scalar_jacobi(&c);
        let (a, b) = ((w.window.0 - w.base) as usize, (w.window.1 - w.base) as usize);
        if xi[a] * xi[b] < 0.0 || xi[b].abs() <= 1e-8 {
            confirmed += 1;
        }
    }
    let mean_laplacian: f64 = (0..grid.node_count())
        .map(|i| k * (2.0 * PI * grid.node(i).q[0]).cos())
        .sum::<f64>()
        / grid.node_count() as f64;
    let dv = r.max_abs_delta_v_integral();
    let (fast, elapsed) = within(t, Duration::from_secs(60));
    report(
        9,
        r.verdict == Verdict::ConjugatePointsFound && confirmed >= 1 && confirmed == r.witnesses.len() && dv <= 1e-12 && mean_laplacian.abs() <= 1e-12 && fast,
        format!(
            "verdict \"{}\", {confirmed}/{} witnesses re-confirmed, ∫ΔV = {dv:e} (oracle {mean_laplacian:e}, tol 1e-12), {elapsed:?} (limit 60s)",
            r.verdict,
            r.witnesses.len()
        ),
    );
}

#[test]
fn criterion_10_symplecticity_equivariance() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_symp: f64 = 0.0;
    let mut worst_equiv: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=3usize);
        let s = fk_generating(random_potential(&mut rng, d, 3, 2, 0.1));
        let p: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = PhasePoint::from_slices(&p, &q);
        let m = tangent_map(&s, &x).unwrap();
        let j = symplectic_j(d);
        worst_symp = worst_symp.max((m.transpose() * &j * &m - j).amax());
        let e: Vec<f64> = (0..d).map(|_| rng.random_range(-3..=3) as f64).collect();
        let shifted: Vec<f64> = p.iter().zip(&e).map(|(a, b)| a + b).collect();
        let y = apply_map(&s, &x).unwrap();
        let ys = apply_map(&s, &PhasePoint::from_slices(&shifted, &q)).unwrap();
        for i in 0..d {
            worst_equiv = worst_equiv.max((ys.p[i] - y.p[i] - e[i]).abs()).max((ys.q[i] - y.q[i] - e[i]).abs());
        }
    }
    let (fast, elapsed) = within(t, Duration::from_secs(1));
    report(
        10,
        worst_symp <= 1e-10 && worst_equiv <= 1e-12 && fast,
        format!("max |MᵀJM - J| = {worst_symp:e} (tol 1e-10), max equivariance error = {worst_equiv:e} (tol 1e-12), {elapsed:?} (limit 1s)"),
    );
}

#[test]
fn criterion_11_determinism() {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/chirikov.toml");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_green-bundle"))
            .args(["--config", config, "--out"])
            .arg(dir.path())
            .args(["--seed", "7"])
            .output()
            .unwrap();
        assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    }
    let read = |i: usize, name: &str| std::fs::read(dirs[i].path().join(name)).unwrap();
    let csv_same = read(0, "nodes.csv") == read(1, "nodes.csv");
    let report_same = read(0, "report.json") == read(1, "report.json");
    report(
        11,
        csv_same && report_same,
        format!("nodes.csv identical = {csv_same}, report.json identical = {report_same} (byte comparison)"),
    );
}
