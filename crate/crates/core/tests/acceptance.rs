//! End-to-end acceptance run: one PASS/FAIL line per criterion, with the
//! supporting numbers indented below it. Exits non-zero if any criterion fails.

use std::time::Instant;

use nonlocal_diffusion::assembly::{apply_operator, assemble, CollocationSystem, Scheme};
use nonlocal_diffusion::coeff::{CoefficientField, SpdMatrix};
use nonlocal_diffusion::diagnostics::{
    interior_weights, m_matrix_report, mass_conservation_check, max_principle_bounds, max_principle_report,
};
use nonlocal_diffusion::experiment::{run, ExperimentConfig, GridFamily, ResultRow};
use nonlocal_diffusion::grid::{build_grid, hat_support_integral, split_partition, uniform_partition, TensorGrid};
use nonlocal_diffusion::kernel::{alpha_of_chi2, kernel_eval, moment_diagnostics, KernelParams};
use nonlocal_diffusion::linsolve::{solve, SolveOptions};
use nonlocal_diffusion::problems::{catalog, find_case, ManufacturedCase};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

struct Outcome {
    pass: bool,
    lines: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            pass: true,
            lines: Vec::new(),
        }
    }

    /// Records a sub-check; any failing check fails the criterion.
    fn check(&mut self, ok: bool, text: String) {
        self.pass &= ok;
        self.lines.push(format!("{} {text}", if ok { "ok  " } else { "MISS" }));
    }

    fn note(&mut self, text: String) {
        self.lines.push(format!("     {text}"));
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn rows_of<'a>(rows: &'a [ResultRow], case: &str) -> Vec<&'a ResultRow> {
    rows.iter().filter(|r| r.case == case).collect()
}

fn run_preset(id: u32, grids: Option<GridFamily>, scheme: Scheme) -> Vec<ResultRow> {
    let mut cfg = ExperimentConfig::for_example(id).expect("preset exists");
    if let Some(g) = grids {
        cfg.grids = g;
    }
    cfg.scheme = scheme;
    let out = run(&cfg).expect("experiment runs");
    assert!(out.all_converged, "a solve did not converge");
    out.rows
}

fn table_rows(o: &mut Outcome, rows: &[&ResultRow], printed: &[f64]) {
    for (r, p) in rows.iter().zip(printed) {
        let e = r.error_linf.unwrap_or(f64::NAN);
        o.note(format!(
            "{:<8} {:<12} error {:.4e} printed {:.4e} rel {:6.2}%  rate {}  {:.1} s",
            r.case,
            r.grid_desc,
            e,
            p,
            100.0 * rel(e, *p),
            r.rate.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-   ".into()),
            r.wall_ms / 1e3
        ));
    }
}

/// Example 2, δ = h, collocation.
fn criterion1() -> Outcome {
    let printed = [
        ("ex2-a1", [4.8765e-4, 1.1504e-4, 2.8346e-5, 6.6997e-6], [2.08, 2.02, 2.08]),
        ("ex2-a2", [3.5896e-3, 8.4238e-4, 2.0492e-4, 4.5901e-5], [2.09, 2.04, 2.16]),
        ("ex2-a3", [2.8574e-3, 6.7127e-4, 1.5967e-4, 3.9727e-5], [2.09, 2.07, 2.01]),
    ];
    let rows = run_preset(2, None, Scheme::Collocation);
    let mut o = Outcome::new();
    for (case, errs, rates) in printed {
        let rs = rows_of(&rows, case);
        table_rows(&mut o, &rs, &errs);
        for (r, p) in rs.iter().zip(errs) {
            let e = r.error_linf.unwrap();
            o.check(rel(e, p) <= 0.02, format!("{case} {} error within 2% ({:.2}%)", r.grid_desc, 100.0 * rel(e, p)));
        }
        for (r, p) in rs[1..].iter().zip(rates) {
            let got = r.rate.unwrap();
            o.check((got - p).abs() <= 0.15, format!("{case} {} rate {got:.2} vs {p} within 0.15", r.grid_desc));
        }
        for r in &rs {
            let limit = if r.n >= 320 { 600.0 } else { 60.0 };
            o.check(r.wall_ms / 1e3 < limit, format!("{case} {} runtime {:.1} s < {limit} s", r.grid_desc, r.wall_ms / 1e3));
        }
    }
    o
}

/// Example 2 with the weighted quadrature finite-difference scheme.
fn criterion2() -> Outcome {
    let printed = [
        ("ex2-a1", [5.7139e-4, 1.3425e-4, 3.3151e-5, 7.8984e-6]),
        ("ex2-a2", [4.1611e-3, 1.8107e-3, 1.3431e-3, 1.2238e-3]),
        ("ex2-a3", [4.4236e-3, 2.3123e-3, 1.8423e-3, 1.7201e-3]),
    ];
    let rows = run_preset(2, None, Scheme::FdQuadrature);
    let mut o = Outcome::new();
    for (case, errs) in printed {
        let rs = rows_of(&rows, case);
        table_rows(&mut o, &rs, &errs);
        if case == "ex2-a1" {
            for r in &rs[1..] {
                let got = r.rate.unwrap();
                o.check((got - 2.0).abs() <= 0.2, format!("{case} {} rate {got:.2} within 2.0 +- 0.2", r.grid_desc));
            }
        } else {
            let last = rs.last().unwrap();
            let e = last.error_linf.unwrap();
            o.check(rel(e, errs[3]) <= 0.05, format!("{case} {} error within 5% ({:.2}%)", last.grid_desc, 100.0 * rel(e, errs[3])));
            let got = last.rate.unwrap();
            o.check(got < 0.2, format!("{case} final rate {got:.2} < 0.2"));
        }
    }
    o
}

/// Example 1 on uniform N x N grids with fixed δ.
fn criterion3() -> Outcome {
    let printed = [
        ("ex1-poly", [3.1594e-2, 2.4209e-3, 1.2152e-4, 3.0658e-6, 7.5238e-8, 9.5161e-8]),
        ("ex1-exp", [1.0367e-2, 8.6355e-4, 4.3467e-5, 9.5991e-7, 9.6315e-8, 5.8425e-8]),
        ("ex1-sin", [2.0841e-2, 1.9893e-3, 1.0027e-4, 2.4812e-6, 2.8200e-7, 3.1212e-7]),
    ];
    let rows = run_preset(1, None, Scheme::Collocation);
    let mut o = Outcome::new();
    for (case, errs) in printed {
        let rs = rows_of(&rows, case);
        table_rows(&mut o, &rs, &errs);
        for w in rs.windows(2) {
            if w[1].n <= 35 {
                let ratio = w[0].error_linf.unwrap() / w[1].error_linf.unwrap();
                o.check(ratio >= 10.0, format!("{case} {} -> {} error ratio {ratio:.1} >= 10", w[0].grid_desc, w[1].grid_desc));
            }
        }
        for r in rs.iter().filter(|r| r.n >= 40) {
            let e = r.error_linf.unwrap();
            o.check(e <= 5e-7, format!("{case} {} plateau error {e:.3e} <= 5e-7", r.grid_desc));
        }
        let within = rs.iter().zip(errs).filter(|(r, p)| rel(r.error_linf.unwrap(), *p) <= 0.1).count();
        o.note(format!("{case}: {within} of {} entries within 10% of print (shape is the binding check)", rs.len()));
    }
    o
}

/// Example 1 on split grids with fixed δ.
fn criterion4() -> Outcome {
    let printed = [
        ("ex1-poly", [3.0391e-2, 8.2144e-4, 1.8793e-4, 4.5641e-5, 1.1393e-5]),
        ("ex1-exp", [2.2799e-2, 1.5704e-3, 3.7312e-4, 9.1977e-5, 2.2804e-5]),
        ("ex1-sin", [1.4295e-2, 1.1348e-3, 2.7345e-4, 6.7871e-5, 1.6774e-5]),
    ];
    let family = GridFamily::Split(vec![[10, 15, 20], [20, 30, 40], [40, 60, 80], [80, 120, 160], [160, 240, 320]]);
    let rows = run_preset(1, Some(family), Scheme::Collocation);
    let mut o = Outcome::new();
    for (case, errs) in printed {
        let rs = rows_of(&rows, case);
        table_rows(&mut o, &rs, &errs);
        for r in &rs[rs.len() - 2..] {
            let got = r.rate.unwrap();
            o.check((got - 2.0).abs() <= 0.15, format!("{case} {} rate {got:.2} within 2.0 +- 0.15", r.grid_desc));
        }
    }
    o
}

/// Example 3, three dimensions, δ = h.
fn criterion5() -> Outcome {
    let printed = [
        ("ex3-a1", [2.4291e-3, 1.0677e-3, 6.1470e-4, 3.8099e-4]),
        ("ex3-a2", [6.1233e-3, 2.7587e-3, 1.4588e-3, 9.2431e-4]),
        ("ex3-a3", [6.9361e-3, 3.041e-3, 1.6902e-3, 1.0767e-3]),
    ];
    let rows = run_preset(3, None, Scheme::Collocation);
    let mut o = Outcome::new();
    for (case, errs) in printed {
        let rs = rows_of(&rows, case);
        table_rows(&mut o, &rs, &errs);
        for r in &rs[1..] {
            let got = r.rate.unwrap();
            o.check((got - 2.0).abs() <= 0.2, format!("{case} {} rate {got:.2} within 2.0 +- 0.2", r.grid_desc));
        }
        let last = rs.last().unwrap();
        o.check(last.wall_ms < 15.0 * 60e3, format!("{case} {} runtime {:.1} s < 900 s", last.grid_desc, last.wall_ms / 1e3));
    }
    o
}

/// Example 4, variable coefficients.
fn criterion6() -> Outcome {
    let printed = [
        ("ex4-a1", [1.4229e-3, 3.5517e-4, 8.5297e-5, 2.0096e-5]),
        ("ex4-a2", [1.4595e-3, 3.6506e-4, 8.9876e-5, 2.5342e-5]),
    ];
    let rows = run_preset(4, None, Scheme::Collocation);
    let mut o = Outcome::new();
    for (case, errs) in printed {
        let rs = rows_of(&rows, case);
        table_rows(&mut o, &rs, &errs);
        for r in &rs[1..] {
            let got = r.rate.unwrap();
            o.check((got - 2.0).abs() <= 0.25, format!("{case} {} rate {got:.2} within 2.0 +- 0.25", r.grid_desc));
        }
        let last = rs.last().unwrap();
        let e = last.error_linf.unwrap();
        o.check(rel(e, errs[3]) <= 0.1, format!("{case} {} error within 10% ({:.2}%)", last.grid_desc, 100.0 * rel(e, errs[3])));
    }
    o
}

/// Example 2 cases under a sweep of the truncation threshold.
fn criterion7() -> Outcome {
    let rows = run_preset(6, None, Scheme::Collocation);
    let mut o = Outcome::new();
    for case in ["ex2-a1", "ex2-a2", "ex2-a3"] {
        let err = |chi2: f64, n: usize| {
            rows.iter()
                .find(|r| r.case == case && r.chi2 == chi2 && r.n == n)
                .and_then(|r| r.error_linf)
                .unwrap()
        };
        for n in [40, 80, 160] {
            o.note(format!(
                "{case} N={n:<3} chi2 9: {:.4e}  16: {:.4e}  25: {:.4e}  36: {:.4e}  49: {:.4e}",
                err(9.0, n),
                err(16.0, n),
                err(25.0, n),
                err(36.0, n),
                err(49.0, n)
            ));
        }
        for n in [40, 80, 160] {
            let d = rel(err(49.0, n), err(36.0, n));
            o.check(d <= 0.05, format!("{case} N={n} chi2 36 vs 49 differ by {:.2}%", 100.0 * d));
        }
        let ratio = err(9.0, 160) / err(36.0, 160);
        o.check(ratio >= 50.0, format!("{case} N=160 chi2 9 / chi2 36 error ratio {ratio:.0} >= 50"));
    }
    o
}

fn system_for(case: &ManufacturedCase, scheme: Scheme, parts: &[Vec<f64>], p: &KernelParams) -> (TensorGrid, CollocationSystem, Vec<f64>, Vec<f64>) {
    let dim = case.dim;
    let grid = build_grid(&case.domain, parts, p, &case.field).unwrap();
    let f: Vec<f64> = grid
        .interior_nodes()
        .iter()
        .map(|&n| case.source_value(&grid.coord(n)[..dim], p).unwrap())
        .collect();
    let g: Vec<f64> = grid.collar_nodes().iter().map(|&n| case.boundary_value(&grid.coord(n)[..dim])).collect();
    let sys = assemble(scheme, &grid, &case.field, p, &f, &g).unwrap();
    (grid, sys, f, g)
}

fn small_parts(dim: usize, split: bool) -> Vec<Vec<f64>> {
    let mut parts = vec![uniform_partition(0.0, 1.0, if dim == 3 { 8 } else { 16 }); dim];
    if split {
        parts[0] = split_partition(0.0, 0.5, 1.0, 6, 9);
    }
    parts
}

/// Structural properties that need no published numbers.
fn criterion8() -> Outcome {
    let mut o = Outcome::new();

    // sign pattern, zero row sums, M-matrix report on every catalog case, both schemes, two grid kinds
    let mut checked = 0;
    let mut bad = Vec::new();
    let mut const_worst: f64 = 0.0;
    for case in catalog() {
        for scheme in [Scheme::Collocation, Scheme::FdQuadrature] {
            for split in [false, true] {
                let parts = small_parts(case.dim, split);
                let h = parts.iter().flat_map(|p| p.windows(2).map(|w| w[1] - w[0])).fold(0.0, f64::max);
                let p = KernelParams::new(1.5 * h, 36.0, case.dim).unwrap();
                let (grid, sys, _, _) = system_for(&case, scheme, &parts, &p);
                let rep = m_matrix_report(&sys);
                checked += 1;
                if !rep.ok {
                    bad.push(format!("{} {:?} split={split}: {:?}", case.name, scheme, rep.violation));
                }
                // constant patch: B 1 + B_c 1 = 0
                let y = apply_operator(&sys, &vec![1.0; grid.num_interior()], &vec![1.0; grid.num_collar()]).unwrap();
                for (r, v) in y.iter().enumerate() {
                    const_worst = const_worst.max(v.abs() / sys.stencil(r).diag);
                }
            }
        }
    }
    o.check(bad.is_empty(), format!("M-matrix report passes on all {checked} assembled systems {bad:?}"));
    o.check(const_worst <= 1e-12, format!("constant patch residual {const_worst:.2e} (relative to the diagonal) <= 1e-12"));

    // affine patch at rows whose stencil is point symmetric
    let mut affine_worst: f64 = 0.0;
    let mut symmetric_rows = 0;
    for name in ["ex2-a1", "ex2-a3", "ex3-a3"] {
        let case = find_case(name).unwrap();
        for split in [false, true] {
            let parts = small_parts(case.dim, split);
            let h = parts.iter().flat_map(|p| p.windows(2).map(|w| w[1] - w[0])).fold(0.0, f64::max);
            let p = KernelParams::new(1.5 * h, 36.0, case.dim).unwrap();
            let (grid, sys, _, _) = system_for(&case, Scheme::Collocation, &parts, &p);
            let u = |x: [f64; 3]| 0.3 + 1.7 * x[0] - 2.2 * x[1] + 0.9 * x[2];
            let ui: Vec<f64> = grid.interior_nodes().iter().map(|&n| u(grid.coord(n))).collect();
            let uc: Vec<f64> = grid.collar_nodes().iter().map(|&n| u(grid.coord(n))).collect();
            let y = apply_operator(&sys, &ui, &uc).unwrap();
            for r in 0..sys.num_rows() {
                let st = sys.stencil(r);
                let symmetric = st.offsets.iter().zip(&st.coeffs).all(|(off, c)| {
                    st.offsets
                        .binary_search(&-off)
                        .map(|k| (st.coeffs[k] - c).abs() <= 1e-14 * c.abs())
                        .unwrap_or(false)
                });
                if symmetric {
                    symmetric_rows += 1;
                    affine_worst = affine_worst.max(y[r].abs() / st.diag);
                }
            }
        }
    }
    o.check(
        symmetric_rows > 0 && affine_worst <= 1e-12,
        format!("affine patch residual {affine_worst:.2e} over {symmetric_rows} symmetric-stencil rows <= 1e-12"),
    );

    // brute-force oracle on N = 6
    let mut oracle_worst: f64 = 0.0;
    let mut structure_ok = true;
    for name in ["ex2-a3", "ex4-a2", "ex3-a2"] {
        let case = find_case(name).unwrap();
        let dim = case.dim;
        let p = KernelParams::new(0.25, 36.0, dim).unwrap();
        let parts = vec![uniform_partition(0.0, 1.0, 6); dim];
        let (grid, sys, _, _) = system_for(&case, Scheme::Collocation, &parts, &p);
        for (r, &i) in grid.interior_nodes().iter().enumerate() {
            let xi = grid.coord(i);
            let expect: Vec<(usize, f64)> = (0..grid.num_nodes())
                .filter(|&j| j != i)
                .filter_map(|j| {
                    let k = kernel_eval(&p, &case.field, &xi[..dim], &grid.coord(j)[..dim]).unwrap();
                    (k > 0.0).then(|| (j, -k * hat_support_integral(&grid, grid.node_index(j))))
                })
                .collect();
            let got: Vec<(usize, f64)> = sys.row_entries(r).collect();
            if got.len() != expect.len() || got.iter().zip(&expect).any(|(a, b)| a.0 != b.0) {
                structure_ok = false;
                continue;
            }
            let diag: f64 = -expect.iter().map(|e| e.1).sum::<f64>();
            for (a, b) in got.iter().zip(&expect) {
                oracle_worst = oracle_worst.max((a.1 - b.1).abs() / diag);
            }
            oracle_worst = oracle_worst.max((sys.stencil(r).diag - diag).abs() / diag);
        }
    }
    o.check(
        structure_ok && oracle_worst <= 1e-14,
        format!("brute-force assembly oracle on N=6: same sparsity {structure_ok}, max deviation {oracle_worst:.2e}"),
    );

    // discrete maximum principle under random sign-constrained f, g = 0
    let field = CoefficientField::constant(SpdMatrix::from_rows2([[31.0 / 4.0, -9.0 * 3f64.sqrt() / 4.0], [-9.0 * 3f64.sqrt() / 4.0, 13.0 / 4.0]]).unwrap());
    let p = KernelParams::new(0.1, 36.0, 2).unwrap();
    let grid = build_grid(&[[0.0, 1.0]; 2], &[uniform_partition(0.0, 1.0, 10), uniform_partition(0.0, 1.0, 10)], &p, &field).unwrap();
    let n = grid.num_interior();
    let zeros_c = vec![0.0; grid.num_collar()];
    let mut runner = TestRunner::new(Config {
        cases: 200,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (any::<bool>(), proptest::collection::vec(0.0f64..1.0, n));
    let result = runner.run(&strategy, |(positive, mags)| {
        let f: Vec<f64> = mags.iter().map(|m| if positive { *m } else { -*m }).collect();
        let sys = assemble(Scheme::Collocation, &grid, &field, &p, &f, &zeros_c).unwrap();
        let (u, _) = solve(&sys, sys.rhs(), &SolveOptions::default()).unwrap();
        let rep = max_principle_report(&u, max_principle_bounds(&f, &zeros_c));
        prop_assert!(rep.ok, "{:?}", rep);
        Ok(())
    });
    o.check(result.is_ok(), format!("discrete maximum principle over 200 random signed sources: {:?}", result.err()));

    // step boundary data, f = 0, 80 x 80
    let rows = run_preset(5, None, Scheme::Collocation);
    let all = rows.iter().all(|r| r.maxprin_ok && r.mmatrix_ok);
    o.check(all && rows.len() == 4, format!("step-boundary cases on 80x80 stay within [0, 1] ({} cases)", rows.len()));

    // mass conservation for constant-coefficient solves
    let tol = SolveOptions::default().tol;
    for name in ["ex2-a1", "ex2-a2", "ex2-a3", "ex3-a3"] {
        let case = find_case(name).unwrap();
        let n = if case.dim == 3 { 12 } else { 40 };
        let p = KernelParams::new(1.0 / n as f64, 36.0, case.dim).unwrap();
        let (_, sys, f, g) = system_for(&case, Scheme::Collocation, &vec![uniform_partition(0.0, 1.0, n); case.dim], &p);
        let (u, rep) = solve(&sys, sys.rhs(), &SolveOptions::default()).unwrap();
        let bal = mass_conservation_check(&sys, &case.field, &u, &g, &f).unwrap();
        // ‖f‖ is the integrated size of the system right-hand side, boundary lift included
        let fnorm = interior_weights(sys.grid()).iter().sum::<f64>() * rep.rhs_norm;
        o.check(
            bal.residual <= 10.0 * tol * fnorm,
            format!("{name} N={n} mass balance residual {:.2e} <= 10 tol |f| = {:.2e}", bal.residual, 10.0 * tol * fnorm),
        );
    }

    // moment identities
    for (dim, a) in [
        (2, SpdMatrix::identity(2)),
        (2, SpdMatrix::diagonal(&[10.0, 1.0]).unwrap()),
        (3, SpdMatrix::from_rows3([[2.5, 1.5, 0.0], [1.5, 2.5, 0.0], [0.0, 0.0, 1.0]]).unwrap()),
    ] {
        let delta = 0.1;
        let p = KernelParams::new(delta, 36.0, dim).unwrap();
        let m = moment_diagnostics(&p, &a);
        let zeroth = (1.0 - alpha_of_chi2(36.0, dim)) * 2.0 / (delta * delta);
        let z_err = rel(m.zeroth, zeroth);
        o.check(z_err <= 1e-12, format!("d={dim} A={:?} zeroth moment rel error {z_err:.1e} <= 1e-12", diag_of(&a)));
        let first = m.first.iter().fold(0.0f64, |s, v| s.max(v.abs())) / (m.zeroth * delta);
        o.check(first <= 1e-12, format!("d={dim} first moment {first:.1e} <= 1e-12"));
        let mut worst: f64 = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                worst = worst.max((m.second[i][j] - a.get(i, j)).abs());
            }
        }
        o.check(
            worst <= 1e-6,
            format!("d={dim} second moment within 1e-6 absolute of A: max deviation {worst:.3e}"),
        );
        if worst > 1e-6 {
            // exact truncated value is A P(chi2_{d+2} <= 36)
            let frac = if dim == 2 { 1.0 - 19.0 * (-18.0f64).exp() } else { 1.0 - alpha_of_chi2(36.0, 3) - (2.0 * 36.0 / std::f64::consts::PI).sqrt() * 36.0 / 3.0 * (-18.0f64).exp() };
            let mut vs_exact: f64 = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    vs_exact = vs_exact.max((m.second[i][j] - frac * a.get(i, j)).abs());
                }
            }
            o.note(format!("truncation keeps the fraction {frac:.12} of A; deviation from that exact value {vs_exact:.1e}"));
        }
    }
    o
}

fn diag_of(a: &SpdMatrix) -> Vec<f64> {
    (0..a.dim()).map(|i| a.get(i, i)).collect()
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        // `cargo test -- --list` probes targets; nothing to enumerate here
        return;
    }
    let criteria: [(&str, &str, fn() -> Outcome); 8] = [
        ("8", "property suite", criterion8),
        ("3", "fixed-delta uniform grids: exponential decay then plateau", criterion3),
        ("1", "delta = h collocation errors and rates", criterion1),
        ("2", "quadrature finite-difference comparison scheme", criterion2),
        ("6", "variable coefficients", criterion6),
        ("7", "truncation threshold sweep", criterion7),
        ("4", "fixed-delta split grids: second order", criterion4),
        ("5", "three-dimensional delta = h", criterion5),
    ];
    let mut failed = Vec::new();
    for (id, title, f) in criteria {
        let started = Instant::now();
        let out = f();
        println!(
            "{} criterion {id}: {title} ({:.0} s)",
            if out.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
        for l in &out.lines {
            println!("    {l}");
        }
        if !out.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
