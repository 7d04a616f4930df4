//! Acceptance criteria 1–9: one PASS/FAIL line each, exit status 1 on any
//! failure.

#![allow(clippy::needless_range_loop)]

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use wildgrad::commands::{cmd_run, report_json};
use wildgrad::config::{parse_config, RunConfig};
use wildgrad_core::blocks::{fd_divergence_residual, make_block};
use wildgrad_core::driver::RunReport;
use wildgrad_core::field::{AffineBase, FieldTree};
use wildgrad_core::geometry::{Cube, Domain, Mat, MatrixPair, WaveVector};
use wildgrad_core::rng::{self, Rng};
use wildgrad_core::scenario::{decompose_sigma, in_sigma, two_branch_scenario};
use wildgrad_core::stage::{run_stage, StageDomain, StageInput};
use wildgrad_core::staircase::{oscillate_to_corners, step_in_sigma, StepParams, Tag};
use wildgrad_core::tnconfig::{corner_weights, cyclic_coeffs, t4_fixture, TNConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Independent Gauss-Jordan solve of `P_{k+1} − (1−t_k)P_k = t_k δ_{kj}`.
fn linear_solve_coeffs(t: &[f64]) -> Vec<Vec<f64>> {
    let n = t.len();
    let mut out = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut a = vec![vec![0.0; n + 1]; n];
        for k in 0..n {
            a[k][(k + 1) % n] += 1.0;
            a[k][k] -= 1.0 - t[k];
            a[k][n] = if k == j { t[k] } else { 0.0 };
        }
        for col in 0..n {
            let piv = (col..n).max_by(|x, y| a[*x][col].abs().total_cmp(&a[*y][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        for i in 0..n {
            out[i][j] = a[i][n] / a[i][i];
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let mut r = rng::stream(1, 1);
    let (mut sum_err, mut solve_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = 2 + rng::index(&mut r, 5);
        let t: Vec<f64> = (0..n).map(|_| rng::range(&mut r, 0.01, 0.99)).collect();
        let c = match cyclic_coeffs(&t) {
            Ok(c) => c,
            Err(e) => return outcome(false, format!("cyclic_coeffs({t:?}): {e}")),
        };
        let o = linear_solve_coeffs(&t);
        for i in 0..n {
            let row = c.row(i as isize + 1);
            sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            for j in 0..n {
                solve_err = solve_err.max((row[j] - o[i][j]).abs());
            }
        }
    }
    outcome(sum_err <= 1e-12 && solve_err <= 1e-12, format!("max row-sum error {sum_err:.2e}, max solve deviation {solve_err:.2e}"))
}

fn random_gamma(r: &mut Rng, m: usize, n: usize) -> WaveVector {
    let p: Vec<f64> = (0..m).map(|_| rng::range(r, 0.2, 2.0) * if rng::uniform(r) < 0.5 { -1.0 } else { 1.0 }).collect();
    let a = rng::on_sphere(r, n, 1.0);
    let mut b = Mat::zeros(m, n);
    if n == 2 {
        // Rows proportional to a⊥, so Ba = 0.
        for i in 0..m {
            let c = rng::range(r, -2.0, 2.0);
            b.set(i, 0, -c * a[1]);
            b.set(i, 1, c * a[0]);
        }
    }
    WaveVector::new(p, a, b).expect("random wave vector")
}

fn criterion_2() -> Outcome {
    let mut r = rng::stream(2, 2);
    let mut worst_fd = 0.0f64;
    for k in 0..50 {
        let (m, n) = (1 + rng::index(&mut r, 2), 1 + rng::index(&mut r, 2));
        let g = random_gamma(&mut r, m, n);
        let lambda = rng::range(&mut r, 0.05, 0.95);
        let eps = rng::range(&mut r, 0.05, 0.5);
        let radius = rng::range(&mut r, 0.01, 0.3);
        let cube = Cube::new((0..n).map(|_| rng::range(&mut r, 0.0, 1.0)).collect(), radius);
        let blk = match make_block(&g, lambda, &cube, eps) {
            Ok(b) => b,
            Err(e) => return outcome(false, format!("case {k}: {e}")),
        };
        let c = &blk.checks;
        let vol = cube.volume();
        let measures = c.measures[0] >= (1.0 - eps) * lambda * vol && c.measures[1] >= (1.0 - eps) * (1.0 - lambda) * vol;
        let fd = fd_divergence_residual(&blk.shape, 200, k);
        worst_fd = worst_fd.max(fd);
        if !(measures && c.containment < eps && c.sup_phi < eps && fd <= 1e-6) {
            return outcome(
                false,
                format!("case {k} (m={m}, n={n}, lambda={lambda:.3}, eps={eps:.3}): measures {:?} vs {:?}, containment {:.2e}, sup phi {:.2e}, fd {fd:.2e}", c.measures, c.required, c.containment, c.sup_phi),
            );
        }
    }
    outcome(true, format!("50 blocks, worst FD divergence residual {worst_fd:.2e}"))
}

fn criterion_3() -> Outcome {
    let two = two_branch_scenario().tn_at(1.0, &MatrixPair::zeros(1, 1)).expect("two-branch T_N");
    let cases: [(&str, TNConfig); 2] = [("two-branch", two), ("T4", t4_fixture())];
    let mut runs = 0;
    let mut slack = f64::INFINITY;
    for (name, cfg) in &cases {
        let cube = Cube::new(vec![0.0; cfg.gammas[0].n()], 0.5);
        for delta in [0.2, 0.5] {
            for i in 1..=cfg.len() {
                for lambda in [0.0, 0.5] {
                    let st = match oscillate_to_corners(cfg, i, lambda, &cube, delta, Tag { stage: 1, lambda: 1.0 }, 7) {
                        Ok(s) => s,
                        Err(e) => return outcome(false, format!("{name} i={i} lambda={lambda} delta={delta}: {e}")),
                    };
                    let w = corner_weights(cfg, i as isize, lambda);
                    for (j, m) in st.report.measures.iter().enumerate() {
                        let req = (1.0 - delta) * w[j] * cube.volume();
                        if *m < req {
                            return outcome(false, format!("{name} i={i} lambda={lambda} delta={delta}: |G_{}| = {m} < {req}", j + 1));
                        }
                        if w[j] > 0.0 {
                            slack = slack.min(m / req);
                        }
                    }
                    runs += 1;
                }
            }
        }
    }
    outcome(true, format!("{runs} staircases, smallest |G_j| / ((1-delta) nu_j |G|) = {slack:.4}"))
}

fn criterion_4() -> Outcome {
    let s = two_branch_scenario();
    let mut r = rng::stream(4, 4);
    let (lambda, mu, rad) = (0.7, 0.85, 0.1);
    let cube = Cube::new(vec![0.0], 0.5);
    let (mut done, mut tries, mut resampled) = (0, 0, 0);
    while done < 20 {
        tries += 1;
        if tries > 20_000 {
            return outcome(false, format!("only {done} decomposable samples in {tries} draws"));
        }
        let y = MatrixPair::scalar(rng::range(&mut r, -2.5, 2.5), rng::range(&mut r, -0.5, 0.5));
        let Ok(dec) = decompose_sigma(&s, rad, lambda, &y) else { continue };
        let p = StepParams { lambda, mu, r: rad, tau: 0.2, tag: Tag { stage: 2, lambda: mu }, eps_nbhd: None, seed: done as u64 };
        let st = match step_in_sigma(&s, &dec, &y, &cube, &p) {
            Ok(st) => st,
            Err(e) => return outcome(false, format!("Y = {y}: {e}")),
        };
        let rep = &st.report;
        if rep.measures.iter().zip(&rep.required).any(|(m, q)| m < q) || rep.total < rep.total_required {
            return outcome(false, format!("Y = {y}: measures {:?} vs {:?}", rep.measures, rep.required));
        }
        let mut rs = rng::stream(40 + done as u64, 4);
        for _ in 0..200 {
            let v = st.node.sample(cube.side(), &mut rs).pair;
            if !in_sigma(&s, rad, mu, &v) {
                return outcome(false, format!("Y = {y}: sampled value {v} outside Sigma^r(mu)"));
            }
            resampled += 1;
        }
        done += 1;
    }
    outcome(true, format!("20 steps, {resampled} resampled values in Sigma^r(mu)"))
}

fn criterion_5() -> Outcome {
    let s = two_branch_scenario();
    let base = AffineBase { u0: vec![0.0], grad: Mat::from_rows(1, 1, &[1.4]), v: Mat::zeros(1, 1) };
    let field = FieldTree::new(base, Domain::unit(1));
    let inp = StageInput { stage: 1, lambda: 0.7, mu: 0.85, r: 0.02, s_rad: 0.06, eps: 0.3 };
    let out = match run_stage(&s, &field, &StageDomain::Base, &inp, 3) {
        Ok(o) => o,
        Err(e) => return outcome(false, e.to_string()),
    };
    let rep = &out.report;
    let g = rep.g_measure;
    let f_rows: Vec<_> = rep.bounds.iter().filter(|b| b.name.contains("(mu-lambda)")).collect();
    let f_ok = !f_rows.is_empty() && f_rows.iter().all(|b| (b.required - 0.00375 * g).abs() < 1e-12 && b.pass);
    let ratio_ok = rep.bounds.iter().any(|b| b.name.contains("(lambda/mu)") && b.pass);
    let failed: Vec<&str> = rep.bounds.iter().filter(|b| !b.pass).map(|b| b.name.as_str()).collect();
    outcome(
        rep.pass() && f_ok && ratio_ok,
        format!("{} recorded bounds, {} failed {failed:?}; (f) requires {:.5}|G|", rep.bounds.len(), failed.len(), f_rows.first().map_or(f64::NAN, |b| b.required / g)),
    )
}

fn criterion_6(r: &RunReport) -> Outcome {
    let drift = r.linf_drift.iter().map(|x| x.achieved).fold(0.0, f64::max);
    let drift_ok = drift < 0.05 && r.linf_drift.iter().all(|x| x.pass);
    let inc_ok = r.increment_l1.len() == r.schedule.k && r.increment_l1.iter().all(|x| x.pass);
    let graph_ok = r.graph_l1.iter().all(|g| g.pass) && r.graph_decreasing;
    let stages_ok = r.stages.iter().all(|s| s.pass()) && r.boundary.iter().all(|b| b.pass);
    let graph: Vec<String> = r.graph_l1.iter().map(|g| format!("{:.4}<={:.4}", g.l1, g.bound)).collect();
    outcome(
        drift_ok && inc_ok && graph_ok && stages_ok,
        format!(
            "sup drift {drift:.2e} < 0.05; increments {}; graph L1 {} decreasing={}",
            r.increment_l1.iter().map(|x| format!("{:.3}<={:.3}", x.achieved, x.required)).collect::<Vec<_>>().join(" "),
            graph.join(" "),
            r.graph_decreasing
        ),
    )
}

fn criterion_7(r: &RunReport) -> Outcome {
    let rows: Vec<_> = r.persistence.iter().filter(|p| p.q == 1 && (p.p == 2 || p.p == 3)).collect();
    let covers = [2, 3].iter().all(|p| rows.iter().filter(|x| x.p == *p).map(|x| x.k).collect::<std::collections::BTreeSet<_>>().len() == 2);
    let arith = rows.iter().filter(|x| x.p == 2).all(|x| (x.bound - 0.0024375).abs() < 1e-12);
    let worst = rows.iter().map(|x| x.fraction).fold(f64::INFINITY, f64::min);
    outcome(
        !rows.is_empty() && covers && arith && rows.iter().all(|x| x.pass),
        format!("{} rows (q=1, p in {{2,3}}, k in {{1,2}}), smallest fraction {worst:.4}, p=2 bound 0.0024375", rows.len()),
    )
}

fn criterion_8(r: &RunReport) -> Outcome {
    let w = &r.wildness;
    outcome(
        w.probes == 100 && w.passed == w.probes && (w.d0 - 3.8).abs() < 1e-12,
        format!("{}/{} probes of radius {:.4} with spread >= {} (smallest {:.4})", w.passed, w.probes, w.radius, w.d0, w.min_spread),
    )
}

const EXPORTS: &str = r#"
grid = [256]
[[export]]
kind = "field"
path = "field.csv"
[[export]]
kind = "raster"
path = "label.pgm"
component = "branch-label"
"#;

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .expect("output directory")
        .map(|e| {
            let p = e.expect("entry").path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).expect("output file"))
        })
        .collect();
    v.sort();
    v
}

fn criterion_9(cfg: &RunConfig, first: &Path, t6: Duration) -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let t = Instant::now();
    if let Err(e) = cmd_run(cfg, dir.path()) {
        return outcome(false, e.to_string());
    }
    let dt = t.elapsed();
    let (a, b) = (outputs(first), outputs(dir.path()));
    let same = a == b;
    outcome(
        same && dt < 2 * t6.max(Duration::from_millis(1)),
        format!("{} files byte-identical: {same}; rerun {:.2}s vs first run {:.2}s", a.len(), dt.as_secs_f64(), t6.as_secs_f64()),
    )
}

fn line(n: usize, o: &Outcome, dt: Duration, limit: Duration) -> bool {
    let pass = o.pass && dt <= limit;
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("{tag} criterion {n}: {} [{:.2}s, limit {}s]", o.detail, dt.as_secs_f64(), limit.as_secs());
    pass
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t = Instant::now();
    let o = f();
    (o, t.elapsed())
}

fn main() -> ExitCode {
    let mut ok = true;
    let secs = Duration::from_secs;
    for (n, f, limit) in [
        (1, criterion_1 as fn() -> Outcome, secs(1)),
        (2, criterion_2, secs(30)),
        (3, criterion_3, secs(60)),
        (4, criterion_4, secs(120)),
        (5, criterion_5, secs(300)),
    ] {
        let (o, dt) = timed(f);
        ok &= line(n, &o, dt, limit);
    }

    let cfg = parse_config(EXPORTS).expect("acceptance configuration");
    let dir = tempfile::tempdir().expect("temp dir");
    let t = Instant::now();
    let run = cmd_run(&cfg, dir.path());
    let t6 = t.elapsed();
    match run {
        Ok(_) => {
            let text = fs::read_to_string(dir.path().join("report.json")).expect("report.json");
            let report: RunReport = serde_json::from_str(&text).expect("report parses");
            assert_eq!(report_json(&report), text, "report.json round-trips");
            ok &= line(6, &criterion_6(&report), t6, secs(900));
            ok &= line(7, &criterion_7(&report), t6, secs(900));
            let (o, dt) = timed(|| criterion_8(&report));
            ok &= line(8, &o, dt + t6, secs(60));
            let (o, dt) = timed(|| criterion_9(&cfg, dir.path(), t6));
            ok &= line(9, &o, dt, 2 * t6.max(secs(1)));
        }
        Err(e) => {
            for n in 6..=9 {
                ok &= line(n, &outcome(false, format!("run failed: {e}")), t6, secs(900));
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
