//! The acceptance suite. Run with
//! `cargo test -p scenario-vi-cli --test acceptance -- --nocapture` to see one line
//! per criterion; the test fails if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde_json::Value;

use scenario_vi::bounds::{certify, epsilon, BoundQuery, CertificateKind};
use scenario_vi::demand::{agent_set, build_dr_game, prepare_instance, run_dr_experiment, DrConfig};
use scenario_vi::games::{build_epigraph_qvi, solve_sampled_robust_eq, worst_case_cost, SreParams};
use scenario_vi::risk::{clopper_pearson, coverage_experiment, gaussian_linear_risk, mc_risk, Builtin1d, Predicate};
use scenario_vi::sets::ConvexSet;
use scenario_vi::support::{check_degeneracy, count_support, DegeneracyStatus, SupportParams};
use scenario_vi::vi::{solve_vi, AffineOperator, Operator, ScenarioVIProblem, SolverParams};

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

fn halfspace(a: &[f64], b: f64) -> ConvexSet {
    ConvexSet::whole(a.len()).with_halfspace(a, b).unwrap()
}

fn affine(a: DMatrix<f64>, b: DVector<f64>) -> Arc<dyn Operator> {
    Arc::new(AffineOperator::new(a, b).unwrap())
}

fn scenvi(dir: &Path, args: &[&str]) -> (bool, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_scenvi"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    (out.status.success(), out.stdout)
}

fn certificate_reproduction() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let (ok, stdout) = scenvi(dir.path(), &["certify", "--k", "7", "--n-samples", "500", "--beta", "1e-6"]);
    let elapsed = start.elapsed();
    let eps = serde_json::from_slice::<Value>(&stdout)
        .ok()
        .and_then(|v| v["epsilon"].as_f64())
        .unwrap_or(f64::NAN);
    Outcome {
        pass: ok && (eps - 0.0649).abs() <= 0.0005 && within(Duration::from_secs(1), elapsed),
        detail: format!("eps(7) = {:.4}% ({elapsed:.2?} wall, process included)", 100.0 * eps),
    }
}

/// Normalized bound polynomial by Horner on the ratios `C(l,k)/C(N,k)`,
/// formed by the recurrence `C(l,k)/C(l+1,k) = (l+1-k)/(l+1)`.
fn oracle_poly(k: usize, n: usize, beta: f64, t: f64) -> f64 {
    let mut ratio = 1.0;
    let mut acc = 1.0;
    for l in (k..n).rev() {
        ratio *= (l + 1 - k) as f64 / (l + 1) as f64;
        acc = acc * t + ratio;
    }
    beta / (n + 1) as f64 * acc - t.powi((n - k) as i32)
}

fn oracle_epsilon(k: usize, n: usize, beta: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    // positive near 0, negative at 1
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if oracle_poly(k, n, beta, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    1.0 - 0.5 * (lo + hi)
}

fn bound_tables() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut worst_gap = 0.0f64;
    let mut worst_residual = 0.0f64;
    for (n, beta) in [(50, 0.05), (500, 1e-6), (1000, 0.2)] {
        let mut prev = 0.0;
        for k in 0..=n + 2 {
            let c = certify(k, n, beta, CertificateKind::APosteriori).unwrap();
            pass &= c.epsilon >= prev;
            prev = c.epsilon;
            if k >= n {
                pass &= c.epsilon == 1.0;
            }
            worst_residual = worst_residual.max(c.residual);
            worst_gap = worst_gap.max((c.epsilon - oracle_epsilon(k, n, beta)).abs());
        }
    }
    let elapsed = start.elapsed();
    pass &= worst_residual <= 1e-10 && worst_gap <= 1e-9 && within(Duration::from_secs(10), elapsed);
    Outcome {
        pass,
        detail: format!(
            "monotone tables, max residual {worst_residual:.1e}, max oracle gap {worst_gap:.1e} ({elapsed:.2?})"
        ),
    }
}

/// The unique solution by enumerating active sets of the KKT system
/// `A x + b + G_S' lambda = 0`, `G_S x = h_S`, `lambda >= 0`, `G x <= h`.
fn kkt_oracle(a: &DMatrix<f64>, b: &DVector<f64>, g: &[Vec<f64>], h: &[f64]) -> Option<DVector<f64>> {
    let n = b.len();
    let m = g.len();
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let size = n + active.len();
        let mut k = DMatrix::zeros(size, size);
        let mut rhs = DVector::zeros(size);
        k.view_mut((0, 0), (n, n)).copy_from(a);
        rhs.rows_mut(0, n).copy_from(&(-b));
        for (r, &i) in active.iter().enumerate() {
            for j in 0..n {
                k[(j, n + r)] = g[i][j];
                k[(n + r, j)] = g[i][j];
            }
            rhs[n + r] = h[i];
        }
        let Some(sol) = k.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let dual_ok = (0..active.len()).all(|r| sol[n + r] >= -1e-10);
        let primal_ok = (0..m).all(|i| g[i].iter().zip(x.iter()).map(|(p, q)| p * q).sum::<f64>() <= h[i] + 1e-10);
        if dual_ok && primal_ok {
            return Some(x);
        }
    }
    None
}

fn solver_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut missing = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=3);
        let m = rng.random_range(1..=6);
        let bm = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let cm = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let a = &bm * bm.transpose() + DMatrix::identity(n, n) * 0.5 + (&cm - cm.transpose());
        let b = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let g: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let h: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let sets = g.iter().zip(&h).map(|(gi, &hi)| halfspace(gi, hi)).collect();
        let problem = ScenarioVIProblem::new_vi(affine(a.clone(), b.clone()), sets).unwrap();
        let sol = solve_vi(&problem, &SolverParams::default()).unwrap();
        match kkt_oracle(&a, &b, &g, &h) {
            Some(x) if sol.converged => worst = worst.max((&sol.x_star - x).amax()),
            _ => missing += 1,
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        pass: missing == 0 && worst <= 1e-6 && within(Duration::from_secs(30), elapsed),
        detail: format!("50 affine VIs, max |x - x_kkt| = {worst:.1e}, unmatched {missing} ({elapsed:.2?})"),
    }
}

/// Halfspaces and balls that contain the origin, under a random strongly
/// monotone affine operator.
fn random_convex_instance(rng: &mut ChaCha8Rng) -> ScenarioVIProblem {
    let n = rng.random_range(1..=4);
    let bm = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let a = &bm * bm.transpose() + DMatrix::identity(n, n);
    let b = DVector::from_fn(n, |_, _| rng.random_range(-4.0..4.0));
    let sets = (0..rng.random_range(1..=30))
        .map(|_| {
            if rng.random_bool(0.7) {
                let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                halfspace(&g, rng.random_range(0.0..1.0))
            } else {
                let p = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                let r2 = p.norm_squared() + rng.random_range(0.1..1.0);
                ConvexSet::whole(n)
                    .with_quadratic(DMatrix::identity(n, n) * 2.0, -2.0 * &p, r2 - p.norm_squared())
                    .unwrap()
            }
        })
        .collect();
    ScenarioVIProblem::new_vi(affine(a, b), sets).unwrap()
}

fn support_dimension_bound() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut over, mut ambiguous, mut invalid, mut max_s) = (0, 0, 0, 0);
    for _ in 0..100 {
        let p = random_convex_instance(&mut rng);
        let r = count_support(&p, &SolverParams::default(), &SupportParams::default()).unwrap();
        over += (r.s_star > p.dim()) as usize;
        ambiguous += r.ambiguous as usize;
        invalid += (!r.valid) as usize;
        max_s = max_s.max(r.s_star);
    }
    let elapsed = start.elapsed();
    Outcome {
        pass: over == 0 && ambiguous == 0 && invalid == 0 && within(Duration::from_secs(120), elapsed),
        detail: format!(
            "100 instances, s* > n in {over}, ambiguous {ambiguous}, invalid {invalid}, max s* {max_s} ({elapsed:.2?})"
        ),
    }
}

fn coverage() -> Outcome {
    let start = Instant::now();
    let r = coverage_experiment(&Builtin1d, 50, 200, 0.05, 0).unwrap();
    let elapsed = start.elapsed();
    let limit = 0.05 + 3.0 * (0.05f64 * 0.95 / 200.0).sqrt();
    Outcome {
        pass: r.empirical_rate <= limit && within(Duration::from_secs(300), elapsed),
        detail: format!(
            "violation rate {:.3} <= {limit:.3} ({} violations, {} degenerate trials) ({elapsed:.2?})",
            r.empirical_rate, r.violations, r.degenerate_trials
        ),
    }
}

fn degeneracy_detection() -> Outcome {
    let start = Instant::now();
    let toward_ones = || affine(DMatrix::identity(2, 2), DVector::from_element(2, -1.0));
    let figure = ScenarioVIProblem::new_vi(
        toward_ones(),
        vec![halfspace(&[0.0, 1.0], 0.0), halfspace(&[1.0, 0.0], 0.0), halfspace(&[1.0, -1.0], 0.0)],
    )
    .unwrap();
    let two = ScenarioVIProblem::new_vi(
        affine(DMatrix::identity(2, 2), DVector::from_element(2, -2.0)),
        vec![halfspace(&[1.0, 0.0], 1.0), halfspace(&[1.0, 0.0], 2.0)],
    )
    .unwrap();
    let status = |p: &ScenarioVIProblem| {
        let solver = SolverParams::default();
        let r = count_support(p, &solver, &SupportParams::default()).unwrap();
        check_degeneracy(p, &r, &solver).unwrap()
    };
    let (a, b) = (status(&figure), status(&two));
    let elapsed = start.elapsed();
    Outcome {
        pass: a == DegeneracyStatus::Failed && b == DegeneracyStatus::Passed && within(Duration::from_secs(1), elapsed),
        detail: format!("corner instance {a:?}, two halfspaces {b:?} ({elapsed:.2?})"),
    }
}

fn sre_identities() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut notes = Vec::new();
    for seed in 0..3u64 {
        let prep = prepare_instance(&DrConfig::desk(seed, 0.05), Path::new(".")).unwrap();
        let inst = &prep.instance;
        let game = build_dr_game(inst).unwrap();
        let samples = inst.samples();
        let sre = solve_sampled_robust_eq(&game, &samples, &SreParams::default()).unwrap();
        pass &= sre.converged;
        let mut level_gap = 0.0f64;
        let mut worst_gain = f64::NEG_INFINITY;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        for j in 0..inst.m {
            let base = worst_case_cost(&game, &samples, &sre.x_sr, j).unwrap().value;
            level_gap = level_gap.max((base - sre.t_sr[j]).abs());
            let set = agent_set(inst.t, inst.gamma[j]).unwrap();
            let own = game.own(&sre.x_sr, j);
            for d in 0..50 {
                let scale = [1.0, 10.0, 100.0][d % 3];
                let noise = Normal::new(0.0, scale).unwrap();
                let step = DVector::from_fn(inst.t, |_, _| noise.sample(&mut rng));
                let dev = set.project(&(&own + step)).unwrap();
                let mut x = sre.x_sr.clone();
                x.rows_mut(game.block(j).start, inst.t).copy_from(&dev);
                let value = worst_case_cost(&game, &samples, &x, j).unwrap().value;
                worst_gain = worst_gain.max(base - value);
            }
        }
        pass &= level_gap <= 1e-6 && worst_gain <= 1e-5;
        notes.push(format!("seed {seed}: |t - J_max| {level_gap:.1e}, best deviation gain {worst_gain:.1e}"));

        if seed == 1 {
            let qvi_start = Instant::now();
            let q = build_epigraph_qvi(&game, &samples).unwrap();
            let sol = solve_vi(&q.problem, &SolverParams::default().with_tol(1e-9)).unwrap();
            let (x, levels) = q.levels(&sol.x_star);
            let dx = (&x - &sre.x_sr).amax();
            let dl = levels
                .iter()
                .zip(&sre.t_sr)
                .map(|(a, b)| (a - b).abs() / b.abs())
                .fold(0.0, f64::max);
            pass &= sol.converged && dx <= 1e-5;
            notes.push(format!(
                "QVI route |dx| {dx:.1e}, relative level gap {dl:.1e} ({:.1?})",
                qvi_start.elapsed()
            ));
        }
    }
    let elapsed = start.elapsed();
    pass &= within(Duration::from_secs(300), elapsed);
    Outcome {
        pass,
        detail: format!("{} ({elapsed:.1?})", notes.join("; ")),
    }
}

fn risk_consistency() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // 20 intervals at family-wise confidence 95%
    let confidence = 1.0 - 0.05 / 20.0;
    let mut outside = 0;
    for case in 0..20u64 {
        let n = rng.random_range(1..=5);
        let a = DVector::from_fn(n, |_, _| rng.random_range(-1.0f64..1.0));
        let mu = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let sigma = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
        let sd = a.dot(&(&sigma * &a)).sqrt();
        let threshold = a.dot(&mu) + sd * rng.random_range(0.0..2.5);
        let closed = gaussian_linear_risk(&a, threshold, &mu, &sigma).unwrap().value;
        let chol = sigma.clone().cholesky().unwrap().l();
        let aa = a.clone();
        let event: Predicate = Arc::new(move |d: &DVector<f64>| aa.dot(d) > threshold);
        let sampler = |r: &mut ChaCha8Rng| Ok(&mu + &chol * DVector::from_fn(n, |_, _| StandardNormal.sample(r)));
        let mc = mc_risk(&event, sampler, 1_000_000, case).unwrap();
        let hits = (mc.value * mc.samples_used as f64).round() as usize;
        let (lo, hi) = clopper_pearson(hits, mc.samples_used, confidence).unwrap();
        outside += !(lo <= closed && closed <= hi) as usize;
    }
    let elapsed = start.elapsed();
    Outcome {
        pass: outside == 0 && within(Duration::from_secs(120), elapsed),
        detail: format!(
            "closed form outside the {:.2}% binomial interval in {outside}/20 cases ({elapsed:.1?})",
            100.0 * confidence
        ),
    }
}

fn certificate_dominance() -> Outcome {
    let start = Instant::now();
    let (mut dominated, mut invalid) = (0, 0);
    let mut worst: Option<(u64, f64, f64)> = None;
    for seed in 0..100u64 {
        let r = run_dr_experiment(&DrConfig::desk(seed, 0.05), Path::new(".")).unwrap();
        if r.dominance {
            dominated += 1;
        }
        if !r.support.valid || r.support.ambiguous {
            invalid += 1;
        }
        let ratio = r.max_agent_risk / r.certificate.epsilon;
        if worst.is_none_or(|(_, v, e)| ratio > v / e) {
            worst = Some((seed, r.max_agent_risk, r.certificate.epsilon));
        }
    }
    let elapsed = start.elapsed();
    let (ws, wv, we) = worst.unwrap();
    Outcome {
        pass: dominated >= 95 && within(Duration::from_secs(1800), elapsed),
        detail: format!(
            "V^j <= eps(s*) for all agents in {dominated}/100 seeds, {invalid} flagged support reports, \
             tightest seed {ws}: max V = {wv:.4} vs eps = {we:.4} ({elapsed:.1?})"
        ),
    }
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            let mut bytes = fs::read(&p).unwrap();
            if name.ends_with(".manifest.json") {
                // wall-clock duration is the one field allowed to differ
                let mut m: Value = serde_json::from_slice(&bytes).unwrap();
                m.as_object_mut().unwrap().remove("duration_ms");
                bytes = serde_json::to_vec(&m).unwrap();
            }
            (name, bytes)
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(
        root.join("p.json"),
        r#"{"affine": {"A": [[2, 1], [-1, 2]], "b": [-2, -3]},
            "scenarios": [{"halfspaces": [{"a": [1, 0], "b": 1}]}, {"halfspaces": [{"a": [1, 1], "b": 1.5}]},
                          {"quadratics": [{"Q": [[2, 0], [0, 2]], "c": [0, 0], "b": 4}]}]}"#,
    )
    .unwrap();
    fs::write(root.join("r.json"), r#"{"a": [1, -1], "threshold": 1, "mu": [0.2, 0], "sigma": [[1, 0.3], [0.3, 2]]}"#)
        .unwrap();
    let desk = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let desk = desk.to_str().unwrap();
    let workflows: Vec<(&str, Vec<&str>)> = vec![
        ("certify", vec!["certify", "--k", "7", "--n-samples", "500", "--beta", "1e-6"]),
        ("solve-vi", vec!["solve-vi", "--problem", "p.json"]),
        ("support", vec!["support", "--problem", "p.json", "--tol", "1e-4"]),
        ("risk-mc", vec!["risk", "--mode", "mc", "--spec", "r.json", "--seed", "5"]),
        ("risk-gaussian", vec!["risk", "--mode", "gaussian", "--spec", "r.json"]),
        (
            "coverage",
            vec!["coverage", "--instance", "builtin-1d", "--trials", "200", "--beta", "0.05", "--seed", "1"],
        ),
        ("dr-experiment", vec!["dr-experiment", "--config", desk, "--seed", "0"]),
    ];
    let mut differing = Vec::new();
    for (name, args) in &workflows {
        let mut runs = Vec::new();
        for rep in 0..2 {
            let out = format!("{name}-{rep}");
            let mut full = args.clone();
            full.extend(["--out-dir", out.as_str()]);
            let (ok, stdout) = scenvi(root, &full);
            runs.push((ok, stdout, snapshot(&root.join(&out))));
        }
        if !(runs[0].0 && runs[1].0) || runs[0].1 != runs[1].1 || runs[0].2 != runs[1].2 {
            differing.push(*name);
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        pass: differing.is_empty(),
        detail: format!(
            "{} workflows run twice, differing or failing: {differing:?} ({elapsed:.1?})",
            workflows.len()
        ),
    }
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("certificate reproduction", certificate_reproduction),
        ("bound-table properties", bound_tables),
        ("solver oracle equivalence", solver_oracle),
        ("support-dimension bound", support_dimension_bound),
        ("coverage at desk scale", coverage),
        ("degeneracy detection", degeneracy_detection),
        ("robust equilibrium identities", sre_identities),
        ("risk consistency", risk_consistency),
        ("end-to-end certificate dominance", certificate_dominance),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {verdict} {name}: {}", i + 1, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
fn oracle_matches_a_hand_computed_root() {
    // k = 0, N = 1: beta/2 (1 + t) - t = 0 gives t = beta / (2 - beta)
    let beta = 0.1;
    let expected = 1.0 - beta / (2.0 - beta);
    assert!((oracle_epsilon(0, 1, beta) - expected).abs() < 1e-12);
    let library = epsilon(&BoundQuery::new(0, 1, beta).unwrap()).unwrap();
    assert!((library - expected).abs() < 1e-12);
}
