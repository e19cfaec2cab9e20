//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed. The
//! process fails if any criterion fails other than the known red one (the
//! unscaled Rényi lower bound), and also if that criterion fails for any
//! other reason.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use frrr::divergence::renyi_per_entry;
use frrr::experiments::{
    run_misspec_study, run_rate_study, verify_divergence_bounds, MisspecConfig, RateStudyConfig, Verdict,
};
use frrr::model::{Dataset, FamilySpec};
use frrr::posterior::{grad_log_likelihood, log_likelihood, posterior_mean, run_sampler, Algorithm, FractionalConfig};
use frrr::prior::{grad_log_prior, log_prior, PriorConfig};
use frrr::{kl_per_entry, oracle, Mat, TauPreset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
    /// Failure that is documented and expected.
    known_red: bool,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail, known_red: false }
    }
}

fn within(t: Duration, limit_s: u64) -> bool {
    t.as_secs_f64() < limit_s as f64
}

fn normal(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal))
}

fn fd_rel_err(f: impl Fn(&Mat) -> f64, g: &Mat, b: &Mat) -> f64 {
    let mut fd = Mat::zeros(b.nrows(), b.ncols());
    for k in 0..b.len() {
        let h = 1e-5 * b[k].abs().max(1.0);
        let (mut up, mut dn) = (b.clone(), b.clone());
        up[k] += h;
        dn[k] -= h;
        fd[k] = (f(&up) - f(&dn)) / (2.0 * h);
    }
    (&fd - g).norm() / fd.norm().max(1e-8)
}

fn all_families() -> Vec<FamilySpec<f64>> {
    vec![
        FamilySpec::gaussian(1.3).unwrap(),
        FamilySpec::bernoulli_logit(),
        FamilySpec::bernoulli_probit(),
        FamilySpec::poisson_log(),
        FamilySpec::gamma_log(2.0).unwrap(),
        FamilySpec::negbin_log(3.0).unwrap(),
    ]
}

/// Families restricted to a bounded Θ so that every lemma constant is finite
/// (U_1 stays infinite for the Gaussian).
fn bounded_families() -> Vec<(FamilySpec<f64>, bool)> {
    vec![
        (FamilySpec::gaussian(1.0).unwrap(), false),
        (FamilySpec::bernoulli_logit().with_domain(-4.0, 4.0).unwrap(), true),
        (FamilySpec::bernoulli_probit().with_domain(-4.0, 4.0).unwrap(), true),
        (FamilySpec::poisson_log().with_domain(-3.0, 3.0).unwrap(), true),
        (FamilySpec::gamma_log(2.0).unwrap().with_domain(-5.0, -0.2).unwrap(), false),
        (FamilySpec::negbin_log(3.0).unwrap().with_domain(-3.0, -0.2).unwrap(), true),
    ]
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for fam in all_families() {
        for _ in 0..50 {
            let x = normal(&mut rng, 8, 3, 1.0);
            let b = normal(&mut rng, 3, 2, 0.4);
            let y = (&x * &b).map(|e| fam.sample_response(fam.theta_from_eta(e), &mut rng).unwrap());
            let data = Dataset::new(x, y, fam).unwrap();
            let g = grad_log_likelihood(&data, &b).unwrap();
            worst = worst.max(fd_rel_err(|bb| log_likelihood(&data, bb).unwrap(), &g, &b));
        }
    }
    for _ in 0..50 {
        let tau = rng.random_range(0.1..3.0);
        let cfg = PriorConfig::manual(tau, 3, 4).unwrap();
        let s = rng.random_range(0.1..2.0);
        let b = normal(&mut rng, 3, 4, s);
        let g = grad_log_prior(&b, &cfg).unwrap();
        worst = worst.max(fd_rel_err(|bb| log_prior(bb, &cfg).unwrap(), &g, &b));
    }
    let t = t0.elapsed();
    Outcome::new(
        worst < 1e-4 && within(t, 60),
        format!("worst relative error {worst:.2e} over 6×50 likelihood + 50 prior points, {:.1}s", t.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst_disc: f64 = 0.0;
    let mut worst_cont: f64 = 0.0;
    for (fam, discrete) in bounded_families() {
        let (lo, hi) = fam.theta_domain();
        let (lo, hi) = (lo.max(-4.0), hi.min(4.0));
        for _ in 0..200 {
            let t = rng.random_range(lo..=hi);
            let z = rng.random_range(lo..=hi);
            let mut err = |exact: f64, brute: f64| {
                let e = (exact - brute).abs() / brute.abs().max(1.0);
                if discrete {
                    worst_disc = worst_disc.max(e)
                } else {
                    worst_cont = worst_cont.max(e)
                }
            };
            err(kl_per_entry(&fam, t, z).unwrap(), oracle::kl(&fam, t, z).unwrap());
            for al in [0.25, 0.5, 0.75] {
                err(renyi_per_entry(&fam, t, z, al).unwrap(), oracle::renyi(&fam, t, z, al).unwrap());
            }
        }
    }
    let t = t0.elapsed();
    Outcome::new(
        worst_disc < 1e-8 && worst_cont < 1e-6 && within(t, 120),
        format!(
            "worst error {worst_disc:.1e} (discrete, tol 1e-8), {worst_cont:.1e} (continuous, tol 1e-6), {:.1}s",
            t.as_secs_f64()
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut other_violations = 0;
    let mut printed_violations = 0;
    let mut printed_rows = 0;
    let mut tight_worst: f64 = 0.0;
    let mut skipped = Vec::new();
    for (fam, _) in bounded_families() {
        let rep = verify_divergence_bounds(&fam, 10_000, &mut rng).unwrap();
        for r in &rep.rows {
            if r.lemma == "renyi_lower" {
                printed_rows += 1;
                printed_violations += usize::from(!r.satisfied);
            } else {
                other_violations += usize::from(!r.satisfied);
            }
        }
        if !rep.rows.iter().any(|r| r.lemma == "misspecified") {
            skipped.push(fam.id().name());
        }
        if fam.id().name() == "gaussian" {
            for r in rep.rows.iter().filter(|r| r.lemma == "kl_upper" && r.bound > 0.0) {
                tight_worst = tight_worst.max((r.exact / r.bound - 1.0).abs());
            }
        }
    }
    let detail = format!(
        "Rényi lower bound as printed violated in {printed_violations}/{printed_rows} comparisons; \
         KL upper, α-scaled Rényi lower, second-moment and misspecified bounds: {other_violations} violations \
         (misspecified skipped for {} where U_1 = ∞); gaussian KL ratio within {tight_worst:.1e} of 1. \
         The printed lower bound (C_L/2a)‖Θ−Z‖² ≤ D_α cannot hold for α < 1: D_α ≈ α·(b″/2a)‖Θ−Z‖² near the \
         diagonal, so it fails by the factor α; the α-scaled form holds",
        skipped.join(", ")
    );
    let core_ok = other_violations == 0 && tight_worst < 1e-9;
    Outcome { pass: core_ok && printed_violations == 0, detail, known_red: core_ok && printed_violations > 0 }
}

/// Probability vector of a Bernoulli product, enumerated over all outcomes.
fn product_probs(fam: &FamilySpec<f64>, theta: &[f64]) -> Vec<f64> {
    let p1: Vec<f64> = theta.iter().map(|&t| fam.b_prime(t).unwrap()).collect();
    (0..1usize << theta.len())
        .map(|mask| {
            p1.iter().enumerate().map(|(k, &p)| if mask >> k & 1 == 1 { p } else { 1.0 - p }).product()
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut violations = 0;
    let mut checks = 0;
    for (fam, _) in bounded_families() {
        let (lo, hi) = fam.theta_domain();
        let (lo, hi) = (lo.max(-4.0), hi.min(4.0));
        for _ in 0..2000 {
            let (t, z) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            let mut prev = 0.0;
            for k in 1..=19 {
                let d = renyi_per_entry(&fam, t, z, k as f64 / 20.0).unwrap();
                checks += 1;
                violations += usize::from(d < prev - 1e-14 * prev);
                prev = d;
            }
        }
    }
    for fam in [FamilySpec::bernoulli_logit(), FamilySpec::bernoulli_probit()] {
        for nq in 1..=12 {
            for _ in 0..50 {
                let th: Vec<f64> = (0..nq).map(|_| rng.random_range(-3.0..3.0)).collect();
                let ze: Vec<f64> = (0..nq).map(|_| rng.random_range(-3.0..3.0)).collect();
                let (pp, rr) = (product_probs(&fam, &th), product_probs(&fam, &ze));
                let tv = 0.5 * pp.iter().zip(&rr).map(|(a, b)| (a - b).abs()).sum::<f64>();
                let h2: f64 = pp.iter().zip(&rr).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
                let d = |al: f64| -> f64 { th.iter().zip(&ze).map(|(&a, &b)| renyi_per_entry(&fam, a, b, al).unwrap()).sum() };
                for al in [0.1, 0.25, 0.5, 0.75, 0.9] {
                    checks += 1;
                    violations += usize::from(al / 2.0 * tv * tv > d(al) + 1e-12);
                }
                checks += 1;
                violations += usize::from(h2 > d(0.5) + 1e-12);
            }
        }
    }
    Outcome::new(violations == 0, format!("{violations} violations in {checks} checks (Bernoulli products nq ≤ 12 enumerated)"))
}

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let x = normal(&mut rng, 200, 2, 1.0);
    let b0 = Mat::from_column_slice(2, 1, &[1.0, -0.5]);
    let y = &x * &b0 + normal(&mut rng, 200, 1, 1.0);
    let ols = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &y));
    let data = Dataset::new(x, y, FamilySpec::gaussian(1.0).unwrap()).unwrap();
    let prior = PriorConfig::manual(1e3, 2, 1).unwrap();
    let mut cfg = FractionalConfig::new(0.5, 1e-3, 200_000);
    cfg.algorithm = Algorithm::Mala;
    cfg.seed = 5;
    let chain = run_sampler(&data, &prior, &cfg).unwrap();
    let err = (posterior_mean(&chain).unwrap() - ols).norm();
    let acc = chain.acceptance_rate;
    let t = t0.elapsed();
    Outcome::new(
        err < 0.05 && acc > 0.1 && acc < 0.9 && within(t, 180),
        format!("‖B̂ − B_OLS‖_F = {err:.4} (< 0.05), acceptance {acc:.3}, {:.1}s", t.as_secs_f64()),
    )
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let cfg = RateStudyConfig::gaussian_default();
    let res = run_rate_study(&cfg).unwrap();
    let prop1_all = res.cells.iter().all(|c| c.prop1_verdict == Verdict::Pass && c.ok());
    let ratios: Vec<String> =
        res.cells.iter().map(|c| format!("n={}: {:.2}", c.n, c.pred_err.mean / c.prop1_bound)).collect();
    let slope = &res.slopes[0];
    let slope_ok = (-1.2..=-0.8).contains(&slope.slope);

    let rank_cfg = RateStudyConfig { ns: vec![400], ranks: vec![1, 2, 4], ..RateStudyConfig::gaussian_default() };
    let rank_res = run_rate_study(&rank_cfg).unwrap();
    let mono = &rank_res.monotone_in_r[0];
    let pts: Vec<String> = mono.points.iter().map(|(r, m, se)| format!("r={r}: {m:.4}±{se:.4}")).collect();
    let t = t0.elapsed();
    Outcome::new(
        prop1_all && slope_ok && mono.holds && within(t, 1800),
        format!(
            "(a) Prop-1 error/bound per cell [{}] all pass: {prop1_all}; (b) slope {:.3} (95% CI [{:.3}, {:.3}]) in [−1.2, −0.8]: {slope_ok}; \
             (c) n=400 errors [{}] nondecreasing within 2 SE: {}; {:.0}s",
            ratios.join(", "),
            slope.slope,
            slope.ci_low,
            slope.ci_high,
            pts.join(", "),
            mono.holds,
            t.as_secs_f64()
        ),
    )
}

fn criterion_7() -> Outcome {
    let cfg = RateStudyConfig { tau_preset: TauPreset::Theorem3, ..RateStudyConfig::gaussian_default() };
    let res = run_rate_study(&cfg).unwrap();
    let mut parts = Vec::new();
    let mut ok = true;
    let mut live = 0;
    for c in &res.cells {
        let v = c.thm3.verdict;
        if v != Verdict::Vacuous {
            live += 1;
            ok &= v == Verdict::Pass;
        }
        parts.push(format!("n={}: {:.2} vs {:.2} ({:?})", c.n, c.thm3.frequency, c.thm3.required, v));
    }
    Outcome::new(
        ok && live > 0,
        format!("frequency vs required per cell [{}]; {live} non-vacuous cells", parts.join(", ")),
    )
}

fn criterion_8() -> Outcome {
    let t0 = Instant::now();
    let res = run_misspec_study(&MisspecConfig::probit_logit_default()).unwrap();
    let p = res.primary();
    let s = &p.solver;
    let solver_ok = s.grad_norm < 1e-6 && s.multistart_agrees && s.max_restart_distance < 1e-4;
    let bound_ok = p.thm2_fraction >= 0.9;
    let plateau = res.plateau_above_floor && res.decays_slower_than_inverse_n;
    let levels: Vec<String> = res
        .levels
        .iter()
        .map(|l| format!("n={}: {:.4} (floor {:.4})", l.n, l.post_renyi.mean, l.renyi_floor))
        .collect();
    let t = t0.elapsed();
    Outcome::new(
        solver_ok && bound_ok && plateau && within(t, 1200),
        format!(
            "solver grad {:.1e}, restart spread {:.1e}; Thm-2 bound satisfied in {:.0}% at n={}; posterior D_α [{}] \
             stays above the floor: {}, decays slower than 1/n: {}; {:.0}s",
            s.grad_norm,
            s.max_restart_distance,
            100.0 * p.thm2_fraction,
            p.n,
            levels.join(", "),
            res.plateau_above_floor,
            res.decays_slower_than_inverse_n,
            t.as_secs_f64()
        ),
    )
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_frrr")).args(args).output().map(|o| o.status.success()).unwrap_or(false)
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .map(|it| it.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    v.retain(|n| n.ends_with(".csv"));
    v.sort();
    v
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("config.toml");
    fs::write(
        &cfg,
        r#"
seed = 9
[generate]
n = 80
p = 4
q = 3
rank = 2
[fit.sampler]
algorithm = "mala"
n_steps = 3000
burn_in = 600
thin = 5
init_at_mode = false
[verify_bounds]
trials = 300
[rate_study]
p = 3
q = 2
ns = [60, 120]
ranks = [1]
replications = 2
divergence_samples = 10
[rate_study.sampler]
n_steps = 300
burn_in = 100
thin = 2
[misspec]
p = 3
q = 2
r = 1
ns = [150]
replications = 2
divergence_samples = 10
[misspec.sampler]
n_steps = 300
burn_in = 100
thin = 2
[misspec.solver]
restarts = 2
"#,
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let mut ran = true;
    for run in ["a", "b"] {
        let d = |s: &str| root.join(format!("{run}_{s}")).to_string_lossy().into_owned();
        ran &= run_cli(&["generate", "-c", c, "-o", &d("gen")]);
        ran &= run_cli(&["fit", "-c", c, "-d", &d("gen"), "-o", &d("fit")]);
        ran &= run_cli(&["summarize", "-c", c, "--chain", &format!("{}/chain.bin", d("fit")), "-o", &d("sum")]);
        let truth = format!("{}/truth.csv", d("gen"));
        let bhat = format!("{}/bhat.csv", d("fit"));
        ran &= run_cli(&["divergence", "-c", c, "--theta", &truth, "--zeta", &bhat, "-o", &d("div")]);
        ran &= run_cli(&["verify-bounds", "-c", c, "-o", &d("vb")]);
        ran &= run_cli(&["rate-study", "-c", c, "-o", &d("rs")]);
        ran &= run_cli(&["misspec", "-c", c, "-o", &d("ms")]);
    }
    let mut compared = 0;
    let mut differing = Vec::new();
    for sub in ["gen", "fit", "sum", "div", "vb", "rs", "ms"] {
        let (a, b) = (root.join(format!("a_{sub}")), root.join(format!("b_{sub}")));
        if fs::read(a.join("manifest.json")).ok() != fs::read(b.join("manifest.json")).ok() {
            differing.push(format!("{sub}/manifest.json"));
        }
        for f in csv_files(&a) {
            compared += 1;
            if fs::read(a.join(&f)).ok() != fs::read(b.join(&f)).ok() {
                differing.push(format!("{sub}/{f}"));
            }
        }
    }
    Outcome::new(
        ran && differing.is_empty() && compared > 0,
        format!("7 subcommands run twice; {compared} CSV files compared, differing: {differing:?}"),
    )
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient suite", criterion_1),
        (2, "divergence oracle suite", criterion_2),
        (3, "lemma suite", criterion_3),
        (4, "divergence relations", criterion_4),
        (5, "sampler baseline", criterion_5),
        (6, "rate reproduction", criterion_6),
        (7, "concentration", criterion_7),
        (8, "misspecification", criterion_8),
        (9, "CLI determinism", criterion_9),
    ];
    let mut unexpected = 0;
    for (k, name, f) in criteria {
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let note = if o.known_red { " [known]" } else { "" };
        println!("criterion {k} ({name}): {tag}{note} — {}", o.detail);
        if !o.pass && !o.known_red {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria failed unexpectedly");
        std::process::exit(1);
    }
}
