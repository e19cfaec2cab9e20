use std::path::Path;

use frrr::experiments::{
    fit_chain, hellinger_consistency_check, run_misspec_study, run_rate_study, stream_rng, verify_divergence_bounds,
    FrequencyCheck, MeanSe, Verdict,
};
use frrr::io::{read_chain, read_dataset, read_matrix_csv, write_chain, write_chain_trace, write_dataset, write_matrix_csv, StoredChain};
use frrr::posterior::effective_rank;
use frrr::simulate::{calibrated_truth, generate_dataset, make_design};
use frrr::{divergence_report, posterior_mean, Mat, PriorConfig, TauPreset};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::output::{section_toml, Manifest, OutDir, Table};
use crate::{row, CliError};

fn verdict(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::NearMiss => "near_miss",
        Verdict::Fail => "fail",
        Verdict::Vacuous => "vacuous",
    }
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let g = &cfg.generate;
    g.validate()?;
    let dir = OutDir::create(out)?;
    let x: Mat = make_design(g.n, g.p, g.design, &mut stream_rng(cfg.seed, 0))?;
    let mut truth = calibrated_truth(&x, g.q, g.rank, g.eta_bound, g.eta_coverage, &mut stream_rng(cfg.seed, 1))?;
    let data = generate_dataset(&x, &mut truth, &g.family, &mut stream_rng(cfg.seed, 2))?;
    let design = match g.design {
        frrr::DesignMode::Iid => "iid",
        frrr::DesignMode::ColumnNormalized => "column_normalized",
    };
    write_dataset(out, &data, cfg.seed, design)?;
    write_matrix_csv(&dir.path("truth.csv"), &truth.b0, None)?;
    dir.json(
        "generate_summary.json",
        &json!({
            "rank": truth.rank,
            "scale": truth.scale,
            "b0_frobenius": truth.frobenius(),
            "eta_min": truth.eta_range.0,
            "eta_max": truth.eta_range.1,
            "theta_clip_events": truth.theta_clip_events,
        }),
    )?;
    dir.manifest(&Manifest::new("generate", section_toml("generate", Some(cfg.seed), g), cfg.seed))
}

#[derive(Serialize)]
struct ChainSummary {
    retained: usize,
    alpha: f64,
    final_step_size: f64,
    effective_rank: usize,
    bhat_frobenius: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    acceptance_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_log_post: Option<f64>,
}

pub fn fit(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let f = &cfg.fit;
    f.validate()?;
    let (data, _) = read_dataset::<f64>(data_dir)?;
    let prior = match f.tau_preset {
        TauPreset::Manual => PriorConfig::manual(f.tau.expect("validated"), data.p(), data.q())?,
        preset => {
            PriorConfig::from_preset(preset, data.n(), data.p(), data.q(), data.family().dispersion(), data.x().norm())?
        }
    };
    let dir = OutDir::create(out)?;
    let chain = fit_chain(&data, &prior, f.alpha, &f.sampler, cfg.seed)?;
    let stored = StoredChain::from_chain(&chain);
    write_chain(&dir.path("chain.bin"), &stored)?;
    write_chain_trace(&dir.path("trace.csv"), &chain)?;
    let bhat = posterior_mean(&chain)?;
    write_matrix_csv(&dir.path("bhat.csv"), &bhat, None)?;
    let mean_log_post = chain.log_post.iter().sum::<f64>() / chain.log_post.len() as f64;
    dir.json(
        "summary.json",
        &ChainSummary {
            retained: chain.len(),
            alpha: f.alpha,
            final_step_size: chain.final_step_size,
            effective_rank: effective_rank(&bhat, f.rank_threshold)?,
            bhat_frobenius: bhat.norm(),
            acceptance_rate: Some(chain.acceptance_rate),
            tau: Some(prior.tau()),
            mean_log_post: Some(mean_log_post),
        },
    )?;
    let mut m = Manifest::new("fit", section_toml("fit", Some(cfg.seed), f), cfg.seed);
    for name in ["X.csv", "Y.csv", "meta.toml"] {
        m = m.input(&data_dir.join(name))?;
    }
    dir.manifest(&m)
}

pub fn summarize(cfg: &RunConfig, chain_path: &Path, out: &Path) -> Result<(), CliError> {
    let stored = read_chain(chain_path)?;
    let dir = OutDir::create(out)?;
    let bhat = stored.posterior_mean()?;
    write_matrix_csv(&dir.path("bhat.csv"), &bhat, None)?;
    dir.json(
        "summary.json",
        &ChainSummary {
            retained: stored.samples.len(),
            alpha: stored.alpha,
            final_step_size: stored.gamma,
            effective_rank: effective_rank(&bhat, cfg.fit.rank_threshold)?,
            bhat_frobenius: bhat.norm(),
            acceptance_rate: None,
            tau: None,
            mean_log_post: None,
        },
    )?;
    let text = format!("rank_threshold = {}\n", cfg.fit.rank_threshold);
    dir.manifest(&Manifest::new("summarize", text, 0).input(chain_path)?)
}

pub fn divergence(cfg: &RunConfig, theta: &Path, zeta: &Path, out: &Path) -> Result<(), CliError> {
    let d = &cfg.divergence;
    d.validate()?;
    let t: Mat = read_matrix_csv(theta)?;
    let z: Mat = read_matrix_csv(zeta)?;
    let rep = divergence_report(&d.family, &t, &z, &d.alphas)?;
    let dir = OutDir::create(out)?;
    let mut tab = Table::new(&["metric", "alpha", "per_entry_avg", "total", "normalization"]);
    let norm = format!("per_entry_avg=total/{}", rep.nq);
    for (metric, alpha, avg, total) in rep.rows() {
        tab.push(row![metric, alpha, avg, total, norm.as_str()]);
    }
    dir.table("divergence.csv", &tab)?;
    dir.json("divergence.json", &rep)?;
    let m = Manifest::new("divergence", section_toml("divergence", None, d), 0).input(theta)?.input(zeta)?;
    dir.manifest(&m)
}

pub fn verify_bounds(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let v = &cfg.verify_bounds;
    let rep = verify_divergence_bounds(&v.family, v.trials, &mut stream_rng(cfg.seed, 0))?;
    let dir = OutDir::create(out)?;
    let mut rows = Table::new(&["trial", "lemma", "alpha", "exact", "bound", "satisfied"]);
    for r in &rep.rows {
        rows.push(row![r.trial, r.lemma.as_str(), r.alpha, r.exact, r.bound, r.satisfied]);
    }
    dir.table("bounds.csv", &rows)?;
    let tallies = rep.tallies();
    let mut tab = Table::new(&["lemma", "alpha", "trials", "violations", "worst_ratio"]);
    for t in &tallies {
        tab.push(row![t.lemma.as_str(), t.alpha, t.trials, t.violations, t.worst_ratio]);
    }
    dir.table("tallies.csv", &tab)?;
    // The Rényi lower bound as printed fails for α < 1; its α-scaled form is
    // what the headline fraction counts.
    let checked: Vec<_> = rep.rows.iter().filter(|r| r.lemma != "renyi_lower").collect();
    let satisfied = checked.iter().filter(|r| r.satisfied).count() as f64 / checked.len().max(1) as f64;
    let per_lemma: serde_json::Map<String, serde_json::Value> = frrr::experiments::LEMMAS
        .iter()
        .filter(|l| rep.rows.iter().any(|r| r.lemma == **l))
        .map(|l| (l.to_string(), json!(rep.satisfied_fraction(Some(l)))))
        .collect();
    dir.json(
        "summary.json",
        &json!({
            "family": v.family.id().name(),
            "trials": v.trials,
            "satisfied_fraction": satisfied,
            "satisfied_fraction_by_lemma": per_lemma,
            "tallies": tallies,
        }),
    )?;
    dir.manifest(&Manifest::new("verify-bounds", section_toml("verify_bounds", Some(cfg.seed), v), cfg.seed))
}

fn ms(m: &MeanSe) -> [String; 2] {
    [crate::output::Cell::cell(&m.mean), crate::output::Cell::cell(&m.se)]
}

fn freq(f: &FrequencyCheck) -> [String; 4] {
    use crate::output::Cell;
    [f.threshold.cell(), f.required.cell(), f.frequency.cell(), verdict(f.verdict).to_string()]
}

/// Returns `Err(CliError::Partial)` after writing everything if some
/// replications failed.
pub fn rate_study(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let rs = &cfg.rate_study;
    rs.validate()?;
    let res = run_rate_study(rs)?;
    let dir = OutDir::create(out)?;

    let mut reps = Table::new(&[
        "cell", "n", "r", "alpha", "rep", "pred_err", "post_pred_err", "est_err", "post_est_err", "post_renyi",
        "post_kl", "post_hellinger_sq", "post_tv_sq_upper", "acceptance", "final_step_size", "effective_rank",
        "clip_events", "error",
    ]);
    for r in &res.replications {
        reps.push(row![
            r.cell, r.n, r.r, r.alpha, r.rep, r.pred_err, r.post_pred_err, r.est_err, r.post_est_err, r.post_renyi,
            r.post_kl, r.post_hellinger_sq, r.post_tv_sq_upper, r.acceptance, r.final_step_size, r.effective_rank,
            r.clip_events, r.error.clone()
        ]);
    }
    reps.partial = res.replications.iter().any(|r| !r.ok());
    dir.table("replications.csv", &reps)?;

    let mut cells = Table::new(&[
        "cell", "n", "p", "q", "r", "alpha", "replications_ok", "tau", "x_frob", "b0_frob", "kappa",
        "pred_err_mean", "pred_err_se", "post_pred_err_mean", "post_pred_err_se", "est_err_mean", "est_err_se",
        "post_renyi_mean", "post_renyi_se", "acceptance_mean", "epsilon_n", "thm1_bound", "thm1_verdict",
        "prop1_bound", "prop1_verdict", "epsilon_n_thm3", "thm3_threshold", "thm3_required", "thm3_frequency",
        "thm3_verdict", "prop2_threshold", "prop2_required", "prop2_frequency", "prop2_verdict", "epsilon_prime_n",
        "cor4_threshold", "cor4_required", "cor4_frequency", "cor4_verdict",
    ]);
    for c in &res.cells {
        let mut r = row![c.cell, c.n, c.p, c.q, c.r, c.alpha, c.replications_ok, c.tau, c.x_frob, c.b0_frob, c.kappa];
        r.extend(ms(&c.pred_err));
        r.extend(ms(&c.post_pred_err));
        r.extend(ms(&c.est_err));
        r.extend(ms(&c.post_renyi));
        r.extend(row![
            c.acceptance.mean,
            c.epsilon_n,
            c.thm1_bound,
            verdict(c.thm1_verdict),
            c.prop1_bound,
            verdict(c.prop1_verdict),
            c.epsilon_n_thm3
        ]);
        r.extend(freq(&c.thm3));
        r.extend(freq(&c.prop2));
        r.push(crate::output::Cell::cell(&c.epsilon_prime_n));
        match &c.cor4 {
            Some(f) => r.extend(freq(f)),
            None => r.extend(vec![String::new(); 4]),
        }
        cells.push(r);
    }
    cells.partial = res.cells.iter().any(|c| !c.ok());
    dir.table("cells.csv", &cells)?;

    let mut hel = Table::new(&[
        "cell", "n", "r", "alpha", "c_alpha", "hellinger_lhs", "hellinger_bound", "hellinger_verdict", "tv_sq_lhs",
        "tv_sq_bound", "tv_verdict",
    ]);
    for h in hellinger_consistency_check(&res)? {
        hel.push(row![
            h.cell, h.n, h.r, h.alpha, h.c_alpha, h.hellinger_lhs, h.hellinger_bound, verdict(h.hellinger_verdict),
            h.tv_sq_lhs, h.tv_sq_bound, verdict(h.tv_verdict)
        ]);
    }
    dir.table("hellinger.csv", &hel)?;

    for &al in &rs.alphas {
        for &r in &rs.ranks {
            let pts: Vec<_> = res.cells.iter().filter(|c| c.r == r && c.alpha == al).collect();
            let tag = format!("r{r}_alpha{al}");
            let err: Vec<_> = pts.iter().map(|c| (c.n as f64, c.pred_err.mean)).collect();
            let bound: Vec<_> = pts.iter().map(|c| (c.n as f64, c.prop1_bound)).collect();
            dir.xy(&format!("pred_err_{tag}.dat"), "n mean_prediction_error", &err)?;
            dir.xy(&format!("prop1_bound_{tag}.dat"), "n prediction_error_bound", &bound)?;
        }
    }
    dir.json(
        "summary.json",
        &json!({
            "c_lower": res.c_lower,
            "c_upper": res.c_upper,
            "slopes": res.slopes,
            "monotone_in_n": res.monotone_in_n,
            "monotone_in_r": res.monotone_in_r,
            "prop1_all_pass": res.cells.iter().all(|c| c.prop1_verdict.passed()),
            "thm3_all_pass": res.cells.iter().all(|c| c.thm3.verdict.passed()),
        }),
    )?;
    dir.manifest(&Manifest::new("rate-study", section_toml("rate_study", None, rs), rs.seed))?;
    if reps.partial {
        return Err(CliError::Partial("some replications failed; see the error column of replications.csv".into()));
    }
    Ok(())
}

pub fn misspec(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mc = &cfg.misspec;
    mc.validate()?;
    let res = run_misspec_study(mc)?;
    let dir = OutDir::create(out)?;

    let mut levels = Table::new(&[
        "n", "x_frob", "tau", "b_bar_rank", "b_bar_frob", "kl_floor", "renyi_floor", "r_n", "thm2_rhs", "cor2_rhs",
        "post_renyi_mean", "post_renyi_se", "pred_err_mean", "pred_err_se", "thm2_fraction", "cor2_fraction",
        "solver_grad_norm", "solver_iterations", "solver_max_restart_distance", "solver_multistart_agrees",
    ]);
    for l in &res.levels {
        let mut r = row![l.n, l.x_frob, l.tau, l.b_bar_rank, l.b_bar_frob, l.kl_floor, l.renyi_floor, l.r_n, l.thm2_rhs, l.cor2_rhs];
        r.extend(ms(&l.post_renyi));
        r.extend(ms(&l.pred_err));
        r.extend(row![
            l.thm2_fraction,
            l.cor2_fraction,
            l.solver.grad_norm,
            l.solver.iterations,
            l.solver.max_restart_distance,
            l.solver.multistart_agrees
        ]);
        levels.push(r);
    }
    dir.table("levels.csv", &levels)?;

    let mut reps =
        Table::new(&["n", "rep", "post_renyi", "pred_err", "acceptance", "thm2_satisfied", "cor2_satisfied", "error"]);
    for r in &res.replications {
        reps.push(row![r.n, r.rep, r.post_renyi, r.pred_err, r.acceptance, r.thm2_satisfied, r.cor2_satisfied, r.error.clone()]);
    }
    reps.partial = res.replications.iter().any(|r| r.error.is_some());
    dir.table("replications.csv", &reps)?;

    write_matrix_csv(&dir.path("b0.csv"), &res.b0, None)?;
    write_matrix_csv(&dir.path("bbar.csv"), &res.primary().solver.b_bar, None)?;
    let by_n = |f: fn(&frrr::experiments::MisspecLevel) -> f64| -> Vec<(f64, f64)> {
        res.levels.iter().map(|l| (l.n as f64, f(l))).collect()
    };
    dir.xy("post_renyi.dat", "n mean_posterior_renyi", &by_n(|l| l.post_renyi.mean))?;
    dir.xy("renyi_floor.dat", "n renyi_floor", &by_n(|l| l.renyi_floor))?;
    dir.xy("thm2_rhs.dat", "n oracle_inequality_bound", &by_n(|l| l.thm2_rhs))?;
    let p = res.primary();
    dir.json(
        "summary.json",
        &json!({
            "true_family": res.true_family.name(),
            "fitted_family": res.fitted_family.name(),
            "kl_floor": p.kl_floor,
            "renyi_floor": p.renyi_floor,
            "thm2_rhs": p.thm2_rhs,
            "thm2_fraction": p.thm2_fraction,
            "cor2_rhs": p.cor2_rhs,
            "cor2_fraction": p.cor2_fraction,
            "solver": {
                "grad_norm": p.solver.grad_norm,
                "converged": p.solver.converged,
                "multistart_agrees": p.solver.multistart_agrees,
                "max_restart_distance": p.solver.max_restart_distance,
                "objective_monotone": p.solver.objective_monotone,
            },
            "plateau_above_floor": res.plateau_above_floor,
            "decays_slower_than_inverse_n": res.decays_slower_than_inverse_n,
            "final_excess_ratio": res.final_excess_ratio,
        }),
    )?;
    dir.manifest(&Manifest::new("misspec", section_toml("misspec", None, mc), mc.seed))?;
    if reps.partial {
        return Err(CliError::Partial("some replications failed; see the error column of replications.csv".into()));
    }
    Ok(())
}
