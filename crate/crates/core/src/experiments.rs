//! Monte Carlo harness: lemma sweeps, rate studies and the misspecification
//! study.
//!
//! Expectations over data are replaced by averages over R replications and
//! posterior integrals by averages over retained chain samples, so a bound
//! can fail through sampler error alone. Near misses (within 10 %) are
//! reported separately from clean passes.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::divergence::{
    c_alpha, divergence_report, kl_total, lemma_bounds, log_ratio_second_moment, misspecified_log_ratio_mean,
    rate_formulas, renyi_total, RateInputs,
};
use crate::error::{Error, Result};
use crate::model::{Dataset, FamilyId, FamilySpec};
use crate::posterior::{
    default_step_size, effective_rank, likelihood_mode, posterior_mean, run_sampler, Algorithm, Chain,
    FractionalConfig, Init,
};
use crate::prior::{PriorConfig, TauPreset};
use crate::scalar::{sigmoid, softplus};
use crate::simulate::{
    calibrate_scale, compute_kappa, generate_dataset_with, make_design, make_low_rank_truth, prediction_error,
    DesignMode, SyntheticTruth,
};

/// Relative slack under which a failed comparison counts as a near miss.
pub const NEAR_MISS: f64 = 0.10;

/// Independent RNG for `stream` under a master seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn theta_matrix(fam: &FamilySpec<f64>, x: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    (x * b).map(|e| fam.theta_from_eta(e))
}

// ---------------------------------------------------------------------------
// Lemma sweeps

/// One lemma comparison. `exact` must be ≤ `bound` for upper-bound lemmas and
/// ≥ `bound` for the lower-bound lemma; `satisfied` already accounts for the
/// direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub trial: usize,
    pub lemma: String,
    pub alpha: Option<f64>,
    pub exact: f64,
    pub bound: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaTally {
    pub lemma: String,
    pub alpha: Option<f64>,
    pub trials: usize,
    pub violations: usize,
    /// Largest exact/bound (upper lemmas) or bound/exact (lower lemma) over
    /// trials with a nonzero denominator.
    pub worst_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub family: FamilyId,
    pub rows: Vec<BoundRow>,
}

/// Lemma names as they appear in reports. `renyi_lower` is the bound exactly
/// as printed; `renyi_lower_scaled` is the α-scaled version that actually
/// holds for α < 1.
pub const LEMMAS: [&str; 5] = ["kl_upper", "renyi_lower", "renyi_lower_scaled", "second_moment", "misspecified"];

/// Relative tolerance for lemma comparisons that can hold with equality.
pub const ROUNDING: f64 = 1e-12;

pub const LEMMA_ALPHAS: [f64; 3] = [0.25, 0.5, 0.75];

impl BoundReport {
    pub fn tallies(&self) -> Vec<LemmaTally> {
        let mut out: Vec<LemmaTally> = Vec::new();
        for row in &self.rows {
            let idx = match out.iter().position(|t| t.lemma == row.lemma && t.alpha == row.alpha) {
                Some(i) => i,
                None => {
                    out.push(LemmaTally {
                        lemma: row.lemma.clone(),
                        alpha: row.alpha,
                        trials: 0,
                        violations: 0,
                        worst_ratio: 0.0,
                    });
                    out.len() - 1
                }
            };
            let t = &mut out[idx];
            t.trials += 1;
            t.violations += usize::from(!row.satisfied);
            let ratio = if row.lemma == "renyi_lower" || row.lemma == "renyi_lower_scaled" {
                if row.exact > 0.0 {
                    row.bound / row.exact
                } else {
                    0.0
                }
            } else if row.bound > 0.0 {
                row.exact / row.bound
            } else {
                0.0
            };
            t.worst_ratio = t.worst_ratio.max(ratio);
        }
        out
    }

    /// Fraction of satisfied rows, optionally restricted to one lemma.
    pub fn satisfied_fraction(&self, lemma: Option<&str>) -> f64 {
        let rows: Vec<&BoundRow> = self.rows.iter().filter(|r| lemma.is_none_or(|l| r.lemma == l)).collect();
        if rows.is_empty() {
            return 1.0;
        }
        rows.iter().filter(|r| r.satisfied).count() as f64 / rows.len() as f64
    }
}

/// Random parameter matrix: linear predictors uniform on [−4, 4] mapped
/// through the family link and clipped into Θ.
fn random_theta<R: Rng + ?Sized>(fam: &FamilySpec<f64>, n: usize, q: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(n, q, |_, _| fam.theta_from_eta(rng.random_range(-4.0..=4.0)))
}

/// Checks the four divergence lemmas on `trials` random clipped pairs of
/// small n×q parameter matrices. Every tenth trial uses identical matrices.
///
/// Needs finite C_U on Θ; the misspecified lemma is skipped when U_1 is
/// infinite.
pub fn verify_divergence_bounds<R: Rng + ?Sized>(
    fam: &FamilySpec<f64>,
    trials: usize,
    rng: &mut R,
) -> Result<BoundReport> {
    let bounds = fam.bounds();
    bounds.c_upper()?;
    let mut rows = Vec::with_capacity(trials * 9);
    for trial in 0..trials {
        let n = rng.random_range(1..=4);
        let q = rng.random_range(1..=3);
        let theta = random_theta(fam, n, q, rng);
        let zeta = if trial % 10 == 0 { theta.clone() } else { random_theta(fam, n, q, rng) };
        let theta0 = random_theta(fam, n, q, rng);
        let nq = (n * q) as f64;
        let lb = lemma_bounds(fam, &theta, &zeta)?;
        let mut push = |lemma: &str, alpha: Option<f64>, exact: f64, bound: f64, upper: bool| {
            // Some lemmas hold with equality (Gaussian KL), so allow rounding.
            let slack = ROUNDING * exact.abs().max(bound.abs());
            let satisfied = if upper { exact <= bound + slack } else { exact >= bound - slack };
            rows.push(BoundRow { trial, lemma: lemma.to_string(), alpha, exact, bound, satisfied });
        };

        let kl = kl_total(fam, &theta, &zeta)? / nq;
        push("kl_upper", None, kl, lb.kl_upper, true);
        for al in LEMMA_ALPHAS {
            let d = renyi_total(fam, &theta, &zeta, al)? / nq;
            push("renyi_lower", Some(al), d, lb.renyi_lower, false);
            push("renyi_lower_scaled", Some(al), d, lb.renyi_lower_scaled(al), false);
        }
        let mut m2 = 0.0;
        for (t, z) in theta.iter().zip(zeta.iter()) {
            m2 += log_ratio_second_moment(fam, *t, *z)?;
        }
        push("second_moment", None, m2 / nq, lb.second_moment_upper, true);
        if let Some(bound) = lb.misspecified_upper {
            let mut m = 0.0;
            for ((t0, tb), z) in theta0.iter().zip(theta.iter()).zip(zeta.iter()) {
                m += misspecified_log_ratio_mean(fam, fam.b_prime(*t0)?, *tb, *z)?;
            }
            push("misspecified", None, m / nq, bound, true);
        }
    }
    Ok(BoundReport { family: fam.id(), rows })
}

// ---------------------------------------------------------------------------
// Rate study

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub algorithm: Algorithm,
    pub n_steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Start from the likelihood maximiser instead of B = 0.
    pub init_at_mode: bool,
    pub adapt: bool,
    pub target_accept: f64,
    /// Initial step size; `None` picks 0.5 for the metric sampler and the
    /// curvature-based default otherwise.
    pub step_size: Option<f64>,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            algorithm: Algorithm::MetricMala,
            n_steps: 2000,
            burn_in: 500,
            thin: 5,
            init_at_mode: true,
            adapt: true,
            target_accept: 0.5,
            step_size: None,
        }
    }
}

/// Runs the sampler on `data` with the given settings.
pub fn fit_chain(
    data: &Dataset<f64>,
    prior: &PriorConfig<f64>,
    alpha: f64,
    settings: &SamplerSettings,
    seed: u64,
) -> Result<Chain<f64>> {
    let init = if settings.init_at_mode {
        Init::Given(likelihood_mode(data, 1e-6, 100)?)
    } else {
        Init::Zero
    };
    let at = match &init {
        Init::Given(b) => b.clone(),
        Init::Zero => DMatrix::zeros(data.p(), data.q()),
    };
    let step_size = match (settings.step_size, settings.algorithm) {
        (Some(s), _) => s,
        (None, Algorithm::MetricMala) => 0.5,
        (None, _) => default_step_size(data, prior, alpha, &at)?,
    };
    let cfg = FractionalConfig {
        alpha,
        step_size,
        n_steps: settings.n_steps,
        burn_in: settings.burn_in,
        thin: settings.thin,
        seed,
        algorithm: settings.algorithm,
        init,
        adapt: settings.adapt,
        target_accept: settings.target_accept,
        log_post_floor: -1e30,
    };
    run_sampler(data, prior, &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateStudyConfig {
    pub family: FamilySpec<f64>,
    pub p: usize,
    pub q: usize,
    pub ns: Vec<usize>,
    pub ranks: Vec<usize>,
    pub alphas: Vec<f64>,
    pub replications: usize,
    pub design: DesignMode,
    pub tau_preset: TauPreset,
    /// Truth scale is set so that `eta_coverage` of the predictors satisfy
    /// |η| ≤ `eta_bound` on a reference design.
    pub eta_bound: f64,
    pub eta_coverage: f64,
    pub sampler: SamplerSettings,
    /// Retained samples (evenly spaced) used for posterior-averaged
    /// divergences.
    pub divergence_samples: usize,
    pub seed: u64,
}

impl Default for RateStudyConfig {
    fn default() -> Self {
        RateStudyConfig::gaussian_default()
    }
}

impl RateStudyConfig {
    /// Gaussian p=8, q=6, r=2, α=0.5 over n ∈ {100, …, 1600} with R=20.
    pub fn gaussian_default() -> Self {
        RateStudyConfig {
            family: FamilySpec::gaussian(1.0).expect("valid"),
            p: 8,
            q: 6,
            ns: vec![100, 200, 400, 800, 1600],
            ranks: vec![2],
            alphas: vec![0.5],
            replications: 20,
            design: DesignMode::Iid,
            tau_preset: TauPreset::Theorem1,
            eta_bound: 3.0,
            eta_coverage: 0.99,
            sampler: SamplerSettings::default(),
            divergence_samples: 50,
            seed: 20240601,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.ranks.is_empty() || self.alphas.is_empty() {
            return Err(Error::invalid("study grids must be nonempty"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications must be positive"));
        }
        if self.p == 0 || self.q == 0 {
            return Err(Error::invalid("p and q must be positive"));
        }
        if let Some(r) = self.ranks.iter().find(|&&r| r > self.p.min(self.q)) {
            return Err(Error::invalid(format!("rank {r} exceeds min(p, q)")));
        }
        if let Some(a) = self.alphas.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {a}")));
        }
        if self.tau_preset == TauPreset::Manual {
            return Err(Error::invalid("rate studies need a formula-based tau preset"));
        }
        if self.ns.contains(&0) {
            return Err(Error::invalid("sample sizes must be positive"));
        }
        let b = self.family.bounds();
        b.c_lower()?;
        b.c_upper()?;
        Ok(())
    }

    /// The (n, r, α) cells in grid order: α outermost, then r, then n.
    pub fn cells(&self) -> Vec<(usize, usize, f64)> {
        let mut v = Vec::new();
        for &al in &self.alphas {
            for &r in &self.ranks {
                for &n in &self.ns {
                    v.push((n, r, al));
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub cell: usize,
    pub n: usize,
    pub r: usize,
    pub alpha: f64,
    pub rep: usize,
    /// (1/nq)‖X(B̂ − B₀)‖²_F for the posterior mean B̂.
    pub pred_err: f64,
    /// ∫ (1/nq)‖X(B − B₀)‖²_F over retained samples.
    pub post_pred_err: f64,
    /// ‖B̂ − B₀‖²_F
    pub est_err: f64,
    /// ∫ ‖B − B₀‖²_F over retained samples.
    pub post_est_err: f64,
    /// ∫ D_α(P_B, P_B₀) (averaged convention) over the divergence subsample.
    pub post_renyi: f64,
    pub post_kl: f64,
    pub post_hellinger_sq: f64,
    /// ∫ (upper Le Cam bound on d_TV)² over the subsample.
    pub post_tv_sq_upper: f64,
    pub acceptance: f64,
    pub final_step_size: f64,
    pub effective_rank: usize,
    pub clip_events: usize,
    pub error: Option<String>,
}

impl ReplicationRow {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return MeanSe { mean: f64::NAN, se: f64::NAN };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        MeanSe { mean, se }
    }
}

/// Outcome of one empirical-versus-theoretical comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    NearMiss,
    Fail,
    /// The statement is trivially true (e.g. a probability bound ≤ 0).
    Vacuous,
}

impl Verdict {
    fn upper(lhs: f64, rhs: f64) -> Self {
        if lhs <= rhs {
            Verdict::Pass
        } else if lhs <= rhs * (1.0 + NEAR_MISS) {
            Verdict::NearMiss
        } else {
            Verdict::Fail
        }
    }

    pub fn passed(self) -> bool {
        matches!(self, Verdict::Pass | Verdict::Vacuous)
    }
}

/// Probability statement P[lhs ≤ threshold] ≥ required, checked by frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyCheck {
    pub threshold: f64,
    pub required: f64,
    pub frequency: f64,
    pub verdict: Verdict,
}

impl FrequencyCheck {
    fn new(values: &[f64], threshold: f64, required: f64) -> Self {
        let hits = values.iter().filter(|&&v| v <= threshold).count();
        let frequency = if values.is_empty() { f64::NAN } else { hits as f64 / values.len() as f64 };
        let verdict = if required <= 0.0 {
            Verdict::Vacuous
        } else if frequency >= required {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        FrequencyCheck { threshold, required, frequency, verdict }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: usize,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub alpha: f64,
    pub replications_ok: usize,
    pub failures: Vec<String>,
    pub tau: f64,
    pub x_frob: f64,
    pub b0_frob: f64,
    pub kappa: f64,
    pub pred_err: MeanSe,
    pub post_pred_err: MeanSe,
    pub est_err: MeanSe,
    pub post_renyi: MeanSe,
    pub post_kl: MeanSe,
    pub post_hellinger_sq: MeanSe,
    pub post_tv_sq_upper: MeanSe,
    pub acceptance: MeanSe,
    /// ε_n of the expectation theorem.
    pub epsilon_n: f64,
    /// (1+α)/(1−α)·ε_n, bound on E∫D_α.
    pub thm1_bound: f64,
    pub thm1_verdict: Verdict,
    /// 2a(1+α)/(C_L(1−α))·ε_n, bound on the mean prediction error.
    pub prop1_bound: f64,
    pub prop1_verdict: Verdict,
    /// ε_n of the concentration theorem.
    pub epsilon_n_thm3: f64,
    /// P[∫D_α ≤ 2(1+α)/(1−α)·ε_n] ≥ 1 − 2/(nε_n).
    pub thm3: FrequencyCheck,
    /// P[∫(1/nq)‖X(B−B₀)‖² ≤ 4a(1+α)/(C_L(1−α))·ε_n] ≥ 1 − 2/(nε_n).
    pub prop2: FrequencyCheck,
    pub epsilon_prime_n: f64,
    /// P[∫‖B−B₀‖² ≤ 4a(1+α)/(κ²C_L(1−α))·ε′_n] ≥ 1 − 2/(nε_n); `None`
    /// when κ = 0.
    pub cor4: Option<FrequencyCheck>,
}

impl CellSummary {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub r: usize,
    pub alpha: f64,
    pub points: usize,
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    /// 95 % t-interval; NaN with fewer than three points.
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Least squares of log y on log x with a Student-t interval for the slope.
pub fn fit_log_log_slope(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("slope fit needs at least two paired points"));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid("slope fit needs positive finite values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("slope fit needs at least two distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    if lx.len() < 3 {
        return Ok((slope, intercept, f64::NAN, f64::NAN, f64::NAN));
    }
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let df = m - 2.0;
    let se = (rss / df / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(e.to_string()))?.inverse_cdf(0.975);
    Ok((slope, intercept, se, slope - t * se, slope + t * se))
}

/// Adjacent-pair monotonicity check up to `k` combined standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCheck {
    pub label: String,
    /// (grid value, mean, se) in grid order.
    pub points: Vec<(usize, f64, f64)>,
    pub holds: bool,
}

fn monotone(label: String, points: Vec<(usize, f64, f64)>, increasing: bool, k: f64) -> MonotoneCheck {
    let holds = points.windows(2).all(|w| {
        let slack = k * (w[0].2.powi(2) + w[1].2.powi(2)).sqrt();
        if increasing {
            w[1].1 >= w[0].1 - slack
        } else {
            w[1].1 <= w[0].1 + slack
        }
    });
    MonotoneCheck { label, points, holds }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudyResult {
    pub config: RateStudyConfig,
    pub c_lower: f64,
    pub c_upper: f64,
    pub replications: Vec<ReplicationRow>,
    pub cells: Vec<CellSummary>,
    /// log mean prediction error against log n, per (r, α).
    pub slopes: Vec<SlopeFit>,
    /// Mean prediction error nonincreasing in n (per r, α), up to 2 SE.
    pub monotone_in_n: Vec<MonotoneCheck>,
    /// Mean prediction error nondecreasing in r (per n, α), up to 2 SE.
    pub monotone_in_r: Vec<MonotoneCheck>,
}

impl RateStudyResult {
    pub fn cell(&self, n: usize, r: usize, alpha: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.n == n && c.r == r && c.alpha == alpha)
    }
}

/// Unit-scale rank-r truth for the study, calibrated on a reference design
/// so the same B₀ is used at every n.
fn study_truth(cfg: &RateStudyConfig, r: usize) -> Result<SyntheticTruth<f64>> {
    let mut rng = stream_rng(cfg.seed, 1_000_000 + r as u64);
    let mut t = make_low_rank_truth(cfg.p, cfg.q, r, 1.0, &mut rng)?;
    if r > 0 {
        let n_ref = cfg.ns.iter().copied().max().unwrap_or(1).max(2000);
        let x_ref = make_design(n_ref, cfg.p, cfg.design, &mut rng)?;
        let s = calibrate_scale(&x_ref, &t.b0, cfg.eta_bound, cfg.eta_coverage)?;
        t.b0 *= s;
        t.scale = s;
    }
    Ok(t)
}

struct CellSetup {
    x: DMatrix<f64>,
    truth: SyntheticTruth<f64>,
    prior: PriorConfig<f64>,
}

fn replicate(
    cfg: &RateStudyConfig,
    cell: usize,
    (n, r, alpha): (usize, usize, f64),
    setup: &CellSetup,
    rep: usize,
) -> ReplicationRow {
    let mut row = ReplicationRow {
        cell,
        n,
        r,
        alpha,
        rep,
        pred_err: f64::NAN,
        post_pred_err: f64::NAN,
        est_err: f64::NAN,
        post_est_err: f64::NAN,
        post_renyi: f64::NAN,
        post_kl: f64::NAN,
        post_hellinger_sq: f64::NAN,
        post_tv_sq_upper: f64::NAN,
        acceptance: f64::NAN,
        final_step_size: f64::NAN,
        effective_rank: 0,
        clip_events: 0,
        error: None,
    };
    if let Err(e) = replicate_into(cfg, cell, alpha, setup, rep, &mut row) {
        row.error = Some(e.to_string());
    }
    row
}

fn replicate_into(
    cfg: &RateStudyConfig,
    cell: usize,
    alpha: f64,
    setup: &CellSetup,
    rep: usize,
    row: &mut ReplicationRow,
) -> Result<()> {
    let mut rng = stream_rng(cfg.seed, ((cell as u64 + 1) << 20) + rep as u64);
    let mut truth = setup.truth.clone();
    let fam = cfg.family;
    let data = generate_dataset_with(&setup.x, &mut truth, &fam, &fam, &mut rng)?;
    row.clip_events = truth.theta_clip_events;
    let chain = fit_chain(&data, &setup.prior, alpha, &cfg.sampler, rng.random())?;
    let b0 = &truth.b0;
    let x = &setup.x;
    let bhat = posterior_mean(&chain)?;
    row.pred_err = prediction_error(x, &bhat, b0)?;
    row.est_err = (&bhat - b0).norm_squared();
    let mut pp = 0.0;
    let mut pe = 0.0;
    for s in &chain.samples {
        pp += prediction_error(x, s, b0)?;
        pe += (s - b0).norm_squared();
    }
    let m = chain.samples.len() as f64;
    row.post_pred_err = pp / m;
    row.post_est_err = pe / m;

    let theta0 = theta_matrix(&fam, x, b0);
    let k = cfg.divergence_samples.clamp(1, chain.samples.len());
    let (mut dr, mut dk, mut dh, mut dt) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..k {
        let s = &chain.samples[i * chain.samples.len() / k];
        let rep = divergence_report(&fam, &theta_matrix(&fam, x, s), &theta0, &[alpha])?;
        dr += rep.renyi[0].avg;
        dk += rep.kl_avg;
        dh += rep.hellinger_sq_avg;
        dt += rep.tv_upper_avg * rep.tv_upper_avg;
    }
    let k = k as f64;
    row.post_renyi = dr / k;
    row.post_kl = dk / k;
    row.post_hellinger_sq = dh / k;
    row.post_tv_sq_upper = dt / k;
    row.acceptance = chain.acceptance_rate;
    row.final_step_size = chain.final_step_size;
    row.effective_rank = effective_rank(&bhat, 0.1)?;
    Ok(())
}

fn summarize_cell(
    cfg: &RateStudyConfig,
    cell: usize,
    (n, r, alpha): (usize, usize, f64),
    setup: &CellSetup,
    rows: &[&ReplicationRow],
    c_lower: f64,
) -> Result<CellSummary> {
    let fam = cfg.family;
    let bounds = fam.bounds();
    let a = fam.dispersion();
    let ok: Vec<&&ReplicationRow> = rows.iter().filter(|r| r.ok()).collect();
    let failures = rows.iter().filter_map(|r| r.error.clone().map(|e| format!("rep {}: {e}", r.rep))).collect();
    let col = |f: fn(&ReplicationRow) -> f64| -> Vec<f64> { ok.iter().map(|r| f(r)).collect() };
    let x_frob = setup.x.norm();
    let b0_frob = setup.truth.b0.norm();
    let rates = rate_formulas(RateInputs {
        n,
        p: cfg.p,
        q: cfg.q,
        r,
        a,
        c_u: bounds.c_upper,
        u1: bounds.u1,
        x_frob,
        b_frob: b0_frob,
    })?;
    let eps1 = rates.epsilon_n_thm1.require("C_U")?;
    let eps3 = rates.epsilon_n_thm3.require("C_U")?;
    let epsp = rates.epsilon_prime_n.require("C_U")?;
    let kappa = compute_kappa(&setup.x);
    let ratio = (1.0 + alpha) / (1.0 - alpha);
    let pred = MeanSe::of(&col(|r| r.pred_err));
    let renyi_vals = col(|r| r.post_renyi);
    let renyi = MeanSe::of(&renyi_vals);
    let thm1_bound = ratio * eps1;
    let prop1_bound = 2.0 * a * ratio / c_lower * eps1;
    let required = 1.0 - 2.0 / (n as f64 * eps3);
    let thm3 = FrequencyCheck::new(&renyi_vals, 2.0 * ratio * eps3, required);
    let prop2 = FrequencyCheck::new(&col(|r| r.post_pred_err), 4.0 * a * ratio / c_lower * eps3, required);
    let cor4 = (kappa > 0.0).then(|| {
        FrequencyCheck::new(&col(|r| r.post_est_err), 4.0 * a * ratio / (kappa * kappa * c_lower) * epsp, required)
    });
    Ok(CellSummary {
        cell,
        n,
        p: cfg.p,
        q: cfg.q,
        r,
        alpha,
        replications_ok: ok.len(),
        failures,
        tau: setup.prior.tau(),
        x_frob,
        b0_frob,
        kappa,
        pred_err: pred,
        post_pred_err: MeanSe::of(&col(|r| r.post_pred_err)),
        est_err: MeanSe::of(&col(|r| r.est_err)),
        post_renyi: renyi,
        post_kl: MeanSe::of(&col(|r| r.post_kl)),
        post_hellinger_sq: MeanSe::of(&col(|r| r.post_hellinger_sq)),
        post_tv_sq_upper: MeanSe::of(&col(|r| r.post_tv_sq_upper)),
        acceptance: MeanSe::of(&col(|r| r.acceptance)),
        epsilon_n: eps1,
        thm1_bound,
        thm1_verdict: Verdict::upper(renyi.mean, thm1_bound),
        prop1_bound,
        prop1_verdict: Verdict::upper(pred.mean, prop1_bound),
        epsilon_n_thm3: eps3,
        thm3,
        prop2,
        epsilon_prime_n: epsp,
        cor4,
    })
}

/// Runs every (cell, replication) pair concurrently: generate Y, sample the
/// fractional posterior, and compare the error averages with the theorem
/// right-hand sides. A failing replication is recorded in its cell and does
/// not abort the study.
pub fn run_rate_study(cfg: &RateStudyConfig) -> Result<RateStudyResult> {
    cfg.validate()?;
    let bounds = cfg.family.bounds();
    let c_lower = bounds.c_lower()?;
    let c_upper = bounds.c_upper()?;
    let cells = cfg.cells();
    let a = cfg.family.dispersion();

    let mut truths = Vec::new();
    for &r in &cfg.ranks {
        truths.push((r, study_truth(cfg, r)?));
    }
    let setups: Vec<CellSetup> = cells
        .iter()
        .enumerate()
        .map(|(ci, &(n, r, _))| {
            // The design depends on n only, so cells sharing n share X.
            let n_idx = cfg.ns.iter().position(|&v| v == n).unwrap_or(ci) as u64;
            let mut rng = stream_rng(cfg.seed, 2_000_000 + n_idx);
            let x = make_design(n, cfg.p, cfg.design, &mut rng)?;
            let truth = truths.iter().find(|t| t.0 == r).map(|t| t.1.clone()).expect("truth per rank");
            let prior = PriorConfig::from_preset(cfg.tau_preset, n, cfg.p, cfg.q, a, x.norm())?;
            Ok(CellSetup { x, truth, prior })
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> =
        (0..cells.len()).flat_map(|c| (0..cfg.replications).map(move |k| (c, k))).collect();
    let replications: Vec<ReplicationRow> =
        jobs.par_iter().map(|&(c, k)| replicate(cfg, c, cells[c], &setups[c], k)).collect();

    let mut summaries = Vec::new();
    for (ci, &cell) in cells.iter().enumerate() {
        let rows: Vec<&ReplicationRow> = replications.iter().filter(|r| r.cell == ci).collect();
        summaries.push(summarize_cell(cfg, ci, cell, &setups[ci], &rows, c_lower)?);
    }

    let mut slopes = Vec::new();
    let mut monotone_in_n = Vec::new();
    for &al in &cfg.alphas {
        for &r in &cfg.ranks {
            let pts: Vec<&CellSummary> =
                summaries.iter().filter(|c| c.r == r && c.alpha == al && c.replications_ok > 0).collect();
            monotone_in_n.push(monotone(
                format!("r={r},alpha={al}"),
                pts.iter().map(|c| (c.n, c.pred_err.mean, c.pred_err.se)).collect(),
                false,
                2.0,
            ));
            let xs: Vec<f64> = pts.iter().map(|c| c.n as f64).collect();
            let ys: Vec<f64> = pts.iter().map(|c| c.pred_err.mean).collect();
            if let Ok((slope, intercept, se, lo, hi)) = fit_log_log_slope(&xs, &ys) {
                slopes.push(SlopeFit {
                    r,
                    alpha: al,
                    points: xs.len(),
                    slope,
                    intercept,
                    slope_se: se,
                    ci_low: lo,
                    ci_high: hi,
                });
            }
        }
    }
    let mut monotone_in_r = Vec::new();
    if cfg.ranks.len() > 1 {
        let mut ranks = cfg.ranks.clone();
        ranks.sort_unstable();
        for &al in &cfg.alphas {
            for &n in &cfg.ns {
                let pts = ranks
                    .iter()
                    .filter_map(|&r| summaries.iter().find(|c| c.n == n && c.r == r && c.alpha == al))
                    .filter(|c| c.replications_ok > 0)
                    .map(|c| (c.r, c.pred_err.mean, c.pred_err.se))
                    .collect();
                monotone_in_r.push(monotone(format!("n={n},alpha={al}"), pts, true, 2.0));
            }
        }
    }

    Ok(RateStudyResult {
        config: cfg.clone(),
        c_lower,
        c_upper,
        replications,
        cells: summaries,
        slopes,
        monotone_in_n,
        monotone_in_r,
    })
}

/// Posterior-averaged Hellinger and total-variation quantities of one cell
/// against c_α·ε_n and 2(1+α)/(α(1−α))·ε_n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HellingerRow {
    pub cell: usize,
    pub n: usize,
    pub r: usize,
    pub alpha: f64,
    pub c_alpha: f64,
    pub hellinger_lhs: f64,
    pub hellinger_bound: f64,
    pub hellinger_verdict: Verdict,
    /// Uses the upper Le Cam bound on d_TV, so a pass is conservative.
    pub tv_sq_lhs: f64,
    pub tv_sq_bound: f64,
    pub tv_verdict: Verdict,
}

pub fn hellinger_consistency_check(study: &RateStudyResult) -> Result<Vec<HellingerRow>> {
    study
        .cells
        .iter()
        .map(|c| {
            let ca = c_alpha(c.alpha)?;
            let hb = ca * c.epsilon_n;
            let tb = 2.0 * (1.0 + c.alpha) / (c.alpha * (1.0 - c.alpha)) * c.epsilon_n;
            Ok(HellingerRow {
                cell: c.cell,
                n: c.n,
                r: c.r,
                alpha: c.alpha,
                c_alpha: ca,
                hellinger_lhs: c.post_hellinger_sq.mean,
                hellinger_bound: hb,
                hellinger_verdict: Verdict::upper(c.post_hellinger_sq.mean, hb),
                tv_sq_lhs: c.post_tv_sq_upper.mean,
                tv_sq_bound: tb,
                tv_verdict: Verdict::upper(c.post_tv_sq_upper.mean, tb),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// KL minimiser under misspecification

fn check_bernoulli_pair(truth: &FamilySpec<f64>, fitted: &FamilySpec<f64>) -> Result<()> {
    use crate::model::Distn;
    if truth.id().distribution() != Distn::Bernoulli || fitted.id().distribution() != Distn::Bernoulli {
        return Err(Error::Unsupported(format!(
            "the KL minimiser needs Bernoulli laws on both sides, got {} and {}",
            truth.id(),
            fitted.id()
        )));
    }
    Ok(())
}

/// Per-cell KL(P_true ‖ P_fitted) between Bernoulli laws with natural
/// parameters θ₀ and θ: softplus(θ) − softplus(θ₀) − σ(θ₀)(θ − θ₀).
fn bernoulli_kl(theta0: f64, theta: f64) -> f64 {
    (softplus(theta) - softplus(theta0) - sigmoid(theta0) * (theta - theta0)).max(0.0)
}

/// D_α(P_θ ‖ P_ζ) between Bernoulli laws, evaluated without domain checks.
fn bernoulli_renyi(theta: f64, zeta: f64, alpha: f64) -> f64 {
    let m = alpha * theta + (1.0 - alpha) * zeta;
    ((alpha * softplus(theta) + (1.0 - alpha) * softplus(zeta) - softplus(m)) / (1.0 - alpha)).max(0.0)
}

/// B ↦ (1/nq) Σ KL(P_{θ₀,ij} ‖ P_{θ(η_ij)}) for a fixed true parameter
/// matrix θ₀.
pub struct KlObjective<'a> {
    fitted: FamilySpec<f64>,
    x: &'a DMatrix<f64>,
    theta0: DMatrix<f64>,
}

impl<'a> KlObjective<'a> {
    pub fn new(
        true_family: &FamilySpec<f64>,
        true_b0: &DMatrix<f64>,
        fitted: &FamilySpec<f64>,
        x: &'a DMatrix<f64>,
    ) -> Result<Self> {
        check_bernoulli_pair(true_family, fitted)?;
        if x.ncols() != true_b0.nrows() {
            return Err(Error::shape(format!("X has {} columns, B₀ has {} rows", x.ncols(), true_b0.nrows())));
        }
        Ok(KlObjective { fitted: *fitted, x, theta0: theta_matrix(true_family, x, true_b0) })
    }

    pub fn theta0(&self) -> &DMatrix<f64> {
        &self.theta0
    }

    fn nq(&self) -> f64 {
        (self.theta0.nrows() * self.theta0.ncols()).max(1) as f64
    }

    pub fn value(&self, b: &DMatrix<f64>) -> f64 {
        let eta = self.x * b;
        let mut s = 0.0;
        for (e, t0) in eta.iter().zip(self.theta0.iter()) {
            s += bernoulli_kl(*t0, self.fitted.theta_from_eta(*e));
        }
        s / self.nq()
    }

    pub fn value_and_grad(&self, b: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let eta = self.x * b;
        let mut s = 0.0;
        let mut w = DMatrix::zeros(eta.nrows(), eta.ncols());
        for j in 0..eta.ncols() {
            for i in 0..eta.nrows() {
                let t0 = self.theta0[(i, j)];
                let (th, slope) = self.fitted.theta_and_slope(eta[(i, j)]);
                s += bernoulli_kl(t0, th);
                w[(i, j)] = (sigmoid(th) - sigmoid(t0)) * slope;
            }
        }
        let nq = self.nq();
        (s / nq, self.x.transpose() * w / nq)
    }

    /// D_α(P_{θ(XB)} ‖ P_{θ₀}), averaged over cells.
    pub fn renyi_to_truth(&self, b: &DMatrix<f64>, alpha: f64) -> f64 {
        let eta = self.x * b;
        let mut s = 0.0;
        for (e, t0) in eta.iter().zip(self.theta0.iter()) {
            s += bernoulli_renyi(self.fitted.theta_from_eta(*e), *t0, alpha);
        }
        s / self.nq()
    }
}

/// Best rank-r approximation by truncated SVD.
pub fn project_rank(b: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    if r >= b.nrows().min(b.ncols()) {
        return b.clone();
    }
    let svd = b.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut out = DMatrix::zeros(b.nrows(), b.ncols());
    for &k in idx.iter().take(r) {
        out += u.column(k) * vt.row(k) * svd.singular_values[k];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlSolverSettings {
    pub max_iter: usize,
    /// Stop when the (projected) gradient norm of the averaged objective
    /// falls below this value.
    pub grad_tol: f64,
    pub restarts: usize,
    /// When the objective stops decreasing at machine precision before
    /// reaching `grad_tol`, the point is still accepted if the gradient norm
    /// is below this value.
    pub stall_tol: f64,
    /// Solutions of different starts must agree to this Frobenius distance.
    pub agreement_tol: f64,
    pub seed: u64,
}

impl Default for KlSolverSettings {
    fn default() -> Self {
        KlSolverSettings {
            max_iter: 20_000,
            grad_tol: 1e-9,
            stall_tol: 1e-6,
            restarts: 10,
            agreement_tol: 1e-4,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlFit {
    pub b_bar: DMatrix<f64>,
    /// (1/nq) KL(P_B₀, P_B̄)
    pub kl: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective values along the iterations of the reported start.
    pub objective_monotone: bool,
    /// Objective at the start from (the rank projection of) B₀.
    pub kl_at_start: f64,
    /// Final objective of every random restart.
    pub restart_kl: Vec<f64>,
    /// max ‖B̄_k − B̄‖_F over restarts.
    pub max_restart_distance: f64,
    pub multistart_agrees: bool,
    pub rank: Option<usize>,
}

struct Descent {
    b: DMatrix<f64>,
    f: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
    monotone: bool,
}

/// Projected gradient descent with Barzilai–Borwein steps and Armijo
/// backtracking. Without a rank the projection is the identity and the
/// stationarity measure is the plain gradient norm.
fn descend(obj: &KlObjective<'_>, start: DMatrix<f64>, rank: Option<usize>, s: &KlSolverSettings) -> Descent {
    let proj = |b: &DMatrix<f64>| match rank {
        Some(r) => project_rank(b, r),
        None => b.clone(),
    };
    let mut b = proj(&start);
    let (mut f, mut g) = obj.value_and_grad(&b);
    let mut step = 1.0;
    let mut monotone = true;
    let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let mut stalled = 0;
    let stationarity = |b: &DMatrix<f64>, g: &DMatrix<f64>| -> f64 {
        match rank {
            None => g.norm(),
            Some(_) => (b - proj(&(b - g))).norm(),
        }
    };
    for it in 0..s.max_iter {
        let gn = stationarity(&b, &g);
        if gn < s.grad_tol {
            return Descent { b, f, grad_norm: gn, iterations: it, converged: true, monotone };
        }
        if let Some((pb, pg)) = &prev {
            let sk = &b - pb;
            let yk = &g - pg;
            let sy = sk.dot(&yk);
            if sy > 0.0 {
                step = (sk.norm_squared() / sy).clamp(1e-8, 1e8);
            }
        }
        let mut t = step;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = proj(&(&b - &g * t));
            let fc = obj.value(&cand);
            let dec = (&cand - &b).norm_squared() / t;
            if fc <= f - 1e-4 * dec || (fc <= f && dec == 0.0) {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((nb, nf)) = accepted else {
            let gn = stationarity(&b, &g);
            return Descent { b, f, grad_norm: gn, iterations: it, converged: gn < s.stall_tol, monotone };
        };
        if nf > f {
            monotone = false;
        }
        stalled = if f - nf <= f64::EPSILON * f.abs() { stalled + 1 } else { 0 };
        if stalled >= 50 {
            let gn = stationarity(&nb, &obj.value_and_grad(&nb).1);
            return Descent { b: nb, f: nf, grad_norm: gn, iterations: it + 1, converged: gn < s.stall_tol, monotone };
        }
        let (_, ng) = obj.value_and_grad(&nb);
        prev = Some((std::mem::replace(&mut b, nb), std::mem::replace(&mut g, ng)));
        f = nf;
        step = t;
    }
    let gn = stationarity(&b, &g);
    Descent { b, f, grad_norm: gn, iterations: s.max_iter, converged: gn < s.grad_tol, monotone }
}

/// B̄ = argmin_B (1/nq) KL(P_B₀ ‖ P_B), optionally over rank ≤ r, started
/// from (the projection of) B₀ and certified against random restarts.
pub fn fit_kl_minimizer(
    true_family: &FamilySpec<f64>,
    true_b0: &DMatrix<f64>,
    fitted: &FamilySpec<f64>,
    x: &DMatrix<f64>,
    rank: Option<usize>,
    settings: &KlSolverSettings,
) -> Result<KlFit> {
    let obj = KlObjective::new(true_family, true_b0, fitted, x)?;
    let start = match rank {
        Some(r) => project_rank(true_b0, r),
        None => true_b0.clone(),
    };
    let kl_at_start = obj.value(&start);
    let main = descend(&obj, start, rank, settings);
    let mut rng = stream_rng(settings.seed, 0);
    let spread = (true_b0.norm() / ((true_b0.len().max(1)) as f64).sqrt()).max(0.1);
    let mut restart_kl = Vec::new();
    let mut best = main;
    let mut sols: Vec<DMatrix<f64>> = Vec::new();
    for _ in 0..settings.restarts {
        let s0 = DMatrix::from_fn(true_b0.nrows(), true_b0.ncols(), |_, _| {
            spread * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let d = descend(&obj, s0, rank, settings);
        restart_kl.push(d.f);
        sols.push(d.b.clone());
        if d.f < best.f - 1e-12 && d.converged {
            best = d;
        }
    }
    let max_restart_distance = sols.iter().map(|s| (s - &best.b).norm()).fold(0.0, f64::max);
    let multistart_agrees = max_restart_distance < settings.agreement_tol;
    if !best.converged {
        return Err(Error::NonConvergence(format!(
            "KL minimiser stopped after {} iterations with gradient norm {:.3e}",
            best.iterations, best.grad_norm
        )));
    }
    Ok(KlFit {
        kl: best.f,
        grad_norm: best.grad_norm,
        iterations: best.iterations,
        converged: best.converged,
        objective_monotone: best.monotone,
        kl_at_start,
        restart_kl,
        max_restart_distance,
        multistart_agrees,
        rank,
        b_bar: best.b,
    })
}

// ---------------------------------------------------------------------------
// Misspecification study

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MisspecConfig {
    pub true_family: FamilySpec<f64>,
    pub fitted_family: FamilySpec<f64>,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    /// The main study runs at `ns[0]`; further entries feed the plateau check.
    pub ns: Vec<usize>,
    pub alpha: f64,
    pub replications: usize,
    pub design: DesignMode,
    pub eta_bound: f64,
    pub eta_coverage: f64,
    pub sampler: SamplerSettings,
    pub divergence_samples: usize,
    pub solver: KlSolverSettings,
    pub seed: u64,
}

impl Default for MisspecConfig {
    fn default() -> Self {
        MisspecConfig::probit_logit_default()
    }
}

impl MisspecConfig {
    /// Probit truth, logit fit on Θ = [−6, 6]; p=6, q=4, r=2, n=400, R=10.
    ///
    /// The truth is scaled so that 99 % of |η| ≤ 5: probit and logit
    /// laws are nearly indistinguishable for moderate η, and the wider range
    /// makes the KL floor large enough to be seen at desk-scale n.
    pub fn probit_logit_default() -> Self {
        MisspecConfig {
            true_family: FamilySpec::bernoulli_probit(),
            fitted_family: FamilySpec::bernoulli_logit().with_domain(-6.0, 6.0).expect("valid"),
            p: 6,
            q: 4,
            r: 2,
            ns: vec![400, 1600, 6400],
            alpha: 0.5,
            replications: 10,
            design: DesignMode::Iid,
            eta_bound: 5.0,
            eta_coverage: 0.99,
            sampler: SamplerSettings::default(),
            divergence_samples: 50,
            solver: KlSolverSettings::default(),
            seed: 31337,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_bernoulli_pair(&self.true_family, &self.fitted_family)?;
        if self.ns.is_empty() || self.ns.contains(&0) {
            return Err(Error::invalid("ns must be a nonempty list of positive sizes"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications must be positive"));
        }
        if self.r > self.p.min(self.q) {
            return Err(Error::invalid(format!("rank {} exceeds min(p, q)", self.r)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        let b = self.fitted_family.bounds();
        b.u1()?;
        b.c_upper()?;
        b.c_lower()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisspecReplication {
    pub n: usize,
    pub rep: usize,
    /// ∫ D_α(P_B, P_B₀) over the divergence subsample.
    pub post_renyi: f64,
    /// (1/nq)‖X(B̂ − B₀)‖²_F
    pub pred_err: f64,
    pub acceptance: f64,
    pub thm2_satisfied: bool,
    pub cor2_satisfied: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cor2Term {
    pub r: usize,
    pub b_bar_frob: f64,
    pub value: f64,
}

/// Per-n summary of the misspecified fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisspecLevel {
    pub n: usize,
    pub x_frob: f64,
    pub tau: f64,
    pub b_bar_rank: usize,
    pub b_bar_frob: f64,
    /// (1/nq) KL(P_B₀, P_B̄)
    pub kl_floor: f64,
    /// D_α(P_B̄, P_B₀), where the posterior should settle.
    pub renyi_floor: f64,
    pub r_n: f64,
    /// α/(1−α)·KL + (1+α)/(1−α)·r_n
    pub thm2_rhs: f64,
    /// min over r of the bracket, with the minimising r.
    pub cor2_rhs: f64,
    pub cor2_terms: Vec<Cor2Term>,
    pub post_renyi: MeanSe,
    pub pred_err: MeanSe,
    pub thm2_fraction: f64,
    pub cor2_fraction: f64,
    pub solver: KlFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisspecStudyResult {
    pub config: MisspecConfig,
    pub true_family: FamilyId,
    pub fitted_family: FamilyId,
    pub b0: DMatrix<f64>,
    pub levels: Vec<MisspecLevel>,
    pub replications: Vec<MisspecReplication>,
    /// Every level's mean ∫D_α stays at or above 0.9·D_α(P_B̄, P_B₀).
    pub plateau_above_floor: bool,
    /// n·mean ∫D_α is larger at the largest n than at the smallest, i.e. the
    /// divergence decays more slowly than the 1/n of a well-specified fit.
    pub decays_slower_than_inverse_n: bool,
    /// Mean ∫D_α at the largest n divided by its floor.
    pub final_excess_ratio: f64,
}

impl MisspecStudyResult {
    /// The level at the primary sample size.
    pub fn primary(&self) -> &MisspecLevel {
        &self.levels[0]
    }
}

pub fn run_misspec_study(cfg: &MisspecConfig) -> Result<MisspecStudyResult> {
    cfg.validate()?;
    let fitted = cfg.fitted_family;
    let bounds = fitted.bounds();
    let (c_l, c_u, u1) = (bounds.c_lower()?, bounds.c_upper()?, bounds.u1()?);
    let a = fitted.dispersion();
    let al = cfg.alpha;
    let (p, q) = (cfg.p, cfg.q);

    // Truth shared by every n, calibrated on a large reference design.
    let mut rng = stream_rng(cfg.seed, 1);
    let mut truth = make_low_rank_truth(p, q, cfg.r, 1.0, &mut rng)?;
    if cfg.r > 0 {
        let x_ref = make_design(cfg.ns.iter().copied().max().unwrap_or(1).max(2000), p, cfg.design, &mut rng)?;
        let s = calibrate_scale(&x_ref, &truth.b0, cfg.eta_bound, cfg.eta_coverage)?;
        truth.b0 *= s;
        truth.scale = s;
    }

    let mut levels = Vec::new();
    let mut all_reps = Vec::new();
    for (li, &n) in cfg.ns.iter().enumerate() {
        let mut xr = stream_rng(cfg.seed, 100 + li as u64);
        let x = make_design(n, p, cfg.design, &mut xr)?;
        let x_frob = x.norm();
        let nq = (n * q) as f64;
        let fit = fit_kl_minimizer(&cfg.true_family, &truth.b0, &fitted, &x, None, &cfg.solver)?;
        let obj = KlObjective::new(&cfg.true_family, &truth.b0, &fitted, &x)?;
        let b_bar_rank = effective_rank(&fit.b_bar, 1e-8).unwrap_or(0);
        let b_bar_frob = fit.b_bar.norm();
        let rates = rate_formulas(RateInputs {
            n,
            p,
            q,
            r: b_bar_rank,
            a,
            c_u: bounds.c_upper,
            u1: bounds.u1,
            x_frob,
            b_frob: b_bar_frob,
        })?;
        let r_n = rates.r_n.require("U_1")?;
        let thm2_rhs = al / (1.0 - al) * fit.kl + (1.0 + al) / (1.0 - al) * r_n;
        let renyi_floor = obj.renyi_to_truth(&fit.b_bar, al);

        // Oracle bracket of the estimation corollary, minimised over the rank.
        let mut cor2_terms = Vec::new();
        for r in 0..=p.min(q) {
            let b_r = if r == 0 {
                DMatrix::zeros(p, q)
            } else if r >= b_bar_rank {
                fit.b_bar.clone()
            } else {
                let settings = KlSolverSettings { restarts: 0, ..cfg.solver.clone() };
                match fit_kl_minimizer(&cfg.true_family, &truth.b0, &fitted, &x, Some(r), &settings) {
                    Ok(f) => f.b_bar,
                    Err(_) => project_rank(&fit.b_bar, r),
                }
            };
            let bf = b_r.norm();
            let log_term = if r == 0 {
                0.0
            } else {
                let rr = r as f64;
                rr * (x_frob * bf * 2.0 * nq.sqrt() * ((p * q) as f64).sqrt() / (a * (2.0 * rr).sqrt())).ln_1p()
            };
            let value = c_u / (nq * c_l) * al / (1.0 - al) * (&x * (&b_r - &truth.b0)).norm_squared()
                + 4.0 * a * (1.0 + al) / (c_l * (1.0 - al)) * u1 * (p + q + 2) as f64 * log_term / nq;
            cor2_terms.push(Cor2Term { r, b_bar_frob: bf, value });
        }
        let cor2_rhs = cor2_terms.iter().map(|t| t.value).fold(f64::INFINITY, f64::min);

        let prior = PriorConfig::from_preset(TauPreset::Misspecified, n, p, q, a, x_frob)?;
        let reps: Vec<MisspecReplication> = (0..cfg.replications)
            .into_par_iter()
            .map(|k| {
                let mut row = MisspecReplication {
                    n,
                    rep: k,
                    post_renyi: f64::NAN,
                    pred_err: f64::NAN,
                    acceptance: f64::NAN,
                    thm2_satisfied: false,
                    cor2_satisfied: false,
                    error: None,
                };
                let res = (|| -> Result<()> {
                    let mut rng = stream_rng(cfg.seed, ((li as u64 + 1) << 20) + k as u64);
                    let mut t = truth.clone();
                    let data = generate_dataset_with(&x, &mut t, &cfg.true_family, &fitted, &mut rng)?;
                    let chain = fit_chain(&data, &prior, al, &cfg.sampler, rng.random())?;
                    let m = cfg.divergence_samples.clamp(1, chain.samples.len());
                    let mut d = 0.0;
                    for i in 0..m {
                        d += obj.renyi_to_truth(&chain.samples[i * chain.samples.len() / m], al);
                    }
                    row.post_renyi = d / m as f64;
                    row.pred_err = prediction_error(&x, &posterior_mean(&chain)?, &truth.b0)?;
                    row.acceptance = chain.acceptance_rate;
                    row.thm2_satisfied = row.post_renyi <= thm2_rhs;
                    row.cor2_satisfied = row.pred_err <= cor2_rhs;
                    Ok(())
                })();
                if let Err(e) = res {
                    row.error = Some(e.to_string());
                }
                row
            })
            .collect();
        let ok: Vec<&MisspecReplication> = reps.iter().filter(|r| r.error.is_none()).collect();
        let frac = |f: fn(&MisspecReplication) -> bool| {
            reps.iter().filter(|r| r.error.is_none() && f(r)).count() as f64 / reps.len() as f64
        };
        levels.push(MisspecLevel {
            n,
            x_frob,
            tau: prior.tau(),
            b_bar_rank,
            b_bar_frob,
            kl_floor: fit.kl,
            renyi_floor,
            r_n,
            thm2_rhs,
            cor2_rhs,
            cor2_terms,
            post_renyi: MeanSe::of(&ok.iter().map(|r| r.post_renyi).collect::<Vec<_>>()),
            pred_err: MeanSe::of(&ok.iter().map(|r| r.pred_err).collect::<Vec<_>>()),
            thm2_fraction: frac(|r| r.thm2_satisfied),
            cor2_fraction: frac(|r| r.cor2_satisfied),
            solver: fit,
        });
        all_reps.extend(reps);
    }
    let plateau_above_floor = levels.iter().all(|l| l.post_renyi.mean >= 0.9 * l.renyi_floor);
    let last = levels.last().expect("nonempty");
    let first = &levels[0];
    let decays_slower_than_inverse_n =
        levels.len() > 1 && last.n as f64 * last.post_renyi.mean > first.n as f64 * first.post_renyi.mean;
    let final_excess_ratio = last.post_renyi.mean / last.renyi_floor;
    Ok(MisspecStudyResult {
        config: cfg.clone(),
        true_family: cfg.true_family.id(),
        fitted_family: fitted.id(),
        b0: truth.b0,
        levels,
        replications: all_reps,
        plateau_above_floor,
        decays_slower_than_inverse_n,
        final_excess_ratio,
    })
}
