//! Brute-force reference values for the closed-form divergences.
//!
//! Everything here evaluates densities through `statrs` rather than the
//! `b` functions of [`crate::model`], and integrates them directly:
//! exact sums for Bernoulli, truncated sums with a certified tail for the
//! count families, and Gauss–Hermite / generalised Gauss–Laguerre rules for
//! the gaussian and gamma families. The routines work in `f64` only.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{Bernoulli, Continuous, Discrete, Gamma, NegativeBinomial, Normal, Poisson};

use crate::error::{Error, Result};
use crate::model::{Distn, FamilySpec};
use crate::scalar::sigmoid;

/// Mass allowed to escape a truncated count sum.
pub const DEFAULT_TAIL_TOL: f64 = 1e-18;
/// Hard limit on the support size of one truncated count sum.
const MAX_SUPPORT: u64 = 50_000_000;

/// Quadrature rule: nodes and weights normalised to total weight 1.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Golub–Welsch: nodes are the eigenvalues of the Jacobi matrix and the
/// normalised weights are the squared first components of its eigenvectors.
fn golub_welsch(diag: &[f64], off: &[f64]) -> Rule {
    let n = diag.len();
    let mut j = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        j[(i, i)] = diag[i];
        if i + 1 < n {
            j[(i, i + 1)] = off[i];
            j[(i + 1, i)] = off[i];
        }
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Rule { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() }
}

/// Gauss–Hermite rule for E[g(Z)], Z ~ N(0, 1) (probabilists' weight).
pub fn gauss_hermite(n: usize) -> Rule {
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    golub_welsch(&diag, &off)
}

/// Generalised Gauss–Laguerre rule for E[g(X)], X ~ Gamma(shape s, rate 1).
pub fn gauss_laguerre(n: usize, shape: f64) -> Rule {
    let al = shape - 1.0;
    let diag: Vec<f64> = (0..n).map(|i| 2.0 * i as f64 + al + 1.0).collect();
    let off: Vec<f64> = (1..n).map(|i| (i as f64 * (i as f64 + al)).sqrt()).collect();
    golub_welsch(&diag, &off)
}

const QUAD_NODES: usize = 128;

fn err<E: std::fmt::Display>(e: E) -> Error {
    Error::invalid(e.to_string())
}

/// Reference log-density of one entry at natural parameter θ.
pub fn ln_density(fam: &FamilySpec<f64>, theta: f64, y: f64) -> Result<f64> {
    Ok(match fam.id().distribution() {
        Distn::Gaussian => Normal::new(theta, fam.dispersion().sqrt()).map_err(err)?.ln_pdf(y),
        Distn::Bernoulli => Bernoulli::new(sigmoid(theta)).map_err(err)?.ln_pmf(y as u64),
        Distn::Poisson => Poisson::new(theta.exp()).map_err(err)?.ln_pmf(y as u64),
        Distn::Gamma => {
            let k = fam.shape();
            Gamma::new(k, -k * theta).map_err(err)?.ln_pdf(y)
        }
        Distn::NegBinomial => {
            // statrs counts failures before `r` successes of probability p;
            // our Y counts events of probability e^θ before k others.
            NegativeBinomial::new(fam.shape(), -theta.exp_m1()).map_err(err)?.ln_pmf(y as u64)
        }
    })
}

/// Truncation point M and certified tail mass Σ_{y>M} p(y) for a count law.
///
/// Past the mode the pmf ratio r(y) = p(y+1)/p(y) is bounded by
/// ρ = sup_{y ≥ M} r(y), so the tail is at most p(M)·ρ/(1 − ρ). For the
/// Poisson ρ = λ/(M+1); for the negative binomial r(y) = e^θ(y+k)/(y+1)
/// is monotone in y with limit e^θ, so ρ = max(r(M), e^θ).
pub fn count_truncation(fam: &FamilySpec<f64>, theta: f64, tol: f64) -> Result<(u64, f64)> {
    let ratio = |y: f64| -> f64 {
        match fam.id().distribution() {
            Distn::Poisson => theta.exp() / (y + 1.0),
            Distn::NegBinomial => theta.exp() * (y + fam.shape()) / (y + 1.0),
            _ => 0.0,
        }
    };
    let sup_ratio = |y: f64| -> f64 {
        match fam.id().distribution() {
            Distn::NegBinomial => ratio(y).max(theta.exp()),
            _ => ratio(y),
        }
    };
    if !matches!(fam.id().distribution(), Distn::Poisson | Distn::NegBinomial) {
        return Err(Error::Unsupported(format!("{} is not a count family", fam.id())));
    }
    let mut m: u64 = 0;
    loop {
        let rho = sup_ratio(m as f64);
        if rho < 1.0 {
            let tail = ln_density(fam, theta, m as f64)?.exp() * rho / (1.0 - rho);
            if tail < tol {
                return Ok((m, tail));
            }
        }
        m = if m < 64 { m + 1 } else { m + m / 8 };
        if m > MAX_SUPPORT {
            return Err(Error::Unsupported(format!(
                "count support for θ = {theta} exceeds {MAX_SUPPORT} points"
            )));
        }
    }
}

/// Σ_y g(y, ln p_θ(y), ln p_ζ(y)) over the support, truncated jointly for
/// both laws. Returns the sum and the certified tail mass of p_θ + p_ζ.
fn discrete_sum(
    fam: &FamilySpec<f64>,
    theta: f64,
    zeta: f64,
    tol: f64,
    mut g: impl FnMut(f64, f64, f64) -> f64,
) -> Result<(f64, f64)> {
    match fam.id().distribution() {
        Distn::Bernoulli => {
            let mut s = 0.0;
            for y in [0.0, 1.0] {
                s += g(y, ln_density(fam, theta, y)?, ln_density(fam, zeta, y)?);
            }
            Ok((s, 0.0))
        }
        Distn::Poisson | Distn::NegBinomial => {
            let (m1, t1) = count_truncation(fam, theta, tol)?;
            let (m2, t2) = count_truncation(fam, zeta, tol)?;
            let m = m1.max(m2);
            let mut s = 0.0;
            // Kahan summation keeps long sums at full precision.
            let mut c = 0.0;
            for y in 0..=m {
                let yf = y as f64;
                let term = g(yf, ln_density(fam, theta, yf)?, ln_density(fam, zeta, yf)?) - c;
                let t = s + term;
                c = (t - s) - term;
                s = t;
            }
            Ok((s, t1 + t2))
        }
        _ => Err(Error::Unsupported(format!("{} is not discrete", fam.id()))),
    }
}

/// E_{base}[g(Y)] under the family law at natural parameter `base`, by
/// quadrature (gaussian and gamma only).
fn continuous_expectation(fam: &FamilySpec<f64>, base: f64, mut g: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut s = 0.0;
    match fam.id().distribution() {
        Distn::Gaussian => {
            let rule = gauss_hermite(QUAD_NODES);
            let sd = fam.dispersion().sqrt();
            for (x, w) in rule.nodes.iter().zip(&rule.weights) {
                s += w * g(base + sd * x)?;
            }
        }
        Distn::Gamma => {
            let k = fam.shape();
            let rule = gauss_laguerre(QUAD_NODES, k);
            let rate = -k * base;
            for (x, w) in rule.nodes.iter().zip(&rule.weights) {
                s += w * g(x / rate)?;
            }
        }
        _ => return Err(Error::Unsupported(format!("{} is not continuous", fam.id()))),
    }
    Ok(s)
}

fn is_discrete(fam: &FamilySpec<f64>) -> bool {
    matches!(fam.id().distribution(), Distn::Bernoulli | Distn::Poisson | Distn::NegBinomial)
}

/// KL(P_θ ‖ P_ζ) = E_θ[ln p_θ − ln p_ζ].
pub fn kl(fam: &FamilySpec<f64>, theta: f64, zeta: f64) -> Result<f64> {
    if is_discrete(fam) {
        let (s, _) = discrete_sum(fam, theta, zeta, DEFAULT_TAIL_TOL, |_, lp, lq| {
            if lp == f64::NEG_INFINITY {
                0.0
            } else {
                lp.exp() * (lp - lq)
            }
        })?;
        return Ok(s);
    }
    continuous_expectation(fam, theta, |y| Ok(ln_density(fam, theta, y)? - ln_density(fam, zeta, y)?))
}

/// D_α(P_θ ‖ P_ζ) = log ∫ p_θ^α p_ζ^{1−α} / (α − 1).
///
/// For the continuous families the integral is taken against the family law
/// at the mixed parameter m = αθ + (1−α)ζ, which makes the integrand
/// p_θ^α p_ζ^{1−α}/p_m a smooth (in fact constant) function.
pub fn renyi(fam: &FamilySpec<f64>, theta: f64, zeta: f64, alpha: f64) -> Result<f64> {
    let integral = if is_discrete(fam) {
        discrete_sum(fam, theta, zeta, DEFAULT_TAIL_TOL, |_, lp, lq| (alpha * lp + (1.0 - alpha) * lq).exp())?.0
    } else {
        let m = alpha * theta + (1.0 - alpha) * zeta;
        continuous_expectation(fam, m, |y| {
            let lp = ln_density(fam, theta, y)?;
            let lq = ln_density(fam, zeta, y)?;
            let lm = ln_density(fam, m, y)?;
            Ok((alpha * lp + (1.0 - alpha) * lq - lm).exp())
        })?
    };
    Ok(integral.ln() / (alpha - 1.0))
}

/// E_θ[(ln p_θ − ln p_ζ)²].
pub fn log_ratio_second_moment(fam: &FamilySpec<f64>, theta: f64, zeta: f64) -> Result<f64> {
    if is_discrete(fam) {
        let (s, _) = discrete_sum(fam, theta, zeta, DEFAULT_TAIL_TOL, |_, lp, lq| {
            if lp == f64::NEG_INFINITY {
                0.0
            } else {
                lp.exp() * (lp - lq).powi(2)
            }
        })?;
        return Ok(s);
    }
    continuous_expectation(fam, theta, |y| {
        let l = ln_density(fam, theta, y)? - ln_density(fam, zeta, y)?;
        Ok(l * l)
    })
}

/// ½Σ|p_θ − p_ζ| for one discrete entry.
pub fn tv_entry(fam: &FamilySpec<f64>, theta: f64, zeta: f64) -> Result<f64> {
    let (s, _) = discrete_sum(fam, theta, zeta, DEFAULT_TAIL_TOL, |_, lp, lq| (lp.exp() - lq.exp()).abs())?;
    Ok(0.5 * s)
}

/// Σ_y (√p_θ − √p_ζ)² for one discrete entry.
pub fn hellinger_sq_entry(fam: &FamilySpec<f64>, theta: f64, zeta: f64) -> Result<f64> {
    Ok(discrete_sum(fam, theta, zeta, DEFAULT_TAIL_TOL, |_, lp, lq| {
        ((0.5 * lp).exp() - (0.5 * lq).exp()).powi(2)
    })?
    .0)
}

/// Total variation between two product laws, by enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvResult {
    pub tv: f64,
    /// Upper bound on the mass of both laws outside the enumerated box.
    pub tail_mass: f64,
    pub outcomes: u64,
}

/// Product-law TV by enumeration of the joint outcome space.
///
/// Supported: Bernoulli products with nq ≤ 12; Poisson and negative binomial
/// products whose truncated joint support has at most `max_outcomes`
/// points; a single gaussian entry, where d_TV = 2Φ(|θ−ζ|/(2√a)) − 1.
pub fn tv_bruteforce(
    fam: &FamilySpec<f64>,
    theta: &DMatrix<f64>,
    zeta: &DMatrix<f64>,
    tail_tol: f64,
    max_outcomes: u64,
) -> Result<TvResult> {
    if theta.shape() != zeta.shape() {
        return Err(Error::shape("Θ and Z differ in shape"));
    }
    let nq = theta.len();
    let ts: Vec<f64> = theta.iter().copied().collect();
    let zs: Vec<f64> = zeta.iter().copied().collect();
    match fam.id().distribution() {
        Distn::Gaussian => {
            if nq != 1 {
                return Err(Error::Unsupported("gaussian TV is only available for a single entry".into()));
            }
            let gap = (ts[0] - zs[0]).abs() / (2.0 * fam.dispersion().sqrt());
            let tv = 2.0 * crate::scalar::norm_cdf(gap) - 1.0;
            Ok(TvResult { tv, tail_mass: 0.0, outcomes: 0 })
        }
        Distn::Gamma => Err(Error::Unsupported("TV enumeration is not available for gamma".into())),
        Distn::Bernoulli => {
            if nq > 12 {
                return Err(Error::Unsupported(format!("Bernoulli product with nq = {nq} > 12")));
            }
            let supports = vec![1u64; nq];
            enumerate(fam, &ts, &zs, &supports, 0.0)
        }
        Distn::Poisson | Distn::NegBinomial => {
            let per_entry = tail_tol / (2.0 * nq.max(1) as f64);
            let mut supports = Vec::with_capacity(nq);
            let mut tail = 0.0;
            let mut total: u64 = 1;
            for k in 0..nq {
                let (m1, t1) = count_truncation(fam, ts[k], per_entry)?;
                let (m2, t2) = count_truncation(fam, zs[k], per_entry)?;
                let m = m1.max(m2);
                tail += t1 + t2;
                total = total.saturating_mul(m + 1);
                if total > max_outcomes {
                    return Err(Error::Unsupported(format!(
                        "truncated joint support exceeds {max_outcomes} outcomes"
                    )));
                }
                supports.push(m);
            }
            enumerate(fam, &ts, &zs, &supports, tail)
        }
    }
}

fn enumerate(fam: &FamilySpec<f64>, ts: &[f64], zs: &[f64], maxes: &[u64], tail: f64) -> Result<TvResult> {
    let nq = ts.len();
    // Per-entry pmf tables.
    let mut pt = Vec::with_capacity(nq);
    let mut pz = Vec::with_capacity(nq);
    for k in 0..nq {
        let mut a = Vec::with_capacity(maxes[k] as usize + 1);
        let mut b = Vec::with_capacity(maxes[k] as usize + 1);
        for y in 0..=maxes[k] {
            a.push(ln_density(fam, ts[k], y as f64)?.exp());
            b.push(ln_density(fam, zs[k], y as f64)?.exp());
        }
        pt.push(a);
        pz.push(b);
    }
    let mut idx = vec![0u64; nq];
    let mut s = 0.0;
    let mut count: u64 = 0;
    loop {
        let mut a = 1.0;
        let mut b = 1.0;
        for k in 0..nq {
            a *= pt[k][idx[k] as usize];
            b *= pz[k][idx[k] as usize];
        }
        s += (a - b).abs();
        count += 1;
        // mixed-radix increment
        let mut k = 0;
        loop {
            if k == nq {
                return Ok(TvResult { tv: 0.5 * s, tail_mass: tail, outcomes: count });
            }
            if idx[k] < maxes[k] {
                idx[k] += 1;
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_rules_integrate_moments() {
        let h = gauss_hermite(40);
        let m2: f64 = h.nodes.iter().zip(&h.weights).map(|(x, w)| w * x * x).sum();
        let m4: f64 = h.nodes.iter().zip(&h.weights).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m2 - 1.0).abs() < 1e-12 && (m4 - 3.0).abs() < 1e-11);

        let l = gauss_laguerre(40, 2.5);
        let m1: f64 = l.nodes.iter().zip(&l.weights).map(|(x, w)| w * x).sum();
        let m2: f64 = l.nodes.iter().zip(&l.weights).map(|(x, w)| w * x * x).sum();
        assert!((m1 - 2.5).abs() < 1e-11);
        assert!((m2 - 2.5 * 3.5).abs() < 1e-10);
    }

    #[test]
    fn single_bernoulli_tv() {
        let l = FamilySpec::<f64>::bernoulli_logit();
        let t = DMatrix::from_element(1, 1, 0.0);
        let z = DMatrix::from_element(1, 1, 1.0);
        let r = tv_bruteforce(&l, &t, &z, 1e-10, 1_000_000).unwrap();
        assert!((r.tv - (sigmoid(1.0) - 0.5)).abs() < 1e-15);
        assert!((r.tv - 0.231059).abs() < 1e-6);
        assert_eq!(tv_bruteforce(&l, &t, &t, 1e-10, 1_000_000).unwrap().tv, 0.0);
        assert!(tv_bruteforce(&l, &DMatrix::zeros(13, 1), &DMatrix::zeros(13, 1), 1e-10, 1 << 20).is_err());
    }

    #[test]
    fn poisson_tail_certificate_is_honest() {
        let p = FamilySpec::<f64>::poisson_log();
        let (m, tail) = count_truncation(&p, 1.0, 1e-12).unwrap();
        let lam = 1.0f64.exp();
        let stat = Poisson::new(lam).unwrap();
        let exact_tail = 1.0 - stat_cdf(&stat, m);
        assert!(exact_tail <= tail + 1e-16, "{exact_tail} vs {tail}");
    }

    fn stat_cdf(d: &Poisson, m: u64) -> f64 {
        use statrs::distribution::DiscreteCDF;
        d.cdf(m)
    }
}
