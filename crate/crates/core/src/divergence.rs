//! Closed-form divergences between exponential-family product laws, the
//! bound quantities they are compared against, and the contraction rates.
//!
//! For two parameters θ, ζ of the same family
//!
//! ```text
//! KL(P_θ ‖ P_ζ)  = [b′(θ)(θ−ζ) − b(θ) + b(ζ)] / a
//! D_α(P_θ ‖ P_ζ) = [α b(θ) + (1−α) b(ζ) − b(αθ + (1−α)ζ)] / (a(1−α))
//! ```
//!
//! and both are additive over independent entries. Theorem-facing values use
//! the per-entry average (1/nq)·Σ_ij; totals are reported alongside.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, Distn, FamilyBounds, FamilySpec};
use crate::scalar::Real;

fn check_pair<T: Real>(fam: &FamilySpec<T>, theta: T, zeta: T) -> Result<()> {
    fam.b_value(theta)?;
    fam.b_value(zeta)?;
    Ok(())
}

/// KL(P_θ ‖ P_ζ) for one entry.
pub fn kl_per_entry<T: Real>(fam: &FamilySpec<T>, theta: T, zeta: T) -> Result<T> {
    check_pair(fam, theta, zeta)?;
    let a = fam.dispersion();
    let d = theta - zeta;
    if fam.id().distribution() == Distn::Gaussian {
        return Ok(d * d / (T::lit(2.0) * a));
    }
    let v = (fam.b1_raw(theta) * d - fam.b_raw(theta) + fam.b_raw(zeta)) / a;
    Ok(v.max(T::zero()))
}

/// D_α(P_θ ‖ P_ζ) for one entry, α ∈ (0, 1).
pub fn renyi_per_entry<T: Real>(fam: &FamilySpec<T>, theta: T, zeta: T, alpha: T) -> Result<T> {
    check_alpha(alpha)?;
    check_pair(fam, theta, zeta)?;
    let a = fam.dispersion();
    let d = theta - zeta;
    if fam.id().distribution() == Distn::Gaussian {
        return Ok(alpha * d * d / (T::lit(2.0) * a));
    }
    let one_m = T::one() - alpha;
    let mid = alpha * theta + one_m * zeta;
    let v = (alpha * fam.b_raw(theta) + one_m * fam.b_raw(zeta) - fam.b_raw(mid)) / (a * one_m);
    Ok(v.max(T::zero()))
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    if alpha > T::zero() && alpha < T::one() {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// E_θ[ℓ²] for ℓ = log(p_θ/p_ζ)(Y), i.e. [a b″(θ) d² + (b′(θ)d − Δb)²]/a²
/// with d = θ − ζ and Δb = b(θ) − b(ζ).
pub fn log_ratio_second_moment<T: Real>(fam: &FamilySpec<T>, theta: T, zeta: T) -> Result<T> {
    check_pair(fam, theta, zeta)?;
    let a = fam.dispersion();
    let d = theta - zeta;
    let kl_num = fam.b1_raw(theta) * d - fam.b_raw(theta) + fam.b_raw(zeta);
    Ok((a * fam.b2_raw(theta) * d * d + kl_num * kl_num) / (a * a))
}

/// E[log(p_θ̄/p_ζ)(Y)] for Y with mean `mu0`:
/// [μ₀(θ̄ − ζ) − b(θ̄) + b(ζ)]/a.
pub fn misspecified_log_ratio_mean<T: Real>(fam: &FamilySpec<T>, mu0: T, theta_bar: T, zeta: T) -> Result<T> {
    check_pair(fam, theta_bar, zeta)?;
    Ok((mu0 * (theta_bar - zeta) - fam.b_raw(theta_bar) + fam.b_raw(zeta)) / fam.dispersion())
}

fn check_same_shape<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "parameter matrices differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sum_entries<T: Real>(
    theta: &DMatrix<T>,
    zeta: &DMatrix<T>,
    mut f: impl FnMut(T, T) -> Result<T>,
) -> Result<T> {
    check_same_shape(theta, zeta)?;
    let mut s = T::zero();
    for (t, z) in theta.iter().zip(zeta.iter()) {
        s += f(*t, *z)?;
    }
    Ok(s)
}

/// Σ_ij KL over the product law.
pub fn kl_total<T: Real>(fam: &FamilySpec<T>, theta: &DMatrix<T>, zeta: &DMatrix<T>) -> Result<T> {
    sum_entries(theta, zeta, |t, z| kl_per_entry(fam, t, z))
}

/// Σ_ij D_α over the product law.
pub fn renyi_total<T: Real>(fam: &FamilySpec<T>, theta: &DMatrix<T>, zeta: &DMatrix<T>, alpha: T) -> Result<T> {
    sum_entries(theta, zeta, |t, z| renyi_per_entry(fam, t, z, alpha))
}

/// H² = 2(1 − exp(−D_{1/2}/2)) for a Rényi-½ value on either scale.
pub fn hellinger_sq_from_renyi_half<T: Real>(d_half: T) -> T {
    -T::lit(2.0) * (-(d_half * T::lit(0.5))).exp_m1()
}

/// Le Cam's bounds H²/2 ≤ d_TV ≤ H√(1 − H²/4), for H² ∈ [0, 2].
pub fn tv_bounds_from_hellinger<T: Real>(h2: T) -> (T, T) {
    let h2 = h2.max(T::zero()).min(T::lit(2.0));
    let lower = h2 * T::lit(0.5);
    let upper = (h2 * (T::one() - h2 * T::lit(0.25))).sqrt();
    (lower, upper.min(T::one()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenyiValue<T> {
    pub alpha: T,
    pub avg: T,
    pub total: T,
}

/// Divergences between two product laws on both normalisations.
///
/// `*_avg` fields are per-entry averages (total / nq). The Hellinger and TV
/// quantities are derived from D_{1/2} on the matching scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport<T> {
    pub nq: usize,
    pub kl_avg: T,
    pub kl_total: T,
    pub renyi: Vec<RenyiValue<T>>,
    pub renyi_half_avg: T,
    pub renyi_half_total: T,
    pub hellinger_sq: T,
    pub hellinger_sq_avg: T,
    pub tv_lower: T,
    pub tv_upper: T,
    pub tv_lower_avg: T,
    pub tv_upper_avg: T,
}

impl<T: Real> DivergenceReport<T> {
    pub fn renyi_avg(&self, alpha: T) -> Option<T> {
        self.renyi.iter().find(|r| r.alpha == alpha).map(|r| r.avg)
    }

    /// Rows (metric, alpha, per_entry_avg, total, normalization) for CSV output.
    /// `alpha` is empty for metrics that do not depend on it.
    pub fn rows(&self) -> Vec<(String, Option<T>, T, T)> {
        let mut out = vec![("kl".to_string(), None, self.kl_avg, self.kl_total)];
        for r in &self.renyi {
            out.push(("renyi".to_string(), Some(r.alpha), r.avg, r.total));
        }
        out.push(("hellinger_sq".to_string(), None, self.hellinger_sq_avg, self.hellinger_sq));
        out.push(("tv_lower".to_string(), None, self.tv_lower_avg, self.tv_lower));
        out.push(("tv_upper".to_string(), None, self.tv_upper_avg, self.tv_upper));
        out
    }
}

/// Builds a [`DivergenceReport`] for natural-parameter matrices Θ and Z.
pub fn divergence_report<T: Real>(
    fam: &FamilySpec<T>,
    theta: &DMatrix<T>,
    zeta: &DMatrix<T>,
    alphas: &[T],
) -> Result<DivergenceReport<T>> {
    check_same_shape(theta, zeta)?;
    let nq = theta.len();
    let scale = if nq == 0 { T::zero() } else { T::one() / T::from_usize_lossy(nq) };
    let kl = kl_total(fam, theta, zeta)?;
    let mut renyi = Vec::with_capacity(alphas.len());
    for &al in alphas {
        let total = renyi_total(fam, theta, zeta, al)?;
        renyi.push(RenyiValue { alpha: al, avg: total * scale, total });
    }
    let half_total = renyi_total(fam, theta, zeta, T::lit(0.5))?;
    let half_avg = half_total * scale;
    let h2 = hellinger_sq_from_renyi_half(half_total);
    let h2_avg = hellinger_sq_from_renyi_half(half_avg);
    let (tv_lower, tv_upper) = tv_bounds_from_hellinger(h2);
    let (tv_lower_avg, tv_upper_avg) = tv_bounds_from_hellinger(h2_avg);
    Ok(DivergenceReport {
        nq,
        kl_avg: kl * scale,
        kl_total: kl,
        renyi,
        renyi_half_avg: half_avg,
        renyi_half_total: half_total,
        hellinger_sq: h2,
        hellinger_sq_avg: h2_avg,
        tv_lower,
        tv_upper,
        tv_lower_avg,
        tv_upper_avg,
    })
}

/// Right-hand sides of the divergence lemmas for Θ and Z, on the
/// per-entry-averaged scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaBounds<T> {
    /// (C_U/2a)(1/nq)‖Z − Θ‖²_F, an upper bound for KL.
    pub kl_upper: T,
    /// (C_L/2a)(1/nq)‖Θ − Z‖²_F, stated as a lower bound for every D_α.
    pub renyi_lower: T,
    /// (C_U/a)(1/nq)‖Θ − Z‖²_F + (C_U²/4a²)(1/nq)‖Z − Θ‖⁴_F, an upper bound
    /// for the mean square log-ratio.
    pub second_moment_upper: T,
    /// 2U₁/(a√(nq))·‖Z − Θ‖_F with Θ playing θ̄; `None` if U₁ = ∞.
    pub misspecified_upper: Option<T>,
}

impl<T: Real> LemmaBounds<T> {
    /// α·(C_L/2a)(1/nq)‖Θ − Z‖²_F, the lower bound for D_α that does hold:
    /// D_α is α times a KL-like Bregman gap at the mixed point, and that gap
    /// is at least C_L/2a times the squared distance.
    pub fn renyi_lower_scaled(&self, alpha: T) -> T {
        alpha * self.renyi_lower
    }
}

pub fn lemma_bounds<T: Real>(fam: &FamilySpec<T>, theta: &DMatrix<T>, zeta: &DMatrix<T>) -> Result<LemmaBounds<T>> {
    check_same_shape(theta, zeta)?;
    lemma_bounds_with(&fam.bounds(), fam.dispersion(), theta, zeta)
}

/// Same as [`lemma_bounds`] with explicit constants.
pub fn lemma_bounds_with<T: Real>(
    bounds: &FamilyBounds<T>,
    a: T,
    theta: &DMatrix<T>,
    zeta: &DMatrix<T>,
) -> Result<LemmaBounds<T>> {
    check_same_shape(theta, zeta)?;
    let nq = theta.len();
    if nq == 0 {
        return Ok(LemmaBounds {
            kl_upper: T::zero(),
            renyi_lower: T::zero(),
            second_moment_upper: T::zero(),
            misspecified_upper: bounds.u1.finite().map(|_| T::zero()),
        });
    }
    let c_u = bounds.c_upper()?;
    let c_l = bounds.c_lower;
    let nq_t = T::from_usize_lossy(nq);
    let d2 = (zeta - theta).norm_squared();
    let two = T::lit(2.0);
    Ok(LemmaBounds {
        kl_upper: c_u / (two * a) * d2 / nq_t,
        renyi_lower: c_l / (two * a) * d2 / nq_t,
        second_moment_upper: c_u / a * d2 / nq_t + c_u * c_u / (T::lit(4.0) * a * a) * d2 * d2 / nq_t,
        misspecified_upper: bounds.u1.finite().map(|u1| two * u1 / (a * nq_t.sqrt()) * d2.sqrt()),
    })
}

/// Inputs of the rate formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateInputs<T> {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// rank r* of the truth (or of B̄ in the misspecified rate).
    pub r: usize,
    pub a: T,
    pub c_u: Bound<T>,
    pub u1: Bound<T>,
    /// ‖X‖_F
    pub x_frob: T,
    /// ‖B₀‖_F, or ‖B̄‖_F for r_n.
    pub b_frob: T,
}

/// The four contraction rates. A rate is `Unbounded` when it needs a
/// constant that is infinite on Θ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFormulas<T> {
    pub inputs: RateInputs<T>,
    pub epsilon_n_thm1: Bound<T>,
    pub epsilon_n_thm3: Bound<T>,
    pub epsilon_prime_n: Bound<T>,
    pub r_n: Bound<T>,
}

/// r·log(1 + num/√(den·r)) with the convention 0·log(1 + 0/0) = 0.
fn rank_log_term<T: Real>(r: usize, num: T, den: T) -> T {
    if r == 0 {
        return T::zero();
    }
    let r_t = T::from_usize_lossy(r);
    r_t * (num / (den * r_t).sqrt()).ln_1p()
}

fn scaled<T: Real>(c: Bound<T>, f: impl FnOnce(T) -> T) -> Bound<T> {
    match c {
        Bound::Finite(v) => Bound::Finite(f(v)),
        Bound::Unbounded => Bound::Unbounded,
    }
}

pub fn rate_formulas<T: Real>(inp: RateInputs<T>) -> Result<RateFormulas<T>> {
    if inp.n == 0 || inp.p == 0 || inp.q == 0 {
        return Err(Error::invalid("n, p and q must be positive"));
    }
    let nonneg = |v: T, what: &str| -> Result<()> {
        if v >= T::zero() && v == v {
            Ok(())
        } else {
            Err(Error::invalid(format!("{what} must be nonnegative, got {v}")))
        }
    };
    nonneg(inp.x_frob, "x_frob")?;
    nonneg(inp.b_frob, "b_frob")?;
    if !(inp.a > T::zero()) {
        return Err(Error::invalid(format!("dispersion must be positive, got {}", inp.a)));
    }
    for c in [inp.c_u, inp.u1] {
        if let Bound::Finite(v) = c {
            nonneg(v, "bound constant")?;
        }
    }
    if inp.r > inp.p.min(inp.q) {
        return Err(Error::invalid(format!("rank {} exceeds min(p, q)", inp.r)));
    }
    let n = T::from_usize_lossy(inp.n);
    let q = T::from_usize_lossy(inp.q);
    let nq = n * q;
    let qp = T::from_usize_lossy(inp.p * inp.q);
    let deg = T::from_usize_lossy(inp.q + inp.p + 2);
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let xb = inp.x_frob * inp.b_frob;
    let a = inp.a;

    let log1 = rank_log_term(inp.r, xb * qp.sqrt(), four * a);
    let log3 = rank_log_term(inp.r, xb * qp.sqrt(), two * a);
    let logp = rank_log_term(inp.r, xb * qp.sqrt(), two);
    let logr = rank_log_term(inp.r, xb * two * nq.sqrt() * qp.sqrt() / a, two);

    let eps1 = scaled(inp.c_u, |cu| cu * two * deg * log1 / nq);
    let eps3 = scaled(inp.c_u, |cu| (cu * cu / (four * nq)).max(two * cu * deg * log3 / nq));
    let epsp = scaled(inp.c_u, |cu| {
        (cu / (a * n)).max(cu * cu / (four * a * a * n)).max(two * deg * logp / n)
    });
    let r_n = if inp.r == 0 {
        Bound::Finite(T::zero())
    } else {
        scaled(inp.u1, |u1| two * u1 * deg * logr / nq)
    };
    Ok(RateFormulas { inputs: inp, epsilon_n_thm1: eps1, epsilon_n_thm3: eps3, epsilon_prime_n: epsp, r_n })
}

/// c_α = 2(α+1)/(1−α) on [0.5, 1) and 2(α+1)/α on (0, 0.5).
pub fn c_alpha<T: Real>(alpha: T) -> Result<T> {
    check_alpha(alpha)?;
    let two = T::lit(2.0);
    if alpha >= T::lit(0.5) {
        Ok(two * (alpha + T::one()) / (T::one() - alpha))
    } else {
        Ok(two * (alpha + T::one()) / alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn kl_examples() {
        let l = FamilySpec::<f64>::bernoulli_logit();
        assert_eq!(kl_per_entry(&l, 0.3, 0.3).unwrap(), 0.0);
        let g = FamilySpec::<f64>::gaussian(1.0).unwrap();
        assert_eq!(kl_per_entry(&g, 1.0, 3.0).unwrap(), 2.0);
        let (p, q) = (sigmoid(0.0), sigmoid(1.0));
        let direct = p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
        let v = kl_per_entry(&l, 0.0, 1.0).unwrap();
        assert!((v - direct).abs() < 1e-14);
        assert!((v - 0.120115).abs() < 1e-6);
    }

    #[test]
    fn renyi_examples() {
        let l = FamilySpec::<f64>::bernoulli_logit();
        for al in [0.25, 0.5, 0.75] {
            assert_eq!(renyi_per_entry(&l, 0.4, 0.4, al).unwrap(), 0.0);
        }
        let g = FamilySpec::<f64>::gaussian(1.0).unwrap();
        assert!((renyi_per_entry(&g, 0.0, 2.0, 0.5).unwrap() - 1.0).abs() < 1e-15);
        let (p, q) = (sigmoid(0.0), sigmoid(1.0));
        let direct = -2.0 * ((p * q).sqrt() + ((1.0 - p) * (1.0 - q)).sqrt()).ln();
        let v = renyi_per_entry(&l, 0.0, 1.0, 0.5).unwrap();
        assert!((v - direct).abs() < 1e-14);
        assert!((v - 0.058255).abs() < 1e-6);
    }

    #[test]
    fn renyi_tends_to_kl() {
        let f = FamilySpec::<f64>::poisson_log();
        let kl = kl_per_entry(&f, 0.7, -0.2).unwrap();
        let r = renyi_per_entry(&f, 0.7, -0.2, 0.999).unwrap();
        assert!((kl - r).abs() < 2e-3 * kl);
    }

    #[test]
    fn report_examples() {
        let l = FamilySpec::<f64>::bernoulli_logit();
        let z = DMatrix::from_element(2, 2, 0.3);
        let rep = divergence_report(&l, &z, &z, &[0.25, 0.5]).unwrap();
        assert_eq!(rep.kl_total, 0.0);
        assert_eq!(rep.hellinger_sq, 0.0);
        assert_eq!(rep.tv_upper, 0.0);

        let rep = divergence_report(
            &l,
            &DMatrix::from_element(1, 1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
            &[0.5],
        )
        .unwrap();
        let (p, q) = (sigmoid(0.0), sigmoid(1.0));
        let direct = (p.sqrt() - q.sqrt()).powi(2) + ((1.0 - p).sqrt() - (1.0 - q).sqrt()).powi(2);
        assert!((rep.hellinger_sq - direct).abs() < 1e-14);
        assert!((rep.hellinger_sq - 0.057415).abs() < 1e-6);

        let g = FamilySpec::<f64>::gaussian(1.0).unwrap();
        let t = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, -1.0]);
        let z = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, -1.0]);
        let rep = divergence_report(&g, &t, &z, &[]).unwrap();
        assert!((rep.kl_total - 4.0).abs() < 1e-14);
        assert!((rep.kl_avg - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lemma_bound_examples() {
        let g = FamilySpec::<f64>::gaussian(1.0).unwrap();
        let t = DMatrix::from_element(1, 1, 0.0);
        let z = DMatrix::from_element(1, 1, 2.0);
        let lb = lemma_bounds(&g, &t, &z).unwrap();
        assert_eq!(lb.kl_upper, 2.0);
        assert_eq!(lb.renyi_lower, 2.0);
        assert_eq!(kl_per_entry(&g, 0.0, 2.0).unwrap(), 2.0);
        assert!(lb.misspecified_upper.is_none());

        let l = FamilySpec::<f64>::bernoulli_logit();
        let lb = lemma_bounds(&l, &DMatrix::from_element(1, 1, 0.0), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(lb.kl_upper, 0.125);
        assert!(lb.kl_upper >= kl_per_entry(&l, 0.0, 1.0).unwrap());

        let same = lemma_bounds(&l, &t, &t).unwrap();
        assert_eq!(same.kl_upper, 0.0);
        assert_eq!(same.second_moment_upper, 0.0);
        assert_eq!(same.misspecified_upper, Some(0.0));
    }

    fn gaussian_inputs(n: usize, r: usize) -> RateInputs<f64> {
        RateInputs {
            n,
            p: 2,
            q: 2,
            r,
            a: 1.0,
            c_u: Bound::Finite(1.0),
            u1: Bound::Finite(1.0),
            x_frob: 10.0,
            b_frob: 1.0,
        }
    }

    #[test]
    fn rate_examples() {
        let r0 = rate_formulas(gaussian_inputs(100, 0)).unwrap();
        assert_eq!(r0.epsilon_n_thm1, Bound::Finite(0.0));
        assert_eq!(r0.r_n, Bound::Finite(0.0));

        // C_U·2r(q+p+2)·log(1 + 10·1·2/√4)/(nq) with nq = 200.
        let r1 = rate_formulas(gaussian_inputs(100, 1)).unwrap();
        let e = r1.epsilon_n_thm1.finite().unwrap();
        assert!((e - 12.0 * 11f64.ln() / 200.0).abs() < 1e-15);

        let r2 = rate_formulas(gaussian_inputs(200, 1)).unwrap();
        assert!((r2.epsilon_n_thm1.finite().unwrap() * 2.0 - e).abs() < 1e-15);
    }

    #[test]
    fn c_alpha_examples() {
        assert_eq!(c_alpha(0.5).unwrap(), 6.0);
        assert_eq!(c_alpha(0.25).unwrap(), 10.0);
        assert!((c_alpha(0.75).unwrap() - 14.0_f64).abs() < 1e-14);
        assert!(c_alpha(1.0_f64).is_err());
        assert!(c_alpha(0.0_f64).is_err());
    }

    #[test]
    fn tv_bounds_are_ordered() {
        for h2 in [0.0, 0.1, 1.0, 2.0] {
            let (lo, hi) = tv_bounds_from_hellinger(h2);
            assert!(lo <= hi + 1e-15);
        }
    }
}
