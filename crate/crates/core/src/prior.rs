//! Spectral scaled Student prior on p×q coefficient matrices.
//!
//! The density is `π(B) ∝ det(τ² I_p + BBᵀ)^{−(p+q+2)/2}`, which factorises
//! over the singular values of `B` as a product of scaled Student kernels.
//! Small τ concentrates most singular values near zero and so favours
//! low-rank matrices without fixing the rank in advance.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Which formula produced τ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauPreset {
    /// τ² = 2a/(qp‖X‖²_F)
    Theorem1,
    /// τ² = a/(qp‖X‖²_F)
    Theorem3,
    /// τ = a/(2√(nq)√(pq)‖X‖_F)
    Misspecified,
    Manual,
}

impl TauPreset {
    pub fn name(self) -> &'static str {
        match self {
            TauPreset::Theorem1 => "theorem1",
            TauPreset::Theorem3 => "theorem3",
            TauPreset::Misspecified => "misspecified",
            TauPreset::Manual => "manual",
        }
    }
}

impl std::str::FromStr for TauPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [TauPreset::Theorem1, TauPreset::Theorem3, TauPreset::Misspecified, TauPreset::Manual]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown tau preset `{s}`")))
    }
}

/// Evaluates the τ formula attached to a preset.
///
/// `x_frob` is the Frobenius norm ‖X‖_F (not its square).
pub fn tau_preset<T: Real>(preset: TauPreset, n: usize, p: usize, q: usize, a: T, x_frob: T) -> Result<T> {
    if n == 0 || p == 0 || q == 0 {
        return Err(Error::invalid("n, p and q must be positive"));
    }
    if !(a > T::zero()) {
        return Err(Error::invalid(format!("dispersion must be positive, got {a}")));
    }
    if !(x_frob > T::zero()) || !x_frob.is_finite() {
        return Err(Error::invalid(format!(
            "‖X‖_F must be positive and finite, got {x_frob}"
        )));
    }
    let (n, p, q) = (T::from_usize_lossy(n), T::from_usize_lossy(p), T::from_usize_lossy(q));
    let x2 = x_frob * x_frob;
    match preset {
        TauPreset::Theorem1 => Ok((T::lit(2.0) * a / (q * p * x2)).sqrt()),
        TauPreset::Theorem3 => Ok((a / (q * p * x2)).sqrt()),
        TauPreset::Misspecified => Ok(a / (T::lit(2.0) * (n * q).sqrt() * (p * q).sqrt() * x_frob)),
        TauPreset::Manual => Err(Error::invalid("manual preset has no formula; use PriorConfig::manual")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig<T> {
    tau: T,
    preset: TauPreset,
    p: usize,
    q: usize,
}

impl<T: Real> PriorConfig<T> {
    pub fn manual(tau: T, p: usize, q: usize) -> Result<Self> {
        Self::checked(tau, TauPreset::Manual, p, q)
    }

    pub fn from_preset(preset: TauPreset, n: usize, p: usize, q: usize, a: T, x_frob: T) -> Result<Self> {
        let tau = tau_preset(preset, n, p, q, a, x_frob)?;
        Self::checked(tau, preset, p, q)
    }

    fn checked(tau: T, preset: TauPreset, p: usize, q: usize) -> Result<Self> {
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(Error::invalid(format!("tau must be positive and finite, got {tau}")));
        }
        if p == 0 || q == 0 {
            return Err(Error::invalid("prior dimensions must be positive"));
        }
        Ok(PriorConfig { tau, preset, p, q })
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn preset(&self) -> TauPreset {
        self.preset
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// The exponent multiplier p+q+2.
    pub fn degree(&self) -> T {
        T::from_usize_lossy(self.p + self.q + 2)
    }

    fn check_shape(&self, b: &DMatrix<T>) -> Result<()> {
        if b.nrows() != self.p || b.ncols() != self.q {
            return Err(Error::shape(format!(
                "prior expects {}x{}, got {}x{}",
                self.p,
                self.q,
                b.nrows(),
                b.ncols()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("coefficient matrix has non-finite entries"));
        }
        Ok(())
    }
}

/// Cholesky factor of the smaller of the two Gram forms plus the
/// information needed to undo the dual identity.
struct GramFactor<T: Real> {
    chol: Cholesky<T, Dyn>,
    /// true when the q×q form τ²I_q + BᵀB was factored.
    dual: bool,
}

impl<T: Real> GramFactor<T> {
    fn new(b: &DMatrix<T>, tau: T) -> Result<Self> {
        let (p, q) = b.shape();
        let t2 = tau * tau;
        let (mut m, dual) = if p <= q { (b * b.transpose(), false) } else { (b.transpose() * b, true) };
        for i in 0..m.nrows() {
            m[(i, i)] += t2;
        }
        let chol = Cholesky::new(m).ok_or_else(|| Error::Numerical("prior Gram matrix not positive definite".into()))?;
        Ok(GramFactor { chol, dual })
    }

    /// log det(τ² I_p + BBᵀ).
    fn logdet(&self, p: usize, q: usize, tau: T) -> T {
        let l = self.chol.l_dirty();
        let mut s = T::zero();
        for i in 0..l.nrows() {
            s += l[(i, i)].ln();
        }
        let mut ld = s * T::lit(2.0);
        if self.dual {
            ld += T::from_usize_lossy(p - q) * T::lit(2.0) * tau.ln();
        }
        ld
    }

    /// (τ² I_p + BBᵀ)⁻¹ B, via the push-through identity in the dual case.
    fn solve_b(&self, b: &DMatrix<T>) -> DMatrix<T> {
        if self.dual {
            // B (τ² I_q + BᵀB)⁻¹ = ((τ² I_q + BᵀB)⁻¹ Bᵀ)ᵀ
            self.chol.solve(&b.transpose()).transpose()
        } else {
            self.chol.solve(b)
        }
    }
}

/// log π(B) up to the normalising constant.
pub fn log_prior<T: Real>(b: &DMatrix<T>, cfg: &PriorConfig<T>) -> Result<T> {
    cfg.check_shape(b)?;
    let g = GramFactor::new(b, cfg.tau)?;
    Ok(-cfg.degree() * T::lit(0.5) * g.logdet(cfg.p, cfg.q, cfg.tau))
}

/// ∇ log π(B) = −(p+q+2)(τ² I_p + BBᵀ)⁻¹ B.
pub fn grad_log_prior<T: Real>(b: &DMatrix<T>, cfg: &PriorConfig<T>) -> Result<DMatrix<T>> {
    Ok(log_prior_and_grad(b, cfg)?.1)
}

/// Value and gradient sharing one factorisation.
pub fn log_prior_and_grad<T: Real>(b: &DMatrix<T>, cfg: &PriorConfig<T>) -> Result<(T, DMatrix<T>)> {
    cfg.check_shape(b)?;
    let g = GramFactor::new(b, cfg.tau)?;
    let value = -cfg.degree() * T::lit(0.5) * g.logdet(cfg.p, cfg.q, cfg.tau);
    let grad = g.solve_b(b) * (-cfg.degree());
    Ok((value, grad))
}

/// log π(B) written through the singular values, with zero padding to p.
pub fn log_prior_from_singular_values<T: Real>(singular_values: &[T], cfg: &PriorConfig<T>) -> T {
    let t2 = cfg.tau * cfg.tau;
    let mut s = T::zero();
    for j in 0..cfg.p {
        let sj = singular_values.get(j).copied().unwrap_or_else(T::zero);
        s += (t2 + sj * sj).ln();
    }
    -cfg.degree() * T::lit(0.5) * s
}

/// Hessian of −log π at B as a pq×pq matrix over column-major vec(B).
///
/// With K = (τ²I + BBᵀ)⁻¹, G = KB and W = BᵀKB the entry for
/// ((i,j),(k,l)) is c·[K_ik(δ_jl − W_lj) − G_il G_kj].
pub fn neg_log_prior_hessian<T: Real>(b: &DMatrix<T>, cfg: &PriorConfig<T>) -> Result<DMatrix<T>> {
    cfg.check_shape(b)?;
    let (p, q) = b.shape();
    let mut m = b * b.transpose();
    for i in 0..p {
        m[(i, i)] += cfg.tau * cfg.tau;
    }
    let chol = Cholesky::new(m).ok_or_else(|| Error::Numerical("prior Gram matrix not positive definite".into()))?;
    let k = chol.inverse();
    let g = &k * b;
    let w = b.transpose() * &g;
    let c = cfg.degree();
    let d = p * q;
    let mut h = DMatrix::zeros(d, d);
    for l in 0..q {
        for kk in 0..p {
            let col = kk + p * l;
            for j in 0..q {
                let delta = if j == l { T::one() } else { T::zero() };
                let wl = delta - w[(l, j)];
                for i in 0..p {
                    h[(i + p * j, col)] = c * (k[(i, kk)] * wl - g[(i, l)] * g[(kk, j)]);
                }
            }
        }
    }
    Ok(h)
}

/// One exact draw from π.
///
/// π is the B-marginal of the hierarchy S ~ Wishart_p(p+2, τ⁻² I_p) and,
/// given S, independent columns β_j ~ N(0, S⁻¹). The Wishart factor is drawn
/// by the Bartlett decomposition S = τ⁻² L Lᵀ, so that B = τ L⁻ᵀ Z.
pub fn sample_prior<T: Real, R: Rng + ?Sized>(cfg: &PriorConfig<T>, rng: &mut R) -> Result<DMatrix<T>> {
    let l = bartlett_factor(cfg.p, rng)?;
    let z = DMatrix::<f64>::from_fn(cfg.p, cfg.q, |_, _| rng.sample(StandardNormal));
    let lt = l.transpose();
    let x = lt
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("singular Bartlett factor".into()))?;
    let tau = cfg.tau.as_f64();
    Ok(x.map(|v| T::lit(v * tau)))
}

fn bartlett_factor<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let dof = (p + 2) as f64;
    let mut l = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(dof - i as f64).map_err(|e| Error::Numerical(e.to_string()))?;
        l[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            l[(i, j)] = rng.sample(StandardNormal);
        }
    }
    Ok(l)
}

/// Monte Carlo estimate of E‖B‖²_F under π with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub draws: usize,
}

/// Estimates ∫‖B‖²_F π(dB), to be compared with the bound qpτ².
///
/// Each draw contributes the conditional expectation E[‖B‖²_F | S] =
/// q·tr(S⁻¹), which removes the Gaussian layer of noise. The marginal
/// variance of ‖B‖²_F is infinite under π, so the reported standard error
/// is only indicative.
pub fn prior_second_moment_check<T: Real, R: Rng + ?Sized>(
    cfg: &PriorConfig<T>,
    draws: usize,
    rng: &mut R,
) -> Result<MomentEstimate> {
    if draws < 1000 {
        return Err(Error::invalid(format!("need at least 1000 draws, got {draws}")));
    }
    let tau2 = cfg.tau.as_f64().powi(2);
    let q = cfg.q as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let l = bartlett_factor(cfg.p, rng)?;
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(cfg.p, cfg.p))
            .ok_or_else(|| Error::Numerical("singular Bartlett factor".into()))?;
        let v = q * tau2 * linv.norm_squared();
        sum += v;
        sum_sq += v * v;
    }
    let m = draws as f64;
    let mean = sum / m;
    let var = (sum_sq / m - mean * mean).max(0.0) * m / (m - 1.0);
    Ok(MomentEstimate { mean, std_err: (var / m).sqrt(), draws })
}
