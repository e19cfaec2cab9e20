//! Natural exponential families with canonical and non-canonical links.
//!
//! Every response entry has density `exp{(yθ − b(θ))/a + c(y, a)}` where the
//! natural parameter θ is tied to the linear predictor η = x_iᵀβ_j through a
//! strictly increasing link, `(h∘b′)(θ) = η`. The catalogue below covers the
//! gaussian, logistic, probit, Poisson-log, gamma-log and negative-binomial-log
//! models. θ is always clipped into a closed interval Θ so that the curvature
//! constants used by the theory stay finite.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{ln_gamma, log_norm_cdf, log_norm_pdf, sigmoid, softplus, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyId {
    Gaussian,
    BernoulliLogit,
    BernoulliProbit,
    PoissonLog,
    GammaLog,
    NegbinLog,
}

impl FamilyId {
    pub const ALL: [FamilyId; 6] = [
        FamilyId::Gaussian,
        FamilyId::BernoulliLogit,
        FamilyId::BernoulliProbit,
        FamilyId::PoissonLog,
        FamilyId::GammaLog,
        FamilyId::NegbinLog,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FamilyId::Gaussian => "gaussian",
            FamilyId::BernoulliLogit => "bernoulli_logit",
            FamilyId::BernoulliProbit => "bernoulli_probit",
            FamilyId::PoissonLog => "poisson_log",
            FamilyId::GammaLog => "gamma_log",
            FamilyId::NegbinLog => "negbin_log",
        }
    }

    /// True when h∘b′ is the identity, i.e. θ = η.
    pub fn is_canonical(self) -> bool {
        matches!(
            self,
            FamilyId::Gaussian | FamilyId::BernoulliLogit | FamilyId::PoissonLog
        )
    }

    /// The response distribution, ignoring the link.
    pub fn distribution(self) -> Distn {
        match self {
            FamilyId::Gaussian => Distn::Gaussian,
            FamilyId::BernoulliLogit | FamilyId::BernoulliProbit => Distn::Bernoulli,
            FamilyId::PoissonLog => Distn::Poisson,
            FamilyId::GammaLog => Distn::Gamma,
            FamilyId::NegbinLog => Distn::NegBinomial,
        }
    }

    /// Natural parameter domain is (−∞, 0) rather than ℝ.
    pub fn has_negative_domain(self) -> bool {
        matches!(self, FamilyId::GammaLog | FamilyId::NegbinLog)
    }
}

impl std::fmt::Display for FamilyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FamilyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FamilyId::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown family `{s}`")))
    }
}

/// Response distribution underlying a family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distn {
    Gaussian,
    Bernoulli,
    Poisson,
    Gamma,
    NegBinomial,
}

/// One exponential family together with its link and parameter domain Θ.
///
/// Serialises through [`FamilyBlock`](crate::io::FamilyBlock), so a
/// deserialised family has passed the same validation as [`FamilySpec::new`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "crate::io::FamilyBlock", into = "crate::io::FamilyBlock", bound = "T: Real")]
pub struct FamilySpec<T> {
    id: FamilyId,
    dispersion: T,
    shape: T,
    theta_lo: T,
    theta_hi: T,
    clip_margin: T,
}

pub const DEFAULT_CLIP_MARGIN: f64 = 1e-3;

impl<T: Real> FamilySpec<T> {
    /// Builds and validates a family.
    ///
    /// `dispersion` must be 1 for the Bernoulli, Poisson and negative binomial
    /// families and `1/shape` for gamma; `shape` is ignored by the families
    /// that do not use it.
    pub fn new(
        id: FamilyId,
        dispersion: T,
        shape: T,
        theta_lo: T,
        theta_hi: T,
        clip_margin: T,
    ) -> Result<Self> {
        if !(dispersion > T::zero()) || !dispersion.is_finite() {
            return Err(Error::invalid(format!("dispersion must be positive, got {dispersion}")));
        }
        if !(shape > T::zero()) || !shape.is_finite() {
            return Err(Error::invalid(format!("shape must be positive, got {shape}")));
        }
        if !(clip_margin > T::zero()) || !clip_margin.is_finite() {
            return Err(Error::invalid(format!("clip margin must be positive, got {clip_margin}")));
        }
        let tol = T::lit(1e-9);
        match id {
            FamilyId::Gaussian => {}
            FamilyId::GammaLog => {
                let expect = T::one() / shape;
                if (dispersion - expect).abs() > tol * expect {
                    return Err(Error::invalid(format!(
                        "gamma_log dispersion must equal 1/k = {expect}, got {dispersion}"
                    )));
                }
            }
            _ => {
                if (dispersion - T::one()).abs() > tol {
                    return Err(Error::invalid(format!(
                        "{id} has fixed dispersion 1, got {dispersion}"
                    )));
                }
            }
        }
        if theta_lo != theta_lo || theta_hi != theta_hi {
            return Err(Error::invalid("theta domain endpoints must not be NaN"));
        }
        let spec = FamilySpec { id, dispersion, shape, theta_lo, theta_hi, clip_margin };
        let (lo, hi) = spec.theta_domain();
        if !(lo <= hi) || lo == T::INFINITY || hi == T::NEG_INFINITY {
            return Err(Error::invalid(format!(
                "empty parameter domain [{lo}, {hi}] for {id}"
            )));
        }
        Ok(spec)
    }

    pub fn gaussian(a: T) -> Result<Self> {
        Self::new(FamilyId::Gaussian, a, T::one(), T::NEG_INFINITY, T::INFINITY, T::lit(DEFAULT_CLIP_MARGIN))
    }

    pub fn bernoulli_logit() -> Self {
        Self::new(FamilyId::BernoulliLogit, T::one(), T::one(), T::NEG_INFINITY, T::INFINITY, T::lit(DEFAULT_CLIP_MARGIN))
            .expect("valid default family")
    }

    pub fn bernoulli_probit() -> Self {
        Self::new(FamilyId::BernoulliProbit, T::one(), T::one(), T::NEG_INFINITY, T::INFINITY, T::lit(DEFAULT_CLIP_MARGIN))
            .expect("valid default family")
    }

    pub fn poisson_log() -> Self {
        Self::new(FamilyId::PoissonLog, T::one(), T::one(), T::NEG_INFINITY, T::INFINITY, T::lit(DEFAULT_CLIP_MARGIN))
            .expect("valid default family")
    }

    pub fn gamma_log(k: T) -> Result<Self> {
        if !(k > T::zero()) {
            return Err(Error::invalid(format!("gamma shape must be positive, got {k}")));
        }
        Self::new(FamilyId::GammaLog, T::one() / k, k, T::NEG_INFINITY, T::INFINITY, T::lit(DEFAULT_CLIP_MARGIN))
    }

    pub fn negbin_log(k: T) -> Result<Self> {
        Self::new(FamilyId::NegbinLog, T::one(), k, T::NEG_INFINITY, T::INFINITY, T::lit(DEFAULT_CLIP_MARGIN))
    }

    /// Restricts Θ to `[lo, hi]` (intersected with the natural domain).
    pub fn with_domain(self, lo: T, hi: T) -> Result<Self> {
        Self::new(self.id, self.dispersion, self.shape, lo, hi, self.clip_margin)
    }

    pub fn with_clip_margin(self, delta: T) -> Result<Self> {
        Self::new(self.id, self.dispersion, self.shape, self.theta_lo, self.theta_hi, delta)
    }

    pub fn id(&self) -> FamilyId {
        self.id
    }

    /// Known dispersion a.
    pub fn dispersion(&self) -> T {
        self.dispersion
    }

    /// Gamma shape or negative binomial number of failures k.
    pub fn shape(&self) -> T {
        self.shape
    }

    pub fn clip_margin(&self) -> T {
        self.clip_margin
    }

    /// Configured endpoints before intersection with the natural domain.
    pub fn configured_domain(&self) -> (T, T) {
        (self.theta_lo, self.theta_hi)
    }

    /// Effective Θ = configured interval ∩ natural domain, with the open
    /// endpoint 0 of the gamma/negative binomial domain replaced by −δ.
    pub fn theta_domain(&self) -> (T, T) {
        let hi = if self.id.has_negative_domain() {
            self.theta_hi.min(-self.clip_margin)
        } else {
            self.theta_hi
        };
        (self.theta_lo, hi)
    }

    pub fn in_theta_domain(&self, theta: T) -> bool {
        let (lo, hi) = self.theta_domain();
        theta >= lo && theta <= hi
    }

    fn in_natural_domain(&self, theta: T) -> bool {
        if self.id.has_negative_domain() {
            theta < T::zero() && theta > T::NEG_INFINITY
        } else {
            theta.is_finite()
        }
    }

    fn check_natural(&self, theta: T) -> Result<()> {
        if self.in_natural_domain(theta) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "θ = {theta} outside the natural domain of {}",
                self.id
            )))
        }
    }

    /// Solution of (h∘b′)(θ) = η before clipping.
    pub fn theta_unclipped(&self, eta: T) -> T {
        match self.id {
            FamilyId::Gaussian | FamilyId::BernoulliLogit | FamilyId::PoissonLog => eta,
            FamilyId::BernoulliProbit => log_norm_cdf(eta) - log_norm_cdf(-eta),
            FamilyId::GammaLog => -(-eta).exp(),
            FamilyId::NegbinLog => {
                // θ = log(m/(1+m)), m = e^η/k, written as −log(1 + k e^{−η}).
                let log_k_over_m = self.shape.ln() - eta;
                -softplus(log_k_over_m)
            }
        }
    }

    /// θ(η) clipped into Θ.
    pub fn theta_from_eta(&self, eta: T) -> T {
        let (lo, hi) = self.theta_domain();
        let t = self.theta_unclipped(eta);
        t.max(lo).min(hi)
    }

    /// dθ/dη of the unclipped link map; strictly positive.
    pub fn dtheta_deta(&self, eta: T) -> T {
        match self.id {
            FamilyId::Gaussian | FamilyId::BernoulliLogit | FamilyId::PoissonLog => T::one(),
            FamilyId::BernoulliProbit => {
                // φ/(Φ(1−Φ)) = φ/Φ(η) + φ/Φ(−η)
                let lp = log_norm_pdf(eta);
                (lp - log_norm_cdf(eta)).exp() + (lp - log_norm_cdf(-eta)).exp()
            }
            FamilyId::GammaLog => (-eta).exp(),
            FamilyId::NegbinLog => {
                // 1/(1 + e^η/k)
                sigmoid(self.shape.ln() - eta)
            }
        }
    }

    /// (θ, dθ/dη) with the derivative set to zero where clipping is active.
    pub fn theta_and_slope(&self, eta: T) -> (T, T) {
        let (lo, hi) = self.theta_domain();
        let t = self.theta_unclipped(eta);
        if t < lo {
            (lo, T::zero())
        } else if t > hi {
            (hi, T::zero())
        } else {
            (t, self.dtheta_deta(eta))
        }
    }

    pub fn b_value(&self, theta: T) -> Result<T> {
        self.check_natural(theta)?;
        Ok(self.b_raw(theta))
    }

    pub fn b_prime(&self, theta: T) -> Result<T> {
        self.check_natural(theta)?;
        Ok(self.b1_raw(theta))
    }

    pub fn b_second(&self, theta: T) -> Result<T> {
        self.check_natural(theta)?;
        Ok(self.b2_raw(theta))
    }

    pub(crate) fn b_raw(&self, theta: T) -> T {
        match self.id.distribution() {
            Distn::Gaussian => theta * theta * T::lit(0.5),
            Distn::Bernoulli => softplus(theta),
            Distn::Poisson => theta.exp(),
            Distn::Gamma => -(-theta).ln(),
            Distn::NegBinomial => -self.shape * (-theta.exp_m1()).ln(),
        }
    }

    pub(crate) fn b1_raw(&self, theta: T) -> T {
        match self.id.distribution() {
            Distn::Gaussian => theta,
            Distn::Bernoulli => sigmoid(theta),
            Distn::Poisson => theta.exp(),
            Distn::Gamma => -T::one() / theta,
            Distn::NegBinomial => -self.shape * theta.exp() / theta.exp_m1(),
        }
    }

    pub(crate) fn b2_raw(&self, theta: T) -> T {
        match self.id.distribution() {
            Distn::Gaussian => T::one(),
            Distn::Bernoulli => {
                let s = sigmoid(theta);
                s * (T::one() - s)
            }
            Distn::Poisson => theta.exp(),
            Distn::Gamma => T::one() / (theta * theta),
            Distn::NegBinomial => {
                let d = theta.exp_m1();
                self.shape * theta.exp() / (d * d)
            }
        }
    }

    /// Link h applied to a mean μ; (h∘b′)(θ) recovers η.
    pub fn link(&self, mu: T) -> T {
        match self.id {
            FamilyId::Gaussian => mu,
            FamilyId::BernoulliLogit => (mu / (T::one() - mu)).ln(),
            FamilyId::BernoulliProbit => {
                // Φ⁻¹(μ) = −√2·erfc⁻¹(2μ)
                T::lit(-std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * mu.as_f64()))
            }
            FamilyId::PoissonLog | FamilyId::GammaLog | FamilyId::NegbinLog => mu.ln(),
        }
    }

    /// Sup/inf of b″ and sup of |b′| over Θ.
    pub fn bounds(&self) -> FamilyBounds<T> {
        let (lo, hi) = self.theta_domain();
        let b2 = |t: T| {
            if t.is_finite() {
                self.b2_raw(t)
            } else {
                // limits at infinite endpoints
                match self.id.distribution() {
                    Distn::Gaussian => T::one(),
                    Distn::Bernoulli => T::zero(),
                    Distn::Poisson => {
                        if t > T::zero() {
                            T::INFINITY
                        } else {
                            T::zero()
                        }
                    }
                    Distn::Gamma | Distn::NegBinomial => T::zero(),
                }
            }
        };
        let finite_or_unbounded = |v: T| {
            if v.is_finite() {
                Bound::Finite(v)
            } else {
                Bound::Unbounded
            }
        };
        match self.id.distribution() {
            Distn::Gaussian => FamilyBounds {
                c_lower: T::one(),
                c_upper: Bound::Finite(T::one()),
                u1: finite_or_unbounded(lo.abs().max(hi.abs())),
            },
            Distn::Bernoulli => {
                let peak = T::zero().max(lo).min(hi);
                FamilyBounds {
                    c_lower: b2(lo).min(b2(hi)),
                    c_upper: Bound::Finite(b2(peak)),
                    u1: Bound::Finite(if hi.is_finite() { sigmoid(hi) } else { T::one() }),
                }
            }
            // b″ increasing on Θ for the remaining families.
            Distn::Poisson | Distn::Gamma | Distn::NegBinomial => {
                let u1 = if hi.is_finite() { self.b1_raw(hi).abs() } else { T::INFINITY };
                FamilyBounds {
                    c_lower: b2(lo),
                    c_upper: finite_or_unbounded(b2(hi)),
                    u1: finite_or_unbounded(u1),
                }
            }
        }
    }

    /// True when `y` lies in the response support.
    pub fn in_support(&self, y: T) -> bool {
        if !y.is_finite() {
            return false;
        }
        match self.id.distribution() {
            Distn::Gaussian => true,
            Distn::Bernoulli => y == T::zero() || y == T::one(),
            Distn::Poisson | Distn::NegBinomial => y >= T::zero() && y.fract() == T::zero(),
            Distn::Gamma => y > T::zero(),
        }
    }

    /// log c(y, a), the base-measure term of the density.
    pub fn log_base_measure(&self, y: T) -> T {
        let a = self.dispersion;
        match self.id.distribution() {
            Distn::Gaussian => -y * y / (T::lit(2.0) * a) - T::lit(0.5) * (T::two_pi() * a).ln(),
            Distn::Bernoulli => T::zero(),
            Distn::Poisson => -ln_gamma(y + T::one()),
            Distn::Gamma => {
                let k = self.shape;
                k * k.ln() + (k - T::one()) * y.ln() - ln_gamma(k)
            }
            Distn::NegBinomial => {
                let k = self.shape;
                ln_gamma(y + k) - ln_gamma(k) - ln_gamma(y + T::one())
            }
        }
    }

    /// Full log density log p_θ(y).
    pub fn log_density(&self, y: T, theta: T) -> Result<T> {
        self.check_natural(theta)?;
        if !self.in_support(y) {
            return Err(Error::invalid(format!("y = {y} outside the support of {}", self.id)));
        }
        Ok((y * theta - self.b_raw(theta)) / self.dispersion + self.log_base_measure(y))
    }

    /// One draw from p_θ with the configured dispersion.
    pub fn sample_response<R: Rng + ?Sized>(&self, theta: T, rng: &mut R) -> Result<T> {
        if !self.in_theta_domain(theta) || !theta.is_finite() {
            let (lo, hi) = self.theta_domain();
            return Err(Error::invalid(format!(
                "θ = {theta} outside Θ = [{lo}, {hi}] for {}",
                self.id
            )));
        }
        let t = theta.as_f64();
        let draw = match self.id.distribution() {
            Distn::Gaussian => Normal::new(t, self.dispersion.as_f64().sqrt())
                .map_err(|e| Error::invalid(e.to_string()))?
                .sample(rng),
            Distn::Bernoulli => {
                let p = sigmoid(t);
                if Bernoulli::new(p).map_err(|e| Error::invalid(e.to_string()))?.sample(rng) {
                    1.0
                } else {
                    0.0
                }
            }
            Distn::Poisson => poisson_draw(t.exp(), rng)?,
            Distn::Gamma => {
                let k = self.shape.as_f64();
                let rate = -k * t;
                Gamma::new(k, 1.0 / rate)
                    .map_err(|e| Error::invalid(e.to_string()))?
                    .sample(rng)
            }
            Distn::NegBinomial => {
                // Number of successes (probability e^θ) before k failures,
                // drawn as a gamma mixture of Poissons.
                let k = self.shape.as_f64();
                let odds = -t.exp() / t.exp_m1();
                let lambda = Gamma::new(k, odds)
                    .map_err(|e| Error::invalid(e.to_string()))?
                    .sample(rng);
                poisson_draw(lambda, rng)?
            }
        };
        Ok(T::lit(draw))
    }
}

fn poisson_draw<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<f64> {
    if lambda <= 0.0 {
        return Ok(0.0);
    }
    if !lambda.is_finite() {
        return Err(Error::Numerical(format!("Poisson rate {lambda} is not finite")));
    }
    Ok(Poisson::new(lambda)
        .map_err(|e| Error::invalid(e.to_string()))?
        .sample(rng))
}

/// Either a finite value or a marker that the supremum is +∞.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bound<T> {
    Finite(T),
    Unbounded,
}

impl<T: Real> Bound<T> {
    pub fn finite(self) -> Option<T> {
        match self {
            Bound::Finite(v) => Some(v),
            Bound::Unbounded => None,
        }
    }

    pub fn require(self, constant: &'static str) -> Result<T> {
        self.finite().ok_or(Error::UnboundedConstant { constant })
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Bound::Finite(v) => v.as_f64(),
            Bound::Unbounded => f64::INFINITY,
        }
    }
}

/// Curvature and first-moment constants of a family on its Θ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyBounds<T> {
    /// inf_Θ b″; zero when b″ decays at an infinite endpoint.
    pub c_lower: T,
    /// sup_Θ b″.
    pub c_upper: Bound<T>,
    /// sup_Θ |b′|.
    pub u1: Bound<T>,
}

impl<T: Real> FamilyBounds<T> {
    pub fn c_upper(&self) -> Result<T> {
        self.c_upper.require("C_U")
    }

    /// C_L, rejecting the degenerate value 0.
    pub fn c_lower(&self) -> Result<T> {
        if self.c_lower > T::zero() {
            Ok(self.c_lower)
        } else {
            Err(Error::UnboundedConstant { constant: "1/C_L" })
        }
    }

    pub fn u1(&self) -> Result<T> {
        self.u1.require("U_1")
    }
}

/// Design matrix, responses and the family that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Real> {
    x: DMatrix<T>,
    y: DMatrix<T>,
    family: FamilySpec<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(x: DMatrix<T>, y: DMatrix<T>, family: FamilySpec<T>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::shape(format!(
                "X has {} rows but Y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("design matrix contains non-finite value {v}")));
        }
        for j in 0..y.ncols() {
            for i in 0..y.nrows() {
                let v = y[(i, j)];
                if !family.in_support(v) {
                    return Err(Error::InvalidResponse {
                        value: v.as_f64(),
                        row: i,
                        col: j,
                        family: family.id().name(),
                    });
                }
            }
        }
        Ok(Dataset { x, y, family })
    }

    pub fn x(&self) -> &DMatrix<T> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<T> {
        &self.y
    }

    pub fn family(&self) -> &FamilySpec<T> {
        &self.family
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    /// Hex SHA-256 over the family name, the shapes and the f64 bytes of X
    /// and Y (column-major).
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.family.id().name().as_bytes());
        for d in [self.n(), self.p(), self.q()] {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.x.iter().chain(self.y.iter()) {
            h.update(v.as_f64().to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

/// η = X·B.
pub fn linear_predictor<T: Real>(x: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    if x.ncols() != b.nrows() {
        return Err(Error::shape(format!(
            "X is {}x{} but B is {}x{}",
            x.nrows(),
            x.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(x * b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        // f increasing, f(lo) < 0 < f(hi)
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn theta_from_eta_examples() {
        let logit = FamilySpec::<f64>::bernoulli_logit();
        assert_eq!(logit.theta_from_eta(0.7), 0.7);
        let probit = FamilySpec::<f64>::bernoulli_probit();
        assert!(probit.theta_from_eta(0.0).abs() < 1e-15);

        // bisection oracle: log(−1/θ) = 0
        let gamma = FamilySpec::<f64>::gamma_log(2.0).unwrap();
        let oracle = bisect(|t| (-1.0 / t).ln(), -10.0, -1e-6);
        assert!((oracle + 1.0).abs() < 1e-12);
        assert!((gamma.theta_from_eta(0.0) - oracle).abs() < 1e-12);

        // bisection oracle: log(k e^θ/(1−e^θ)) = η
        let nb = FamilySpec::<f64>::negbin_log(3.0).unwrap();
        let eta = 3.0_f64.ln();
        let oracle = bisect(|t| (3.0 * t.exp() / (1.0 - t.exp())).ln() - eta, -20.0, -1e-9);
        assert!((oracle - 0.5_f64.ln()).abs() < 1e-10);
        assert!((nb.theta_from_eta(eta) - oracle).abs() < 1e-10);
    }

    #[test]
    fn b_function_examples() {
        let g = FamilySpec::<f64>::gaussian(1.0).unwrap();
        assert_eq!(g.b_value(2.0).unwrap(), 2.0);
        assert_eq!(g.b_prime(2.0).unwrap(), 2.0);
        assert_eq!(g.b_second(2.0).unwrap(), 1.0);

        let l = FamilySpec::<f64>::bernoulli_logit();
        assert!((l.b_value(0.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(l.b_prime(0.0).unwrap(), 0.5);
        assert_eq!(l.b_second(0.0).unwrap(), 0.25);

        let p = FamilySpec::<f64>::poisson_log();
        assert_eq!(p.b_value(0.0).unwrap(), 1.0);
        assert_eq!(p.b_prime(0.0).unwrap(), 1.0);
        assert_eq!(p.b_second(0.0).unwrap(), 1.0);
    }

    #[test]
    fn b_rejects_out_of_domain() {
        let g = FamilySpec::<f64>::gamma_log(2.0).unwrap();
        assert!(matches!(g.b_value(0.0), Err(Error::InvalidParameter(_))));
        assert!(g.b_second(0.5).is_err());
        let nb = FamilySpec::<f64>::negbin_log(2.0).unwrap();
        assert!(nb.b_prime(1e-3).is_err());
    }

    #[test]
    fn dtheta_deta_examples() {
        let p = FamilySpec::<f64>::poisson_log();
        assert_eq!(p.dtheta_deta(1.3), 1.0);

        let probit = FamilySpec::<f64>::bernoulli_probit();
        let h = 1e-5;
        let fd = (probit.theta_from_eta(h) - probit.theta_from_eta(-h)) / (2.0 * h);
        assert!((fd - 1.595769).abs() < 1e-6);
        assert!((probit.dtheta_deta(0.0) - fd).abs() < 1e-8);

        let g = FamilySpec::<f64>::gamma_log(1.0).unwrap();
        let fd = (-(-h).exp() + (h).exp()) / (2.0 * h);
        assert!((g.dtheta_deta(0.0) - fd).abs() < 1e-9);
        assert_eq!(g.dtheta_deta(0.0), 1.0);
    }

    fn grid_extrema(f: &FamilySpec<f64>, lo: f64, hi: f64) -> (f64, f64, f64) {
        let mut c_l = f64::INFINITY;
        let mut c_u = 0.0_f64;
        let mut u1 = 0.0_f64;
        let steps = ((hi - lo) / 1e-4).round() as usize;
        for i in 0..=steps {
            let t = lo + (hi - lo) * i as f64 / steps as f64;
            let b2 = f.b_second(t).unwrap();
            c_l = c_l.min(b2);
            c_u = c_u.max(b2);
            u1 = u1.max(f.b_prime(t).unwrap().abs());
        }
        (c_l, c_u, u1)
    }

    #[test]
    fn family_bounds_examples() {
        let g = FamilySpec::<f64>::gaussian(1.0).unwrap().bounds();
        assert_eq!(g.c_lower, 1.0);
        assert_eq!(g.c_upper, Bound::Finite(1.0));
        assert_eq!(g.u1, Bound::Unbounded);

        let l = FamilySpec::<f64>::bernoulli_logit().with_domain(-2.0, 2.0).unwrap();
        let b = l.bounds();
        let (gl, gu, gu1) = grid_extrema(&l, -2.0, 2.0);
        let e2 = 2f64.exp();
        assert!((b.c_lower - e2 / (1.0 + e2).powi(2)).abs() < 1e-15);
        assert!((b.c_lower - 0.104994).abs() < 1e-6);
        assert!((b.c_lower - gl).abs() < 1e-12);
        assert_eq!(b.c_upper.finite().unwrap(), 0.25);
        assert!((gu - 0.25).abs() < 1e-12);
        assert!((b.u1.finite().unwrap() - 0.880797).abs() < 1e-6);
        assert!((b.u1.finite().unwrap() - gu1).abs() < 1e-12);

        let p = FamilySpec::<f64>::poisson_log().with_domain(-1.0, 1.0).unwrap();
        let b = p.bounds();
        let (gl, gu, _) = grid_extrema(&p, -1.0, 1.0);
        assert!((b.c_lower - 0.367879).abs() < 1e-6);
        assert!((b.c_upper.finite().unwrap() - 2.718282).abs() < 1e-6);
        assert!((b.c_lower - gl).abs() < 1e-12 && (b.c_upper.finite().unwrap() - gu).abs() < 1e-12);
    }

    #[test]
    fn gamma_bounds_depend_on_clip_margin() {
        let g = FamilySpec::<f64>::gamma_log(2.0).unwrap().with_domain(-4.0, 0.0).unwrap();
        let b = g.bounds();
        assert!((b.c_upper.finite().unwrap() - 1e6).abs() < 1e-3);
        assert!((b.c_lower - 1.0 / 16.0).abs() < 1e-15);
        let g = g.with_clip_margin(0.1).unwrap();
        assert!((g.bounds().c_upper.finite().unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn unbounded_markers() {
        assert_eq!(FamilySpec::<f64>::poisson_log().bounds().c_upper, Bound::Unbounded);
        assert!(FamilySpec::<f64>::bernoulli_logit().bounds().c_lower().is_err());
    }

    #[test]
    fn dispersion_rules() {
        assert!(FamilySpec::<f64>::new(FamilyId::PoissonLog, 2.0, 1.0, -1.0, 1.0, 1e-3).is_err());
        assert!(FamilySpec::<f64>::new(FamilyId::GammaLog, 0.5, 2.0, -5.0, 0.0, 1e-3).is_ok());
        assert!(FamilySpec::<f64>::new(FamilyId::GammaLog, 1.0, 2.0, -5.0, 0.0, 1e-3).is_err());
        assert!(FamilySpec::<f64>::gaussian(-1.0).is_err());
        assert!(FamilySpec::<f64>::bernoulli_logit().with_domain(2.0, 1.0).is_err());
        assert!(FamilySpec::<f64>::gamma_log(1.0).unwrap().with_domain(0.5, 1.0).is_err());
    }

    #[test]
    fn clipping_keeps_theta_in_domain() {
        let f = FamilySpec::<f64>::gamma_log(1.0).unwrap().with_domain(-3.0, 0.0).unwrap();
        for &eta in &[-20.0, -1.0, 0.0, 5.0, 30.0] {
            let t = f.theta_from_eta(eta);
            assert!(f.in_theta_domain(t), "{eta} -> {t}");
        }
        let (t, s) = f.theta_and_slope(30.0);
        assert_eq!(t, -1e-3);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn sample_response_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let g = FamilySpec::<f64>::gaussian(1.0).unwrap();
        let m: f64 = (0..n).map(|_| g.sample_response(3.0, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((m - 3.0).abs() < 0.02, "{m}");

        let l = FamilySpec::<f64>::bernoulli_logit();
        let m: f64 = (0..n).map(|_| l.sample_response(0.0, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((m - 0.5).abs() < 0.01, "{m}");

        let nb = FamilySpec::<f64>::negbin_log(2.0).unwrap();
        let t = 0.5_f64.ln();
        let m: f64 = (0..n).map(|_| nb.sample_response(t, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((m - nb.b_prime(t).unwrap()).abs() < 0.05 && (m - 2.0).abs() < 0.05, "{m}");
    }

    #[test]
    fn sample_response_rejects_outside_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = FamilySpec::<f64>::bernoulli_logit().with_domain(-1.0, 1.0).unwrap();
        assert!(l.sample_response(2.0, &mut rng).is_err());
        let g = FamilySpec::<f64>::gamma_log(1.0).unwrap();
        assert!(g.sample_response(-1e-4, &mut rng).is_err());
    }

    #[test]
    fn linear_predictor_examples() {
        let b = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 3.0, 4.0, 0.0]);
        assert_eq!(linear_predictor(&DMatrix::identity(3, 3), &b).unwrap(), b);
        assert_eq!(
            linear_predictor(&DMatrix::zeros(4, 3), &b).unwrap(),
            DMatrix::<f64>::zeros(4, 2)
        );
        let x = DMatrix::from_row_slice(3, 2, &[0.3, -1.2, 2.2, 0.7, -0.4, 1.9]);
        let bb = DMatrix::from_row_slice(2, 2, &[1.5, -0.25, 0.8, 2.0]);
        let eta = linear_predictor(&x, &bb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0_f64;
                for k in 0..2 {
                    s += x[(i, k)] * bb[(k, j)];
                }
                assert!((eta[(i, j)] - s).abs() < 1e-12);
            }
        }
        assert!(linear_predictor(&x, &b).is_err());
    }

    #[test]
    fn dataset_validates_support() {
        let x = DMatrix::<f64>::zeros(2, 1);
        let l = FamilySpec::<f64>::bernoulli_logit();
        assert!(Dataset::new(x.clone(), DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), l).is_ok());
        let err = Dataset::new(x.clone(), DMatrix::from_row_slice(2, 1, &[0.0, 0.5]), l).unwrap_err();
        assert!(matches!(err, Error::InvalidResponse { row: 1, col: 0, .. }));
        let p = FamilySpec::<f64>::poisson_log();
        assert!(Dataset::new(x.clone(), DMatrix::from_row_slice(2, 1, &[3.0, -1.0]), p).is_err());
        assert!(Dataset::new(x, DMatrix::zeros(3, 1), p).is_err());
    }

    #[test]
    fn log_density_matches_reference_pmfs() {
        use statrs::distribution::{Discrete, NegativeBinomial, Poisson as SPoisson};
        let p = FamilySpec::<f64>::poisson_log();
        let pois = SPoisson::new(0.4_f64.exp()).unwrap();
        for y in 0..6u64 {
            assert!((p.log_density(y as f64, 0.4).unwrap() - pois.ln_pmf(y)).abs() < 1e-12);
        }
        let nb = FamilySpec::<f64>::negbin_log(2.5).unwrap();
        let t = -0.7_f64;
        let reference = NegativeBinomial::new(2.5, 1.0 - t.exp()).unwrap();
        for y in 0..6u64 {
            assert!((nb.log_density(y as f64, t).unwrap() - reference.ln_pmf(y)).abs() < 1e-12);
        }
    }
}
