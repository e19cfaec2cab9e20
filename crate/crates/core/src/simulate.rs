//! Synthetic low-rank truths, design matrices and response generation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, FamilySpec};
use crate::scalar::Real;

/// An exact-rank coefficient matrix B₀ and bookkeeping about the data it
/// generated.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth<T: Real> {
    pub b0: DMatrix<T>,
    pub rank: usize,
    pub scale: T,
    /// Realised (min, max) of the linear predictors of the last dataset.
    pub eta_range: (T, T),
    /// Entries of the last dataset whose θ was clipped into Θ.
    pub theta_clip_events: usize,
}

impl<T: Real> SyntheticTruth<T> {
    pub fn frobenius(&self) -> T {
        self.b0.norm()
    }
}

fn normal_matrix<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<T> {
    DMatrix::from_fn(rows, cols, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// B₀ = scale·U Vᵀ with U (p×r) and V (q×r) standard normal, redrawn until
/// the r-th singular value is clearly nonzero.
pub fn make_low_rank_truth<T: Real, R: Rng + ?Sized>(
    p: usize,
    q: usize,
    r: usize,
    scale: T,
    rng: &mut R,
) -> Result<SyntheticTruth<T>> {
    if r > p.min(q) {
        return Err(Error::invalid(format!("rank {r} exceeds min(p, q) = {}", p.min(q))));
    }
    if !(scale > T::zero()) || !scale.is_finite() {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    let truth = |b0| SyntheticTruth { b0, rank: r, scale, eta_range: (T::zero(), T::zero()), theta_clip_events: 0 };
    if r == 0 {
        return Ok(truth(DMatrix::zeros(p, q)));
    }
    for _ in 0..100 {
        let u = normal_matrix::<T, _>(p, r, rng);
        let v = normal_matrix::<T, _>(q, r, rng);
        let b0 = u * v.transpose() * scale;
        let sv = b0.clone().svd(false, false).singular_values;
        let mut s: Vec<T> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        if s[r - 1] > s[0] * T::lit(1e-6) {
            return Ok(truth(b0));
        }
    }
    Err(Error::Numerical("could not draw a well-conditioned low-rank truth".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMode {
    /// iid N(0, 1) entries.
    Iid,
    /// iid N(0, 1) entries, then each column rescaled to norm √n.
    ColumnNormalized,
}

pub fn make_design<T: Real, R: Rng + ?Sized>(n: usize, p: usize, mode: DesignMode, rng: &mut R) -> Result<DMatrix<T>> {
    if n == 0 || p == 0 {
        return Err(Error::invalid("design dimensions must be positive"));
    }
    let mut x = normal_matrix::<T, _>(n, p, rng);
    if mode == DesignMode::ColumnNormalized {
        let target = T::from_usize_lossy(n).sqrt();
        for mut c in x.column_iter_mut() {
            let nrm = c.norm();
            if nrm > T::zero() {
                c *= target / nrm;
            }
        }
    }
    Ok(x)
}

/// Draws Y_ij ~ p_{θ_ij}, θ_ij = θ(x_iᵀβ₀_j), recording the predictor range
/// and the number of clipped entries in `truth`.
pub fn generate_dataset<T: Real, R: Rng + ?Sized>(
    x: &DMatrix<T>,
    truth: &mut SyntheticTruth<T>,
    family: &FamilySpec<T>,
    rng: &mut R,
) -> Result<Dataset<T>> {
    generate_dataset_with(x, truth, family, family, rng)
}

/// As [`generate_dataset`], but draws responses from `truth_family` while the
/// returned dataset is labelled with `fitted_family` (both must share the
/// response support).
pub fn generate_dataset_with<T: Real, R: Rng + ?Sized>(
    x: &DMatrix<T>,
    truth: &mut SyntheticTruth<T>,
    truth_family: &FamilySpec<T>,
    fitted_family: &FamilySpec<T>,
    rng: &mut R,
) -> Result<Dataset<T>> {
    if x.ncols() != truth.b0.nrows() {
        return Err(Error::shape(format!(
            "X has {} columns but B₀ has {} rows",
            x.ncols(),
            truth.b0.nrows()
        )));
    }
    let eta = x * &truth.b0;
    let mut lo = T::INFINITY;
    let mut hi = T::NEG_INFINITY;
    let mut clips = 0;
    let mut y = DMatrix::zeros(eta.nrows(), eta.ncols());
    // Column-major traversal keeps the draw order stable.
    for j in 0..eta.ncols() {
        for i in 0..eta.nrows() {
            let e = eta[(i, j)];
            lo = lo.min(e);
            hi = hi.max(e);
            let raw = truth_family.theta_unclipped(e);
            let theta = truth_family.theta_from_eta(e);
            if raw != theta {
                clips += 1;
            }
            y[(i, j)] = truth_family.sample_response(theta, rng)?;
        }
    }
    if eta.is_empty() {
        lo = T::zero();
        hi = T::zero();
    }
    truth.eta_range = (lo, hi);
    truth.theta_clip_events = clips;
    Dataset::new(x.clone(), y, *fitted_family)
}

/// Scale s such that the `coverage` quantile of |η| for X·(s·B_unit) equals
/// `eta_bound`. Returns 1 when X·B_unit vanishes.
pub fn calibrate_scale<T: Real>(x: &DMatrix<T>, b_unit: &DMatrix<T>, eta_bound: T, coverage: f64) -> Result<T> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::invalid(format!("coverage must lie in (0, 1], got {coverage}")));
    }
    let eta = x * b_unit;
    let mut a: Vec<f64> = eta.iter().map(|v| v.abs().as_f64()).collect();
    if a.is_empty() {
        return Ok(T::one());
    }
    a.sort_by(f64::total_cmp);
    let idx = ((coverage * a.len() as f64).ceil() as usize).clamp(1, a.len()) - 1;
    let qv = a[idx];
    if qv == 0.0 {
        return Ok(T::one());
    }
    Ok(eta_bound / T::lit(qv))
}

/// Draws a rank-r truth and rescales it so that at least `coverage` of the
/// entries of X·B₀ satisfy |η| ≤ `eta_bound`.
pub fn calibrated_truth<T: Real, R: Rng + ?Sized>(
    x: &DMatrix<T>,
    q: usize,
    r: usize,
    eta_bound: T,
    coverage: f64,
    rng: &mut R,
) -> Result<SyntheticTruth<T>> {
    let mut t = make_low_rank_truth(x.ncols(), q, r, T::one(), rng)?;
    if r == 0 {
        return Ok(t);
    }
    let s = calibrate_scale(x, &t.b0, eta_bound, coverage)?;
    t.b0 *= s;
    t.scale = s;
    Ok(t)
}

/// κ = σ_min(X)/√n, or 0 when n < p.
pub fn compute_kappa<T: Real>(x: &DMatrix<T>) -> T {
    let (n, p) = x.shape();
    if n < p || n == 0 || p == 0 {
        return T::zero();
    }
    let sv = x.clone().svd(false, false).singular_values;
    let smin = sv.iter().fold(T::INFINITY, |m, v| m.min(*v));
    smin / T::from_usize_lossy(n).sqrt()
}

/// ‖X(B̂ − B₀)‖²_F/(nq).
pub fn prediction_error<T: Real>(x: &DMatrix<T>, b_hat: &DMatrix<T>, b0: &DMatrix<T>) -> Result<T> {
    if b_hat.shape() != b0.shape() || x.ncols() != b0.nrows() {
        return Err(Error::shape(format!(
            "X {:?}, B̂ {:?}, B₀ {:?} do not conform",
            x.shape(),
            b_hat.shape(),
            b0.shape()
        )));
    }
    let nq = x.nrows() * b0.ncols();
    if nq == 0 {
        return Ok(T::zero());
    }
    Ok((x * (b_hat - b0)).norm_squared() / T::from_usize_lossy(nq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truth_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: SyntheticTruth<f64> = make_low_rank_truth(4, 3, 0, 1.0, &mut rng).unwrap();
        assert_eq!(t.b0, DMatrix::zeros(4, 3));
        assert_eq!(t.frobenius(), 0.0);

        let t: SyntheticTruth<f64> = make_low_rank_truth(4, 3, 2, 1.0, &mut rng).unwrap();
        let sv = t.b0.clone().svd(false, false).singular_values;
        assert_eq!(sv.iter().filter(|&&s| s > 1e-10).count(), 2);

        let a: SyntheticTruth<f64> = make_low_rank_truth(5, 4, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b: SyntheticTruth<f64> = make_low_rank_truth(5, 4, 2, 2.0, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert!((b.frobenius() - 2.0 * a.frobenius()).abs() < 1e-12);

        assert!(make_low_rank_truth::<f64, _>(2, 3, 3, 1.0, &mut rng).is_err());
    }

    #[test]
    fn design_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: DMatrix<f64> = make_design(50, 3, DesignMode::ColumnNormalized, &mut rng).unwrap();
        for c in x.column_iter() {
            assert!((c.norm() - 50f64.sqrt()).abs() < 1e-12);
        }
        let a: DMatrix<f64> = make_design(5, 2, DesignMode::Iid, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b: DMatrix<f64> = make_design(5, 2, DesignMode::Iid, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kappa_examples() {
        let x = DMatrix::<f64>::identity(4, 4);
        assert!((compute_kappa(&x) - 0.5).abs() < 1e-15);
        let x = DMatrix::<f64>::identity(2, 2) * 2.0;
        assert!((compute_kappa(&x) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(compute_kappa(&DMatrix::<f64>::zeros(2, 3)), 0.0);
    }

    #[test]
    fn prediction_error_examples() {
        let x = DMatrix::<f64>::identity(3, 3);
        let b0 = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(prediction_error(&x, &b0, &b0).unwrap(), 0.0);
        let bh = b0.add_scalar(0.5);
        let v = prediction_error(&x, &bh, &b0).unwrap();
        assert!((v - (&bh - &b0).norm_squared() / 6.0).abs() < 1e-15);
    }

    #[test]
    fn calibration_hits_target_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: DMatrix<f64> = make_design(200, 5, DesignMode::Iid, &mut rng).unwrap();
        let t = calibrated_truth(&x, 4, 2, 3.0, 0.99, &mut rng).unwrap();
        let eta = &x * &t.b0;
        let inside = eta.iter().filter(|v| v.abs() <= 3.0 + 1e-12).count();
        assert!(inside as f64 >= 0.99 * eta.len() as f64);
    }
}
