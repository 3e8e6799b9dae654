//! Scalar numerics shared by the whole crate: the exact simplex projection
//! (sparsemax) with its support threshold and backward pass, a stabilized
//! softmax, categorical KL divergence, and a central finite-difference
//! gradient-check harness.

use crate::error::{OptError, Result};

/// Clamp applied to the second argument of [`categorical_kl`] inside the log,
/// so zero-support posteriors yield a finite (large) divergence.
pub const KL_CLAMP: f64 = 1e-8;

/// A vector on the probability simplex: nonnegative entries summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Validates simplex membership (sum within 1e-9 of 1, entries >= 0).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(OptError::InvalidInput(
                "probability vector entries must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(OptError::InvalidInput(format!(
                "probability vector sums to {sum}, expected 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Support size and threshold of a sparsemax projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportResult {
    pub support_size: usize,
    pub threshold: f64,
    pub support_mask: Vec<bool>,
}

fn check_finite(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(OptError::InvalidInput("empty input vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(OptError::InvalidInput("non-finite input".into()));
    }
    Ok(())
}

/// Threshold computation on an unmasked vector. Returns (support size m,
/// threshold sigma) such that sum_i [z_i - sigma]_+ = 1.
fn support_of(z: &[f64]) -> (usize, f64) {
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut m = 1;
    let mut sigma = sorted[0] - 1.0;
    for (k, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k1 = (k + 1) as f64;
        // condition of the support rule on the descending-sorted vector
        if k1 * v > cumsum - 1.0 {
            m = k + 1;
            sigma = (cumsum - 1.0) / k1;
        }
    }
    (m, sigma)
}

/// Euclidean projection of `z` onto the probability simplex. Entries at or
/// below the threshold come out as exact zeros. Masked-out positions are
/// excluded from the projection domain and are exactly 0 in the output.
pub fn sparsemax(z: &[f64], mask: Option<&[bool]>) -> Result<ProbabilityVector> {
    check_finite(z)?;
    if let Some(m) = mask {
        if m.len() != z.len() {
            return Err(OptError::InvalidInput("mask length mismatch".into()));
        }
        let active: Vec<f64> = z
            .iter()
            .zip(m)
            .filter_map(|(&v, &keep)| keep.then_some(v))
            .collect();
        if active.is_empty() {
            return Err(OptError::InvalidInput("all positions masked".into()));
        }
        let (_, sigma) = support_of(&active);
        let mut out = vec![0.0; z.len()];
        for i in 0..z.len() {
            if m[i] {
                out[i] = (z[i] - sigma).max(0.0);
            }
        }
        ProbabilityVector::new(normalize_residual(out))
    } else {
        let (_, sigma) = support_of(z);
        let out: Vec<f64> = z.iter().map(|&v| (v - sigma).max(0.0)).collect();
        ProbabilityVector::new(normalize_residual(out))
    }
}

/// The threshold construction guarantees the sum is 1 up to rounding; nudge
/// the largest entry so the simplex invariant holds to full precision.
fn normalize_residual(mut p: Vec<f64>) -> Vec<f64> {
    let sum: f64 = p.iter().sum();
    let resid = 1.0 - sum;
    if resid != 0.0 {
        let imax = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        p[imax] += resid;
    }
    p
}

/// Support size and threshold for an (unmasked) sparsemax input.
pub fn sparsemax_support(z: &[f64]) -> Result<SupportResult> {
    check_finite(z)?;
    let (m, sigma) = support_of(z);
    let support_mask: Vec<bool> = z.iter().map(|&v| v > sigma).collect();
    Ok(SupportResult {
        support_size: m,
        threshold: sigma,
        support_mask,
    })
}

/// Vector-Jacobian product of sparsemax at an output `p`: on the support S,
/// J = I - ones/|S|; rows and columns off the support are zero.
pub fn sparsemax_backward(p: &[f64], upstream: &[f64]) -> Vec<f64> {
    assert_eq!(p.len(), upstream.len(), "shape mismatch");
    let support: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    if support.is_empty() {
        return vec![0.0; p.len()];
    }
    let mean: f64 = support.iter().map(|&i| upstream[i]).sum::<f64>() / support.len() as f64;
    let mut out = vec![0.0; p.len()];
    for &i in &support {
        out[i] = upstream[i] - mean;
    }
    out
}

/// Max-subtracted softmax; masked positions get exactly 0.
pub fn softmax(z: &[f64], mask: Option<&[bool]>) -> Result<ProbabilityVector> {
    check_finite(z)?;
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    if let Some(m) = mask {
        if m.len() != z.len() {
            return Err(OptError::InvalidInput("mask length mismatch".into()));
        }
    }
    let max = (0..z.len())
        .filter(|&i| keep(i))
        .map(|i| z[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(OptError::InvalidInput("all positions masked".into()));
    }
    let mut out = vec![0.0; z.len()];
    let mut sum = 0.0;
    for i in 0..z.len() {
        if keep(i) {
            out[i] = (z[i] - max).exp();
            sum += out[i];
        }
    }
    for v in &mut out {
        *v /= sum;
    }
    ProbabilityVector::new(out)
}

/// KL(p || q) with q clamped elementwise to [`KL_CLAMP`] inside the log.
pub fn categorical_kl(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(OptError::InvalidInput("length mismatch".into()));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.values().iter().zip(q.values()) {
        if pi > 0.0 {
            kl += pi * (pi.ln() - qi.max(KL_CLAMP).ln());
        }
    }
    Ok(kl.max(0.0))
}

/// Per-coordinate outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoordStatus {
    Pass,
    Fail,
    /// The function's piecewise structure changed under the +/-h probe
    /// (e.g. a sparsemax support flip); the comparison is not meaningful.
    Kink,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct CoordReport {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub status: CoordStatus,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<CoordReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.coords
            .iter()
            .all(|c| matches!(c.status, CoordStatus::Pass | CoordStatus::Kink))
    }

    pub fn failures(&self) -> Vec<&CoordReport> {
        self.coords
            .iter()
            .filter(|c| matches!(c.status, CoordStatus::Fail | CoordStatus::NonFinite))
            .collect()
    }

    pub fn kink_count(&self) -> usize {
        self.coords
            .iter()
            .filter(|c| c.status == CoordStatus::Kink)
            .count()
    }
}

/// Central finite differences against an analytic gradient.
///
/// `signature`, when given, fingerprints the piecewise region of `f` at a
/// point; coordinates whose +/-h probes land in different regions are
/// reported as kinks instead of pass/fail.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic_grad: &[f64],
    step: f64,
    rel_tol: f64,
    mut signature: Option<&mut dyn FnMut(&[f64]) -> u64>,
) -> GradCheckReport {
    assert!(step > 0.0);
    assert_eq!(x.len(), analytic_grad.len());
    let mut coords = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let fp = f(&xp);
        let sig_p = signature.as_mut().map(|s| s(&xp));
        xp[i] = x[i] - step;
        let fm = f(&xp);
        let sig_m = signature.as_mut().map(|s| s(&xp));
        xp[i] = x[i];
        let numeric = (fp - fm) / (2.0 * step);
        let analytic = analytic_grad[i];
        let status = if !fp.is_finite() || !fm.is_finite() {
            CoordStatus::NonFinite
        } else if sig_p != sig_m {
            CoordStatus::Kink
        } else {
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            if (numeric - analytic).abs() / denom <= rel_tol {
                CoordStatus::Pass
            } else {
                CoordStatus::Fail
            }
        };
        let denom = numeric.abs().max(analytic.abs()).max(1e-6);
        coords.push(CoordReport {
            index: i,
            analytic,
            numeric,
            rel_err: (numeric - analytic).abs() / denom,
            status,
        });
    }
    GradCheckReport { coords }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn sparsemax_two_element_cases() {
        let p = sparsemax(&[0.5, 0.0], None).unwrap();
        assert_close(p.values(), &[0.75, 0.25], 1e-12);
        let p = sparsemax(&[2.0, 0.0], None).unwrap();
        assert_close(p.values(), &[1.0, 0.0], 1e-12);
        assert_eq!(p.values()[1], 0.0, "hard zero expected");
    }

    #[test]
    fn sparsemax_uniform_on_constant_input() {
        for c in [-3.0, 0.0, 7.5] {
            let p = sparsemax(&[c, c, c], None).unwrap();
            assert_close(p.values(), &[1.0 / 3.0; 3], 1e-12);
        }
    }

    #[test]
    fn sparsemax_shift_invariance() {
        let z = [0.3, -1.2, 0.9, 0.1];
        let base = sparsemax(&z, None).unwrap();
        for c in [-5.0, 0.7, 123.0] {
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let p = sparsemax(&shifted, None).unwrap();
            assert_close(p.values(), base.values(), 1e-12);
        }
    }

    #[test]
    fn sparsemax_masked_positions_are_zero() {
        let p = sparsemax(&[5.0, 0.5, 0.0], Some(&[false, true, true])).unwrap();
        assert_eq!(p.values()[0], 0.0);
        assert_close(&p.values()[1..], &[0.75, 0.25], 1e-12);
    }

    #[test]
    fn sparsemax_error_paths() {
        assert!(sparsemax(&[f64::NAN, 0.0], None).is_err());
        assert!(sparsemax(&[1.0, 2.0], Some(&[false, false])).is_err());
        assert!(sparsemax(&[], None).is_err());
    }

    #[test]
    fn support_examples() {
        let s = sparsemax_support(&[3.1, 2.6, 0.1]).unwrap();
        assert_eq!(s.support_size, 2);
        assert!((s.threshold - 2.35).abs() < 1e-12);
        let p = sparsemax(&[3.1, 2.6, 0.1], None).unwrap();
        assert_close(p.values(), &[0.75, 0.25, 0.0], 1e-12);

        let s = sparsemax_support(&[2.0, 0.0]).unwrap();
        assert_eq!(s.support_size, 1);
        assert!((s.threshold - 1.0).abs() < 1e-12);

        let s = sparsemax_support(&[0.4; 5]).unwrap();
        assert_eq!(s.support_size, 5);
        assert!((s.threshold - (0.4 - 0.2)).abs() < 1e-12);
        assert_eq!(
            s.support_mask.iter().filter(|&&b| b).count(),
            s.support_size
        );
    }

    #[test]
    fn support_threshold_satisfies_unit_sum() {
        let z = [1.3, -0.2, 0.8, 0.8, -5.0];
        let s = sparsemax_support(&z).unwrap();
        let total: f64 = z.iter().map(|v| (v - s.threshold).max(0.0)).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_examples() {
        assert_close(&sparsemax_backward(&[1.0, 0.0], &[3.0, -7.0]), &[0.0, 0.0], 1e-15);
        assert_close(
            &sparsemax_backward(&[0.75, 0.25], &[1.0, 0.0]),
            &[0.5, -0.5],
            1e-15,
        );
        assert_close(
            &sparsemax_backward(&[0.2, 0.5, 0.3], &[0.0, 0.0, 0.0]),
            &[0.0; 3],
            1e-15,
        );
    }

    #[test]
    fn softmax_basics() {
        let p = softmax(&[0.0, 0.0], None).unwrap();
        assert_close(p.values(), &[0.5, 0.5], 1e-12);
        let base = softmax(&[0.3, -0.4, 1.0], None).unwrap();
        let shifted = softmax(&[100.3, 99.6, 101.0], None).unwrap();
        assert_close(base.values(), shifted.values(), 1e-12);
        // no overflow on extreme logits
        let p = softmax(&[1000.0, 0.0], None).unwrap();
        assert!((p.values()[0] - 1.0).abs() < 1e-12);
        assert!(softmax(&[1.0], Some(&[false])).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = ProbabilityVector::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(categorical_kl(&p, &p).unwrap(), 0.0);
        let one_hot = ProbabilityVector::new(vec![1.0, 0.0]).unwrap();
        let unif = ProbabilityVector::new(vec![0.5, 0.5]).unwrap();
        assert!((categorical_kl(&one_hot, &unif).unwrap() - 2f64.ln()).abs() < 1e-12);
        // clamped zero-support posterior stays finite
        let kl = categorical_kl(&unif, &one_hot).unwrap();
        let expected = 0.5 * (0.5 / KL_CLAMP).ln() + 0.5 * (0.5f64 / 1.0).ln();
        assert!((kl - expected).abs() < 1e-9);
        let p3 = ProbabilityVector::new(vec![1.0 / 3.0; 3]).unwrap();
        assert!(categorical_kl(&p3, &unif).is_err());
    }

    #[test]
    fn fd_check_polynomial() {
        let mut f = |x: &[f64]| x[0] * x[0];
        let report =
            finite_difference_check(&mut f, &[3.0], &[6.0], 1e-5, 1e-4, None);
        assert!(report.passed());
        let report =
            finite_difference_check(&mut f, &[3.0], &[5.0], 1e-5, 1e-4, None);
        assert!(!report.passed());
        assert_eq!(report.failures().len(), 1);
    }

    #[test]
    fn fd_check_sparsemax_head() {
        // sparsemax composed with a smooth head, at a point with a clear
        // support margin
        let z0 = vec![0.6, 0.1, -2.0];
        let head = |p: &ProbabilityVector| -> f64 {
            p.values().iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum()
        };
        let mut f = |z: &[f64]| head(&sparsemax(z, None).unwrap());
        let p0 = sparsemax(&z0, None).unwrap();
        let dh: Vec<f64> = p0
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| 2.0 * (i as f64 + 1.0) * v)
            .collect();
        let grad = sparsemax_backward(p0.values(), &dh);
        let mut sig = |z: &[f64]| -> u64 {
            sparsemax_support(z)
                .unwrap()
                .support_mask
                .iter()
                .fold(0u64, |acc, &b| (acc << 1) | b as u64)
        };
        let report =
            finite_difference_check(&mut f, &z0, &grad, 1e-5, 1e-4, Some(&mut sig));
        assert!(report.passed(), "{:?}", report.failures());
    }

    #[test]
    fn fd_check_reports_nonfinite() {
        let mut f = |x: &[f64]| if x[0] > 1.0 { f64::NAN } else { x[0] };
        let report = finite_difference_check(&mut f, &[1.0], &[1.0], 1e-5, 1e-4, None);
        assert_eq!(report.coords[0].status, CoordStatus::NonFinite);
        assert!(!report.passed());
    }

    #[test]
    fn order_preservation() {
        let z = [0.9, 0.1, 0.9, -0.3];
        let p = sparsemax(&z, None).unwrap();
        for i in 0..z.len() {
            for j in 0..z.len() {
                if z[i] >= z[j] {
                    assert!(p.values()[i] >= p.values()[j] - 1e-12);
                }
            }
        }
    }
}
