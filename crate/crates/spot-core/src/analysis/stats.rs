use serde::Serialize;
use statrs::function::beta::checked_beta_reg;

use super::AnalysisError;
use crate::scalar::{clamp_unit, Scalar};

fn check_score<T: Scalar>(s: T) -> Result<T, AnalysisError> {
    let hundred = T::of(100.0);
    if s.is_finite() && s >= T::zero() && s <= hundred {
        Ok(s)
    } else {
        Err(AnalysisError::ScoreOutOfRange(s.widen()))
    }
}

/// `100 · (transferred − baseline) / (100 − baseline)`, in percent.
/// Negative values mean the transfer hurt.
pub fn relative_error_reduction<T: Scalar>(baseline: T, transferred: T) -> Result<T, AnalysisError> {
    let hundred = T::of(100.0);
    let b = check_score(baseline)?;
    let t = check_score(transferred)?;
    if b == hundred {
        return Err(AnalysisError::BaselinePerfect);
    }
    Ok(hundred * (t - b) / (hundred - b))
}

/// Mean and population standard deviation (divides by `n`).
pub fn aggregate_runs<T: Scalar>(scores: &[T]) -> Result<(T, T), AnalysisError> {
    if scores.is_empty() {
        return Err(AnalysisError::EmptyList);
    }
    // Welford
    let mut mean = T::zero();
    let mut m2 = T::zero();
    for (i, &x) in scores.iter().enumerate() {
        let n = T::of_usize(i + 1);
        let delta = x - mean;
        mean = mean + delta / n;
        m2 = m2 + delta * (x - mean);
    }
    let var = (m2 / T::of_usize(scores.len())).max(T::zero());
    Ok((mean, var.sqrt()))
}

/// Sample Pearson `r` and its two-sided p-value from Student's t with
/// `n − 2` degrees of freedom.
pub fn pearson<T: Scalar>(xs: &[T], ys: &[T]) -> Result<(T, T), AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    let n = xs.len();
    if n < 3 {
        return Err(AnalysisError::TooFewPoints(n));
    }
    let nf = T::of_usize(n);
    let mx = xs.iter().copied().sum::<T>() / nf;
    let my = ys.iter().copied().sum::<T>() / nf;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx == T::zero() {
        return Err(AnalysisError::DegenerateVariance("xs"));
    }
    if syy == T::zero() {
        return Err(AnalysisError::DegenerateVariance("ys"));
    }
    let r = clamp_unit(sxy / (sxx.sqrt() * syy.sqrt()));
    Ok((r, T::of(two_sided_p(r.widen(), n))))
}

fn two_sided_p(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let one_minus = 1.0 - r * r;
    if one_minus <= 0.0 {
        return 0.0;
    }
    let t2 = r * r * df / one_minus;
    // P(|T| > t) = I_{df / (df + t²)}(df/2, 1/2)
    let x = df / (df + t2);
    checked_beta_reg(df / 2.0, 0.5, x)
        .unwrap_or(f64::NAN)
        .clamp(0.0, 1.0)
}

/// Similarity-versus-transfer points for one target and their correlation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport<T> {
    pub target: String,
    /// `(similarity, relative error reduction)` per source prompt.
    pub points: Vec<(T, T)>,
    pub r: T,
    pub p_value: T,
}

pub fn correlation_report<T: Scalar>(
    target: impl Into<String>,
    points: Vec<(T, T)>,
) -> Result<CorrelationReport<T>, AnalysisError> {
    let xs: Vec<T> = points.iter().map(|p| p.0).collect();
    let ys: Vec<T> = points.iter().map(|p| p.1).collect();
    let (r, p_value) = pearson(&xs, &ys)?;
    Ok(CorrelationReport {
        target: target.into(),
        points,
        r,
        p_value,
    })
}
