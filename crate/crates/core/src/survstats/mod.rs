//! Survival analysis: Cox regression, concordance, proportional-hazards
//! diagnostics, Kaplan-Meier curves and the log-rank test.

mod concordance;
mod cox;
mod dataset;
mod dense;
mod km;
mod schoenfeld;

pub use concordance::harrell_c;
pub use cox::{cox_fit, cox_fit_with, partial_likelihood, CoxFit, CoxOptions, CoxTerm, Ties};
pub use dataset::{attach_covariate, CovariateSpec, DesignColumn, SurvivalDataset};
pub use km::{km_curve, logrank, KmCurve, KmStep, LogRank};
pub use schoenfeld::{schoenfeld_residuals, schoenfeld_test, PhTest, PhTestRow};

use crate::error::{Error, Result};

/// `(s - min) / (max - min)` with the training range; values outside the
/// range map outside `[0, 1]`.
pub fn minmax_normalize(scores: &[f64], train_min: f64, train_max: f64) -> Result<Vec<f64>> {
    if !(train_max > train_min) || !train_min.is_finite() || !train_max.is_finite() {
        return Err(Error::invalid(format!("degenerate training range [{train_min}, {train_max}]")));
    }
    Ok(scores.iter().map(|s| (s - train_min) / (train_max - train_min)).collect())
}

/// Median of the scores; the mean of the two central values for even `n`.
pub fn median(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("median of an empty set"));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Ok(if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 })
}

/// Group 1 (high) for scores at or above the median, 0 otherwise.
pub fn median_split(scores: &[f64]) -> Result<Vec<usize>> {
    if scores.len() < 2 {
        return Err(Error::invalid("median split needs at least 2 scores"));
    }
    let m = median(scores)?;
    let groups: Vec<usize> = scores.iter().map(|&s| usize::from(s >= m)).collect();
    if groups.iter().all(|&g| g == groups[0]) {
        return Err(Error::invalid("median split leaves one group empty"));
    }
    Ok(groups)
}

/// Group index = number of cutoffs at or below the score, so cutoffs
/// `(30, 75)` give `<30`, `30-75` and `>=75`.
pub fn cutoff_groups(scores: &[f64], cutoffs: &[f64]) -> Result<Vec<usize>> {
    if cutoffs.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("cutoffs must be strictly increasing"));
    }
    Ok(scores.iter().map(|&s| cutoffs.iter().filter(|&&c| s >= c).count()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minmax_is_not_clamped() {
        let v = minmax_normalize(&[2.0, 6.0, 10.0, -2.0], 2.0, 10.0).unwrap();
        assert_eq!(v, vec![0.0, 0.5, 1.0, -0.5]);
        assert!(minmax_normalize(&[1.0], 3.0, 3.0).is_err());
    }

    #[test]
    fn median_split_cases() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert_eq!(median_split(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0, 0, 1, 1]);
        assert_eq!(median_split(&[5.0, 1.0, 3.0]).unwrap(), vec![1, 0, 1]);
        assert!(median_split(&[2.0; 4]).is_err());
    }

    #[test]
    fn cutoffs_make_three_groups() {
        assert_eq!(cutoff_groups(&[10.0, 30.0, 74.9, 75.0, 99.0], &[30.0, 75.0]).unwrap(), vec![0, 1, 1, 2, 2]);
        assert!(cutoff_groups(&[1.0], &[75.0, 30.0]).is_err());
    }
}
