//! Proportional-hazards check from Schoenfeld residuals against
//! Kaplan-Meier-transformed time.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::cox::{CoxFit, Ties};
use super::km::KmCurve;
use super::SurvivalDataset;
use crate::error::{Error, Result};

/// Residuals `x_k - xbar(t_k)` for every event, in ascending time order
/// (ties by subject index), as `(event times, n_events x p residuals)`.
/// Under Efron ties `xbar` is averaged over the tie's weighted steps.
pub fn schoenfeld_residuals(data: &SurvivalDataset, beta: &[f64], ties: Ties) -> (Vec<f64>, Vec<f64>) {
    let n = data.len();
    let p = data.n_covariates();
    let eta: Vec<f64> = (0..n).map(|i| data.row(i).iter().zip(beta).map(|(x, b)| x * b).sum()).collect();
    let shift = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let risk: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data.time[b].total_cmp(&data.time[a]).then(b.cmp(&a)));

    let mut blocks: Vec<(f64, Vec<f64>)> = Vec::new();
    let (mut s0, mut s1) = (0.0, vec![0.0; p]);
    let mut start = 0;
    while start < n {
        let t = data.time[order[start]];
        let mut end = start;
        while end < n && data.time[order[end]] == t {
            end += 1;
        }
        let (mut d0, mut d1) = (0.0, vec![0.0; p]);
        let mut dead = Vec::new();
        for &i in &order[start..end] {
            let x = data.row(i);
            s0 += risk[i];
            for a in 0..p {
                s1[a] += risk[i] * x[a];
            }
            if data.event[i] {
                dead.push(i);
                d0 += risk[i];
                for a in 0..p {
                    d1[a] += risk[i] * x[a];
                }
            }
        }
        if !dead.is_empty() {
            let d = dead.len();
            let mut xbar = vec![0.0; p];
            for l in 0..d {
                let f = match ties {
                    Ties::Efron => l as f64 / d as f64,
                    Ties::Breslow => 0.0,
                };
                let z0 = s0 - f * d0;
                for a in 0..p {
                    xbar[a] += (s1[a] - f * d1[a]) / z0 / d as f64;
                }
            }
            dead.sort_unstable();
            let mut rows = Vec::with_capacity(d * p);
            for &i in &dead {
                rows.extend(data.row(i).iter().zip(&xbar).map(|(x, m)| x - m));
            }
            blocks.push((t, rows));
        }
        start = end;
    }
    blocks.reverse();
    let mut times = Vec::new();
    let mut resid = Vec::new();
    for (t, rows) in blocks {
        times.extend(std::iter::repeat_n(t, rows.len() / p.max(1)));
        resid.extend(rows);
    }
    (times, resid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhTestRow {
    pub name: String,
    /// Correlation of the scaled residuals with transformed time.
    pub rho: f64,
    pub chi2: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhTest {
    pub rows: Vec<PhTestRow>,
    pub global_chi2: f64,
    pub global_df: usize,
    pub global_p: f64,
}

pub fn schoenfeld_test(fit: &CoxFit, data: &SurvivalDataset) -> Result<PhTest> {
    let p = data.n_covariates();
    if fit.terms.len() != p {
        return Err(Error::invalid("fit and dataset have different covariates"));
    }
    let ndead = data.n_events();
    if ndead < 2 {
        return Err(Error::invalid("proportional-hazards test needs at least 2 events"));
    }
    let (times, sresid) = schoenfeld_residuals(data, &fit.beta(), fit.ties);

    // 1 - S(t-) from the pooled Kaplan-Meier curve
    let km = KmCurve::estimate(&data.time, &data.event, 0);
    let g: Vec<f64> = times
        .iter()
        .map(|&t| {
            let before = km.steps.iter().take_while(|s| s.time < t).last().map_or(1.0, |s| s.survival);
            1.0 - before
        })
        .collect();
    let gm = g.iter().sum::<f64>() / ndead as f64;
    let xx: Vec<f64> = g.iter().map(|v| v - gm).collect();
    let sxx: f64 = xx.iter().map(|v| v * v).sum();
    if sxx == 0.0 {
        return Err(Error::undefined("all events share one transformed time"));
    }

    let v = &fit.variance;
    let nd = ndead as f64;
    // scaled residuals r2 = ndead * sresid * V
    let mut r2 = vec![0.0; ndead * p];
    for k in 0..ndead {
        for j in 0..p {
            r2[k * p + j] = nd * (0..p).map(|a| sresid[k * p + a] * v[a * p + j]).sum::<f64>();
        }
    }
    let chi = |df: usize| ChiSquared::new(df as f64).expect("positive df");
    let rows = (0..p)
        .map(|j| {
            let col: Vec<f64> = (0..ndead).map(|k| r2[k * p + j]).collect();
            let test: f64 = xx.iter().zip(&col).map(|(a, b)| a * b).sum();
            let chi2 = test * test / (v[j * p + j] * nd * sxx);
            PhTestRow {
                name: data.columns[j].label(),
                rho: crate::concord::pearson(&xx, &col).unwrap_or(f64::NAN),
                chi2,
                p: 1.0 - chi(1).cdf(chi2),
            }
        })
        .collect();
    let u: Vec<f64> = (0..p).map(|a| (0..ndead).map(|k| xx[k] * sresid[k * p + a]).sum()).collect();
    let quad: f64 = (0..p).map(|a| (0..p).map(|b| u[a] * v[a * p + b] * u[b]).sum::<f64>()).sum();
    let global_chi2 = quad * nd / sxx;
    Ok(PhTest { rows, global_chi2, global_df: p, global_p: 1.0 - chi(p).cdf(global_chi2) })
}
