//! Cox proportional hazards by Newton-Raphson on the partial likelihood.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use super::concordance::harrell_c;
use super::dense::{cholesky, cholesky_inverse, cholesky_solve};
use super::SurvivalDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ties {
    #[default]
    Efron,
    Breslow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxOptions {
    pub ties: Ties,
    pub max_iter: usize,
    /// Stop once the largest absolute score component falls below this.
    pub tol: f64,
    /// Coefficients beyond this magnitude count as a diverging fit.
    pub max_abs_beta: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self { ties: Ties::Efron, max_iter: 25, tol: 1e-9, max_abs_beta: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxTerm {
    pub name: String,
    pub beta: f64,
    pub se: f64,
    pub hr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub terms: Vec<CoxTerm>,
    pub n: usize,
    pub n_events: usize,
    pub loglik: f64,
    pub loglik_null: f64,
    pub lr_chi2: f64,
    pub lr_p: f64,
    /// Harrell's C of the linear predictor; `None` without comparable pairs.
    pub concordance: Option<f64>,
    pub iterations: usize,
    pub score_norm: f64,
    /// Inverse observed information at the estimate, row-major `p x p`.
    pub variance: Vec<f64>,
    pub ties: Ties,
}

impl CoxFit {
    pub fn beta(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.beta).collect()
    }

    pub fn linear_predictor(&self, data: &SurvivalDataset) -> Vec<f64> {
        let beta = self.beta();
        (0..data.len()).map(|i| dot(data.row(i), &beta)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log partial likelihood, score vector and observed information (row-major)
/// at `beta`.
pub fn partial_likelihood(data: &SurvivalDataset, beta: &[f64], ties: Ties) -> (f64, Vec<f64>, Vec<f64>) {
    let n = data.len();
    let p = data.n_covariates();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data.time[b].total_cmp(&data.time[a]));

    let eta: Vec<f64> = (0..n).map(|i| dot(data.row(i), beta)).collect();
    let shift = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let risk: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();

    let (mut s0, mut s1, mut s2) = (0.0, vec![0.0; p], vec![0.0; p * p]);
    let mut loglik = 0.0;
    let mut score = vec![0.0; p];
    let mut info = vec![0.0; p * p];
    let mut mean = vec![0.0; p];

    let mut start = 0;
    while start < n {
        let t = data.time[order[start]];
        let mut end = start;
        while end < n && data.time[order[end]] == t {
            end += 1;
        }
        let (mut d0, mut d1, mut d2) = (0.0, vec![0.0; p], vec![0.0; p * p]);
        let mut deaths = 0usize;
        for &i in &order[start..end] {
            let x = data.row(i);
            let r = risk[i];
            s0 += r;
            for a in 0..p {
                s1[a] += r * x[a];
                for b in 0..p {
                    s2[a * p + b] += r * x[a] * x[b];
                }
            }
            if data.event[i] {
                deaths += 1;
                loglik += eta[i];
                d0 += r;
                for a in 0..p {
                    score[a] += x[a];
                    d1[a] += r * x[a];
                    for b in 0..p {
                        d2[a * p + b] += r * x[a] * x[b];
                    }
                }
            }
        }
        for l in 0..deaths {
            let f = match ties {
                Ties::Efron => l as f64 / deaths as f64,
                Ties::Breslow => 0.0,
            };
            let z0 = s0 - f * d0;
            loglik -= z0.ln() + shift;
            for a in 0..p {
                mean[a] = (s1[a] - f * d1[a]) / z0;
                score[a] -= mean[a];
            }
            for a in 0..p {
                for b in 0..p {
                    info[a * p + b] += (s2[a * p + b] - f * d2[a * p + b]) / z0 - mean[a] * mean[b];
                }
            }
        }
        start = end;
    }
    (loglik, score, info)
}

/// Names the first column that is a linear combination of earlier ones
/// (or constant) on the risk sets, judged from the information at zero.
fn check_rank(data: &SurvivalDataset, info: &[f64]) -> Result<()> {
    let p = data.n_covariates();
    for k in 1..=p {
        let mut sub = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                sub[a * k + b] = info[a * p + b];
            }
        }
        let scale = (0..k).map(|a| sub[a * k + a].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let ok = cholesky(&sub, k).is_some_and(|l| l[(k - 1) * k + k - 1].powi(2) > 1e-10 * scale);
        if !ok {
            return Err(Error::RankDeficient(data.columns[k - 1].label()));
        }
    }
    Ok(())
}

pub fn cox_fit(data: &SurvivalDataset) -> Result<CoxFit> {
    cox_fit_with(data, &CoxOptions::default())
}

pub fn cox_fit_with(data: &SurvivalDataset, opts: &CoxOptions) -> Result<CoxFit> {
    data.validate()?;
    let p = data.n_covariates();
    if p == 0 {
        return Err(Error::invalid("Cox model without covariates"));
    }
    if data.n_events() == 0 {
        return Err(Error::invalid("Cox model needs at least one event"));
    }
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    let mut beta = vec![0.0; p];
    let (mut ll, mut score, mut info) = partial_likelihood(data, &beta, opts.ties);
    check_rank(data, &info)?;
    let ll_null = ll;
    let mut iterations = 0;
    while max_abs(&score) >= opts.tol {
        if iterations == opts.max_iter {
            return Err(Error::NonConvergence(format!(
                "score norm {:.3e} after {iterations} iterations",
                max_abs(&score)
            )));
        }
        iterations += 1;
        let l = cholesky(&info, p)
            .ok_or_else(|| Error::NonConvergence("information matrix lost positive definiteness".into()))?;
        let step = cholesky_solve(&l, p, &score);
        let mut factor = 1.0;
        loop {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + factor * s).collect();
            let (ll2, s2, i2) = partial_likelihood(data, &trial, opts.ties);
            if ll2.is_finite() && ll2 >= ll - 1e-12 * (1.0 + ll.abs()) {
                (beta, ll, score, info) = (trial, ll2, s2, i2);
                break;
            }
            factor /= 2.0;
            if factor < 1e-9 {
                return Err(Error::NonConvergence("step halving failed to increase the likelihood".into()));
            }
        }
        if max_abs(&beta) > opts.max_abs_beta {
            return Err(Error::NonConvergence(format!(
                "coefficient magnitude exceeds {} (monotone likelihood)",
                opts.max_abs_beta
            )));
        }
    }

    let l = cholesky(&info, p).ok_or_else(|| Error::NonConvergence("singular information at the estimate".into()))?;
    let variance = cholesky_inverse(&l, p);
    let normal = Normal::standard();
    let terms = (0..p)
        .map(|j| {
            let se = variance[j * p + j].sqrt();
            let z = beta[j] / se;
            CoxTerm {
                name: data.columns[j].label(),
                beta: beta[j],
                se,
                hr: beta[j].exp(),
                ci_low: (beta[j] - 1.96 * se).exp(),
                ci_high: (beta[j] + 1.96 * se).exp(),
                z,
                p: 2.0 * (1.0 - normal.cdf(z.abs())),
            }
        })
        .collect();
    let lr_chi2 = (2.0 * (ll - ll_null)).max(0.0);
    let lr_p = 1.0 - ChiSquared::new(p as f64).expect("positive df").cdf(lr_chi2);
    let eta: Vec<f64> = (0..data.len()).map(|i| dot(data.row(i), &beta)).collect();
    Ok(CoxFit {
        terms,
        n: data.len(),
        n_events: data.n_events(),
        loglik: ll,
        loglik_null: ll_null,
        lr_chi2,
        lr_p,
        concordance: harrell_c(&data.time, &data.event, &eta).ok(),
        iterations,
        score_norm: max_abs(&score),
        variance,
        ties: opts.ties,
    })
}
