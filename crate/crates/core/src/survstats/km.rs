use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::dense::{cholesky, cholesky_solve};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmStep {
    pub time: f64,
    /// Subjects with follow-up `>= time`.
    pub at_risk: usize,
    pub n_event: usize,
    pub n_censor: usize,
    /// Survival just after `time`.
    pub survival: f64,
}

/// Product-limit estimate for one group, one step per distinct observed time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub group: usize,
    pub n: usize,
    pub steps: Vec<KmStep>,
}

impl KmCurve {
    /// Right-continuous step function: 1 before the first event.
    pub fn survival_at(&self, t: f64) -> f64 {
        self.steps.iter().take_while(|s| s.time <= t).last().map_or(1.0, |s| s.survival)
    }

    pub fn estimate(times: &[f64], events: &[bool], group: usize) -> Self {
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let mut steps = Vec::new();
        let mut at_risk = times.len();
        let mut s = 1.0;
        let mut k = 0;
        while k < order.len() {
            let t = times[order[k]];
            let (mut d, mut c) = (0, 0);
            while k < order.len() && times[order[k]] == t {
                if events[order[k]] {
                    d += 1;
                } else {
                    c += 1;
                }
                k += 1;
            }
            if d > 0 {
                s *= 1.0 - d as f64 / at_risk as f64;
            }
            steps.push(KmStep { time: t, at_risk, n_event: d, n_censor: c, survival: s });
            at_risk -= d + c;
        }
        Self { group, n: times.len(), steps }
    }
}

fn check(times: &[f64], events: &[bool], groups: &[usize]) -> Result<()> {
    if times.len() != events.len() || times.len() != groups.len() {
        return Err(Error::invalid("survival inputs differ in length"));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::OutOfRange("survival times must be finite and non-negative".into()));
    }
    Ok(())
}

/// One curve per distinct group id, in ascending id order.
pub fn km_curve(times: &[f64], events: &[bool], groups: &[usize]) -> Result<Vec<KmCurve>> {
    check(times, events, groups)?;
    let ids: BTreeSet<usize> = groups.iter().copied().collect();
    Ok(ids
        .into_iter()
        .map(|g| {
            let idx: Vec<usize> = (0..times.len()).filter(|&i| groups[i] == g).collect();
            let t: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
            let e: Vec<bool> = idx.iter().map(|&i| events[i]).collect();
            KmCurve::estimate(&t, &e, g)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub groups: Vec<usize>,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
    pub chi2: f64,
    pub df: usize,
    pub p: f64,
}

/// `(O - E)' V^-1 (O - E)` over all groups but the last, chi-square with
/// `groups - 1` degrees of freedom.
pub fn logrank(times: &[f64], events: &[bool], groups: &[usize]) -> Result<LogRank> {
    check(times, events, groups)?;
    let ids: Vec<usize> = groups.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let g = ids.len();
    if g < 2 {
        return Err(Error::invalid("log-rank test needs at least 2 groups"));
    }
    if !events.iter().any(|&e| e) {
        return Err(Error::invalid("log-rank test needs at least one event"));
    }
    let gi: Vec<usize> = groups.iter().map(|x| ids.binary_search(x).unwrap()).collect();
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));

    let mut at_risk = vec![0.0; g];
    for &k in &gi {
        at_risk[k] += 1.0;
    }
    let mut observed = vec![0.0; g];
    let mut expected = vec![0.0; g];
    let mut var = vec![0.0; g * g];
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut deaths = vec![0.0; g];
        let mut leaving = vec![0.0; g];
        while k < order.len() && times[order[k]] == t {
            let i = order[k];
            leaving[gi[i]] += 1.0;
            if events[i] {
                deaths[gi[i]] += 1.0;
            }
            k += 1;
        }
        let d: f64 = deaths.iter().sum();
        let n: f64 = at_risk.iter().sum();
        if d > 0.0 {
            for a in 0..g {
                observed[a] += deaths[a];
                expected[a] += d * at_risk[a] / n;
            }
            if n > 1.0 {
                let w = d * (n - d) / (n - 1.0);
                for a in 0..g {
                    for b in 0..g {
                        let delta = f64::from(a == b);
                        var[a * g + b] += w * at_risk[a] / n * (delta - at_risk[b] / n);
                    }
                }
            }
        }
        for a in 0..g {
            at_risk[a] -= leaving[a];
        }
    }

    let m = g - 1;
    let diff: Vec<f64> = (0..m).map(|a| observed[a] - expected[a]).collect();
    let mut sub = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..m {
            sub[a * m + b] = var[a * g + b];
        }
    }
    let chi2 = match cholesky(&sub, m) {
        Some(l) => {
            let sol = cholesky_solve(&l, m, &diff);
            diff.iter().zip(&sol).map(|(a, b)| a * b).sum::<f64>().max(0.0)
        }
        None => return Err(Error::undefined("log-rank variance is singular")),
    };
    let p = 1.0 - ChiSquared::new(m as f64).expect("positive df").cdf(chi2);
    Ok(LogRank { groups: ids, observed, expected, chi2, df: m, p })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_censored_stays_at_one() {
        let c = KmCurve::estimate(&[1.0, 2.0, 3.0], &[false; 3], 0);
        assert!(c.steps.iter().all(|s| s.survival == 1.0));
        assert_eq!(c.survival_at(100.0), 1.0);
    }

    #[test]
    fn single_event() {
        let c = KmCurve::estimate(&[5.0], &[true], 0);
        assert_eq!(c.survival_at(4.999), 1.0);
        assert_eq!(c.survival_at(5.0), 0.0);
    }

    #[test]
    fn five_subject_table() {
        // events at 2, 4, 7; censored at 3 and 9
        let c = KmCurve::estimate(&[2.0, 3.0, 4.0, 7.0, 9.0], &[true, false, true, true, false], 0);
        let s: Vec<(f64, usize, f64)> = c.steps.iter().map(|s| (s.time, s.at_risk, s.survival)).collect();
        let s2 = 0.8 * (1.0 - 1.0 / 3.0);
        let s3 = s2 * (1.0 - 1.0 / 2.0);
        assert_eq!(s, vec![(2.0, 5, 0.8), (3.0, 4, 0.8), (4.0, 3, s2), (7.0, 2, s3), (9.0, 1, s3)]);
        assert_eq!(c.survival_at(6.9), s2);
    }

    #[test]
    fn duplicated_groups_have_no_difference() {
        let t = [1.0, 3.0, 4.0, 6.0, 1.0, 3.0, 4.0, 6.0];
        let e = [true, false, true, true, true, false, true, true];
        let lr = logrank(&t, &e, &[0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        assert!(lr.chi2.abs() < 1e-12);
        assert!(logrank(&t, &e, &[0; 8]).is_err());
        assert!(logrank(&t, &[false; 8], &[0, 0, 0, 0, 1, 1, 1, 1]).is_err());
    }
}
