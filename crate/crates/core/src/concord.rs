//! Agreement, ranking and calibration metrics between model scores and
//! pathologist scores.
//!
//! Model scores are fractions in `[0, 1]`, pathologist scores percentages.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// TILs cutoffs, in percent, at which the ranking metrics are reported.
pub const CUTOFFS: [f64; 4] = [10.0, 30.0, 50.0, 75.0];
pub const CALIBRATION_BINS: usize = 20;

fn check_pair(x: &[f64], y: &[f64], min_len: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < min_len {
        return Err(Error::undefined(format!("need at least {min_len} samples, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population moments `(mean x, mean y, var x, var y, cov)`.
fn moments(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let n = x.len() as f64;
    let (mut vx, mut vy, mut c) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        vx += dx * dx;
        vy += dy * dy;
        c += dx * dy;
    }
    (mx, my, vx / n, vy / n, c / n)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let (_, _, vx, vy, c) = moments(x, y);
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::undefined("correlation with a constant input"));
    }
    Ok((c / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks, tied values sharing the mean of their positions.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    pearson(&mid_ranks(x), &mid_ranks(y))
}

/// Lin's concordance correlation coefficient.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let (mx, my, vx, vy, c) = moments(x, y);
    let denom = vx + vy + (mx - my).powi(2);
    if denom == 0.0 {
        return Err(Error::undefined("concordance of two identical constants"));
    }
    Ok(2.0 * c / denom)
}

/// Positive iff the score is at least `cutoff`.
pub fn binarize(labels_pct: &[f64], cutoff: f64) -> Vec<bool> {
    labels_pct.iter().map(|&v| v >= cutoff).collect()
}

/// Mann-Whitney estimate of `P(score_pos > score_neg)`, ties counting half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::undefined("AUROC needs both classes"));
    }
    let ranks = mid_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Mean over positives of the precision at their rank, scores sorted
/// descending with ties kept in input order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::undefined("average precision needs a positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

/// AP of a random ranking: the share of positives.
pub fn random_ap(positive: &[bool]) -> Result<f64> {
    if positive.is_empty() {
        return Err(Error::undefined("prevalence of an empty set"));
    }
    Ok(positive.iter().filter(|&&p| p).count() as f64 / positive.len() as f64)
}

pub fn mse_pct(preds: &[f64], labels_pct: &[f64]) -> Result<f64> {
    check_pair(preds, labels_pct, 1)?;
    Ok(preds.iter().zip(labels_pct).map(|(p, y)| (100.0 * p - y).powi(2)).sum::<f64>() / preds.len() as f64)
}

/// Nearest-rank percentile of sorted data: element `ceil(q/100 * n)`, 1-based.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub p10: Option<f64>,
    pub p90: Option<f64>,
    pub max: Option<f64>,
}

/// Pathologist score distribution per predicted-score bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationCurve {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        for b in &self.bins {
            w.serialize(b)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Bin index for a prediction: `[b/20, (b+1)/20)`, with 1.0 in the last bin.
/// Predictions outside `[0, 1]` are clamped first.
pub fn calibration_bin(pred: f64) -> usize {
    let p = pred.clamp(0.0, 1.0);
    ((p * CALIBRATION_BINS as f64).floor() as usize).min(CALIBRATION_BINS - 1)
}

pub fn calibration(preds: &[f64], labels_pct: &[f64]) -> Result<CalibrationCurve> {
    check_pair(preds, labels_pct, 0)?;
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); CALIBRATION_BINS];
    for (&p, &y) in preds.iter().zip(labels_pct) {
        members[calibration_bin(p)].push(y);
    }
    let width = 1.0 / CALIBRATION_BINS as f64;
    let bins = members
        .into_iter()
        .enumerate()
        .map(|(b, mut ys)| {
            ys.sort_by(f64::total_cmp);
            let stat = |f: &dyn Fn(&[f64]) -> f64| if ys.is_empty() { None } else { Some(f(&ys)) };
            CalibrationBin {
                bin: b,
                lo: b as f64 * width,
                hi: (b + 1) as f64 * width,
                count: ys.len(),
                mean: stat(&mean),
                min: stat(&|s| s[0]),
                p10: stat(&|s| nearest_rank(s, 10.0)),
                p90: stat(&|s| nearest_rank(s, 90.0)),
                max: stat(&|s| s[s.len() - 1]),
            }
        })
        .collect();
    Ok(CalibrationCurve { bins })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub cutoff: f64,
    pub n_positive: usize,
    pub auroc: Option<f64>,
    pub ap: Option<f64>,
    pub random_ap: Option<f64>,
}

/// Undefined entries serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub ccc: Option<f64>,
    pub mse_pct: Option<f64>,
    pub cutoffs: Vec<CutoffMetrics>,
}

impl MetricsReport {
    pub fn cutoff(&self, cutoff: f64) -> Option<&CutoffMetrics> {
        self.cutoffs.iter().find(|c| c.cutoff == cutoff)
    }
}

/// The full panel at the default cutoffs. Only malformed input is an
/// error; metrics that are undefined for this data come back as `None`.
pub fn evaluate(preds: &[f64], labels_pct: &[f64]) -> Result<MetricsReport> {
    evaluate_at(preds, labels_pct, &CUTOFFS)
}

pub fn evaluate_at(preds: &[f64], labels_pct: &[f64], cutoffs: &[f64]) -> Result<MetricsReport> {
    check_pair(preds, labels_pct, 0)?;
    let pct: Vec<f64> = preds.iter().map(|p| 100.0 * p).collect();
    let defined = |r: Result<f64>| -> Result<Option<f64>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::Undefined(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let cutoffs = cutoffs
        .iter()
        .map(|&cutoff| {
            let pos = binarize(labels_pct, cutoff);
            Ok(CutoffMetrics {
                cutoff,
                n_positive: pos.iter().filter(|&&p| p).count(),
                auroc: defined(auroc(preds, &pos))?,
                ap: defined(average_precision(preds, &pos))?,
                random_ap: defined(random_ap(&pos))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        n: preds.len(),
        pearson: defined(pearson(preds, labels_pct))?,
        spearman: defined(spearman(preds, labels_pct))?,
        ccc: defined(ccc(&pct, labels_pct))?,
        mse_pct: defined(mse_pct(preds, labels_pct))?,
        cutoffs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn correlation_basics() {
        let x = [1.0, 2.0, 3.0];
        assert!(close(pearson(&x, &x).unwrap(), 1.0, 1e-15));
        assert!(close(pearson(&x, &[-1.0, -2.0, -3.0]).unwrap(), -1.0, 1e-15));
        let y = [1.0, 2.0, 4.0];
        assert_eq!(spearman(&x, &y).unwrap(), 1.0);
        // cov = 1, var x = 2/3, var y = 14/9
        let expected = 1.0 / ((2.0f64 / 3.0).sqrt() * (14.0f64 / 9.0).sqrt());
        assert!(close(pearson(&x, &y).unwrap(), expected, 1e-15));
        assert!(matches!(pearson(&x, &[2.0; 3]), Err(Error::Undefined(_))));
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn ccc_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!(close(ccc(&x, &x).unwrap(), 1.0, 1e-15));
        let shifted: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        // var 1.25 each, cov 1.25, mean gap 1
        assert!(close(ccc(&x, &shifted).unwrap(), 2.5 / 3.5, 1e-15));
        let c = [-1.5, -0.5, 0.5, 1.5];
        let neg: Vec<f64> = c.iter().map(|v| -v).collect();
        assert!(close(ccc(&c, &neg).unwrap(), -1.0, 1e-15));
        let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(ccc(&x, &doubled).unwrap() < 1.0);
        assert!(matches!(ccc(&[2.0; 3], &[2.0; 3]), Err(Error::Undefined(_))));
    }

    #[test]
    fn binarize_boundary() {
        assert_eq!(binarize(&[30.0, 29.9, 75.0], 30.0), vec![true, false, true]);
        assert!(binarize(&[1.0, 2.0], 10.0).iter().all(|&p| !p));
    }

    #[test]
    fn auroc_cases() {
        let s = [0.1, 0.2, 0.8, 0.9];
        assert_eq!(auroc(&s, &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&s, &[true, true, false, false]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&s, &[true; 4]), Err(Error::Undefined(_))));
    }

    #[test]
    fn ap_cases() {
        let s = [0.9, 0.8, 0.3, 0.1];
        assert_eq!(average_precision(&s, &[true, true, false, false]).unwrap(), 1.0);
        assert!(close(average_precision(&s, &[false, false, false, true]).unwrap(), 0.25, 1e-15));
        // stable order: the earlier of two tied items ranks first
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        let pos: Vec<bool> = (0..10).map(|i| i < 6).collect();
        assert_eq!(random_ap(&pos).unwrap(), 0.6);
        assert!(average_precision(&s, &[false; 4]).is_err());
    }

    #[test]
    fn mse_on_percent_scale() {
        assert_eq!(mse_pct(&[0.1, 0.5], &[10.0, 50.0]).unwrap(), 0.0);
        assert!(close(mse_pct(&[0.2, 0.6], &[10.0, 50.0]).unwrap(), 100.0, 1e-9));
        assert!(mse_pct(&[0.1], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn calibration_edges() {
        let cal = calibration(&[0.01; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(cal.bins[0].count, 5);
        assert_eq!(cal.total(), 5);
        assert_eq!(calibration_bin(1.0), 19);
        assert_eq!(calibration_bin(0.05), 1);
        assert_eq!(calibration_bin(0.0499), 0);
        assert_eq!(cal.bins[3].mean, None);
    }

    #[test]
    fn calibration_four_points_two_bins() {
        let cal = calibration(&[0.02, 0.03, 0.51, 0.52], &[5.0, 15.0, 40.0, 60.0]).unwrap();
        let b0 = &cal.bins[0];
        assert_eq!((b0.count, b0.mean, b0.min, b0.p10, b0.p90, b0.max), (2, Some(10.0), Some(5.0), Some(5.0), Some(15.0), Some(15.0)));
        let b10 = &cal.bins[10];
        assert_eq!((b10.count, b10.mean, b10.p10, b10.p90), (2, Some(50.0), Some(40.0), Some(60.0)));
        let mut buf = Vec::new();
        cal.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bin,lo,hi,count,mean,min,p10,p90,max\n0,0.0,0.05,2,10.0,5.0,5.0,15.0,15.0\n"), "{text}");
    }

    #[test]
    fn evaluate_perfect_and_single_class() {
        let labels = [5.0, 20.0, 40.0, 60.0, 90.0];
        let preds: Vec<f64> = labels.iter().map(|v| v / 100.0).collect();
        let r = evaluate(&preds, &labels).unwrap();
        assert!(close(r.pearson.unwrap(), 1.0, 1e-12));
        assert!(close(r.spearman.unwrap(), 1.0, 1e-15));
        assert!(close(r.ccc.unwrap(), 1.0, 1e-12));
        assert!(r.mse_pct.unwrap() < 1e-20);
        assert_eq!(r.cutoff(30.0).unwrap().auroc, Some(1.0));
        let low = evaluate(&[0.1, 0.2, 0.3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(low.cutoff(10.0).unwrap().auroc, None);
        assert_eq!(low.cutoff(10.0).unwrap().random_ap, Some(0.0));
        let json = serde_json::to_string(&low).unwrap();
        assert!(json.contains("\"auroc\":null"), "{json}");
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_maps(s in prop::collection::vec(-5.0f64..5.0, 2..30), seed in any::<u64>()) {
            let pos: Vec<bool> = (0..s.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let t: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
            prop_assert!((auroc(&s, &pos).unwrap() - auroc(&t, &pos).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn pearson_affine_invariant(x in prop::collection::vec(-10.0f64..10.0, 3..20), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * v + i as f64).collect();
            prop_assume!(pearson(&x, &y).is_ok());
            let z: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson(&x, &y).unwrap() - pearson(&z, &y).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn calibration_counts_sum(preds in prop::collection::vec(0.0f64..=1.0, 0..60)) {
            let labels: Vec<f64> = preds.iter().map(|p| p * 100.0).collect();
            let cal = calibration(&preds, &labels).unwrap();
            prop_assert_eq!(cal.total(), preds.len());
        }
    }
}
