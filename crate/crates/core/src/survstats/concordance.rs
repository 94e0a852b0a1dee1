use crate::error::{Error, Result};

/// Harrell's C: over pairs with `t_i < t_j` and an event at `t_i`, the share
/// where subject `i` has the higher risk, risk ties counting one half.
/// Pairs with equal times are not comparable.
pub fn harrell_c(times: &[f64], events: &[bool], risk: &[f64]) -> Result<f64> {
    if times.len() != events.len() || times.len() != risk.len() {
        return Err(Error::invalid("concordance inputs differ in length"));
    }
    let mut concordant = 0.0;
    let mut comparable = 0usize;
    for i in 0..times.len() {
        if !events[i] {
            continue;
        }
        for j in 0..times.len() {
            if times[i] < times[j] {
                comparable += 1;
                if risk[i] > risk[j] {
                    concordant += 1.0;
                } else if risk[i] == risk[j] {
                    concordant += 0.5;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::undefined("no comparable pairs"));
    }
    Ok(concordant / comparable as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_cases() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let e = [true; 4];
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert_eq!(harrell_c(&t, &e, &neg).unwrap(), 1.0);
        assert_eq!(harrell_c(&t, &e, &t).unwrap(), 0.0);
        assert_eq!(harrell_c(&t, &e, &[0.3; 4]).unwrap(), 0.5);
    }

    #[test]
    fn censoring_and_ties_limit_pairs() {
        // comparable: (0,1), (0,2), (2,... none later) -> 2 pairs; tie at t=2 excluded
        let t = [1.0, 2.0, 2.0];
        let e = [true, false, true];
        assert_eq!(harrell_c(&t, &e, &[1.0, 0.0, 2.0]).unwrap(), 0.5);
        assert!(harrell_c(&[1.0, 2.0], &[false, false], &[0.0, 1.0]).is_err());
    }
}
