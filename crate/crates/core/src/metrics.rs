//! Rank and linear correlation between predicted and true scores.

use crate::error::{Error, Result};

/// Predictions paired with labels: at least two, equal length, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePairVector {
    predictions: Vec<f64>,
    labels: Vec<f64>,
}

impl ScorePairVector {
    pub fn new(predictions: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        if predictions.len() < 2 {
            return Err(Error::InvalidInput("correlation needs at least two scores".into()));
        }
        if predictions.iter().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("scores must be finite".into()));
        }
        Ok(Self {
            predictions,
            labels,
        })
    }

    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Pearson linear correlation.
pub fn plcc(v: &ScorePairVector) -> Result<f64> {
    pearson(&v.predictions, &v.labels)
}

/// Spearman rank correlation: Pearson correlation of midranks.
pub fn srcc(v: &ScorePairVector) -> Result<f64> {
    pearson(&midranks(&v.predictions), &midranks(&v.labels))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("predictions are constant"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("labels are constant"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn pair(p: &[f64], l: &[f64]) -> ScorePairVector {
        ScorePairVector::new(p.to_vec(), l.to_vec()).unwrap()
    }

    #[test]
    fn hand_cases() {
        let x = [0.3, -1.0, 2.5, 4.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((plcc(&pair(&x, &x)).unwrap() - 1.0).abs() < 1e-15);
        assert!((plcc(&pair(&x, &neg)).unwrap() + 1.0).abs() < 1e-15);
        assert!((plcc(&pair(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!((srcc(&pair(&[1.0, 2.0, 9.0], &[0.1, 0.5, 0.7])).unwrap() - 1.0).abs() < 1e-15);
        let s = srcc(&pair(&[1.0, 2.0, 3.0, 5.0, 4.0], &[1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        assert!((s - 0.9).abs() < 1e-12);
    }

    #[test]
    fn constant_vectors_are_undefined() {
        let c = pair(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]);
        assert!(matches!(plcc(&c), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(srcc(&c), Err(Error::UndefinedCorrelation(_))));
        let c = pair(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]);
        assert!(matches!(srcc(&c), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn invalid_vectors_are_rejected() {
        assert!(ScorePairVector::new(vec![1.0], vec![1.0]).is_err());
        assert!(ScorePairVector::new(vec![1.0, 2.0], vec![1.0]).is_err());
        assert!(ScorePairVector::new(vec![1.0, f64::NAN], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        assert_eq!(midranks(&[1.0, 1.0, 1.0]), vec![2.0, 2.0, 2.0]);
    }

    /// Rank by counting, then textbook two-pass Pearson.
    fn oracle_srcc(p: &[f64], l: &[f64]) -> f64 {
        let rank = |xs: &[f64]| -> Vec<f64> {
            xs.iter()
                .map(|&v| {
                    let below = xs.iter().filter(|&&u| u < v).count() as f64;
                    let equal = xs.iter().filter(|&&u| u == v).count() as f64;
                    below + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (rp, rl) = (rank(p), rank(l));
        let n = p.len() as f64;
        let (mp, ml) = (rp.iter().sum::<f64>() / n, rl.iter().sum::<f64>() / n);
        let cov: f64 = rp.iter().zip(&rl).map(|(a, b)| (a - mp) * (b - ml)).sum();
        let vp: f64 = rp.iter().map(|a| (a - mp).powi(2)).sum();
        let vl: f64 = rl.iter().map(|b| (b - ml).powi(2)).sum();
        cov / (vp * vl).sqrt()
    }

    #[test]
    fn tie_free_srcc_matches_rank_difference_formula() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..50 {
            let n = 3 + rng.below(30) as usize;
            let p: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let l: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let (rp, rl) = (midranks(&p), midranks(&l));
            let d2: f64 = rp.iter().zip(&rl).map(|(a, b)| (a - b).powi(2)).sum();
            let nf = n as f64;
            let expected = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
            assert!((srcc(&pair(&p, &l)).unwrap() - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn srcc_matches_brute_force_oracle_with_and_without_ties() {
        let mut rng = SplitMix64::new(11);
        for case in 0..1000 {
            let n = 2 + rng.below(40) as usize;
            let tied = case % 2 == 1;
            let draw = |rng: &mut SplitMix64| {
                if tied {
                    rng.below(5) as f64
                } else {
                    rng.normal()
                }
            };
            let p: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
            let l: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
            let v = pair(&p, &l);
            match srcc(&v) {
                Ok(s) => assert!((s - oracle_srcc(&p, &l)).abs() <= 1e-12, "case {case}"),
                Err(_) => assert!(oracle_srcc(&p, &l).is_nan(), "case {case}"),
            }
        }
    }

    proptest! {
        #[test]
        fn srcc_invariant_under_increasing_maps(
            p in prop::collection::vec(-100.0f64..100.0, 3..40),
            seed in any::<u64>(),
        ) {
            let mut rng = SplitMix64::new(seed);
            let l: Vec<f64> = (0..p.len()).map(|_| rng.normal()).collect();
            prop_assume!(p.iter().any(|&v| v != p[0]));
            let base = srcc(&pair(&p, &l)).unwrap();
            let mapped: Vec<f64> = p.iter().map(|&v| (v / 50.0).exp() + v.powi(3)).collect();
            prop_assert!((srcc(&pair(&mapped, &l)).unwrap() - base).abs() <= 1e-12);
        }

        #[test]
        fn plcc_invariant_under_positive_affine_maps(
            p in prop::collection::vec(-10.0f64..10.0, 3..40),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
            seed in any::<u64>(),
        ) {
            let mut rng = SplitMix64::new(seed);
            let l: Vec<f64> = (0..p.len()).map(|_| rng.normal()).collect();
            prop_assume!(p.iter().any(|&v| (v - p[0]).abs() > 1e-6));
            let base = plcc(&pair(&p, &l)).unwrap();
            let mapped: Vec<f64> = p.iter().map(|&v| scale * v + shift).collect();
            prop_assert!((plcc(&pair(&mapped, &l)).unwrap() - base).abs() <= 1e-9);
        }
    }
}
