//! Isotonic monotonization of estimated CDFs and inversion to quantiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::ConditionalCdf;

/// Quantile estimates of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantilePrediction {
    pub subject: String,
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
    /// The CDF never reached `tau`; the value is the largest grid point.
    pub boundary: Vec<bool>,
}

impl QuantilePrediction {
    /// Number of level pairs `tau_a < tau_b` with `Q(tau_a) > Q(tau_b)`.
    pub fn crossings(&self) -> usize {
        let mut count = 0;
        for a in 0..self.taus.len() {
            for b in 0..self.taus.len() {
                if self.taus[a] < self.taus[b] && self.values[a] > self.values[b] {
                    count += 1;
                }
            }
        }
        count
    }
}

/// Weighted mean of `values[lo..hi]`, summed in index order.
fn block_mean(values: &[f64], weights: &[f64], lo: usize, hi: usize) -> f64 {
    let mut sw = 0.0;
    let mut swv = 0.0;
    for i in lo..hi {
        sw += weights[i];
        swv += weights[i] * values[i];
    }
    swv / sw
}

/// Weighted least-squares projection onto nondecreasing vectors
/// (pool adjacent violators).
pub fn pava(values: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidInput(
            "isotonic regression of an empty vector".into(),
        ));
    }
    if values.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} values but {} weights",
            values.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidInput(format!("weight {w} is not positive")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value".into()));
    }

    // blocks as (start, end, weight, mean)
    let mut blocks: Vec<(usize, usize, f64, f64)> = Vec::with_capacity(values.len());
    for (i, (&v, &w)) in values.iter().zip(weights).enumerate() {
        blocks.push((i, i + 1, w, v));
        while blocks.len() > 1 {
            let (_, e2, w2, m2) = blocks[blocks.len() - 1];
            let (s1, _, w1, m1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            let w = w1 + w2;
            blocks.push((s1, e2, w, (w1 * m1 + w2 * m2) / w));
        }
    }
    let mut out = vec![0.0; values.len()];
    for &(s, e, _, _) in &blocks {
        let m = block_mean(values, weights, s, e);
        out[s..e].iter_mut().for_each(|o| *o = m);
    }
    Ok(out)
}

/// Drops `trim` grid points at each end, projects the remaining values onto
/// nondecreasing sequences and clamps them into `[0, 1]`.
pub fn monotonize(cdf: &ConditionalCdf, trim: usize) -> Result<ConditionalCdf> {
    let j = cdf.values.len();
    if cdf.grid.len() != j {
        return Err(Error::DimensionMismatch(format!(
            "grid of {} points with {j} values",
            cdf.grid.len()
        )));
    }
    if 2 * trim >= j {
        return Err(Error::InvalidInput(format!(
            "cannot trim {trim} points from each end of a grid of {j}"
        )));
    }
    let kept = &cdf.values[trim..j - trim];
    let fitted = pava(kept, &vec![1.0; kept.len()])?;
    Ok(ConditionalCdf {
        subject: cdf.subject.clone(),
        grid: cdf.grid[trim..j - trim].to_vec(),
        values: fitted.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        monotone: true,
    })
}

/// `Q(tau)` = smallest grid point with `F >= tau`.
pub fn invert(cdf: &ConditionalCdf, taus: &[f64]) -> Result<QuantilePrediction> {
    if !cdf.monotone {
        return Err(Error::InvalidInput(
            "quantile inversion needs a monotonized CDF".into(),
        ));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::InvalidInput(format!(
            "quantile level {t} outside (0, 1)"
        )));
    }
    let last = *cdf
        .grid
        .last()
        .ok_or_else(|| Error::InvalidInput("empty CDF".into()))?;
    let mut values = Vec::with_capacity(taus.len());
    let mut boundary = Vec::with_capacity(taus.len());
    for &tau in taus {
        // values are nondecreasing, so the first crossing is a partition point
        let idx = cdf.values.partition_point(|&f| f < tau);
        if idx < cdf.values.len() {
            values.push(cdf.grid[idx]);
            boundary.push(false);
        } else {
            values.push(last);
            boundary.push(true);
        }
    }
    Ok(QuantilePrediction {
        subject: cdf.subject.clone(),
        taus: taus.to_vec(),
        values,
        boundary,
    })
}

/// Monotonizes and inverts every CDF.
pub fn predict_quantiles(
    cdfs: &[ConditionalCdf],
    taus: &[f64],
    trim: usize,
) -> Result<Vec<QuantilePrediction>> {
    cdfs.iter()
        .map(|c| invert(&monotonize(c, trim)?, taus))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cdf(values: Vec<f64>) -> ConditionalCdf {
        ConditionalCdf {
            subject: "a".into(),
            grid: (1..=values.len()).map(|v| v as f64).collect(),
            values,
            monotone: false,
        }
    }

    #[test]
    fn pools_violators() {
        assert_eq!(pava(&[3.0, 1.0, 2.0], &[1.0; 3]).unwrap(), vec![2.0; 3]);
        assert_eq!(
            pava(&[1.0, 2.0, 2.0, 5.0], &[1.0; 4]).unwrap(),
            vec![1.0, 2.0, 2.0, 5.0]
        );
        assert_eq!(pava(&[0.3; 5], &[1.0; 5]).unwrap(), vec![0.3; 5]);
        // weighted pooling: (3*1 + 1*3) / 4
        assert_eq!(pava(&[3.0, 1.0], &[1.0, 3.0]).unwrap(), vec![1.5, 1.5]);
    }

    #[test]
    fn pava_rejects_bad_input() {
        assert!(pava(&[], &[]).is_err());
        assert!(pava(&[1.0], &[0.0]).is_err());
        assert!(pava(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn inversion_examples() {
        let mut c = cdf(vec![0.1, 0.3, 0.6, 0.9]);
        assert!(invert(&c, &[0.5]).is_err());
        c.monotone = true;
        let q = invert(&c, &[0.05, 0.5, 0.95]).unwrap();
        assert_eq!(q.values, vec![1.0, 3.0, 4.0]);
        assert_eq!(q.boundary, vec![false, false, true]);
        assert!(invert(&c, &[1.0]).is_err());
        assert!(invert(&c, &[0.0]).is_err());
        // exact hit counts as reached
        assert_eq!(invert(&c, &[0.3]).unwrap().values, vec![2.0]);
    }

    #[test]
    fn trimming() {
        let c = cdf((0..100).map(|j| (j as f64 + 0.5) / 100.0).collect());
        let m = monotonize(&c, 10).unwrap();
        assert_eq!(m.values.len(), 80);
        assert_eq!(m.grid[0], 11.0);
        assert!(m.monotone);
        assert!(monotonize(&c, 50).is_err());
        let m0 = monotonize(&c, 0).unwrap();
        assert_eq!(m0.values, c.values);
    }

    proptest! {
        #[test]
        fn monotonize_is_idempotent_and_no_worse(values in prop::collection::vec(0.001f64..0.999, 2..60)) {
            let c = cdf(values.clone());
            let m = monotonize(&c, 0).unwrap();
            prop_assert!(m.values.windows(2).all(|w| w[0] <= w[1]));
            let mm = monotonize(&m, 0).unwrap();
            prop_assert_eq!(&mm.values, &m.values);
            // projection onto a convex cone containing the increasing target
            let target: Vec<f64> = (0..values.len()).map(|j| (j as f64 + 0.5) / values.len() as f64).collect();
            let sse = |v: &[f64]| v.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            prop_assert!(sse(&m.values) <= sse(&values) + 1e-12);
        }

        #[test]
        fn quantiles_never_cross(values in prop::collection::vec(0.0f64..1.0, 3..40)) {
            let q = predict_quantiles(&[cdf(values)], &[0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95], 0).unwrap();
            prop_assert_eq!(q[0].crossings(), 0);
        }
    }
}
