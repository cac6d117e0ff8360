//! Inception score over class-probability vectors.

use crate::error::{Error, Result};

/// `exp(E_x KL(p(y|x) || p(y)))`, averaged over `splits` contiguous chunks.
/// Terms with `p(y|x) = 0` contribute nothing.
pub fn inception_score_from_probs(probs: &[Vec<f64>], splits: usize) -> Result<f64> {
    if probs.is_empty() || splits == 0 || splits > probs.len() {
        return Err(Error::Validation(format!(
            "inception score needs 1..={} splits of a non-empty set, got {splits}",
            probs.len()
        )));
    }
    let k = probs[0].len();
    for p in probs {
        let sum: f64 = p.iter().sum();
        if p.len() != k || p.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation("class probabilities must lie on the simplex".into()));
        }
    }
    let n = probs.len();
    let mut total = 0.0;
    for s in 0..splits {
        let chunk = &probs[s * n / splits..(s + 1) * n / splits];
        let mut marginal = vec![0.0; k];
        for p in chunk {
            for (m, v) in marginal.iter_mut().zip(p) {
                *m += v / chunk.len() as f64;
            }
        }
        let kl: f64 = chunk
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&marginal)
                    .filter(|(v, _)| **v > 0.0)
                    .map(|(v, m)| v * (v / m).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / chunk.len() as f64;
        total += kl.max(0.0).exp();
    }
    Ok(total / splits as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_distributions_score_one() {
        let p = vec![vec![0.2, 0.3, 0.5]; 12];
        assert!((inception_score_from_probs(&p, 3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_one_hot_scores_class_count() {
        let k = 4;
        let p: Vec<Vec<f64>> = (0..40)
            .map(|i| (0..k).map(|c| if c == i % k { 1.0 } else { 0.0 }).collect())
            .collect();
        assert!((inception_score_from_probs(&p, 1).unwrap() - k as f64).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_formula() {
        let p = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4]];
        let m: Vec<f64> = (0..3).map(|c| p.iter().map(|r| r[c]).sum::<f64>() / 3.0).collect();
        let mut kl = 0.0;
        for r in &p {
            for c in 0..3 {
                kl += r[c] * (r[c].ln() - m[c].ln());
            }
        }
        let expected = (kl / 3.0).exp();
        assert!((inception_score_from_probs(&p, 1).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs() {
        assert!(inception_score_from_probs(&[], 1).is_err());
        assert!(inception_score_from_probs(&[vec![0.5, 0.6]], 1).is_err());
    }
}
