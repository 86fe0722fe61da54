//! Stratified training-set sampling.
//!
//! Frames are bucketed by a log-count proxy metric of their artifact burden,
//! then drawn with replacement under clipped inverse-frequency weights so
//! that rare buckets surface often enough without any single frame dominating
//! a batch.

use crate::error::{Error, Result};
use crate::AnnotationVector;
use rand::Rng;

/// Upper bound on any sampling weight.
pub const WEIGHT_CLIP: f64 = 50.0;

/// Proxy metric for the artifact burden of one frame:
/// `ceil(ln(1 + sum(y)))`, where labels contribute their raw class value
/// (mild = 1, severe = 2).
pub fn proxy_metric(y: &AnnotationVector) -> u32 {
    let sum: u64 = y.iter().map(|c| c.index() as u64).sum();
    (1.0 + sum as f64).ln().ceil() as u32
}

/// Per-frame sampling weights derived from the proxy-metric array.
#[derive(Clone, Debug)]
pub struct SampleWeighting {
    proxy: Vec<u32>,
    weights: Vec<f64>,
    mode_cardinality: usize,
    cumulative: Vec<f64>,
}

impl SampleWeighting {
    pub fn proxy(&self) -> &[u32] {
        &self.proxy
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Cardinality of the most frequent proxy value (shared cardinality on
    /// ties).
    pub fn mode_cardinality(&self) -> usize {
        self.mode_cardinality
    }

    /// Draw `batch_size` frame indices i.i.d. with replacement,
    /// `P(n) = w_n / sum(w)`.
    pub fn draw<R: Rng>(&self, rng: &mut R, batch_size: usize) -> Vec<usize> {
        let total = *self.cumulative.last().expect("non-empty weighting");
        (0..batch_size)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                self.cumulative
                    .partition_point(|&c| c <= u)
                    .min(self.weights.len() - 1)
            })
            .collect()
    }
}

/// Compute the weighting `w_n = min(M / |K_n|, 50)` for a proxy-metric array.
pub fn compute_weights(proxy: &[u32]) -> Result<SampleWeighting> {
    if proxy.is_empty() {
        return Err(Error::Invalid("compute_weights: empty proxy array".into()));
    }
    let mut counts = std::collections::HashMap::new();
    for &k in proxy {
        *counts.entry(k).or_insert(0usize) += 1;
    }
    let mode_cardinality = counts.values().copied().max().unwrap_or(0);
    let weights: Vec<f64> = proxy
        .iter()
        .map(|k| (mode_cardinality as f64 / counts[k] as f64).min(WEIGHT_CLIP))
        .collect();
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in &weights {
        acc += w;
        cumulative.push(acc);
    }
    Ok(SampleWeighting {
        proxy: proxy.to_vec(),
        weights,
        mode_cardinality,
        cumulative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ArtifactClass;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels_with_sum(sum: u64) -> AnnotationVector {
        // Encode the target sum with severe (2) and mild (1) labels.
        let mut y = vec![ArtifactClass::None; 224];
        let mut rest = sum;
        let mut i = 0;
        while rest >= 2 {
            y[i] = ArtifactClass::Severe;
            rest -= 2;
            i += 1;
        }
        if rest == 1 {
            y[i] = ArtifactClass::Mild;
        }
        y
    }

    #[test]
    fn proxy_metric_examples() {
        assert_eq!(proxy_metric(&labels_with_sum(0)), 0);
        assert_eq!(proxy_metric(&labels_with_sum(1)), 1); // ceil(ln 2)
        assert_eq!(proxy_metric(&labels_with_sum(99)), 5); // ceil(ln 100)
    }

    #[test]
    fn proxy_metric_monotone_in_sum() {
        let mut prev = 0;
        for sum in 0..300 {
            let k = proxy_metric(&labels_with_sum(sum));
            assert!(k >= prev);
            prev = k;
        }
    }

    #[test]
    fn weights_hand_example() {
        let w = compute_weights(&[0, 0, 0, 5, 5, 7]).unwrap();
        assert_eq!(w.mode_cardinality(), 3);
        assert_eq!(w.weights(), &[1.0, 1.0, 1.0, 1.5, 1.5, 3.0]);
    }

    #[test]
    fn uniform_proxy_gives_unit_weights() {
        let w = compute_weights(&[4; 17]).unwrap();
        assert!(w.weights().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn singleton_weight_is_clipped() {
        let mut k = vec![1u32; 200];
        k.push(9);
        let w = compute_weights(&k).unwrap();
        assert_eq!(w.weights()[200], 50.0);
        assert!(w.weights().iter().all(|&x| x <= WEIGHT_CLIP && x > 0.0));
    }

    #[test]
    fn empty_proxy_is_rejected() {
        assert!(compute_weights(&[]).is_err());
    }

    #[test]
    fn draws_are_deterministic_for_a_seed() {
        let w = compute_weights(&[0, 0, 1, 2, 2, 2, 3]).unwrap();
        let a = w.draw(&mut ChaCha8Rng::seed_from_u64(9), 64);
        let b = w.draw(&mut ChaCha8Rng::seed_from_u64(9), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_weights_draw_uniformly() {
        let w = compute_weights(&[3; 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1_000_000;
        let draws = w.draw(&mut rng, n);
        let mut counts = [0usize; 8];
        for d in draws {
            counts[d] += 1;
        }
        let expect = n as f64 / 8.0;
        let sigma = (expect * (1.0 - 1.0 / 8.0)).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - expect).abs() < 3.0 * sigma,
                "count {c} vs {expect}"
            );
        }
    }

    #[test]
    fn one_three_weights_draw_in_ratio() {
        let w = compute_weights(&[0, 0, 0, 1]).unwrap();
        assert_eq!(w.weights(), &[1.0, 1.0, 1.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 1_000_000;
        let draws = w.draw(&mut rng, n);
        let singleton = draws.iter().filter(|&&d| d == 3).count() as f64 / n as f64;
        assert!((singleton - 0.5).abs() < 0.01); // weight 3 of total 6
    }

    #[test]
    fn scaling_weights_leaves_distribution_unchanged() {
        // Scaling all weights by a constant rescales the cumulative table but
        // not the normalized probabilities; identical rng streams must then
        // produce identical draw sequences.
        let w = compute_weights(&[0, 1, 1, 2, 2, 2]).unwrap();
        let mut scaled = w.clone();
        for v in &mut scaled.weights {
            *v *= 7.5;
        }
        scaled.cumulative.clear();
        let mut acc = 0.0;
        for &v in &scaled.weights {
            acc += v;
            scaled.cumulative.push(acc);
        }
        let a = w.draw(&mut ChaCha8Rng::seed_from_u64(3), 4096);
        let b = scaled.draw(&mut ChaCha8Rng::seed_from_u64(3), 4096);
        assert_eq!(a, b);
    }
}
