//! Composite training objective: `1/2 CE + 1/2 Dice + lambda * TV` over
//! per-A-line 3-class logits.
//!
//! The Dice term is the standard soft formulation with the sums inside the
//! ratio; a small smoothing constant keeps classes that are absent from a
//! frame well-defined (ratio 1 when the class also has zero predicted mass).
//! Total variation acts on the raw logits along the angular axis with
//! circular wrap-around.

use crate::error::{Error, Result};
use crate::AnnotationVector;
use serde::{Deserialize, Serialize};

/// Smoothing added to the Dice numerator and denominator.
pub const DICE_SMOOTHING: f64 = 1e-6;

/// Default weight of the total-variation term.
pub const DEFAULT_LAMBDA_TV: f64 = 5e-4;

/// Per-frame network output: one score vector per A-line, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    theta: usize,
    classes: usize,
    data: Vec<f64>,
}

impl Logits {
    pub fn new(theta: usize, classes: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), theta * classes, "logits length mismatch");
        Logits {
            theta,
            classes,
            data,
        }
    }

    pub fn zeros(theta: usize, classes: usize) -> Self {
        Logits::new(theta, classes, vec![0.0; theta * classes])
    }

    pub fn theta(&self) -> usize {
        self.theta
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn at(&self, i: usize, c: usize) -> f64 {
        self.data[i * self.classes + c]
    }

    pub fn set(&mut self, i: usize, c: usize, v: f64) {
        self.data[i * self.classes + c] = v;
    }

    /// Row-wise softmax probabilities, same layout.
    pub fn softmax(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.data.len()];
        for i in 0..self.theta {
            let row = self.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..self.classes {
                let e = (row[c] - m).exp();
                p[i * self.classes + c] = e;
                z += e;
            }
            for c in 0..self.classes {
                p[i * self.classes + c] /= z;
            }
        }
        p
    }

    /// Per-A-line argmax, ties broken toward the lower class index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.theta)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for c in 1..self.classes {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// The individual loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dice: f64,
    pub tv: f64,
    pub lambda: f64,
    pub total: f64,
}

fn check_lengths(x: &Logits, y: &AnnotationVector) -> Result<()> {
    if x.theta() != y.len() {
        return Err(Error::Shape(format!(
            "loss: {} logit rows vs {} labels",
            x.theta(),
            y.len()
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of the reference class under the row softmax.
pub fn cross_entropy(x: &Logits, y: &AnnotationVector) -> Result<f64> {
    check_lengths(x, y)?;
    let p = x.softmax();
    let c = x.classes();
    let mut acc = 0.0;
    for (i, &cls) in y.iter().enumerate() {
        acc -= p[i * c + cls.index()].ln();
    }
    Ok(acc / x.theta() as f64)
}

/// Soft 1D Dice loss averaged over classes.
pub fn soft_dice_1d(x: &Logits, y: &AnnotationVector) -> Result<f64> {
    check_lengths(x, y)?;
    let p = x.softmax();
    let nc = x.classes();
    let mut mean_ratio = 0.0;
    for c in 0..nc {
        let mut intersection = 0.0; // sum of p over locations of class c
        let mut fp = 0.0; // predicted mass where the reference disagrees
        let mut fn_ = 0.0; // missing mass where the reference agrees
        for (i, &cls) in y.iter().enumerate() {
            let pv = p[i * nc + c];
            if cls.index() == c {
                intersection += pv;
                fn_ += 1.0 - pv;
            } else {
                fp += pv;
            }
        }
        mean_ratio += (2.0 * intersection + DICE_SMOOTHING)
            / (2.0 * intersection + fp + fn_ + DICE_SMOOTHING);
    }
    Ok(1.0 - mean_ratio / nc as f64)
}

/// Mean circular total variation of the logits, per class.
pub fn total_variation(x: &Logits) -> f64 {
    let theta = x.theta();
    let nc = x.classes();
    let mut acc = 0.0;
    for c in 0..nc {
        for i in 0..theta {
            let next = (i + 1) % theta;
            acc += (x.at(next, c) - x.at(i, c)).abs();
        }
    }
    acc / nc as f64
}

/// Evaluate the full objective.
pub fn combined(x: &Logits, y: &AnnotationVector, lambda: f64) -> Result<LossBreakdown> {
    let ce = cross_entropy(x, y)?;
    let dice = soft_dice_1d(x, y)?;
    let tv = total_variation(x);
    Ok(LossBreakdown {
        ce,
        dice,
        tv,
        lambda,
        total: 0.5 * ce + 0.5 * dice + lambda * tv,
    })
}

/// Evaluate the full objective and its gradient with respect to the logits.
pub fn combined_with_grad(
    x: &Logits,
    y: &AnnotationVector,
    lambda: f64,
) -> Result<(LossBreakdown, Logits)> {
    check_lengths(x, y)?;
    let theta = x.theta();
    let nc = x.classes();
    let p = x.softmax();

    // Forward values.
    let mut ce = 0.0;
    for (i, &cls) in y.iter().enumerate() {
        ce -= p[i * nc + cls.index()].ln();
    }
    ce /= theta as f64;

    // Per-class Dice accumulators: numerator a = 2*I + eps, denominator
    // b = 2*I + FP + FN + eps.
    let mut a = vec![DICE_SMOOTHING; nc];
    let mut b = vec![DICE_SMOOTHING; nc];
    for (i, &cls) in y.iter().enumerate() {
        for c in 0..nc {
            let pv = p[i * nc + c];
            if cls.index() == c {
                a[c] += 2.0 * pv;
                b[c] += pv + 1.0; // 2*pv + (1 - pv)
            } else {
                b[c] += pv;
            }
        }
    }
    let mut dice = 0.0;
    for c in 0..nc {
        dice += a[c] / b[c];
    }
    let dice = 1.0 - dice / nc as f64;

    let tv = total_variation(x);
    let breakdown = LossBreakdown {
        ce,
        dice,
        tv,
        lambda,
        total: 0.5 * ce + 0.5 * dice + lambda * tv,
    };

    // Gradient with respect to the softmax probabilities, CE and Dice parts.
    // d(a/b)/dp_{i,c} = (2*[c==y_i]*b_c - a_c) / b_c^2, so
    // dDice/dp_{i,c} = -(1/C) * that.
    let mut dp = vec![0.0; theta * nc];
    let inv_c = 1.0 / nc as f64;
    for (i, &cls) in y.iter().enumerate() {
        for c in 0..nc {
            let indicator = if cls.index() == c { 1.0 } else { 0.0 };
            dp[i * nc + c] = -0.5 * inv_c * (2.0 * indicator * b[c] - a[c]) / (b[c] * b[c]);
        }
    }

    // Chain through softmax; fold in the CE gradient directly in logit space
    // (p - onehot)/theta.
    let mut grad = Logits::zeros(theta, nc);
    for i in 0..theta {
        let mut dot = 0.0;
        for c in 0..nc {
            dot += dp[i * nc + c] * p[i * nc + c];
        }
        for c in 0..nc {
            let pv = p[i * nc + c];
            let softmax_term = pv * (dp[i * nc + c] - dot);
            let onehot = if y[i].index() == c { 1.0 } else { 0.0 };
            let ce_term = 0.5 * (pv - onehot) / theta as f64;
            grad.set(i, c, softmax_term + ce_term);
        }
    }

    // TV subgradient on the raw logits.
    let inv_c = lambda / nc as f64;
    for c in 0..nc {
        for i in 0..theta {
            let prev = (i + theta - 1) % theta;
            let next = (i + 1) % theta;
            let g = (x.at(i, c) - x.at(prev, c)).signum_zero()
                - (x.at(next, c) - x.at(i, c)).signum_zero();
            let cur = grad.at(i, c);
            grad.set(i, c, cur + inv_c * g);
        }
    }

    Ok((breakdown, grad))
}

trait SignumZero {
    fn signum_zero(self) -> f64;
}

impl SignumZero for f64 {
    fn signum_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}
