//! Evaluation suite over predicted and reference A-line labels.
//!
//! Covers per-frame 1D Dice (restricted to frames where both the prediction
//! and the reference contain the class), balanced accuracy over pooled
//! A-lines, A-line and frame-wise F-scores, and a row-normalized confusion
//! matrix. Every metric reduces to integer counting and is cross-checked
//! against a brute-force oracle in the tests.

use crate::error::{Error, Result};
use crate::par;
use crate::AnnotationVector;
use crate::ArtifactClass;

const NC: usize = ArtifactClass::COUNT;

/// Predicted and reference labels for one frame.
#[derive(Clone, Debug)]
pub struct FramePrediction {
    pub pullback: String,
    pub frame: usize,
    pub predicted: AnnotationVector,
    pub reference: AnnotationVector,
}

/// A set of frames to evaluate, with per-frame pullback bookkeeping.
#[derive(Clone, Debug, Default)]
pub struct PredictionSet {
    frames: Vec<FramePrediction>,
}

impl PredictionSet {
    pub fn new() -> Self {
        PredictionSet { frames: Vec::new() }
    }

    pub fn push(&mut self, frame: FramePrediction) -> Result<()> {
        if frame.predicted.len() != frame.reference.len() {
            return Err(Error::Shape(format!(
                "prediction set: frame {} of {} has {} predicted vs {} reference labels",
                frame.frame,
                frame.pullback,
                frame.predicted.len(),
                frame.reference.len()
            )));
        }
        self.frames.push(frame);
        Ok(())
    }

    pub fn frames(&self) -> &[FramePrediction] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// F-score along with a degenerate-case marker (no positives anywhere).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FScore {
    pub value: f64,
    /// True when TP = FP = FN = 0 and the score defaulted to 1.0.
    pub degenerate: bool,
}

fn fscore_from_counts(tp: usize, fp: usize, fn_: usize) -> FScore {
    if tp == 0 && fp == 0 && fn_ == 0 {
        return FScore {
            value: 1.0,
            degenerate: true,
        };
    }
    FScore {
        value: 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64),
        degenerate: false,
    }
}

/// Per-frame 1D Dice for one class; `None` when the class is missing from
/// either the prediction or the reference (the frame is then excluded from
/// that class's mean).
pub fn frame_dice(
    predicted: &AnnotationVector,
    reference: &AnnotationVector,
    class: ArtifactClass,
) -> Result<Option<f64>> {
    if predicted.len() != reference.len() {
        return Err(Error::Shape(format!(
            "frame_dice: {} predicted vs {} reference labels",
            predicted.len(),
            reference.len()
        )));
    }
    let mut np = 0usize;
    let mut nr = 0usize;
    let mut both = 0usize;
    for (p, r) in predicted.iter().zip(reference) {
        let ip = *p == class;
        let ir = *r == class;
        np += ip as usize;
        nr += ir as usize;
        both += (ip && ir) as usize;
    }
    if np == 0 || nr == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (np + nr) as f64))
}

/// Mean per-class recall over all A-lines pooled across frames. Classes
/// absent from the reference are skipped (and flagged).
pub fn balanced_accuracy(set: &PredictionSet) -> (f64, [bool; NC]) {
    let mut tp = [0usize; NC];
    let mut total = [0usize; NC];
    for f in set.frames() {
        for (p, r) in f.predicted.iter().zip(&f.reference) {
            total[r.index()] += 1;
            if p == r {
                tp[r.index()] += 1;
            }
        }
    }
    let mut missing = [false; NC];
    let mut sum = 0.0;
    let mut classes = 0usize;
    for c in 0..NC {
        if total[c] == 0 {
            missing[c] = true;
        } else {
            sum += tp[c] as f64 / total[c] as f64;
            classes += 1;
        }
    }
    let value = if classes == 0 {
        0.0
    } else {
        sum / classes as f64
    };
    (value, missing)
}

/// F-score for one class over the pooled A-line dataset.
pub fn aline_fscore(set: &PredictionSet, class: ArtifactClass) -> FScore {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for f in set.frames() {
        for (p, r) in f.predicted.iter().zip(&f.reference) {
            let ip = *p == class;
            let ir = *r == class;
            tp += (ip && ir) as usize;
            fp += (ip && !ir) as usize;
            fn_ += (!ip && ir) as usize;
        }
    }
    fscore_from_counts(tp, fp, fn_)
}

/// A frame is positive for a class when it contains a circular run of at
/// least `min_run` consecutive A-lines of that class.
pub fn frame_positive(labels: &AnnotationVector, class: ArtifactClass, min_run: usize) -> bool {
    let theta = labels.len();
    let count = labels.iter().filter(|&&c| c == class).count();
    if count == 0 {
        return false;
    }
    if min_run <= 1 {
        return true;
    }
    if count == theta {
        return true;
    }
    // Longest circular run: scan two copies, capped by theta.
    let mut longest = 0usize;
    let mut run = 0usize;
    for i in 0..2 * theta {
        if labels[i % theta] == class {
            run += 1;
            longest = longest.max(run.min(theta));
        } else {
            run = 0;
        }
    }
    longest >= min_run
}

/// F-score over binary per-frame presence of a class.
pub fn framewise_fscore(set: &PredictionSet, class: ArtifactClass, min_run: usize) -> FScore {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for f in set.frames() {
        let pp = frame_positive(&f.predicted, class, min_run);
        let rp = frame_positive(&f.reference, class, min_run);
        tp += (pp && rp) as usize;
        fp += (pp && !rp) as usize;
        fn_ += (!pp && rp) as usize;
    }
    fscore_from_counts(tp, fp, fn_)
}

/// Row-normalized confusion matrix in percent: entry `(t, p)` is the share
/// of true-class-`t` A-lines predicted as class `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub percent: [[f64; NC]; NC],
    pub counts: [[usize; NC]; NC],
    /// Rows with no true A-lines, reported as all-zero.
    pub empty_rows: [bool; NC],
}

pub fn confusion_matrix(set: &PredictionSet) -> ConfusionMatrix {
    let mut counts = [[0usize; NC]; NC];
    for f in set.frames() {
        for (p, r) in f.predicted.iter().zip(&f.reference) {
            counts[r.index()][p.index()] += 1;
        }
    }
    let mut percent = [[0.0; NC]; NC];
    let mut empty_rows = [false; NC];
    for t in 0..NC {
        let row_total: usize = counts[t].iter().sum();
        if row_total == 0 {
            empty_rows[t] = true;
        } else {
            for p in 0..NC {
                percent[t][p] = 100.0 * counts[t][p] as f64 / row_total as f64;
            }
        }
    }
    ConfusionMatrix {
        percent,
        counts,
        empty_rows,
    }
}

/// Mean and standard deviation of per-frame Dice over included frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiceSummary {
    pub included_frames: usize,
    pub mean: f64,
    /// Sample standard deviation over included frames; 0 when fewer than two
    /// frames are included.
    pub sd: f64,
}

pub fn dice_summary(set: &PredictionSet, class: ArtifactClass) -> Result<DiceSummary> {
    let values = par::map_indexed(set.len(), |i| {
        let f = &set.frames()[i];
        frame_dice(&f.predicted, &f.reference, class)
    });
    let mut included = Vec::new();
    for v in values {
        if let Some(d) = v? {
            included.push(d);
        }
    }
    let n = included.len();
    if n == 0 {
        return Ok(DiceSummary {
            included_frames: 0,
            mean: 0.0,
            sd: 0.0,
        });
    }
    let mean = included.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 {
        0.0
    } else {
        (included.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
    };
    Ok(DiceSummary {
        included_frames: n,
        mean,
        sd,
    })
}

/// Aggregated evaluation results for a prediction set.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub frames: usize,
    pub alines: usize,
    pub balanced_accuracy: f64,
    pub balanced_accuracy_missing: [bool; NC],
    pub dice: [DiceSummary; NC],
    pub aline_f: [FScore; NC],
    pub framewise_f: [FScore; NC],
    pub confusion: ConfusionMatrix,
    pub min_run: usize,
}

impl MetricsReport {
    pub fn compute(set: &PredictionSet, min_run: usize) -> Result<Self> {
        let (balanced, missing) = balanced_accuracy(set);
        let dice = [
            dice_summary(set, ArtifactClass::None)?,
            dice_summary(set, ArtifactClass::Mild)?,
            dice_summary(set, ArtifactClass::Severe)?,
        ];
        let aline_f = [
            aline_fscore(set, ArtifactClass::None),
            aline_fscore(set, ArtifactClass::Mild),
            aline_fscore(set, ArtifactClass::Severe),
        ];
        let framewise_f = [
            framewise_fscore(set, ArtifactClass::None, min_run),
            framewise_fscore(set, ArtifactClass::Mild, min_run),
            framewise_fscore(set, ArtifactClass::Severe, min_run),
        ];
        Ok(MetricsReport {
            frames: set.len(),
            alines: set.frames().iter().map(|f| f.reference.len()).sum(),
            balanced_accuracy: balanced,
            balanced_accuracy_missing: missing,
            dice,
            aline_f,
            framewise_f,
            confusion: confusion_matrix(set),
            min_run,
        })
    }

    /// Render the report as the documented key/value text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("arcnet-metrics v1\n");
        out.push_str(&format!("frames: {}\n", self.frames));
        out.push_str(&format!("alines: {}\n", self.alines));
        out.push_str(&format!("min_run: {}\n", self.min_run));
        out.push_str(&format!(
            "balanced_accuracy: {:.6}\n",
            self.balanced_accuracy
        ));
        for c in ArtifactClass::ALL {
            let d = &self.dice[c.index()];
            if d.included_frames == 0 {
                out.push_str(&format!("dice_{}_mean: na\n", c.name()));
                out.push_str(&format!("dice_{}_sd: na\n", c.name()));
            } else {
                out.push_str(&format!("dice_{}_mean: {:.6}\n", c.name(), d.mean));
                out.push_str(&format!("dice_{}_sd: {:.6}\n", c.name(), d.sd));
            }
            out.push_str(&format!(
                "dice_{}_frames: {}\n",
                c.name(),
                d.included_frames
            ));
        }
        for c in ArtifactClass::ALL {
            let f = &self.aline_f[c.index()];
            out.push_str(&format!("fscore_{}: {:.6}\n", c.name(), f.value));
            if f.degenerate {
                out.push_str(&format!("fscore_{}_degenerate: true\n", c.name()));
            }
        }
        for c in ArtifactClass::ALL {
            let f = &self.framewise_f[c.index()];
            out.push_str(&format!("framewise_fscore_{}: {:.6}\n", c.name(), f.value));
            if f.degenerate {
                out.push_str(&format!("framewise_fscore_{}_degenerate: true\n", c.name()));
            }
        }
        for (t, tc) in ArtifactClass::ALL.iter().enumerate() {
            let row = self.confusion.percent[t];
            out.push_str(&format!(
                "confusion_{}: {:.2} {:.2} {:.2}\n",
                tc.name(),
                row[0],
                row[1],
                row[2]
            ));
            if self.confusion.empty_rows[t] {
                out.push_str(&format!("confusion_{}_empty: true\n", tc.name()));
            }
        }
        out
    }
}
