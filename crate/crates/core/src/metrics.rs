//! Accuracy, macro-F1 and the confusion matrix they are computed from.

use std::fmt::Write as _;

use crate::data::{Domain, LabeledSplit};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::AdastModel;
use crate::nn::Mode;
use crate::tensor::Tape;

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

/// Precision, recall and F1 of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::shape(
                "confusion matrix",
                &[k, k],
                &[counts.iter().map(Vec::len).max().unwrap_or(0)],
            ));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(
        truth: &[usize],
        predicted: &[usize],
        n_classes: usize,
    ) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(
                "confusion matrix",
                &[truth.len()],
                &[predicted.len()],
            ));
        }
        let mut cm = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.n_classes();
        for label in [truth, predicted] {
            if label >= k {
                return Err(Error::Label { label, classes: k });
            }
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        self.counts[class].iter().sum::<u64>() - self.true_positives(class)
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum::<u64>() - self.true_positives(class)
    }

    /// Zero-count ratios are taken as 0; a class absent from both truth and
    /// prediction therefore scores F1 = 0.
    pub fn class_scores(&self, class: usize) -> ClassScores {
        let tp = self.true_positives(class) as f64;
        let fp = self.false_positives(class) as f64;
        let fn_ = self.false_negatives(class) as f64;
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        ClassScores {
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
            support: self.counts[class].iter().sum(),
        }
    }

    pub fn accuracy(&self) -> Result<f64> {
        let m = self.total();
        if m == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let trace: u64 = (0..self.n_classes()).map(|i| self.true_positives(i)).sum();
        Ok(trace as f64 / m as f64)
    }

    pub fn macro_f1(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let k = self.n_classes();
        Ok((0..k).map(|c| self.class_scores(c).f1).sum::<f64>() / k as f64)
    }

    /// Human-readable per-class table followed by the two summary scores.
    pub fn report(&self, class_names: &[&str]) -> Result<String> {
        let mut s = String::new();
        writeln!(
            s,
            "{:<8} {:>9} {:>9} {:>9} {:>8}",
            "class", "precision", "recall", "f1", "support"
        )
        .unwrap();
        for c in 0..self.n_classes() {
            let sc = self.class_scores(c);
            let name = class_names
                .get(c)
                .map_or_else(|| c.to_string(), |n| (*n).to_string());
            writeln!(
                s,
                "{:<8} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                name, sc.precision, sc.recall, sc.f1, sc.support
            )
            .unwrap();
        }
        writeln!(s, "accuracy {:.4}", self.accuracy()?).unwrap();
        writeln!(s, "macro_f1 {:.4}", self.macro_f1()?).unwrap();
        Ok(s)
    }

    /// `class,precision,recall,f1,support` rows plus `accuracy` and
    /// `macro_f1` summary rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut s = String::from("class,precision,recall,f1,support\n");
        for c in 0..self.n_classes() {
            let sc = self.class_scores(c);
            writeln!(
                s,
                "{c},{},{},{},{}",
                sc.precision, sc.recall, sc.f1, sc.support
            )
            .unwrap();
        }
        writeln!(s, "accuracy,,,{},{}", self.accuracy()?, self.total()).unwrap();
        writeln!(s, "macro_f1,,,{},{}", self.macro_f1()?, self.total()).unwrap();
        Ok(s)
    }
}

/// Scores of a model on one labeled split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub acc: f64,
    pub mf1: f64,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<usize>,
}

/// Evaluation-mode forward over `split`, routed through the attention of
/// `route`.
pub fn evaluate(model: &mut AdastModel, split: &LabeledSplit, route: Domain) -> Result<Evaluation> {
    let k = model.arch().n_classes;
    let mut predictions = Vec::with_capacity(split.len());
    for b in split.ordered_batches(256) {
        let tape = Tape::new();
        let x = tape.var(&b.signals);
        let out = model.forward(x, route, Mode::Eval)?;
        predictions.extend(losses::pseudo_labels(&out.probs.value(), k));
    }
    let confusion = ConfusionMatrix::from_predictions(split.labels(), &predictions, k)?;
    Ok(Evaluation {
        acc: confusion.accuracy()?,
        mf1: confusion.macro_f1()?,
        confusion,
        predictions,
    })
}

/// Sleep-stage names in class-index order.
pub const STAGE_NAMES: [&str; 5] = ["W", "N1", "N2", "N3", "REM"];
