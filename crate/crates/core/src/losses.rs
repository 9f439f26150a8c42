//! Training objectives.
//!
//! | term      | expression                                            |
//! |-----------|-------------------------------------------------------|
//! | `l_d`     | `−mean log D(src) − mean log(1 − D(trg))`             |
//! | `l_adv`   | `−mean log(1 − D(src)) − mean log D(trg)`             |
//! | `l_cls_s` | cross-entropy of averaged source prediction           |
//! | `l_cls_t` | cross-entropy of averaged target prediction vs pseudo-labels |
//! | `reg`     | `|θ_C1 · θ_C2|` over flattened classifier weights     |
//!
//! `l_overall = l_adv + l_cls_s + λ1·l_cls_t + λ2·reg`. `l_d` is not part of
//! it; the discriminator has its own optimizer.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Var;

/// Weights of the optional terms in the overall objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Target (pseudo-label) classification weight.
    pub lambda1: f64,
    /// Classifier-diversity regularizer weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.001,
        }
    }
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_d: f64,
    pub l_adv: f64,
    pub l_cls_s: f64,
    pub l_cls_t: f64,
    pub reg: f64,
    pub l_overall: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_d,l_adv,l_cls_s,l_cls_t,reg,l_overall";

    pub fn csv_row(&self, step: usize) -> String {
        let mut s = String::new();
        write!(
            s,
            "{step},{},{},{},{},{},{}",
            self.l_d, self.l_adv, self.l_cls_s, self.l_cls_t, self.reg, self.l_overall
        )
        .expect("write to string");
        s
    }

    /// Recomputes the overall objective from the stored components.
    pub fn combined(&self, w: LossWeights) -> f64 {
        self.l_adv + self.l_cls_s + w.lambda1 * self.l_cls_t + w.lambda2 * self.reg
    }
}

fn check_probabilities(name: &str, d: Var<'_>) -> Result<()> {
    if let Some(v) = d.value().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::numeric(
            name,
            format!("discriminator output {v} outside (0,1)"),
        ));
    }
    Ok(())
}

fn check_pair(name: &str, d_src: Var<'_>, d_trg: Var<'_>) -> Result<()> {
    check_probabilities(name, d_src)?;
    check_probabilities(name, d_trg)
}

/// Domain-classification loss for the discriminator: source labeled 1,
/// target labeled 0.
pub fn discriminator_loss<'t>(d_src: Var<'t>, d_trg: Var<'t>) -> Result<Var<'t>> {
    check_pair("discriminator_loss", d_src, d_trg)?;
    let src = d_src.log().mean();
    let trg = d_trg.rsub_scalar(1.0).log().mean();
    Ok(src.add(trg)?.neg())
}

/// Inverted-label loss that trains the extractor and attentions to fool
/// the discriminator.
pub fn adversarial_loss<'t>(d_src: Var<'t>, d_trg: Var<'t>) -> Result<Var<'t>> {
    check_pair("adversarial_loss", d_src, d_trg)?;
    let src = d_src.rsub_scalar(1.0).log().mean();
    let trg = d_trg.log().mean();
    Ok(src.add(trg)?.neg())
}

/// Per-row argmax, lowest class index on ties.
pub fn pseudo_labels(p_t: &[f64], n_classes: usize) -> Vec<usize> {
    p_t.chunks(n_classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                    if v > best.1 {
                        (k, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Cross-entropy of the averaged target prediction against frozen
/// pseudo-labels.
pub fn target_cls_loss<'t>(p_t: Var<'t>, pseudo: &[usize]) -> Result<Var<'t>> {
    p_t.cross_entropy(pseudo)
}

/// Cross-entropy of the averaged source prediction against true labels.
pub fn source_cls_loss<'t>(p_s: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    p_s.cross_entropy(labels)
}

/// `|θ1 · θ2|`; the subgradient at exactly zero is zero.
pub fn classifier_regularizer<'t>(theta1: Var<'t>, theta2: Var<'t>) -> Result<Var<'t>> {
    if theta1.shape() != theta2.shape() || theta1.shape().len() != 1 {
        return Err(Error::Shape {
            op: "classifier_regularizer",
            lhs: theta1.shape(),
            rhs: theta2.shape(),
        });
    }
    Ok(theta1.mul(theta2)?.sum().abs())
}

/// Graph-level components entering the overall objective. `None` marks a
/// term that is switched off in the current phase.
#[derive(Clone, Copy, Debug)]
pub struct Components<'t> {
    pub l_adv: Option<Var<'t>>,
    pub l_cls_s: Var<'t>,
    pub l_cls_t: Option<Var<'t>>,
    pub reg: Option<Var<'t>>,
}

/// `l_adv + l_cls_s + λ1·l_cls_t + λ2·reg`, skipping absent terms.
pub fn overall_loss<'t>(c: &Components<'t>, w: LossWeights) -> Result<Var<'t>> {
    let named = [
        ("l_adv", c.l_adv),
        ("l_cls_s", Some(c.l_cls_s)),
        ("l_cls_t", c.l_cls_t),
        ("reg", c.reg),
    ];
    for (name, v) in named {
        if let Some(v) = v {
            let x = v.item();
            if !x.is_finite() {
                return Err(Error::numeric(
                    name,
                    format!("non-finite loss component {x}"),
                ));
            }
        }
    }
    let mut total = c.l_cls_s;
    if let Some(adv) = c.l_adv {
        total = total.add(adv)?;
    }
    if let Some(t) = c.l_cls_t {
        total = total.add(t.scale(w.lambda1))?;
    }
    if let Some(r) = c.reg {
        total = total.add(r.scale(w.lambda2))?;
    }
    Ok(total)
}
