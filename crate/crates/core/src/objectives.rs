//! Adversarial, reconstruction and auxiliary-classification losses.
//!
//! Every expectation is estimated as a batch mean. Discriminator objectives
//! are expressed as losses to minimize (negated log-likelihoods). Each
//! score-domain loss has a logit-domain twin computing the same value from
//! pre-sigmoid (or pre-softmax) activations; the trainer uses the logit forms
//! because they stay finite when the discriminator saturates.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;
use crate::time_conditioning::ClassLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l1: f64,
    /// Target for real pairs (one-sided label smoothing).
    pub real_label: f64,
    pub fake_label: f64,
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_l1: 300.0,
            real_label: 0.9,
            fake_label: 0.0,
            lambda_cls: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0) || !(self.lambda_cls >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(self.real_label > 0.5 && self.real_label <= 1.0) {
            return Err(Error::invalid(format!("real_label {} not in (0.5, 1]", self.real_label)));
        }
        if !(self.fake_label >= 0.0 && self.fake_label < 0.5) {
            return Err(Error::invalid(format!("fake_label {} not in [0, 0.5)", self.fake_label)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    /// `E[log(1 - D(x, G(x, t)))]`, minimized as written.
    Literal,
    /// `E[-log D(x, G(x, t))]`.
    #[default]
    NonSaturating,
}

fn check_scores<T: Element>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    let bad = g
        .value(v)
        .data()
        .iter()
        .find(|&&s| !(s > T::zero() && s < T::one()));
    match bad {
        Some(s) => Err(Error::invalid(format!("{what} score {s} outside (0, 1)"))),
        None => Ok(()),
    }
}

fn check_posterior<T: Element>(g: &Graph<T>, v: Var) -> Result<()> {
    let s = g.shape(v);
    if s.len() != 2 {
        return Err(Error::shape(format!("posterior must be [N, K], got {:?}", s)));
    }
    let k = s[1];
    for row in g.value(v).data().chunks(k) {
        let sum: f64 = row.iter().map(|p| p.to_f64().unwrap()).sum();
        if row.iter().any(|&p| p < T::zero()) || (sum - 1.0).abs() > 1e-4 {
            return Err(Error::invalid("class posterior is not a probability vector"));
        }
    }
    Ok(())
}

/// Mean absolute difference over all voxels and batch items.
pub fn l1_term<T: Element>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

fn add_l1<T: Element>(g: &mut Graph<T>, adv: Var, pred: Var, target: Var, w: &LossWeights) -> Result<Var> {
    let l1 = l1_term(g, pred, target)?;
    let l1 = g.scale(l1, w.lambda_l1);
    g.add(adv, l1)
}

/// Adversarial part of the generator objective from scores.
pub fn generator_adversarial<T: Element>(g: &mut Graph<T>, fake_scores: Var, mode: GeneratorMode) -> Result<Var> {
    check_scores(g, fake_scores, "fake")?;
    let per = match mode {
        GeneratorMode::Literal => {
            let neg = g.scale(fake_scores, -1.0);
            let one_minus = g.add_const(neg, 1.0);
            g.ln(one_minus)
        }
        GeneratorMode::NonSaturating => {
            let l = g.ln(fake_scores);
            g.scale(l, -1.0)
        }
    };
    Ok(g.mean(per))
}

/// Adversarial part of the generator objective from pre-sigmoid logits.
pub fn generator_adversarial_logits<T: Element>(g: &mut Graph<T>, fake_logits: Var, mode: GeneratorMode) -> Var {
    let per = match mode {
        // log(1 - sigmoid(z)) = -softplus(z)
        GeneratorMode::Literal => {
            let sp = g.softplus(fake_logits);
            g.scale(sp, -1.0)
        }
        // -log sigmoid(z) = softplus(-z)
        GeneratorMode::NonSaturating => {
            let neg = g.scale(fake_logits, -1.0);
            g.softplus(neg)
        }
    };
    g.mean(per)
}

/// Adversarial term plus `lambda_l1` times the L1 reconstruction term.
pub fn gan_generator_loss<T: Element>(
    g: &mut Graph<T>,
    fake_scores: Var,
    pred: Var,
    target: Var,
    w: &LossWeights,
    mode: GeneratorMode,
) -> Result<Var> {
    let adv = generator_adversarial(g, fake_scores, mode)?;
    add_l1(g, adv, pred, target, w)
}

pub fn gan_generator_loss_logits<T: Element>(
    g: &mut Graph<T>,
    fake_logits: Var,
    pred: Var,
    target: Var,
    w: &LossWeights,
    mode: GeneratorMode,
) -> Result<Var> {
    let adv = generator_adversarial_logits(g, fake_logits, mode);
    add_l1(g, adv, pred, target, w)
}

/// Mean binary cross-entropy of `scores` against a constant label.
fn bce<T: Element>(g: &mut Graph<T>, scores: Var, label: f64) -> Var {
    let ls = g.ln(scores);
    let neg = g.scale(scores, -1.0);
    let one_minus = g.add_const(neg, 1.0);
    let l1s = g.ln(one_minus);
    let a = g.scale(ls, -label);
    let b = g.scale(l1s, -(1.0 - label));
    let per = g.add(a, b).expect("same shape");
    g.mean(per)
}

/// `softplus(z) - y z`, the cross-entropy of `sigmoid(z)` against `y`.
fn bce_logits<T: Element>(g: &mut Graph<T>, logits: Var, label: f64) -> Var {
    let sp = g.softplus(logits);
    let yz = g.scale(logits, label);
    let per = g.sub(sp, yz).expect("same shape");
    g.mean(per)
}

/// Negated discriminator objective with smoothed real targets.
pub fn gan_discriminator_loss<T: Element>(g: &mut Graph<T>, real_scores: Var, fake_scores: Var, w: &LossWeights) -> Result<Var> {
    check_scores(g, real_scores, "real")?;
    check_scores(g, fake_scores, "fake")?;
    let r = bce(g, real_scores, w.real_label);
    let f = bce(g, fake_scores, w.fake_label);
    g.add(r, f)
}

pub fn gan_discriminator_loss_logits<T: Element>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var, w: &LossWeights) -> Result<Var> {
    let r = bce_logits(g, real_logits, w.real_label);
    let f = bce_logits(g, fake_logits, w.fake_label);
    g.add(r, f)
}

fn class_indices(classes: &[ClassLabel]) -> Vec<usize> {
    classes.iter().map(|c| c.index).collect()
}

/// Mean of `-ln p(c | ·)` over the batch.
pub fn class_cross_entropy<T: Element>(g: &mut Graph<T>, posterior: Var, classes: &[ClassLabel]) -> Result<Var> {
    check_posterior(g, posterior)?;
    let picked = g.select(posterior, &class_indices(classes))?;
    let l = g.ln(picked);
    let m = g.mean(l);
    Ok(g.scale(m, -1.0))
}

pub fn class_cross_entropy_logits<T: Element>(g: &mut Graph<T>, class_logits: Var, classes: &[ClassLabel]) -> Result<Var> {
    let ls = g.log_softmax(class_logits)?;
    let picked = g.select(ls, &class_indices(classes))?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Discriminator loss plus `lambda_cls` times the classification terms on
/// real and generated pairs.
#[allow(clippy::too_many_arguments)]
pub fn acgan_discriminator_loss<T: Element>(
    g: &mut Graph<T>,
    real_scores: Var,
    fake_scores: Var,
    real_posterior: Var,
    fake_posterior: Var,
    classes: &[ClassLabel],
    w: &LossWeights,
) -> Result<Var> {
    let adv = gan_discriminator_loss(g, real_scores, fake_scores, w)?;
    let cr = class_cross_entropy(g, real_posterior, classes)?;
    let cf = class_cross_entropy(g, fake_posterior, classes)?;
    let cls = g.add(cr, cf)?;
    let cls = g.scale(cls, w.lambda_cls);
    g.add(adv, cls)
}

#[allow(clippy::too_many_arguments)]
pub fn acgan_discriminator_loss_logits<T: Element>(
    g: &mut Graph<T>,
    real_logits: Var,
    fake_logits: Var,
    real_class_logits: Var,
    fake_class_logits: Var,
    classes: &[ClassLabel],
    w: &LossWeights,
) -> Result<Var> {
    let adv = gan_discriminator_loss_logits(g, real_logits, fake_logits, w)?;
    let cr = class_cross_entropy_logits(g, real_class_logits, classes)?;
    let cf = class_cross_entropy_logits(g, fake_class_logits, classes)?;
    let cls = g.add(cr, cf)?;
    let cls = g.scale(cls, w.lambda_cls);
    g.add(adv, cls)
}

/// Generator loss plus `lambda_cls` times the classification term on
/// generated pairs.
#[allow(clippy::too_many_arguments)]
pub fn acgan_generator_loss<T: Element>(
    g: &mut Graph<T>,
    fake_scores: Var,
    fake_posterior: Var,
    classes: &[ClassLabel],
    pred: Var,
    target: Var,
    w: &LossWeights,
    mode: GeneratorMode,
) -> Result<Var> {
    let base = gan_generator_loss(g, fake_scores, pred, target, w, mode)?;
    let cls = class_cross_entropy(g, fake_posterior, classes)?;
    let cls = g.scale(cls, w.lambda_cls);
    g.add(base, cls)
}

#[allow(clippy::too_many_arguments)]
pub fn acgan_generator_loss_logits<T: Element>(
    g: &mut Graph<T>,
    fake_logits: Var,
    fake_class_logits: Var,
    classes: &[ClassLabel],
    pred: Var,
    target: Var,
    w: &LossWeights,
    mode: GeneratorMode,
) -> Result<Var> {
    let base = gan_generator_loss_logits(g, fake_logits, pred, target, w, mode)?;
    let cls = class_cross_entropy_logits(g, fake_class_logits, classes)?;
    let cls = g.scale(cls, w.lambda_cls);
    g.add(base, cls)
}
