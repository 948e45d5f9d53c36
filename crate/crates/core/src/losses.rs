//! Training objectives, recorded on a tape so they can be differentiated.
//!
//! * pixel cross entropy, averaged over pixels;
//! * soft Dice over softmax probabilities, averaged over foreground classes;
//! * the hybrid segmentation loss `CE + (1 − Dice)`;
//! * binary cross entropy of the presence logits, in the stable
//!   `softplus(z) − c·z` form;
//! * the weighted sum `seg + λ·presence`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_SMOOTH: f64 = 1e-5;

/// `[K, H, W]` one-hot encoding of `labels`.
pub fn one_hot<T: Scalar>(labels: &LabelMap, classes: usize) -> Result<Tensor<T>> {
    labels.validate(classes)?;
    let (h, w) = labels.dims();
    let hw = h * w;
    let mut data = vec![T::zero(); classes * hw];
    for (p, &l) in labels.data().iter().enumerate() {
        data[l as usize * hw + p] = T::one();
    }
    Ok(Tensor::new([classes, h, w], data))
}

fn logits_dims<T: Scalar>(tape: &Tape<T>, logits: Var, labels: &LabelMap) -> Result<(usize, usize, usize)> {
    match *tape.value(logits).shape() {
        [k, h, w] if (h, w) == labels.dims() && k >= 2 => Ok((k, h, w)),
        ref s => Err(Error::LengthMismatch(format!(
            "logits {s:?} against a {}x{} label map",
            labels.height(),
            labels.width()
        ))),
    }
}

fn ce_from_probs<T: Scalar>(tape: &mut Tape<T>, probs: Var, target: Var, pixels: usize) -> Result<Var> {
    let logp = tape.log(probs)?;
    let picked = tape.mul(logp, target)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / pixels as f64)
}

fn dice_from_probs<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    target: &Tensor<T>,
    target_var: Var,
    smooth: f64,
) -> Result<Var> {
    let [k, h, w] = *target.shape() else { unreachable!() };
    let hw = (h * w) as f64;
    let overlap = tape.mul(probs, target_var)?;
    let overlap = tape.global_avg_pool(overlap)?;
    let num = tape.scale(overlap, 2.0 * hw)?;
    let num = tape.offset(num, smooth)?;
    let mass = tape.global_avg_pool(probs)?;
    let mass = tape.scale(mass, hw)?;
    let truth: Vec<T> = target
        .data()
        .chunks(h * w)
        .map(|plane| T::lit(plane.iter().map(|v| v.as_f64()).sum::<f64>() + smooth))
        .collect();
    let truth = tape.constant(Tensor::new([k], truth));
    let den = tape.add(mass, truth)?;
    let per_class = tape.div(num, den)?;
    let mut mask = vec![T::one(); k];
    mask[0] = T::zero();
    let mask = tape.constant(Tensor::new([k], mask));
    let fg = tape.mul(per_class, mask)?;
    let total = tape.sum(fg)?;
    tape.scale(total, 1.0 / (k - 1) as f64)
}

/// Mean over pixels of `−log softmax(logits)[true class]`.
pub fn pixel_ce<T: Scalar>(tape: &mut Tape<T>, seg_logits: Var, labels: &LabelMap) -> Result<Var> {
    let (k, h, w) = logits_dims(tape, seg_logits, labels)?;
    let target = tape.constant(one_hot::<T>(labels, k)?);
    let probs = tape.channel_softmax(seg_logits)?;
    ce_from_probs(tape, probs, target, h * w)
}

/// Mean over foreground classes of `(2Σp·g + s) / (Σp + Σg + s)`.
pub fn soft_dice<T: Scalar>(tape: &mut Tape<T>, seg_probs: Var, labels: &LabelMap, smooth: f64) -> Result<Var> {
    let (k, _, _) = logits_dims(tape, seg_probs, labels)?;
    let target = one_hot::<T>(labels, k)?;
    let target_var = tape.constant(target.clone());
    dice_from_probs(tape, seg_probs, &target, target_var, smooth)
}

#[derive(Clone, Copy, Debug)]
pub struct SegLossVars {
    pub ce: Var,
    pub dice: Var,
    pub total: Var,
}

/// `CE + (1 − soft Dice)`, sharing one softmax.
pub fn seg_loss<T: Scalar>(tape: &mut Tape<T>, seg_logits: Var, labels: &LabelMap) -> Result<SegLossVars> {
    let (k, h, w) = logits_dims(tape, seg_logits, labels)?;
    let target = one_hot::<T>(labels, k)?;
    let target_var = tape.constant(target.clone());
    let probs = tape.channel_softmax(seg_logits)?;
    let ce = ce_from_probs(tape, probs, target_var, h * w)?;
    let dice = dice_from_probs(tape, probs, &target, target_var, DEFAULT_SMOOTH)?;
    let one_minus = tape.scale(dice, -1.0)?;
    let one_minus = tape.offset(one_minus, 1.0)?;
    let total = tape.add(ce, one_minus)?;
    Ok(SegLossVars { ce, dice, total })
}

/// Mean binary cross entropy of presence logits against presence truth.
pub fn presence_bce<T: Scalar>(tape: &mut Tape<T>, presence_logits: Var, truth: &[bool]) -> Result<Var> {
    let n = tape.value(presence_logits).numel();
    if n != truth.len() || tape.value(presence_logits).rank() != 1 {
        return Err(Error::LengthMismatch(format!(
            "{n} presence logits for {} targets",
            truth.len()
        )));
    }
    let c = tape.constant(Tensor::new([n], truth.iter().map(|&t| if t { T::one() } else { T::zero() }).collect()));
    let sp = tape.softplus(presence_logits)?;
    let cz = tape.mul(presence_logits, c)?;
    let per = tape.sub(sp, cz)?;
    let s = tape.sum(per)?;
    tape.scale(s, 1.0 / n as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ce: Var,
    pub dice: Var,
    pub seg_total: Var,
    pub presence_bce: Var,
    pub combined: Var,
}

/// Scalar values of every loss term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub soft_dice_mean: f64,
    pub seg_total: f64,
    pub presence_bce: f64,
    pub combined: f64,
}

impl LossVars {
    pub fn terms<T: Scalar>(&self, tape: &Tape<T>) -> LossTerms {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossTerms {
            ce: v(self.ce),
            soft_dice_mean: v(self.dice),
            seg_total: v(self.seg_total),
            presence_bce: v(self.presence_bce),
            combined: v(self.combined),
        }
    }
}

/// `seg_total + λ·presence_bce`.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    seg_logits: Var,
    labels: &LabelMap,
    presence_logits: Var,
    presence_truth: &[bool],
    lambda: f64,
) -> Result<LossVars> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("classification weight must be nonnegative, got {lambda}")));
    }
    let seg = seg_loss(tape, seg_logits, labels)?;
    let bce = presence_bce(tape, presence_logits, presence_truth)?;
    let weighted = tape.scale(bce, lambda)?;
    let combined = tape.add(seg.total, weighted)?;
    Ok(LossVars {
        ce: seg.ce,
        dice: seg.dice,
        seg_total: seg.total,
        presence_bce: bce,
        combined,
    })
}
