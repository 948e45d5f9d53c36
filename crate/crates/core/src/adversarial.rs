//! Fast gradient sign attacks and adversarial training batches.
//!
//! `x_adv = clamp(x + ε·sign(∇ₓL), lo, hi)` where `L` is the combined
//! training loss of the attacked network, evaluated with the true labels.

use rand::seq::index;
use rand::Rng;

use crate::autodiff::Tape;
use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::combined_loss;
use crate::metrics::EvalReport;
use crate::model::{Model, StageModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub clamp_lo: f32,
    pub clamp_hi: f32,
    /// Fraction of each training batch replaced by adversarial images.
    pub mix_ratio: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
            mix_ratio: 0.5,
        }
    }
}

impl AttackConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clamp_lo < self.clamp_hi) {
            return Err(Error::Config(format!(
                "clamp range [{}, {}] is empty",
                self.clamp_lo, self.clamp_hi
            )));
        }
        if !(self.epsilon >= 0.0) || self.epsilon > f64::from(self.clamp_hi - self.clamp_lo) {
            return Err(Error::Config(format!(
                "epsilon {} outside [0, {}]",
                self.epsilon,
                self.clamp_hi - self.clamp_lo
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!("mix_ratio {} outside [0, 1]", self.mix_ratio)));
        }
        Ok(())
    }

    /// The step size as stored in an image: the largest `f32` not above
    /// `epsilon`, so the ε-ball bound also holds against the `f64` value.
    pub fn epsilon32(&self) -> f32 {
        let e = self.epsilon as f32;
        if f64::from(e) > self.epsilon {
            next_down(e)
        } else {
            e
        }
    }
}

/// `∇ₓ` of the model's combined loss at `image`. Parameters stay constants.
pub fn input_gradient(model: &StageModel, image: &Tensor, labels: &LabelMap, presence: &[bool]) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let vars = model.params.register(&mut tape, false);
    let x = tape.leaf(image.clone());
    let out = model.spec.forward_tape(&mut tape, &vars, x)?;
    let loss = combined_loss(&mut tape, out.seg_logits, labels, out.presence_logits, presence, model.lambda)?;
    let mut grads = tape.backward(loss.combined)?;
    let g = grads.take(x)?;
    if !g.is_finite() {
        return Err(Error::NonFiniteGradient("input image".into()));
    }
    Ok(g)
}

/// The unclamped perturbation `ε·sign(g)`, with `sign(0) = 0`.
pub fn fgsm_step(gradient: &Tensor, epsilon: f32) -> Tensor {
    gradient.map(|g| {
        if g > 0.0 {
            epsilon
        } else if g < 0.0 {
            -epsilon
        } else {
            0.0
        }
    })
}

/// `x + r` rounded toward `x`, so the stored displacement never exceeds `|r|`.
fn displace(x: f32, r: f32) -> f32 {
    let exact = f64::from(x) + f64::from(r);
    let y = exact as f32;
    if (f64::from(y) - f64::from(x)).abs() <= f64::from(r.abs()) {
        y
    } else if y > x {
        next_down(y)
    } else {
        next_up(y)
    }
}

fn next_up(v: f32) -> f32 {
    if v == 0.0 {
        f32::from_bits(1)
    } else if v > 0.0 {
        f32::from_bits(v.to_bits() + 1)
    } else {
        f32::from_bits(v.to_bits() - 1)
    }
}

fn next_down(v: f32) -> f32 {
    -next_up(-v)
}

/// Apply a perturbation and clamp to the valid range.
pub fn perturb(image: &Tensor, step: &Tensor, cfg: &AttackConfig) -> Tensor {
    let data = image
        .data()
        .iter()
        .zip(step.data())
        .map(|(&x, &r)| displace(x, r).clamp(cfg.clamp_lo, cfg.clamp_hi))
        .collect();
    Tensor::new(image.shape(), data)
}

/// Untargeted single-step attack on `model`. The parameters are not touched.
pub fn fgsm(model: &StageModel, image: &Tensor, labels: &LabelMap, presence: &[bool], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    if image.data().iter().any(|&v| !(cfg.clamp_lo..=cfg.clamp_hi).contains(&v)) {
        return Err(Error::Config(format!(
            "image values outside [{}, {}]",
            cfg.clamp_lo, cfg.clamp_hi
        )));
    }
    if cfg.epsilon == 0.0 {
        return Ok(image.clone());
    }
    let g = input_gradient(model, image, labels, presence)?;
    Ok(perturb(image, &fgsm_step(&g, cfg.epsilon32()), cfg))
}

/// Replace `round(mix_ratio·n)` uniformly chosen images of the batch by
/// adversarial ones. Labels and presence targets stay as they were.
pub fn mix_batch<R: Rng + ?Sized>(
    clean: &[Sample],
    model: &StageModel,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    if clean.is_empty() {
        return Err(Error::Config("cannot mix an empty batch".into()));
    }
    cfg.validate()?;
    let n = clean.len();
    let n_adv = (cfg.mix_ratio * n as f64).round() as usize;
    let mut chosen = vec![false; n];
    for i in index::sample(rng, n, n_adv) {
        chosen[i] = true;
    }
    clean
        .iter()
        .zip(chosen)
        .map(|(s, adv)| {
            if !adv {
                return Ok(s.clone());
            }
            let x = fgsm(model, s.image(), s.labels(), s.presence(), cfg)?;
            Ok(s.with_image(x))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackReport {
    pub clean: EvalReport,
    pub attacked: EvalReport,
}

/// Evaluate on clean inputs and on their FGSM counterparts.
pub fn attack_eval(model: &Model, samples: &[Sample], cfg: &AttackConfig, workers: usize) -> Result<AttackReport> {
    cfg.validate()?;
    Ok(AttackReport {
        clean: model.evaluate(samples, None, workers)?,
        attacked: model.evaluate(samples, Some(cfg), workers)?,
    })
}
