//! Minibatch training of stage networks and of whole models.
//!
//! Each sample gets its own tape; per-sample gradients are summed in sample
//! order, so results are bit-identical for any worker count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adversarial::{mix_batch, AttackConfig};
use crate::autodiff::{Sgd, Tape};
use crate::cascade::{teacher_forced_samples, CascadeConfig, PLANS};
use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::losses::combined_loss;
use crate::metrics::{dice_per_class, mean_dice};
use crate::model::{pool, Model, StageModel};
use crate::params::Params;
use crate::segnet::{predict_labelmap, NetSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    /// Rescale each batch gradient to at most this global L2 norm; `None`
    /// leaves it alone. Without it a single bad batch can wreck a run.
    pub grad_clip: Option<f32>,
    pub schedule: LrSchedule,
    pub lambda: f64,
    pub class_head: bool,
    /// Adversarial training; `None` trains on clean images only.
    pub defense: Option<AttackConfig>,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 0.02,
            momentum: 0.9,
            grad_clip: Some(5.0),
            schedule: LrSchedule::Tail,
            lambda: 1.0,
            class_head: true,
            defense: None,
            seed: 42,
            workers: 1,
        }
    }
}

/// How the learning rate moves over the epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half a cosine from `lr` at the first epoch towards zero after the last.
    Cosine,
    /// Constant for the first three quarters, then a cosine decay over the
    /// rest: long enough at full rate to pick up the hard classes, but the
    /// last epochs settle instead of bouncing around.
    Tail,
}

impl LrSchedule {
    pub fn lr(self, base: f32, epoch: usize, epochs: usize) -> f32 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => half_cosine(base, epoch as f64 / epochs.max(1) as f64),
            LrSchedule::Tail => {
                let start = epochs - epochs / 4;
                if epoch < start {
                    base
                } else {
                    half_cosine(base, (epoch - start) as f64 / (epochs - start) as f64)
                }
            }
        }
    }
}

fn half_cosine(base: f32, t: f64) -> f32 {
    (f64::from(base) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

impl std::str::FromStr for LrSchedule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            "tail" => Ok(LrSchedule::Tail),
            _ => Err("expected constant, cosine or tail".into()),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
            LrSchedule::Tail => "tail",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    /// Mean combined loss over the epoch's samples.
    pub loss: f64,
    /// Mean Dice on the validation set in the stage taxonomy.
    pub val_dice: Option<f64>,
}

/// Loss and parameter gradients of one sample.
fn sample_gradient(model: &StageModel, sample: &Sample) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::<f32>::new();
    let vars = model.params.register(&mut tape, true);
    let x = tape.constant(sample.image().clone());
    let out = model.spec.forward_tape(&mut tape, &vars, x)?;
    let loss = combined_loss(
        &mut tape,
        out.seg_logits,
        sample.labels(),
        out.presence_logits,
        sample.presence(),
        model.lambda,
    )?;
    let value = tape.value(loss.combined).item().into();
    let mut grads = tape.backward(loss.combined)?;
    let g = vars.iter().map(|v| grads.take(v)).collect::<Result<_>>()?;
    Ok((value, g))
}

/// Stage-taxonomy mean Dice of `model` over `samples`.
pub fn stage_dice(model: &StageModel, samples: &[Sample], workers: usize) -> Result<Option<f64>> {
    let k = model.spec.stage_classes;
    let one = |s: &Sample| -> Result<Vec<Option<f64>>> {
        let out = model.spec.forward(&model.params, s.image())?;
        dice_per_class(&predict_labelmap(&out.seg_logits), s.labels(), k)
    };
    let per: Vec<_> = if workers <= 1 {
        samples.iter().map(one).collect::<Result<_>>()?
    } else {
        pool(workers).install(|| samples.par_iter().map(one).collect::<Result<_>>())?
    };
    Ok(mean_dice(&per).ok())
}

fn global_norm(grads: &[Tensor]) -> f32 {
    let sq: f64 = grads.iter().flat_map(|g| g.data()).map(|&v| f64::from(v) * f64::from(v)).sum();
    sq.sqrt() as f32
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Train one network from `model.params`. `on_epoch` sees each epoch's log.
pub fn train_stage(
    mut model: StageModel,
    stage: u8,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(StageModel, Vec<EpochLog>)> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if let Some(d) = &cfg.defense {
        d.validate()?;
    }
    if let Some(c) = cfg.grad_clip {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
        }
    }
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum)?;
    let frozen = vec![false; model.params.len()];
    let workers = cfg.workers.max(1);
    let threads = (workers > 1).then(|| pool(workers));
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut shuffle = rng(cfg.seed, 2 * epoch as u64);
        let mut attack_rng = rng(cfg.seed, 2 * epoch as u64 + 1);
        order.shuffle(&mut shuffle);
        sgd.lr = cfg.schedule.lr(cfg.lr, epoch, cfg.epochs);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let clean: Vec<Sample> = idx.iter().map(|&i| train[i].clone()).collect();
            let batch = match &cfg.defense {
                Some(d) => mix_batch(&clean, &model, d, &mut attack_rng)?,
                None => clean,
            };
            let results: Vec<(f64, Vec<Tensor>)> = match &threads {
                Some(p) => p.install(|| batch.par_iter().map(|s| sample_gradient(&model, s)).collect::<Result<_>>())?,
                None => batch.iter().map(|s| sample_gradient(&model, s)).collect::<Result<_>>()?,
            };
            let mut results = results.into_iter();
            let (first_loss, mut sum) = results.next().expect("nonempty batch");
            let mut batch_loss = first_loss;
            for (l, g) in results {
                batch_loss += l;
                for (a, b) in sum.iter_mut().zip(&g) {
                    a.add_assign(b);
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            let mut scale = 1.0 / batch.len() as f32;
            if let Some(clip) = cfg.grad_clip {
                let norm = scale * global_norm(&sum);
                if norm > clip {
                    scale *= clip / norm;
                }
            }
            let grads: Vec<Option<Tensor>> = sum
                .into_iter()
                .map(|mut g| {
                    g.scale_assign(scale);
                    Some(g)
                })
                .collect();
            sgd.step(&mut model.params, &grads, &frozen).map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::Diverged { epoch, batch: b },
                e => e,
            })?;
            total += batch_loss;
        }
        let log = EpochLog {
            stage,
            epoch,
            loss: total / train.len().max(1) as f64,
            val_dice: if val.is_empty() { None } else { stage_dice(&model, val, workers)? },
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

/// Network shape shared by every stage of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub base_width: usize,
    pub depth: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        let s = NetSpec::default();
        Self {
            base_width: s.base_width,
            depth: s.depth,
        }
    }
}

impl Architecture {
    pub fn spec(&self, classes: usize) -> NetSpec {
        NetSpec {
            base_width: self.base_width,
            depth: self.depth,
            ..NetSpec::with_classes(classes)
        }
    }
}

/// Freshly initialized model; stage `s` (1-based) uses seed `seed + s`.
pub fn init_model(arch: Architecture, cascade: Option<CascadeConfig>, cfg: &TrainConfig) -> Result<Model> {
    let stage = |k: usize, s: u64| {
        let spec = arch.spec(k);
        spec.validate()?;
        StageModel::new(spec, spec.init_params(cfg.seed.wrapping_add(s)), cfg.class_head, cfg.lambda)
    };
    Ok(match cascade {
        None => Model::Single(stage(crate::labels::NUM_LABELS, 0)?),
        Some(c) => Model::Cascade {
            stages: Box::new([
                stage(PLANS[0].classes(), 1)?,
                stage(PLANS[1].classes(), 2)?,
                stage(PLANS[2].classes(), 3)?,
            ]),
            cascade: c,
        },
    })
}

/// Per-stage training data: stage 1 sees whole images, deeper stages see
/// crops cut with ground-truth boxes.
pub fn stage_datasets(samples: &[Sample], cascade: CascadeConfig) -> Result<[Vec<Sample>; 3]> {
    let mut out: [Vec<Sample>; 3] = Default::default();
    for s in samples {
        for (dst, part) in out.iter_mut().zip(teacher_forced_samples(s, cascade)?) {
            dst.extend(part);
        }
    }
    Ok(out)
}

/// Train every network of `model`.
pub fn train_model(
    model: Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(Model, Vec<EpochLog>)> {
    match model {
        Model::Single(m) => {
            let (m, logs) = train_stage(m, 0, train, val, cfg, on_epoch)?;
            Ok((Model::Single(m), logs))
        }
        Model::Cascade { stages, cascade } => {
            let tr = stage_datasets(train, cascade)?;
            let va = stage_datasets(val, cascade)?;
            let mut logs = Vec::new();
            let [a, b, c] = *stages;
            let mut trained = Vec::with_capacity(3);
            for (i, m) in [a, b, c].into_iter().enumerate() {
                let (m, l) = train_stage(m, i as u8 + 1, &tr[i], &va[i], cfg, on_epoch)?;
                logs.extend(l);
                trained.push(m);
            }
            let stages: [StageModel; 3] = trained.try_into().expect("three stages");
            Ok((
                Model::Cascade {
                    stages: Box::new(stages),
                    cascade,
                },
                logs,
            ))
        }
    }
}

/// Parameters of each network, in stage order.
pub fn model_params(model: &Model) -> Vec<&Params> {
    match model {
        Model::Single(m) => vec![&m.params],
        Model::Cascade { stages, .. } => stages.iter().map(|m| &m.params).collect(),
    }
}
