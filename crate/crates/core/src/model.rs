//! Trained models: one network over the full taxonomy, or a three-stage cascade.

use rayon::prelude::*;

use crate::adversarial::{fgsm, AttackConfig};
use crate::cascade::{run_cascade, CascadeConfig, StagePlan, StagePrediction, StagePredictor, PLANS};
use crate::dataio::Sample;
use crate::error::Result;
use crate::labels::{LabelMap, NUM_LABELS};
use crate::metrics::EvalReport;
use crate::params::Params;
use crate::segnet::{predict_labelmap, predict_presence, NetSpec};
use crate::tensor::Tensor;

pub const PRESENCE_THRESHOLD: f64 = 0.5;

/// One network and the loss weighting it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct StageModel {
    pub spec: NetSpec,
    pub params: Params,
    /// Presence-loss weight; zero when the class head is off.
    pub lambda: f64,
    pub class_head: bool,
}

impl StageModel {
    pub fn new(spec: NetSpec, params: Params, class_head: bool, lambda: f64) -> Result<Self> {
        spec.validate()?;
        spec.check_params(&params)?;
        Ok(Self {
            spec,
            params,
            lambda: if class_head { lambda } else { 0.0 },
            class_head,
        })
    }

    pub fn predict(&self, image: &Tensor) -> Result<StagePrediction> {
        let out = self.spec.forward(&self.params, image)?;
        Ok(StagePrediction {
            labels: predict_labelmap(&out.seg_logits),
            presence: self
                .class_head
                .then(|| predict_presence(&out.presence_logits, PRESENCE_THRESHOLD)),
        })
    }

    /// Perturb `image` against this network (when an attack is given), then predict.
    pub fn predict_attacked(
        &self,
        image: &Tensor,
        truth: Option<&LabelMap>,
        attack: Option<&AttackConfig>,
    ) -> Result<StagePrediction> {
        match (attack, truth) {
            (Some(cfg), Some(truth)) if cfg.epsilon > 0.0 => {
                let presence = truth.presence(self.spec.stage_classes);
                let adv = fgsm(self, image, truth, &presence, cfg)?;
                self.predict(&adv)
            }
            _ => self.predict(image),
        }
    }
}

struct Attacked<'a> {
    model: &'a StageModel,
    attack: Option<&'a AttackConfig>,
}

impl StagePredictor for Attacked<'_> {
    fn predict(&self, _plan: &StagePlan, image: &Tensor, truth: Option<&LabelMap>) -> Result<StagePrediction> {
        self.model.predict_attacked(image, truth, self.attack)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Single(StageModel),
    Cascade {
        stages: Box<[StageModel; 3]>,
        cascade: CascadeConfig,
    },
}

impl Model {
    pub fn class_head(&self) -> bool {
        match self {
            Model::Single(m) => m.class_head,
            Model::Cascade { stages, .. } => stages[0].class_head,
        }
    }

    /// Full-taxonomy prediction. Under attack each network is perturbed
    /// against its own loss on its own input, using the true labels.
    pub fn predict(&self, sample: &Sample, attack: Option<&AttackConfig>) -> Result<StagePrediction> {
        match self {
            Model::Single(m) => m.predict_attacked(sample.image(), Some(sample.labels()), attack),
            Model::Cascade { stages, cascade } => {
                let [a, b, c] = &**stages;
                let wrap = |model| Attacked { model, attack };
                let (a, b, c) = (wrap(a), wrap(b), wrap(c));
                let out = run_cascade([&a, &b, &c], sample.image(), Some(sample.labels()), *cascade)?;
                Ok(StagePrediction {
                    labels: out.labels,
                    presence: out.presence.map(|p| p.to_vec()),
                })
            }
        }
    }

    /// Predict every sample, fanning out over `workers` threads. Results are
    /// in sample order and do not depend on the worker count.
    pub fn predict_all(
        &self,
        samples: &[Sample],
        attack: Option<&AttackConfig>,
        workers: usize,
    ) -> Result<Vec<StagePrediction>> {
        if workers <= 1 {
            return samples.iter().map(|s| self.predict(s, attack)).collect();
        }
        pool(workers).install(|| samples.par_iter().map(|s| self.predict(s, attack)).collect())
    }

    pub fn evaluate(&self, samples: &[Sample], attack: Option<&AttackConfig>, workers: usize) -> Result<EvalReport> {
        let preds = self.predict_all(samples, attack, workers)?;
        report(&preds, samples)
    }

    pub fn plans() -> &'static [StagePlan; 3] {
        &PLANS
    }
}

/// Evaluation report of stage predictions against full-taxonomy samples.
pub fn report(preds: &[StagePrediction], samples: &[Sample]) -> Result<EvalReport> {
    let labels: Vec<LabelMap> = preds.iter().map(|p| p.labels.clone()).collect();
    let truths: Vec<LabelMap> = samples.iter().map(|s| s.labels().clone()).collect();
    let presence: Option<Vec<Vec<bool>>> = preds.iter().map(|p| p.presence.clone()).collect();
    let truth_presence: Vec<Vec<bool>> = samples.iter().map(|s| s.presence().to_vec()).collect();
    EvalReport::from_predictions(
        &labels,
        &truths,
        presence.as_deref().map(|p| (p, truth_presence.as_slice())),
    )
}

/// Ground-truth predictions, for pipeline checks.
pub fn oracle_predictions(samples: &[Sample]) -> Vec<StagePrediction> {
    samples
        .iter()
        .map(|s| StagePrediction {
            labels: s.labels().clone(),
            presence: Some(s.labels().presence(NUM_LABELS)),
        })
        .collect()
}

pub(crate) fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}
