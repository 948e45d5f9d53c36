use crate::error::{Error, Result};
use crate::labels::{LabelMap, NUM_LABELS};
use crate::tensor::Tensor;

/// A multi-channel image with its label map and derived presence vector.
///
/// The presence vector is always recomputed from the labels, so it can never
/// disagree with them.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    image: Tensor,
    labels: LabelMap,
    classes: usize,
    presence: Vec<bool>,
}

/// Per-ROI presence over the full taxonomy: `out[k-1]` is whether label `k` occurs.
pub fn presence_from_labels(labels: &LabelMap) -> Vec<bool> {
    labels.presence(NUM_LABELS)
}

impl Sample {
    /// A full-taxonomy sample (9 classes, 8 presence entries).
    pub fn new(image: Tensor, labels: LabelMap) -> Result<Self> {
        Self::with_classes(image, labels, NUM_LABELS)
    }

    /// A sample labelled in a `classes`-class taxonomy (a cascade stage).
    pub fn with_classes(image: Tensor, labels: LabelMap, classes: usize) -> Result<Self> {
        match *image.shape() {
            [_, h, w] if (h, w) == labels.dims() => {}
            ref s => {
                return Err(Error::LengthMismatch(format!(
                    "image {s:?} with a {}x{} label map",
                    labels.height(),
                    labels.width()
                )))
            }
        }
        labels.validate(classes)?;
        let presence = labels.presence(classes);
        Ok(Self {
            image,
            labels,
            classes,
            presence,
        })
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn presence(&self) -> &[bool] {
        &self.presence
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    /// Same labels, different image of identical shape.
    pub fn with_image(&self, image: Tensor) -> Self {
        assert_eq!(image.shape(), self.image.shape());
        Self {
            image,
            labels: self.labels.clone(),
            classes: self.classes,
            presence: self.presence.clone(),
        }
    }
}
