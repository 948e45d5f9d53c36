//! Three-stage coarse-to-fine segmentation.
//!
//! Stage 1 segments the large structures (CSF, cerebellum, brain stem) and
//! one merged locating class LOC1 covering GM, WM, L, B and V. The bounding
//! box of LOC1 is cropped and passed to stage 2, which segments GM, WM, L and
//! a second locating class LOC2 covering B and V. The LOC2 box, taken inside
//! the stage-2 crop, feeds stage 3, which segments B and V.
//!
//! Fusion: the deeper stage decides inside its crop; OTHER maps to background,
//! as do locating pixels whose deeper stage never ran.

use std::fmt;

use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::labels::{LabelId, LabelMap, NUM_LABELS, NUM_ROIS};
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: usize = 4;

/// Label taxonomy of one cascade stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub stage: u8,
    /// Stage label for each full label id.
    pub mapping: [u8; NUM_LABELS],
    /// Full label for each stage label; `None` for the locating class.
    pub back: &'static [Option<LabelId>],
    pub names: &'static [&'static str],
    pub locating: Option<u8>,
}

use LabelId as F;

pub const STAGE1: StagePlan = StagePlan {
    stage: 1,
    //         BG GM B  WM L  CSF V  C  BS
    mapping: [0, 4, 4, 4, 4, 1, 4, 2, 3],
    back: &[Some(F::Bg), Some(F::Csf), Some(F::C), Some(F::Bs), None],
    names: &["BG", "CSF", "C", "BS", "LOC1"],
    locating: Some(4),
};

pub const STAGE2: StagePlan = StagePlan {
    stage: 2,
    //         BG GM B  WM L  CSF V  C  BS
    mapping: [0, 1, 4, 2, 3, 0, 4, 0, 0],
    back: &[Some(F::Bg), Some(F::Gm), Some(F::Wm), Some(F::L), None],
    names: &["OTHER", "GM", "WM", "L", "LOC2"],
    locating: Some(4),
};

pub const STAGE3: StagePlan = StagePlan {
    stage: 3,
    //         BG GM B  WM L  CSF V  C  BS
    mapping: [0, 0, 1, 0, 0, 0, 2, 0, 0],
    back: &[Some(F::Bg), Some(F::B), Some(F::V)],
    names: &["OTHER", "B", "V"],
    locating: None,
};

pub const PLANS: [StagePlan; 3] = [STAGE1, STAGE2, STAGE3];

impl StagePlan {
    /// Class count K of the stage network.
    pub fn classes(&self) -> usize {
        self.back.len()
    }

    /// Apply the mapping to a full-taxonomy map.
    pub fn relabel(&self, full: &LabelMap) -> Result<LabelMap> {
        full.validate(NUM_LABELS)?;
        let data = full.data().iter().map(|&l| self.mapping[l as usize]).collect();
        Ok(LabelMap::new(full.height(), full.width(), data))
    }

    /// Which ROI (index into [`LabelId::ROIS`]) each presence output of this
    /// stage reports on; `None` for the locating class.
    pub fn presence_rois(&self) -> Vec<Option<usize>> {
        self.back[1..]
            .iter()
            .map(|b| b.map(|l| l as usize - 1))
            .collect()
    }
}

impl fmt::Display for StagePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "stage {} (K={})", self.stage, self.classes())?;
        for l in LabelId::ALL {
            let s = self.mapping[l as usize];
            writeln!(f, "  {:<4} -> {}", l.name(), self.names[s as usize])?;
        }
        match self.locating {
            Some(id) => write!(f, "  locating class: {}", self.names[id as usize]),
            None => write!(f, "  locating class: none"),
        }
    }
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    pub fn new(y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        assert!(y0 < y1 && x0 < x1, "empty box ({y0},{x0})-({y1},{x1})");
        Self { y0, x0, y1, x1 }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, height, width)
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        self.y0 <= other.y0 && self.x0 <= other.x0 && other.y1 <= self.y1 && other.x1 <= self.x1
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.y1 <= height && self.x1 <= width
    }

    /// Translate by the origin of an enclosing box.
    pub fn offset(&self, by: &BBox) -> BBox {
        BBox::new(self.y0 + by.y0, self.x0 + by.x0, self.y1 + by.y0, self.x1 + by.x0)
    }
}

/// Grow `[lo, hi)` symmetrically to a multiple of `align`, clipped to
/// `[0, limit)` with any deficit moved to the other side.
fn grow_to_multiple(lo: usize, hi: usize, align: usize, limit: usize) -> (usize, usize) {
    let len = hi - lo;
    let target = len.div_ceil(align) * align;
    let target = target.min(limit);
    let deficit = target - len;
    let before = deficit / 2;
    let mut after = deficit - before;
    let lo = if lo >= before {
        lo - before
    } else {
        after += before - lo;
        0
    };
    let mut hi = hi + after;
    let mut lo = lo;
    if hi > limit {
        lo -= hi - limit;
        hi = limit;
    }
    (lo, hi)
}

/// Bounding box of the pixels equal to `locating`, padded by `margin`,
/// clipped to the map, then grown to multiples of `align`.
pub fn locate_bbox(map: &LabelMap, locating: u8, margin: usize, align: usize) -> Option<BBox> {
    let (h, w) = map.dims();
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if map.get(y, x) == locating {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y + 1);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y1 == 0 {
        return None;
    }
    let y0 = y0.saturating_sub(margin);
    let x0 = x0.saturating_sub(margin);
    let y1 = (y1 + margin).min(h);
    let x1 = (x1 + margin).min(w);
    let align = align.max(1);
    let (y0, y1) = grow_to_multiple(y0, y1, align, h);
    let (x0, x1) = grow_to_multiple(x0, x1, align, w);
    Some(BBox::new(y0, x0, y1, x1))
}

pub fn crop_labels(map: &LabelMap, b: &BBox) -> Result<LabelMap> {
    if !b.fits(map.height(), map.width()) {
        return Err(Error::OutOfBounds(*b, map.height(), map.width()));
    }
    let mut data = Vec::with_capacity(b.height() * b.width());
    for y in b.y0..b.y1 {
        data.extend_from_slice(&map.data()[y * map.width() + b.x0..y * map.width() + b.x1]);
    }
    Ok(LabelMap::new(b.height(), b.width(), data))
}

pub fn crop_image(image: &Tensor, b: &BBox) -> Result<Tensor> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::LengthMismatch(format!("image {:?} is not [C,H,W]", image.shape())));
    };
    if !b.fits(h, w) {
        return Err(Error::OutOfBounds(*b, h, w));
    }
    let mut data = Vec::with_capacity(c * b.height() * b.width());
    for ci in 0..c {
        for y in b.y0..b.y1 {
            data.extend_from_slice(&image.data()[ci * h * w + y * w + b.x0..][..b.width()]);
        }
    }
    Ok(Tensor::new([c, b.height(), b.width()], data))
}

/// Restrict image and labels to `b`; presence is recomputed from the crop.
pub fn crop(sample: &Sample, b: &BBox) -> Result<Sample> {
    let labels = crop_labels(sample.labels(), b)?;
    let image = crop_image(sample.image(), b)?;
    Sample::with_classes(image, labels, sample.classes())
}

/// Write `patch` into `canvas` at `b`.
pub fn paste(canvas: &mut LabelMap, patch: &LabelMap, b: &BBox) -> Result<()> {
    if patch.dims() != (b.height(), b.width()) || !b.fits(canvas.height(), canvas.width()) {
        return Err(Error::OutOfBounds(*b, canvas.height(), canvas.width()));
    }
    for y in 0..b.height() {
        for x in 0..b.width() {
            canvas.set(b.y0 + y, b.x0 + x, patch.get(y, x));
        }
    }
    Ok(())
}

/// Combine the three stage maps into one full-taxonomy map. Stage boxes are
/// in full-image coordinates; each stage map must match its box.
pub fn fuse(
    stage1: &LabelMap,
    stage2: Option<(&BBox, &LabelMap)>,
    stage3: Option<(&BBox, &LabelMap)>,
) -> Result<LabelMap> {
    let (h, w) = stage1.dims();
    stage1.validate(STAGE1.classes())?;
    for (plan, part) in [(&STAGE2, stage2), (&STAGE3, stage3)] {
        if let Some((b, m)) = part {
            if m.dims() != (b.height(), b.width()) || !b.fits(h, w) {
                return Err(Error::LengthMismatch(format!(
                    "stage {} map {:?} does not match box {b:?} in a {h}x{w} image",
                    plan.stage,
                    m.dims()
                )));
            }
            m.validate(plan.classes())?;
        }
    }
    let loc1 = STAGE1.locating.unwrap();
    let loc2 = STAGE2.locating.unwrap();
    let bg = LabelId::Bg as u8;
    let full = |plan: &StagePlan, s: u8| plan.back[s as usize].map_or(bg, |l| l as u8);
    let mut out = LabelMap::filled(h, w, bg);
    for y in 0..h {
        for x in 0..w {
            let s1 = stage1.get(y, x);
            let label = if s1 != loc1 {
                full(&STAGE1, s1)
            } else {
                match stage2 {
                    Some((b2, m2)) if b2.contains(y, x) => {
                        let s2 = m2.get(y - b2.y0, x - b2.x0);
                        if s2 != loc2 {
                            full(&STAGE2, s2)
                        } else {
                            match stage3 {
                                Some((b3, m3)) if b3.contains(y, x) => full(&STAGE3, m3.get(y - b3.y0, x - b3.x0)),
                                _ => bg,
                            }
                        }
                    }
                    _ => bg,
                }
            };
            out.set(y, x, label);
        }
    }
    Ok(out)
}

/// One stage's verdict on an image.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePrediction {
    pub labels: LabelMap,
    /// Presence of each stage foreground class, when the stage has a head.
    pub presence: Option<Vec<bool>>,
}

/// Anything that can segment one stage: a trained network, or a test oracle.
pub trait StagePredictor {
    /// `truth` is the ground-truth stage map of `image`, when known. Oracles
    /// return it; attacked networks use it to craft their perturbation.
    fn predict(&self, plan: &StagePlan, image: &Tensor, truth: Option<&LabelMap>) -> Result<StagePrediction>;
}

/// Returns the ground truth it is given.
pub struct OracleStage;

impl StagePredictor for OracleStage {
    fn predict(&self, plan: &StagePlan, _image: &Tensor, truth: Option<&LabelMap>) -> Result<StagePrediction> {
        let labels = truth
            .cloned()
            .ok_or_else(|| Error::Config("oracle stage needs ground truth".into()))?;
        let presence = labels.presence(plan.classes());
        Ok(StagePrediction {
            labels,
            presence: Some(presence),
        })
    }
}

#[derive(Clone, Debug)]
pub struct CascadeOutput {
    pub labels: LabelMap,
    /// Presence per ROI; ROIs of skipped stages are absent.
    pub presence: Option<[bool; NUM_ROIS]>,
    pub box2: Option<BBox>,
    /// In full-image coordinates.
    pub box3: Option<BBox>,
    pub stages_run: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CascadeConfig {
    pub margin: usize,
    pub align: usize,
}

/// Run the three stages coarse to fine and fuse their outputs. `truth` is
/// the full-taxonomy ground truth, forwarded (relabelled and cropped) to the
/// stage predictors when given.
pub fn run_cascade(
    stages: [&dyn StagePredictor; 3],
    image: &Tensor,
    truth: Option<&LabelMap>,
    cfg: CascadeConfig,
) -> Result<CascadeOutput> {
    let stage_truth = |plan: &StagePlan, b: &BBox| -> Result<Option<LabelMap>> {
        truth.map(|t| plan.relabel(&crop_labels(t, b)?)).transpose()
    };
    let [_, h, w] = *image.shape() else {
        return Err(Error::LengthMismatch(format!("image {:?} is not [C,H,W]", image.shape())));
    };
    let full_box = BBox::full(h, w);

    let p1 = stages[0].predict(&STAGE1, image, stage_truth(&STAGE1, &full_box)?.as_ref())?;
    let mut presence = p1.presence.as_ref().map(|_| [false; NUM_ROIS]);
    let mut record = |plan: &StagePlan, p: &Option<Vec<bool>>| {
        if let (Some(acc), Some(p)) = (presence.as_mut(), p) {
            for (roi, &v) in plan.presence_rois().iter().zip(p) {
                if let Some(r) = roi {
                    acc[*r] = v;
                }
            }
        }
    };
    record(&STAGE1, &p1.presence);

    let mut stages_run = 1;
    let mut part2 = None;
    let mut part3 = None;
    if let Some(b2) = locate_bbox(&p1.labels, STAGE1.locating.unwrap(), cfg.margin, cfg.align) {
        let img2 = crop_image(image, &b2)?;
        let p2 = stages[1].predict(&STAGE2, &img2, stage_truth(&STAGE2, &b2)?.as_ref())?;
        stages_run += 1;
        record(&STAGE2, &p2.presence);
        if let Some(b3_local) = locate_bbox(&p2.labels, STAGE2.locating.unwrap(), cfg.margin, cfg.align) {
            let b3 = b3_local.offset(&b2);
            let img3 = crop_image(&img2, &b3_local)?;
            let p3 = stages[2].predict(&STAGE3, &img3, stage_truth(&STAGE3, &b3)?.as_ref())?;
            stages_run += 1;
            record(&STAGE3, &p3.presence);
            part3 = Some((b3, p3.labels));
        }
        part2 = Some((b2, p2.labels));
    }
    let labels = fuse(
        &p1.labels,
        part2.as_ref().map(|(b, m)| (b, m)),
        part3.as_ref().map(|(b, m)| (b, m)),
    )?;
    Ok(CascadeOutput {
        labels,
        presence,
        box2: part2.map(|(b, _)| b),
        box3: part3.map(|(b, _)| b),
        stages_run,
    })
}

/// Training samples for the three stages, cropped with ground-truth boxes.
/// A stage entry is `None` when its locating class is absent.
pub fn teacher_forced_samples(sample: &Sample, cfg: CascadeConfig) -> Result<[Option<Sample>; 3]> {
    let full = sample.labels();
    let s1 = Sample::with_classes(sample.image().clone(), STAGE1.relabel(full)?, STAGE1.classes())?;
    let Some(b2) = locate_bbox(s1.labels(), STAGE1.locating.unwrap(), cfg.margin, cfg.align) else {
        return Ok([Some(s1), None, None]);
    };
    let crop2 = crop(sample, &b2)?;
    let s2 = Sample::with_classes(crop2.image().clone(), STAGE2.relabel(crop2.labels())?, STAGE2.classes())?;
    let s3 = match locate_bbox(s2.labels(), STAGE2.locating.unwrap(), cfg.margin, cfg.align) {
        Some(b3) => {
            let crop3 = crop(&crop2, &b3)?;
            Some(Sample::with_classes(
                crop3.image().clone(),
                STAGE3.relabel(crop3.labels())?,
                STAGE3.classes(),
            )?)
        }
        None => None,
    };
    Ok([Some(s1), Some(s2), s3])
}
