//! Hard Dice, presence accuracy and CSV report rows.
//!
//! A class absent from both prediction and truth has no Dice score; it is
//! skipped when averaging rather than scored as a perfect 1.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::{LabelId, LabelMap, NUM_LABELS, NUM_ROIS};

/// Dice of each foreground class `1..classes`: `out[k-1]` is class `k`.
pub fn dice_per_class(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<Vec<Option<f64>>> {
    if pred.dims() != truth.dims() {
        return Err(Error::LengthMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    pred.validate(classes)?;
    truth.validate(classes)?;
    let mut p = vec![0usize; classes];
    let mut t = vec![0usize; classes];
    let mut both = vec![0usize; classes];
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        p[a as usize] += 1;
        t[b as usize] += 1;
        if a == b {
            both[a as usize] += 1;
        }
    }
    Ok((1..classes)
        .map(|k| match p[k] + t[k] {
            0 => None,
            denom => Some(2.0 * both[k] as f64 / denom as f64),
        })
        .collect())
}

/// Mean over the defined entries.
pub fn sample_mean(dice: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = dice.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Mean over samples of the per-sample class means. Samples with no defined
/// class are skipped; if every sample is like that, there is nothing to report.
pub fn mean_dice(per_sample: &[Vec<Option<f64>>]) -> Result<f64> {
    let means: Vec<f64> = per_sample.iter().filter_map(|d| sample_mean(d)).collect();
    if means.is_empty() {
        return Err(Error::AllUndefined);
    }
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

/// Fraction of samples whose predicted presence matches the truth, per ROI.
pub fn presence_accuracy(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<Vec<f64>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} predicted vs {} true presence vectors",
            pred.len(),
            truth.len()
        )));
    }
    let width = truth[0].len();
    let mut hits = vec![0usize; width];
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != width || t.len() != width {
            return Err(Error::LengthMismatch(format!(
                "presence vectors of length {} and {} (expected {width})",
                p.len(),
                t.len()
            )));
        }
        for (h, (a, b)) in hits.iter_mut().zip(p.iter().zip(t)) {
            *h += (a == b) as usize;
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / pred.len() as f64).collect())
}

/// Per-class Dice averaged over the samples where it is defined.
fn class_means(per_sample: &[Vec<Option<f64>>]) -> [Option<f64>; NUM_ROIS] {
    let mut out = [None; NUM_ROIS];
    for (k, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = per_sample.iter().filter_map(|d| d[k]).collect();
        if !vals.is_empty() {
            *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    out
}

/// Evaluation summary of one sample set (full 9-label taxonomy).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Indexed by ROI label id minus one: GM, B, WM, L, CSF, V, C, BS.
    pub dice: [Option<f64>; NUM_ROIS],
    pub mean_dice: Option<f64>,
    /// `None` when no presence predictions were made (class head off).
    pub presence_accuracy: Option<[f64; NUM_ROIS]>,
    pub samples: usize,
}

impl EvalReport {
    pub fn from_predictions(
        preds: &[LabelMap],
        truths: &[LabelMap],
        presence: Option<(&[Vec<bool>], &[Vec<bool>])>,
    ) -> Result<Self> {
        if preds.len() != truths.len() {
            return Err(Error::LengthMismatch(format!(
                "{} predictions for {} samples",
                preds.len(),
                truths.len()
            )));
        }
        let per_sample = preds
            .iter()
            .zip(truths)
            .map(|(p, t)| dice_per_class(p, t, NUM_LABELS))
            .collect::<Result<Vec<_>>>()?;
        let presence_accuracy = match presence {
            Some((p, t)) => {
                let acc = presence_accuracy(p, t)?;
                Some(acc.try_into().map_err(|v: Vec<f64>| {
                    Error::LengthMismatch(format!("{} presence entries, expected {NUM_ROIS}", v.len()))
                })?)
            }
            None => None,
        };
        Ok(Self {
            dice: class_means(&per_sample),
            mean_dice: mean_dice(&per_sample).ok(),
            presence_accuracy,
            samples: preds.len(),
        })
    }

    pub fn presence_mean(&self) -> Option<f64> {
        self.presence_accuracy.map(|a| a.iter().sum::<f64>() / a.len() as f64)
    }
}

pub fn csv_header() -> String {
    let mut s = String::from("config,fold,seed,split");
    for roi in LabelId::ROIS {
        write!(s, ",dice_{}", roi.name()).unwrap();
    }
    s.push_str(",dice_mean,acc_presence_mean");
    s
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Identifies one report row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowKey {
    pub config: String,
    pub fold: String,
    pub seed: u64,
    pub split: String,
}

pub fn csv_row(key: &RowKey, report: &EvalReport) -> String {
    let mut s = format!("{},{},{},{}", key.config, key.fold, key.seed, key.split);
    // `dice` is in label-id order; columns follow the ROI order.
    for roi in LabelId::ROIS {
        write!(s, ",{}", cell(report.dice[roi as usize - 1])).unwrap();
    }
    write!(s, ",{},{}", cell(report.mean_dice), cell(report.presence_mean())).unwrap();
    s
}

/// Parse a numeric CSV cell; `NA` is `None`.
pub fn parse_cell(s: &str) -> Result<Option<f64>> {
    match s.trim() {
        "NA" => Ok(None),
        v => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Malformed(format!("bad metric cell {v:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: &[&[u8]]) -> LabelMap {
        LabelMap::new(rows.len(), rows[0].len(), rows.concat())
    }

    #[test]
    fn dice_anchors() {
        let a = map(&[&[1, 1], &[0, 0]]);
        assert_eq!(dice_per_class(&a, &a, 2).unwrap(), vec![Some(1.0)]);
        let b = map(&[&[0, 0], &[1, 1]]);
        assert_eq!(dice_per_class(&a, &b, 2).unwrap(), vec![Some(0.0)]);
        let p = map(&[&[1, 1, 1, 1], &[0, 0, 0, 0]]);
        let t = map(&[&[1, 1, 0, 0], &[0, 0, 0, 0]]);
        let d = dice_per_class(&p, &t, 2).unwrap()[0].unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice_per_class(&a, &a, 3).unwrap()[1], None);
        assert!(dice_per_class(&a, &map(&[&[0, 0, 0]]), 2).is_err());
    }

    #[test]
    fn mean_rules() {
        assert_eq!(mean_dice(&[vec![Some(1.0), Some(0.5), None]]).unwrap(), 0.75);
        let m = mean_dice(&[vec![Some(0.8)], vec![Some(0.6)]]).unwrap();
        assert!((m - 0.7).abs() < 1e-12);
        assert!(matches!(mean_dice(&[vec![None, None]]), Err(Error::AllUndefined)));
    }

    #[test]
    fn presence_accuracy_anchors() {
        let t = vec![vec![true, false], vec![false, false], vec![true, true]];
        assert_eq!(presence_accuracy(&t, &t).unwrap(), vec![1.0, 1.0]);
        let c: Vec<Vec<bool>> = t.iter().map(|v| v.iter().map(|b| !b).collect()).collect();
        assert_eq!(presence_accuracy(&c, &t).unwrap(), vec![0.0, 0.0]);
        let mut two = t.clone();
        two[0][1] = true;
        let acc = presence_accuracy(&two, &t).unwrap();
        assert!((acc[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(presence_accuracy(&t[..2], &t).is_err());
    }

    #[test]
    fn csv_shape() {
        let truth = LabelMap::new(1, 3, vec![1, 3, 0]);
        let r = EvalReport::from_predictions(&[truth.clone()], &[truth], None).unwrap();
        let key = RowKey {
            config: "Base".into(),
            fold: "0".into(),
            seed: 7,
            split: "val".into(),
        };
        let row = csv_row(&key, &r);
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), csv_header().split(',').count());
        assert_eq!(&cells[..5], &["Base", "0", "7", "val", "1.000000"]);
        assert_eq!(cells[5], "NA"); // B
        assert_eq!(cells[13], "NA"); // no presence head
        assert_eq!(parse_cell(cells[12]).unwrap(), Some(1.0));
    }
}
