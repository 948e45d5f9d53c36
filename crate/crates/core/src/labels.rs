//! Per-pixel class maps and the full label taxonomy.

use std::fmt;

use crate::error::{Error, Result};

/// The nine full-taxonomy labels: background and the eight brain structures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum LabelId {
    Bg = 0,
    /// Gray matter.
    Gm = 1,
    /// Basal ganglia.
    B = 2,
    /// White matter.
    Wm = 3,
    /// White matter lesions.
    L = 4,
    /// Cerebrospinal fluid.
    Csf = 5,
    /// Ventricles.
    V = 6,
    /// Cerebellum.
    C = 7,
    /// Brain stem.
    Bs = 8,
}

pub const NUM_LABELS: usize = 9;
pub const NUM_ROIS: usize = 8;

impl LabelId {
    pub const ALL: [LabelId; NUM_LABELS] = [
        LabelId::Bg,
        LabelId::Gm,
        LabelId::B,
        LabelId::Wm,
        LabelId::L,
        LabelId::Csf,
        LabelId::V,
        LabelId::C,
        LabelId::Bs,
    ];

    /// The eight regions of interest, in column order of the reports.
    pub const ROIS: [LabelId; NUM_ROIS] = [
        LabelId::Gm,
        LabelId::B,
        LabelId::Wm,
        LabelId::L,
        LabelId::Csf,
        LabelId::V,
        LabelId::C,
        LabelId::Bs,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelId::Bg => "BG",
            LabelId::Gm => "GM",
            LabelId::B => "B",
            LabelId::Wm => "WM",
            LabelId::L => "L",
            LabelId::Csf => "CSF",
            LabelId::V => "V",
            LabelId::C => "C",
            LabelId::Bs => "BS",
        }
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Class identifiers over an `H×W` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(height * width, data.len(), "label map {height}x{width} with {} entries", data.len());
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.data[y * self.width + x] = label;
    }

    /// Error on the first pixel whose label is `>= classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&l| l as usize >= classes) {
            None => Ok(()),
            Some(i) => Err(Error::InvalidLabel {
                label: self.data[i],
                y: i / self.width,
                x: i % self.width,
                classes,
            }),
        }
    }

    /// Pixel count per class for classes `0..classes`; larger labels are ignored.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.data {
            if let Some(c) = h.get_mut(l as usize) {
                *c += 1;
            }
        }
        h
    }

    /// Presence of each foreground class `1..classes` (at least one pixel).
    pub fn presence(&self, classes: usize) -> Vec<bool> {
        let mut seen = vec![false; classes];
        for &l in &self.data {
            if let Some(s) = seen.get_mut(l as usize) {
                *s = true;
            }
        }
        seen.into_iter().skip(1).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_is_nine_dense_ids() {
        for (i, l) in LabelId::ALL.iter().enumerate() {
            assert_eq!(*l as usize, i);
            assert_eq!(LabelId::from_u8(i as u8), Some(*l));
        }
        assert_eq!(LabelId::from_u8(9), None);
        assert_eq!(LabelId::ROIS.len(), NUM_ROIS);
    }

    #[test]
    fn validate_reports_coordinates() {
        let mut m = LabelMap::filled(3, 4, 0);
        m.set(2, 1, 9);
        match m.validate(NUM_LABELS) {
            Err(Error::InvalidLabel { label: 9, y: 2, x: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn presence_skips_background() {
        let mut m = LabelMap::filled(2, 2, 0);
        m.set(0, 1, 6);
        let p = m.presence(NUM_LABELS);
        assert_eq!(p.len(), 8);
        assert_eq!(p.iter().filter(|&&b| b).count(), 1);
        assert!(p[5]);
    }
}
