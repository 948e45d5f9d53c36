//! Label maps as binary PPM images.

use brainseg::labels::{LabelMap, NUM_LABELS};

/// One colour per label id: BG black, GM grey, B orange, WM white, L red,
/// CSF blue, V cyan, C green, BS magenta.
pub const PALETTE: [[u8; 3]; NUM_LABELS] = [
    [0, 0, 0],
    [160, 160, 160],
    [255, 165, 0],
    [255, 255, 255],
    [255, 0, 0],
    [0, 0, 255],
    [0, 255, 255],
    [0, 200, 0],
    [255, 0, 255],
];

/// `P6` image of `labels`. Out-of-range ids are drawn black.
pub fn render_ppm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    for &l in labels.data() {
        out.extend_from_slice(PALETTE.get(l as usize).unwrap_or(&PALETTE[0]));
    }
    out
}
