//! Synthetic 2D brain phantoms.
//!
//! Each slice is built as nested geometry inside an elliptical cerebrum:
//! a CSF rim, a gray-matter ribbon, white matter filling the interior, and
//! ventricles, basal ganglia and lesions placed strictly inside the white
//! matter. Cerebellum and brain stem are separate shapes below the cerebrum
//! that appear only in some slices. Each of the three channels maps the nine
//! labels to a different permutation of the levels 0.1, 0.2, …, 0.9, then
//! adds Gaussian noise and clamps to `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::sample::Sample;
use crate::error::{Error, Result};
use crate::labels::{LabelId, LabelMap, NUM_LABELS};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Mean intensity of each label (indexed by label id) per channel.
pub const CLASS_MEANS: [[f32; NUM_LABELS]; CHANNELS] = [
    //BG   GM   B    WM   L    CSF  V    C    BS
    [0.1, 0.5, 0.6, 0.8, 0.4, 0.2, 0.3, 0.7, 0.9],
    [0.1, 0.6, 0.4, 0.3, 0.9, 0.8, 0.7, 0.5, 0.2],
    [0.2, 0.4, 0.7, 0.6, 0.3, 0.9, 0.8, 0.1, 0.5],
];

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub seed: u64,
    /// Height and width.
    pub size: usize,
    pub n_samples: usize,
    pub noise_sigma: f32,
    pub lesion_probability: f64,
    pub cerebellum_probability: f64,
    pub brainstem_probability: f64,
    /// Semi-axis range of a ventricle, as a fraction of the image size.
    pub ventricle_radius: (f64, f64),
    /// Radius range of a basal-ganglia blob, as a fraction of the image size.
    pub basal_radius: (f64, f64),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            size: 64,
            n_samples: 200,
            noise_sigma: 0.05,
            lesion_probability: 0.5,
            cerebellum_probability: 0.6,
            brainstem_probability: 0.6,
            ventricle_radius: (0.03, 0.08),
            basal_radius: (0.03, 0.05),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!("phantom size must be at least 16, got {}", self.size)));
        }
        if self.size > u16::MAX as usize {
            return Err(Error::Config(format!("phantom size {} does not fit the file format", self.size)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        for (name, p) in [
            ("lesion_probability", self.lesion_probability),
            ("cerebellum_probability", self.cerebellum_probability),
            ("brainstem_probability", self.brainstem_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, (lo, hi)) in [("ventricle_radius", self.ventricle_radius), ("basal_radius", self.basal_radius)] {
            if !(lo > 0.0 && lo <= hi && hi < 0.2) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        Ok(())
    }
}

/// Ellipse in normalized image coordinates, optionally rotated.
#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalized radius: `<= 1` inside.
    fn radius(&self, v: f64, u: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (v - self.cy, u - self.cx);
        let a = (c * dx + s * dy) / self.rx;
        let b = (-s * dx + c * dy) / self.ry;
        (a * a + b * b).sqrt()
    }

    fn contains(&self, v: f64, u: f64) -> bool {
        self.radius(v, u) <= 1.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn coords(size: usize, y: usize, x: usize) -> (f64, f64) {
    ((y as f64 + 0.5) / size as f64, (x as f64 + 0.5) / size as f64)
}

/// White-matter pixels whose four neighbours are all white matter.
fn deep_wm(labels: &LabelMap) -> Vec<bool> {
    let (h, w) = labels.dims();
    let wm = LabelId::Wm as u8;
    let mut deep = vec![false; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            deep[y * w + x] = labels.get(y, x) == wm
                && labels.get(y - 1, x) == wm
                && labels.get(y + 1, x) == wm
                && labels.get(y, x - 1) == wm
                && labels.get(y, x + 1) == wm;
        }
    }
    deep
}

fn paint(labels: &mut LabelMap, shape: &Ellipse, label: LabelId, allowed: impl Fn(usize, usize) -> bool) {
    let (h, w) = labels.dims();
    for y in 0..h {
        for x in 0..w {
            let (v, u) = coords(h, y, x);
            if shape.contains(v, u) && allowed(y, x) {
                labels.set(y, x, label as u8);
            }
        }
    }
}

fn draw_labels(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> LabelMap {
    let n = cfg.size;
    let mut labels = LabelMap::filled(n, n, LabelId::Bg as u8);

    let brain = Ellipse {
        cy: rng.random_range(0.38..0.44),
        cx: rng.random_range(0.47..0.53),
        ry: rng.random_range(0.28..0.33),
        rx: rng.random_range(0.33..0.40),
        angle: rng.random_range(-0.2..0.2),
    };
    let csf_edge = 1.0 - rng.random_range(0.08..0.12);
    let gm_edge = csf_edge - rng.random_range(0.12..0.17);
    let wobble_amp = rng.random_range(0.0..0.05);
    let wobble_freq = rng.random_range(3..7) as f64;
    let wobble_phase = rng.random_range(0.0..std::f64::consts::TAU);

    for y in 0..n {
        for x in 0..n {
            let (v, u) = coords(n, y, x);
            let r = brain.radius(v, u);
            if r > 1.0 {
                continue;
            }
            let phi = (v - brain.cy).atan2(u - brain.cx);
            let r_inner = r * (1.0 + wobble_amp * (wobble_freq * phi + wobble_phase).sin());
            let label = if r > csf_edge {
                LabelId::Csf
            } else if r_inner > gm_edge {
                LabelId::Gm
            } else {
                LabelId::Wm
            };
            labels.set(y, x, label as u8);
        }
    }

    // Inner structures may only replace white matter that is itself
    // surrounded by white matter, so they never touch the ribbon.
    let deep = deep_wm(&labels);
    let inside = |y: usize, x: usize| deep[y * n + x];

    let two = rng.random_bool(0.5);
    let vr = cfg.ventricle_radius;
    let (ventricles, lateral) = if two {
        let dx = rng.random_range(0.04..0.07);
        let dy = rng.random_range(-0.02..0.02);
        let ry = uniform(rng, vr);
        let rx = uniform(rng, (vr.0 * 0.6, vr.0 * 0.6 + (vr.1 - vr.0) * 0.4)).max(0.02);
        let tilt = rng.random_range(0.0..0.3);
        (
            vec![
                Ellipse { cy: brain.cy + dy, cx: brain.cx - dx, ry, rx, angle: tilt },
                Ellipse { cy: brain.cy + dy, cx: brain.cx + dx, ry, rx, angle: -tilt },
            ],
            dx + rx,
        )
    } else {
        let ry = uniform(rng, vr);
        let rx = uniform(rng, vr);
        (
            vec![Ellipse {
                cy: brain.cy + rng.random_range(-0.03..0.03),
                cx: brain.cx + rng.random_range(-0.02..0.02),
                ry,
                rx,
                angle: rng.random_range(-0.3..0.3),
            }],
            rx,
        )
    };
    for e in &ventricles {
        paint(&mut labels, e, LabelId::V, inside);
    }

    let n_basal = rng.random_range(0..=2);
    let sides: &[f64] = match n_basal {
        0 => &[],
        1 => {
            if rng.random_bool(0.5) {
                &[-1.0]
            } else {
                &[1.0]
            }
        }
        _ => &[-1.0, 1.0],
    };
    for &side in sides {
        let r = uniform(rng, cfg.basal_radius);
        let gap = rng.random_range(0.02..0.04);
        let blob = Ellipse {
            cy: brain.cy + rng.random_range(0.0..0.05),
            cx: brain.cx + side * (lateral + gap + r),
            ry: r * rng.random_range(0.8..1.2),
            rx: r,
            angle: 0.0,
        };
        paint(&mut labels, &blob, LabelId::B, inside);
    }

    if rng.random_bool(cfg.lesion_probability) {
        let count = rng.random_range(1..=3);
        for _ in 0..count {
            let r = rng.random_range(0.015..0.03);
            // rejection-sample a centre on deep white matter
            for _ in 0..50 {
                let (y, x) = (rng.random_range(0..n), rng.random_range(0..n));
                if inside(y, x) && labels.get(y, x) == LabelId::Wm as u8 {
                    let (v, u) = coords(n, y, x);
                    let blob = Ellipse { cy: v, cx: u, ry: r, rx: r * rng.random_range(0.7..1.3), angle: 0.0 };
                    let snapshot = labels.clone();
                    let (wm, l) = (LabelId::Wm as u8, LabelId::L as u8);
                    paint(&mut labels, &blob, LabelId::L, |yy, xx| {
                        let cur = snapshot.get(yy, xx);
                        inside(yy, xx) && (cur == wm || cur == l)
                    });
                    break;
                }
            }
        }
    }

    let bg = LabelId::Bg as u8;
    if rng.random_bool(cfg.cerebellum_probability) {
        let c = Ellipse {
            cy: rng.random_range(0.80..0.85),
            cx: 0.5 + rng.random_range(-0.02..0.02),
            ry: rng.random_range(0.08..0.11),
            rx: rng.random_range(0.22..0.28),
            angle: rng.random_range(-0.1..0.1),
        };
        let snapshot = labels.clone();
        paint(&mut labels, &c, LabelId::C, |y, x| snapshot.get(y, x) == bg);
    }
    if rng.random_bool(cfg.brainstem_probability) {
        let s = Ellipse {
            cy: rng.random_range(0.76..0.80),
            cx: 0.5 + rng.random_range(-0.02..0.02),
            ry: rng.random_range(0.10..0.13),
            rx: rng.random_range(0.05..0.07),
            angle: 0.0,
        };
        let snapshot = labels.clone();
        let c = LabelId::C as u8;
        paint(&mut labels, &s, LabelId::Bs, |y, x| {
            let l = snapshot.get(y, x);
            l == bg || l == c
        });
    }
    labels
}

fn render(cfg: &PhantomConfig, labels: &LabelMap, rng: &mut ChaCha8Rng) -> Tensor {
    let hw = labels.len();
    let noise = Normal::new(0.0f32, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = Vec::with_capacity(CHANNELS * hw);
    for means in &CLASS_MEANS {
        for &l in labels.data() {
            let v = means[l as usize] + if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::new([CHANNELS, labels.height(), labels.width()], data)
}

/// Generate `cfg.n_samples` phantoms; identical configs give identical output.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_samples)
        .map(|_| {
            let labels = draw_labels(cfg, &mut rng);
            let image = render(cfg, &labels, &mut rng);
            Sample::new(image, labels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig {
            n_samples: 40,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_phantom(&small()).unwrap();
        let b = generate_phantom(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&PhantomConfig { seed: 43, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tissue_classes_always_present_others_vary() {
        let samples = generate_phantom(&small()).unwrap();
        let mut counts = [0usize; 8];
        for s in &samples {
            for (c, &p) in counts.iter_mut().zip(s.presence()) {
                *c += p as usize;
            }
        }
        let n = samples.len();
        for roi in [LabelId::Gm, LabelId::Wm, LabelId::Csf, LabelId::V] {
            assert_eq!(counts[roi as usize - 1], n, "{roi}");
        }
        for roi in [LabelId::B, LabelId::L, LabelId::C, LabelId::Bs] {
            let c = counts[roi as usize - 1];
            assert!(c > 0 && c < n, "{roi}: {c}/{n}");
        }
    }

    #[test]
    fn channel_levels_are_separated() {
        for means in &CLASS_MEANS {
            for i in 0..NUM_LABELS {
                for j in 0..i {
                    assert!((means[i] - means[j]).abs() >= 0.08 - 1e-6);
                }
            }
        }
        // empirical class means over the generated set
        let samples = generate_phantom(&small()).unwrap();
        let mut sum = [[0.0f64; NUM_LABELS]; CHANNELS];
        let mut cnt = [0usize; NUM_LABELS];
        for s in &samples {
            let hw = s.labels().len();
            for (p, &l) in s.labels().data().iter().enumerate() {
                cnt[l as usize] += 1;
                for c in 0..CHANNELS {
                    sum[c][l as usize] += s.image().data()[c * hw + p] as f64;
                }
            }
        }
        for c in 0..CHANNELS {
            let m: Vec<f64> = (0..NUM_LABELS).map(|l| sum[c][l] / cnt[l] as f64).collect();
            for i in 0..NUM_LABELS {
                for j in 0..i {
                    assert!((m[i] - m[j]).abs() >= 0.08, "channel {c}: {i} vs {j}: {m:?}");
                }
            }
        }
    }

    #[test]
    fn images_are_unit_range() {
        for s in generate_phantom(&small()).unwrap() {
            assert!(s.image().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn inner_structures_are_enclosed_by_white_matter() {
        let inner = [LabelId::V as u8, LabelId::B as u8, LabelId::L as u8, LabelId::Wm as u8];
        for s in generate_phantom(&small()).unwrap() {
            let m = s.labels();
            let (h, w) = m.dims();
            for y in 0..h {
                for x in 0..w {
                    let l = m.get(y, x);
                    if l == LabelId::V as u8 || l == LabelId::B as u8 || l == LabelId::L as u8 {
                        for (ny, nx) in [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)] {
                            assert!(inner.contains(&m.get(ny, nx)), "({y},{x}) label {l}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn csf_touches_background() {
        for s in generate_phantom(&small()).unwrap() {
            let m = s.labels();
            let (h, w) = m.dims();
            let touches = (1..h - 1).any(|y| {
                (1..w - 1).any(|x| {
                    m.get(y, x) == LabelId::Csf as u8
                        && [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
                            .iter()
                            .any(|&(a, b)| m.get(a, b) == LabelId::Bg as u8)
                })
            });
            assert!(touches);
        }
    }

    #[test]
    fn zero_samples_is_empty() {
        let cfg = PhantomConfig { n_samples: 0, ..PhantomConfig::default() };
        assert!(generate_phantom(&cfg).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_phantom(&PhantomConfig { size: 8, ..small() }).is_err());
        assert!(generate_phantom(&PhantomConfig { lesion_probability: 1.5, ..small() }).is_err());
    }
}
