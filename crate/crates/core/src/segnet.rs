//! The per-stage network: a small U-shaped encoder-decoder with two heads.
//!
//! ```text
//! image ─ enc0 ─┬─ pool ─ enc1 ─┬─ pool ─ bottleneck ─┬─ up ─ dec1 ─ up ─ dec0 ─ 1×1 ─ seg logits [K,H,W]
//!               │               └──────── skip ───────┘ ...
//!               └──────────────────────── skip ──────────────────────┘
//!                                          bottleneck ─ avg pool ─ linear ─ presence logits [K-1]
//! ```
//!
//! Every encoder, bottleneck and decoder block is two 3×3 conv + relu layers.
//! Level `l` has `base_width·2^l` channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::params::{ParamVars, Params};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetSpec {
    pub in_channels: usize,
    /// Number of segmentation classes K, background included.
    pub stage_classes: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_classes: 9,
            base_width: 16,
            depth: 2,
        }
    }
}

impl NetSpec {
    pub fn with_classes(stage_classes: usize) -> Self {
        Self {
            stage_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if self.stage_classes < 2 {
            return Err(Error::Config("a stage needs at least 2 classes".into()));
        }
        if self.depth < 1 || self.base_width < 1 {
            return Err(Error::Config("depth and base_width must be at least 1".into()));
        }
        Ok(())
    }

    /// Foreground classes scored by the presence head.
    pub fn presence_classes(&self) -> usize {
        self.stage_classes - 1
    }

    /// Spatial sizes must be multiples of this.
    pub fn alignment(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Names and shapes of all parameters, in registration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, o: usize, i: usize, k: usize| {
            out.push((format!("{name}.w"), vec![o, i, k, k]));
            out.push((format!("{name}.b"), vec![o]));
        };
        let mut prev = self.in_channels;
        for l in 0..self.depth {
            let w = self.width(l);
            conv(format!("enc{l}.conv1"), w, prev, 3);
            conv(format!("enc{l}.conv2"), w, w, 3);
            prev = w;
        }
        let wb = self.width(self.depth);
        conv("bottleneck.conv1".into(), wb, prev, 3);
        conv("bottleneck.conv2".into(), wb, wb, 3);
        for l in (0..self.depth).rev() {
            let w = self.width(l);
            conv(format!("dec{l}.conv1"), w, self.width(l + 1) + w, 3);
            conv(format!("dec{l}.conv2"), w, w, 3);
        }
        conv("seg_head".into(), self.stage_classes, self.width(0), 1);
        out.push(("cls_head.w".into(), vec![self.presence_classes(), wb]));
        out.push(("cls_head.b".into(), vec![self.presence_classes()]));
        out
    }

    /// Check that `params` has exactly this spec's names and shapes.
    pub fn check_params<T: Scalar>(&self, params: &Params<T>) -> Result<()> {
        let layout = self.layout();
        if layout.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, pt)) in layout.iter().zip(params.iter()) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(Error::Config(format!(
                    "parameter `{pn}` {:?} does not match `{name}` {shape:?}",
                    pt.shape()
                )));
            }
        }
        Ok(())
    }

    /// He-normal weights (variance 2/fan_in), zero biases; deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for (name, shape) in self.layout() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
            };
            params.push(name, t);
        }
        params
    }
}

/// Output handles of a forward pass recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub seg_logits: Var,
    pub presence_logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs<T: Scalar = f32> {
    /// `[K, H, W]`.
    pub seg_logits: Tensor<T>,
    /// `[K - 1]`.
    pub presence_logits: Tensor<T>,
}

struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

fn conv_relu<T: Scalar>(tape: &mut Tape<T>, x: Var, cur: &mut Cursor, name: &str) -> Result<Var> {
    let (w, b) = (cur.take(), cur.take());
    let y = tape.conv2d(x, w, b).map_err(|e| e.in_layer(name))?;
    tape.relu(y).map_err(|e| e.in_layer(name))
}

fn block<T: Scalar>(tape: &mut Tape<T>, x: Var, cur: &mut Cursor, name: &str) -> Result<Var> {
    let y = conv_relu(tape, x, cur, &format!("{name}.conv1"))?;
    conv_relu(tape, y, cur, &format!("{name}.conv2"))
}

impl NetSpec {
    /// Record the network on `tape`. `image` is `[C, H, W]` with `H` and `W`
    /// multiples of [`NetSpec::alignment`].
    pub fn forward_tape<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamVars, image: Var) -> Result<OutputVars> {
        let shape = tape.value(image).shape().to_vec();
        let align = self.alignment();
        match shape[..] {
            [c, h, w] if c == self.in_channels && h % align == 0 && w % align == 0 => {}
            _ => {
                return Err(Error::Config(format!(
                    "input {shape:?} needs {} channels and spatial dims divisible by {align}",
                    self.in_channels
                ))
                .in_layer("input"))
            }
        }
        if params.0.len() != self.layout().len() {
            return Err(Error::Config("parameter count does not match the spec".into()));
        }
        let mut cur = Cursor {
            vars: &params.0,
            next: 0,
        };
        let mut skips = Vec::with_capacity(self.depth);
        let mut x = image;
        for l in 0..self.depth {
            let name = format!("enc{l}");
            let y = block(tape, x, &mut cur, &name)?;
            skips.push(y);
            x = tape.maxpool2(y).map_err(|e| e.in_layer(&format!("{name}.pool")))?;
        }
        let bottleneck = block(tape, x, &mut cur, "bottleneck")?;
        x = bottleneck;
        for l in (0..self.depth).rev() {
            let name = format!("dec{l}");
            let up = tape.upsample2(x).map_err(|e| e.in_layer(&format!("{name}.up")))?;
            let cat = tape
                .concat(&[up, skips[l]])
                .map_err(|e| e.in_layer(&format!("{name}.concat")))?;
            x = block(tape, cat, &mut cur, &name)?;
        }
        let (w, b) = (cur.take(), cur.take());
        let seg_logits = tape.conv2d(x, w, b).map_err(|e| e.in_layer("seg_head"))?;

        let (w, b) = (cur.take(), cur.take());
        let cls = |tape: &mut Tape<T>| -> Result<Var> {
            let pooled = tape.global_avg_pool(bottleneck)?;
            let col = tape.reshape(pooled, &[self.width(self.depth), 1])?;
            let z = tape.matmul(w, col)?;
            let z = tape.reshape(z, &[self.presence_classes()])?;
            tape.add(z, b)
        };
        let presence_logits = cls(tape).map_err(|e| e.in_layer("cls_head"))?;
        Ok(OutputVars {
            seg_logits,
            presence_logits,
        })
    }

    /// Inference without gradient tracking.
    pub fn forward<T: Scalar>(&self, params: &Params<T>, image: &Tensor<T>) -> Result<StageOutputs<T>> {
        let mut tape = Tape::<T>::new();
        let vars = params.register(&mut tape, false);
        let x = tape.constant(image.clone());
        let out = self.forward_tape(&mut tape, &vars, x)?;
        Ok(StageOutputs {
            seg_logits: tape.value(out.seg_logits).clone(),
            presence_logits: tape.value(out.presence_logits).clone(),
        })
    }
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn predict_labelmap<T: Scalar>(seg_logits: &Tensor<T>) -> LabelMap {
    let [k, h, w] = *seg_logits.shape() else {
        panic!("seg logits must be [K,H,W], got {:?}", seg_logits.shape());
    };
    let hw = h * w;
    let d = seg_logits.data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}

/// `sigmoid(logit) >= threshold` per class.
pub fn predict_presence<T: Scalar>(presence_logits: &Tensor<T>, threshold: f64) -> Vec<bool> {
    presence_logits
        .data()
        .iter()
        .map(|z| 1.0 / (1.0 + (-z.as_f64()).exp()) >= threshold)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new([c, h, w], (0..c * h * w).map(|i| ((i * 7919) % 101) as f32 / 100.0).collect())
    }

    #[test]
    fn shape_contract() {
        let spec = NetSpec::with_classes(5);
        let p = spec.init_params(1);
        let out = spec.forward(&p, &image(3, 64, 64)).unwrap();
        assert_eq!(out.seg_logits.shape(), &[5, 64, 64]);
        assert_eq!(out.presence_logits.shape(), &[4]);
    }

    #[test]
    fn default_size_is_about_100k() {
        let n = NetSpec::default().init_params(0).num_scalars();
        assert!((80_000..150_000).contains(&n), "{n}");
    }

    #[test]
    fn rejects_indivisible_input() {
        let spec = NetSpec::with_classes(3);
        let p = spec.init_params(1);
        let err = spec.forward(&p, &image(3, 10, 12)).unwrap_err();
        assert!(err.to_string().contains("input"), "{err}");
        assert!(spec.forward(&p, &image(2, 8, 8)).is_err());
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let spec = NetSpec::default();
        assert_eq!(spec.init_params(7), spec.init_params(7));
        assert_ne!(spec.init_params(7), spec.init_params(8));
        for (name, t) in spec.init_params(7).iter() {
            if name.ends_with(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn kernel_variance_follows_he_scheme() {
        let p = NetSpec::default().init_params(3);
        let mut checked = 0;
        for (name, t) in p.iter() {
            if name.ends_with(".w") && t.numel() >= 1024 {
                let fan_in: usize = t.shape()[1..].iter().product();
                let n = t.numel() as f64;
                let mean = t.sum_f64() / n;
                let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                let want = 2.0 / fan_in as f64;
                assert!((var / want - 1.0).abs() < 0.2, "{name}: {var} vs {want}");
                checked += 1;
            }
        }
        assert!(checked >= 8);
    }

    #[test]
    fn zero_image_with_zero_heads() {
        let spec = NetSpec::with_classes(5);
        let mut p = spec.init_params(2);
        for name in ["seg_head.w", "cls_head.w"] {
            p.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let out = spec.forward(&p, &Tensor::zeros([3, 16, 16])).unwrap();
        assert!(out.seg_logits.data().iter().all(|&v| v == 0.0));
        assert!(out.presence_logits.data().iter().all(|&v| v == 0.0));
        let map = predict_labelmap(&out.seg_logits);
        assert!(map.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn pixel_perturbation_reaches_logits() {
        let spec = NetSpec::with_classes(3);
        let p = spec.init_params(5);
        let x = image(3, 16, 16);
        let base = spec.forward(&p, &x).unwrap().seg_logits;
        let mut x2 = x.clone();
        x2.data_mut()[8 * 16 + 8] += 0.5;
        let moved = spec.forward(&p, &x2).unwrap().seg_logits;
        assert!(base.max_abs_diff(&moved) > 0.0);
        let idx = 8 * 16 + 8;
        let changed = (0..3).any(|k| base.data()[k * 256 + idx] != moved.data()[k * 256 + idx]);
        assert!(changed);
    }

    #[test]
    fn argmax_rules() {
        let mut logits = Tensor::<f32>::zeros([3, 2, 2]);
        assert!(predict_labelmap(&logits).data().iter().all(|&l| l == 0));
        for v in &mut logits.data_mut()[8..12] {
            *v = 10.0;
        }
        assert!(predict_labelmap(&logits).data().iter().all(|&l| l == 2));
    }

    #[test]
    fn argmax_matches_brute_force() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let data: Vec<f32> = (0..48).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = Tensor::new([3, 4, 4], data.clone());
            let map = predict_labelmap(&t);
            for p in 0..16 {
                let vals = [data[p], data[16 + p], data[32 + p]];
                let max = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let want = vals.iter().position(|&v| v == max).unwrap();
                assert_eq!(map.data()[p] as usize, want);
            }
        }
    }

    #[test]
    fn presence_threshold() {
        let t = Tensor::<f32>::new([3], vec![2.0, -2.0, 0.1]);
        assert_eq!(predict_presence(&t, 0.5), vec![true, false, true]);
        assert_eq!(predict_presence(&Tensor::<f32>::scalar(0.0), 0.5), vec![true]);
        assert_eq!(predict_presence(&Tensor::<f32>::scalar(-10.0), 0.5), vec![false]);
    }
}
