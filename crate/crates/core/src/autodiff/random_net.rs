//! Small randomly shaped conv networks for exercising the gradient checker.
//!
//! A net is `conv → act → [pool → conv → act → up → concat skip] → … → head`,
//! at most five conv layers, ending in either the combined segmentation +
//! presence loss or a random linear read-out. Leaf 0 is the input image; the
//! rest are the parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::grad_check::LossBuilder;
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::labels::LabelMap;
use crate::losses::combined_loss;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
    Identity,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv { act: Activation },
    /// Pool, one conv, upsample, concat with the pre-pool features.
    Down { act: Activation },
}

#[derive(Clone, Debug)]
pub enum Head {
    /// Segmentation + presence loss with these labels.
    Loss {
        labels: LabelMap,
        presence: Vec<bool>,
        lambda: f64,
    },
    /// `Σ r ⊙ y` over the final features.
    Readout(Tensor<f64>),
}

#[derive(Clone, Debug)]
pub struct RandomNet {
    layers: Vec<Layer>,
    head: Head,
    leaves: Vec<Tensor<f64>>,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect())
}

impl RandomNet {
    /// A net drawn from `seed`, with square input of side `size` (≤ 16, even).
    pub fn generate(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let acts = [Activation::Relu, Activation::Sigmoid, Activation::Softplus, Activation::Identity];
        let in_c = rng.random_range(1..=3);
        let mut leaves = vec![Tensor::new(
            [in_c, size, size],
            (0..in_c * size * size).map(|_| rng.random_range(0.0..1.0)).collect(),
        )];
        let mut c = in_c;
        let conv = |leaves: &mut Vec<Tensor<f64>>, rng: &mut ChaCha8Rng, cin: usize, cout: usize| {
            let k = if rng.random_bool(0.8) { 3 } else { 1 };
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            leaves.push(normal(rng, &[cout, cin, k, k], std));
            leaves.push(normal(rng, &[cout], 0.1));
        };
        let mut layers = Vec::new();
        let mut convs = 0;
        let body = rng.random_range(1..=3);
        for _ in 0..body {
            let act = acts[rng.random_range(0..acts.len())];
            if convs + 2 <= 4 && size % 2 == 0 && rng.random_bool(0.4) {
                let mid = rng.random_range(2..=4);
                conv(&mut leaves, &mut rng, c, mid);
                layers.push(Layer::Down { act });
                c += mid;
                convs += 1;
            } else {
                let out = rng.random_range(2..=4);
                conv(&mut leaves, &mut rng, c, out);
                layers.push(Layer::Conv { act });
                c = out;
                convs += 1;
            }
        }
        let classes = rng.random_range(2..=4);
        let head = if rng.random_bool(0.6) {
            leaves.push(normal(&mut rng, &[classes, c, 1, 1], 0.5));
            leaves.push(normal(&mut rng, &[classes], 0.1));
            leaves.push(normal(&mut rng, &[classes - 1, c], 0.5));
            leaves.push(normal(&mut rng, &[classes - 1], 0.1));
            let labels = LabelMap::new(
                size,
                size,
                (0..size * size).map(|_| rng.random_range(0..classes as u8)).collect(),
            );
            let presence = (0..classes - 1).map(|_| rng.random_bool(0.5)).collect();
            Head::Loss {
                labels,
                presence,
                lambda: rng.random_range(0.0..2.0),
            }
        } else {
            Head::Readout(normal(&mut rng, &[c, size, size], 1.0))
        };
        Self { layers, head, leaves }
    }

    pub fn leaves(&self) -> &[Tensor<f64>] {
        &self.leaves
    }

    pub fn conv_layers(&self) -> usize {
        self.layers.len() + matches!(self.head, Head::Loss { .. }) as usize
    }
}

fn activate<T: Scalar>(tape: &mut Tape<T>, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Softplus => tape.softplus(x),
        Activation::Identity => Ok(x),
    }
}

impl LossBuilder for RandomNet {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, leaves: &[Var]) -> Result<Var> {
        let mut next = leaves[1..].iter().copied();
        let mut take = || next.next().expect("leaf count");
        let mut x = leaves[0];
        for layer in &self.layers {
            match *layer {
                Layer::Conv { act } => {
                    let (w, b) = (take(), take());
                    let y = tape.conv2d(x, w, b)?;
                    x = activate(tape, y, act)?;
                }
                Layer::Down { act } => {
                    let (w, b) = (take(), take());
                    let p = tape.maxpool2(x)?;
                    let y = tape.conv2d(p, w, b)?;
                    let y = activate(tape, y, act)?;
                    let u = tape.upsample2(y)?;
                    x = tape.concat(&[u, x])?;
                }
            }
        }
        match &self.head {
            Head::Readout(r) => {
                let r = tape.constant(r.cast());
                let y = tape.mul(x, r)?;
                tape.sum(y)
            }
            Head::Loss {
                labels,
                presence,
                lambda,
            } => {
                let (w, b, cw, cb) = (take(), take(), take(), take());
                let seg = tape.conv2d(x, w, b)?;
                let c = tape.value(x).shape()[0];
                let pooled = tape.global_avg_pool(x)?;
                let col = tape.reshape(pooled, &[c, 1])?;
                let z = tape.matmul(cw, col)?;
                let z = tape.reshape(z, &[presence.len()])?;
                let z = tape.add(z, cb)?;
                Ok(combined_loss(tape, seg, labels, z, presence, *lambda)?.combined)
            }
        }
    }
}
