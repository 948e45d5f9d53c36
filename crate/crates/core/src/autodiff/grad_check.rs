//! Central finite-difference gradient checking.
//!
//! The finite differences are always taken in `f64`; the analytic gradient
//! can come from either precision.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Builds a scalar loss from leaf variables, in any precision.
pub trait LossBuilder {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, leaves: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub leaf: usize,
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub leaves: Vec<LeafReport>,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> impl Iterator<Item = &LeafReport> {
        self.leaves.iter().filter(|l| !l.passed)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_loss<B: LossBuilder>(builder: &B, leaves: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = builder.build(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

fn analytic<T: Scalar, B: LossBuilder>(builder: &B, leaves: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.cast())).collect();
    let loss = builder.build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    vars.iter()
        .map(|&v| Ok(grads.get(v)?.data().iter().map(|g| g.as_f64()).collect()))
        .collect()
}

/// Per-coordinate central differences `(f(θ+h) − f(θ−h)) / 2h` for every leaf.
pub fn numeric_gradient<B: LossBuilder>(builder: &B, leaves: &[Tensor<f64>], h: f64) -> Result<Vec<Vec<f64>>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work = leaves.to_vec();
    let mut out = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut g = Vec::with_capacity(leaves[li].numel());
        for ci in 0..leaves[li].numel() {
            let orig = leaves[li].data()[ci];
            work[li].data_mut()[ci] = orig + h;
            let up = eval_loss(builder, &work)?;
            work[li].data_mut()[ci] = orig - h;
            let down = eval_loss(builder, &work)?;
            work[li].data_mut()[ci] = orig;
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    Ok(out)
}

/// Compare backward-pass gradients against central differences.
pub fn grad_check<B: LossBuilder>(
    builder: &B,
    leaves: &[Tensor<f64>],
    h: f64,
    tol: f64,
    precision: Precision,
) -> Result<CheckReport> {
    let numeric = numeric_gradient(builder, leaves, h)?;
    let analytic = match precision {
        Precision::F32 => analytic::<f32, _>(builder, leaves)?,
        Precision::F64 => analytic::<f64, _>(builder, leaves)?,
    };
    let leaves = analytic
        .iter()
        .zip(&numeric)
        .enumerate()
        .map(|(leaf, (a, n))| {
            let (worst_index, max_rel_error) = a
                .iter()
                .zip(n)
                .map(|(&a, &n)| relative_error(a, n))
                .enumerate()
                .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
            LeafReport {
                leaf,
                max_rel_error,
                worst_index,
                analytic: a.get(worst_index).copied().unwrap_or(0.0),
                numeric: n.get(worst_index).copied().unwrap_or(0.0),
                passed: max_rel_error <= tol,
            }
        })
        .collect();
    Ok(CheckReport { leaves, tol })
}
