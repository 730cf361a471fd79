//! Softmax, sparsemax and straight-through Gumbel selection.
//!
//! Every vector operation has a column-wise matrix wrapper and a
//! vector-Jacobian product used by the hand-written backward pass.

use std::ops::Deref;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};

/// A point of the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        ProbVector(v)
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(z: &[f64], temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let mut out = vec![0.0; z.len()];
    softmax_into(z, temperature, &mut out);
    Ok(ProbVector(out))
}

pub(crate) fn softmax_into(z: &[f64], temperature: f64, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Vector-Jacobian product of softmax at temperature 1, given its output.
pub fn softmax_vjp(p: &[f64], grad: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(grad).map(|(a, b)| a * b).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(grad) {
        *o = pi * (gi - dot);
    }
}

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn sparsemax(z: &[f64]) -> ProbVector {
    let mut out = vec![0.0; z.len()];
    sparsemax_into(z, &mut out);
    ProbVector(out)
}

pub(crate) fn sparsemax_into(z: &[f64], out: &mut [f64]) {
    let mut sorted = z.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support_sum = sorted[0];
    let mut support = 1;
    for (k, &v) in sorted.iter().enumerate() {
        cumsum += v;
        if 1.0 + (k + 1) as f64 * v > cumsum {
            support = k + 1;
            support_sum = cumsum;
        }
    }
    let threshold = (support_sum - 1.0) / support as f64;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - threshold).max(0.0);
    }
}

/// Vector-Jacobian product of sparsemax given its output `p`. Entries with
/// `p == 0` are off the support, including boundary entries.
pub fn sparsemax_vjp(p: &[f64], grad: &[f64], out: &mut [f64]) {
    let mut count = 0usize;
    let mut sum = 0.0;
    for (&pi, &gi) in p.iter().zip(grad) {
        if pi > 0.0 {
            count += 1;
            sum += gi;
        }
    }
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(grad) {
        *o = if pi > 0.0 { gi - mean } else { 0.0 };
    }
}

/// Column-wise softmax of a matrix.
pub fn softmax_columns(z: &DMatrix<f64>, temperature: f64) -> Result<DMatrix<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let mut out = DMatrix::zeros(z.nrows(), z.ncols());
    for (src, mut dst) in z.column_iter().zip(out.column_iter_mut()) {
        softmax_into(src.as_slice(), temperature, dst.as_mut_slice());
    }
    Ok(out)
}

/// Column-wise sparsemax of a matrix.
pub fn sparsemax_columns(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(z.nrows(), z.ncols());
    for (src, mut dst) in z.column_iter().zip(out.column_iter_mut()) {
        sparsemax_into(src.as_slice(), dst.as_mut_slice());
    }
    out
}

/// Outcome of a straight-through Gumbel-Softmax draw.
#[derive(Clone, Debug)]
pub struct StraightThrough {
    /// Forward value: one-hot at `index`.
    pub hard: ProbVector,
    /// Relaxed distribution that carries the gradient.
    pub soft: ProbVector,
    pub index: usize,
}

/// Standard Gumbel noise `-ln(-ln u)` for `len` categories.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            // open interval (0, 1)
            let u: f64 = rng.random::<f64>().clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Gumbel-Softmax with explicit noise, so the draw can be replayed.
pub fn gumbel_from_noise(logits: &[f64], noise: &[f64], temperature: f64) -> Result<StraightThrough> {
    if logits.len() != noise.len() {
        return Err(Error::SizeMismatch {
            left: logits.len(),
            right: noise.len(),
        });
    }
    let perturbed: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| l + g).collect();
    let soft = softmax(&perturbed, temperature)?;
    let index = soft.argmax();
    Ok(StraightThrough {
        hard: ProbVector::one_hot(logits.len(), index),
        soft,
        index,
    })
}

pub fn gumbel_onehot<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    rng: &mut R,
) -> Result<StraightThrough> {
    let noise = gumbel_noise(rng, logits.len());
    gumbel_from_noise(logits, &noise, temperature)
}
