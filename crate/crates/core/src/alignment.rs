//! Instance-semantic feature alignment.
//!
//! Semantic geometric features attend over instance geometric features with
//! a temperature derived from how far the semantic features are from being
//! mutually orthogonal. The hard argmax of the attention assigns each
//! instance slot a semantic, which drives pseudo-labels and primitive
//! repetition.

use nalgebra::DMatrix;

use crate::activations::{argmax, softmax_columns, softmax_vjp};
use crate::error::{Error, Result};

/// Lower bound on the attention temperature.
pub const TAU_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentSet {
    pub tau: f64,
    /// `s x m` attention, full-support columns.
    pub w_a: DMatrix<f64>,
    /// Semantic-aligned instance features, `d x m`.
    pub f_geo_is: DMatrix<f64>,
    /// One-hot columns at the argmax of `w_a`.
    pub w_a_hard: DMatrix<f64>,
    /// `s x n` pseudo semantic assignment.
    pub p_sem_pseudo: DMatrix<f64>,
}

/// Intermediate values of [`adaptive_tau`] kept for the backward pass.
#[derive(Clone, Debug)]
pub struct TauForward {
    pub tau: f64,
    /// Unfloored mean squared deviation of the Gram matrix from identity.
    pub mse: f64,
    input: DMatrix<f64>,
    normalized: DMatrix<f64>,
    gram: DMatrix<f64>,
}

fn perturb_zero_columns(f: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = f.clone();
    for mut col in out.column_iter_mut() {
        if col.iter().all(|&v| v == 0.0) {
            col.add_scalar_mut(1e-12);
        }
    }
    out
}

pub fn adaptive_tau_forward(f_geo_s: &DMatrix<f64>) -> TauForward {
    let input = perturb_zero_columns(f_geo_s);
    let mut normalized = input.clone();
    for mut col in normalized.column_iter_mut() {
        let n = col.norm();
        col /= n;
    }
    let gram = normalized.transpose() * &normalized;
    let s = gram.nrows();
    let mut sq = 0.0;
    for i in 0..s {
        for j in 0..s {
            let target = if i == j { 1.0 } else { 0.0 };
            sq += (gram[(i, j)] - target).powi(2);
        }
    }
    let mse = sq / (s * s) as f64;
    TauForward {
        tau: mse.max(TAU_FLOOR),
        mse,
        input,
        normalized,
        gram,
    }
}

/// Mean squared error between the Gram matrix of the column-normalized
/// features and the identity, floored at [`TAU_FLOOR`].
pub fn adaptive_tau(f_geo_s: &DMatrix<f64>) -> f64 {
    adaptive_tau_forward(f_geo_s).tau
}

/// Gradient of `tau` with respect to the semantic features, scaled by
/// `g_tau`. Zero while the floor is active.
pub fn adaptive_tau_vjp(fwd: &TauForward, g_tau: f64) -> DMatrix<f64> {
    let (d, s) = fwd.input.shape();
    if fwd.mse < TAU_FLOOR || g_tau == 0.0 {
        return DMatrix::zeros(d, s);
    }
    let mut g_gram = fwd.gram.clone();
    for i in 0..s {
        g_gram[(i, i)] -= 1.0;
    }
    g_gram *= 2.0 * g_tau / (s * s) as f64;
    // gram = N^T N with a symmetric upstream gradient
    let g_norm = &fwd.normalized * (&g_gram + g_gram.transpose());
    let mut out = DMatrix::zeros(d, s);
    for j in 0..s {
        let x = fwd.input.column(j);
        let r = x.norm();
        let u = fwd.normalized.column(j);
        let gu = g_norm.column(j);
        let proj = u.dot(&gu);
        out.set_column(j, &((gu - u * proj) / r));
    }
    out
}

/// Intermediate values of [`align`] kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AlignForward {
    pub f_geo_is: DMatrix<f64>,
    pub w_a: DMatrix<f64>,
    /// Pre-softmax logits.
    pub logits: DMatrix<f64>,
    pub tau: f64,
}

pub fn align_forward(f_geo_s: &DMatrix<f64>, f_geo_i: &DMatrix<f64>, tau: f64) -> Result<AlignForward> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("alignment temperature must be positive, got {tau}")));
    }
    let d = f_geo_s.nrows() as f64;
    let logits = (f_geo_s.transpose() * f_geo_i) / (tau * d.sqrt());
    let w_a = softmax_columns(&logits, 1.0)?;
    let f_geo_is = f_geo_s * &w_a;
    Ok(AlignForward {
        f_geo_is,
        w_a,
        logits,
        tau,
    })
}

/// Temperature-scaled attention of semantic features over instance features.
/// Returns `(f_geo_is, w_a)`.
pub fn align(f_geo_s: &DMatrix<f64>, f_geo_i: &DMatrix<f64>, tau: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let fwd = align_forward(f_geo_s, f_geo_i, tau)?;
    Ok((fwd.f_geo_is, fwd.w_a))
}

/// Backward of [`align_forward`]: returns gradients for `(f_geo_s, f_geo_i,
/// tau)` given the gradient of the aligned features.
pub fn align_vjp(
    f_geo_s: &DMatrix<f64>,
    f_geo_i: &DMatrix<f64>,
    fwd: &AlignForward,
    g_f_geo_is: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, f64) {
    let mut g_s = g_f_geo_is * fwd.w_a.transpose();
    let g_w_a = f_geo_s.transpose() * g_f_geo_is;
    let (rows, cols) = fwd.w_a.shape();
    let mut g_logits = DMatrix::zeros(rows, cols);
    let mut buf = vec![0.0; rows];
    for m in 0..cols {
        softmax_vjp(fwd.w_a.column(m).as_slice(), g_w_a.column(m).as_slice(), &mut buf);
        g_logits.column_mut(m).copy_from_slice(&buf);
    }
    let d = f_geo_s.nrows() as f64;
    let scale = 1.0 / (fwd.tau * d.sqrt());
    let g_raw = &g_logits * scale;
    g_s += f_geo_i * g_raw.transpose();
    let g_i = f_geo_s * &g_raw;
    let g_tau = -g_logits.dot(&fwd.logits) / fwd.tau;
    (g_s, g_i, g_tau)
}

/// One-hot columns at the argmax of each column of `w_a` (lowest index on
/// ties).
pub fn repeat_assignment(w_a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut hard = DMatrix::zeros(w_a.nrows(), w_a.ncols());
    for (m, s) in repeat_indices(w_a).into_iter().enumerate() {
        hard[(s, m)] = 1.0;
    }
    hard
}

/// Semantic index assigned to each instance slot.
pub fn repeat_indices(w_a: &DMatrix<f64>) -> Vec<usize> {
    w_a.column_iter().map(|c| argmax(c.as_slice())).collect()
}

/// Hard attention and the pseudo semantic assignment it induces.
pub fn pseudo_semantic(p_ins: &DMatrix<f64>, w_a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let hard = repeat_assignment(w_a);
    let pseudo = &hard * p_ins;
    (hard, pseudo)
}
