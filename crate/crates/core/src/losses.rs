//! Loss terms and their weighted total.
//!
//! The free functions at the top are direct transcriptions of each term and
//! serve as references. [`evaluate_fused`] computes all terms at once from a
//! [`Selection`] of nearest neighbours, gates and Hausdorff witnesses, and
//! returns gradients with respect to the primitive samples and the
//! assignment matrices. With the selection held fixed the loss is smooth in
//! the sample positions, which is what the optimizer and the gradient check
//! rely on.

use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoders::{unfreeze_schedule, UnfreezeStage};
use crate::error::{Error, Result};
use crate::geometry::SampledPrimitive;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Hausdorff weight.
    pub lambda1: f64,
    /// Anti-collapse weight.
    pub lambda2: f64,
    /// Compactness weight.
    pub lambda3: f64,
    /// Alignment weight.
    pub lambda4: f64,
    /// Distances at or below this margin do not count in the anti-collapse term.
    pub delta_wd: f64,
    /// Regularizer inside the compactness square root.
    pub delta_c: f64,
    /// Multiplier on `lambda2` during the cuboid-like stage.
    pub cuboid_wd_multiplier: f64,
    /// Multiplier on `lambda3` during the cuboid-like stage.
    pub cuboid_compact_multiplier: f64,
    /// Fraction of the steps after which the Hausdorff term is switched off.
    pub hd_cutoff_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.3,
            lambda3: 0.1,
            lambda4: 0.01,
            delta_wd: 0.05,
            delta_c: 0.01,
            cuboid_wd_multiplier: 2.0,
            cuboid_compact_multiplier: 3.0,
            hd_cutoff_fraction: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("delta_wd", self.delta_wd),
            ("delta_c", self.delta_c),
            ("cuboid_wd_multiplier", self.cuboid_wd_multiplier),
            ("cuboid_compact_multiplier", self.cuboid_compact_multiplier),
            ("hd_cutoff_fraction", self.hd_cutoff_fraction),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Weights without any schedule applied.
    pub fn base_weights(&self) -> LossWeights {
        LossWeights {
            hd: self.lambda1,
            wd: self.lambda2,
            compact: self.lambda3,
            align: self.lambda4,
        }
    }

    /// Step index from which the Hausdorff weight is zero.
    pub fn hd_cutoff_step(&self, total: usize) -> usize {
        (self.hd_cutoff_fraction * total as f64).round() as usize
    }

    /// Scheduled weights at `step` of `total`.
    pub fn weights(&self, step: usize, total: usize) -> LossWeights {
        let mut w = self.base_weights();
        if unfreeze_schedule(step, total) == UnfreezeStage::CuboidLike {
            w.wd *= self.cuboid_wd_multiplier;
            w.compact *= self.cuboid_compact_multiplier;
        }
        if step >= self.hd_cutoff_step(total) {
            w.hd = 0.0;
        }
        w
    }
}

/// Effective weights of one evaluation. Reconstruction always has weight 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub hd: f64,
    pub wd: f64,
    pub compact: f64,
    pub align: f64,
}

/// Unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub recon: f64,
    pub hd: f64,
    pub wd: f64,
    pub compact: f64,
    pub align: f64,
}

impl LossTerms {
    pub fn combine(&self, w: &LossWeights) -> LossBreakdown {
        LossBreakdown {
            recon: self.recon,
            hd: self.hd,
            wd: self.wd,
            compact: self.compact,
            align: self.align,
            total: self.recon + w.hd * self.hd + w.wd * self.wd + w.compact * self.compact + w.align * self.align,
        }
    }
}

/// Loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub hd: f64,
    pub wd: f64,
    pub compact: f64,
    pub align: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.recon, self.hd, self.wd, self.compact, self.align, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weighted total with the schedule at `step` of `total`.
pub fn total_loss(terms: &LossTerms, cfg: &LossConfig, step: usize, total: usize) -> LossBreakdown {
    terms.combine(&cfg.weights(step, total))
}

/// Distance from `x` to the nearest sample.
pub fn point_to_primitive(x: &Vector3<f64>, samples: &SampledPrimitive) -> f64 {
    samples
        .points
        .iter()
        .map(|y| (x - y).norm())
        .fold(f64::INFINITY, f64::min)
}

/// Mean distance from each sample to its nearest cloud point.
pub fn coverage(samples: &SampledPrimitive, cloud: &[Vector3<f64>]) -> f64 {
    let sum: f64 = samples
        .points
        .iter()
        .map(|y| cloud.iter().map(|x| (x - y).norm()).fold(f64::INFINITY, f64::min))
        .sum();
    sum / samples.points.len() as f64
}

fn distance_table(prims: &[SampledPrimitive], cloud: &[Vector3<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(prims.len(), cloud.len(), |m, n| point_to_primitive(&cloud[n], &prims[m]))
}

/// Bidirectional Hausdorff distance between one abstraction and the cloud.
pub fn hausdorff(prims: &[SampledPrimitive], cloud: &[Vector3<f64>]) -> f64 {
    let d = distance_table(prims, cloud);
    let to_abstraction = d.column_iter().map(|c| c.min()).fold(0.0, f64::max);
    let to_cloud = d.row_iter().map(|r| r.min()).fold(0.0, f64::max);
    to_abstraction.max(to_cloud)
}

pub fn hausdorff_loss(ins: &[SampledPrimitive], sem: &[SampledPrimitive], cloud: &[Vector3<f64>]) -> f64 {
    0.5 * hausdorff(ins, cloud) + 0.5 * hausdorff(sem, cloud)
}

/// Reconstruction of one abstraction: half the mean point-to-abstraction
/// distance plus half the mean coverage.
pub fn reconstruction(prims: &[SampledPrimitive], cloud: &[Vector3<f64>]) -> f64 {
    let d = distance_table(prims, cloud);
    let n = cloud.len() as f64;
    let m = prims.len() as f64;
    let points: f64 = d.column_iter().map(|c| c.min()).sum();
    let cov: f64 = prims.iter().map(|p| coverage(p, cloud)).sum();
    points / (2.0 * n) + cov / (2.0 * m)
}

pub fn recon_loss(ins: &[SampledPrimitive], sem: &[SampledPrimitive], cloud: &[Vector3<f64>]) -> f64 {
    0.5 * reconstruction(ins, cloud) + 0.5 * reconstruction(sem, cloud)
}

/// Assignment-weighted gated distances, averaged over points.
pub fn anti_collapse_loss(
    p_ins: &DMatrix<f64>,
    ins: &[SampledPrimitive],
    sem: &[SampledPrimitive],
    cloud: &[Vector3<f64>],
    delta_wd: f64,
) -> Result<f64> {
    if p_ins.nrows() != ins.len() || ins.len() != sem.len() {
        return Err(Error::SizeMismatch {
            left: p_ins.nrows(),
            right: ins.len().min(sem.len()),
        });
    }
    if p_ins.ncols() != cloud.len() {
        return Err(Error::SizeMismatch {
            left: p_ins.ncols(),
            right: cloud.len(),
        });
    }
    let gate = |d: f64| if d > delta_wd { d } else { 0.0 };
    let di = distance_table(ins, cloud);
    let ds = distance_table(sem, cloud);
    let mut sum = 0.0;
    for n in 0..cloud.len() {
        for m in 0..ins.len() {
            sum += p_ins[(m, n)] * 0.5 * (gate(di[(m, n)]) + gate(ds[(m, n)]));
        }
    }
    Ok(sum / cloud.len() as f64)
}

/// Square of the mean square-root part mass; smallest when mass
/// concentrates on few parts.
pub fn compactness_loss(p_ins: &DMatrix<f64>, delta_c: f64) -> f64 {
    let n = p_ins.ncols() as f64;
    let m = p_ins.nrows() as f64;
    let s: f64 = p_ins.row_iter().map(|r| (r.sum() / n + delta_c).sqrt()).sum::<f64>() / m;
    s * s
}

/// Mean squared difference to the pseudo-label target.
pub fn alignment_loss(p_sem: &DMatrix<f64>, pseudo: &DMatrix<f64>) -> Result<f64> {
    if p_sem.shape() != pseudo.shape() {
        return Err(Error::SizeMismatch {
            left: p_sem.len(),
            right: pseudo.len(),
        });
    }
    Ok((p_sem - pseudo).norm_squared() / p_sem.len() as f64)
}

/// Discrete choices of one abstraction: nearest samples, nearest points,
/// the nearest primitive of each point, the anti-collapse gates and the
/// Hausdorff witness pair `(point, primitive)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    points: usize,
    samples: usize,
    /// Indexed `m * points + n`.
    nearest_sample: Vec<u32>,
    /// Indexed `m * samples + i`.
    nearest_point: Vec<u32>,
    nearest_primitive: Vec<u32>,
    /// Indexed `m * points + n`.
    gate: Vec<bool>,
    witness: (usize, usize),
}

/// Computes the selection from the current sample positions. Ties go to the
/// lowest index.
pub fn select(samples: &[Vec<Vector3<f64>>], cloud: &[Vector3<f64>], delta_wd: f64) -> Selection {
    let n_pts = cloud.len();
    let n_samples = samples.first().map_or(0, Vec::len);
    let per_prim: Vec<(Vec<u32>, Vec<f64>, Vec<u32>)> = samples
        .par_iter()
        .map(|ys| {
            let mut best_i = vec![0u32; n_pts];
            let mut best_d = vec![f64::INFINITY; n_pts];
            let mut best_n = vec![0u32; ys.len()];
            let mut best_nd = vec![f64::INFINITY; ys.len()];
            for (n, x) in cloud.iter().enumerate() {
                let (mut bd, mut bi) = (f64::INFINITY, 0u32);
                for (i, y) in ys.iter().enumerate() {
                    let d2 = (x - y).norm_squared();
                    if d2 < bd {
                        bd = d2;
                        bi = i as u32;
                    }
                    if d2 < best_nd[i] {
                        best_nd[i] = d2;
                        best_n[i] = n as u32;
                    }
                }
                best_i[n] = bi;
                best_d[n] = bd.sqrt();
            }
            (best_i, best_d, best_n)
        })
        .collect();

    let m_count = samples.len();
    let mut nearest_sample = Vec::with_capacity(m_count * n_pts);
    let mut nearest_point = Vec::with_capacity(m_count * n_samples);
    let mut gate = Vec::with_capacity(m_count * n_pts);
    for (bi, bd, bn) in &per_prim {
        nearest_sample.extend_from_slice(bi);
        nearest_point.extend_from_slice(bn);
        gate.extend(bd.iter().map(|&d| d > delta_wd));
    }
    let dist = |m: usize, n: usize| per_prim[m].1[n];

    let mut nearest_primitive = vec![0u32; n_pts];
    let mut point_max = (f64::NEG_INFINITY, 0usize);
    for n in 0..n_pts {
        let mut best = (f64::INFINITY, 0usize);
        for m in 0..m_count {
            if dist(m, n) < best.0 {
                best = (dist(m, n), m);
            }
        }
        nearest_primitive[n] = best.1 as u32;
        if best.0 > point_max.0 {
            point_max = (best.0, n);
        }
    }
    let mut prim_max = (f64::NEG_INFINITY, 0usize, 0usize);
    for m in 0..m_count {
        let mut best = (f64::INFINITY, 0usize);
        for n in 0..n_pts {
            if dist(m, n) < best.0 {
                best = (dist(m, n), n);
            }
        }
        if best.0 > prim_max.0 {
            prim_max = (best.0, m, best.1);
        }
    }
    let witness = if point_max.0 >= prim_max.0 {
        (point_max.1, nearest_primitive[point_max.1] as usize)
    } else {
        (prim_max.2, prim_max.1)
    };
    Selection {
        points: n_pts,
        samples: n_samples,
        nearest_sample,
        nearest_point,
        nearest_primitive,
        gate,
        witness,
    }
}

/// Inputs of the fused loss evaluation.
pub struct FusedInputs<'a> {
    pub cloud: &'a [Vector3<f64>],
    /// Samples of the instance abstraction, one vector per primitive.
    pub ins: &'a [Vec<Vector3<f64>>],
    /// Samples of the semantic abstraction.
    pub sem: &'a [Vec<Vector3<f64>>],
    pub p_ins: &'a DMatrix<f64>,
    pub p_sem: &'a DMatrix<f64>,
    /// Detached pseudo-label target.
    pub pseudo: &'a DMatrix<f64>,
}

/// Gradients of the weighted total.
pub struct FusedGrad {
    pub ins: Vec<Vec<Vector3<f64>>>,
    pub sem: Vec<Vec<Vector3<f64>>>,
    pub p_ins: DMatrix<f64>,
    pub p_sem: DMatrix<f64>,
}

struct AbstractionEval {
    /// Point-to-primitive distances through the selection, `m x n`.
    dist: DMatrix<f64>,
    recon: f64,
    hd: f64,
}

fn unit(v: Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Vector3::zeros()
    }
}

fn eval_abstraction(samples: &[Vec<Vector3<f64>>], cloud: &[Vector3<f64>], sel: &Selection) -> AbstractionEval {
    let (m_count, n_pts, i_count) = (samples.len(), cloud.len(), sel.samples);
    let dist = DMatrix::from_fn(m_count, n_pts, |m, n| {
        (cloud[n] - samples[m][sel.nearest_sample[m * n_pts + n] as usize]).norm()
    });
    let points: f64 = (0..n_pts).map(|n| dist[(sel.nearest_primitive[n] as usize, n)]).sum();
    let cov: f64 = (0..m_count)
        .map(|m| {
            (0..i_count)
                .map(|i| (samples[m][i] - cloud[sel.nearest_point[m * i_count + i] as usize]).norm())
                .sum::<f64>()
                / i_count as f64
        })
        .sum();
    let (wn, wm) = sel.witness;
    AbstractionEval {
        recon: points / (2.0 * n_pts as f64) + cov / (2.0 * m_count as f64),
        hd: dist[(wm, wn)],
        dist,
    }
}

/// Gradient with respect to samples given `g_dist` (`m x n`) and a scale on
/// the coverage term.
fn scatter(
    samples: &[Vec<Vector3<f64>>],
    cloud: &[Vector3<f64>],
    sel: &Selection,
    g_dist: &DMatrix<f64>,
    coverage_scale: f64,
) -> Vec<Vec<Vector3<f64>>> {
    let (n_pts, i_count) = (cloud.len(), sel.samples);
    samples
        .par_iter()
        .enumerate()
        .map(|(m, ys)| {
            let mut g = vec![Vector3::zeros(); ys.len()];
            for n in 0..n_pts {
                let gd = g_dist[(m, n)];
                if gd != 0.0 {
                    let i = sel.nearest_sample[m * n_pts + n] as usize;
                    g[i] += unit(ys[i] - cloud[n]) * gd;
                }
            }
            if coverage_scale != 0.0 {
                for (i, y) in ys.iter().enumerate() {
                    let n = sel.nearest_point[m * i_count + i] as usize;
                    g[i] += unit(y - cloud[n]) * coverage_scale;
                }
            }
            g
        })
        .collect()
}

/// All loss terms with their gradients, evaluated through fixed selections
/// for the instance and semantic abstractions.
pub fn evaluate_fused(
    inp: &FusedInputs<'_>,
    sel_ins: &Selection,
    sel_sem: &Selection,
    weights: &LossWeights,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, FusedGrad)> {
    let n_pts = inp.cloud.len();
    let m_count = inp.ins.len();
    if inp.sem.len() != m_count || inp.p_ins.nrows() != m_count {
        return Err(Error::SizeMismatch {
            left: m_count,
            right: inp.sem.len(),
        });
    }
    if inp.p_ins.ncols() != n_pts || sel_ins.points != n_pts || sel_sem.points != n_pts {
        return Err(Error::SizeMismatch {
            left: inp.p_ins.ncols(),
            right: n_pts,
        });
    }
    let ei = eval_abstraction(inp.ins, inp.cloud, sel_ins);
    let es = eval_abstraction(inp.sem, inp.cloud, sel_sem);
    let nf = n_pts as f64;
    let mf = m_count as f64;

    let mut wd = 0.0;
    for n in 0..n_pts {
        for m in 0..m_count {
            let k = m * n_pts + n;
            let gi = if sel_ins.gate[k] { ei.dist[(m, n)] } else { 0.0 };
            let gs = if sel_sem.gate[k] { es.dist[(m, n)] } else { 0.0 };
            wd += inp.p_ins[(m, n)] * 0.5 * (gi + gs);
        }
    }
    wd /= nf;
    let compact = compactness_loss(inp.p_ins, cfg.delta_c);
    let align = alignment_loss(inp.p_sem, inp.pseudo)?;
    let terms = LossTerms {
        recon: 0.5 * ei.recon + 0.5 * es.recon,
        hd: 0.5 * ei.hd + 0.5 * es.hd,
        wd,
        compact,
        align,
    };
    let breakdown = terms.combine(weights);

    // gradients
    let mut g_p_ins = DMatrix::zeros(m_count, n_pts);
    let mut g_dists = Vec::with_capacity(2);
    for (e, sel) in [(&ei, sel_ins), (&es, sel_sem)] {
        let mut g = DMatrix::zeros(m_count, n_pts);
        for n in 0..n_pts {
            g[(sel.nearest_primitive[n] as usize, n)] += 0.5 / (2.0 * nf);
        }
        let (wn, wm) = sel.witness;
        g[(wm, wn)] += 0.5 * weights.hd;
        for n in 0..n_pts {
            for m in 0..m_count {
                if sel.gate[m * n_pts + n] {
                    g[(m, n)] += weights.wd * inp.p_ins[(m, n)] * 0.5 / nf;
                    g_p_ins[(m, n)] += weights.wd * 0.5 * e.dist[(m, n)] / nf;
                }
            }
        }
        g_dists.push(g);
    }
    let cov_scale = 0.5 / (2.0 * mf * sel_ins.samples as f64);
    let g_ins = scatter(inp.ins, inp.cloud, sel_ins, &g_dists[0], cov_scale);
    let cov_scale = 0.5 / (2.0 * mf * sel_sem.samples as f64);
    let g_sem = scatter(inp.sem, inp.cloud, sel_sem, &g_dists[1], cov_scale);

    if weights.compact != 0.0 {
        let roots: Vec<f64> = inp
            .p_ins
            .row_iter()
            .map(|r| (r.sum() / nf + cfg.delta_c).sqrt())
            .collect();
        let s = roots.iter().sum::<f64>() / mf;
        for m in 0..m_count {
            let g = weights.compact * 2.0 * s / mf * 0.5 / roots[m] / nf;
            g_p_ins.row_mut(m).add_scalar_mut(g);
        }
    }
    let g_p_sem = (inp.p_sem - inp.pseudo) * (weights.align * 2.0 / inp.p_sem.len() as f64);
    Ok((
        breakdown,
        FusedGrad {
            ins: g_ins,
            sem: g_sem,
            p_ins: g_p_ins,
            p_sem: g_p_sem,
        },
    ))
}
