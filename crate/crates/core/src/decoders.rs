//! Linear decoders from part features to primitive parameters.
//!
//! Geometry heads (size, shape, taper, bend) are single affine maps shared by
//! every geometric feature source. They are enabled in three stages: first
//! only sizes (cuboid-like primitives with the shape exponent pinned at its
//! lower bound), then shape exponents, then taper and bend.
//!
//! The pose head places each primitive at the weighted mean of its member
//! points plus a learned residual, and picks a rotation and a mirror plane.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activations::{gumbel_from_noise, gumbel_noise, softmax_vjp, ProbVector};
use crate::error::{Error, Result};
use crate::geometry::{
    normalize_vjp, quat_to_matrix, quat_to_matrix_vjp, MirrorPlane, Pose, PrimitiveGrad, ShapeParams,
    BEND_ANGLE_RANGE, BEND_CURVATURE_RANGE, SHAPE_RANGE, SIZE_RANGE, TAPER_RANGE,
};
use crate::membership::ParamGroup;

/// Gumbel-softmax temperature of the mirror selection.
pub const MIRROR_TEMPERATURE: f64 = 1.0;

/// Translations pass through unchanged inside `[-KNEE, KNEE]` and saturate
/// smoothly towards `±1` outside.
pub const TRANSLATION_KNEE: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UnfreezeStage {
    /// Sizes only; shape exponents pinned at 0.2, no taper or bend.
    CuboidLike,
    /// Sizes and shape exponents.
    Superquadric,
    /// Everything.
    Deformable,
}

impl UnfreezeStage {
    pub fn is_frozen(self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::ShapeHead => self < UnfreezeStage::Superquadric,
            ParamGroup::TaperHead | ParamGroup::BendHead => self < UnfreezeStage::Deformable,
            _ => false,
        }
    }
}

/// Stage at `step` of `total`: the first 20% of steps are cuboid-like, the
/// next 20% superquadric, the rest deformable.
pub fn unfreeze_schedule(step: usize, total: usize) -> UnfreezeStage {
    let first = (0.2 * total as f64).round() as usize;
    let second = (0.4 * total as f64).round() as usize;
    if step < first {
        UnfreezeStage::CuboidLike
    } else if step < second {
        UnfreezeStage::Superquadric
    } else {
        UnfreezeStage::Deformable
    }
}

/// Affine map `W f + b` applied column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `outputs x inputs`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    fn random<R: Rng + ?Sized>(inputs: usize, bias: &[f64], scale: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, scale / (inputs as f64).sqrt()).unwrap();
        Self {
            weight: DMatrix::from_fn(bias.len(), inputs, |_, _| normal.sample(rng)),
            bias: DVector::from_column_slice(bias),
        }
    }

    pub fn forward(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.weight * f;
        for mut col in out.column_iter_mut() {
            col += &self.bias;
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, f: &DMatrix<f64>, g_out: &DMatrix<f64>, grad: &mut Linear) -> DMatrix<f64> {
        grad.weight += g_out * f.transpose();
        for col in g_out.column_iter() {
            grad.bias += col;
        }
        self.weight.transpose() * g_out
    }

    fn visit(&self, group: ParamGroup, f: &mut dyn FnMut(ParamGroup, &[f64])) {
        f(group, self.weight.as_slice());
        f(group, self.bias.as_slice());
    }

    fn visit_mut(&mut self, group: ParamGroup, f: &mut dyn FnMut(ParamGroup, &mut [f64])) {
        f(group, self.weight.as_mut_slice());
        f(group, self.bias.as_mut_slice());
    }
}

/// All decoder weights. Geometry heads are shared by the instance, aligned
/// and semantic feature sources.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    pub size: Linear,
    pub shape: Linear,
    pub taper: Linear,
    /// Rows: curvature, direction angle.
    pub bend: Linear,
    pub translation: Linear,
    /// Unnormalized quaternion `(w, x, y, z)`.
    pub rotation: Linear,
    /// Logits over [`MirrorPlane::ALL`].
    pub mirror: Linear,
}

impl DecoderWeights {
    /// All-zero weights: geometry at the interval midpoints, translations at
    /// the member-point means, identity rotation.
    pub fn zeros(d: usize) -> Self {
        Self {
            size: Linear::zeros(d, 3),
            shape: Linear::zeros(d, 2),
            taper: Linear::zeros(d, 2),
            bend: Linear::zeros(d, 2),
            translation: Linear::zeros(d, 3),
            rotation: Linear::zeros(d, 4),
            mirror: Linear::zeros(d, 4),
        }
    }

    /// Random weights with biases at small primitives, near-cuboid shape,
    /// near-zero bend, identity rotation and a preference for no mirror.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let size = SIZE_RANGE.unsquash(0.12);
        let shape = SHAPE_RANGE.unsquash(0.25);
        let curvature = BEND_CURVATURE_RANGE.unsquash(0.02);
        Self {
            size: Linear::random(d, &[size; 3], 1.0, rng),
            shape: Linear::random(d, &[shape; 2], 1.0, rng),
            taper: Linear::random(d, &[0.0; 2], 1.0, rng),
            bend: Linear::random(d, &[curvature, 0.0], 1.0, rng),
            translation: Linear::random(d, &[0.0; 3], 0.1, rng),
            rotation: Linear::random(d, &[1.0, 0.0, 0.0, 0.0], 0.01, rng),
            mirror: Linear::random(d, &[3.0, 0.0, 0.0, 0.0], 0.1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.size.weight.ncols())
    }

    pub fn feature_dim(&self) -> usize {
        self.size.weight.ncols()
    }

    pub fn visit(&self, f: &mut dyn FnMut(ParamGroup, &[f64])) {
        self.size.visit(ParamGroup::SizeHead, f);
        self.shape.visit(ParamGroup::ShapeHead, f);
        self.taper.visit(ParamGroup::TaperHead, f);
        self.bend.visit(ParamGroup::BendHead, f);
        self.translation.visit(ParamGroup::PoseHead, f);
        self.rotation.visit(ParamGroup::PoseHead, f);
        self.mirror.visit(ParamGroup::PoseHead, f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut [f64])) {
        self.size.visit_mut(ParamGroup::SizeHead, f);
        self.shape.visit_mut(ParamGroup::ShapeHead, f);
        self.taper.visit_mut(ParamGroup::TaperHead, f);
        self.bend.visit_mut(ParamGroup::BendHead, f);
        self.translation.visit_mut(ParamGroup::PoseHead, f);
        self.rotation.visit_mut(ParamGroup::PoseHead, f);
        self.mirror.visit_mut(ParamGroup::PoseHead, f);
    }
}

/// Geometric parameters for every column of `features` (`d x k`).
pub fn decode_geometry(features: &DMatrix<f64>, w: &DecoderWeights, stage: UnfreezeStage) -> Vec<ShapeParams> {
    let size = w.size.forward(features);
    let shape = (stage >= UnfreezeStage::Superquadric).then(|| w.shape.forward(features));
    let deform = (stage >= UnfreezeStage::Deformable).then(|| (w.taper.forward(features), w.bend.forward(features)));
    (0..features.ncols())
        .map(|k| {
            let mut g = ShapeParams::plain([0, 1, 2].map(|i| SIZE_RANGE.squash(size[(i, k)])), [SHAPE_RANGE.lo; 2]);
            if let Some(s) = &shape {
                g.shape = [0, 1].map(|i| SHAPE_RANGE.squash(s[(i, k)]));
            }
            if let Some((t, b)) = &deform {
                g.taper = [0, 1].map(|i| TAPER_RANGE.squash(t[(i, k)]));
                g.bend = BEND_CURVATURE_RANGE.squash(b[(0, k)]);
                g.bend_angle = BEND_ANGLE_RANGE.squash(b[(1, k)]);
            }
            g
        })
        .collect()
}

/// Backward of [`decode_geometry`]. Accumulates head gradients into `acc`
/// and returns the feature gradient. Pinned heads receive nothing.
pub fn decode_geometry_vjp(
    features: &DMatrix<f64>,
    w: &DecoderWeights,
    stage: UnfreezeStage,
    grads: &[PrimitiveGrad],
    acc: &mut DecoderWeights,
) -> DMatrix<f64> {
    let k = features.ncols();
    let size = w.size.forward(features);
    let g_size = DMatrix::from_fn(3, k, |i, c| grads[c].size[i] * SIZE_RANGE.squash_grad(size[(i, c)]));
    let mut g_f = w.size.backward(features, &g_size, &mut acc.size);
    if stage >= UnfreezeStage::Superquadric {
        let raw = w.shape.forward(features);
        let g = DMatrix::from_fn(2, k, |i, c| grads[c].shape[i] * SHAPE_RANGE.squash_grad(raw[(i, c)]));
        g_f += w.shape.backward(features, &g, &mut acc.shape);
    }
    if stage >= UnfreezeStage::Deformable {
        let raw = w.taper.forward(features);
        let g = DMatrix::from_fn(2, k, |i, c| grads[c].taper[i] * TAPER_RANGE.squash_grad(raw[(i, c)]));
        g_f += w.taper.backward(features, &g, &mut acc.taper);
        let raw = w.bend.forward(features);
        let g = DMatrix::from_fn(2, k, |i, c| {
            if i == 0 {
                grads[c].bend * BEND_CURVATURE_RANGE.squash_grad(raw[(0, c)])
            } else {
                grads[c].bend_angle * BEND_ANGLE_RANGE.squash_grad(raw[(1, c)])
            }
        });
        g_f += w.bend.backward(features, &g, &mut acc.bend);
    }
    g_f
}

/// Identity on `[-KNEE, KNEE]`, then a tanh shoulder that approaches `±1`.
pub fn soft_clamp(x: f64) -> f64 {
    let over = x.abs() - TRANSLATION_KNEE;
    if over <= 0.0 {
        x
    } else {
        let room = 1.0 - TRANSLATION_KNEE;
        x.signum() * (TRANSLATION_KNEE + room * (over / room).tanh())
    }
}

pub fn soft_clamp_grad(x: f64) -> f64 {
    let over = x.abs() - TRANSLATION_KNEE;
    if over <= 0.0 {
        1.0
    } else {
        let t = (over / (1.0 - TRANSLATION_KNEE)).tanh();
        1.0 - t * t
    }
}

/// How the mirror plane enters the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MirrorMode {
    /// Hard Gumbel sample forward, soft Gumbel-softmax gradient.
    #[default]
    StraightThrough,
    /// Soft Gumbel-softmax mixture forward and backward.
    Relaxed,
    /// Deterministic argmax of the logits, no gradient to the mirror head.
    Argmax,
}

impl std::str::FromStr for MirrorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "straight-through" => Ok(MirrorMode::StraightThrough),
            "relaxed" => Ok(MirrorMode::Relaxed),
            "argmax" => Ok(MirrorMode::Argmax),
            other => Err(format!("unknown mirror mode `{other}` (expected straight-through, relaxed or argmax)")),
        }
    }
}

/// Forward values of the pose head for one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTrace {
    pub pre_clamp: Vector3<f64>,
    pub translation: Vector3<f64>,
    /// Raw rotation head output.
    pub raw_rotation: [f64; 4],
    /// Unmirrored unit quaternion.
    pub base_rotation: [f64; 4],
    /// Mixture weights used in the forward pass.
    pub mix: [f64; 4],
    /// Soft Gumbel-softmax distribution.
    pub soft: [f64; 4],
    pub mixed: [f64; 4],
    pub rotation: [f64; 4],
    pub matrix: Matrix3<f64>,
    pub plane: MirrorPlane,
}

impl PoseTrace {
    pub fn pose(&self) -> Pose {
        Pose {
            translation: self.translation.into(),
            rotation: self.rotation,
        }
    }
}

/// Per-primitive Gumbel noise for the mirror selection.
pub fn mirror_noise<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<[f64; 4]> {
    (0..m)
        .map(|_| {
            let g = gumbel_noise(rng, 4);
            [g[0], g[1], g[2], g[3]]
        })
        .collect()
}

fn mixture_signs(mix: &[f64; 4]) -> [f64; 4] {
    let mut c = [0.0; 4];
    for (p, plane) in MirrorPlane::ALL.iter().enumerate() {
        let s = plane.signs();
        for k in 0..4 {
            c[k] += mix[p] * s[k];
        }
    }
    c
}

/// Pose of every part, with the given Gumbel noise (ignored in
/// [`MirrorMode::Argmax`]).
pub fn decode_pose_traced(
    f_pos: &DMatrix<f64>,
    points: &[Vector3<f64>],
    w_ins: &DMatrix<f64>,
    w: &DecoderWeights,
    mode: MirrorMode,
    noise: &[[f64; 4]],
) -> Result<Vec<PoseTrace>> {
    let m = f_pos.ncols();
    if mode != MirrorMode::Argmax && noise.len() != m {
        return Err(Error::SizeMismatch {
            left: noise.len(),
            right: m,
        });
    }
    let residual = w.translation.forward(f_pos);
    let raw_rot = w.rotation.forward(f_pos);
    let logits = w.mirror.forward(f_pos);
    (0..m)
        .map(|k| {
            let mut bias = Vector3::zeros();
            for (n, p) in points.iter().enumerate() {
                let wt = w_ins[(n, k)];
                if wt != 0.0 {
                    bias += p * wt;
                }
            }
            let pre_clamp = bias + residual.column(k);
            let translation = pre_clamp.map(soft_clamp);

            let raw_rotation = [0, 1, 2, 3].map(|i| raw_rot[(i, k)]);
            let base_rotation = crate::geometry::normalize_quat(raw_rotation);
            let lg: Vec<f64> = logits.column(k).iter().copied().collect();
            let (mix, soft, plane) = match mode {
                MirrorMode::Argmax => {
                    let idx = crate::activations::argmax(&lg);
                    let hot = ProbVector::one_hot(4, idx);
                    let arr = [hot[0], hot[1], hot[2], hot[3]];
                    (arr, arr, idx)
                }
                MirrorMode::StraightThrough | MirrorMode::Relaxed => {
                    let st = gumbel_from_noise(&lg, &noise[k], MIRROR_TEMPERATURE)?;
                    let soft = [st.soft[0], st.soft[1], st.soft[2], st.soft[3]];
                    let hard = [st.hard[0], st.hard[1], st.hard[2], st.hard[3]];
                    if mode == MirrorMode::Relaxed {
                        (soft, soft, st.index)
                    } else {
                        (hard, soft, st.index)
                    }
                }
            };
            let c = mixture_signs(&mix);
            let mixed = [0, 1, 2, 3].map(|i| c[i] * base_rotation[i]);
            let rotation = crate::geometry::normalize_quat(mixed);
            Ok(PoseTrace {
                pre_clamp,
                translation,
                raw_rotation,
                base_rotation,
                mix,
                soft,
                mixed,
                rotation,
                matrix: quat_to_matrix(rotation),
                plane: MirrorPlane::from_index(plane),
            })
        })
        .collect()
}

/// Pose of every part, drawing Gumbel noise from `rng`.
pub fn decode_pose<R: Rng + ?Sized>(
    f_pos: &DMatrix<f64>,
    points: &[Vector3<f64>],
    w_ins: &DMatrix<f64>,
    w: &DecoderWeights,
    mode: MirrorMode,
    rng: &mut R,
) -> Result<Vec<Pose>> {
    let noise = mirror_noise(f_pos.ncols(), rng);
    Ok(decode_pose_traced(f_pos, points, w_ins, w, mode, &noise)?
        .iter()
        .map(PoseTrace::pose)
        .collect())
}

/// Backward of [`decode_pose_traced`] given gradients with respect to each
/// rotation matrix and translation. Returns `(g_f_pos, g_w_ins)`.
pub fn decode_pose_vjp(
    f_pos: &DMatrix<f64>,
    points: &[Vector3<f64>],
    w: &DecoderWeights,
    mode: MirrorMode,
    traces: &[PoseTrace],
    g_matrix: &[Matrix3<f64>],
    g_translation: &[Vector3<f64>],
    acc: &mut DecoderWeights,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = traces.len();
    let mut g_res = DMatrix::zeros(3, m);
    let mut g_rot = DMatrix::zeros(4, m);
    let mut g_logit = DMatrix::zeros(4, m);
    let mut g_w_ins = DMatrix::zeros(points.len(), m);
    for (k, tr) in traces.iter().enumerate() {
        let g_pre = g_translation[k].component_mul(&tr.pre_clamp.map(soft_clamp_grad));
        g_res.set_column(k, &g_pre);
        for (n, p) in points.iter().enumerate() {
            g_w_ins[(n, k)] = p.dot(&g_pre);
        }

        let g_r = quat_to_matrix_vjp(tr.rotation, &g_matrix[k]);
        let g_v = normalize_vjp(&tr.mixed, &g_r);
        let c = mixture_signs(&tr.mix);
        let g_q = [0, 1, 2, 3].map(|i| c[i] * g_v[i]);
        let g_u = normalize_vjp(&tr.raw_rotation, &g_q);
        for i in 0..4 {
            g_rot[(i, k)] = g_u[i];
        }

        if mode != MirrorMode::Argmax {
            let g_c = [0, 1, 2, 3].map(|i| g_v[i] * tr.base_rotation[i]);
            let g_y: Vec<f64> = MirrorPlane::ALL
                .iter()
                .map(|pl| pl.signs().iter().zip(&g_c).map(|(s, g)| s * g).sum())
                .collect();
            let mut out = [0.0; 4];
            softmax_vjp(&tr.soft, &g_y, &mut out);
            for i in 0..4 {
                g_logit[(i, k)] = out[i] / MIRROR_TEMPERATURE;
            }
        }
    }
    let mut g_f = w.translation.backward(f_pos, &g_res, &mut acc.translation);
    g_f += w.rotation.backward(f_pos, &g_rot, &mut acc.rotation);
    if mode != MirrorMode::Argmax {
        g_f += w.mirror.backward(f_pos, &g_logit, &mut acc.mirror);
    }
    (g_f, g_w_ins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5)
    }

    fn flat(w: &DecoderWeights) -> Vec<f64> {
        let mut out = Vec::new();
        w.visit(&mut |_, s| out.extend_from_slice(s));
        out
    }

    fn perturbed(w: &DecoderWeights, i: usize, delta: f64) -> DecoderWeights {
        let mut w = w.clone();
        let mut off = 0;
        w.visit_mut(&mut |_, s| {
            if i >= off && i < off + s.len() {
                s[i - off] += delta;
            }
            off += s.len();
        });
        w
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(unfreeze_schedule(50, 500), UnfreezeStage::CuboidLike);
        assert_eq!(unfreeze_schedule(150, 500), UnfreezeStage::Superquadric);
        assert_eq!(unfreeze_schedule(499, 500), UnfreezeStage::Deformable);
        assert_eq!(unfreeze_schedule(99, 500), UnfreezeStage::CuboidLike);
        assert_eq!(unfreeze_schedule(100, 500), UnfreezeStage::Superquadric);
        assert_eq!(unfreeze_schedule(200, 500), UnfreezeStage::Deformable);
        let stages: Vec<_> = (0..600).map(|s| unfreeze_schedule(s, 600)).collect();
        assert!(stages.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn cuboid_stage_pins_deformations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = DecoderWeights::init(6, &mut rng);
        let f = random_matrix(6, 5, 2) * 10.0;
        for g in decode_geometry(&f, &w, UnfreezeStage::CuboidLike) {
            assert_eq!(g.shape, [0.2, 0.2]);
            assert_eq!(g.taper, [0.0, 0.0]);
            assert!(!g.bends());
        }
        for g in decode_geometry(&f, &w, UnfreezeStage::Superquadric) {
            assert_ne!(g.shape, [0.2, 0.2]);
            assert!(!g.bends());
        }
    }

    #[test]
    fn zero_weights_give_midpoints() {
        let w = DecoderWeights::zeros(4);
        let f = DMatrix::zeros(4, 3);
        for g in decode_geometry(&f, &w, UnfreezeStage::Deformable) {
            assert!(g.size.iter().all(|v| (v - SIZE_RANGE.midpoint()).abs() < 1e-15));
            assert!(g.shape.iter().all(|v| (v - SHAPE_RANGE.midpoint()).abs() < 1e-15));
            assert_eq!(g.taper, [0.0; 2]);
            assert!((g.bend - BEND_CURVATURE_RANGE.midpoint()).abs() < 1e-15);
            assert_eq!(g.bend_angle, 0.0);
        }
    }

    #[test]
    fn shared_heads_give_identical_parameters_for_identical_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = DecoderWeights::init(5, &mut rng);
        let col = random_matrix(5, 1, 4);
        let f = DMatrix::from_fn(5, 3, |r, _| col[(r, 0)]);
        let gs = decode_geometry(&f, &w, UnfreezeStage::Deformable);
        assert_eq!(gs[0], gs[1]);
        assert_eq!(gs[1], gs[2]);
    }

    #[test]
    fn raw_heads_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = DecoderWeights::init(5, &mut rng);
        w.size.bias.fill(0.0);
        let (u, v) = (random_matrix(5, 2, 6), random_matrix(5, 2, 7));
        let (a, b) = (0.7, -1.3);
        let lhs = w.size.forward(&(&u * a + &v * b));
        let rhs = w.size.forward(&u) * a + w.size.forward(&v) * b;
        assert!((lhs - rhs).abs().max() < 1e-12);
    }

    #[test]
    fn pinned_heads_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = DecoderWeights::init(4, &mut rng);
        let f = random_matrix(4, 3, 9);
        let grads: Vec<PrimitiveGrad> = (0..3)
            .map(|i| PrimitiveGrad {
                size: [1.0, 2.0, 3.0],
                shape: [0.5, i as f64],
                taper: [1.0, 1.0],
                bend: 2.0,
                bend_angle: 1.0,
                ..Default::default()
            })
            .collect();
        let mut acc = w.zeros_like();
        decode_geometry_vjp(&f, &w, UnfreezeStage::CuboidLike, &grads, &mut acc);
        for head in [&acc.shape, &acc.taper, &acc.bend] {
            assert!(head.weight.iter().chain(head.bias.iter()).all(|&v| v == 0.0));
        }
        assert!(acc.size.weight.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn translation_bias_is_member_point_mean() {
        let pts: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(0.1 * i as f64, -0.05 * i as f64, 0.2)).collect();
        let w = DecoderWeights::zeros(3);
        let f = DMatrix::zeros(3, 2);
        let mut w_ins = DMatrix::zeros(5, 2);
        w_ins[(3, 0)] = 1.0;
        w_ins.column_mut(1).fill(0.2);
        let tr = decode_pose_traced(&f, &pts, &w_ins, &w, MirrorMode::Argmax, &[]).unwrap();
        assert_eq!(tr[0].translation, pts[3]);
        let centroid = pts.iter().sum::<Vector3<f64>>() / 5.0;
        assert!((tr[1].translation - centroid).norm() < 1e-15);
        assert_eq!(tr[0].rotation, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn translation_stays_in_unit_box() {
        for x in [-50.0, -1.0, -0.95, -0.9, 0.0, 0.3, 0.9, 0.91, 2.0, 1e6] {
            let y = soft_clamp(x);
            assert!((-1.0..=1.0).contains(&y));
            assert!(soft_clamp_grad(x) >= 0.0);
        }
        assert!((soft_clamp(0.9 + 1e-9) - soft_clamp(0.9 - 1e-9)).abs() < 1e-8);
        let h = 1e-6;
        for x in [0.95, -1.2, 0.5] {
            let fd = (soft_clamp(x + h) - soft_clamp(x - h)) / (2.0 * h);
            assert!((fd - soft_clamp_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn mirror_logits_favoring_none_rarely_mirror() {
        let mut w = DecoderWeights::zeros(2);
        w.mirror.bias = DVector::from_column_slice(&[10.0, 0.0, 0.0, 0.0]);
        w.rotation.bias = DVector::from_column_slice(&[0.8, 0.2, 0.5, 0.1]);
        let pts = vec![Vector3::zeros(); 3];
        let w_ins = DMatrix::from_element(3, 1, 1.0 / 3.0);
        let f = DMatrix::zeros(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut unmirrored = 0;
        let trials = 10_000;
        for _ in 0..trials {
            let tr = decode_pose_traced(&f, &pts, &w_ins, &w, MirrorMode::StraightThrough, &mirror_noise(1, &mut rng)).unwrap();
            let same = tr[0].rotation.iter().zip(&tr[0].base_rotation).all(|(a, b)| (a - b).abs() < 1e-15);
            if same {
                unmirrored += 1;
            }
        }
        assert!(unmirrored as f64 / trials as f64 > 0.99);
    }

    #[test]
    fn sampled_modes_need_noise_per_part() {
        let w = DecoderWeights::zeros(2);
        let pts = vec![Vector3::zeros(); 3];
        let w_ins = DMatrix::from_element(3, 2, 1.0 / 3.0);
        let f = DMatrix::zeros(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for mode in [MirrorMode::StraightThrough, MirrorMode::Relaxed] {
            let short = decode_pose_traced(&f, &pts, &w_ins, &w, mode, &mirror_noise(1, &mut rng));
            assert!(matches!(short, Err(Error::SizeMismatch { left: 1, right: 2 })));
        }
        assert!(decode_pose_traced(&f, &pts, &w_ins, &w, MirrorMode::Argmax, &[]).is_ok());
    }

    #[test]
    fn geometry_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = DecoderWeights::init(4, &mut rng);
        let f = random_matrix(4, 3, 12);
        let gs: Vec<PrimitiveGrad> = (0..3)
            .map(|c| PrimitiveGrad {
                size: [0.3, -0.2, 0.5 + c as f64],
                shape: [0.4, -0.7],
                taper: [0.2, 0.9],
                bend: -1.1,
                bend_angle: 0.6,
                ..Default::default()
            })
            .collect();
        let probe = |w: &DecoderWeights, f: &DMatrix<f64>| -> f64 {
            decode_geometry(f, w, UnfreezeStage::Deformable)
                .iter()
                .zip(&gs)
                .map(|(p, g)| {
                    (0..3).map(|i| p.size[i] * g.size[i]).sum::<f64>()
                        + (0..2).map(|i| p.shape[i] * g.shape[i] + p.taper[i] * g.taper[i]).sum::<f64>()
                        + p.bend * g.bend
                        + p.bend_angle * g.bend_angle
                })
                .sum()
        };
        let mut acc = w.zeros_like();
        let g_f = decode_geometry_vjp(&f, &w, UnfreezeStage::Deformable, &gs, &mut acc);
        let h = 1e-6;
        let analytic = flat(&acc);
        for i in 0..analytic.len() {
            let fd = (probe(&perturbed(&w, i, h), &f) - probe(&perturbed(&w, i, -h), &f)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-7, "weight {i}: {fd} vs {}", analytic[i]);
        }
        for r in 0..4 {
            for c in 0..3 {
                let mut fp = f.clone();
                fp[(r, c)] += h;
                let mut fm = f.clone();
                fm[(r, c)] -= h;
                let fd = (probe(&w, &fp) - probe(&w, &fm)) / (2.0 * h);
                assert!((fd - g_f[(r, c)]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn pose_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut w = DecoderWeights::init(3, &mut rng);
        w.rotation = Linear::random(3, &[0.7, 0.3, -0.4, 0.2], 1.0, &mut rng);
        w.mirror = Linear::random(3, &[0.5, 0.1, 0.0, -0.2], 1.0, &mut rng);
        w.translation = Linear::random(3, &[0.4, 0.0, -0.3], 1.0, &mut rng);
        let pts: Vec<Vector3<f64>> = (0..6)
            .map(|_| Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let f = random_matrix(3, 2, 14) * 2.0;
        let w_ins = random_matrix(6, 2, 15).map(f64::abs);
        let noise = mirror_noise(2, &mut rng);
        let g_mat = [Matrix3::from_fn(|r, c| (r as f64 - c as f64) * 0.3 + 0.1), Matrix3::from_fn(|r, c| 0.2 * (r * c) as f64 - 0.4)];
        let g_t = [Vector3::new(0.3, -0.5, 0.8), Vector3::new(-0.2, 0.1, 0.6)];
        for mode in [MirrorMode::Relaxed, MirrorMode::Argmax] {
            let probe = |w: &DecoderWeights, f: &DMatrix<f64>, wi: &DMatrix<f64>| -> f64 {
                decode_pose_traced(f, &pts, wi, w, mode, &noise)
                    .unwrap()
                    .iter()
                    .enumerate()
                    .map(|(k, tr)| tr.matrix.dot(&g_mat[k]) + tr.translation.dot(&g_t[k]))
                    .sum()
            };
            let traces = decode_pose_traced(&f, &pts, &w_ins, &w, mode, &noise).unwrap();
            let mut acc = w.zeros_like();
            let (g_f, g_wi) = decode_pose_vjp(&f, &pts, &w, mode, &traces, &g_mat, &g_t, &mut acc);
            let h = 1e-6;
            let analytic = flat(&acc);
            for i in 0..analytic.len() {
                let fd = (probe(&perturbed(&w, i, h), &f, &w_ins) - probe(&perturbed(&w, i, -h), &f, &w_ins)) / (2.0 * h);
                assert!((fd - analytic[i]).abs() < 1e-6, "{mode:?} weight {i}: {fd} vs {}", analytic[i]);
            }
            for (target, analytic) in [(0, &g_f), (1, &g_wi)] {
                let base = if target == 0 { &f } else { &w_ins };
                for r in 0..base.nrows() {
                    for c in 0..base.ncols() {
                        let eval = |d: f64| {
                            let mut m = base.clone();
                            m[(r, c)] += d;
                            if target == 0 {
                                probe(&w, &m, &w_ins)
                            } else {
                                probe(&w, &f, &m)
                            }
                        };
                        let fd = (eval(h) - eval(-h)) / (2.0 * h);
                        assert!((fd - analytic[(r, c)]).abs() < 1e-6, "{mode:?} input {target} ({r},{c})");
                    }
                }
            }
        }
    }
}
