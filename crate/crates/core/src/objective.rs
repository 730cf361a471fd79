//! One evaluation of the total loss and its exact gradient.
//!
//! Forward: encode, build memberships, align, decode, sample, score.
//! Backward runs the same chain in reverse with hand-written adjoints.
//! Every random or discrete choice of an evaluation lives in [`Frozen`] so
//! it can be replayed, which the gradient check uses to compare against
//! finite differences of the same function.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::alignment::{
    adaptive_tau_forward, adaptive_tau_vjp, align_forward, align_vjp, pseudo_semantic, AlignForward, TauForward,
};
use crate::decoders::{
    decode_geometry, decode_geometry_vjp, decode_pose_traced, decode_pose_vjp, MirrorMode, PoseTrace,
    UnfreezeStage,
};
use crate::error::{Error, Result};
use crate::geometry::{plan_samples, surface_point_vjp, PrimitiveGrad, SamplePlan, ShapeParams};
use crate::losses::{evaluate_fused, select, FusedInputs, LossBreakdown, LossConfig, LossWeights, Selection};
use crate::membership::{membership_backward, memberships, EncoderCache, Encoding, FitState, MembershipGrad, MembershipSet};

/// Fixed data of a fit.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub points: &'a [Vector3<f64>],
    pub samples_per_primitive: usize,
    pub loss: &'a LossConfig,
}

/// Random and discrete choices of one evaluation. Fields left as `None` are
/// filled in from the current state on first use.
#[derive(Clone, Debug)]
pub struct Frozen {
    pub stage: UnfreezeStage,
    pub weights: LossWeights,
    pub mirror_mode: MirrorMode,
    /// Gumbel noise per instance slot.
    pub noise: Vec<[f64; 4]>,
    /// Seed of the sample-plan draw.
    pub plan_seed: u64,
    /// Instance and semantic sample plans.
    pub plans: Option<[Vec<SamplePlan>; 2]>,
    pub selections: Option<[Selection; 2]>,
    pub pseudo: Option<DMatrix<f64>>,
}

impl Frozen {
    pub fn new(stage: UnfreezeStage, weights: LossWeights, mirror_mode: MirrorMode, noise: Vec<[f64; 4]>, plan_seed: u64) -> Self {
        Self {
            stage,
            weights,
            mirror_mode,
            noise,
            plan_seed,
            plans: None,
            selections: None,
            pseudo: None,
        }
    }
}

/// Forward values shared by the loss evaluation and output extraction.
pub struct Forward {
    pub encoding: Encoding,
    pub cache: EncoderCache,
    pub memberships: MembershipSet,
    pub tau: TauForward,
    pub align: AlignForward,
    pub geo_ins: Vec<ShapeParams>,
    pub geo_sem: Vec<ShapeParams>,
    pub poses: Vec<PoseTrace>,
}

pub fn forward(
    state: &FitState,
    points: &[Vector3<f64>],
    stage: UnfreezeStage,
    mode: MirrorMode,
    noise: &[[f64; 4]],
) -> Result<Forward> {
    let (encoding, cache) = state.encoder.encode(points);
    if !encoding.is_finite() {
        return Err(Error::NonFinite("point features or membership logits"));
    }
    let ms = memberships(&encoding);
    let tau = adaptive_tau_forward(&ms.f_geo_s);
    let align = align_forward(&ms.f_geo_s, &ms.f_geo_i, tau.tau)?;
    let geo_ins = decode_geometry(&ms.f_geo_i, &state.decoder, stage);
    let geo_sem = decode_geometry(&align.f_geo_is, &state.decoder, stage);
    let poses = decode_pose_traced(&ms.f_pos, points, &ms.w_ins, &state.decoder, mode, noise)?;
    Ok(Forward {
        encoding,
        cache,
        memberships: ms,
        tau,
        align,
        geo_ins,
        geo_sem,
        poses,
    })
}

fn draw_plans(geo_ins: &[ShapeParams], geo_sem: &[ShapeParams], count: usize, seed: u64) -> Result<[Vec<SamplePlan>; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ins = geo_ins.iter().map(|g| plan_samples(g, count, &mut rng)).collect::<Result<Vec<_>>>()?;
    let sem = geo_sem.iter().map(|g| plan_samples(g, count, &mut rng)).collect::<Result<Vec<_>>>()?;
    Ok([ins, sem])
}

fn evaluate_samples(plans: &[SamplePlan], geo: &[ShapeParams], poses: &[PoseTrace]) -> Vec<Vec<Vector3<f64>>> {
    plans
        .par_iter()
        .zip(geo.par_iter())
        .zip(poses.par_iter())
        .map(|((plan, g), pose)| plan.evaluate(g, &pose.matrix, &pose.translation))
        .collect()
}

fn primitive_grads(
    plans: &[SamplePlan],
    geo: &[ShapeParams],
    poses: &[PoseTrace],
    g_samples: &[Vec<Vector3<f64>>],
) -> Vec<PrimitiveGrad> {
    (0..plans.len())
        .into_par_iter()
        .map(|m| {
            let mut acc = PrimitiveGrad::default();
            for (&(eta, omega), g) in plans[m].params.iter().zip(&g_samples[m]) {
                if g.x != 0.0 || g.y != 0.0 || g.z != 0.0 {
                    surface_point_vjp(&geo[m], &poses[m].matrix, eta, omega, g, &mut acc);
                }
            }
            acc
        })
        .collect()
}

/// Primitive samples of both abstractions under the plans in `frozen`.
pub fn sampled_abstractions(
    state: &FitState,
    problem: &Problem<'_>,
    frozen: &mut Frozen,
) -> Result<[Vec<Vec<Vector3<f64>>>; 2]> {
    let fwd = forward(state, problem.points, frozen.stage, frozen.mirror_mode, &frozen.noise)?;
    if frozen.plans.is_none() {
        frozen.plans = Some(draw_plans(&fwd.geo_ins, &fwd.geo_sem, problem.samples_per_primitive, frozen.plan_seed)?);
    }
    let plans = frozen.plans.as_ref().expect("plans drawn above");
    Ok([
        evaluate_samples(&plans[0], &fwd.geo_ins, &fwd.poses),
        evaluate_samples(&plans[1], &fwd.geo_sem, &fwd.poses),
    ])
}

/// Total loss at `state` and its gradient with respect to every free
/// parameter.
pub fn evaluate(state: &FitState, problem: &Problem<'_>, frozen: &mut Frozen) -> Result<(LossBreakdown, FitState)> {
    let points = problem.points;
    let fwd = forward(state, points, frozen.stage, frozen.mirror_mode, &frozen.noise)?;
    let ms = &fwd.memberships;

    if frozen.plans.is_none() {
        frozen.plans = Some(draw_plans(&fwd.geo_ins, &fwd.geo_sem, problem.samples_per_primitive, frozen.plan_seed)?);
    }
    let plans = frozen.plans.as_ref().expect("plans drawn above");
    let samples_ins = evaluate_samples(&plans[0], &fwd.geo_ins, &fwd.poses);
    let samples_sem = evaluate_samples(&plans[1], &fwd.geo_sem, &fwd.poses);
    if samples_ins.iter().chain(&samples_sem).flatten().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("primitive samples"));
    }

    if frozen.selections.is_none() {
        let delta = problem.loss.delta_wd;
        frozen.selections = Some([select(&samples_ins, points, delta), select(&samples_sem, points, delta)]);
    }
    if frozen.pseudo.is_none() {
        frozen.pseudo = Some(pseudo_semantic(&ms.p_ins, &fwd.align.w_a).1);
    }
    let [sel_ins, sel_sem] = frozen.selections.as_ref().expect("selections computed above");
    let inputs = FusedInputs {
        cloud: points,
        ins: &samples_ins,
        sem: &samples_sem,
        p_ins: &ms.p_ins,
        p_sem: &ms.p_sem,
        pseudo: frozen.pseudo.as_ref().expect("pseudo target computed above"),
    };
    let (breakdown, g) = evaluate_fused(&inputs, sel_ins, sel_sem, &frozen.weights, problem.loss)?;

    let mut grad = state.zeros_like();
    let pg_ins = primitive_grads(&plans[0], &fwd.geo_ins, &fwd.poses, &g.ins);
    let pg_sem = primitive_grads(&plans[1], &fwd.geo_sem, &fwd.poses, &g.sem);

    let mut g_f_geo_i = decode_geometry_vjp(&ms.f_geo_i, &state.decoder, frozen.stage, &pg_ins, &mut grad.decoder);
    let g_f_geo_is = decode_geometry_vjp(&fwd.align.f_geo_is, &state.decoder, frozen.stage, &pg_sem, &mut grad.decoder);

    let g_rot: Vec<Matrix3<f64>> = pg_ins.iter().zip(&pg_sem).map(|(a, b)| a.rotation + b.rotation).collect();
    let g_t: Vec<Vector3<f64>> = pg_ins.iter().zip(&pg_sem).map(|(a, b)| a.translation + b.translation).collect();
    let (g_f_pos, g_w_ins) = decode_pose_vjp(
        &ms.f_pos,
        points,
        &state.decoder,
        frozen.mirror_mode,
        &fwd.poses,
        &g_rot,
        &g_t,
        &mut grad.decoder,
    );

    let (mut g_f_geo_s, g_i, g_tau) = align_vjp(&ms.f_geo_s, &ms.f_geo_i, &fwd.align, &g_f_geo_is);
    g_f_geo_i += g_i;
    g_f_geo_s += adaptive_tau_vjp(&fwd.tau, g_tau);

    let dims = fwd.encoding.dims();
    let mg = MembershipGrad {
        w_ins: g_w_ins,
        w_sem: DMatrix::zeros(dims.n, dims.s),
        p_ins: g.p_ins,
        p_sem: g.p_sem,
        f_pos: g_f_pos,
        f_geo_i: g_f_geo_i,
        f_geo_s: g_f_geo_s,
    };
    let g_enc = membership_backward(&fwd.encoding, ms, &mg);
    state.encoder.backward(&fwd.cache, &g_enc, &mut grad.encoder);
    Ok((breakdown, grad))
}
