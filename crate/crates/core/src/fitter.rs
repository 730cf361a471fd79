//! Per-shape fitting, output extraction, batch runs and gradient checks.

use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::repeat_indices;
use crate::decoders::{decode_geometry, mirror_noise, unfreeze_schedule, MirrorMode, UnfreezeStage};
use crate::error::{Error, Result};
use crate::geometry::{sample_surface, DsqParams, MirrorPlane};
use crate::losses::{LossBreakdown, LossConfig, LossWeights};
use crate::membership::{column_labels, Backend, Dims, FitState, LogitInit, ParamGroup};
use crate::objective::{evaluate, forward, Frozen, Problem};
use crate::optim::{cosine_lr, AdamW};

/// Smallest cloud accepted by a fit.
pub const MIN_POINTS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Resample input clouds to this many points; `None` keeps them as given.
    pub n_points: Option<usize>,
    pub max_primitives: usize,
    pub max_semantics: usize,
    pub feature_dim: usize,
    pub samples_per_primitive: usize,
    pub total_steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub backend: Backend,
    pub logit_init: LogitInit,
    pub mirror_mode: MirrorMode,
    /// A primitive exists when more than this many points carry its label.
    pub existence_threshold: usize,
    pub loss: LossConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_points: None,
            max_primitives: 16,
            max_semantics: 6,
            feature_dim: 32,
            samples_per_primitive: 256,
            total_steps: 600,
            lr_start: 1e-2,
            lr_end: 3e-3,
            weight_decay: 1e-3,
            seed: 0,
            backend: Backend::Direct,
            logit_init: LogitInit::Seeded,
            mirror_mode: MirrorMode::StraightThrough,
            existence_threshold: 20,
            loss: LossConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.max_semantics == 0 || self.max_semantics > self.max_primitives {
            return bad(format!(
                "need 1 <= max_semantics <= max_primitives, got S = {} and M = {}",
                self.max_semantics, self.max_primitives
            ));
        }
        if !(1..=192).contains(&self.feature_dim) {
            return bad(format!("feature_dim must be in 1..=192, got {}", self.feature_dim));
        }
        if self.samples_per_primitive < 4 {
            return bad(format!("samples_per_primitive must be at least 4, got {}", self.samples_per_primitive));
        }
        if let Some(n) = self.n_points {
            if n < MIN_POINTS {
                return bad(format!("n_points must be at least {MIN_POINTS}, got {n}"));
            }
        }
        for (name, v) in [("lr_start", self.lr_start), ("lr_end", self.lr_end), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        self.loss.validate()
    }

    fn dims(&self, n: usize) -> Dims {
        Dims {
            n,
            m: self.max_primitives,
            s: self.max_semantics,
            d: self.feature_dim,
        }
    }

    /// Stage in effect at the end of the fit.
    pub fn final_stage(&self) -> UnfreezeStage {
        if self.total_steps == 0 {
            UnfreezeStage::Deformable
        } else {
            unfreeze_schedule(self.total_steps - 1, self.total_steps)
        }
    }
}

/// One optimization step as recorded in the history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub stage: UnfreezeStage,
    pub lr: f64,
    pub weights: LossWeights,
    pub loss: LossBreakdown,
}

/// The five outputs of a fit plus bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub instance_labels: Vec<usize>,
    pub semantic_labels: Vec<usize>,
    pub theta_ins: Vec<DsqParams>,
    pub theta_sem: Vec<DsqParams>,
    pub theta_rep: Vec<DsqParams>,
    /// Shared existence mask of the three abstractions.
    pub existence: Vec<bool>,
    /// Semantic assigned to each instance slot.
    pub repeat: Vec<usize>,
    pub mirror_planes: Vec<MirrorPlane>,
    pub history: Vec<HistoryEntry>,
    pub final_loss: LossBreakdown,
    /// Set when the fit stopped early on a non-finite value.
    pub diagnostic: Option<String>,
    pub seed: u64,
    pub elapsed_seconds: f64,
}

impl FitResult {
    /// Indices of existing primitives.
    pub fn kept(&self) -> Vec<usize> {
        (0..self.existence.len()).filter(|&m| self.existence[m]).collect()
    }

    /// Existing primitives of an abstraction, with their slot index.
    pub fn masked<'a>(&self, theta: &'a [DsqParams]) -> Vec<(usize, &'a DsqParams)> {
        self.kept().into_iter().map(|m| (m, &theta[m])).collect()
    }
}

/// Runs the optimization and returns the final state, the history and a
/// diagnostic if the run stopped early.
pub fn fit_state(points: &[Vector3<f64>], cfg: &FitConfig) -> Result<(FitState, Vec<HistoryEntry>, Option<String>)> {
    cfg.validate()?;
    check_points(points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = FitState::init_with(points, cfg.dims(points.len()), cfg.backend, cfg.logit_init, &mut rng);
    let problem = Problem {
        points,
        samples_per_primitive: cfg.samples_per_primitive,
        loss: &cfg.loss,
    };
    let groups = state.flat_groups();
    let mut opt = AdamW::new(groups.len(), cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.total_steps);
    let mut diagnostic = None;

    for step in 0..cfg.total_steps {
        let stage = unfreeze_schedule(step, cfg.total_steps);
        let weights = cfg.loss.weights(step, cfg.total_steps);
        let noise = mirror_noise(cfg.max_primitives, &mut rng);
        let mut frozen = Frozen::new(stage, weights, cfg.mirror_mode, noise, rng.random());
        let (loss, grad) = match evaluate(&state, &problem, &mut frozen) {
            Ok(v) => v,
            Err(e) => {
                diagnostic = Some(format!("step {step}: {e}"));
                break;
            }
        };
        if !loss.is_finite() {
            diagnostic = Some(format!("step {step}: non-finite loss {loss:?}"));
            break;
        }
        if !grad.is_finite() {
            diagnostic = Some(format!("step {step}: non-finite gradient"));
            break;
        }
        let lr = cosine_lr(step, cfg.total_steps, cfg.lr_start, cfg.lr_end);
        history.push(HistoryEntry {
            step,
            stage,
            lr,
            weights,
            loss,
        });
        let mut flat = state.to_flat();
        opt.step(&mut flat, &grad.to_flat(), &groups, |g| stage.is_frozen(g), lr);
        if flat.iter().any(|v| !v.is_finite()) {
            diagnostic = Some(format!("step {step}: update produced non-finite parameters"));
            break;
        }
        state.load_flat(&flat);
    }
    Ok((state, history, diagnostic))
}

fn check_points(points: &[Vector3<f64>]) -> Result<()> {
    if points.len() < MIN_POINTS {
        return Err(Error::InvalidArgument(format!(
            "a fit needs at least {MIN_POINTS} points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("input points"));
    }
    Ok(())
}

/// Fits one normalized cloud.
pub fn fit_shape(points: &[Vector3<f64>], cfg: &FitConfig) -> Result<FitResult> {
    let start = Instant::now();
    let (state, history, diagnostic) = fit_state(points, cfg)?;
    let mut result = extract_outputs(&state, points, cfg)?;
    result.history = history;
    result.diagnostic = diagnostic;
    result.elapsed_seconds = start.elapsed().as_secs_f64();
    Ok(result)
}

/// The five outputs of a state. The mirror plane is the argmax of its
/// logits, so extraction is deterministic.
pub fn extract_outputs(state: &FitState, points: &[Vector3<f64>], cfg: &FitConfig) -> Result<FitResult> {
    check_points(points)?;
    let stage = cfg.final_stage();
    let fwd = forward(state, points, stage, MirrorMode::Argmax, &[])?;
    let ms = &fwd.memberships;
    let instance_labels = column_labels(&ms.p_ins);
    let semantic_labels = column_labels(&ms.p_sem);
    let repeat = repeat_indices(&fwd.align.w_a);
    let geo_rep = decode_geometry(&ms.f_geo_s, &state.decoder, stage);

    let poses: Vec<_> = fwd.poses.iter().map(|p| p.pose()).collect();
    let theta_ins: Vec<DsqParams> = fwd.geo_ins.iter().zip(&poses).map(|(g, p)| DsqParams::new(*g, *p)).collect();
    let theta_sem: Vec<DsqParams> = fwd.geo_sem.iter().zip(&poses).map(|(g, p)| DsqParams::new(*g, *p)).collect();
    let theta_rep: Vec<DsqParams> = repeat.iter().zip(&poses).map(|(&s, p)| DsqParams::new(geo_rep[s], *p)).collect();

    let existence = existence_mask(&instance_labels, cfg.max_primitives, cfg.existence_threshold);

    let problem = Problem {
        points,
        samples_per_primitive: cfg.samples_per_primitive,
        loss: &cfg.loss,
    };
    let last = cfg.total_steps.saturating_sub(1);
    let weights = cfg.loss.weights(last, cfg.total_steps.max(1));
    let mut frozen = Frozen::new(stage, weights, MirrorMode::Argmax, vec![], cfg.seed);
    let (final_loss, _) = evaluate(state, &problem, &mut frozen)?;

    Ok(FitResult {
        instance_labels,
        semantic_labels,
        theta_ins,
        theta_sem,
        theta_rep,
        existence,
        repeat,
        mirror_planes: fwd.poses.iter().map(|p| p.plane).collect(),
        history: Vec::new(),
        final_loss,
        diagnostic: None,
        seed: cfg.seed,
        elapsed_seconds: 0.0,
    })
}

/// Primitives whose instance label is carried by more than `threshold`
/// points.
pub fn existence_mask(labels: &[usize], slots: usize, threshold: usize) -> Vec<bool> {
    let mut counts = vec![0usize; slots];
    for &l in labels {
        counts[l] += 1;
    }
    counts.iter().map(|&c| c > threshold).collect()
}

/// Surface samples of the existing primitives of one abstraction.
pub fn abstraction_points(result: &FitResult, theta: &[DsqParams], per_primitive: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (m, t) in result.masked(theta) {
        out.extend(sample_surface(t, per_primitive, m, &mut rng)?.points);
    }
    Ok(out)
}

/// Seed of shape `index` in a batch run with global seed `seed`.
pub fn shape_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent fits of several clouds in parallel. A failure in one shape
/// does not affect the others.
pub fn fit_batch(clouds: &[Vec<Vector3<f64>>], cfg: &FitConfig) -> Vec<Result<FitResult>> {
    clouds
        .par_iter()
        .enumerate()
        .map(|(i, cloud)| {
            let cfg = FitConfig {
                seed: shape_seed(cfg.seed, i),
                ..cfg.clone()
            };
            fit_shape(cloud, &cfg)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Number of coordinates compared.
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
    pub stage: UnfreezeStage,
    /// Loss weights; `None` uses the unscheduled configuration weights.
    pub weights: Option<LossWeights>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            coordinates: 200,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
            stage: UnfreezeStage::Deformable,
            weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEntry {
    pub index: usize,
    pub group: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub parameters: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_gradient: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub worst: Option<GradientEntry>,
    pub entries: Vec<GradientEntry>,
}

/// Compares the analytic gradient with central differences on a random
/// subset of coordinates. The Gumbel noise, sample plans, nearest-neighbour
/// selections and pseudo target are drawn once and replayed, and the mirror
/// selection uses the relaxed mixture, so both sides differentiate the same
/// function.
pub fn gradient_check(
    state: &FitState,
    points: &[Vector3<f64>],
    cfg: &FitConfig,
    opts: &GradCheckOptions,
) -> Result<GradientReport> {
    cfg.validate()?;
    check_points(points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let problem = Problem {
        points,
        samples_per_primitive: cfg.samples_per_primitive,
        loss: &cfg.loss,
    };
    let weights = opts.weights.unwrap_or_else(|| cfg.loss.base_weights());
    let noise = mirror_noise(cfg.max_primitives, &mut rng);
    let mut frozen = Frozen::new(opts.stage, weights, MirrorMode::Relaxed, noise, rng.random());
    let (_, grad) = evaluate(state, &problem, &mut frozen)?;
    let analytic = grad.to_flat();
    let groups = state.flat_groups();
    let base = state.to_flat();

    let chosen = choose_coordinates(&groups, opts.coordinates, &mut rng);
    let entries: Vec<GradientEntry> = chosen
        .par_iter()
        .map(|&i| {
            let eval = |delta: f64| -> Result<f64> {
                let mut flat = base.clone();
                flat[i] += delta;
                let mut s = state.clone();
                s.load_flat(&flat);
                Ok(evaluate(&s, &problem, &mut frozen.clone())?.0.total)
            };
            let numeric = (eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step);
            let a = analytic[i];
            Ok(GradientEntry {
                index: i,
                group: format!("{:?}", groups[i]),
                analytic: a,
                numeric,
                rel_error: (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor),
            })
        })
        .collect::<Result<_>>()?;
    let worst = entries
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned();
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(GradientReport {
        parameters: base.len(),
        checked: entries.len(),
        max_rel_error,
        max_abs_gradient: analytic.iter().fold(0.0, |m, v| m.max(v.abs())),
        tolerance: opts.tolerance,
        passed: max_rel_error < opts.tolerance,
        worst,
        entries,
    })
}

/// Uniform sample of coordinates topped up so every group appears.
fn choose_coordinates(groups: &[ParamGroup], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let total = groups.len();
    let mut chosen: Vec<usize> = sample_indices(rng, total, count.min(total)).into_vec();
    for g in [
        ParamGroup::Encoder,
        ParamGroup::SizeHead,
        ParamGroup::ShapeHead,
        ParamGroup::TaperHead,
        ParamGroup::BendHead,
        ParamGroup::PoseHead,
    ] {
        let members: Vec<usize> = (0..total).filter(|&i| groups[i] == g).collect();
        for _ in 0..members.len().min(8) {
            let i = members[rng.random_range(0..members.len())];
            if !chosen.contains(&i) {
                chosen.push(i);
            }
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Toy gradient-check instance: a small random state on a small cloud.
pub fn toy_instance(points: &[Vector3<f64>], cfg: &FitConfig) -> FitState {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    FitState::init(cfg.dims(points.len()), cfg.backend, &mut rng)
}

/// Per-point assignment matrix of a labelling, `parts x n`.
pub fn one_hot_assignment(labels: &[usize], parts: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(parts, labels.len());
    for (n, &l) in labels.iter().enumerate() {
        p[(l, n)] = 1.0;
    }
    p
}
