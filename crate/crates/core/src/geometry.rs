//! Constrained deformable superquadrics.
//!
//! A primitive is a superellipsoid with global tapering and bending, posed by
//! a unit quaternion and a translation. Deformations are applied in the order
//! taper, bend, rotate, translate. Every stage has a hand-written
//! vector-Jacobian product so the fitter can push point gradients back to the
//! parameters.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A closed interval used to squash unconstrained values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// Affine-rescaled sigmoid onto the interval.
    pub fn squash(&self, x: f64) -> f64 {
        self.lo + (self.hi - self.lo) * sigmoid(x)
    }

    /// Derivative of [`Interval::squash`].
    pub fn squash_grad(&self, x: f64) -> f64 {
        let s = sigmoid(x);
        (self.hi - self.lo) * s * (1.0 - s)
    }

    /// Inverse of [`Interval::squash`] for values strictly inside the interval.
    pub fn unsquash(&self, v: f64) -> f64 {
        let s = (v - self.lo) / (self.hi - self.lo);
        (s / (1.0 - s)).ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const SIZE_RANGE: Interval = Interval::new(0.02, 0.82);
pub const SHAPE_RANGE: Interval = Interval::new(0.2, 1.0);
pub const TAPER_RANGE: Interval = Interval::new(-0.9, 0.9);
pub const BEND_CURVATURE_RANGE: Interval = Interval::new(0.01, 0.75);
pub const BEND_ANGLE_RANGE: Interval = Interval::new(-FRAC_PI_2, FRAC_PI_2);
pub const TRANSLATION_RANGE: Interval = Interval::new(-1.0, 1.0);

/// Curvatures below this are treated as "no bend".
pub const BEND_GUARD: f64 = 1e-6;

/// Resolution of the (eta, omega) grid used for meshing and sampling.
pub const GRID: usize = 32;

pub const IDENTITY_QUATERNION: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

/// Geometric parameters of one primitive: size, shape exponents, tapering
/// and bending. A curvature of zero disables bending.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub size: [f64; 3],
    pub shape: [f64; 2],
    pub taper: [f64; 2],
    pub bend: f64,
    pub bend_angle: f64,
}

impl ShapeParams {
    /// Undeformed superellipsoid.
    pub fn plain(size: [f64; 3], shape: [f64; 2]) -> Self {
        Self {
            size,
            shape,
            taper: [0.0; 2],
            bend: 0.0,
            bend_angle: 0.0,
        }
    }

    pub fn bends(&self) -> bool {
        self.bend >= BEND_GUARD
    }
}

/// Translation and unit-quaternion rotation `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: [f64; 3],
    pub rotation: [f64; 4],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            translation: [0.0; 3],
            rotation: IDENTITY_QUATERNION,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(normalize_quat(self.rotation))
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }
}

/// The 16 parameters of one deformable superquadric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsqParams {
    pub geometry: ShapeParams,
    pub pose: Pose,
}

impl DsqParams {
    pub fn new(geometry: ShapeParams, pose: Pose) -> Self {
        Self { geometry, pose }
    }

    /// Flattened `[a(3), eps(2), k(2), b, alpha, t(3), r(4)]`.
    pub fn to_array(&self) -> [f64; 16] {
        let g = &self.geometry;
        let p = &self.pose;
        [
            g.size[0], g.size[1], g.size[2], g.shape[0], g.shape[1], g.taper[0], g.taper[1], g.bend,
            g.bend_angle, p.translation[0], p.translation[1], p.translation[2], p.rotation[0],
            p.rotation[1], p.rotation[2], p.rotation[3],
        ]
    }

    pub fn from_array(v: &[f64; 16]) -> Self {
        Self {
            geometry: ShapeParams {
                size: [v[0], v[1], v[2]],
                shape: [v[3], v[4]],
                taper: [v[5], v[6]],
                bend: v[7],
                bend_angle: v[8],
            },
            pose: Pose {
                translation: [v[9], v[10], v[11]],
                rotation: [v[12], v[13], v[14], v[15]],
            },
        }
    }

    /// Checks the admissible ranges. A curvature of exactly zero (bending
    /// off) is accepted.
    pub fn is_admissible(&self) -> bool {
        let g = &self.geometry;
        let p = &self.pose;
        let norm = p.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        g.size.iter().all(|&v| SIZE_RANGE.contains(v))
            && g.shape.iter().all(|&v| SHAPE_RANGE.contains(v))
            && g.taper.iter().all(|&v| TAPER_RANGE.contains(v))
            && (g.bend == 0.0 || BEND_CURVATURE_RANGE.contains(g.bend))
            && BEND_ANGLE_RANGE.contains(g.bend_angle)
            && p.translation.iter().all(|&v| TRANSLATION_RANGE.contains(v))
            && (norm - 1.0).abs() < 1e-9
    }
}

/// Maps an unconstrained 16-vector onto the admissible parameter box.
///
/// Box intervals use an affine-rescaled sigmoid; the quaternion is
/// normalized, with the identity used for a zero vector.
pub fn squash_params(raw: &[f64; 16]) -> Result<DsqParams> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw primitive parameters"));
    }
    let q = [raw[12], raw[13], raw[14], raw[15]];
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rotation = if norm < 1e-12 {
        IDENTITY_QUATERNION
    } else {
        q.map(|v| v / norm)
    };
    Ok(DsqParams {
        geometry: ShapeParams {
            size: [0, 1, 2].map(|i| SIZE_RANGE.squash(raw[i])),
            shape: [3, 4].map(|i| SHAPE_RANGE.squash(raw[i])),
            taper: [5, 6].map(|i| TAPER_RANGE.squash(raw[i])),
            bend: BEND_CURVATURE_RANGE.squash(raw[7]),
            bend_angle: BEND_ANGLE_RANGE.squash(raw[8]),
        },
        pose: Pose {
            translation: [9, 10, 11].map(|i| TRANSLATION_RANGE.squash(raw[i])),
            rotation,
        },
    })
}

/// `sin_cos` with floating-point residue at multiples of pi/2 snapped to zero,
/// so that the poles and axis points land exactly.
fn sin_cos(angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    let snap = |v: f64| if v.abs() < 1e-15 { 0.0 } else { v };
    (snap(s), snap(c))
}

/// Signed power `sign(x) |x|^e`.
pub fn spow(x: f64, e: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().powf(e)
    }
}

/// Signed power and its derivative with respect to the exponent.
fn spow_dexp(x: f64, e: f64) -> (f64, f64) {
    let a = x.abs();
    if a == 0.0 {
        return (0.0, 0.0);
    }
    let v = x.signum() * a.powf(e);
    (v, v * a.ln())
}

fn check_shape(eps: [f64; 2]) -> Result<()> {
    for e in eps {
        if !(SHAPE_RANGE.contains(e)) {
            return Err(Error::ShapeOutOfRange(e));
        }
    }
    Ok(())
}

/// Point on the canonical superellipsoid at latitude `eta` and longitude
/// `omega`.
pub fn superellipsoid_point(a: [f64; 3], eps: [f64; 2], eta: f64, omega: f64) -> Result<Vector3<f64>> {
    check_shape(eps)?;
    Ok(canonical_point(&a, &eps, eta, omega))
}

fn canonical_point(a: &[f64; 3], eps: &[f64; 2], eta: f64, omega: f64) -> Vector3<f64> {
    let (se, ce) = sin_cos(eta);
    let (sw, cw) = sin_cos(omega);
    let ring = spow(ce, eps[0]);
    Vector3::new(
        a[0] * ring * spow(cw, eps[1]),
        a[1] * ring * spow(sw, eps[1]),
        a[2] * spow(se, eps[0]),
    )
}

/// Inside-outside function; equals 1 on the surface.
pub fn implicit_value(a: [f64; 3], eps: [f64; 2], p: &Vector3<f64>) -> f64 {
    let xy = (p.x / a[0]).abs().powf(2.0 / eps[1]) + (p.y / a[1]).abs().powf(2.0 / eps[1]);
    xy.powf(eps[1] / eps[0]) + (p.z / a[2]).abs().powf(2.0 / eps[0])
}

/// Linear tapering along z.
pub fn taper(p: &Vector3<f64>, k: [f64; 2], a3: f64) -> Vector3<f64> {
    let s = p.z / a3;
    Vector3::new((k[0] * s + 1.0) * p.x, (k[1] * s + 1.0) * p.y, p.z)
}

/// Circular bend of curvature `b` in the direction `alpha` around the z axis.
pub fn bend(p: &Vector3<f64>, b: f64, alpha: f64) -> Vector3<f64> {
    if b < BEND_GUARD {
        return *p;
    }
    let (s, c) = alpha.sin_cos();
    let rproj = c * p.x + s * p.y;
    let rho = 1.0 / b - rproj;
    let gamma = p.z * b;
    // 1 - cos(gamma) without cancellation at small curvature
    let delta = rho * 2.0 * (0.5 * gamma).sin().powi(2);
    Vector3::new(p.x + delta * c, p.y + delta * s, gamma.sin() * rho)
}

/// Tapers, bends, rotates and translates a canonical surface point.
pub fn deform_and_pose(p: &Vector3<f64>, theta: &DsqParams) -> Vector3<f64> {
    let g = &theta.geometry;
    let local = bend(&taper(p, g.taper, g.size[2]), g.bend, g.bend_angle);
    theta.pose.rotation_matrix() * local + theta.pose.translation_vector()
}

fn deform_local(g: &ShapeParams, eta: f64, omega: f64) -> Vector3<f64> {
    let p = canonical_point(&g.size, &g.shape, eta, omega);
    bend(&taper(&p, g.taper, g.size[2]), g.bend, g.bend_angle)
}

/// Surface point at `(eta, omega)` of a primitive posed by `rotation` and
/// `translation`.
pub fn surface_point(
    g: &ShapeParams,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    eta: f64,
    omega: f64,
) -> Vector3<f64> {
    rotation * deform_local(g, eta, omega) + translation
}

/// Accumulated gradients for one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveGrad {
    pub size: [f64; 3],
    pub shape: [f64; 2],
    pub taper: [f64; 2],
    pub bend: f64,
    pub bend_angle: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PrimitiveGrad {
    fn default() -> Self {
        Self {
            size: [0.0; 3],
            shape: [0.0; 2],
            taper: [0.0; 2],
            bend: 0.0,
            bend_angle: 0.0,
            rotation: Matrix3::zeros(),
            translation: Vector3::zeros(),
        }
    }
}

impl PrimitiveGrad {
    pub fn add(&mut self, other: &PrimitiveGrad) {
        for i in 0..3 {
            self.size[i] += other.size[i];
        }
        for i in 0..2 {
            self.shape[i] += other.shape[i];
            self.taper[i] += other.taper[i];
        }
        self.bend += other.bend;
        self.bend_angle += other.bend_angle;
        self.rotation += other.rotation;
        self.translation += other.translation;
    }
}

/// Backpropagates `grad` (the gradient with respect to the posed surface
/// point at `(eta, omega)`) into `acc`.
pub fn surface_point_vjp(
    g: &ShapeParams,
    rotation: &Matrix3<f64>,
    eta: f64,
    omega: f64,
    grad: &Vector3<f64>,
    acc: &mut PrimitiveGrad,
) {
    let [a1, a2, a3] = g.size;
    let [e1, e2] = g.shape;
    let (se, ce) = sin_cos(eta);
    let (sw, cw) = sin_cos(omega);
    let (ring, ring_de) = spow_dexp(ce, e1);
    let (bx, bx_de) = spow_dexp(cw, e2);
    let (by, by_de) = spow_dexp(sw, e2);
    let (zc, zc_de) = spow_dexp(se, e1);
    let p0 = Vector3::new(a1 * ring * bx, a2 * ring * by, a3 * zc);

    let s = p0.z / a3;
    let fx = g.taper[0] * s + 1.0;
    let fy = g.taper[1] * s + 1.0;
    let p1 = Vector3::new(fx * p0.x, fy * p0.y, p0.z);

    let p2 = bend(&p1, g.bend, g.bend_angle);

    // posed = R p2 + t
    acc.translation += grad;
    acc.rotation += grad * p2.transpose();
    let g2 = rotation.transpose() * grad;

    let g1 = if g.bends() {
        let b = g.bend;
        let (sa, ca) = g.bend_angle.sin_cos();
        let rproj = ca * p1.x + sa * p1.y;
        let rho = 1.0 / b - rproj;
        let gamma = p1.z * b;
        let (sg, cg) = gamma.sin_cos();
        let omc = 2.0 * (0.5 * gamma).sin().powi(2);
        let delta = rho * omc;

        let g_delta = g2.x * ca + g2.y * sa;
        let g_rho = g_delta * omc + g2.z * sg;
        let g_gamma = g_delta * rho * sg + g2.z * rho * cg;
        let g_rproj = -g_rho;
        let g_c = g2.x * delta + g_rproj * p1.x;
        let g_s = g2.y * delta + g_rproj * p1.y;
        acc.bend_angle += -g_c * sa + g_s * ca;
        acc.bend += -g_rho / (b * b) + g_gamma * p1.z;
        Vector3::new(g2.x + g_rproj * ca, g2.y + g_rproj * sa, g_gamma * b)
    } else {
        g2
    };

    // taper
    let g0x = g1.x * fx;
    let g0y = g1.y * fy;
    let g_s = g1.x * g.taper[0] * p0.x + g1.y * g.taper[1] * p0.y;
    acc.taper[0] += g1.x * s * p0.x;
    acc.taper[1] += g1.y * s * p0.y;
    let g0z = g1.z + g_s / a3;
    acc.size[2] += -g_s * p0.z / (a3 * a3);

    // canonical
    acc.size[0] += g0x * ring * bx;
    acc.size[1] += g0y * ring * by;
    acc.size[2] += g0z * zc;
    acc.shape[0] += g0x * a1 * bx * ring_de + g0y * a2 * by * ring_de + g0z * a3 * zc_de;
    acc.shape[1] += g0x * a1 * ring * bx_de + g0y * a2 * ring * by_de;
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Vector-Jacobian product of [`quat_to_matrix`] (as a polynomial in `q`).
pub fn quat_to_matrix_vjp(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let g = |r: usize, c: usize| g[(r, c)];
    let gw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let gx = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1))
        - 4.0 * x * (g(1, 1) + g(2, 2));
    let gy = 2.0 * (x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1))
        - 4.0 * y * (g(0, 0) + g(2, 2));
    let gz = 2.0 * (-w * g(0, 1) + x * g(0, 2) + w * g(1, 0) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
        - 4.0 * z * (g(0, 0) + g(1, 1));
    [gw, gx, gy, gz]
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-12 {
        IDENTITY_QUATERNION
    } else {
        q.map(|v| v / n)
    }
}

/// Vector-Jacobian product of `u / |u|`.
pub fn normalize_vjp<const K: usize>(u: &[f64; K], grad: &[f64; K]) -> [f64; K] {
    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let dot: f64 = u.iter().zip(grad).map(|(a, b)| a * b).sum::<f64>() / n;
    let mut out = [0.0; K];
    for i in 0..K {
        out[i] = (grad[i] - u[i] / n * dot) / n;
    }
    out
}

/// Mirror plane applied to a rotation by conjugating with the reflection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MirrorPlane {
    #[default]
    None,
    Xy,
    Xz,
    Yz,
}

impl MirrorPlane {
    /// Category order used by the mirror-selection head.
    pub const ALL: [MirrorPlane; 4] = [MirrorPlane::None, MirrorPlane::Xy, MirrorPlane::Xz, MirrorPlane::Yz];

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    /// Sign pattern on `(w, x, y, z)`: the two vector components orthogonal
    /// to the plane normal flip.
    pub fn signs(self) -> [f64; 4] {
        match self {
            MirrorPlane::None => [1.0, 1.0, 1.0, 1.0],
            MirrorPlane::Xy => [1.0, -1.0, -1.0, 1.0],
            MirrorPlane::Xz => [1.0, -1.0, 1.0, -1.0],
            MirrorPlane::Yz => [1.0, 1.0, -1.0, -1.0],
        }
    }

    /// Reflection matrix across the plane (identity for `None`).
    pub fn reflection(self) -> Matrix3<f64> {
        match self {
            MirrorPlane::None => Matrix3::identity(),
            MirrorPlane::Xy => Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)),
            MirrorPlane::Xz => Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0)),
            MirrorPlane::Yz => Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0)),
        }
    }
}

pub fn mirror_rotation(r: [f64; 4], plane: MirrorPlane) -> [f64; 4] {
    let s = plane.signs();
    normalize_quat([r[0] * s[0], r[1] * s[1], r[2] * s[2], r[3] * s[3]])
}

/// Surface samples of one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledPrimitive {
    pub points: Vec<Vector3<f64>>,
    pub source: usize,
}

/// Surface parameters `(eta, omega)` of the samples of one primitive. The
/// plan is a constant of the differentiation: gradients flow only through
/// the surface evaluation at these parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub params: Vec<(f64, f64)>,
}

impl SamplePlan {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn evaluate(&self, g: &ShapeParams, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Vec<Vector3<f64>> {
        self.params
            .iter()
            .map(|&(eta, omega)| surface_point(g, rotation, translation, eta, omega))
            .collect()
    }
}

struct ParamTriangle {
    vertices: [usize; 3],
    corners: [(f64, f64); 3],
}

struct ParamGrid {
    vertex_params: Vec<(f64, f64)>,
    triangles: Vec<ParamTriangle>,
}

fn param_grid() -> &'static ParamGrid {
    static GRID_CACHE: OnceLock<ParamGrid> = OnceLock::new();
    GRID_CACHE.get_or_init(|| {
        let d_eta = PI / GRID as f64;
        let d_omega = 2.0 * PI / GRID as f64;
        // half-cell offsets keep nodes off the signed-power kinks
        let eta = |i: usize| -FRAC_PI_2 + (i as f64 + 0.5) * d_eta;
        let omega = |j: usize| -PI + (j as f64 + 0.5) * d_omega;
        let idx = |i: usize, j: usize| i * GRID + (j % GRID);
        let mut vertex_params = Vec::with_capacity(GRID * GRID + 2);
        for i in 0..GRID {
            for j in 0..GRID {
                vertex_params.push((eta(i), omega(j)));
            }
        }
        let south = vertex_params.len();
        vertex_params.push((-FRAC_PI_2, 0.0));
        let north = vertex_params.len();
        vertex_params.push((FRAC_PI_2, 0.0));

        let mut triangles = Vec::with_capacity(2 * GRID * GRID);
        for i in 0..GRID - 1 {
            for j in 0..GRID {
                let c00 = (eta(i), omega(j));
                let c01 = (eta(i), omega(j + 1));
                let c10 = (eta(i + 1), omega(j));
                let c11 = (eta(i + 1), omega(j + 1));
                triangles.push(ParamTriangle {
                    vertices: [idx(i, j), idx(i, j + 1), idx(i + 1, j + 1)],
                    corners: [c00, c01, c11],
                });
                triangles.push(ParamTriangle {
                    vertices: [idx(i, j), idx(i + 1, j + 1), idx(i + 1, j)],
                    corners: [c00, c11, c10],
                });
            }
        }
        let top = GRID - 1;
        for j in 0..GRID {
            let mid = 0.5 * (omega(j) + omega(j + 1));
            triangles.push(ParamTriangle {
                vertices: [south, idx(0, j + 1), idx(0, j)],
                corners: [(-FRAC_PI_2, mid), (eta(0), omega(j + 1)), (eta(0), omega(j))],
            });
            triangles.push(ParamTriangle {
                vertices: [north, idx(top, j), idx(top, j + 1)],
                corners: [(FRAC_PI_2, mid), (eta(top), omega(j)), (eta(top), omega(j + 1))],
            });
        }
        ParamGrid {
            vertex_params,
            triangles,
        }
    })
}

/// Triangle mesh of a posed primitive.
#[derive(Clone, Debug)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

pub fn primitive_mesh(theta: &DsqParams) -> Mesh {
    let grid = param_grid();
    let rot = theta.pose.rotation_matrix();
    let t = theta.pose.translation_vector();
    Mesh {
        vertices: grid
            .vertex_params
            .iter()
            .map(|&(eta, omega)| surface_point(&theta.geometry, &rot, &t, eta, omega))
            .collect(),
        triangles: grid.triangles.iter().map(|t| t.vertices).collect(),
    }
}

/// Draws a sample plan: triangles of the deformed mesh are selected with
/// probability proportional to area, then a uniform barycentric point is
/// mapped back to surface parameters.
pub fn plan_samples<R: Rng + ?Sized>(g: &ShapeParams, count: usize, rng: &mut R) -> Result<SamplePlan> {
    if count < 4 {
        return Err(Error::InvalidArgument(format!("sample count must be at least 4, got {count}")));
    }
    let grid = param_grid();
    let verts: Vec<Vector3<f64>> = grid
        .vertex_params
        .iter()
        .map(|&(eta, omega)| deform_local(g, eta, omega))
        .collect();
    let mut cumulative = Vec::with_capacity(grid.triangles.len());
    let mut total = 0.0;
    for tri in &grid.triangles {
        let [i, j, k] = tri.vertices;
        total += 0.5 * (verts[j] - verts[i]).cross(&(verts[k] - verts[i])).norm();
        cumulative.push(total);
    }
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateMesh);
    }
    let params = (0..count)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let t = cumulative.partition_point(|&c| c <= u).min(grid.triangles.len() - 1);
            let r1 = rng.random::<f64>().sqrt();
            let r2 = rng.random::<f64>();
            let w = [1.0 - r1, r1 * (1.0 - r2), r1 * r2];
            let c = &grid.triangles[t].corners;
            (
                w[0] * c[0].0 + w[1] * c[1].0 + w[2] * c[2].0,
                w[0] * c[0].1 + w[1] * c[1].1 + w[2] * c[2].1,
            )
        })
        .collect();
    Ok(SamplePlan { params })
}

/// Area-weighted surface samples of a posed primitive.
pub fn sample_surface<R: Rng + ?Sized>(
    theta: &DsqParams,
    count: usize,
    source: usize,
    rng: &mut R,
) -> Result<SampledPrimitive> {
    let plan = plan_samples(&theta.geometry, count, rng)?;
    let points = plan.evaluate(
        &theta.geometry,
        &theta.pose.rotation_matrix(),
        &theta.pose.translation_vector(),
    );
    Ok(SampledPrimitive { points, source })
}
