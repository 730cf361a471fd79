//! A labeled synthetic table: one top slab on four identical legs.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Table dimensions, in the units of the generated cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub top: [f64; 3],
    pub leg_width: f64,
    pub leg_height: f64,
    /// Inset of the leg centres from the slab edges.
    pub inset: f64,
}

impl Default for TableSpec {
    fn default() -> Self {
        Self {
            top: [1.0, 0.6, 0.06],
            leg_width: 0.06,
            leg_height: 0.6,
            inset: 0.08,
        }
    }
}

/// Points with instance labels (0 top, 1 to 4 legs) and semantic labels
/// (0 top, 1 legs).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledShape {
    pub points: Vec<Vector3<f64>>,
    pub instance_labels: Vec<usize>,
    pub semantic_labels: Vec<usize>,
}

struct Face {
    centre: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    area: f64,
    part: usize,
}

/// Faces of an axis-aligned box, omitting the top face when `open_top`.
fn box_faces(centre: Vector3<f64>, half: Vector3<f64>, part: usize, open_top: bool, out: &mut Vec<Face>) {
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            if open_top && axis == 2 && sign > 0.0 {
                continue;
            }
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            let mut offset = Vector3::zeros();
            offset[axis] = sign * half[axis];
            let mut u = Vector3::zeros();
            u[a] = half[a];
            let mut v = Vector3::zeros();
            v[b] = half[b];
            out.push(Face {
                centre: centre + offset,
                u,
                v,
                area: 4.0 * half[a] * half[b],
                part,
            });
        }
    }
}

/// Area-uniform surface samples of a table, with the hidden leg tops left
/// out. Deterministic per seed.
pub fn table(spec: &TableSpec, n: usize, seed: u64) -> LabeledShape {
    let mut faces = Vec::new();
    let top_half = Vector3::from(spec.top) / 2.0;
    let top_centre = Vector3::new(0.0, 0.0, spec.leg_height + top_half.z);
    box_faces(top_centre, top_half, 0, false, &mut faces);
    let leg_half = Vector3::new(spec.leg_width / 2.0, spec.leg_width / 2.0, spec.leg_height / 2.0);
    let (cx, cy) = (top_half.x - spec.inset, top_half.y - spec.inset);
    for (i, (sx, sy)) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)].into_iter().enumerate() {
        let centre = Vector3::new(sx * cx, sy * cy, leg_half.z);
        box_faces(centre, leg_half, i + 1, true, &mut faces);
    }
    let total: f64 = faces.iter().map(|f| f.area).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = LabeledShape {
        points: Vec::with_capacity(n),
        instance_labels: Vec::with_capacity(n),
        semantic_labels: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let mut pick = rng.random::<f64>() * total;
        let face = faces
            .iter()
            .find(|f| {
                pick -= f.area;
                pick <= 0.0
            })
            .unwrap_or(&faces[faces.len() - 1]);
        let (s, t): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        shape.points.push(face.centre + face.u * s + face.v * t);
        shape.instance_labels.push(face.part);
        shape.semantic_labels.push(usize::from(face.part > 0));
    }
    shape
}

/// The default table with `n` points.
pub fn demo_table(n: usize, seed: u64) -> LabeledShape {
    table(&TableSpec::default(), n, seed)
}
