//! Pointwise MLP backend: per-point coordinates plus fixed random Fourier
//! features are mapped to point features, and two independent heads map the
//! feature halves to membership logits.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Encoding;

/// Number of fixed random Fourier features (sine/cosine pairs).
pub const FOURIER_FEATURES: usize = 16;
pub const HIDDEN: usize = 64;
/// Scale of the initial logit-layer weights, so memberships start near
/// uniform as in the direct backend.
pub const LOGIT_INIT_SCALE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).unwrap();
        Self {
            weight: DMatrix::from_fn(outputs, inputs, |_, _| normal.sample(rng)),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }

    /// `W x + b` for a batch of column inputs.
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.weight * x;
        for mut col in y.column_iter_mut() {
            col += &self.bias;
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient.
    pub fn backward(&self, x: &DMatrix<f64>, g_out: &DMatrix<f64>, grad: &mut Dense) -> DMatrix<f64> {
        grad.weight += g_out * x.transpose();
        for col in g_out.column_iter() {
            grad.bias += col;
        }
        self.weight.transpose() * g_out
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.weight.as_slice());
        f(self.bias.as_slice());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.weight.as_mut_slice());
        f(self.bias.as_mut_slice());
    }
}

/// Three dense layers with tanh between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp3 {
    pub layers: [Dense; 3],
}

pub struct Mlp3Cache {
    inputs: [DMatrix<f64>; 3],
    hidden: [DMatrix<f64>; 2],
}

impl Mlp3 {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            layers: [
                Dense::new(inputs, hidden, rng),
                Dense::new(hidden, hidden, rng),
                Dense::new(hidden, outputs, rng),
            ],
        }
    }

    /// Scales the last layer, leaving the hidden layers as drawn.
    pub fn with_output_scale(mut self, scale: f64) -> Self {
        self.layers[2].weight *= scale;
        self.layers[2].bias *= scale;
        self
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: [
                self.layers[0].zeros_like(),
                self.layers[1].zeros_like(),
                self.layers[2].zeros_like(),
            ],
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Mlp3Cache) {
        let h1 = self.layers[0].forward(x).map(f64::tanh);
        let h2 = self.layers[1].forward(&h1).map(f64::tanh);
        let out = self.layers[2].forward(&h2);
        let cache = Mlp3Cache {
            inputs: [x.clone(), h1.clone(), h2.clone()],
            hidden: [h1, h2],
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &Mlp3Cache, g_out: &DMatrix<f64>, grad: &mut Mlp3) -> DMatrix<f64> {
        let g_h2 = self.layers[2].backward(&cache.inputs[2], g_out, &mut grad.layers[2]);
        let g_a2 = g_h2.zip_map(&cache.hidden[1], |g, h| g * (1.0 - h * h));
        let g_h1 = self.layers[1].backward(&cache.inputs[1], &g_a2, &mut grad.layers[1]);
        let g_a1 = g_h1.zip_map(&cache.hidden[0], |g, h| g * (1.0 - h * h));
        self.layers[0].backward(&cache.inputs[0], &g_a1, &mut grad.layers[0])
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder {
    /// Fixed frequencies (FOURIER_FEATURES/2 x 3); not trained.
    pub frequencies: DMatrix<f64>,
    pub trunk: Mlp3,
    pub ins_head: Mlp3,
    pub sem_head: Mlp3,
    pub feature_dim: usize,
}

pub struct MlpCache {
    trunk: Mlp3Cache,
    ins: Mlp3Cache,
    sem: Mlp3Cache,
}

impl MlpEncoder {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, parts: usize, semantics: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std::f64::consts::PI).unwrap();
        let inputs = 3 + FOURIER_FEATURES;
        Self {
            frequencies: DMatrix::from_fn(FOURIER_FEATURES / 2, 3, |_, _| normal.sample(rng)),
            trunk: Mlp3::new(inputs, HIDDEN, 2 * feature_dim, rng),
            ins_head: Mlp3::new(feature_dim, HIDDEN, parts, rng).with_output_scale(LOGIT_INIT_SCALE),
            sem_head: Mlp3::new(feature_dim, HIDDEN, semantics, rng).with_output_scale(LOGIT_INIT_SCALE),
            feature_dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            frequencies: self.frequencies.clone(),
            trunk: self.trunk.zeros_like(),
            ins_head: self.ins_head.zeros_like(),
            sem_head: self.sem_head.zeros_like(),
            feature_dim: self.feature_dim,
        }
    }

    pub fn input_features(&self, points: &[Vector3<f64>]) -> DMatrix<f64> {
        let half = FOURIER_FEATURES / 2;
        DMatrix::from_fn(3 + FOURIER_FEATURES, points.len(), |r, n| {
            let p = &points[n];
            if r < 3 {
                p[r]
            } else {
                let k = (r - 3) % half;
                let phase = self.frequencies[(k, 0)] * p.x + self.frequencies[(k, 1)] * p.y + self.frequencies[(k, 2)] * p.z;
                if r - 3 < half {
                    phase.sin()
                } else {
                    phase.cos()
                }
            }
        })
    }

    pub fn encode(&self, points: &[Vector3<f64>]) -> (Encoding, MlpCache) {
        let x = self.input_features(points);
        let (features, trunk) = self.trunk.forward(&x);
        let d = self.feature_dim;
        // contiguous channel split
        let f_ins = features.rows(0, d).into_owned();
        let f_sem = features.rows(d, d).into_owned();
        let (j_ins, ins) = self.ins_head.forward(&f_ins);
        let (j_sem, sem) = self.sem_head.forward(&f_sem);
        (
            Encoding {
                f_ins,
                f_sem,
                j_ins,
                j_sem,
            },
            MlpCache { trunk, ins, sem },
        )
    }

    pub fn backward(&self, cache: &MlpCache, g: &Encoding, grad: &mut MlpEncoder) {
        let g_f_ins = &g.f_ins + self.ins_head.backward(&cache.ins, &g.j_ins, &mut grad.ins_head);
        let g_f_sem = &g.f_sem + self.sem_head.backward(&cache.sem, &g.j_sem, &mut grad.sem_head);
        let d = self.feature_dim;
        let mut g_features = DMatrix::zeros(2 * d, g_f_ins.ncols());
        g_features.rows_mut(0, d).copy_from(&g_f_ins);
        g_features.rows_mut(d, d).copy_from(&g_f_sem);
        self.trunk.backward(&cache.trunk, &g_features, &mut grad.trunk);
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.trunk.visit(f);
        self.ins_head.visit(f);
        self.sem_head.visit(f);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.trunk.visit_mut(f);
        self.ins_head.visit_mut(f);
        self.sem_head.visit_mut(f);
    }
}
