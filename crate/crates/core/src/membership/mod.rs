//! Sparse latent membership pursuit.
//!
//! Membership logits `J` (parts x points) give two matrices: a column-wise
//! sparsemax of `J^T` weighs point features into part features, and a
//! column-wise softmax of `J` assigns points to parts.

pub mod mlp;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activations::{softmax_columns, softmax_vjp, sparsemax_columns, sparsemax_vjp};
use crate::decoders::DecoderWeights;

pub use mlp::MlpEncoder;

/// Problem dimensions: points `n`, instance slots `m`, semantics `s`,
/// feature channels `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub s: usize,
    pub d: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Point features and membership logits are free parameters.
    #[default]
    Direct,
    /// Features and logits come from pointwise MLPs over the coordinates.
    PointwiseMlp,
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" => Ok(Backend::Direct),
            "pointwise-mlp" | "mlp" => Ok(Backend::PointwiseMlp),
            other => Err(format!("unknown backend `{other}` (expected direct or pointwise-mlp)")),
        }
    }
}

/// How direct instance logits start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogitInit {
    /// Small Gaussian noise: near-uniform memberships everywhere.
    Gaussian,
    /// Distance falloff around farthest-point seeds, one seed per slot.
    #[default]
    Seeded,
}

impl std::str::FromStr for LogitInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian" => Ok(LogitInit::Gaussian),
            "seeded" => Ok(LogitInit::Seeded),
            other => Err(format!("unknown logit init `{other}` (expected gaussian or seeded)")),
        }
    }
}

/// Point features and membership logits of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    /// Instance pursuit point features, `d x n`.
    pub f_ins: DMatrix<f64>,
    /// Semantic pursuit point features, `d x n`.
    pub f_sem: DMatrix<f64>,
    /// Instance membership logits, `m x n`.
    pub j_ins: DMatrix<f64>,
    /// Semantic membership logits, `s x n`.
    pub j_sem: DMatrix<f64>,
}

impl Encoding {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            f_ins: DMatrix::zeros(dims.d, dims.n),
            f_sem: DMatrix::zeros(dims.d, dims.n),
            j_ins: DMatrix::zeros(dims.m, dims.n),
            j_sem: DMatrix::zeros(dims.s, dims.n),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n: self.f_ins.ncols(),
            m: self.j_ins.nrows(),
            s: self.j_sem.nrows(),
            d: self.f_ins.nrows(),
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.f_ins, &self.f_sem, &self.j_ins, &self.j_sem]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.f_ins.as_slice());
        f(self.f_sem.as_slice());
        f(self.j_ins.as_slice());
        f(self.j_sem.as_slice());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.f_ins.as_mut_slice());
        f(self.f_sem.as_mut_slice());
        f(self.j_ins.as_mut_slice());
        f(self.j_sem.as_mut_slice());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Direct(Encoding),
    PointwiseMlp(MlpEncoder),
}

pub enum EncoderCache {
    Direct,
    PointwiseMlp(mlp::MlpCache),
}

impl Encoder {
    pub fn backend(&self) -> Backend {
        match self {
            Encoder::Direct(_) => Backend::Direct,
            Encoder::PointwiseMlp(_) => Backend::PointwiseMlp,
        }
    }

    pub fn encode(&self, points: &[Vector3<f64>]) -> (Encoding, EncoderCache) {
        match self {
            Encoder::Direct(enc) => (enc.clone(), EncoderCache::Direct),
            Encoder::PointwiseMlp(mlp) => {
                let (enc, cache) = mlp.encode(points);
                (enc, EncoderCache::PointwiseMlp(cache))
            }
        }
    }

    /// Accumulates parameter gradients given the gradient of the encoding.
    pub fn backward(&self, cache: &EncoderCache, g: &Encoding, grad: &mut Encoder) {
        match (self, cache, grad) {
            (Encoder::Direct(_), EncoderCache::Direct, Encoder::Direct(acc)) => {
                acc.f_ins += &g.f_ins;
                acc.f_sem += &g.f_sem;
                acc.j_ins += &g.j_ins;
                acc.j_sem += &g.j_sem;
            }
            (Encoder::PointwiseMlp(mlp), EncoderCache::PointwiseMlp(c), Encoder::PointwiseMlp(acc)) => {
                mlp.backward(c, g, acc)
            }
            _ => panic!("encoder, cache and gradient backends differ"),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Encoder::Direct(enc) => Encoder::Direct(Encoding::zeros(enc.dims())),
            Encoder::PointwiseMlp(mlp) => Encoder::PointwiseMlp(mlp.zeros_like()),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        match self {
            Encoder::Direct(enc) => enc.visit(f),
            Encoder::PointwiseMlp(mlp) => mlp.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        match self {
            Encoder::Direct(enc) => enc.visit_mut(f),
            Encoder::PointwiseMlp(mlp) => mlp.visit_mut(f),
        }
    }
}

/// Parameter groups, used for freezing decoder heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    SizeHead,
    ShapeHead,
    TaperHead,
    BendHead,
    PoseHead,
}

/// All free quantities of one fit. The same type holds gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct FitState {
    pub encoder: Encoder,
    pub decoder: DecoderWeights,
}

impl FitState {
    /// Initial state: logits near zero so memberships start near uniform,
    /// features with a small spread.
    pub fn init<R: Rng + ?Sized>(dims: Dims, backend: Backend, rng: &mut R) -> Self {
        let encoder = match backend {
            Backend::Direct => {
                let feat = Normal::new(0.0, 0.1).unwrap();
                let logit = Normal::new(0.0, 0.01).unwrap();
                Encoder::Direct(Encoding {
                    f_ins: DMatrix::from_fn(dims.d, dims.n, |_, _| feat.sample(rng)),
                    f_sem: DMatrix::from_fn(dims.d, dims.n, |_, _| feat.sample(rng)),
                    j_ins: DMatrix::from_fn(dims.m, dims.n, |_, _| logit.sample(rng)),
                    j_sem: DMatrix::from_fn(dims.s, dims.n, |_, _| logit.sample(rng)),
                })
            }
            Backend::PointwiseMlp => Encoder::PointwiseMlp(MlpEncoder::new(dims.d, dims.m, dims.s, rng)),
        };
        Self {
            encoder,
            decoder: DecoderWeights::init(dims.d, rng),
        }
    }

    /// Like [`FitState::init`], with direct instance logits replaced by
    /// seeded ones when asked. The pointwise MLP ignores `logit_init`.
    pub fn init_with<R: Rng + ?Sized>(
        points: &[Vector3<f64>],
        dims: Dims,
        backend: Backend,
        logit_init: LogitInit,
        rng: &mut R,
    ) -> Self {
        let mut state = Self::init(dims, backend, rng);
        if let (Encoder::Direct(enc), LogitInit::Seeded) = (&mut state.encoder, logit_init) {
            if !points.is_empty() {
                let start = rng.random_range(0..points.len());
                seed_logits(&mut enc.j_ins, points, start);
            }
        }
        state
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(ParamGroup, &[f64])) {
        self.encoder.visit(&mut |s| f(ParamGroup::Encoder, s));
        self.decoder.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut [f64])) {
        self.encoder.visit_mut(&mut |s| f(ParamGroup::Encoder, s));
        self.decoder.visit_mut(f);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, s| out.extend_from_slice(s));
        out
    }

    /// Group of every flat coordinate, aligned with [`FitState::to_flat`].
    pub fn flat_groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        self.visit(&mut |g, s| out.extend(std::iter::repeat_n(g, s.len())));
        out
    }

    pub fn load_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, s| {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        });
        assert_eq!(offset, values.len(), "flat parameter length mismatch");
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| n += s.len());
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Weight and assignment matrices plus the aggregated part features.
#[derive(Clone, Debug, PartialEq)]
pub struct MembershipSet {
    /// `n x m`, columns on the simplex (possibly sparse).
    pub w_ins: DMatrix<f64>,
    /// `n x s`.
    pub w_sem: DMatrix<f64>,
    /// `m x n`, full-support columns.
    pub p_ins: DMatrix<f64>,
    /// `s x n`.
    pub p_sem: DMatrix<f64>,
    /// Pose features `d x m`.
    pub f_pos: DMatrix<f64>,
    /// Instance-level geometric features `d x m`.
    pub f_geo_i: DMatrix<f64>,
    /// Semantic-level geometric features `d x s`.
    pub f_geo_s: DMatrix<f64>,
}

/// Falloff width of seeded logits, in normalized units.
pub const SEED_WIDTH: f64 = 0.1;

/// Overwrites each row of `j` with `-|x_n - c_row|^2 / (2 w^2)`, seeds picked
/// by farthest-point sampling from `start`.
fn seed_logits(j: &mut DMatrix<f64>, points: &[Vector3<f64>], start: usize) {
    let inv = 1.0 / (2.0 * SEED_WIDTH.powi(2));
    let mut nearest = vec![f64::INFINITY; points.len()];
    let mut seed = start;
    for row in 0..j.nrows() {
        let c = points[seed];
        for (n, x) in points.iter().enumerate() {
            let d2 = (x - c).norm_squared();
            j[(row, n)] = -d2 * inv;
            nearest[n] = nearest[n].min(d2);
        }
        seed = nearest
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(n, _)| n);
    }
}

pub fn build_memberships(enc: &Encoding) -> MembershipSet {
    let dims = enc.dims();
    MembershipSet {
        w_ins: sparsemax_columns(&enc.j_ins.transpose()),
        w_sem: sparsemax_columns(&enc.j_sem.transpose()),
        p_ins: softmax_columns(&enc.j_ins, 1.0).expect("unit temperature"),
        p_sem: softmax_columns(&enc.j_sem, 1.0).expect("unit temperature"),
        f_pos: DMatrix::zeros(dims.d, dims.m),
        f_geo_i: DMatrix::zeros(dims.d, dims.m),
        f_geo_s: DMatrix::zeros(dims.d, dims.s),
    }
}

pub fn aggregate_features(enc: &Encoding, ms: &mut MembershipSet) {
    ms.f_pos = &enc.f_ins * &ms.w_ins;
    ms.f_geo_i = &enc.f_sem * &ms.w_ins;
    ms.f_geo_s = &enc.f_sem * &ms.w_sem;
}

/// Memberships and features in one call.
pub fn memberships(enc: &Encoding) -> MembershipSet {
    let mut ms = build_memberships(enc);
    aggregate_features(enc, &mut ms);
    ms
}

/// Gradients with respect to the fields of a [`MembershipSet`].
#[derive(Clone, Debug)]
pub struct MembershipGrad {
    pub w_ins: DMatrix<f64>,
    pub w_sem: DMatrix<f64>,
    pub p_ins: DMatrix<f64>,
    pub p_sem: DMatrix<f64>,
    pub f_pos: DMatrix<f64>,
    pub f_geo_i: DMatrix<f64>,
    pub f_geo_s: DMatrix<f64>,
}

impl MembershipGrad {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            w_ins: DMatrix::zeros(dims.n, dims.m),
            w_sem: DMatrix::zeros(dims.n, dims.s),
            p_ins: DMatrix::zeros(dims.m, dims.n),
            p_sem: DMatrix::zeros(dims.s, dims.n),
            f_pos: DMatrix::zeros(dims.d, dims.m),
            f_geo_i: DMatrix::zeros(dims.d, dims.m),
            f_geo_s: DMatrix::zeros(dims.d, dims.s),
        }
    }
}

/// Backpropagates membership gradients to the encoding.
pub fn membership_backward(enc: &Encoding, ms: &MembershipSet, g: &MembershipGrad) -> Encoding {
    let mut g_w_ins = g.w_ins.clone();
    let mut g_w_sem = g.w_sem.clone();
    g_w_ins += enc.f_ins.transpose() * &g.f_pos;
    g_w_ins += enc.f_sem.transpose() * &g.f_geo_i;
    g_w_sem += enc.f_sem.transpose() * &g.f_geo_s;

    let f_ins = &g.f_pos * ms.w_ins.transpose();
    let f_sem = &g.f_geo_i * ms.w_ins.transpose() + &g.f_geo_s * ms.w_sem.transpose();

    let j_ins = logits_backward(&ms.w_ins, &g_w_ins, &ms.p_ins, &g.p_ins);
    let j_sem = logits_backward(&ms.w_sem, &g_w_sem, &ms.p_sem, &g.p_sem);
    Encoding {
        f_ins,
        f_sem,
        j_ins,
        j_sem,
    }
}

fn logits_backward(w: &DMatrix<f64>, g_w: &DMatrix<f64>, p: &DMatrix<f64>, g_p: &DMatrix<f64>) -> DMatrix<f64> {
    let (parts, points) = (p.nrows(), p.ncols());
    let mut g_j = DMatrix::zeros(parts, points);
    let mut buf = vec![0.0; points];
    for m in 0..parts {
        sparsemax_vjp(w.column(m).as_slice(), g_w.column(m).as_slice(), &mut buf);
        for (n, v) in buf.iter().enumerate() {
            g_j[(m, n)] += v;
        }
    }
    let mut col = vec![0.0; parts];
    for n in 0..points {
        softmax_vjp(p.column(n).as_slice(), g_p.column(n).as_slice(), &mut col);
        for (m, v) in col.iter().enumerate() {
            g_j[(m, n)] += v;
        }
    }
    g_j
}

/// Column argmax of an assignment matrix, lowest index on ties.
pub fn column_labels(p: &DMatrix<f64>) -> Vec<usize> {
    p.column_iter()
        .map(|c| crate::activations::argmax(c.as_slice()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_encoding(dims: Dims, seed: u64, logit_scale: f64) -> Encoding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = move || rng.random::<f64>() - 0.5;
        Encoding {
            f_ins: DMatrix::from_fn(dims.d, dims.n, |_, _| r()),
            f_sem: DMatrix::from_fn(dims.d, dims.n, |_, _| r()),
            j_ins: DMatrix::from_fn(dims.m, dims.n, |_, _| r() * logit_scale),
            j_sem: DMatrix::from_fn(dims.s, dims.n, |_, _| r() * logit_scale),
        }
    }

    #[test]
    fn zero_logits_give_uniform_matrices() {
        let enc = Encoding::zeros(Dims { n: 3, m: 2, s: 1, d: 2 });
        let ms = build_memberships(&enc);
        assert!(ms.p_ins.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(ms.w_ins.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn large_gap_gives_one_hot_weight_column() {
        let mut enc = Encoding::zeros(Dims { n: 4, m: 2, s: 1, d: 2 });
        enc.j_ins[(1, 2)] = 1.5;
        let ms = build_memberships(&enc);
        assert_eq!(ms.w_ins.column(1).as_slice(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn point_permutation_is_equivariant() {
        let dims = Dims { n: 6, m: 3, s: 2, d: 4 };
        let enc = random_encoding(dims, 1, 3.0);
        let perm = [4, 2, 0, 5, 1, 3];
        let mut permuted = enc.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted.j_ins.set_column(dst, &enc.j_ins.column(src));
            permuted.f_ins.set_column(dst, &enc.f_ins.column(src));
        }
        let a = memberships(&enc);
        let b = memberships(&permuted);
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(a.p_ins.column(src), b.p_ins.column(dst));
            assert_eq!(a.w_ins.row(src), b.w_ins.row(dst));
        }
    }

    #[test]
    fn aggregate_vertex_and_mean_cases() {
        let dims = Dims { n: 4, m: 2, s: 1, d: 3 };
        let mut enc = random_encoding(dims, 2, 0.0);
        enc.j_ins.fill(0.0);
        enc.j_ins[(0, 1)] = 5.0;
        let ms = memberships(&enc);
        assert_eq!(ms.f_pos.column(0), enc.f_ins.column(1));
        let mean = enc.f_ins.column_mean();
        assert!((ms.f_pos.column(1) - mean).norm() < 1e-15);
    }

    #[test]
    fn part_features_stay_in_feature_envelope() {
        let dims = Dims { n: 40, m: 5, s: 3, d: 6 };
        for seed in 0..20 {
            let enc = random_encoding(dims, seed, 4.0);
            let ms = memberships(&enc);
            for r in 0..dims.d {
                let row = enc.f_sem.row(r);
                let (lo, hi) = (row.min(), row.max());
                for v in ms.f_geo_i.row(r).iter().chain(ms.f_geo_s.row(r).iter()) {
                    assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn column_sums_and_sparsity_monotonicity() {
        let dims = Dims { n: 50, m: 4, s: 2, d: 3 };
        let enc = random_encoding(dims, 3, 1.0);
        let ms = build_memberships(&enc);
        for c in ms.w_ins.column_iter().chain(ms.w_sem.column_iter()) {
            assert!((c.sum() - 1.0).abs() < 1e-9);
        }
        for c in ms.p_ins.column_iter().chain(ms.p_sem.column_iter()) {
            assert!((c.sum() - 1.0).abs() < 1e-9);
        }
        let support = |w: &DMatrix<f64>| -> Vec<usize> {
            w.column_iter().map(|c| c.iter().filter(|&&v| v > 0.0).count()).collect()
        };
        let base = support(&ms.w_ins);
        for scale in [1.5, 3.0, 10.0] {
            let mut scaled = enc.clone();
            scaled.j_ins *= scale;
            let s = support(&build_memberships(&scaled).w_ins);
            assert!(s.iter().zip(&base).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn labels_invariant_to_column_shift() {
        let dims = Dims { n: 20, m: 4, s: 2, d: 3 };
        let enc = random_encoding(dims, 4, 2.0);
        let before = column_labels(&build_memberships(&enc).p_ins);
        let mut shifted = enc.clone();
        for (n, mut col) in shifted.j_ins.column_iter_mut().enumerate() {
            col.add_scalar_mut(n as f64 * 0.37 - 2.0);
        }
        assert_eq!(before, column_labels(&build_memberships(&shifted).p_ins));
    }

    #[test]
    fn geometric_features_share_semantic_source() {
        let dims = Dims { n: 10, m: 3, s: 2, d: 4 };
        let mut enc = random_encoding(dims, 5, 1.0);
        enc.f_sem.fill(0.0);
        let ms = memberships(&enc);
        assert!(ms.f_geo_i.iter().all(|&v| v == 0.0));
        assert!(ms.f_geo_s.iter().all(|&v| v == 0.0));
        assert!(ms.f_pos.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn seeded_logits_peak_at_spread_seeds() {
        let points: Vec<Vector3<f64>> = (0..200)
            .map(|i| {
                let a = i as f64 * 0.1;
                Vector3::new(a.cos(), a.sin(), (i as f64 / 200.0) - 0.5)
            })
            .collect();
        let dims = Dims { n: 200, m: 5, s: 2, d: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let state = FitState::init_with(&points, dims, Backend::Direct, LogitInit::Seeded, &mut rng);
        let Encoder::Direct(enc) = &state.encoder else { unreachable!() };
        let mut peaks: Vec<usize> = (0..5).map(|m| enc.j_ins.row(m).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0).collect();
        for &p in &peaks {
            assert!(enc.j_ins.column(p).iter().any(|&v| v == 0.0));
        }
        peaks.sort_unstable();
        peaks.dedup();
        assert_eq!(peaks.len(), 5);
        assert!(enc.j_sem.amax() < 0.1, "semantic logits stay near zero");
    }

    /// Scalar probe `<G, memberships(enc)>` for random G, checked against
    /// central differences.
    #[test]
    fn backward_matches_finite_differences() {
        let dims = Dims { n: 7, m: 3, s: 2, d: 4 };
        let enc = random_encoding(dims, 6, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut r = || rng.random::<f64>() - 0.5;
        let g = MembershipGrad {
            w_ins: DMatrix::from_fn(dims.n, dims.m, |_, _| r()),
            w_sem: DMatrix::from_fn(dims.n, dims.s, |_, _| r()),
            p_ins: DMatrix::from_fn(dims.m, dims.n, |_, _| r()),
            p_sem: DMatrix::from_fn(dims.s, dims.n, |_, _| r()),
            f_pos: DMatrix::from_fn(dims.d, dims.m, |_, _| r()),
            f_geo_i: DMatrix::from_fn(dims.d, dims.m, |_, _| r()),
            f_geo_s: DMatrix::from_fn(dims.d, dims.s, |_, _| r()),
        };
        let probe = |e: &Encoding| {
            let ms = memberships(e);
            ms.w_ins.dot(&g.w_ins)
                + ms.w_sem.dot(&g.w_sem)
                + ms.p_ins.dot(&g.p_ins)
                + ms.p_sem.dot(&g.p_sem)
                + ms.f_pos.dot(&g.f_pos)
                + ms.f_geo_i.dot(&g.f_geo_i)
                + ms.f_geo_s.dot(&g.f_geo_s)
        };
        let analytic = membership_backward(&enc, &memberships(&enc), &g);
        let h = 1e-6;
        let mut flat_a = Vec::new();
        analytic.visit(&mut |s| flat_a.extend_from_slice(s));
        let mut base = Vec::new();
        enc.visit(&mut |s| base.extend_from_slice(s));
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut e = enc.clone();
                let mut off = 0;
                e.visit_mut(&mut |s| {
                    if i >= off && i < off + s.len() {
                        s[i - off] += delta;
                    }
                    off += s.len();
                });
                probe(&e)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - flat_a[i]).abs() < 1e-7, "coord {i}: fd {fd} vs {}", flat_a[i]);
        }
    }
}
