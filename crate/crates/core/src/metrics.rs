//! Reconstruction and segmentation metrics.
//!
//! Chamfer distance uses squared nearest-neighbour distances averaged over
//! both directions. EMD is the mean Euclidean distance of the optimal
//! one-to-one matching, exact up to [`EMD_EXACT_LIMIT`] points and
//! approximated by entropic optimal transport above it.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;

use crate::assignment::{assign, assign_rows};
use crate::error::{Error, Result};

/// Largest cloud size for which [`emd`] solves the assignment exactly.
pub const EMD_EXACT_LIMIT: usize = 2048;

/// Points with a segment label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    pub points: Vec<Vector3<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledCloud {
    pub fn new(points: Vec<Vector3<f64>>, labels: Vec<usize>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::SizeMismatch {
                left: points.len(),
                right: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("a labeled cloud needs at least one point".into()));
        }
        Ok(Self { points, labels })
    }
}

fn nearest_sq(p: &Vector3<f64>, set: &[Vector3<f64>]) -> f64 {
    set.iter().fold(f64::INFINITY, |m, q| m.min((p - q).norm_squared()))
}

fn one_way(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.par_iter().map(|p| nearest_sq(p, b)).sum::<f64>() / a.len() as f64
}

/// Symmetric Chamfer distance with squared distances.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("chamfer distance of an empty point set".into()));
    }
    Ok(0.5 * (one_way(a, b) + one_way(b, a)))
}

fn check_equal(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("EMD of empty point sets".into()));
    }
    Ok(())
}

/// Earth Mover's Distance between equal-size sets.
pub fn emd(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.len() <= EMD_EXACT_LIMIT {
        emd_exact(a, b)
    } else {
        emd_sinkhorn(a, b, &SinkhornOptions::default())
    }
}

/// Exact EMD by optimal assignment, `O(n^3)`.
pub fn emd_exact(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    check_equal(a, b)?;
    let n = a.len();
    let cost = DMatrix::from_fn(n, n, |i, j| (a[i] - b[j]).norm());
    let sol = assign_rows(n, n, |i, j| cost[(i, j)]);
    Ok(sol.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum::<f64>() / n as f64)
}

/// Entropic regularization schedule for [`emd_sinkhorn`].
#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornOptions {
    /// Final regularization relative to the mean pairwise cost.
    pub epsilon: f64,
    /// Starting regularization relative to the mean pairwise cost.
    pub epsilon_start: f64,
    /// Factor applied to epsilon after each stage.
    pub decay: f64,
    pub iterations_per_stage: usize,
    /// Stop a stage early once the marginal error drops below this.
    pub tolerance: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            epsilon_start: 1.0,
            decay: 0.5,
            iterations_per_stage: 100,
            tolerance: 1e-4,
        }
    }
}

/// `log(sum_j exp(row_j + shift_j))`.
fn log_sum_exp(row: &[f64], shift: &[f64]) -> f64 {
    let m = row.iter().zip(shift).map(|(r, s)| r + s).fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().zip(shift).map(|(r, s)| (r + s - m).exp()).sum::<f64>().ln()
}

/// Half a Sinkhorn iteration: the potential on one side from the other.
/// `kernel` holds `-cost / eps` with one contiguous row per output entry.
fn sinkhorn_update(kernel: &[f64], n: usize, other: &[f64], eps: f64, log_w: f64) -> Vec<f64> {
    let shift: Vec<f64> = other.iter().map(|v| v / eps + log_w).collect();
    kernel
        .par_chunks(n)
        .map(|row| -eps * log_sum_exp(row, &shift))
        .collect()
}

/// Approximate EMD by log-domain Sinkhorn iterations with epsilon scaling.
/// Returns the transport cost of the final plan with uniform marginals.
pub fn emd_sinkhorn(a: &[Vector3<f64>], b: &[Vector3<f64>], opts: &SinkhornOptions) -> Result<f64> {
    check_equal(a, b)?;
    let n = a.len();
    // row-major cost and its transpose, so both half-steps scan contiguously
    let cost: Vec<f64> = a.iter().flat_map(|p| b.iter().map(move |q| (p - q).norm())).collect();
    let cost_t: Vec<f64> = b.iter().flat_map(|q| a.iter().map(move |p| (p - q).norm())).collect();
    let scale = cost.iter().sum::<f64>() / cost.len() as f64;
    if scale == 0.0 {
        return Ok(0.0);
    }
    let log_w = -(n as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut eps = opts.epsilon_start * scale;
    let final_eps = opts.epsilon * scale;
    let mut kernel = vec![0.0; n * n];
    let mut kernel_t = vec![0.0; n * n];
    loop {
        kernel.par_iter_mut().zip(&cost).for_each(|(k, c)| *k = -c / eps);
        kernel_t.par_iter_mut().zip(&cost_t).for_each(|(k, c)| *k = -c / eps);
        for it in 1..=opts.iterations_per_stage {
            f = sinkhorn_update(&kernel, n, &g, eps, log_w);
            g = sinkhorn_update(&kernel_t, n, &f, eps, log_w);
            if it % 10 == 0 || it == opts.iterations_per_stage {
                // columns are exact after the g update; measure the rows
                let shift: Vec<f64> = g.iter().map(|v| v / eps + log_w).collect();
                let err: f64 = kernel
                    .par_chunks(n)
                    .zip(&f)
                    .map(|(row, fi)| {
                        let mass = (fi / eps + log_w + log_sum_exp(row, &shift)).exp();
                        (mass - 1.0 / n as f64).abs()
                    })
                    .sum();
                if err < opts.tolerance {
                    break;
                }
            }
        }
        if eps <= final_eps {
            break;
        }
        eps = (eps * opts.decay).max(final_eps);
    }
    let total: f64 = kernel
        .par_chunks(n)
        .zip(cost.par_chunks(n))
        .zip(&f)
        .map(|((row, costs), fi)| {
            row.iter()
                .zip(costs)
                .zip(&g)
                .map(|((k, c), gj)| (k + (fi + gj) / eps + 2.0 * log_w).exp() * c)
                .sum::<f64>()
        })
        .sum();
    Ok(total)
}

/// Maps arbitrary label ids to `0..k` in increasing id order.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let index: BTreeMap<usize, usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    (labels.iter().map(|l| index[l]).collect(), index.len())
}

fn contingency(pred: &[usize], gt: &[usize]) -> Result<(DMatrix<f64>, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::SizeMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("segmentation metrics need at least one point".into()));
    }
    let (p, kp) = compact(pred);
    let (g, kg) = compact(gt);
    let mut table = DMatrix::zeros(kg, kp);
    for (a, b) in g.iter().zip(&p) {
        table[(*a, *b)] += 1.0;
    }
    Ok((table, kg, kp))
}

/// Mean IoU over ground-truth segments after the one-to-one matching of
/// predicted and ground-truth segments that maximizes total IoU. Unmatched
/// ground-truth segments score zero.
pub fn miou(pred: &[usize], gt: &[usize]) -> Result<f64> {
    let (table, kg, kp) = contingency(pred, gt)?;
    let gt_sizes: Vec<f64> = table.row_iter().map(|r| r.sum()).collect();
    let pred_sizes: Vec<f64> = table.column_iter().map(|c| c.sum()).collect();
    let iou = DMatrix::from_fn(kg, kp, |g, p| {
        let inter = table[(g, p)];
        inter / (gt_sizes[g] + pred_sizes[p] - inter)
    });
    let pairs = assign(kg, kp, |g, p| -iou[(g, p)]);
    Ok(pairs.iter().map(|&(g, p)| iou[(g, p)]).sum::<f64>() / kg as f64)
}

/// [`miou`] on labeled clouds with matching point order.
pub fn miou_clouds(pred: &LabeledCloud, gt: &LabeledCloud) -> Result<f64> {
    miou(&pred.labels, &gt.labels)
}

fn entropy(counts: impl Iterator<Item = f64>, total: f64) -> f64 {
    counts.filter(|&c| c > 0.0).map(|c| -(c / total) * (c / total).ln()).sum()
}

/// Mutual information normalized by the arithmetic mean of the entropies.
/// Two single-cluster labelings score 1.
pub fn nmi(pred: &[usize], gt: &[usize]) -> Result<f64> {
    let (table, _, _) = contingency(pred, gt)?;
    let total = pred.len() as f64;
    let rows: Vec<f64> = table.row_iter().map(|r| r.sum()).collect();
    let cols: Vec<f64> = table.column_iter().map(|c| c.sum()).collect();
    let h_gt = entropy(rows.iter().copied(), total);
    let h_pred = entropy(cols.iter().copied(), total);
    if h_gt == 0.0 && h_pred == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for g in 0..rows.len() {
        for p in 0..cols.len() {
            let c = table[(g, p)];
            if c > 0.0 {
                mi += c / total * (c * total / (rows[g] * cols[p])).ln();
            }
        }
    }
    Ok((mi / (0.5 * (h_gt + h_pred))).clamp(0.0, 1.0))
}

/// Davies-Bouldin index. Centroid distances are floored at `1e-12`.
pub fn dbi(points: &[Vector3<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::SizeMismatch {
            left: points.len(),
            right: labels.len(),
        });
    }
    let (ids, k) = compact(labels);
    if k < 2 {
        return Err(Error::InvalidArgument(format!("Davies-Bouldin index needs at least 2 clusters, got {k}")));
    }
    let mut centroid = vec![Vector3::zeros(); k];
    let mut count = vec![0.0; k];
    for (p, &c) in points.iter().zip(&ids) {
        centroid[c] += p;
        count[c] += 1.0;
    }
    for c in 0..k {
        centroid[c] /= count[c];
    }
    let mut spread = vec![0.0; k];
    for (p, &c) in points.iter().zip(&ids) {
        spread[c] += (p - centroid[c]).norm();
    }
    for c in 0..k {
        spread[c] /= count[c];
    }
    let worst: f64 = (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| (spread[i] + spread[j]) / (centroid[i] - centroid[j]).norm().max(1e-12))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(worst / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect()
    }

    #[test]
    fn chamfer_examples() {
        let a = [Vector3::zeros()];
        let b = [Vector3::new(0.3, 0.0, 0.0)];
        assert!((chamfer(&a, &b).unwrap() - 0.09).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = cloud(64, &mut rng);
        let y = cloud(64, &mut rng);
        assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
        let mut oracle = 0.0;
        for p in &x {
            let mut best = f64::INFINITY;
            for q in &y {
                let d = (p - q).norm_squared();
                if d < best {
                    best = d;
                }
            }
            oracle += best / 128.0;
        }
        for q in &y {
            let mut best = f64::INFINITY;
            for p in &x {
                best = best.min((p - q).norm_squared());
            }
            oracle += best / 128.0;
        }
        assert!((chamfer(&x, &y).unwrap() - oracle).abs() < 1e-12);
        assert!(chamfer(&[], &y).is_err());
    }

    #[test]
    fn emd_picks_cheaper_matching() {
        let a = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let b = [Vector3::new(1.0, 0.1, 0.0), Vector3::new(0.0, 0.1, 0.0)];
        assert!((emd(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(emd(&a, &b[..1]), Err(Error::SizeMismatch { .. })));
        assert_eq!(emd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn sinkhorn_close_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = cloud(128, &mut rng);
        let b = cloud(128, &mut rng);
        let exact = emd_exact(&a, &b).unwrap();
        let approx = emd_sinkhorn(&a, &b, &SinkhornOptions::default()).unwrap();
        assert!((approx - exact).abs() / exact < 0.05, "{approx} vs {exact}");
    }

    #[test]
    fn miou_examples() {
        let gt: Vec<usize> = (0..20).map(|i| i / 10).collect();
        assert_eq!(miou(&gt, &gt).unwrap(), 1.0);
        let permuted: Vec<usize> = gt.iter().map(|l| 7 - l).collect();
        assert_eq!(miou(&permuted, &gt).unwrap(), 1.0);
        let split: Vec<usize> = (0..20).map(|i| if i < 10 { 0 } else if i < 15 { 1 } else { 2 }).collect();
        assert!((miou(&split, &gt).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn nmi_examples() {
        let a: Vec<usize> = (0..30).map(|i| i % 3).collect();
        assert!((nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[4, 4, 4], &[1, 1, 1]).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..4)).collect();
        let y: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..4)).collect();
        assert!(nmi(&x, &y).unwrap() < 0.05);
    }

    #[test]
    fn dbi_examples() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let jitter = 1e-4 * i as f64;
            pts.push(Vector3::new(jitter, 0.0, 0.0));
            labels.push(0);
            pts.push(Vector3::new(100.0 + jitter, 0.0, 0.0));
            labels.push(1);
        }
        assert!(dbi(&pts, &labels).unwrap() < 1e-5);
        let same: Vec<Vector3<f64>> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let doubled: Vec<Vector3<f64>> = same.iter().chain(&same).copied().collect();
        let l: Vec<usize> = (0..20).map(|i| i / 10).collect();
        assert!(dbi(&doubled, &l).unwrap() > 1e9);
        assert!(dbi(&same, &[0; 10]).is_err());
    }

    proptest! {
        #[test]
        fn relabeling_invariance(seed in any::<u64>(), n in 1usize..60, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..k + 1)).collect();
            let relabel: Vec<usize> = a.iter().map(|l| 3 * (k - l) + 11).collect();
            prop_assert!((miou(&a, &b).unwrap() - miou(&relabel, &b).unwrap()).abs() < 1e-12);
            prop_assert!((nmi(&a, &b).unwrap() - nmi(&relabel, &b).unwrap()).abs() < 1e-12);
            let m = miou(&a, &b).unwrap();
            let v = nmi(&a, &b).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn distances_are_symmetric(seed in any::<u64>(), n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(n, &mut rng);
            let b = cloud(n, &mut rng);
            prop_assert!((chamfer(&a, &b).unwrap() - chamfer(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((emd(&a, &b).unwrap() - emd(&b, &a).unwrap()).abs() < 1e-12);
            let mut shuffled = a.clone();
            shuffled.reverse();
            prop_assert!((chamfer(&shuffled, &b).unwrap() - chamfer(&a, &b).unwrap()).abs() < 1e-12);
            prop_assert!(emd(&a, &shuffled).unwrap() < 1e-12);
        }
    }
}
