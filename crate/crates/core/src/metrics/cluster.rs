use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::euclidean;
use crate::safety::SafetyLabel;

/// Sub-cluster counts averaged over by [`clustering_metrics`].
pub const DEFAULT_N_KM: [usize; 4] = [3, 4, 5, 6];
const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 100;
const KMEANS_SEED: u64 = 0x6b6d;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from a k-means++ seeding; returns assignments and
/// inertia.
fn lloyd(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let dim = points[0].len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.gen_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            d2.iter()
                .position(|&w| {
                    r -= w;
                    r < 0.0
                })
                .unwrap_or(points.len() - 1)
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[idx].to_vec());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().expect("nonempty")));
        }
    }
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let best = (0..k)
                .min_by(|&i, &j| sq_dist(p, &centers[i]).total_cmp(&sq_dist(p, &centers[j])))
                .expect("k >= 1");
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = assign.iter().zip(points).map(|(&a, p)| sq_dist(p, &centers[a])).sum();
    (assign, inertia)
}

/// Best-of-restarts k-means assignment, deterministic in `seed`.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || points.len() < k {
        return Err(Error::InsufficientData(format!(
            "k-means with k = {k} needs at least {k} points, got {}",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (a, inertia) = lloyd(points, k, &mut rng);
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((a, inertia));
        }
    }
    Ok(best.expect("at least one restart").0)
}

/// Mean silhouette coefficient; singleton clusters score 0.
pub fn silhouette(points: &[&[f64]], assign: &[usize]) -> f64 {
    let n = points.len();
    if n == 0 {
        return 0.0;
    }
    let k = assign.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assign {
        sizes[a] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[assign[j]] += euclidean(points[i], points[j]);
            }
        }
        let own = assign[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Davies–Bouldin index over the non-empty clusters of `assign`.
pub fn davies_bouldin(points: &[&[f64]], assign: &[usize]) -> f64 {
    let dim = points.first().map_or(0, |p| p.len());
    let k = assign.iter().max().map_or(0, |m| m + 1);
    let mut centers = vec![vec![0.0; dim]; k];
    let mut sizes = vec![0usize; k];
    for (&a, p) in assign.iter().zip(points) {
        sizes[a] += 1;
        for (c, x) in centers[a].iter_mut().zip(p.iter()) {
            *c += x;
        }
    }
    let live: Vec<usize> = (0..k).filter(|&c| sizes[c] > 0).collect();
    for &c in &live {
        centers[c].iter_mut().for_each(|x| *x /= sizes[c] as f64);
    }
    let mut scatter = vec![0.0; k];
    for (&a, p) in assign.iter().zip(points) {
        scatter[a] += euclidean(p, &centers[a]);
    }
    for &c in &live {
        scatter[c] /= sizes[c] as f64;
    }
    if live.len() < 2 {
        return 0.0;
    }
    let worst: f64 = live
        .iter()
        .map(|&i| {
            live.iter()
                .filter(|&&j| j != i)
                .map(|&j| {
                    let s = scatter[i] + scatter[j];
                    let d = euclidean(&centers[i], &centers[j]);
                    if s == 0.0 {
                        0.0
                    } else {
                        s / d
                    }
                })
                .fold(0.0, f64::max)
        })
        .sum();
    worst / live.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub silhouette: f64,
    pub davies_bouldin: f64,
    /// Set when all points coincide and both scores are defined as 0.
    pub degenerate: bool,
}

/// Sub-clusters every safety class with k-means for each `k` in `n_km` and
/// scores the union of sub-clusters; results are averaged over `n_km`.
pub fn clustering_metrics(v: &[Vec<f64>], labels: &[SafetyLabel], n_km: &[usize]) -> Result<ClusteringReport> {
    if v.len() != labels.len() {
        return Err(Error::Shape(format!("{} embeddings but {} labels", v.len(), labels.len())));
    }
    let k_max = n_km.iter().copied().max().ok_or_else(|| Error::Config("no cluster counts".into()))?;
    let by_class: Vec<Vec<usize>> = SafetyLabel::ALL
        .iter()
        .map(|&c| (0..v.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    for (c, idx) in SafetyLabel::ALL.iter().zip(&by_class) {
        if !idx.is_empty() && idx.len() < k_max {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} points, fewer than {k_max} sub-clusters",
                idx.len()
            )));
        }
    }
    if by_class.iter().all(|idx| idx.is_empty()) {
        return Err(Error::InsufficientData("no embeddings".into()));
    }
    let points: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
    if points.iter().all(|p| p == &points[0]) {
        return Ok(ClusteringReport {
            silhouette: 0.0,
            davies_bouldin: 0.0,
            degenerate: true,
        });
    }
    let (mut sil, mut db) = (0.0, 0.0);
    for &k in n_km {
        let mut assign = vec![0usize; v.len()];
        for (ci, idx) in by_class.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let sub: Vec<&[f64]> = idx.iter().map(|&i| points[i]).collect();
            let a = kmeans(&sub, k, KMEANS_SEED ^ ((ci as u64) << 8) ^ k as u64)?;
            for (&i, &c) in idx.iter().zip(&a) {
                assign[i] = ci * k + c;
            }
        }
        sil += silhouette(&points, &assign);
        db += davies_bouldin(&points, &assign);
    }
    let n = n_km.len() as f64;
    Ok(ClusteringReport {
        silhouette: sil / n,
        davies_bouldin: db / n,
        degenerate: false,
    })
}
