//! Semisoft clustering of task coefficient vectors.
//!
//! The pipeline builds the task similarity `S = WᵀW`, scores every task for
//! purity, declares the top fraction pure, clusters the pure tasks with
//! K-means in the spectral embedding, and finally recovers the full membership
//! matrix as `V = A Θ` where `Θ` holds the top-K eigenvectors of `S` and `A`
//! is fitted on the pure tasks.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::data::Membership;
use crate::error::{Error, Result};
use crate::linalg::{solve_spd, sym_eigen};
use crate::rng;

/// Ridge added to `Θ_P Θ_Pᵀ` when solving for `A`.
const BASIS_JITTER: f64 = 1e-10;
const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Array2<f64>);

impl SimilarityMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn t(&self) -> usize {
        self.0.nrows()
    }
}

/// Gram matrix of the columns of `w`.
pub fn similarity(w: ArrayView2<'_, f64>) -> SimilarityMatrix {
    let mut s = w.t().dot(&w);
    // exact symmetry
    let t = s.nrows();
    for i in 0..t {
        for j in (i + 1)..t {
            let m = 0.5 * (s[[i, j]] + s[[j, i]]);
            s[[i, j]] = m;
            s[[j, i]] = m;
        }
    }
    SimilarityMatrix(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    /// K x T, rows are the leading eigenvectors of S.
    pub theta: Array2<f64>,
    /// Descending.
    pub eigenvalues: Array1<f64>,
}

impl SpectralBasis {
    pub fn k(&self) -> usize {
        self.theta.nrows()
    }

    /// Spectral embedding of task `i`.
    pub fn embedding(&self, i: usize) -> ArrayView1<'_, f64> {
        self.theta.column(i)
    }
}

pub fn spectral_basis(s: &SimilarityMatrix, k: usize) -> Result<SpectralBasis> {
    if k == 0 || k > s.t() {
        return Err(Error::InvalidParam(format!(
            "cannot take {k} eigenvectors of a {0}x{0} matrix",
            s.t()
        )));
    }
    let eig = sym_eigen(s.view());
    let theta = eig.vectors.slice(ndarray::s![.., ..k]).t().to_owned();
    let eigenvalues = eig.values.slice(ndarray::s![..k]).to_owned();
    Ok(SpectralBasis { theta, eigenvalues })
}

/// Purity score of each task.
///
/// For task `i`, take the `ceil(epsilon * T)` largest cosine similarities
/// `S_ij / sqrt(S_ii S_jj)` with the other tasks and average them. Tasks
/// inside a block of near-parallel coefficient vectors score close to one;
/// mixtures of several blocks score lower. Zero columns score zero.
pub fn purity_scores(s: &SimilarityMatrix, epsilon: f64) -> Array1<f64> {
    let t = s.t();
    let s = s.view();
    let m = ((epsilon * t as f64).ceil() as usize).clamp(1, t.saturating_sub(1).max(1));
    let norms: Vec<f64> = (0..t).map(|i| s[[i, i]].max(0.0).sqrt()).collect();
    let mut scores = Array1::zeros(t);
    if t == 1 {
        scores[0] = if s[[0, 0]] >= 1e-12 { 1.0 } else { 0.0 };
        return scores;
    }
    for i in 0..t {
        if s[[i, i]] < 1e-12 {
            continue;
        }
        let mut cos: Vec<f64> = (0..t)
            .filter(|&j| j != i)
            .map(|j| {
                if s[[j, j]] < 1e-12 {
                    0.0
                } else {
                    s[[i, j]] / (norms[i] * norms[j])
                }
            })
            .collect();
        cos.sort_by(|a, b| b.total_cmp(a));
        scores[i] = cos[..m].iter().sum::<f64>() / m as f64;
    }
    scores
}

#[derive(Debug, Clone, PartialEq)]
pub struct PureTaskSelection {
    pub scores: Array1<f64>,
    /// Pure task indices, ascending.
    pub pure: Vec<usize>,
    /// Cluster label of each entry of `pure`.
    pub labels: Vec<usize>,
    pub k: usize,
}

impl PureTaskSelection {
    pub fn cluster_map(&self) -> BTreeMap<usize, usize> {
        self.pure.iter().copied().zip(self.labels.iter().copied()).collect()
    }
}

/// Number of pure tasks declared for `t` tasks.
pub fn pure_count(t: usize, theta: f64) -> usize {
    ((theta * t as f64).ceil() as usize).min(t)
}

/// Declares `ceil(theta * T)` tasks pure and labels them.
///
/// All tasks are first grouped by K-means on the directions of their spectral
/// embeddings (zero embeddings stay at the origin). Each group's
/// highest-scoring member is declared pure; the remaining slots go to the
/// highest scores overall (ties to the lower index). A pure task's label is
/// its group. A plain global cut at the top scores can miss a cluster whose
/// tasks are estimated less precisely, which no later step can repair.
pub fn select_pure(
    basis: &SpectralBasis,
    scores: ArrayView1<'_, f64>,
    theta: f64,
    k: usize,
    seed: u64,
) -> Result<PureTaskSelection> {
    let t = scores.len();
    let count = pure_count(t, theta);
    if count < k {
        return Err(Error::EmptyCluster { cluster: count });
    }
    let points: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let e = basis.embedding(i);
            let norm = e.dot(&e).sqrt();
            if norm > 0.0 {
                e.iter().map(|x| x / norm).collect()
            } else {
                vec![0.0; e.len()]
            }
        })
        .collect();
    let km = kmeans(&points, k, seed)?;

    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = vec![false; t];
    let mut covered = vec![false; k];
    for &i in &order {
        let g = km.labels[i];
        if !covered[g] {
            covered[g] = true;
            chosen[i] = true;
        }
    }
    let mut left = count - covered.iter().filter(|&&c| c).count();
    for &i in &order {
        if left == 0 {
            break;
        }
        if !chosen[i] {
            chosen[i] = true;
            left -= 1;
        }
    }
    let pure: Vec<usize> = (0..t).filter(|&i| chosen[i]).collect();
    Ok(PureTaskSelection {
        scores: scores.to_owned(),
        labels: pure.iter().map(|&i| km.labels[i]).collect(),
        pure,
        k,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Labels are numbered in order of first appearance.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// K-means with k-means++ seeding, best of 10 restarts.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(Error::EmptyCluster { cluster: n });
    }
    let mut best: Option<KMeans> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = rng::stream(seed, rng::KMEANS, restart as u64);
        let Some(run) = kmeans_once(points, k, &mut rng) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let mut best = best.ok_or(Error::EmptyCluster { cluster: 0 })?;

    // canonical labels: order of first appearance
    let mut remap = vec![usize::MAX; k];
    let mut next = 0;
    for &l in &best.labels {
        if remap[l] == usize::MAX {
            remap[l] = next;
            next += 1;
        }
    }
    let mut centroids = vec![Vec::new(); k];
    for (old, c) in best.centroids.into_iter().enumerate() {
        centroids[remap[old]] = c;
    }
    best.labels.iter_mut().for_each(|l| *l = remap[*l]);
    best.centroids = centroids;
    Ok(best)
}

/// One seeded Lloyd run; `None` when some cluster ends up empty.
fn kmeans_once<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Option<KMeans> {
    let n = points.len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centroids.push(points[pick].clone());
        let c = centroids.last().unwrap();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, c));
        }
    }

    let dim = points[0].len();
    let mut labels = vec![0usize; n];
    for iter in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let d = dist2(p, cen);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[i] != best || iter == 0 {
                changed |= labels[i] != best;
                labels[i] = best;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed && iter > 0 {
            break;
        }
    }
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    if counts.contains(&0) {
        return None;
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| dist2(p, &centroids[l]))
        .sum();
    Some(KMeans {
        labels,
        centroids,
        inertia,
    })
}

/// Recovers the membership matrix from the spectral basis and the labelled
/// pure tasks.
///
/// `A` solves `V_P = A Θ_P` in least squares; `V = A Θ`. Pure columns are then
/// set exactly one-hot; other columns have negative entries clamped to zero
/// and are renormalized to sum to one. A column that clamps to zero goes to
/// the cluster whose pure-task centroid in Θ-space is nearest. A task with a
/// zero embedding (a zero coefficient vector) carries no membership
/// information and is split evenly.
pub fn recover_membership(basis: &SpectralBasis, sel: &PureTaskSelection) -> Result<Membership> {
    let k = basis.k();
    let t = basis.theta.ncols();
    if sel.k != k {
        return Err(Error::ShapeMismatch(format!(
            "basis has {k} rows, selection has {} clusters",
            sel.k
        )));
    }
    let mut counts = vec![0usize; k];
    for &l in &sel.labels {
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyCluster { cluster: c + 1 });
    }
    let pure_map = sel.cluster_map();
    if k == 1 {
        return Membership::new(Array2::ones((1, t)), pure_map);
    }

    let theta_p = basis.theta.select(Axis(1), &sel.pure);
    let mut v_p = Array2::<f64>::zeros((k, sel.pure.len()));
    for (j, &l) in sel.labels.iter().enumerate() {
        v_p[[l, j]] = 1.0;
    }
    // (Θ_P Θ_Pᵀ + jI) Aᵀ = Θ_P V_Pᵀ
    let gram = theta_p.dot(&theta_p.t());
    let rhs = theta_p.dot(&v_p.t());
    let a = solve_spd(gram.view(), rhs.view(), BASIS_JITTER)?.reversed_axes();
    let raw = a.dot(&basis.theta);

    let mut centroids = vec![Array1::<f64>::zeros(k); k];
    for (&i, &l) in sel.pure.iter().zip(&sel.labels) {
        centroids[l] += &basis.embedding(i);
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        *c /= *n as f64;
    }

    let mut v = Array2::<f64>::zeros((k, t));
    for i in 0..t {
        if let Some(&l) = pure_map.get(&i) {
            v[[l, i]] = 1.0;
            continue;
        }
        if basis.embedding(i).iter().all(|x| x.abs() <= 1e-12) {
            v.column_mut(i).fill(1.0 / k as f64);
            continue;
        }
        let mut col: Vec<f64> = raw.column(i).iter().map(|&x| x.max(0.0)).collect();
        let sum: f64 = col.iter().sum();
        if !sum.is_finite() {
            return Err(Error::NonFinite("membership recovery"));
        }
        if sum <= 1e-12 {
            let e = basis.embedding(i);
            let nearest = (0..k)
                .min_by(|&a, &b| {
                    let da = (&centroids[a] - &e).mapv(|x| x * x).sum();
                    let db = (&centroids[b] - &e).mapv(|x| x * x).sum();
                    da.total_cmp(&db)
                })
                .unwrap_or(0);
            col = vec![0.0; k];
            col[nearest] = 1.0;
        } else {
            col.iter_mut().for_each(|x| *x = (*x / sum).min(1.0));
        }
        for (c, x) in col.into_iter().enumerate() {
            v[[c, i]] = x;
        }
    }
    Membership::new(v, pure_map)
}

/// Output of one full clustering pass.
#[derive(Debug, Clone)]
pub struct SoupOutput {
    pub membership: Membership,
    pub selection: PureTaskSelection,
    pub basis: SpectralBasis,
}

/// Similarity, purity, pure-task clustering and membership recovery on `w`.
pub fn soup(w: ArrayView2<'_, f64>, k: usize, theta: f64, epsilon: f64, seed: u64) -> Result<SoupOutput> {
    let s = similarity(w);
    let basis = spectral_basis(&s, k)?;
    let scores = purity_scores(&s, epsilon);
    let selection = select_pure(&basis, scores.view(), theta, k, seed)?;
    let membership = recover_membership(&basis, &selection)?;
    Ok(SoupOutput {
        membership,
        selection,
        basis,
    })
}
