//! Vector quantization of the query space.
//!
//! Query centers are clustered into location representatives (L1) and, inside
//! each L1 cluster, query radii are clustered into radius representatives
//! (L2). Both levels use Lloyd's k-means with farthest-point seeding; the
//! number of clusters is picked by growing `k` until the sum of squared
//! quantization errors stops improving by more than a threshold.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::squared_euclidean;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop once no centroid moves by more than this (max-coordinate shift).
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

/// Parameters of the elbow search over `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectKConfig {
    pub k0: usize,
    pub epsilon: f64,
    pub k_max: usize,
    /// Compare the SSQE improvement divided by the sample count against
    /// `epsilon`, making the threshold independent of workload size.
    #[serde(default)]
    pub per_sample: bool,
}

impl SelectKConfig {
    pub fn new(k0: usize, epsilon: f64, k_max: usize) -> Self {
        SelectKConfig {
            k0,
            epsilon,
            k_max,
            per_sample: false,
        }
    }

    pub fn per_sample(mut self) -> Self {
        self.per_sample = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.k0 == 0 {
            return Err(Error::usage("k0 must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::usage("epsilon must be positive"));
        }
        if self.k_max < self.k0 {
            return Err(Error::usage("k_max must be at least k0"));
        }
        Ok(())
    }
}

/// Centroids, per-sample assignments and the resulting SSQE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub ssqe: f64,
    /// SSQE after each assignment step, in order.
    pub history: Vec<f64>,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Centroids of a one-dimensional codebook.
    pub fn scalar_centroids(&self) -> Vec<f64> {
        self.centroids.iter().map(|c| c[0]).collect()
    }

    /// Reorder centroids ascending by their first coordinate, remapping assignments.
    pub fn sorted_ascending(mut self) -> Self {
        let mut order: Vec<usize> = (0..self.k()).collect();
        order.sort_by(|&a, &b| self.centroids[a][0].total_cmp(&self.centroids[b][0]));
        let mut rank = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            rank[old] = new;
        }
        self.centroids = order.iter().map(|&i| self.centroids[i].clone()).collect();
        for a in &mut self.assignments {
            *a = rank[*a];
        }
        self
    }
}

/// Index of the nearest centroid under squared L2; ties go to the smaller index.
pub fn nearest(sample: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = squared_euclidean(sample, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Sum of squared distances from each sample to its nearest centroid.
pub fn ssqe(samples: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    samples.iter().map(|s| nearest(s, centroids).1).sum()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Samples sorted lexicographically, with the permutation back to input order
/// and the distinct values.
struct Canonical {
    sorted: Vec<Vec<f64>>,
    order: Vec<usize>,
    distinct: Vec<Vec<f64>>,
}

fn canonicalize(samples: &[Vec<f64>]) -> Result<Canonical> {
    let dim = samples.first().map(Vec::len).ok_or_else(|| Error::usage("no samples to cluster"))?;
    if dim == 0 || samples.iter().any(|s| s.len() != dim) {
        return Err(Error::usage("samples must share a nonzero dimension"));
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::usage("samples must be finite"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&samples[a], &samples[b]).then(a.cmp(&b)));
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| samples[i].clone()).collect();
    let mut distinct: Vec<Vec<f64>> = sorted.clone();
    distinct.dedup_by(|a, b| lex_cmp(a, b).is_eq());
    Ok(Canonical {
        sorted,
        order,
        distinct,
    })
}

/// Number of distinct samples.
pub fn distinct_count(samples: &[Vec<f64>]) -> usize {
    canonicalize(samples).map_or(0, |c| c.distinct.len())
}

/// Greedy max-min seeding over the distinct samples; the first seed is drawn
/// from `rng`.
fn farthest_point_seeds(distinct: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let first = rng.random_range(0..distinct.len());
    let mut seeds = vec![distinct[first].clone()];
    let mut gap: Vec<f64> = distinct
        .iter()
        .map(|s| squared_euclidean(s, &seeds[0]))
        .collect();
    while seeds.len() < k {
        let (far, _) = gap
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &g)| if g > best.1 { (i, g) } else { best });
        let seed = distinct[far].clone();
        for (g, s) in gap.iter_mut().zip(distinct) {
            *g = g.min(squared_euclidean(s, &seed));
        }
        seeds.push(seed);
    }
    seeds
}

/// Lloyd iterations from `init` over canonically ordered samples.
fn lloyd(sorted: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, cfg: &KMeansConfig) -> (Vec<Vec<f64>>, Vec<usize>, f64, Vec<f64>) {
    let dim = sorted[0].len();
    let k = centroids.len();
    let mut history = Vec::new();
    let assign_all = |centroids: &[Vec<f64>]| -> (Vec<usize>, Vec<f64>) {
        sorted.iter().map(|s| nearest(s, centroids)).unzip()
    };
    for _ in 0..cfg.max_iter {
        let (assign, dist) = assign_all(&centroids);
        history.push(dist.iter().sum());

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (s, &a) in sorted.iter().zip(&assign) {
            counts[a] += 1;
            for (acc, v) in sums[a].iter_mut().zip(s) {
                *acc += v;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .zip(&centroids)
            .map(|((sum, &n), old)| {
                if n == 0 {
                    old.clone()
                } else {
                    sum.into_iter().map(|v| v / n as f64).collect()
                }
            })
            .collect();
        // reseed empty clusters at the samples worst served by the new centroids
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empties.is_empty() {
            let mut far: Vec<(usize, f64)> = sorted
                .iter()
                .enumerate()
                .map(|(i, s)| (i, squared_euclidean(s, &next[assign[i]])))
                .collect();
            far.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (c, (i, _)) in empties.into_iter().zip(far) {
                next[c] = sorted[i].clone();
            }
        }
        let shift = centroids
            .iter()
            .zip(&next)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        centroids = next;
        if shift < cfg.tol {
            break;
        }
    }
    let (assign, dist) = assign_all(&centroids);
    let total: f64 = dist.iter().sum();
    history.push(total);
    (centroids, assign, total, history)
}

fn finish(canon: &Canonical, centroids: Vec<Vec<f64>>, sorted_assign: Vec<usize>, ssqe: f64, history: Vec<f64>) -> Codebook {
    let mut assignments = vec![0; canon.order.len()];
    for (pos, &orig) in canon.order.iter().enumerate() {
        assignments[orig] = sorted_assign[pos];
    }
    Codebook {
        centroids,
        assignments,
        ssqe,
        history,
    }
}

/// Lloyd's k-means with seeded farthest-point initialization.
///
/// Results depend only on the multiset of samples, `k` and `seed`: the input
/// order does not matter.
pub fn kmeans(samples: &[Vec<f64>], k: usize, seed: u64, cfg: &KMeansConfig) -> Result<Codebook> {
    let canon = canonicalize(samples)?;
    if k == 0 {
        return Err(Error::usage("k must be at least 1"));
    }
    if k > canon.distinct.len() {
        return Err(Error::usage(format!(
            "k = {k} exceeds the {} distinct samples",
            canon.distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = farthest_point_seeds(&canon.distinct, k, &mut rng);
    let (c, a, s, h) = lloyd(&canon.sorted, init, cfg);
    Ok(finish(&canon, c, a, s, h))
}

/// k-means on scalars.
pub fn kmeans_scalar(values: &[f64], k: usize, seed: u64, cfg: &KMeansConfig) -> Result<Codebook> {
    kmeans(&lift(values), k, seed, cfg)
}

pub(crate) fn lift(values: &[f64]) -> Vec<Vec<f64>> {
    values.iter().map(|&v| vec![v]).collect()
}

/// Outcome of the elbow search.
#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub codebook: Codebook,
    /// `(k, ssqe)` for every `k` tried, ascending.
    pub curve: Vec<(usize, f64)>,
}

/// Grow `k` from `k0` while each step improves SSQE by more than `epsilon`.
///
/// Each step warm-starts from the previous centroids plus the sample farthest
/// from them, so SSQE never increases along the explored range. Returns the
/// last codebook whose step still improved. `k0` is clamped to the number of
/// distinct samples.
pub fn select_k(samples: &[Vec<f64>], sel: &SelectKConfig, seed: u64, cfg: &KMeansConfig) -> Result<KSelection> {
    sel.validate()?;
    let canon = canonicalize(samples)?;
    let distinct = canon.distinct.len();
    let k0 = sel.k0.min(distinct);
    let k_max = sel.k_max.min(distinct);
    let scale = if sel.per_sample { samples.len() as f64 } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = farthest_point_seeds(&canon.distinct, k0, &mut rng);
    let (c, a, s, h) = lloyd(&canon.sorted, init, cfg);
    let mut best = finish(&canon, c, a, s, h);
    let mut curve = vec![(k0, best.ssqe)];

    while best.k() < k_max {
        let mut init = best.centroids.clone();
        let far = canon
            .distinct
            .iter()
            .map(|s| nearest(s, &init).1)
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, g)| if g > b.1 { (i, g) } else { b });
        if far.1 <= 0.0 {
            break;
        }
        init.push(canon.distinct[far.0].clone());
        let (c, a, s, h) = lloyd(&canon.sorted, init, cfg);
        let next = finish(&canon, c, a, s, h);
        curve.push((next.k(), next.ssqe));
        if (best.ssqe - next.ssqe).abs() / scale > sel.epsilon {
            best = next;
        } else {
            break;
        }
    }
    Ok(KSelection { codebook: best, curve })
}

/// L1 codebook over query centers and one ascending L2 codebook over the
/// radii of each L1 cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantization {
    pub locations: Codebook,
    pub radii: Vec<Codebook>,
    /// `(k, l)` cell of every input query.
    pub cells: Vec<(usize, usize)>,
    pub l1_curve: Vec<(usize, f64)>,
    pub l2_curve: Vec<(usize, f64)>,
}

impl Quantization {
    pub fn radius_representatives(&self, k: usize) -> Vec<f64> {
        self.radii[k].scalar_centroids()
    }
}

/// Two-level quantization: `K` picked by elbow search on the centers, a
/// global `L` picked by elbow search on the pooled radii, then `L`-means per
/// L1 cluster (clamped to the cluster's distinct radii).
pub fn hierarchical_quantize(
    centers: &[Vec<f64>],
    radii: &[f64],
    l1: &SelectKConfig,
    l2: &SelectKConfig,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<Quantization> {
    if centers.is_empty() {
        return Err(Error::usage("no training queries"));
    }
    if centers.len() != radii.len() {
        return Err(Error::usage("centers and radii differ in length"));
    }
    let l1_sel = select_k(centers, l1, seed, cfg)?;
    let lifted = lift(radii);
    let l2_sel = select_k(&lifted, l2, seed.wrapping_add(1), cfg)?;
    let l = l2_sel.codebook.k();

    let k_count = l1_sel.codebook.k();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k_count];
    for (i, &k) in l1_sel.codebook.assignments.iter().enumerate() {
        members[k].push(i);
    }
    let mut cells = vec![(0, 0); centers.len()];
    let mut codebooks = Vec::with_capacity(k_count);
    for (k, idx) in members.iter().enumerate() {
        let local: Vec<Vec<f64>> = idx.iter().map(|&i| vec![radii[i]]).collect();
        let cb = if local.is_empty() {
            // a cluster that lost all samples keeps its centroid; radius falls back to the pooled mean
            let mean = radii.iter().sum::<f64>() / radii.len() as f64;
            Codebook {
                centroids: vec![vec![mean]],
                assignments: Vec::new(),
                ssqe: 0.0,
                history: vec![0.0],
            }
        } else {
            let lk = l.min(distinct_count(&local));
            kmeans(&local, lk, seed.wrapping_add(2 + k as u64), cfg)?.sorted_ascending()
        };
        for (pos, &i) in idx.iter().enumerate() {
            cells[i] = (k, cb.assignments[pos]);
        }
        codebooks.push(cb);
    }
    Ok(Quantization {
        locations: l1_sel.codebook,
        radii: codebooks,
        cells,
        l1_curve: l1_sel.curve,
        l2_curve: l2_sel.curve,
    })
}
