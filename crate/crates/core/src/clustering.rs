//! Visual vocabulary learning: k-means over unpacked bits, k-majority and
//! k-medoids under the Hamming distance.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::descriptor::{
    hamming_words, squared_euclidean_unchecked, unpack_into, DescriptorRef, PackedDescriptorSet, RealMatrix,
};
use crate::error::{check_dim, Error, Result};
use crate::parallel::{map_chunks, ROW_CHUNK};
use crate::seeded_rng;

pub const DEFAULT_MAX_ITERS: usize = 100;

/// k-medoids runs the swap refinement only up to this many points; above it
/// the quadratic pass is skipped and only the alternating phase runs.
pub const KMEDOIDS_SWAP_LIMIT: usize = 20_000;

/// When `C(n, k) * n` stays below this, k-medoids finishes with an exact
/// search over all medoid subsets; swap refinement alone can stall in a
/// local optimum.
pub const KMEDOIDS_EXACT_BUDGET: u64 = 4_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LearningMethod {
    KMeans,
    KMajority,
    KMedoids,
}

impl LearningMethod {
    pub fn name(self) -> &'static str {
        match self {
            LearningMethod::KMeans => "kmeans",
            LearningMethod::KMajority => "kmajority",
            LearningMethod::KMedoids => "kmedoids",
        }
    }

    pub fn is_binary(self) -> bool {
        !matches!(self, LearningMethod::KMeans)
    }
}

impl std::str::FromStr for LearningMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(LearningMethod::KMeans),
            "kmajority" => Ok(LearningMethod::KMajority),
            "kmedoids" => Ok(LearningMethod::KMedoids),
            other => Err(Error::invalid("method", format!("unknown clustering method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Centroids {
    Real(RealMatrix),
    Binary(PackedDescriptorSet),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabularyKind {
    RealCentroids,
    BinaryCentroids,
}

/// K visual words. Binary centroids come from k-majority/k-medoids, real
/// centroids from k-means.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    method: LearningMethod,
    centroids: Centroids,
}

impl Vocabulary {
    pub fn new(method: LearningMethod, mut centroids: Centroids) -> Result<Self> {
        if let Centroids::Binary(s) = &mut centroids {
            s.set_image_id("vocabulary");
        }
        let k = match &centroids {
            Centroids::Real(m) => m.rows(),
            Centroids::Binary(s) => s.len(),
        };
        if k == 0 {
            return Err(Error::invalid("centroids", "vocabulary needs at least one centroid"));
        }
        let binary = matches!(centroids, Centroids::Binary(_));
        if binary != method.is_binary() {
            return Err(Error::invalid(
                "centroids",
                format!("{} vocabularies need {} centroids", method.name(), if method.is_binary() { "binary" } else { "real" }),
            ));
        }
        Ok(Vocabulary { method, centroids })
    }

    pub fn method(&self) -> LearningMethod {
        self.method
    }

    pub fn kind(&self) -> VocabularyKind {
        match self.centroids {
            Centroids::Real(_) => VocabularyKind::RealCentroids,
            Centroids::Binary(_) => VocabularyKind::BinaryCentroids,
        }
    }

    pub fn centroids(&self) -> &Centroids {
        &self.centroids
    }

    pub fn k(&self) -> usize {
        match &self.centroids {
            Centroids::Real(m) => m.rows(),
            Centroids::Binary(s) => s.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.centroids {
            Centroids::Real(m) => m.cols(),
            Centroids::Binary(s) => s.dim_bits(),
        }
    }

    /// Centroid `i` as reals; binary centroids expand to 0.0/1.0.
    pub fn centroid_real(&self, i: usize) -> Vec<f64> {
        match &self.centroids {
            Centroids::Real(m) => m.row(i).to_vec(),
            Centroids::Binary(s) => {
                let mut out = vec![0.0; s.dim_bits()];
                unpack_into(s.row(i), &mut out);
                out
            }
        }
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn assign(&self, d: DescriptorRef<'_>) -> Result<usize> {
        check_dim(self.dim(), d.dim_bits())?;
        Ok(match &self.centroids {
            Centroids::Binary(s) => nearest_binary(s, d.words()).0,
            Centroids::Real(m) => {
                let mut x = vec![0.0; d.dim_bits()];
                unpack_into(d, &mut x);
                nearest_real(m, &x).0
            }
        })
    }

    /// Assignment for an arbitrary real vector (real-centroid vocabularies
    /// compare directly; binary centroids are unpacked).
    pub fn assign_real(&self, x: &[f64]) -> Result<usize> {
        check_dim(self.dim(), x.len())?;
        Ok(match &self.centroids {
            Centroids::Real(m) => nearest_real(m, x).0,
            Centroids::Binary(s) => {
                let mut best = (0, f64::INFINITY);
                let mut c = vec![0.0; s.dim_bits()];
                for (i, row) in s.iter().enumerate() {
                    unpack_into(row, &mut c);
                    let dist = squared_euclidean_unchecked(x, &c);
                    if dist < best.1 {
                        best = (i, dist);
                    }
                }
                best.0
            }
        })
    }
}

/// A learned vocabulary plus the objective after every assignment step.
#[derive(Clone, Debug)]
pub struct ClusteringFit {
    pub vocabulary: Vocabulary,
    /// SSE for k-means, summed Hamming distance otherwise.
    pub costs: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[inline]
fn nearest_binary(centroids: &PackedDescriptorSet, x: &[u64]) -> (usize, u32) {
    let mut best = (0, u32::MAX);
    for (i, c) in centroids.iter().enumerate() {
        let dist = hamming_words(c.words(), x);
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best
}

#[inline]
fn nearest_real(centroids: &RealMatrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let dist = squared_euclidean_unchecked(c, x);
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best
}

fn check_sample(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k", "must be positive"));
    }
    if n < k {
        return Err(Error::InsufficientSample { needed: k, got: n });
    }
    Ok(())
}

/// k-means++ seeding: first centre uniform, the rest by squared distance.
fn kmeanspp_seeds(sample: &RealMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = sample.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = sample
        .iter()
        .map(|x| squared_euclidean_unchecked(x, sample.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `target` just above the final sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every remaining point duplicates a centre
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        let c = sample.row(next);
        for (i, x) in sample.iter().enumerate() {
            d2[i] = d2[i].min(squared_euclidean_unchecked(x, c));
        }
    }
    chosen
}

/// Lloyd's k-means on real vectors, seeded with k-means++.
pub fn kmeans(sample: &RealMatrix, k: usize, max_iters: usize, seed: u64) -> Result<ClusteringFit> {
    let n = sample.rows();
    check_sample(n, k)?;
    let dim = sample.cols();
    let mut rng = seeded_rng(seed);
    let mut centroids = RealMatrix::new(dim);
    for i in kmeanspp_seeds(sample, k, &mut rng) {
        centroids.push_row(sample.row(i))?;
    }

    let mut labels = vec![usize::MAX; n];
    let mut costs = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        let parts = map_chunks(n, ROW_CHUNK, |range| {
            range.map(|i| nearest_real(&centroids, sample.row(i))).collect::<Vec<_>>()
        });
        let assigned: Vec<(usize, f64)> = parts.into_iter().flatten().collect();
        costs.push(assigned.iter().map(|a| a.1).sum());
        let changed = assigned.iter().zip(&labels).any(|(a, &l)| a.0 != l);
        for (l, a) in labels.iter_mut().zip(&assigned) {
            *l = a.0;
        }
        iterations += 1;
        if !changed {
            converged = true;
            break;
        }

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(sample.row(i)) {
                *s += x;
            }
        }
        let mut next = RealMatrix::new(dim);
        for c in 0..k {
            if counts[c] == 0 {
                next.push_row(centroids.row(c))?;
            } else {
                let row: Vec<f64> = sums[c * dim..(c + 1) * dim].iter().map(|s| s / counts[c] as f64).collect();
                next.push_row(&row)?;
            }
        }
        centroids = next;

        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        for c in empty {
            let far = (0..n)
                .map(|i| (i, squared_euclidean_unchecked(sample.row(i), centroids.row(labels[i]))))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if far.1 <= 0.0 {
                continue;
            }
            counts[labels[far.0]] -= 1;
            counts[c] = 1;
            labels[far.0] = c;
            centroids.row_mut(c).copy_from_slice(sample.row(far.0));
        }
    }

    Ok(ClusteringFit {
        vocabulary: Vocabulary::new(LearningMethod::KMeans, Centroids::Real(centroids))?,
        costs,
        iterations,
        converged,
    })
}

fn assign_binary(sample: &PackedDescriptorSet, centroids: &PackedDescriptorSet) -> Vec<(usize, u32)> {
    map_chunks(sample.len(), ROW_CHUNK, |range| {
        range
            .map(|i| nearest_binary(centroids, sample.row(i).words()))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

fn random_distinct_rows(sample: &PackedDescriptorSet, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded_rng(seed);
    index::sample(&mut rng, sample.len(), k).into_vec()
}

/// k-majority: Hamming assignment, per-bit majority vote update. A bit is set
/// only when strictly more than half the cluster has it set.
pub fn kmajority(sample: &PackedDescriptorSet, k: usize, max_iters: usize, seed: u64) -> Result<ClusteringFit> {
    let n = sample.len();
    check_sample(n, k)?;
    let dim = sample.dim_bits();
    let wpr = sample.words_per_row();
    let mut centroids = sample.select(&random_distinct_rows(sample, k, seed));
    centroids.set_image_id("vocabulary");

    let mut labels = vec![usize::MAX; n];
    let mut costs = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        let assigned = assign_binary(sample, &centroids);
        costs.push(assigned.iter().map(|a| a.1 as f64).sum());
        let changed = assigned.iter().zip(&labels).any(|(a, &l)| a.0 != l);
        for (l, a) in labels.iter_mut().zip(&assigned) {
            *l = a.0;
        }
        iterations += 1;
        if !changed {
            converged = true;
            break;
        }

        let partial = map_chunks(n, 4 * ROW_CHUNK, |range| {
            let mut ones = vec![0u32; k * dim];
            let mut sizes = vec![0u32; k];
            for i in range {
                let l = labels[i];
                sizes[l] += 1;
                for d in sample.row(i).ones() {
                    ones[l * dim + d] += 1;
                }
            }
            (ones, sizes)
        });
        let mut ones = vec![0u32; k * dim];
        let mut sizes = vec![0u32; k];
        for (o, s) in partial {
            ones.iter_mut().zip(o).for_each(|(a, b)| *a += b);
            sizes.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }

        let mut words = centroids.raw_words().to_vec();
        for c in 0..k {
            if sizes[c] == 0 {
                continue;
            }
            let row = &mut words[c * wpr..(c + 1) * wpr];
            row.fill(0);
            for d in 0..dim {
                if 2 * ones[c * dim + d] > sizes[c] {
                    row[d / 64] |= 1 << (d % 64);
                }
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&c| sizes[c] == 0).collect();
        for c in empty {
            let far = (0..n)
                .map(|i| (i, hamming_words(sample.row(i).words(), &words[labels[i] * wpr..(labels[i] + 1) * wpr])))
                .fold((0, 0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if far.1 == 0 {
                continue;
            }
            sizes[labels[far.0]] -= 1;
            sizes[c] = 1;
            labels[far.0] = c;
            words[c * wpr..(c + 1) * wpr].copy_from_slice(sample.row(far.0).words());
        }
        centroids = PackedDescriptorSet::from_words("vocabulary", dim, words)?;
    }

    Ok(ClusteringFit {
        vocabulary: Vocabulary::new(LearningMethod::KMajority, Centroids::Binary(centroids))?,
        costs,
        iterations,
        converged,
    })
}

struct MedoidState {
    medoids: Vec<usize>,
    nearest: Vec<(usize, u32)>,
    second: Vec<u32>,
}

impl MedoidState {
    fn new(sample: &PackedDescriptorSet, medoids: Vec<usize>) -> Self {
        let n = sample.len();
        let parts = map_chunks(n, ROW_CHUNK, |range| {
            range
                .map(|i| {
                    let x = sample.row(i).words();
                    let mut best = (0, u32::MAX);
                    let mut second = u32::MAX;
                    for (slot, &m) in medoids.iter().enumerate() {
                        let dist = hamming_words(sample.row(m).words(), x);
                        if dist < best.1 {
                            second = best.1;
                            best = (slot, dist);
                        } else if dist < second {
                            second = dist;
                        }
                    }
                    (best, second)
                })
                .collect::<Vec<_>>()
        });
        let (nearest, second) = parts.into_iter().flatten().unzip();
        MedoidState { medoids, nearest, second }
    }

    fn cost(&self) -> u64 {
        self.nearest.iter().map(|&(_, d)| d as u64).sum()
    }
}

fn binomial_capped(n: u64, k: u64, cap: u64) -> u64 {
    let mut acc: u64 = 1;
    for i in 0..k.min(n - k) {
        acc = acc.saturating_mul(n - i) / (i + 1);
        if acc > cap {
            return cap + 1;
        }
    }
    acc
}

/// Exhaustive minimum over all k-subsets, for problems inside
/// [`KMEDOIDS_EXACT_BUDGET`].
fn exact_medoids(sample: &PackedDescriptorSet, k: usize) -> Option<MedoidState> {
    let n = sample.len();
    let combos = binomial_capped(n as u64, k as u64, KMEDOIDS_EXACT_BUDGET);
    if combos.saturating_mul(n as u64) > KMEDOIDS_EXACT_BUDGET {
        return None;
    }
    let mut subset: Vec<usize> = (0..k).collect();
    let mut best: Option<(u64, Vec<usize>)> = None;
    loop {
        let cost: u64 = sample
            .iter()
            .map(|x| {
                subset
                    .iter()
                    .map(|&m| hamming_words(sample.row(m).words(), x.words()))
                    .min()
                    .unwrap_or(0) as u64
            })
            .sum();
        if best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, subset.clone()));
        }
        // next combination in lexicographic order
        let Some(i) = (0..k).rev().find(|&i| subset[i] < n - k + i) else {
            break;
        };
        subset[i] += 1;
        for j in i + 1..k {
            subset[j] = subset[j - 1] + 1;
        }
    }
    best.map(|(_, medoids)| MedoidState::new(sample, medoids))
}

/// k-medoids: alternating Voronoi iteration followed by a best-swap
/// refinement (for samples up to [`KMEDOIDS_SWAP_LIMIT`] points); tiny
/// problems are finished by exhaustive search.
pub fn kmedoids(sample: &PackedDescriptorSet, k: usize, max_iters: usize, seed: u64) -> Result<ClusteringFit> {
    let n = sample.len();
    check_sample(n, k)?;
    let mut state = MedoidState::new(sample, random_distinct_rows(sample, k, seed));
    let mut costs = vec![state.cost() as f64];
    let mut iterations = 0;
    let mut converged = false;

    // alternating phase
    while iterations < max_iters {
        iterations += 1;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &(slot, _)) in state.nearest.iter().enumerate() {
            members[slot].push(i);
        }
        let mut next = state.medoids.clone();
        for (slot, group) in members.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let within = |c: usize| -> u64 {
                let cw = sample.row(c).words();
                group.iter().map(|&j| hamming_words(cw, sample.row(j).words()) as u64).sum()
            };
            let current = state.medoids[slot];
            let mut best = (current, within(current));
            for &c in group {
                let cost = within(c);
                if cost < best.1 {
                    best = (c, cost);
                }
            }
            next[slot] = best.0;
        }
        if next == state.medoids {
            converged = true;
            break;
        }
        state = MedoidState::new(sample, next);
        costs.push(state.cost() as f64);
    }

    if n <= KMEDOIDS_SWAP_LIMIT && k < n {
        let mut passes = 0;
        loop {
            passes += 1;
            let mut improved = false;
            for c in 0..n {
                if state.medoids.contains(&c) {
                    continue;
                }
                let cw = sample.row(c).words();
                let mut shared: i64 = 0;
                let mut per_slot = vec![0i64; k];
                for j in 0..n {
                    let d_cj = hamming_words(cw, sample.row(j).words()) as i64;
                    let (slot, near) = state.nearest[j];
                    let near = near as i64;
                    let keep = d_cj.min(near) - near;
                    shared += keep;
                    let second = state.second[j].min(u32::MAX / 2) as i64;
                    per_slot[slot] += (d_cj.min(second) - near) - keep;
                }
                let (slot, delta) = per_slot
                    .iter()
                    .enumerate()
                    .map(|(s, &p)| (s, shared + p))
                    .fold((0, 0i64), |best, cur| if cur.1 < best.1 { cur } else { best });
                if delta < 0 {
                    let mut next = state.medoids.clone();
                    next[slot] = c;
                    state = MedoidState::new(sample, next);
                    costs.push(state.cost() as f64);
                    improved = true;
                }
            }
            if !improved {
                break;
            }
            if passes >= max_iters {
                converged = false;
                break;
            }
        }
    }

    if let Some(best) = exact_medoids(sample, k) {
        if best.cost() < state.cost() {
            state = best;
            costs.push(state.cost() as f64);
        }
    }

    let mut centroids = sample.select(&state.medoids);
    centroids.set_image_id("vocabulary");
    Ok(ClusteringFit {
        vocabulary: Vocabulary::new(LearningMethod::KMedoids, Centroids::Binary(centroids))?,
        costs,
        iterations,
        converged,
    })
}
