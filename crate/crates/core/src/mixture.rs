//! Bernoulli and diagonal-Gaussian mixture models estimated by EM.
//!
//! Every likelihood is evaluated in the log domain with log-sum-exp. The
//! E-step runs over fixed-size chunks of the sample and the partial
//! sufficient statistics are merged in chunk order, so a fit is
//! bit-reproducible for any thread count.

use log::warn;
use rand::Rng;

use crate::clustering;
use crate::descriptor::{DescriptorRef, PackedDescriptorSet, RealMatrix};
use crate::error::{check_dim, Error, Result};
use crate::parallel::{map_chunks, CompensatedSum, ROW_CHUNK};
use crate::seeded_rng;

/// Bernoulli means are kept inside `[MU_FLOOR, 1 - MU_FLOOR]`.
pub const MU_FLOOR: f64 = 1e-4;
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Mixing weights are floored here after each M-step, then renormalized.
pub const WEIGHT_FLOOR: f64 = 1e-8;
pub const DEFAULT_EPS: f64 = 0.05;
pub const DEFAULT_MAX_ITERS: usize = 200;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::invalid("weights", "mixture needs at least one component"));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::invalid("weights", format!("weight {w} is not positive")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::invalid("weights", format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

fn floor_weights(s0: &[f64], total: f64) -> Vec<f64> {
    let mut w: Vec<f64> = s0.iter().map(|s| (s / total).max(WEIGHT_FLOOR)).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    w
}

/// Stable `log(sum(exp(v)))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Turns log joint probabilities into posteriors in place; returns the
/// log marginal.
fn normalize_log_joint(joint: &mut [f64]) -> f64 {
    let lse = log_sum_exp(joint);
    for x in joint.iter_mut() {
        *x = (*x - lse).exp();
    }
    lse
}

/// Posterior component probabilities for one descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyRow(Vec<f64>);

impl OccupancyRow {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// The outcome of an EM run.
#[derive(Clone, Debug)]
pub struct EmFit<M> {
    pub model: M,
    /// Log-likelihood of the initial model followed by the value after every
    /// M-step.
    pub loglik: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Multivariate Bernoulli mixture over `{0,1}^D`.
#[derive(Clone, Debug)]
pub struct BernoulliMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    log_weights: Vec<f64>,
    // sum_d log(1 - mu_kd)
    log_off: Vec<f64>,
    // log(mu_kd) - log(1 - mu_kd)
    logit: Vec<f64>,
}

impl PartialEq for BernoulliMixture {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.weights == other.weights && self.means == other.means
    }
}

impl BernoulliMixture {
    /// `means` is K x D row-major; values are clamped into
    /// `[MU_FLOOR, 1 - MU_FLOOR]`.
    pub fn new(weights: Vec<f64>, means: Vec<f64>, dim: usize) -> Result<Self> {
        validate_weights(&weights)?;
        if dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        check_dim(weights.len() * dim, means.len())?;
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("means", "non-finite Bernoulli mean"));
        }
        let means: Vec<f64> = means.into_iter().map(|m| m.clamp(MU_FLOOR, 1.0 - MU_FLOOR)).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        let log_off = means
            .chunks_exact(dim)
            .map(|row| row.iter().map(|m| (1.0 - m).ln()).sum())
            .collect();
        let logit = means.iter().map(|m| m.ln() - (1.0 - m).ln()).collect();
        Ok(BernoulliMixture {
            dim,
            weights,
            means,
            log_weights,
            log_off,
            logit,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn mean_row(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    /// `log p_k(x)`.
    pub fn component_logprob(&self, k: usize, x: DescriptorRef<'_>) -> Result<f64> {
        check_dim(self.dim, x.dim_bits())?;
        if k >= self.k() {
            return Err(Error::invalid("k", format!("component {k} out of range")));
        }
        let logit = &self.logit[k * self.dim..(k + 1) * self.dim];
        Ok(self.log_off[k] + x.ones().map(|d| logit[d]).sum::<f64>())
    }

    /// Fills `out[k] = log w_k + log p_k(x)`; `ones` lists the set bits of x.
    #[inline]
    pub(crate) fn log_joint_from_ones(&self, ones: &[usize], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let logit = &self.logit[k * self.dim..(k + 1) * self.dim];
            *o = self.log_weights[k] + self.log_off[k] + ones.iter().map(|&d| logit[d]).sum::<f64>();
        }
    }

    /// Occupancies written into `gamma`; returns `log p(x)`.
    #[inline]
    pub(crate) fn posteriors_from_ones(&self, ones: &[usize], gamma: &mut [f64]) -> f64 {
        self.log_joint_from_ones(ones, gamma);
        normalize_log_joint(gamma)
    }

    pub fn occupancy(&self, x: DescriptorRef<'_>) -> Result<OccupancyRow> {
        check_dim(self.dim, x.dim_bits())?;
        let ones: Vec<usize> = x.ones().collect();
        let mut gamma = vec![0.0; self.k()];
        self.posteriors_from_ones(&ones, &mut gamma);
        Ok(OccupancyRow(gamma))
    }

    /// `sum_t log p(x_t)`; zero for an empty sample.
    pub fn loglik(&self, sample: &PackedDescriptorSet) -> Result<f64> {
        check_dim(self.dim, sample.dim_bits())?;
        Ok(self.expectation(sample).loglik)
    }

    fn expectation(&self, sample: &PackedDescriptorSet) -> BmmStats {
        let (k, dim) = (self.k(), self.dim);
        let parts = map_chunks(sample.len(), ROW_CHUNK, |range| {
            let mut stats = BmmStats::zeros(k, dim);
            let mut gamma = vec![0.0; k];
            let mut ones = Vec::with_capacity(dim);
            for i in range {
                ones.clear();
                ones.extend(sample.row(i).ones());
                let lp = self.posteriors_from_ones(&ones, &mut gamma);
                stats.loglik_sum.add(lp);
                for (c, &g) in gamma.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    stats.s0[c] += g;
                    let row = &mut stats.s1[c * dim..(c + 1) * dim];
                    for &d in &ones {
                        row[d] += g;
                    }
                }
            }
            stats
        });
        let mut total = BmmStats::zeros(k, dim);
        for p in parts {
            total.merge(&p);
        }
        total.loglik = total.loglik_sum.value();
        total
    }

    /// Draws `n` descriptors: a component by weight, then each bit
    /// independently.
    pub fn sample_descriptors(&self, image_id: &str, n: usize, rng: &mut impl Rng) -> Result<PackedDescriptorSet> {
        let mut set = PackedDescriptorSet::new(image_id, self.dim)?;
        let mut bits = crate::descriptor::BinaryDescriptor::zeros(self.dim);
        for _ in 0..n {
            let k = sample_index(&self.weights, rng);
            for (d, &m) in self.mean_row(k).iter().enumerate() {
                bits.set(d, rng.random::<f64>() < m);
            }
            set.push(bits.as_ref())?;
        }
        Ok(set)
    }
}

pub(crate) fn sample_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

struct BmmStats {
    s0: Vec<f64>,
    s1: Vec<f64>,
    loglik_sum: CompensatedSum,
    loglik: f64,
}

impl BmmStats {
    fn zeros(k: usize, dim: usize) -> Self {
        BmmStats {
            s0: vec![0.0; k],
            s1: vec![0.0; k * dim],
            loglik_sum: CompensatedSum::default(),
            loglik: 0.0,
        }
    }

    fn merge(&mut self, other: &BmmStats) {
        self.s0.iter_mut().zip(&other.s0).for_each(|(a, b)| *a += b);
        self.s1.iter_mut().zip(&other.s1).for_each(|(a, b)| *a += b);
        self.loglik_sum.merge(other.loglik_sum);
    }
}

fn all_rows_identical(sample: &PackedDescriptorSet) -> bool {
    let first = sample.row(0);
    sample.iter().all(|r| r == first)
}

fn mean_shift(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Fits a K-component Bernoulli mixture.
///
/// Initialization: uniform weights, means drawn uniformly from (0.25, 0.75).
/// Stops once the L2 norm of the change of the full K x D mean matrix falls
/// below `eps`, or after `max_iters` M-steps.
pub fn bmm_fit_em(
    sample: &PackedDescriptorSet,
    k: usize,
    seed: u64,
    eps: f64,
    max_iters: usize,
) -> Result<EmFit<BernoulliMixture>> {
    let (n, dim) = (sample.len(), sample.dim_bits());
    if k == 0 {
        return Err(Error::invalid("k", "must be positive"));
    }
    if n < k {
        return Err(Error::InsufficientSample { needed: k, got: n });
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("eps", "must be positive"));
    }
    if all_rows_identical(sample) {
        warn!("all {n} training descriptors are identical; the mixture is degenerate");
    }

    let mut rng = seeded_rng(seed);
    let means: Vec<f64> = (0..k * dim).map(|_| rng.random_range(0.25..0.75)).collect();
    let mut model = BernoulliMixture::new(vec![1.0 / k as f64; k], means, dim)?;

    let mut loglik = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        let stats = model.expectation(sample);
        loglik.push(stats.loglik);

        let weights = floor_weights(&stats.s0, n as f64);
        let mut means = model.means.clone();
        for c in 0..k {
            if stats.s0[c] > 0.0 {
                for d in 0..dim {
                    means[c * dim + d] = stats.s1[c * dim + d] / stats.s0[c];
                }
            }
        }
        let next = BernoulliMixture::new(weights, means, dim)?;
        let shift = mean_shift(&next.means, &model.means);
        model = next;
        iterations += 1;
        if shift < eps {
            converged = true;
            break;
        }
    }
    loglik.push(model.expectation(sample).loglik);

    Ok(EmFit {
        model,
        loglik,
        iterations,
        converged,
    })
}

/// Mixture of axis-aligned Gaussians.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    // log w_k - 0.5 * sum_d log(2 pi var_kd)
    log_norm: Vec<f64>,
    inv_var: Vec<f64>,
}

impl PartialEq for GaussianMixture {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.weights == other.weights && self.means == other.means && self.variances == other.variances
    }
}

impl GaussianMixture {
    /// `means` and `variances` are K x D row-major; variances are floored at
    /// [`VARIANCE_FLOOR`].
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>, dim: usize) -> Result<Self> {
        validate_weights(&weights)?;
        if dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        check_dim(weights.len() * dim, means.len())?;
        check_dim(weights.len() * dim, variances.len())?;
        if means.iter().chain(&variances).any(|v| !v.is_finite()) {
            return Err(Error::invalid("means", "non-finite Gaussian parameter"));
        }
        let variances: Vec<f64> = variances.into_iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
        let log_norm = weights
            .iter()
            .zip(variances.chunks_exact(dim))
            .map(|(w, row)| w.ln() - 0.5 * row.iter().map(|v| (2.0 * std::f64::consts::PI * v).ln()).sum::<f64>())
            .collect();
        let inv_var = variances.iter().map(|v| 1.0 / v).collect();
        Ok(GaussianMixture {
            dim,
            weights,
            means,
            variances,
            log_norm,
            inv_var,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn mean_row(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn variance_row(&self, k: usize) -> &[f64] {
        &self.variances[k * self.dim..(k + 1) * self.dim]
    }

    pub fn component_logprob(&self, k: usize, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        if k >= self.k() {
            return Err(Error::invalid("k", format!("component {k} out of range")));
        }
        Ok(self.log_joint_component(k, x) - self.weights[k].ln())
    }

    #[inline]
    fn log_joint_component(&self, k: usize, x: &[f64]) -> f64 {
        let range = k * self.dim..(k + 1) * self.dim;
        let quad: f64 = x
            .iter()
            .zip(&self.means[range.clone()])
            .zip(&self.inv_var[range])
            .map(|((x, m), iv)| (x - m) * (x - m) * iv)
            .sum();
        self.log_norm[k] - 0.5 * quad
    }

    #[inline]
    pub(crate) fn posteriors(&self, x: &[f64], gamma: &mut [f64]) -> f64 {
        for (k, g) in gamma.iter_mut().enumerate() {
            *g = self.log_joint_component(k, x);
        }
        normalize_log_joint(gamma)
    }

    pub fn occupancy(&self, x: &[f64]) -> Result<OccupancyRow> {
        check_dim(self.dim, x.len())?;
        let mut gamma = vec![0.0; self.k()];
        self.posteriors(x, &mut gamma);
        Ok(OccupancyRow(gamma))
    }

    pub fn loglik(&self, sample: &RealMatrix) -> Result<f64> {
        if sample.rows() == 0 {
            return Ok(0.0);
        }
        check_dim(self.dim, sample.cols())?;
        Ok(self.expectation(sample).loglik)
    }

    fn expectation(&self, sample: &RealMatrix) -> GmmStats {
        let (k, dim) = (self.k(), self.dim);
        let parts = map_chunks(sample.rows(), ROW_CHUNK, |range| {
            let mut stats = GmmStats::zeros(k, dim);
            let mut gamma = vec![0.0; k];
            for i in range {
                let x = sample.row(i);
                stats.loglik_sum.add(self.posteriors(x, &mut gamma));
                for (c, &g) in gamma.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    stats.s0[c] += g;
                    for (d, &v) in x.iter().enumerate() {
                        stats.s1[c * dim + d] += g * v;
                        stats.s2[c * dim + d] += g * v * v;
                    }
                }
            }
            stats
        });
        let mut total = GmmStats::zeros(k, dim);
        for p in parts {
            total.merge(&p);
        }
        total.loglik = total.loglik_sum.value();
        total
    }
}

struct GmmStats {
    s0: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    loglik_sum: CompensatedSum,
    loglik: f64,
}

impl GmmStats {
    fn zeros(k: usize, dim: usize) -> Self {
        GmmStats {
            s0: vec![0.0; k],
            s1: vec![0.0; k * dim],
            s2: vec![0.0; k * dim],
            loglik_sum: CompensatedSum::default(),
            loglik: 0.0,
        }
    }

    fn merge(&mut self, other: &GmmStats) {
        self.s0.iter_mut().zip(&other.s0).for_each(|(a, b)| *a += b);
        self.s1.iter_mut().zip(&other.s1).for_each(|(a, b)| *a += b);
        self.s2.iter_mut().zip(&other.s2).for_each(|(a, b)| *a += b);
        self.loglik_sum.merge(other.loglik_sum);
    }
}

/// Fits a diagonal GMM.
///
/// Means start at k-means centroids (same seed). Every component starts with
/// the same per-dimension variance: the within-cluster variance of the
/// k-means partition averaged over clusters. Weights start uniform.
pub fn gmm_fit_em(sample: &RealMatrix, k: usize, seed: u64, eps: f64, max_iters: usize) -> Result<EmFit<GaussianMixture>> {
    let (n, dim) = (sample.rows(), sample.cols());
    if k == 0 {
        return Err(Error::invalid("k", "must be positive"));
    }
    if n < k {
        return Err(Error::InsufficientSample { needed: k, got: n });
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("eps", "must be positive"));
    }

    let km = clustering::kmeans(sample, k, clustering::DEFAULT_MAX_ITERS, seed)?;
    let vocab = &km.vocabulary;
    let means: Vec<f64> = (0..k).flat_map(|c| vocab.centroid_real(c)).collect();
    let mut sq = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for x in sample.iter() {
        let c = vocab.assign_real(x)?;
        counts[c] += 1;
        for d in 0..dim {
            let r = x[d] - means[c * dim + d];
            sq[c * dim + d] += r * r;
        }
    }
    let populated = counts.iter().filter(|&&c| c > 0).count().max(1) as f64;
    let shared: Vec<f64> = (0..dim)
        .map(|d| {
            (0..k)
                .filter(|&c| counts[c] > 0)
                .map(|c| sq[c * dim + d] / counts[c] as f64)
                .sum::<f64>()
                / populated
        })
        .collect();
    let variances: Vec<f64> = (0..k).flat_map(|_| shared.iter().copied()).collect();
    let mut model = GaussianMixture::new(vec![1.0 / k as f64; k], means, variances, dim)?;

    let mut loglik = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        let stats = model.expectation(sample);
        loglik.push(stats.loglik);

        let weights = floor_weights(&stats.s0, n as f64);
        let mut means = model.means.clone();
        let mut variances = model.variances.clone();
        for c in 0..k {
            if stats.s0[c] > 0.0 {
                for d in 0..dim {
                    let i = c * dim + d;
                    let m = stats.s1[i] / stats.s0[c];
                    means[i] = m;
                    variances[i] = (stats.s2[i] / stats.s0[c] - m * m).max(0.0);
                }
            }
        }
        let next = GaussianMixture::new(weights, means, variances, dim)?;
        let shift = mean_shift(&next.means, &model.means);
        model = next;
        iterations += 1;
        if shift < eps {
            converged = true;
            break;
        }
    }
    loglik.push(model.expectation(sample).loglik);

    Ok(EmFit {
        model,
        loglik,
        iterations,
        converged,
    })
}
