//! Global image signatures: BoW histograms, VLAD, and Fisher vectors under a
//! Gaussian or a Bernoulli mixture.
//!
//! Encoders return raw vectors; power-law/L2/PCA live in [`crate::postproc`].

use std::fmt;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::clustering::Vocabulary;
use crate::descriptor::{unpack_into, PackedDescriptorSet, RealMatrix};
use crate::error::{check_dim, Error, Result};
use crate::mixture::{BernoulliMixture, GaussianMixture};

/// Occupancies below this are treated as zero when accumulating Fisher
/// vector statistics.
pub const OCCUPANCY_SKIP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VectorKind {
    Bow,
    Vlad,
    FvBmm,
    FvGmm,
    Cnn,
    PcaReduced,
}

impl VectorKind {
    pub const ALL: [VectorKind; 6] = [
        VectorKind::Bow,
        VectorKind::Vlad,
        VectorKind::FvBmm,
        VectorKind::FvGmm,
        VectorKind::Cnn,
        VectorKind::PcaReduced,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VectorKind::Bow => "bow",
            VectorKind::Vlad => "vlad",
            VectorKind::FvBmm => "fv-bmm",
            VectorKind::FvGmm => "fv-gmm",
            VectorKind::Cnn => "cnn",
            VectorKind::PcaReduced => "pca-reduced",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            VectorKind::Bow => 0,
            VectorKind::Vlad => 1,
            VectorKind::FvBmm => 2,
            VectorKind::FvGmm => 3,
            VectorKind::Cnn => 4,
            VectorKind::PcaReduced => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

impl fmt::Display for VectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("kind", format!("unknown vector kind `{s}`")))
    }
}

/// One image signature. `provenance` fingerprints the encoder (method,
/// options and model parameters) that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalVector {
    pub kind: VectorKind,
    pub values: Vec<f64>,
    pub provenance: u64,
}

impl GlobalVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Signatures of many images, all of one kind and dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorSet {
    kind: VectorKind,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
}

impl VectorSet {
    pub fn new(kind: VectorKind, dim: usize) -> Self {
        VectorSet {
            kind,
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, values: &[f64]) -> Result<()> {
        check_dim(self.dim, values.len())?;
        self.ids.push(id.into());
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn kind(&self) -> VectorKind {
        self.kind
    }

    pub fn set_kind(&mut self, kind: VectorKind) {
        self.kind = kind;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&str, &[f64])> + '_ {
        (0..self.len()).map(|i| (self.id(i), self.row(i)))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Rows as a matrix (ids dropped).
    pub fn to_matrix(&self) -> RealMatrix {
        let mut m = RealMatrix::new(self.dim);
        for i in 0..self.len() {
            m.push_row(self.row(i)).expect("row width is the set dimension");
        }
        m
    }
}

/// Which optional Fisher vector blocks to emit and how to accumulate them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FvOptions {
    /// Prepend the K mixing-weight gradients.
    pub include_weights: bool,
    /// Append the K*D standard-deviation gradients (GMM only).
    pub include_variances: bool,
    /// Accumulate zeroth/first(/second) order statistics in one pass and
    /// form the gradients afterwards.
    pub stats_form: bool,
}

#[derive(Clone, Copy, Debug)]
enum Model<'a> {
    Bow(&'a Vocabulary),
    Vlad(&'a Vocabulary),
    FvBmm(&'a BernoulliMixture),
    FvGmm(&'a GaussianMixture),
}

/// An encoder bound to a trained model.
#[derive(Clone, Debug)]
pub struct Encoder<'a> {
    model: Model<'a>,
    options: FvOptions,
    provenance: u64,
    // unpacked centroids, VLAD only
    centroids: Option<RealMatrix>,
}

struct Fingerprint(Sha256);

impl Fingerprint {
    fn new(kind: VectorKind, options: FvOptions) -> Self {
        let mut h = Sha256::new();
        h.update(kind.name().as_bytes());
        h.update([options.include_weights as u8, options.include_variances as u8]);
        Fingerprint(h)
    }

    fn usize(&mut self, v: usize) -> &mut Self {
        self.0.update((v as u64).to_le_bytes());
        self
    }

    fn floats(&mut self, v: &[f64]) -> &mut Self {
        for x in v {
            self.0.update(x.to_le_bytes());
        }
        self
    }

    fn finish(self) -> u64 {
        let digest = self.0.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
    }
}

fn vocabulary_fingerprint(kind: VectorKind, v: &Vocabulary) -> u64 {
    let mut f = Fingerprint::new(kind, FvOptions::default());
    f.0.update(v.method().name().as_bytes());
    f.usize(v.k()).usize(v.dim());
    match v.centroids() {
        crate::clustering::Centroids::Real(m) => {
            f.floats(m.as_slice());
        }
        crate::clustering::Centroids::Binary(s) => {
            for w in s.raw_words() {
                f.0.update(w.to_le_bytes());
            }
        }
    }
    f.finish()
}

impl<'a> Encoder<'a> {
    pub fn bow(vocabulary: &'a Vocabulary) -> Self {
        Encoder {
            model: Model::Bow(vocabulary),
            options: FvOptions::default(),
            provenance: vocabulary_fingerprint(VectorKind::Bow, vocabulary),
            centroids: None,
        }
    }

    pub fn vlad(vocabulary: &'a Vocabulary) -> Self {
        let rows: Vec<Vec<f64>> = (0..vocabulary.k()).map(|i| vocabulary.centroid_real(i)).collect();
        Encoder {
            model: Model::Vlad(vocabulary),
            options: FvOptions::default(),
            provenance: vocabulary_fingerprint(VectorKind::Vlad, vocabulary),
            centroids: Some(RealMatrix::from_rows(&rows).expect("centroids share one dimension")),
        }
    }

    pub fn fv_bmm(model: &'a BernoulliMixture, options: FvOptions) -> Result<Self> {
        if options.include_variances {
            return Err(Error::invalid("include_variances", "a Bernoulli mixture has no variance parameters"));
        }
        let mut f = Fingerprint::new(VectorKind::FvBmm, options);
        f.usize(model.k()).usize(model.dim()).floats(model.weights()).floats(model.means());
        Ok(Encoder {
            model: Model::FvBmm(model),
            options,
            provenance: f.finish(),
            centroids: None,
        })
    }

    pub fn fv_gmm(model: &'a GaussianMixture, options: FvOptions) -> Self {
        let mut f = Fingerprint::new(VectorKind::FvGmm, options);
        f.usize(model.k())
            .usize(model.dim())
            .floats(model.weights())
            .floats(model.means())
            .floats(model.variances());
        Encoder {
            model: Model::FvGmm(model),
            options,
            provenance: f.finish(),
            centroids: None,
        }
    }

    pub fn kind(&self) -> VectorKind {
        match self.model {
            Model::Bow(_) => VectorKind::Bow,
            Model::Vlad(_) => VectorKind::Vlad,
            Model::FvBmm(_) => VectorKind::FvBmm,
            Model::FvGmm(_) => VectorKind::FvGmm,
        }
    }

    /// Length of every vector this encoder produces.
    pub fn output_dim(&self) -> usize {
        let o = self.options;
        match self.model {
            Model::Bow(v) => v.k(),
            Model::Vlad(v) => v.k() * v.dim(),
            Model::FvBmm(m) => m.k() * (m.dim() + o.include_weights as usize),
            Model::FvGmm(m) => m.k() * (m.dim() * (1 + o.include_variances as usize) + o.include_weights as usize),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.model {
            Model::Bow(v) | Model::Vlad(v) => v.dim(),
            Model::FvBmm(m) => m.dim(),
            Model::FvGmm(m) => m.dim(),
        }
    }

    pub fn provenance(&self) -> u64 {
        self.provenance
    }

    pub fn encode(&self, img: &PackedDescriptorSet) -> Result<GlobalVector> {
        check_dim(self.input_dim(), img.dim_bits())?;
        let values = match self.model {
            Model::Bow(v) => bow_values(v, img)?,
            Model::Vlad(v) => vlad_values(v, self.centroids.as_ref().expect("built by Encoder::vlad"), img)?,
            Model::FvBmm(m) if self.options.stats_form => fv_bmm_stats_values(m, img, self.options)?,
            Model::FvBmm(m) => fv_bmm_direct_values(m, img, self.options)?,
            Model::FvGmm(m) => {
                let x = RealMatrix::from_packed(img);
                if self.options.stats_form {
                    fv_gmm_stats_values(m, &x, self.options)?
                } else {
                    fv_gmm_direct_values(m, &x, self.options)?
                }
            }
        };
        Ok(GlobalVector {
            kind: self.kind(),
            values,
            provenance: self.provenance,
        })
    }

    /// Fisher vector of an arbitrary real sample (GMM encoders only).
    pub fn encode_real(&self, x: &RealMatrix) -> Result<GlobalVector> {
        let Model::FvGmm(m) = self.model else {
            return Err(Error::invalid("method", "only GMM Fisher vectors accept real-valued descriptors"));
        };
        let values = if self.options.stats_form {
            fv_gmm_stats_values(m, x, self.options)?
        } else {
            fv_gmm_direct_values(m, x, self.options)?
        };
        Ok(GlobalVector {
            kind: VectorKind::FvGmm,
            values,
            provenance: self.provenance,
        })
    }

    /// Encodes every image in parallel; output order follows the input.
    pub fn encode_all(&self, images: &[PackedDescriptorSet]) -> Result<VectorSet> {
        let encoded: Vec<Result<GlobalVector>> = images.par_iter().map(|img| self.encode(img)).collect();
        let mut set = VectorSet::new(self.kind(), self.output_dim());
        for (img, v) in images.iter().zip(encoded) {
            set.push(img.image_id(), &v?.values)?;
        }
        Ok(set)
    }
}

/// Raw visual-word counts.
pub fn encode_bow(vocabulary: &Vocabulary, img: &PackedDescriptorSet) -> Result<GlobalVector> {
    Encoder::bow(vocabulary).encode(img)
}

/// Per-word sums of residuals `x - c`, binary centroids unpacked to 0/1.
pub fn encode_vlad(vocabulary: &Vocabulary, img: &PackedDescriptorSet) -> Result<GlobalVector> {
    Encoder::vlad(vocabulary).encode(img)
}

/// Bernoulli-mixture Fisher vector, accumulated descriptor by descriptor.
pub fn encode_fv_bmm(model: &BernoulliMixture, img: &PackedDescriptorSet, include_weights: bool) -> Result<GlobalVector> {
    let options = FvOptions {
        include_weights,
        ..FvOptions::default()
    };
    Encoder::fv_bmm(model, options)?.encode(img)
}

/// Same vector as [`encode_fv_bmm`], built from S0/S1 statistics.
pub fn encode_fv_bmm_stats(model: &BernoulliMixture, img: &PackedDescriptorSet, include_weights: bool) -> Result<GlobalVector> {
    let options = FvOptions {
        include_weights,
        stats_form: true,
        ..FvOptions::default()
    };
    Encoder::fv_bmm(model, options)?.encode(img)
}

/// Gaussian-mixture Fisher vector of an image's unpacked descriptors.
pub fn encode_fv_gmm(model: &GaussianMixture, img: &PackedDescriptorSet, options: FvOptions) -> Result<GlobalVector> {
    Encoder::fv_gmm(model, options).encode(img)
}

fn bow_values(v: &Vocabulary, img: &PackedDescriptorSet) -> Result<Vec<f64>> {
    if img.is_empty() {
        warn!("image `{}` has no descriptors; its histogram is all zeros", img.image_id());
    }
    let mut hist = vec![0.0; v.k()];
    for x in img.iter() {
        hist[v.assign(x)?] += 1.0;
    }
    Ok(hist)
}

fn vlad_values(v: &Vocabulary, centroids: &RealMatrix, img: &PackedDescriptorSet) -> Result<Vec<f64>> {
    let dim = v.dim();
    let mut out = vec![0.0; v.k() * dim];
    let mut x = vec![0.0; dim];
    for row in img.iter() {
        let c = v.assign(row)?;
        unpack_into(row, &mut x);
        let block = &mut out[c * dim..(c + 1) * dim];
        for ((o, xi), ci) in block.iter_mut().zip(&x).zip(centroids.row(c)) {
            *o += xi - ci;
        }
    }
    Ok(out)
}

fn require_descriptors(img_len: usize) -> Result<f64> {
    if img_len == 0 {
        Err(Error::EmptyImage)
    } else {
        Ok(img_len as f64)
    }
}

#[inline]
fn skip_small(g: f64) -> f64 {
    if g < OCCUPANCY_SKIP {
        0.0
    } else {
        g
    }
}

/// Lays out [alpha | mu | sigma] blocks.
fn assemble(alpha: Option<Vec<f64>>, mu: Vec<f64>, sigma: Option<Vec<f64>>) -> Vec<f64> {
    let mut out = alpha.unwrap_or_default();
    out.extend(mu);
    out.extend(sigma.unwrap_or_default());
    out
}

fn fv_bmm_direct_values(m: &BernoulliMixture, img: &PackedDescriptorSet, o: FvOptions) -> Result<Vec<f64>> {
    let t = require_descriptors(img.len())?;
    let (k, dim) = (m.k(), m.dim());
    let inv_sd: Vec<f64> = m.means().iter().map(|mu| 1.0 / (mu * (1.0 - mu)).sqrt()).collect();
    let mut alpha = vec![0.0; k];
    let mut mu = vec![0.0; k * dim];
    let mut gamma = vec![0.0; k];
    let mut ones = Vec::with_capacity(dim);
    let mut x = vec![0.0; dim];
    for row in img.iter() {
        ones.clear();
        ones.extend(row.ones());
        m.posteriors_from_ones(&ones, &mut gamma);
        unpack_into(row, &mut x);
        for c in 0..k {
            let g = skip_small(gamma[c]);
            alpha[c] += g - m.weights()[c];
            if g == 0.0 {
                continue;
            }
            let range = c * dim..(c + 1) * dim;
            for ((acc, (xd, md)), s) in mu[range.clone()]
                .iter_mut()
                .zip(x.iter().zip(&m.means()[range.clone()]))
                .zip(&inv_sd[range])
            {
                *acc += g * (xd - md) * s;
            }
        }
    }
    for c in 0..k {
        let scale = 1.0 / (t * m.weights()[c].sqrt());
        alpha[c] *= scale;
        mu[c * dim..(c + 1) * dim].iter_mut().for_each(|v| *v *= scale);
    }
    Ok(assemble(o.include_weights.then_some(alpha), mu, None))
}

fn fv_bmm_stats_values(m: &BernoulliMixture, img: &PackedDescriptorSet, o: FvOptions) -> Result<Vec<f64>> {
    let t = require_descriptors(img.len())?;
    let (k, dim) = (m.k(), m.dim());
    let mut s0 = vec![0.0; k];
    let mut s1 = vec![0.0; k * dim];
    let mut gamma = vec![0.0; k];
    let mut ones = Vec::with_capacity(dim);
    for row in img.iter() {
        ones.clear();
        ones.extend(row.ones());
        m.posteriors_from_ones(&ones, &mut gamma);
        for c in 0..k {
            let g = skip_small(gamma[c]);
            if g == 0.0 {
                continue;
            }
            s0[c] += g;
            for &d in &ones {
                s1[c * dim + d] += g;
            }
        }
    }
    let w = m.weights();
    let alpha: Vec<f64> = (0..k).map(|c| (s0[c] - t * w[c]) / (t * w[c].sqrt())).collect();
    let mu: Vec<f64> = (0..k * dim)
        .map(|i| {
            let c = i / dim;
            let mean = m.means()[i];
            (s1[i] - mean * s0[c]) / (t * (w[c] * mean * (1.0 - mean)).sqrt())
        })
        .collect();
    Ok(assemble(o.include_weights.then_some(alpha), mu, None))
}

fn fv_gmm_direct_values(m: &GaussianMixture, x: &RealMatrix, o: FvOptions) -> Result<Vec<f64>> {
    let t = require_descriptors(x.rows())?;
    check_dim(m.dim(), x.cols())?;
    let (k, dim) = (m.k(), m.dim());
    let inv_sd: Vec<f64> = m.variances().iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut alpha = vec![0.0; k];
    let mut mu = vec![0.0; k * dim];
    let mut sigma = vec![0.0; k * dim];
    let mut gamma = vec![0.0; k];
    for row in x.iter() {
        m.posteriors(row, &mut gamma);
        for c in 0..k {
            let g = skip_small(gamma[c]);
            alpha[c] += g - m.weights()[c];
            if g == 0.0 {
                continue;
            }
            for d in 0..dim {
                let i = c * dim + d;
                let z = (row[d] - m.means()[i]) * inv_sd[i];
                mu[i] += g * z;
                if o.include_variances {
                    sigma[i] += g * (z * z - 1.0) * std::f64::consts::FRAC_1_SQRT_2;
                }
            }
        }
    }
    for c in 0..k {
        let scale = 1.0 / (t * m.weights()[c].sqrt());
        alpha[c] *= scale;
        for d in 0..dim {
            mu[c * dim + d] *= scale;
            sigma[c * dim + d] *= scale;
        }
    }
    Ok(assemble(
        o.include_weights.then_some(alpha),
        mu,
        o.include_variances.then_some(sigma),
    ))
}

fn fv_gmm_stats_values(m: &GaussianMixture, x: &RealMatrix, o: FvOptions) -> Result<Vec<f64>> {
    let t = require_descriptors(x.rows())?;
    check_dim(m.dim(), x.cols())?;
    let (k, dim) = (m.k(), m.dim());
    let mut s0 = vec![0.0; k];
    let mut s1 = vec![0.0; k * dim];
    let mut s2 = vec![0.0; k * dim];
    let mut gamma = vec![0.0; k];
    for row in x.iter() {
        m.posteriors(row, &mut gamma);
        for c in 0..k {
            let g = skip_small(gamma[c]);
            if g == 0.0 {
                continue;
            }
            s0[c] += g;
            for d in 0..dim {
                s1[c * dim + d] += g * row[d];
                s2[c * dim + d] += g * row[d] * row[d];
            }
        }
    }
    let w = m.weights();
    let alpha: Vec<f64> = (0..k).map(|c| (s0[c] - t * w[c]) / (t * w[c].sqrt())).collect();
    let mut mu = vec![0.0; k * dim];
    let mut sigma = vec![0.0; k * dim];
    for c in 0..k {
        let scale = 1.0 / (t * w[c].sqrt());
        for d in 0..dim {
            let i = c * dim + d;
            let (mean, var) = (m.means()[i], m.variances()[i]);
            mu[i] = (s1[i] - mean * s0[c]) / var.sqrt() * scale;
            let centered = s2[i] - 2.0 * mean * s1[i] + mean * mean * s0[c];
            sigma[i] = (centered / var - s0[c]) * std::f64::consts::FRAC_1_SQRT_2 * scale;
        }
    }
    Ok(assemble(
        o.include_weights.then_some(alpha),
        mu,
        o.include_variances.then_some(sigma),
    ))
}

/// Unnormalized gradients of the sample log-likelihood of a Bernoulli
/// mixture: with respect to the soft-max weight parameters and the means.
#[derive(Clone, Debug, PartialEq)]
pub struct BmmScores {
    /// `sum_t (gamma_t(k) - w_k)`, length K.
    pub alpha: Vec<f64>,
    /// `sum_t gamma_t(k) (x_td - mu_kd) / (mu_kd (1 - mu_kd))`, K x D.
    pub mu: Vec<f64>,
}

/// Exact scores, no occupancy skipping.
pub fn bmm_scores(m: &BernoulliMixture, img: &PackedDescriptorSet) -> Result<BmmScores> {
    check_dim(m.dim(), img.dim_bits())?;
    let (k, dim) = (m.k(), m.dim());
    let mut alpha = vec![0.0; k];
    let mut mu = vec![0.0; k * dim];
    let mut gamma = vec![0.0; k];
    let mut ones = Vec::with_capacity(dim);
    for row in img.iter() {
        ones.clear();
        ones.extend(row.ones());
        m.posteriors_from_ones(&ones, &mut gamma);
        for c in 0..k {
            alpha[c] += gamma[c] - m.weights()[c];
            for d in 0..dim {
                let mean = m.means()[c * dim + d];
                let xd = if row.bit(d) { 1.0 } else { 0.0 };
                mu[c * dim + d] += gamma[c] * (xd - mean) / (mean * (1.0 - mean));
            }
        }
    }
    Ok(BmmScores { alpha, mu })
}
