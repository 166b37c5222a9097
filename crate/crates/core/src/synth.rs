//! Synthetic data: descriptor sampling from Bernoulli mixtures and labelled
//! corpora with leave-one-out ground truth.

use rand::Rng;

use crate::descriptor::PackedDescriptorSet;
use crate::encode::{VectorKind, VectorSet};
use crate::error::{Error, Result};
use crate::mixture::BernoulliMixture;
use crate::retrieval::{GroundTruth, QueryTruth};
use crate::seeded_rng;

/// `n_images` images of `per_image` descriptors each, ids `img00000`...
pub fn sample_images(model: &BernoulliMixture, n_images: usize, per_image: usize, seed: u64) -> Result<Vec<PackedDescriptorSet>> {
    let mut rng = seeded_rng(seed);
    (0..n_images)
        .map(|i| model.sample_descriptors(&format!("img{i:05}"), per_image, &mut rng))
        .collect()
}

/// A mixture whose means are `low` or `1 - low` following random bit
/// patterns: components are well separated and each descriptor's
/// occupancy concentrates on one component.
pub fn peaked_bmm(weights: Vec<f64>, dim: usize, low: f64, seed: u64) -> Result<BernoulliMixture> {
    if !(low > 0.0 && low < 0.5) {
        return Err(Error::invalid("low", format!("{low} must lie in (0, 0.5)")));
    }
    let mut rng = seeded_rng(seed);
    let k = weights.len();
    let means = (0..k * dim).map(|_| if rng.random_bool(0.5) { 1.0 - low } else { low }).collect();
    BernoulliMixture::new(weights, means, dim)
}

/// Shape of a labelled synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub descriptors_per_image: usize,
    pub dim: usize,
    /// Components of every class mixture.
    pub components_per_class: usize,
    /// Size of the pool of bit patterns the class components draw from.
    pub shared_patterns: usize,
    /// Bernoulli means sit at `peak` or `1 - peak` on pattern dimensions.
    pub peak: f64,
    /// Fraction of dimensions (fixed per corpus) that are near-constant
    /// background bits: one shared value, with a sharpness drawn per class
    /// component from `sharp_range`.
    pub sharp_fraction: f64,
    pub sharp_range: (f64, f64),
    /// Probability that a class component flips a bit of its pattern.
    pub class_flip: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            classes: 10,
            images_per_class: 20,
            descriptors_per_image: 100,
            dim: 64,
            components_per_class: 4,
            shared_patterns: 8,
            peak: 0.85,
            sharp_fraction: 0.0,
            sharp_range: (0.97, 0.999),
            class_flip: 0.15,
        }
    }
}

/// Images labelled by class.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub images: Vec<PackedDescriptorSet>,
    pub labels: Vec<usize>,
    pub class_models: Vec<BernoulliMixture>,
}

impl Corpus {
    /// Every image is a query; its positives are the other images of its
    /// class, and it is removed from its own ranking.
    pub fn leave_one_out(&self) -> Result<GroundTruth> {
        let queries = self
            .images
            .iter()
            .zip(&self.labels)
            .map(|(img, &label)| {
                let positives = self
                    .images
                    .iter()
                    .zip(&self.labels)
                    .filter(|(other, l)| **l == label && other.image_id() != img.image_id())
                    .map(|(other, _)| other.image_id().to_string());
                QueryTruth::new(img.image_id(), positives, Vec::<String>::new(), true)
            })
            .collect::<Result<Vec<_>>>()?;
        GroundTruth::new(queries)
    }

    /// Pools every image's descriptors, e.g. as a training sample.
    pub fn pooled(&self) -> Result<PackedDescriptorSet> {
        PackedDescriptorSet::pool("pooled", &self.images)
    }
}

/// Class mixtures are built from a shared pool of bit patterns (so classes
/// overlap at the descriptor level) with class-specific flips and weights.
pub fn class_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    if spec.classes == 0 || spec.images_per_class == 0 || spec.components_per_class == 0 || spec.shared_patterns == 0 {
        return Err(Error::invalid("corpus", "counts must be positive"));
    }
    if !(spec.peak > 0.5 && spec.peak < 1.0) {
        return Err(Error::invalid("peak", format!("{} must lie in (0.5, 1)", spec.peak)));
    }
    let (sharp_lo, sharp_hi) = spec.sharp_range;
    if !(sharp_lo > 0.5 && sharp_lo <= sharp_hi && sharp_hi < 1.0) {
        return Err(Error::invalid("sharp_range", format!("{:?} must be an interval inside (0.5, 1)", spec.sharp_range)));
    }
    if !(0.0..=1.0).contains(&spec.class_flip) || !(0.0..=1.0).contains(&spec.sharp_fraction) {
        return Err(Error::invalid("class_flip", "must be a probability"));
    }
    let mut rng = seeded_rng(seed);
    let dim = spec.dim;
    let patterns: Vec<Vec<bool>> = (0..spec.shared_patterns)
        .map(|_| (0..dim).map(|_| rng.random_bool(0.5)).collect())
        .collect();
    let sharp: Vec<bool> = (0..dim).map(|_| rng.random_bool(spec.sharp_fraction)).collect();
    let background: Vec<bool> = (0..dim).map(|_| rng.random_bool(0.5)).collect();

    let mut class_models = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let raw: Vec<f64> = (0..spec.components_per_class).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let mut means = Vec::with_capacity(spec.components_per_class * dim);
        for _ in 0..spec.components_per_class {
            let base = &patterns[rng.random_range(0..spec.shared_patterns)];
            for (d, &b) in base.iter().enumerate() {
                let (bit, p) = if sharp[d] {
                    (background[d], rng.random_range(sharp_lo..=sharp_hi))
                } else {
                    (b ^ rng.random_bool(spec.class_flip), spec.peak)
                };
                means.push(if bit { p } else { 1.0 - p });
            }
        }
        let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        // absorb rounding so the weights sum to one exactly enough
        let drift: f64 = 1.0 - weights.iter().sum::<f64>();
        weights[0] += drift;
        class_models.push(BernoulliMixture::new(weights, means, dim)?);
    }

    let mut images = Vec::with_capacity(spec.classes * spec.images_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for (c, model) in class_models.iter().enumerate() {
        for i in 0..spec.images_per_class {
            images.push(model.sample_descriptors(&format!("c{c:02}_{i:03}"), spec.descriptors_per_image, &mut rng)?);
            labels.push(c);
        }
    }
    Ok(Corpus {
        images,
        labels,
        class_models,
    })
}

/// Unit-norm stand-ins for CNN features: a random direction per class plus
/// isotropic noise of the given scale.
pub fn class_cnn_features(ids: &[String], labels: &[usize], dim: usize, noise: f64, seed: u64) -> Result<VectorSet> {
    if ids.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: ids.len(),
            found: labels.len(),
        });
    }
    let mut rng = seeded_rng(seed);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut set = VectorSet::new(VectorKind::Cnn, dim);
    for (id, &label) in ids.iter().zip(labels) {
        let v: Vec<f64> = centers[label].iter().map(|c| c + noise * rng.random_range(-1.0..1.0)).collect();
        set.push(id.clone(), &crate::postproc::l2_normalize(&v)?)?;
    }
    Ok(set)
}
