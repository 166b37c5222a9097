//! Normalization and PCA for global vectors.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::descriptor::{dot, norm, RealMatrix};
use crate::encode::{GlobalVector, VectorKind, VectorSet};
use crate::error::{check_dim, Error, Result};
use crate::seeded_rng;

pub const DEFAULT_BETA: f64 = 0.5;

/// Above this size (of the smaller of dimension and sample count) PCA
/// switches from an exact eigendecomposition to randomized subspace
/// iteration.
pub const EXACT_PCA_LIMIT: usize = 4096;
const OVERSAMPLE: usize = 10;
const POWER_ITERS: usize = 4;

/// Signed power `sign(x) |x|^beta`, `beta` in (0, 1].
pub fn power_law(v: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid("beta", format!("{beta} is outside (0, 1]")));
    }
    Ok(v.iter().map(|x| x.signum() * x.abs().powf(beta)).collect())
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    if !n.is_finite() {
        return Err(Error::Degenerate("vector norm is not finite".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// A linear projection onto the leading principal directions of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    input_dim: usize,
    output_dim: usize,
    mean: Vec<f64>,
    // output_dim x input_dim, orthonormal rows
    components: Vec<f64>,
    explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn new(mean: Vec<f64>, components: Vec<f64>, explained_variance: Vec<f64>) -> Result<Self> {
        let (input_dim, output_dim) = (mean.len(), explained_variance.len());
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::invalid("pca", "dimensions must be positive"));
        }
        if output_dim > input_dim {
            return Err(Error::invalid("pca", format!("output dim {output_dim} exceeds input dim {input_dim}")));
        }
        check_dim(input_dim * output_dim, components.len())?;
        if mean.iter().chain(&components).chain(&explained_variance).any(|x| !x.is_finite()) {
            return Err(Error::Degenerate("non-finite PCA parameter".into()));
        }
        Ok(PcaModel {
            input_dim,
            output_dim,
            mean,
            components,
            explained_variance,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Sample variance along each component, descending.
    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// `P (v - mean)`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim, v.len())?;
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok((0..self.output_dim).map(|i| dot(self.component(i), &centered)).collect())
    }
}

pub fn pca_apply(model: &PcaModel, v: &[f64]) -> Result<Vec<f64>> {
    model.apply(v)
}

/// Principal directions of `sample` by descending variance. Each direction
/// is signed so that its largest-magnitude entry is positive.
pub fn pca_train(sample: &RealMatrix, out_dim: usize, seed: u64) -> Result<PcaModel> {
    let (n, dim) = (sample.rows(), sample.cols());
    if out_dim == 0 {
        return Err(Error::invalid("out_dim", "must be positive"));
    }
    if out_dim > dim {
        return Err(Error::invalid("out_dim", format!("{out_dim} exceeds the input dimension {dim}")));
    }
    if n <= out_dim {
        return Err(Error::InsufficientSample { needed: out_dim + 1, got: n });
    }
    let mut mean = vec![0.0; dim];
    for row in sample.iter() {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, dim, |i, j| sample.row(i)[j] - mean[j]);
    let denom = (n - 1) as f64;

    let basis = if dim <= EXACT_PCA_LIMIT {
        let cov = (x.transpose() * &x) / denom;
        top_eigenvectors(cov, out_dim)
    } else if n <= EXACT_PCA_LIMIT {
        // the n x n Gram matrix has the same nonzero spectrum
        let gram = (&x * x.transpose()) / denom;
        let u = top_eigenvectors(gram, out_dim);
        x.transpose() * u
    } else {
        randomized_basis(&x, denom, out_dim, seed)
    };

    let mut components = orthonormalize(basis)?;
    for mut col in components.column_iter_mut() {
        let lead = col.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if lead < 0.0 {
            col.neg_mut();
        }
    }
    let projected = &x * &components;
    let mut order: Vec<(usize, f64)> = (0..out_dim)
        .map(|c| (c, projected.column(c).norm_squared() / denom))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut rows = Vec::with_capacity(out_dim * dim);
    for &(c, _) in &order {
        rows.extend(components.column(c).iter());
    }
    PcaModel::new(mean, rows, order.iter().map(|o| o.1).collect())
}

/// Eigenvectors (as columns) of a symmetric matrix for its `m` largest
/// eigenvalues.
fn top_eigenvectors(sym: DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(sym);
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    DMatrix::from_fn(eig.eigenvectors.nrows(), m, |i, j| eig.eigenvectors[(i, idx[j])])
}

/// Randomized range finder with power iterations on the covariance
/// `x^T x / denom`, followed by an exact eigendecomposition in the subspace.
fn randomized_basis(x: &DMatrix<f64>, denom: f64, m: usize, seed: u64) -> DMatrix<f64> {
    let dim = x.ncols();
    let l = (m + OVERSAMPLE).min(dim);
    let mut rng = seeded_rng(seed);
    let omega = DMatrix::from_fn(dim, l, |_, _| rng.random_range(-1.0..1.0));
    let cov_times = |q: &DMatrix<f64>| (x.transpose() * (x * q)) / denom;
    let mut q = cov_times(&omega).qr().q();
    for _ in 0..POWER_ITERS {
        q = cov_times(&q).qr().q();
    }
    let b = q.transpose() * cov_times(&q);
    let b = (&b + b.transpose()) * 0.5;
    &q * top_eigenvectors(b, m)
}

/// Modified Gram-Schmidt over columns. A column that collapses (the sample
/// spans too few directions) is replaced by a unit vector orthogonal to the
/// earlier ones.
fn orthonormalize(mut basis: DMatrix<f64>) -> Result<DMatrix<f64>> {
    for j in 0..basis.ncols() {
        for _ in 0..2 {
            for i in 0..j {
                let proj = basis.column(i).dot(&basis.column(j));
                let prev = basis.column(i).clone_owned();
                basis.column_mut(j).axpy(-proj, &prev, 1.0);
            }
        }
        let n = basis.column(j).norm();
        if !(n > 1e-12) || !n.is_finite() {
            // pad with any unit vector orthogonal to the previous ones
            let dim = basis.nrows();
            let mut filled = false;
            for e in 0..dim {
                let mut cand = DMatrix::<f64>::zeros(dim, 1);
                cand[(e, 0)] = 1.0;
                for i in 0..j {
                    let proj = basis.column(i).dot(&cand.column(0));
                    let prev = basis.column(i).clone_owned();
                    cand.column_mut(0).axpy(-proj, &prev, 1.0);
                }
                let cn = cand.column(0).norm();
                if cn > 1e-6 {
                    basis.set_column(j, &(cand.column(0) / cn));
                    filled = true;
                    break;
                }
            }
            if !filled {
                return Err(Error::Degenerate("could not complete an orthonormal PCA basis".into()));
            }
        } else {
            basis.column_mut(j).scale_mut(1.0 / n);
        }
    }
    Ok(basis)
}

/// Whether power-law normalization runs before or after the PCA projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StageOrder {
    #[default]
    PowerFirst,
    PcaFirst,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostprocOptions {
    pub beta: f64,
    /// L2-normalize again after the PCA projection.
    pub renorm: bool,
    pub order: StageOrder,
}

impl Default for PostprocOptions {
    fn default() -> Self {
        PostprocOptions {
            beta: DEFAULT_BETA,
            renorm: true,
            order: StageOrder::PowerFirst,
        }
    }
}

/// Power law, L2, then optionally PCA and a final L2. A zero input (an image
/// without descriptors) comes out as a zero vector of the output dimension.
pub fn postprocess(values: &[f64], pca: Option<&PcaModel>, opts: PostprocOptions) -> Result<Vec<f64>> {
    let out_dim = pca.map_or(values.len(), |p| p.output_dim());
    if values.iter().all(|v| *v == 0.0) {
        warn!("zero vector passed through post-processing unchanged");
        return Ok(vec![0.0; out_dim]);
    }
    let zero_guard = |v: Vec<f64>| -> Result<Vec<f64>> {
        match l2_normalize(&v) {
            Err(Error::ZeroVector) => {
                warn!("vector vanished during post-processing; emitting zeros");
                Ok(v)
            }
            other => other,
        }
    };
    match (opts.order, pca) {
        (_, None) => l2_normalize(&power_law(values, opts.beta)?),
        (StageOrder::PowerFirst, Some(p)) => {
            let v = l2_normalize(&power_law(values, opts.beta)?)?;
            let reduced = p.apply(&v)?;
            if opts.renorm {
                zero_guard(reduced)
            } else {
                Ok(reduced)
            }
        }
        (StageOrder::PcaFirst, Some(p)) => {
            let reduced = p.apply(values)?;
            zero_guard(power_law(&reduced, opts.beta)?)
        }
    }
}

/// Default pipeline on one vector; the result is unit-norm unless the input
/// was zero.
pub fn standard_pipeline(raw: &GlobalVector, pca: Option<&PcaModel>) -> Result<GlobalVector> {
    Ok(GlobalVector {
        kind: if pca.is_some() { VectorKind::PcaReduced } else { raw.kind },
        values: postprocess(&raw.values, pca, PostprocOptions::default())?,
        provenance: raw.provenance,
    })
}

pub fn postprocess_set(set: &VectorSet, pca: Option<&PcaModel>, opts: PostprocOptions) -> Result<VectorSet> {
    let out_dim = pca.map_or(set.dim(), |p| p.output_dim());
    let kind = if pca.is_some() { VectorKind::PcaReduced } else { set.kind() };
    let mut out = VectorSet::new(kind, out_dim);
    for (id, row) in set.iter() {
        out.push(id, &postprocess(row, pca, opts)?)?;
    }
    Ok(out)
}
