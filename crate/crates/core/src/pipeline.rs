//! End-to-end runs: train, encode, post-process, rank, evaluate.
//!
//! [`run_pipeline`] writes into the configured output directory:
//!
//! | file | content |
//! |---|---|
//! | `model.voc` / `model.bmm` / `model.gmm` | the learned model |
//! | `pca.pca1` | when `pca_dim` is set |
//! | `db.gvec`, `queries.gvec` | final signatures |
//! | `rankings.tsv` | `query rank id score`, one line per database item |
//! | `report.txt` | per-query AP and mAP |
//! | `manifest.txt` | resolved config and SHA-256 of every input and output |
//!
//! All outputs are byte-identical across reruns and thread counts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use sha2::{Digest, Sha256};

use crate::clustering::{kmajority, kmeans, kmedoids, LearningMethod, Vocabulary};
use crate::config::{Method, PipelineConfig};
use crate::descriptor::{PackedDescriptorSet, RealMatrix};
use crate::encode::{Encoder, FvOptions, VectorKind, VectorSet};
use crate::error::{Error, Result};
use crate::io;
use crate::mixture::{bmm_fit_em, gmm_fit_em, BernoulliMixture, GaussianMixture};
use crate::postproc::{l2_normalize, pca_train, postprocess_set, PcaModel, PostprocOptions, StageOrder};
use crate::retrieval::{
    evaluate, fused_distance, rank_bow, rank_direct, rank_euclidean, rank_fused, run_queries, tfidf_weights, Direction, Evaluation,
    FusedSide, GroundTruth, Rescale, RetrievalRun,
};

/// A learned model of any kind.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Vocabulary(Vocabulary),
    Bmm(BernoulliMixture),
    Gmm(GaussianMixture),
}

impl TrainedModel {
    pub fn file_name(&self) -> &'static str {
        match self {
            TrainedModel::Vocabulary(_) => "model.voc",
            TrainedModel::Bmm(_) => "model.bmm",
            TrainedModel::Gmm(_) => "model.gmm",
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match self {
            TrainedModel::Vocabulary(v) => io::encode_vocabulary(v),
            TrainedModel::Bmm(m) => io::encode_bmm(m),
            TrainedModel::Gmm(m) => io::encode_gmm(m),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes()?)
    }

    /// Reads any model file, dispatching on its magic.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = io::read_file(path)?;
        if bytes.starts_with(io::VOC_MAGIC) {
            io::decode_vocabulary(&bytes, path).map(TrainedModel::Vocabulary)
        } else if bytes.starts_with(io::BMM_MAGIC) {
            io::decode_bmm(&bytes, path).map(TrainedModel::Bmm)
        } else if bytes.starts_with(io::GMM_MAGIC) {
            io::decode_gmm(&bytes, path).map(TrainedModel::Gmm)
        } else {
            Err(Error::Parse {
                file: path.to_path_buf(),
                offset: 0,
                expected: "magic VOC1, BMM1 or GMM1".into(),
            })
        }
    }

    /// The encoder for `method`, or an error when the model cannot drive it.
    pub fn encoder(&self, method: Method, options: FvOptions) -> Result<Encoder<'_>> {
        match (method, self) {
            (Method::Bow, TrainedModel::Vocabulary(v)) => Ok(Encoder::bow(v)),
            (Method::Vlad, TrainedModel::Vocabulary(v)) => Ok(Encoder::vlad(v)),
            (Method::FvBmm, TrainedModel::Bmm(m)) => Encoder::fv_bmm(m, options),
            (Method::FvGmm, TrainedModel::Gmm(m)) => Ok(Encoder::fv_gmm(m, options)),
            (m, model) => Err(Error::invalid(
                "model",
                format!("method `{m}` cannot use a {} file", &model.file_name()[6..]),
            )),
        }
    }
}

pub fn train_vocabulary(method: LearningMethod, sample: &PackedDescriptorSet, k: usize, seed: u64) -> Result<Vocabulary> {
    let max_iters = crate::clustering::DEFAULT_MAX_ITERS;
    let fit = match method {
        LearningMethod::KMeans => kmeans(&RealMatrix::from_packed(sample), k, max_iters, seed)?,
        LearningMethod::KMajority => kmajority(sample, k, max_iters, seed)?,
        LearningMethod::KMedoids => kmedoids(sample, k, max_iters, seed)?,
    };
    if !fit.converged {
        warn!("{} stopped after {} iterations without converging", method.name(), fit.iterations);
    }
    Ok(fit.vocabulary)
}

pub fn train_bmm(sample: &PackedDescriptorSet, k: usize, seed: u64, eps: f64) -> Result<BernoulliMixture> {
    let fit = bmm_fit_em(sample, k, seed, eps, crate::mixture::DEFAULT_MAX_ITERS)?;
    if !fit.converged {
        warn!("BMM EM stopped after {} iterations without converging", fit.iterations);
    }
    info!("BMM EM: {} iterations, final log-likelihood {:.6}", fit.iterations, fit.loglik.last().copied().unwrap_or(f64::NAN));
    Ok(fit.model)
}

pub fn train_gmm(sample: &PackedDescriptorSet, k: usize, seed: u64, eps: f64) -> Result<GaussianMixture> {
    let fit = gmm_fit_em(&RealMatrix::from_packed(sample), k, seed, eps, crate::mixture::DEFAULT_MAX_ITERS)?;
    if !fit.converged {
        warn!("GMM EM stopped after {} iterations without converging", fit.iterations);
    }
    info!("GMM EM: {} iterations, final log-likelihood {:.6}", fit.iterations, fit.loglik.last().copied().unwrap_or(f64::NAN));
    Ok(fit.model)
}

/// CNN features are expected unit-norm already; normalize again in case
/// they were stored at reduced precision or by another tool.
pub fn renormalize_cnn(set: &VectorSet) -> Result<VectorSet> {
    if set.kind() != VectorKind::Cnn {
        return Ok(set.clone());
    }
    let mut out = VectorSet::new(VectorKind::Cnn, set.dim());
    for (id, row) in set.iter() {
        let v = l2_normalize(row).map_err(|_| Error::Degenerate(format!("CNN feature `{id}` is zero")))?;
        out.push(id, &v)?;
    }
    Ok(out)
}

/// CNN signatures to blend with the vector distance.
#[derive(Clone, Copy, Debug)]
pub struct Fusion<'a> {
    pub cnn_db: &'a VectorSet,
    pub cnn_queries: &'a VectorSet,
    pub alpha: f64,
    pub rescale: Rescale,
}

/// Ranks `db` for every query vector: tf-idf cosine for BoW sets,
/// Euclidean distance otherwise, or the fused distance when `fusion` is
/// given (queries and database are paired with CNN rows by id).
pub fn retrieve(db: &VectorSet, queries: &VectorSet, fusion: Option<Fusion<'_>>) -> Result<RetrievalRun> {
    crate::error::check_dim(db.dim(), queries.dim())?;
    let ids = queries.ids();
    if let Some(f) = fusion {
        if db.kind() == VectorKind::Bow {
            return Err(Error::invalid("fuse", "BoW histograms cannot be fused; use a VLAD or FV set"));
        }
        let side = FusedSide {
            cnn: f.cnn_db,
            fv: db,
        };
        return run_queries(ids, Direction::AscendingDistance, |i| {
            let qc = f
                .cnn_queries
                .position(&ids[i])
                .ok_or_else(|| Error::invalid("fuse", format!("query `{}` has no CNN feature", ids[i])))?;
            rank_fused(f.cnn_queries.row(qc), queries.row(i), side, f.alpha, f.rescale)
        });
    }
    if db.kind() == VectorKind::Bow {
        let idf = tfidf_weights(db.iter().map(|(_, r)| r))?;
        run_queries(ids, Direction::DescendingSimilarity, |i| rank_bow(queries.row(i), db, &idf))
    } else {
        run_queries(ids, Direction::AscendingDistance, |i| rank_euclidean(queries.row(i), db))
    }
}

/// Fused distance for every unordered pair of images, pairing the CNN and
/// FV rows by id. Pairs follow the FV file order.
pub fn fused_pairs(cnn: &VectorSet, fv: &VectorSet, alpha: f64) -> Result<Vec<(String, String, f64)>> {
    if cnn.len() != fv.len() {
        return Err(Error::invalid("fuse", "CNN and FV files list different images"));
    }
    let cnn_rows = fv
        .ids()
        .iter()
        .map(|id| {
            cnn.position(id)
                .map(|i| cnn.row(i))
                .ok_or_else(|| Error::invalid("fuse", format!("`{id}` has no CNN vector")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(fv.len() * fv.len().saturating_sub(1) / 2);
    for i in 0..fv.len() {
        for j in i + 1..fv.len() {
            let d = fused_distance(cnn_rows[i], fv.row(i), cnn_rows[j], fv.row(j), alpha)?;
            out.push((fv.id(i).to_string(), fv.id(j).to_string(), d));
        }
    }
    Ok(out)
}

pub fn retrieve_direct(db: &[PackedDescriptorSet], queries: &[PackedDescriptorSet], ratio: f64) -> Result<RetrievalRun> {
    let ids: Vec<String> = queries.iter().map(|q| q.image_id().to_string()).collect();
    run_queries(&ids, Direction::DescendingSimilarity, |i| rank_direct(&queries[i], db, ratio))
}

/// `query<TAB>rank<TAB>id<TAB>score`, ranks from 1, queries in id order.
pub fn format_rankings(run: &RetrievalRun) -> String {
    let mut out = String::from("query\trank\tid\tscore\n");
    for (q, list) in &run.rankings {
        for (r, (id, score)) in list.iter().enumerate() {
            writeln!(out, "{q}\t{}\t{id}\t{score}", r + 1).expect("writing to a String");
        }
    }
    out
}

/// Fixed-width per-query table, optionally followed by `key=value` lines
/// for scripts.
pub fn format_report(eval: &Evaluation, key_values: bool) -> String {
    let width = eval.per_query.iter().map(|(q, _)| q.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    writeln!(out, "{:<width$}  {:>8}", "query", "AP").unwrap();
    for (q, ap) in &eval.per_query {
        writeln!(out, "{q:<width$}  {ap:>8.4}").unwrap();
    }
    writeln!(out, "{:<width$}  {:>8.4}", "mAP", eval.map).unwrap();
    if !key_values {
        return out;
    }
    writeln!(out).unwrap();
    writeln!(out, "queries={}", eval.per_query.len()).unwrap();
    writeln!(out, "map={}", eval.map).unwrap();
    for (q, ap) in &eval.per_query {
        writeln!(out, "ap.{q}={ap}").unwrap();
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// What [`run_pipeline`] produced.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub evaluation: Evaluation,
    /// Output files relative to the output directory, in write order.
    pub outputs: Vec<PathBuf>,
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    cfg.check_inputs_exist()?;
    let out_dir = &cfg.paths.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut outputs = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<()> {
        io::write_atomic(&out_dir.join(name), &bytes)?;
        outputs.push(PathBuf::from(name));
        Ok(())
    };

    let (db_dim, db_images) = io::read_descriptors(&cfg.paths.db)?;
    let query_images = if cfg.paths.queries.is_some() {
        let (dim, q) = io::read_descriptors(cfg.queries_path())?;
        crate::error::check_dim(db_dim, dim)?;
        q
    } else {
        db_images.clone()
    };
    let gt = io::read_ground_truth(&cfg.paths.gt)?;
    let query_ids: Vec<String> = query_images.iter().map(|q| q.image_id().to_string()).collect();
    check_ground_truth_covers(&gt, &query_ids)?;

    let run = if cfg.method == Method::Direct {
        retrieve_direct(&db_images, &query_images, cfg.ratio)?
    } else {
        let train_images = if cfg.paths.train.is_some() { io::read_descriptors(cfg.train_path())?.1 } else { db_images.clone() };
        let sample = PackedDescriptorSet::pool("train", &train_images)?;
        crate::error::check_dim(db_dim, sample.dim_bits())?;
        let learning = cfg.learning.expect("validated");
        let model = match learning.clustering() {
            Some(c) => TrainedModel::Vocabulary(train_vocabulary(c, &sample, cfg.k, cfg.seed)?),
            None if cfg.method == Method::FvBmm => TrainedModel::Bmm(train_bmm(&sample, cfg.k, cfg.seed, cfg.eps)?),
            None => TrainedModel::Gmm(train_gmm(&sample, cfg.k, cfg.seed, cfg.eps)?),
        };
        emit(model.file_name(), model.to_bytes()?)?;

        let options = FvOptions {
            include_weights: cfg.include_weights,
            include_variances: cfg.include_variances,
            stats_form: cfg.stats_form,
        };
        let encoder = model.encoder(cfg.method, options)?;
        let raw_db = encoder.encode_all(&db_images)?;
        let raw_q = if cfg.paths.queries.is_some() { encoder.encode_all(&query_images)? } else { raw_db.clone() };

        let (db, queries) = if cfg.method == Method::Bow {
            (raw_db, raw_q)
        } else {
            let opts = PostprocOptions {
                beta: cfg.beta,
                renorm: cfg.renorm,
                order: StageOrder::PowerFirst,
            };
            let pca = match cfg.pca_dim {
                Some(m) => {
                    let normalized = postprocess_set(&raw_db, None, opts)?;
                    let pca = pca_train(&normalized.to_matrix(), m, cfg.seed)?;
                    emit("pca.pca1", io::encode_pca(&pca)?)?;
                    Some(pca)
                }
                None => None,
            };
            let pca: Option<&PcaModel> = pca.as_ref();
            (postprocess_set(&raw_db, pca, opts)?, postprocess_set(&raw_q, pca, opts)?)
        };
        emit("db.gvec", io::encode_vectors(&db)?)?;
        emit("queries.gvec", io::encode_vectors(&queries)?)?;

        match cfg.alpha {
            Some(alpha) => {
                let cnn_db = renormalize_cnn(&io::read_vectors(cfg.paths.cnn_db.as_deref().expect("validated"))?)?;
                let cnn_q = renormalize_cnn(&io::read_vectors(cfg.paths.cnn_queries.as_deref().expect("validated"))?)?;
                let fusion = Fusion {
                    cnn_db: &cnn_db,
                    cnn_queries: &cnn_q,
                    alpha,
                    rescale: cfg.rescale.into(),
                };
                retrieve(&db, &queries, Some(fusion))?
            }
            None => retrieve(&db, &queries, None)?,
        }
    };

    let evaluation = evaluate(&run, &gt)?;
    emit("rankings.tsv", format_rankings(&run).into_bytes())?;
    emit("report.txt", format_report(&evaluation, true).into_bytes())?;

    let mut manifest = String::from("binagg manifest\n\n[config]\n");
    manifest.push_str(&cfg.to_toml());
    manifest.push_str("\n[inputs]\n");
    for p in cfg.inputs() {
        writeln!(manifest, "{}  {}", sha256_hex(&io::read_file(p)?), p.display()).unwrap();
    }
    manifest.push_str("\n[outputs]\n");
    for name in &outputs {
        writeln!(manifest, "{}  {}", sha256_hex(&io::read_file(&out_dir.join(name))?), name.display()).unwrap();
    }
    io::write_atomic(&out_dir.join("manifest.txt"), manifest.as_bytes())?;
    outputs.push(PathBuf::from("manifest.txt"));
    info!("mAP {:.4} over {} queries", evaluation.map, evaluation.per_query.len());

    Ok(PipelineOutcome { evaluation, outputs })
}

/// Every ground-truth query must be among the queries, so a misconfigured
/// run fails before training rather than after.
pub fn check_ground_truth_covers(gt: &GroundTruth, query_ids: &[String]) -> Result<()> {
    for q in gt.queries() {
        if !query_ids.contains(&q.query) {
            return Err(Error::MissingRanking(q.query.clone()));
        }
    }
    Ok(())
}
