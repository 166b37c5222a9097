//! Ranking and evaluation: tf-idf cosine for BoW, Euclidean distance for
//! normalized signatures, fused CNN/FV distances, ratio-test matching, and
//! average precision.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;

use crate::descriptor::{euclidean, hamming_many, norm, PackedDescriptorSet};
use crate::encode::VectorSet;
use crate::error::{check_dim, Error, Result};
use crate::parallel::map_chunks;

pub const DEFAULT_RATIO: f64 = 0.8;
/// Tolerance on `|norm - 1|` for inputs to distance fusion.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Relevance judgments for one query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryTruth {
    pub query: String,
    pub positives: BTreeSet<String>,
    pub junk: BTreeSet<String>,
    /// Drop the query image itself from its ranked list before scoring.
    pub exclude_query: bool,
}

impl QueryTruth {
    pub fn new(
        query: impl Into<String>,
        positives: impl IntoIterator<Item = impl Into<String>>,
        junk: impl IntoIterator<Item = impl Into<String>>,
        exclude_query: bool,
    ) -> Result<Self> {
        let q = QueryTruth {
            query: query.into(),
            positives: positives.into_iter().map(Into::into).collect(),
            junk: junk.into_iter().map(Into::into).collect(),
            exclude_query,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(id) = self.positives.intersection(&self.junk).next() {
            return Err(Error::invalid("ground truth", format!("`{id}` is both positive and junk for query `{}`", self.query)));
        }
        if self.positives.contains(&self.query) {
            return Err(Error::invalid("ground truth", format!("query `{}` lists itself as a positive", self.query)));
        }
        Ok(())
    }
}

/// Ground truth for a query set, in declaration order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    queries: Vec<QueryTruth>,
}

impl GroundTruth {
    pub fn new(queries: Vec<QueryTruth>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for q in &queries {
            q.validate()?;
            if !seen.insert(q.query.as_str()) {
                return Err(Error::invalid("ground truth", format!("query `{}` declared twice", q.query)));
            }
        }
        Ok(GroundTruth { queries })
    }

    pub fn queries(&self) -> &[QueryTruth] {
        &self.queries
    }

    pub fn get(&self, query: &str) -> Option<&QueryTruth> {
        self.queries.iter().find(|q| q.query == query)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Whether smaller or larger scores rank first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    AscendingDistance,
    DescendingSimilarity,
}

/// A ranked list of `(image id, score)`.
pub type Ranking = Vec<(String, f64)>;

/// Ranked lists for every query.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalRun {
    pub direction: Direction,
    pub rankings: BTreeMap<String, Ranking>,
}

impl RetrievalRun {
    pub fn new(direction: Direction) -> Self {
        RetrievalRun {
            direction,
            rankings: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, query: impl Into<String>, ranking: Ranking) {
        self.rankings.insert(query.into(), ranking);
    }

    pub fn get(&self, query: &str) -> Option<&Ranking> {
        self.rankings.get(query)
    }
}

/// Sorts by score in the given direction; equal scores fall back to the id.
/// The result does not depend on the input order.
pub fn rank(mut scored: Ranking, direction: Direction) -> Ranking {
    scored.sort_by(|a, b| {
        let by_score = match direction {
            Direction::AscendingDistance => a.1.total_cmp(&b.1),
            Direction::DescendingSimilarity => b.1.total_cmp(&a.1),
        };
        by_score.then_with(|| a.0.cmp(&b.0))
    });
    scored
}

/// `idf_k = ln(N / n_k)`, where `n_k` counts images that contain word `k`;
/// unseen words get 0.
pub fn tfidf_weights<'a>(corpus: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
    let mut counts: Vec<usize> = Vec::new();
    let mut n = 0usize;
    for h in corpus {
        if n == 0 {
            counts = vec![0; h.len()];
        }
        check_dim(counts.len(), h.len())?;
        for (c, v) in counts.iter_mut().zip(h) {
            *c += (*v > 0.0) as usize;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::InsufficientSample { needed: 1, got: 0 });
    }
    Ok(counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { (n as f64 / c as f64).ln() })
        .collect())
}

/// Cosine of the tf-idf weighted histograms; 0 when either weighted vector
/// vanishes.
pub fn bow_similarity(q: &[f64], d: &[f64], idf: &[f64]) -> Result<f64> {
    check_dim(idf.len(), q.len())?;
    check_dim(idf.len(), d.len())?;
    let (mut qq, mut dd, mut qd) = (0.0, 0.0, 0.0);
    for ((a, b), w) in q.iter().zip(d).zip(idf) {
        let (a, b) = (a * w, b * w);
        qq += a * a;
        dd += b * b;
        qd += a * b;
    }
    if qq == 0.0 || dd == 0.0 {
        return Ok(0.0);
    }
    Ok((qd / (qq.sqrt() * dd.sqrt())).clamp(-1.0, 1.0))
}

fn check_unit(id: &str, v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::NotUnitNorm { id: id.to_string(), norm: n });
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", format!("{alpha} is outside [0, 1]")));
    }
    Ok(())
}

/// `alpha ||c1 - c2|| + (1 - alpha) ||f1 - f2||` over unit-norm inputs.
pub fn fused_distance(c1: &[f64], f1: &[f64], c2: &[f64], f2: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    for (id, v) in [("c1", c1), ("f1", f1), ("c2", c2), ("f2", f2)] {
        check_unit(id, v)?;
    }
    Ok(alpha * euclidean(c1, c2)? + (1.0 - alpha) * euclidean(f1, f2)?)
}

/// Fraction of query descriptors whose nearest neighbour in `d` passes the
/// ratio test `d1 / d2 <= ratio`. A zero second distance counts as a match;
/// a database image with fewer than two descriptors yields no matches.
pub fn direct_match_similarity(q: &PackedDescriptorSet, d: &PackedDescriptorSet, ratio: f64) -> Result<f64> {
    if q.is_empty() {
        return Err(Error::EmptyImage);
    }
    check_dim(q.dim_bits(), d.dim_bits())?;
    if !(ratio > 0.0) {
        return Err(Error::invalid("ratio", format!("{ratio} must be positive")));
    }
    Ok(ratio_test_outcomes(q, d, ratio).iter().filter(|m| **m).count() as f64 / q.len() as f64)
}

/// The two smallest Hamming distances from `x` into `d`.
pub fn two_nearest(x: &[u64], d: &PackedDescriptorSet) -> Option<(u32, u32)> {
    if d.len() < 2 {
        return None;
    }
    let mut dist = vec![0u32; d.len()];
    hamming_many(x, d.raw_words(), &mut dist);
    let (mut d1, mut d2) = (u32::MAX, u32::MAX);
    for h in dist {
        if h < d1 {
            d2 = d1;
            d1 = h;
        } else if h < d2 {
            d2 = h;
        }
    }
    Some((d1, d2))
}

/// Per query descriptor: did it produce an accepted match?
pub fn ratio_test_outcomes(q: &PackedDescriptorSet, d: &PackedDescriptorSet, ratio: f64) -> Vec<bool> {
    map_chunks(q.len(), 64, |range| {
        range
            .map(|i| match two_nearest(q.row(i).words(), d) {
                None => false,
                Some((_, 0)) => true,
                Some((d1, d2)) => d1 as f64 / d2 as f64 <= ratio,
            })
            .collect::<Vec<_>>()
    })
    .concat()
}

/// Euclidean ranking of every database vector against `query`.
pub fn rank_euclidean(query: &[f64], db: &VectorSet) -> Result<Ranking> {
    check_dim(db.dim(), query.len())?;
    let scored = db
        .iter()
        .map(|(id, v)| Ok((id.to_string(), euclidean(query, v)?)))
        .collect::<Result<Ranking>>()?;
    Ok(rank(scored, Direction::AscendingDistance))
}

pub fn rank_bow(query: &[f64], db: &VectorSet, idf: &[f64]) -> Result<Ranking> {
    let scored = db
        .iter()
        .map(|(id, v)| Ok((id.to_string(), bow_similarity(query, v, idf)?)))
        .collect::<Result<Ranking>>()?;
    Ok(rank(scored, Direction::DescendingSimilarity))
}

/// How distances from the two representations are brought to one range
/// before fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Rescale {
    /// Require unit-norm inputs.
    #[default]
    None,
    /// Divide each side's distances by their maximum over the database for
    /// this query.
    Max,
}

/// Paired CNN and FV signatures for one side of a fused comparison.
#[derive(Clone, Copy, Debug)]
pub struct FusedSide<'a> {
    pub cnn: &'a VectorSet,
    pub fv: &'a VectorSet,
}

fn index_by_id(set: &VectorSet) -> HashMap<&str, usize> {
    set.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

/// Ranks the database for one query under the fused distance. The database
/// sides are paired by id; an id missing from either side is an error.
pub fn rank_fused(qc: &[f64], qf: &[f64], db: FusedSide<'_>, alpha: f64, rescale: Rescale) -> Result<Ranking> {
    check_alpha(alpha)?;
    check_dim(db.cnn.dim(), qc.len())?;
    check_dim(db.fv.dim(), qf.len())?;
    let cnn_index = index_by_id(db.cnn);
    let mut pairs = Vec::with_capacity(db.fv.len());
    for (id, f) in db.fv.iter() {
        let &ci = cnn_index
            .get(id)
            .ok_or_else(|| Error::invalid("fuse", format!("`{id}` has no CNN vector")))?;
        pairs.push((id, db.cnn.row(ci), f));
    }
    if pairs.len() != db.cnn.len() {
        return Err(Error::invalid("fuse", "CNN and FV databases list different images"));
    }
    let scored: Ranking = match rescale {
        Rescale::None => pairs
            .iter()
            .map(|(id, c, f)| Ok((id.to_string(), fused_distance(qc, qf, c, f, alpha)?)))
            .collect::<Result<_>>()?,
        Rescale::Max => {
            let dc: Vec<f64> = pairs.iter().map(|(_, c, _)| euclidean(qc, c)).collect::<Result<_>>()?;
            let df: Vec<f64> = pairs.iter().map(|(_, _, f)| euclidean(qf, f)).collect::<Result<_>>()?;
            let scale = |v: &[f64]| {
                let m = v.iter().copied().fold(0.0, f64::max);
                if m > 0.0 {
                    1.0 / m
                } else {
                    0.0
                }
            };
            let (sc, sf) = (scale(&dc), scale(&df));
            pairs
                .iter()
                .zip(dc.iter().zip(&df))
                .map(|((id, _, _), (c, f))| (id.to_string(), alpha * c * sc + (1.0 - alpha) * f * sf))
                .collect()
        }
    };
    Ok(rank(scored, Direction::AscendingDistance))
}

/// Ranks database images by ratio-test similarity to the query image.
pub fn rank_direct(query: &PackedDescriptorSet, db: &[PackedDescriptorSet], ratio: f64) -> Result<Ranking> {
    let scored = db
        .iter()
        .map(|d| Ok((d.image_id().to_string(), direct_match_similarity(query, d, ratio)?)))
        .collect::<Result<Ranking>>()?;
    Ok(rank(scored, Direction::DescendingSimilarity))
}

/// Ranks a database for each query in parallel; `rank_one` maps a query
/// index to its list.
pub fn run_queries<F>(query_ids: &[String], direction: Direction, rank_one: F) -> Result<RetrievalRun>
where
    F: Fn(usize) -> Result<Ranking> + Sync + Send,
{
    let lists: Vec<Result<Ranking>> = (0..query_ids.len()).into_par_iter().map(&rank_one).collect();
    let mut run = RetrievalRun::new(direction);
    for (id, list) in query_ids.iter().zip(lists) {
        run.insert(id.clone(), list?);
    }
    Ok(run)
}

/// Precision averaged over the ranks of the positives, after removing junk
/// (and the query itself when flagged). Positives missing from the list
/// contribute zero.
pub fn average_precision(ranked: &[(String, f64)], gt: &QueryTruth) -> Result<f64> {
    if gt.positives.is_empty() {
        return Err(Error::NoPositives(gt.query.clone()));
    }
    let mut rank = 0usize;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (id, _) in ranked {
        if gt.junk.contains(id) || (gt.exclude_query && *id == gt.query) {
            continue;
        }
        rank += 1;
        if gt.positives.contains(id) {
            hits += 1;
            sum += hits as f64 / rank as f64;
        }
    }
    Ok(sum / gt.positives.len() as f64)
}

/// Per-query AP (in ground-truth order) and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_query: Vec<(String, f64)>,
    pub map: f64,
}

pub fn evaluate(run: &RetrievalRun, gt: &GroundTruth) -> Result<Evaluation> {
    if gt.is_empty() {
        return Err(Error::invalid("ground truth", "no queries"));
    }
    let mut per_query = Vec::with_capacity(gt.len());
    for q in gt.queries() {
        let ranked = run.get(&q.query).ok_or_else(|| Error::MissingRanking(q.query.clone()))?;
        per_query.push((q.query.clone(), average_precision(ranked, q)?));
    }
    let map = per_query.iter().map(|p| p.1).sum::<f64>() / per_query.len() as f64;
    Ok(Evaluation { per_query, map })
}

pub fn mean_average_precision(run: &RetrievalRun, gt: &GroundTruth) -> Result<f64> {
    Ok(evaluate(run, gt)?.map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::BinaryDescriptor;
    use crate::encode::VectorKind;
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ranking(ids: &[&str]) -> Ranking {
        ids.iter().enumerate().map(|(i, id)| (id.to_string(), i as f64)).collect()
    }

    fn truth(q: &str, pos: &[&str], junk: &[&str], exclude: bool) -> QueryTruth {
        QueryTruth::new(q, pos.iter().copied(), junk.iter().copied(), exclude).unwrap()
    }

    fn set(id: &str, rows: &[&str]) -> PackedDescriptorSet {
        let dim = rows.first().map_or(4, |r| r.len());
        let parsed: Vec<_> = rows.iter().map(|r| BinaryDescriptor::parse_bits(r).unwrap()).collect();
        PackedDescriptorSet::from_descriptors(id, dim, parsed.iter().map(|d| d.as_ref())).unwrap()
    }

    #[test]
    fn ap_examples() {
        let gt = truth("q", &["a", "b"], &[], false);
        assert_eq!(average_precision(&ranking(&["a", "b", "x"]), &gt).unwrap(), 1.0);
        assert_eq!(average_precision(&ranking(&["a", "x", "b"]), &gt).unwrap(), (1.0 + 2.0 / 3.0) / 2.0);
        // truncated list: b never retrieved
        assert_eq!(average_precision(&ranking(&["x", "a"]), &gt).unwrap(), 0.25);
        let none = QueryTruth {
            query: "q".into(),
            positives: BTreeSet::new(),
            junk: BTreeSet::new(),
            exclude_query: false,
        };
        assert!(matches!(average_precision(&ranking(&["a"]), &none), Err(Error::NoPositives(_))));
    }

    #[test]
    fn junk_removal_compacts_the_list() {
        let gt = truth("q", &["a", "b"], &["j"], false);
        let with_junk = average_precision(&ranking(&["a", "j", "x", "b"]), &gt).unwrap();
        let compacted = average_precision(&ranking(&["a", "x", "b"]), &gt).unwrap();
        assert_eq!(with_junk, compacted);
        assert_eq!(with_junk, (1.0 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn query_removal_flag() {
        let list = ranking(&["q", "a", "x", "b"]);
        let kept = truth("q", &["a", "b"], &[], false);
        let dropped = truth("q", &["a", "b"], &[], true);
        assert_eq!(average_precision(&list, &kept).unwrap(), (0.5 + 0.5) / 2.0);
        assert_eq!(average_precision(&list, &dropped).unwrap(), (1.0 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn map_three_queries() {
        let gt = GroundTruth::new(vec![
            truth("q1", &["a"], &[], false),
            truth("q2", &["a", "b"], &[], false),
            truth("q3", &["c"], &["a"], false),
        ])
        .unwrap();
        let mut run = RetrievalRun::new(Direction::AscendingDistance);
        run.insert("q1", ranking(&["a", "b", "c"]));
        run.insert("q2", ranking(&["a", "c", "b"]));
        run.insert("q3", ranking(&["a", "b", "c"]));
        let e = evaluate(&run, &gt).unwrap();
        let want = [1.0, (1.0 + 2.0 / 3.0) / 2.0, 0.5];
        for (got, w) in e.per_query.iter().zip(want) {
            assert_eq!(got.1, w);
        }
        assert_eq!(e.map, (1.0 + (1.0 + 2.0 / 3.0) / 2.0 + 0.5) / 3.0);

        let single = GroundTruth::new(vec![truth("q2", &["a", "b"], &[], false)]).unwrap();
        assert_eq!(mean_average_precision(&run, &single).unwrap(), (1.0 + 2.0 / 3.0) / 2.0);
        let missing = GroundTruth::new(vec![truth("q9", &["a"], &[], false)]).unwrap();
        assert!(matches!(evaluate(&run, &missing), Err(Error::MissingRanking(_))));
    }

    #[test]
    fn ground_truth_invariants() {
        assert!(QueryTruth::new("q", ["a"], ["a"], false).is_err());
        assert!(QueryTruth::new("q", ["q"], Vec::<String>::new(), false).is_err());
        let a = truth("q", &["a"], &[], false);
        assert!(GroundTruth::new(vec![a.clone(), a]).is_err());
    }

    proptest! {
        #[test]
        fn junk_injection_never_changes_ap(
            n in 3usize..30,
            seed in 0u64..1000,
            junk_at in prop::collection::vec(0usize..40, 0..6),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
            let positives: Vec<&str> = ids.iter().filter(|_| rng.random_bool(0.3)).map(|s| s.as_str()).collect();
            prop_assume_nonempty(&positives)?;
            let junk_ids: Vec<String> = (0..junk_at.len()).map(|j| format!("junk{j}")).collect();
            let gt = QueryTruth::new("q", positives.iter().copied(), junk_ids.iter().cloned(), false).unwrap();
            let base: Ranking = ids.iter().map(|id| (id.clone(), 0.0)).collect();
            let mut injected = base.clone();
            for (j, &pos) in junk_at.iter().enumerate() {
                let at = pos.min(injected.len());
                injected.insert(at, (junk_ids[j].clone(), 0.0));
            }
            prop_assert!(average_precision(&base, &gt).unwrap() == average_precision(&injected, &gt).unwrap());
        }

        #[test]
        fn fused_distance_is_a_metric(seed in 0u64..500, alpha in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut unit = |d: usize| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = norm(&v);
                v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
            };
            let p: Vec<(Vec<f64>, Vec<f64>)> = (0..3).map(|_| (unit(4), unit(6))).collect();
            let d = |i: usize, j: usize| fused_distance(&p[i].0, &p[i].1, &p[j].0, &p[j].1, alpha).unwrap();
            prop_assert!((d(0, 1) - d(1, 0)).abs() < 1e-15);
            prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
            prop_assert!(d(0, 0) == 0.0);
        }
    }

    fn prop_assume_nonempty(v: &[&str]) -> std::result::Result<(), proptest::test_runner::TestCaseError> {
        if v.is_empty() {
            Err(proptest::test_runner::TestCaseError::reject("no positives"))
        } else {
            Ok(())
        }
    }

    #[test]
    fn tfidf_examples() {
        let corpus = [vec![1.0, 3.0, 0.0], vec![2.0, 0.0, 0.0], vec![5.0, 0.0, 0.0]];
        let idf = tfidf_weights(corpus.iter().map(|v| v.as_slice())).unwrap();
        assert_eq!(idf[0], 0.0);
        assert!((idf[1] - 3f64.ln()).abs() < 1e-15);
        assert_eq!(idf[2], 0.0);
        assert!(tfidf_weights(std::iter::empty()).is_err());

        // word present in N/e images
        let n = 1000;
        let present = (n as f64 / std::f64::consts::E).round() as usize;
        let hist: Vec<Vec<f64>> = (0..n).map(|i| vec![(i < present) as u8 as f64]).collect();
        let idf = tfidf_weights(hist.iter().map(|v| v.as_slice())).unwrap();
        assert!((idf[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn tfidf_matches_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corpus: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..6).map(|_| if rng.random_bool(0.4) { rng.random_range(1..5) as f64 } else { 0.0 }).collect())
            .collect();
        let idf = tfidf_weights(corpus.iter().map(|v| v.as_slice())).unwrap();
        for k in 0..6 {
            let mut nk = 0;
            for h in &corpus {
                if h[k] > 0.0 {
                    nk += 1;
                }
            }
            let want = if nk == 0 { 0.0 } else { (10.0 / nk as f64).ln() };
            assert_eq!(idf[k], want);
        }
    }

    #[test]
    fn bow_similarity_examples() {
        let idf = [0.5, 1.0, 2.0];
        assert!((bow_similarity(&[1.0, 2.0, 0.0], &[1.0, 2.0, 0.0], &idf).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(bow_similarity(&[1.0, 0.0, 0.0], &[0.0, 3.0, 1.0], &idf).unwrap(), 0.0);
        assert_eq!(bow_similarity(&[0.0; 3], &[1.0; 3], &idf).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q: Vec<f64> = (0..3).map(|_| rng.random_range(0..4) as f64).collect();
        let d: Vec<f64> = (0..3).map(|_| rng.random_range(0..4) as f64).collect();
        let wq: Vec<f64> = q.iter().zip(&idf).map(|(a, b)| a * b).collect();
        let wd: Vec<f64> = d.iter().zip(&idf).map(|(a, b)| a * b).collect();
        let naive = crate::descriptor::dot(&wq, &wd) / (norm(&wq) * norm(&wd));
        assert!((bow_similarity(&q, &d, &idf).unwrap() - naive).abs() < 1e-14);
    }

    #[test]
    fn fused_distance_examples() {
        let c1 = [1.0, 0.0];
        let c2 = [0.0, 1.0];
        let f1 = [0.6, 0.8];
        let f2 = [0.8, 0.6];
        let dc = euclidean(&c1, &c2).unwrap();
        let df = euclidean(&f1, &f2).unwrap();
        assert_eq!(fused_distance(&c1, &f1, &c2, &f2, 1.0).unwrap(), dc);
        assert_eq!(fused_distance(&c1, &f1, &c2, &f2, 0.0).unwrap(), df);
        assert!((fused_distance(&c1, &f1, &c2, &f2, 0.5).unwrap() - (dc + df) / 2.0).abs() < 1e-15);
        assert!(matches!(fused_distance(&[2.0, 0.0], &f1, &c2, &f2, 0.5), Err(Error::NotUnitNorm { .. })));
        assert!(fused_distance(&c1, &f1, &c2, &f2, 1.5).is_err());
    }

    #[test]
    fn direct_matching_examples() {
        let q = set("q", &["00000000", "11110000"]);
        let exact = set("d", &["00000000", "11110000", "00001111"]);
        assert_eq!(direct_match_similarity(&q, &exact, 0.8).unwrap(), 1.0);

        // every query descriptor equidistant to its two nearest
        let tied = set("d", &["10000000", "01000000"]);
        let q1 = set("q", &["00000000"]);
        assert_eq!(direct_match_similarity(&q1, &tied, 0.8).unwrap(), 0.0);

        // two identical nearest at distance zero
        let dup = set("d", &["00000000", "00000000"]);
        assert_eq!(direct_match_similarity(&q1, &dup, 0.8).unwrap(), 1.0);

        let single = set("d", &["00000000"]);
        assert_eq!(direct_match_similarity(&q1, &single, 0.8).unwrap(), 0.0);
        let empty = PackedDescriptorSet::new("e", 8).unwrap();
        assert!(matches!(direct_match_similarity(&empty, &exact, 0.8), Err(Error::EmptyImage)));
    }

    #[test]
    fn direct_matching_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let random = |rng: &mut ChaCha8Rng, n: usize| {
            let rows: Vec<BinaryDescriptor> =
                (0..n).map(|_| BinaryDescriptor::from_bits(&(0..32).map(|_| rng.random_bool(0.5)).collect::<Vec<_>>())).collect();
            PackedDescriptorSet::from_descriptors("x", 32, rows.iter().map(|r| r.as_ref())).unwrap()
        };
        for _ in 0..20 {
            let q = random(&mut rng, 15);
            let d = random(&mut rng, 12);
            let mut matches = 0;
            for a in q.iter() {
                let mut dists: Vec<u32> = d.iter().map(|b| crate::descriptor::hamming(a, b).unwrap()).collect();
                dists.sort();
                if dists[1] == 0 || dists[0] as f64 / dists[1] as f64 <= 0.8 {
                    matches += 1;
                }
            }
            assert_eq!(direct_match_similarity(&q, &d, 0.8).unwrap(), matches as f64 / 15.0);
        }
    }

    #[test]
    fn far_descriptors_never_break_a_match() {
        let q = set("q", &["00000000"]);
        let d = set("d", &["00000001", "00111111"]);
        assert_eq!(direct_match_similarity(&q, &d, 0.8).unwrap(), 1.0);
        let inflated = set("d", &["00000001", "00111111", "11111111", "01111111"]);
        assert_eq!(direct_match_similarity(&q, &inflated, 0.8).unwrap(), 1.0);
    }

    #[test]
    fn rank_is_deterministic() {
        let one = rank(vec![("z".into(), 3.0)], Direction::AscendingDistance);
        assert_eq!(one[0].0, "z");

        let scored: Ranking = vec![("b".into(), 1.0), ("a".into(), 1.0), ("c".into(), 0.5), ("d".into(), 2.0)];
        let asc = rank(scored.clone(), Direction::AscendingDistance);
        assert_eq!(asc.iter().map(|s| s.0.as_str()).collect::<Vec<_>>(), ["c", "a", "b", "d"]);
        let desc = rank(scored.clone(), Direction::DescendingSimilarity);
        assert_eq!(desc.iter().map(|s| s.0.as_str()).collect::<Vec<_>>(), ["d", "a", "b", "c"]);
        let mut reversed = scored;
        reversed.reverse();
        assert_eq!(rank(reversed, Direction::AscendingDistance), asc);
    }

    #[test]
    fn duplicate_of_query_ranks_first() {
        let mut db = VectorSet::new(VectorKind::FvBmm, 2);
        db.push("far", &[0.0, 1.0]).unwrap();
        db.push("dup", &[0.6, 0.8]).unwrap();
        let r = rank_euclidean(&[0.6, 0.8], &db).unwrap();
        assert_eq!(r[0], ("dup".to_string(), 0.0));
    }

    #[test]
    fn fused_alpha_one_ranks_like_cnn_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut unit = |d: usize| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = norm(&v);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let mut cnn = VectorSet::new(VectorKind::Cnn, 5);
        let mut fv = VectorSet::new(VectorKind::FvBmm, 7);
        for i in 0..30 {
            cnn.push(format!("i{i:02}"), &unit(5)).unwrap();
        }
        // FV side deliberately stored in a different order
        for i in (0..30).rev() {
            fv.push(format!("i{i:02}"), &unit(7)).unwrap();
        }
        let (qc, qf) = (unit(5), unit(7));
        let side = FusedSide { cnn: &cnn, fv: &fv };
        let ids = |r: &Ranking| r.iter().map(|x| x.0.clone()).collect::<Vec<_>>();
        for rescale in [Rescale::None, Rescale::Max] {
            let fused = rank_fused(&qc, &qf, side, 1.0, rescale).unwrap();
            assert_eq!(ids(&fused), ids(&rank_euclidean(&qc, &cnn).unwrap()));
            let fv_only = rank_fused(&qc, &qf, side, 0.0, rescale).unwrap();
            assert_eq!(ids(&fv_only), ids(&rank_euclidean(&qf, &fv).unwrap()));
        }
    }

    #[test]
    fn direct_ranking_orders_by_similarity() {
        let q = set("q", &["00000000", "11110000"]);
        let db = vec![
            set("none", &["10101010", "01010101"]),
            set("both", &["00000000", "11110000", "00111100"]),
        ];
        let r = rank_direct(&q, &db, 0.8).unwrap();
        assert_eq!(r[0].0, "both");
        assert_eq!(r[0].1, 1.0);
    }
}
