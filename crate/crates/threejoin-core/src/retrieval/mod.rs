//! Inference-time retrieval: cosine ranking over real-valued retrieval
//! features, ITQ binarization with Hamming ranking, and the mAP@all /
//! Prec@100 protocol. Relevance means "same class label"; queries are
//! sketches, the gallery holds natural images.

pub mod dumps;
pub mod itq;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::par_try_map;

use itq::ItqCodec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Gallery,
}

/// Aligned ids/labels/vectors for one modality.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub vectors: Array2<f64>,
    pub role: Role,
}

impl EmbeddingSet {
    pub fn new(
        ids: Vec<String>,
        labels: Vec<usize>,
        vectors: Array2<f64>,
        role: Role,
    ) -> Result<EmbeddingSet> {
        if ids.len() != labels.len() || ids.len() != vectors.nrows() {
            return Err(Error::Shape(format!(
                "embedding set misaligned: {} ids, {} labels, {} rows",
                ids.len(),
                labels.len(),
                vectors.nrows()
            )));
        }
        Ok(EmbeddingSet {
            ids,
            labels,
            vectors,
            role,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

fn norm_checked(v: ArrayView1<f64>, what: &str) -> Result<f64> {
    let n = v.dot(&v).sqrt();
    if n == 0.0 {
        return Err(Error::Numeric(format!(
            "{what} has zero norm; cosine distance undefined"
        )));
    }
    if !n.is_finite() {
        return Err(Error::Numeric(format!("{what} has non-finite norm")));
    }
    Ok(n)
}

/// Gallery indices sorted by ascending cosine distance to the query,
/// ties broken by ascending index.
pub fn rank_cosine(query: ArrayView1<f64>, gallery: &EmbeddingSet) -> Result<Vec<usize>> {
    if query.len() != gallery.dim() {
        return Err(Error::Shape(format!(
            "query dim {} vs gallery dim {}",
            query.len(),
            gallery.dim()
        )));
    }
    let qn = norm_checked(query, "query")?;
    let mut scored = Vec::with_capacity(gallery.len());
    for i in 0..gallery.len() {
        let row = gallery.vectors.row(i);
        let rn = norm_checked(row, &format!("gallery row {i}"))?;
        let dist = 1.0 - query.dot(&row) / (qn * rn);
        scored.push((dist, i));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// AP over a full ranked relevance list: mean of precision@r at each
/// relevant rank r. Undefined without at least one relevant item.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let total: usize = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::Validation(
            "average precision undefined: no relevant items in the ranking".into(),
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

/// Precision at cutoff `k` with the denominator fixed at `k`, even when
/// the ranking is shorter; keeps small-gallery numbers comparable.
pub fn precision_at(relevance: &[bool], k: usize) -> f64 {
    let hits = relevance.iter().take(k).filter(|&&r| r).count();
    hits as f64 / k as f64
}

/// Ranking backend: real-valued cosine, or Hamming over ITQ codes from
/// a codec fitted upstream on seen-class training features.
#[derive(Debug, Clone)]
pub enum EvalMode {
    Cosine,
    Hamming(ItqCodec),
}

impl EvalMode {
    fn name(&self) -> String {
        match self {
            EvalMode::Cosine => "cosine".into(),
            EvalMode::Hamming(codec) => format!("hamming{}", codec.bits()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    #[serde(rename = "mAP_all")]
    pub map_all: f64,
    pub prec_100: f64,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub skipped_queries: usize,
}

pub const PREC_CUTOFF: usize = 100;

fn checked_rankings(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    mode: &EvalMode,
) -> Result<Vec<Vec<usize>>> {
    if queries.is_empty() {
        return Err(Error::Validation("no queries to evaluate".into()));
    }
    if gallery.is_empty() {
        return Err(Error::Validation("gallery is empty".into()));
    }
    if queries.role != Role::Query || gallery.role != Role::Gallery {
        return Err(Error::Validation(
            "evaluate expects a query set and a gallery set, in that order".into(),
        ));
    }
    if queries.dim() != gallery.dim() {
        return Err(Error::Shape(format!(
            "query dim {} vs gallery dim {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    match mode {
        EvalMode::Cosine => {
            par_try_map(queries.len(), |q| rank_cosine(queries.vectors.row(q), gallery))
        }
        EvalMode::Hamming(codec) => {
            let gallery_codes = codec.encode_set(gallery)?;
            let query_codes = codec.encode_set(queries)?;
            par_try_map(queries.len(), |q| {
                itq::rank_hamming(query_codes.row(q), &gallery_codes)
            })
        }
    }
}

/// mAP@all and Prec@100 over all queries. Queries whose class has no
/// gallery item are skipped with a warning and excluded from the mean.
pub fn evaluate(queries: &EmbeddingSet, gallery: &EmbeddingSet, mode: &EvalMode) -> Result<EvalReport> {
    let rankings = checked_rankings(queries, gallery, mode)?;

    let mut ap_sum = 0.0;
    let mut prec_sum = 0.0;
    let mut kept = 0usize;
    let mut skipped = 0usize;
    for (q, ranking) in rankings.iter().enumerate() {
        let label = queries.labels[q];
        if !gallery.labels.iter().any(|&l| l == label) {
            log::warn!(
                "query {} (class {label}) has no gallery items of its class; skipping",
                queries.ids[q]
            );
            skipped += 1;
            continue;
        }
        let relevance: Vec<bool> = ranking.iter().map(|&g| gallery.labels[g] == label).collect();
        ap_sum += average_precision(&relevance)?;
        prec_sum += precision_at(&relevance, PREC_CUTOFF);
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::Validation(
            "every query was skipped; no overlap between query and gallery classes".into(),
        ));
    }
    Ok(EvalReport {
        mode: mode.name(),
        map_all: ap_sum / kept as f64,
        prec_100: prec_sum / kept as f64,
        num_queries: queries.len(),
        num_gallery: gallery.len(),
        skipped_queries: skipped,
    })
}

/// Mean precision@k for k = 1..=max_k under the same query-skipping
/// protocol as [`evaluate`]; feeds the precision-at-k plot.
pub fn precision_curve(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    mode: &EvalMode,
    max_k: usize,
) -> Result<Vec<f64>> {
    if max_k == 0 {
        return Err(Error::Validation("precision curve needs max_k >= 1".into()));
    }
    let rankings = checked_rankings(queries, gallery, mode)?;
    let mut sums = vec![0.0; max_k];
    let mut kept = 0usize;
    for (q, ranking) in rankings.iter().enumerate() {
        let label = queries.labels[q];
        if !gallery.labels.iter().any(|&l| l == label) {
            continue;
        }
        let relevance: Vec<bool> = ranking.iter().map(|&g| gallery.labels[g] == label).collect();
        let mut hits = 0usize;
        for k in 1..=max_k {
            if k <= relevance.len() && relevance[k - 1] {
                hits += 1;
            }
            sums[k - 1] += hits as f64 / k as f64;
        }
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::Validation(
            "every query was skipped; no overlap between query and gallery classes".into(),
        ));
    }
    Ok(sums.into_iter().map(|s| s / kept as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(vectors: Array2<f64>, labels: Vec<usize>, role: Role) -> EmbeddingSet {
        let ids = (0..labels.len()).map(|i| format!("e{i}")).collect();
        EmbeddingSet::new(ids, labels, vectors, role).unwrap()
    }

    #[test]
    fn exact_copy_of_query_ranks_first() {
        let gallery = set(
            array![[0.0, 1.0], [3.0, 4.0], [1.0, 0.0]],
            vec![0, 1, 2],
            Role::Gallery,
        );
        let q = array![3.0, 4.0];
        let perm = rank_cosine(q.view(), &gallery).unwrap();
        assert_eq!(perm[0], 1);
    }

    #[test]
    fn positive_scaling_leaves_permutation_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Array2::from_shape_fn((6, 5), |_| rng.random::<f64>() - 0.3);
        let q = ndarray::Array1::from_shape_fn(5, |_| rng.random::<f64>() - 0.3);
        let base = rank_cosine(q.view(), &set(v.clone(), vec![0; 6], Role::Gallery)).unwrap();
        let mut scaled = v;
        for (i, factor) in [(0usize, 7.5), (3, 0.01), (5, 120.0)] {
            let mut row = scaled.row_mut(i);
            row *= factor;
        }
        let after = rank_cosine(q.view(), &set(scaled, vec![0; 6], Role::Gallery)).unwrap();
        assert_eq!(base, after);
    }

    #[test]
    fn cosine_permutation_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let v = Array2::from_shape_fn((5, 8), |_| rng.random::<f64>() * 2.0 - 1.0);
        let q = ndarray::Array1::from_shape_fn(8, |_| rng.random::<f64>() * 2.0 - 1.0);
        let got = rank_cosine(q.view(), &set(v.clone(), vec![0; 5], Role::Gallery)).unwrap();

        // Independent oracle: explicit distance computation and sort.
        let mut oracle: Vec<(f64, usize)> = (0..5)
            .map(|i| {
                let mut dot = 0.0;
                let mut nq = 0.0;
                let mut ng = 0.0;
                for j in 0..8 {
                    dot += q[j] * v[(i, j)];
                    nq += q[j] * q[j];
                    ng += v[(i, j)] * v[(i, j)];
                }
                (1.0 - dot / (nq.sqrt() * ng.sqrt()), i)
            })
            .collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect: Vec<usize> = oracle.into_iter().map(|(_, i)| i).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn zero_norm_rows_are_named() {
        let gallery = set(array![[1.0, 0.0], [0.0, 0.0]], vec![0, 1], Role::Gallery);
        let q = array![1.0, 1.0];
        match rank_cosine(q.view(), &gallery).unwrap_err() {
            Error::Numeric(msg) => assert!(msg.contains("gallery row 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let zq = array![0.0, 0.0];
        match rank_cosine(zq.view(), &gallery).unwrap_err() {
            Error::Numeric(msg) => assert!(msg.contains("query"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ap_of_front_loaded_ranking_is_one() {
        assert_relative_eq!(
            average_precision(&[true, true, false, false]).unwrap(),
            1.0
        );
    }

    #[test]
    fn ap_matches_hand_computed_example() {
        // [relevant, non, relevant] -> (1/1 + 2/3) / 2 = 5/6.
        let ap = average_precision(&[true, false, true]).unwrap();
        assert_relative_eq!(ap, 5.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn ap_matches_brute_force_oracle_on_random_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.random_range(1..30);
            let rel: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.4).collect();
            if !rel.iter().any(|&r| r) {
                assert!(average_precision(&rel).is_err());
                continue;
            }
            let mut seen = 0.0;
            let mut acc = 0.0;
            for (i, &r) in rel.iter().enumerate() {
                if r {
                    seen += 1.0;
                    acc += seen / (i as f64 + 1.0);
                }
            }
            let oracle = acc / rel.iter().filter(|&&r| r).count() as f64;
            assert_relative_eq!(average_precision(&rel).unwrap(), oracle, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_relevant_is_an_error() {
        assert!(matches!(
            average_precision(&[false, false]).unwrap_err(),
            Error::Validation(_)
        ));
        assert!(average_precision(&[]).is_err());
    }

    #[test]
    fn adversarial_ranking_matches_closed_form() {
        // All R relevant items ranked last in a gallery of G:
        // AP = (1/R) * sum_{j=1..R} j / (G - R + j).
        for (g, r) in [(10usize, 3usize), (25, 7), (100, 1)] {
            let mut rel = vec![false; g - r];
            rel.extend(std::iter::repeat_n(true, r));
            let ap = average_precision(&rel).unwrap();
            let closed: f64 = (1..=r).map(|j| j as f64 / (g - r + j) as f64).sum::<f64>() / r as f64;
            assert_relative_eq!(ap, closed, epsilon = 1e-12);
        }
    }

    #[test]
    fn prec_uses_fixed_denominator_on_small_galleries() {
        let rel = vec![true, true, false];
        assert_relative_eq!(precision_at(&rel, 100), 2.0 / 100.0);
    }

    #[test]
    fn uniform_class_gallery_has_perfect_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = Array2::from_shape_fn((7, 4), |_| rng.random::<f64>() + 0.1);
        let q = Array2::from_shape_fn((3, 4), |_| rng.random::<f64>() + 0.1);
        let gallery = set(g, vec![5; 7], Role::Gallery);
        let queries = set(q, vec![5; 3], Role::Query);
        let report = evaluate(&queries, &gallery, &EvalMode::Cosine).unwrap();
        assert_relative_eq!(report.map_all, 1.0);
        assert_relative_eq!(report.prec_100, 7.0 / 100.0);
        assert_eq!(report.skipped_queries, 0);
    }

    #[test]
    fn precision_curve_agrees_with_point_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let g = Array2::from_shape_fn((30, 6), |_| rng.random::<f64>() - 0.5);
        let q = Array2::from_shape_fn((9, 6), |_| rng.random::<f64>() - 0.5);
        let labels_g: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let labels_q: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let gallery = set(g, labels_g.clone(), Role::Gallery);
        let queries = set(q.clone(), labels_q.clone(), Role::Query);

        let curve = precision_curve(&queries, &gallery, &EvalMode::Cosine, 100).unwrap();
        assert_eq!(curve.len(), 100);
        let report = evaluate(&queries, &gallery, &EvalMode::Cosine).unwrap();
        assert_relative_eq!(curve[99], report.prec_100, epsilon = 1e-12);

        // k=1 by hand: precision@1 is 1 or 0 per query.
        let mut hits = 0.0;
        for i in 0..queries.len() {
            let ranking = rank_cosine(queries.vectors.row(i), &gallery).unwrap();
            if labels_g[ranking[0]] == labels_q[i] {
                hits += 1.0;
            }
        }
        assert_relative_eq!(curve[0], hits / 9.0, epsilon = 1e-12);
        assert!(precision_curve(&queries, &gallery, &EvalMode::Cosine, 0).is_err());
    }

    #[test]
    fn queries_without_gallery_class_are_skipped() {
        let gallery = set(array![[1.0, 0.0], [0.9, 0.1]], vec![0, 0], Role::Gallery);
        let queries = set(
            array![[1.0, 0.1], [0.0, 1.0]],
            vec![0, 3],
            Role::Query,
        );
        let report = evaluate(&queries, &gallery, &EvalMode::Cosine).unwrap();
        assert_eq!(report.skipped_queries, 1);
        assert_eq!(report.num_queries, 2);
        assert_relative_eq!(report.map_all, 1.0);
    }

    #[test]
    fn empty_query_set_rejected_and_roles_enforced() {
        let gallery = set(array![[1.0, 0.0]], vec![0], Role::Gallery);
        let empty = EmbeddingSet::new(vec![], vec![], Array2::zeros((0, 2)), Role::Query).unwrap();
        assert!(matches!(
            evaluate(&empty, &gallery, &EvalMode::Cosine).unwrap_err(),
            Error::Validation(_)
        ));
        let queries = set(array![[1.0, 0.1]], vec![0], Role::Query);
        assert!(evaluate(&gallery, &queries, &EvalMode::Cosine).is_err());
    }

    #[test]
    fn evaluate_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let g = Array2::from_shape_fn((12, 6), |_| rng.random::<f64>() - 0.5);
        let q = Array2::from_shape_fn((5, 6), |_| rng.random::<f64>() - 0.5);
        let gallery = set(g, (0..12).map(|i| i % 3).collect(), Role::Gallery);
        let queries = set(q, (0..5).map(|i| i % 3).collect(), Role::Query);
        let a = evaluate(&queries, &gallery, &EvalMode::Cosine).unwrap();
        let b = evaluate(&queries, &gallery, &EvalMode::Cosine).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_serializes_with_protocol_field_names() {
        let report = EvalReport {
            mode: "cosine".into(),
            map_all: 0.5,
            prec_100: 0.25,
            num_queries: 4,
            num_gallery: 9,
            skipped_queries: 0,
        };
        let json = serde_json::to_value(&report).unwrap();
        assert!(json.get("mAP_all").is_some());
        assert!(json.get("prec_100").is_some());
        let back: EvalReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, report);
    }

    proptest! {
        #[test]
        fn map_of_ideal_ranking_dominates_random_permutations(
            rel in proptest::collection::vec(any::<bool>(), 1..40),
            seed in 0u64..500,
        ) {
            prop_assume!(rel.iter().any(|&r| r));
            let mut ideal = rel.clone();
            ideal.sort_by_key(|&r| !r);
            let best = average_precision(&ideal).unwrap();
            let mut shuffled = rel.clone();
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            let got = average_precision(&shuffled).unwrap();
            prop_assert!(got <= best + 1e-12);
            prop_assert!((0.0..=1.0).contains(&got));
        }

        #[test]
        fn scale_invariance_holds_for_arbitrary_positive_factors(
            factors in proptest::collection::vec(1e-3f64..1e3, 6),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            let v = Array2::from_shape_fn((6, 4), |_| rng.random::<f64>() - 0.4);
            let q = ndarray::Array1::from_shape_fn(4, |_| rng.random::<f64>() - 0.4);
            let base = rank_cosine(q.view(), &set(v.clone(), vec![0; 6], Role::Gallery)).unwrap();
            let mut scaled = v;
            for (i, f) in factors.iter().enumerate() {
                let mut row = scaled.row_mut(i);
                row *= *f;
            }
            let after = rank_cosine(q.view(), &set(scaled, vec![0; 6], Role::Gallery)).unwrap();
            prop_assert_eq!(base, after);
        }
    }
}
