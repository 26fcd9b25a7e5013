//! Retrieval evaluation: query-vs-gallery distance matrices, cross-camera
//! ranking with the standard same-id/same-camera exclusion, average
//! precision, mean average precision, and cumulative match curves.

use crate::error::{Error, Result};
use std::fmt;
use std::str::FromStr;

/// Distance used between embedding vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!(
                "unknown metric `{other}` (expected euclidean or cosine)"
            ))),
        }
    }
}

/// A set of embedding vectors with identity and camera annotations.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingSet {
    dim: usize,
    vectors: Vec<f64>,
    ids: Vec<usize>,
    cams: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: Vec::new(), ids: Vec::new(), cams: Vec::new() }
    }

    pub fn push(&mut self, vector: &[f64], id: usize, cam: usize) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::ShapeMismatch {
                context: "embedding push".into(),
                lhs: vec![vector.len()],
                rhs: vec![self.dim],
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding {}", self.ids.len())));
        }
        self.vectors.extend_from_slice(vector);
        self.ids.push(id);
        self.cams.push(cam);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> usize {
        self.ids[i]
    }

    pub fn cam(&self, i: usize) -> usize {
        self.cams[i]
    }
}

/// Dense query × gallery distance matrix, row-major over queries.
pub fn pairwise_distances(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    metric: Metric,
) -> Result<Vec<f64>> {
    if queries.dim() != gallery.dim() {
        return Err(Error::ShapeMismatch {
            context: "distance matrix dimensions".into(),
            lhs: vec![queries.dim()],
            rhs: vec![gallery.dim()],
        });
    }
    let mut out = Vec::with_capacity(queries.len() * gallery.len());
    for qi in 0..queries.len() {
        let q = queries.vector(qi);
        for gi in 0..gallery.len() {
            let g = gallery.vector(gi);
            let d = match metric {
                Metric::Euclidean => q
                    .iter()
                    .zip(g)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
                Metric::Cosine => {
                    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if qn == 0.0 {
                        return Err(Error::ZeroVectorCosine { set: "query", index: qi });
                    }
                    if gn == 0.0 {
                        return Err(Error::ZeroVectorCosine { set: "gallery", index: gi });
                    }
                    let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
                    1.0 - dot / (qn * gn)
                }
            };
            out.push(d);
        }
    }
    Ok(out)
}

/// Outcome of ranking every query against the gallery.
#[derive(Clone, Debug)]
pub struct RankingResult {
    /// Per query, the admitted gallery indices in ranked order
    /// (ascending distance, ties broken by gallery index).
    pub orders: Vec<Vec<usize>>,
    /// Per query, its average precision; `None` when the query had no
    /// cross-camera match in the gallery and was excluded from the mean.
    pub aps: Vec<Option<f64>>,
    /// Cumulative match curve over ranks 1..=gallery size, averaged over
    /// evaluated queries.
    pub cmc: Vec<f64>,
    /// Mean average precision over evaluated queries.
    pub map: f64,
    /// Number of queries excluded for lack of any valid match.
    pub skipped: usize,
}

/// Ranks each query against the gallery and scores the ranking.
///
/// Gallery entries sharing both the query's identity and its camera are
/// removed from that query's ranking (the same-capture convention);
/// remaining same-identity entries are the relevant set. Queries whose
/// relevant set is empty contribute to `skipped` and not to the averages;
/// if that happens to every query the evaluation is meaningless and an
/// error is returned.
pub fn evaluate(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    metric: Metric,
) -> Result<RankingResult> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Invalid("evaluate needs nonempty query and gallery sets".into()));
    }
    let dist = pairwise_distances(queries, gallery, metric)?;
    let ng = gallery.len();
    let mut orders = Vec::with_capacity(queries.len());
    let mut aps = Vec::with_capacity(queries.len());
    let mut cmc_counts = vec![0usize; ng];
    let mut skipped = 0usize;
    for qi in 0..queries.len() {
        let row = &dist[qi * ng..(qi + 1) * ng];
        let mut admitted: Vec<usize> = (0..ng)
            .filter(|&gi| !(gallery.id(gi) == queries.id(qi) && gallery.cam(gi) == queries.cam(qi)))
            .collect();
        admitted.sort_by(|&a, &b| {
            row[a].partial_cmp(&row[b]).expect("finite distances").then(a.cmp(&b))
        });
        let relevant_total = admitted
            .iter()
            .filter(|&&gi| gallery.id(gi) == queries.id(qi))
            .count();
        if relevant_total == 0 {
            skipped += 1;
            aps.push(None);
            orders.push(admitted);
            continue;
        }
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (rank, &gi) in admitted.iter().enumerate() {
            if gallery.id(gi) == queries.id(qi) {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank);
                }
            }
        }
        let ap = precision_sum / relevant_total as f64;
        for slot in cmc_counts.iter_mut().skip(first_hit.expect("relevant set nonempty")) {
            *slot += 1;
        }
        aps.push(Some(ap));
        orders.push(admitted);
    }
    let evaluated = queries.len() - skipped;
    if evaluated == 0 {
        return Err(Error::NoValidQueries);
    }
    let map = aps.iter().flatten().sum::<f64>() / evaluated as f64;
    let cmc = cmc_counts.iter().map(|&c| c as f64 / evaluated as f64).collect();
    Ok(RankingResult { orders, aps, cmc, map, skipped })
}

impl RankingResult {
    /// Match rate within the top `rank` results (1-based); saturated at
    /// the gallery size.
    pub fn cmc_at(&self, rank: usize) -> f64 {
        assert!(rank >= 1, "CMC ranks are 1-based");
        let idx = rank.min(self.cmc.len()) - 1;
        self.cmc[idx]
    }

    /// Two-column `metric,value` summary with the headline numbers.
    pub fn results_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("map,{:.6}\n", self.map));
        for rank in [1usize, 5, 10] {
            s.push_str(&format!("cmc_{rank},{:.6}\n", self.cmc_at(rank)));
        }
        s.push_str(&format!("skipped_queries,{}\n", self.skipped));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(entries: &[(&[f64], usize, usize)]) -> EmbeddingSet {
        let mut s = EmbeddingSet::new(entries[0].0.len());
        for (v, id, cam) in entries {
            s.push(v, *id, *cam).unwrap();
        }
        s
    }

    /// Average precision straight from a relevance list, by the textbook
    /// running-precision formula. Used as the oracle.
    fn ap_oracle(relevance: &[bool]) -> Option<f64> {
        let total = relevance.iter().filter(|&&r| r).count();
        if total == 0 {
            return None;
        }
        let mut sum = 0.0;
        for (k, &rel) in relevance.iter().enumerate() {
            if rel {
                let hits_so_far = relevance[..=k].iter().filter(|&&r| r).count();
                sum += hits_so_far as f64 / (k + 1) as f64;
            }
        }
        Some(sum / total as f64)
    }

    #[test]
    fn ap_of_hit_miss_hit_is_five_sixths() {
        let ap = ap_oracle(&[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert!((ap - 0.8333).abs() < 1e-4);

        // And evaluate() reproduces it on a crafted instance: query id 0
        // cam 0, gallery [id0 cam1 at d=1, id1 cam0 at d=2, id0 cam1 at d=3].
        let q = set(&[(&[0.0], 0, 0)]);
        let g = set(&[(&[1.0], 0, 1), (&[2.0], 1, 0), (&[3.0], 0, 1)]);
        let r = evaluate(&q, &g, Metric::Euclidean).unwrap();
        assert!((r.map - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.orders[0], vec![0, 1, 2]);
    }

    #[test]
    fn same_id_same_cam_entries_are_excluded() {
        // The nearest gallery entry shares id and camera with the query:
        // it must not appear in the ranking at all.
        let q = set(&[(&[0.0], 7, 1)]);
        let g = set(&[(&[0.1], 7, 1), (&[5.0], 7, 0), (&[1.0], 3, 1)]);
        let r = evaluate(&q, &g, Metric::Euclidean).unwrap();
        assert_eq!(r.orders[0], vec![2, 1]);
        // AP: single relevant at rank 2 → 1/2; CMC hits from rank 2 on.
        assert!((r.map - 0.5).abs() < 1e-12);
        assert_eq!(r.cmc[0], 0.0);
        assert_eq!(r.cmc[1], 1.0);
    }

    #[test]
    fn equal_distances_break_ties_by_gallery_index() {
        let q = set(&[(&[0.0, 0.0], 0, 0)]);
        let g = set(&[(&[3.0, 4.0], 1, 0), (&[5.0, 0.0], 0, 1), (&[0.0, 5.0], 2, 0)]);
        // All three at distance 5.
        let r = evaluate(&q, &g, Metric::Euclidean).unwrap();
        assert_eq!(r.orders[0], vec![0, 1, 2]);
    }

    #[test]
    fn matchless_queries_are_skipped_and_all_matchless_errors() {
        // Query 0 has a cross-camera match; query 1's only same-id entry
        // shares its camera, so query 1 is skipped.
        let q = set(&[(&[0.0], 0, 0), (&[9.0], 1, 0)]);
        let g = set(&[(&[0.5], 0, 1), (&[9.1], 1, 0), (&[4.0], 2, 1)]);
        let r = evaluate(&q, &g, Metric::Euclidean).unwrap();
        assert_eq!(r.skipped, 1);
        assert!(r.aps[0].is_some());
        assert!(r.aps[1].is_none());

        let lonely_q = set(&[(&[9.0], 1, 0)]);
        assert!(matches!(
            evaluate(&lonely_q, &g, Metric::Euclidean),
            Err(Error::NoValidQueries)
        ));
    }

    #[test]
    fn cmc_is_monotone_and_ends_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut q = EmbeddingSet::new(3);
        let mut g = EmbeddingSet::new(3);
        for i in 0..6 {
            let v: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() - 0.5).collect();
            q.push(&v, i % 3, 0).unwrap();
        }
        for i in 0..10 {
            let v: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() - 0.5).collect();
            g.push(&v, i % 3, 1).unwrap();
        }
        let r = evaluate(&q, &g, Metric::Euclidean).unwrap();
        for w in r.cmc.windows(2) {
            assert!(w[0] <= w[1] + 1e-15, "CMC decreased: {w:?}");
        }
        assert!((r.cmc.last().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn evaluate_matches_ap_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let dim = 4;
            let nq = rng.gen_range(1..6);
            let ng = rng.gen_range(2..12);
            let mut q = EmbeddingSet::new(dim);
            let mut g = EmbeddingSet::new(dim);
            for _ in 0..nq {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                q.push(&v, rng.gen_range(0..3), rng.gen_range(0..2)).unwrap();
            }
            for _ in 0..ng {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                g.push(&v, rng.gen_range(0..3), rng.gen_range(0..2)).unwrap();
            }
            let Ok(r) = evaluate(&q, &g, Metric::Euclidean) else {
                continue; // all queries matchless in this draw
            };
            let mut oracle_sum = 0.0;
            let mut oracle_n = 0usize;
            for qi in 0..q.len() {
                let relevance: Vec<bool> =
                    r.orders[qi].iter().map(|&gi| g.id(gi) == q.id(qi)).collect();
                match (ap_oracle(&relevance), r.aps[qi]) {
                    (Some(o), Some(a)) => {
                        assert!((o - a).abs() < 1e-12, "AP mismatch: {o} vs {a}");
                        oracle_sum += o;
                        oracle_n += 1;
                    }
                    (None, None) => {}
                    other => panic!("skip disagreement: {other:?}"),
                }
            }
            assert!((r.map - oracle_sum / oracle_n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_all_embeddings_preserves_the_ranking_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dim = 5;
        let build = |rng: &mut ChaCha8Rng, scale: f64| {
            let mut q = EmbeddingSet::new(dim);
            let mut g = EmbeddingSet::new(dim);
            for i in 0..4 {
                let v: Vec<f64> =
                    (0..dim).map(|_| (rng.gen::<f64>() - 0.5) * scale).collect();
                q.push(&v, i % 2, 0).unwrap();
            }
            for i in 0..8 {
                let v: Vec<f64> =
                    (0..dim).map(|_| (rng.gen::<f64>() - 0.5) * scale).collect();
                g.push(&v, i % 2, 1).unwrap();
            }
            (q, g)
        };
        // Same draws, then scale the second copy by hand.
        let (q1, g1) = build(&mut rng, 1.0);
        let mut q2 = EmbeddingSet::new(dim);
        let mut g2 = EmbeddingSet::new(dim);
        for i in 0..q1.len() {
            let v: Vec<f64> = q1.vector(i).iter().map(|x| x * 2.0).collect();
            q2.push(&v, q1.id(i), q1.cam(i)).unwrap();
        }
        for i in 0..g1.len() {
            let v: Vec<f64> = g1.vector(i).iter().map(|x| x * 2.0).collect();
            g2.push(&v, g1.id(i), g1.cam(i)).unwrap();
        }
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let r1 = evaluate(&q1, &g1, metric).unwrap();
            let r2 = evaluate(&q2, &g2, metric).unwrap();
            assert!((r1.map - r2.map).abs() < 1e-12, "{metric} map changed under scaling");
            assert_eq!(r1.orders, r2.orders);
        }
    }

    #[test]
    fn cosine_rejects_zero_vectors_by_name() {
        let q = set(&[(&[0.0, 0.0], 0, 0)]);
        let g = set(&[(&[1.0, 0.0], 0, 1)]);
        match pairwise_distances(&q, &g, Metric::Cosine) {
            Err(Error::ZeroVectorCosine { set, index }) => {
                assert_eq!(set, "query");
                assert_eq!(index, 0);
            }
            other => panic!("expected zero-vector error, got {other:?}"),
        }
    }

    #[test]
    fn cosine_distance_reference_values() {
        let q = set(&[(&[1.0, 0.0], 0, 0)]);
        let g = set(&[(&[1.0, 0.0], 0, 1), (&[0.0, 2.0], 1, 1), (&[-3.0, 0.0], 2, 1)]);
        let d = pairwise_distances(&q, &g, Metric::Cosine).unwrap();
        assert!(d[0].abs() < 1e-15);
        assert!((d[1] - 1.0).abs() < 1e-15);
        assert!((d[2] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn results_csv_shape() {
        let q = set(&[(&[0.0], 0, 0)]);
        let g = set(&[(&[1.0], 0, 1), (&[2.0], 1, 1)]);
        let r = evaluate(&q, &g, Metric::Euclidean).unwrap();
        let csv = r.results_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], "metric,value");
        assert!(lines[1].starts_with("map,"));
        assert!(lines[2].starts_with("cmc_1,"));
        assert_eq!(lines.len(), 6);
    }
}
