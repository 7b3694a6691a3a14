use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{RankedRetrieval, RetrievalError};

/// Default cutoff for recall.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    /// 1-based rank of the first relevant shot.
    pub rank: usize,
    pub reciprocal_rank: f64,
    pub hit_at_k: bool,
    pub average_precision: f64,
    /// Relevant shots present in the ranking.
    pub relevant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub queries: Vec<QueryMetrics>,
    pub mrr: f64,
    pub recall_at_k: f64,
    pub map: f64,
}

/// MRR, R@K and mAP over `rankings`, with `relevant[i]` the ground truth of
/// `rankings[i]`.
///
/// `AP = Σₖ (Rₖ / n)·Pₖ` with `Pₖ = (1/k)Σ_{j≤k} Rⱼ`, where `n` counts the
/// relevant shots in the ranking.
pub fn compute_metrics<S: AsRef<str>>(
    rankings: &[RankedRetrieval],
    relevant: &[Vec<S>],
    k: usize,
) -> Result<MetricReport, RetrievalError> {
    assert_eq!(
        rankings.len(),
        relevant.len(),
        "one ground-truth list per ranking"
    );
    let mut queries = Vec::with_capacity(rankings.len());
    for (r, rel) in rankings.iter().zip(relevant) {
        let rel: HashSet<&str> = rel.iter().map(AsRef::as_ref).collect();
        let hits: Vec<bool> = r
            .ranking
            .iter()
            .map(|s| rel.contains(s.shot_id.as_str()))
            .collect();
        let n = hits.iter().filter(|&&h| h).count();
        if n == 0 {
            return Err(RetrievalError::NoRelevantShots(r.query_id.clone()));
        }
        let rank = hits.iter().position(|&h| h).expect("n > 0") + 1;
        let inv_n = 1.0 / n as f64;
        let mut seen = 0usize;
        let mut ap = 0.0;
        for (i, &h) in hits.iter().enumerate() {
            if h {
                seen += 1;
                ap += inv_n * (seen as f64 / (i + 1) as f64);
            }
        }
        queries.push(QueryMetrics {
            query_id: r.query_id.clone(),
            rank,
            reciprocal_rank: 1.0 / rank as f64,
            hit_at_k: rank <= k,
            average_precision: ap,
            relevant: n,
        });
    }
    let count = queries.len().max(1) as f64;
    let mrr = queries.iter().map(|q| q.reciprocal_rank).sum::<f64>() / count;
    let recall_at_k = queries.iter().filter(|q| q.hit_at_k).count() as f64 / count;
    let map = queries.iter().map(|q| q.average_precision).sum::<f64>() / count;
    Ok(MetricReport {
        k,
        queries,
        mrr,
        recall_at_k,
        map,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    /// Sample standard deviation over √n; zero for a single seed.
    pub stderr: f64,
}

impl MeanStderr {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, stderr: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            stderr: (var / n as f64).sqrt(),
        }
    }
}

/// Per-seed reports aggregated as mean ± standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub label: String,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub mrr: MeanStderr,
    pub recall_at_k: MeanStderr,
    pub map: MeanStderr,
    pub per_seed: Vec<MetricReport>,
}

pub fn summarize_seeds(
    label: &str,
    seeds: &[u64],
    reports: Vec<MetricReport>,
) -> Result<SeedSummary, RetrievalError> {
    if seeds.is_empty() || reports.is_empty() {
        return Err(RetrievalError::NoSeeds);
    }
    let pick =
        |f: fn(&MetricReport) -> f64| MeanStderr::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(SeedSummary {
        label: label.to_string(),
        seeds: seeds.to_vec(),
        k: reports[0].k,
        mrr: pick(|r| r.mrr),
        recall_at_k: pick(|r| r.recall_at_k),
        map: pick(|r| r.map),
        per_seed: reports,
    })
}

impl SeedSummary {
    /// Aligned text table, metrics in percent, one row per summary.
    pub fn table(rows: &[SeedSummary]) -> String {
        let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
        let k = rows.first().map_or(DEFAULT_K, |r| r.k);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>13}  {:>13}  {:>13}",
            "method",
            "mAP",
            "MRR",
            format!("R@{k}")
        );
        let cell = |m: &MeanStderr| format!("{:.1} ± {:.1}", 100.0 * m.mean, 100.0 * m.stderr);
        for r in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>13}  {:>13}  {:>13}",
                r.label,
                cell(&r.map),
                cell(&r.mrr),
                cell(&r.recall_at_k)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::RngStream;
    use crate::retrieval::RankedShot;

    fn ranking(ids: &[&str]) -> RankedRetrieval {
        RankedRetrieval {
            query_id: "q".into(),
            ranking: ids
                .iter()
                .enumerate()
                .map(|(i, id)| RankedShot {
                    shot_id: id.to_string(),
                    score: -(i as f64),
                })
                .collect(),
        }
    }

    #[test]
    fn relevant_first() {
        let m = compute_metrics(&[ranking(&["a", "b"])], &[vec!["a"]], 5).unwrap();
        assert_eq!((m.mrr, m.recall_at_k, m.map), (1.0, 1.0, 1.0));
    }

    #[test]
    fn relevant_second_of_four() {
        let m = compute_metrics(&[ranking(&["a", "b", "c", "d"])], &[vec!["b"]], 5).unwrap();
        assert_eq!((m.mrr, m.recall_at_k, m.map), (0.5, 1.0, 0.5));
    }

    #[test]
    fn missing_relevant_is_an_error() {
        assert!(matches!(
            compute_metrics(&[ranking(&["a"])], &[vec!["z"]], 5),
            Err(RetrievalError::NoRelevantShots(_))
        ));
    }

    #[test]
    fn single_relevant_map_equals_mrr() {
        let mut rng = RngStream::new(3);
        let ids: Vec<String> = (0..20).map(|i| format!("s{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let rankings: Vec<RankedRetrieval> = (0..10).map(|_| ranking(&refs)).collect();
        let rel: Vec<Vec<String>> = (0..10).map(|_| vec![ids[rng.index(20)].clone()]).collect();
        let m = compute_metrics(&rankings, &rel, 5).unwrap();
        assert!((m.map - m.mrr).abs() < 1e-15);
    }

    /// Literal transcription of the definitions, one query at a time.
    fn oracle(order: &[usize], relevant: &[bool], k: usize) -> (f64, f64, f64) {
        let r: Vec<f64> = order
            .iter()
            .map(|&s| if relevant[s] { 1.0 } else { 0.0 })
            .collect();
        let n: f64 = r.iter().sum();
        let rank = (1..=r.len()).find(|&k| r[k - 1] == 1.0).unwrap();
        let mut ap = 0.0;
        for kk in 1..=r.len() {
            let p: f64 = r[..kk].iter().sum::<f64>() / kk as f64;
            ap += (r[kk - 1] / n) * p;
        }
        (1.0 / rank as f64, if rank <= k { 1.0 } else { 0.0 }, ap)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn matches_definitional_oracle(
            cases in prop::collection::vec(
                (2usize..30).prop_flat_map(|m| (
                    Just((0..m).collect::<Vec<_>>()).prop_shuffle(),
                    prop::collection::vec(any::<bool>(), m),
                    0usize..m,
                )),
                1..6,
            ),
            k in 1usize..8,
        ) {
            let mut rankings = Vec::new();
            let mut relevant = Vec::new();
            let mut expected = Vec::new();
            for (order, mut mask, forced) in cases {
                mask[forced] = true;
                let ids: Vec<String> = order.iter().map(|s| format!("s{s}")).collect();
                let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
                rankings.push(ranking(&refs));
                relevant.push((0..mask.len()).filter(|&s| mask[s]).map(|s| format!("s{s}")).collect::<Vec<_>>());
                expected.push(oracle(&order, &mask, k));
            }
            let m = compute_metrics(&rankings, &relevant, k).unwrap();
            let count = expected.len() as f64;
            let mrr = expected.iter().map(|e| e.0).sum::<f64>() / count;
            let rk = expected.iter().map(|e| e.1).sum::<f64>() / count;
            let map = expected.iter().map(|e| e.2).sum::<f64>() / count;
            for (q, e) in m.queries.iter().zip(&expected) {
                prop_assert_eq!(q.reciprocal_rank, e.0);
                prop_assert_eq!(q.average_precision, e.2);
            }
            prop_assert_eq!(m.mrr, mrr);
            prop_assert_eq!(m.recall_at_k, rk);
            prop_assert_eq!(m.map, map);
        }
    }

    #[test]
    fn seed_aggregation() {
        let one = MeanStderr::of(&[0.4]);
        assert_eq!((one.mean, one.stderr), (0.4, 0.0));
        let same = MeanStderr::of(&[0.3, 0.3, 0.3]);
        assert_eq!(same.stderr, 0.0);
        let two = MeanStderr::of(&[0.0, 1.0]);
        assert!((two.mean - 0.5).abs() < 1e-15);
        // sample std = √0.5, stderr = √0.5/√2 = 0.5
        assert!((two.stderr - 0.5).abs() < 1e-15);
        assert!(matches!(
            summarize_seeds("x", &[], vec![]),
            Err(RetrievalError::NoSeeds)
        ));
    }

    #[test]
    fn table_is_aligned() {
        let r = compute_metrics(&[ranking(&["a", "b"])], &[vec!["b"]], 5).unwrap();
        let s = summarize_seeds("ours", &[1], vec![r]).unwrap();
        let t = SeedSummary::table(&[
            s.clone(),
            SeedSummary {
                label: "language".into(),
                ..s
            },
        ]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines
            .iter()
            .all(|l| l.chars().count() == lines[0].chars().count()));
        assert!(lines[1].contains("50.0 ± 0.0"));
    }
}
