use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use super::WorldTruth;
use crate::mining::{InstanceRecord, Rejection};
use crate::retrieval::SeedSummary;

/// `hits / total`, or N/A when nothing was counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ratio {
    pub hits: usize,
    pub total: usize,
    /// `None` when `total` is zero.
    pub value: Option<f64>,
}

impl Ratio {
    pub fn new(hits: usize, total: usize) -> Self {
        Self {
            hits,
            total,
            value: (total > 0).then(|| hits as f64 / total as f64),
        }
    }

    pub fn is_perfect(&self) -> bool {
        self.value == Some(1.0)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.value {
            Some(v) => write!(f, "{v:.3} ({}/{})", self.hits, self.total),
            None => write!(f, "N/A (0/0)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageScore {
    pub precision: Ratio,
    pub recall: Ratio,
}

/// Per-stage reconciliation of a pipeline run against a world's truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorldReport {
    /// Mined instance ids against planted ones.
    pub instances: StageScore,
    /// Mined positive shots against planted naming-video shots.
    pub shots: StageScore,
    /// Exact names among correctly mined instances.
    pub names: Ratio,
    /// Correct categories among correctly mined instances that carry one.
    pub categories: Ratio,
    /// Planted decoys found among the rejections.
    pub decoys_rejected: Ratio,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<SeedSummary>,
}

pub fn world_report(
    truth: &WorldTruth,
    mined: &[InstanceRecord],
    rejections: &[Rejection],
    retrieval: Option<&SeedSummary>,
) -> WorldReport {
    let planted: HashMap<&str, _> = truth
        .instances
        .iter()
        .map(|i| (i.instance_id.as_str(), i))
        .collect();
    let matched: Vec<_> = mined
        .iter()
        .filter_map(|r| planted.get(r.instance_id.as_str()).map(|p| (r, *p)))
        .collect();

    let mined_shots: usize = mined.iter().map(|r| r.shots.len()).sum();
    let correct_shots: usize = mined
        .iter()
        .map(|r| {
            r.shots
                .iter()
                .filter(|s| {
                    truth.shot_labels.get(s.as_str()).and_then(Option::as_deref)
                        == Some(r.instance_id.as_str())
                })
                .count()
        })
        .sum();
    let planted_shots: usize = truth.instances.iter().map(|i| i.train_shots.len()).sum();

    let categorized: Vec<_> = matched
        .iter()
        .filter(|(r, _)| r.category.is_some())
        .collect();
    let rejected: Vec<&str> = rejections.iter().map(|r| r.id.as_str()).collect();
    WorldReport {
        instances: StageScore {
            precision: Ratio::new(matched.len(), mined.len()),
            recall: Ratio::new(matched.len(), truth.instances.len()),
        },
        shots: StageScore {
            precision: Ratio::new(correct_shots, mined_shots),
            recall: Ratio::new(correct_shots, planted_shots),
        },
        names: Ratio::new(
            matched.iter().filter(|(r, p)| r.name == p.name).count(),
            matched.len(),
        ),
        categories: Ratio::new(
            categorized
                .iter()
                .filter(|(r, p)| r.category.as_deref() == Some(p.category.as_str()))
                .count(),
            categorized.len(),
        ),
        decoys_rejected: Ratio::new(
            truth
                .decoys
                .iter()
                .filter(|d| rejected.contains(&d.candidate_id.as_str()))
                .count(),
            truth.decoys.len(),
        ),
        retrieval: retrieval.cloned(),
    }
}
