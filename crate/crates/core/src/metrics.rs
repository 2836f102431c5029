//! Evaluation metrics for the two-stage harness: row-stochastic confusion
//! matrices, base-accuracy forgetting curves, cluster-geometry statistics,
//! and plateau-relative convergence counts, all collected into one
//! serializable report per adaptation run.
//!
//! Conventions:
//!
//! * Accuracies are count-weighted means of the confusion diagonal, so the
//!   reported numbers and the matrix can never disagree.
//! * Convergence is the first logged iteration whose novel accuracy reaches
//!   90% of the final value — plateau-relative, so it is comparable across
//!   arms that end at different accuracies. A run ending at zero novel
//!   accuracy has no defined convergence point.
//! * Cluster statistics are computed under the fixed metrics kernel
//!   (shifted cosine), not the loss kernel, so arms stay comparable.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::head::ProjectionHead;
use crate::kernel::{build_similarity_matrix, SimilarityMatrix};
use crate::setfn::ClassPartition;
use crate::train::{class_prototypes, classify_rows, metrics_kernel, TrainLog};

/// Tolerance on the row-sum invariant of confusion matrices.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Fraction of the final novel accuracy that counts as "converged".
pub const CONVERGENCE_FRACTION: f64 = 0.9;

/// Row-stochastic confusion matrix over a fixed class list.
///
/// `rows[t][p]` is the fraction of true-class `class_ids[t]` test rows
/// predicted as `class_ids[p]`. Classes absent from the test split keep an
/// all-zero row and are flagged in `empty_rows`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_ids: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
    pub row_counts: Vec<usize>,
    pub empty_rows: Vec<bool>,
}

impl ConfusionMatrix {
    pub fn index_of(&self, class: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    /// Fraction of true-class `t` rows predicted as class `p`.
    pub fn get(&self, true_class: usize, predicted_class: usize) -> Option<f64> {
        let t = self.index_of(true_class)?;
        let p = self.index_of(predicted_class)?;
        Some(self.rows[t][p])
    }

    /// Count-weighted mean of the diagonal over the given classes — the
    /// accuracy of that group.
    pub fn group_accuracy(&self, group: &BTreeSet<usize>) -> f64 {
        let mut weighted = 0.0;
        let mut total = 0usize;
        for (t, &class) in self.class_ids.iter().enumerate() {
            if group.contains(&class) {
                weighted += self.rows[t][t] * self.row_counts[t] as f64;
                total += self.row_counts[t];
            }
        }
        if total == 0 {
            0.0
        } else {
            weighted / total as f64
        }
    }

    /// Count-weighted accuracy over every class.
    pub fn accuracy(&self) -> f64 {
        self.group_accuracy(&self.class_ids.iter().copied().collect())
    }

    /// Count-weighted probability mass confused across the base/novel
    /// boundary, in either direction.
    pub fn cross_group_mass(&self, novel: &BTreeSet<usize>) -> f64 {
        let mut mass = 0.0;
        let mut total = 0usize;
        for (t, &tc) in self.class_ids.iter().enumerate() {
            total += self.row_counts[t];
            for (p, &pc) in self.class_ids.iter().enumerate() {
                if novel.contains(&tc) != novel.contains(&pc) {
                    mass += self.rows[t][p] * self.row_counts[t] as f64;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            mass / total as f64
        }
    }

    /// Every non-empty row must sum to 1 within [`ROW_SUM_TOL`].
    pub fn check_row_stochastic(&self) -> Result<()> {
        for (t, row) in self.rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if self.empty_rows[t] {
                if sum != 0.0 {
                    return Err(Error::Domain(format!(
                        "empty confusion row {t} has mass {sum}"
                    )));
                }
            } else if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Domain(format!(
                    "confusion row {t} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Build the confusion matrix of `predictions` against `true_labels` over
/// a fixed ascending class list.
pub fn compute_confusion(
    true_labels: &[usize],
    predictions: &[usize],
    class_ids: &[usize],
) -> Result<ConfusionMatrix> {
    if true_labels.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} predictions",
            true_labels.len(),
            predictions.len()
        )));
    }
    if class_ids.is_empty() {
        return Err(Error::EmptySet {
            context: "confusion class list".into(),
        });
    }
    if class_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "confusion class ids must be strictly ascending".into(),
        ));
    }
    let index: BTreeMap<usize, usize> =
        class_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let k = class_ids.len();
    let mut counts = vec![vec![0usize; k]; k];
    let mut row_counts = vec![0usize; k];
    for (&t, &p) in true_labels.iter().zip(predictions.iter()) {
        let ti = *index
            .get(&t)
            .ok_or(Error::OutOfBounds { index: t, size: k })?;
        let pi = *index
            .get(&p)
            .ok_or(Error::OutOfBounds { index: p, size: k })?;
        counts[ti][pi] += 1;
        row_counts[ti] += 1;
    }
    let mut rows = vec![vec![0.0; k]; k];
    let mut empty_rows = vec![false; k];
    for t in 0..k {
        if row_counts[t] == 0 {
            empty_rows[t] = true;
            continue;
        }
        for p in 0..k {
            rows[t][p] = counts[t][p] as f64 / row_counts[t] as f64;
        }
    }
    let m = ConfusionMatrix {
        class_ids: class_ids.to_vec(),
        rows,
        row_counts,
        empty_rows,
    };
    m.check_row_stochastic()?;
    Ok(m)
}

/// Classify a test split with full-pool prototypes and tabulate confusion.
pub fn confusion_from_head(
    head: &ProjectionHead,
    pool: &Split,
    test: &Split,
) -> Result<ConfusionMatrix> {
    if test.is_empty() {
        return Err(Error::EmptySet {
            context: "confusion test split".into(),
        });
    }
    let protos = class_prototypes(head, pool)?;
    let predictions = classify_rows(head, &test.x, &protos)?;
    // The class list covers both what the classifier knows and what the
    // test split contains, so unknown-true-label rows still tabulate.
    let mut ids: BTreeSet<usize> = protos.class_ids().collect();
    ids.extend(test.labels.iter().copied());
    let ids: Vec<usize> = ids.into_iter().collect();
    compute_confusion(&test.labels, &predictions, &ids)
}

/// Base accuracy per logged evaluation, in iteration order.
pub fn forgetting_curve(log: &TrainLog) -> Result<Vec<(usize, f64)>> {
    if log.records.is_empty() {
        return Err(Error::EmptySet {
            context: "training log".into(),
        });
    }
    Ok(log
        .records
        .iter()
        .map(|r| (r.iteration, r.base_accuracy))
        .collect())
}

/// Final-minus-initial base accuracy; negative means the run forgot base
/// classes.
pub fn forgetting_delta(log: &TrainLog) -> Result<f64> {
    let curve = forgetting_curve(log)?;
    Ok(curve.last().unwrap().1 - curve.first().unwrap().1)
}

/// First logged iteration whose novel accuracy reaches
/// [`CONVERGENCE_FRACTION`] of the final value. `Ok(None)` when the run
/// ends at zero novel accuracy, where the threshold is meaningless.
pub fn convergence_iterations(log: &TrainLog) -> Result<Option<usize>> {
    let evals: Vec<(usize, f64)> = log
        .records
        .iter()
        .filter_map(|r| r.novel_accuracy.map(|a| (r.iteration, a)))
        .collect();
    if evals.is_empty() {
        return Err(Error::EmptySet {
            context: "log has no novel-accuracy evaluations".into(),
        });
    }
    let final_acc = evals.last().unwrap().1;
    if final_acc <= 0.0 {
        return Ok(None);
    }
    let threshold = CONVERGENCE_FRACTION * final_acc;
    Ok(evals
        .iter()
        .find(|(_, a)| *a >= threshold)
        .map(|(it, _)| *it))
}

/// Within-class statistic for one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassClusterStat {
    pub class_id: usize,
    /// Mean pairwise similarity among the class's rows; `None` for
    /// singleton classes, which have no pairs.
    pub mean_intra_sim: Option<f64>,
    pub singleton: bool,
}

/// Cross-class statistic for one ordered class pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairClusterStat {
    pub from: usize,
    pub to: usize,
    pub mean_sim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    /// Ascending by class id.
    pub per_class: Vec<ClassClusterStat>,
    /// All ordered pairs of distinct classes, lexicographic.
    pub per_pair: Vec<PairClusterStat>,
    /// Mean of the non-singleton per-class statistics.
    pub mean_intra_sim: Option<f64>,
    /// Mean over ordered pairs of distinct classes.
    pub mean_inter_sim: Option<f64>,
    /// Mean over (base, novel) pairs only — the separation the inter term
    /// is supposed to drive down.
    pub mean_base_novel_sim: Option<f64>,
}

/// Cluster statistics from a prebuilt similarity matrix and partition.
pub fn cluster_stats_from_similarity(
    s: &SimilarityMatrix,
    partition: &ClassPartition,
) -> Result<ClusterStats> {
    if partition.ground_size() != s.n() {
        return Err(Error::Shape(format!(
            "partition covers {} elements, similarity matrix has {} rows",
            partition.ground_size(),
            s.n()
        )));
    }
    let mut per_class = Vec::new();
    for (class, members) in partition.iter() {
        let rows: Vec<usize> = members.iter().copied().collect();
        if rows.len() < 2 {
            per_class.push(ClassClusterStat {
                class_id: class,
                mean_intra_sim: None,
                singleton: true,
            });
            continue;
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (a, &i) in rows.iter().enumerate() {
            for &j in rows.iter().skip(a + 1) {
                total += s.get(i, j);
                count += 1;
            }
        }
        per_class.push(ClassClusterStat {
            class_id: class,
            mean_intra_sim: Some(total / count as f64),
            singleton: false,
        });
    }
    let mut per_pair = Vec::new();
    for from in partition.class_ids() {
        for to in partition.class_ids() {
            if from == to {
                continue;
            }
            let a = partition.members(from).expect("id from partition");
            let b = partition.members(to).expect("id from partition");
            let mut total = 0.0;
            for &i in a {
                for &j in b {
                    total += s.get(i, j);
                }
            }
            per_pair.push(PairClusterStat {
                from,
                to,
                mean_sim: total / (a.len() * b.len()) as f64,
            });
        }
    }
    let intra_values: Vec<f64> = per_class.iter().filter_map(|c| c.mean_intra_sim).collect();
    let mean_intra_sim = if intra_values.is_empty() {
        None
    } else {
        Some(intra_values.iter().sum::<f64>() / intra_values.len() as f64)
    };
    let mean_inter_sim = if per_pair.is_empty() {
        None
    } else {
        Some(per_pair.iter().map(|p| p.mean_sim).sum::<f64>() / per_pair.len() as f64)
    };
    let cross: Vec<f64> = per_pair
        .iter()
        .filter(|p| !partition.is_novel(p.from) && partition.is_novel(p.to))
        .map(|p| p.mean_sim)
        .collect();
    let mean_base_novel_sim = if cross.is_empty() {
        None
    } else {
        Some(cross.iter().sum::<f64>() / cross.len() as f64)
    };
    Ok(ClusterStats {
        per_class,
        per_pair,
        mean_intra_sim,
        mean_inter_sim,
        mean_base_novel_sim,
    })
}

/// Cluster statistics of a split's embeddings under the metrics kernel.
pub fn cluster_stats(
    head: &ProjectionHead,
    split: &Split,
    novel_ids: &BTreeSet<usize>,
) -> Result<ClusterStats> {
    let fwd = head.forward(&split.x)?;
    let s = build_similarity_matrix(&fwd.z, &metrics_kernel())?;
    let partition =
        ClassPartition::from_labels(&split.labels)?.with_novel_ids(novel_ids.iter().copied());
    cluster_stats_from_similarity(&s, &partition)
}

/// Everything the harness reports about one adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    /// Unweighted mean of base and novel accuracy.
    pub combined_score: f64,
    pub confusion: ConfusionMatrix,
    /// Count-weighted base↔novel confusion mass, both directions.
    pub cross_group_confusion: f64,
    pub forgetting_curve: Vec<(usize, f64)>,
    pub forgetting_delta: f64,
    pub convergence_iters: Option<usize>,
    pub cluster_stats: ClusterStats,
}

/// Assemble the full report for an adapted head.
///
/// `pool` is the adaptation pool the prototypes come from, `test` the
/// held-out split, `novel_ids` the novel class set, and `log` the
/// adaptation log (for curves and convergence). Accuracy and confusion
/// are measured on `test`; cluster statistics are measured on `pool`,
/// the embeddings the loss directly shapes.
pub fn metrics_report(
    head: &ProjectionHead,
    pool: &Split,
    test: &Split,
    novel_ids: &BTreeSet<usize>,
    log: &TrainLog,
) -> Result<MetricsReport> {
    let confusion = confusion_from_head(head, pool, test)?;
    let all: BTreeSet<usize> = confusion.class_ids.iter().copied().collect();
    let base: BTreeSet<usize> = all.difference(novel_ids).copied().collect();
    let base_accuracy = confusion.group_accuracy(&base);
    let novel_accuracy = confusion.group_accuracy(novel_ids);
    let combined_score = 0.5 * (base_accuracy + novel_accuracy);
    let cross_group_confusion = confusion.cross_group_mass(novel_ids);
    let curve = forgetting_curve(log)?;
    let delta = forgetting_delta(log)?;
    let convergence_iters = convergence_iterations(log)?;
    if let Some(c) = convergence_iters {
        debug_assert!(c <= log.iterations);
    }
    let cluster = cluster_stats(head, pool, novel_ids)?;
    Ok(MetricsReport {
        base_accuracy,
        novel_accuracy,
        combined_score,
        confusion,
        cross_group_confusion,
        forgetting_curve: curve,
        forgetting_delta: delta,
        convergence_iters,
        cluster_stats: cluster,
    })
}
