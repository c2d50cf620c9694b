//! Ranking evaluation: filtered ranks, hit@K and ndcg@K per query shape.
//!
//! Each target answer is ranked against the items that are not known
//! answers of its record. Metrics are averaged over a record's targets,
//! then over records of a shape; the overall average is the unweighted
//! mean over shapes that have records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::EntityId;
use crate::model::{RecModel, Task};
use crate::query::{RecInstance, QueryShape};
use crate::scalar::Scalar;
use crate::sets::IdSet;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("record {index} has no hard answers to rank")]
    NoHardAnswers { index: usize },
    #[error("cutoffs must be positive")]
    InvalidCutoff,
}

/// Which answers of a record are ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// Hard joint answers (valid/test protocol).
    HardOnly,
    /// Every joint answer (fit on training records).
    AllAnswers,
}

/// `(item, score)` pairs ordered by descending score, ties by ascending id.
pub fn rank_by_score<T: Scalar>(mut scored: Vec<(EntityId, T)>) -> Vec<(EntityId, T)> {
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    scored
}

/// Items ordered by descending score, skipping `exclude`.
pub fn rank_items<T: Scalar>(model: &RecModel<T>, q_task: &[T], items: &IdSet, exclude: &IdSet) -> Vec<EntityId> {
    let scored = items.iter().filter(|i| !exclude.contains(*i)).map(|i| (i, model.logit(q_task, i))).collect();
    rank_by_score(scored).into_iter().map(|(i, _)| i).collect()
}

fn beats<T: Scalar>(a: (EntityId, T), b: (EntityId, T)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

/// 1-based rank of each target among itself and the non-`known` items.
///
/// `scores` holds one score per candidate item. `known` should contain all
/// answers of the record, targets included.
pub fn filtered_ranks<T: Scalar>(scores: &[(EntityId, T)], targets: &IdSet, known: &IdSet) -> Vec<usize> {
    let others: Vec<(EntityId, T)> = scores.iter().copied().filter(|(i, _)| !known.contains(*i)).collect();
    targets
        .iter()
        .map(|t| {
            let own = scores.iter().copied().find(|(i, _)| *i == t).expect("target is a scored item");
            1 + others.iter().filter(|o| o.0 != t && beats(**o, own)).count()
        })
        .collect()
}

pub fn hit_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Binary-relevance discounted gain of a single answer.
pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Mean metrics of one shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    pub records: usize,
    /// One value per cutoff, in [`EvalReport::ks`] order.
    pub hit: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub shapes: BTreeMap<QueryShape, ShapeMetrics>,
    /// Unweighted mean over the shapes present.
    pub avg: ShapeMetrics,
}

impl EvalReport {
    pub fn hit(&self, shape: QueryShape, k: usize) -> Option<f64> {
        let j = self.ks.iter().position(|&x| x == k)?;
        self.shapes.get(&shape).map(|m| m.hit[j])
    }

    pub fn ndcg(&self, shape: QueryShape, k: usize) -> Option<f64> {
        let j = self.ks.iter().position(|&x| x == k)?;
        self.shapes.get(&shape).map(|m| m.ndcg[j])
    }

    pub fn avg_hit(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|j| self.avg.hit[j])
    }

    pub fn avg_ndcg(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|j| self.avg.ndcg[j])
    }

    pub fn all_finite(&self) -> bool {
        self.shapes.values().chain([&self.avg]).all(|m| m.hit.iter().chain(&m.ndcg).all(|v| v.is_finite()))
    }

    /// Plain-text table: one column per shape plus `avg`, one row per
    /// metric and cutoff.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<9}", "metric");
        for s in QueryShape::ALL {
            let _ = write!(out, " {:>7}", s.name());
        }
        out.push_str(&format!(" {:>7}\n", "avg"));
        let ks = self.ks.iter().enumerate();
        let rows: Vec<(String, bool, usize)> = ks
            .clone()
            .map(|(j, k)| (format!("hit@{k}"), false, j))
            .chain(ks.map(|(j, k)| (format!("ndcg@{k}"), true, j)))
            .collect();
        let get = |m: &ShapeMetrics, ndcg: bool, j: usize| if ndcg { m.ndcg[j] } else { m.hit[j] };
        for (label, ndcg, j) in rows {
            let _ = write!(out, "{label:<9}");
            for s in QueryShape::ALL {
                match self.shapes.get(&s) {
                    Some(m) => {
                        let _ = write!(out, " {:>7.4}", get(m, ndcg, j));
                    }
                    None => {
                        let _ = write!(out, " {:>7}", "-");
                    }
                }
            }
            let _ = writeln!(out, " {:>7.4}", get(&self.avg, ndcg, j));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Per-record metrics, `(hit per k, ndcg per k)` averaged over targets.
fn record_metrics<T: Scalar>(
    model: &RecModel<T>,
    items: &IdSet,
    rec: &RecInstance,
    targets: &IdSet,
    ks: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let emb = model.task_embeddings(rec.user, &rec.requirement);
    let q = &emb.tasks[Task::Joint.index()];
    let scores: Vec<(EntityId, T)> = items.iter().map(|i| (i, model.logit(q, i))).collect();
    let known = rec.answers.joint.union(targets);
    let ranks = filtered_ranks(&scores, targets, &known);
    let n = ranks.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n;
    let hit = ks.iter().map(|&k| mean(&|r| hit_at(r, k))).collect();
    let ndcg = ks.iter().map(|&k| mean(&|r| ndcg_at(r, k))).collect();
    (hit, ndcg)
}

/// Ranks the joint-task embedding of every record against `items`.
pub fn evaluate<T: Scalar>(
    model: &RecModel<T>,
    items: &IdSet,
    records: &[RecInstance],
    ks: &[usize],
    mode: TargetMode,
) -> Result<EvalReport, EvalError> {
    if ks.contains(&0) {
        return Err(EvalError::InvalidCutoff);
    }
    let mut targets = Vec::with_capacity(records.len());
    for (index, rec) in records.iter().enumerate() {
        let t = match mode {
            TargetMode::HardOnly => rec.hard.as_ref().map(|h| h.joint.clone()).unwrap_or_default(),
            TargetMode::AllAnswers => rec.answers.joint.clone(),
        };
        if t.is_empty() {
            return Err(EvalError::NoHardAnswers { index });
        }
        targets.push(t);
    }
    let per_record: Vec<(Vec<f64>, Vec<f64>)> = records
        .par_iter()
        .zip(targets.par_iter())
        .map(|(rec, t)| record_metrics(model, items, rec, t, ks))
        .collect();

    let mut sums: BTreeMap<QueryShape, ShapeMetrics> = BTreeMap::new();
    for (rec, (hit, ndcg)) in records.iter().zip(per_record) {
        let m = sums
            .entry(rec.shape)
            .or_insert_with(|| ShapeMetrics { records: 0, hit: vec![0.0; ks.len()], ndcg: vec![0.0; ks.len()] });
        m.records += 1;
        m.hit.iter_mut().zip(&hit).for_each(|(a, b)| *a += b);
        m.ndcg.iter_mut().zip(&ndcg).for_each(|(a, b)| *a += b);
    }
    for m in sums.values_mut() {
        let n = m.records as f64;
        m.hit.iter_mut().chain(m.ndcg.iter_mut()).for_each(|v| *v /= n);
    }
    let n_shapes = sums.len().max(1) as f64;
    let mut avg = ShapeMetrics { records: records.len(), hit: vec![0.0; ks.len()], ndcg: vec![0.0; ks.len()] };
    for m in sums.values() {
        avg.hit.iter_mut().zip(&m.hit).for_each(|(a, b)| *a += b / n_shapes);
        avg.ndcg.iter_mut().zip(&m.ndcg).for_each(|(a, b)| *a += b / n_shapes);
    }
    Ok(EvalReport { ks: ks.to_vec(), shapes: sums, avg })
}
