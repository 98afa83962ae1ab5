//! Recall metrics for video retrieval and moment retrieval, and the profile
//! of which retrieval ranks the top-1 moments come from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{temporal_iou, Moment, Query, QueryRecord, Span};
use crate::ranking::PredictionRecord;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("invalid evaluation request: {0}")]
    Invalid(String),
}

/// Ground-truth moment per query id.
pub type GroundTruth = BTreeMap<String, Moment>;

/// Predicted moments per query id, best first.
pub type Predictions = BTreeMap<String, Vec<PredictionRecord>>;

/// Retrieved video ids per query id, best first.
pub type RankLists = BTreeMap<String, Vec<String>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Vcmr,
    Svmr,
    Vr,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Vcmr => "VCMR",
            Task::Svmr => "SVMR",
            Task::Vr => "VR",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s.to_ascii_lowercase().as_str() {
            "vcmr" => Some(Task::Vcmr),
            "svmr" => Some(Task::Svmr),
            "vr" => Some(Task::Vr),
            _ => None,
        }
    }
}

pub fn ground_truth_of(queries: &[Query]) -> GroundTruth {
    queries
        .iter()
        .filter_map(|q| q.ground_truth.clone().map(|m| (q.query_id.clone(), m)))
        .collect()
}

/// Group records by query and order each list by rank.
pub fn group_predictions(records: impl IntoIterator<Item = PredictionRecord>) -> Predictions {
    let mut out = Predictions::new();
    for r in records {
        out.entry(r.query_id.clone()).or_default().push(r);
    }
    for list in out.values_mut() {
        list.sort_by_key(|r| r.rank);
    }
    out
}

fn is_hit(pred: &PredictionRecord, gt: &Moment, p: f64, strict: bool) -> bool {
    if pred.video_id != gt.video_id || pred.st_frame > pred.ed_frame {
        return false;
    }
    let iou = temporal_iou(Span::new(pred.st_frame, pred.ed_frame), gt.span()).expect("ordered spans");
    if strict {
        iou > p
    } else {
        iou >= p
    }
}

fn check_k(k: usize) -> Result<(), EvalError> {
    if k == 0 {
        return Err(EvalError::Invalid("K must be at least 1".into()));
    }
    Ok(())
}

fn percentage(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Percentage of ground-truth queries with a hit among their top-`k`
/// predictions. A hit needs the right video and IoU ≥ `p` (or > `p` when
/// `strict`). For SVMR only predictions inside the ground-truth video count.
pub fn recall_at_k_iou(
    predictions: &Predictions,
    ground_truth: &GroundTruth,
    task: Task,
    k: usize,
    p: f64,
    strict: bool,
) -> Result<f64, EvalError> {
    check_k(k)?;
    if task == Task::Vr {
        return Err(EvalError::Invalid("VR recall is computed from rank lists".into()));
    }
    let mut hits = 0;
    for (qid, gt) in ground_truth {
        let Some(list) = predictions.get(qid) else {
            warn!("query {qid} has no predictions; counted as a miss");
            continue;
        };
        let hit = match task {
            Task::Svmr => list
                .iter()
                .filter(|r| r.video_id == gt.video_id)
                .take(k)
                .any(|r| is_hit(r, gt, p, strict)),
            _ => list.iter().take(k).any(|r| is_hit(r, gt, p, strict)),
        };
        hits += hit as usize;
    }
    Ok(percentage(hits, ground_truth.len()))
}

/// Percentage of ground-truth queries whose video appears in the top-`k`.
pub fn vr_recall_at_k(rank_lists: &RankLists, ground_truth: &GroundTruth, k: usize) -> Result<f64, EvalError> {
    check_k(k)?;
    let mut hits = 0;
    for (qid, gt) in ground_truth {
        let Some(list) = rank_lists.get(qid) else {
            warn!("query {qid} has no retrieval list; counted as a miss");
            continue;
        };
        hits += list.iter().take(k).any(|v| *v == gt.video_id) as usize;
    }
    Ok(percentage(hits, ground_truth.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub ious: Vec<f64>,
    pub strict_iou: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10, 100],
            ious: vec![0.5, 0.7],
            strict_iou: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub task: Task,
    pub k: usize,
    /// Absent for VR.
    pub iou: Option<f64>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub config: serde_json::Value,
    pub metrics: Vec<Metric>,
}

impl EvalReport {
    pub fn get(&self, task: Task, k: usize, iou: Option<f64>) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.task == task && m.k == k && m.iou == iou)
            .map(|m| m.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,k,iou,value\n");
        for m in &self.metrics {
            let iou = m.iou.map(|p| p.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", m.task.name(), m.k, iou, m.value).expect("string write");
        }
        out
    }
}

/// Every VCMR and SVMR metric over `cfg.ks × cfg.ious`, plus VR at `cfg.ks`
/// when rank lists are given.
pub fn evaluate(
    predictions: &Predictions,
    rank_lists: Option<&RankLists>,
    ground_truth: &GroundTruth,
    cfg: &EvalConfig,
    config_echo: serde_json::Value,
) -> Result<EvalReport, EvalError> {
    let mut metrics = Vec::new();
    for task in [Task::Vcmr, Task::Svmr] {
        for &p in &cfg.ious {
            for &k in &cfg.ks {
                let value = recall_at_k_iou(predictions, ground_truth, task, k, p, cfg.strict_iou)?;
                metrics.push(Metric {
                    task,
                    k,
                    iou: Some(p),
                    value,
                });
            }
        }
    }
    if let Some(lists) = rank_lists {
        for &k in &cfg.ks {
            metrics.push(Metric {
                task: Task::Vr,
                k,
                iou: None,
                value: vr_recall_at_k(lists, ground_truth, k)?,
            });
        }
    }
    Ok(EvalReport {
        n_queries: ground_truth.len(),
        config: config_echo,
        metrics,
    })
}

/// For each retrieval rank `r` in `1..=k_max`, the fraction of ground-truth
/// queries whose top-1 prediction came from the rank-`r` video.
pub fn top1_source_fractions(predictions: &Predictions, ground_truth: &GroundTruth, k_max: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k_max];
    for qid in ground_truth.keys() {
        if let Some(top) = predictions.get(qid).and_then(|l| l.first()) {
            if (1..=k_max).contains(&top.video_rank) {
                counts[top.video_rank - 1] += 1;
            }
        }
    }
    let n = ground_truth.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeBias {
    pub scoring_mode: String,
    pub k_max: usize,
    /// Index `r - 1` holds the top-1 share of retrieval rank `r`.
    pub rank_fractions: Vec<f64>,
    /// VCMR R@1 at the profile IoU as a function of retrieved videos.
    pub recall_at_1: Vec<RecallPoint>,
}

impl ModeBias {
    /// Top-1 share of retrieval ranks `1..=r`.
    pub fn head_fraction(&self, r: usize) -> f64 {
        self.rank_fractions.iter().take(r).sum()
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall_at_1.iter().find(|p| p.k == k).map(|p| p.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasProfile {
    pub iou: f64,
    pub strict_iou: bool,
    pub modes: Vec<ModeBias>,
}

impl BiasProfile {
    pub fn mode(&self, name: &str) -> Option<&ModeBias> {
        self.modes.iter().find(|m| m.scoring_mode == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scoring_mode,series,x,value\n");
        for m in &self.modes {
            for (i, f) in m.rank_fractions.iter().enumerate() {
                writeln!(out, "{},top1_rank_fraction,{},{}", m.scoring_mode, i + 1, f).expect("string write");
            }
            for p in &m.recall_at_1 {
                writeln!(out, "{},vcmr_r1,{},{}", m.scoring_mode, p.k, p.value).expect("string write");
            }
        }
        out
    }
}

/// Bias profile of one scoring mode from its predictions at each number of
/// retrieved videos. Rank fractions come from the largest K in `sweep`.
pub fn bias_profile(
    scoring_mode: &str,
    sweep: &[(usize, Predictions)],
    ground_truth: &GroundTruth,
    iou: f64,
    strict: bool,
) -> Result<ModeBias, EvalError> {
    let Some((k_max, full)) = sweep.iter().max_by_key(|(k, _)| *k) else {
        return Err(EvalError::Invalid("empty K sweep".into()));
    };
    let mut recall_at_1 = Vec::with_capacity(sweep.len());
    for (k, preds) in sweep {
        recall_at_1.push(RecallPoint {
            k: *k,
            value: recall_at_k_iou(preds, ground_truth, Task::Vcmr, 1, iou, strict)?,
        });
    }
    recall_at_1.sort_by_key(|p| p.k);
    Ok(ModeBias {
        scoring_mode: scoring_mode.to_string(),
        k_max: *k_max,
        rank_fractions: top1_source_fractions(full, ground_truth, *k_max),
        recall_at_1,
    })
}

fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>, EvalError> {
    let file = path.display().to_string();
    let f = fs::File::open(path).map_err(|source| EvalError::Io {
        file: file.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            file: file.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            file: file.clone(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Predictions, EvalError> {
    Ok(group_predictions(read_jsonl::<PredictionRecord>(path)?))
}

/// Ground truth from a query file; queries without a moment are skipped.
pub fn read_ground_truth(path: &Path) -> Result<GroundTruth, EvalError> {
    let mut gt = GroundTruth::new();
    for (i, r) in read_jsonl::<QueryRecord>(path)?.into_iter().enumerate() {
        match (r.video_id, r.st_frame, r.ed_frame) {
            (Some(video_id), Some(st_frame), Some(ed_frame)) if st_frame <= ed_frame => {
                gt.insert(
                    r.query_id,
                    Moment {
                        video_id,
                        st_frame,
                        ed_frame,
                    },
                );
            }
            (None, None, None) => {}
            _ => {
                return Err(EvalError::Parse {
                    file: path.display().to_string(),
                    line: i + 1,
                    message: format!("query {} has an incomplete or inverted moment", r.query_id),
                })
            }
        }
    }
    Ok(gt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankListRecord {
    pub query_id: String,
    pub video_ids: Vec<String>,
    pub scores: Vec<f64>,
}

pub fn read_rank_lists(path: &Path) -> Result<RankLists, EvalError> {
    Ok(read_jsonl::<RankListRecord>(path)?
        .into_iter()
        .map(|r| (r.query_id, r.video_ids))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(q: &str, rank: usize, v: &str, st: usize, ed: usize) -> PredictionRecord {
        PredictionRecord {
            query_id: q.into(),
            rank,
            video_id: v.into(),
            st_frame: st,
            ed_frame: ed,
            score: -(rank as f64),
            video_rank: 1,
        }
    }

    fn moment(v: &str, st: usize, ed: usize) -> Moment {
        Moment {
            video_id: v.into(),
            st_frame: st,
            ed_frame: ed,
        }
    }

    #[test]
    fn hit_and_wrong_video() {
        // IoU of [0,4] with [0,3] is 4/5.
        let preds = group_predictions([pred("a", 1, "v1", 0, 4), pred("b", 1, "v9", 0, 3)]);
        let gt: GroundTruth = [("a".into(), moment("v1", 0, 3)), ("b".into(), moment("v2", 0, 3))].into();
        assert_eq!(recall_at_k_iou(&preds, &gt, Task::Vcmr, 1, 0.7, false).unwrap(), 50.0);
    }

    #[test]
    fn exact_predictions_score_full_marks() {
        let gt: GroundTruth = [("a".into(), moment("v1", 2, 5)), ("b".into(), moment("v2", 0, 0))].into();
        let preds = group_predictions(gt.iter().map(|(q, m)| pred(q, 1, &m.video_id, m.st_frame, m.ed_frame)));
        for task in [Task::Vcmr, Task::Svmr] {
            for k in [1, 10] {
                for p in [0.1, 0.5, 0.7, 1.0] {
                    assert_eq!(recall_at_k_iou(&preds, &gt, task, k, p, false).unwrap(), 100.0);
                }
            }
        }
    }

    #[test]
    fn threshold_inclusive_unless_strict() {
        // IoU of [0,1] with [1,2] is 1/3; [0,3] with [0,1] is exactly 0.5.
        let preds = group_predictions([pred("a", 1, "v", 0, 3)]);
        let gt: GroundTruth = [("a".into(), moment("v", 0, 1))].into();
        assert_eq!(recall_at_k_iou(&preds, &gt, Task::Vcmr, 1, 0.5, false).unwrap(), 100.0);
        assert_eq!(recall_at_k_iou(&preds, &gt, Task::Vcmr, 1, 0.5, true).unwrap(), 0.0);
    }

    #[test]
    fn svmr_ignores_other_videos() {
        let preds = group_predictions([pred("a", 1, "x", 0, 1), pred("a", 2, "v", 0, 1)]);
        let gt: GroundTruth = [("a".into(), moment("v", 0, 1))].into();
        assert_eq!(recall_at_k_iou(&preds, &gt, Task::Vcmr, 1, 0.5, false).unwrap(), 0.0);
        assert_eq!(recall_at_k_iou(&preds, &gt, Task::Svmr, 1, 0.5, false).unwrap(), 100.0);
    }

    #[test]
    fn missing_query_is_a_miss() {
        let gt: GroundTruth = [("a".into(), moment("v", 0, 1)), ("b".into(), moment("v", 0, 1))].into();
        let preds = group_predictions([pred("a", 1, "v", 0, 1)]);
        assert_eq!(recall_at_k_iou(&preds, &gt, Task::Vcmr, 5, 0.5, false).unwrap(), 50.0);
        assert!(recall_at_k_iou(&preds, &gt, Task::Vcmr, 0, 0.5, false).is_err());
    }

    #[test]
    fn vr_recall() {
        let gt: GroundTruth = [("a".into(), moment("v1", 0, 1)), ("b".into(), moment("v2", 0, 1))].into();
        let lists: RankLists = [
            ("a".into(), vec!["v1".into(), "v2".into()]),
            ("b".into(), vec!["v1".into(), "v3".into()]),
        ]
        .into();
        assert_eq!(vr_recall_at_k(&lists, &gt, 1).unwrap(), 50.0);
        assert_eq!(vr_recall_at_k(&lists, &gt, 2).unwrap(), 50.0);
    }

    #[test]
    fn source_fractions() {
        let gt: GroundTruth = [("a".into(), moment("v1", 0, 1)), ("b".into(), moment("v2", 0, 1))].into();
        let mut b = pred("b", 1, "v2", 0, 1);
        b.video_rank = 2;
        let preds = group_predictions([pred("a", 1, "v1", 0, 1), b]);
        assert_eq!(top1_source_fractions(&preds, &gt, 2), vec![0.5, 0.5]);
        let only_first = group_predictions([pred("a", 1, "v1", 0, 1)]);
        assert_eq!(top1_source_fractions(&only_first, &gt, 3), vec![0.5, 0.0, 0.0]);
    }

    #[test]
    fn csv_has_one_row_per_metric() {
        let gt: GroundTruth = [("a".into(), moment("v1", 0, 1))].into();
        let preds = group_predictions([pred("a", 1, "v1", 0, 1)]);
        let lists: RankLists = [("a".into(), vec!["v1".into()])].into();
        let report = evaluate(&preds, Some(&lists), &gt, &EvalConfig::default(), serde_json::Value::Null).unwrap();
        assert_eq!(report.metrics.len(), 2 * 2 * 4 + 4);
        assert_eq!(report.to_csv().lines().count(), 1 + report.metrics.len());
        assert_eq!(report.get(Task::Vr, 1, None), Some(100.0));
    }
}
