//! Retrieval metrics, macro-averaging, and run/report persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::index::SearchHit;
use crate::types::{MetricKind, Modality, Qrels, TaskSpec};

pub const GROUP_ALL: &str = "All";
pub const GROUP_SINGLE: &str = "Single-modal Qry";
pub const GROUP_MULTI: &str = "Multi-modal Qry";

/// How recall@k counts a query with several relevant documents.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub enum RecallConvention {
    /// 1 if any relevant document is in the top k.
    #[default]
    AnyHit,
    /// Fraction of relevant documents found in the top k.
    Fraction,
}

fn non_empty(relevant: &BTreeSet<&str>) -> Result<()> {
    if relevant.is_empty() {
        Err(Error::EmptyRelevant)
    } else {
        Ok(())
    }
}

pub fn recall_at_k<S: AsRef<str>>(
    ranked: &[S],
    relevant: &BTreeSet<&str>,
    k: usize,
) -> Result<f64> {
    recall_at_k_with(ranked, relevant, k, RecallConvention::AnyHit)
}

pub fn recall_at_k_with<S: AsRef<str>>(
    ranked: &[S],
    relevant: &BTreeSet<&str>,
    k: usize,
    convention: RecallConvention,
) -> Result<f64> {
    non_empty(relevant)?;
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let found = ranked
        .iter()
        .take(k)
        .filter(|d| relevant.contains(d.as_ref()))
        .count();
    Ok(match convention {
        RecallConvention::AnyHit => f64::from(u8::from(found > 0)),
        RecallConvention::Fraction => found as f64 / relevant.len() as f64,
    })
}

/// nDCG@k with gain `2^g - 1` and discount `log2(rank + 1)`.
pub fn ndcg_at_k<S: AsRef<str>>(
    ranked: &[S],
    grades: &BTreeMap<String, u32>,
    k: usize,
) -> Result<f64> {
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let discount = |i: usize| (i as f64 + 2.0).log2();
    let mut ideal: Vec<u32> = grades.values().copied().filter(|&g| g > 0).collect();
    if ideal.is_empty() {
        return Err(Error::EmptyRelevant);
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i))
        .sum();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(grades.get(d.as_ref()).copied().unwrap_or(0)) / discount(i))
        .sum();
    Ok(dcg / idcg)
}

pub fn ndcg_at_10<S: AsRef<str>>(ranked: &[S], grades: &BTreeMap<String, u32>) -> Result<f64> {
    ndcg_at_k(ranked, grades, 10)
}

/// AP@5 normalized by `min(5, |relevant|)`.
pub fn map_at_5<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<&str>) -> Result<f64> {
    non_empty(relevant)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranked.iter().take(5).enumerate() {
        if relevant.contains(d.as_ref()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len().min(5) as f64)
}

pub fn modality_accuracy_at_1(top: Option<Modality>, desired: Modality) -> f64 {
    f64::from(u8::from(top == Some(desired)))
}

/// Evaluation unit: one dataset under one task.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct UnitKey {
    pub dataset_id: String,
    pub task_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroResult {
    pub per_unit: BTreeMap<UnitKey, f64>,
    pub groups: BTreeMap<String, f64>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs
        .into_iter()
        .fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

/// Mean per unit, then unweighted mean of unit means for `All` and for
/// each group named in `task_groups`.
pub fn macro_average(
    values: &BTreeMap<UnitKey, Vec<f64>>,
    task_groups: &BTreeMap<String, String>,
) -> Result<MacroResult> {
    let per_unit: BTreeMap<UnitKey, f64> = values
        .iter()
        .filter_map(|(k, v)| mean(v.iter().copied()).map(|m| (k.clone(), m)))
        .collect();
    let mut groups = BTreeMap::new();
    groups.insert(
        GROUP_ALL.to_string(),
        mean(per_unit.values().copied()).ok_or_else(|| Error::EmptyGroup(GROUP_ALL.into()))?,
    );
    let names: BTreeSet<&String> = task_groups.values().collect();
    for name in names {
        let m = mean(
            per_unit
                .iter()
                .filter(|(k, _)| task_groups.get(&k.task_id) == Some(name))
                .map(|(_, &v)| v),
        )
        .ok_or_else(|| Error::EmptyGroup(name.clone()))?;
        groups.insert(name.clone(), m);
    }
    Ok(MacroResult { per_unit, groups })
}

pub fn query_group(modality: Modality) -> &'static str {
    match modality {
        Modality::Text | Modality::Image => GROUP_SINGLE,
        Modality::ImageText => GROUP_MULTI,
    }
}

/// Query metadata needed at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub qid: String,
    pub task_id: String,
    pub modality: Modality,
}

/// Per-query rankings keyed by qid.
pub type Run = BTreeMap<String, Vec<SearchHit>>;

pub const METRIC_PRIMARY: &str = "primary";
pub const METRIC_MA1: &str = "MA@1";
pub const METRIC_R1: &str = "R@1";

const REPORTED: [&str; 7] = [
    METRIC_PRIMARY,
    "R@1",
    "R@5",
    "R@10",
    "nDCG@10",
    "mAP@5",
    METRIC_MA1,
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub dataset_id: String,
    pub task_id: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub run_tag: String,
    pub pool_tag: String,
    pub rows: Vec<ReportRow>,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
}

impl RunReport {
    pub fn value(&self, dataset_id: &str, task_id: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.dataset_id == dataset_id && r.task_id == task_id && r.metric == metric)
            .map(|r| r.value)
    }

    /// Macro value of `metric` over a group (`All`, single, multi).
    pub fn group(&self, group: &str, metric: &str) -> Option<f64> {
        self.value(group, "*", metric)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "dataset_id,task_id,metric,value")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:.6}",
                r.dataset_id, r.task_id, r.metric, r.value
            )?;
        }
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let k = (r.dataset_id.clone(), r.task_id.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let mut s = String::new();
        let _ = writeln!(s, "run {} (pool {})", self.run_tag, self.pool_tag);
        let _ = write!(s, "{:<20} {:<10}", "dataset", "task");
        for m in REPORTED {
            let _ = write!(s, " {m:>8}");
        }
        s.push('\n');
        for (ds, task) in keys {
            let _ = write!(s, "{ds:<20} {task:<10}");
            for m in REPORTED {
                match self.value(&ds, &task, m) {
                    Some(v) => {
                        let _ = write!(s, " {:>8.1}", v * 100.0);
                    }
                    None => {
                        let _ = write!(s, " {:>8}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Score every query of `run` that has judgments.
pub fn evaluate_run(
    run: &Run,
    queries: &[EvalQuery],
    tasks: &BTreeMap<String, TaskSpec>,
    qrels: &Qrels,
    convention: RecallConvention,
    run_tag: &str,
    pool_tag: &str,
) -> Result<RunReport> {
    let mut values: BTreeMap<String, BTreeMap<UnitKey, Vec<f64>>> = BTreeMap::new();
    let mut task_groups = BTreeMap::new();
    let mut skipped = 0;
    let mut evaluated = 0;
    let mut ordered: Vec<&EvalQuery> = queries.iter().collect();
    ordered.sort_by(|a, b| a.qid.cmp(&b.qid));
    for q in ordered {
        let task = tasks.get(&q.task_id).ok_or_else(|| {
            Error::parse(
                format!("query {}", q.qid),
                format!("unknown task {}", q.task_id),
            )
        })?;
        let relevant = qrels.relevant(&q.qid);
        let (Some(hits), false) = (run.get(&q.qid), relevant.is_empty()) else {
            skipped += 1;
            continue;
        };
        evaluated += 1;
        task_groups
            .entry(q.task_id.clone())
            .or_insert_with(|| query_group(q.modality).to_string());
        let ids: Vec<&str> = hits.iter().map(|h| h.doc_id.as_str()).collect();
        let grades = qrels.get(&q.qid).expect("judged query");
        let r = |k| recall_at_k_with(&ids, &relevant, k, convention);
        let primary = match task.metric {
            MetricKind::RecallAt5 => r(5)?,
            MetricKind::RecallAt10 => r(10)?,
            MetricKind::NdcgAt10 => ndcg_at_10(&ids, grades)?,
            MetricKind::MapAt5 => map_at_5(&ids, &relevant)?,
        };
        let scores = [
            primary,
            r(1)?,
            r(5)?,
            r(10)?,
            ndcg_at_10(&ids, grades)?,
            map_at_5(&ids, &relevant)?,
            modality_accuracy_at_1(hits.first().map(|h| h.modality), task.desired_modality),
        ];
        let key = UnitKey {
            dataset_id: task.dataset_id.clone(),
            task_id: task.task_id.clone(),
        };
        for (m, v) in REPORTED.iter().zip(scores) {
            values
                .entry(m.to_string())
                .or_default()
                .entry(key.clone())
                .or_default()
                .push(v);
        }
    }
    let mut rows = Vec::new();
    let mut group_rows = Vec::new();
    for m in REPORTED {
        let Some(vals) = values.get(m) else { continue };
        let res = macro_average(vals, &task_groups)?;
        for (k, v) in res.per_unit {
            rows.push(ReportRow {
                dataset_id: k.dataset_id,
                task_id: k.task_id,
                metric: m.to_string(),
                value: v,
            });
        }
        for g in [GROUP_ALL, GROUP_SINGLE, GROUP_MULTI] {
            if let Some(&v) = res.groups.get(g) {
                group_rows.push(ReportRow {
                    dataset_id: g.to_string(),
                    task_id: "*".into(),
                    metric: m.to_string(),
                    value: v,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.dataset_id, &a.task_id)
            .cmp(&(&b.dataset_id, &b.task_id))
            .then_with(|| metric_pos(&a.metric).cmp(&metric_pos(&b.metric)))
    });
    group_rows.sort_by(|a, b| {
        group_pos(&a.dataset_id)
            .cmp(&group_pos(&b.dataset_id))
            .then_with(|| metric_pos(&a.metric).cmp(&metric_pos(&b.metric)))
    });
    rows.extend(group_rows);
    Ok(RunReport {
        run_tag: run_tag.to_string(),
        pool_tag: pool_tag.to_string(),
        rows,
        evaluated_queries: evaluated,
        skipped_queries: skipped,
    })
}

fn metric_pos(m: &str) -> usize {
    REPORTED.iter().position(|x| *x == m).unwrap_or(usize::MAX)
}

fn group_pos(g: &str) -> usize {
    [GROUP_ALL, GROUP_SINGLE, GROUP_MULTI]
        .iter()
        .position(|x| *x == g)
        .unwrap_or(usize::MAX)
}

/// TREC run lines: `qid Q0 doc_id rank score run_tag`.
pub fn write_trec_run<W: Write>(mut w: W, run: &Run, run_tag: &str) -> Result<()> {
    for (qid, hits) in run {
        for h in hits {
            writeln!(w, "{qid} Q0 {} {} {} {run_tag}", h.doc_id, h.rank, h.score)?;
        }
    }
    Ok(())
}

/// Parse a TREC run. Modalities are not part of the format, so they come
/// from `modality_of`; hits are re-sorted by rank.
pub fn read_trec_run<R: BufRead>(
    r: R,
    modality_of: impl Fn(&str) -> Option<Modality>,
) -> Result<Run> {
    let mut run: Run = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let ctx = || format!("run line {}", i + 1);
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 6 {
            return Err(Error::parse(ctx(), "expected 6 fields"));
        }
        let rank: usize = f[3].parse().map_err(|e| Error::parse(ctx(), e))?;
        let score: f32 = f[4].parse().map_err(|e| Error::parse(ctx(), e))?;
        let modality = modality_of(f[2])
            .ok_or_else(|| Error::parse(ctx(), format!("unknown doc {}", f[2])))?;
        run.entry(f[0].to_string()).or_default().push(SearchHit {
            doc_id: f[2].to_string(),
            score,
            rank,
            modality,
        });
    }
    for hits in run.values_mut() {
        hits.sort_by_key(|h| h.rank);
    }
    Ok(run)
}
