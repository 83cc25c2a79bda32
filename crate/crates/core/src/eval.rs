//! AUROC under the distribution-shift-detection (DSD) and error-detection (ED)
//! settings, per-shift-type aggregation and report serialization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::ingest::{restrict_by_labels, DatasetBundle, PairedBundle, SampleRecord, ShiftType};
use crate::scores::{self, ScoreKind, ScoreParams};
use crate::stats::FittedStats;

/// Area under the ROC curve for separating `ood_scores` from `id_scores`.
///
/// Scores are oriented higher = in-distribution, so the OOD detection
/// statistic is the negated score. Ties receive midranks, i.e. count ½.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::Evaluation("the in-distribution side is empty".into()));
    }
    if ood_scores.is_empty() {
        return Err(Error::Evaluation("the OOD side is empty".into()));
    }
    if id_scores.iter().chain(ood_scores).any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("scores must be finite".into()));
    }
    let n = id_scores.len();
    let m = ood_scores.len();
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (-s, false))
        .chain(ood_scores.iter().map(|&s| (-s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i + 1;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let midrank = (i + 1 + j) as f64 / 2.0;
        let ood_in_group = pooled[i..j].iter().filter(|p| p.1).count();
        rank_sum += midrank * ood_in_group as f64;
        i = j;
    }
    let m_f = m as f64;
    let u = rank_sum - m_f * (m_f + 1.0) / 2.0;
    Ok(u / (m_f * n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "DSD")]
    Dsd,
    #[serde(rename = "ED_indist")]
    EdIndist,
    #[serde(rename = "ED_adversarial")]
    EdAdversarial,
    #[serde(rename = "ED_corruption")]
    EdCorruption,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Dsd => "DSD",
            Setting::EdIndist => "ED_indist",
            Setting::EdAdversarial => "ED_adversarial",
            Setting::EdCorruption => "ED_corruption",
        }
    }

    /// Error-detection settings all share one report table.
    pub fn family(self) -> &'static str {
        match self {
            Setting::Dsd => "DSD",
            _ => "ED",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Setting::Dsd, Setting::EdIndist, Setting::EdAdversarial, Setting::EdCorruption]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::format("report", format!("unknown setting '{s}'")))
    }
}

/// What produces the per-record ID-score being evaluated.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    Member {
        kind: ScoreKind,
        stats: &'a FittedStats,
        params: ScoreParams,
    },
    Ensemble {
        model: &'a EnsembleModel,
        stats: &'a FittedStats,
        params: ScoreParams,
    },
}

impl Scorer<'_> {
    pub fn name(&self) -> String {
        match self {
            Scorer::Member { kind, .. } => kind.name().to_string(),
            Scorer::Ensemble { model, .. } => model.definition.id.clone(),
        }
    }

    pub fn check_capability(&self, bundle: &DatasetBundle) -> Result<()> {
        match self {
            Scorer::Member { kind, .. } => kind.check_capability(&bundle.manifest),
            Scorer::Ensemble { model, .. } => model.definition.check_capability(&bundle.manifest),
        }
    }

    pub fn score(&self, records: &[&SampleRecord]) -> Result<Vec<f64>> {
        match self {
            Scorer::Member { kind, stats, params } => {
                Ok(scores::score_records(records, stats, &[*kind], params)?.into_vec())
            }
            Scorer::Ensemble { model, stats, params } => model.score_records(records, stats, params),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub setting: Setting,
    pub shift_type: ShiftType,
    pub dataset: String,
    pub scorer: String,
    pub auc: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

/// A task result together with the raw scores of both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub result: TaskResult,
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

fn finish(
    setting: Setting,
    shift_type: ShiftType,
    dataset: &str,
    scorer: &Scorer<'_>,
    id: &[&SampleRecord],
    ood: &[&SampleRecord],
) -> Result<TaskOutcome> {
    let id_scores = scorer.score(id)?;
    let ood_scores = scorer.score(ood)?;
    let auc = auroc(&id_scores, &ood_scores)?;
    Ok(TaskOutcome {
        result: TaskResult {
            setting,
            shift_type,
            dataset: dataset.to_string(),
            scorer: scorer.name(),
            auc,
            n_id: id.len(),
            n_ood: ood.len(),
        },
        id_scores,
        ood_scores,
    })
}

/// Any OOD record against any ID record, regardless of predictions. For a
/// multi-label OOD set the ID side is restricted to the classes named by the
/// OOD manifest's `label_restriction`.
pub fn evaluate_dsd(id: &DatasetBundle, ood: &DatasetBundle, scorer: &Scorer<'_>) -> Result<TaskOutcome> {
    scorer.check_capability(id)?;
    scorer.check_capability(ood)?;
    let restricted;
    let id_side = if ood.manifest.shift_type == ShiftType::MultiLabel {
        let classes: &BTreeSet<usize> = ood.manifest.label_restriction.as_ref().ok_or_else(|| {
            Error::Evaluation(format!("multi-label dataset '{}' has no label_restriction", ood.id()))
        })?;
        restricted = restrict_by_labels(id, classes)?;
        &restricted
    } else {
        id
    };
    if id_side.is_empty() {
        return Err(Error::Evaluation(format!(
            "no in-distribution records remain for '{}'",
            ood.id()
        )));
    }
    let id_refs: Vec<&SampleRecord> = id_side.records.iter().collect();
    let ood_refs: Vec<&SampleRecord> = ood.records.iter().collect();
    finish(Setting::Dsd, ood.manifest.shift_type, ood.id(), scorer, &id_refs, &ood_refs)
}

/// Inputs of an error-detection task.
#[derive(Debug, Clone, Copy)]
pub enum EdInput<'a> {
    /// Misclassified vs correctly classified in-distribution records.
    InDistribution(&'a DatasetBundle),
    /// Misclassified shifted records vs correctly classified ID records.
    Corruption {
        id: &'a DatasetBundle,
        ood: &'a DatasetBundle,
    },
    /// Successful attacks vs their clean originals.
    Adversarial(&'a PairedBundle<'a>),
}

fn require_labels(bundle: &DatasetBundle) -> Result<()> {
    if let Some(r) = bundle.records.iter().find(|r| !r.has_label()) {
        return Err(Error::Evaluation(format!(
            "error detection needs ground truth, but sample {} of '{}' is unlabelled",
            r.sample_id,
            bundle.id()
        )));
    }
    Ok(())
}

fn non_empty(side: &str, dataset: &str, records: &[&SampleRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Evaluation(format!("no qualifying samples on the {side} side for '{dataset}'")));
    }
    Ok(())
}

pub fn evaluate_ed(input: EdInput<'_>, scorer: &Scorer<'_>) -> Result<TaskOutcome> {
    match input {
        EdInput::InDistribution(bundle) => {
            scorer.check_capability(bundle)?;
            require_labels(bundle)?;
            let (correct, wrong): (Vec<&SampleRecord>, Vec<&SampleRecord>) =
                bundle.records.iter().partition(|r| r.is_correct() == Some(true));
            non_empty("in-distribution (correctly classified)", bundle.id(), &correct)?;
            non_empty("error (misclassified)", bundle.id(), &wrong)?;
            finish(Setting::EdIndist, ShiftType::InDistribution, bundle.id(), scorer, &correct, &wrong)
        }
        EdInput::Corruption { id, ood } => {
            scorer.check_capability(id)?;
            scorer.check_capability(ood)?;
            require_labels(id)?;
            require_labels(ood)?;
            let correct: Vec<&SampleRecord> = id.records.iter().filter(|r| r.is_correct() == Some(true)).collect();
            let wrong: Vec<&SampleRecord> = ood.records.iter().filter(|r| r.is_correct() == Some(false)).collect();
            non_empty("in-distribution (correctly classified)", id.id(), &correct)?;
            non_empty("error (misclassified)", ood.id(), &wrong)?;
            finish(Setting::EdCorruption, ood.manifest.shift_type, ood.id(), scorer, &correct, &wrong)
        }
        EdInput::Adversarial(paired) => {
            scorer.check_capability(paired.clean)?;
            scorer.check_capability(paired.ood)?;
            let pairs: Vec<_> = paired.successful().collect();
            let clean: Vec<&SampleRecord> = pairs.iter().map(|p| &paired.clean.records[p.clean_index]).collect();
            let attacked: Vec<&SampleRecord> = pairs.iter().map(|p| &paired.ood.records[p.ood_index]).collect();
            non_empty("in-distribution (clean originals)", paired.clean.id(), &clean)?;
            non_empty("error (successful attacks)", paired.ood.id(), &attacked)?;
            finish(
                Setting::EdAdversarial,
                ShiftType::Adversarial,
                paired.ood.id(),
                scorer,
                &clean,
                &attacked,
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftTypeAverage {
    pub family: String,
    pub scorer: String,
    pub shift_type: ShiftType,
    pub auc: f64,
    pub datasets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallAverage {
    pub family: String,
    pub scorer: String,
    pub auc: f64,
    pub shift_types: usize,
}

/// Cost of one scorer relative to a caller-supplied forward-pass cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub scorer: String,
    pub seconds_per_sample: f64,
    pub relative_to_forward: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskResult>,
    pub shift_type_averages: Vec<ShiftTypeAverage>,
    pub overall: Vec<OverallAverage>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub accuracy: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Vec<TimingEntry>>,
}

/// Averages task AUCs within each (setting family, scorer, shift type) cell,
/// unweighted over datasets, then averages those cells per (family, scorer).
/// The overall figure is therefore a mean of shift-type means, not of
/// datasets.
pub fn aggregate_report(mut tasks: Vec<TaskResult>, accuracy: BTreeMap<String, f64>) -> Result<EvalReport> {
    if let Some(t) = tasks.iter().find(|t| !(0.0..=1.0).contains(&t.auc)) {
        return Err(Error::Evaluation(format!("AUC {} of '{}' lies outside [0, 1]", t.auc, t.dataset)));
    }
    tasks.sort_by(|a, b| {
        (a.setting, &a.scorer, a.shift_type, &a.dataset).cmp(&(b.setting, &b.scorer, b.shift_type, &b.dataset))
    });

    let mut cells: BTreeMap<(&str, &str, ShiftType), Vec<f64>> = BTreeMap::new();
    for t in &tasks {
        cells
            .entry((t.setting.family(), t.scorer.as_str(), t.shift_type))
            .or_default()
            .push(t.auc);
    }
    let shift_type_averages: Vec<ShiftTypeAverage> = cells
        .iter()
        .map(|(&(family, scorer, shift_type), aucs)| ShiftTypeAverage {
            family: family.to_string(),
            scorer: scorer.to_string(),
            shift_type,
            auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
            datasets: aucs.len(),
        })
        .collect();

    let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for a in &shift_type_averages {
        groups.entry((&a.family, &a.scorer)).or_default().push(a.auc);
    }
    let overall = groups
        .into_iter()
        .map(|((family, scorer), aucs)| OverallAverage {
            family: family.to_string(),
            scorer: scorer.to_string(),
            auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
            shift_types: aucs.len(),
        })
        .collect();

    Ok(EvalReport {
        tasks,
        shift_type_averages,
        overall,
        accuracy,
        timing: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

pub const CSV_HEADER: [&str; 7] = ["setting", "shift_type", "dataset", "scorer", "auc", "n_id", "n_ood"];
const ALL: &str = "*";

/// Serializes a report. CSV holds task rows, then shift-type averages
/// (`dataset = *`), then overall averages (`shift_type = dataset = *`);
/// accuracy and timing appear in JSON only.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report).map_err(|e| Error::format("report", e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::format("report.csv", e.to_string());
            w.write_record(CSV_HEADER).map_err(csv_err)?;
            for t in &report.tasks {
                w.write_record([
                    t.setting.as_str(),
                    t.shift_type.as_str(),
                    &t.dataset,
                    &t.scorer,
                    &t.auc.to_string(),
                    &t.n_id.to_string(),
                    &t.n_ood.to_string(),
                ])
                .map_err(csv_err)?;
            }
            for a in &report.shift_type_averages {
                w.write_record([&a.family, a.shift_type.as_str(), ALL, &a.scorer, &a.auc.to_string(), "", &a.datasets.to_string()])
                    .map_err(csv_err)?;
            }
            for o in &report.overall {
                w.write_record([&o.family, ALL, ALL, &o.scorer, &o.auc.to_string(), "", &o.shift_types.to_string()])
                    .map_err(csv_err)?;
            }
            w.into_inner().map_err(|e| Error::format("report.csv", e.to_string()))
        }
    }
}

pub fn read_report(bytes: &[u8], format: ReportFormat) -> Result<EvalReport> {
    match format {
        ReportFormat::Json => serde_json::from_slice(bytes).map_err(|e| Error::format("report.json", e.to_string())),
        ReportFormat::Csv => read_report_csv(bytes),
    }
}

fn read_report_csv(bytes: &[u8]) -> Result<EvalReport> {
    let bad = |msg: String| Error::format("report.csv", msg);
    let mut reader = csv::Reader::from_reader(bytes);
    let header = reader.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut report = EvalReport::default();
    for row in reader.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let auc: f64 = field(4).parse().map_err(|_| bad(format!("bad auc '{}'", field(4))))?;
        let count = |i: usize| -> Result<usize> { field(i).parse().map_err(|_| bad(format!("bad count '{}'", field(i)))) };
        match (field(1), field(2)) {
            (ALL, ALL) => report.overall.push(OverallAverage {
                family: field(0).to_string(),
                scorer: field(3).to_string(),
                auc,
                shift_types: count(6)?,
            }),
            (shift, ALL) => report.shift_type_averages.push(ShiftTypeAverage {
                family: field(0).to_string(),
                scorer: field(3).to_string(),
                shift_type: shift.parse().map_err(|_| bad(format!("bad shift type '{shift}'")))?,
                auc,
                datasets: count(6)?,
            }),
            (shift, dataset) => report.tasks.push(TaskResult {
                setting: field(0).parse()?,
                shift_type: shift.parse().map_err(|_| bad(format!("bad shift type '{shift}'")))?,
                dataset: dataset.to_string(),
                scorer: field(3).to_string(),
                auc,
                n_id: count(5)?,
                n_ood: count(6)?,
            }),
        }
    }
    Ok(report)
}
