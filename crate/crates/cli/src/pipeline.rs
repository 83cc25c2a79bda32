//! The subcommands. Each one validates its configuration before loading any
//! data and writes a `provenance.json` next to its artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use scoremix::ensemble::{build_training_matrix, select_members, select_n_components, MemberSelection};
use scoremix::eval::{
    aggregate_report, emit_report, evaluate_dsd, evaluate_ed, read_report, EdInput, TaskOutcome, TimingEntry,
};
use scoremix::ingest::{link_counterparts, load_dataset};
use scoremix::npy::{self, NpyArray};
use scoremix::scores;
use scoremix::stats::fit_stats;
use scoremix::{
    auroc, DatasetBundle, EnsembleModel, Error, EvalReport, FittedStats, ModelHead, ReportFormat, Result,
    ScoreKind, Scorer, Setting, ShiftType,
};

use crate::config::PipelineConfig;

pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    seed: u64,
    config_sha256: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn config_hash(cfg: &PipelineConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(cfg.to_toml()?.as_bytes())))
}

fn write_provenance(dir: &Path, cfg: &PipelineConfig, command: &str) -> Result<()> {
    write_json(
        &dir.join(PROVENANCE_FILE),
        &Provenance {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: cfg.seed,
            config_sha256: config_hash(cfg)?,
        },
    )
}

fn load_stats(cfg: &PipelineConfig) -> Result<FittedStats> {
    let dir = cfg.stats_dir();
    if !dir.is_dir() {
        return Err(Error::Config(format!("no fitted statistics in {}; run `fit` first", dir.display())));
    }
    FittedStats::load(&dir)
}

fn load_ensemble(cfg: &PipelineConfig, id: &str) -> Result<EnsembleModel> {
    let dir = cfg.ensemble_dir();
    if !dir.join(format!("gmm_{id}.json")).is_file() {
        return Err(Error::Config(format!("no fitted ensemble '{id}' in {}; run `fit` first", dir.display())));
    }
    EnsembleModel::load(&dir, id)
}

#[derive(Debug, Serialize)]
pub struct CandidateResult {
    pub n_components: usize,
    pub heldout_ed_auc: f64,
}

#[derive(Debug, Serialize)]
pub struct FitSummary {
    pub ensemble_id: String,
    pub members: Vec<ScoreKind>,
    pub train_rows: usize,
    pub discarded_misclassified: usize,
    pub heldout_rows: usize,
    pub heldout_errors: usize,
    pub candidates: Vec<CandidateResult>,
    pub skipped_candidates: Vec<usize>,
    pub chosen_components: usize,
}

/// Fits detector statistics on the training set, then the ensemble mixture
/// on the validation set with the component count chosen on its held-out
/// part.
pub fn cmd_fit(cfg: &PipelineConfig) -> Result<FitSummary> {
    cfg.validate()?;
    let definition = cfg.ensemble_definition()?;
    let head = ModelHead::load(&cfg.root)?;
    let train = load_dataset(&cfg.root, &cfg.datasets.train)?;
    let validation = load_dataset(&cfg.root, &cfg.datasets.validation)?;
    definition.check_capability(&validation.manifest)?;

    info!("fitting detector statistics on '{}' ({} records)", train.id(), train.len());
    let stats = fit_stats(&train, &head, &cfg.stats_config(), cfg.seed)?;
    stats.save(&cfg.stats_dir())?;
    write_provenance(&cfg.stats_dir(), cfg, "fit")?;

    let params = cfg.score_params();
    let split = build_training_matrix(
        &validation,
        &stats,
        &definition,
        &params,
        cfg.ensemble.heldout_fraction,
        cfg.seed,
    )?;
    info!(
        "ensemble '{}': {} training rows ({} misclassified discarded), {} held out",
        definition.id,
        split.x_train.rows(),
        split.discarded,
        split.heldout_scores.rows()
    );
    let selection = select_n_components(
        &split.x_train,
        &split.heldout_scores,
        &split.heldout_correct,
        &cfg.gmm.candidates,
        &cfg.gmm_options(),
    )?;
    for n in &selection.skipped {
        warn!("skipped {n} components: too few training rows");
    }
    info!("chose {} components", selection.chosen);

    let model = EnsembleModel::new(definition.clone(), selection.model)?;
    model.save(&cfg.ensemble_dir())?;
    write_provenance(&cfg.ensemble_dir(), cfg, "fit")?;

    let summary = FitSummary {
        ensemble_id: definition.id,
        members: definition.members,
        train_rows: split.x_train.rows(),
        discarded_misclassified: split.discarded,
        heldout_rows: split.heldout_scores.rows(),
        heldout_errors: split.heldout_correct.iter().filter(|&&c| !c).count(),
        candidates: selection
            .evaluated
            .iter()
            .map(|&(n, auc)| CandidateResult {
                n_components: n,
                heldout_ed_auc: auc,
            })
            .collect(),
        skipped_candidates: selection.skipped,
        chosen_components: selection.chosen,
    };
    write_json(&cfg.ensemble_dir().join("fit_summary.json"), &summary)?;
    write_provenance(&cfg.output, cfg, "fit")?;
    Ok(summary)
}

pub fn scores_dir(cfg: &PipelineConfig, dataset: &str) -> PathBuf {
    cfg.output.join("scores").join(dataset)
}

/// Writes `scores_<id>.npy` (member score matrix), `scores_<id>.json`
/// (column names), `loglik_<id>.npy` (ensemble score per record) and
/// `sample_ids.npy`.
pub fn cmd_score(cfg: &PipelineConfig, dataset_id: &str, ensemble_id: Option<&str>) -> Result<PathBuf> {
    cfg.validate()?;
    if !cfg.root.join(dataset_id).join(scoremix::ingest::MANIFEST_FILE).is_file() {
        return Err(Error::Config(format!("dataset '{dataset_id}' does not exist under {}", cfg.root.display())));
    }
    let id = match ensemble_id {
        Some(id) => scoremix::EnsembleDefinition::builtin(id).map_or_else(|| id.to_string(), |d| d.id),
        None => cfg.ensemble_definition()?.id,
    };
    let stats = load_stats(cfg)?;
    let model = load_ensemble(cfg, &id)?;
    let bundle = load_dataset(&cfg.root, dataset_id)?;
    model.definition.check_capability(&bundle.manifest)?;

    let matrix = scores::score_records(&bundle.records, &stats, &model.definition.members, &cfg.score_params())?;
    let ll = model.score_matrix(&matrix)?;
    let dir = scores_dir(cfg, dataset_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(
        &dir.join(format!("scores_{id}.json")),
        &ScoreColumns {
            ensemble_id: &id,
            dataset: dataset_id,
            rows: matrix.rows(),
            columns: model.definition.member_names(),
        },
    )?;
    npy::write_npy(
        &dir.join(format!("scores_{id}.npy")),
        &NpyArray::f64(vec![matrix.rows(), matrix.cols()], matrix.into_vec())?,
    )?;
    npy::write_npy(&dir.join(format!("loglik_{id}.npy")), &NpyArray::f64(vec![ll.len()], ll)?)?;
    let ids: Vec<i64> = bundle.records.iter().map(|r| r.sample_id).collect();
    npy::write_npy(&dir.join("sample_ids.npy"), &NpyArray::i64(vec![ids.len()], ids)?)?;
    write_provenance(&dir, cfg, "score")?;
    Ok(dir)
}

#[derive(Serialize)]
struct ScoreColumns<'a> {
    ensemble_id: &'a str,
    dataset: &'a str,
    rows: usize,
    columns: Vec<&'static str>,
}

pub fn report_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output.join("report")
}

#[derive(Debug, Clone, Copy)]
enum Job {
    Dsd(usize),
    EdIndist,
    EdAdversarial(usize),
    EdCorruption(usize),
}

/// Runs every configured task for every individual score and the ensemble,
/// and writes `report.json` and `report.csv`.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let definition = cfg.ensemble_definition()?;
    let members = cfg.eval_scores()?;
    let stats = load_stats(cfg)?;
    let model = load_ensemble(cfg, &definition.id)?;
    let params = cfg.score_params();

    let test = load_dataset(&cfg.root, &cfg.datasets.test)?;
    let oods = cfg
        .ood
        .iter()
        .map(|entry| {
            let bundle = load_dataset(&cfg.root, &entry.id)?;
            if bundle.manifest.shift_type != entry.shift_type {
                return Err(Error::Config(format!(
                    "dataset '{}' is declared {} but its manifest says {}",
                    entry.id, entry.shift_type, bundle.manifest.shift_type
                )));
            }
            Ok(bundle)
        })
        .collect::<Result<Vec<_>>>()?;

    // Clean counterparts of adversarial sets, loaded once per origin.
    let mut origins: BTreeMap<String, DatasetBundle> = BTreeMap::new();
    if cfg.evaluate.settings.contains(&Setting::EdAdversarial) {
        for o in oods.iter().filter(|o| o.manifest.shift_type == ShiftType::Adversarial) {
            let origin = o.manifest.origin_dataset_id.clone().expect("validated manifest");
            if origin != test.id() && !origins.contains_key(&origin) {
                let bundle = load_dataset(&cfg.root, &origin)?;
                origins.insert(origin, bundle);
            }
        }
    }
    let origin_of = |o: &DatasetBundle| -> &DatasetBundle {
        let id = o.manifest.origin_dataset_id.as_deref().expect("validated manifest");
        origins.get(id).unwrap_or(&test)
    };
    let pairings = oods
        .iter()
        .map(|o| {
            if o.manifest.shift_type == ShiftType::Adversarial && cfg.evaluate.settings.contains(&Setting::EdAdversarial) {
                link_counterparts(o, origin_of(o)).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for setting in &cfg.evaluate.settings {
        match setting {
            Setting::Dsd => jobs.extend((0..oods.len()).map(Job::Dsd)),
            Setting::EdIndist => jobs.push(Job::EdIndist),
            Setting::EdAdversarial => jobs.extend(
                (0..oods.len())
                    .filter(|&i| oods[i].manifest.shift_type == ShiftType::Adversarial)
                    .map(Job::EdAdversarial),
            ),
            Setting::EdCorruption => jobs.extend(
                (0..oods.len())
                    .filter(|&i| oods[i].manifest.shift_type == ShiftType::Corruption)
                    .map(Job::EdCorruption),
            ),
        }
    }

    let mut scorers: Vec<Scorer<'_>> = members
        .iter()
        .map(|&kind| Scorer::Member {
            kind,
            stats: &stats,
            params,
        })
        .collect();
    scorers.push(Scorer::Ensemble {
        model: &model,
        stats: &stats,
        params,
    });

    let work: Vec<(Job, &Scorer<'_>)> = jobs.iter().flat_map(|&j| scorers.iter().map(move |s| (j, s))).collect();
    let outcomes = work
        .par_iter()
        .map(|&(job, scorer)| {
            let result = match job {
                Job::Dsd(i) => evaluate_dsd(&test, &oods[i], scorer),
                Job::EdIndist => evaluate_ed(EdInput::InDistribution(&test), scorer),
                Job::EdAdversarial(i) => {
                    evaluate_ed(EdInput::Adversarial(pairings[i].as_ref().expect("linked above")), scorer)
                }
                Job::EdCorruption(i) => evaluate_ed(
                    EdInput::Corruption {
                        id: &test,
                        ood: &oods[i],
                    },
                    scorer,
                ),
            };
            match result {
                Err(Error::Capability { score, reason }) => {
                    warn!("skipping {score}: {reason}");
                    Ok(None)
                }
                other => other.map(Some),
            }
        })
        .collect::<Vec<Result<Option<TaskOutcome>>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<TaskOutcome> = outcomes.into_iter().flatten().collect();

    let mut accuracy = BTreeMap::new();
    for b in std::iter::once(&test).chain(&oods) {
        if let Some(acc) = b.accuracy() {
            accuracy.insert(b.id().to_string(), acc);
        }
    }

    let dir = report_dir(cfg);
    if cfg.evaluate.dump_distributions {
        let dist = dir.join("distributions");
        for o in &outcomes {
            let r = &o.result;
            let stem = format!("{}_{}_{}", r.setting, r.dataset, r.scorer);
            fs::create_dir_all(&dist).map_err(|e| Error::io(&dist, e))?;
            npy::write_npy(&dist.join(format!("{stem}_id.npy")), &NpyArray::f64(vec![o.id_scores.len()], o.id_scores.clone())?)?;
            npy::write_npy(&dist.join(format!("{stem}_ood.npy")), &NpyArray::f64(vec![o.ood_scores.len()], o.ood_scores.clone())?)?;
        }
    }

    let report = aggregate_report(outcomes.into_iter().map(|o| o.result).collect(), accuracy)?;
    write_bytes(&dir.join("report.json"), &emit_report(&report, ReportFormat::Json)?)?;
    write_bytes(&dir.join("report.csv"), &emit_report(&report, ReportFormat::Csv)?)?;
    write_provenance(&dir, cfg, "evaluate")?;

    if let Some(forward) = cfg.evaluate.forward_seconds_per_sample {
        let records: Vec<_> = test.records.iter().collect();
        let timing = scorers
            .iter()
            .map(|s| {
                let start = Instant::now();
                s.score(&records)?;
                let per_sample = start.elapsed().as_secs_f64() / records.len().max(1) as f64;
                Ok(TimingEntry {
                    scorer: s.name(),
                    seconds_per_sample: per_sample,
                    relative_to_forward: per_sample / forward,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_json(&dir.join("timing.json"), &timing)?;
    }
    Ok(report)
}

/// Scores the validation set under every score it supports, computes their
/// correlation and in-distribution error-detection AUC, and runs greedy
/// member selection.
pub fn cmd_select(cfg: &PipelineConfig) -> Result<MemberSelection> {
    cfg.validate()?;
    let stats = load_stats(cfg)?;
    let validation = load_dataset(&cfg.root, &cfg.datasets.validation)?;
    if validation.records.iter().any(|r| !r.has_label()) {
        return Err(Error::Config(format!("validation set '{}' must be fully labelled", validation.id())));
    }
    let kinds: Vec<ScoreKind> = ScoreKind::ALL
        .into_iter()
        .filter(|k| k.check_capability(&validation.manifest).is_ok())
        .collect();
    let matrix = scores::score_records(&validation.records, &stats, &kinds, &cfg.score_params())?;
    let correct: Vec<bool> = validation.records.iter().map(|r| r.is_correct() == Some(true)).collect();
    let ed_auc = (0..kinds.len())
        .map(|j| {
            let col = matrix.column(j);
            let (mut ok, mut err) = (Vec::new(), Vec::new());
            for (v, &c) in col.into_iter().zip(&correct) {
                if c {
                    ok.push(v)
                } else {
                    err.push(v)
                }
            }
            auroc(&ok, &err)
        })
        .collect::<Result<Vec<_>>>()?;
    let selection = select_members(&matrix, &kinds, &ed_auc, cfg.detectors.corr_threshold)?;

    let dir = cfg.output.join("selection");
    let k = kinds.len();
    let flat: Vec<f64> = selection.correlation.iter().flatten().copied().collect();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    npy::write_npy(&dir.join("correlation.npy"), &NpyArray::f64(vec![k, k], flat)?)?;
    write_json(&dir.join("selection.json"), &selection)?;
    write_provenance(&dir, cfg, "select")?;
    Ok(selection)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportStyle {
    Table,
    Csv,
    Json,
}

/// Renders a stored report: a per-scorer table of shift-type and overall
/// averages, or the raw CSV / JSON.
pub fn cmd_report(path: &Path, style: ReportStyle) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = if path.extension().is_some_and(|e| e == "csv") {
        ReportFormat::Csv
    } else {
        ReportFormat::Json
    };
    let report = read_report(&bytes, format)?;
    match style {
        ReportStyle::Json => Ok(String::from_utf8_lossy(&emit_report(&report, ReportFormat::Json)?).into_owned()),
        ReportStyle::Csv => Ok(String::from_utf8_lossy(&emit_report(&report, ReportFormat::Csv)?).into_owned()),
        ReportStyle::Table => Ok(render_table(&report)),
    }
}

fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let families: Vec<&str> = {
        let mut f: Vec<&str> = report.overall.iter().map(|o| o.family.as_str()).collect();
        f.dedup();
        f
    };
    for family in families {
        let mut types: Vec<ShiftType> = report
            .shift_type_averages
            .iter()
            .filter(|a| a.family == family)
            .map(|a| a.shift_type)
            .collect();
        types.sort();
        types.dedup();
        out.push_str(&format!("{family} AUC (%)\n{:<12}", "scorer"));
        for t in &types {
            out.push_str(&format!(" {:>16}", t.as_str()));
        }
        out.push_str(&format!(" {:>10}\n", "average"));
        for o in report.overall.iter().filter(|o| o.family == family) {
            out.push_str(&format!("{:<12}", o.scorer));
            for t in &types {
                let cell = report
                    .shift_type_averages
                    .iter()
                    .find(|a| a.family == family && a.scorer == o.scorer && a.shift_type == *t)
                    .map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a.auc));
                out.push_str(&format!(" {cell:>16}"));
            }
            out.push_str(&format!(" {:>10.2}\n", 100.0 * o.auc));
        }
        out.push('\n');
    }
    if !report.accuracy.is_empty() {
        out.push_str("accuracy\n");
        for (dataset, acc) in &report.accuracy {
            out.push_str(&format!("{dataset:<16} {:.4}\n", acc));
        }
    }
    out
}

/// Writes the synthetic fixture under `out/data` and a ready-to-run
/// `out/pipeline.toml`.
pub fn cmd_synth(out: &Path, synth: &scoremix::synth::SynthConfig) -> Result<PathBuf> {
    let fixture = scoremix::synth::generate(synth)?;
    fixture.write(&out.join("data"))?;
    let mut text = format!(
        "root = \"data\"\noutput = \"out\"\nseed = {}\n\n[datasets]\ntrain = \"{}\"\nvalidation = \"{}\"\ntest = \"{}\"\n",
        synth.seed,
        scoremix::synth::TRAIN_ID,
        scoremix::synth::VALIDATION_ID,
        scoremix::synth::TEST_ID
    );
    for (id, shift) in scoremix::synth::OOD_IDS {
        text.push_str(&format!("\n[[ood]]\nid = \"{id}\"\nshift_type = \"{shift}\"\n"));
    }
    text.push_str("\n[ensemble]\nid = \"ens-v\"\nheldout_fraction = 0.3\n\n[gmm]\ncandidates = [1, 2, 5, 10, 20]\n");
    let path = out.join("pipeline.toml");
    write_bytes(&path, text.as_bytes())?;
    Ok(path)
}
