use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scoremix::eval::{aggregate_report, emit_report, evaluate_dsd, evaluate_ed, read_report, EdInput, TaskResult};
use scoremix::ingest::link_counterparts;
use scoremix::stats::fit_stats;
use scoremix::synth::{self, SynthConfig};
use scoremix::{auroc, ReportFormat, ScoreKind, ScoreParams, Scorer, Setting, ShiftType, StatsConfig};

fn pairwise(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for o in ood {
        for i in id {
            wins += match i.partial_cmp(o).unwrap() {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    wins / (id.len() * ood.len()) as f64
}

fn scores_with_ties() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-20i32..20).prop_map(|v| v as f64 / 4.0), 1..40)
}

proptest! {
    #[test]
    fn auroc_matches_pair_counting(id in scores_with_ties(), ood in scores_with_ties()) {
        prop_assert!((auroc(&id, &ood).unwrap() - pairwise(&id, &ood)).abs() < 1e-12);
    }

    #[test]
    fn auroc_ignores_monotone_transforms(id in scores_with_ties(), ood in scores_with_ties()) {
        let f = |v: &f64| (v / 3.0).exp() * 2.0 - 1.0;
        let a = auroc(&id, &ood).unwrap();
        let b = auroc(&id.iter().map(f).collect::<Vec<_>>(), &ood.iter().map(f).collect::<Vec<_>>()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn swapping_sides_complements(id in scores_with_ties(), ood in scores_with_ties()) {
        let a = auroc(&id, &ood).unwrap();
        let b = auroc(&ood, &id).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }
}

#[test]
fn auroc_rejects_non_finite() {
    assert!(auroc(&[f64::NAN, 1.0], &[0.0]).is_err());
    assert!(auroc(&[1.0], &[f64::INFINITY]).is_err());
}

#[test]
fn same_distribution_is_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let all: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
    let auc = auroc(&all[..2000], &all[2000..]).unwrap();
    assert!((0.45..=0.55).contains(&auc), "{auc}");
}

struct Setup {
    fixture: synth::SynthFixture,
    stats: scoremix::FittedStats,
}

fn setup() -> Setup {
    let fixture = synth::generate(&SynthConfig {
        train: 400,
        validation: 40,
        test: 300,
        ood: 120,
        ..SynthConfig::default()
    })
    .unwrap();
    let stats = fit_stats(fixture.dataset(synth::TRAIN_ID).unwrap(), &fixture.head, &StatsConfig::default(), 0).unwrap();
    Setup { fixture, stats }
}

impl Setup {
    fn scorer(&self, kind: ScoreKind) -> Scorer<'_> {
        Scorer::Member {
            kind,
            stats: &self.stats,
            params: ScoreParams::default(),
        }
    }
}

#[test]
fn dsd_uses_every_record_and_restricts_multilabel() {
    let s = setup();
    let test = s.fixture.dataset(synth::TEST_ID).unwrap();
    let novel = s.fixture.dataset("novel").unwrap();
    let out = evaluate_dsd(test, novel, &s.scorer(ScoreKind::Msp)).unwrap();
    assert_eq!(out.result.setting, Setting::Dsd);
    assert_eq!((out.result.n_id, out.result.n_ood), (test.len(), novel.len()));
    assert!((out.result.auc - pairwise(&out.id_scores, &out.ood_scores)).abs() < 1e-12);

    let ml = s.fixture.dataset("multilabel").unwrap();
    let classes = ml.manifest.label_restriction.clone().unwrap();
    let out = evaluate_dsd(test, ml, &s.scorer(ScoreKind::Energy)).unwrap();
    let expected = test.records.iter().filter(|r| classes.contains(&(r.label as usize))).count();
    assert_eq!(out.result.n_id, expected);
    assert_eq!(out.result.shift_type, ShiftType::MultiLabel);

    let mut unrestricted = ml.clone();
    unrestricted.manifest.label_restriction = None;
    assert!(evaluate_dsd(test, &unrestricted, &s.scorer(ScoreKind::Energy)).is_err());
}

#[test]
fn ed_sides_follow_correctness() {
    let s = setup();
    let test = s.fixture.dataset(synth::TEST_ID).unwrap();
    let out = evaluate_ed(EdInput::InDistribution(test), &s.scorer(ScoreKind::Msp)).unwrap();
    let wrong = test.records.iter().filter(|r| r.is_correct() == Some(false)).count();
    assert_eq!((out.result.n_id, out.result.n_ood), (test.len() - wrong, wrong));
    assert!(out.result.auc > 0.5);

    let corruption = s.fixture.dataset("corruption").unwrap();
    let out = evaluate_ed(EdInput::Corruption { id: test, ood: corruption }, &s.scorer(ScoreKind::Msp)).unwrap();
    assert_eq!(out.result.setting, Setting::EdCorruption);
    assert_eq!(out.result.n_ood, corruption.records.iter().filter(|r| r.is_correct() == Some(false)).count());

    let adv = s.fixture.dataset("adversarial").unwrap();
    let paired = link_counterparts(adv, test).unwrap();
    let out = evaluate_ed(EdInput::Adversarial(&paired), &s.scorer(ScoreKind::MaxLogit)).unwrap();
    let successes = paired.successful().count();
    assert_eq!((out.result.n_id, out.result.n_ood), (successes, successes));

    let mut all_right = test.clone();
    for r in &mut all_right.records {
        r.label = r.prediction as i64;
    }
    let err = evaluate_ed(EdInput::InDistribution(&all_right), &s.scorer(ScoreKind::Msp)).unwrap_err();
    assert!(err.to_string().contains("misclassified"), "{err}");

    let mut unlabelled = test.clone();
    unlabelled.records[0].label = -1;
    assert!(evaluate_ed(EdInput::InDistribution(&unlabelled), &s.scorer(ScoreKind::Msp)).is_err());
}

fn task(setting: Setting, shift_type: ShiftType, dataset: &str, scorer: &str, auc: f64) -> TaskResult {
    TaskResult {
        setting,
        shift_type,
        dataset: dataset.into(),
        scorer: scorer.into(),
        auc,
        n_id: 100,
        n_ood: 40,
    }
}

fn golden_report() -> scoremix::EvalReport {
    let tasks = vec![
        task(Setting::Dsd, ShiftType::NovelClasses, "far", "MSP", 0.875),
        task(Setting::Dsd, ShiftType::NovelClasses, "near", "MSP", 0.625),
        task(Setting::Dsd, ShiftType::Corruption, "blur", "MSP", 0.5),
        task(Setting::Dsd, ShiftType::NovelClasses, "far", "ens-v", 0.9375),
        task(Setting::Dsd, ShiftType::Corruption, "blur", "ens-v", 0.75),
        task(Setting::EdIndist, ShiftType::InDistribution, "clean", "MSP", 0.8125),
        task(Setting::EdCorruption, ShiftType::Corruption, "blur", "MSP", 0.6875),
    ];
    aggregate_report(tasks, BTreeMap::from([("clean".to_string(), 0.9)])).unwrap()
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn report_matches_golden_files() {
    let report = golden_report();
    for (name, format) in [("report.json", ReportFormat::Json), ("report.csv", ReportFormat::Csv)] {
        let bytes = emit_report(&report, format).unwrap();
        let path = golden_path(name);
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            std::fs::write(&path, &bytes).unwrap();
        }
        let expected = std::fs::read(&path).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), String::from_utf8(expected).unwrap(), "{name}");
    }
}

#[test]
fn golden_aggregates_are_means_of_type_means() {
    let report = golden_report();
    let msp = report
        .overall
        .iter()
        .find(|o| o.family == "DSD" && o.scorer == "MSP")
        .unwrap();
    assert!((msp.auc - (0.75 + 0.5) / 2.0).abs() < 1e-15);
    assert_eq!(msp.shift_types, 2);
    let ed = report.overall.iter().find(|o| o.family == "ED").unwrap();
    assert!((ed.auc - (0.8125 + 0.6875) / 2.0).abs() < 1e-15);
}

#[test]
fn reports_round_trip() {
    let report = golden_report();
    let json = emit_report(&report, ReportFormat::Json).unwrap();
    assert_eq!(read_report(&json, ReportFormat::Json).unwrap(), report);

    let csv = emit_report(&report, ReportFormat::Csv).unwrap();
    let back = read_report(&csv, ReportFormat::Csv).unwrap();
    assert_eq!(back.tasks, report.tasks);
    assert_eq!(back.shift_type_averages, report.shift_type_averages);
    assert_eq!(back.overall, report.overall);
    assert!(back.accuracy.is_empty());

    assert!(read_report(b"a,b\n1,2\n", ReportFormat::Csv).is_err());
    assert!(read_report(b"{", ReportFormat::Json).is_err());
}

#[test]
fn aggregation_rejects_out_of_range_auc() {
    let bad = vec![task(Setting::Dsd, ShiftType::NovelClasses, "x", "MSP", 1.5)];
    assert!(aggregate_report(bad, BTreeMap::new()).is_err());
}
