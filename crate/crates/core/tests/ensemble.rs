use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use scoremix::ensemble::{
    build_training_matrix, fit_with_standardization, heldout_ed_auc, select_members, select_n_components,
    EnsembleDefinition, GmmOptions, CORR_THRESHOLD, NEAR_RANDOM_BAND,
};
use scoremix::stats::fit_stats;
use scoremix::synth::{self, SynthConfig};
use scoremix::{ErrorKind, RowMatrix, ScoreKind, ScoreParams, StatsConfig};

fn gaussian_blobs(rows: usize, cols: usize, seed: u64) -> RowMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows)
        .flat_map(|i| {
            let shift = if i % 3 == 0 { 4.0 } else { -1.0 };
            (0..cols).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>()
        })
        .collect();
    RowMatrix::from_vec(rows, cols, data).unwrap()
}

#[test]
fn positive_affine_rescaling_leaves_scores_unchanged() {
    let x = gaussian_blobs(300, 3, 5);
    let scale = [3.0, 0.01, 250.0];
    let offset = [-7.0, 1e3, 0.5];
    let moved = RowMatrix::from_rows(
        3,
        x.iter_rows().map(|r| (0..3).map(|j| scale[j] * r[j] + offset[j]).collect::<Vec<_>>()),
    )
    .unwrap();
    let opts = GmmOptions::new(2, 11);
    let a = fit_with_standardization(&x, &opts).unwrap();
    let b = fit_with_standardization(&moved, &opts).unwrap();
    for (u, v) in a.score_rows(&x).iter().zip(b.score_rows(&moved)) {
        assert!((u - v).abs() < 1e-6, "{u} vs {v}");
    }
}

#[test]
fn fitted_parameters_are_valid() {
    for seed in 0..5 {
        let x = gaussian_blobs(400, 4, seed);
        let model = fit_with_standardization(&x, &GmmOptions::new(3, seed)).unwrap();
        assert!(model.weights.iter().all(|&w| w >= 0.0));
        assert!((model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for cov in &model.covariances {
            for i in 0..4 {
                assert!(cov.get(i, i) > 0.0);
                for j in 0..4 {
                    assert!((cov.get(i, j) - cov.get(j, i)).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn split_is_disjoint_and_training_keeps_correct_rows() {
    let fixture = synth::generate(&SynthConfig {
        train: 300,
        validation: 200,
        test: 20,
        ood: 20,
        ..SynthConfig::default()
    })
    .unwrap();
    let stats = fit_stats(fixture.dataset(synth::TRAIN_ID).unwrap(), &fixture.head, &StatsConfig::default(), 0).unwrap();
    let validation = fixture.dataset(synth::VALIDATION_ID).unwrap();
    let def = EnsembleDefinition::ens_v();
    let split = build_training_matrix(validation, &stats, &def, &ScoreParams::default(), 0.3, 4).unwrap();

    let train: BTreeSet<i64> = split.train_ids.iter().copied().collect();
    let held: BTreeSet<i64> = split.heldout_ids.iter().copied().collect();
    assert!(train.is_disjoint(&held));
    assert_eq!(held.len(), 60);
    assert_eq!(train.len() + held.len() + split.discarded, validation.len());
    for id in &split.train_ids {
        let r = validation.records.iter().find(|r| r.sample_id == *id).unwrap();
        assert_eq!(r.is_correct(), Some(true));
    }
    assert_eq!(split.x_train.cols(), def.members.len());

    let again = build_training_matrix(validation, &stats, &def, &ScoreParams::default(), 0.3, 4).unwrap();
    assert_eq!(split, again);
    assert!(build_training_matrix(validation, &stats, &def, &ScoreParams::default(), 1.0, 4).is_err());

    let mut wrong = validation.clone();
    for r in &mut wrong.records {
        r.label = (r.prediction as i64 + 1) % fixture.head.class_count() as i64;
    }
    let err = build_training_matrix(&wrong, &stats, &def, &ScoreParams::default(), 0.3, 4).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Numerical);
}

#[test]
fn held_out_auc_needs_both_outcomes() {
    let x = gaussian_blobs(100, 2, 3);
    let model = fit_with_standardization(&x, &GmmOptions::new(1, 0)).unwrap();
    assert!(heldout_ed_auc(&model, &x, &vec![true; 100]).is_err());
    let mixed: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
    assert!((0.0..=1.0).contains(&heldout_ed_auc(&model, &x, &mixed).unwrap()));
}

#[test]
fn too_few_rows_for_every_candidate_is_numerical() {
    let x = gaussian_blobs(40, 2, 1);
    let correct: Vec<bool> = (0..40).map(|i| i % 4 != 0).collect();
    let err = select_n_components(&x, &x, &correct, &[5, 20], &GmmOptions::default()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Numerical);

    let sel = select_n_components(&x, &x, &correct, &[1, 2, 5, 20], &GmmOptions::default()).unwrap();
    assert_eq!(sel.skipped, vec![5, 20]);
    assert_eq!(sel.evaluated.iter().map(|e| e.0).collect::<Vec<_>>(), vec![1, 2]);
    let best = sel.evaluated.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let first_best = sel.evaluated.iter().find(|e| e.1 == best).unwrap().0;
    assert_eq!(sel.chosen, first_best);
}

const SIX: [ScoreKind; 6] = [
    ScoreKind::Msp,
    ScoreKind::MaxLogit,
    ScoreKind::Energy,
    ScoreKind::DoctorAlpha,
    ScoreKind::MdsLast,
    ScoreKind::Vim,
];

/// Columns built from three latent factors so that correlations straddle the
/// threshold.
fn block_matrix(rng: &mut ChaCha8Rng, mixing: &[[f64; 3]; 6]) -> RowMatrix {
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|_| {
            let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            mixing
                .iter()
                .map(|m| m[0] * z[0] + m[1] * z[1] + m[2] * z[2] + 0.05 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    RowMatrix::from_rows(6, rows).unwrap()
}

/// Among all pairwise-compatible subsets of eligible scores, the one that a
/// descending-AUC greedy pass admits is the lexicographic maximum of its
/// indicator vector in rank order.
fn exhaustive_selection(corr: &[Vec<f64>], auc: &[f64], threshold: f64) -> Vec<usize> {
    let mut rank: Vec<usize> = (0..6).collect();
    rank.sort_by(|&a, &b| auc[b].total_cmp(&auc[a]));
    let eligible = |i: usize| !(NEAR_RANDOM_BAND.0..=NEAR_RANDOM_BAND.1).contains(&auc[i]);
    let mut best: Option<(u64, Vec<usize>)> = None;
    for mask in 0u32..64 {
        let set: Vec<usize> = (0..6).filter(|&i| mask & (1 << i) != 0).collect();
        if set.iter().any(|&i| !eligible(i)) {
            continue;
        }
        let compatible = set
            .iter()
            .all(|&a| set.iter().all(|&b| a == b || corr[a][b].abs() < threshold));
        if !compatible {
            continue;
        }
        let key: u64 = rank
            .iter()
            .enumerate()
            .filter(|(_, i)| set.contains(i))
            .map(|(pos, _)| 1u64 << (5 - pos))
            .sum();
        if best.as_ref().is_none_or(|b| key > b.0) {
            let mut ordered: Vec<usize> = rank.iter().copied().filter(|i| set.contains(i)).collect();
            ordered.dedup();
            best = Some((key, ordered));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

#[test]
fn greedy_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    for _ in 0..300 {
        let mut mixing = [[0.0; 3]; 6];
        for row in &mut mixing {
            let f = rng.random_range(0..3);
            row[f] = 1.0;
            row[(f + 1) % 3] = rng.random_range(-0.4..0.4);
        }
        let m = block_matrix(&mut rng, &mixing);
        let auc: Vec<f64> = (0..6).map(|_| rng.random_range(0.3..0.95)).collect();
        let threshold = rng.random_range(0.85..0.99);
        match select_members(&m, &SIX, &auc, threshold) {
            Ok(sel) => {
                let expected: Vec<ScoreKind> = exhaustive_selection(&sel.correlation, &auc, threshold)
                    .into_iter()
                    .map(|i| SIX[i])
                    .collect();
                assert_eq!(sel.admitted, expected);
                for (i, row) in sel.correlation.iter().enumerate() {
                    assert_eq!(row[i], 1.0);
                    for (j, v) in row.iter().enumerate() {
                        assert_eq!(*v, sel.correlation[j][i]);
                    }
                }
                checked += 1;
            }
            Err(e) => {
                assert_eq!(e.kind(), ErrorKind::Numerical);
                let corr: Vec<Vec<f64>> = (0..6)
                    .map(|i| (0..6).map(|j| if i == j { 1.0 } else { pearson(&m.column(i), &m.column(j)) }).collect())
                    .collect();
                assert!(exhaustive_selection(&corr, &auc, threshold).len() < 2);
            }
        }
    }
    assert!(checked > 200);
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn default_threshold_drops_rescaled_copies() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mixing = [
        [1.0, 0.0, 0.0],
        [-2.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, 3.0],
        [0.0, 1.0, 0.0],
    ];
    let m = block_matrix(&mut rng, &mixing);
    let auc = [0.9, 0.8, 0.7, 0.75, 0.6, 0.5];
    let sel = select_members(&m, &SIX, &auc, CORR_THRESHOLD).unwrap();
    assert_eq!(sel.admitted, vec![ScoreKind::Msp, ScoreKind::DoctorAlpha, ScoreKind::Energy]);
    assert_eq!(sel.near_random, vec![ScoreKind::Vim]);
    assert_eq!(
        sel.redundant,
        vec![(ScoreKind::MaxLogit, ScoreKind::Msp), (ScoreKind::MdsLast, ScoreKind::DoctorAlpha)]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn selection_respects_threshold(seed in 0u64..10_000, threshold in 0.5f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mixing = [[0.0; 3]; 6];
        for row in &mut mixing {
            for v in row.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let m = block_matrix(&mut rng, &mixing);
        let auc: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        if let Ok(sel) = select_members(&m, &SIX, &auc, threshold) {
            let idx: Vec<usize> = sel.admitted.iter().map(|k| SIX.iter().position(|s| s == k).unwrap()).collect();
            for (p, &a) in idx.iter().enumerate() {
                prop_assert!(!(NEAR_RANDOM_BAND.0..=NEAR_RANDOM_BAND.1).contains(&auc[a]));
                for &b in &idx[p + 1..] {
                    prop_assert!(sel.correlation[a][b].abs() < threshold);
                    prop_assert!(auc[a] >= auc[b]);
                }
            }
            prop_assert_eq!(sel.admitted.len() + sel.near_random.len() + sel.redundant.len(), 6);
        }
    }
}
