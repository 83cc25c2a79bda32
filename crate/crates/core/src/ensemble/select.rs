//! Choosing the component count and the member scores of an ensemble.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gmm::{fit_with_standardization, GmmModel, GmmOptions};
use super::EnsembleDefinition;
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::ingest::{DatasetBundle, SampleRecord};
use crate::matrix::RowMatrix;
use crate::numeric::pearson;
use crate::scores::{self, ScoreKind, ScoreParams};
use crate::stats::FittedStats;

pub const CANDIDATE_COMPONENTS: [usize; 5] = [1, 2, 5, 10, 20];
pub const CORR_THRESHOLD: f64 = 0.95;
/// Scores whose in-distribution error-detection AUC falls here are dropped.
pub const NEAR_RANDOM_BAND: (f64, f64) = (0.45, 0.55);

/// Member-score vectors of a validation bundle split into a training part
/// (correct predictions only) and a held-out part with correctness flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSplit {
    pub x_train: RowMatrix,
    pub train_ids: Vec<i64>,
    /// Training-part records dropped because they were misclassified.
    pub discarded: usize,
    pub heldout_scores: RowMatrix,
    pub heldout_correct: Vec<bool>,
    pub heldout_ids: Vec<i64>,
}

pub fn build_training_matrix(
    bundle: &DatasetBundle,
    stats: &FittedStats,
    definition: &EnsembleDefinition,
    params: &ScoreParams,
    validation_fraction: f64,
    seed: u64,
) -> Result<TrainingSplit> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::Config(format!(
            "validation_fraction must lie in [0, 1), got {validation_fraction}"
        )));
    }
    definition.check_capability(&bundle.manifest)?;
    if let Some(r) = bundle.records.iter().find(|r| !r.has_label()) {
        return Err(Error::Fit(format!(
            "ensemble training needs labels, but sample {} of '{}' has none",
            r.sample_id,
            bundle.id()
        )));
    }
    let mut order: Vec<usize> = (0..bundle.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_heldout = (validation_fraction * bundle.len() as f64).round() as usize;
    let (heldout_idx, train_idx) = order.split_at(n_heldout);

    let mut train: Vec<&SampleRecord> = train_idx.iter().map(|&i| &bundle.records[i]).collect();
    let before = train.len();
    train.retain(|r| r.is_correct() == Some(true));
    if train.is_empty() {
        return Err(Error::Fit(format!(
            "no correctly classified records remain to train on in '{}'",
            bundle.id()
        )));
    }
    let heldout: Vec<&SampleRecord> = heldout_idx.iter().map(|&i| &bundle.records[i]).collect();

    let members = &definition.members;
    Ok(TrainingSplit {
        x_train: scores::score_records(&train, stats, members, params)?,
        train_ids: train.iter().map(|r| r.sample_id).collect(),
        discarded: before - train.len(),
        heldout_scores: scores::score_records(&heldout, stats, members, params)?,
        heldout_correct: heldout.iter().map(|r| r.is_correct() == Some(true)).collect(),
        heldout_ids: heldout.iter().map(|r| r.sample_id).collect(),
    })
}

/// Error-detection AUC of a fitted mixture on held-out rows: correctly
/// classified rows form the in-distribution side, misclassified rows the
/// other.
pub fn heldout_ed_auc(model: &GmmModel, heldout: &RowMatrix, correct: &[bool]) -> Result<f64> {
    let ll = model.score_rows(heldout);
    let (mut id, mut err) = (Vec::new(), Vec::new());
    for (v, &ok) in ll.into_iter().zip(correct) {
        if ok {
            id.push(v)
        } else {
            err.push(v)
        }
    }
    auroc(&id, &err)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSelection {
    /// `(n, held-out ED-AUC)` for every candidate that could be fitted, in
    /// increasing `n`.
    pub evaluated: Vec<(usize, f64)>,
    /// Candidates with fewer than `10 n` training rows.
    pub skipped: Vec<usize>,
    pub chosen: usize,
    pub model: GmmModel,
}

/// Fits one mixture per candidate component count and keeps the one with the
/// best held-out error-detection AUC, preferring fewer components on ties.
pub fn select_n_components(
    x_train: &RowMatrix,
    heldout: &RowMatrix,
    heldout_correct: &[bool],
    candidates: &[usize],
    opts: &GmmOptions,
) -> Result<ComponentSelection> {
    if heldout.rows() != heldout_correct.len() {
        return Err(Error::dimension("heldout correctness flags", heldout.rows(), heldout_correct.len()));
    }
    let mut sorted: Vec<usize> = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() || sorted[0] == 0 {
        return Err(Error::Config("component candidates must be positive and non-empty".into()));
    }

    let mut evaluated = Vec::new();
    let mut skipped = Vec::new();
    let mut best: Option<(usize, f64, GmmModel)> = None;
    for n in sorted {
        if x_train.rows() < 10 * n {
            log::debug!("skipping {n} components: {} training rows", x_train.rows());
            skipped.push(n);
            continue;
        }
        let model = fit_with_standardization(x_train, &GmmOptions { n_components: n, ..opts.clone() })?;
        let auc = heldout_ed_auc(&model, heldout, heldout_correct)?;
        log::debug!("{n} components: held-out ED-AUC {auc:.4}");
        evaluated.push((n, auc));
        if best.as_ref().is_none_or(|b| auc > b.1) {
            best = Some((n, auc, model));
        }
    }
    let (chosen, _, model) = best.ok_or_else(|| {
        Error::Fit(format!(
            "{} training rows are too few for every candidate component count",
            x_train.rows()
        ))
    })?;
    Ok(ComponentSelection {
        evaluated,
        skipped,
        chosen,
        model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSelection {
    pub scores: Vec<ScoreKind>,
    /// Pearson correlation between score columns; `0` where a column is
    /// constant.
    pub correlation: Vec<Vec<f64>>,
    pub ed_auc: Vec<f64>,
    pub admitted: Vec<ScoreKind>,
    pub near_random: Vec<ScoreKind>,
    /// Rejected score and the admitted score it correlates with.
    pub redundant: Vec<(ScoreKind, ScoreKind)>,
}

/// Greedy member selection over candidate score columns of clean validation
/// data.
pub fn select_members(
    matrix: &RowMatrix,
    scores: &[ScoreKind],
    ed_auc: &[f64],
    corr_threshold: f64,
) -> Result<MemberSelection> {
    let k = scores.len();
    if matrix.cols() != k || ed_auc.len() != k {
        return Err(Error::dimension("member candidates", k, format!("{} columns, {} AUCs", matrix.cols(), ed_auc.len())));
    }
    if !(corr_threshold > 0.0 && corr_threshold <= 1.0) {
        return Err(Error::Config(format!("corr_threshold must lie in (0, 1], got {corr_threshold}")));
    }
    let columns: Vec<Vec<f64>> = (0..k).map(|j| matrix.column(j)).collect();
    let mut correlation = vec![vec![0.0; k]; k];
    for i in 0..k {
        correlation[i][i] = 1.0;
        for j in i + 1..k {
            let r = pearson(&columns[i], &columns[j]).unwrap_or(0.0);
            correlation[i][j] = r;
            correlation[j][i] = r;
        }
    }

    let (lo, hi) = NEAR_RANDOM_BAND;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| ed_auc[b].total_cmp(&ed_auc[a]));
    let mut admitted_idx: Vec<usize> = Vec::new();
    let mut near_random = Vec::new();
    let mut redundant = Vec::new();
    for i in order {
        if (lo..=hi).contains(&ed_auc[i]) {
            near_random.push(scores[i]);
            continue;
        }
        match admitted_idx.iter().find(|&&a| correlation[i][a].abs() >= corr_threshold) {
            Some(&a) => redundant.push((scores[i], scores[a])),
            None => admitted_idx.push(i),
        }
    }
    let admitted: Vec<ScoreKind> = admitted_idx.iter().map(|&i| scores[i]).collect();
    if admitted.len() < 2 {
        return Err(Error::Selection(format!(
            "only {} score(s) survived selection; an ensemble needs at least 2",
            admitted.len()
        )));
    }
    Ok(MemberSelection {
        scores: scores.to_vec(),
        correlation,
        ed_auc: ed_auc.to_vec(),
        admitted,
        near_random,
        redundant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn noise(rows: usize, cols: usize, seed: u64) -> RowMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RowMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn correlated_copies_admit_one() {
        let base = noise(200, 2, 1);
        let m = RowMatrix::from_rows(3, base.iter_rows().map(|r| vec![r[0], 2.0 * r[0] + 1.0, r[1]])).unwrap();
        let kinds = [ScoreKind::Msp, ScoreKind::MaxLogit, ScoreKind::Energy];
        let sel = select_members(&m, &kinds, &[0.8, 0.9, 0.7], CORR_THRESHOLD).unwrap();
        assert_eq!(sel.admitted, vec![ScoreKind::MaxLogit, ScoreKind::Energy]);
        assert_eq!(sel.redundant, vec![(ScoreKind::Msp, ScoreKind::MaxLogit)]);
    }

    #[test]
    fn near_random_scores_are_excluded() {
        let m = noise(100, 3, 2);
        let kinds = [ScoreKind::Msp, ScoreKind::MaxLogit, ScoreKind::Energy];
        let sel = select_members(&m, &kinds, &[0.5, 0.8, 0.7], CORR_THRESHOLD).unwrap();
        assert_eq!(sel.near_random, vec![ScoreKind::Msp]);
        assert_eq!(sel.admitted.len(), 2);
        assert!(select_members(&m, &kinds, &[0.5, 0.5, 0.9], CORR_THRESHOLD).is_err());
    }

    #[test]
    fn single_candidate_is_chosen() {
        let x = noise(100, 2, 3);
        let held = noise(40, 2, 4);
        let correct: Vec<bool> = (0..40).map(|i| i % 4 != 0).collect();
        let sel = select_n_components(&x, &held, &correct, &[1], &GmmOptions::new(1, 0)).unwrap();
        assert_eq!(sel.chosen, 1);
        assert_eq!(sel.evaluated.len(), 1);
    }

    #[test]
    fn infeasible_candidates_are_skipped() {
        let x = noise(30, 2, 5);
        let held = noise(20, 2, 6);
        let correct: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
        let sel = select_n_components(&x, &held, &correct, &CANDIDATE_COMPONENTS, &GmmOptions::new(1, 0)).unwrap();
        assert_eq!(sel.skipped, vec![5, 10, 20]);
        assert!(sel.chosen <= 2);
        assert!(select_n_components(&noise(5, 2, 7), &held, &correct, &[1], &GmmOptions::new(1, 0)).is_err());
    }
}
