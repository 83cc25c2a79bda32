//! Detection statistics. Every score is oriented so that higher means more
//! in-distribution.

use std::borrow::Borrow;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{linear_logits, DatasetManifest, SampleRecord};
use crate::matrix::RowMatrix;
use crate::numeric::{logsumexp, softmax};
use crate::stats::{FittedStats, LayerGaussianStats};

/// ODIN temperature; the perturbed logits are produced upstream with
/// `epsilon = 0.0014`.
pub const ODIN_TEMPERATURE: f64 = 1000.0;
pub const ODIN_EPSILON: f64 = 0.0014;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScoreKind {
    #[serde(rename = "MSP")]
    Msp,
    #[serde(rename = "MaxLogits")]
    MaxLogit,
    #[serde(rename = "LogitNorm")]
    LogitNorm,
    #[serde(rename = "EBO")]
    Energy,
    #[serde(rename = "D_alpha")]
    DoctorAlpha,
    #[serde(rename = "ODIN")]
    Odin,
    #[serde(rename = "MDS_f")]
    MdsFirst,
    #[serde(rename = "MDS_l")]
    MdsLast,
    #[serde(rename = "MDS_all")]
    MdsAll,
    #[serde(rename = "ReAct")]
    React,
    #[serde(rename = "GradNorm")]
    GradNorm,
    #[serde(rename = "Dice")]
    Dice,
    #[serde(rename = "ViM")]
    Vim,
    #[serde(rename = "CADet")]
    Cadet,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 14] = [
        ScoreKind::Msp,
        ScoreKind::MaxLogit,
        ScoreKind::LogitNorm,
        ScoreKind::Energy,
        ScoreKind::DoctorAlpha,
        ScoreKind::Odin,
        ScoreKind::MdsFirst,
        ScoreKind::MdsLast,
        ScoreKind::MdsAll,
        ScoreKind::React,
        ScoreKind::GradNorm,
        ScoreKind::Dice,
        ScoreKind::Vim,
        ScoreKind::Cadet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Msp => "MSP",
            ScoreKind::MaxLogit => "MaxLogits",
            ScoreKind::LogitNorm => "LogitNorm",
            ScoreKind::Energy => "EBO",
            ScoreKind::DoctorAlpha => "D_alpha",
            ScoreKind::Odin => "ODIN",
            ScoreKind::MdsFirst => "MDS_f",
            ScoreKind::MdsLast => "MDS_l",
            ScoreKind::MdsAll => "MDS_all",
            ScoreKind::React => "ReAct",
            ScoreKind::GradNorm => "GradNorm",
            ScoreKind::Dice => "Dice",
            ScoreKind::Vim => "ViM",
            ScoreKind::Cadet => "CADet",
        }
    }

    /// Whether a dataset with this manifest carries the inputs the score
    /// needs.
    pub fn check_capability(self, manifest: &DatasetManifest) -> Result<()> {
        let missing = match self {
            ScoreKind::Odin if !manifest.has_aux_odin => "odin_logits",
            ScoreKind::Cadet if !manifest.has_aux_views => "view_features",
            _ => return Ok(()),
        };
        Err(Error::Capability {
            score: self.name().into(),
            reason: format!("dataset '{}' has no {missing}", manifest.dataset_id),
        })
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        let kind = match key.as_str() {
            "msp" => ScoreKind::Msp,
            "maxlogit" | "maxlogits" => ScoreKind::MaxLogit,
            "logitnorm" => ScoreKind::LogitNorm,
            "ebo" | "energy" => ScoreKind::Energy,
            "dalpha" | "doctor" | "doctoralpha" => ScoreKind::DoctorAlpha,
            "odin" => ScoreKind::Odin,
            "mdsf" => ScoreKind::MdsFirst,
            "mdsl" => ScoreKind::MdsLast,
            "mdsall" => ScoreKind::MdsAll,
            "react" => ScoreKind::React,
            "gradnorm" => ScoreKind::GradNorm,
            "dice" => ScoreKind::Dice,
            "vim" => ScoreKind::Vim,
            "cadet" => ScoreKind::Cadet,
            _ => return Err(Error::Config(format!("unknown score '{s}'"))),
        };
        Ok(kind)
    }
}

/// Temperatures used by the logit-based scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    /// Energy temperature for EBO, ReAct and Dice.
    pub temperature: f64,
    pub gradnorm_temperature: f64,
    pub odin_temperature: f64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams {
            temperature: 1.0,
            gradnorm_temperature: 1.0,
            odin_temperature: ODIN_TEMPERATURE,
        }
    }
}

pub fn msp(logits: &[f64]) -> f64 {
    let max = max_logit(logits);
    let total: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    1.0 / total
}

pub fn max_logit(logits: &[f64]) -> f64 {
    logits.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn logit_norm(logits: &[f64]) -> f64 {
    logits.iter().map(|l| l * l).sum::<f64>().sqrt()
}

/// Negated free energy `T * logsumexp(logits / T)`.
pub fn energy(logits: &[f64], temperature: f64) -> f64 {
    if temperature == 1.0 {
        return logsumexp(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    temperature * logsumexp(&scaled)
}

/// Sum of squared softmax probabilities. Monotone in the DOCTOR `D_alpha`
/// statistic, so AUCs coincide.
pub fn doctor_alpha(logits: &[f64]) -> f64 {
    softmax(logits).iter().map(|p| p * p).sum()
}

pub fn odin(record: &SampleRecord, temperature: f64) -> Result<f64> {
    let perturbed = record.odin_logits.as_ref().ok_or_else(|| Error::Capability {
        score: ScoreKind::Odin.name().into(),
        reason: format!("sample {} has no odin_logits", record.sample_id),
    })?;
    let scaled: Vec<f64> = perturbed.iter().map(|l| l / temperature).collect();
    Ok(msp(&scaled))
}

/// `max_c -(f - mu_c)^T P (f - mu_c)`.
pub fn mds_layer(features: &[f64], layer: &LayerGaussianStats) -> Result<f64> {
    if features.len() != layer.dim() {
        return Err(Error::dimension(
            format!("features of layer '{}'", layer.layer_name),
            layer.dim(),
            features.len(),
        ));
    }
    let z = layer.whiten(features);
    let best = layer
        .whitened_means()
        .iter_rows()
        .map(|m| -z.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best)
}

pub fn mds_all(record: &SampleRecord, stats: &FittedStats) -> Result<f64> {
    let mut total = 0.0;
    for layer in &stats.layers {
        total += mds_layer(record.layer(&layer.layer_name)?, layer)?;
    }
    Ok(total / stats.layers.len() as f64)
}

fn penultimate<'a>(record: &'a SampleRecord, stats: &FittedStats) -> Result<&'a [f64]> {
    let f = record.layer(&stats.head.penultimate_layer)?;
    if f.len() != stats.head.feature_dim() {
        return Err(Error::dimension("penultimate features", stats.head.feature_dim(), f.len()));
    }
    Ok(f)
}

/// Energy of the head logits recomputed from activations clipped at the
/// fitted threshold.
pub fn react_energy(record: &SampleRecord, stats: &FittedStats, temperature: f64) -> Result<f64> {
    let f = penultimate(record, stats)?;
    let logits = linear_logits(&stats.head, f, Some(stats.react.clip_value), None);
    Ok(energy(&logits, temperature))
}

/// `|softmax(logits / T) - 1/C|_1 * |f|_1 / T`: the L1 norm of the gradient
/// of the cross-entropy to the uniform distribution with respect to `W`,
/// which factorizes as an outer product.
pub fn gradnorm(record: &SampleRecord, stats: &FittedStats, temperature: f64) -> Result<f64> {
    let f = penultimate(record, stats)?;
    let scaled: Vec<f64> = record.logits.iter().map(|l| l / temperature).collect();
    let p = softmax(&scaled);
    let uniform = 1.0 / p.len() as f64;
    let dp: f64 = p.iter().map(|pc| (pc - uniform).abs()).sum();
    let df: f64 = f.iter().map(|v| v.abs()).sum();
    Ok(dp * df / temperature)
}

/// Energy of the logits recomputed through the sparsified weight mask.
pub fn dice_energy(record: &SampleRecord, stats: &FittedStats, temperature: f64) -> Result<f64> {
    let f = penultimate(record, stats)?;
    let logits = linear_logits(&stats.head, f, None, Some(&stats.dice.mask));
    Ok(energy(&logits, temperature))
}

/// `logsumexp(logits) - alpha * |residual|`, rank-equivalent to the negated
/// virtual-logit softmax probability.
pub fn vim(record: &SampleRecord, stats: &FittedStats) -> Result<f64> {
    let f = penultimate(record, stats)?;
    Ok(logsumexp(&record.logits) - stats.vim.alpha * stats.vim.residual_norm(f))
}

/// Mean pairwise cosine similarity among the view features. A view with zero
/// norm contributes similarity 0.
pub fn cadet_intra_similarity(record: &SampleRecord) -> Result<f64> {
    let views = record.view_features.as_ref().ok_or_else(|| Error::Capability {
        score: ScoreKind::Cadet.name().into(),
        reason: format!("sample {} has no view_features", record.sample_id),
    })?;
    let v = views.len();
    if v < 2 {
        return Err(Error::Capability {
            score: ScoreKind::Cadet.name().into(),
            reason: format!("sample {} has {v} views, need at least 2", record.sample_id),
        });
    }
    let norms: Vec<f64> = views.iter().map(|z| z.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut total = 0.0;
    for i in 0..v {
        for j in i + 1..v {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = views[i].iter().zip(&views[j]).map(|(a, b)| a * b).sum();
                total += dot / (norms[i] * norms[j]);
            }
        }
    }
    Ok(2.0 * total / (v * (v - 1)) as f64)
}

/// Evaluates one score on one record.
pub fn compute(kind: ScoreKind, record: &SampleRecord, stats: &FittedStats, params: &ScoreParams) -> Result<f64> {
    let value = match kind {
        ScoreKind::Msp => msp(&record.logits),
        ScoreKind::MaxLogit => max_logit(&record.logits),
        ScoreKind::LogitNorm => logit_norm(&record.logits),
        ScoreKind::Energy => energy(&record.logits, params.temperature),
        ScoreKind::DoctorAlpha => doctor_alpha(&record.logits),
        ScoreKind::Odin => odin(record, params.odin_temperature)?,
        ScoreKind::MdsFirst => {
            let l = stats.first_layer();
            mds_layer(record.layer(&l.layer_name)?, l)?
        }
        ScoreKind::MdsLast => {
            let l = stats.last_layer();
            mds_layer(record.layer(&l.layer_name)?, l)?
        }
        ScoreKind::MdsAll => mds_all(record, stats)?,
        ScoreKind::React => react_energy(record, stats, params.temperature)?,
        ScoreKind::GradNorm => gradnorm(record, stats, params.gradnorm_temperature)?,
        ScoreKind::Dice => dice_energy(record, stats, params.temperature)?,
        ScoreKind::Vim => vim(record, stats)?,
        ScoreKind::Cadet => cadet_intra_similarity(record)?,
    };
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "{kind} produced {value} for sample {}",
            record.sample_id
        )));
    }
    Ok(value)
}

/// Member scores of one sample, in ensemble order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub ensemble_id: String,
    pub sample_id: i64,
    pub values: Vec<f64>,
}

pub fn score_vector(
    record: &SampleRecord,
    stats: &FittedStats,
    ensemble_id: &str,
    members: &[ScoreKind],
    params: &ScoreParams,
) -> Result<ScoreVector> {
    let values = members
        .iter()
        .map(|&k| compute(k, record, stats, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreVector {
        ensemble_id: ensemble_id.to_string(),
        sample_id: record.sample_id,
        values,
    })
}

/// Scores every record (rows) under every member (columns). Records are
/// processed in parallel; the result and any reported error are independent
/// of scheduling.
pub fn score_records<R: Borrow<SampleRecord> + Sync>(
    records: &[R],
    stats: &FittedStats,
    members: &[ScoreKind],
    params: &ScoreParams,
) -> Result<RowMatrix> {
    let rows: Vec<Result<Vec<f64>>> = records
        .par_iter()
        .map(|r| members.iter().map(|&k| compute(k, r.borrow(), stats, params)).collect())
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    RowMatrix::from_rows(members.len(), rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn rec(logits: Vec<f64>) -> SampleRecord {
        SampleRecord {
            sample_id: 0,
            origin_id: None,
            label: -1,
            prediction: crate::numeric::argmax(&logits),
            logits,
            features: BTreeMap::new(),
            odin_logits: None,
            view_features: None,
        }
    }

    #[test]
    fn logit_score_examples() {
        assert!((msp(&[0.0; 4]) - 0.25).abs() < 1e-15);
        assert!((msp(&[2f64.ln(), 0.0]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(max_logit(&[1.0, 2.0, 3.0]), 3.0);
        assert_eq!(max_logit(&[5.0, 5.0]), 5.0);
        assert_eq!(logit_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(logit_norm(&[0.0, 0.0]), 0.0);
        assert!((energy(&[0.0, 0.0], 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((energy(&[1000.0, 0.0], 1.0) - 1000.0).abs() < 1e-12);
        assert!((doctor_alpha(&[0.0; 4]) - 0.25).abs() < 1e-15);
        assert!(doctor_alpha(&[1e4, 0.0, 0.0]) > 1.0 - 1e-12);
    }

    #[test]
    fn odin_examples() {
        let mut r = rec(vec![0.0; 5]);
        assert!(matches!(odin(&r, ODIN_TEMPERATURE), Err(Error::Capability { .. })));
        r.odin_logits = Some(vec![3.0; 5]);
        assert!((odin(&r, ODIN_TEMPERATURE).unwrap() - 0.2).abs() < 1e-15);
        r.odin_logits = Some(vec![1000.0 * 2f64.ln(), 0.0]);
        assert!((odin(&r, ODIN_TEMPERATURE).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cadet_examples() {
        let mut r = rec(vec![0.0, 1.0]);
        r.view_features = Some(vec![vec![1.0, 2.0]; 5]);
        assert!((cadet_intra_similarity(&r).unwrap() - 1.0).abs() < 1e-15);
        r.view_features = Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(cadet_intra_similarity(&r).unwrap(), 0.0);
        r.view_features = Some(vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0]]);
        // Only the (1, 2) pair counts: 2 * 1 / (3 * 2).
        assert!((cadet_intra_similarity(&r).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        r.view_features = None;
        assert!(cadet_intra_similarity(&r).is_err());
    }

    #[test]
    fn stability_for_large_logits() {
        let l = [1e4, -1e4, 5e3, 1e4];
        for v in [msp(&l), max_logit(&l), logit_norm(&l), energy(&l, 1.0), doctor_alpha(&l), energy(&l, 1000.0)] {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn names_round_trip() {
        for k in ScoreKind::ALL {
            assert_eq!(k.name().parse::<ScoreKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert_eq!("Max logits".parse::<ScoreKind>().unwrap(), ScoreKind::MaxLogit);
        assert!("knn".parse::<ScoreKind>().is_err());
    }
}
