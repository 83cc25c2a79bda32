//! Generative ensembles: a Gaussian mixture over vectors of member scores
//! whose log-likelihood is itself a detection score.

pub mod gmm;
mod select;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_json, DatasetManifest, SampleRecord};
use crate::matrix::RowMatrix;
use crate::npy::{self, NpyArray};
use crate::scores::{self, ScoreKind, ScoreParams};
use crate::stats::FittedStats;

pub use gmm::{fit_with_standardization, gmm_fit, standardize_fit, GmmFitInfo, GmmModel, GmmOptions, Standardization};
pub use select::{
    build_training_matrix, heldout_ed_auc, select_members, select_n_components, ComponentSelection, MemberSelection, TrainingSplit,
    CANDIDATE_COMPONENTS, CORR_THRESHOLD, NEAR_RANDOM_BAND,
};

/// An ordered list of member scores under a file-name safe id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleDefinition {
    pub id: String,
    pub members: Vec<ScoreKind>,
}

impl EnsembleDefinition {
    pub const BUILTIN_IDS: [&'static str; 3] = ["ens-v", "ens-r", "ens-f"];

    /// Members chosen for vision transformers.
    pub fn ens_v() -> Self {
        use ScoreKind::*;
        EnsembleDefinition {
            id: "ens-v".into(),
            members: vec![GradNorm, Odin, MdsAll, MdsLast, Cadet, Dice, Msp, MaxLogit],
        }
    }

    /// Members chosen for ResNet-50.
    pub fn ens_r() -> Self {
        use ScoreKind::*;
        EnsembleDefinition {
            id: "ens-r".into(),
            members: vec![GradNorm, Odin, MdsAll, MdsLast, Cadet, React, Vim, DoctorAlpha],
        }
    }

    /// Cheap members that need no auxiliary inputs.
    pub fn ens_f() -> Self {
        use ScoreKind::*;
        EnsembleDefinition {
            id: "ens-f".into(),
            members: vec![Msp, MaxLogit, MdsAll, MdsLast, Energy],
        }
    }

    /// Looks up a built-in by id, accepting `ens-v`, `Ens-V`, `ens_v` and so on.
    pub fn builtin(id: &str) -> Option<Self> {
        match id.to_ascii_lowercase().replace('_', "-").as_str() {
            "ens-v" => Some(Self::ens_v()),
            "ens-r" => Some(Self::ens_r()),
            "ens-f" => Some(Self::ens_f()),
            _ => None,
        }
    }

    pub fn custom(id: impl Into<String>, members: Vec<ScoreKind>) -> Result<Self> {
        let def = EnsembleDefinition { id: id.into(), members };
        def.validate()?;
        Ok(def)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        {
            return Err(Error::Config(format!("ensemble id '{}' is not file-name safe", self.id)));
        }
        if self.members.is_empty() {
            return Err(Error::Config(format!("ensemble '{}' has no members", self.id)));
        }
        let unique: BTreeSet<ScoreKind> = self.members.iter().copied().collect();
        if unique.len() != self.members.len() {
            return Err(Error::Config(format!("ensemble '{}' lists a member twice", self.id)));
        }
        Ok(())
    }

    pub fn check_capability(&self, manifest: &DatasetManifest) -> Result<()> {
        self.members.iter().try_for_each(|m| m.check_capability(manifest))
    }

    pub fn member_names(&self) -> Vec<&'static str> {
        self.members.iter().map(|m| m.name()).collect()
    }
}

/// A definition together with the mixture fitted over its member scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub definition: EnsembleDefinition,
    pub gmm: GmmModel,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleFile {
    format_version: u32,
    ensemble_id: String,
    members: Vec<ScoreKind>,
    n_components: usize,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fit: Option<GmmFitInfo>,
}

impl EnsembleModel {
    pub fn new(definition: EnsembleDefinition, gmm: GmmModel) -> Result<Self> {
        definition.validate()?;
        if gmm.dim() != definition.members.len() {
            return Err(Error::dimension("ensemble mixture", definition.members.len(), gmm.dim()));
        }
        Ok(EnsembleModel { definition, gmm })
    }

    /// Member score matrix of `records`, then the mixture log-likelihood of
    /// every row.
    pub fn score_records(&self, records: &[&SampleRecord], stats: &FittedStats, params: &ScoreParams) -> Result<Vec<f64>> {
        let matrix = scores::score_records(records, stats, &self.definition.members, params)?;
        Ok(self.gmm.score_rows(&matrix))
    }

    pub fn score_matrix(&self, matrix: &RowMatrix) -> Result<Vec<f64>> {
        if matrix.cols() != self.gmm.dim() {
            return Err(Error::dimension("score matrix", self.gmm.dim(), matrix.cols()));
        }
        Ok(self.gmm.score_rows(matrix))
    }

    fn file_stem(id: &str) -> String {
        format!("gmm_{id}")
    }

    /// Writes `gmm_<id>.json` and the `float64` arrays next to it.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = Self::file_stem(&self.definition.id);
        let g = &self.gmm;
        let (n, k) = (g.n_components(), g.dim());
        write_json(
            &dir.join(format!("{stem}.json")),
            &EnsembleFile {
                format_version: 1,
                ensemble_id: self.definition.id.clone(),
                members: self.definition.members.clone(),
                n_components: n,
                dim: k,
                fit: g.info.clone(),
            },
        )?;
        let arrays = [
            ("weights", NpyArray::f64(vec![n], g.weights.clone())?),
            ("means", NpyArray::f64(vec![n, k], g.means.as_slice().to_vec())?),
            ("covariances", NpyArray::f64(vec![n, k, k], gmm::stack_covariances(g))?),
            ("std_mean", NpyArray::f64(vec![k], g.standardization.mean.clone())?),
            ("std_scale", NpyArray::f64(vec![k], g.standardization.std.clone())?),
        ];
        for (name, array) in &arrays {
            npy::write_npy(&dir.join(format!("{stem}_{name}.npy")), array)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, ensemble_id: &str) -> Result<Self> {
        let stem = Self::file_stem(ensemble_id);
        let json_path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let file: EnsembleFile =
            serde_json::from_str(&text).map_err(|e| Error::format(json_path.display().to_string(), e.to_string()))?;
        if file.ensemble_id != ensemble_id {
            return Err(Error::format(
                json_path.display().to_string(),
                format!("holds ensemble '{}', expected '{ensemble_id}'", file.ensemble_id),
            ));
        }
        let (n, k) = (file.n_components, file.dim);
        let read = |name: &str, shape: &[usize]| npy::read_f64_array(&dir.join(format!("{stem}_{name}.npy")), shape);
        let weights = read("weights", &[n])?;
        let means = RowMatrix::from_vec(n, k, read("means", &[n, k])?)?;
        let stacked = read("covariances", &[n, k, k])?;
        let covariances = stacked
            .chunks(k * k)
            .map(|c| RowMatrix::from_vec(k, k, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let standardization = Standardization {
            mean: read("std_mean", &[k])?,
            std: read("std_scale", &[k])?,
        };
        let mut gmm = GmmModel::new(weights, means, covariances, standardization)?;
        gmm.info = file.fit;
        EnsembleModel::new(
            EnsembleDefinition {
                id: file.ensemble_id,
                members: file.members,
            },
            gmm,
        )
    }
}
