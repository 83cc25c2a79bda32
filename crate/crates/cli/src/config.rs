//! Pipeline configuration.
//!
//! Values are resolved in this order, later sources winning:
//! built-in defaults, then the TOML file given by `--config`, then
//! command-line flags (`--seed`, `--root`, `--output`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scoremix::ensemble::{EnsembleDefinition, CANDIDATE_COMPONENTS, CORR_THRESHOLD};
use scoremix::eval::Setting;
use scoremix::ingest::MANIFEST_FILE;
use scoremix::{Error, GmmOptions, Result, ScoreKind, ScoreParams, ShiftType, StatsConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory holding `model.json` and one sub-directory per dataset.
    pub root: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub datasets: DatasetsConfig,
    #[serde(default)]
    pub ood: Vec<OodEntry>,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub gmm: GmmConfig,
    #[serde(default)]
    pub detectors: DetectorConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetsConfig {
    /// Labelled ID data the detector statistics are fitted on.
    pub train: String,
    /// Labelled ID data the ensemble mixture is fitted on.
    pub validation: String,
    /// ID side of every evaluation task.
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodEntry {
    pub id: String,
    pub shift_type: ShiftType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    /// A built-in id (`ens-v`, `ens-r`, `ens-f`) or the name of a custom
    /// ensemble when `members` is given.
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<String>>,
    /// Share of the validation set held out for component selection.
    pub heldout_fraction: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            id: "ens-f".into(),
            members: None,
            heldout_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub candidates: Vec<usize>,
    pub tol: f64,
    pub reg: f64,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        let d = GmmOptions::default();
        GmmConfig {
            candidates: CANDIDATE_COMPONENTS.to_vec(),
            tol: d.tol,
            reg: d.reg,
            restarts: d.restarts,
            max_iter: d.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub temperature: f64,
    pub gradnorm_temperature: f64,
    pub odin_temperature: f64,
    pub dice_keep: f64,
    pub react_percentile: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vim_dim: Option<usize>,
    pub lambda_scale: f64,
    pub corr_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let s = StatsConfig::default();
        let p = ScoreParams::default();
        DetectorConfig {
            temperature: p.temperature,
            gradnorm_temperature: p.gradnorm_temperature,
            odin_temperature: p.odin_temperature,
            dice_keep: s.dice_keep,
            react_percentile: s.react_percentile,
            vim_dim: s.vim_dim,
            lambda_scale: s.lambda_scale,
            corr_threshold: CORR_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub settings: Vec<Setting>,
    /// Individual scores evaluated next to the ensemble; empty means the
    /// ensemble's own members.
    pub scores: Vec<String>,
    /// Write per-task score distributions as NPY pairs.
    pub dump_distributions: bool,
    /// Seconds per sample of one forward pass; enables `timing.json`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forward_seconds_per_sample: Option<f64>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            settings: vec![Setting::Dsd, Setting::EdIndist, Setting::EdAdversarial, Setting::EdCorruption],
            scores: Vec::new(),
            dump_distributions: false,
            forward_seconds_per_sample: None,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub root: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }

    /// Reads the file and resolves relative `root` and `output` against the
    /// file's directory.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.root = base.join(&cfg.root);
        cfg.output = base.join(&cfg.output);
        cfg.apply(overrides);
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(root) = &overrides.root {
            self.root = root.clone();
        }
        if let Some(output) = &overrides.output {
            self.output = output.clone();
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn ensemble_definition(&self) -> Result<EnsembleDefinition> {
        match &self.ensemble.members {
            Some(names) => {
                let members = names.iter().map(|n| n.parse()).collect::<Result<Vec<ScoreKind>>>()?;
                EnsembleDefinition::custom(self.ensemble.id.clone(), members)
            }
            None => EnsembleDefinition::builtin(&self.ensemble.id).ok_or_else(|| {
                Error::Config(format!(
                    "'{}' is not a built-in ensemble; list its members to define a custom one",
                    self.ensemble.id
                ))
            }),
        }
    }

    pub fn eval_scores(&self) -> Result<Vec<ScoreKind>> {
        if self.evaluate.scores.is_empty() {
            return Ok(self.ensemble_definition()?.members);
        }
        self.evaluate.scores.iter().map(|n| n.parse()).collect()
    }

    pub fn stats_config(&self) -> StatsConfig {
        StatsConfig {
            lambda_scale: self.detectors.lambda_scale,
            vim_dim: self.detectors.vim_dim,
            dice_keep: self.detectors.dice_keep,
            react_percentile: self.detectors.react_percentile,
        }
    }

    pub fn score_params(&self) -> ScoreParams {
        ScoreParams {
            temperature: self.detectors.temperature,
            gradnorm_temperature: self.detectors.gradnorm_temperature,
            odin_temperature: self.detectors.odin_temperature,
        }
    }

    pub fn gmm_options(&self) -> GmmOptions {
        GmmOptions {
            n_components: self.gmm.candidates.iter().copied().min().unwrap_or(1),
            seed: self.seed,
            reg: self.gmm.reg,
            tol: self.gmm.tol,
            max_iter: self.gmm.max_iter,
            restarts: self.gmm.restarts,
        }
    }

    pub fn stats_dir(&self) -> PathBuf {
        self.output.join("stats")
    }

    pub fn ensemble_dir(&self) -> PathBuf {
        self.output.join("ensemble")
    }

    /// Checks ranges and that every referenced dataset exists on disk, without
    /// loading any data.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let d = &self.detectors;
        for (name, t) in [
            ("temperature", d.temperature),
            ("gradnorm_temperature", d.gradnorm_temperature),
            ("odin_temperature", d.odin_temperature),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("detectors.{name} must be positive, got {t}"));
            }
        }
        if !(d.dice_keep > 0.0 && d.dice_keep <= 1.0) {
            return bad(format!("detectors.dice_keep must lie in (0, 1], got {}", d.dice_keep));
        }
        if !(0.0..=100.0).contains(&d.react_percentile) {
            return bad(format!("detectors.react_percentile must lie in [0, 100], got {}", d.react_percentile));
        }
        if !(d.lambda_scale >= 0.0 && d.lambda_scale.is_finite()) {
            return bad(format!("detectors.lambda_scale must be >= 0, got {}", d.lambda_scale));
        }
        if !(d.corr_threshold > 0.0 && d.corr_threshold <= 1.0) {
            return bad(format!("detectors.corr_threshold must lie in (0, 1], got {}", d.corr_threshold));
        }
        if d.vim_dim == Some(0) {
            return bad("detectors.vim_dim must be positive".into());
        }
        let g = &self.gmm;
        if g.candidates.is_empty() || g.candidates.contains(&0) {
            return bad("gmm.candidates must be non-empty and positive".into());
        }
        if !(g.tol >= 0.0) || !(g.reg >= 0.0) || g.restarts == 0 || g.max_iter == 0 {
            return bad("gmm.tol and gmm.reg must be >= 0; restarts and max_iter must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ensemble.heldout_fraction) || self.ensemble.heldout_fraction == 0.0 {
            return bad(format!(
                "ensemble.heldout_fraction must lie in (0, 1), got {}",
                self.ensemble.heldout_fraction
            ));
        }
        if let Some(c) = self.evaluate.forward_seconds_per_sample {
            if !(c > 0.0) {
                return bad(format!("evaluate.forward_seconds_per_sample must be positive, got {c}"));
            }
        }
        self.ensemble_definition()?;
        self.eval_scores()?;

        if !self.root.join(scoremix::ingest::MODEL_FILE).is_file() {
            return bad(format!("no classifier head found in {}", self.root.display()));
        }
        let mut ids = vec![&self.datasets.train, &self.datasets.validation, &self.datasets.test];
        ids.extend(self.ood.iter().map(|o| &o.id));
        for id in ids {
            if !self.root.join(id).join(MANIFEST_FILE).is_file() {
                return bad(format!("dataset '{id}' does not exist under {}", self.root.display()));
            }
        }
        if let Some(o) = self.ood.iter().find(|o| o.shift_type == ShiftType::InDistribution) {
            return bad(format!("OOD dataset '{}' is declared in_distribution", o.id));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
root = "data"
output = "out"
[datasets]
train = "a"
validation = "b"
test = "c"
"#;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = PipelineConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.gmm.candidates, vec![1, 2, 5, 10, 20]);
        assert_eq!(cfg.ensemble.id, "ens-f");
        assert_eq!(cfg.detectors.corr_threshold, 0.95);
        assert_eq!(cfg.ensemble_definition().unwrap(), EnsembleDefinition::ens_f());
    }

    #[test]
    fn flags_override_file() {
        let mut cfg = PipelineConfig::from_toml(MINIMAL).unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            output: Some("elsewhere".into()),
            ..Default::default()
        });
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.output, PathBuf::from("elsewhere"));
        assert_eq!(cfg.root, PathBuf::from("data"));
    }

    #[test]
    fn unknown_keys_and_missing_data_are_config_errors() {
        let err = PipelineConfig::from_toml(&format!("{MINIMAL}\nbogus = 1")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let cfg = PipelineConfig::from_toml(MINIMAL).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = PipelineConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
