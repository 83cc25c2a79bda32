//! Deterministic synthetic fixture: a linear classifier head plus in-distribution
//! and shifted datasets in the on-disk container layout.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::ingest::{write_bundle, DatasetBundle, DatasetManifest, ModelHead, SampleRecord, ShiftType};
use crate::matrix::RowMatrix;
use crate::numeric::argmax;

pub const FIRST_LAYER: &str = "block";
pub const PENULTIMATE_LAYER: &str = "penultimate";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub block_dim: usize,
    pub views: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub ood: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 6,
            feature_dim: 16,
            block_dim: 8,
            views: 5,
            train: 1200,
            validation: 1500,
            test: 600,
            ood: 300,
            seed: 20240601,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthFixture {
    pub head: ModelHead,
    /// `id-train`, `id-validation`, `id-test`, then one dataset per shift type.
    pub datasets: Vec<DatasetBundle>,
}

impl SynthFixture {
    pub fn dataset(&self, id: &str) -> Option<&DatasetBundle> {
        self.datasets.iter().find(|d| d.id() == id)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        self.head.save(root)?;
        self.datasets.iter().try_for_each(|b| write_bundle(root, b))
    }
}

pub const TRAIN_ID: &str = "id-train";
pub const VALIDATION_ID: &str = "id-validation";
pub const TEST_ID: &str = "id-test";
pub const OOD_IDS: [(&str, ShiftType); 5] = [
    ("novel", ShiftType::NovelClasses),
    ("adversarial", ShiftType::Adversarial),
    ("synthetic", ShiftType::Synthetic),
    ("corruption", ShiftType::Corruption),
    ("multilabel", ShiftType::MultiLabel),
];

/// Values are rounded through `f32` so that an in-memory fixture equals the
/// one read back from disk.
fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

struct Generator {
    rng: ChaCha8Rng,
    cfg: SynthConfig,
    prototypes: Vec<Vec<f64>>,
    projection: RowMatrix,
    head: ModelHead,
}

impl Generator {
    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    fn noise(&mut self, dim: usize, scale: f64) -> Vec<f64> {
        (0..dim).map(|_| scale * self.normal()).collect()
    }

    /// Builds a record from a penultimate feature vector; every other field
    /// is derived from it.
    fn record(&mut self, sample_id: i64, label: i64, origin: Option<i64>, penult: Vec<f64>, view_spread: f64) -> SampleRecord {
        let d = self.cfg.feature_dim;
        let penult: Vec<f64> = penult.into_iter().map(f32_round).collect();
        let block: Vec<f64> = (0..self.cfg.block_dim)
            .map(|i| {
                let row = self.projection.row(i);
                let v: f64 = row.iter().zip(&penult).map(|(a, b)| a * b).sum();
                v + 0.3 * self.normal()
            })
            .map(f32_round)
            .collect();
        let logits: Vec<f64> = self.head.logits(&penult).into_iter().map(f32_round).collect();
        let prediction = argmax(&logits);

        // Input perturbation moves confident samples further toward their
        // predicted class than unconfident ones.
        let nudge: Vec<f64> = self.head.weight.row(prediction).to_vec();
        let norm = nudge.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let gain = 0.05 / view_spread;
        let moved: Vec<f64> = penult.iter().zip(&nudge).map(|(f, w)| f + gain * w / norm).collect();
        let odin_logits = self.head.logits(&moved).into_iter().map(f32_round).collect();

        let views = (0..self.cfg.views)
            .map(|_| {
                let n = self.noise(d, view_spread);
                penult.iter().zip(n).map(|(f, e)| f32_round(f + e)).collect()
            })
            .collect();

        let mut features = BTreeMap::new();
        features.insert(FIRST_LAYER.to_string(), block);
        features.insert(PENULTIMATE_LAYER.to_string(), penult);
        SampleRecord {
            sample_id,
            origin_id: origin,
            label,
            prediction,
            logits,
            features,
            odin_logits: Some(odin_logits),
            view_features: Some(views),
        }
    }

    fn class_sample(&mut self, class: usize, spread: f64, pull: f64) -> Vec<f64> {
        let d = self.cfg.feature_dim;
        let n = self.noise(d, spread);
        self.prototypes[class].iter().zip(n).map(|(m, e)| pull * m + e).collect()
    }

    fn manifest(&self, id: &str, shift_type: ShiftType) -> DatasetManifest {
        DatasetManifest {
            dataset_id: id.to_string(),
            shift_type,
            record_count: 0,
            layer_names: vec![FIRST_LAYER.to_string(), PENULTIMATE_LAYER.to_string()],
            class_count: self.cfg.classes,
            has_aux_odin: true,
            has_aux_views: true,
            view_count: Some(self.cfg.views),
            origin_dataset_id: None,
            label_restriction: None,
        }
    }

    fn id_set(&mut self, id: &str, offset: i64, n: usize) -> Result<DatasetBundle> {
        let records = (0..n)
            .map(|i| {
                let class = self.rng.random_range(0..self.cfg.classes);
                let f = self.class_sample(class, 1.0, 1.0);
                self.record(offset + i as i64, class as i64, None, f, 0.4)
            })
            .collect();
        DatasetBundle::new(self.manifest(id, ShiftType::InDistribution), records)
    }
}

/// Generates the full fixture from `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, d) = (cfg.classes, cfg.feature_dim);
    let prototypes: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| 1.1 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let weight = RowMatrix::from_rows(
        d,
        prototypes
            .iter()
            .map(|p| p.iter().map(|&v| f32_round(0.8 * v + 0.1 * rng.sample::<f64, _>(StandardNormal))).collect::<Vec<_>>()),
    )?;
    let bias: Vec<f64> = (0..c).map(|_| f32_round(0.2 * rng.sample::<f64, _>(StandardNormal))).collect();
    let head = ModelHead::new(weight, bias, PENULTIMATE_LAYER)?;
    let scale = 1.0 / (d as f64).sqrt();
    let projection = RowMatrix::from_vec(
        cfg.block_dim,
        d,
        (0..cfg.block_dim * d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
    )?;
    let mut g = Generator {
        rng,
        cfg: cfg.clone(),
        prototypes,
        projection,
        head: head.clone(),
    };

    let train = g.id_set(TRAIN_ID, 0, cfg.train)?;
    let validation = g.id_set(VALIDATION_ID, 100_000, cfg.validation)?;
    let test = g.id_set(TEST_ID, 200_000, cfg.test)?;
    let mut datasets = vec![train, validation];

    let mut offset = 300_000;
    let mut shifted = Vec::new();
    for (id, shift) in OOD_IDS {
        let mut manifest = g.manifest(id, shift);
        let records: Vec<SampleRecord> = match shift {
            ShiftType::NovelClasses => (0..cfg.ood)
                .map(|i| {
                    let f = g.noise(d, 1.4);
                    g.record(offset + i as i64, -1, None, f, 0.9)
                })
                .collect(),
            ShiftType::Adversarial => {
                manifest.origin_dataset_id = Some(TEST_ID.to_string());
                (0..cfg.ood.min(test.len()))
                    .map(|i| {
                        let clean = &test.records[i];
                        let target = (clean.label as usize + 1 + g.rng.random_range(0..c - 1)) % c;
                        let step = g.rng.random_range(0.2..0.9);
                        let src = clean.layer(PENULTIMATE_LAYER).expect("fixture layer").to_vec();
                        let f: Vec<f64> = src
                            .iter()
                            .zip(&g.prototypes[target])
                            .zip(&g.prototypes[clean.label as usize])
                            .map(|((x, t), s)| x + step * (t - s))
                            .collect();
                        g.record(offset + i as i64, clean.label, Some(i as i64), f, 0.7)
                    })
                    .collect()
            }
            ShiftType::Synthetic => (0..cfg.ood)
                .map(|i| {
                    let a = g.rng.random_range(0..c);
                    let b = g.rng.random_range(0..c);
                    let fa = g.class_sample(a, 0.8, 0.5);
                    let fb = g.class_sample(b, 0.8, 0.5);
                    let f = fa.iter().zip(fb).map(|(x, y)| x + y).collect();
                    g.record(offset + i as i64, -1, None, f, 0.8)
                })
                .collect(),
            ShiftType::Corruption => (0..cfg.ood)
                .map(|i| {
                    let class = g.rng.random_range(0..c);
                    let f = g.class_sample(class, 1.5, 0.7);
                    g.record(offset + i as i64, class as i64, None, f, 0.8)
                })
                .collect(),
            ShiftType::MultiLabel => {
                manifest.label_restriction = Some(BTreeSet::from([0, 1]));
                (0..cfg.ood)
                    .map(|i| {
                        let fa = g.class_sample(0, 0.9, 0.6);
                        let fb = g.class_sample(1, 0.9, 0.6);
                        let f = fa.iter().zip(fb).map(|(x, y)| x + y).collect();
                        g.record(offset + i as i64, -1, None, f, 0.6)
                    })
                    .collect()
            }
            ShiftType::InDistribution => unreachable!("not an OOD set"),
        };
        shifted.push(DatasetBundle::new(manifest, records)?);
        offset += 100_000;
    }
    datasets.push(test);
    datasets.extend(shifted);
    Ok(SynthFixture { head, datasets })
}
