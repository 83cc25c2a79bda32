//! On-disk dataset container: one directory per dataset holding a
//! `manifest.json` and one NPY file per field, plus the classifier head at the
//! container root.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::RowMatrix;
use crate::npy::{self, NpyArray};
use crate::numeric::argmax;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";

/// Kind of distribution shift a dataset represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftType {
    InDistribution,
    NovelClasses,
    Adversarial,
    Synthetic,
    Corruption,
    MultiLabel,
}

impl ShiftType {
    pub const ALL: [ShiftType; 6] = [
        ShiftType::InDistribution,
        ShiftType::NovelClasses,
        ShiftType::Adversarial,
        ShiftType::Synthetic,
        ShiftType::Corruption,
        ShiftType::MultiLabel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShiftType::InDistribution => "in_distribution",
            ShiftType::NovelClasses => "novel_classes",
            ShiftType::Adversarial => "adversarial",
            ShiftType::Synthetic => "synthetic",
            ShiftType::Corruption => "corruption",
            ShiftType::MultiLabel => "multi_label",
        }
    }
}

impl fmt::Display for ShiftType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShiftType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShiftType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown shift type '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub shift_type: ShiftType,
    pub record_count: usize,
    pub layer_names: Vec<String>,
    pub class_count: usize,
    pub has_aux_odin: bool,
    pub has_aux_views: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_dataset_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_restriction: Option<BTreeSet<usize>>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let file = format!("{}/{MANIFEST_FILE}", self.dataset_id);
        let bad = |msg: String| Err(Error::format(&file, msg));
        if self.layer_names.is_empty() {
            return bad("layer_names must not be empty".into());
        }
        for name in &self.layer_names {
            if name.is_empty()
                || !name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
            {
                return bad(format!("layer name '{name}' is not file-name safe"));
            }
        }
        let unique: BTreeSet<&String> = self.layer_names.iter().collect();
        if unique.len() != self.layer_names.len() {
            return bad("layer_names contains duplicates".into());
        }
        if self.class_count == 0 {
            return bad("class_count must be positive".into());
        }
        match (self.shift_type, &self.origin_dataset_id) {
            (ShiftType::Adversarial, None) => {
                return bad("adversarial datasets must name origin_dataset_id".into())
            }
            (t, Some(_)) if t != ShiftType::Adversarial => {
                return bad("origin_dataset_id is only valid for adversarial datasets".into())
            }
            _ => {}
        }
        if self.has_aux_views && self.view_count.is_none_or(|v| v < 2) {
            return bad("has_aux_views requires view_count >= 2".into());
        }
        if let Some(classes) = &self.label_restriction {
            if let Some(&c) = classes.iter().find(|&&c| c >= self.class_count) {
                return bad(format!("label_restriction class {c} out of range"));
            }
        }
        Ok(())
    }
}

/// One sample's network artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: i64,
    /// Position of the clean counterpart inside the origin dataset.
    pub origin_id: Option<i64>,
    /// Ground-truth class or `-1` when unknown.
    pub label: i64,
    pub prediction: usize,
    pub logits: Vec<f64>,
    pub features: BTreeMap<String, Vec<f64>>,
    pub odin_logits: Option<Vec<f64>>,
    pub view_features: Option<Vec<Vec<f64>>>,
}

impl SampleRecord {
    pub fn has_label(&self) -> bool {
        self.label >= 0
    }

    /// `Some(prediction == label)` when a label exists.
    pub fn is_correct(&self) -> Option<bool> {
        self.has_label()
            .then(|| self.prediction as i64 == self.label)
    }

    pub fn layer(&self, name: &str) -> Result<&[f64]> {
        self.features
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Capability {
                score: format!("features[{name}]"),
                reason: format!("sample {} has no layer '{name}'", self.sample_id),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub manifest: DatasetManifest,
    pub records: Vec<SampleRecord>,
    /// Non-fatal conditions, e.g. an empty label restriction.
    pub warnings: Vec<String>,
}

impl DatasetBundle {
    /// Builds a bundle from in-memory records and validates every invariant
    /// the loader enforces. `record_count` is taken from `records`.
    pub fn new(mut manifest: DatasetManifest, records: Vec<SampleRecord>) -> Result<Self> {
        manifest.record_count = records.len();
        manifest.validate()?;
        validate_records(&manifest, &records)?;
        Ok(DatasetBundle {
            manifest,
            records,
            warnings: Vec::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.manifest.dataset_id
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Features of one layer stacked into an `N x D` matrix.
    pub fn feature_matrix(&self, layer: &str) -> Result<RowMatrix> {
        let dim = self
            .records
            .first()
            .map(|r| r.layer(layer).map(<[f64]>::len))
            .transpose()?
            .unwrap_or(0);
        RowMatrix::from_rows(
            dim,
            self.records
                .iter()
                .map(|r| r.layer(layer))
                .collect::<Result<Vec<_>>>()?,
        )
    }

    pub fn labels(&self) -> Vec<i64> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Fraction of labelled records predicted correctly.
    pub fn accuracy(&self) -> Option<f64> {
        let flags: Vec<bool> = self.records.iter().filter_map(|r| r.is_correct()).collect();
        if flags.is_empty() {
            return None;
        }
        Some(flags.iter().filter(|&&c| c).count() as f64 / flags.len() as f64)
    }
}

fn validate_records(manifest: &DatasetManifest, records: &[SampleRecord]) -> Result<()> {
    let c = manifest.class_count;
    let mut seen = HashSet::with_capacity(records.len());
    let mut dims: BTreeMap<&str, usize> = BTreeMap::new();
    let mut view_dim = None;

    for (i, r) in records.iter().enumerate() {
        let data_err = |message: String| Error::Data { sample: i, message };
        if !seen.insert(r.sample_id) {
            return Err(data_err(format!("duplicate sample_id {}", r.sample_id)));
        }
        if r.label < -1 || r.label >= c as i64 {
            return Err(data_err(format!("label {} outside [-1, {c})", r.label)));
        }
        if r.logits.len() != c {
            return Err(Error::dimension(
                format!("{}: logits of sample {i}", manifest.dataset_id),
                c,
                r.logits.len(),
            ));
        }
        if !all_finite(&r.logits) {
            return Err(data_err("non-finite logits".into()));
        }
        let expected = argmax(&r.logits);
        if r.prediction != expected {
            return Err(data_err(format!(
                "stored prediction {} disagrees with argmax(logits) = {expected}",
                r.prediction
            )));
        }
        for name in &manifest.layer_names {
            let f = r.features.get(name).ok_or_else(|| {
                data_err(format!("missing features for layer '{name}'"))
            })?;
            let d = *dims.entry(name.as_str()).or_insert(f.len());
            if f.len() != d {
                return Err(Error::dimension(
                    format!("{}: features_{name} of sample {i}", manifest.dataset_id),
                    d,
                    f.len(),
                ));
            }
            if !all_finite(f) {
                return Err(data_err(format!("non-finite feature in layer '{name}'")));
            }
        }
        if r.features.len() != manifest.layer_names.len() {
            return Err(data_err("features contain layers absent from the manifest".into()));
        }
        match (&r.odin_logits, manifest.has_aux_odin) {
            (Some(o), true) => {
                if o.len() != c {
                    return Err(Error::dimension(
                        format!("{}: odin_logits of sample {i}", manifest.dataset_id),
                        c,
                        o.len(),
                    ));
                }
                if !all_finite(o) {
                    return Err(data_err("non-finite odin_logits".into()));
                }
            }
            (None, false) => {}
            _ => return Err(data_err("odin_logits presence disagrees with manifest".into())),
        }
        match (&r.view_features, manifest.has_aux_views) {
            (Some(views), true) => {
                if Some(views.len()) != manifest.view_count {
                    return Err(Error::dimension(
                        format!("{}: view_features of sample {i}", manifest.dataset_id),
                        format!("{:?} views", manifest.view_count),
                        format!("{} views", views.len()),
                    ));
                }
                for v in views {
                    let d = *view_dim.get_or_insert(v.len());
                    if v.len() != d {
                        return Err(Error::dimension(
                            format!("{}: view_features of sample {i}", manifest.dataset_id),
                            d,
                            v.len(),
                        ));
                    }
                    if !all_finite(v) {
                        return Err(data_err("non-finite view features".into()));
                    }
                }
            }
            (None, false) => {}
            _ => return Err(data_err("view_features presence disagrees with manifest".into())),
        }
        let needs_origin = manifest.shift_type == ShiftType::Adversarial;
        if r.origin_id.is_some() != needs_origin {
            return Err(data_err("origin_id presence disagrees with shift type".into()));
        }
    }
    Ok(())
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::format(path.display().to_string(), "file is missing")
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads an array whose first dimension must be `n` and whose rank is
/// `rank`; returns the shape and values.
fn read_rows(path: &Path, n: usize, rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let array = npy::read_npy(path)?;
    if array.shape.len() != rank || array.shape[0] != n {
        return Err(Error::dimension(
            path.display().to_string(),
            format!("rank {rank} with first dimension {n}"),
            format!("{:?}", array.shape),
        ));
    }
    let values = array
        .to_f64()
        .ok_or_else(|| Error::format(path.display().to_string(), "expected a float array"))?;
    Ok((array.shape, values))
}

/// Loads `root/<dataset_id>/` and verifies every record invariant.
pub fn load_dataset(root: &Path, dataset_id: &str) -> Result<DatasetBundle> {
    let dir = root.join(dataset_id);
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    manifest.validate()?;
    if manifest.dataset_id != dataset_id {
        return Err(Error::format(
            dir.join(MANIFEST_FILE).display().to_string(),
            format!("dataset_id '{}' does not match directory '{dataset_id}'", manifest.dataset_id),
        ));
    }
    let n = manifest.record_count;
    let c = manifest.class_count;

    let logits = npy::read_f64_array(&dir.join("logits.npy"), &[n, c])?;
    let labels = npy::read_i64_array(&dir.join("labels.npy"), &[n])?;
    let predictions = npy::read_i64_array(&dir.join("predictions.npy"), &[n])?;
    let sample_ids = npy::read_i64_array(&dir.join("sample_ids.npy"), &[n])?;
    let origin_ids = if manifest.shift_type == ShiftType::Adversarial {
        Some(npy::read_i64_array(&dir.join("origin_ids.npy"), &[n])?)
    } else {
        None
    };

    let mut layers = Vec::with_capacity(manifest.layer_names.len());
    for name in &manifest.layer_names {
        let (shape, values) = read_rows(&dir.join(format!("features_{name}.npy")), n, 2)?;
        layers.push((name.clone(), shape[1], values));
    }
    let odin = if manifest.has_aux_odin {
        Some(npy::read_f64_array(&dir.join("odin_logits.npy"), &[n, c])?)
    } else {
        None
    };
    let views = if manifest.has_aux_views {
        let path = dir.join("view_features.npy");
        let (shape, values) = read_rows(&path, n, 3)?;
        let v = manifest.view_count.unwrap_or(0);
        if shape[1] != v {
            return Err(Error::dimension(
                path.display().to_string(),
                format!("[{n}, {v}, D]"),
                format!("{shape:?}"),
            ));
        }
        Some((shape[2], values))
    } else {
        None
    };

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let prediction = usize::try_from(predictions[i]).map_err(|_| Error::Data {
            sample: i,
            message: format!("negative prediction {}", predictions[i]),
        })?;
        let features = layers
            .iter()
            .map(|(name, d, values)| (name.clone(), values[i * d..(i + 1) * d].to_vec()))
            .collect();
        let view_features = views.as_ref().map(|(d, values)| {
            let v = manifest.view_count.unwrap_or(0);
            let base = i * v * d;
            (0..v)
                .map(|j| values[base + j * d..base + (j + 1) * d].to_vec())
                .collect()
        });
        records.push(SampleRecord {
            sample_id: sample_ids[i],
            origin_id: origin_ids.as_ref().map(|o| o[i]),
            label: labels[i],
            prediction,
            logits: logits[i * c..(i + 1) * c].to_vec(),
            features,
            odin_logits: odin.as_ref().map(|o| o[i * c..(i + 1) * c].to_vec()),
            view_features,
        });
    }
    validate_records(&manifest, &records)?;
    Ok(DatasetBundle {
        manifest,
        records,
        warnings: Vec::new(),
    })
}

fn to_f32(values: impl IntoIterator<Item = f64>) -> Vec<f32> {
    values.into_iter().map(|v| v as f32).collect()
}

/// Writes a bundle in the container layout. Float fields are stored as
/// `float32`, so a bundle that was itself loaded from disk round-trips
/// byte-for-byte.
pub fn write_bundle(root: &Path, bundle: &DatasetBundle) -> Result<()> {
    let m = &bundle.manifest;
    let dir = root.join(&m.dataset_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let n = bundle.records.len();
    let c = m.class_count;
    let mut manifest = m.clone();
    manifest.record_count = n;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;

    let recs = &bundle.records;
    npy::write_npy(
        &dir.join("logits.npy"),
        &NpyArray::f32(vec![n, c], to_f32(recs.iter().flat_map(|r| r.logits.iter().copied())))?,
    )?;
    npy::write_npy(
        &dir.join("labels.npy"),
        &NpyArray::i64(vec![n], recs.iter().map(|r| r.label).collect())?,
    )?;
    npy::write_npy(
        &dir.join("predictions.npy"),
        &NpyArray::i64(vec![n], recs.iter().map(|r| r.prediction as i64).collect())?,
    )?;
    npy::write_npy(
        &dir.join("sample_ids.npy"),
        &NpyArray::i64(vec![n], recs.iter().map(|r| r.sample_id).collect())?,
    )?;
    if m.shift_type == ShiftType::Adversarial {
        npy::write_npy(
            &dir.join("origin_ids.npy"),
            &NpyArray::i64(vec![n], recs.iter().map(|r| r.origin_id.unwrap_or(-1)).collect())?,
        )?;
    }
    for name in &m.layer_names {
        let d = recs.first().and_then(|r| r.features.get(name)).map_or(0, Vec::len);
        let values = recs
            .iter()
            .flat_map(|r| r.features.get(name).into_iter().flatten().copied());
        npy::write_npy(
            &dir.join(format!("features_{name}.npy")),
            &NpyArray::f32(vec![n, d], to_f32(values))?,
        )?;
    }
    if m.has_aux_odin {
        let values = recs
            .iter()
            .flat_map(|r| r.odin_logits.iter().flatten().copied());
        npy::write_npy(
            &dir.join("odin_logits.npy"),
            &NpyArray::f32(vec![n, c], to_f32(values))?,
        )?;
    }
    if m.has_aux_views {
        let v = m.view_count.unwrap_or(0);
        let d = recs
            .first()
            .and_then(|r| r.view_features.as_ref())
            .and_then(|views| views.first())
            .map_or(0, Vec::len);
        let values = recs
            .iter()
            .flat_map(|r| r.view_features.iter().flatten().flatten().copied());
        npy::write_npy(
            &dir.join("view_features.npy"),
            &NpyArray::f32(vec![n, v, d], to_f32(values))?,
        )?;
    }
    Ok(())
}

/// Final linear classifier `logits = W f + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHead {
    /// `C x D`, one row per class.
    pub weight: RowMatrix,
    pub bias: Vec<f64>,
    pub penultimate_layer: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeadMeta {
    penultimate_layer: String,
    class_count: usize,
    feature_dim: usize,
}

impl ModelHead {
    pub fn new(weight: RowMatrix, bias: Vec<f64>, penultimate_layer: impl Into<String>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::dimension("head_bias", weight.rows(), bias.len()));
        }
        if !all_finite(weight.as_slice()) || !all_finite(&bias) {
            return Err(Error::format("head", "non-finite head parameters"));
        }
        Ok(ModelHead {
            weight,
            bias,
            penultimate_layer: penultimate_layer.into(),
        })
    }

    pub fn class_count(&self) -> usize {
        self.weight.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols()
    }

    /// `W f + b`, accumulating each row left to right before adding the bias.
    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        linear_logits(self, features, None, None)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let meta: ModelHeadMeta = read_json(&root.join(MODEL_FILE))?;
        let (c, d) = (meta.class_count, meta.feature_dim);
        let weight = npy::read_f64_array(&root.join("head_weight.npy"), &[c, d])?;
        let bias = npy::read_f64_array(&root.join("head_bias.npy"), &[c])?;
        ModelHead::new(RowMatrix::from_vec(c, d, weight)?, bias, meta.penultimate_layer)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        write_json(
            &root.join(MODEL_FILE),
            &ModelHeadMeta {
                penultimate_layer: self.penultimate_layer.clone(),
                class_count: self.class_count(),
                feature_dim: self.feature_dim(),
            },
        )?;
        npy::write_npy(
            &root.join("head_weight.npy"),
            &NpyArray::f32(
                vec![self.class_count(), self.feature_dim()],
                to_f32(self.weight.as_slice().iter().copied()),
            )?,
        )?;
        npy::write_npy(
            &root.join("head_bias.npy"),
            &NpyArray::f32(vec![self.class_count()], to_f32(self.bias.iter().copied()))?,
        )
    }
}

/// Head logits with optional activation clipping (`min(f_j, clip)`) and an
/// optional per-class weight mask (`mask[c * D + j]`). With no clip and no
/// mask, or with `clip = +inf` and an all-true mask, the arithmetic is
/// identical to the plain head.
pub(crate) fn linear_logits(
    head: &ModelHead,
    features: &[f64],
    clip: Option<f64>,
    mask: Option<&[bool]>,
) -> Vec<f64> {
    let d = head.feature_dim();
    (0..head.class_count())
        .map(|c| {
            let row = head.weight.row(c);
            let mut acc = 0.0;
            for j in 0..d {
                if let Some(m) = mask {
                    if !m[c * d + j] {
                        continue;
                    }
                }
                let f = match clip {
                    Some(limit) => features[j].min(limit),
                    None => features[j],
                };
                acc += row[j] * f;
            }
            acc + head.bias[c]
        })
        .collect()
}

/// An attacked record with its clean counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterpartPair {
    pub ood_index: usize,
    pub clean_index: usize,
    /// Clean sample classified correctly and the attacked one misclassified.
    pub successful_attack: bool,
}

#[derive(Debug, Clone)]
pub struct PairedBundle<'a> {
    pub ood: &'a DatasetBundle,
    pub clean: &'a DatasetBundle,
    pub pairs: Vec<CounterpartPair>,
}

impl PairedBundle<'_> {
    pub fn successful(&self) -> impl Iterator<Item = &CounterpartPair> + '_ {
        self.pairs.iter().filter(|p| p.successful_attack)
    }
}

/// Pairs every adversarial record with the clean record it was derived from.
pub fn link_counterparts<'a>(
    ood: &'a DatasetBundle,
    clean: &'a DatasetBundle,
) -> Result<PairedBundle<'a>> {
    if ood.manifest.shift_type != ShiftType::Adversarial {
        return Err(Error::Linkage {
            sample_id: -1,
            message: format!("dataset '{}' is not adversarial", ood.id()),
        });
    }
    if ood.manifest.origin_dataset_id.as_deref() != Some(clean.id()) {
        return Err(Error::Linkage {
            sample_id: -1,
            message: format!(
                "dataset '{}' originates from {:?}, not '{}'",
                ood.id(),
                ood.manifest.origin_dataset_id,
                clean.id()
            ),
        });
    }
    let pairs = ood
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let origin = r.origin_id.ok_or_else(|| Error::Linkage {
                sample_id: r.sample_id,
                message: "missing origin_id".into(),
            })?;
            let clean_index = usize::try_from(origin)
                .ok()
                .filter(|&j| j < clean.len())
                .ok_or_else(|| Error::Linkage {
                    sample_id: r.sample_id,
                    message: format!(
                        "origin_id {origin} does not resolve in '{}' ({} records)",
                        clean.id(),
                        clean.len()
                    ),
                })?;
            let c = &clean.records[clean_index];
            let successful_attack =
                c.has_label() && c.prediction as i64 == c.label && r.prediction as i64 != c.label;
            Ok(CounterpartPair {
                ood_index: i,
                clean_index,
                successful_attack,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedBundle { ood, clean, pairs })
}

/// Keeps only records whose label is in `classes`. An empty result is
/// returned with a warning rather than an error.
pub fn restrict_by_labels(bundle: &DatasetBundle, classes: &BTreeSet<usize>) -> Result<DatasetBundle> {
    if classes.is_empty() {
        return Err(Error::Config("label restriction must name at least one class".into()));
    }
    let records: Vec<SampleRecord> = bundle
        .records
        .iter()
        .filter(|r| r.label >= 0 && classes.contains(&(r.label as usize)))
        .cloned()
        .collect();
    let mut manifest = bundle.manifest.clone();
    manifest.record_count = records.len();
    let mut warnings = bundle.warnings.clone();
    if records.is_empty() {
        warnings.push(format!(
            "restriction of '{}' to classes {classes:?} left no records",
            bundle.id()
        ));
    }
    Ok(DatasetBundle {
        manifest,
        records,
        warnings,
    })
}
