//! In-distribution statistics the detectors need: tied-covariance class
//! Gaussians per layer, the ViM principal subspace, DICE weight masks and the
//! ReAct clipping threshold.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, DatasetBundle, ModelHead};
use crate::matrix::RowMatrix;
use crate::npy::{self, NpyArray};
use crate::numeric::percentile_in_place;

pub const STATS_FILE: &str = "stats.json";

/// Class-conditional Gaussians with a shared precision matrix for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGaussianStats {
    pub layer_name: String,
    /// `C x D`.
    pub class_means: RowMatrix,
    /// `D x D`, symmetric positive definite.
    pub shared_precision: RowMatrix,
    /// The `lambda` actually added to the covariance diagonal.
    pub regularization: f64,
    /// Upper factor `U` with `P = U^T U`; distances become `|U f - U mu_c|^2`.
    whitening: RowMatrix,
    whitened_means: RowMatrix,
}

impl LayerGaussianStats {
    pub fn new(
        layer_name: impl Into<String>,
        class_means: RowMatrix,
        shared_precision: RowMatrix,
        regularization: f64,
    ) -> Result<Self> {
        let layer_name = layer_name.into();
        let d = class_means.cols();
        if shared_precision.rows() != d || shared_precision.cols() != d {
            return Err(Error::dimension(
                format!("precision of layer '{layer_name}'"),
                format!("{d}x{d}"),
                format!("{}x{}", shared_precision.rows(), shared_precision.cols()),
            ));
        }
        let chol = shared_precision
            .to_dmatrix()
            .cholesky()
            .ok_or_else(|| {
                Error::Numerical(format!("precision of layer '{layer_name}' is not positive definite"))
            })?;
        let upper = chol.l().transpose();
        let whitening = RowMatrix::from_vec(d, d, upper.transpose().as_slice().to_vec())?;
        let whitened_means = RowMatrix::from_rows(
            d,
            class_means.iter_rows().map(|mu| mat_vec(&whitening, mu)),
        )?;
        Ok(LayerGaussianStats {
            layer_name,
            class_means,
            shared_precision,
            regularization,
            whitening,
            whitened_means,
        })
    }

    pub fn dim(&self) -> usize {
        self.class_means.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_means.rows()
    }

    pub(crate) fn whiten(&self, features: &[f64]) -> Vec<f64> {
        mat_vec(&self.whitening, features)
    }

    pub(crate) fn whitened_means(&self) -> &RowMatrix {
        &self.whitened_means
    }
}

/// `A x` for a row-major matrix.
pub(crate) fn mat_vec(a: &RowMatrix, x: &[f64]) -> Vec<f64> {
    a.iter_rows()
        .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
        .collect()
}

/// Fits per-class means and the shared (tied) covariance of one layer and
/// returns its regularized inverse.
///
/// `lambda = lambda_scale * trace(cov) / D`; when the scatter is exactly zero
/// the trace term is replaced by 1 so the precision stays finite.
pub fn fit_class_gaussians(
    layer_name: &str,
    features: &RowMatrix,
    labels: &[i64],
    class_count: usize,
    lambda_scale: f64,
) -> Result<LayerGaussianStats> {
    let n = features.rows();
    let d = features.cols();
    if labels.len() != n {
        return Err(Error::dimension("labels", n, labels.len()));
    }
    if !(lambda_scale >= 0.0 && lambda_scale.is_finite()) {
        return Err(Error::Config(format!("lambda_scale {lambda_scale} must be >= 0")));
    }

    let mut sums = vec![0.0; class_count * d];
    let mut counts = vec![0usize; class_count];
    for (row, &label) in features.iter_rows().zip(labels) {
        let c = usize::try_from(label)
            .ok()
            .filter(|&c| c < class_count)
            .ok_or_else(|| Error::Fit(format!("label {label} outside [0, {class_count})")))?;
        counts[c] += 1;
        for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Fit(format!("class {c} has no samples in layer '{layer_name}'")));
    }
    for (c, &k) in counts.iter().enumerate() {
        sums[c * d..(c + 1) * d].iter_mut().for_each(|s| *s /= k as f64);
    }
    let means = RowMatrix::from_vec(class_count, d, sums)?;

    let mut centered = DMatrix::<f64>::zeros(n, d);
    for (i, (row, &label)) in features.iter_rows().zip(labels).enumerate() {
        let mu = means.row(label as usize);
        for j in 0..d {
            centered[(i, j)] = row[j] - mu[j];
        }
    }
    let mut cov = centered.tr_mul(&centered) / n as f64;
    let trace = cov.trace();
    let scale = if trace > 0.0 { trace / d as f64 } else { 1.0 };
    let lambda = lambda_scale * scale;
    for j in 0..d {
        cov[(j, j)] += lambda;
    }
    let chol = cov.cholesky().ok_or_else(|| {
        Error::Numerical(format!(
            "covariance of layer '{layer_name}' is singular after adding lambda = {lambda:e}"
        ))
    })?;
    let precision = symmetrize(chol.inverse());
    let precision = RowMatrix::from_vec(d, d, precision.transpose().as_slice().to_vec())?;
    LayerGaussianStats::new(layer_name, means, precision, lambda)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct VimStats {
    /// `u = -pinv(W) b`.
    pub offset: Vec<f64>,
    /// `D x D'`, orthonormal columns.
    pub principal_basis: RowMatrix,
    pub alpha: f64,
    pub principal_dim: usize,
}

impl VimStats {
    /// Norm of the component of `f - u` orthogonal to the principal subspace.
    pub fn residual_norm(&self, features: &[f64]) -> f64 {
        let x: Vec<f64> = features.iter().zip(&self.offset).map(|(f, u)| f - u).collect();
        let b = &self.principal_basis;
        let k = self.principal_dim;
        let mut coeff = vec![0.0; k];
        for (j, xj) in x.iter().enumerate() {
            for (c, bc) in coeff.iter_mut().zip(b.row(j)) {
                *c += bc * xj;
            }
        }
        x.iter()
            .enumerate()
            .map(|(j, xj)| {
                let proj: f64 = b.row(j).iter().zip(&coeff).map(|(bj, c)| bj * c).sum();
                (xj - proj).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }
}

pub fn default_vim_dim(feature_dim: usize) -> usize {
    (feature_dim / 2).min(512)
}

/// Fits the ViM offset, principal subspace and virtual-logit scale.
///
/// The subspace is spanned by the top eigenvectors of the second moment of
/// `f - u` (the offset acts as the center).
pub fn fit_vim_subspace(
    penult_features: &RowMatrix,
    head: &ModelHead,
    principal_dim: usize,
) -> Result<VimStats> {
    let n = penult_features.rows();
    let d = penult_features.cols();
    if d != head.feature_dim() {
        return Err(Error::dimension("penultimate features", head.feature_dim(), d));
    }
    if principal_dim == 0 || principal_dim >= d {
        return Err(Error::Config(format!(
            "ViM principal dimension {principal_dim} must lie in [1, {d})"
        )));
    }
    if n <= principal_dim {
        return Err(Error::Fit(format!(
            "ViM needs more than {principal_dim} samples, got {n}"
        )));
    }

    let w = head.weight.to_dmatrix();
    let pinv = w
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Numerical(format!("pseudo-inverse of head weight failed: {e}")))?;
    let offset: Vec<f64> = (-(pinv * DVector::from_column_slice(&head.bias)))
        .iter()
        .copied()
        .collect();

    let mut shifted = DMatrix::<f64>::zeros(n, d);
    for (i, row) in penult_features.iter_rows().enumerate() {
        for j in 0..d {
            shifted[(i, j)] = row[j] - offset[j];
        }
    }
    let moment = symmetrize(shifted.tr_mul(&shifted) / n as f64);
    let eigen = SymmetricEigen::new(moment);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]).then(a.cmp(&b)));
    let top = eigen.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eigen.eigenvalues[i] > top * 1e-12 && eigen.eigenvalues[i] > 0.0)
        .count();
    if rank < principal_dim {
        return Err(Error::Fit(format!(
            "feature second moment has rank {rank}, below the requested principal dimension {principal_dim}"
        )));
    }

    let mut basis = RowMatrix::zeros(d, principal_dim);
    for (k, &col) in order.iter().take(principal_dim).enumerate() {
        let v = eigen.eigenvectors.column(col);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            basis.row_mut(j)[k] = sign * v[j];
        }
    }

    let mut stats = VimStats {
        offset,
        principal_basis: basis,
        alpha: 0.0,
        principal_dim,
    };
    let mut max_logit_sum = 0.0;
    let mut residual_sum = 0.0;
    let mut norm_sum = 0.0;
    for row in penult_features.iter_rows() {
        let logits = head.logits(row);
        max_logit_sum += logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        residual_sum += stats.residual_norm(row);
        norm_sum += row
            .iter()
            .zip(&stats.offset)
            .map(|(f, u)| (f - u).powi(2))
            .sum::<f64>()
            .sqrt();
    }
    let mean_residual = residual_sum / n as f64;
    if mean_residual <= 1e-10 * (norm_sum / n as f64).max(f64::MIN_POSITIVE) {
        return Err(Error::Fit(
            "training residual norms vanish; the features lie inside the principal subspace".into(),
        ));
    }
    let alpha = (max_logit_sum / n as f64) / mean_residual;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Fit(format!(
            "virtual-logit scale {alpha} is not positive (mean max logit must be > 0)"
        )));
    }
    stats.alpha = alpha;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceMask {
    /// `C x D` row-major; `true` keeps the weight.
    pub mask: Vec<bool>,
    pub class_count: usize,
    pub feature_dim: usize,
    pub keep_fraction: f64,
}

impl DiceMask {
    pub fn kept_per_row(keep_fraction: f64, feature_dim: usize) -> usize {
        // Guard against p*D landing a hair above an integer through rounding.
        ((keep_fraction * feature_dim as f64 - 1e-9).ceil() as usize).clamp(1, feature_dim)
    }

    pub fn row(&self, c: usize) -> &[bool] {
        &self.mask[c * self.feature_dim..(c + 1) * self.feature_dim]
    }
}

/// Keeps, per class row, the `ceil(p * D)` weights with the largest
/// contribution `w_cj * mean_i(f_ij)`; ties go to the lower column.
pub fn fit_dice_masks(penult_features: &RowMatrix, head: &ModelHead, keep_fraction: f64) -> Result<DiceMask> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("DICE keep fraction {keep_fraction} must lie in (0, 1]")));
    }
    let d = head.feature_dim();
    if penult_features.cols() != d {
        return Err(Error::dimension("penultimate features", d, penult_features.cols()));
    }
    if penult_features.rows() == 0 {
        return Err(Error::Fit("DICE needs at least one sample".into()));
    }
    let n = penult_features.rows() as f64;
    let mut mean = vec![0.0; d];
    for row in penult_features.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let keep = DiceMask::kept_per_row(keep_fraction, d);
    let c = head.class_count();
    let mut mask = vec![false; c * d];
    for class in 0..c {
        let contrib: Vec<f64> = head.weight.row(class).iter().zip(&mean).map(|(w, m)| w * m).collect();
        let mut cols: Vec<usize> = (0..d).collect();
        cols.sort_by(|&a, &b| contrib[b].total_cmp(&contrib[a]).then(a.cmp(&b)));
        for &j in &cols[..keep] {
            mask[class * d + j] = true;
        }
    }
    Ok(DiceMask {
        mask,
        class_count: c,
        feature_dim: d,
        keep_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactThreshold {
    pub clip_value: f64,
    pub percentile: f64,
}

/// Clip value at the `q`-th percentile of all training activations.
pub fn fit_react_threshold(penult_features: &RowMatrix, percentile: f64) -> Result<ReactThreshold> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::Config(format!("ReAct percentile {percentile} must lie in (0, 100]")));
    }
    if penult_features.as_slice().is_empty() {
        return Err(Error::Fit("ReAct threshold needs at least one activation".into()));
    }
    let mut values = penult_features.as_slice().to_vec();
    Ok(ReactThreshold {
        clip_value: percentile_in_place(&mut values, percentile),
        percentile,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    pub lambda_scale: f64,
    /// Defaults to `min(512, D/2)`.
    pub vim_dim: Option<usize>,
    pub dice_keep: f64,
    pub react_percentile: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            lambda_scale: 1e-6,
            vim_dim: None,
            dice_keep: 0.7,
            react_percentile: 90.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub train_dataset: String,
    pub sample_count: usize,
    pub lambda_scale: f64,
    pub vim_dim: usize,
    pub dice_keep: f64,
    pub react_percentile: f64,
    pub seed: u64,
}

/// Everything the detectors read at scoring time.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedStats {
    /// In the manifest's layer order; the first is `MDS_f`, the last `MDS_l`.
    pub layers: Vec<LayerGaussianStats>,
    pub vim: VimStats,
    pub dice: DiceMask,
    pub react: ReactThreshold,
    pub head: ModelHead,
    pub meta: FitMetadata,
}

impl FittedStats {
    pub fn layer(&self, name: &str) -> Option<&LayerGaussianStats> {
        self.layers.iter().find(|l| l.layer_name == name)
    }

    pub fn first_layer(&self) -> &LayerGaussianStats {
        &self.layers[0]
    }

    pub fn last_layer(&self) -> &LayerGaussianStats {
        &self.layers[self.layers.len() - 1]
    }
}

/// Fits every statistic from a labelled in-distribution training bundle.
pub fn fit_stats(train: &DatasetBundle, head: &ModelHead, config: &StatsConfig, seed: u64) -> Result<FittedStats> {
    if train.is_empty() {
        return Err(Error::Fit(format!("training dataset '{}' is empty", train.id())));
    }
    if let Some(i) = train.records.iter().position(|r| !r.has_label()) {
        return Err(Error::Fit(format!(
            "training dataset '{}' has an unlabelled record at index {i}",
            train.id()
        )));
    }
    if head.class_count() != train.manifest.class_count {
        return Err(Error::dimension("model head classes", train.manifest.class_count, head.class_count()));
    }
    if !train.manifest.layer_names.contains(&head.penultimate_layer) {
        return Err(Error::Fit(format!(
            "penultimate layer '{}' is not among the dumped layers",
            head.penultimate_layer
        )));
    }
    let labels = train.labels();
    let c = train.manifest.class_count;
    let layers = train
        .manifest
        .layer_names
        .par_iter()
        .map(|name| {
            let features = train.feature_matrix(name)?;
            fit_class_gaussians(name, &features, &labels, c, config.lambda_scale)
        })
        .collect::<Result<Vec<_>>>()?;

    let penult = train.feature_matrix(&head.penultimate_layer)?;
    let vim_dim = config.vim_dim.unwrap_or_else(|| default_vim_dim(penult.cols()));
    let vim = fit_vim_subspace(&penult, head, vim_dim)?;
    let dice = fit_dice_masks(&penult, head, config.dice_keep)?;
    let react = fit_react_threshold(&penult, config.react_percentile)?;
    Ok(FittedStats {
        layers,
        vim,
        dice,
        react,
        head: head.clone(),
        meta: FitMetadata {
            train_dataset: train.id().to_string(),
            sample_count: train.len(),
            lambda_scale: config.lambda_scale,
            vim_dim,
            dice_keep: config.dice_keep,
            react_percentile: config.react_percentile,
            seed,
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsFile {
    format_version: u32,
    meta: FitMetadata,
    penultimate_layer: String,
    class_count: usize,
    layers: Vec<LayerEntry>,
    vim: VimEntry,
    dice_keep_fraction: f64,
    react: ReactThreshold,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    dim: usize,
    regularization: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct VimEntry {
    feature_dim: usize,
    principal_dim: usize,
    alpha: f64,
}

impl FittedStats {
    /// Writes `stats.json` plus one `float64` NPY file per array.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = self.head.class_count();
        let d = self.head.feature_dim();
        let file = StatsFile {
            format_version: 1,
            meta: self.meta.clone(),
            penultimate_layer: self.head.penultimate_layer.clone(),
            class_count: c,
            layers: self
                .layers
                .iter()
                .map(|l| LayerEntry {
                    name: l.layer_name.clone(),
                    dim: l.dim(),
                    regularization: l.regularization,
                })
                .collect(),
            vim: VimEntry {
                feature_dim: d,
                principal_dim: self.vim.principal_dim,
                alpha: self.vim.alpha,
            },
            dice_keep_fraction: self.dice.keep_fraction,
            react: self.react,
        };
        ingest::write_json(&dir.join(STATS_FILE), &file)?;
        for l in &self.layers {
            let dl = l.dim();
            npy::write_npy(
                &dir.join(format!("layer_{}_means.npy", l.layer_name)),
                &NpyArray::f64(vec![c, dl], l.class_means.as_slice().to_vec())?,
            )?;
            npy::write_npy(
                &dir.join(format!("layer_{}_precision.npy", l.layer_name)),
                &NpyArray::f64(vec![dl, dl], l.shared_precision.as_slice().to_vec())?,
            )?;
        }
        npy::write_npy(&dir.join("vim_offset.npy"), &NpyArray::f64(vec![d], self.vim.offset.clone())?)?;
        npy::write_npy(
            &dir.join("vim_basis.npy"),
            &NpyArray::f64(vec![d, self.vim.principal_dim], self.vim.principal_basis.as_slice().to_vec())?,
        )?;
        npy::write_npy(&dir.join("dice_mask.npy"), &NpyArray::bool(vec![c, d], self.dice.mask.clone())?)?;
        npy::write_npy(
            &dir.join("head_weight.npy"),
            &NpyArray::f64(vec![c, d], self.head.weight.as_slice().to_vec())?,
        )?;
        npy::write_npy(&dir.join("head_bias.npy"), &NpyArray::f64(vec![c], self.head.bias.clone())?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STATS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: StatsFile = serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let c = file.class_count;
        let d = file.vim.feature_dim;
        let head = ModelHead::new(
            RowMatrix::from_vec(c, d, npy::read_f64_array(&dir.join("head_weight.npy"), &[c, d])?)?,
            npy::read_f64_array(&dir.join("head_bias.npy"), &[c])?,
            file.penultimate_layer,
        )?;
        let layers = file
            .layers
            .iter()
            .map(|e| {
                let means = npy::read_f64_array(&dir.join(format!("layer_{}_means.npy", e.name)), &[c, e.dim])?;
                let prec =
                    npy::read_f64_array(&dir.join(format!("layer_{}_precision.npy", e.name)), &[e.dim, e.dim])?;
                LayerGaussianStats::new(
                    &e.name,
                    RowMatrix::from_vec(c, e.dim, means)?,
                    RowMatrix::from_vec(e.dim, e.dim, prec)?,
                    e.regularization,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        if layers.is_empty() {
            return Err(Error::format(path.display().to_string(), "no layers"));
        }
        let k = file.vim.principal_dim;
        let vim = VimStats {
            offset: npy::read_f64_array(&dir.join("vim_offset.npy"), &[d])?,
            principal_basis: RowMatrix::from_vec(d, k, npy::read_f64_array(&dir.join("vim_basis.npy"), &[d, k])?)?,
            alpha: file.vim.alpha,
            principal_dim: k,
        };
        let mask_path = dir.join("dice_mask.npy");
        let mask_arr = npy::read_npy(&mask_path)?;
        if mask_arr.shape != [c, d] {
            return Err(Error::dimension(mask_path.display().to_string(), format!("[{c}, {d}]"), format!("{:?}", mask_arr.shape)));
        }
        let mask = mask_arr
            .to_bool()
            .ok_or_else(|| Error::format(mask_path.display().to_string(), "expected a boolean array"))?;
        Ok(FittedStats {
            layers,
            vim,
            dice: DiceMask {
                mask,
                class_count: c,
                feature_dim: d,
                keep_fraction: file.dice_keep_fraction,
            },
            react: file.react,
            head,
            meta: file.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn head(c: usize, d: usize, rng: &mut ChaCha8Rng, zero_bias: bool) -> ModelHead {
        let w: Vec<f64> = (0..c * d).map(|_| rng.sample(StandardNormal)).collect();
        let b = if zero_bias { vec![0.0; c] } else { (0..c).map(|_| rng.sample(StandardNormal)).collect() };
        ModelHead::new(RowMatrix::from_vec(c, d, w).unwrap(), b, "penult").unwrap()
    }

    /// Gauss-Jordan inverse with partial pivoting, independent of the
    /// Cholesky route used by the fit.
    fn gauss_jordan_inverse(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = m.len();
        let mut a: Vec<Vec<f64>> = m
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = row.clone();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, pivot);
            let p = a[col][col];
            a[col].iter_mut().for_each(|v| *v /= p);
            for r in 0..n {
                if r != col {
                    let f = a[r][col];
                    let pivot_row = a[col].clone();
                    a[r].iter_mut().zip(&pivot_row).for_each(|(v, pv)| *v -= f * pv);
                }
            }
        }
        a.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    #[test]
    fn zero_scatter_gives_scaled_identity_precision() {
        let f = RowMatrix::from_vec(2, 2, vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let s = fit_class_gaussians("l", &f, &[0, 1], 2, 1e-6).unwrap();
        assert_eq!(s.class_means.row(0), &[0.0, 0.0]);
        assert_eq!(s.class_means.row(1), &[2.0, 0.0]);
        assert_eq!(s.regularization, 1e-6);
        let p = &s.shared_precision;
        assert!((p.get(0, 0) - 1e6).abs() < 1e-3 && (p.get(1, 1) - 1e6).abs() < 1e-3);
        assert_eq!(p.get(0, 1), 0.0);
    }

    #[test]
    fn one_dimensional_analytic_precision() {
        let f = RowMatrix::from_vec(2, 1, vec![-1.0, 1.0]).unwrap();
        let lam = 1e-6;
        let s = fit_class_gaussians("l", &f, &[0, 0], 1, lam).unwrap();
        assert_eq!(s.class_means.row(0), &[0.0]);
        assert!((s.shared_precision.get(0, 0) - 1.0 / (1.0 + lam)).abs() < 1e-15);
    }

    #[test]
    fn missing_class_is_a_fit_error() {
        let f = RowMatrix::from_vec(2, 1, vec![-1.0, 1.0]).unwrap();
        let err = fit_class_gaussians("l", &f, &[0, 0], 3, 1e-6).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn precision_matches_gauss_jordan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, d, c) = (500, 6, 4);
        let labels: Vec<i64> = (0..n).map(|i| (i % c) as i64).collect();
        let data: Vec<f64> = (0..n * d)
            .map(|k| rng.sample::<f64, _>(StandardNormal) + (labels[k / d] as f64) * 0.5 * ((k % d) as f64))
            .collect();
        let f = RowMatrix::from_vec(n, d, data).unwrap();
        let s = fit_class_gaussians("l", &f, &labels, c, 1e-6).unwrap();

        // Oracle: covariance by explicit loops, then Gauss-Jordan inverse.
        let mut means = vec![vec![0.0; d]; c];
        let mut counts = vec![0.0; c];
        for i in 0..n {
            let l = labels[i] as usize;
            counts[l] += 1.0;
            for j in 0..d {
                means[l][j] += f.get(i, j);
            }
        }
        for l in 0..c {
            means[l].iter_mut().for_each(|m| *m /= counts[l]);
        }
        let mut cov = vec![vec![0.0; d]; d];
        for i in 0..n {
            let mu = &means[labels[i] as usize];
            for a in 0..d {
                for b in 0..d {
                    cov[a][b] += (f.get(i, a) - mu[a]) * (f.get(i, b) - mu[b]) / n as f64;
                }
            }
        }
        let lam = 1e-6 * (0..d).map(|j| cov[j][j]).sum::<f64>() / d as f64;
        for j in 0..d {
            cov[j][j] += lam;
        }
        let inv = gauss_jordan_inverse(&cov);
        assert!((s.regularization - lam).abs() < 1e-18);
        for a in 0..d {
            for b in 0..d {
                assert!((s.shared_precision.get(a, b) - inv[a][b]).abs() < 1e-8);
                assert_eq!(s.shared_precision.get(a, b), s.shared_precision.get(b, a));
            }
        }
    }

    #[test]
    fn class_gaussians_are_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d) = (200, 4);
        let labels: Vec<i64> = (0..n).map(|i| (i % 3) as i64).collect();
        let data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let f = RowMatrix::from_vec(n, d, data).unwrap();
        let a = fit_class_gaussians("l", &f, &labels, 3, 1e-6).unwrap();
        let perm: Vec<usize> = (0..n).rev().collect();
        let pf = f.select_rows(&perm);
        let pl: Vec<i64> = perm.iter().map(|&i| labels[i]).collect();
        let b = fit_class_gaussians("l", &pf, &pl, 3, 1e-6).unwrap();
        for (x, y) in a.shared_precision.as_slice().iter().zip(b.shared_precision.as_slice()) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }

    #[test]
    fn vim_zero_bias_gives_zero_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = head(4, 6, &mut rng, true);
        let data: Vec<f64> = (0..100 * 6).map(|_| rng.sample::<f64, _>(StandardNormal) + 2.0).collect();
        let f = RowMatrix::from_vec(100, 6, data).unwrap();
        // Not asserting alpha's sign here: only the offset.
        let pinv = h.weight.to_dmatrix().pseudo_inverse(1e-12).unwrap();
        let u = -(pinv * DVector::from_column_slice(&h.bias));
        assert!(u.iter().all(|&v| v == 0.0));
        if let Ok(v) = fit_vim_subspace(&f, &h, 2) {
            assert!(v.offset.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn vim_rejects_planar_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = head(3, 4, &mut rng, true);
        // Features confined to span{e0, e1}.
        let data: Vec<f64> = (0..200)
            .flat_map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                [a + 3.0, b + 3.0, 0.0, 0.0]
            })
            .collect();
        let f = RowMatrix::from_vec(200, 4, data).unwrap();
        let err = fit_vim_subspace(&f, &h, 2).unwrap_err();
        assert!(matches!(err, Error::Fit(_)), "{err}");
    }

    #[test]
    fn vim_reports_insufficient_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = head(3, 4, &mut rng, true);
        let data: Vec<f64> = (0..50).flat_map(|i| [i as f64, 0.0, 0.0, 0.0]).collect();
        let f = RowMatrix::from_vec(50, 4, data).unwrap();
        let err = fit_vim_subspace(&f, &h, 2).unwrap_err();
        assert!(err.to_string().contains("rank 1"), "{err}");
    }

    /// Cyclic Jacobi eigensolver: the independent oracle for the subspace.
    fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[k][p];
                        let vkq = v[k][q];
                        v[k][p] = c * vkp - s * vkq;
                        v[k][q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[i][i]).collect(), v)
    }

    #[test]
    fn vim_subspace_matches_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, d, k) = (1000, 8, 3);
        let h = head(5, d, &mut rng, false);
        let scales = [5.0, 4.0, 3.0, 1.0, 0.8, 0.6, 0.4, 0.2];
        let data: Vec<f64> = (0..n * d)
            .map(|i| 1.0 + scales[i % d] * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let f = RowMatrix::from_vec(n, d, data).unwrap();
        let v = match fit_vim_subspace(&f, &h, k) {
            Ok(v) => v,
            Err(Error::Fit(msg)) if msg.contains("not positive") => return,
            Err(e) => panic!("{e}"),
        };
        // Orthonormality.
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = (0..d).map(|j| v.principal_basis.get(j, a) * v.principal_basis.get(j, b)).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8);
            }
        }
        let mut m = vec![vec![0.0; d]; d];
        for i in 0..n {
            for a in 0..d {
                for b in 0..d {
                    m[a][b] += (f.get(i, a) - v.offset[a]) * (f.get(i, b) - v.offset[b]) / n as f64;
                }
            }
        }
        let (vals, vecs) = jacobi_eigen(m);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        // Compare projectors: principal angles vanish iff P1 == P2.
        for a in 0..d {
            for b in 0..d {
                let p1: f64 = (0..k).map(|c| v.principal_basis.get(a, c) * v.principal_basis.get(b, c)).sum();
                let p2: f64 = order[..k].iter().map(|&c| vecs[a][c] * vecs[b][c]).sum();
                assert!((p1 - p2).abs() < 1e-6, "projector mismatch at ({a},{b}): {p1} vs {p2}");
            }
        }
        assert!(v.alpha > 0.0);
    }

    #[test]
    fn dice_mask_examples() {
        let h = ModelHead::new(RowMatrix::from_vec(1, 4, vec![3.0, 1.0, 2.0, 0.0]).unwrap(), vec![0.0], "p").unwrap();
        let f = RowMatrix::from_vec(1, 4, vec![1.0; 4]).unwrap();
        let m = fit_dice_masks(&f, &h, 0.5).unwrap();
        assert_eq!(m.mask, vec![true, false, true, false]);
        let all = fit_dice_masks(&f, &h, 1.0).unwrap();
        assert!(all.mask.iter().all(|&b| b));
        assert!(fit_dice_masks(&f, &h, 0.0).is_err());
    }

    #[test]
    fn dice_mask_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, d) = (7, 23);
        let h = head(c, d, &mut rng, false);
        let data: Vec<f64> = (0..50 * d).map(|_| rng.random::<f64>()).collect();
        let f = RowMatrix::from_vec(50, d, data).unwrap();
        for p in [0.1, 0.3, 0.7, 0.95] {
            let m = fit_dice_masks(&f, &h, p).unwrap();
            let keep = (p * d as f64).ceil() as usize;
            for class in 0..c {
                let mean: Vec<f64> = (0..d).map(|j| f.column(j).iter().sum::<f64>() / 50.0).collect();
                let mut contrib: Vec<(f64, usize)> = (0..d).map(|j| (h.weight.get(class, j) * mean[j], j)).collect();
                contrib.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                let mut expected = vec![false; d];
                contrib[..keep].iter().for_each(|&(_, j)| expected[j] = true);
                assert_eq!(m.row(class), &expected[..]);
                assert_eq!(m.row(class).iter().filter(|&&b| b).count(), keep);
            }
        }
    }

    #[test]
    fn react_percentile_examples() {
        let f = RowMatrix::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(fit_react_threshold(&f, 50.0).unwrap().clip_value, 1.5);
        assert_eq!(fit_react_threshold(&f, 100.0).unwrap().clip_value, 3.0);
        assert!(fit_react_threshold(&RowMatrix::zeros(0, 3), 90.0).is_err());
    }

    #[test]
    fn react_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let f = RowMatrix::from_vec(100, 100, data.clone()).unwrap();
        let c = fit_react_threshold(&f, 90.0).unwrap().clip_value;
        let mut sorted = data;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank: f64 = 0.9 * 9999.0;
        let lo = rank.floor() as usize;
        let expected = sorted[lo] + (rank - lo as f64) * (sorted[lo + 1] - sorted[lo]);
        assert!((c - expected).abs() < 1e-12);
    }
}
