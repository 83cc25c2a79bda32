//! Full-covariance Gaussian mixture fitted by expectation-maximization.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::RowMatrix;
use crate::numeric::logsumexp;

/// Smallest per-dimension standard deviation used for standardization.
pub const STD_FLOOR: f64 = 1e-12;
/// Mixture weight below which a component counts as collapsed.
pub const COLLAPSE_WEIGHT: f64 = 1e-8;

/// Per-dimension z-scoring applied before the mixture is fitted or queried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Standardization {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply_matrix(&self, x: &RowMatrix) -> RowMatrix {
        let rows: Vec<Vec<f64>> = x.iter_rows().map(|r| self.apply(r)).collect();
        RowMatrix::from_rows(x.cols(), rows).expect("row widths are preserved")
    }

    /// `sum_k ln std_k`, the log-Jacobian between raw and standardized space.
    pub fn log_scale(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }
}

/// Column means and standard deviations (`1/N` normalizer), with the standard
/// deviation floored at [`STD_FLOOR`].
pub fn standardize_fit(scores: &RowMatrix) -> Result<Standardization> {
    let n = scores.rows();
    if n == 0 {
        return Err(Error::Fit("cannot standardize an empty score matrix".into()));
    }
    let k = scores.cols();
    let mut mean = vec![0.0; k];
    for row in scores.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; k];
    for row in scores.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| (s / n as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(Standardization { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub n_components: usize,
    pub seed: u64,
    /// Added to every covariance diagonal after each M-step.
    pub reg: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
}

impl GmmOptions {
    pub fn new(n_components: usize, seed: u64) -> Self {
        GmmOptions {
            n_components,
            seed,
            ..Default::default()
        }
    }
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            n_components: 1,
            seed: 0,
            reg: 1e-6,
            tol: 1e-6,
            max_iter: 500,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFitInfo {
    pub seed: u64,
    pub reg: f64,
    pub tol: f64,
    pub restarts: usize,
    /// Restart whose result was kept.
    pub best_restart: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_loglik: f64,
    /// Collapsed components re-seeded during the kept run.
    pub reinitializations: usize,
    /// Average log-likelihood after every E-step of the kept run.
    pub history: Vec<f64>,
    /// Positions in `history` that directly follow a re-seeding, where EM
    /// gives no monotonicity guarantee.
    pub reinit_at: Vec<usize>,
}

/// Cholesky factor of one covariance with its log normalizer.
#[derive(Debug, Clone, PartialEq)]
struct Factor {
    /// Lower triangle, row-major `K x K`.
    lower: Vec<f64>,
    /// `-K/2 ln(2 pi) - sum ln L_ii`.
    log_norm: f64,
}

impl Factor {
    fn new(cov: &RowMatrix) -> Option<Self> {
        let k = cov.rows();
        let chol = cov.to_dmatrix().cholesky()?;
        let l = chol.l();
        let mut lower = vec![0.0; k * k];
        let mut log_det_half = 0.0;
        for i in 0..k {
            for j in 0..=i {
                lower[i * k + j] = l[(i, j)];
            }
            log_det_half += l[(i, i)].ln();
        }
        if !log_det_half.is_finite() {
            return None;
        }
        Some(Factor {
            lower,
            log_norm: -0.5 * k as f64 * (2.0 * PI).ln() - log_det_half,
        })
    }

    fn log_density(&self, x: &[f64], mean: &[f64], scratch: &mut [f64]) -> f64 {
        let k = mean.len();
        let mut maha = 0.0;
        for i in 0..k {
            let row = &self.lower[i * k..i * k + i];
            let mut acc = x[i] - mean[i];
            for (l, y) in row.iter().zip(scratch.iter()) {
                acc -= l * y;
            }
            let yi = acc / self.lower[i * k + i];
            scratch[i] = yi;
            maha += yi * yi;
        }
        self.log_norm - 0.5 * maha
    }
}

/// A fitted mixture in standardized score space.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    /// `n x K`.
    pub means: RowMatrix,
    pub covariances: Vec<RowMatrix>,
    pub standardization: Standardization,
    pub info: Option<GmmFitInfo>,
    factors: Vec<Factor>,
}

impl GmmModel {
    pub fn new(
        weights: Vec<f64>,
        means: RowMatrix,
        covariances: Vec<RowMatrix>,
        standardization: Standardization,
    ) -> Result<Self> {
        let n = weights.len();
        let k = means.cols();
        if n == 0 || means.rows() != n || covariances.len() != n {
            return Err(Error::dimension(
                "gmm",
                format!("{n} components"),
                format!("{} means, {} covariances", means.rows(), covariances.len()),
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Numerical("mixture weights are not on the simplex".into()));
        }
        if standardization.mean.len() != k || standardization.std.len() != k {
            return Err(Error::dimension("standardization", k, standardization.mean.len()));
        }
        if standardization.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Numerical("standardization scale must be positive".into()));
        }
        let factors = covariances
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if c.rows() != k || c.cols() != k {
                    return Err(Error::dimension(format!("covariance {i}"), format!("{k}x{k}"), format!("{}x{}", c.rows(), c.cols())));
                }
                Factor::new(c).ok_or_else(|| Error::Numerical(format!("covariance {i} is not positive definite")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GmmModel {
            weights,
            means,
            covariances,
            standardization,
            info: None,
            factors,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Per-component `ln pi_i + ln N(z; mu_i, Sigma_i)` for a standardized
    /// point.
    fn component_log_probs(&self, z: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = self.weights[i].ln() + self.factors[i].log_density(z, self.means.row(i), scratch);
        }
    }

    /// Log-likelihood of an already standardized point.
    pub fn log_likelihood_standardized(&self, z: &[f64]) -> f64 {
        let mut lp = vec![0.0; self.n_components()];
        let mut scratch = vec![0.0; self.dim()];
        self.component_log_probs(z, &mut lp, &mut scratch);
        logsumexp(&lp)
    }

    /// Ensemble detection score: standardizes `x` and returns the mixture
    /// log-density in standardized space (higher = more in-distribution).
    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        self.log_likelihood_standardized(&self.standardization.apply(x))
    }

    /// Log-density of `x` in raw score space (includes the Jacobian of the
    /// standardization).
    pub fn raw_log_density(&self, x: &[f64]) -> f64 {
        self.log_likelihood(x) - self.standardization.log_scale()
    }

    pub fn score_rows(&self, x: &RowMatrix) -> Vec<f64> {
        (0..x.rows())
            .into_par_iter()
            .map(|i| self.log_likelihood(x.row(i)))
            .collect()
    }
}

/// Fits a mixture to standardized data. The returned model carries an
/// identity standardization; see [`fit_with_standardization`] for raw scores.
pub fn gmm_fit(x: &RowMatrix, opts: &GmmOptions) -> Result<GmmModel> {
    let n = opts.n_components;
    if n == 0 {
        return Err(Error::Config("a mixture needs at least one component".into()));
    }
    if x.cols() == 0 {
        return Err(Error::Fit("score vectors must have at least one dimension".into()));
    }
    if x.rows() < 10 * n {
        return Err(Error::Fit(format!(
            "{} samples are too few for {n} components (need at least {})",
            x.rows(),
            10 * n
        )));
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("training scores contain non-finite values".into()));
    }
    if !(opts.reg >= 0.0) || !(opts.tol >= 0.0) || opts.max_iter == 0 {
        return Err(Error::Config("GMM reg and tol must be >= 0 and max_iter > 0".into()));
    }

    let mut best: Option<GmmModel> = None;
    let mut failures = Vec::new();
    for restart in 0..opts.restarts.max(1) {
        let seed = opts.seed.wrapping_add((restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        match run_em(x, opts, seed) {
            Ok(mut model) => {
                if let Some(info) = model.info.as_mut() {
                    info.best_restart = restart;
                }
                let ll = model.info.as_ref().map_or(f64::NEG_INFINITY, |i| i.final_loglik);
                let better = best
                    .as_ref()
                    .and_then(|b| b.info.as_ref())
                    .is_none_or(|b| ll > b.final_loglik);
                if better {
                    best = Some(model);
                }
            }
            Err(e) => {
                log::warn!("EM restart {restart} failed: {e}");
                failures.push(format!("restart {restart}: {e}"))
            }
        }
    }
    best.ok_or_else(|| Error::Fit(format!("EM failed on every restart: {}", failures.join("; "))))
}

/// Standardizes raw score vectors, fits the mixture and stores the
/// standardization in the model.
pub fn fit_with_standardization(raw: &RowMatrix, opts: &GmmOptions) -> Result<GmmModel> {
    let standardization = standardize_fit(raw)?;
    let z = standardization.apply_matrix(raw);
    let mut model = gmm_fit(&z, opts)?;
    model.standardization = standardization;
    Ok(model)
}

/// k-means++ seeding: the first center uniformly, then proportional to the
/// squared distance to the nearest chosen center.
fn kmeans_plus_plus(x: &RowMatrix, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rows = x.rows();
    let mut centers = vec![rng.random_range(0..rows)];
    let mut nearest: Vec<f64> = (0..rows).map(|i| sq_dist(x.row(i), x.row(centers[0]))).collect();
    while centers.len() < n {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = rows - 1;
            for (i, d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..rows)
        };
        centers.push(pick);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct EmState {
    weights: Vec<f64>,
    means: RowMatrix,
    covariances: Vec<RowMatrix>,
}

fn run_em(x: &RowMatrix, opts: &GmmOptions, seed: u64) -> Result<GmmModel> {
    let (rows, k, n) = (x.rows(), x.cols(), opts.n_components);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_plus_plus(x, n, &mut rng);

    // One hard-assignment pass initializes the responsibilities.
    let mut resp = vec![0.0; rows * n];
    let mut point_ll = vec![0.0; rows];
    for i in 0..rows {
        let (best, dist) = centers
            .iter()
            .enumerate()
            .map(|(c, &idx)| (c, sq_dist(x.row(i), x.row(idx))))
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
        resp[i * n + best] = 1.0;
        point_ll[i] = -dist;
    }

    let pooled = pooled_covariance(x, opts.reg);
    let max_reinit = 10 * n;
    let mut reinitializations = 0;
    let mut reinit_at = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;

    let (mut state, reseeded) = m_step(x, &resp, n, opts.reg, &point_ll, &pooled);
    reinitializations += reseeded;
    let mut iterations = 0;
    loop {
        let model = GmmModel::new(
            state.weights.clone(),
            state.means.clone(),
            state.covariances.clone(),
            Standardization::identity(k),
        )
        .map_err(|e| Error::Numerical(format!("EM iteration {iterations}: {e}")))?;
        let avg = e_step(&model, x, &mut resp, &mut point_ll);
        if !avg.is_finite() {
            return Err(Error::Numerical(format!("log-likelihood became {avg} at iteration {iterations}")));
        }
        history.push(avg);
        iterations += 1;
        if let [.., prev, last] = history[..] {
            if (last - prev).abs() <= opts.tol * prev.abs().max(1.0) {
                converged = true;
            }
        }
        if converged || iterations >= opts.max_iter {
            let mut model = model;
            model.info = Some(GmmFitInfo {
                seed: opts.seed,
                reg: opts.reg,
                tol: opts.tol,
                restarts: opts.restarts.max(1),
                best_restart: 0,
                iterations,
                converged,
                final_loglik: avg,
                reinitializations,
                history,
                reinit_at,
            });
            return Ok(model);
        }
        let (next, reseeded) = m_step(x, &resp, n, opts.reg, &point_ll, &pooled);
        if reseeded > 0 {
            reinitializations += reseeded;
            reinit_at.push(history.len());
            if reinitializations > max_reinit {
                return Err(Error::Fit(format!(
                    "components kept collapsing ({reinitializations} re-seedings)"
                )));
            }
        }
        state = next;
    }
}

/// Computes responsibilities in place and returns the average
/// log-likelihood. Points are processed independently; the sum runs in index
/// order.
fn e_step(model: &GmmModel, x: &RowMatrix, resp: &mut [f64], point_ll: &mut [f64]) -> f64 {
    let n = model.n_components();
    let k = model.dim();
    resp.par_chunks_mut(n)
        .zip(point_ll.par_iter_mut())
        .enumerate()
        .for_each_init(
            || vec![0.0; k],
            |scratch, (i, (r, ll))| {
                model.component_log_probs(x.row(i), r, scratch);
                let total = logsumexp(r);
                for v in r.iter_mut() {
                    *v = (*v - total).exp();
                }
                *ll = total;
            },
        );
    point_ll.iter().sum::<f64>() / x.rows() as f64
}

fn pooled_covariance(x: &RowMatrix, reg: f64) -> RowMatrix {
    let (rows, k) = (x.rows(), x.cols());
    let mut mean = vec![0.0; k];
    for row in x.iter_rows() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut cov = RowMatrix::zeros(k, k);
    accumulate_scatter(x, &mean, |_| 1.0, &mut cov);
    finish_covariance(cov, rows as f64, reg)
}

fn accumulate_scatter(x: &RowMatrix, mean: &[f64], weight: impl Fn(usize) -> f64, out: &mut RowMatrix) {
    let k = mean.len();
    let mut diff = vec![0.0; k];
    for (i, row) in x.iter_rows().enumerate() {
        let w = weight(i);
        if w == 0.0 {
            continue;
        }
        for j in 0..k {
            diff[j] = row[j] - mean[j];
        }
        for a in 0..k {
            let wa = w * diff[a];
            let out_row = out.row_mut(a);
            for b in 0..=a {
                out_row[b] += wa * diff[b];
            }
        }
    }
}

/// Divides the lower-triangle scatter by `norm`, mirrors it and adds `reg I`.
fn finish_covariance(mut cov: RowMatrix, norm: f64, reg: f64) -> RowMatrix {
    let k = cov.rows();
    for a in 0..k {
        for b in 0..=a {
            let v = cov.get(a, b) / norm;
            cov.row_mut(a)[b] = v;
            cov.row_mut(b)[a] = v;
        }
        cov.row_mut(a)[a] += reg;
    }
    cov
}

/// Maximization step. Components whose weight drops below
/// [`COLLAPSE_WEIGHT`] are re-seeded at the worst-explained points; the count
/// of re-seeded components is returned.
fn m_step(x: &RowMatrix, resp: &[f64], n: usize, reg: f64, point_ll: &[f64], pooled: &RowMatrix) -> (EmState, usize) {
    let (rows, k) = (x.rows(), x.cols());
    let mut mass = vec![0.0; n];
    for r in resp.chunks_exact(n) {
        mass.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    let total: f64 = mass.iter().sum();

    let collapsed: Vec<usize> = (0..n).filter(|&c| mass[c] / total < COLLAPSE_WEIGHT).collect();
    let fits: Vec<(Vec<f64>, RowMatrix)> = (0..n)
        .into_par_iter()
        .map(|c| {
            if mass[c] / total < COLLAPSE_WEIGHT {
                return (vec![0.0; k], pooled.clone());
            }
            let mut mean = vec![0.0; k];
            for (i, row) in x.iter_rows().enumerate() {
                let w = resp[i * n + c];
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += w * v);
            }
            mean.iter_mut().for_each(|m| *m /= mass[c]);
            let mut cov = RowMatrix::zeros(k, k);
            accumulate_scatter(x, &mean, |i| resp[i * n + c], &mut cov);
            (mean.clone(), finish_covariance(cov, mass[c], reg))
        })
        .collect();

    let mut means = RowMatrix::zeros(n, k);
    let mut covariances = Vec::with_capacity(n);
    for (c, (mean, cov)) in fits.into_iter().enumerate() {
        means.row_mut(c).copy_from_slice(&mean);
        covariances.push(cov);
    }
    let mut weights: Vec<f64> = mass.iter().map(|m| m / total).collect();

    if !collapsed.is_empty() {
        let mut worst: Vec<usize> = (0..rows).collect();
        worst.sort_by(|&a, &b| point_ll[a].total_cmp(&point_ll[b]).then(a.cmp(&b)));
        for (slot, &c) in collapsed.iter().enumerate() {
            let idx = worst[slot % rows];
            means.row_mut(c).copy_from_slice(x.row(idx));
            weights[c] = 1.0 / rows as f64;
        }
    }
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    (
        EmState {
            weights,
            means,
            covariances,
        },
        collapsed.len(),
    )
}

/// Covariances as a dense `n x K x K` block, for serialization.
pub(crate) fn stack_covariances(model: &GmmModel) -> Vec<f64> {
    model
        .covariances
        .iter()
        .flat_map(|c| c.as_slice().iter().copied())
        .collect()
}
