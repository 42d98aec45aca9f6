//! Bayesian additive regression trees.
//!
//! The response is modeled as a sum of `m` shallow regression trees plus
//! Gaussian noise. Regularization comes from three priors: a depth prior
//! making deep splits unlikely (`alpha * (1+d)^-beta`), a zero-centered
//! normal on leaf values with standard deviation `0.5 / (k * sqrt(m))` under
//! the internal `[-0.5, 0.5]` response scaling, and an inverse-gamma on the
//! error variance whose scale is calibrated so the prior puts probability `q`
//! below the sample variance. Posterior draws come from the
//! Metropolis-within-Gibbs chain in [`sampler`]; predictions report the
//! posterior mean and an empirical credible interval, whose width is the
//! uncertainty signal consumed by the active-learning driver.

mod sampler;
pub mod tree;

pub use sampler::PosteriorDraw;
pub use tree::{BinaryMatrix, Tree};

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, InverseGamma, Normal};

use crate::error::{Error, Result};
use crate::rng::Key;
use sampler::ChainParams;

pub const DEFAULT_BURN_IN: usize = 1000;
pub const DEFAULT_RETAINED: usize = 1000;
pub const DEFAULT_CI_LEVEL: f64 = 0.90;

/// Sampler hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BartHyperparams {
    /// Number of trees.
    pub m: usize,
    /// Leaf-shrinkage factor; larger k narrows the leaf prior.
    pub k: f64,
    /// Prior quantile placed below the sample variance of the response.
    pub q: f64,
    /// Error-variance prior degrees of freedom.
    pub nu: f64,
    /// Depth-prior base.
    pub alpha: f64,
    /// Depth-prior power.
    pub beta: f64,
}

impl Default for BartHyperparams {
    fn default() -> Self {
        BartHyperparams {
            m: 50,
            k: 2.0,
            q: 0.90,
            nu: 3.0,
            alpha: 0.95,
            beta: 2.0,
        }
    }
}

impl BartHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::config("tree count m must be at least 1"));
        }
        if !(self.k > 0.0) {
            return Err(Error::config("k must be positive"));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::config("q must lie in (0, 1)"));
        }
        if !(self.nu > 0.0) {
            return Err(Error::config("nu must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("alpha must lie in (0, 1)"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("beta must be nonnegative"));
        }
        Ok(())
    }

    /// Leaf-prior standard deviation under the internal response scaling.
    pub fn sigma_mu(&self) -> f64 {
        0.5 / (self.k * (self.m as f64).sqrt())
    }
}

/// The hyperparameter grid searched during cross-validation.
pub fn default_grid() -> Vec<BartHyperparams> {
    let mut grid = Vec::with_capacity(72);
    for &m in &[50usize, 100, 200, 400] {
        for &k in &[2.0, 3.0, 5.0] {
            for &q in &[0.85, 0.95] {
                for &nu in &[3.0, 5.0, 7.0] {
                    grid.push(BartHyperparams { m, k, q, nu, alpha: 0.95, beta: 2.0 });
                }
            }
        }
    }
    grid
}

/// Point prediction with an empirical credible interval. The mean is the
/// posterior mean; the bounds are draw quantiles, so the mean is not
/// guaranteed to lie inside the interval pointwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorPrediction {
    pub mean: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// A fitted ensemble: retained posterior draws plus the response scaling.
pub struct BartEnsemble {
    pub hyperparams: BartHyperparams,
    pub y_min: f64,
    pub y_max: f64,
    pub burn_in: usize,
    /// Calibrated error-variance prior scale.
    pub lambda: f64,
    draws: Vec<PosteriorDraw>,
}

impl BartEnsemble {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn draws(&self) -> &[PosteriorDraw] {
        &self.draws
    }

    fn range(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Posterior-mean error variance on the original response scale.
    pub fn sigma2_hat(&self) -> f64 {
        let scaled =
            self.draws.iter().map(|d| d.sigma2).sum::<f64>() / self.draws.len().max(1) as f64;
        scaled * self.range() * self.range()
    }

    /// Predicts every row, reporting the posterior mean and the central
    /// credible interval at `ci_level`.
    pub fn predict(&self, x: &BinaryMatrix, ci_level: f64) -> Result<Vec<PosteriorPrediction>> {
        if x.n_rows() == 0 {
            return Ok(Vec::new());
        }
        self.check_width(x)?;
        if !(0.0..1.0).contains(&ci_level) {
            return Err(Error::config("ci_level must lie in [0, 1)"));
        }
        let k = self.draws.len();
        let q_lo = (1.0 - ci_level) / 2.0;
        let q_hi = (1.0 + ci_level) / 2.0;
        const BLOCK: usize = 256;

        let blocks: Vec<(usize, usize)> = (0..x.n_rows())
            .step_by(BLOCK)
            .map(|s| (s, (s + BLOCK).min(x.n_rows())))
            .collect();
        let out: Vec<Vec<PosteriorPrediction>> = blocks
            .par_iter()
            .map(|&(start, end)| {
                let width = end - start;
                // draw-major so the per-tree inner loop is contiguous
                let mut vals = vec![0.0f64; width * k];
                for (d, draw) in self.draws.iter().enumerate() {
                    let chunk = &mut vals[d * width..(d + 1) * width];
                    for tree in &draw.trees {
                        for (slot, row) in chunk.iter_mut().zip(start..end) {
                            *slot += tree.predict_row(x.row(row));
                        }
                    }
                }
                let mut scratch = vec![0.0f64; k];
                (0..width)
                    .map(|i| {
                        for d in 0..k {
                            scratch[d] = vals[d * width + i];
                        }
                        let mean = scratch.iter().sum::<f64>() / k as f64;
                        scratch.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                        PosteriorPrediction {
                            mean: self.unscale(mean),
                            ci_lower: self.unscale(quantile(&scratch, q_lo)),
                            ci_upper: self.unscale(quantile(&scratch, q_hi)),
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(out.into_iter().flatten().collect())
    }

    fn unscale(&self, v: f64) -> f64 {
        (v + 0.5) * self.range() + self.y_min
    }

    fn check_width(&self, x: &BinaryMatrix) -> Result<()> {
        let needed = self
            .draws
            .iter()
            .flat_map(|d| &d.trees)
            .flat_map(|t| &t.nodes)
            .filter_map(|n| match n {
                tree::Node::Split { var, .. } => Some(*var as usize + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        if x.n_cols() < needed {
            return Err(Error::Dimension { expected: needed, got: x.n_cols() });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = EnsembleDoc {
            format_version: ENSEMBLE_FORMAT_VERSION,
            hyperparams: self.hyperparams,
            y_min: self.y_min,
            y_max: self.y_max,
            burn_in: self.burn_in,
            lambda: self.lambda,
            draws: self
                .draws
                .iter()
                .map(|d| DrawDoc { sigma2: d.sigma2, trees: d.trees.clone() })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<BartEnsemble> {
        let doc: EnsembleDoc = serde_json::from_str(text)?;
        if doc.format_version != ENSEMBLE_FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported ensemble format version {}",
                doc.format_version
            )));
        }
        Ok(BartEnsemble {
            hyperparams: doc.hyperparams,
            y_min: doc.y_min,
            y_max: doc.y_max,
            burn_in: doc.burn_in,
            lambda: doc.lambda,
            draws: doc
                .draws
                .into_iter()
                .map(|d| PosteriorDraw { sigma2: d.sigma2, trees: d.trees })
                .collect(),
        })
    }
}

const ENSEMBLE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EnsembleDoc {
    format_version: u32,
    hyperparams: BartHyperparams,
    y_min: f64,
    y_max: f64,
    burn_in: usize,
    lambda: f64,
    draws: Vec<DrawDoc>,
}

#[derive(Serialize, Deserialize)]
struct DrawDoc {
    sigma2: f64,
    trees: Vec<Tree>,
}

/// Linear-interpolated empirical quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let k = sorted.len();
    if k == 1 {
        return sorted[0];
    }
    let pos = q * (k - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Calibrates the error-variance prior scale so that
/// `P(sigma^2 <= s2) = q` under `InvGamma(nu/2, nu*lambda/2)`.
/// Bisection on lambda to 1e-10 relative tolerance.
fn calibrate_lambda(q: f64, nu: f64, s2: f64) -> f64 {
    let s2 = s2.max(1e-12);
    let shape = nu / 2.0;
    let cdf_at = |lambda: f64| -> f64 {
        InverseGamma::new(shape, nu * lambda / 2.0)
            .expect("valid inverse-gamma parameters")
            .cdf(s2)
    };
    // cdf is monotone decreasing in lambda
    let mut lo = 1e-300;
    let mut hi = 1.0;
    while cdf_at(hi) > q {
        hi *= 2.0;
        if hi > 1e300 {
            return hi;
        }
    }
    while (hi - lo) > 1e-10 * hi {
        let mid = 0.5 * (lo + hi);
        if cdf_at(mid) > q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Fits the model. `y` is scaled internally to `[-0.5, 0.5]`; a constant
/// response degenerates gracefully (no residual variance, every prediction
/// equals the constant).
pub fn fit(
    x: &BinaryMatrix,
    y: &[f64],
    hp: &BartHyperparams,
    burn_in: usize,
    retained: usize,
    seed: u64,
) -> Result<BartEnsemble> {
    hp.validate()?;
    if x.n_rows() != y.len() {
        return Err(Error::Dimension { expected: x.n_rows(), got: y.len() });
    }
    if y.len() < 2 {
        return Err(Error::config("fit needs at least 2 rows"));
    }
    if retained == 0 {
        return Err(Error::config("retained draw count must be positive"));
    }

    let y_min = y.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = y_max - y_min;
    let y_scaled: Vec<f64> = if range > 0.0 {
        y.iter().map(|v| (v - y_min) / range - 0.5).collect()
    } else {
        vec![0.0; y.len()]
    };

    let s2 = sampler::sample_variance(&y_scaled);
    let lambda = calibrate_lambda(hp.q, hp.nu, s2);
    let params = ChainParams {
        sigma_mu2: hp.sigma_mu() * hp.sigma_mu(),
        alpha: hp.alpha,
        beta: hp.beta,
        nu: hp.nu,
        lambda,
    };
    let mut rng = Key::new(seed, "bart-fit").rng();
    let draws = sampler::run_chain(x, &y_scaled, hp.m, &params, burn_in, retained, &mut rng);
    Ok(BartEnsemble {
        hyperparams: *hp,
        y_min,
        y_max,
        burn_in,
        lambda,
        draws,
    })
}

/// Reduced sampler budget used per grid point during cross-validation; the
/// selection is a ranking task, the final fit re-runs at full budget.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CvBudget {
    pub burn_in: usize,
    pub retained: usize,
}

impl Default for CvBudget {
    fn default() -> Self {
        CvBudget { burn_in: 250, retained: 250 }
    }
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub best: BartHyperparams,
    /// Out-of-sample RMSE per grid point, in grid order.
    pub rmse: Vec<f64>,
}

/// K-fold out-of-sample RMSE over the grid; returns the argmin, ties broken
/// by grid order.
pub fn cv_grid_search(
    x: &BinaryMatrix,
    y: &[f64],
    grid: &[BartHyperparams],
    folds: usize,
    budget: CvBudget,
    seed: u64,
) -> Result<CvOutcome> {
    if grid.is_empty() {
        return Err(Error::config("hyperparameter grid is empty"));
    }
    if folds < 2 {
        return Err(Error::config("cross-validation needs at least 2 folds"));
    }
    if x.n_rows() < folds {
        return Err(Error::config(format!(
            "{} rows cannot be split into {folds} folds",
            x.n_rows()
        )));
    }

    let n = x.n_rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Key::new(seed, "cv-folds").rng());
    let fold_of = |i: usize| -> usize {
        // contiguous near-equal chunks of the shuffled order
        i * folds / n
    };
    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); folds];
    for (i, &row) in order.iter().enumerate() {
        fold_members[fold_of(i)].push(row);
    }

    let tasks: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..folds).map(move |f| (g, f)))
        .collect();
    let sses: Vec<(usize, f64, usize)> = tasks
        .par_iter()
        .map(|&(g, f)| {
            let test = &fold_members[f];
            let train: Vec<usize> = (0..folds)
                .filter(|&other| other != f)
                .flat_map(|other| fold_members[other].iter().copied())
                .collect();
            let x_train =
                BinaryMatrix::from_rows(&train.iter().map(|&r| row_bools(x, r)).collect::<Vec<_>>());
            let y_train: Vec<f64> = train.iter().map(|&r| y[r]).collect();
            let x_test =
                BinaryMatrix::from_rows(&test.iter().map(|&r| row_bools(x, r)).collect::<Vec<_>>());
            let fit_seed = Key::new(seed, "cv-fit").with(g as u64).with(f as u64).raw();
            let ens = fit(&x_train, &y_train, &grid[g], budget.burn_in, budget.retained, fit_seed)?;
            let preds = ens.predict(&x_test, DEFAULT_CI_LEVEL)?;
            let sse: f64 = preds
                .iter()
                .zip(test)
                .map(|(p, &r)| (p.mean - y[r]).powi(2))
                .sum();
            Ok((g, sse, test.len()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sse_per_grid = vec![0.0f64; grid.len()];
    let mut count_per_grid = vec![0usize; grid.len()];
    for (g, sse, cnt) in sses {
        sse_per_grid[g] += sse;
        count_per_grid[g] += cnt;
    }
    let rmse: Vec<f64> = sse_per_grid
        .iter()
        .zip(&count_per_grid)
        .map(|(sse, &cnt)| (sse / cnt as f64).sqrt())
        .collect();
    let mut best = 0;
    for (g, r) in rmse.iter().enumerate() {
        if *r < rmse[best] {
            best = g;
        }
    }
    Ok(CvOutcome { best: grid[best], rmse })
}

fn row_bools(x: &BinaryMatrix, r: usize) -> Vec<bool> {
    x.row(r).iter().map(|&b| b != 0).collect()
}

/// Residual diagnostics against the fitted noise model. Purely descriptive;
/// nothing in the pipeline branches on it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalitySummary {
    /// Residuals `y - posterior mean`, sorted ascending.
    pub residuals: Vec<f64>,
    /// Kolmogorov-Smirnov distance between the residual ECDF and
    /// `Normal(0, sigma_hat^2)`.
    pub ks_distance: f64,
    pub sigma_hat: f64,
}

pub fn residual_normality_summary(
    ens: &BartEnsemble,
    x_test: &BinaryMatrix,
    y_test: &[f64],
) -> Result<NormalitySummary> {
    if x_test.n_rows() != y_test.len() {
        return Err(Error::Dimension { expected: x_test.n_rows(), got: y_test.len() });
    }
    let preds = ens.predict(x_test, DEFAULT_CI_LEVEL)?;
    let mut residuals: Vec<f64> = preds
        .iter()
        .zip(y_test)
        .map(|(p, y)| y - p.mean)
        .collect();
    residuals.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let sigma_hat = ens.sigma2_hat().sqrt();
    let cdf: Box<dyn Fn(f64) -> f64> = if sigma_hat > 0.0 {
        let normal = Normal::new(0.0, sigma_hat).expect("positive sd");
        Box::new(move |r| normal.cdf(r))
    } else {
        Box::new(|r| if r >= 0.0 { 1.0 } else { 0.0 })
    };
    let n = residuals.len() as f64;
    let mut ks: f64 = 0.0;
    for (i, &r) in residuals.iter().enumerate() {
        let model = cdf(r);
        ks = ks
            .max((model - i as f64 / n).abs())
            .max(((i + 1) as f64 / n - model).abs());
    }
    Ok(NormalitySummary { residuals, ks_distance: ks, sigma_hat })
}

impl NormalitySummary {
    /// Emits `residual,ecdf,normal_cdf` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "residual,ecdf,normal_cdf")?;
        let n = self.residuals.len() as f64;
        let cdf = |r: f64| -> f64 {
            if self.sigma_hat > 0.0 {
                Normal::new(0.0, self.sigma_hat).unwrap().cdf(r)
            } else if r >= 0.0 {
                1.0
            } else {
                0.0
            }
        };
        for (i, &r) in self.residuals.iter().enumerate() {
            writeln!(w, "{r},{},{}", (i + 1) as f64 / n, cdf(r))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn xy_single_feature(n: usize) -> (BinaryMatrix, Vec<f64>) {
        let rows: Vec<Vec<bool>> = (0..n).map(|i| vec![i % 2 == 1]).collect();
        let y = rows.iter().map(|r| if r[0] { 1.0 } else { 0.0 }).collect();
        (BinaryMatrix::from_rows(&rows), y)
    }

    #[test]
    fn sigma_mu_formula() {
        for &(m, k) in &[(50usize, 2.0f64), (200, 3.0), (400, 5.0)] {
            let hp = BartHyperparams { m, k, ..BartHyperparams::default() };
            assert_relative_eq!(hp.sigma_mu(), 0.5 / (k * (m as f64).sqrt()));
        }
        // increasing k strictly decreases the leaf prior sd
        let a = BartHyperparams { k: 2.0, ..BartHyperparams::default() };
        let b = BartHyperparams { k: 3.0, ..BartHyperparams::default() };
        assert!(b.sigma_mu() < a.sigma_mu());
    }

    #[test]
    fn default_grid_matches_published_ranges() {
        let grid = default_grid();
        assert_eq!(grid.len(), 72);
        assert!(grid.iter().all(|h| h.alpha == 0.95 && h.beta == 2.0));
        assert!(grid.iter().any(|h| h.m == 400 && h.k == 5.0 && h.q == 0.95 && h.nu == 7.0));
    }

    #[test]
    fn lambda_calibration_hits_the_quantile() {
        let q = 0.9;
        let nu = 3.0;
        let s2 = 0.04;
        let lambda = calibrate_lambda(q, nu, s2);
        let dist = InverseGamma::new(nu / 2.0, nu * lambda / 2.0).unwrap();
        assert_relative_eq!(dist.cdf(s2), q, epsilon = 1e-8);
    }

    #[test]
    fn constant_response_collapses_to_the_constant() {
        let (x, _) = xy_single_feature(40);
        let y = vec![3.25; 40];
        let hp = BartHyperparams { m: 20, ..BartHyperparams::default() };
        let ens = fit(&x, &y, &hp, 100, 200, 11).unwrap();
        let preds = ens.predict(&x, 0.9).unwrap();
        for p in preds {
            assert_relative_eq!(p.mean, 3.25, epsilon = 1e-9);
            assert!(p.ci_upper - p.ci_lower <= 1e-3 * 3.25 + 1e-6);
        }
    }

    #[test]
    fn noiseless_single_feature_recovers_group_means() {
        let (x, y) = xy_single_feature(200);
        let hp = BartHyperparams { m: 50, k: 2.0, ..BartHyperparams::default() };
        let ens = fit(&x, &y, &hp, 500, 500, 4).unwrap();
        let probe = BinaryMatrix::from_rows(&[vec![false], vec![true]]);
        let preds = ens.predict(&probe, 0.9).unwrap();
        assert!(preds[0].mean.abs() < 0.05, "group 0 mean {}", preds[0].mean);
        assert!((preds[1].mean - 1.0).abs() < 0.05, "group 1 mean {}", preds[1].mean);
    }

    #[test]
    fn zero_ci_level_degenerates_to_the_median() {
        let (x, y) = xy_single_feature(60);
        let hp = BartHyperparams { m: 10, ..BartHyperparams::default() };
        let ens = fit(&x, &y, &hp, 50, 101, 2).unwrap();
        let preds = ens.predict(&x, 0.0).unwrap();
        for p in preds {
            assert_eq!(p.ci_lower, p.ci_upper);
        }
    }

    #[test]
    fn label_swap_symmetry() {
        // symmetric data: y = +c on x0 = 1, -c on x0 = 0, balanced
        let n = 200;
        let rows: Vec<Vec<bool>> = (0..n).map(|i| vec![i % 2 == 1, i % 3 == 0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| if r[0] { 0.8 } else { -0.8 }).collect();
        let x = BinaryMatrix::from_rows(&rows);
        let hp = BartHyperparams { m: 50, ..BartHyperparams::default() };
        let ens = fit(&x, &y, &hp, 1000, 1000, 13).unwrap();
        let probe = BinaryMatrix::from_rows(&[vec![false, false], vec![true, false]]);
        let preds = ens.predict(&probe, 0.9).unwrap();
        assert!(
            (preds[0].mean + preds[1].mean).abs() < 0.02,
            "asymmetry: {} vs {}",
            preds[0].mean,
            preds[1].mean
        );
    }

    #[test]
    fn fit_is_deterministic_for_fixed_seed() {
        let (x, y) = xy_single_feature(80);
        let hp = BartHyperparams { m: 10, ..BartHyperparams::default() };
        let a = fit(&x, &y, &hp, 50, 50, 21).unwrap();
        let b = fit(&x, &y, &hp, 50, 50, 21).unwrap();
        let pa = a.predict(&x, 0.9).unwrap();
        let pb = b.predict(&x, 0.9).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn ensemble_json_round_trip() {
        let (x, y) = xy_single_feature(50);
        let hp = BartHyperparams { m: 5, ..BartHyperparams::default() };
        let ens = fit(&x, &y, &hp, 20, 30, 8).unwrap();
        let json = ens.to_json().unwrap();
        assert!(json.contains("\"format_version\":1"));
        let back = BartEnsemble::from_json(&json).unwrap();
        let pa = ens.predict(&x, 0.9).unwrap();
        let pb = back.predict(&x, 0.9).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn predict_rejects_narrow_design() {
        let rows: Vec<Vec<bool>> = (0..40).map(|i| vec![i % 2 == 0, i % 3 == 0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| if r[1] { 1.0 } else { 0.0 }).collect();
        let x = BinaryMatrix::from_rows(&rows);
        let hp = BartHyperparams { m: 20, ..BartHyperparams::default() };
        let ens = fit(&x, &y, &hp, 200, 100, 3).unwrap();
        // the fit splits on var 1, so a 1-column probe must be rejected
        let narrow = BinaryMatrix::from_rows(&[vec![true]]);
        assert!(ens.predict(&narrow, 0.9).is_err());
    }

    #[test]
    fn cv_grid_search_argmin_contract() {
        let (x, y) = xy_single_feature(60);
        let grid = vec![
            BartHyperparams { m: 5, ..BartHyperparams::default() },
            BartHyperparams { m: 20, ..BartHyperparams::default() },
        ];
        let out = cv_grid_search(&x, &y, &grid, 5, CvBudget { burn_in: 50, retained: 50 }, 17)
            .unwrap();
        let best_rmse = out.rmse.iter().cloned().fold(f64::INFINITY, f64::min);
        let chosen = grid.iter().position(|h| *h == out.best).unwrap();
        assert_eq!(out.rmse[chosen], best_rmse);
    }

    #[test]
    fn cv_single_point_grid_returns_it() {
        let (x, y) = xy_single_feature(30);
        let grid = vec![BartHyperparams { m: 7, ..BartHyperparams::default() }];
        let out = cv_grid_search(&x, &y, &grid, 5, CvBudget { burn_in: 20, retained: 20 }, 1)
            .unwrap();
        assert_eq!(out.best, grid[0]);
        assert!(cv_grid_search(&x, &y, &[], 5, CvBudget::default(), 1).is_err());
    }

    #[test]
    fn normality_summary_identity_and_csv() {
        let (x, y) = xy_single_feature(50);
        let hp = BartHyperparams { m: 10, ..BartHyperparams::default() };
        let ens = fit(&x, &y, &hp, 100, 100, 5).unwrap();
        let preds = ens.predict(&x, 0.9).unwrap();
        let fitted: Vec<f64> = preds.iter().map(|p| p.mean).collect();
        let summary = residual_normality_summary(&ens, &x, &fitted).unwrap();
        assert!(summary.residuals.iter().all(|r| r.abs() < 1e-12));
        assert!(summary.ks_distance.is_finite());

        let real = residual_normality_summary(&ens, &x, &y).unwrap();
        let mut buf = Vec::new();
        real.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("residual,ecdf,normal_cdf"));
        assert_eq!(text.lines().count(), 51);
    }
}
