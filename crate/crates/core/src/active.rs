//! Adaptive surrogate-driven failure-probability estimation.
//!
//! The driver samples a Monte Carlo population sized for the assumed failure
//! probability, evaluates a small initial training set, and then alternates:
//! fit the tree ensemble, score every population member with the learning
//! function `U' = |g_hat| / (credible-interval width)`, and evaluate the
//! batch with the smallest scores. Small `U'` marks samples that are close
//! to the failure boundary and/or carry wide posterior uncertainty — the
//! samples worth spending the expensive limit-state calls on.
//!
//! Convergence tracks `delta_i`, the relative change in the expected batch
//! score between consecutive iterations. The `delta` sequence is fitted by a
//! single-term exponential `A * exp(B * i)`; training stops once both the
//! observed and fitted `delta` fall below `eps1` while the fitted curve's
//! slope is negative and within `eps2` of flat. The failure-probability
//! estimate counts predicted failures over the population, substituting true
//! outcomes wherever they are known, so running to exhaustion reproduces the
//! crude Monte Carlo estimate exactly.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::bart::{
    self, cv_grid_search, default_grid, BartEnsemble, BartHyperparams, BinaryMatrix, CvBudget,
};
use crate::error::{Error, Result};
use crate::limitstate::{ComponentStateVector, FailureModel, LimitState, MemoizedLimitState};
use crate::rng::Key;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnrConfig {
    /// Assumed failure probability used to size the population and the
    /// initial training set; checked (and halved) after convergence.
    pub assumed_pf: f64,
    /// Target coefficient of variation of the crude estimator over the
    /// population.
    pub target_cov: f64,
    /// Required probability that the initial set holds at least one failure.
    pub pr_at_least_one: f64,
    /// Batch size as a fraction of the initial sample size.
    pub batch_fraction: f64,
    /// Re-run the hyperparameter search every this many iterations.
    pub reopt_period: u32,
    pub eps1: f64,
    pub eps2: f64,
    pub ci_level: f64,
    /// Population size is rounded up to a multiple of this.
    pub population_rounding: u64,
    pub seed: u64,
    pub burn_in: usize,
    pub retained: usize,
    pub cv_budget: CvBudget,
    pub cv_folds: usize,
    /// Safety cap on assumption halvings when the estimate keeps coming in
    /// below the assumed failure probability.
    pub max_assumption_halvings: u32,
    /// Hyperparameter grid; `None` means the standard grid.
    pub grid: Option<Vec<BartHyperparams>>,
}

impl Default for AnrConfig {
    fn default() -> Self {
        AnrConfig {
            assumed_pf: 0.01,
            target_cov: 0.05,
            pr_at_least_one: 0.9,
            batch_fraction: 0.2,
            reopt_period: 50,
            eps1: 0.002,
            eps2: 0.01,
            ci_level: 0.90,
            population_rounding: 1000,
            seed: 0,
            burn_in: bart::DEFAULT_BURN_IN,
            retained: bart::DEFAULT_RETAINED,
            cv_budget: CvBudget::default(),
            cv_folds: 5,
            max_assumption_halvings: 12,
            grid: None,
        }
    }
}

impl AnrConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("assumed_pf", self.assumed_pf),
            ("pr_at_least_one", self.pr_at_least_one),
            ("ci_level", self.ci_level),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.target_cov > 0.0) {
            return Err(Error::config("target_cov must be positive"));
        }
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 1.0) {
            return Err(Error::config("batch_fraction must lie in (0, 1]"));
        }
        if self.reopt_period < 1 {
            return Err(Error::config("reopt_period must be at least 1"));
        }
        if self.population_rounding < 1 {
            return Err(Error::config("population_rounding must be at least 1"));
        }
        if !(self.eps1 >= 0.0 && self.eps2 > 0.0) {
            return Err(Error::config("eps1 must be nonnegative and eps2 positive"));
        }
        Ok(())
    }
}

/// Crude Monte Carlo sample count needed for the assumed failure probability
/// at the target coefficient of variation, rounded up to a multiple of
/// `rounding`.
pub fn required_population_size(assumed_pf: f64, cov: f64, rounding: u64) -> u64 {
    let raw = (1.0 - assumed_pf) / (assumed_pf * cov * cov);
    let units = (raw / rounding as f64) * (1.0 - 1e-12);
    units.ceil() as u64 * rounding
}

/// Initial training-set size: large enough to hold at least one failure with
/// probability `pr`, and never below the input dimension.
pub fn initial_sample_size(assumed_pf: f64, pr: f64, n_rv: usize) -> usize {
    let raw = (1.0 - pr).ln() / (1.0 - assumed_pf).ln();
    let n = (raw * (1.0 - 1e-12)).ceil() as usize;
    n.max(n_rv)
}

/// `P(N >= k)` for `N ~ Binomial(n_s, assumed_pf)`.
pub fn prob_at_least_k_failures(n_s: u64, assumed_pf: f64, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let dist = Binomial::new(assumed_pf, n_s).expect("valid binomial parameters");
    1.0 - dist.cdf(k - 1)
}

/// Learning function: distance to the failure boundary in units of posterior
/// uncertainty. A zero-width interval yields `f64::MAX`, which the batch
/// selection never picks.
pub fn u_prime(g_hat: f64, ci_lower: f64, ci_upper: f64) -> f64 {
    let width = ci_upper - ci_lower;
    if width > 0.0 {
        g_hat.abs() / width
    } else {
        f64::MAX
    }
}

/// Indices of the `batch_size` smallest scores among unevaluated samples;
/// ties break toward the smaller index. Returns fewer when the population is
/// almost exhausted.
pub fn select_batch(uprimes: &[f64], evaluated: &[bool], batch_size: usize) -> Vec<usize> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut candidates: Vec<usize> = (0..uprimes.len()).filter(|&i| !evaluated[i]).collect();
    candidates.sort_by(|&a, &b| {
        uprimes[a]
            .partial_cmp(&uprimes[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    candidates.truncate(batch_size);
    candidates
}

/// Relative change of the expected batch score between iterations.
pub fn delta_i(e_curr: f64, e_prev: f64, e_omega: f64) -> f64 {
    if e_omega > 0.0 && e_omega.is_finite() {
        (e_curr - e_prev).abs() / e_omega
    } else {
        f64::INFINITY
    }
}

/// Least-squares fit of `ln(delta)` on the iteration index: returns `(A, B)`
/// of `delta_hat = A * exp(B * i)`. Deltas are floored at 1e-12 before the
/// log. Needs at least two points.
pub fn fit_exponential(deltas: &[(u32, f64)]) -> Option<(f64, f64)> {
    if deltas.len() < 2 {
        return None;
    }
    let n = deltas.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(i, d) in deltas {
        let x = i as f64;
        let y = d.max(1e-12).ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return None;
    }
    let b = (n * sxy - sx * sy) / denom;
    let a = ((sy - b * sx) / n).exp();
    Some((a, b))
}

/// Stop when both the observed and fitted `delta` are below `eps1` and the
/// fitted curve's slope at the current iteration is negative but within
/// `eps2` of flat.
pub fn stopping_criterion(
    delta: f64,
    delta_hat: f64,
    a: f64,
    b: f64,
    eps1: f64,
    eps2: f64,
    iteration: u32,
) -> bool {
    let slope = a * b * (b * iteration as f64).exp();
    delta.max(delta_hat) < eps1 && slope > -eps2 && slope < 0.0
}

/// Population fraction with `g <= 0`, substituting known true outcomes for
/// predictions.
pub fn estimate_pf(pred_g: &[f64], known_indicator: &[Option<bool>]) -> f64 {
    assert_eq!(pred_g.len(), known_indicator.len());
    let failures = pred_g
        .iter()
        .zip(known_indicator)
        .filter(|(g, known)| match known {
            Some(flag) => *flag,
            None => **g <= 0.0,
        })
        .count();
    failures as f64 / pred_g.len() as f64
}

/// One row of the adaptive-training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    /// Cumulative unique limit-state calls made by this run.
    pub unique_calls: u64,
    /// Training rows including duplicate states.
    pub training_rows: usize,
    pub e_uprime_batch: f64,
    pub e_uprime_omega: f64,
    pub delta: Option<f64>,
    pub delta_hat: Option<f64>,
    pub fit_a: Option<f64>,
    pub fit_b: Option<f64>,
    /// Slope of the fitted curve at this iteration, the quantity the stop
    /// rule checks.
    pub fitted_slope: Option<f64>,
    /// The iteration-independent slope-change ratio `exp(-B) - 1`, logged for
    /// comparison with the slope condition.
    pub literal_slope_ratio: Option<f64>,
    pub pf_hat: f64,
    pub hyperparams: BartHyperparams,
    pub stop: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    PopulationExhausted,
    AssumptionUnresolved,
}

#[derive(Serialize)]
pub struct RunResult {
    pub pf: f64,
    pub unique_calls: u64,
    pub population_size: usize,
    pub termination: Termination,
    pub final_assumed_pf: f64,
    pub batch_size: usize,
    pub initial_samples: usize,
    pub history: Vec<IterationRecord>,
    pub final_hyperparams: BartHyperparams,
    #[serde(skip)]
    pub ensemble: Option<BartEnsemble>,
}

/// Population table with distinct-state deduplication: predictions run once
/// per distinct state, rows map onto them.
pub(crate) struct Population {
    pub states: Vec<ComponentStateVector>,
    pub distinct_of_row: Vec<u32>,
    pub distinct: Vec<ComponentStateVector>,
    index: HashMap<ComponentStateVector, u32>,
}

impl Population {
    pub fn with_size(n: usize, fm: &FailureModel, seed: u64) -> Population {
        let mut pop = Population {
            states: Vec::new(),
            distinct_of_row: Vec::new(),
            distinct: Vec::new(),
            index: HashMap::new(),
        };
        pop.extend_to(n, fm, seed);
        pop
    }

    /// Appends fresh samples until the population holds `n`; sample `s` is
    /// always drawn from the same substream, so extending preserves the
    /// prefix.
    pub fn extend_to(&mut self, n: usize, fm: &FailureModel, seed: u64) {
        if n <= self.states.len() {
            return;
        }
        let all = crate::limitstate::sample_population(n, fm, seed);
        for state in all.into_iter().skip(self.states.len()) {
            let next_id = self.distinct.len() as u32;
            let id = *self.index.entry(state.clone()).or_insert_with(|| {
                self.distinct.push(state.clone());
                next_id
            });
            self.distinct_of_row.push(id);
            self.states.push(state);
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn distinct_matrix(&self) -> BinaryMatrix {
        let rows: Vec<&[bool]> = self.distinct.iter().map(|s| s.bits()).collect();
        BinaryMatrix::from_rows(&rows)
    }
}

/// Shared bookkeeping for the adaptive and passive surrogate loops.
pub(crate) struct SurrogateLoop<'a> {
    pub ls: &'a MemoizedLimitState,
    pub pop: Population,
    /// Row-level selection mask.
    pub row_evaluated: Vec<bool>,
    /// Distinct-level truth: `Some(indicator)` once the state is evaluated.
    pub truth: Vec<Option<bool>>,
    pub losses: Vec<Option<f64>>,
    pub training_rows: Vec<usize>,
    pub unique_evaluated: u64,
}

impl<'a> SurrogateLoop<'a> {
    pub fn new(ls: &'a MemoizedLimitState, pop: Population) -> Self {
        let n_distinct = pop.distinct.len();
        let n_rows = pop.len();
        SurrogateLoop {
            ls,
            pop,
            row_evaluated: vec![false; n_rows],
            truth: vec![None; n_distinct],
            losses: vec![None; n_distinct],
            training_rows: Vec::new(),
            unique_evaluated: 0,
        }
    }

    pub fn sync_population_growth(&mut self) {
        self.row_evaluated.resize(self.pop.len(), false);
        self.truth.resize(self.pop.distinct.len(), None);
        self.losses.resize(self.pop.distinct.len(), None);
    }

    /// Evaluates the rows (batch-parallel, memoized) and adds them to the
    /// training set.
    pub fn evaluate_rows(&mut self, rows: &[usize]) {
        let fresh: Vec<ComponentStateVector> = rows
            .iter()
            .map(|&r| self.pop.states[r].clone())
            .collect();
        let outcomes = self.ls.evaluate_batch(&fresh);
        for (&row, sample) in rows.iter().zip(&outcomes) {
            let d = self.pop.distinct_of_row[row] as usize;
            if self.truth[d].is_none() {
                self.truth[d] = Some(sample.indicator);
                self.losses[d] = Some(sample.loss);
                self.unique_evaluated += 1;
            }
            self.row_evaluated[row] = true;
            self.training_rows.push(row);
        }
    }

    pub fn training_design(&self) -> (BinaryMatrix, Vec<f64>) {
        let rows: Vec<&[bool]> = self
            .training_rows
            .iter()
            .map(|&r| self.pop.states[r].bits())
            .collect();
        let y: Vec<f64> = self
            .training_rows
            .iter()
            .map(|&r| {
                self.losses[self.pop.distinct_of_row[r] as usize]
                    .expect("training row must be evaluated")
            })
            .collect();
        (BinaryMatrix::from_rows(&rows), y)
    }

    /// Fits at the configured budget and scores the whole population.
    /// Returns `(ensemble, per-row g_hat, per-row u_prime, pf_hat)`.
    pub fn fit_and_score(
        &self,
        hp: &BartHyperparams,
        cfg: &AnrConfig,
        fit_seed: u64,
    ) -> Result<(BartEnsemble, Vec<f64>, Vec<f64>, f64)> {
        let (x_train, y_train) = self.training_design();
        let ens = bart::fit(&x_train, &y_train, hp, cfg.burn_in, cfg.retained, fit_seed)?;
        let preds = ens.predict(&self.pop.distinct_matrix(), cfg.ci_level)?;
        let threshold = self.ls.threshold();
        let mut g_distinct = Vec::with_capacity(preds.len());
        let mut u_distinct = Vec::with_capacity(preds.len());
        for p in &preds {
            let g_hat = threshold - p.mean;
            // the interval on g has the same width as the interval on loss
            g_distinct.push(g_hat);
            u_distinct.push(u_prime(g_hat, threshold - p.ci_upper, threshold - p.ci_lower));
        }
        let n_rows = self.pop.len();
        let mut g_rows = Vec::with_capacity(n_rows);
        let mut u_rows = Vec::with_capacity(n_rows);
        let mut known = Vec::with_capacity(n_rows);
        for row in 0..n_rows {
            let d = self.pop.distinct_of_row[row] as usize;
            g_rows.push(g_distinct[d]);
            u_rows.push(u_distinct[d]);
            known.push(self.truth[d]);
        }
        let pf = estimate_pf(&g_rows, &known);
        Ok((ens, g_rows, u_rows, pf))
    }

    /// Mean score over the population, skipping the zero-width sentinels.
    pub fn mean_finite_uprime(uprimes: &[f64]) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for &u in uprimes {
            if u < f64::MAX {
                sum += u;
                count += 1;
            }
        }
        if count == 0 {
            f64::INFINITY
        } else {
            sum / count as f64
        }
    }
}

/// Draws `count` distinct row indices without replacement.
pub(crate) fn sample_rows_without_replacement(
    n: usize,
    count: usize,
    key: Key,
) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rows: Vec<usize> = (0..n).collect();
    let mut rng = key.rng();
    rows.shuffle(&mut rng);
    rows.truncate(count);
    rows
}

/// Runs the adaptive loop to convergence, exhaustion, or an unresolvable
/// failure-probability assumption.
pub fn run(ls: &MemoizedLimitState, fm: &FailureModel, cfg: &AnrConfig) -> Result<RunResult> {
    cfg.validate()?;
    if fm.len() != ls.dimension() {
        return Err(Error::Dimension { expected: ls.dimension(), got: fm.len() });
    }

    let mut assumed = cfg.assumed_pf;
    let n0 = required_population_size(assumed, cfg.target_cov, cfg.population_rounding) as usize;
    let pop = Population::with_size(n0, fm, cfg.seed);
    let mut state = SurrogateLoop::new(ls, pop);

    let n_s = initial_sample_size(assumed, cfg.pr_at_least_one, fm.len()).min(state.pop.len());
    let batch_size = ((cfg.batch_fraction * n_s as f64).round() as usize).max(1);
    let initial =
        sample_rows_without_replacement(state.pop.len(), n_s, Key::new(cfg.seed, "initial-set"));
    state.evaluate_rows(&initial);

    let grid = cfg.grid.clone().unwrap_or_else(default_grid);
    let (x0, y0) = state.training_design();
    let mut hp = cv_grid_search(
        &x0,
        &y0,
        &grid,
        cfg.cv_folds,
        cfg.cv_budget,
        Key::new(cfg.seed, "cv").with(0).raw(),
    )?
    .best;

    let mut history: Vec<IterationRecord> = Vec::new();
    let mut deltas: Vec<(u32, f64)> = Vec::new();
    let mut prev_e_batch: Option<f64> = None;
    let mut halvings = 0u32;
    let mut last_ensemble: Option<BartEnsemble>;
    let mut iteration: u32 = 0;

    let (pf, termination) = loop {
        iteration += 1;
        if iteration > 1 && iteration % cfg.reopt_period == 0 {
            let (x, y) = state.training_design();
            hp = cv_grid_search(
                &x,
                &y,
                &grid,
                cfg.cv_folds,
                cfg.cv_budget,
                Key::new(cfg.seed, "cv").with(iteration as u64).raw(),
            )?
            .best;
        }

        let fit_seed = Key::new(cfg.seed, "fit").with(iteration as u64).raw();
        let (ens, _g_rows, u_rows, pf_hat) = state.fit_and_score(&hp, cfg, fit_seed)?;
        last_ensemble = Some(ens);

        if state.row_evaluated.iter().all(|&e| e) {
            // nothing left to learn from: the estimate is the crude one
            history.push(IterationRecord {
                iteration,
                unique_calls: state.unique_evaluated,
                training_rows: state.training_rows.len(),
                e_uprime_batch: f64::NAN,
                e_uprime_omega: SurrogateLoop::mean_finite_uprime(&u_rows),
                delta: None,
                delta_hat: None,
                fit_a: None,
                fit_b: None,
                fitted_slope: None,
                literal_slope_ratio: None,
                pf_hat,
                hyperparams: hp,
                stop: false,
            });
            break (pf_hat, Termination::PopulationExhausted);
        }

        let batch = select_batch(&u_rows, &state.row_evaluated, batch_size);
        let e_batch =
            batch.iter().map(|&i| u_rows[i]).sum::<f64>() / batch.len().max(1) as f64;
        let e_omega = SurrogateLoop::mean_finite_uprime(&u_rows);

        let delta = prev_e_batch.map(|prev| delta_i(e_batch, prev, e_omega));
        if let Some(d) = delta {
            deltas.push((iteration, d));
        }
        let fit_ab = fit_exponential(&deltas);
        let (delta_hat, slope, literal) = match fit_ab {
            Some((a, b)) => (
                Some(a * (b * iteration as f64).exp()),
                Some(a * b * (b * iteration as f64).exp()),
                Some((-b).exp_m1()),
            ),
            None => (None, None, None),
        };
        let stop = match (delta, delta_hat, fit_ab) {
            (Some(d), Some(dh), Some((a, b))) => {
                stopping_criterion(d, dh, a, b, cfg.eps1, cfg.eps2, iteration)
            }
            _ => false,
        };

        history.push(IterationRecord {
            iteration,
            unique_calls: state.unique_evaluated,
            training_rows: state.training_rows.len(),
            e_uprime_batch: e_batch,
            e_uprime_omega: e_omega,
            delta,
            delta_hat,
            fit_a: fit_ab.map(|(a, _)| a),
            fit_b: fit_ab.map(|(_, b)| b),
            fitted_slope: slope,
            literal_slope_ratio: literal,
            pf_hat,
            hyperparams: hp,
            stop,
        });

        if stop {
            if pf_hat >= assumed {
                break (pf_hat, Termination::Converged);
            }
            // the sizing assumption was optimistic: halve it and grow the
            // population, keeping everything already evaluated
            halvings += 1;
            if halvings > cfg.max_assumption_halvings {
                break (pf_hat, Termination::AssumptionUnresolved);
            }
            assumed /= 2.0;
            let target =
                required_population_size(assumed, cfg.target_cov, cfg.population_rounding)
                    as usize;
            state.pop.extend_to(target, fm, cfg.seed);
            state.sync_population_growth();
            prev_e_batch = Some(e_batch);
            continue;
        }

        state.evaluate_rows(&batch);
        prev_e_batch = Some(e_batch);
    };

    Ok(RunResult {
        pf,
        unique_calls: state.unique_evaluated,
        population_size: state.pop.len(),
        termination,
        final_assumed_pf: assumed,
        batch_size,
        initial_samples: n_s,
        history,
        final_hyperparams: hp,
        ensemble: last_ensemble,
    })
}

/// Writes the iteration history as CSV, one row per adaptive iteration.
pub fn write_history_csv<W: Write>(mut w: W, history: &[IterationRecord]) -> std::io::Result<()> {
    writeln!(
        w,
        "iteration,unique_calls,training_rows,e_uprime_batch,e_uprime_omega,delta,delta_hat,\
         fit_a,fit_b,fitted_slope,literal_slope_ratio,pf_hat,m,k,q,nu,stop"
    )?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.unique_calls,
            r.training_rows,
            r.e_uprime_batch,
            r.e_uprime_omega,
            opt(r.delta),
            opt(r.delta_hat),
            opt(r.fit_a),
            opt(r.fit_b),
            opt(r.fitted_slope),
            opt(r.literal_slope_ratio),
            r.pf_hat,
            r.hyperparams.m,
            r.hyperparams.k,
            r.hyperparams.q,
            r.hyperparams.nu,
            u8::from(r.stop)
        )?;
    }
    Ok(())
}
