//! Baseline failure-probability estimators: crude Monte Carlo, subset
//! simulation with a component-wise Metropolis sampler over the Bernoulli
//! inputs, and a passively trained surrogate with the same machinery as the
//! adaptive driver but uniformly random batches.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::active::{AnrConfig, Population, SurrogateLoop};
use crate::bart::{cv_grid_search, default_grid, BartHyperparams};
use crate::error::{Error, Result};
use crate::limitstate::{ComponentStateVector, FailureModel, LimitState, MemoizedLimitState};
use crate::rng::Key;

#[derive(Debug, Clone, Serialize)]
pub struct McsResult {
    pub pf: f64,
    /// Estimated coefficient of variation; undefined when no failures were
    /// observed.
    pub cov: Option<f64>,
    /// Unique limit-state calls made by this run.
    pub calls: u64,
    pub n: usize,
}

/// Evaluates every sample of a fresh population.
pub fn crude_mcs(ls: &MemoizedLimitState, fm: &FailureModel, n: usize, seed: u64) -> McsResult {
    assert!(n >= 1, "crude_mcs needs at least one sample");
    let pop = crate::limitstate::sample_population(n, fm, seed);
    let outcomes = ls.evaluate_batch(&pop);
    let failures = outcomes.iter().filter(|s| s.indicator).count();
    let pf = failures as f64 / n as f64;
    let cov = if pf > 0.0 {
        Some(((1.0 - pf) / (pf * n as f64)).sqrt())
    } else {
        None
    };
    let distinct: HashSet<&ComponentStateVector> = pop.iter().collect();
    McsResult {
        pf,
        cov,
        calls: distinct.len() as u64,
        n,
    }
}

/// Relative error in percent: `|p_hat / p_ref - 1| * 100`.
pub fn relative_error(p_hat: f64, p_ref: f64) -> f64 {
    if p_ref == 0.0 {
        return if p_hat == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (p_hat / p_ref - 1.0).abs() * 100.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SubsetConfig {
    /// Intermediate conditional probability per level.
    pub p0: f64,
    /// Samples per conditional level.
    pub samples_per_level: usize,
    pub max_levels: u32,
    pub seed: u64,
}

impl Default for SubsetConfig {
    fn default() -> Self {
        SubsetConfig {
            p0: 0.1,
            samples_per_level: 1000,
            max_levels: 20,
            seed: 0,
        }
    }
}

impl SubsetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return Err(Error::config("p0 must lie in (0, 1)"));
        }
        if self.samples_per_level < 10 {
            return Err(Error::config("samples_per_level must be at least 10"));
        }
        if (self.p0 * self.samples_per_level as f64).floor() < 1.0 {
            return Err(Error::config("p0 * samples_per_level must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsetResult {
    pub pf: f64,
    /// Intermediate thresholds `b_1..b_M`; the final entry is 0 on
    /// convergence.
    pub thresholds: Vec<f64>,
    /// Number of levels generated, including level 0.
    pub levels: u32,
    /// Nominal limit-state calls: `n_l` for level 0 plus the chain
    /// extensions of each subsequent level.
    pub total_calls: u64,
    /// Distinct states evaluated by this run.
    pub unique_calls: u64,
    /// Fraction of chain steps per conditional level that moved to a new
    /// state (diagnostic).
    pub acceptance_rates: Vec<f64>,
    pub seeds_per_level: usize,
    pub converged: bool,
}

/// Component-wise Metropolis proposal: each component flips with probability
/// 1/2 (uniform proposal over the two-point support) and the flip is
/// accepted with the Bernoulli density ratio.
fn mma_propose(x: &ComponentStateVector, fm: &FailureModel, key: Key) -> ComponentStateVector {
    let mut bits = x.bits().to_vec();
    for (j, bit) in bits.iter_mut().enumerate() {
        let kj = key.with(j as u64);
        if kj.with(0).unit() < 0.5 {
            let p = fm.prob(j);
            let ratio = if *bit {
                (1.0 - p) / p
            } else {
                p / (1.0 - p)
            };
            if ratio >= 1.0 || kj.with(1).unit() < ratio {
                *bit = !*bit;
            }
        }
    }
    ComponentStateVector::from_bits(bits)
}

/// Subset simulation with adaptive intermediate thresholds: each level keeps
/// the `floor(p0 * n_l)`-th smallest margin as its threshold (ties included
/// in the conditional set) and repopulates by advancing Metropolis chains
/// from the conditional samples.
pub fn subset_simulation(
    ls: &MemoizedLimitState,
    fm: &FailureModel,
    cfg: &SubsetConfig,
) -> Result<SubsetResult> {
    cfg.validate()?;
    if fm.len() != ls.dimension() {
        return Err(Error::Dimension { expected: ls.dimension(), got: fm.len() });
    }
    let n_l = cfg.samples_per_level;
    let n_seed = (cfg.p0 * n_l as f64).floor() as usize;

    // level 0: i.i.d. draws
    let init_key = Key::new(cfg.seed, "subset-init");
    let mut states: Vec<ComponentStateVector> = (0..n_l)
        .map(|s| {
            let ks = init_key.with(s as u64);
            ComponentStateVector::from_bits(
                (0..fm.len()).map(|j| ks.with(j as u64).unit() < fm.prob(j)).collect(),
            )
        })
        .collect();
    let mut margins: Vec<f64> = ls.evaluate_batch(&states).iter().map(|s| s.g).collect();

    let mut evaluated: HashSet<ComponentStateVector> = states.iter().cloned().collect();
    let mut total_calls = n_l as u64;
    let mut thresholds = Vec::new();
    let mut acceptance_rates = Vec::new();
    let mut level: u32 = 0;

    loop {
        let mut order: Vec<usize> = (0..n_l).collect();
        order.sort_by(|&a, &b| {
            margins[a]
                .partial_cmp(&margins[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let b_level = margins[order[n_seed - 1]];

        if b_level <= 0.0 {
            // the failure region is reached at this level
            let hits = margins.iter().filter(|&&g| g <= 0.0).count();
            thresholds.push(0.0);
            let pf = cfg.p0.powi(level as i32) * hits as f64 / n_l as f64;
            return Ok(SubsetResult {
                pf,
                thresholds,
                levels: level + 1,
                total_calls,
                unique_calls: evaluated.len() as u64,
                acceptance_rates,
                seeds_per_level: n_seed,
                converged: true,
            });
        }
        thresholds.push(b_level);
        level += 1;
        if level > cfg.max_levels {
            let hits = margins.iter().filter(|&&g| g <= 0.0).count();
            let pf = cfg.p0.powi(level as i32 - 1) * hits as f64 / n_l as f64;
            return Ok(SubsetResult {
                pf,
                thresholds,
                levels: level,
                total_calls,
                unique_calls: evaluated.len() as u64,
                acceptance_rates,
                seeds_per_level: n_seed,
                converged: false,
            });
        }

        // conditional seeds: every sample at or below the threshold
        let seeds: Vec<usize> = (0..n_l).filter(|&i| margins[i] <= b_level).collect();
        let k = seeds.len();
        let base = n_l / k;
        let extra = n_l % k;

        let chains: Vec<(Vec<(ComponentStateVector, f64)>, Vec<ComponentStateVector>, usize)> =
            (0..k)
                .into_par_iter()
                .map(|c| {
                    let len = base + usize::from(c < extra);
                    let mut cur_state = states[seeds[c]].clone();
                    let mut cur_g = margins[seeds[c]];
                    let mut out = Vec::with_capacity(len);
                    let mut fresh = Vec::new();
                    let mut moved = 0usize;
                    out.push((cur_state.clone(), cur_g));
                    for step in 1..len {
                        let key = Key::new(cfg.seed, "subset-chain")
                            .with(level as u64)
                            .with(c as u64)
                            .with(step as u64);
                        let cand = mma_propose(&cur_state, fm, key);
                        if cand != cur_state {
                            let sample = ls.evaluate(&cand);
                            fresh.push(cand.clone());
                            if sample.g <= b_level {
                                cur_state = cand;
                                cur_g = sample.g;
                                moved += 1;
                            }
                        }
                        out.push((cur_state.clone(), cur_g));
                    }
                    (out, fresh, moved)
                })
                .collect();

        let mut new_states = Vec::with_capacity(n_l);
        let mut new_margins = Vec::with_capacity(n_l);
        let mut moved_total = 0usize;
        let mut steps_total = 0usize;
        for (samples, fresh, moved) in chains {
            steps_total += samples.len() - 1;
            moved_total += moved;
            for (s, g) in samples {
                new_states.push(s);
                new_margins.push(g);
            }
            evaluated.extend(fresh);
        }
        debug_assert_eq!(new_states.len(), n_l);
        total_calls += (n_l - k) as u64;
        acceptance_rates.push(if steps_total > 0 {
            moved_total as f64 / steps_total as f64
        } else {
            0.0
        });
        states = new_states;
        margins = new_margins;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PassiveRecord {
    pub iteration: u32,
    pub unique_calls: u64,
    pub training_rows: usize,
    pub pf_hat: f64,
    pub hyperparams: BartHyperparams,
}

#[derive(Serialize)]
pub struct PassiveRunResult {
    pub pf: f64,
    pub unique_calls: u64,
    pub population_size: usize,
    pub history: Vec<PassiveRecord>,
}

/// The surrogate loop with uniformly random batches instead of
/// learning-function selection. The population, initial training set, and
/// re-optimization cadence match the adaptive run for the same seed, so
/// paired comparisons isolate the selection policy.
pub fn passive_surrogate_run(
    ls: &MemoizedLimitState,
    fm: &FailureModel,
    schedule: &[usize],
    cfg: &AnrConfig,
) -> Result<PassiveRunResult> {
    cfg.validate()?;
    if fm.len() != ls.dimension() {
        return Err(Error::Dimension { expected: ls.dimension(), got: fm.len() });
    }
    let n0 = crate::active::required_population_size(
        cfg.assumed_pf,
        cfg.target_cov,
        cfg.population_rounding,
    ) as usize;
    let pop = Population::with_size(n0, fm, cfg.seed);
    let n_s =
        crate::active::initial_sample_size(cfg.assumed_pf, cfg.pr_at_least_one, fm.len())
            .min(pop.len());
    let budget: usize = schedule.iter().sum::<usize>() + n_s;
    if budget > pop.len() {
        return Err(Error::config(format!(
            "schedule requests {budget} evaluations from a population of {}",
            pop.len()
        )));
    }

    let mut state = SurrogateLoop::new(ls, pop);
    let initial = crate::active::sample_rows_without_replacement(
        state.pop.len(),
        n_s,
        Key::new(cfg.seed, "initial-set"),
    );
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

    let mut history = Vec::new();
    let total_iters = schedule.len() as u32 + 1;
    for iteration in 1..=total_iters {
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
        let fit_seed = Key::new(cfg.seed, "passive-fit").with(iteration as u64).raw();
        let (_ens, _g, _u, pf_hat) = state.fit_and_score(&hp, cfg, fit_seed)?;
        history.push(PassiveRecord {
            iteration,
            unique_calls: state.unique_evaluated,
            training_rows: state.training_rows.len(),
            pf_hat,
            hyperparams: hp,
        });

        if iteration as usize <= schedule.len() {
            let want = schedule[iteration as usize - 1];
            let unevaluated: Vec<usize> = (0..state.pop.len())
                .filter(|&r| !state.row_evaluated[r])
                .collect();
            let mut picks = unevaluated;
            use rand::seq::SliceRandom;
            picks.shuffle(&mut Key::new(cfg.seed, "passive-batch").with(iteration as u64).rng());
            picks.truncate(want);
            state.evaluate_rows(&picks);
        }
    }

    let pf = history.last().map(|r| r.pf_hat).unwrap_or(0.0);
    Ok(PassiveRunResult {
        pf,
        unique_calls: state.unique_evaluated,
        population_size: state.pop.len(),
        history,
    })
}

/// Writes the passive history as CSV.
pub fn write_passive_history_csv<W: std::io::Write>(
    mut w: W,
    history: &[PassiveRecord],
) -> std::io::Result<()> {
    writeln!(w, "iteration,unique_calls,training_rows,pf_hat,m,k,q,nu")?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            r.unique_calls,
            r.training_rows,
            r.pf_hat,
            r.hyperparams.m,
            r.hyperparams.k,
            r.hyperparams.q,
            r.hyperparams.nu
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limitstate::LinearToyLimitState;
    use approx::assert_relative_eq;

    fn memoized_toy(weights: Vec<f64>, threshold: f64) -> MemoizedLimitState {
        MemoizedLimitState::new(Box::new(LinearToyLimitState::new(weights, threshold).unwrap()))
    }

    #[test]
    fn crude_mcs_on_certain_failure() {
        let ls = memoized_toy(vec![1.0, 1.0], -0.1); // loss >= 0 > threshold
        let fm = FailureModel::uniform(0.3, 2).unwrap();
        let out = crude_mcs(&ls, &fm, 500, 1);
        assert_eq!(out.pf, 1.0);
        assert_eq!(out.cov, Some(0.0));
        assert!(out.calls <= 4);
    }

    #[test]
    fn crude_mcs_cov_inverts_the_sizing_formula() {
        // pf = 0.01 with n = 39,600 should report cov ~ 0.05
        let cov = ((1.0 - 0.01) / (0.01 * 39_600.0_f64)).sqrt();
        assert_relative_eq!(cov, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(0.0143, 0.0143), 0.0);
        assert_relative_eq!(relative_error(0.012, 0.010), 20.0, epsilon = 1e-9);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(0.1, 0.0), f64::INFINITY);
        // scale invariance
        assert_relative_eq!(
            relative_error(3.0 * 0.012, 3.0 * 0.010),
            relative_error(0.012, 0.010),
            epsilon = 1e-9
        );
    }

    #[test]
    fn mma_without_conditioning_preserves_the_marginal() {
        let fm = FailureModel::new(vec![0.3, 0.7]).unwrap();
        let mut state = ComponentStateVector::from_bits(vec![false, true]);
        let steps = 100_000usize;
        let mut ones = [0usize; 2];
        for step in 0..steps {
            let key = Key::new(42, "mma-smoke").with(step as u64);
            state = mma_propose(&state, &fm, key);
            for j in 0..2 {
                if state.get(j) {
                    ones[j] += 1;
                }
            }
        }
        for (j, &target) in [0.3, 0.7].iter().enumerate() {
            let freq = ones[j] as f64 / steps as f64;
            assert!((freq - target).abs() < 0.01, "component {j}: {freq} vs {target}");
        }
    }

    #[test]
    fn subset_single_level_degenerates_to_crude_on_the_same_draws() {
        // threshold so low that level 0 already crosses: pf is the level-0
        // failure fraction
        let ls = memoized_toy(vec![0.5, 0.5, 0.5], 0.4);
        let fm = FailureModel::uniform(0.5, 3).unwrap();
        let cfg = SubsetConfig { p0: 0.1, samples_per_level: 1000, max_levels: 10, seed: 3 };
        let out = subset_simulation(&ls, &fm, &cfg).unwrap();
        assert!(out.converged);
        assert_eq!(out.levels, 1);
        assert_eq!(out.total_calls, 1000);
        assert_eq!(out.thresholds, vec![0.0]);
        // with p = 0.5 per component, P(at least one failure) = 7/8
        assert!((out.pf - 0.875).abs() < 0.05, "{}", out.pf);
    }

    #[test]
    fn subset_call_accounting_identity() {
        let ls = memoized_toy(
            (0..10).map(|i| 0.05 + 0.01 * i as f64).collect(),
            0.42,
        );
        let fm = FailureModel::uniform(0.2, 10).unwrap();
        let cfg = SubsetConfig { p0: 0.1, samples_per_level: 200, max_levels: 20, seed: 7 };
        let out = subset_simulation(&ls, &fm, &cfg).unwrap();
        assert!(out.converged);
        // total = n_l + sum over conditional levels of (n_l - seeds)
        assert!(out.total_calls >= 200);
        assert!(out.levels >= 2);
        assert_eq!(out.seeds_per_level, 20);
        assert!(out.pf > 0.0);
    }

    #[test]
    fn subset_rejects_bad_config() {
        let cfg = SubsetConfig { p0: 0.0, ..SubsetConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = SubsetConfig { samples_per_level: 5, ..SubsetConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
