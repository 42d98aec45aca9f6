//! Failure-probability estimators behind a common trait, registered by name.
//!
//! Every estimation algorithm in the toolkit (crude Monte Carlo, subset
//! simulation, the adaptive surrogate, the passive surrogate baseline, and
//! exact enumeration) implements [`FailureProbabilityEstimator`] and is
//! looked up at runtime via [`find`]. The CLI maps its subcommands straight
//! onto these names, so adding an estimator means implementing the trait and
//! extending [`registry`].

use serde::Serialize;
use serde_json::json;

use crate::active::{self, AnrConfig, Termination};
use crate::error::{Error, Result};
use crate::estimators::{
    self, crude_mcs, passive_surrogate_run, relative_error, subset_simulation, SubsetConfig,
};
use crate::limitstate::{self, FailureModel, MemoizedLimitState};

/// Per-run settings shared by all strategies. The top-level seed overrides
/// the seeds embedded in the sub-configurations so that one value controls
/// the whole run.
#[derive(Debug, Clone, Serialize)]
pub struct StrategySettings {
    pub seed: u64,
    pub anr: AnrConfig,
    pub subset: SubsetConfig,
    /// Crude Monte Carlo sample count; defaults to the adaptive population
    /// size so the baselines are comparable.
    pub mcs_samples: Option<usize>,
    /// Explicit passive batch schedule; when absent, `passive_iterations`
    /// batches of the adaptive batch size are used.
    pub passive_schedule: Option<Vec<usize>>,
    pub passive_iterations: u32,
}

impl Default for StrategySettings {
    fn default() -> Self {
        StrategySettings {
            seed: 0,
            anr: AnrConfig::default(),
            subset: SubsetConfig::default(),
            mcs_samples: None,
            passive_schedule: None,
            passive_iterations: 50,
        }
    }
}

impl StrategySettings {
    fn anr_with_seed(&self) -> AnrConfig {
        AnrConfig { seed: self.seed, ..self.anr.clone() }
    }

    fn subset_with_seed(&self) -> SubsetConfig {
        SubsetConfig { seed: self.seed, ..self.subset.clone() }
    }

    fn mcs_n(&self) -> usize {
        self.mcs_samples.unwrap_or_else(|| {
            active::required_population_size(
                self.anr.assumed_pf,
                self.anr.target_cov,
                self.anr.population_rounding,
            ) as usize
        })
    }
}

pub struct StrategyContext<'a> {
    pub limit_state: &'a MemoizedLimitState,
    pub failure_model: &'a FailureModel,
    pub settings: &'a StrategySettings,
    /// Reference failure probability for relative-error reporting, when one
    /// is available.
    pub reference_pf: Option<f64>,
}

/// Uniform result envelope across strategies.
#[derive(Debug, Serialize)]
pub struct StrategyOutcome {
    pub estimator: &'static str,
    pub pf: f64,
    pub unique_calls: u64,
    pub converged: bool,
    pub relative_error_pct: Option<f64>,
    /// Estimator-specific diagnostics.
    pub details: serde_json::Value,
    /// Rendered per-iteration/per-level history, if the estimator has one.
    #[serde(skip)]
    pub history_csv: Option<String>,
    /// Final surrogate ensemble, if the estimator trains one.
    #[serde(skip)]
    pub ensemble_json: Option<String>,
}

pub trait FailureProbabilityEstimator: Sync {
    fn name(&self) -> &'static str;
    fn describe(&self) -> &'static str;
    fn estimate(&self, ctx: &StrategyContext) -> Result<StrategyOutcome>;
}

struct McsStrategy;
struct SubsetStrategy;
struct AdaptiveStrategy;
struct PassiveStrategy;
struct OracleStrategy;

impl FailureProbabilityEstimator for McsStrategy {
    fn name(&self) -> &'static str {
        "mcs"
    }

    fn describe(&self) -> &'static str {
        "crude Monte Carlo over a fresh population"
    }

    fn estimate(&self, ctx: &StrategyContext) -> Result<StrategyOutcome> {
        let n = ctx.settings.mcs_n();
        let out = crude_mcs(ctx.limit_state, ctx.failure_model, n, ctx.settings.seed);
        // samples CSV doubles as the history artifact; evaluations are
        // cached, so regenerating them is free
        let pop = limitstate::sample_population(n, ctx.failure_model, ctx.settings.seed);
        let samples = ctx.limit_state.evaluate_batch(&pop);
        let mut csv = Vec::new();
        limitstate::write_samples_csv(&mut csv, &samples)?;
        Ok(StrategyOutcome {
            estimator: self.name(),
            pf: out.pf,
            unique_calls: out.calls,
            converged: true,
            relative_error_pct: ctx.reference_pf.map(|r| relative_error(out.pf, r)),
            details: serde_json::to_value(&out)?,
            history_csv: Some(String::from_utf8(csv).expect("csv is utf-8")),
            ensemble_json: None,
        })
    }
}

impl FailureProbabilityEstimator for SubsetStrategy {
    fn name(&self) -> &'static str {
        "subset"
    }

    fn describe(&self) -> &'static str {
        "subset simulation with component-wise Metropolis resampling"
    }

    fn estimate(&self, ctx: &StrategyContext) -> Result<StrategyOutcome> {
        let cfg = ctx.settings.subset_with_seed();
        let out = subset_simulation(ctx.limit_state, ctx.failure_model, &cfg)?;
        let mut csv = String::from("level,threshold,acceptance_rate\n");
        for (i, b) in out.thresholds.iter().enumerate() {
            let acc = out
                .acceptance_rates
                .get(i.wrapping_sub(1))
                .map(|a| a.to_string())
                .unwrap_or_default();
            csv.push_str(&format!("{i},{b},{acc}\n"));
        }
        Ok(StrategyOutcome {
            estimator: self.name(),
            pf: out.pf,
            unique_calls: out.unique_calls,
            converged: out.converged,
            relative_error_pct: ctx.reference_pf.map(|r| relative_error(out.pf, r)),
            details: serde_json::to_value(&out)?,
            history_csv: Some(csv),
            ensemble_json: None,
        })
    }
}

impl FailureProbabilityEstimator for AdaptiveStrategy {
    fn name(&self) -> &'static str {
        "anr"
    }

    fn describe(&self) -> &'static str {
        "adaptive surrogate training driven by the uncertainty/proximity learning function"
    }

    fn estimate(&self, ctx: &StrategyContext) -> Result<StrategyOutcome> {
        let cfg = ctx.settings.anr_with_seed();
        let out = active::run(ctx.limit_state, ctx.failure_model, &cfg)?;
        let mut csv = Vec::new();
        active::write_history_csv(&mut csv, &out.history)?;
        let ensemble_json = out.ensemble.as_ref().map(|e| e.to_json()).transpose()?;
        Ok(StrategyOutcome {
            estimator: self.name(),
            pf: out.pf,
            unique_calls: out.unique_calls,
            converged: out.termination == Termination::Converged,
            relative_error_pct: ctx.reference_pf.map(|r| relative_error(out.pf, r)),
            details: serde_json::to_value(&out)?,
            history_csv: Some(String::from_utf8(csv).expect("csv is utf-8")),
            ensemble_json,
        })
    }
}

impl FailureProbabilityEstimator for PassiveStrategy {
    fn name(&self) -> &'static str {
        "passive"
    }

    fn describe(&self) -> &'static str {
        "surrogate training on uniformly random batches (baseline)"
    }

    fn estimate(&self, ctx: &StrategyContext) -> Result<StrategyOutcome> {
        let cfg = ctx.settings.anr_with_seed();
        let schedule: Vec<usize> = match &ctx.settings.passive_schedule {
            Some(s) => s.clone(),
            None => {
                let n_s = active::initial_sample_size(
                    cfg.assumed_pf,
                    cfg.pr_at_least_one,
                    ctx.failure_model.len(),
                );
                let batch = ((cfg.batch_fraction * n_s as f64).round() as usize).max(1);
                vec![batch; ctx.settings.passive_iterations as usize]
            }
        };
        let out = passive_surrogate_run(ctx.limit_state, ctx.failure_model, &schedule, &cfg)?;
        let mut csv = Vec::new();
        estimators::write_passive_history_csv(&mut csv, &out.history)?;
        Ok(StrategyOutcome {
            estimator: self.name(),
            pf: out.pf,
            unique_calls: out.unique_calls,
            converged: true,
            relative_error_pct: ctx.reference_pf.map(|r| relative_error(out.pf, r)),
            details: serde_json::to_value(&out)?,
            history_csv: Some(String::from_utf8(csv).expect("csv is utf-8")),
            ensemble_json: None,
        })
    }
}

impl FailureProbabilityEstimator for OracleStrategy {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn describe(&self) -> &'static str {
        "exact failure probability by full state enumeration (small problems)"
    }

    fn estimate(&self, ctx: &StrategyContext) -> Result<StrategyOutcome> {
        let n = ctx.failure_model.len();
        let pf = limitstate::exact_pf_enumeration(ctx.limit_state, ctx.failure_model)?;
        Ok(StrategyOutcome {
            estimator: self.name(),
            pf,
            unique_calls: 1u64 << n,
            converged: true,
            relative_error_pct: ctx.reference_pf.map(|r| relative_error(pf, r)),
            details: json!({ "states_enumerated": 1u64 << n }),
            history_csv: None,
            ensemble_json: None,
        })
    }
}

static MCS: McsStrategy = McsStrategy;
static SUBSET: SubsetStrategy = SubsetStrategy;
static ADAPTIVE: AdaptiveStrategy = AdaptiveStrategy;
static PASSIVE: PassiveStrategy = PassiveStrategy;
static ORACLE: OracleStrategy = OracleStrategy;

static REGISTRY: [&dyn FailureProbabilityEstimator; 5] =
    [&MCS, &SUBSET, &ADAPTIVE, &PASSIVE, &ORACLE];

/// All registered estimators, in presentation order.
pub fn registry() -> &'static [&'static dyn FailureProbabilityEstimator] {
    &REGISTRY
}

/// Looks an estimator up by its registered name.
pub fn find(name: &str) -> Result<&'static dyn FailureProbabilityEstimator> {
    registry()
        .iter()
        .copied()
        .find(|e| e.name() == name)
        .ok_or_else(|| {
            let known: Vec<&str> = registry().iter().map(|e| e.name()).collect();
            Error::config(format!(
                "unknown estimator `{name}`; registered: {}",
                known.join(", ")
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limitstate::LinearToyLimitState;

    fn toy_context() -> (MemoizedLimitState, FailureModel, StrategySettings) {
        let ls = MemoizedLimitState::new(Box::new(
            LinearToyLimitState::new(vec![0.2, 0.25, 0.3], 0.4).unwrap(),
        ));
        let fm = FailureModel::uniform(0.2, 3).unwrap();
        let settings = StrategySettings {
            seed: 5,
            mcs_samples: Some(2000),
            ..StrategySettings::default()
        };
        (ls, fm, settings)
    }

    #[test]
    fn registry_names_are_unique_and_complete() {
        let names: Vec<&str> = registry().iter().map(|e| e.name()).collect();
        assert_eq!(names, vec!["mcs", "subset", "anr", "passive", "oracle"]);
        for name in &names {
            assert_eq!(find(name).unwrap().name(), *name);
        }
        assert!(find("bogus").is_err());
    }

    #[test]
    fn mcs_and_oracle_agree_through_the_registry() {
        let (ls, fm, settings) = toy_context();
        let ctx = StrategyContext {
            limit_state: &ls,
            failure_model: &fm,
            settings: &settings,
            reference_pf: None,
        };
        let exact = find("oracle").unwrap().estimate(&ctx).unwrap();
        let mcs = find("mcs").unwrap().estimate(&ctx).unwrap();
        assert!(exact.converged && mcs.converged);
        // 2000 samples on a pf ~ 0.1 problem: ~2% noise at 3 sigma
        assert!(
            (mcs.pf - exact.pf).abs() < 0.03,
            "mcs {} vs exact {}",
            mcs.pf,
            exact.pf
        );
        assert!(mcs.history_csv.is_some());
    }

    #[test]
    fn reference_pf_produces_relative_error() {
        let (ls, fm, settings) = toy_context();
        let ctx = StrategyContext {
            limit_state: &ls,
            failure_model: &fm,
            settings: &settings,
            reference_pf: Some(0.5),
        };
        let out = find("oracle").unwrap().estimate(&ctx).unwrap();
        assert!(out.relative_error_pct.is_some());
    }
}
