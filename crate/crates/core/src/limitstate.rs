//! Component states, failure models, and limit-state evaluation.
//!
//! A sample is a binary vector over the vulnerable components (1 = failed).
//! A limit state maps a sample to a continuous loss fraction and the margin
//! `g = threshold - loss`; the system fails when the loss reaches or exceeds
//! the threshold, i.e. `g <= 0`. Evaluations of the expensive grid limit
//! state are memoized per state vector, and the unique-invocation count is
//! the "calls to the limit state function" accounting used everywhere else.

use std::fmt;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use dashmap::DashMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{run_cascade, CascadeConfig};
use crate::error::{Error, Result};
use crate::netmodel::PowerNetwork;
use crate::rng::{mix64, Key};

/// Binary survival/failure state of all vulnerable components.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComponentStateVector {
    bits: Vec<bool>,
}

impl ComponentStateVector {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        ComponentStateVector { bits }
    }

    pub fn zeros(n: usize) -> Self {
        ComponentStateVector { bits: vec![false; n] }
    }

    /// Parses a `"0101..."` literal.
    pub fn parse(text: &str) -> Result<Self> {
        let mut bits = Vec::with_capacity(text.len());
        for (i, c) in text.chars().enumerate() {
            match c {
                '0' => bits.push(false),
                '1' => bits.push(true),
                other => {
                    return Err(Error::config(format!(
                        "invalid state character `{other}` at position {i}"
                    )))
                }
            }
        }
        Ok(ComponentStateVector { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_failed(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Stable 64-bit digest, used to key per-sample random substreams.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0x6A09_E667_F3BC_C908;
        let mut word: u64 = 0;
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                word |= 1 << (i % 64);
            }
            if i % 64 == 63 {
                h = mix64(h ^ word);
                word = 0;
            }
        }
        mix64(h ^ word ^ (self.bits.len() as u64))
    }
}

impl fmt::Display for ComponentStateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl Serialize for ComponentStateVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentStateVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        ComponentStateVector::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Independent per-component failure probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureModel {
    probs: Vec<f64>,
}

impl FailureModel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::config("failure model needs at least one component"));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::config(format!(
                    "component {i} failure probability {p} outside [0, 1]"
                )));
            }
        }
        Ok(FailureModel { probs })
    }

    pub fn uniform(p: f64, n: usize) -> Result<Self> {
        FailureModel::new(vec![p; n])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// Probability mass of a full state vector.
    pub fn pmf(&self, x: &ComponentStateVector) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, &p)| if x.get(i) { p } else { 1.0 - p })
            .product()
    }
}

/// An evaluated sample: state, continuous loss, margin, and failure flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedSample {
    pub x: ComponentStateVector,
    pub loss: f64,
    pub g: f64,
    pub indicator: bool,
}

/// A limit state: a loss threshold plus an evaluator from component states
/// to continuous loss. Failure is `loss >= threshold`, i.e. `g <= 0`.
pub trait LimitState: Send + Sync {
    fn dimension(&self) -> usize;
    fn threshold(&self) -> f64;
    fn loss(&self, x: &ComponentStateVector) -> f64;

    fn evaluate(&self, x: &ComponentStateVector) -> EvaluatedSample {
        assert_eq!(x.len(), self.dimension(), "state dimension mismatch");
        let loss = self.loss(x);
        let g = self.threshold() - loss;
        EvaluatedSample {
            x: x.clone(),
            loss,
            g,
            indicator: g <= 0.0,
        }
    }
}

/// Synthetic limit state with `loss = sum_i w_i x_i`. Test oracle: exact
/// failure probabilities are enumerable.
#[derive(Debug, Clone)]
pub struct LinearToyLimitState {
    weights: Vec<f64>,
    threshold: f64,
}

impl LinearToyLimitState {
    pub fn new(weights: Vec<f64>, threshold: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("toy limit state needs at least one weight"));
        }
        Ok(LinearToyLimitState { weights, threshold })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl LimitState for LinearToyLimitState {
    fn dimension(&self) -> usize {
        self.weights.len()
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn loss(&self, x: &ComponentStateVector) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| if x.get(i) { *w } else { 0.0 })
            .sum()
    }
}

/// The grid limit state: loss is the cascading-failure loss fraction.
pub struct GridLimitState {
    net: PowerNetwork,
    cascade: CascadeConfig,
    threshold: f64,
}

impl GridLimitState {
    /// Validates that the intact network resolves with zero loss before
    /// accepting it; a base case that already sheds load is a configuration
    /// error.
    pub fn new(net: PowerNetwork, cascade: CascadeConfig, threshold: f64) -> Result<Self> {
        net.validate()?;
        let zeros = ComponentStateVector::zeros(net.n_vulnerable());
        let base = run_cascade(&net, &zeros, &cascade)?;
        if base.loss_fraction > 1e-9 {
            return Err(Error::config(format!(
                "base network sheds {:.4}% of load; fix ratings or dispatch data",
                base.loss_fraction * 100.0
            )));
        }
        Ok(GridLimitState { net, cascade, threshold })
    }

    pub fn network(&self) -> &PowerNetwork {
        &self.net
    }
}

impl LimitState for GridLimitState {
    fn dimension(&self) -> usize {
        self.net.n_vulnerable()
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn loss(&self, x: &ComponentStateVector) -> f64 {
        run_cascade(&self.net, x, &self.cascade)
            .expect("cascade on validated network cannot fail")
            .loss_fraction
    }
}

/// Memoizing wrapper counting unique evaluator invocations.
///
/// Duplicate Monte Carlo samples are common at the failure probabilities of
/// interest; re-evaluations are served from the cache and do not count as
/// calls. Thread-safe; batch evaluation fans out with rayon and returns
/// results in sample order.
pub struct MemoizedLimitState {
    inner: Box<dyn LimitState>,
    cache: DashMap<ComponentStateVector, f64>,
    unique: AtomicU64,
}

impl MemoizedLimitState {
    pub fn new(inner: Box<dyn LimitState>) -> Self {
        MemoizedLimitState {
            inner,
            cache: DashMap::new(),
            unique: AtomicU64::new(0),
        }
    }

    pub fn unique_calls(&self) -> u64 {
        self.unique.load(Ordering::SeqCst)
    }

    pub fn evaluate_batch(&self, xs: &[ComponentStateVector]) -> Vec<EvaluatedSample> {
        xs.par_iter().map(|x| self.evaluate(x)).collect()
    }
}

impl LimitState for MemoizedLimitState {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn threshold(&self) -> f64 {
        self.inner.threshold()
    }

    fn loss(&self, x: &ComponentStateVector) -> f64 {
        if let Some(hit) = self.cache.get(x) {
            return *hit;
        }
        *self
            .cache
            .entry(x.clone())
            .or_insert_with(|| {
                self.unique.fetch_add(1, Ordering::SeqCst);
                self.inner.loss(x)
            })
            .value()
    }
}

/// Draws `n` i.i.d. samples. Bit `j` of sample `s` comes from the substream
/// keyed `(seed, s, j)`, so the population is reproducible bit-for-bit
/// regardless of thread count or evaluation order.
pub fn sample_population(n: usize, fm: &FailureModel, seed: u64) -> Vec<ComponentStateVector> {
    let key = Key::new(seed, "population");
    (0..n)
        .into_par_iter()
        .map(|s| {
            let ks = key.with(s as u64);
            let bits = (0..fm.len())
                .map(|j| ks.with(j as u64).unit() < fm.prob(j))
                .collect();
            ComponentStateVector::from_bits(bits)
        })
        .collect()
}

/// Exact failure probability by enumerating all `2^n` states. The oracle for
/// small problems; refuses dimensions above 25.
pub fn exact_pf_enumeration(ls: &dyn LimitState, fm: &FailureModel) -> Result<f64> {
    let n = fm.len();
    if n != ls.dimension() {
        return Err(Error::Dimension { expected: ls.dimension(), got: n });
    }
    if n > 25 {
        return Err(Error::config(format!(
            "enumeration over {n} components is intractable (limit 25)"
        )));
    }
    let total: u64 = 1 << n;
    let partials: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|mask| {
            let bits = (0..n).map(|j| mask >> j & 1 == 1).collect();
            let x = ComponentStateVector::from_bits(bits);
            let sample = ls.evaluate(&x);
            if sample.indicator {
                fm.pmf(&x)
            } else {
                0.0
            }
        })
        .collect();
    Ok(partials.iter().sum())
}

/// Streams evaluated samples to CSV with columns
/// `sample_index,bits,loss,g,indicator`.
pub fn write_samples_csv<W: Write>(mut w: W, samples: &[EvaluatedSample]) -> std::io::Result<()> {
    writeln!(w, "sample_index,bits,loss,g,indicator")?;
    for (i, s) in samples.iter().enumerate() {
        writeln!(
            w,
            "{i},{},{},{},{}",
            s.x,
            s.loss,
            s.g,
            if s.indicator { 1 } else { 0 }
        )?;
    }
    Ok(())
}
