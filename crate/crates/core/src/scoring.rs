// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scoring functions over neuron activation sets.
//!
//! - [`score_avg`]: mean activation, the objective maximized by the loop.
//! - [`score_auc`]: fraction of (control, concept) pairs where the control
//!   activation is strictly below the concept activation. Ties count zero.
//! - [`score_mad`]: concept mean minus control mean, in units of the control
//!   population standard deviation.

use serde::{Deserialize, Serialize};

use crate::error::{LineError, Result};

/// Non-empty list of finite neuron activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ActivationSet(Vec<f64>);

impl ActivationSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(LineError::EmptyActivation);
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(LineError::NonFiniteActivation(pos));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl TryFrom<Vec<f64>> for ActivationSet {
    type Error = LineError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ActivationSet> for Vec<f64> {
    fn from(set: ActivationSet) -> Self {
        set.0
    }
}

/// Cached population moments of a control set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Welford accumulator. Exact for constant inputs: the running mean never
/// moves once it equals the repeated value.
#[derive(Debug, Default, Clone, Copy)]
struct Moments {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn of(values: &[f64]) -> Self {
        let mut m = Self::default();
        for &v in values {
            m.push(v);
        }
        m
    }

    fn population_std(&self) -> f64 {
        (self.m2.max(0.0) / self.count as f64).sqrt()
    }
}

pub fn score_avg(a: &ActivationSet) -> f64 {
    Moments::of(a.values()).mean
}

/// Strict-inequality pair count behind [`score_auc`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AucCount {
    /// Pairs with `control < concept`.
    pub below: u64,
    /// `|control| * |concept|`.
    pub total: u64,
}

impl AucCount {
    pub fn ratio(&self) -> f64 {
        self.below as f64 / self.total as f64
    }
}

/// Sort-based pair count in O((n + m) log n).
pub fn auc_count(control: &ActivationSet, concept: &ActivationSet) -> AucCount {
    let mut sorted = control.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let below = concept
        .values()
        .iter()
        .map(|&b| sorted.partition_point(|&a| a < b) as u64)
        .sum();
    AucCount {
        below,
        total: (control.len() * concept.len()) as u64,
    }
}

pub fn score_auc(control: &ActivationSet, concept: &ActivationSet) -> f64 {
    auc_count(control, concept).ratio()
}

pub fn control_stats(control: &ActivationSet) -> ControlStats {
    let m = Moments::of(control.values());
    ControlStats {
        mean: m.mean,
        std: m.population_std(),
        count: m.count,
    }
}

pub fn score_mad(control: &ControlStats, concept: &ActivationSet) -> Result<f64> {
    if control.std <= 0.0 || !control.std.is_finite() {
        return Err(LineError::DegenerateControl);
    }
    Ok((score_avg(concept) - control.mean) / control.std)
}
