// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-neuron concept scoreboard.
//!
//! The board holds at most one entry per normalized label. Every label the
//! proposer emits is also appended to `proposal_history`, duplicates
//! included; the forbidden list shown to the LLM is derived from it.

use std::cmp::Ordering;
use std::fmt;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::activation::NeuronAddress;
use crate::error::{LineError, Result};
use crate::fixed6;

/// A normalized concept label: lowercased, trimmed, inner whitespace
/// collapsed to single spaces. Never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConceptLabel(String);

impl ConceptLabel {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Number of whitespace-separated words.
    pub fn word_count(&self) -> usize {
        self.0.split(' ').count()
    }
}

/// Normalizes raw proposer or fixture text into a [`ConceptLabel`].
pub fn normalize_label(raw: &str) -> Result<ConceptLabel> {
    let text = raw
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ");
    if text.is_empty() {
        return Err(LineError::InvalidLabel(raw.to_string()));
    }
    Ok(ConceptLabel(text))
}

impl TryFrom<String> for ConceptLabel {
    type Error = LineError;

    fn try_from(value: String) -> Result<Self> {
        normalize_label(&value)
    }
}

impl TryFrom<&str> for ConceptLabel {
    type Error = LineError;

    fn try_from(value: &str) -> Result<Self> {
        normalize_label(value)
    }
}

impl From<ConceptLabel> for String {
    fn from(label: ConceptLabel) -> Self {
        label.0
    }
}

impl fmt::Display for ConceptLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Where a scoreboard entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    /// Seeded from the initialization vocabulary (step 0).
    Predefined,
    /// Proposed during the refinement loop (steps 1..=N).
    Generated,
    /// Proposed by the final summary iteration (step N+1).
    Summary,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Predefined => "predefined",
            Origin::Generated => "generated",
            Origin::Summary => "summary",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreboardEntry {
    pub label: ConceptLabel,
    #[serde(with = "fixed6")]
    pub score: f64,
    pub step: u32,
    pub origin: Origin,
    #[serde(skip)]
    pub image_refs: Vec<String>,
}

impl ScoreboardEntry {
    pub fn new(label: ConceptLabel, score: f64, step: u32, origin: Origin) -> Self {
        Self {
            label,
            score,
            step,
            origin,
            image_refs: Vec::new(),
        }
    }

    pub fn with_images(mut self, image_refs: Vec<String>) -> Self {
        self.image_refs = image_refs;
        self
    }

    /// Total order used by [`Scoreboard::best`] and [`Scoreboard::top_k`]:
    /// score descending, then step ascending, then label ascending.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.step.cmp(&other.step))
            .then_with(|| self.label.cmp(&other.label))
    }
}

/// Outcome of [`Scoreboard::insert`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Added,
    /// The label was already on the board; the existing entry was kept.
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scoreboard {
    pub neuron: NeuronAddress,
    entries: Vec<ScoreboardEntry>,
    proposal_history: Vec<ConceptLabel>,
}

impl Scoreboard {
    pub fn new(neuron: NeuronAddress) -> Self {
        Self {
            neuron,
            entries: Vec::new(),
            proposal_history: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[ScoreboardEntry] {
        &self.entries
    }

    pub fn proposal_history(&self) -> &[ConceptLabel] {
        &self.proposal_history
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label: &ConceptLabel) -> Option<&ScoreboardEntry> {
        self.entries.iter().find(|e| &e.label == label)
    }

    pub fn contains(&self, label: &ConceptLabel) -> bool {
        self.get(label).is_some()
    }

    /// Records a label emitted by the proposer without scoring it, e.g. when
    /// synthesis failed after the proposal was made.
    pub fn record_proposal(&mut self, label: ConceptLabel) {
        self.proposal_history.push(label);
    }

    /// Appends `entry` unless its label is already present. Non-predefined
    /// entries are recorded in the proposal history either way.
    pub fn insert(&mut self, entry: ScoreboardEntry) -> InsertOutcome {
        if entry.origin != Origin::Predefined {
            self.proposal_history.push(entry.label.clone());
        }
        if self.contains(&entry.label) {
            return InsertOutcome::Duplicate;
        }
        debug_assert!(self
            .entries
            .last()
            .is_none_or(|last| last.step <= entry.step));
        self.entries.push(entry);
        InsertOutcome::Added
    }

    pub fn best(&self) -> Result<&ScoreboardEntry> {
        self.entries
            .iter()
            .min_by(|a, b| a.rank_cmp(b))
            .ok_or(LineError::EmptyScoreboard)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best().ok().map(|e| e.score)
    }

    /// The `k` best entries in rank order (all entries if fewer than `k`).
    pub fn top_k(&self, k: usize) -> Vec<&ScoreboardEntry> {
        let mut sorted = self.ranked();
        sorted.truncate(k);
        sorted
    }

    /// All entries in rank order.
    pub fn ranked(&self) -> Vec<&ScoreboardEntry> {
        let mut sorted: Vec<_> = self.entries.iter().collect();
        sorted.sort_by(|a, b| a.rank_cmp(b));
        sorted
    }

    /// Labels the proposer has already emitted, deduplicated, in order of
    /// first proposal. Predefined-only labels are not included.
    pub fn forbidden_set(&self) -> IndexSet<ConceptLabel> {
        self.proposal_history.iter().cloned().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scoreboard serialization is infallible")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}
