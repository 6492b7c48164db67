// SPDX-License-Identifier: MIT OR Apache-2.0

//! Iterative, black-box neuron labeling for vision models.
//!
//! An LLM proposes concept labels from a per-neuron scoreboard, a
//! text-to-image model renders each concept, the target model's activations
//! on those renders score it, and the scoreboard feeds the next proposal.
//! A final summary iteration abstracts the three best concepts into one.
//!
//! Every external model sits behind a trait ([`proposer::LlmProvider`],
//! [`synthesis::T2iProvider`], [`activation::VisionProvider`],
//! [`eval::EditProvider`]). Three families of implementations ship here:
//! a deterministic simulation world ([`simworld`]), fixture replay
//! ([`replay`]), and an HTTP bridge to real models ([`bridge`]).

pub mod activation;
pub mod bridge;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod io;
pub mod proposer;
pub mod replay;
pub mod report;
pub mod scoreboard;
pub mod scoring;
pub mod simworld;
pub mod synthesis;

pub use activation::NeuronAddress;
pub use engine::{ExplanationResult, RunConfig};
pub use error::{LineError, Result};
pub use scoreboard::{normalize_label, ConceptLabel, Origin, Scoreboard, ScoreboardEntry};

/// Serde adapter that writes an `f64` as a JSON number with exactly six
/// decimal digits, so serialized artifacts are byte-stable.
pub(crate) mod fixed6 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use serde_json::value::RawValue;

    pub fn to_raw(value: f64) -> Box<RawValue> {
        let text = if value.is_finite() {
            format!("{value:.6}")
        } else {
            "null".to_string()
        };
        RawValue::from_string(text).expect("formatted float is valid JSON")
    }

    pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
        to_raw(*value).serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
        f64::deserialize(deserializer)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(values: &[f64], serializer: S) -> Result<S::Ok, S::Error> {
            let raws: Vec<_> = values.iter().map(|v| to_raw(*v)).collect();
            raws.serialize(serializer)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            deserializer: D,
        ) -> Result<Vec<f64>, D::Error> {
            Vec::<f64>::deserialize(deserializer)
        }
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(
            value: &Option<f64>,
            serializer: S,
        ) -> Result<S::Ok, S::Error> {
            value.map(to_raw).serialize(serializer)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            deserializer: D,
        ) -> Result<Option<f64>, D::Error> {
            Option::<f64>::deserialize(deserializer)
        }
    }
}
