// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixture replay: recorded LLM transcripts, initialization matrices, and
//! per-concept activations stand in for every model, so a recorded run can
//! be reproduced offline.
//!
//! Synthetic images are handles `"<concept>\u{1f}<position>"`; the replay
//! vision model looks the activation up by concept and position within the
//! batch.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::activation::{FixedInit, InitMatrix, NeuronAddress, VisionProvider};
use crate::engine::{Providers, RunConfig};
use crate::error::{LineError, Result};
use crate::proposer::{ChatOptions, ForbiddenPolicy, LlmProposer, ScriptedLlm, TranscriptEntry};
use crate::scoreboard::normalize_label;
use crate::synthesis::{ImageCache, ImagePayload, ImageRef, PromptSpec, T2iProvider};

pub const FIXTURE_FORMAT: &str = "line-replay/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayInit {
    pub classes: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayNeuron {
    pub neuron: NeuronAddress,
    pub init: ReplayInit,
    pub transcript: Vec<TranscriptEntry>,
    /// Activation of this neuron on image `i` of each concept's batch.
    pub concept_activations: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayFixture {
    pub format: String,
    pub layer_widths: BTreeMap<String, usize>,
    /// Settings of the recorded run; command-line overrides still apply.
    pub config: RunConfig,
    pub neurons: Vec<ReplayNeuron>,
}

impl ReplayFixture {
    pub fn from_json(text: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(text)?;
        if f.format != FIXTURE_FORMAT {
            return Err(LineError::Config(format!(
                "unsupported replay fixture format {:?}, expected {FIXTURE_FORMAT:?}",
                f.format
            )));
        }
        for n in &f.neurons {
            let width =
                f.layer_widths
                    .get(&n.neuron.layer)
                    .ok_or_else(|| LineError::UnknownLayer {
                        layer: n.neuron.layer.clone(),
                        available: f.layer_widths.keys().cloned().collect(),
                    })?;
            if n.neuron.index >= *width {
                return Err(LineError::Config(format!(
                    "fixture neuron {} exceeds layer width {width}",
                    n.neuron
                )));
            }
        }
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn neurons(&self) -> Vec<NeuronAddress> {
        self.neurons.iter().map(|n| n.neuron.clone()).collect()
    }

    /// Builds the replay providers. `policy` is normally
    /// [`ForbiddenPolicy::Accept`] so recorded repeats replay as they happened.
    pub fn providers(
        &self,
        max_retries: usize,
        policy: ForbiddenPolicy,
    ) -> Result<ReplayProviders> {
        let mut matrices = HashMap::new();
        let mut llm = ScriptedLlm::default();
        let mut acts = HashMap::new();
        for n in &self.neurons {
            matrices.insert(
                n.neuron.clone(),
                InitMatrix::new(n.init.rows.clone(), n.init.classes.clone())?,
            );
            llm = llm.with_neuron(n.neuron.clone(), n.transcript.clone());
            let mut per_concept = HashMap::new();
            for (concept, values) in &n.concept_activations {
                per_concept.insert(normalize_label(concept)?.to_string(), values.clone());
            }
            acts.insert(n.neuron.clone(), per_concept);
        }
        Ok(ReplayProviders {
            init: FixedInit::new(matrices),
            t2i: ReplayT2i,
            vision: ReplayVision {
                widths: self.layer_widths.clone(),
                activations: acts,
            },
            proposer: LlmProposer {
                llm: Arc::new(llm),
                max_retries,
                options: ChatOptions::default(),
                policy,
            },
            cache: ImageCache::in_memory(),
        })
    }
}

pub struct ReplayProviders {
    pub init: FixedInit,
    pub t2i: ReplayT2i,
    pub vision: ReplayVision,
    pub proposer: LlmProposer,
    pub cache: ImageCache,
}

impl ReplayProviders {
    pub fn providers(&self) -> Providers<'_> {
        Providers {
            proposer: &self.proposer,
            t2i: &self.t2i,
            vision: &self.vision,
            init: &self.init,
            cache: &self.cache,
        }
    }
}

const SEP: char = '\u{1f}';

#[derive(Debug, Clone, Copy, Default)]
pub struct ReplayT2i;

impl T2iProvider for ReplayT2i {
    fn generate(&self, prompts: &[PromptSpec]) -> Result<Vec<ImageRef>> {
        Ok(prompts
            .iter()
            .enumerate()
            .map(|(i, p)| ImageRef::handle(format!("{}{SEP}{i}", p.concept)))
            .collect())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReplayVision {
    widths: BTreeMap<String, usize>,
    activations: HashMap<NeuronAddress, HashMap<String, Vec<f64>>>,
}

impl VisionProvider for ReplayVision {
    fn layer_width(&self, layer: &str) -> Result<usize> {
        self.widths
            .get(layer)
            .copied()
            .ok_or_else(|| LineError::UnknownLayer {
                layer: layer.to_string(),
                available: self.widths.keys().cloned().collect(),
            })
    }

    fn activations(
        &self,
        images: &[ImageRef],
        layer: &str,
        indices: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        self.layer_width(layer)?;
        images
            .iter()
            .map(|img| {
                let ImagePayload::Handle = img.payload else {
                    return Err(LineError::Protocol(format!("replay vision needs handles, got {:?}", img.id)));
                };
                let (concept, pos) = img
                    .id
                    .split_once(SEP)
                    .and_then(|(c, p)| Some((c, p.parse::<usize>().ok()?)))
                    .ok_or_else(|| LineError::Protocol(format!("unrecognized replay image {:?}", img.id)))?;
                indices
                    .iter()
                    .map(|&index| {
                        let neuron = NeuronAddress::new(layer, index);
                        self.activations
                            .get(&neuron)
                            .and_then(|m| m.get(concept))
                            .and_then(|v| v.get(pos))
                            .copied()
                            .ok_or_else(|| LineError::provider(format!("no recorded activation of {neuron} for {concept:?} image {pos}"), false))
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposer::TranscriptStep;

    fn fixture() -> ReplayFixture {
        ReplayFixture {
            format: FIXTURE_FORMAT.into(),
            layer_widths: [("l".to_string(), 4)].into(),
            config: RunConfig {
                iterations: 1,
                batch_size: 2,
                init_top: 1,
                init_random: 0,
                init_classes: 2,
                init_images: 1,
                ..RunConfig::default()
            },
            neurons: vec![ReplayNeuron {
                neuron: NeuronAddress::new("l", 2),
                init: ReplayInit {
                    classes: vec!["cat".into(), "dog".into()],
                    rows: vec![vec![0.5], vec![0.25]],
                },
                transcript: vec![
                    TranscriptEntry {
                        step: TranscriptStep::Loop(1),
                        raw_response: "<answer>Red Fox</answer>".into(),
                    },
                    TranscriptEntry {
                        step: TranscriptStep::Summary,
                        raw_response: "<answer>animal</answer>".into(),
                    },
                ],
                concept_activations: [
                    ("red fox".to_string(), vec![1.0, 2.0]),
                    ("animal".to_string(), vec![0.0, 0.5]),
                ]
                .into(),
            }],
        }
    }

    #[test]
    fn replays_recorded_run() {
        let f = fixture();
        let p = f.providers(3, ForbiddenPolicy::Accept).unwrap();
        let r =
            crate::engine::explain_neuron(&f.config, &f.neurons[0].neuron, p.providers()).unwrap();
        assert_eq!(r.best_label.as_str(), "red fox");
        assert_eq!(r.best_score, 1.5);
        assert_eq!(r.scoreboard.len(), 3);
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let f = fixture();
        let text = serde_json::to_string(&f).unwrap();
        assert_eq!(ReplayFixture::from_json(&text).unwrap(), f);
        let mut bad = f.clone();
        bad.format = "other".into();
        assert!(ReplayFixture::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
        let mut bad = f;
        bad.neurons[0].neuron.index = 9;
        assert!(ReplayFixture::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
    }

    #[test]
    fn missing_activation_is_provider_error() {
        let f = fixture();
        let p = f.providers(3, ForbiddenPolicy::Accept).unwrap();
        let imgs = p
            .t2i
            .generate(&crate::synthesis::build_prompts(
                &normalize_label("owl").unwrap(),
                1,
                0,
            ))
            .unwrap();
        assert!(matches!(
            p.vision.activations(&imgs, "l", &[2]),
            Err(LineError::Provider { .. })
        ));
        assert!(matches!(
            p.vision.activations(&imgs, "x", &[2]),
            Err(LineError::UnknownLayer { .. })
        ));
    }
}
