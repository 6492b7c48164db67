// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic synthetic universe standing in for the T2I model, the
//! vision model, the natural-image dataset and the image editor.
//!
//! Concepts are unit vectors. A neuron is a hidden unit direction `w` with
//! gain `g`, and its activation on an image embedding `x` is `g * <w, x>`.
//! Every neuron's direction is exactly the vector of its truth label, so the
//! truth label maximizes the expected mean activation over the vocabulary.
//!
//! Vectors are regenerated from the seed; the serialized manifest stores
//! only the construction parameters.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::{
    build_layer_init, DatasetSource, FixedInit, NeuronAddress, VisionProvider,
};
use crate::engine::{explain_layer, LayerRun, Providers, RunConfig};
use crate::error::{LineError, Result};
use crate::eval::{parse_removal_instruction, EditProvider};
use crate::proposer::{SimProposer, SimStrategy};
use crate::scoreboard::{normalize_label, ConceptLabel};
use crate::synthesis::{ImageCache, ImagePayload, ImageRef, PromptSpec, T2iProvider};

const ADJECTIVES: [&str; 20] = [
    "red", "striped", "wooden", "glass", "tiny", "rusty", "golden", "frozen", "woven", "spotted",
    "shiny", "ancient", "floating", "curved", "velvet", "stone", "paper", "neon", "muddy",
    "silver",
];
const NOUNS: [&str; 20] = [
    "lantern", "bridge", "teapot", "feather", "canyon", "violin", "barrel", "kite", "anchor",
    "mitten", "tower", "beetle", "saddle", "compass", "orchard", "helmet", "ladder", "shell",
    "clock", "meadow",
];

/// Construction parameters, also the JSON manifest of a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dim: usize,
    pub vocabulary: usize,
    pub neurons: usize,
    pub layer: String,
    pub noise_sigma: f64,
    pub seed: u64,
    /// The last `truth_pool` vocabulary labels are reserved as neuron truths
    /// and excluded from the dataset classes.
    pub truth_pool: usize,
    pub gain_min: f64,
    pub gain_max: f64,
    /// Reject vocabulary vectors whose |cosine| with an earlier one exceeds this.
    pub max_cosine: f64,
    /// Images available per dataset class.
    pub images_per_class: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            vocabulary: 200,
            neurons: 100,
            layer: "sim".into(),
            noise_sigma: 0.05,
            seed: 0,
            truth_pool: 50,
            gain_min: 1.0,
            gain_max: 3.0,
            max_cosine: 0.95,
            images_per_class: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimNeuron {
    pub address: NeuronAddress,
    pub direction: Vec<f64>,
    pub gain: f64,
    pub truth_label: ConceptLabel,
}

#[derive(Debug, Clone)]
pub struct SimWorld {
    config: SimConfig,
    labels: Vec<ConceptLabel>,
    vectors: HashMap<ConceptLabel, Vec<f64>>,
    neurons: Vec<SimNeuron>,
    neuron_index: HashMap<NeuronAddress, usize>,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws a unit vector whose self dot product is exactly 1.0 in floating
/// point, so `g * <v, v> == g` holds bit-for-bit.
fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim);
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-6 {
            continue;
        }
        let u: Vec<f64> = v.iter().map(|x| x / norm).collect();
        if dot(&u, &u) == 1.0 {
            return u;
        }
    }
}

fn hashed_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn vocabulary_label(i: usize) -> String {
    let adj = ADJECTIVES[i % ADJECTIVES.len()];
    let noun = NOUNS[(i / ADJECTIVES.len()) % NOUNS.len()];
    match i / (ADJECTIVES.len() * NOUNS.len()) {
        0 => format!("{adj} {noun}"),
        r => format!("{adj} {noun} {r}"),
    }
}

impl SimWorld {
    pub fn new(config: SimConfig) -> Result<Self> {
        if config.dim < 2 || config.vocabulary == 0 || config.truth_pool == 0 {
            return Err(LineError::Config(
                "sim world needs dim >= 2 and a non-empty vocabulary".into(),
            ));
        }
        if config.truth_pool >= config.vocabulary {
            return Err(LineError::Config(format!(
                "truth_pool {} must be smaller than vocabulary {}",
                config.truth_pool, config.vocabulary
            )));
        }
        let valid = config.noise_sigma >= 0.0
            && config.gain_min > 0.0
            && config.gain_max >= config.gain_min;
        if !valid {
            return Err(LineError::Config(
                "sim world needs noise_sigma >= 0 and 0 < gain_min <= gain_max".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut labels = Vec::with_capacity(config.vocabulary);
        let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(config.vocabulary);
        for i in 0..config.vocabulary {
            let mut tries = 0;
            let v = loop {
                tries += 1;
                if tries > 10_000 {
                    return Err(LineError::Config(format!(
                        "could not place {} well-separated vectors in dimension {}",
                        config.vocabulary, config.dim
                    )));
                }
                let v = unit_vector(&mut rng, config.dim);
                if accepted
                    .iter()
                    .all(|u| dot(u, &v).abs() <= config.max_cosine)
                {
                    break v;
                }
            };
            accepted.push(v);
            labels.push(normalize_label(&vocabulary_label(i))?);
        }
        let vectors: HashMap<_, _> = labels.iter().cloned().zip(accepted).collect();

        let truth_start = config.vocabulary - config.truth_pool;
        let mut neurons = Vec::with_capacity(config.neurons);
        for i in 0..config.neurons {
            let truth = labels[truth_start + rng.random_range(0..config.truth_pool)].clone();
            let gain = if config.gain_max > config.gain_min {
                rng.random_range(config.gain_min..config.gain_max)
            } else {
                config.gain_min
            };
            neurons.push(SimNeuron {
                address: NeuronAddress::new(config.layer.clone(), i),
                direction: vectors[&truth].clone(),
                gain,
                truth_label: truth,
            });
        }
        let neuron_index = neurons
            .iter()
            .enumerate()
            .map(|(i, n)| (n.address.clone(), i))
            .collect();
        Ok(Self {
            config,
            labels,
            vectors,
            neurons,
            neuron_index,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn noise_sigma(&self) -> f64 {
        self.config.noise_sigma
    }

    pub fn vocabulary(&self) -> &[ConceptLabel] {
        &self.labels
    }

    /// Vocabulary labels used as natural-image dataset classes.
    pub fn dataset_classes(&self) -> &[ConceptLabel] {
        &self.labels[..self.config.vocabulary - self.config.truth_pool]
    }

    pub fn neurons(&self) -> &[SimNeuron] {
        &self.neurons
    }

    pub fn neuron(&self, address: &NeuronAddress) -> Result<&SimNeuron> {
        self.neuron_index
            .get(address)
            .map(|&i| &self.neurons[i])
            .ok_or_else(|| {
                LineError::Config(format!("neuron {address} is not part of the sim world"))
            })
    }

    /// Vocabulary vector, or a deterministic hash embedding for unknown text.
    pub fn embedding(&self, concept: &ConceptLabel) -> Vec<f64> {
        match self.vectors.get(concept) {
            Some(v) => v.clone(),
            None => {
                let mut rng = hashed_rng(&[b"sim/unknown-concept", concept.as_str().as_bytes()]);
                unit_vector(&mut rng, self.config.dim)
            }
        }
    }

    pub fn is_known(&self, concept: &ConceptLabel) -> bool {
        self.vectors.contains_key(concept)
    }

    /// `embedding(concept) + noise_sigma * eps`, `eps ~ N(0, I)` seeded by `seed`.
    pub fn sim_image(&self, concept: &ConceptLabel, seed: u64) -> Vec<f64> {
        let mut v = self.embedding(concept);
        if self.config.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for x in v.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *x += self.config.noise_sigma * e;
            }
        }
        v
    }

    pub fn sim_activation(&self, image: &[f64], neuron: &NeuronAddress) -> Result<f64> {
        let n = self.neuron(neuron)?;
        Ok(n.gain * dot(&n.direction, image))
    }

    /// Noise-free activation of `neuron` on `concept`.
    pub fn expected_activation(
        &self,
        concept: &ConceptLabel,
        neuron: &NeuronAddress,
    ) -> Result<f64> {
        self.sim_activation(&self.embedding(concept), neuron)
    }

    pub fn manifest(&self) -> SimManifest {
        SimManifest {
            config: self.config.clone(),
            labels: self.labels.iter().map(|l| l.to_string()).collect(),
            neurons: self
                .neurons
                .iter()
                .map(|n| SimNeuronSpec {
                    address: n.address.clone(),
                    gain: n.gain,
                    truth_label: n.truth_label.clone(),
                })
                .collect(),
        }
    }
}

/// Serialized world description. Vectors are not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimManifest {
    pub config: SimConfig,
    pub labels: Vec<String>,
    pub neurons: Vec<SimNeuronSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimNeuronSpec {
    pub address: NeuronAddress,
    pub gain: f64,
    pub truth_label: ConceptLabel,
}

impl SimManifest {
    /// Rebuilds the world and checks it matches the recorded labels and neurons.
    pub fn rebuild(&self) -> Result<SimWorld> {
        let world = SimWorld::new(self.config.clone())?;
        if world.manifest() != *self {
            return Err(LineError::Config(
                "sim manifest does not match its regenerated world".into(),
            ));
        }
        Ok(world)
    }
}

fn embedding_of(image: &ImageRef) -> Result<&[f64]> {
    match &image.payload {
        ImagePayload::Embedding { vector } => Ok(vector),
        _ => Err(LineError::Protocol(format!(
            "sim provider needs embedding payloads, got image {:?}",
            image.id
        ))),
    }
}

/// Text-to-image stand-in: each prompt yields `sim_image(concept, prompt.seed)`.
#[derive(Debug, Clone)]
pub struct SimT2i<'w> {
    pub world: &'w SimWorld,
}

impl T2iProvider for SimT2i<'_> {
    fn generate(&self, prompts: &[PromptSpec]) -> Result<Vec<ImageRef>> {
        Ok(prompts
            .iter()
            .map(|p| {
                ImageRef::embedding(
                    format!("sim:{}:{:016x}", p.concept, p.seed),
                    self.world.sim_image(&p.concept, p.seed),
                )
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct SimVision<'w> {
    pub world: &'w SimWorld,
}

impl VisionProvider for SimVision<'_> {
    fn layer_width(&self, layer: &str) -> Result<usize> {
        if layer == self.world.config.layer {
            Ok(self.world.neurons.len())
        } else {
            Err(LineError::UnknownLayer {
                layer: layer.to_string(),
                available: vec![self.world.config.layer.clone()],
            })
        }
    }

    fn activations(
        &self,
        images: &[ImageRef],
        layer: &str,
        indices: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        let width = self.layer_width(layer)?;
        if images.is_empty() {
            return Err(LineError::EmptyActivation);
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= width) {
            return Err(LineError::Config(format!(
                "neuron index {bad} out of range for layer {layer:?}"
            )));
        }
        images
            .iter()
            .map(|img| {
                let x = embedding_of(img)?;
                Ok(indices
                    .iter()
                    .map(|&i| {
                        let n = &self.world.neurons[i];
                        n.gain * dot(&n.direction, x)
                    })
                    .collect())
            })
            .collect()
    }
}

/// Natural-image stand-in: class `c` image `j` is `sim_image(c, seed(c, j))`.
#[derive(Debug, Clone)]
pub struct SimDataset<'w> {
    world: &'w SimWorld,
    id: String,
}

impl<'w> SimDataset<'w> {
    pub fn new(world: &'w SimWorld) -> Self {
        Self {
            world,
            id: format!("sim-{}", world.config.seed),
        }
    }

    fn image_seed(&self, class: &str, j: usize) -> u64 {
        let mut rng = hashed_rng(&[
            b"sim/dataset",
            &self.world.config.seed.to_le_bytes(),
            class.as_bytes(),
            &(j as u64).to_le_bytes(),
        ]);
        rng.random()
    }
}

impl DatasetSource for SimDataset<'_> {
    fn id(&self) -> &str {
        &self.id
    }

    fn classes(&self) -> Vec<String> {
        self.world
            .dataset_classes()
            .iter()
            .map(|c| c.to_string())
            .collect()
    }

    fn images(&self, class: &str) -> Result<Vec<ImageRef>> {
        let label = normalize_label(class)?;
        if !self.world.dataset_classes().contains(&label) {
            return Err(LineError::Config(format!(
                "{class:?} is not a sim dataset class"
            )));
        }
        Ok((0..self.world.config.images_per_class)
            .map(|j| {
                ImageRef::embedding(
                    format!("{class}/{j:05}"),
                    self.world.sim_image(&label, self.image_seed(class, j)),
                )
            })
            .collect())
    }
}

/// Editor stand-in: removing a concept projects its direction out of the
/// image embedding. An empty or unrecognized instruction leaves the image
/// unchanged.
#[derive(Debug, Clone)]
pub struct SimEditor<'w> {
    pub world: &'w SimWorld,
}

impl EditProvider for SimEditor<'_> {
    fn edit(&self, image: &ImageRef, instruction: &str) -> Result<ImageRef> {
        let x = embedding_of(image)?;
        let Some(concept) = parse_removal_instruction(instruction) else {
            return Ok(image.clone());
        };
        let e = self.world.embedding(&concept);
        let along = dot(x, &e);
        let edited = x.iter().zip(&e).map(|(xi, ei)| xi - along * ei).collect();
        Ok(ImageRef::embedding(
            format!("{}~edit:{concept}", image.id),
            edited,
        ))
    }
}

/// Explains every neuron of `world` with a simulated proposer. The
/// initialization size is clamped to the world's dataset.
pub fn simulate(world: &SimWorld, strategy: SimStrategy, cfg: &RunConfig) -> Result<LayerRun> {
    let dataset = SimDataset::new(world);
    let vision = SimVision { world };
    let t2i = SimT2i { world };
    let cfg = RunConfig {
        init_classes: cfg.init_classes.min(world.dataset_classes().len()),
        init_images: cfg.init_images.min(world.config.images_per_class),
        ..cfg.clone()
    };
    cfg.validate()?;
    let neurons: Vec<NeuronAddress> = world.neurons.iter().map(|n| n.address.clone()).collect();
    let indices: Vec<usize> = neurons.iter().map(|n| n.index).collect();
    let matrices = build_layer_init(
        &vision,
        &dataset,
        &world.config.layer,
        &indices,
        cfg.init_classes,
        cfg.init_images,
    )?;
    let init = FixedInit::new(neurons.iter().cloned().zip(matrices).collect());
    let proposer = SimProposer {
        world: std::sync::Arc::new(world.clone()),
        strategy,
    };
    let cache = ImageCache::in_memory();
    let providers = Providers {
        proposer: &proposer,
        t2i: &t2i,
        vision: &vision,
        init: &init,
        cache: &cache,
    };
    explain_layer(&cfg, &neurons, providers)
}
