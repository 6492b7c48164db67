// SPDX-License-Identifier: MIT OR Apache-2.0

//! Text-to-image prompt construction, per-concept seeding, and the shared
//! concept-image cache.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LineError, Result};
use crate::io::atomic_write;
use crate::scoreboard::ConceptLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Angle {
    #[serde(rename = "extreme close-up")]
    ExtremeCloseUp,
    #[serde(rename = "wide angle shot")]
    WideAngleShot,
    #[serde(rename = "aerial view")]
    AerialView,
    #[serde(rename = "low angle")]
    LowAngle,
}

impl Angle {
    pub const ALL: [Angle; 4] = [
        Angle::ExtremeCloseUp,
        Angle::WideAngleShot,
        Angle::AerialView,
        Angle::LowAngle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Angle::ExtremeCloseUp => "extreme close-up",
            Angle::WideAngleShot => "wide angle shot",
            Angle::AerialView => "aerial view",
            Angle::LowAngle => "low angle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lighting {
    #[serde(rename = "cinematic lighting")]
    Cinematic,
    #[serde(rename = "natural sunlight")]
    NaturalSunlight,
    #[serde(rename = "studio lighting")]
    Studio,
}

impl Lighting {
    pub const ALL: [Lighting; 3] = [
        Lighting::Cinematic,
        Lighting::NaturalSunlight,
        Lighting::Studio,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Lighting::Cinematic => "cinematic lighting",
            Lighting::NaturalSunlight => "natural sunlight",
            Lighting::Studio => "studio lighting",
        }
    }
}

/// One text-to-image request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub concept: ConceptLabel,
    pub angle: Angle,
    pub lighting: Lighting,
    pub seed: u64,
    pub rendered: String,
}

impl PromptSpec {
    pub fn new(concept: ConceptLabel, angle: Angle, lighting: Lighting, seed: u64) -> Self {
        let rendered = render_t2i_prompt(&concept, angle, lighting);
        Self {
            concept,
            angle,
            lighting,
            seed,
            rendered,
        }
    }
}

pub fn render_t2i_prompt(concept: &ConceptLabel, angle: Angle, lighting: Lighting) -> String {
    format!(
        "A realistic photo of a {}, {}, {}",
        concept,
        angle.as_str(),
        lighting.as_str()
    )
}

/// Stable 64-bit seed for a concept within a run: the first eight bytes
/// (little-endian) of SHA-256 over a domain tag, the normalized label, and
/// the salt.
pub fn seed_for(concept: &ConceptLabel, run_salt: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"line/concept-seed/v1\0");
    hasher.update(concept.as_str().as_bytes());
    hasher.update([0u8]);
    hasher.update(run_salt.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// `n` prompts for `concept`; modifiers drawn uniformly with replacement,
/// image `i` seeded with `seed + i`.
pub fn build_prompts(concept: &ConceptLabel, n: usize, seed: u64) -> Vec<PromptSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let angle = Angle::ALL[rng.random_range(0..Angle::ALL.len())];
            let lighting = Lighting::ALL[rng.random_range(0..Lighting::ALL.len())];
            PromptSpec::new(
                concept.clone(),
                angle,
                lighting,
                seed.wrapping_add(i as u64),
            )
        })
        .collect()
}

/// Image content as seen by the vision provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImagePayload {
    /// Simulation embedding vector.
    Embedding { vector: Vec<f64> },
    /// Encoded image bytes (PNG or JPEG).
    Encoded {
        media_type: String,
        #[serde(skip)]
        bytes: Vec<u8>,
    },
    /// No content; the id alone identifies the image (fixture replay).
    Handle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub payload: ImagePayload,
}

impl ImageRef {
    pub fn embedding(id: impl Into<String>, vector: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            payload: ImagePayload::Embedding { vector },
        }
    }

    pub fn encoded(id: impl Into<String>, media_type: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            id: id.into(),
            payload: ImagePayload::Encoded {
                media_type: media_type.into(),
                bytes,
            },
        }
    }

    pub fn handle(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            payload: ImagePayload::Handle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub concept: ConceptLabel,
    pub images: Vec<ImageRef>,
    pub prompts: Vec<PromptSpec>,
}

impl ImageBatch {
    pub fn image_ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.id.clone()).collect()
    }
}

pub trait T2iProvider: Send + Sync {
    /// One image per prompt, in prompt order.
    fn generate(&self, prompts: &[PromptSpec]) -> Result<Vec<ImageRef>>;
}

pub fn generate(provider: &dyn T2iProvider, prompts: &[PromptSpec]) -> Result<ImageBatch> {
    let first = prompts
        .first()
        .ok_or_else(|| LineError::Config("cannot generate an empty prompt batch".into()))?;
    let images = provider.generate(prompts)?;
    if images.len() != prompts.len() {
        return Err(LineError::Protocol(format!(
            "provider returned {} images for {} prompts",
            images.len(),
            prompts.len()
        )));
    }
    Ok(ImageBatch {
        concept: first.concept.clone(),
        images,
        prompts: prompts.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    concept: ConceptLabel,
    run_salt: u64,
}

type Slot = Arc<Mutex<Option<ImageBatch>>>;

/// Concept-image cache keyed by (normalized label, run salt).
///
/// Readers of distinct keys never block each other; the first writer for a
/// key holds that key's slot while generating, so concurrent requests for
/// the same concept wait and then hit.
///
/// With a directory attached, batches persist as content-addressed entries
/// `<dir>/<hex seed>/manifest.json` plus payload files.
#[derive(Debug, Default)]
pub struct ImageCache {
    slots: Mutex<HashMap<CacheKey, Slot>>,
    dir: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    concept: ConceptLabel,
    run_salt: u64,
    prompts: Vec<PromptSpec>,
    images: Vec<ManifestImage>,
}

#[derive(Serialize, Deserialize)]
struct ManifestImage {
    id: String,
    payload: ImagePayload,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    file: Option<String>,
}

impl ImageCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            slots: Mutex::default(),
            dir: Some(dir.into()),
        }
    }

    /// Returns the cached batch for `concept`, generating `n` images on a
    /// miss. The flag is `true` on a hit.
    pub fn get_or_generate(
        &self,
        concept: &ConceptLabel,
        run_salt: u64,
        n: usize,
        provider: &dyn T2iProvider,
    ) -> Result<(ImageBatch, bool)> {
        let key = CacheKey {
            concept: concept.clone(),
            run_salt,
        };
        let slot = {
            let mut slots = self.slots.lock().expect("cache map poisoned");
            slots.entry(key).or_default().clone()
        };
        let mut guard = slot.lock().expect("cache slot poisoned");
        if let Some(batch) = guard.as_ref().filter(|b| b.images.len() == n) {
            return Ok((batch.clone(), true));
        }
        let seed = seed_for(concept, run_salt);
        if let Some(batch) = self
            .load(concept, run_salt, seed)
            .filter(|b| b.images.len() == n)
        {
            *guard = Some(batch.clone());
            return Ok((batch, true));
        }
        let batch = generate(provider, &build_prompts(concept, n, seed))?;
        self.store(&batch, run_salt, seed)?;
        *guard = Some(batch.clone());
        Ok((batch, false))
    }

    pub fn len(&self) -> usize {
        let slots = self.slots.lock().expect("cache map poisoned");
        slots
            .values()
            .filter(|s| s.lock().map(|g| g.is_some()).unwrap_or(false))
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn entry_dir(&self, seed: u64) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{seed:016x}")))
    }

    fn load(&self, concept: &ConceptLabel, run_salt: u64, seed: u64) -> Option<ImageBatch> {
        let dir = self.entry_dir(seed)?;
        let text = fs::read_to_string(dir.join("manifest.json")).ok()?;
        let manifest: Manifest = match serde_json::from_str(&text) {
            Ok(m) => m,
            Err(e) => {
                log::warn!(
                    "ignoring unreadable cache manifest in {}: {e}",
                    dir.display()
                );
                return None;
            }
        };
        if &manifest.concept != concept || manifest.run_salt != run_salt {
            return None;
        }
        let mut images = Vec::with_capacity(manifest.images.len());
        for img in manifest.images {
            let payload = match (img.payload, img.file) {
                (ImagePayload::Encoded { media_type, .. }, Some(file)) => ImagePayload::Encoded {
                    media_type,
                    bytes: fs::read(dir.join(file)).ok()?,
                },
                (p, _) => p,
            };
            images.push(ImageRef {
                id: img.id,
                payload,
            });
        }
        Some(ImageBatch {
            concept: manifest.concept,
            images,
            prompts: manifest.prompts,
        })
    }

    fn store(&self, batch: &ImageBatch, run_salt: u64, seed: u64) -> Result<()> {
        let Some(dir) = self.entry_dir(seed) else {
            return Ok(());
        };
        let mut images = Vec::with_capacity(batch.images.len());
        for (i, img) in batch.images.iter().enumerate() {
            let file = match &img.payload {
                ImagePayload::Encoded { media_type, bytes } => {
                    let ext = if media_type == "image/jpeg" {
                        "jpg"
                    } else {
                        "png"
                    };
                    let name = format!("{i}.{ext}");
                    atomic_write(&dir.join(&name), bytes)?;
                    Some(name)
                }
                _ => None,
            };
            images.push(ManifestImage {
                id: img.id.clone(),
                payload: img.payload.clone(),
                file,
            });
        }
        let manifest = Manifest {
            concept: batch.concept.clone(),
            run_salt,
            prompts: batch.prompts.clone(),
            images,
        };
        atomic_write(
            &dir.join("manifest.json"),
            &serde_json::to_vec_pretty(&manifest)?,
        )
    }
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rendered)
    }
}
