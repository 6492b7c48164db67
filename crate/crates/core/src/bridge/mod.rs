// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON-over-HTTP client for the model bridge, plus provider adapters that
//! route the engine's chat, image, activation and edit calls through it.
//!
//! Endpoints: `POST /v1/chat`, `/v1/images`, `/v1/activations`, `/v1/edit`.
//! Images travel as `{b64, media_type}`; errors as `{error: {code, message}}`
//! with a non-2xx status. Only plain HTTP is supported.

pub mod stub;
pub mod wire;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::activation::{DatasetSource, VisionProvider};
use crate::error::{LineError, Result};
use crate::eval::EditProvider;
use crate::proposer::{CallContext, ChatOptions, LlmProvider};
use crate::synthesis::{ImagePayload, ImageRef, PromptSpec, T2iProvider};
use wire::*;

/// Retry schedule: `attempts` tries in total, waiting `backoff_ms`,
/// `2 * backoff_ms`, ... between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            backoff_ms: 200,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.attempts) {
            return Err(LineError::Config("retry attempts must be in 1..=16".into()));
        }
        if self.backoff_ms == 0 {
            return Err(LineError::Config(
                "retry backoff_ms must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Waits before attempts `2..=attempts`.
    pub fn delays(&self) -> Vec<Duration> {
        (0..self.attempts.saturating_sub(1))
            .map(|i| Duration::from_millis(self.backoff_ms << i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelEndpoint {
    pub base_url: String,
    /// Bearer token; read from the environment, never from config files.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    /// Largest request body the client will send.
    pub max_payload_bytes: usize,
}

impl Default for ModelEndpoint {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8765".into(),
            api_key: None,
            timeout_ms: 120_000,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            max_payload_bytes: 32 << 20,
        }
    }
}

impl ModelEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(LineError::Config("timeout_ms must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(LineError::Config("max_in_flight must be positive".into()));
        }
        if !self.base_url.starts_with("http://") {
            return Err(LineError::Config(format!(
                "bridge url {:?} must start with http://",
                self.base_url
            )));
        }
        self.retry.validate()
    }
}

/// Counting semaphore.
#[derive(Debug)]
struct Gate {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(max: usize) -> Self {
        Self {
            max,
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("gate poisoned");
        while *used >= self.max {
            used = self.freed.wait(used).expect("gate poisoned");
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("gate poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Chat,
    Images,
    Activations,
    Edit,
}

impl Route {
    pub const ALL: [Route; 4] = [Route::Chat, Route::Images, Route::Activations, Route::Edit];

    pub fn path(self) -> &'static str {
        match self {
            Route::Chat => "/v1/chat",
            Route::Images => "/v1/images",
            Route::Activations => "/v1/activations",
            Route::Edit => "/v1/edit",
        }
    }
}

/// Blocking bridge client, shareable across threads. Each route has its own
/// in-flight limit of `max_in_flight`.
pub struct BridgeClient {
    endpoint: ModelEndpoint,
    agent: ureq::Agent,
    gates: [Gate; 4],
}

fn transport(e: ureq::Error) -> LineError {
    match e {
        ureq::Error::BodyExceedsLimit(n) => {
            LineError::Protocol(format!("response body exceeds {n} bytes"))
        }
        e => LineError::Provider {
            status: None,
            message: e.to_string(),
            retryable: true,
        },
    }
}

fn excerpt(text: &str) -> String {
    let mut s: String = text.chars().take(200).collect();
    if s.len() < text.len() {
        s.push_str("...");
    }
    s
}

impl BridgeClient {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(endpoint.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let n = endpoint.max_in_flight;
        Ok(Self {
            endpoint,
            agent,
            gates: [Gate::new(n), Gate::new(n), Gate::new(n), Gate::new(n)],
        })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    fn post_once(&self, route: Route, body: &str) -> Result<String> {
        let url = format!(
            "{}{}",
            self.endpoint.base_url.trim_end_matches('/'),
            route.path()
        );
        let mut req = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.endpoint.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(self.endpoint.max_payload_bytes as u64 * 2)
            .read_to_string()
            .map_err(transport)?;
        if (200..300).contains(&status) {
            return Ok(text);
        }
        if status == 413 {
            return Err(LineError::PayloadTooLarge {
                size: body.len(),
                limit: self.endpoint.max_payload_bytes,
            });
        }
        let message = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(e) => format!("{}: {}", e.error.code, e.error.message),
            Err(_) => excerpt(&text),
        };
        Err(LineError::Provider {
            status: Some(status),
            message: format!("{} {}", route.path(), message),
            retryable: status >= 500 || status == 429,
        })
    }

    fn call<Q: Serialize, R: DeserializeOwned>(&self, route: Route, request: &Q) -> Result<R> {
        let body = serde_json::to_string(request)?;
        if body.len() > self.endpoint.max_payload_bytes {
            return Err(LineError::PayloadTooLarge {
                size: body.len(),
                limit: self.endpoint.max_payload_bytes,
            });
        }
        let _permit = self.gates[route as usize].acquire();
        let delays = self.endpoint.retry.delays();
        let mut attempt = 0;
        loop {
            match self.post_once(route, &body) {
                Ok(text) => {
                    return serde_json::from_str(&text).map_err(|e| {
                        LineError::Protocol(format!("{} response: {e}", route.path()))
                    })
                }
                Err(e) if e.is_retryable() && attempt < delays.len() => {
                    log::debug!("{} attempt {} failed: {e}", route.path(), attempt + 1);
                    std::thread::sleep(delays[attempt]);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn chat(&self, prompt: &str, options: &ChatOptions) -> Result<String> {
        let req = ChatRequest {
            prompt: prompt.to_string(),
            temperature: options.temperature,
            top_p: options.top_p,
            seed: options.seed,
            max_tokens: options.max_tokens,
        };
        Ok(self.call::<_, ChatResponse>(Route::Chat, &req)?.text)
    }

    /// One validated payload per prompt, in order.
    pub fn images(&self, prompts: &[WirePrompt]) -> Result<Vec<WireImage>> {
        let req = ImagesRequest {
            prompts: prompts.to_vec(),
            options: serde_json::Map::new(),
        };
        let resp: ImagesResponse = self.call(Route::Images, &req)?;
        if resp.images.len() != prompts.len() {
            return Err(LineError::Protocol(format!(
                "/v1/images returned {} images for {} prompts",
                resp.images.len(),
                prompts.len()
            )));
        }
        for img in &resp.images {
            img.decode()?;
        }
        Ok(resp.images)
    }

    /// `|images| x |indices|` pooled activations.
    pub fn activations(
        &self,
        images: &[WireImage],
        layer: &str,
        indices: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Err(LineError::EmptyActivation);
        }
        let req = ActivationsRequest {
            images: images.to_vec(),
            layer: layer.to_string(),
            indices: indices.to_vec(),
        };
        let resp: ActivationsResponse = self.call(Route::Activations, &req)?;
        if resp.activations.len() != images.len()
            || resp.activations.iter().any(|r| r.len() != indices.len())
        {
            return Err(LineError::Protocol(format!(
                "/v1/activations returned a matrix of the wrong shape for {}x{}",
                images.len(),
                indices.len()
            )));
        }
        if let Some(i) = resp
            .activations
            .iter()
            .flatten()
            .position(|v| !v.is_finite())
        {
            return Err(LineError::NonFiniteActivation(i));
        }
        Ok(resp.activations)
    }

    pub fn edit(&self, image: &WireImage, instruction: &str) -> Result<WireImage> {
        let req = EditRequest {
            image: image.clone(),
            instruction: instruction.to_string(),
        };
        let resp: EditResponse = self.call(Route::Edit, &req)?;
        resp.image.decode()?;
        Ok(resp.image)
    }
}

fn to_wire(image: &ImageRef) -> Result<WireImage> {
    match &image.payload {
        ImagePayload::Encoded { media_type, bytes } => Ok(WireImage::encode(media_type, bytes)),
        _ => Err(LineError::Protocol(format!(
            "image {:?} has no encoded bytes to send to the bridge",
            image.id
        ))),
    }
}

fn from_wire(id: String, image: &WireImage) -> Result<ImageRef> {
    let (media_type, bytes) = image.decode()?;
    Ok(ImageRef::encoded(id, media_type, bytes))
}

pub struct BridgeLlm(pub Arc<BridgeClient>);

impl LlmProvider for BridgeLlm {
    fn chat(&self, prompt: &str, options: &ChatOptions, _ctx: &CallContext) -> Result<String> {
        self.0.chat(prompt, options)
    }
}

pub struct BridgeT2i(pub Arc<BridgeClient>);

impl T2iProvider for BridgeT2i {
    fn generate(&self, prompts: &[PromptSpec]) -> Result<Vec<ImageRef>> {
        let wire: Vec<WirePrompt> = prompts
            .iter()
            .map(|p| WirePrompt {
                text: p.rendered.clone(),
                seed: p.seed,
            })
            .collect();
        let images = self.0.images(&wire)?;
        prompts
            .iter()
            .zip(&images)
            .map(|(p, img)| from_wire(format!("{}#{:016x}", p.concept, p.seed), img))
            .collect()
    }
}

/// Activation extraction over the bridge. Layer widths come from
/// configuration; requests are split into chunks of `chunk` images.
pub struct BridgeVision {
    pub client: Arc<BridgeClient>,
    pub layer_widths: BTreeMap<String, usize>,
    pub chunk: usize,
}

impl VisionProvider for BridgeVision {
    fn layer_width(&self, layer: &str) -> Result<usize> {
        self.layer_widths
            .get(layer)
            .copied()
            .ok_or_else(|| LineError::UnknownLayer {
                layer: layer.to_string(),
                available: self.layer_widths.keys().cloned().collect(),
            })
    }

    fn activations(
        &self,
        images: &[ImageRef],
        layer: &str,
        indices: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        self.layer_width(layer)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.chunk.max(1)) {
            let wire = chunk.iter().map(to_wire).collect::<Result<Vec<_>>>()?;
            out.extend(self.client.activations(&wire, layer, indices)?);
        }
        Ok(out)
    }
}

pub struct BridgeEditor(pub Arc<BridgeClient>);

impl EditProvider for BridgeEditor {
    fn edit(&self, image: &ImageRef, instruction: &str) -> Result<ImageRef> {
        let edited = self.0.edit(&to_wire(image)?, instruction)?;
        from_wire(format!("{}~edit", image.id), &edited)
    }
}

/// Natural images laid out as `<root>/<class>/<file>`; files that are not
/// PNG or JPEG are skipped.
pub struct DirDataset {
    root: PathBuf,
    id: String,
}

impl DirDataset {
    pub fn open(root: impl Into<PathBuf>, id: Option<String>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(LineError::Config(format!(
                "dataset directory {} not found",
                root.display()
            )));
        }
        let id = id.unwrap_or_else(|| {
            root.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        });
        Ok(Self { root, id })
    }

    fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() == want_dirs {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        Ok(names)
    }
}

impl DatasetSource for DirDataset {
    fn id(&self) -> &str {
        &self.id
    }

    fn classes(&self) -> Vec<String> {
        Self::sorted_entries(&self.root, true).unwrap_or_default()
    }

    fn images(&self, class: &str) -> Result<Vec<ImageRef>> {
        let dir = self.root.join(class);
        let mut out = Vec::new();
        for name in Self::sorted_entries(&dir, false)? {
            let bytes = std::fs::read(dir.join(&name))?;
            if let Some(media_type) = sniff_media_type(&bytes) {
                out.push(ImageRef::encoded(
                    format!("{class}/{name}"),
                    media_type,
                    bytes,
                ));
            }
        }
        Ok(out)
    }
}
