// SPDX-License-Identifier: MIT OR Apache-2.0

//! In-process bridge server with deterministic fake models, for tests and
//! offline wiring checks.
//!
//! * chat picks a canned reply by hashing `(prompt, seed)`;
//! * images are 16x16 PNGs derived from `(text, seed)`;
//! * activations apply the published linear map in
//!   `protocol/stub_linear_map.json` to RGB pixels: per pixel then pooled for
//!   `spatial` layers, on the channel means for `flat` layers;
//! * edit returns the input unchanged for an empty instruction, otherwise
//!   XORs pixel bytes with a key derived from the instruction.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tiny_http::{Header, Method, Request, Response, Server};

use super::wire::*;
use crate::activation::{pool, LayerTensor};
use crate::error::{LineError, Result};

pub const LINEAR_MAP_JSON: &str = include_str!("../../../../protocol/stub_linear_map.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Spatial,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubLayer {
    pub kind: LayerKind,
    pub weights: Vec<[f64; 3]>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    pub format: String,
    pub input: String,
    pub layers: BTreeMap<String, StubLayer>,
}

impl LinearMap {
    pub fn published() -> Self {
        serde_json::from_str(LINEAR_MAP_JSON).expect("published stub map is valid")
    }

    pub fn widths(&self) -> BTreeMap<String, usize> {
        self.layers
            .iter()
            .map(|(k, v)| (k.clone(), v.weights.len()))
            .collect()
    }

    /// Pooled activations of `indices` in `layer` for one PNG image.
    pub fn activations(&self, png: &[u8], layer: &str, indices: &[usize]) -> Result<Vec<f64>> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| LineError::UnknownLayer {
                layer: layer.to_string(),
                available: self.layers.keys().cloned().collect(),
            })?;
        let d = l.weights.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
            return Err(LineError::Config(format!(
                "index {bad} out of range for layer {layer:?} of width {d}"
            )));
        }
        let (w, h, pixels) = decode_png_rgb(png)?;
        let unit = |p: &[f64; 3], j: usize| {
            l.bias[j] + (0..3).map(|c| l.weights[j][c] * p[c]).sum::<f64>()
        };
        let pooled = match l.kind {
            LayerKind::Spatial => {
                let mut data = Vec::with_capacity(d * pixels.len());
                for j in 0..d {
                    data.extend(pixels.iter().map(|p| unit(p, j)));
                }
                pool(&LayerTensor::new(vec![d, h, w], data)?, &[d, h, w])?
            }
            LayerKind::Flat => {
                let n = pixels.len() as f64;
                let mut mean = [0.0; 3];
                for p in &pixels {
                    for c in 0..3 {
                        mean[c] += p[c];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let data = (0..d).map(|j| unit(&mean, j)).collect();
                pool(&LayerTensor::new(vec![d], data)?, &[d])?
            }
        };
        Ok(indices.iter().map(|&i| pooled[i]).collect())
    }
}

/// Encodes 8-bit RGB pixels as PNG.
pub fn encode_png(width: u32, height: u32, rgb: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("png header");
        writer.write_image_data(rgb).expect("png data");
    }
    out
}

/// Decodes a PNG to `(width, height, pixels)` with RGB in `[0, 1]`.
pub fn decode_png_rgb(bytes: &[u8]) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let bad = |e: png::DecodingError| LineError::Protocol(format!("undecodable PNG: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| LineError::Protocol("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(LineError::Protocol("indexed PNG after expansion".into()))
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut pixels = Vec::with_capacity(w * h);
    for row in buf[..info.line_size * h].chunks_exact(info.line_size) {
        for px in row[..w * channels].chunks_exact(channels) {
            let f = |v: u8| f64::from(v) / 255.0;
            pixels.push(if channels < 3 {
                [f(px[0]); 3]
            } else {
                [f(px[0]), f(px[1]), f(px[2])]
            });
        }
    }
    Ok((w, h, pixels))
}

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// The stub's image for `(text, seed)`: a base color from the text plus
/// seeded per-pixel noise.
pub fn stub_image(text: &str, seed: u64) -> Vec<u8> {
    let base = digest(&[text.as_bytes()]);
    let mut rng = ChaCha8Rng::from_seed(digest(&[text.as_bytes(), &seed.to_le_bytes()]));
    let mut rgb = Vec::with_capacity(16 * 16 * 3);
    for _ in 0..16 * 16 {
        for c in base.iter().take(3) {
            let noise: i16 = rng.random_range(-24..=24);
            rgb.push((i16::from(*c) + noise).clamp(0, 255) as u8);
        }
    }
    encode_png(16, 16, &rgb)
}

pub fn stub_edit(png: &[u8], instruction: &str) -> Result<Vec<u8>> {
    if instruction.is_empty() {
        return Ok(png.to_vec());
    }
    let (w, h, pixels) = decode_png_rgb(png)?;
    let key = digest(&[instruction.as_bytes()]);
    let rgb: Vec<u8> = pixels
        .iter()
        .flat_map(|p| p.map(|v| (v * 255.0).round() as u8))
        .enumerate()
        .map(|(i, v)| v ^ key[i % key.len()])
        .collect();
    Ok(encode_png(w as u32, h as u32, &rgb))
}

pub const DEFAULT_CANNED: [&str; 6] = [
    "red circle",
    "wooden texture",
    "striped pattern",
    "blue sky",
    "metal object",
    "green leaf",
];

#[derive(Debug, Clone)]
pub struct StubConfig {
    /// Concepts the chat endpoint answers with.
    pub canned: Vec<String>,
    pub max_body_bytes: usize,
    /// Answer the first `fail_first` requests with 503.
    pub fail_first: usize,
    /// Sleep before answering each request.
    pub delay_ms: u64,
    pub threads: usize,
    pub map: LinearMap,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            canned: DEFAULT_CANNED.iter().map(|s| s.to_string()).collect(),
            max_body_bytes: 4 << 20,
            fail_first: 0,
            delay_ms: 0,
            threads: 4,
            map: LinearMap::published(),
        }
    }
}

pub fn stub_chat(canned: &[String], prompt: &str, seed: Option<u64>) -> String {
    let d = digest(&[prompt.as_bytes(), &seed.unwrap_or(0).to_le_bytes()]);
    let pick =
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as usize % canned.len().max(1);
    let concept = canned.get(pick).map(String::as_str).unwrap_or("object");
    format!("<thinking>stub reply {pick}</thinking>\n<answer>{concept}</answer>")
}

struct State {
    config: StubConfig,
    seen: AtomicUsize,
}

/// A running stub; stops when dropped.
pub struct StubServer {
    server: Arc<Server>,
    state: Arc<State>,
    workers: Vec<JoinHandle<()>>,
    url: String,
}

impl StubServer {
    /// Listens on `127.0.0.1` at an ephemeral port.
    pub fn start(config: StubConfig) -> Result<Self> {
        Self::bind("127.0.0.1:0", config)
    }

    pub fn bind(addr: &str, config: StubConfig) -> Result<Self> {
        let server = Arc::new(
            Server::http(addr).map_err(|e| LineError::Config(format!("stub bind {addr}: {e}")))?,
        );
        let port = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| LineError::Config("stub has no IP address".into()))?
            .port();
        let threads = config.threads.max(1);
        let state = Arc::new(State {
            config,
            seen: AtomicUsize::new(0),
        });
        let workers = (0..threads)
            .map(|_| {
                let (server, state) = (server.clone(), state.clone());
                std::thread::spawn(move || {
                    while let Ok(req) = server.recv() {
                        handle(&state, req);
                    }
                })
            })
            .collect();
        Ok(Self {
            server,
            state,
            workers,
            url: format!("http://127.0.0.1:{port}"),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Requests received so far, including failed ones.
    pub fn requests_seen(&self) -> usize {
        self.state.seen.load(Ordering::SeqCst)
    }

    /// Blocks until the process is killed.
    pub fn wait(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn json_response(status: u16, body: &impl Serialize) -> Response<Cursor<Vec<u8>>> {
    let bytes = serde_json::to_vec(body).expect("response serialization is infallible");
    Response::from_data(bytes)
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("static header"))
}

fn error(status: u16, code: &str, message: impl Into<String>) -> (u16, serde_json::Value) {
    let body = ErrorBody {
        error: ErrorDetail {
            code: code.into(),
            message: message.into(),
        },
    };
    (status, serde_json::to_value(body).expect("error body"))
}

type Reply = std::result::Result<serde_json::Value, (u16, serde_json::Value)>;

fn handle(state: &State, mut req: Request) {
    let n = state.seen.fetch_add(1, Ordering::SeqCst);
    let cfg = &state.config;
    if cfg.delay_ms > 0 {
        std::thread::sleep(Duration::from_millis(cfg.delay_ms));
    }
    let (status, body) = if n < cfg.fail_first {
        error(503, "unavailable", "injected failure")
    } else {
        match route(cfg, &mut req) {
            Ok(v) => (200, v),
            Err(e) => e,
        }
    };
    let _ = req.respond(json_response(status, &body));
}

fn parse<T: for<'de> Deserialize<'de>>(
    body: &[u8],
) -> std::result::Result<T, (u16, serde_json::Value)> {
    serde_json::from_slice(body).map_err(|e| error(400, "invalid_request", e.to_string()))
}

fn decode_png(img: &WireImage) -> std::result::Result<Vec<u8>, (u16, serde_json::Value)> {
    let (media_type, bytes) = img
        .decode()
        .map_err(|e| error(400, "invalid_image", e.to_string()))?;
    if media_type != PNG {
        return Err(error(
            415,
            "unsupported_media_type",
            "the stub decodes PNG only",
        ));
    }
    Ok(bytes)
}

fn ok(v: impl Serialize) -> Reply {
    Ok(serde_json::to_value(v).expect("response body"))
}

fn route(cfg: &StubConfig, req: &mut Request) -> Reply {
    let path = req.url().split('?').next().unwrap_or("").to_string();
    if path == "/health" {
        return ok(serde_json::json!({"status": "ok"}));
    }
    if !matches!(
        path.as_str(),
        "/v1/chat" | "/v1/images" | "/v1/activations" | "/v1/edit"
    ) {
        return Err(error(404, "not_found", format!("no route {path}")));
    }
    if *req.method() != Method::Post {
        return Err(error(405, "method_not_allowed", "use POST"));
    }
    if req.body_length().is_some_and(|n| n > cfg.max_body_bytes) {
        return Err(error(
            413,
            "payload_too_large",
            format!("limit is {} bytes", cfg.max_body_bytes),
        ));
    }
    let mut body = Vec::new();
    req.as_reader()
        .take(cfg.max_body_bytes as u64 + 1)
        .read_to_end(&mut body)
        .map_err(|e| error(400, "invalid_request", e.to_string()))?;
    if body.len() > cfg.max_body_bytes {
        return Err(error(
            413,
            "payload_too_large",
            format!("limit is {} bytes", cfg.max_body_bytes),
        ));
    }
    match path.as_str() {
        "/v1/chat" => {
            let r: ChatRequest = parse(&body)?;
            ok(ChatResponse {
                text: stub_chat(&cfg.canned, &r.prompt, r.seed),
            })
        }
        "/v1/images" => {
            let r: ImagesRequest = parse(&body)?;
            if r.prompts.is_empty() {
                return Err(error(400, "invalid_request", "no prompts"));
            }
            ok(ImagesResponse {
                images: r
                    .prompts
                    .iter()
                    .map(|p| WireImage::encode(PNG, &stub_image(&p.text, p.seed)))
                    .collect(),
            })
        }
        "/v1/activations" => {
            let r: ActivationsRequest = parse(&body)?;
            if r.images.is_empty() {
                return Err(error(400, "invalid_request", "no images"));
            }
            let mut rows = Vec::with_capacity(r.images.len());
            for img in &r.images {
                let png = decode_png(img)?;
                rows.push(cfg.map.activations(&png, &r.layer, &r.indices).map_err(
                    |e| match e {
                        LineError::UnknownLayer { layer, available } => error(
                            404,
                            "unknown_layer",
                            format!(
                                "unknown layer {layer:?}; available: {}",
                                available.join(", ")
                            ),
                        ),
                        e => error(400, "invalid_request", e.to_string()),
                    },
                )?);
            }
            ok(ActivationsResponse { activations: rows })
        }
        _ => {
            let r: EditRequest = parse(&body)?;
            let png = decode_png(&r.image)?;
            let edited = stub_edit(&png, &r.instruction)
                .map_err(|e| error(400, "invalid_image", e.to_string()))?;
            ok(EditResponse {
                image: WireImage::encode(PNG, &edited),
            })
        }
    }
}
