// SPDX-License-Identifier: MIT OR Apache-2.0

//! The per-neuron labeling loop and layer-level orchestration.
//!
//! A run seeds the scoreboard from the initialization matrix (step 0), runs
//! `N` propose/synthesize/score iterations (steps `1..=N`), then one summary
//! iteration over the top three concepts (step `N + 1`). Provider failures
//! inside an iteration become recorded error steps; they never abort the
//! neuron.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::{extract, InitMatrix, InitSource, NeuronAddress, VisionProvider};
use crate::error::{LineError, Result};
use crate::fixed6;
use crate::io::{atomic_write, path_component};
use crate::proposer::{CallContext, ForbiddenPolicy, ProposalMode, ProposalRequest, Proposer};
use crate::scoreboard::{
    normalize_label, ConceptLabel, InsertOutcome, Origin, Scoreboard, ScoreboardEntry,
};
use crate::scoring::score_avg;
use crate::synthesis::{ImageCache, T2iProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Refinement iterations `N`.
    pub iterations: u32,
    /// Images per concept.
    pub batch_size: usize,
    pub init_top: usize,
    pub init_random: usize,
    /// Initialization classes `K`.
    pub init_classes: usize,
    /// Images per initialization class `M`.
    pub init_images: usize,
    /// Proposer attempts per step.
    pub max_retries: usize,
    /// Salt for concept image seeds.
    pub run_salt: u64,
    /// Root of all other randomness (initialization picks, LLM seeds).
    pub seed: u64,
    /// Scoreboard entries shown to the LLM; `None` shows all.
    pub concept_list_cap: Option<usize>,
    pub forbidden_policy: ForbiddenPolicy,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            batch_size: 5,
            init_top: 5,
            init_random: 5,
            init_classes: 1000,
            init_images: 50,
            max_retries: 3,
            run_salt: 0,
            seed: 0,
            concept_list_cap: None,
            forbidden_policy: ForbiddenPolicy::Retry,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(LineError::Config(m.into()));
        if self.iterations == 0 {
            return fail("iterations must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.init_top + self.init_random == 0 {
            return fail("init_top + init_random must be at least 1");
        }
        if self.init_classes < self.init_top + self.init_random {
            return fail("init_classes must be at least init_top + init_random");
        }
        if self.init_images == 0 {
            return fail("init_images must be at least 1");
        }
        if self.max_retries == 0 {
            return fail("max_retries must be at least 1");
        }
        if self.concept_list_cap == Some(0) {
            return fail("concept_list_cap must be at least 1");
        }
        if self.workers == 0 {
            return fail("workers must be at least 1");
        }
        Ok(())
    }

    /// Step index of the summary iteration.
    pub fn summary_step(&self) -> u32 {
        self.iterations + 1
    }
}

/// Per-neuron seed derived from the run seed, independent of scheduling.
pub fn neuron_seed(seed: u64, neuron: &NeuronAddress) -> u64 {
    let mut h = Sha256::new();
    h.update(b"line/neuron-seed/v1\0");
    h.update(neuron.layer.as_bytes());
    h.update([0u8]);
    h.update((neuron.index as u64).to_le_bytes());
    h.update(seed.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Seeds a scoreboard with the `init_top` best classes and `init_random`
/// classes drawn without replacement from the rest.
pub fn initialize(
    cfg: &RunConfig,
    init: &InitMatrix,
    neuron: &NeuronAddress,
    rng_seed: u64,
) -> Result<Scoreboard> {
    if init.k() != cfg.init_classes || init.m() != cfg.init_images {
        return Err(LineError::Config(format!(
            "initialization matrix for {neuron} is {}x{}, configured {}x{}",
            init.k(),
            init.m(),
            cfg.init_classes,
            cfg.init_images
        )));
    }
    let wanted = cfg.init_top + cfg.init_random;
    if init.k() < wanted {
        return Err(LineError::Config(format!(
            "{} classes cannot seed {} top and {} random concepts",
            init.k(),
            cfg.init_top,
            cfg.init_random
        )));
    }
    let scores = init.class_scores();
    let mut order: Vec<usize> = (0..init.k()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (top, rest) = order.split_at(cfg.init_top);
    let mut rest = rest.to_vec();
    rest.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut picks: Vec<usize> = sample(&mut rng, rest.len(), cfg.init_random)
        .into_iter()
        .map(|i| rest[i])
        .collect();
    picks.sort_unstable();

    let mut board = Scoreboard::new(neuron.clone());
    for &k in top.iter().chain(&picks) {
        let label = normalize_label(&init.class_labels()[k])?;
        board.insert(ScoreboardEntry::new(
            label,
            scores[k],
            0,
            Origin::Predefined,
        ));
    }
    Ok(board)
}

/// Borrowed provider bundle shared by all neurons of a run.
#[derive(Clone, Copy)]
pub struct Providers<'a> {
    pub proposer: &'a dyn Proposer,
    pub t2i: &'a dyn T2iProvider,
    pub vision: &'a dyn VisionProvider,
    pub init: &'a dyn InitSource,
    pub cache: &'a ImageCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Init,
    Main,
    Summary,
}

/// One trace line. Step-0 records describe initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub kind: StepKind,
    pub concept: Option<ConceptLabel>,
    #[serde(with = "fixed6::option")]
    pub score: Option<f64>,
    pub reasoning: String,
    pub image_refs: Vec<String>,
    pub cache_hit: bool,
    /// The concept was already on the scoreboard.
    pub duplicate: bool,
    pub attempts: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<StepRecord>,
    /// Best score after step 0, 1, ..., N and the summary.
    #[serde(with = "fixed6::vec")]
    pub cumulative_best: Vec<f64>,
}

impl RunTrace {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace serialization is infallible") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationResult {
    pub neuron: NeuronAddress,
    pub best_label: ConceptLabel,
    #[serde(with = "fixed6")]
    pub best_score: f64,
    pub origin: Origin,
    pub best_step: u32,
    pub iterations: u32,
    pub scoreboard: Scoreboard,
    pub trace: RunTrace,
}

/// The compact per-neuron record written as `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub neuron: NeuronAddress,
    pub best_label: ConceptLabel,
    #[serde(with = "fixed6")]
    pub best_score: f64,
    pub origin: Origin,
    pub best_step: u32,
    pub iterations: u32,
    #[serde(with = "fixed6::vec")]
    pub cumulative_best: Vec<f64>,
}

impl ExplanationResult {
    pub fn summary(&self) -> ResultSummary {
        ResultSummary {
            neuron: self.neuron.clone(),
            best_label: self.best_label.clone(),
            best_score: self.best_score,
            origin: self.origin,
            best_step: self.best_step,
            iterations: self.iterations,
            cumulative_best: self.trace.cumulative_best.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serialization is infallible")
    }
}

/// State of one neuron's run between iterations.
pub struct NeuronRun<'a> {
    cfg: &'a RunConfig,
    providers: Providers<'a>,
    seed: u64,
    board: Scoreboard,
    records: Vec<StepRecord>,
    cumulative_best: Vec<f64>,
}

struct Scored {
    score: f64,
    image_refs: Vec<String>,
    cache_hit: bool,
}

impl<'a> NeuronRun<'a> {
    /// Builds the initial scoreboard.
    pub fn start(
        cfg: &'a RunConfig,
        providers: Providers<'a>,
        neuron: &NeuronAddress,
    ) -> Result<Self> {
        cfg.validate()?;
        let seed = neuron_seed(cfg.seed, neuron);
        let matrix = providers.init.init_matrix(neuron)?;
        let board = initialize(cfg, &matrix, neuron, seed)?;
        let best = board.best_score().ok_or(LineError::EmptyScoreboard)?;
        let init = StepRecord {
            step: 0,
            kind: StepKind::Init,
            concept: None,
            score: Some(best),
            reasoning: format!("seeded {} predefined concepts", board.len()),
            image_refs: Vec::new(),
            cache_hit: false,
            duplicate: false,
            attempts: 0,
            error: None,
        };
        Ok(Self {
            cfg,
            providers,
            seed,
            board,
            records: vec![init],
            cumulative_best: vec![best],
        })
    }

    pub fn scoreboard(&self) -> &Scoreboard {
        &self.board
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    fn step_seed(&self, step: u32) -> u64 {
        self.seed
            .wrapping_add(u64::from(step).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    fn score_concept(&self, concept: &ConceptLabel) -> Result<Scored> {
        let p = self.providers;
        let (batch, cache_hit) =
            p.cache
                .get_or_generate(concept, self.cfg.run_salt, self.cfg.batch_size, p.t2i)?;
        let acts = extract(p.vision, &batch, &self.board.neuron)?;
        Ok(Scored {
            score: score_avg(&acts),
            image_refs: batch.image_ids(),
            cache_hit,
        })
    }

    fn concept_list(&self, cap: Option<usize>) -> Vec<(ConceptLabel, f64)> {
        let ranked = self.board.ranked();
        let n = cap.unwrap_or(ranked.len()).min(ranked.len());
        ranked[..n]
            .iter()
            .map(|e| (e.label.clone(), e.score))
            .collect()
    }

    fn execute(&mut self, step: u32, req: ProposalRequest) {
        let (kind, origin) = match req.mode {
            ProposalMode::Main => (StepKind::Main, Origin::Generated),
            ProposalMode::Summary => (StepKind::Summary, Origin::Summary),
        };
        let ctx = CallContext {
            neuron: self.board.neuron.clone(),
            step,
            mode: req.mode,
            attempt: 1,
            seed: self.step_seed(step),
        };
        let mut record = StepRecord {
            step,
            kind,
            concept: None,
            score: None,
            reasoning: String::new(),
            image_refs: Vec::new(),
            cache_hit: false,
            duplicate: false,
            attempts: 0,
            error: None,
        };
        let proposal = self.providers.proposer.propose(&req, &ctx).and_then(|p| {
            let enforce =
                kind == StepKind::Main && self.cfg.forbidden_policy == ForbiddenPolicy::Retry;
            if enforce && req.forbidden.contains(&p.concept) {
                Err(LineError::ForbiddenExhausted {
                    attempts: p.attempts,
                    last: Some(p.concept.to_string()),
                })
            } else {
                Ok(p)
            }
        });
        match proposal {
            Err(e) => {
                log::warn!("{} step {step}: proposal failed: {e}", self.board.neuron);
                record.error = Some(e.to_string());
            }
            Ok(p) => {
                record.concept = Some(p.concept.clone());
                record.reasoning = p.thinking;
                record.attempts = p.attempts;
                match self.score_concept(&p.concept) {
                    Err(e) => {
                        log::warn!(
                            "{} step {step}: scoring {} failed: {e}",
                            self.board.neuron,
                            p.concept
                        );
                        self.board.record_proposal(p.concept);
                        record.error = Some(e.to_string());
                    }
                    Ok(s) => {
                        record.score = Some(s.score);
                        record.cache_hit = s.cache_hit;
                        record.image_refs = s.image_refs.clone();
                        let entry = ScoreboardEntry::new(p.concept, s.score, step, origin)
                            .with_images(s.image_refs);
                        record.duplicate = self.board.insert(entry) == InsertOutcome::Duplicate;
                    }
                }
            }
        }
        self.records.push(record);
        let best = self
            .board
            .best_score()
            .expect("board is never empty after start");
        self.cumulative_best.push(best);
    }

    /// One refinement iteration, `1 <= step <= N`.
    pub fn run_iteration(&mut self, step: u32) -> Result<()> {
        if step == 0 || step > self.cfg.iterations {
            return Err(LineError::Config(format!(
                "iteration step {step} outside 1..={}",
                self.cfg.iterations
            )));
        }
        let req = ProposalRequest::main(
            self.concept_list(self.cfg.concept_list_cap),
            self.board.forbidden_set(),
        );
        self.execute(step, req);
        Ok(())
    }

    /// The summary iteration over the (up to) three best concepts.
    pub fn run_summary(&mut self) -> Result<()> {
        let req = ProposalRequest::summary(self.concept_list(Some(3)))?;
        self.execute(self.cfg.summary_step(), req);
        Ok(())
    }

    pub fn finish(self) -> ExplanationResult {
        let best = self
            .board
            .best()
            .expect("board is never empty after start")
            .clone();
        ExplanationResult {
            neuron: self.board.neuron.clone(),
            best_label: best.label,
            best_score: best.score,
            origin: best.origin,
            best_step: best.step,
            iterations: self.cfg.iterations,
            scoreboard: self.board,
            trace: RunTrace {
                records: self.records,
                cumulative_best: self.cumulative_best,
            },
        }
    }
}

/// Initialization, `N` iterations, and the summary for one neuron.
pub fn explain_neuron(
    cfg: &RunConfig,
    neuron: &NeuronAddress,
    providers: Providers<'_>,
) -> Result<ExplanationResult> {
    let mut run = NeuronRun::start(cfg, providers, neuron)?;
    for step in 1..=cfg.iterations {
        run.run_iteration(step)?;
    }
    run.run_summary()?;
    Ok(run.finish())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginCounts {
    pub predefined: usize,
    pub generated: usize,
    pub summary: usize,
}

impl OriginCounts {
    pub fn add(&mut self, origin: Origin) {
        match origin {
            Origin::Predefined => self.predefined += 1,
            Origin::Generated => self.generated += 1,
            Origin::Summary => self.summary += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.predefined + self.generated + self.summary
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronFailure {
    pub neuron: NeuronAddress,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub iterations: u32,
    pub neurons: usize,
    pub winners: OriginCounts,
    /// Mean over successful neurons of the cumulative best after each step.
    #[serde(with = "fixed6::vec")]
    pub mean_cumulative_best: Vec<f64>,
    pub failures: Vec<NeuronFailure>,
}

impl LayerSummary {
    pub fn from_results(
        iterations: u32,
        results: &[std::result::Result<ExplanationResult, NeuronFailure>],
    ) -> Self {
        let ok: Vec<_> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
        let mut winners = OriginCounts::default();
        let mut sums = vec![0.0; iterations as usize + 2];
        for r in &ok {
            winners.add(r.origin);
            for (s, v) in sums.iter_mut().zip(&r.trace.cumulative_best) {
                *s += v;
            }
        }
        let mean_cumulative_best = if ok.is_empty() {
            Vec::new()
        } else {
            sums.into_iter().map(|s| s / ok.len() as f64).collect()
        };
        Self {
            iterations,
            neurons: results.len(),
            winners,
            mean_cumulative_best,
            failures: results
                .iter()
                .filter_map(|r| r.as_ref().err().cloned())
                .collect(),
        }
    }

    /// `step,mean_best` rows for steps `0..=N`, then `S` for the summary.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,mean_best\n");
        for (i, v) in self.mean_cumulative_best.iter().enumerate() {
            let step = if i as u32 == self.iterations + 1 {
                "S".to_string()
            } else {
                i.to_string()
            };
            out.push_str(&format!("{step},{v:.6}\n"));
        }
        out
    }
}

pub struct LayerRun {
    pub results: Vec<std::result::Result<ExplanationResult, NeuronFailure>>,
    pub summary: LayerSummary,
}

impl LayerRun {
    pub fn is_partial(&self) -> bool {
        !self.summary.failures.is_empty()
    }
}

/// Independent runs for `neurons` on `cfg.workers` threads, sharing the
/// image cache. Results keep the input order.
pub fn explain_layer(
    cfg: &RunConfig,
    neurons: &[NeuronAddress],
    providers: Providers<'_>,
) -> Result<LayerRun> {
    cfg.validate()?;
    if neurons.is_empty() {
        return Err(LineError::Config("no neurons selected".into()));
    }
    if let Err(e) = providers.init.prepare(neurons) {
        log::warn!("batch initialization failed, falling back to per-neuron: {e}");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| LineError::Config(format!("worker pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        neurons
            .par_iter()
            .map(|n| {
                explain_neuron(cfg, n, providers).map_err(|e| {
                    log::error!("{n}: {e}");
                    NeuronFailure {
                        neuron: n.clone(),
                        error: e.to_string(),
                    }
                })
            })
            .collect()
    });
    let summary = LayerSummary::from_results(cfg.iterations, &results);
    Ok(LayerRun { results, summary })
}

/// `<out>/neurons/<layer>/<index>`
pub fn neuron_dir(out: &Path, neuron: &NeuronAddress) -> PathBuf {
    out.join("neurons")
        .join(path_component(&neuron.layer))
        .join(neuron.index.to_string())
}

/// Writes `scoreboard.json`, `trace.jsonl` and `result.json` for one neuron.
pub fn write_neuron_artifacts(out: &Path, result: &ExplanationResult) -> Result<PathBuf> {
    let dir = neuron_dir(out, &result.neuron);
    atomic_write(
        &dir.join("scoreboard.json"),
        (result.scoreboard.to_json() + "\n").as_bytes(),
    )?;
    atomic_write(&dir.join("trace.jsonl"), result.trace.to_jsonl().as_bytes())?;
    let summary = serde_json::to_string_pretty(&result.summary())? + "\n";
    atomic_write(&dir.join("result.json"), summary.as_bytes())?;
    Ok(dir)
}

/// Per-neuron artifacts plus `layer_curve.csv` and `layer_summary.json`.
pub fn write_layer_artifacts(out: &Path, run: &LayerRun) -> Result<()> {
    for r in run.results.iter().flatten() {
        write_neuron_artifacts(out, r)?;
    }
    atomic_write(
        &out.join("layer_curve.csv"),
        run.summary.curve_csv().as_bytes(),
    )?;
    let json = serde_json::to_string_pretty(&run.summary)? + "\n";
    atomic_write(&out.join("layer_summary.json"), json.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::FixedInit;
    use crate::proposer::{Proposal, SimProposer, SimStrategy};
    use crate::simworld::{SimConfig, SimT2i, SimVision, SimWorld};
    use crate::synthesis::{ImageRef, PromptSpec};
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex};

    fn label(s: &str) -> ConceptLabel {
        normalize_label(s).unwrap()
    }

    fn matrix(scores: &[f64]) -> InitMatrix {
        InitMatrix::new(
            scores.iter().map(|&s| vec![s - 0.01, s + 0.01]).collect(),
            (0..scores.len()).map(|i| format!("class {i}")).collect(),
        )
        .unwrap()
    }

    fn cfg(k: usize) -> RunConfig {
        RunConfig {
            init_classes: k,
            init_images: 2,
            init_top: 2,
            init_random: 2,
            iterations: 3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        for bad in [
            RunConfig {
                iterations: 0,
                ..RunConfig::default()
            },
            RunConfig {
                batch_size: 0,
                ..RunConfig::default()
            },
            RunConfig {
                init_top: 0,
                init_random: 0,
                ..RunConfig::default()
            },
            RunConfig {
                init_classes: 4,
                ..RunConfig::default()
            },
            RunConfig {
                max_retries: 0,
                ..RunConfig::default()
            },
            RunConfig {
                concept_list_cap: Some(0),
                ..RunConfig::default()
            },
        ] {
            assert!(
                matches!(bad.validate(), Err(LineError::Config(_))),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn initialize_top_then_random() {
        let m = matrix(&[0.1, 0.9, 0.3, 0.8, 0.2, 0.4, 0.5]);
        let n = NeuronAddress::new("l", 0);
        let b = initialize(&cfg(7), &m, &n, 3).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.entries()[0].label, label("class 1"));
        assert_eq!(b.entries()[1].label, label("class 3"));
        assert!(b
            .entries()
            .iter()
            .all(|e| e.step == 0 && e.origin == Origin::Predefined));
        assert!(b.proposal_history().is_empty());
        assert_eq!(b, initialize(&cfg(7), &m, &n, 3).unwrap());
        let scores = m.class_scores();
        for e in b.entries() {
            let k: usize = e.label.as_str()[6..].parse().unwrap();
            assert_eq!(e.score, scores[k]);
        }
    }

    #[test]
    fn initialize_random_picks_vary_with_seed() {
        let m = matrix(&(0..40).map(|i| i as f64 / 40.0).collect::<Vec<_>>());
        let n = NeuronAddress::new("l", 0);
        let c = cfg(40);
        let picks: std::collections::HashSet<Vec<String>> = (0..10)
            .map(|s| {
                initialize(&c, &m, &n, s).unwrap().entries()[2..]
                    .iter()
                    .map(|e| e.label.to_string())
                    .collect()
            })
            .collect();
        assert!(picks.len() > 1);
    }

    #[test]
    fn initialize_whole_vocabulary() {
        let m = matrix(&[0.1, 0.9, 0.3]);
        let c = RunConfig {
            init_classes: 3,
            init_images: 2,
            init_top: 3,
            init_random: 0,
            ..RunConfig::default()
        };
        let b = initialize(&c, &m, &NeuronAddress::new("l", 0), 0).unwrap();
        let got: Vec<_> = b.entries().iter().map(|e| e.label.to_string()).collect();
        assert_eq!(got, ["class 1", "class 2", "class 0"]);
    }

    #[test]
    fn initialize_dimension_errors() {
        let m = matrix(&[0.1, 0.9, 0.3]);
        assert!(matches!(
            initialize(&cfg(4), &m, &NeuronAddress::new("l", 0), 0),
            Err(LineError::Config(_))
        ));
        let c = RunConfig {
            init_classes: 3,
            init_images: 2,
            init_top: 2,
            init_random: 2,
            ..RunConfig::default()
        };
        assert!(matches!(
            initialize(&c, &m, &NeuronAddress::new("l", 0), 0),
            Err(LineError::Config(_))
        ));
    }

    /// Scores each concept by a fixed table; every image of `c` activates
    /// with `table[c]`.
    struct TableWorld(HashMap<String, f64>);

    impl T2iProvider for TableWorld {
        fn generate(&self, prompts: &[PromptSpec]) -> Result<Vec<ImageRef>> {
            prompts
                .iter()
                .map(|p| {
                    let v = *self.0.get(p.concept.as_str()).ok_or_else(|| {
                        LineError::provider(format!("cannot draw {}", p.concept), false)
                    })?;
                    Ok(ImageRef::embedding(
                        format!("{}#{}", p.concept, p.seed),
                        vec![v],
                    ))
                })
                .collect()
        }
    }

    impl VisionProvider for TableWorld {
        fn layer_width(&self, _: &str) -> Result<usize> {
            Ok(1)
        }

        fn activations(&self, images: &[ImageRef], _: &str, _: &[usize]) -> Result<Vec<Vec<f64>>> {
            Ok(images
                .iter()
                .map(|i| match &i.payload {
                    crate::synthesis::ImagePayload::Embedding { vector } => vec![vector[0]],
                    _ => unreachable!(),
                })
                .collect())
        }
    }

    /// Replies from a fixed per-step list; records what it was shown.
    struct ListProposer {
        answers: Vec<&'static str>,
        seen: Mutex<Vec<ProposalRequest>>,
    }

    impl Proposer for ListProposer {
        fn propose(&self, req: &ProposalRequest, ctx: &CallContext) -> Result<Proposal> {
            self.seen.lock().unwrap().push(req.clone());
            let a = self.answers[ctx.step as usize - 1];
            if a.is_empty() {
                return Err(LineError::ForbiddenExhausted {
                    attempts: 3,
                    last: None,
                });
            }
            Ok(Proposal {
                thinking: format!("step {}", ctx.step),
                concept: label(a),
                attempts: 1,
            })
        }
    }

    fn table() -> TableWorld {
        TableWorld(
            [
                ("class 0", 0.1),
                ("class 1", 0.9),
                ("class 2", 0.3),
                ("a", 1.5),
                ("b", 0.2),
                ("c", 2.0),
                ("d", 1.0),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        )
    }

    fn run(
        answers: Vec<&'static str>,
        policy: ForbiddenPolicy,
    ) -> (ExplanationResult, Vec<ProposalRequest>) {
        let n = NeuronAddress::new("l", 0);
        let init = FixedInit::new([(n.clone(), matrix(&[0.1, 0.9, 0.3]))].into());
        let w = table();
        let prop = ListProposer {
            answers,
            seen: Mutex::default(),
        };
        let cache = ImageCache::in_memory();
        let c = RunConfig {
            init_classes: 3,
            init_images: 2,
            init_top: 2,
            init_random: 1,
            iterations: answers_len(&prop) - 1,
            forbidden_policy: policy,
            ..RunConfig::default()
        };
        let p = Providers {
            proposer: &prop,
            t2i: &w,
            vision: &w,
            init: &init,
            cache: &cache,
        };
        let r = explain_neuron(&c, &n, p).unwrap();
        let seen = prop.seen.into_inner().unwrap();
        (r, seen)
    }

    fn answers_len(p: &ListProposer) -> u32 {
        p.answers.len() as u32
    }

    #[test]
    fn loop_inserts_and_summarizes() {
        let (r, seen) = run(vec!["a", "b", "c", "d"], ForbiddenPolicy::Retry);
        assert_eq!(r.best_label, label("c"));
        assert_eq!(r.best_step, 3);
        assert_eq!(r.origin, Origin::Generated);
        let d = r.scoreboard.get(&label("d")).unwrap();
        assert_eq!((d.step, d.origin), (4, Origin::Summary));
        assert_eq!(r.trace.cumulative_best.len(), 5);
        assert_eq!(r.trace.records.len(), 5);
        assert!(r.trace.cumulative_best.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(r.trace.cumulative_best, [0.9, 1.5, 1.5, 2.0, 2.0]);
        // forbidden list is proposal history; the summary shows top three only
        assert_eq!(
            seen[2]
                .forbidden
                .iter()
                .map(|l| l.as_str())
                .collect::<Vec<_>>(),
            ["a", "b"]
        );
        assert_eq!(seen[0].concept_list.len(), 3);
        assert_eq!(seen[3].mode, ProposalMode::Summary);
        assert_eq!(
            seen[3]
                .concept_list
                .iter()
                .map(|(l, _)| l.as_str())
                .collect::<Vec<_>>(),
            ["c", "a", "class 1"]
        );
        assert!(seen[3].forbidden.is_empty());
    }

    #[test]
    fn summary_lower_than_best_leaves_best() {
        let (r, _) = run(vec!["c", "b"], ForbiddenPolicy::Retry);
        assert_eq!(r.best_label, label("c"));
        assert_eq!(
            r.scoreboard.get(&label("b")).unwrap().origin,
            Origin::Summary
        );
    }

    #[test]
    fn error_steps_are_recorded_and_flat() {
        let (r, _) = run(vec!["a", "", "unknown", "b"], ForbiddenPolicy::Retry);
        let recs = &r.trace.records;
        assert!(recs[2].error.is_some() && recs[2].concept.is_none());
        assert!(recs[3].error.as_deref().unwrap().contains("cannot draw"));
        assert_eq!(recs[3].concept, Some(label("unknown")));
        assert!(!r.scoreboard.contains(&label("unknown")));
        assert!(r.scoreboard.proposal_history().contains(&label("unknown")));
        assert_eq!(r.trace.cumulative_best[2], r.trace.cumulative_best[1]);
        assert_eq!(r.trace.cumulative_best[3], r.trace.cumulative_best[2]);
    }

    #[test]
    fn forbidden_repeat_rejected_under_retry() {
        let (r, _) = run(vec!["a", "a", "b"], ForbiddenPolicy::Retry);
        assert!(r.trace.records[2]
            .error
            .as_deref()
            .unwrap()
            .contains("forbidden"));
        assert_eq!(r.scoreboard.proposal_history().len(), 2);
    }

    #[test]
    fn repeat_accepted_is_cache_hit_and_board_unchanged() {
        let (r, _) = run(vec!["a", "a", "b"], ForbiddenPolicy::Accept);
        let rec = &r.trace.records[2];
        assert!(rec.cache_hit && rec.duplicate);
        assert_eq!(rec.score, Some(1.5));
        assert_eq!(
            r.scoreboard
                .entries()
                .iter()
                .filter(|e| e.label == label("a"))
                .count(),
            1
        );
        assert_eq!(r.scoreboard.get(&label("a")).unwrap().step, 1);
    }

    #[test]
    fn predefined_label_proposed_again_keeps_predefined_entry() {
        let (r, _) = run(vec!["class 1", "b"], ForbiddenPolicy::Retry);
        let e = r.scoreboard.get(&label("class 1")).unwrap();
        assert_eq!((e.step, e.origin), (0, Origin::Predefined));
        assert!(r.trace.records[1].duplicate);
        assert!(!r.trace.records[1].cache_hit);
    }

    #[test]
    fn run_iteration_bounds() {
        let n = NeuronAddress::new("l", 0);
        let init = FixedInit::new([(n.clone(), matrix(&[0.1, 0.9, 0.3]))].into());
        let w = table();
        let prop = ListProposer {
            answers: vec!["a"],
            seen: Mutex::default(),
        };
        let cache = ImageCache::in_memory();
        let c = RunConfig {
            init_classes: 3,
            init_images: 2,
            init_top: 1,
            init_random: 0,
            iterations: 1,
            ..RunConfig::default()
        };
        let p = Providers {
            proposer: &prop,
            t2i: &w,
            vision: &w,
            init: &init,
            cache: &cache,
        };
        let mut r = NeuronRun::start(&c, p, &n).unwrap();
        assert!(r.run_iteration(0).is_err());
        assert!(r.run_iteration(2).is_err());
        // one-entry board: the summary sees a degenerate top-k
        r.run_iteration(1).unwrap();
        assert_eq!(r.scoreboard().len(), 2);
    }

    fn sim_world(noise: f64) -> SimWorld {
        SimWorld::new(SimConfig {
            noise_sigma: noise,
            neurons: 12,
            seed: 9,
            ..SimConfig::default()
        })
        .unwrap()
    }

    fn sim_init(w: &SimWorld, k: usize) -> FixedInit {
        let d = crate::simworld::SimDataset::new(w);
        let v = SimVision { world: w };
        let addrs: Vec<_> = w.neurons().iter().map(|n| n.address.clone()).collect();
        let indices: Vec<_> = addrs.iter().map(|a| a.index).collect();
        let ms =
            crate::activation::build_layer_init(&v, &d, &w.config().layer, &indices, k, 4).unwrap();
        FixedInit::new(addrs.into_iter().zip(ms).collect())
    }

    #[test]
    fn oracle_finds_truth_exactly() {
        let w = Arc::new(sim_world(0.0));
        let init = sim_init(&w, 20);
        let prop = SimProposer {
            world: w.clone(),
            strategy: SimStrategy::Oracle,
        };
        let (t, v) = (SimT2i { world: &w }, SimVision { world: &w });
        let cache = ImageCache::in_memory();
        let c = RunConfig {
            init_classes: 20,
            init_images: 4,
            workers: 3,
            ..RunConfig::default()
        };
        let addrs: Vec<_> = w.neurons().iter().map(|n| n.address.clone()).collect();
        let p = Providers {
            proposer: &prop,
            t2i: &t,
            vision: &v,
            init: &init,
            cache: &cache,
        };
        let layer = explain_layer(&c, &addrs, p).unwrap();
        for (r, n) in layer.results.iter().zip(w.neurons()) {
            let r = r.as_ref().unwrap();
            assert_eq!(r.best_label, n.truth_label);
            assert_eq!(r.best_score, n.gain);
            assert_eq!(r.origin, Origin::Generated);
        }
        assert_eq!(layer.summary.winners.generated, 12);
        assert_eq!(layer.summary.winners.total(), 12);
        assert!(layer
            .summary
            .mean_cumulative_best
            .windows(2)
            .all(|w| w[0] <= w[1]));
    }

    #[test]
    fn layer_of_one_matches_neuron_run_and_cache_is_shared() {
        let w = Arc::new(sim_world(0.05));
        let init = sim_init(&w, 20);
        let prop = SimProposer {
            world: w.clone(),
            strategy: SimStrategy::Greedy,
        };
        let (t, v) = (SimT2i { world: &w }, SimVision { world: &w });
        let c = RunConfig {
            init_classes: 20,
            init_images: 4,
            ..RunConfig::default()
        };
        let n = w.neurons()[0].address.clone();
        let cache = ImageCache::in_memory();
        let p = Providers {
            proposer: &prop,
            t2i: &t,
            vision: &v,
            init: &init,
            cache: &cache,
        };
        let single = explain_neuron(&c, &n, p).unwrap();
        let cache2 = ImageCache::in_memory();
        let layer = explain_layer(
            &c,
            std::slice::from_ref(&n),
            Providers {
                cache: &cache2,
                ..p
            },
        )
        .unwrap();
        assert_eq!(layer.results[0].as_ref().unwrap(), &single);
        // same concepts again through the shared cache: all hits, same board
        let again = explain_neuron(
            &c,
            &n,
            Providers {
                cache: &cache2,
                ..p
            },
        )
        .unwrap();
        assert!(again.trace.records[1..]
            .iter()
            .filter(|r| r.error.is_none())
            .all(|r| r.cache_hit));
        assert_eq!(again.scoreboard, single.scoreboard);
        assert!(single.best_score >= single.trace.cumulative_best[0]);
    }

    #[test]
    fn failures_are_isolated() {
        let w = Arc::new(sim_world(0.0));
        let init = sim_init(&w, 20);
        let prop = SimProposer {
            world: w.clone(),
            strategy: SimStrategy::Greedy,
        };
        let (t, v) = (SimT2i { world: &w }, SimVision { world: &w });
        let cache = ImageCache::in_memory();
        let c = RunConfig {
            init_classes: 20,
            init_images: 4,
            iterations: 2,
            ..RunConfig::default()
        };
        let addrs = vec![
            w.neurons()[0].address.clone(),
            NeuronAddress::new("nope", 0),
        ];
        let p = Providers {
            proposer: &prop,
            t2i: &t,
            vision: &v,
            init: &init,
            cache: &cache,
        };
        let layer = explain_layer(&c, &addrs, p).unwrap();
        assert!(layer.results[0].is_ok());
        assert!(layer.is_partial());
        assert_eq!(layer.summary.failures[0].neuron, addrs[1]);
        assert_eq!(layer.summary.winners.total(), 1);
    }

    #[test]
    fn curve_csv_shape() {
        let s = LayerSummary {
            iterations: 2,
            neurons: 1,
            winners: OriginCounts::default(),
            mean_cumulative_best: vec![0.5, 1.0, 1.25, 1.25],
            failures: vec![],
        };
        assert_eq!(
            s.curve_csv(),
            "step,mean_best\n0,0.500000\n1,1.000000\n2,1.250000\nS,1.250000\n"
        );
    }

    #[test]
    fn artifacts_roundtrip() {
        let (r, _) = run(vec!["a", "b"], ForbiddenPolicy::Retry);
        let dir = tempfile::tempdir().unwrap();
        let nd = write_neuron_artifacts(dir.path(), &r).unwrap();
        let board =
            Scoreboard::from_json(&std::fs::read_to_string(nd.join("scoreboard.json")).unwrap())
                .unwrap();
        // image refs live in the trace, not the scoreboard file
        assert_eq!(board.to_json(), r.scoreboard.to_json());
        let trace = std::fs::read_to_string(nd.join("trace.jsonl")).unwrap();
        assert_eq!(trace.lines().count(), 3);
        let first: StepRecord = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
        assert_eq!(first.kind, StepKind::Init);
        let summary: ResultSummary =
            serde_json::from_str(&std::fs::read_to_string(nd.join("result.json")).unwrap())
                .unwrap();
        assert_eq!(summary, r.summary());
    }

    #[test]
    fn neuron_seed_is_stable_and_distinct() {
        let a = NeuronAddress::new("avgpool", 1);
        let b = NeuronAddress::new("avgpool", 2);
        assert_eq!(neuron_seed(0, &a), neuron_seed(0, &a));
        assert_ne!(neuron_seed(0, &a), neuron_seed(0, &b));
        assert_ne!(neuron_seed(0, &a), neuron_seed(1, &a));
    }
}
