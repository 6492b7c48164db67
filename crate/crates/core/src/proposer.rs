// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept proposal: prompt rendering, response parsing, forbidden-list
//! enforcement with bounded retries, and offline stand-ins for the LLM.

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexSet;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::activation::NeuronAddress;
use crate::error::{LineError, Result};
use crate::scoreboard::{normalize_label, ConceptLabel};
use crate::simworld::{dot, SimWorld};

pub const MAIN_TEMPLATE: &str = include_str!("../assets/prompts/main_v1.txt");
pub const SUMMARY_TEMPLATE: &str = include_str!("../assets/prompts/summary_v1.txt");
pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalMode {
    Main,
    Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalRequest {
    pub mode: ProposalMode,
    /// Concepts shown to the LLM, best first.
    pub concept_list: Vec<(ConceptLabel, f64)>,
    /// Labels the LLM must not repeat, in order of first proposal.
    pub forbidden: IndexSet<ConceptLabel>,
}

impl ProposalRequest {
    pub fn main(concept_list: Vec<(ConceptLabel, f64)>, forbidden: IndexSet<ConceptLabel>) -> Self {
        Self {
            mode: ProposalMode::Main,
            concept_list,
            forbidden,
        }
    }

    /// Summary request over the best concepts. Three are expected; fewer are
    /// accepted when the scoreboard itself is smaller.
    pub fn summary(top: Vec<(ConceptLabel, f64)>) -> Result<Self> {
        if top.is_empty() || top.len() > 3 {
            return Err(LineError::Arity {
                expected: 3,
                got: top.len(),
            });
        }
        Ok(Self {
            mode: ProposalMode::Summary,
            concept_list: top,
            forbidden: IndexSet::new(),
        })
    }

    pub fn render(&self) -> Result<String> {
        match self.mode {
            ProposalMode::Main => Ok(render_main_prompt(self)),
            ProposalMode::Summary if self.concept_list.len() == 3 => {
                render_summary_prompt(&self.concept_list)
            }
            ProposalMode::Summary => Ok(fill_summary(&self.concept_list)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub thinking: String,
    pub concept: ConceptLabel,
    pub attempts: usize,
}

fn concept_lines(list: &[(ConceptLabel, f64)]) -> String {
    list.iter()
        .map(|(label, score)| format!("{label}: {score:.2}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_main_prompt(req: &ProposalRequest) -> String {
    let history = req
        .forbidden
        .iter()
        .map(ConceptLabel::as_str)
        .collect::<Vec<_>>()
        .join(", ");
    MAIN_TEMPLATE
        .replace("{concept_list}", &concept_lines(&req.concept_list))
        .replace("{generation_history}", &history)
}

fn fill_summary(top: &[(ConceptLabel, f64)]) -> String {
    SUMMARY_TEMPLATE.replace("{concept_list}", &concept_lines(top))
}

pub fn render_summary_prompt(top3: &[(ConceptLabel, f64)]) -> Result<String> {
    if top3.len() != 3 {
        return Err(LineError::Arity {
            expected: 3,
            got: top3.len(),
        });
    }
    Ok(fill_summary(top3))
}

fn tagged<'a>(raw: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = raw.find(&open)? + open.len();
    let len = raw[start..].find(&close)?;
    Some(&raw[start..start + len])
}

/// Removes wrapping quotes and trailing sentence punctuation, which LLMs
/// add to answers now and then.
fn strip_decoration(answer: &str) -> &str {
    let mut s = answer.trim();
    loop {
        let before = s;
        s = s.trim_end_matches(['.', ',', ';', ':', '!']).trim();
        for q in ['"', '\'', '`'] {
            if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
                s = s[1..s.len() - 1].trim();
            }
        }
        if s == before {
            return s;
        }
    }
}

/// Extracts the first `<thinking>` and `<answer>` sections. A missing
/// thinking section is tolerated; a missing or empty answer is not.
pub fn parse_response(raw: &str) -> Result<Proposal> {
    let answer = tagged(raw, "answer")
        .ok_or_else(|| LineError::MalformedResponse("no <answer> section".into()))?;
    let concept = normalize_label(strip_decoration(answer))
        .map_err(|_| LineError::MalformedResponse("empty <answer> section".into()))?;
    if concept.word_count() > 3 {
        log::warn!("proposed concept {concept:?} is longer than three words");
    }
    Ok(Proposal {
        thinking: tagged(raw, "thinking")
            .unwrap_or_default()
            .trim()
            .to_string(),
        concept,
        attempts: 1,
    })
}

/// Sampling parameters forwarded to the LLM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatOptions {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: Option<u64>,
    pub max_tokens: u32,
}

impl Default for ChatOptions {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            top_p: 0.9,
            seed: None,
            max_tokens: 512,
        }
    }
}

/// Where in a run a proposal happens. Real LLM backends ignore it;
/// scripted and simulated backends key on it.
#[derive(Debug, Clone, PartialEq)]
pub struct CallContext {
    pub neuron: NeuronAddress,
    pub step: u32,
    pub mode: ProposalMode,
    /// 1-based attempt within the step.
    pub attempt: usize,
    /// Per-step sampling seed; attempts offset it.
    pub seed: u64,
}

pub trait LlmProvider: Send + Sync {
    fn chat(&self, prompt: &str, options: &ChatOptions, ctx: &CallContext) -> Result<String>;
}

/// How [`propose_with_policy`] treats an answer in the forbidden list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForbiddenPolicy {
    /// Re-ask, up to the retry bound.
    Retry,
    /// Accept the repeat; the engine reuses the cached result. Used to replay
    /// recorded runs in which the LLM repeated itself.
    Accept,
}

/// Asks the LLM until it returns a parseable, non-forbidden concept.
pub fn propose(
    backend: &dyn LlmProvider,
    req: &ProposalRequest,
    max_retries: usize,
    options: &ChatOptions,
    ctx: &CallContext,
) -> Result<Proposal> {
    propose_with_policy(
        backend,
        req,
        max_retries,
        options,
        ctx,
        ForbiddenPolicy::Retry,
    )
}

pub fn propose_with_policy(
    backend: &dyn LlmProvider,
    req: &ProposalRequest,
    max_retries: usize,
    options: &ChatOptions,
    ctx: &CallContext,
    policy: ForbiddenPolicy,
) -> Result<Proposal> {
    if max_retries == 0 {
        return Err(LineError::Config("max_retries must be at least 1".into()));
    }
    let prompt = req.render()?;
    let mut last_concept = None;
    let mut last_transport = None;
    for attempt in 1..=max_retries {
        let ctx = CallContext {
            attempt,
            seed: ctx.seed.wrapping_add(attempt as u64 - 1),
            ..ctx.clone()
        };
        let opts = ChatOptions {
            seed: Some(ctx.seed),
            ..options.clone()
        };
        let raw = match backend.chat(&prompt, &opts, &ctx) {
            Ok(raw) => raw,
            Err(e) if e.is_retryable() => {
                log::debug!("{} step {} attempt {attempt}: {e}", ctx.neuron, ctx.step);
                last_transport = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        last_transport = None;
        match parse_response(&raw) {
            Ok(p) if policy == ForbiddenPolicy::Retry && req.forbidden.contains(&p.concept) => {
                last_concept = Some(p.concept.to_string());
            }
            Ok(p) => {
                return Ok(Proposal {
                    attempts: attempt,
                    ..p
                })
            }
            Err(e) => log::debug!("{} step {} attempt {attempt}: {e}", ctx.neuron, ctx.step),
        }
    }
    Err(last_transport.unwrap_or(LineError::ForbiddenExhausted {
        attempts: max_retries,
        last: last_concept,
    }))
}

/// Produces proposals for the engine.
pub trait Proposer: Send + Sync {
    fn propose(&self, req: &ProposalRequest, ctx: &CallContext) -> Result<Proposal>;
}

/// LLM-backed proposer: render, chat, parse, retry.
pub struct LlmProposer {
    pub llm: Arc<dyn LlmProvider>,
    pub max_retries: usize,
    pub options: ChatOptions,
    pub policy: ForbiddenPolicy,
}

impl Proposer for LlmProposer {
    fn propose(&self, req: &ProposalRequest, ctx: &CallContext) -> Result<Proposal> {
        propose_with_policy(
            &*self.llm,
            req,
            self.max_retries,
            &self.options,
            ctx,
            self.policy,
        )
    }
}

/// Step key in a recorded transcript: a loop step number or `"S"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TranscriptStep {
    Loop(u32),
    Summary,
}

impl Serialize for TranscriptStep {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TranscriptStep::Loop(n) => s.serialize_u32(*n),
            TranscriptStep::Summary => s.serialize_str("S"),
        }
    }
}

impl<'de> Deserialize<'de> for TranscriptStep {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(TranscriptStep::Loop(n)),
            Raw::Text(t) if t == "S" => Ok(TranscriptStep::Summary),
            Raw::Text(t) => t
                .parse()
                .map(TranscriptStep::Loop)
                .map_err(|_| serde::de::Error::custom(format!("bad transcript step {t:?}"))),
        }
    }
}

impl std::fmt::Display for TranscriptStep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TranscriptStep::Loop(n) => write!(f, "{n}"),
            TranscriptStep::Summary => f.write_str("S"),
        }
    }
}

/// One recorded LLM reply. Several entries with the same step are
/// successive attempts at that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub step: TranscriptStep,
    pub raw_response: String,
}

fn ctx_step(ctx: &CallContext) -> TranscriptStep {
    match ctx.mode {
        ProposalMode::Summary => TranscriptStep::Summary,
        ProposalMode::Main => TranscriptStep::Loop(ctx.step),
    }
}

/// Replays recorded replies by (neuron, step, attempt). A transcript
/// registered without a neuron applies to every neuron.
#[derive(Debug, Default, Clone)]
pub struct ScriptedLlm {
    per_neuron: HashMap<NeuronAddress, Vec<TranscriptEntry>>,
    shared: Vec<TranscriptEntry>,
}

impl ScriptedLlm {
    pub fn shared(transcript: Vec<TranscriptEntry>) -> Self {
        Self {
            per_neuron: HashMap::new(),
            shared: transcript,
        }
    }

    pub fn with_neuron(mut self, neuron: NeuronAddress, transcript: Vec<TranscriptEntry>) -> Self {
        self.per_neuron.insert(neuron, transcript);
        self
    }

    pub fn reply(&self, ctx: &CallContext) -> Result<&str> {
        let transcript = self.per_neuron.get(&ctx.neuron).unwrap_or(&self.shared);
        let step = ctx_step(ctx);
        transcript
            .iter()
            .filter(|e| e.step == step)
            .nth(ctx.attempt.saturating_sub(1))
            .map(|e| e.raw_response.as_str())
            .ok_or(LineError::TranscriptExhausted {
                step: step.to_string(),
                attempt: ctx.attempt,
            })
    }
}

impl LlmProvider for ScriptedLlm {
    fn chat(&self, _prompt: &str, _options: &ChatOptions, ctx: &CallContext) -> Result<String> {
        self.reply(ctx).map(str::to_string)
    }
}

/// Offline proposal strategies over a [`SimWorld`].
#[derive(Debug, Clone, PartialEq)]
pub enum SimStrategy {
    /// Replay recorded replies through the normal parse path.
    Scripted(ScriptedLlm),
    /// Nearest unexplored vocabulary concept to the score-weighted mean of
    /// the top three listed concepts.
    Greedy,
    /// The neuron's truth label; greedy once that label is forbidden.
    Oracle,
}

impl PartialEq for ScriptedLlm {
    fn eq(&self, other: &Self) -> bool {
        self.per_neuron == other.per_neuron && self.shared == other.shared
    }
}

pub fn sim_propose(
    world: &SimWorld,
    req: &ProposalRequest,
    strategy: &SimStrategy,
    ctx: &CallContext,
) -> Result<Proposal> {
    match strategy {
        SimStrategy::Scripted(script) => parse_response(script.reply(ctx)?),
        SimStrategy::Oracle => {
            let n = world.neuron(&ctx.neuron)?;
            if req.forbidden.contains(&n.truth_label) {
                return sim_propose(world, req, &SimStrategy::Greedy, ctx);
            }
            Ok(Proposal {
                thinking: "oracle: truth label".into(),
                concept: n.truth_label.clone(),
                attempts: 1,
            })
        }
        SimStrategy::Greedy => {
            let top: Vec<_> = req.concept_list.iter().take(3).collect();
            let weights: Vec<f64> = top.iter().map(|(_, s)| s.max(0.0)).collect();
            let total: f64 = weights.iter().sum();
            let mut target = vec![0.0; world.dim()];
            for ((label, _), w) in top.iter().zip(&weights) {
                let w = if total > 0.0 { *w } else { 1.0 };
                for (t, e) in target.iter_mut().zip(world.embedding(label)) {
                    *t += w * e;
                }
            }
            let listed: Vec<&ConceptLabel> = req.concept_list.iter().map(|(l, _)| l).collect();
            let best = world
                .vocabulary()
                .iter()
                .filter(|l| !req.forbidden.contains(*l) && !listed.contains(l))
                .map(|l| (dot(&world.embedding(l), &target), l))
                .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(a.1)))
                .ok_or(LineError::ForbiddenExhausted {
                    attempts: 1,
                    last: None,
                })?;
            Ok(Proposal {
                thinking: format!(
                    "greedy: nearest unexplored concept, similarity {:.3}",
                    best.0
                ),
                concept: best.1.clone(),
                attempts: 1,
            })
        }
    }
}

/// [`Proposer`] over [`sim_propose`].
pub struct SimProposer {
    pub world: Arc<SimWorld>,
    pub strategy: SimStrategy,
}

impl Proposer for SimProposer {
    fn propose(&self, req: &ProposalRequest, ctx: &CallContext) -> Result<Proposal> {
        sim_propose(&self.world, req, &self.strategy, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::SimConfig;

    fn label(s: &str) -> ConceptLabel {
        normalize_label(s).unwrap()
    }

    fn ctx(step: u32) -> CallContext {
        CallContext {
            neuron: NeuronAddress::new("avgpool", 1255),
            step,
            mode: ProposalMode::Main,
            attempt: 1,
            seed: 0,
        }
    }

    fn answer(concept: &str) -> String {
        format!("<thinking>because</thinking>\n<answer>\n{concept}\n</answer>")
    }

    fn forbidden(labels: &[&str]) -> IndexSet<ConceptLabel> {
        labels.iter().map(|l| label(l)).collect()
    }

    #[test]
    fn answer_decoration_stripped() {
        for raw in ["Gym.", "\"gym\"", "'Gym.'", "`gym`!", "\"gym.\"", " gym ; "] {
            assert_eq!(
                parse_response(&answer(raw)).unwrap().concept,
                label("gym"),
                "{raw}"
            );
        }
        assert_eq!(
            parse_response(&answer("dr. who")).unwrap().concept,
            label("dr. who")
        );
        assert!(parse_response(&answer("\"\"")).is_err());
        assert!(parse_response(&answer("...")).is_err());
    }

    #[test]
    fn main_prompt_forbidden_block() {
        let req = ProposalRequest::main(
            vec![(label("pool table"), 0.96)],
            forbidden(&["gym", "billiards"]),
        );
        let p = render_main_prompt(&req);
        assert!(p.contains("You are not allowed to generate these concepts:\ngym, billiards\n"));
        assert!(
            p.contains("List of concepts and their scores:\npool table: 0.96\nYou are not allowed")
        );
        assert!(!p.contains("{concept_list}") && !p.contains("{generation_history}"));
    }

    #[test]
    fn main_prompt_empty_forbidden_slot() {
        let req = ProposalRequest::main(vec![(label("pool table"), 0.96)], IndexSet::new());
        let p = render_main_prompt(&req);
        assert!(p.contains("pool table: 0.96\nYou are not allowed to generate these concepts:\n\n\nProduce your answer"));
    }

    #[test]
    fn summary_prompt_lists_top3() {
        let top = vec![
            (label("strength training"), 2.08),
            (label("gym"), 1.91),
            (label("weightlifting"), 1.47),
        ];
        let p = render_summary_prompt(&top).unwrap();
        assert!(p.ends_with(
            "List of concepts and their scores:\nstrength training: 2.08\ngym: 1.91\nweightlifting: 1.47\n\nProduce your answer in the required format. Keep thinking very short.\n"
        ));
        assert!(!p.contains("You are not allowed"));
    }

    #[test]
    fn summary_prompt_matches_few_shot_shape() {
        let top = vec![
            (label("lava"), 0.94),
            (label("eruption"), 0.91),
            (label("ash"), 0.78),
        ];
        let p = render_summary_prompt(&top).unwrap();
        assert!(p.contains("lava: 0.94\neruption: 0.91\nAsh: 0.78\n"));
        assert!(p.contains("\nlava: 0.94\neruption: 0.91\nash: 0.78\n"));
    }

    #[test]
    fn summary_prompt_arity() {
        let two = vec![(label("a"), 1.0), (label("b"), 0.5)];
        assert!(matches!(
            render_summary_prompt(&two),
            Err(LineError::Arity {
                expected: 3,
                got: 2
            })
        ));
        assert!(ProposalRequest::summary(two).is_ok());
        assert!(ProposalRequest::summary(vec![]).is_err());
    }

    #[test]
    fn parse_examples() {
        let p = parse_response("<thinking>x</thinking>\n<answer>polka dots</answer>").unwrap();
        assert_eq!(p.concept.as_str(), "polka dots");
        assert_eq!(p.thinking, "x");
        assert!(matches!(
            parse_response("<answer></answer>"),
            Err(LineError::MalformedResponse(_))
        ));
        assert!(matches!(
            parse_response("red fruit"),
            Err(LineError::MalformedResponse(_))
        ));
        assert_eq!(
            parse_response("<answer>Red Fruit</answer>")
                .unwrap()
                .concept
                .as_str(),
            "red fruit"
        );
        let long = parse_response("<answer>a very long four words</answer>").unwrap();
        assert_eq!(long.concept.word_count(), 5);
    }

    #[test]
    fn parse_inverts_rendered_response() {
        for c in ["gym", "strength training", "red fruit"] {
            assert_eq!(parse_response(&answer(c)).unwrap().concept, label(c));
        }
    }

    #[test]
    fn templates_render_byte_stable() {
        let req = ProposalRequest::main(vec![(label("gym"), 1.91)], forbidden(&["gym"]));
        assert_eq!(render_main_prompt(&req), render_main_prompt(&req.clone()));
    }

    #[test]
    fn propose_first_reply() {
        let llm = ScriptedLlm::shared(vec![TranscriptEntry {
            step: TranscriptStep::Loop(1),
            raw_response: answer("gym"),
        }]);
        let req = ProposalRequest::main(vec![], IndexSet::new());
        let p = propose(&llm, &req, 3, &ChatOptions::default(), &ctx(1)).unwrap();
        assert_eq!((p.concept.as_str(), p.attempts), ("gym", 1));
    }

    #[test]
    fn propose_retries_past_forbidden() {
        let llm = ScriptedLlm::shared(vec![
            TranscriptEntry {
                step: TranscriptStep::Loop(1),
                raw_response: answer("GYM"),
            },
            TranscriptEntry {
                step: TranscriptStep::Loop(1),
                raw_response: answer("billiards"),
            },
        ]);
        let req = ProposalRequest::main(vec![], forbidden(&["gym"]));
        let p = propose(&llm, &req, 3, &ChatOptions::default(), &ctx(1)).unwrap();
        assert_eq!((p.concept.as_str(), p.attempts), ("billiards", 2));
    }

    struct Always(&'static str);

    impl LlmProvider for Always {
        fn chat(&self, _: &str, _: &ChatOptions, _: &CallContext) -> Result<String> {
            Ok(answer(self.0))
        }
    }

    #[test]
    fn propose_exhausts_on_persistent_forbidden() {
        let req = ProposalRequest::main(vec![], forbidden(&["gym"]));
        let err = propose(&Always("gym"), &req, 3, &ChatOptions::default(), &ctx(1)).unwrap_err();
        match err {
            LineError::ForbiddenExhausted { attempts, last } => {
                assert_eq!(attempts, 3);
                assert_eq!(last.as_deref(), Some("gym"));
            }
            other => panic!("unexpected {other}"),
        }
        let ok = propose_with_policy(
            &Always("gym"),
            &req,
            3,
            &ChatOptions::default(),
            &ctx(1),
            ForbiddenPolicy::Accept,
        );
        assert_eq!(ok.unwrap().concept.as_str(), "gym");
    }

    struct Flaky {
        fail_first: usize,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl LlmProvider for Flaky {
        fn chat(&self, _: &str, opts: &ChatOptions, ctx: &CallContext) -> Result<String> {
            let n = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            assert_eq!(opts.seed, Some(ctx.seed));
            if n < self.fail_first {
                Err(LineError::provider("connection reset", true))
            } else {
                Ok(answer("pier"))
            }
        }
    }

    #[test]
    fn transport_failures_consume_attempts() {
        let req = ProposalRequest::main(vec![], IndexSet::new());
        let llm = Flaky {
            fail_first: 1,
            calls: Default::default(),
        };
        assert_eq!(
            propose(&llm, &req, 3, &ChatOptions::default(), &ctx(2))
                .unwrap()
                .attempts,
            2
        );
        let llm = Flaky {
            fail_first: 5,
            calls: Default::default(),
        };
        let err = propose(&llm, &req, 3, &ChatOptions::default(), &ctx(2)).unwrap_err();
        assert!(err.is_retryable());
    }

    #[test]
    fn transcript_steps_parse() {
        let t: Vec<TranscriptEntry> = serde_json::from_str(
            r#"[{"step":1,"raw_response":"a"},{"step":"S","raw_response":"b"}]"#,
        )
        .unwrap();
        assert_eq!(t[0].step, TranscriptStep::Loop(1));
        assert_eq!(t[1].step, TranscriptStep::Summary);
        let llm = ScriptedLlm::shared(t);
        let summary = CallContext {
            mode: ProposalMode::Summary,
            step: 11,
            ..ctx(11)
        };
        assert_eq!(llm.reply(&summary).unwrap(), "b");
        assert!(matches!(
            llm.reply(&ctx(2)),
            Err(LineError::TranscriptExhausted { .. })
        ));
    }

    fn sim() -> SimWorld {
        SimWorld::new(SimConfig {
            noise_sigma: 0.0,
            seed: 3,
            ..SimConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn oracle_returns_truth() {
        let w = sim();
        let n = &w.neurons()[4];
        let c = CallContext {
            neuron: n.address.clone(),
            ..ctx(1)
        };
        let p = sim_propose(
            &w,
            &ProposalRequest::main(vec![], IndexSet::new()),
            &SimStrategy::Oracle,
            &c,
        )
        .unwrap();
        assert_eq!(p.concept, n.truth_label);
    }

    #[test]
    fn greedy_skips_listed_truth_for_nearest_neighbor() {
        let w = sim();
        let n = &w.neurons()[0];
        let req = ProposalRequest::main(vec![(n.truth_label.clone(), n.gain)], IndexSet::new());
        let c = CallContext {
            neuron: n.address.clone(),
            ..ctx(1)
        };
        let p = sim_propose(&w, &req, &SimStrategy::Greedy, &c).unwrap();
        // brute-force nearest neighbor of the truth vector
        let truth = w.embedding(&n.truth_label);
        let mut best: Option<(f64, &ConceptLabel)> = None;
        for l in w.vocabulary() {
            if *l == n.truth_label {
                continue;
            }
            let d: f64 = w
                .embedding(l)
                .iter()
                .zip(&truth)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, l));
            }
        }
        assert_eq!(&p.concept, best.unwrap().1);
    }

    #[test]
    fn scripted_sim_strategy_replays() {
        let w = sim();
        let script = ScriptedLlm::shared(vec![TranscriptEntry {
            step: TranscriptStep::Loop(1),
            raw_response: answer("exercise mat"),
        }]);
        let p = sim_propose(
            &w,
            &ProposalRequest::main(vec![], IndexSet::new()),
            &SimStrategy::Scripted(script),
            &ctx(1),
        )
        .unwrap();
        assert_eq!(p.concept.as_str(), "exercise mat");
    }
}
