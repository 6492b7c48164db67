// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `line` command-line tool.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 provider
//! failure, 3 partial results written.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::activation::{
    parse_neuron_selector, CacheStatus, DatasetInit, DatasetSource, VisionProvider,
};
use crate::bridge::stub::{StubConfig, StubServer};
use crate::bridge::{BridgeClient, BridgeLlm, BridgeT2i, BridgeVision, DirDataset};
use crate::config::{CliConfig, Overrides, ProviderKind, SimProposerKind};
use crate::engine::{
    explain_layer, write_layer_artifacts, LayerRun, Providers, ResultSummary, RunConfig,
};
use crate::error::{LineError, Result};
use crate::eval::{eval_methods, read_label_csv, Assignments, EvalSetup};
use crate::io::atomic_write;
use crate::proposer::{LlmProposer, SimProposer, SimStrategy};
use crate::replay::{ReplayFixture, ReplayProviders};
use crate::report::{load_results, RunReport};
use crate::simworld::{SimDataset, SimT2i, SimVision, SimWorld};
use crate::synthesis::{ImageCache, ImageRef, PromptSpec, T2iProvider};
use crate::NeuronAddress;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_PROVIDER: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "line",
    version,
    about = "Iterative concept labeling for vision-model neurons"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Neuron selector, e.g. `avgpool:0-99`.
    #[arg(long, global = true)]
    pub neurons: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub provider: Option<ProviderKind>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub iterations: Option<u32>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and persist initialization matrices.
    InitCache,
    /// Label the selected neurons.
    Explain,
    /// Score label files with AUC and MAD.
    Eval {
        /// CSV with columns method,neuron_layer,neuron_index,label.
        #[arg(long = "labels")]
        labels: Vec<PathBuf>,
        /// Output of an explain run, as `DIR` or `METHOD=DIR`.
        #[arg(long = "run")]
        runs: Vec<String>,
    },
    /// Convergence study in a generated simulation world.
    Simulate,
    /// Origin breakdown and discovery histogram of a finished run.
    Report {
        /// Run directory; defaults to the configured output directory.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Serve the deterministic stub models over HTTP.
    BridgeStub {
        #[arg(long, default_value = "127.0.0.1:8765")]
        bind: String,
        #[arg(long, default_value_t = 0)]
        fail_first: usize,
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
    },
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            neurons: self.neurons.clone(),
            provider: self.provider,
            out: self.out.clone(),
            iterations: self.iterations,
            batch_size: self.batch_size,
        }
    }
}

/// Exit status for an error.
pub fn exit_code(e: &LineError) -> i32 {
    match e {
        LineError::Provider { .. }
        | LineError::PayloadTooLarge { .. }
        | LineError::Protocol(_)
        | LineError::MalformedResponse(_)
        | LineError::ForbiddenExhausted { .. }
        | LineError::TranscriptExhausted { .. } => EXIT_PROVIDER,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// exit status. Messages go to stderr; result paths to stdout.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("line: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    if let Command::BridgeStub {
        bind,
        fail_first,
        delay_ms,
    } = &cli.command
    {
        let stub = StubServer::bind(
            bind,
            StubConfig {
                fail_first: *fail_first,
                delay_ms: *delay_ms,
                ..StubConfig::default()
            },
        )?;
        println!("{}", stub.url());
        stub.wait();
        return Ok(EXIT_OK);
    }
    let overrides = cli.global.overrides();
    let base = match &cli.global.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    let mut cfg = base.resolve(&overrides)?;
    match cli.command {
        Command::InitCache => cmd_init_cache(&cfg),
        Command::Explain => cmd_explain(&mut cfg, &overrides),
        Command::Simulate => {
            cfg.provider = ProviderKind::Sim;
            cmd_simulate(&mut cfg)
        }
        Command::Eval { labels, runs } => cmd_eval(&cfg, &labels, &runs),
        Command::Report { run } => cmd_report(&cfg, run.as_deref()),
        Command::BridgeStub { .. } => unreachable!("handled above"),
    }
}

/// Sim adapters that own their world, so they can be shared as `Arc<dyn _>`.
struct SharedSim(Arc<SimWorld>);

impl T2iProvider for SharedSim {
    fn generate(&self, prompts: &[PromptSpec]) -> Result<Vec<ImageRef>> {
        SimT2i { world: &self.0 }.generate(prompts)
    }
}

impl VisionProvider for SharedSim {
    fn layer_width(&self, layer: &str) -> Result<usize> {
        SimVision { world: &self.0 }.layer_width(layer)
    }

    fn activations(
        &self,
        images: &[ImageRef],
        layer: &str,
        indices: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        SimVision { world: &self.0 }.activations(images, layer, indices)
    }
}

struct SharedSimDataset {
    world: Arc<SimWorld>,
    id: String,
}

impl DatasetSource for SharedSimDataset {
    fn id(&self) -> &str {
        &self.id
    }

    fn classes(&self) -> Vec<String> {
        SimDataset::new(&self.world).classes()
    }

    fn images(&self, class: &str) -> Result<Vec<ImageRef>> {
        SimDataset::new(&self.world).images(class)
    }
}

/// Providers for the sim and bridge backends.
struct Backend {
    proposer: Box<dyn crate::proposer::Proposer>,
    t2i: Box<dyn T2iProvider>,
    vision: Arc<dyn VisionProvider>,
    dataset: Arc<dyn DatasetSource>,
    init: DatasetInit,
    cache: ImageCache,
    world: Option<Arc<SimWorld>>,
}

impl Backend {
    fn providers(&self) -> Providers<'_> {
        Providers {
            proposer: &*self.proposer,
            t2i: &*self.t2i,
            vision: &*self.vision,
            init: &self.init,
            cache: &self.cache,
        }
    }

    fn eval_setup(&self, cfg: &CliConfig) -> EvalSetup<'_> {
        EvalSetup {
            t2i: &*self.t2i,
            vision: &*self.vision,
            dataset: &*self.dataset,
            batch_size: cfg.eval_batch_size(),
            control_size: cfg.eval.control_size,
            control_seed: cfg.control_seed(),
            eval_salt: cfg.eval_salt(),
            run_salt: cfg.run.run_salt,
            cache: Some(&self.cache),
        }
    }
}

fn cache_subdir(cfg: &CliConfig, name: &str) -> Option<PathBuf> {
    cfg.paths.cache_dir.as_ref().map(|d| d.join(name))
}

fn image_cache(cfg: &CliConfig) -> ImageCache {
    match cache_subdir(cfg, "images") {
        Some(d) => ImageCache::with_dir(d),
        None => ImageCache::in_memory(),
    }
}

/// Fits the initialization sizes to the sim dataset and fills in the
/// default neuron selection.
fn fit_sim(cfg: &mut CliConfig, world: &SimWorld) {
    let classes = world.dataset_classes().len();
    let images = world.config().images_per_class;
    if cfg.run.init_classes > classes || cfg.run.init_images > images {
        log::info!(
            "sim dataset has {classes} classes of {images} images; initialization uses {}x{}",
            cfg.run.init_classes.min(classes),
            cfg.run.init_images.min(images)
        );
    }
    cfg.run.init_classes = cfg.run.init_classes.min(classes);
    cfg.run.init_images = cfg.run.init_images.min(images);
    if cfg.neurons.is_none() {
        cfg.neurons = Some(format!(
            "{}:0-{}",
            world.config().layer,
            world.neurons().len().saturating_sub(1)
        ));
    }
}

fn sim_backend(cfg: &mut CliConfig) -> Result<Backend> {
    let world = Arc::new(SimWorld::new(cfg.sim.clone())?);
    fit_sim(cfg, &world);
    cfg.validate()?;
    let shared = Arc::new(SharedSim(world.clone()));
    let dataset: Arc<dyn DatasetSource> = Arc::new(SharedSimDataset {
        world: world.clone(),
        id: SimDataset::new(&world).id().to_string(),
    });
    let init = DatasetInit::new(
        shared.clone(),
        dataset.clone(),
        cfg.run.init_classes,
        cfg.run.init_images,
        "sim",
        cache_subdir(cfg, "init"),
    );
    let strategy = match cfg.sim_proposer {
        SimProposerKind::Greedy => SimStrategy::Greedy,
        SimProposerKind::Oracle => SimStrategy::Oracle,
    };
    Ok(Backend {
        proposer: Box::new(SimProposer {
            world: world.clone(),
            strategy,
        }),
        t2i: Box::new(SharedSim(world.clone())),
        vision: shared,
        dataset,
        init,
        cache: image_cache(cfg),
        world: Some(world),
    })
}

fn bridge_backend(cfg: &CliConfig) -> Result<Backend> {
    let client = Arc::new(BridgeClient::new(cfg.bridge.endpoint.clone())?);
    let images = match &cfg.bridge.images {
        Some(e) => Arc::new(BridgeClient::new(e.clone())?),
        None => client.clone(),
    };
    if cfg.bridge.layer_widths.is_empty() {
        return Err(LineError::Config("bridge.layer_widths is empty".into()));
    }
    let dir = cfg.paths.dataset_dir.as_ref().ok_or_else(|| {
        LineError::Config("paths.dataset_dir is required for the bridge provider".into())
    })?;
    let dataset: Arc<dyn DatasetSource> = Arc::new(DirDataset::open(dir, None)?);
    let vision: Arc<dyn VisionProvider> = Arc::new(BridgeVision {
        client: client.clone(),
        layer_widths: cfg.bridge.layer_widths.clone(),
        chunk: cfg.bridge.chunk,
    });
    let init = DatasetInit::new(
        vision.clone(),
        dataset.clone(),
        cfg.run.init_classes,
        cfg.run.init_images,
        cfg.bridge.model_id.clone(),
        cache_subdir(cfg, "init"),
    );
    Ok(Backend {
        proposer: Box::new(LlmProposer {
            llm: Arc::new(BridgeLlm(client)),
            max_retries: cfg.run.max_retries,
            options: cfg.chat.clone(),
            policy: cfg.run.forbidden_policy,
        }),
        t2i: Box::new(BridgeT2i(images)),
        vision,
        dataset,
        init,
        cache: image_cache(cfg),
        world: None,
    })
}

fn backend(cfg: &mut CliConfig) -> Result<Backend> {
    match cfg.provider {
        ProviderKind::Sim => sim_backend(cfg),
        ProviderKind::Bridge => bridge_backend(cfg),
        ProviderKind::Replay => Err(LineError::Config(
            "the replay provider only supports the explain command".into(),
        )),
    }
}

fn selected(cfg: &CliConfig) -> Result<Vec<NeuronAddress>> {
    let spec = cfg.neurons.as_deref().ok_or_else(|| {
        LineError::Config("no neurons selected; pass --neurons LAYER:0-99".into())
    })?;
    parse_neuron_selector(spec)
}

fn check_neurons(vision: &dyn VisionProvider, neurons: &[NeuronAddress]) -> Result<()> {
    let mut widths = BTreeMap::new();
    for n in neurons {
        let width = match widths.get(&n.layer) {
            Some(&w) => w,
            None => *widths
                .entry(n.layer.clone())
                .or_insert(vision.layer_width(&n.layer)?),
        };
        if n.index >= width {
            return Err(LineError::Config(format!(
                "neuron {n} out of range for layer width {width}"
            )));
        }
    }
    Ok(())
}

fn prepare_out(cfg: &CliConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    cfg.echo(dir)?;
    Ok(())
}

fn cmd_init_cache(cfg: &CliConfig) -> Result<i32> {
    let mut cfg = cfg.clone();
    if cfg.paths.cache_dir.is_none() {
        return Err(LineError::Config(
            "paths.cache_dir is required for init-cache".into(),
        ));
    }
    let b = backend(&mut cfg)?;
    let neurons = selected(&cfg)?;
    check_neurons(&*b.vision, &neurons)?;
    prepare_out(&cfg, &cfg.out)?;
    let status = b.init.ensure(&neurons)?;
    let count = |s| status.iter().filter(|&&x| x == s).count();
    println!(
        "init cache: {} built, {} rebuilt, {} loaded",
        count(CacheStatus::Built),
        count(CacheStatus::Rebuilt),
        count(CacheStatus::Loaded)
    );
    Ok(EXIT_OK)
}

fn finish_layer(cfg: &CliConfig, run: &LayerRun) -> Result<i32> {
    write_layer_artifacts(&cfg.out, run)?;
    let ok = run.results.iter().filter(|r| r.is_ok()).count();
    println!(
        "{ok}/{} neurons labeled; results in {}",
        run.results.len(),
        cfg.out.display()
    );
    Ok(if ok == 0 {
        EXIT_PROVIDER
    } else if run.is_partial() {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    })
}

fn cmd_explain(cfg: &mut CliConfig, overrides: &Overrides) -> Result<i32> {
    if cfg.provider == ProviderKind::Replay {
        return explain_replay(cfg, overrides);
    }
    let b = backend(cfg)?;
    let neurons = selected(cfg)?;
    check_neurons(&*b.vision, &neurons)?;
    prepare_out(cfg, &cfg.out)?;
    let run = explain_layer(&cfg.run, &neurons, b.providers())?;
    finish_layer(cfg, &run)
}

fn explain_replay(cfg: &mut CliConfig, overrides: &Overrides) -> Result<i32> {
    let path = cfg.paths.replay_fixture.clone().ok_or_else(|| {
        LineError::Config("paths.replay_fixture is required for the replay provider".into())
    })?;
    let fixture = ReplayFixture::load(&path)?;
    cfg.run = replay_run_config(fixture.config.clone(), cfg, overrides);
    cfg.validate()?;
    let available = fixture.neurons();
    let neurons = match &cfg.neurons {
        Some(spec) => parse_neuron_selector(spec)?,
        None => available.clone(),
    };
    if let Some(n) = neurons.iter().find(|n| !available.contains(n)) {
        return Err(LineError::Config(format!(
            "neuron {n} is not in the replay fixture"
        )));
    }
    let p: ReplayProviders = fixture.providers(cfg.run.max_retries, cfg.run.forbidden_policy)?;
    prepare_out(cfg, &cfg.out)?;
    let run = explain_layer(&cfg.run, &neurons, p.providers())?;
    finish_layer(cfg, &run)
}

/// The recorded run's settings with command-line values on top.
fn replay_run_config(mut run: RunConfig, cfg: &CliConfig, o: &Overrides) -> RunConfig {
    if let Some(v) = o.iterations {
        run.iterations = v;
    }
    if let Some(v) = o.batch_size {
        run.batch_size = v;
    }
    if let Some(v) = o.seed {
        run.seed = v;
    }
    run.workers = cfg.workers;
    run
}

fn cmd_simulate(cfg: &mut CliConfig) -> Result<i32> {
    let b = sim_backend(cfg)?;
    let neurons = selected(cfg)?;
    check_neurons(&*b.vision, &neurons)?;
    prepare_out(cfg, &cfg.out)?;
    let world = b.world.as_ref().expect("sim backend has a world");
    let manifest = serde_json::to_string_pretty(&world.manifest())? + "\n";
    atomic_write(&cfg.out.join("world.json"), manifest.as_bytes())?;
    let run = explain_layer(&cfg.run, &neurons, b.providers())?;
    finish_layer(cfg, &run)
}

fn cmd_eval(cfg: &CliConfig, labels: &[PathBuf], runs: &[String]) -> Result<i32> {
    let mut cfg = cfg.clone();
    let mut assignments = Assignments::new();
    for path in labels {
        read_label_csv(&std::fs::read_to_string(path)?, &mut assignments)?;
    }
    for spec in runs {
        let (method, dir) = match spec.split_once('=') {
            Some((m, d)) => (m.to_string(), PathBuf::from(d)),
            None => ("line".to_string(), PathBuf::from(spec)),
        };
        let entry = assignments.entry(method).or_default();
        for r in load_results(&dir)? {
            let ResultSummary {
                neuron, best_label, ..
            } = r;
            entry.insert(neuron, best_label);
        }
    }
    if assignments.is_empty() {
        return Err(LineError::Config(
            "nothing to evaluate; pass --labels FILE or --run DIR".into(),
        ));
    }
    let b = backend(&mut cfg)?;
    let neurons: Vec<NeuronAddress> = assignments
        .values()
        .flat_map(|m| m.keys().cloned())
        .collect();
    check_neurons(&*b.vision, &neurons)?;
    prepare_out(&cfg, &cfg.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| LineError::Config(format!("worker pool: {e}")))?;
    let report = pool.install(|| eval_methods(&assignments, &b.eval_setup(&cfg)))?;
    report.write(&cfg.out, "eval")?;
    for a in &report.aggregates {
        println!(
            "{}: auc {:.3} ± {:.3}, mad {:.3} ± {:.3} over {} neurons",
            a.method, a.auc.mean, a.auc.std, a.mad.mean, a.mad.std, a.neurons
        );
    }
    if report.rows.is_empty() {
        return Ok(EXIT_PROVIDER);
    }
    Ok(if report.failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    })
}

fn cmd_report(cfg: &CliConfig, run: Option<&Path>) -> Result<i32> {
    let run_dir = run.unwrap_or(&cfg.out);
    let report = RunReport::load(run_dir)?;
    let dir = run_dir.join("report");
    prepare_out(cfg, &dir)?;
    report.write(&dir)?;
    let o = &report.origins;
    println!(
        "{} neurons: {} predefined, {} generated, {} summary",
        report.neurons, o.predefined, o.generated, o.summary
    );
    println!("report in {}", dir.display());
    Ok(EXIT_OK)
}
