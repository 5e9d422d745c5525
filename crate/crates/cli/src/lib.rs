//! Command implementations behind the `diagsim` binary.
//!
//! Exit codes: 0 success, 1 validation or user error, 2 runtime failure.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use diagsim::agents::{Agent, AgentKind, AgentSpec};
use diagsim::drrn::{Checkpoint, QNetwork, StateUpdater};
use diagsim::embed::{load_vectors, CachedEmbedder, Embedder, HashEmbedder};
use diagsim::env::{Action, Episode};
use diagsim::eval::{make_corpus_splits, read_results, score_card, stats_report, write_results, ResultRow, ScoreCard, SplitName};
use diagsim::llm::{oracle_rule, read_replay, ChatProvider, HttpProvider, RecordingProvider, ReplayRecord, ScriptedProvider};
use diagsim::scenario::{enumerate_subtasks, load_scenario, scenario_files, Scenario, Subtask};
use diagsim::seed::derive_seed;
use diagsim::training::{train, TrainConfig};
use diagsim::transcript::{DecisionAudit, DecisionSource, Transcript};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input or configuration; exit code 1.
    #[error("{0}")]
    User(String),
    /// Failure while running; exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn user(e: impl fmt::Display) -> CliError {
    CliError::User(e.to_string())
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub type CliResult<T> = Result<T, CliError>;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    Scripted,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UpdaterArg {
    Sum,
    Mean,
    Max,
}

impl From<UpdaterArg> for StateUpdater {
    fn from(u: UpdaterArg) -> Self {
        match u {
            UpdaterArg::Sum => StateUpdater::Sum,
            UpdaterArg::Mean => StateUpdater::Mean,
            UpdaterArg::Max => StateUpdater::Max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Validation,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Validation => SplitName::Validation,
            SplitArg::Test => SplitName::Test,
        }
    }
}

impl fmt::Display for SplitArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitArg::Validation => "validation",
            SplitArg::Test => "test",
        })
    }
}

/// Scalar hyperparameters accepted by `--set key=value`, with defaults.
pub const HYPERPARAMETERS: &[(&str, f64)] = &[
    ("lr", 1e-3),
    ("gamma", 0.99),
    ("batch_size", 32.0),
    ("replay_capacity", 10_000.0),
    ("target_sync", 100.0),
    ("grad_clip", 5.0),
    ("eval_every", 50.0),
    ("anneal_episodes", 0.0),
    ("updates_per_step", 1.0),
    ("stop_at", 0.0),
    ("hash_dim", 64.0),
    ("hash_norm", 8.0),
    ("k_interaction", 5.0),
    ("k_posttest", 2.0),
    ("max_trials", 3.0),
];

pub fn default_hyperparameter(key: &str) -> Option<f64> {
    HYPERPARAMETERS.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

/// Everything a command needs, assembled from flags.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario_dir: PathBuf,
    pub vectors_path: Option<PathBuf>,
    pub provider: ProviderKind,
    pub seed: u64,
    pub agent: AgentKind,
    pub reflective: bool,
    pub episodes: usize,
    pub hyperparameters: BTreeMap<String, f64>,
    pub updater: StateUpdater,
    pub replay: Option<PathBuf>,
    pub oracle_fallback: bool,
    pub record: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub workers: usize,
}

impl RunConfig {
    pub fn new(scenario_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            scenario_dir: scenario_dir.into(),
            vectors_path: None,
            provider: ProviderKind::Scripted,
            seed: 0,
            agent: AgentKind::Rl,
            reflective: false,
            episodes: 2_000,
            hyperparameters: BTreeMap::new(),
            updater: StateUpdater::Sum,
            replay: None,
            oracle_fallback: true,
            record: None,
            endpoint: None,
            model: None,
            workers: 1,
        }
    }

    /// Parses `key=value` and stores it after checking the key is known.
    pub fn set(&mut self, assignment: &str) -> CliResult<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| user(format!("expected key=value, got {assignment:?}")))?;
        let k = k.trim();
        if default_hyperparameter(k).is_none() {
            let known: Vec<&str> = HYPERPARAMETERS.iter().map(|(k, _)| *k).collect();
            return Err(user(format!("unknown hyperparameter {k:?}; known: {}", known.join(", "))));
        }
        let v: f64 = v.trim().parse().map_err(|_| user(format!("{k}: {v:?} is not a number")))?;
        if !v.is_finite() {
            return Err(user(format!("{k} must be finite")));
        }
        self.hyperparameters.insert(k.to_string(), v);
        Ok(())
    }

    pub fn hyper(&self, key: &str) -> f64 {
        self.hyperparameters
            .get(key)
            .copied()
            .or_else(|| default_hyperparameter(key))
            .unwrap_or_else(|| panic!("unregistered hyperparameter {key}"))
    }

    fn hyper_count(&self, key: &str) -> CliResult<usize> {
        let v = self.hyper(key);
        if v < 0.0 || v.fract() != 0.0 {
            return Err(user(format!("{key} must be a non-negative integer, got {v}")));
        }
        Ok(v as usize)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.provider == ProviderKind::Http && (self.endpoint.is_none() || self.model.is_none()) {
            return Err(user("the http provider needs --endpoint and --model"));
        }
        if self.provider == ProviderKind::Scripted && self.replay.is_none() && !self.oracle_fallback {
            return Err(user("the scripted provider needs --replay or the rule-based fallback"));
        }
        if self.workers == 0 {
            return Err(user("--workers must be at least 1"));
        }
        for key in ["batch_size", "replay_capacity", "target_sync", "eval_every", "updates_per_step", "hash_dim", "k_interaction", "k_posttest", "max_trials"] {
            if self.hyper_count(key)? == 0 {
                return Err(user(format!("{key} must be positive")));
            }
        }
        if self.hyper("lr") <= 0.0 || self.hyper("hash_norm") <= 0.0 || self.hyper("grad_clip") <= 0.0 {
            return Err(user("lr, hash_norm and grad_clip must be positive"));
        }
        if !(0.0..=1.0).contains(&self.hyper("gamma")) {
            return Err(user("gamma must lie in [0, 1]"));
        }
        AgentSpec::new(self.agent, self.reflective).map_err(user)?;
        Ok(())
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let mut c = TrainConfig::new(self.episodes, self.seed);
        c.drrn.learning_rate = self.hyper("lr");
        c.drrn.gamma = self.hyper("gamma");
        c.drrn.batch_size = self.hyper_count("batch_size")?;
        c.drrn.replay_capacity = self.hyper_count("replay_capacity")?;
        c.drrn.target_sync = self.hyper_count("target_sync")?;
        c.drrn.grad_clip = self.hyper("grad_clip");
        c.drrn.updater = self.updater;
        c.eval_every = self.hyper_count("eval_every")?;
        c.anneal_episodes = Some(self.hyper_count("anneal_episodes")?).filter(|&n| n > 0);
        c.updates_per_step = self.hyper_count("updates_per_step")?;
        c.stop_at = Some(self.hyper("stop_at")).filter(|&v| v > 0.0);
        c.embedding = self.embedding().label();
        Ok(c)
    }

    pub fn agent_spec(&self) -> CliResult<AgentSpec> {
        let mut spec = AgentSpec::new(self.agent, self.reflective).map_err(user)?;
        spec.k_interaction = self.hyper_count("k_interaction")?;
        spec.k_posttest = self.hyper_count("k_posttest")?;
        Ok(spec)
    }

    pub fn embedding(&self) -> EmbeddingSpec {
        match &self.vectors_path {
            Some(p) => EmbeddingSpec::Vectors(p.clone()),
            None => EmbeddingSpec::Hash {
                dim: self.hyper("hash_dim") as usize,
                seed: 0,
                norm: self.hyper("hash_norm"),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Embeddings

/// Which embedder a checkpoint was trained with.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingSpec {
    Hash { dim: usize, seed: u64, norm: f64 },
    Vectors(PathBuf),
}

impl EmbeddingSpec {
    pub fn label(&self) -> String {
        match self {
            EmbeddingSpec::Hash { dim, seed, norm } => format!("hash:dim={dim}:seed={seed}:norm={norm}"),
            EmbeddingSpec::Vectors(p) => format!("vectors:{}", p.display()),
        }
    }

    pub fn build(&self) -> CliResult<Box<dyn Embedder>> {
        Ok(match self {
            EmbeddingSpec::Hash { dim, seed, norm } => {
                Box::new(CachedEmbedder::new(HashEmbedder::new(*dim, *seed).with_norm(*norm)))
            }
            EmbeddingSpec::Vectors(p) => Box::new(CachedEmbedder::new(load_vectors(p, None).map_err(user)?)),
        })
    }
}

impl FromStr for EmbeddingSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix("vectors:") {
            return Ok(EmbeddingSpec::Vectors(PathBuf::from(path)));
        }
        let bad = || user(format!("unrecognized embedding label {s:?}"));
        let rest = s.strip_prefix("hash:").ok_or_else(bad)?;
        let mut fields = BTreeMap::new();
        for part in rest.split(':') {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        Ok(EmbeddingSpec::Hash {
            dim: get("dim")?.parse().map_err(|_| bad())?,
            seed: get("seed")?.parse().map_err(|_| bad())?,
            norm: get("norm")?.parse().map_err(|_| bad())?,
        })
    }
}

// ---------------------------------------------------------------------------
// Scenarios

pub fn load_corpus(dir: &Path) -> CliResult<Vec<Scenario>> {
    let files = scenario_files(dir).map_err(user)?;
    if files.is_empty() {
        return Err(user(format!("no scenarios found in {}", dir.display())));
    }
    let mut scenarios: Vec<Scenario> = Vec::with_capacity(files.len());
    for f in files {
        let s = load_scenario(&f).map_err(user)?;
        if scenarios.iter().any(|o| o.id() == s.id()) {
            return Err(user(format!("{}: duplicate patient_id {:?}", f.display(), s.id())));
        }
        scenarios.push(s);
    }
    Ok(scenarios)
}

/// Parses `cause#wording` (or `cause` alone, meaning wording 0) against a scenario.
pub fn parse_subtask(scenario: &Scenario, text: &str) -> CliResult<Subtask> {
    let (cause, w) = match text.split_once('#') {
        Some((c, w)) => (c, w.parse::<usize>().map_err(|_| user(format!("bad wording index in {text:?}")))?),
        None => (text, 0),
    };
    let subtask = Subtask {
        scenario_id: scenario.id().to_string(),
        cause_id: cause.to_string(),
        wording_index: w,
    };
    if !scenario.owns(&subtask) {
        return Err(user(format!("{subtask} is not a subtask of {}", scenario.id())));
    }
    Ok(subtask)
}

// ---------------------------------------------------------------------------
// validate

/// Prints one status line per scenario file; true when every file is valid.
pub fn cmd_validate(dir: &Path, out: &mut dyn Write) -> CliResult<bool> {
    let files = scenario_files(dir).map_err(user)?;
    if files.is_empty() {
        writeln!(out, "no scenarios found in {}", dir.display()).map_err(runtime)?;
        return Ok(false);
    }
    let mut ok = true;
    let mut ids: Vec<String> = Vec::new();
    for f in &files {
        match load_scenario(f) {
            Ok(s) if ids.iter().any(|id| id == s.id()) => {
                ok = false;
                writeln!(out, "error {}: duplicate patient_id {:?}", f.display(), s.id()).map_err(runtime)?;
            }
            Ok(s) => {
                writeln!(
                    out,
                    "ok    {} ({}: {} causes, {} key questions, {} subtasks)",
                    f.display(),
                    s.id(),
                    s.causes.len(),
                    s.key_questions.len(),
                    enumerate_subtasks(&s).len()
                )
                .map_err(runtime)?;
                ids.push(s.id().to_string());
            }
            Err(e) => {
                ok = false;
                writeln!(out, "error {}: {e}", f.display()).map_err(runtime)?;
            }
        }
    }
    Ok(ok)
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub best_validation: f64,
    pub best_episode: usize,
}

/// Trains on the training split and writes `checkpoint.json`, `training_curve.csv` and
/// `splits.json` into `out_dir`.
pub fn cmd_train(config: &RunConfig, out_dir: &Path) -> CliResult<TrainOutput> {
    config.validate()?;
    if config.episodes == 0 {
        return Err(user("--episodes must be at least 1"));
    }
    let scenarios = load_corpus(&config.scenario_dir)?;
    let splits = make_corpus_splits(&scenarios, config.seed).map_err(user)?;
    let tc = config.train_config()?;
    let embedder = config.embedding().build()?;
    fs::create_dir_all(out_dir).map_err(runtime)?;
    let report = train(&scenarios, &splits.train, &splits.validation, embedder.as_ref(), &tc).map_err(runtime)?;
    let checkpoint = out_dir.join("checkpoint.json");
    report.best.save(&checkpoint).map_err(runtime)?;
    let curve = out_dir.join("training_curve.csv");
    report
        .write_curve(fs::File::create(&curve).map_err(runtime)?)
        .map_err(runtime)?;
    let splits_json = serde_json::to_string_pretty(&splits).map_err(runtime)?;
    fs::write(out_dir.join("splits.json"), splits_json).map_err(runtime)?;
    Ok(TrainOutput {
        checkpoint,
        curve,
        best_validation: report.best_validation,
        best_episode: report.best.episode,
    })
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub results: PathBuf,
    pub report: PathBuf,
    pub rows: Vec<ResultRow>,
}

enum Providers {
    None,
    Shared(Arc<dyn ChatProvider>),
    Scripted { replay: Arc<Vec<ReplayRecord>>, fallback: bool },
}

impl Providers {
    fn for_subtask(&self, scenario: &Scenario, subtask: &Subtask) -> Option<Arc<dyn ChatProvider>> {
        match self {
            Providers::None => None,
            Providers::Shared(p) => Some(p.clone()),
            Providers::Scripted { replay, fallback } => {
                let mut p = ScriptedProvider::new();
                for r in replay.iter() {
                    p.insert(r.fingerprint.clone(), r.response.clone());
                }
                if *fallback {
                    p = p.rule(oracle_rule(scenario, subtask));
                }
                Some(Arc::new(p))
            }
        }
    }
}

fn build_providers(config: &RunConfig) -> CliResult<Providers> {
    if !config.agent.uses_llm() {
        return Ok(Providers::None);
    }
    match config.provider {
        ProviderKind::Scripted => {
            let replay = match &config.replay {
                Some(p) => read_replay(p).map_err(user)?,
                None => Vec::new(),
            };
            Ok(Providers::Scripted {
                replay: Arc::new(replay),
                fallback: config.oracle_fallback || config.replay.is_none(),
            })
        }
        ProviderKind::Http => {
            let endpoint = config.endpoint.clone().ok_or_else(|| user("--endpoint is required"))?;
            let model = config.model.clone().ok_or_else(|| user("--model is required"))?;
            let http = HttpProvider::from_env(endpoint, model).map_err(user)?;
            Ok(Providers::Shared(match &config.record {
                Some(path) => Arc::new(RecordingProvider::new(http, path).map_err(user)?),
                None => Arc::new(http),
            }))
        }
    }
}

fn transcript_file_name(t: &Subtask) -> String {
    format!("{}__{}__{}.jsonl", t.scenario_id, t.cause_id, t.wording_index)
}

/// Runs the configured agent over a split; writes the results CSV, a statistics report
/// and one JSONL transcript per subtask.
pub fn cmd_eval(config: &RunConfig, checkpoint: Option<&Path>, split: SplitArg, out_dir: &Path) -> CliResult<EvalOutput> {
    config.validate()?;
    let spec = config.agent_spec()?;
    let scenarios = load_corpus(&config.scenario_dir)?;
    let splits = make_corpus_splits(&scenarios, config.seed).map_err(user)?;
    let subtasks: Vec<Subtask> = splits.get(split.into()).to_vec();

    let loaded: Option<Checkpoint> = match (spec.kind.uses_network(), checkpoint) {
        (true, None) => return Err(user(format!("the {} agent needs --checkpoint", spec.kind))),
        (true, Some(p)) => Some(Checkpoint::load(p).map_err(|e| user(format!("{}: {e}", p.display())))?),
        (false, _) => None,
    };
    let embedding = match &loaded {
        Some(c) if config.vectors_path.is_none() => c.embedding.parse::<EmbeddingSpec>()?,
        _ => config.embedding(),
    };
    let embedder = embedding.build()?;
    let updater = loaded.as_ref().map_or(config.updater, |c| c.config.updater);
    let net: Option<&QNetwork> = loaded.as_ref().map(|c| &c.network);
    let providers = build_providers(config)?;
    let max_trials = config.hyper_count("max_trials")?;
    let label = spec.label();

    let transcripts_dir = out_dir.join("transcripts").join(&label);
    fs::create_dir_all(&transcripts_dir).map_err(runtime)?;

    let run_one = |t: &Subtask| -> CliResult<(Transcript, ScoreCard, usize)> {
        let scenario = scenarios
            .iter()
            .find(|s| s.id() == t.scenario_id)
            .expect("split subtasks come from the corpus");
        let provider = providers.for_subtask(scenario, t);
        let mut agent = Agent::new(spec, net, provider.as_deref(), embedder.as_ref()).map_err(user)?;
        agent.updater = updater;
        let out = agent
            .run_trials(scenario, t, max_trials, derive_seed(config.seed, "eval"))
            .map_err(runtime)?;
        Ok((out.transcript, out.card, out.trial))
    };

    let workers = config.workers.min(subtasks.len()).max(1);
    let mut slots: Vec<Option<CliResult<(Transcript, ScoreCard, usize)>>> = (0..subtasks.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, t) in slots.iter_mut().zip(&subtasks) {
            *slot = Some(run_one(t));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let subtasks = &subtasks;
                    let run_one = &run_one;
                    scope.spawn(move || {
                        (w..subtasks.len())
                            .step_by(workers)
                            .map(|i| (i, run_one(&subtasks[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
    }

    let mut rows = Vec::with_capacity(subtasks.len());
    for (t, slot) in subtasks.iter().zip(slots) {
        let (transcript, card, trial) = slot.expect("every subtask evaluated")?;
        let path = transcripts_dir.join(transcript_file_name(t));
        transcript
            .write_jsonl(fs::File::create(&path).map_err(runtime)?)
            .map_err(runtime)?;
        rows.push(ResultRow::new(&label, &card, trial));
    }

    let results = out_dir.join(format!("results_{label}_{split}.csv"));
    write_results(&rows, fs::File::create(&results).map_err(runtime)?).map_err(runtime)?;
    let report = out_dir.join(format!("report_{label}_{split}.txt"));
    fs::write(&report, stats_report(&rows).map_err(runtime)?).map_err(runtime)?;
    Ok(EvalOutput { results, report, rows })
}

// ---------------------------------------------------------------------------
// play

#[derive(Debug, Clone, PartialEq)]
pub enum PlayOutcome {
    Finished(ScoreCard),
    Aborted,
}

/// Interactive episode: prints observations and numbered actions, reads selections from
/// `input`. Out-of-range or non-numeric input re-prompts without changing state.
pub fn cmd_play(
    scenario: &Scenario,
    subtask: &Subtask,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
    transcript_path: Option<&Path>,
) -> CliResult<PlayOutcome> {
    let (mut episode, first) = Episode::reset(scenario, subtask).map_err(user)?;
    writeln!(out, "{}", first.observation.rendered).map_err(runtime)?;
    let mut line = String::new();
    while !episode.is_done() {
        let actions = episode.valid_actions().map_err(runtime)?;
        for (i, a) in actions.iter().enumerate() {
            writeln!(out, "  {}. {}", i + 1, a.text()).map_err(runtime)?;
        }
        let chosen: Action = loop {
            write!(out, "> ").map_err(runtime)?;
            out.flush().map_err(runtime)?;
            line.clear();
            if input.read_line(&mut line).map_err(runtime)? == 0 {
                writeln!(out, "\nsession ended before a diagnosis").map_err(runtime)?;
                return Ok(PlayOutcome::Aborted);
            }
            match line.trim().parse::<usize>() {
                Ok(n) if (1..=actions.len()).contains(&n) => break actions[n - 1].clone(),
                _ => writeln!(out, "Please enter a number between 1 and {}.", actions.len()).map_err(runtime)?,
            }
        };
        let audit = DecisionAudit {
            source: DecisionSource::Human,
            candidate_actions: actions.iter().map(Action::text).collect(),
            q_values: None,
        };
        let r = episode.step_with_audit(&chosen, Some(audit)).map_err(runtime)?;
        writeln!(out, "{}", r.observation.rendered).map_err(runtime)?;
    }
    let transcript = episode.into_transcript();
    let card = score_card(&transcript, scenario).map_err(runtime)?;
    writeln!(
        out,
        "posttest {} trajectory_quality {:.4} combined {:.4} steps {}",
        card.posttest, card.trajectory_quality, card.combined, card.steps
    )
    .map_err(runtime)?;
    if let Some(p) = transcript_path {
        transcript
            .write_jsonl(fs::File::create(p).map_err(runtime)?)
            .map_err(runtime)?;
    }
    Ok(PlayOutcome::Finished(card))
}

// ---------------------------------------------------------------------------
// stats

pub fn cmd_stats(results: &[PathBuf]) -> CliResult<String> {
    if results.is_empty() {
        return Err(user("no results files given"));
    }
    let mut rows = Vec::new();
    for p in results {
        let f = fs::File::open(p).map_err(|e| user(format!("{}: {e}", p.display())))?;
        rows.extend(read_results(f).map_err(|e| user(format!("{}: {e}", p.display())))?);
    }
    stats_report(&rows).map_err(user)
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(name = "diagsim", version, about = "Simulated diagnostic conversations with RL and LLM agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check every scenario file in a directory.
    Validate {
        #[arg(long, default_value = "scenarios")]
        scenarios: PathBuf,
    },
    /// Train a DRRN on the training split.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory for the checkpoint, training curve and splits.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate an agent on the validation or test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Play one subtask interactively.
    Play {
        #[arg(long, default_value = "scenarios")]
        scenarios: PathBuf,
        /// patient_id of the scenario to play.
        #[arg(long)]
        scenario: String,
        /// `cause#wording`; chosen at random from the seed when omitted.
        #[arg(long)]
        subtask: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the transcript as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare agents from one or more results files.
    Stats {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long, default_value = "scenarios")]
    pub scenarios: PathBuf,
    /// Word vectors in `.vec` text format; a hashed embedder is used when omitted.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProviderKind::Scripted)]
    pub provider: ProviderKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// rl, llm, sa-rl or da-rl.
    #[arg(long, default_value = "rl")]
    pub agent: AgentKind,
    #[arg(long)]
    pub reflective: bool,
    #[arg(long, default_value_t = 2_000)]
    pub episodes: usize,
    #[arg(long, value_enum, default_value_t = UpdaterArg::Sum)]
    pub updater: UpdaterArg,
    /// Hyperparameter override, e.g. `--set lr=0.001`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Recorded LLM responses (JSON lines) for the scripted provider.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// With --replay, fail on unrecorded prompts instead of answering by rule.
    #[arg(long)]
    pub no_fallback: bool,
    /// Append every http exchange to this replay file.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Evaluation worker threads.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

impl CommonArgs {
    pub fn to_config(&self) -> CliResult<RunConfig> {
        let mut c = RunConfig::new(&self.scenarios);
        c.vectors_path = self.vectors.clone();
        c.provider = self.provider;
        c.seed = self.seed;
        c.agent = self.agent;
        c.reflective = self.reflective;
        c.episodes = self.episodes;
        c.updater = self.updater.into();
        c.replay = self.replay.clone();
        c.oracle_fallback = !self.no_fallback;
        c.record = self.record.clone();
        c.endpoint = self.endpoint.clone();
        c.model = self.model.clone();
        c.workers = self.workers;
        for s in &self.set {
            c.set(s)?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match dispatch(cli, input, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> CliResult<i32> {
    match cli.command {
        Command::Validate { scenarios } => Ok(if cmd_validate(&scenarios, out)? { 0 } else { 1 }),
        Command::Train { common, out: dir } => {
            let r = cmd_train(&common.to_config()?, &dir)?;
            writeln!(
                out,
                "checkpoint {} (episode {}, validation posttest {:.4})\ncurve {}",
                r.checkpoint.display(),
                r.best_episode,
                r.best_validation,
                r.curve.display()
            )
            .map_err(runtime)?;
            Ok(0)
        }
        Command::Eval { common, checkpoint, split, out: dir } => {
            let r = cmd_eval(&common.to_config()?, checkpoint.as_deref(), split, &dir)?;
            writeln!(out, "results {}\nreport {}", r.results.display(), r.report.display()).map_err(runtime)?;
            Ok(0)
        }
        Command::Play { scenarios, scenario, subtask, seed, out: path } => {
            let corpus = load_corpus(&scenarios)?;
            let s = corpus
                .iter()
                .find(|s| s.id() == scenario)
                .ok_or_else(|| user(format!("no scenario with patient_id {scenario:?}")))?;
            let t = match subtask {
                Some(text) => parse_subtask(s, &text)?,
                None => {
                    let all = enumerate_subtasks(s);
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "play"));
                    all[rng.gen_range(0..all.len())].clone()
                }
            };
            match cmd_play(s, &t, input, out, path.as_deref())? {
                PlayOutcome::Finished(_) => Ok(0),
                PlayOutcome::Aborted => Ok(1),
            }
        }
        Command::Stats { results, out: path } => {
            let report = cmd_stats(&results)?;
            match path {
                Some(p) => fs::write(p, report).map_err(runtime)?,
                None => out.write_all(report.as_bytes()).map_err(runtime)?,
            }
            Ok(0)
        }
    }
}

/// Error line and exit code for input clap rejects.
pub fn usage_exit_code(e: &clap::Error) -> i32 {
    match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
        _ => 1,
    }
}

pub fn stdin_lines() -> io::StdinLock<'static> {
    io::stdin().lock()
}
