//! LLM providers, prompt assembly, action-call parsing, grounding, and reflective memory.
//!
//! Actions are exposed to the model as function calls:
//! `ask(subject, topic)`, `suggest_solution()` and `choose(cause)`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex, OnceLock};
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::{nearest_action, EmbedError, Embedder};
use crate::env::{Action, Episode, Phase};
use crate::scenario::{QuestionRef, Scenario, Subtask};
use crate::transcript::{DecisionSource, Transcript};

/// Attempts per decision before falling back.
pub const MAX_ATTEMPTS: usize = 3;
/// Trials given to reflective agents.
pub const MAX_TRIALS: usize = 3;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Decode(String),
    #[error("no scripted response for request {0}")]
    NoScript(String),
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("replay file: {0}")]
    Replay(String),
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("no valid actions to choose from")]
    NoActions,
    #[error("reflection refused: trial budget of {0} exhausted")]
    TrialCap(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(system: String, user: String) -> Self {
        ChatRequest {
            messages: vec![
                ChatMessage::new(Role::System, system),
                ChatMessage::new(Role::User, user),
            ],
            max_tokens: 256,
            temperature: 0.0,
        }
    }

    pub fn system(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map_or("", |m| m.content.as_str())
    }

    /// Content of the first user message.
    pub fn user(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }

    /// Stable hex SHA-256 over roles and contents of all messages.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.messages {
            h.update(format!("{:?}", m.role).as_bytes());
            h.update([0u8]);
            h.update(m.content.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub provider_meta: String,
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

impl<P: ChatProvider + ?Sized> ChatProvider for &P {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(request)
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for std::sync::Arc<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(request)
    }
}

type Responder = dyn Fn(&ChatRequest) -> Option<String> + Send + Sync;

/// Offline provider: replayed responses looked up by request fingerprint, then a rule.
pub struct ScriptedProvider {
    table: HashMap<String, String>,
    rule: Option<Box<Responder>>,
    calls: AtomicUsize,
}

impl ScriptedProvider {
    pub fn new() -> Self {
        ScriptedProvider {
            table: HashMap::new(),
            rule: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_rule(rule: impl Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static) -> Self {
        ScriptedProvider::new().rule(rule)
    }

    pub fn rule(mut self, rule: impl Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static) -> Self {
        self.rule = Some(Box::new(rule));
        self
    }

    /// Responds with `outputs` in order, repeating the last one forever.
    pub fn sequence<S: Into<String>>(outputs: impl IntoIterator<Item = S>) -> Self {
        let outputs: Vec<String> = outputs.into_iter().map(Into::into).collect();
        let next = AtomicUsize::new(0);
        ScriptedProvider::with_rule(move |_| {
            let i = next.fetch_add(1, Ordering::SeqCst);
            outputs.get(i.min(outputs.len().saturating_sub(1))).cloned()
        })
    }

    pub fn insert(&mut self, fingerprint: impl Into<String>, response: impl Into<String>) {
        self.table.insert(fingerprint.into(), response.into());
    }

    pub fn load_replay(mut self, path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        for record in read_replay(path)? {
            self.table.insert(record.fingerprint, record.response);
        }
        Ok(self)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Default for ScriptedProvider {
    fn default() -> Self {
        ScriptedProvider::new()
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let fp = request.fingerprint();
        if let Some(content) = self.table.get(&fp) {
            return Ok(ChatResponse {
                content: content.clone(),
                provider_meta: "scripted:replay".into(),
            });
        }
        match self.rule.as_ref().and_then(|r| r(request)) {
            Some(content) => Ok(ChatResponse {
                content,
                provider_meta: "scripted:rule".into(),
            }),
            None => Err(ProviderError::NoScript(fp)),
        }
    }
}

/// One line of a replay file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub fingerprint: String,
    pub request: ChatRequest,
    pub response: String,
}

pub fn read_replay(path: impl AsRef<Path>) -> Result<Vec<ReplayRecord>, ProviderError> {
    let file = File::open(path.as_ref()).map_err(|e| ProviderError::Replay(e.to_string()))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ProviderError::Replay(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| ProviderError::Replay(format!("line {}: {e}", i + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// Wraps a provider and appends every successful exchange to a replay file.
pub struct RecordingProvider<P> {
    inner: P,
    out: Mutex<File>,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn new(inner: P, path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let out = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path.as_ref())
            .map_err(|e| ProviderError::Replay(e.to_string()))?;
        Ok(RecordingProvider {
            inner,
            out: Mutex::new(out),
        })
    }
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let response = self.inner.complete(request)?;
        let record = ReplayRecord {
            fingerprint: request.fingerprint(),
            request: request.clone(),
            response: response.content.clone(),
        };
        let line = serde_json::to_string(&record).map_err(|e| ProviderError::Replay(e.to_string()))?;
        let mut out = self.out.lock().expect("replay file lock poisoned");
        writeln!(out, "{line}").map_err(|e| ProviderError::Replay(e.to_string()))?;
        Ok(response)
    }
}

/// Counting semaphore bounding concurrent provider calls.
pub struct InFlightLimiter {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

pub struct InFlightPermit<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        InFlightLimiter {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut n = self.current.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        InFlightPermit(self)
    }

    pub fn in_flight(&self) -> usize {
        *self.current.lock().expect("limiter poisoned")
    }
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        *self.0.current.lock().expect("limiter poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

/// Chat-completions endpoint speaking the common JSON messages payload.
pub struct HttpProvider {
    endpoint: String,
    model: String,
    api_key: String,
    agent: ureq::Agent,
    attempts: usize,
    backoff: Duration,
    limiter: InFlightLimiter,
}

pub const API_KEY_VAR: &str = "LLM_API_KEY";

impl HttpProvider {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpProvider {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: api_key.into(),
            agent,
            attempts: 3,
            backoff: Duration::from_millis(500),
            limiter: InFlightLimiter::new(4),
        }
    }

    /// Reads the API key from `LLM_API_KEY`.
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>) -> Result<Self, ProviderError> {
        let key = std::env::var(API_KEY_VAR)
            .map_err(|_| ProviderError::Config(format!("environment variable {API_KEY_VAR} is not set")))?;
        Ok(HttpProvider::new(endpoint, model, key))
    }

    pub fn with_retry(mut self, attempts: usize, backoff: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn with_in_flight_cap(mut self, cap: usize) -> Self {
        self.limiter = InFlightLimiter::new(cap);
        self
    }

    fn body(&self, request: &ChatRequest) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "messages": request.messages,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<ChatResponse, ProviderError> {
        let mut response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if status != 200 {
            return Err(ProviderError::Status { status, body: text });
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ProviderError::Decode(e.to_string()))?;
        let content = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ProviderError::Decode("missing choices[0].message.content".into()))?;
        Ok(ChatResponse {
            content: content.to_string(),
            provider_meta: value["model"].as_str().unwrap_or(&self.model).to_string(),
        })
    }
}

fn retryable(e: &ProviderError) -> bool {
    match e {
        ProviderError::Transport(_) => true,
        ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let _permit = self.limiter.acquire();
        let body = self.body(request);
        let mut delay = self.backoff;
        let mut attempt = 1;
        loop {
            match self.attempt(&body) {
                Err(e) if retryable(&e) && attempt < self.attempts => {
                    log::warn!("provider attempt {attempt} failed: {e}; retrying in {delay:?}");
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Prompts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Agent,
    Patient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub task_description: String,
    pub history: Vec<(Speaker, String)>,
    pub memory: Vec<String>,
    pub action_menu: String,
}

pub const ASK_SIGNATURE: &str = "ask(subject, topic): Asking a question about the subject related to the topic";
pub const SUGGEST_SIGNATURE: &str =
    "suggest_solution(): Ending the conversation and moving to the posttest to name the most probable cause";
pub const CHOOSE_SIGNATURE: &str = "choose(cause): Naming the most probable cause of the patient's problem";
const ONE_CALL: &str = "Answer with exactly one function call from the valid actions and nothing else.";
const REFLECTION_HEADER: &str = "You review a finished diagnostic conversation";

/// Menu of every action kind valid in `phase`, with permissible inputs.
pub fn action_menu(scenario: &Scenario, phase: Phase) -> String {
    let mut menu = String::new();
    match phase {
        Phase::Interaction => {
            menu.push_str(ASK_SIGNATURE);
            menu.push_str("\n  valid subjects and their topics:\n");
            for s in &scenario.subjects {
                let topics = scenario.topics_by_subject.get(s).map(|t| t.join(", ")).unwrap_or_default();
                menu.push_str(&format!("  - {s}: {topics}\n"));
            }
            menu.push_str(SUGGEST_SIGNATURE);
        }
        Phase::Posttest => {
            menu.push_str(CHOOSE_SIGNATURE);
            menu.push_str("\n  valid causes:\n");
            for c in &scenario.causes {
                menu.push_str(&format!("  - {} ({})\n", c.cause_id, c.display_name));
            }
            menu.truncate(menu.trim_end().len());
        }
        Phase::Terminal => {}
    }
    menu
}

/// Menu restricted to an explicit list of actions.
pub fn candidate_menu(actions: &[Action]) -> String {
    let mut menu = String::from("Choose one of these actions:");
    for (i, a) in actions.iter().enumerate() {
        menu.push_str(&format!("\n{}. {}: {}", i + 1, a.call(), a.text()));
    }
    menu
}

impl PromptBundle {
    /// Task line and dialogue of `episode`, with the given memory and menu.
    pub fn from_episode(episode: &Episode<'_>, memory: &[String], action_menu: String) -> Self {
        let history = episode
            .records()
            .iter()
            .flat_map(|r| {
                [
                    (Speaker::Agent, r.action.text()),
                    (Speaker::Patient, r.observation.response.clone()),
                ]
            })
            .collect();
        PromptBundle {
            task_description: episode.scenario().task_description(),
            history,
            memory: memory.to_vec(),
            action_menu,
        }
    }
}

fn system_prompt(bundle: &PromptBundle, instruction: &str) -> String {
    format!(
        "You are a pharmacy assistant who diagnoses a patient's problem by asking questions.\n\
         Task: {}\n\nValid actions:\n{}\n\n{instruction}",
        bundle.task_description, bundle.action_menu
    )
}

fn user_prompt(bundle: &PromptBundle, closing: &str) -> String {
    let mut user = String::from("Conversation so far:\n");
    if bundle.history.is_empty() {
        user.push_str("(nothing asked yet)\n");
    }
    for (speaker, text) in &bundle.history {
        let label = match speaker {
            Speaker::Agent => "Agent question",
            Speaker::Patient => "Patient response",
        };
        user.push_str(&format!("{label}: {text}\n"));
    }
    if !bundle.memory.is_empty() {
        user.push_str("\nLearnings from previous trials:\n");
        for m in &bundle.memory {
            user.push_str(&format!("- {m}\n"));
        }
    }
    user.push('\n');
    user.push_str(closing);
    user
}

/// Prompt asking for exactly one next action.
pub fn build_action_prompt(bundle: &PromptBundle) -> ChatRequest {
    ChatRequest::new(
        system_prompt(bundle, ONE_CALL),
        user_prompt(bundle, "What is your next action?"),
    )
}

pub fn suggestion_instruction(k: usize) -> String {
    format!("Suggest the {k} best next actions, one function call per line, best first.")
}

/// Prompt asking for the `k` best next actions.
pub fn build_suggestion_prompt(bundle: &PromptBundle, k: usize) -> ChatRequest {
    let instruction = suggestion_instruction(k);
    ChatRequest::new(
        system_prompt(bundle, &instruction),
        user_prompt(bundle, &format!("List your {k} suggested actions.")),
    )
}

fn correction(request: &ChatRequest, output: &str, problem: &str, menu: &str) -> ChatRequest {
    let mut next = request.clone();
    next.messages.push(ChatMessage::new(Role::Assistant, output));
    next.messages.push(ChatMessage::new(
        Role::User,
        format!("{problem}\nThe valid actions are:\n{menu}\n{ONE_CALL}"),
    ));
    next
}

// ---------------------------------------------------------------------------
// Parsing

/// A function call found in model output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Call {
    pub name: String,
    pub args: Vec<String>,
    pub raw: String,
}

fn call_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(ask|suggest_solution|choose)\s*\(([^()]*)\)").expect("valid call regex")
    })
}

fn clean_arg(arg: &str) -> String {
    let a = arg.trim().trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | ' ')).trim();
    let lower = a.to_lowercase();
    lower.strip_prefix("the ").map(str::to_string).unwrap_or(lower)
}

/// Every call pattern in `text`, in order of appearance.
pub fn find_calls(text: &str) -> Vec<Call> {
    call_pattern()
        .captures_iter(text)
        .map(|c| {
            let args_raw = c[2].trim();
            let args = if args_raw.is_empty() {
                Vec::new()
            } else {
                args_raw.split(',').map(clean_arg).collect()
            };
            Call {
                name: c[1].to_lowercase(),
                args,
                raw: c[0].to_string(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedAction {
    Valid(Action),
    Invalid { call: String, reason: String },
    Unparsable,
}

/// Maps a call onto the scenario's action space, then checks it against `allowed`.
pub fn resolve_call(call: &Call, scenario: &Scenario, allowed: &[Action]) -> Result<Action, String> {
    let action = match (call.name.as_str(), call.args.as_slice()) {
        ("ask", [subject, topic]) => {
            let subject = scenario
                .subjects
                .iter()
                .find(|s| s.to_lowercase() == *subject)
                .ok_or_else(|| format!("unknown subject {subject:?}"))?;
            let topic = scenario.topics_by_subject[subject]
                .iter()
                .find(|t| t.to_lowercase() == *topic)
                .ok_or_else(|| format!("unknown topic {topic:?} for subject {subject:?}"))?;
            Action::Ask(QuestionRef::new(subject.clone(), topic.clone()))
        }
        ("ask", args) => return Err(format!("ask takes 2 arguments, got {}", args.len())),
        ("suggest_solution", []) => Action::SuggestSolution,
        ("suggest_solution", _) => return Err("suggest_solution takes no arguments".into()),
        ("choose", [cause]) => {
            let c = scenario
                .causes
                .iter()
                .find(|c| c.cause_id.to_lowercase() == *cause || c.display_name.to_lowercase() == *cause)
                .ok_or_else(|| format!("unknown cause {cause:?}"))?;
            Action::Choose {
                cause_id: c.cause_id.clone(),
                display_name: c.display_name.clone(),
            }
        }
        ("choose", args) => return Err(format!("choose takes 1 argument, got {}", args.len())),
        (name, _) => return Err(format!("unknown function {name}")),
    };
    if allowed.contains(&action) {
        Ok(action)
    } else {
        Err(format!("{} is not available right now", action.call()))
    }
}

/// Interprets the first call in `output` against the allowed actions.
pub fn parse_action(output: &str, scenario: &Scenario, allowed: &[Action]) -> ParsedAction {
    match find_calls(output).into_iter().next() {
        None => ParsedAction::Unparsable,
        Some(call) => match resolve_call(&call, scenario, allowed) {
            Ok(a) => ParsedAction::Valid(a),
            Err(reason) => ParsedAction::Invalid { call: call.raw, reason },
        },
    }
}

/// Result of a query-and-retry loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub action: Option<Action>,
    pub last_output: String,
    pub calls: usize,
}

/// Queries up to [`MAX_ATTEMPTS`] times, re-prompting with a correction after each
/// invalid or unparsable answer, until one answer names an action in `allowed`.
pub fn query_until_valid(
    provider: &dyn ChatProvider,
    request: &ChatRequest,
    scenario: &Scenario,
    allowed: &[Action],
    menu: &str,
) -> Result<Resolved, LlmError> {
    let mut request = request.clone();
    let mut last_output = String::new();
    for attempt in 1..=MAX_ATTEMPTS {
        let output = provider.complete(&request)?.content;
        let problem = match parse_action(&output, scenario, allowed) {
            ParsedAction::Valid(action) => {
                return Ok(Resolved {
                    action: Some(action),
                    last_output: output,
                    calls: attempt,
                })
            }
            ParsedAction::Invalid { call, reason } => format!("Your answer {call} is not a valid action: {reason}."),
            ParsedAction::Unparsable => "Your answer did not contain a function call.".to_string(),
        };
        if attempt < MAX_ATTEMPTS {
            request = correction(&request, &output, &problem, menu);
        }
        last_output = output;
    }
    Ok(Resolved {
        action: None,
        last_output,
        calls: MAX_ATTEMPTS,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grounded {
    pub action: Action,
    pub source: DecisionSource,
    pub calls: usize,
}

/// Asks for one action; after three failed attempts grounds the last output onto the
/// nearest valid action in embedding space. The result is always in `valid`.
pub fn choose_action_grounded(
    provider: &dyn ChatProvider,
    bundle: &PromptBundle,
    scenario: &Scenario,
    valid: &[Action],
    embedder: &dyn Embedder,
) -> Result<Grounded, LlmError> {
    if valid.is_empty() {
        return Err(LlmError::NoActions);
    }
    let request = build_action_prompt(bundle);
    let resolved = query_until_valid(provider, &request, scenario, valid, &bundle.action_menu)?;
    match resolved.action {
        Some(action) => Ok(Grounded {
            action,
            source: DecisionSource::LlmChoice,
            calls: resolved.calls,
        }),
        None => Ok(Grounded {
            action: nearest_action(embedder, &resolved.last_output, valid)?.clone(),
            source: DecisionSource::GroundedFallback,
            calls: resolved.calls,
        }),
    }
}

// ---------------------------------------------------------------------------
// Reflection

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReflectionMemory {
    pub entries: Vec<String>,
    pub trial_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReflectStatus {
    Updated,
    NoCausalLines,
    ProviderFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reflection {
    pub memory: ReflectionMemory,
    pub status: ReflectStatus,
}

const CONNECTIVES: &[&str] = &[
    "is necessary for",
    "are necessary for",
    "is needed for",
    "is required for",
    "is essential for",
    "leads to",
    "indicates",
    "rules out",
    "helps",
];

/// Keeps the lines of `text` that state one causal learning, stripped of list markers.
pub fn parse_causal_lines(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in text.lines() {
        let l = line
            .trim()
            .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '-' | '*' | '•' | '.' | ')'))
            .trim();
        let lower = l.to_lowercase();
        if l.is_empty() || !CONNECTIVES.iter().any(|c| lower.contains(c)) {
            continue;
        }
        if !out.iter().any(|e| e == l) {
            out.push(l.to_string());
        }
    }
    out
}

pub fn build_reflection_prompt(scenario: &Scenario, transcript: &Transcript, memory: &ReflectionMemory) -> ChatRequest {
    let system = format!(
        "{REFLECTION_HEADER} with a patient. Task: {}.\n\
         Judge which questions and decisions helped or hurt, then write your updated learnings, \
         one per line, each a single causal sentence such as \"X is necessary for Y\". \
         Keep earlier learnings that still hold.",
        scenario.task_description()
    );
    let mut user = String::from("Conversation:\n");
    for (action, response) in transcript.dialogue() {
        user.push_str(&format!("Agent: {action}\nPatient: {response}\n"));
    }
    let verdict = match &transcript.outcome {
        Some(o) if o.correct => "The diagnosis was correct.".to_string(),
        Some(o) if o.step_cap => "The conversation ran out of steps before a diagnosis.".to_string(),
        Some(o) => format!(
            "The diagnosis {} was wrong.",
            o.chosen_cause.as_deref().unwrap_or("(none)")
        ),
        None => "The trial did not finish.".to_string(),
    };
    user.push_str(&format!("\nOutcome: {verdict}\n"));
    if !memory.entries.is_empty() {
        user.push_str("\nCurrent learnings:\n");
        for e in &memory.entries {
            user.push_str(&format!("- {e}\n"));
        }
    }
    user.push_str("\nWrite the updated learnings.");
    ChatRequest::new(system, user)
}

/// Updates the memory from a finished trial. The parsed causal lines replace the old
/// entries; an answer with no causal line leaves the entries unchanged.
pub fn reflect(
    provider: &dyn ChatProvider,
    scenario: &Scenario,
    transcript: &Transcript,
    memory: &ReflectionMemory,
) -> Result<Reflection, LlmError> {
    if memory.trial_count >= MAX_TRIALS {
        return Err(LlmError::TrialCap(MAX_TRIALS));
    }
    let request = build_reflection_prompt(scenario, transcript, memory);
    let mut next = memory.clone();
    next.trial_count += 1;
    let output = match provider.complete(&request) {
        Ok(r) => r.content,
        Err(e) => {
            log::warn!("reflection failed: {e}");
            return Ok(Reflection {
                memory: memory.clone(),
                status: ReflectStatus::ProviderFailed,
            });
        }
    };
    let parsed = parse_causal_lines(&output);
    let status = if parsed.is_empty() {
        ReflectStatus::NoCausalLines
    } else {
        next.entries = parsed;
        ReflectStatus::Updated
    };
    Ok(Reflection { memory: next, status })
}

pub fn is_reflection_request(request: &ChatRequest) -> bool {
    request.system().starts_with(REFLECTION_HEADER)
}

// ---------------------------------------------------------------------------
// Oracle script

/// Rule for a scripted provider that knows the true cause of one subtask: it asks every
/// key question in order, suggests a solution, then names the true cause. Suggestion
/// prompts get the oracle action first, followed by other valid calls; candidate menus
/// get the oracle action when listed, else the first listed action.
pub fn oracle_rule(scenario: &Scenario, subtask: &Subtask) -> impl Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static {
    let scenario = scenario.clone();
    let subtask = subtask.clone();
    move |request: &ChatRequest| {
        if is_reflection_request(request) {
            return Some(format!(
                "Asking every key question is necessary for diagnosing the {}.",
                scenario.problem
            ));
        }
        let system = request.system();
        let user = request.user();
        let posttest = system.contains(CHOOSE_SIGNATURE) || system.contains("choose(");
        let best = if posttest {
            format!("choose({})", subtask.cause_id)
        } else {
            scenario
                .key_questions
                .iter()
                .find(|q| !user.contains(&q.action_text()))
                .map(|q| format!("ask({}, {})", q.subject, q.topic))
                .unwrap_or_else(|| "suggest_solution()".to_string())
        };
        let listed: Vec<String> = find_calls(system)
            .into_iter()
            .map(|c| c.raw)
            .filter(|raw| !raw.contains("subject, topic") && raw != "choose(cause)")
            .collect();
        if system.contains("Choose one of these actions:") {
            if listed.iter().any(|c| c == &best) {
                return Some(best);
            }
            return listed.first().cloned();
        }
        if let Some(k) = suggestion_count(system) {
            let mut out = vec![best.clone()];
            if posttest {
                out.extend(scenario.causes.iter().map(|c| format!("choose({})", c.cause_id)));
            } else {
                out.extend(scenario.questions().iter().map(|q| format!("ask({}, {})", q.subject, q.topic)));
            }
            let mut seen = Vec::new();
            for c in out {
                if !seen.contains(&c) {
                    seen.push(c);
                }
            }
            seen.truncate(k);
            return Some(seen.join("\n"));
        }
        Some(best)
    }
}

fn suggestion_count(system: &str) -> Option<usize> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"Suggest the (\d+) best next actions").expect("valid regex"));
    re.captures(system).and_then(|c| c[1].parse().ok())
}
