//! Agent policies and the trial loop.
//!
//! * RL: softmax over DRRN Q-values of all valid actions.
//! * LLM: one function call per step, retried and grounded on failure.
//! * SA-RL: the LLM suggests `k` actions, the DRRN samples among them.
//! * DA-RL: the DRRN proposes its top `k` actions, the LLM picks one.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drrn::{self, update_state_with, DrrnError, EmbeddedState, QNetwork, StateUpdater};
use crate::embed::{nearest_action, Embedder, SentenceVector};
use crate::env::{Action, EnvError, Episode, Phase};
use crate::eval::{score_card, EvalError, ScoreCard};
use crate::llm::{
    self, action_menu, build_action_prompt, build_suggestion_prompt, candidate_menu, find_calls, query_until_valid,
    resolve_call, ChatProvider, LlmError, PromptBundle, ReflectionMemory, MAX_ATTEMPTS,
};
use crate::scenario::{Scenario, Subtask};
use crate::seed::derive_seed;
use crate::transcript::{DecisionAudit, DecisionSource, Transcript};

pub use crate::transcript::DecisionSource as Source;

/// Temperature used when acting at evaluation time; the floor of the training schedule.
pub const EVAL_TEMPERATURE: f64 = 0.001;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Drrn(#[from] DrrnError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("agent configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Rl,
    Llm,
    SaRl,
    DaRl,
}

impl AgentKind {
    pub fn uses_network(self) -> bool {
        !matches!(self, AgentKind::Llm)
    }

    pub fn uses_llm(self) -> bool {
        !matches!(self, AgentKind::Rl)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentKind::Rl => "rl",
            AgentKind::Llm => "llm",
            AgentKind::SaRl => "sa-rl",
            AgentKind::DaRl => "da-rl",
        })
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().replace('_', "-").as_str() {
            "rl" => Ok(AgentKind::Rl),
            "llm" => Ok(AgentKind::Llm),
            "sa-rl" => Ok(AgentKind::SaRl),
            "da-rl" => Ok(AgentKind::DaRl),
            other => Err(format!("unknown agent kind {other:?}; expected rl, llm, sa-rl or da-rl")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub kind: AgentKind,
    pub reflective: bool,
    pub k_interaction: usize,
    pub k_posttest: usize,
}

impl AgentSpec {
    pub fn new(kind: AgentKind, reflective: bool) -> Result<Self, AgentError> {
        if kind == AgentKind::Rl && reflective {
            return Err(AgentError::Config("the RL agent cannot be reflective".into()));
        }
        Ok(AgentSpec {
            kind,
            reflective,
            k_interaction: 5,
            k_posttest: 2,
        })
    }

    pub fn k_for(&self, phase: Phase) -> usize {
        if phase == Phase::Posttest {
            self.k_posttest
        } else {
            self.k_interaction
        }
    }

    pub fn max_trials(&self) -> usize {
        if self.reflective {
            llm::MAX_TRIALS
        } else {
            1
        }
    }

    /// Label used in result files, e.g. `reflective-da-rl`.
    pub fn label(&self) -> String {
        match (self.kind, self.reflective) {
            (AgentKind::Rl, _) => "rl".into(),
            (k, true) => format!("reflective-{k}"),
            (k, false) => format!("none-reflective-{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub chosen: Action,
    pub candidates: Vec<(Action, Option<f64>)>,
    pub source: DecisionSource,
    pub provider_calls: usize,
}

impl Decision {
    pub fn audit(&self) -> DecisionAudit {
        let q: Vec<f64> = self.candidates.iter().filter_map(|(_, q)| *q).collect();
        DecisionAudit {
            source: self.source,
            candidate_actions: self.candidates.iter().map(|(a, _)| a.text()).collect(),
            q_values: (q.len() == self.candidates.len() && !q.is_empty()).then_some(q),
        }
    }
}

/// Folds the embeddings of every observation so far, in order.
pub fn embedded_state(episode: &Episode<'_>, embedder: &dyn Embedder, updater: StateUpdater) -> Result<EmbeddedState, DrrnError> {
    let mut state = EmbeddedState::empty(embedder.dim());
    for obs in episode.history() {
        state = update_state_with(updater, &state, &embedder.embed_lossy(&obs.rendered))?;
    }
    Ok(state)
}

fn action_vectors(actions: &[Action], embedder: &dyn Embedder) -> Vec<SentenceVector> {
    actions.iter().map(|a| embedder.embed_lossy(&a.text())).collect()
}

/// Samples from the softmax over the network's Q-values of `actions`.
pub fn softmax_decision<R: Rng + ?Sized>(
    net: &QNetwork,
    state: &EmbeddedState,
    actions: &[Action],
    embedder: &dyn Embedder,
    temperature: f64,
    rng: &mut R,
) -> Result<Decision, AgentError> {
    let q = net.q_values(state, &action_vectors(actions, embedder))?;
    let i = drrn::select_action(&q, temperature, rng)?;
    Ok(Decision {
        chosen: actions[i].clone(),
        candidates: actions.iter().cloned().zip(q.into_iter().map(Some)).collect(),
        source: DecisionSource::RlSoftmax,
        provider_calls: 0,
    })
}

pub fn rl_decide<R: Rng + ?Sized>(
    net: &QNetwork,
    episode: &Episode<'_>,
    embedder: &dyn Embedder,
    updater: StateUpdater,
    temperature: f64,
    rng: &mut R,
) -> Result<Decision, AgentError> {
    let state = embedded_state(episode, embedder, updater)?;
    softmax_decision(net, &state, &episode.valid_actions()?, embedder, temperature, rng)
}

pub fn llm_decide(
    provider: &dyn ChatProvider,
    episode: &Episode<'_>,
    embedder: &dyn Embedder,
    memory: &[String],
) -> Result<Decision, AgentError> {
    let valid = episode.valid_actions()?;
    let bundle = PromptBundle::from_episode(episode, memory, action_menu(episode.scenario(), episode.phase()));
    let g = llm::choose_action_grounded(provider, &bundle, episode.scenario(), &valid, embedder)?;
    Ok(Decision {
        candidates: valid.into_iter().map(|a| (a, None)).collect(),
        chosen: g.action,
        source: g.source,
        provider_calls: g.calls,
    })
}

/// The LLM's suggestions mapped onto valid actions: valid calls kept, invalid calls
/// grounded to their nearest valid action, duplicates dropped, at most `k` kept.
pub fn grounded_suggestions(
    output: &str,
    scenario: &Scenario,
    valid: &[Action],
    embedder: &dyn Embedder,
    k: usize,
) -> Result<Vec<Action>, AgentError> {
    let mut set: Vec<Action> = Vec::new();
    for call in find_calls(output).into_iter().take(k) {
        let action = match resolve_call(&call, scenario, valid) {
            Ok(a) => a,
            Err(_) => nearest_action(embedder, &call.raw, valid).map_err(LlmError::from)?.clone(),
        };
        if !set.contains(&action) {
            set.push(action);
        }
    }
    Ok(set)
}

#[allow(clippy::too_many_arguments)]
pub fn sa_rl_decide<R: Rng + ?Sized>(
    net: &QNetwork,
    provider: &dyn ChatProvider,
    episode: &Episode<'_>,
    embedder: &dyn Embedder,
    updater: StateUpdater,
    memory: &[String],
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Decision, AgentError> {
    let valid = episode.valid_actions()?;
    let scenario = episode.scenario();
    let menu = action_menu(scenario, episode.phase());
    let bundle = PromptBundle::from_episode(episode, memory, menu.clone());
    let mut request = build_suggestion_prompt(&bundle, k);
    let mut suggestions = Vec::new();
    let mut calls = 0;
    let mut last_output = String::new();
    while calls < MAX_ATTEMPTS && suggestions.is_empty() {
        last_output = provider.complete(&request).map_err(LlmError::from)?.content;
        calls += 1;
        suggestions = grounded_suggestions(&last_output, scenario, &valid, embedder, k)?;
        if suggestions.is_empty() {
            request.messages.push(llm::ChatMessage::new(llm::Role::Assistant, last_output.clone()));
            request.messages.push(llm::ChatMessage::new(
                llm::Role::User,
                format!("Your answer did not contain any function call.\nThe valid actions are:\n{menu}\n{}", llm::suggestion_instruction(k)),
            ));
        }
    }
    if suggestions.is_empty() {
        suggestions.push(nearest_action(embedder, &last_output, &valid).map_err(LlmError::from)?.clone());
    }
    let state = embedded_state(episode, embedder, updater)?;
    let mut d = softmax_decision(net, &state, &suggestions, embedder, temperature, rng)?;
    d.provider_calls = calls;
    Ok(d)
}

/// The `k` highest-Q actions, best first; equal Q-values keep action order.
pub fn top_k(actions: &[Action], q: &[f64], k: usize) -> Vec<(Action, f64)> {
    let mut idx: Vec<usize> = (0..actions.len()).collect();
    idx.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (actions[i].clone(), q[i])).collect()
}

pub fn da_rl_decide(
    net: &QNetwork,
    provider: &dyn ChatProvider,
    episode: &Episode<'_>,
    embedder: &dyn Embedder,
    updater: StateUpdater,
    memory: &[String],
    k: usize,
) -> Result<Decision, AgentError> {
    let valid = episode.valid_actions()?;
    let state = embedded_state(episode, embedder, updater)?;
    let q = net.q_values(&state, &action_vectors(&valid, embedder))?;
    let ranked = top_k(&valid, &q, k);
    let shortlist: Vec<Action> = ranked.iter().map(|(a, _)| a.clone()).collect();
    let menu = candidate_menu(&shortlist);
    let bundle = PromptBundle::from_episode(episode, memory, menu.clone());
    let resolved = query_until_valid(provider, &build_action_prompt(&bundle), episode.scenario(), &shortlist, &menu)?;
    let (chosen, source) = match resolved.action {
        Some(a) => (a, DecisionSource::LlmChoice),
        None => (shortlist[0].clone(), DecisionSource::GroundedFallback),
    };
    Ok(Decision {
        chosen,
        candidates: ranked.into_iter().map(|(a, q)| (a, Some(q))).collect(),
        source,
        provider_calls: resolved.calls,
    })
}

/// A configured agent. Borrowed network, provider and embedder are shared read-only.
pub struct Agent<'a> {
    pub spec: AgentSpec,
    pub net: Option<&'a QNetwork>,
    pub provider: Option<&'a dyn ChatProvider>,
    pub embedder: &'a dyn Embedder,
    pub updater: StateUpdater,
    pub temperature: f64,
    pub memory: ReflectionMemory,
}

impl<'a> Agent<'a> {
    pub fn new(
        spec: AgentSpec,
        net: Option<&'a QNetwork>,
        provider: Option<&'a dyn ChatProvider>,
        embedder: &'a dyn Embedder,
    ) -> Result<Self, AgentError> {
        if spec.kind.uses_network() && net.is_none() {
            return Err(AgentError::Config(format!("{} agent needs a trained network", spec.kind)));
        }
        if spec.kind.uses_llm() && provider.is_none() {
            return Err(AgentError::Config(format!("{} agent needs an LLM provider", spec.kind)));
        }
        if let Some(n) = net {
            if n.input_dim() != embedder.dim() {
                return Err(AgentError::Config(format!(
                    "network expects {}-dimensional embeddings, embedder yields {}",
                    n.input_dim(),
                    embedder.dim()
                )));
            }
        }
        Ok(Agent {
            spec,
            net,
            provider,
            embedder,
            updater: StateUpdater::Sum,
            temperature: EVAL_TEMPERATURE,
            memory: ReflectionMemory::default(),
        })
    }

    pub fn rl(net: &'a QNetwork, embedder: &'a dyn Embedder) -> Self {
        Agent::new(AgentSpec::new(AgentKind::Rl, false).expect("valid spec"), Some(net), None, embedder)
            .expect("rl agent")
    }

    pub fn decide<R: Rng + ?Sized>(&self, episode: &Episode<'_>, rng: &mut R) -> Result<Decision, AgentError> {
        let memory = &self.memory.entries;
        let k = self.spec.k_for(episode.phase());
        match self.spec.kind {
            AgentKind::Rl => rl_decide(self.net(), episode, self.embedder, self.updater, self.temperature, rng),
            AgentKind::Llm => llm_decide(self.provider(), episode, self.embedder, memory),
            AgentKind::SaRl => sa_rl_decide(
                self.net(),
                self.provider(),
                episode,
                self.embedder,
                self.updater,
                memory,
                k,
                self.temperature,
                rng,
            ),
            AgentKind::DaRl => da_rl_decide(self.net(), self.provider(), episode, self.embedder, self.updater, memory, k),
        }
    }

    fn net(&self) -> &'a QNetwork {
        self.net.expect("checked in Agent::new")
    }

    fn provider(&self) -> &'a dyn ChatProvider {
        self.provider.expect("checked in Agent::new")
    }

    /// Plays one episode to termination.
    pub fn run_episode<R: Rng + ?Sized>(&self, scenario: &Scenario, subtask: &Subtask, rng: &mut R) -> Result<Transcript, AgentError> {
        let (mut episode, _) = Episode::reset(scenario, subtask)?;
        while !episode.is_done() {
            let d = self.decide(&episode, rng)?;
            episode.step_with_audit(&d.chosen, Some(d.audit()))?;
        }
        Ok(episode.into_transcript())
    }

    /// Runs up to `max_trials` episodes of one subtask and returns the best by combined
    /// score (earliest on ties). Reflective agents update their memory between trials;
    /// a perfect score ends the loop early.
    pub fn run_trials(&mut self, scenario: &Scenario, subtask: &Subtask, max_trials: usize, seed: u64) -> Result<TrialsOutcome, AgentError> {
        if max_trials == 0 {
            return Err(AgentError::Config("max_trials must be at least 1".into()));
        }
        let max_trials = if self.spec.reflective { max_trials } else { 1 };
        self.memory = ReflectionMemory::default();
        let mut cards = Vec::new();
        let mut best: Option<(Transcript, ScoreCard, usize)> = None;
        for trial in 1..=max_trials {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{subtask}/trial{trial}")));
            let transcript = self.run_episode(scenario, subtask, &mut rng)?;
            let card = score_card(&transcript, scenario)?;
            cards.push(card.clone());
            let perfect = card.combined >= 1.0;
            if best.as_ref().is_none_or(|(_, b, _)| card.combined > b.combined) {
                best = Some((transcript.clone(), card, trial));
            }
            if perfect || trial == max_trials {
                break;
            }
            if self.spec.reflective {
                let r = llm::reflect(self.provider(), scenario, &transcript, &self.memory)?;
                self.memory = r.memory;
            }
        }
        let (transcript, card, trial) = best.expect("at least one trial");
        Ok(TrialsOutcome {
            transcript,
            card,
            trial,
            cards,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrialsOutcome {
    pub transcript: Transcript,
    pub card: ScoreCard,
    /// 1-based index of the reported trial.
    pub trial: usize,
    /// Score of every trial that ran.
    pub cards: Vec<ScoreCard>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drrn::NetShape;
    use crate::embed::HashEmbedder;
    use crate::llm::ScriptedProvider;
    use crate::scenario::enumerate_subtasks;
    use crate::testutil::fixture_scenario;

    fn setup() -> (Scenario, QNetwork, HashEmbedder) {
        let e = HashEmbedder::new(16, 0);
        (fixture_scenario("infant_diarrhea"), QNetwork::new(NetShape::new(16), 5), e)
    }

    #[test]
    fn spec_rules() {
        assert!(AgentSpec::new(AgentKind::Rl, true).is_err());
        let s = AgentSpec::new(AgentKind::DaRl, true).unwrap();
        assert_eq!((s.k_for(Phase::Interaction), s.k_for(Phase::Posttest)), (5, 2));
        assert_eq!(s.max_trials(), 3);
        assert_eq!(s.label(), "reflective-da-rl");
        assert_eq!("SA_RL".parse::<AgentKind>().unwrap(), AgentKind::SaRl);
    }

    #[test]
    fn single_action_is_certain() {
        let (_, net, e) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = EmbeddedState::empty(16);
        let d = softmax_decision(&net, &state, &[Action::SuggestSolution], &e, 1.0, &mut rng).unwrap();
        assert_eq!(d.chosen, Action::SuggestSolution);
    }

    #[test]
    fn rl_equal_q_splits_evenly() {
        // zero network: every Q is 0
        let (s, net, e) = setup();
        let net = net.zeros_like();
        let t = enumerate_subtasks(&s)[0].clone();
        let (mut ep, _) = Episode::reset(&s, &t).unwrap();
        ep.step(&Action::SuggestSolution).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        for _ in 0..4000 {
            let d = rl_decide(&net, &ep, &e, StateUpdater::Sum, 1.0, &mut rng).unwrap();
            let i = ep.valid_actions().unwrap().iter().position(|a| *a == d.chosen).unwrap();
            counts[i] += 1;
        }
        for c in counts {
            assert!((c as f64 / 4000.0 - 0.25).abs() < 0.03, "{counts:?}");
        }
    }

    #[test]
    fn sa_rl_contains_and_dedups() {
        let (s, net, e) = setup();
        let t = enumerate_subtasks(&s)[0].clone();
        let (ep, _) = Episode::reset(&s, &t).unwrap();
        let p = ScriptedProvider::sequence(["ask(infant, age)\nask(infant, age)\nask(mother, medication)\nsuggest_solution()\nask(infant, age)"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = sa_rl_decide(&net, &p, &ep, &e, StateUpdater::Sum, &[], 5, 1.0, &mut rng).unwrap();
        let set: Vec<Action> = d.candidates.iter().map(|(a, _)| a.clone()).collect();
        assert_eq!(set, vec![Action::ask("infant", "age"), Action::ask("mother", "medication"), Action::SuggestSolution]);
        assert!(set.contains(&d.chosen));
        assert_eq!(d.source, DecisionSource::RlSoftmax);
    }

    #[test]
    fn sa_rl_requests_two_in_posttest() {
        let (s, net, e) = setup();
        let t = enumerate_subtasks(&s)[0].clone();
        let (mut ep, _) = Episode::reset(&s, &t).unwrap();
        ep.step(&Action::SuggestSolution).unwrap();
        let seen = std::sync::Arc::new(std::sync::Mutex::new(String::new()));
        let log = seen.clone();
        let p = ScriptedProvider::with_rule(move |r| {
            *log.lock().unwrap() = r.system().to_string();
            Some("choose(teething)\nchoose(viral_infection)".into())
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = sa_rl_decide(&net, &p, &ep, &e, StateUpdater::Sum, &[], 2, 1.0, &mut rng).unwrap();
        assert!(seen.lock().unwrap().contains("Suggest the 2 best next actions"));
        assert_eq!(d.candidates.len(), 2);
    }

    #[test]
    fn da_rl_picks_llm_choice_or_falls_back() {
        let (s, net, e) = setup();
        let t = enumerate_subtasks(&s)[0].clone();
        let (ep, _) = Episode::reset(&s, &t).unwrap();
        let valid = ep.valid_actions().unwrap();
        let state = embedded_state(&ep, &e, StateUpdater::Sum).unwrap();
        let q = net.q_values(&state, &action_vectors(&valid, &e)).unwrap();
        let ranked = top_k(&valid, &q, 5);
        let second = ranked[1].0.call();
        let p = ScriptedProvider::sequence([second.as_str()]);
        let d = da_rl_decide(&net, &p, &ep, &e, StateUpdater::Sum, &[], 5).unwrap();
        assert_eq!(d.chosen, ranked[1].0);
        assert_eq!(d.source, DecisionSource::LlmChoice);
        assert_eq!(d.candidates.len(), 5);

        let garbage = ScriptedProvider::sequence(["no idea", "???", "ask(dragon, mood)"]);
        let d = da_rl_decide(&net, &garbage, &ep, &e, StateUpdater::Sum, &[], 5).unwrap();
        assert_eq!(d.chosen, ranked[0].0);
        assert_eq!(d.source, DecisionSource::GroundedFallback);
        assert_eq!(d.provider_calls, 3);
    }

    #[test]
    fn da_rl_rejects_valid_actions_outside_top_k() {
        let (s, net, e) = setup();
        let t = enumerate_subtasks(&s)[0].clone();
        let (mut ep, _) = Episode::reset(&s, &t).unwrap();
        ep.step(&Action::SuggestSolution).unwrap();
        let valid = ep.valid_actions().unwrap();
        let state = embedded_state(&ep, &e, StateUpdater::Sum).unwrap();
        let q = net.q_values(&state, &action_vectors(&valid, &e)).unwrap();
        let ranked = top_k(&valid, &q, 2);
        let outside = valid.iter().find(|a| !ranked.iter().any(|(r, _)| r == *a)).unwrap();
        let p = ScriptedProvider::sequence([outside.call()]);
        let d = da_rl_decide(&net, &p, &ep, &e, StateUpdater::Sum, &[], 2).unwrap();
        assert_eq!(d.source, DecisionSource::GroundedFallback);
        assert_eq!(d.chosen, ranked[0].0);
    }

    #[test]
    fn top_k_clamps_and_breaks_ties_by_order() {
        let actions = vec![Action::ask("a", "x"), Action::ask("b", "y"), Action::SuggestSolution];
        let ranked = top_k(&actions, &[1.0, 2.0, 1.0], 5);
        assert_eq!(ranked.len(), 3);
        assert_eq!(ranked[0].0, actions[1]);
        assert_eq!(ranked[1].0, actions[0]);
        assert_eq!(ranked[2].0, actions[2]);
    }

    #[test]
    fn none_reflective_runs_one_trial() {
        let (s, _, e) = setup();
        let t = enumerate_subtasks(&s)[0].clone();
        let p = ScriptedProvider::sequence(["suggest_solution()", "choose(teething)"]);
        let spec = AgentSpec::new(AgentKind::Llm, false).unwrap();
        let mut agent = Agent::new(spec, None, Some(&p), &e).unwrap();
        let out = agent.run_trials(&s, &t, 3, 0).unwrap();
        assert_eq!(out.cards.len(), 1);
        assert_eq!(out.card.combined, 0.0);
    }

    #[test]
    fn reflective_early_stop_on_perfect_score() {
        let (s, _, e) = setup();
        let t = enumerate_subtasks(&s)[0].clone();
        let p = ScriptedProvider::with_rule(llm::oracle_rule(&s, &t));
        let spec = AgentSpec::new(AgentKind::Llm, true).unwrap();
        let mut agent = Agent::new(spec, None, Some(&p), &e).unwrap();
        let out = agent.run_trials(&s, &t, 3, 0).unwrap();
        assert_eq!(out.cards.len(), 1);
        assert_eq!(out.card.combined, 1.0);
    }

    #[test]
    fn reflective_best_of_trials() {
        let (s, _, e) = setup();
        let t = enumerate_subtasks(&s)[0].clone(); // diet_change
        let p = ScriptedProvider::sequence([
            // trial 1: wrong cause -> 0
            "suggest_solution()",
            "choose(teething)",
            "Asking about diet is necessary for diagnosing diet change",
            // trial 2: two key questions, right cause -> 0.5
            "ask(infant, age)",
            "ask(infant, diet)",
            "suggest_solution()",
            "choose(diet_change)",
            "Asking about medication leads to fewer wrong guesses",
            // trial 3: one key question, right cause -> 0.25
            "ask(infant, diet)",
            "suggest_solution()",
            "choose(diet_change)",
        ]);
        let spec = AgentSpec::new(AgentKind::Llm, true).unwrap();
        let mut agent = Agent::new(spec, None, Some(&p), &e).unwrap();
        let out = agent.run_trials(&s, &t, 3, 0).unwrap();
        let scores: Vec<f64> = out.cards.iter().map(|c| c.combined).collect();
        assert_eq!(scores, vec![0.0, 0.5, 0.25]);
        assert_eq!(out.trial, 2);
        assert_eq!(out.card.combined, 0.5);
        assert_eq!(agent.memory.entries, vec!["Asking about medication leads to fewer wrong guesses"]);
        assert_eq!(agent.memory.trial_count, 2);
    }

    #[test]
    fn missing_dependencies_are_config_errors() {
        let (_, net, e) = setup();
        assert!(Agent::new(AgentSpec::new(AgentKind::SaRl, false).unwrap(), Some(&net), None, &e).is_err());
        assert!(Agent::new(AgentSpec::new(AgentKind::Rl, false).unwrap(), None, None, &e).is_err());
        let wide = HashEmbedder::new(32, 0);
        assert!(Agent::new(AgentSpec::new(AgentKind::Rl, false).unwrap(), Some(&net), None, &wide).is_err());
    }

    #[test]
    fn audit_carries_candidates() {
        let (s, net, e) = setup();
        let t = enumerate_subtasks(&s)[0].clone();
        let agent = Agent::rl(&net, &e);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tr = agent.run_episode(&s, &t, &mut rng).unwrap();
        let first = tr.steps[0].decision.as_ref().unwrap();
        assert_eq!(first.source, DecisionSource::RlSoftmax);
        assert_eq!(first.q_values.as_ref().unwrap().len(), first.candidate_actions.len());
    }
}
