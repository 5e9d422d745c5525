//! The episode state machine.
//!
//! An episode starts in the interaction phase where the agent may ask any
//! subject/topic question or suggest a solution. Suggesting a solution moves to
//! the posttest, a single multiple-choice pick among the scenario's causes.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{QuestionRef, Scenario, Subtask};
use crate::transcript::{DecisionAudit, Outcome, StepRecord, Transcript};

/// Interactions after which an unfinished episode is terminated as a failure.
pub const MAX_STEPS: usize = 40;
/// Reward of every non-terminal interaction.
pub const STEP_PENALTY: f64 = -0.01;
pub const SUCCESS_REWARD: f64 = 1.0;
pub const FAILURE_REWARD: f64 = -1.0;

pub const SUGGEST_TEXT: &str = "I want to suggest a solution.";

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("subtask {subtask} does not belong to scenario {scenario:?}")]
    SubtaskMismatch { subtask: String, scenario: String },
    #[error("action {0:?} is not valid in the current state")]
    InvalidAction(String),
    #[error("episode already terminated")]
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Ask(QuestionRef),
    SuggestSolution,
    Choose { cause_id: String, display_name: String },
}

impl Action {
    pub fn ask(subject: impl Into<String>, topic: impl Into<String>) -> Self {
        Action::Ask(QuestionRef::new(subject, topic))
    }

    /// Canonical sentence rendering.
    pub fn text(&self) -> String {
        match self {
            Action::Ask(q) => q.action_text(),
            Action::SuggestSolution => SUGGEST_TEXT.to_string(),
            Action::Choose { display_name, .. } => {
                format!("The most probable cause is {display_name}.")
            }
        }
    }

    /// Function-call rendering used in LLM prompts.
    pub fn call(&self) -> String {
        match self {
            Action::Ask(q) => format!("ask({}, {})", q.subject, q.topic),
            Action::SuggestSolution => "suggest_solution()".to_string(),
            Action::Choose { cause_id, .. } => format!("choose({cause_id})"),
        }
    }

    pub fn interaction_type(&self) -> &'static str {
        match self {
            Action::Ask(_) => "Discuss",
            Action::SuggestSolution => "Solution",
            Action::Choose { .. } => "Posttest",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub interaction_type: String,
    pub selected_interaction: String,
    pub response: String,
    pub rendered: String,
}

impl Observation {
    pub fn new(
        interaction_type: impl Into<String>,
        selected_interaction: impl Into<String>,
        response: impl Into<String>,
    ) -> Self {
        let interaction_type = interaction_type.into();
        let selected_interaction = selected_interaction.into();
        let response = response.into();
        let rendered = format!("{interaction_type}; {selected_interaction}; {response}");
        Observation {
            interaction_type,
            selected_interaction,
            response,
            rendered,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Interaction,
    Posttest,
    Terminal,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Interaction => "interaction",
            Phase::Posttest => "posttest",
            Phase::Terminal => "terminal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub valid_actions: Vec<Action>,
}

/// One running episode over a borrowed, immutable scenario.
///
/// `history[0]` is the synthetic task observation emitted by [`Episode::reset`];
/// every later entry corresponds to one step, so `step_count == history.len() - 1`.
#[derive(Debug, Clone)]
pub struct Episode<'s> {
    scenario: &'s Scenario,
    subtask: Subtask,
    phase: Phase,
    history: Vec<Observation>,
    asked: BTreeSet<QuestionRef>,
    step_count: usize,
    outcome: Option<Outcome>,
    records: Vec<StepRecord>,
}

impl<'s> Episode<'s> {
    pub fn reset(scenario: &'s Scenario, subtask: &Subtask) -> Result<(Self, StepResult), EnvError> {
        if !scenario.owns(subtask) {
            return Err(EnvError::SubtaskMismatch {
                subtask: subtask.to_string(),
                scenario: scenario.patient_id.clone(),
            });
        }
        let opening = Observation::new(
            "Task",
            scenario.task_description(),
            format!("The patient asks for help with {}", scenario.problem),
        );
        let episode = Episode {
            scenario,
            subtask: subtask.clone(),
            phase: Phase::Interaction,
            history: vec![opening.clone()],
            asked: BTreeSet::new(),
            step_count: 0,
            outcome: None,
            records: Vec::new(),
        };
        let result = StepResult {
            observation: opening,
            reward: 0.0,
            done: false,
            valid_actions: episode.valid_actions()?,
        };
        Ok((episode, result))
    }

    pub fn scenario(&self) -> &'s Scenario {
        self.scenario
    }

    pub fn subtask(&self) -> &Subtask {
        &self.subtask
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn history(&self) -> &[Observation] {
        &self.history
    }

    pub fn asked(&self) -> &BTreeSet<QuestionRef> {
        &self.asked
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn outcome(&self) -> Option<&Outcome> {
        self.outcome.as_ref()
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Terminal
    }

    /// Interaction: every question then `SuggestSolution`. Posttest: one choice per cause.
    pub fn valid_actions(&self) -> Result<Vec<Action>, EnvError> {
        match self.phase {
            Phase::Interaction => {
                let mut actions: Vec<Action> =
                    self.scenario.questions().into_iter().map(Action::Ask).collect();
                actions.push(Action::SuggestSolution);
                Ok(actions)
            }
            Phase::Posttest => Ok(self
                .scenario
                .causes
                .iter()
                .map(|c| Action::Choose {
                    cause_id: c.cause_id.clone(),
                    display_name: c.display_name.clone(),
                })
                .collect()),
            Phase::Terminal => Err(EnvError::Terminated),
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        self.step_with_audit(action, None)
    }

    /// Applies `action`, recording `audit` alongside the step in the transcript.
    pub fn step_with_audit(
        &mut self,
        action: &Action,
        audit: Option<DecisionAudit>,
    ) -> Result<StepResult, EnvError> {
        if !self.valid_actions()?.contains(action) {
            return Err(EnvError::InvalidAction(action.text()));
        }
        let phase_before = self.phase;
        let selected = action.text().trim_end_matches('.').to_string();
        let (response, mut reward) = match action {
            Action::Ask(q) => {
                let response = self
                    .scenario
                    .response(&self.subtask, q)
                    .expect("validated scenario answers every question")
                    .to_string();
                self.asked.insert(q.clone());
                (response, STEP_PENALTY)
            }
            Action::SuggestSolution => {
                self.phase = Phase::Posttest;
                ("Which cause is the most probable?".to_string(), STEP_PENALTY)
            }
            Action::Choose { cause_id, .. } => {
                let correct = *cause_id == self.subtask.cause_id;
                self.phase = Phase::Terminal;
                self.outcome = Some(Outcome {
                    chosen_cause: Some(cause_id.clone()),
                    correct,
                    step_cap: false,
                });
                let (text, r) = if correct {
                    ("Correct diagnosis.", SUCCESS_REWARD)
                } else {
                    ("Incorrect diagnosis.", FAILURE_REWARD)
                };
                (text.to_string(), r)
            }
        };
        self.step_count += 1;
        if self.phase != Phase::Terminal && self.step_count >= MAX_STEPS {
            self.phase = Phase::Terminal;
            self.outcome = Some(Outcome {
                chosen_cause: None,
                correct: false,
                step_cap: true,
            });
            reward = FAILURE_REWARD;
        }
        let observation = Observation::new(action.interaction_type(), selected, response);
        self.history.push(observation.clone());
        let done = self.phase == Phase::Terminal;
        self.records.push(StepRecord {
            step: self.step_count,
            phase: phase_before,
            action: action.clone(),
            observation: observation.clone(),
            reward,
            done,
            decision: audit,
        });
        let valid_actions = if done { Vec::new() } else { self.valid_actions()? };
        Ok(StepResult {
            observation,
            reward,
            done,
            valid_actions,
        })
    }

    pub fn transcript(&self) -> Transcript {
        Transcript {
            subtask: self.subtask.clone(),
            opening: self.history[0].clone(),
            steps: self.records.clone(),
            outcome: self.outcome.clone(),
        }
    }

    pub fn into_transcript(self) -> Transcript {
        let opening = self.history.into_iter().next().expect("opening observation");
        Transcript {
            subtask: self.subtask,
            opening,
            steps: self.records,
            outcome: self.outcome,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{enumerate_subtasks, load_scenario};
    use crate::testutil::fixture_scenario;
    use proptest::prelude::*;

    fn infant() -> Scenario {
        fixture_scenario("infant_diarrhea")
    }

    fn subtask(s: &Scenario, cause: &str, w: usize) -> Subtask {
        Subtask {
            scenario_id: s.patient_id.clone(),
            cause_id: cause.into(),
            wording_index: w,
        }
    }

    fn choose(s: &Scenario, cause: &str) -> Action {
        let c = s.cause(cause).unwrap();
        Action::Choose {
            cause_id: c.cause_id.clone(),
            display_name: c.display_name.clone(),
        }
    }

    #[test]
    fn reset_lists_all_questions_plus_suggest() {
        let s = infant();
        let (ep, r) = Episode::reset(&s, &subtask(&s, "teething", 0)).unwrap();
        let topics: usize = s.topics_by_subject.values().map(Vec::len).sum();
        assert_eq!(r.valid_actions.len(), topics + 1);
        assert_eq!(r.valid_actions.last(), Some(&Action::SuggestSolution));
        assert_eq!(r.reward, 0.0);
        assert!(!r.done);
        assert_eq!(ep.history().len(), 1);
        assert!(r.observation.rendered.contains("Find the cause behind the infant's diarrhea"));
    }

    #[test]
    fn reset_is_deterministic() {
        let s = infant();
        let t = subtask(&s, "teething", 3);
        let (_, a) = Episode::reset(&s, &t).unwrap();
        let (_, b) = Episode::reset(&s, &t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn foreign_subtask_is_rejected() {
        let s = infant();
        let sore = fixture_scenario("sore_throat");
        let t = enumerate_subtasks(&sore).remove(0);
        assert!(matches!(Episode::reset(&s, &t), Err(EnvError::SubtaskMismatch { .. })));
        let bad_wording = subtask(&s, "teething", 10);
        assert!(Episode::reset(&s, &bad_wording).is_err());
    }

    #[test]
    fn scripted_episode_reward() {
        let s = infant();
        let (mut ep, _) = Episode::reset(&s, &subtask(&s, "viral_infection", 0)).unwrap();
        let mut total = 0.0;
        for a in [
            Action::ask("infant", "age"),
            Action::ask("infant", "symptoms"),
            Action::ask("mother", "medication"),
            Action::SuggestSolution,
        ] {
            let r = ep.step(&a).unwrap();
            assert_eq!(r.reward, STEP_PENALTY);
            total += r.reward;
        }
        assert_eq!(ep.phase(), Phase::Posttest);
        let r = ep.step(&choose(&s, "viral_infection")).unwrap();
        assert!(r.done);
        total += r.reward;
        assert!((total - 0.96).abs() < 1e-12);
        assert!(ep.outcome().unwrap().correct);
        assert_eq!(ep.transcript().total_reward(), total);
    }

    #[test]
    fn wrong_choice_costs_one() {
        let s = infant();
        let (mut ep, _) = Episode::reset(&s, &subtask(&s, "viral_infection", 0)).unwrap();
        ep.step(&Action::SuggestSolution).unwrap();
        let r = ep.step(&choose(&s, "teething")).unwrap();
        assert_eq!(r.reward, -1.0);
        assert!(r.valid_actions.is_empty());
        assert!(!ep.outcome().unwrap().correct);
    }

    #[test]
    fn observation_format_matches_discuss_line() {
        let s = infant();
        let (mut ep, _) = Episode::reset(&s, &subtask(&s, "teething", 0)).unwrap();
        let r = ep.step(&Action::ask("infant", "age")).unwrap();
        assert!(r
            .observation
            .rendered
            .starts_with("Discuss; I want to know about the infant's age;"));
        assert_eq!(
            r.observation.rendered,
            format!("Discuss; I want to know about the infant's age; {}", r.observation.response)
        );
    }

    #[test]
    fn posttest_offers_one_choice_per_cause() {
        let s = infant();
        let (mut ep, r) = Episode::reset(&s, &subtask(&s, "teething", 0)).unwrap();
        assert!(!r.valid_actions.iter().any(|a| matches!(a, Action::Choose { .. })));
        ep.step(&Action::SuggestSolution).unwrap();
        let first = ep.valid_actions().unwrap();
        assert_eq!(first.len(), 4);
        assert!(first.iter().all(|a| matches!(a, Action::Choose { .. })));
        assert_eq!(first, ep.valid_actions().unwrap());
        // questions are closed in the posttest
        assert!(matches!(
            ep.step(&Action::ask("infant", "age")),
            Err(EnvError::InvalidAction(_))
        ));
    }

    #[test]
    fn terminal_state_refuses_steps() {
        let s = infant();
        let (mut ep, _) = Episode::reset(&s, &subtask(&s, "teething", 0)).unwrap();
        ep.step(&Action::SuggestSolution).unwrap();
        ep.step(&choose(&s, "teething")).unwrap();
        assert_eq!(ep.valid_actions(), Err(EnvError::Terminated));
        assert_eq!(ep.step(&Action::SuggestSolution), Err(EnvError::Terminated));
    }

    #[test]
    fn unknown_question_is_invalid() {
        let s = infant();
        let (mut ep, _) = Episode::reset(&s, &subtask(&s, "teething", 0)).unwrap();
        assert!(matches!(
            ep.step(&Action::ask("dragon", "mood")),
            Err(EnvError::InvalidAction(_))
        ));
        assert_eq!(ep.step_count(), 0);
    }

    #[test]
    fn step_cap_terminates_with_failure() {
        let s = infant();
        let (mut ep, _) = Episode::reset(&s, &subtask(&s, "teething", 0)).unwrap();
        let ask = Action::ask("father", "job");
        let mut total = 0.0;
        for i in 1..=MAX_STEPS {
            let r = ep.step(&ask).unwrap();
            total += r.reward;
            assert_eq!(r.done, i == MAX_STEPS);
        }
        let outcome = ep.outcome().unwrap();
        assert!(outcome.step_cap && !outcome.correct);
        assert!((total - (-1.0 - 0.01 * (MAX_STEPS - 1) as f64)).abs() < 1e-9);
    }

    #[test]
    fn mini_fixture_loads() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("fixtures/scenarios/mini_headache.json");
        assert!(load_scenario(path).is_ok());
    }

    proptest! {
        #[test]
        fn random_episodes_respect_reward_and_asked_invariants(
            picks in proptest::collection::vec(0usize..1000, 1..60),
            sub in 0usize..40,
        ) {
            let s = infant();
            let t = enumerate_subtasks(&s)[sub].clone();
            let (mut ep, mut r) = Episode::reset(&s, &t).unwrap();
            let mut asked = BTreeSet::new();
            let mut responses = std::collections::HashMap::new();
            let mut total = 0.0;
            for p in picks {
                if r.done { break; }
                let a = r.valid_actions[p % r.valid_actions.len()].clone();
                r = ep.step(&a).unwrap();
                total += r.reward;
                if let Action::Ask(q) = &a {
                    asked.insert(q.clone());
                    let prev = responses.insert(q.clone(), r.observation.response.clone());
                    if let Some(prev) = prev {
                        prop_assert_eq!(prev, r.observation.response.clone());
                    }
                }
            }
            prop_assert!(ep.step_count() <= MAX_STEPS);
            prop_assert_eq!(ep.step_count(), ep.history().len() - 1);
            prop_assert_eq!(ep.asked(), &asked);
            if let Some(o) = ep.outcome() {
                let terminal = if o.correct { 1.0 } else { -1.0 };
                let expected = terminal + STEP_PENALTY * (ep.step_count() - 1) as f64;
                prop_assert!((total - expected).abs() < 1e-9);
            }
        }
    }
}
