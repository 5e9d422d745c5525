//! Episode transcripts and their line-delimited JSON log format.

use std::collections::BTreeSet;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::env::{Action, Observation, Phase};
use crate::scenario::{QuestionRef, Subtask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    RlSoftmax,
    LlmChoice,
    GroundedFallback,
    Human,
}

/// Per-step audit of how an agent arrived at its action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionAudit {
    pub source: DecisionSource,
    pub candidate_actions: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub chosen_cause: Option<String>,
    pub correct: bool,
    /// The episode was cut off by the step cap before any posttest choice.
    pub step_cap: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Phase in which the action was taken.
    pub phase: Phase,
    pub action: Action,
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub decision: Option<DecisionAudit>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: usize,
    phase: Phase,
    action_text: String,
    observation_rendered: &'a str,
    reward: f64,
    done: bool,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    decision: Option<&'a DecisionAudit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub subtask: Subtask,
    pub opening: Observation,
    pub steps: Vec<StepRecord>,
    pub outcome: Option<Outcome>,
}

impl Transcript {
    pub fn is_terminal(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Distinct questions asked, in sorted order.
    pub fn asked_questions(&self) -> BTreeSet<QuestionRef> {
        self.steps
            .iter()
            .filter_map(|s| match &s.action {
                Action::Ask(q) => Some(q.clone()),
                _ => None,
            })
            .collect()
    }

    /// The agent/patient exchange as (action text, response) pairs.
    pub fn dialogue(&self) -> impl Iterator<Item = (String, &str)> {
        self.steps
            .iter()
            .map(|s| (s.action.text(), s.observation.response.as_str()))
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for s in &self.steps {
            let line = LogLine {
                step: s.step,
                phase: s.phase,
                action_text: s.action.text(),
                observation_rendered: &s.observation.rendered,
                reward: s.reward,
                done: s.done,
                decision: s.decision.as_ref(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }
}
