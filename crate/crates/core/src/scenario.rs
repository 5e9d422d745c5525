//! Scenario data model, loading, and validation.
//!
//! A scenario is one patient problem with a list of candidate causes. Every
//! cause carries `W` phrasings ("wordings") of the patient's answer to each
//! key question; a [`Subtask`] pins one cause and one wording.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Separator of the composite `subject|topic` response key.
pub const KEY_SEPARATOR: char = '|';

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: cannot read scenario file: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{location}: parse error: {message}")]
    Parse { location: String, message: String },
    #[error("{location}: {message}")]
    Invalid { location: String, message: String },
}

impl ScenarioError {
    fn invalid(location: impl Into<String>, message: impl Into<String>) -> Self {
        ScenarioError::Invalid {
            location: location.into(),
            message: message.into(),
        }
    }
}

/// A question the agent can pose: "what is the `subject`'s `topic`?".
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QuestionRef {
    pub subject: String,
    pub topic: String,
}

impl QuestionRef {
    pub fn new(subject: impl Into<String>, topic: impl Into<String>) -> Self {
        QuestionRef {
            subject: subject.into(),
            topic: topic.into(),
        }
    }

    /// The action sentence shown to agents.
    pub fn action_text(&self) -> String {
        format!("I want to know about the {}'s {}.", self.subject, self.topic)
    }

    /// Composite `subject|topic` key used in scenario files.
    pub fn key(&self) -> String {
        format!("{}{}{}", self.subject, KEY_SEPARATOR, self.topic)
    }

    pub fn from_key(key: &str) -> Option<Self> {
        let (subject, topic) = key.split_once(KEY_SEPARATOR)?;
        if subject.is_empty() || topic.is_empty() || topic.contains(KEY_SEPARATOR) {
            return None;
        }
        Some(QuestionRef::new(subject, topic))
    }
}

impl fmt::Display for QuestionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}'s {}", self.subject, self.topic)
    }
}

/// Response tables keyed by `QuestionRef`, stored on disk with `subject|topic` keys.
pub type ResponseTable = BTreeMap<QuestionRef, Vec<String>>;

mod keyed {
    use super::*;
    use serde::de::Error as _;

    pub fn serialize<S: Serializer>(table: &ResponseTable, s: S) -> Result<S::Ok, S::Error> {
        let raw: BTreeMap<String, &Vec<String>> =
            table.iter().map(|(q, w)| (q.key(), w)).collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ResponseTable, D::Error> {
        let raw = BTreeMap::<String, Vec<String>>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                QuestionRef::from_key(&k)
                    .map(|q| (q, v))
                    .ok_or_else(|| D::Error::custom(format!("malformed response key {k:?}, expected \"subject|topic\"")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cause {
    pub cause_id: String,
    pub display_name: String,
    #[serde(with = "keyed")]
    pub responses: ResponseTable,
}

impl Cause {
    /// Number of wordings `W`; equal across all of this cause's responses once validated.
    pub fn wording_count(&self) -> usize {
        self.responses.values().next().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub patient_id: String,
    pub patient_descriptor: String,
    pub problem: String,
    pub subjects: Vec<String>,
    #[serde(rename = "topics")]
    pub topics_by_subject: BTreeMap<String, Vec<String>>,
    pub key_questions: Vec<QuestionRef>,
    pub causes: Vec<Cause>,
    #[serde(with = "keyed")]
    pub common_answers: ResponseTable,
}

/// One (cause, wording) pair of a scenario.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Subtask {
    pub scenario_id: String,
    pub cause_id: String,
    pub wording_index: usize,
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}#{}", self.scenario_id, self.cause_id, self.wording_index)
    }
}

impl Scenario {
    /// Parses and validates a scenario from JSON text. `origin` names the source in errors.
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            location: format!("{origin}:{}:{}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        scenario.validate(origin)?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn id(&self) -> &str {
        &self.patient_id
    }

    /// The patient noun used in the task line, without a leading article.
    pub fn patient_name(&self) -> &str {
        let d = self.patient_descriptor.trim();
        d.strip_prefix("the ").or_else(|| d.strip_prefix("The ")).unwrap_or(d)
    }

    pub fn task_description(&self) -> String {
        format!("Find the cause behind the {}'s {}", self.patient_name(), self.problem)
    }

    pub fn cause(&self, cause_id: &str) -> Option<&Cause> {
        self.causes.iter().find(|c| c.cause_id == cause_id)
    }

    pub fn is_key_question(&self, q: &QuestionRef) -> bool {
        self.key_questions.contains(q)
    }

    /// Every askable question, subjects in declared order, topics in declared order.
    pub fn questions(&self) -> Vec<QuestionRef> {
        self.subjects
            .iter()
            .flat_map(|s| {
                self.topics_by_subject
                    .get(s)
                    .into_iter()
                    .flatten()
                    .map(move |t| QuestionRef::new(s.clone(), t.clone()))
            })
            .collect()
    }

    pub fn has_question(&self, q: &QuestionRef) -> bool {
        self.topics_by_subject
            .get(&q.subject)
            .is_some_and(|topics| topics.contains(&q.topic))
    }

    /// The patient's answer to `q` under `subtask`. Cause-specific responses take
    /// precedence; everything else resolves through the common answers. Common answers
    /// may carry fewer wordings than causes, so they are indexed modulo their length.
    pub fn response(&self, subtask: &Subtask, q: &QuestionRef) -> Option<&str> {
        let cause = self.cause(&subtask.cause_id)?;
        if let Some(wordings) = cause.responses.get(q) {
            return wordings.get(subtask.wording_index).map(String::as_str);
        }
        let wordings = self.common_answers.get(q)?;
        wordings
            .get(subtask.wording_index % wordings.len())
            .map(String::as_str)
    }

    pub fn owns(&self, subtask: &Subtask) -> bool {
        subtask.scenario_id == self.patient_id
            && self
                .cause(&subtask.cause_id)
                .is_some_and(|c| subtask.wording_index < c.wording_count())
    }

    /// Checks every structural invariant; the error names the first violation.
    pub fn validate(&self, origin: &str) -> Result<(), ScenarioError> {
        let at = |what: &str| format!("{origin}: {what}");
        if self.patient_id.trim().is_empty() {
            return Err(ScenarioError::invalid(at("patient_id"), "must be non-empty"));
        }
        if self.problem.trim().is_empty() {
            return Err(ScenarioError::invalid(at("problem"), "must be non-empty"));
        }
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if s.is_empty() || s.contains(KEY_SEPARATOR) {
                return Err(ScenarioError::invalid(at("subjects"), format!("bad subject name {s:?}")));
            }
            if !seen.insert(s) {
                return Err(ScenarioError::invalid(at("subjects"), format!("duplicate subject {s:?}")));
            }
            match self.topics_by_subject.get(s) {
                Some(topics) if !topics.is_empty() => {
                    let mut seen_topics = HashSet::new();
                    for t in topics {
                        if t.is_empty() || t.contains(KEY_SEPARATOR) {
                            return Err(ScenarioError::invalid(at(&format!("topics.{s}")), format!("bad topic name {t:?}")));
                        }
                        if !seen_topics.insert(t) {
                            return Err(ScenarioError::invalid(at(&format!("topics.{s}")), format!("duplicate topic {t:?}")));
                        }
                    }
                }
                _ => {
                    return Err(ScenarioError::invalid(at(&format!("topics.{s}")), "subject has no topics"));
                }
            }
        }
        if let Some(extra) = self.topics_by_subject.keys().find(|k| !self.subjects.contains(k)) {
            return Err(ScenarioError::invalid(at(&format!("topics.{extra}")), "topics listed for an undeclared subject"));
        }
        if self.key_questions.is_empty() {
            return Err(ScenarioError::invalid(at("key_questions"), "at least 1 key question required"));
        }
        let mut seen_kq = HashSet::new();
        for (i, q) in self.key_questions.iter().enumerate() {
            if !self.has_question(q) {
                return Err(ScenarioError::invalid(
                    at(&format!("key_questions[{i}]")),
                    format!("question {:?} is not in the subject/topic table", q.key()),
                ));
            }
            if !seen_kq.insert(q) {
                return Err(ScenarioError::invalid(at(&format!("key_questions[{i}]")), format!("duplicate key question {:?}", q.key())));
            }
        }
        if self.causes.len() < 2 {
            return Err(ScenarioError::invalid(at("causes"), format!("at least 2 causes required, found {}", self.causes.len())));
        }
        let mut ids = HashSet::new();
        for cause in &self.causes {
            let here = |what: &str| at(&format!("cause {:?}{what}", cause.cause_id));
            if cause.cause_id.trim().is_empty() {
                return Err(ScenarioError::invalid(here(""), "empty cause_id"));
            }
            if !ids.insert(&cause.cause_id) {
                return Err(ScenarioError::invalid(here(""), "duplicate cause_id"));
            }
            for q in &self.key_questions {
                if !cause.responses.contains_key(q) {
                    return Err(ScenarioError::invalid(
                        here(""),
                        format!("missing response for key question {:?}", q.key()),
                    ));
                }
            }
            let w = cause.wording_count();
            if w == 0 {
                return Err(ScenarioError::invalid(here(""), "responses carry no wordings"));
            }
            for (q, wordings) in &cause.responses {
                if !self.has_question(q) {
                    return Err(ScenarioError::invalid(
                        here(&format!(".responses[{:?}]", q.key())),
                        "question is not in the subject/topic table",
                    ));
                }
                if wordings.len() != w {
                    return Err(ScenarioError::invalid(
                        here(&format!(".responses[{:?}]", q.key())),
                        format!("expected {w} wordings, found {}", wordings.len()),
                    ));
                }
                if wordings.iter().any(|s| s.trim().is_empty()) {
                    return Err(ScenarioError::invalid(here(&format!(".responses[{:?}]", q.key())), "empty wording"));
                }
            }
        }
        for (q, wordings) in &self.common_answers {
            let here = at(&format!("common_answers[{:?}]", q.key()));
            if !self.has_question(q) {
                return Err(ScenarioError::invalid(here, "question is not in the subject/topic table"));
            }
            if wordings.is_empty() || wordings.iter().any(|s| s.trim().is_empty()) {
                return Err(ScenarioError::invalid(here, "needs at least one non-empty wording"));
            }
        }
        // Every askable question must resolve for every cause.
        for q in self.questions() {
            if self.common_answers.contains_key(&q) {
                continue;
            }
            if let Some(cause) = self.causes.iter().find(|c| !c.responses.contains_key(&q)) {
                return Err(ScenarioError::invalid(
                    at(&format!("cause {:?}", cause.cause_id)),
                    format!("no response for question {:?} and no common answer", q.key()),
                ));
            }
        }
        Ok(())
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Scenario::from_json(&text, &path.display().to_string())
}

/// All `*.json` files of a directory, sorted by file name.
pub fn scenario_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, ScenarioError> {
    let dir = dir.as_ref();
    let io = |source| ScenarioError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every scenario of a directory, stopping at the first invalid file.
pub fn load_scenario_dir(dir: impl AsRef<Path>) -> Result<Vec<Scenario>, ScenarioError> {
    scenario_files(dir)?.iter().map(load_scenario).collect()
}

/// Every (cause, wording) subtask: causes in declared order, wordings ascending.
pub fn enumerate_subtasks(scenario: &Scenario) -> Vec<Subtask> {
    scenario
        .causes
        .iter()
        .flat_map(|c| {
            (0..c.wording_count()).map(move |w| Subtask {
                scenario_id: scenario.patient_id.clone(),
                cause_id: c.cause_id.clone(),
                wording_index: w,
            })
        })
        .collect()
}
