//! Simulated diagnostic conversations, DRRN and LLM-assisted agents, and evaluation.
//!
//! A [`scenario::Scenario`] describes one patient problem with several possible causes.
//! An [`env::Episode`] plays one subtask (scenario, true cause, wording) as a text game.
//! Agents in [`agents`] choose actions; [`training`] fits the DRRN; [`eval`] scores
//! transcripts and compares agents.

pub mod agents;
pub mod drrn;
pub mod embed;
pub mod env;
pub mod eval;
pub mod llm;
pub mod scenario;
pub mod seed;
pub mod training;
pub mod transcript;

/// Paths to the scenario fixtures bundled with this crate.
pub mod fixtures {
    use std::path::PathBuf;

    pub fn scenario_dir() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("scenarios")
    }

    pub fn scenario_path(name: &str) -> PathBuf {
        scenario_dir().join(format!("{name}.json"))
    }
}
