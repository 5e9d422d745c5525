//! DRRN training on the training split with periodic validation.

use std::collections::HashMap;
use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Agent, AgentError, EVAL_TEMPERATURE};
use crate::drrn::{self, update_state_with, Checkpoint, DrrnConfig, DrrnError, DrrnLearner, QNetwork, TemperatureSchedule, Transition};
use crate::embed::Embedder;
use crate::env::{EnvError, Episode};
use crate::eval::{score_card, EvalError};
use crate::scenario::{Scenario, Subtask};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Drrn(#[from] DrrnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite loss {loss} at episode {episode}")]
    Diverged { episode: usize, loss: f64 },
    #[error("subtask {0} has no matching scenario")]
    UnknownScenario(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training curve: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub drrn: DrrnConfig,
    /// Episodes over which the temperature decays; the full budget when `None`.
    pub anneal_episodes: Option<usize>,
    /// Gradient updates after each environment step.
    pub updates_per_step: usize,
    /// Stop once the validation posttest mean reaches this value.
    pub stop_at: Option<f64>,
    /// Label stored in checkpoints to identify the embedding.
    pub embedding: String,
}

impl TrainConfig {
    pub fn new(episodes: usize, seed: u64) -> Self {
        TrainConfig {
            episodes,
            eval_every: 50,
            seed,
            drrn: DrrnConfig::default(),
            anneal_episodes: None,
            updates_per_step: 1,
            stop_at: None,
            embedding: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub temperature: f64,
    pub episode_reward: f64,
    pub mean_loss: Option<f64>,
    pub validation_posttest: Option<f64>,
    pub validation_combined: Option<f64>,
    pub validation_capped: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub best: Checkpoint,
    pub best_validation: f64,
    pub episodes_run: usize,
    pub curve: Vec<CurveRow>,
}

impl TrainReport {
    pub fn write_curve<W: io::Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.curve {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationSummary {
    pub posttest: f64,
    pub combined: f64,
    /// Episodes that ended at the step cap.
    pub capped: usize,
}

/// Mean posttest and combined score of the RL agent at the evaluation temperature.
pub fn validate(
    net: &QNetwork,
    embedder: &dyn Embedder,
    config: &DrrnConfig,
    scenarios: &ScenarioIndex<'_>,
    subtasks: &[Subtask],
    seed: u64,
) -> Result<ValidationSummary, TrainError> {
    if subtasks.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut agent = Agent::rl(net, embedder);
    agent.updater = config.updater;
    agent.temperature = EVAL_TEMPERATURE;
    let (mut post, mut comb, mut capped) = (0.0, 0.0, 0);
    for t in subtasks {
        let scenario = scenarios.get(t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &t.to_string()));
        let tr = agent.run_episode(scenario, t, &mut rng)?;
        let card = score_card(&tr, scenario)?;
        post += f64::from(card.posttest);
        comb += card.combined;
        capped += usize::from(tr.outcome.as_ref().is_some_and(|o| o.step_cap));
    }
    let n = subtasks.len() as f64;
    Ok(ValidationSummary {
        posttest: post / n,
        combined: comb / n,
        capped,
    })
}

/// Scenario lookup by id.
pub struct ScenarioIndex<'a>(HashMap<&'a str, &'a Scenario>);

impl<'a> ScenarioIndex<'a> {
    pub fn new(scenarios: &'a [Scenario]) -> Self {
        ScenarioIndex(scenarios.iter().map(|s| (s.id(), s)).collect())
    }

    pub fn get(&self, t: &Subtask) -> Result<&'a Scenario, TrainError> {
        self.0
            .get(t.scenario_id.as_str())
            .copied()
            .ok_or_else(|| TrainError::UnknownScenario(t.to_string()))
    }
}

/// Trains a DRRN and returns the checkpoint with the best validation posttest score
/// (the earliest on ties).
pub fn train(
    scenarios: &[Scenario],
    train_set: &[Subtask],
    validation_set: &[Subtask],
    embedder: &dyn Embedder,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    let index = ScenarioIndex::new(scenarios);
    let dc = &config.drrn;
    let mut learner = DrrnLearner::new(dc.clone(), embedder.dim(), derive_seed(config.seed, "init"));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train"));
    let schedule = TemperatureSchedule::new(config.anneal_episodes.unwrap_or(config.episodes).max(1) as u64);
    let eval_every = config.eval_every.max(1);
    let checkpoint = |net: &QNetwork, episode: usize| Checkpoint {
        seed: config.seed,
        episode,
        embedding: config.embedding.clone(),
        config: dc.clone(),
        network: net.clone(),
    };
    let mut best = checkpoint(&learner.online, 0);
    let mut best_validation = f64::NEG_INFINITY;
    let mut curve = Vec::with_capacity(config.episodes);
    let mut episodes_run = 0;

    for ep in 0..config.episodes {
        let temperature = schedule.temperature_at(ep as u64)?;
        let subtask = &train_set[rng.gen_range(0..train_set.len())];
        let scenario = index.get(subtask)?;
        let (mut episode, first) = Episode::reset(scenario, subtask)?;
        let mut state = update_state_with(dc.updater, &drrn::EmbeddedState::empty(embedder.dim()), &embedder.embed_lossy(&first.observation.rendered))?;
        let mut actions = first.valid_actions;
        let mut action_vecs: Vec<_> = actions.iter().map(|a| embedder.embed_lossy(&a.text())).collect();
        let (mut reward_sum, mut loss_sum, mut loss_n) = (0.0, 0.0, 0usize);

        while !episode.is_done() {
            let q = learner.online.q_values(&state, &action_vecs)?;
            let i = drrn::select_action(&q, temperature, &mut rng)?;
            let result = episode.step(&actions[i])?;
            reward_sum += result.reward;
            let next_state = update_state_with(dc.updater, &state, &embedder.embed_lossy(&result.observation.rendered))?;
            let next_vecs: Vec<_> = result.valid_actions.iter().map(|a| embedder.embed_lossy(&a.text())).collect();
            learner.replay.push(Transition {
                state: state.clone(),
                action: action_vecs[i].clone(),
                reward: result.reward,
                next_state: next_state.clone(),
                next_actions: next_vecs.clone(),
                done: result.done,
            });
            for _ in 0..config.updates_per_step {
                match learner.train_step(&mut rng) {
                    Ok(Some(loss)) => {
                        loss_sum += loss;
                        loss_n += 1;
                    }
                    Ok(None) => {}
                    Err(DrrnError::NonFinite(loss)) => return Err(TrainError::Diverged { episode: ep + 1, loss }),
                    Err(e) => return Err(e.into()),
                }
            }
            state = next_state;
            actions = result.valid_actions;
            action_vecs = next_vecs;
        }
        episodes_run = ep + 1;

        let mut row = CurveRow {
            episode: ep + 1,
            temperature,
            episode_reward: reward_sum,
            mean_loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
            validation_posttest: None,
            validation_combined: None,
            validation_capped: None,
        };
        let mut stop = false;
        if !validation_set.is_empty() && ((ep + 1) % eval_every == 0 || ep + 1 == config.episodes) {
            let v = validate(&learner.online, embedder, dc, &index, validation_set, derive_seed(config.seed, "validation"))?;
            let post = v.posttest;
            log::info!(
                "episode {}: T={temperature:.4} validation posttest {post:.3} combined {:.3} capped {}",
                ep + 1,
                v.combined,
                v.capped
            );
            row.validation_posttest = Some(post);
            row.validation_combined = Some(v.combined);
            row.validation_capped = Some(v.capped);
            if post > best_validation {
                best_validation = post;
                best = checkpoint(&learner.online, ep + 1);
            }
            stop = config.stop_at.is_some_and(|target| post >= target);
        }
        curve.push(row);
        if stop {
            break;
        }
    }
    if validation_set.is_empty() {
        best = checkpoint(&learner.online, episodes_run);
    }
    Ok(TrainReport {
        best,
        best_validation,
        episodes_run,
        curve,
    })
}
