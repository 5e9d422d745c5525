//! Deep reinforced relevance network.
//!
//! States and actions are encoded by two separate feed-forward stacks; the
//! concatenated encodings go through a scorer stack that yields `Q(s, a)`.
//! State embeddings are the running sum of observation embeddings.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::SentenceVector;

#[derive(Debug, Error)]
pub enum DrrnError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("schedule needs total_steps > 0 and t_start > t_end > 0")]
    Schedule,
    #[error("non-finite loss {0}")]
    NonFinite(f64),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

/// How observation embeddings accumulate into a state embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateUpdater {
    #[default]
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedState {
    pub values: Vec<f64>,
    pub num_observations: usize,
}

impl EmbeddedState {
    pub fn empty(dim: usize) -> Self {
        EmbeddedState {
            values: vec![0.0; dim],
            num_observations: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Summation updater: `e(s_t) = e(s_{t-1}) + e(o_t)`.
pub fn update_state(prev: &EmbeddedState, obs: &SentenceVector) -> Result<EmbeddedState, DrrnError> {
    update_state_with(StateUpdater::Sum, prev, obs)
}

pub fn update_state_with(
    updater: StateUpdater,
    prev: &EmbeddedState,
    obs: &SentenceVector,
) -> Result<EmbeddedState, DrrnError> {
    check_dim(prev.dim(), obs.dim())?;
    let n = prev.num_observations;
    let values = prev
        .values
        .iter()
        .zip(obs.values())
        .map(|(&p, &o)| match updater {
            StateUpdater::Sum => p + o,
            StateUpdater::Mean => (p * n as f64 + o) / (n + 1) as f64,
            StateUpdater::Max if n == 0 => o,
            StateUpdater::Max => p.max(o),
        })
        .collect();
    Ok(EmbeddedState {
        values,
        num_observations: n + 1,
    })
}

fn check_dim(expected: usize, found: usize) -> Result<(), DrrnError> {
    if expected == found {
        Ok(())
    } else {
        Err(DrrnError::Dimension { expected, found })
    }
}

/// Fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Dense {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

/// A stack of dense layers with ReLU between layers, and optionally after the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub relu_output: bool,
}

struct MlpTrace {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new<R: Rng>(sizes: &[usize], relu_output: bool, rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Mlp { layers, relu_output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    fn activates(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.relu_output
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if self.activates(i) {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    fn forward_traced(&self, x: &[f64]) -> (Vec<f64>, MlpTrace) {
        let mut trace = MlpTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&h);
            trace.inputs.push(h);
            h = if self.activates(i) {
                pre.iter().map(|v| v.max(0.0)).collect()
            } else {
                pre.clone()
            };
            trace.pre.push(pre);
        }
        (h, trace)
    }

    /// Accumulates parameter gradients into `grads`; returns the gradient w.r.t. the input.
    fn backward(&self, trace: &MlpTrace, grad_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if self.activates(i) {
                for (gv, pre) in g.iter_mut().zip(&trace.pre[i]) {
                    if *pre <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let x = &trace.inputs[i];
            let gl = &mut grads.layers[i];
            let mut gx = vec![0.0; layer.inputs];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                gl.bias[o] += go;
                let row = o * layer.inputs;
                let wrow = &layer.weights[row..row + layer.inputs];
                let grow = &mut gl.weights[row..row + layer.inputs];
                for ((gw, &xk), (gxk, &wk)) in grow.iter_mut().zip(x).zip(gx.iter_mut().zip(wrow)) {
                    *gw += go * xk;
                    *gxk += go * wk;
                }
            }
            g = gx;
        }
        g
    }

    fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
            relu_output: self.relu_output,
        }
    }
}

/// Layer sizes of the three stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub encoding: usize,
    pub scorer_hidden: usize,
}

impl NetShape {
    pub fn new(input_dim: usize) -> Self {
        NetShape {
            input_dim,
            hidden: 128,
            encoding: 64,
            scorer_hidden: 128,
        }
    }
}

/// Also used as the gradient container: a gradient has exactly the network's shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    pub state_encoder: Mlp,
    pub action_encoder: Mlp,
    pub scorer: Mlp,
}

/// Forward intermediates of one (state, action) pair.
struct QTrace {
    state: MlpTrace,
    action: MlpTrace,
    scorer: MlpTrace,
}

impl QNetwork {
    pub fn new(shape: NetShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let NetShape {
            input_dim,
            hidden,
            encoding,
            scorer_hidden,
        } = shape;
        QNetwork {
            state_encoder: Mlp::new(&[input_dim, hidden, encoding], true, &mut rng),
            action_encoder: Mlp::new(&[input_dim, hidden, encoding], true, &mut rng),
            scorer: Mlp::new(&[2 * encoding, scorer_hidden, 1], false, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        QNetwork {
            state_encoder: self.state_encoder.zeros_like(),
            action_encoder: self.action_encoder.zeros_like(),
            scorer: self.scorer.zeros_like(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.state_encoder.input_dim()
    }

    fn stacks(&self) -> [&Mlp; 3] {
        [&self.state_encoder, &self.action_encoder, &self.scorer]
    }

    fn stacks_mut(&mut self) -> [&mut Mlp; 3] {
        [&mut self.state_encoder, &mut self.action_encoder, &mut self.scorer]
    }

    /// Every trainable parameter in a fixed order.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.stacks()
            .into_iter()
            .flat_map(|m| m.layers.iter())
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.stacks_mut()
            .into_iter()
            .flat_map(|m| m.layers.iter_mut())
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn param_count(&self) -> usize {
        self.params().count()
    }

    fn check_inputs(&self, state: &[f64], action: &[f64]) -> Result<(), DrrnError> {
        check_dim(self.state_encoder.input_dim(), state.len())?;
        check_dim(self.action_encoder.input_dim(), action.len())
    }

    pub fn encode_state(&self, state: &EmbeddedState) -> Result<Vec<f64>, DrrnError> {
        check_dim(self.state_encoder.input_dim(), state.dim())?;
        Ok(self.state_encoder.forward(&state.values))
    }

    pub fn encode_action(&self, action: &SentenceVector) -> Result<Vec<f64>, DrrnError> {
        check_dim(self.action_encoder.input_dim(), action.dim())?;
        Ok(self.action_encoder.forward(action.values()))
    }

    fn score(&self, state_code: &[f64], action_code: &[f64]) -> f64 {
        let joint: Vec<f64> = state_code.iter().chain(action_code).copied().collect();
        self.scorer.forward(&joint)[0]
    }

    pub fn q_value(&self, state: &EmbeddedState, action: &SentenceVector) -> Result<f64, DrrnError> {
        self.check_inputs(&state.values, action.values())?;
        let s = self.state_encoder.forward(&state.values);
        let a = self.action_encoder.forward(action.values());
        Ok(self.score(&s, &a))
    }

    /// Q-values of several actions in one state; the state is encoded once.
    pub fn q_values(&self, state: &EmbeddedState, actions: &[SentenceVector]) -> Result<Vec<f64>, DrrnError> {
        let s = self.encode_state(state)?;
        actions
            .iter()
            .map(|a| Ok(self.score(&s, &self.encode_action(a)?)))
            .collect()
    }

    fn forward_traced(&self, state: &[f64], action: &[f64]) -> (f64, QTrace) {
        let (s, state_trace) = self.state_encoder.forward_traced(state);
        let (a, action_trace) = self.action_encoder.forward_traced(action);
        let joint: Vec<f64> = s.iter().chain(&a).copied().collect();
        let (q, scorer_trace) = self.scorer.forward_traced(&joint);
        (
            q[0],
            QTrace {
                state: state_trace,
                action: action_trace,
                scorer: scorer_trace,
            },
        )
    }

    fn backward_into(&self, trace: &QTrace, upstream: f64, grads: &mut QNetwork) {
        let g_joint = self.scorer.backward(&trace.scorer, &[upstream], &mut grads.scorer);
        let (g_s, g_a) = g_joint.split_at(self.state_encoder.output_dim());
        self.state_encoder.backward(&trace.state, g_s, &mut grads.state_encoder);
        self.action_encoder.backward(&trace.action, g_a, &mut grads.action_encoder);
    }

    /// `Σ_i upstream[i] · ∂Q(s_i, a_i)/∂θ` for every parameter θ.
    pub fn gradients(
        &self,
        inputs: &[(&EmbeddedState, &SentenceVector)],
        upstream: &[f64],
    ) -> Result<QNetwork, DrrnError> {
        check_dim(inputs.len(), upstream.len())?;
        let mut grads = self.zeros_like();
        for ((state, action), &up) in inputs.iter().zip(upstream) {
            self.check_inputs(&state.values, action.values())?;
            let (_, trace) = self.forward_traced(&state.values, action.values());
            self.backward_into(&trace, up, &mut grads);
        }
        Ok(grads)
    }

    /// Mean squared error of `Q(s_i, a_i)` against fixed targets, and its gradient.
    pub fn mse_gradients(&self, samples: &[(&EmbeddedState, &SentenceVector, f64)]) -> Result<(f64, QNetwork), DrrnError> {
        if samples.is_empty() {
            return Err(DrrnError::Empty("batch"));
        }
        let n = samples.len() as f64;
        let mut grads = self.zeros_like();
        let mut loss = 0.0;
        for (state, action, target) in samples {
            self.check_inputs(&state.values, action.values())?;
            let (q, trace) = self.forward_traced(&state.values, action.values());
            let err = q - target;
            loss += err * err;
            self.backward_into(&trace, 2.0 * err / n, &mut grads);
        }
        Ok((loss / n, grads))
    }

    pub fn grad_norm(&self) -> f64 {
        self.params().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// `θ ← θ − lr · g`, after rescaling `g` to norm `clip` when it is longer.
    pub fn sgd_step(&mut self, grads: &QNetwork, lr: f64, clip: Option<f64>) {
        let norm = grads.grad_norm();
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (p, g) in self.params_mut().zip(grads.params()) {
            *p -= lr * scale * g;
        }
    }
}

/// Softmax of `q / temperature`, computed with max subtraction.
pub fn softmax(q: &[f64], temperature: f64) -> Result<Vec<f64>, DrrnError> {
    if q.is_empty() {
        return Err(DrrnError::Empty("q-value list"));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(DrrnError::Temperature(temperature));
    }
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = q.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Samples an index from `softmax(q / temperature)`.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], temperature: f64, rng: &mut R) -> Result<usize, DrrnError> {
    let probs = softmax(q, temperature)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // rounding left `acc` a hair below 1; fall back to the last non-zero entry
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Linear temperature decay from `t_start` to `t_end` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub t_start: f64,
    pub t_end: f64,
    pub total_steps: u64,
}

impl TemperatureSchedule {
    pub fn new(total_steps: u64) -> Self {
        TemperatureSchedule {
            t_start: 1.0,
            t_end: 0.001,
            total_steps,
        }
    }

    pub fn temperature_at(&self, step: u64) -> Result<f64, DrrnError> {
        if self.total_steps == 0 || !(self.t_start > self.t_end && self.t_end > 0.0) {
            return Err(DrrnError::Schedule);
        }
        let frac = (step as f64 / self.total_steps as f64).min(1.0);
        Ok(self.t_start + (self.t_end - self.t_start) * frac)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: EmbeddedState,
    pub action: SentenceVector,
    pub reward: f64,
    pub next_state: EmbeddedState,
    pub next_actions: Vec<SentenceVector>,
    pub done: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Up to `batch` distinct transitions drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Transition> {
        let n = batch.min(self.items.len());
        index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

/// One-step Q-learning target: `r` on terminal transitions, else `r + γ max_a' Q_target(s', a')`.
pub fn td_target(target_net: &QNetwork, t: &Transition, gamma: f64) -> Result<f64, DrrnError> {
    if t.done || t.next_actions.is_empty() {
        return Ok(t.reward);
    }
    let q_next = target_net.q_values(&t.next_state, &t.next_actions)?;
    let best = q_next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(t.reward + gamma * best)
}

/// One SGD step on the mean squared TD error; returns the loss before the update.
pub fn td_train_step(
    net: &mut QNetwork,
    target_net: &QNetwork,
    batch: &[&Transition],
    gamma: f64,
    lr: f64,
    clip: Option<f64>,
) -> Result<f64, DrrnError> {
    if batch.is_empty() {
        return Err(DrrnError::Empty("batch"));
    }
    let targets = batch
        .iter()
        .map(|t| td_target(target_net, t, gamma))
        .collect::<Result<Vec<_>, _>>()?;
    let samples: Vec<_> = batch
        .iter()
        .zip(&targets)
        .map(|(t, &y)| (&t.state, &t.action, y))
        .collect();
    let (loss, grads) = net.mse_gradients(&samples)?;
    if !loss.is_finite() {
        return Err(DrrnError::NonFinite(loss));
    }
    net.sgd_step(&grads, lr, clip);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrrnConfig {
    pub hidden: usize,
    pub encoding: usize,
    pub scorer_hidden: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub target_sync: usize,
    pub grad_clip: f64,
    pub updater: StateUpdater,
}

impl Default for DrrnConfig {
    fn default() -> Self {
        DrrnConfig {
            hidden: 128,
            encoding: 64,
            scorer_hidden: 128,
            gamma: 0.99,
            learning_rate: 1e-3,
            batch_size: 32,
            replay_capacity: 10_000,
            target_sync: 100,
            grad_clip: 5.0,
            updater: StateUpdater::Sum,
        }
    }
}

impl DrrnConfig {
    pub fn shape(&self, input_dim: usize) -> NetShape {
        NetShape {
            input_dim,
            hidden: self.hidden,
            encoding: self.encoding,
            scorer_hidden: self.scorer_hidden,
        }
    }
}

/// Online network, target network, and replay memory.
#[derive(Debug, Clone)]
pub struct DrrnLearner {
    pub config: DrrnConfig,
    pub online: QNetwork,
    pub target: QNetwork,
    pub replay: ReplayBuffer,
    updates: usize,
}

impl DrrnLearner {
    pub fn new(config: DrrnConfig, input_dim: usize, seed: u64) -> Self {
        let online = QNetwork::new(config.shape(input_dim), seed);
        DrrnLearner {
            target: online.clone(),
            replay: ReplayBuffer::new(config.replay_capacity),
            online,
            config,
            updates: 0,
        }
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Samples a batch and trains once, if the replay holds at least one full batch.
    pub fn train_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<f64>, DrrnError> {
        if self.replay.len() < self.config.batch_size {
            return Ok(None);
        }
        let batch = self.replay.sample(self.config.batch_size, rng);
        let loss = td_train_step(
            &mut self.online,
            &self.target,
            &batch,
            self.config.gamma,
            self.config.learning_rate,
            Some(self.config.grad_clip),
        )?;
        self.updates += 1;
        if self.updates.is_multiple_of(self.config.target_sync) {
            self.target = self.online.clone();
        }
        Ok(Some(loss))
    }
}

/// Self-contained snapshot of a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub episode: usize,
    pub embedding: String,
    pub config: DrrnConfig,
    pub network: QNetwork,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DrrnError> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DrrnError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
