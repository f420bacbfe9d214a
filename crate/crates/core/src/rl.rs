//! Deep Q-learning with spiking Q-networks: replay buffer, epsilon-greedy
//! acting, target-network bootstrapping, Adam updates, evaluation and
//! best-model selection.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{EncodeError, EncoderKind, Observation};
use crate::env::{EnvError, Environment};
use crate::network::{gradient_norm, Architecture, NetworkError, Prepared, SpikeMode, SpikingNetwork};
use crate::neuron::{NeuronKind, SurrogateSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("environment failed at step {step}: {source}")]
    Env { step: u64, source: EnvError },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("{0}")]
    Observer(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Arc<Observation>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Arc<Observation>,
    pub terminal: bool,
}

/// Fixed-capacity ring of transitions with uniform sampling. When full, the
/// oldest transition is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `n` indices drawn uniformly with replacement, or `None` while the
    /// buffer holds fewer than `n` transitions.
    pub fn sample_indices(&self, n: usize, rng: &mut Rng) -> Option<Vec<usize>> {
        if self.items.len() < n || n == 0 {
            return None;
        }
        Some((0..n).map(|_| rng.below(self.items.len())).collect())
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Option<Vec<&Transition>> {
        self.sample_indices(n, rng)
            .map(|idx| idx.into_iter().map(|i| &self.items[i]).collect())
    }
}

/// With probability `epsilon` a uniformly random action, otherwise the
/// greedy one (lowest index on ties). Always draws one uniform number first,
/// so the stream position does not depend on `q`.
pub fn select_action(q: &[f32], epsilon: f64, rng: &mut Rng) -> usize {
    assert!(!q.is_empty(), "empty action set");
    if rng.uniform() < epsilon {
        rng.below(q.len())
    } else {
        argmax(q)
    }
}

fn argmax(q: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// `r` for terminal transitions, otherwise `r + discount * max_a' q'(a')`.
pub fn td_target(reward: f64, terminal: bool, discount: f64, q_next_target: &[f32]) -> f64 {
    if terminal {
        reward
    } else {
        let max = q_next_target.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        reward + discount * max as f64
    }
}

/// Sample mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig) -> Self {
        Self {
            lr,
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient block mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.cfg.eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Discount factor of the Q-target.
    pub discount: f64,
    /// Exploration rate while training (constant).
    pub epsilon: f64,
    /// Exploration rate during evaluation.
    pub eval_epsilon: f64,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    /// Simulation window T.
    pub window: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Optimizer updates between target-network copies.
    pub target_sync_period: u64,
    /// Environment steps before the first update.
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Environment steps per optimizer update once warm.
    pub train_every: u64,
    pub huber_delta: f64,
    /// Episodes in the running mean that ranks candidate best models.
    pub best_window: usize,
    pub surrogate: SurrogateSpec,
    pub encoder: EncoderKind,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            discount: 0.99,
            epsilon: 0.1,
            eval_epsilon: 0.05,
            learning_rate: 5e-5,
            adam: AdamConfig::default(),
            window: 20,
            batch_size: 32,
            buffer_capacity: 100_000,
            target_sync_period: 1000,
            warmup_steps: 1000,
            total_steps: 1_000_000,
            train_every: 1,
            huber_delta: 1.0,
            best_window: 20,
            surrogate: SurrogateSpec::default(),
            encoder: EncoderKind::Bernoulli,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: String| Err(RlError::Config(m));
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!("discount must lie in [0, 1), got {}", self.discount));
        }
        for (name, e) in [("epsilon", self.epsilon), ("eval_epsilon", self.eval_epsilon)] {
            if !(0.0..=1.0).contains(&e) {
                return bad(format!("{name} must lie in [0, 1], got {e}"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.huber_delta > 0.0) {
            return bad(format!("huber_delta must be positive, got {}", self.huber_delta));
        }
        for (name, v) in [
            ("window", self.window),
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("best_window", self.best_window),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.target_sync_period == 0 || self.train_every == 0 {
            return bad("target_sync_period and train_every must be at least 1".into());
        }
        if self.batch_size > self.buffer_capacity {
            return bad("batch_size exceeds buffer_capacity".into());
        }
        self.surrogate
            .validate()
            .map_err(|e| RlError::Config(e.to_string()))?;
        Ok(())
    }
}

fn encode_batch<'a>(
    observations: impl Iterator<Item = &'a Observation>,
    encoder: EncoderKind,
    window: usize,
    rng: &mut Rng,
) -> Result<Tensor<f32>, RlError> {
    let mut data = Vec::new();
    let mut frame: Option<[usize; 3]> = None;
    let mut n = 0;
    for obs in observations {
        let spikes = encoder.encode(obs, window, rng)?;
        frame = Some(obs.shape());
        data.extend_from_slice(spikes.data());
        n += 1;
    }
    let [c, h, w] = frame.expect("non-empty batch");
    Ok(Tensor::new(vec![n, window, c, h, w], data).map_err(NetworkError::from)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Online and target networks with their optimizer.
#[derive(Debug, Clone)]
pub struct Learner {
    online: SpikingNetwork<f32>,
    target: SpikingNetwork<f32>,
    online_prep: Prepared<f32>,
    target_prep: Prepared<f32>,
    adam: Adam,
    updates: u64,
    cfg: AgentConfig,
}

impl Learner {
    pub fn new(online: SpikingNetwork<f32>, cfg: AgentConfig) -> Result<Self, RlError> {
        cfg.validate()?;
        let prep = online.prepare();
        Ok(Self {
            target: online.clone(),
            target_prep: prep.clone(),
            online_prep: prep,
            online,
            adam: Adam::new(cfg.learning_rate, cfg.adam),
            updates: 0,
            cfg,
        })
    }

    pub fn online(&self) -> &SpikingNetwork<f32> {
        &self.online
    }

    pub fn target(&self) -> &SpikingNetwork<f32> {
        &self.target
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    /// Greedy-or-random action for one observation, plus the forward tape
    /// for instrumentation.
    pub fn act(
        &self,
        obs: &Observation,
        epsilon: f64,
        encoder_rng: &mut Rng,
        explore_rng: &mut Rng,
    ) -> Result<(usize, crate::network::Tape<f32>), RlError> {
        let x = encode_batch(std::iter::once(obs), self.cfg.encoder, self.cfg.window, encoder_rng)?;
        let (q, tape) = self.online.forward_prepared(&self.online_prep, &x, SpikeMode::Hard)?;
        Ok((select_action(q.data(), epsilon, explore_rng), tape))
    }

    /// One Huber-loss Adam update on `batch`. Both observations are
    /// re-encoded with fresh spike trains. The target network is copied
    /// from the online network every `target_sync_period` updates.
    pub fn train_step(&mut self, batch: &[&Transition], rng: &mut Rng) -> Result<UpdateStats, RlError> {
        let cfg = &self.cfg;
        let b = batch.len();
        let x = encode_batch(batch.iter().map(|t| t.obs.as_ref()), cfg.encoder, cfg.window, rng)?;
        let x_next = encode_batch(batch.iter().map(|t| t.next_obs.as_ref()), cfg.encoder, cfg.window, rng)?;
        let (q_next, _) = self.target.forward_prepared(&self.target_prep, &x_next, SpikeMode::Hard)?;
        let (q, tape) = self.online.forward_prepared(&self.online_prep, &x, SpikeMode::Hard)?;
        let n_act = self.online.n_actions();

        let mut dq = vec![0.0f32; b * n_act];
        let mut loss = 0.0;
        let delta = cfg.huber_delta;
        for (i, t) in batch.iter().enumerate() {
            let y = td_target(
                t.reward,
                t.terminal,
                cfg.discount,
                &q_next.data()[i * n_act..(i + 1) * n_act],
            );
            let d = q.data()[i * n_act + t.action] as f64 - y;
            loss += if d.abs() <= delta {
                0.5 * d * d
            } else {
                delta * (d.abs() - 0.5 * delta)
            };
            dq[i * n_act + t.action] = (d.clamp(-delta, delta) / b as f64) as f32;
        }
        loss /= b as f64;

        let dq = Tensor::new(vec![b, n_act], dq).map_err(NetworkError::from)?;
        let grads = self.online.backward(&tape, &dq, &cfg.surrogate)?;
        let grad_norm = gradient_norm(&grads);
        self.adam.step(self.online.param_slices_mut(), grads.slices());
        self.online.clamp_thresholds();
        self.online_prep = self.online.prepare();
        self.updates += 1;
        if self.updates.is_multiple_of(cfg.target_sync_period) {
            self.sync_target();
        }
        Ok(UpdateStats { loss, grad_norm })
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
        self.target_prep = self.online_prep.clone();
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    /// Environment steps taken so far, this episode included.
    pub step: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub epsilon: f64,
    /// Mean gradient norm of the updates made during the episode.
    pub grad_norm_avg: Option<f64>,
    pub loss_avg: Option<f64>,
    pub updates: u64,
    pub firing_rate_by_layer: Vec<f64>,
    /// Positive share of nonzero spikes per layer (ternary models only).
    pub pos_spike_fraction: Vec<Option<f64>>,
    /// Effective negative threshold per layer (ternary models only).
    pub v_th_n_by_layer: Vec<f64>,
    pub v_th_p_by_layer: Vec<f64>,
}

/// Hooks for streaming results out of [`train`] as they happen.
pub trait TrainObserver {
    fn episode(&mut self, _record: &EpisodeRecord) -> Result<(), RlError> {
        Ok(())
    }

    fn new_best(&mut self, _net: &SpikingNetwork<f32>, _score: f64, _episode: u64) -> Result<(), RlError> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Network with the best running-mean return, or the final network if
    /// no window of episodes ever completed.
    pub best: SpikingNetwork<f32>,
    pub best_score: Option<f64>,
    pub best_episode: Option<u64>,
    pub last: SpikingNetwork<f32>,
    pub episodes: Vec<EpisodeRecord>,
    pub updates: u64,
}

#[derive(Debug, Default)]
struct EpisodeStats {
    ret: f64,
    grad_sum: f64,
    loss_sum: f64,
    updates: u64,
    counts: Vec<(usize, usize, usize)>,
}

/// Freshly initialised network drawn from the run's `init` stream.
pub fn build_network(
    arch: Architecture,
    kind: NeuronKind,
    rng: &Rng,
) -> Result<SpikingNetwork<f32>, RlError> {
    Ok(SpikingNetwork::init(arch, kind, &mut rng.derive("init"))?)
}

/// Runs `cfg.total_steps` epsilon-greedy environment steps, learning from
/// replay, and keeps the network with the best running-mean episode return
/// (`cfg.best_window` episodes; ties go to the later network).
pub fn train(
    env: &mut dyn Environment,
    network: SpikingNetwork<f32>,
    cfg: &AgentConfig,
    rng: &Rng,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, RlError> {
    let mut learner = Learner::new(network, cfg.clone())?;
    let mut env_rng = rng.derive("env");
    let mut enc_rng = rng.derive("encoder");
    let mut explore_rng = rng.derive("exploration");
    let mut replay_rng = rng.derive("replay");
    let mut batch_rng = rng.derive("batch-encoder");
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let n_layers = learner.online().layers().len();
    let model = learner.online().kind().model;

    let mut episodes = Vec::new();
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(cfg.best_window);
    let mut best: Option<(f64, u64, SpikingNetwork<f32>)> = None;
    let mut stats = EpisodeStats {
        counts: vec![(0, 0, 0); n_layers],
        ..Default::default()
    };
    let mut obs = Arc::new(env.reset(&mut env_rng));

    for step in 1..=cfg.total_steps {
        let (action, tape) = learner.act(&obs, cfg.epsilon, &mut enc_rng, &mut explore_rng)?;
        for (l, c) in stats.counts.iter_mut().enumerate() {
            let (p, n, t) = tape.spike_counts(l);
            c.0 += p;
            c.1 += n;
            c.2 += t;
        }
        let res = env.step(action).map_err(|source| RlError::Env { step, source })?;
        let next = Arc::new(res.next_obs);
        buffer.push(Transition {
            obs: Arc::clone(&obs),
            action,
            reward: res.reward,
            next_obs: Arc::clone(&next),
            terminal: res.terminal,
        });
        stats.ret += res.reward;

        if step > cfg.warmup_steps && step % cfg.train_every == 0 {
            if let Some(batch) = buffer.sample(cfg.batch_size, &mut replay_rng) {
                let u = learner.train_step(&batch, &mut batch_rng)?;
                stats.grad_sum += u.grad_norm;
                stats.loss_sum += u.loss;
                stats.updates += 1;
            }
        }

        if res.terminal {
            let net = learner.online();
            let record = EpisodeRecord {
                episode: episodes.len() as u64,
                step,
                ret: stats.ret,
                epsilon: cfg.epsilon,
                grad_norm_avg: (stats.updates > 0).then(|| stats.grad_sum / stats.updates as f64),
                loss_avg: (stats.updates > 0).then(|| stats.loss_sum / stats.updates as f64),
                updates: learner.updates(),
                firing_rate_by_layer: stats
                    .counts
                    .iter()
                    .map(|&(p, n, t)| (p + n) as f64 / t as f64)
                    .collect(),
                pos_spike_fraction: if model.is_ternary() {
                    stats
                        .counts
                        .iter()
                        .map(|&(p, n, _)| (p + n > 0).then(|| p as f64 / (p + n) as f64))
                        .collect()
                } else {
                    Vec::new()
                },
                v_th_n_by_layer: if model.is_ternary() {
                    net.layers()
                        .iter()
                        .map(|l| l.neuron.neg_threshold(model) as f64)
                        .collect()
                } else {
                    Vec::new()
                },
                v_th_p_by_layer: net.layers().iter().map(|l| l.neuron.v_th_p as f64).collect(),
            };
            observer.episode(&record)?;

            if recent.len() == cfg.best_window {
                recent.pop_front();
            }
            recent.push_back(stats.ret);
            if recent.len() == cfg.best_window {
                let score = recent.iter().sum::<f64>() / recent.len() as f64;
                if best.as_ref().is_none_or(|(s, _, _)| score >= *s) {
                    observer.new_best(net, score, record.episode)?;
                    best = Some((score, record.episode, net.clone()));
                }
            }
            episodes.push(record);
            stats = EpisodeStats {
                counts: vec![(0, 0, 0); n_layers],
                ..Default::default()
            };
            obs = Arc::new(env.reset(&mut env_rng));
        } else {
            obs = next;
        }
    }

    let last = learner.online().clone();
    let updates = learner.updates();
    let (best_score, best_episode, best) = match best {
        Some((s, e, n)) => (Some(s), Some(e), n),
        None => (None, None, last.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_score,
        best_episode,
        last,
        episodes,
        updates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub window: usize,
    pub encoder: EncoderKind,
    pub epsilon: f64,
}

impl From<&AgentConfig> for EvalConfig {
    fn from(c: &AgentConfig) -> Self {
        Self {
            window: c.window,
            encoder: c.encoder,
            epsilon: c.eval_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Runs `episodes` episodes with a near-greedy policy and reports the mean
/// and population standard deviation of the returns.
pub fn evaluate(
    net: &SpikingNetwork<f32>,
    env: &mut dyn Environment,
    episodes: usize,
    cfg: &EvalConfig,
    rng: &Rng,
) -> Result<EvalResult, RlError> {
    let mut env_rng = rng.derive("eval-env");
    let mut enc_rng = rng.derive("eval-encoder");
    let mut explore_rng = rng.derive("eval-exploration");
    let prep = net.prepare();
    let mut returns = Vec::with_capacity(episodes);
    let mut step = 0u64;
    for _ in 0..episodes {
        let mut obs = env.reset(&mut env_rng);
        let mut ret = 0.0;
        loop {
            let x = encode_batch(std::iter::once(&obs), cfg.encoder, cfg.window, &mut enc_rng)?;
            let (q, _) = net.forward_prepared(&prep, &x, SpikeMode::Hard)?;
            let a = select_action(q.data(), cfg.epsilon, &mut explore_rng);
            step += 1;
            let res = env.step(a).map_err(|source| RlError::Env { step, source })?;
            ret += res.reward;
            if res.terminal {
                break;
            }
            obs = res.next_obs;
        }
        returns.push(ret);
    }
    let (mean, std) = mean_std(&returns);
    Ok(EvalResult { returns, mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_env, CatchEnv, GridWorldEnv};
    use crate::neuron::NeuronModel;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn obs(v: u8) -> Arc<Observation> {
        Arc::new(Observation::new(1, 1, 2, vec![v, 255 - v]).unwrap())
    }

    fn sentinel(i: usize) -> Transition {
        Transition {
            obs: obs(0),
            action: 0,
            reward: i as f64,
            next_obs: obs(0),
            terminal: true,
        }
    }

    #[test]
    fn select_action_examples() {
        let mut rng = Rng::new(0);
        assert_eq!(select_action(&[1.0, 3.0, 2.0], 0.0, &mut rng), 1);
        assert_eq!(select_action(&[5.0, 5.0, 1.0], 0.0, &mut rng), 0);
    }

    #[test]
    fn fully_random_actions_are_uniform() {
        let mut rng = Rng::new(1);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[select_action(&[0.0, 9.0, 0.0, 0.0], 1.0, &mut rng)] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((0.24..=0.26).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn td_target_examples() {
        assert_eq!(td_target(1.0, true, 0.99, &[5.0]), 1.0);
        assert!((td_target(1.0, false, 0.99, &[0.5, 2.0, -1.0]) - 2.98).abs() < 1e-12);
        assert_eq!(td_target(0.0, false, 0.0, &[7.0, 3.0]), 0.0);
    }

    #[test]
    fn mean_std_example() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 0.8165).abs() < 1e-4);
    }

    #[test]
    fn buffer_evicts_oldest_first() {
        let mut b = ReplayBuffer::new(5);
        for i in 0..12 {
            b.push(sentinel(i));
            assert!(b.len() <= 5);
        }
        let rewards: Vec<f64> = (0..5).map(|i| b.get(i).unwrap().reward).collect();
        assert_eq!(rewards, [7.0, 8.0, 9.0, 10.0, 11.0]);
        assert!(b.sample(6, &mut Rng::new(0)).is_none());
        assert_eq!(b.sample(5, &mut Rng::new(0)).unwrap().len(), 5);
    }

    #[test]
    fn buffer_sampling_is_uniform() {
        let mut b = ReplayBuffer::new(100);
        for i in 0..100 {
            b.push(sentinel(i));
        }
        let mut rng = Rng::new(2);
        let mut counts = [0usize; 100];
        for _ in 0..1000 {
            for i in b.sample_indices(100, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let expected = 1000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(99.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
    }

    fn tiny_cfg() -> AgentConfig {
        AgentConfig {
            window: 4,
            batch_size: 4,
            buffer_capacity: 1000,
            warmup_steps: 50,
            target_sync_period: 25,
            best_window: 3,
            ..AgentConfig::default()
        }
    }

    fn tiny_net(input: [usize; 3], n_actions: usize, model: NeuronModel, seed: u64) -> SpikingNetwork<f32> {
        SpikingNetwork::init(
            Architecture::mlp(input, &[8], n_actions),
            NeuronKind::default_for(model),
            &mut Rng::new(seed),
        )
        .unwrap()
    }

    #[test]
    fn update_at_fixed_point_changes_nothing() {
        let cfg = AgentConfig {
            window: 4,
            ..tiny_cfg()
        };
        let mut net = tiny_net([1, 1, 2], 2, NeuronModel::Binary, 3);
        for l in net.layers_mut() {
            l.weight.data_mut().fill(0.0);
        }
        net.readout_bias_mut().data_mut().copy_from_slice(&[0.5, -0.25]);
        let t = Transition {
            obs: obs(9),
            action: 0,
            reward: 2.0,
            next_obs: obs(3),
            terminal: true,
        };
        let mut learner = Learner::new(net.clone(), cfg).unwrap();
        let stats = learner.train_step(&[&t, &t], &mut Rng::new(4)).unwrap();
        assert_eq!(stats.loss, 0.0);
        assert_eq!(stats.grad_norm, 0.0);
        assert_eq!(learner.online(), &net);
    }

    #[test]
    fn repeated_updates_move_q_toward_target() {
        let cfg = AgentConfig {
            learning_rate: 1e-2,
            target_sync_period: 1_000_000,
            ..tiny_cfg()
        };
        let net = tiny_net([1, 1, 2], 2, NeuronModel::TernaryAsymmetric, 5);
        let t = Transition {
            obs: obs(200),
            action: 1,
            reward: 1.5,
            next_obs: obs(10),
            terminal: true,
        };
        let mut learner = Learner::new(net, cfg).unwrap();
        let frozen = learner.target().clone();
        let mut rng = Rng::new(6);
        let losses: Vec<f64> = (0..200)
            .map(|_| learner.train_step(&[&t], &mut rng).unwrap().loss)
            .collect();
        assert_eq!(learner.target(), &frozen);
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.1 * head, "head {head} tail {tail}");
    }

    #[test]
    fn target_copies_online_on_schedule() {
        let cfg = AgentConfig {
            learning_rate: 1e-3,
            target_sync_period: 3,
            ..tiny_cfg()
        };
        let net = tiny_net([1, 1, 2], 2, NeuronModel::Binary, 7);
        let t = Transition {
            obs: obs(255),
            action: 0,
            reward: 1.0,
            next_obs: obs(0),
            terminal: false,
        };
        let mut learner = Learner::new(net, cfg).unwrap();
        let mut rng = Rng::new(8);
        let before = learner.target().clone();
        for _ in 0..2 {
            learner.train_step(&[&t], &mut rng).unwrap();
            assert_eq!(learner.target(), &before);
        }
        assert_ne!(learner.online(), &before);
        learner.train_step(&[&t], &mut rng).unwrap();
        assert_eq!(learner.target(), learner.online());
    }

    #[test]
    fn zero_steps_gives_empty_log_and_initial_network() {
        let mut env = CatchEnv::new();
        let net = SpikingNetwork::init(
            Architecture::desk([4, 24, 24], 3),
            NeuronKind::default_for(NeuronModel::Binary),
            &mut Rng::new(0),
        )
        .unwrap();
        let cfg = AgentConfig {
            total_steps: 0,
            ..AgentConfig::default()
        };
        let out = train(&mut env, net.clone(), &cfg, &Rng::new(1), &mut ()).unwrap();
        assert!(out.episodes.is_empty());
        assert_eq!(out.best, net);
    }

    fn smoke(seed: u64) -> TrainOutcome {
        let mut env = GridWorldEnv::new();
        let cfg = AgentConfig {
            total_steps: 600,
            ..tiny_cfg()
        };
        let net = build_network(
            Architecture::mlp([4, 8, 8], &[16], 4),
            NeuronKind::default_for(NeuronModel::TernaryAsymmetric),
            &Rng::new(seed),
        )
        .unwrap();
        train(&mut env, net, &cfg, &Rng::new(seed), &mut ()).unwrap()
    }

    #[test]
    fn training_log_bookkeeping_and_determinism() {
        let a = smoke(11);
        assert!(a.episodes.len() >= 6);
        for (i, w) in a.episodes.windows(2).enumerate() {
            assert!(w[1].step > w[0].step);
            assert_eq!(w[0].episode, i as u64);
        }
        assert!(a.updates > 0);
        let r = &a.episodes.last().unwrap();
        assert_eq!(r.firing_rate_by_layer.len(), 1);
        assert_eq!(r.v_th_n_by_layer.len(), 1);
        let b = smoke(11);
        assert_eq!(a.episodes, b.episodes);
        assert_eq!(a.best, b.best);
        assert_eq!(a.last, b.last);
    }

    #[test]
    fn catch_smoke_run_logs_each_episode() {
        let mut env = make_env("catch").unwrap();
        let cfg = AgentConfig {
            total_steps: 2000,
            warmup_steps: 500,
            train_every: 8,
            batch_size: 8,
            ..tiny_cfg()
        };
        let net = build_network(
            Architecture::desk([4, 24, 24], 3),
            NeuronKind::default_for(NeuronModel::Binary),
            &Rng::new(3),
        )
        .unwrap();
        let out = train(env.as_mut(), net, &cfg, &Rng::new(3), &mut ()).unwrap();
        // every Catch episode is 23 steps long
        assert_eq!(out.episodes.len(), 2000 / 23);
        assert!(out.episodes.iter().all(|e| e.ret == 1.0 || e.ret == -1.0));
        assert!(out.episodes.windows(2).all(|w| w[1].step == w[0].step + 23));
    }

    #[test]
    fn deterministic_policy_has_zero_spread() {
        let net = tiny_net([4, 8, 8], 4, NeuronModel::Binary, 12);
        let cfg = EvalConfig {
            window: 3,
            encoder: EncoderKind::Bernoulli,
            epsilon: 0.0,
        };
        let mut env = GridWorldEnv::new();
        let r = evaluate(&net, &mut env, 5, &cfg, &Rng::new(0)).unwrap();
        assert_eq!(r.returns.len(), 5);
        assert_eq!(r.std, 0.0);
        let again = evaluate(&net, &mut env, 5, &cfg, &Rng::new(0)).unwrap();
        assert_eq!(r, again);
    }
}
