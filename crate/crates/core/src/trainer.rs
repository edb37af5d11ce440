//! Deep Q-learning over session MDPs (DQN, double and dueling variants) and
//! the supervised regression baseline.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionSpace, Environment, RT_MAX, RT_MIN};
use crate::error::{Error, Result};
use crate::eval::{build_report, Mode};
use crate::model::{ForwardCache, Network, NetworkConfig, Variant};
use crate::numerics::ops::squared_error_loss;
use crate::numerics::{RmsProp, Scalar, Tensor};
use crate::preproc::{PreparedSession, SegmentState};
use crate::replay::{ReplayQueue, Transition};

/// Largest batch pushed through the network at once during inference.
const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlTrainConfig {
    pub variant: Variant,
    pub episodes: usize,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the expected total steps over which epsilon decays.
    pub epsilon_decay_fraction: f64,
    pub batch_size: usize,
    pub target_sync_interval: usize,
    pub beta: f64,
    pub initial_trt: f64,
    pub learning_rate: f64,
    pub replay_capacity: usize,
    /// Environment steps per gradient step once the replay is warm.
    pub train_interval: usize,
    /// Greedy validation rollout every this many episodes (and at the end).
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for RlTrainConfig {
    fn default() -> Self {
        RlTrainConfig {
            variant: Variant::Dueling,
            episodes: 2000,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_decay_fraction: 0.5,
            batch_size: 32,
            target_sync_interval: 500,
            beta: 0.75,
            initial_trt: 1.0,
            learning_rate: 2.5e-4,
            replay_capacity: crate::replay::DEFAULT_CAPACITY,
            train_interval: 1,
            validate_every: 10,
            seed: 0,
        }
    }
}

impl RlTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !self.variant.is_rl() {
            return bad(format!("RL training needs an RL variant, got {}", self.variant));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        let eps_ok = (0.0..=1.0).contains(&self.epsilon_start)
            && (0.0..=1.0).contains(&self.epsilon_end)
            && self.epsilon_end <= self.epsilon_start
            && self.epsilon_decay_fraction > 0.0;
        if !eps_ok {
            return bad("epsilon schedule must satisfy 0 <= end <= start <= 1 and decay fraction > 0".into());
        }
        if self.episodes == 0
            || self.batch_size == 0
            || self.target_sync_interval == 0
            || self.train_interval == 0
            || self.validate_every == 0
        {
            return bad("episodes, batch size and all intervals must be positive".into());
        }
        if self.replay_capacity < self.batch_size {
            return bad("replay capacity must hold at least one batch".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive".into());
        }
        Ok(())
    }
}

/// Linear decay from `start` to `end` over `decay_steps`, then flat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: usize,
}

impl EpsilonSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        self.start + (self.end - self.start) * step as f64 / self.decay_steps as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlTrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SlTrainConfig {
    fn default() -> Self {
        SlTrainConfig {
            iterations: 600,
            learning_rate: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl SlTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "iterations, batch size and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Bootstrapped action values at the next state.
#[derive(Clone, Copy, Debug)]
pub struct NextQ<'a> {
    pub target: &'a [f64],
    /// Online-network values, used by the double variant to pick the action.
    pub online: Option<&'a [f64]>,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `y = r` at episode end; otherwise `r + gamma * max_a Q_target(s', a)`, or
/// for the double variant `r + gamma * Q_target(s', argmax_a Q_online(s', a))`.
pub fn compute_td_target(reward: f64, next: Option<NextQ<'_>>, gamma: f64, variant: Variant) -> Result<f64> {
    let Some(next) = next else {
        if !variant.is_rl() {
            return Err(Error::InvalidArgument("TD targets need an RL variant".into()));
        }
        return Ok(reward);
    };
    if next.target.is_empty() {
        return Err(Error::InvalidArgument("empty next-state action values".into()));
    }
    let bootstrap = match variant {
        Variant::Supervised => return Err(Error::InvalidArgument("TD targets need an RL variant".into())),
        Variant::Dqn | Variant::Dueling => next.target.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Variant::Double => {
            let online = next.online.ok_or_else(|| {
                Error::InvalidArgument("double targets need online next-state values".into())
            })?;
            if online.len() != next.target.len() {
                return Err(Error::InvalidArgument("online and target value counts differ".into()));
            }
            next.target[argmax(online)]
        }
    };
    Ok(reward + gamma * bootstrap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub avg_return: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub episodes: Vec<EpisodeRecord>,
    /// Loss of every gradient step (RL) or iteration (SL).
    pub losses: Vec<f64>,
    /// `(episode, correlation)` of each validation rollout.
    pub validation: Vec<(usize, Option<f64>)>,
    pub best_episode: Option<usize>,
}

impl TrainLog {
    fn record_episode(&mut self, episode_return: f64) {
        let k = self.episodes.len() + 1;
        let total: f64 = self.episodes.iter().map(|e| e.episode_return).sum::<f64>() + episode_return;
        self.episodes.push(EpisodeRecord {
            episode: k,
            episode_return,
            avg_return: total / k as f64,
        });
    }

    /// `<dir>/episodes.csv`, `<dir>/losses.csv` and `<dir>/summary.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("episodes.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        w.write_record(["episode", "return", "avg_return"])
            .map_err(|e| Error::format(&path, e.to_string()))?;
        for e in &self.episodes {
            w.write_record([e.episode.to_string(), e.episode_return.to_string(), e.avg_return.to_string()])
                .map_err(|e| Error::format(&path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("losses.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        w.write_record(["step", "loss"]).map_err(|e| Error::format(&path, e.to_string()))?;
        for (i, l) in self.losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), l.to_string()])
                .map_err(|e| Error::format(&path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("summary.json");
        let summary = serde_json::json!({
            "episodes": self.episodes.len(),
            "final_return": self.episodes.last().map(|e| e.episode_return),
            "final_avg_return": self.episodes.last().map(|e| e.avg_return),
            "gradient_steps": self.losses.len(),
            "final_loss": self.losses.last(),
            "validation": self.validation,
            "best_episode": self.best_episode,
        });
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn forward_chunked<T: Scalar>(net: &Network<T>, segments: &[Arc<SegmentState>]) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(INFERENCE_CHUNK) {
        let refs: Vec<&SegmentState> = chunk.iter().map(|s| s.as_ref()).collect();
        let out = net.forward(&refs)?;
        let width = out.shape()[1];
        rows.extend(out.data().chunks(width).map(|r| r.iter().map(|v| v.as_f64()).collect()));
    }
    Ok(rows)
}

/// Greedy action for every segment. States do not depend on the tracer, so
/// the whole session is evaluated in batches.
pub fn greedy_actions<T: Scalar>(net: &Network<T>, segments: &[Arc<SegmentState>]) -> Result<Vec<usize>> {
    if !net.variant().is_rl() {
        return Err(Error::InvalidArgument(format!(
            "greedy actions need an RL network, got {}",
            net.variant()
        )));
    }
    Ok(forward_chunked(net, segments)?.iter().map(|q| argmax(q)).collect())
}

/// Traced RT after each segment under the greedy policy (epsilon = 0).
pub fn greedy_rollout<T: Scalar>(
    net: &Network<T>,
    segments: &[Arc<SegmentState>],
    actions: &ActionSpace,
    beta: f64,
    initial_trt: f64,
) -> Result<Vec<f64>> {
    if net.config.n_actions != actions.len() {
        return Err(Error::InvalidArgument(format!(
            "network has {} actions, action space {}",
            net.config.n_actions,
            actions.len()
        )));
    }
    let chosen = greedy_actions(net, segments)?;
    let mut env = Environment::new(actions.clone());
    env.reset(segments, beta, initial_trt)?;
    chosen.iter().map(|&a| Ok(env.step(a)?.traced_rt)).collect()
}

/// Clipped supervised prediction for every segment.
pub fn predict_segments<T: Scalar>(net: &Network<T>, segments: &[Arc<SegmentState>]) -> Result<Vec<f64>> {
    if net.variant() != Variant::Supervised {
        return Err(Error::InvalidArgument(format!(
            "RT regression needs the supervised network, got {}",
            net.variant()
        )));
    }
    Ok(forward_chunked(net, segments)?
        .into_iter()
        .map(|r| r[0].clamp(RT_MIN, RT_MAX))
        .collect())
}

/// Networks and log from an RL run.
#[derive(Clone, Debug)]
pub struct RlOutcome<T> {
    pub final_net: Network<T>,
    /// Network at the best validation rollout (the final one without a
    /// validation session).
    pub best_net: Network<T>,
    pub log: TrainLog,
}

fn check_finite(value: f64, what: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Diverged(format!("{what} became {value}")));
    }
    Ok(())
}

/// Mean squared TD error over the taken actions of a replay batch, with
/// targets from the frozen `target` network (and, for the double variant,
/// the online argmax). Returns the loss without L2 terms, the forward cache
/// of the online network and the loss gradient with respect to its output.
pub fn td_batch_loss<T: Scalar>(
    online: &Network<T>,
    target: &Network<T>,
    batch: &[&Transition],
    gamma: f64,
) -> Result<(f64, ForwardCache<T>, Tensor<T>)> {
    let variant = online.variant();
    let b = batch.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty replay batch".into()));
    }
    let states: Vec<&SegmentState> = batch.iter().map(|t| t.state.as_ref()).collect();
    let cache = online.forward_train(online.batch_input(&states)?)?;
    let n_actions = cache.output().shape()[1];

    let next_states: Vec<&SegmentState> = batch.iter().filter_map(|t| t.next_state.as_deref()).collect();
    let to_f64 = |t: Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
    let (target_q, online_q) = if next_states.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let oq = match variant {
            Variant::Double => to_f64(online.forward(&next_states)?),
            _ => Vec::new(),
        };
        (to_f64(target.forward(&next_states)?), oq)
    };

    let q = cache.output().data();
    let mut grad = vec![T::zero(); b * n_actions];
    let mut loss = 0.0;
    let mut live_row = 0;
    for (i, t) in batch.iter().enumerate() {
        if t.action >= n_actions {
            return Err(Error::InvalidArgument(format!("action {} out of range", t.action)));
        }
        let next = if t.next_state.is_some() {
            let r = live_row * n_actions..(live_row + 1) * n_actions;
            live_row += 1;
            Some(NextQ {
                target: &target_q[r.clone()],
                online: online_q.get(r),
            })
        } else {
            None
        };
        let y = compute_td_target(t.reward, next, gamma, variant)?;
        let diff = q[i * n_actions + t.action].as_f64() - y;
        loss += diff * diff / b as f64;
        grad[i * n_actions + t.action] = T::from_f64_lossy(2.0 * diff / b as f64);
    }
    let grad = Tensor::from_vec(&[b, n_actions], grad)?;
    Ok((loss, cache, grad))
}

struct Learner<T> {
    online: Network<T>,
    target: Network<T>,
    optimizer: RmsProp<T>,
    gamma: f64,
}

impl<T: Scalar> Learner<T> {
    /// One gradient step on a replay batch; returns the loss.
    fn learn(&mut self, batch: &[&Transition]) -> Result<f64> {
        let (td, cache, grad) = td_batch_loss(&self.online, &self.target, batch, self.gamma)?;
        let loss = td + self.online.params.l2_penalty().as_f64();
        check_finite(loss, "TD loss")?;
        self.online.params.zero_grad();
        self.online.backward(&cache, &grad)?;
        self.optimizer.step(&mut self.online.params.iter_mut())?;
        Ok(loss)
    }
}

fn validation_score<T: Scalar>(
    net: &Network<T>,
    session: &PreparedSession,
    actions: &ActionSpace,
    cfg: &RlTrainConfig,
) -> Result<Option<f64>> {
    let traced = greedy_rollout(net, &session.segments, actions, cfg.beta, cfg.initial_trt)?;
    Ok(build_report(Mode::Rl, session, &traced)?.correlation)
}

/// Q-learning with epsilon-greedy acting, uniform replay and a periodically
/// synchronised target network. Each episode is one full pass over a
/// training session drawn uniformly at random.
pub fn train_rl<T: Scalar>(
    train: &[PreparedSession],
    validation: Option<&PreparedSession>,
    actions: &ActionSpace,
    network: &NetworkConfig,
    cfg: &RlTrainConfig,
) -> Result<RlOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || train.iter().any(|s| s.segments.is_empty()) {
        return Err(Error::InvalidArgument("RL training needs at least one non-empty session".into()));
    }
    let net_cfg = NetworkConfig {
        variant: cfg.variant,
        n_actions: actions.len(),
        ..network.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let online = Network::<T>::new(net_cfg, &mut rng)?;
    let mut learner = Learner {
        target: online.snapshot(),
        online,
        optimizer: RmsProp::new(cfg.learning_rate),
        gamma: cfg.gamma,
    };
    let mean_len = train.iter().map(|s| s.segments.len()).sum::<usize>() as f64 / train.len() as f64;
    let schedule = EpsilonSchedule {
        start: cfg.epsilon_start,
        end: cfg.epsilon_end,
        decay_steps: (cfg.epsilon_decay_fraction * cfg.episodes as f64 * mean_len).round() as usize,
    };
    let mut replay = ReplayQueue::new(cfg.replay_capacity)?;
    let mut env = Environment::new(actions.clone());
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Network<T>)> = None;
    let mut step = 0usize;

    for episode in 1..=cfg.episodes {
        let session = &train[rng.gen_range(0..train.len())];
        let mut state = env.reset(&session.segments, cfg.beta, cfg.initial_trt)?;
        let mut episode_return = 0.0;
        loop {
            let action = if rng.gen::<f64>() < schedule.at(step) {
                rng.gen_range(0..actions.len())
            } else {
                let q = learner.online.forward(&[state.as_ref()])?;
                argmax(&q.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>())
            };
            let result = env.step(action)?;
            episode_return += result.reward;
            replay.push(Transition {
                state: Arc::clone(&state),
                action,
                reward: result.reward,
                next_state: result.next_state.clone(),
            });
            step += 1;

            if replay.len() >= cfg.batch_size && step % cfg.train_interval == 0 {
                let mut batch = replay.sample(cfg.batch_size, &mut rng)?;
                let frames = replay.resolve(&mut batch, &mut rng)?;
                let transitions: Vec<&Transition> = frames.iter().map(|f| &f.payload).collect();
                log.losses.push(learner.learn(&transitions)?);
            }
            if step % cfg.target_sync_interval == 0 {
                learner.target.sync_from(&learner.online);
            }
            match result.next_state {
                Some(next) => state = next,
                None => break,
            }
        }
        log.record_episode(episode_return);

        if let Some(val) = validation {
            if episode % cfg.validate_every == 0 || episode == cfg.episodes {
                let score = validation_score(&learner.online, val, actions, cfg)?;
                log.validation.push((episode, score));
                if let Some(r) = score {
                    if best.as_ref().map_or(true, |(b, _)| r > *b) {
                        best = Some((r, learner.online.snapshot()));
                        log.best_episode = Some(episode);
                    }
                }
            }
        }
    }

    let final_net = learner.online.snapshot();
    let best_net = match best {
        Some((_, net)) => net,
        None => {
            log.best_episode = Some(cfg.episodes);
            final_net.clone()
        }
    };
    Ok(RlOutcome {
        final_net,
        best_net,
        log,
    })
}

/// Regression of smoothed RT on the 3 s pre-event windows.
pub fn train_supervised<T: Scalar>(
    trials: &[&SegmentState],
    network: &NetworkConfig,
    cfg: &SlTrainConfig,
) -> Result<(Network<T>, TrainLog)> {
    cfg.validate()?;
    if trials.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} trials are fewer than the batch size {}",
            trials.len(),
            cfg.batch_size
        )));
    }
    if let Some(i) = trials.iter().position(|t| t.measured_rt.is_none()) {
        return Err(Error::InvalidArgument(format!("trial {i} has no RT label")));
    }
    let net_cfg = NetworkConfig {
        variant: Variant::Supervised,
        ..network.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::<T>::new(net_cfg, &mut rng)?;
    let mut optimizer = RmsProp::new(cfg.learning_rate);
    let mut log = TrainLog::default();
    for _ in 0..cfg.iterations {
        let picked = sample(&mut rng, trials.len(), cfg.batch_size).into_vec();
        let batch: Vec<&SegmentState> = picked.iter().map(|&i| trials[i]).collect();
        let labels: Vec<T> = batch
            .iter()
            .map(|t| T::from_f64_lossy(t.measured_rt.expect("checked")))
            .collect();
        let cache = net.forward_train(net.batch_input(&batch)?)?;
        let target = Tensor::from_vec(&[batch.len(), 1], labels)?;
        let (mse, grad) = squared_error_loss(cache.output(), &target)?;
        let loss = mse.as_f64() + net.params.l2_penalty().as_f64();
        check_finite(loss, "regression loss")?;
        net.params.zero_grad();
        net.backward(&cache, &grad)?;
        optimizer.step(&mut net.params.iter_mut())?;
        log.losses.push(loss);
    }
    net.params.zero_grad();
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TracerState;

    #[test]
    fn td_target_examples() {
        let target = [0.2, 1.0, -0.4];
        let y = compute_td_target(-0.5, Some(NextQ { target: &target, online: None }), 0.99, Variant::Dqn).unwrap();
        assert!((y - 0.49).abs() < 1e-12);
        assert_eq!(compute_td_target(-0.3, None, 0.99, Variant::Dueling).unwrap(), -0.3);
        let next = NextQ {
            target: &[0.7, 0.3],
            online: Some(&[0.1, 0.9]),
        };
        assert!((compute_td_target(0.0, Some(next), 0.99, Variant::Double).unwrap() - 0.297).abs() < 1e-12);
        assert_eq!(
            compute_td_target(1.5, Some(NextQ { target: &target, online: None }), 0.0, Variant::Dqn).unwrap(),
            1.5
        );
        assert!(compute_td_target(0.0, Some(NextQ { target: &target, online: None }), 0.9, Variant::Double).is_err());
        assert!(compute_td_target(0.0, None, 0.9, Variant::Supervised).is_err());
    }

    #[test]
    fn epsilon_schedule_is_monotone() {
        let s = EpsilonSchedule {
            start: 1.0,
            end: 0.1,
            decay_steps: 100,
        };
        assert_eq!(s.at(0), 1.0);
        assert!((s.at(50) - 0.55).abs() < 1e-12);
        assert_eq!(s.at(100), 0.1);
        assert_eq!(s.at(10_000), 0.1);
        assert!((0..200).all(|i| s.at(i + 1) <= s.at(i)));
    }

    #[test]
    fn average_return_is_running_mean() {
        let mut log = TrainLog::default();
        for r in [-3.0, -1.0, -2.0] {
            log.record_episode(r);
        }
        assert_eq!(log.episodes[2].avg_return, -2.0);
        assert_eq!(log.episodes[1].avg_return, -2.0);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RlTrainConfig { variant: Variant::Supervised, ..Default::default() }.validate().is_err());
        assert!(RlTrainConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(SlTrainConfig { iterations: 0, ..Default::default() }.validate().is_err());
    }

    // Tracer state is exercised through the environment; this keeps the
    // trainer's view of it consistent.
    #[test]
    fn tracer_constant_policy_approaches_proposal() {
        let mut t = TracerState::new(1.0, 0.5).unwrap();
        for _ in 0..60 {
            t.update(4.0);
        }
        assert!((t.traced_rt - 4.0).abs() < 1e-12);
    }
}
