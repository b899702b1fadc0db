//! Deep Q-learning: replay memory, target network, modified ε-greedy
//! exploration and the temporal-difference update. The trainer is
//! generic over [`QEnvironment`] so the same loop drives both the
//! lesion search and small hand-built environments in tests.

pub mod detector;

pub use detector::{detect, train_detector, Detection, DetectorEpochLog, DetectorTrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{selected_squared_error, AdamState, Network};
use crate::tensor::Array;

/// An episodic environment exposing embedded observations.
pub trait QEnvironment {
    /// Number of discrete actions.
    fn actions(&self) -> usize;
    /// Embedding of the current state.
    fn observe(&self) -> Result<Vec<f32>>;
    /// One-step reward of every action from the current state, without
    /// moving; drives the guided exploration branch.
    fn peek_rewards(&self) -> Vec<f64>;
    /// Applies an action; returns its reward and whether the episode is
    /// over (terminal action or step cap).
    fn step(&mut self, action: usize) -> Result<(f64, bool)>;
    fn is_done(&self) -> bool;
}

/// One transition.
#[derive(Clone, Debug)]
pub struct ExperienceTuple {
    pub obs: Vec<f32>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f32>,
    /// Set when the episode ended here (trigger or step cap); terminal
    /// tuples do not bootstrap.
    pub terminal: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
pub struct ReplayBuffer {
    items: Vec<ExperienceTuple>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { items: Vec::new(), capacity, cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends, overwriting the oldest tuple once full.
    pub fn push(&mut self, e: ExperienceTuple) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.cursor] = e;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Vec<&ExperienceTuple> {
        (0..batch).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}

/// Linear exploration schedule with the guided/uniform mix κ.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    /// Epochs over which ε decays from `start` to `end`.
    pub horizon: usize,
    /// Probability of plain uniform exploration inside the ε branch;
    /// with probability 1−κ the agent explores among actions whose
    /// one-step reward is positive.
    pub kappa: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule { start: 1.0, end: 0.1, horizon: 300, kappa: 0.5 }
    }
}

impl EpsilonSchedule {
    pub fn epsilon(&self, epoch: usize) -> f64 {
        if self.horizon == 0 || epoch >= self.horizon {
            self.end
        } else {
            self.start + (self.end - self.start) * epoch as f64 / self.horizon as f64
        }
    }
}

/// Index of the largest entry; ties resolve to the lowest index, which
/// keeps greedy inference deterministic.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// The modified ε-greedy rule: exploit the Q-values with probability
/// 1−ε; otherwise explore uniformly (probability κ) or uniformly among
/// positive-reward actions (probability 1−κ, falling back to uniform
/// when no action has positive reward). `peek` is only invoked when the
/// guided branch is taken.
pub fn select_action(
    q: &[f32],
    peek: impl FnOnce() -> Vec<f64>,
    epsilon: f64,
    kappa: f64,
    rng: &mut impl Rng,
) -> usize {
    if rng.gen_range(0.0..1.0) >= epsilon {
        return argmax(q);
    }
    if rng.gen_range(0.0..1.0) < kappa {
        return rng.gen_range(0..q.len());
    }
    let rewards = peek();
    let positive: Vec<usize> = rewards
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > 0.0)
        .map(|(i, _)| i)
        .collect();
    if positive.is_empty() {
        rng.gen_range(0..q.len())
    } else {
        positive[rng.gen_range(0..positive.len())]
    }
}

/// Bellman targets for a batch: `r` for terminal tuples, otherwise
/// `r + γ·max_a′ Q(o′, a′; θ⁻)` with `q_next` evaluated on the target
/// parameters.
pub fn td_targets(batch: &[&ExperienceTuple], q_next: &Array<f32>, gamma: f64) -> Result<Vec<f32>> {
    let s = q_next.shape();
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty TD batch".into()));
    }
    if s.len() != 2 || s[0] != batch.len() {
        return Err(Error::InvalidArgument(format!(
            "next-state Q-values {s:?} incompatible with batch of {}",
            batch.len()
        )));
    }
    let k = s[1];
    let qv = q_next.values();
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if e.terminal {
                e.reward as f32
            } else {
                let row = &qv[i * k..(i + 1) * k];
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                (e.reward + gamma * max as f64) as f32
            }
        })
        .collect())
}

/// Q-learning optimization knobs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QLearnConfig {
    pub gamma: f64,
    pub batch: usize,
    pub lr: f64,
    pub capacity: usize,
    /// Replay size below which updates are skipped.
    pub warmup: usize,
    /// TD updates after each environment step.
    pub updates_per_step: usize,
}

impl Default for QLearnConfig {
    fn default() -> Self {
        QLearnConfig {
            gamma: 0.9,
            batch: 100,
            lr: 1e-4,
            capacity: 10_000,
            warmup: 100,
            updates_per_step: 1,
        }
    }
}

/// Per-episode bookkeeping.
#[derive(Clone, Copy, Debug, Default)]
pub struct EpisodeStats {
    pub steps: usize,
    pub total_reward: f64,
    pub triggered: bool,
    pub mean_loss: f64,
    pub updates: usize,
}

/// Q-network, its target copy, replay memory and optimizer.
pub struct QTrainer {
    pub head: Network<f32>,
    target: Network<f32>,
    pub replay: ReplayBuffer,
    adam: AdamState<f32>,
    pub cfg: QLearnConfig,
}

impl QTrainer {
    pub fn new(head: Network<f32>, cfg: QLearnConfig) -> Self {
        let mut target = Network::from_parts(head.spec.clone(), head.params.clone());
        target.set_train(false);
        QTrainer { head, target, replay: ReplayBuffer::new(cfg.capacity), adam: AdamState::new(), cfg }
    }

    /// θ⁻ ← θ, bit-exact.
    pub fn sync_target(&mut self) {
        self.target.params.copy_values_from(&self.head.params).expect("same spec");
    }

    pub fn target_params(&self) -> &crate::nn::ParameterSet<f32> {
        &self.target.params
    }

    /// Q-values of one observation under the online parameters.
    pub fn q_values(&self, obs: &[f32]) -> Result<Vec<f32>> {
        let input = Array::from_vec(&[1, obs.len()], obs.to_vec())?;
        let pass = self.head.evaluate(&input)?;
        Ok(pass.output().values().to_vec())
    }

    /// One TD step on a uniform replay batch; returns the loss.
    pub fn td_update(&mut self, rng: &mut impl Rng) -> Result<f64> {
        if self.replay.is_empty() {
            return Err(Error::InvalidArgument("empty TD batch".into()));
        }
        let batch = self.replay.sample(self.cfg.batch, rng);
        let dim = batch[0].obs.len();
        let mut obs = Vec::with_capacity(batch.len() * dim);
        let mut next = Vec::with_capacity(batch.len() * dim);
        let mut actions = Vec::with_capacity(batch.len());
        for e in &batch {
            obs.extend_from_slice(&e.obs);
            next.extend_from_slice(&e.next_obs);
            actions.push(e.action);
        }
        let obs = Array::from_vec(&[batch.len(), dim], obs)?;
        let next = Array::from_vec(&[batch.len(), dim], next)?;
        let q_next = self.target.evaluate(&next)?;
        let targets = td_targets(&batch, q_next.output(), self.cfg.gamma)?;

        self.head.zero_grads();
        let pass = self.head.forward(&obs)?;
        let (loss, dq) = selected_squared_error(pass.output(), &actions, &targets)?;
        self.head.backward(&dq)?;
        self.adam.step(&mut self.head.params, self.cfg.lr, |_| true)?;
        Ok(f64::from(loss))
    }

    /// Runs one ε-greedy episode, storing every transition and applying
    /// TD updates along the way.
    pub fn run_episode(
        &mut self,
        env: &mut dyn QEnvironment,
        epsilon: f64,
        kappa: f64,
        rng: &mut impl Rng,
    ) -> Result<EpisodeStats> {
        let mut stats = EpisodeStats::default();
        let mut obs = env.observe()?;
        let mut loss_sum = 0.0;
        while !env.is_done() {
            let q = self.q_values(&obs)?;
            let action = select_action(&q, || env.peek_rewards(), epsilon, kappa, rng);
            let (reward, done) = env.step(action)?;
            let next_obs = env.observe()?;
            self.replay.push(ExperienceTuple {
                obs: std::mem::take(&mut obs),
                action,
                reward,
                next_obs: next_obs.clone(),
                terminal: done,
            });
            obs = next_obs;
            stats.steps += 1;
            stats.total_reward += reward;
            if done && reward > 0.0 {
                stats.triggered = true;
            }
            if self.replay.len() >= self.cfg.warmup.max(1) {
                for _ in 0..self.cfg.updates_per_step {
                    loss_sum += self.td_update(rng)?;
                    stats.updates += 1;
                }
            }
        }
        if stats.updates > 0 {
            stats.mean_loss = loss_sum / stats.updates as f64;
        }
        Ok(stats)
    }

    /// Greedy rollout (ε = 0); returns the visited action sequence.
    pub fn greedy_rollout(&self, env: &mut dyn QEnvironment) -> Result<Vec<usize>> {
        let mut actions = Vec::new();
        while !env.is_done() {
            let q = self.q_values(&env.observe()?)?;
            let a = argmax(&q);
            env.step(a)?;
            actions.push(a);
        }
        Ok(actions)
    }
}

/// Deterministic RNG for the training loops.
pub fn trainer_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::presets::dqn_head;

    fn tuple(reward: f64, terminal: bool) -> ExperienceTuple {
        ExperienceTuple { obs: vec![0.0; 3], action: 0, reward, next_obs: vec![0.0; 3], terminal }
    }

    #[test]
    fn replay_ring_never_exceeds_capacity() {
        let mut buf = ReplayBuffer::new(5);
        for i in 0..12 {
            buf.push(tuple(i as f64, false));
        }
        assert_eq!(buf.len(), 5);
        let held: Vec<f64> = buf.items.iter().map(|e| e.reward).collect();
        // Oldest tuples were overwritten in ring order.
        assert_eq!(held, vec![10.0, 11.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn epsilon_decays_linearly_then_holds() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.epsilon(0), 1.0);
        assert!((s.epsilon(150) - 0.55).abs() < 1e-12);
        assert_eq!(s.epsilon(300), 0.1);
        assert_eq!(s.epsilon(1000), 0.1);
    }

    #[test]
    fn td_targets_follow_the_bellman_rule() {
        let a = tuple(10.0, true);
        let b = tuple(1.0, false);
        let batch = vec![&a, &b];
        let q_next =
            Array::from_vec(&[2, 3], vec![5.0, 9.0, 1.0, 2.0, 0.5, 1.5]).unwrap();
        let t = td_targets(&batch, &q_next, 0.9).unwrap();
        assert_eq!(t[0], 10.0, "terminal: no bootstrap term");
        assert!((t[1] - 2.8).abs() < 1e-6, "r + gamma * max = 1 + 0.9 * 2");
    }

    #[test]
    fn exploitation_picks_the_argmax() {
        let mut rng = trainer_rng(0);
        let q = vec![0.1, 0.9, 0.3];
        for _ in 0..20 {
            assert_eq!(select_action(&q, Vec::new, 0.0, 0.5, &mut rng), 1);
        }
    }

    #[test]
    fn full_uniform_exploration_is_uniform() {
        let mut rng = trainer_rng(1);
        let q = vec![0.0; 9];
        let n = 10_000;
        let mut counts = [0usize; 9];
        for _ in 0..n {
            counts[select_action(&q, Vec::new, 1.0, 1.0, &mut rng)] += 1;
        }
        // Chi-square against uniform, 8 dof; 26.12 is the 0.1% cut.
        let expected = n as f64 / 9.0;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 26.12, "chi-square {chi2:.2} too large for uniform draws");
    }

    #[test]
    fn guided_exploration_prefers_positive_reward_actions() {
        let mut rng = trainer_rng(2);
        let q = vec![0.0; 9];
        let rewards = vec![1.0, -1.0, -1.0, 0.0, -1.0, -1.0, -1.0, -1.0, -10.0];
        for _ in 0..50 {
            assert_eq!(select_action(&q, || rewards.clone(), 1.0, 0.0, &mut rng), 0);
        }
    }

    #[test]
    fn guided_exploration_falls_back_to_uniform() {
        let mut rng = trainer_rng(3);
        let q = vec![0.0; 4];
        let rewards = vec![-1.0, 0.0, -1.0, 0.0];
        let mut seen = [false; 4];
        for _ in 0..200 {
            seen[select_action(&q, || rewards.clone(), 1.0, 0.0, &mut rng)] = true;
        }
        assert_eq!(seen, [true; 4]);
    }

    #[test]
    fn target_sync_is_bit_exact() {
        let mut rng = trainer_rng(4);
        let head = Network::<f32>::init(dqn_head(6, 8, 4), &mut rng).unwrap();
        let mut trainer = QTrainer::new(head, QLearnConfig { warmup: 1, batch: 4, ..QLearnConfig::default() });
        for i in 0..8 {
            trainer.replay.push(ExperienceTuple {
                obs: vec![0.1 * i as f32; 6],
                action: i % 4,
                reward: 1.0,
                next_obs: vec![0.1 * (i + 1) as f32; 6],
                terminal: i % 3 == 0,
            });
        }
        for _ in 0..3 {
            trainer.td_update(&mut rng).unwrap();
        }
        let before_sync: Vec<f32> = trainer
            .target_params()
            .iter()
            .flat_map(|(_, a)| a.values().to_vec())
            .collect();
        let online: Vec<f32> =
            trainer.head.params.iter().flat_map(|(_, a)| a.values().to_vec()).collect();
        assert_ne!(before_sync, online, "online parameters moved away from the target");
        trainer.sync_target();
        let after: Vec<f32> = trainer
            .target_params()
            .iter()
            .flat_map(|(_, a)| a.values().to_vec())
            .collect();
        assert_eq!(after, online, "sync copies bit-exactly");
    }

    #[test]
    fn q_values_match_a_hand_forward_on_a_toy_head() {
        use crate::nn::SpecBuilder;
        use crate::tensor::Array;

        // 3-dim embedding, hidden 2, two actions; weights set by hand.
        let (mut b, x) = SpecBuilder::new(vec![3]);
        let h = b.linear(x, "fc1", 2);
        let r = b.relu(h);
        let o = b.linear(r, "out", 2);
        let spec = b.finish(o);
        let mut rng = trainer_rng(5);
        let mut net = Network::<f32>::init(spec, &mut rng).unwrap();
        let w1 = vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5];
        let b1 = vec![0.0, -0.25];
        let w2 = vec![1.0, 2.0, -1.0, 1.0];
        let b2 = vec![0.1, -0.1];
        net.params.get_mut("fc1.weight").unwrap().values_mut().copy_from_slice(&w1);
        net.params.get_mut("fc1.bias").unwrap().values_mut().copy_from_slice(&b1);
        net.params.get_mut("out.weight").unwrap().values_mut().copy_from_slice(&w2);
        net.params.get_mut("out.bias").unwrap().values_mut().copy_from_slice(&b2);
        net.set_train(false);

        let obs = [0.2f32, 0.4, 0.6];
        // Hidden: relu([0.2*1 + 0.6*(-1), 0.1+0.2+0.3 - 0.25]) = [0, 0.35].
        // Out: [0.1 + 2*0.35, -0.1 + 1*0.35] = [0.8, 0.25].
        let pass = net.evaluate(&Array::from_vec(&[1, 3], obs.to_vec()).unwrap()).unwrap();
        let q = pass.output().values();
        assert!((q[0] - 0.8).abs() < 1e-6);
        assert!((q[1] - 0.25).abs() < 1e-6);
    }
}
