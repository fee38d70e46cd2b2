//! The risk-aware decision maker: a two-layer Q-network over the turn
//! state, reward targets for the three interaction outcomes, an experience
//! replay buffer with ask-oversampling and zero-reward filtering, and the
//! reinforcement-learning training loop.

use std::collections::VecDeque;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Conversation;
use crate::neural::{backward_and_step, DenseNet, LossSpec, TrainingConfig};
use crate::simulate::{run_episode_prepared, DqnDecider, EpisodeEnv, PreparedConversation, UserModel};
use crate::{Error, Result};

/// Which parts of the turn state feed the decision network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    EncodedText,
    Score,
    Both,
}

/// Everything the decision maker sees at one turn: query and history
/// encodings, the top-k question/answer encodings, and their scores.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionState {
    pub query: Vec<f64>,
    pub history: Vec<f64>,
    pub question_encodings: Vec<Vec<f64>>,
    pub answer_encodings: Vec<Vec<f64>>,
    pub question_scores: Vec<f64>,
    pub answer_scores: Vec<f64>,
}

impl DecisionState {
    pub fn k(&self) -> usize {
        self.question_scores.len()
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }

    /// Feature vector length for a given mode, dimension, and k.
    pub fn feature_len(mode: FeatureMode, dim: usize, k: usize) -> usize {
        match mode {
            FeatureMode::EncodedText => (2 + 2 * k) * dim,
            FeatureMode::Score => 2 * k,
            FeatureMode::Both => (2 + 2 * k) * dim + 2 * k,
        }
    }

    /// Concatenated feature vector: query, history, question encodings,
    /// answer encodings, question scores, answer scores — restricted to
    /// the selected mode.
    pub fn features(&self, mode: FeatureMode) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::feature_len(mode, self.dim(), self.k()));
        if mode != FeatureMode::Score {
            out.extend_from_slice(&self.query);
            out.extend_from_slice(&self.history);
            for q in &self.question_encodings {
                out.extend_from_slice(q);
            }
            for a in &self.answer_encodings {
                out.extend_from_slice(a);
            }
        }
        if mode != FeatureMode::EncodedText {
            out.extend_from_slice(&self.question_scores);
            out.extend_from_slice(&self.answer_scores);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentAction {
    Answer,
    Ask,
}

impl AgentAction {
    /// Output index in the decision vector (answer first).
    pub fn index(self) -> usize {
        match self {
            AgentAction::Answer => 0,
            AgentAction::Ask => 1,
        }
    }
}

/// Greedy action from the two predicted rewards; ties answer.
pub fn greedy_choice(r_ans: f64, r_cq: f64) -> AgentAction {
    if r_ans >= r_cq {
        AgentAction::Answer
    } else {
        AgentAction::Ask
    }
}

/// The decision vector: predicted rewards for answering and asking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionValue {
    pub r_ans_pred: f64,
    pub r_cq_pred: f64,
    pub chosen: AgentAction,
}

/// Forward pass of the decision network on a state.
pub fn predict(net: &DenseNet, state: &DecisionState, mode: FeatureMode) -> Result<ActionValue> {
    let out = net.forward(&state.features(mode))?;
    if out.len() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, actual: out.len() });
    }
    Ok(ActionValue { r_ans_pred: out[0], r_cq_pred: out[1], chosen: greedy_choice(out[0], out[1]) })
}

/// Epsilon-greedy action selection.
pub fn explore_or_exploit(
    net: &DenseNet,
    state: &DecisionState,
    mode: FeatureMode,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<AgentAction> {
    assert!((0.0..=1.0).contains(&epsilon), "epsilon must be a probability");
    if rng.gen::<f64>() < epsilon {
        Ok(if rng.gen::<bool>() { AgentAction::Answer } else { AgentAction::Ask })
    } else {
        Ok(predict(net, state, mode)?.chosen)
    }
}

/// Immediate reward for a relevant question, penalty for an irrelevant
/// one, and the future-reward discount.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub r_cq: f64,
    pub p_cq: f64,
    pub sigma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { r_cq: 0.21, p_cq: -0.79, sigma: 0.79 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_cq < 0.0 && 0.0 < self.r_cq && self.r_cq <= 1.0) {
            return Err(Error::InvalidFormat("reward config requires p_cq < 0 < r_cq <= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::InvalidFormat("sigma must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// What a decision led to, as observed by the episode engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    Answered { reciprocal_rank: f64 },
    AskedRelevant,
    AskedIrrelevant,
}

/// Q-learning target for one decision. `successor_max` must be present
/// exactly when the action was a relevant question (the only non-terminal
/// case); it carries the max over the successor state's predicted rewards.
pub fn make_target(
    action: AgentAction,
    outcome: &Outcome,
    config: &RewardConfig,
    successor_max: Option<f64>,
) -> Result<f64> {
    match (action, outcome, successor_max) {
        (AgentAction::Answer, Outcome::Answered { reciprocal_rank }, None) => Ok(*reciprocal_rank),
        (AgentAction::Ask, Outcome::AskedRelevant, Some(max)) => Ok(config.r_cq + config.sigma * max),
        (AgentAction::Ask, Outcome::AskedIrrelevant, None) => Ok(config.p_cq),
        (a, o, s) => Err(Error::InconsistentTarget(format!(
            "action {a:?} with outcome {o:?} and successor {}",
            if s.is_some() { "present" } else { "absent" }
        ))),
    }
}

/// One replayable decision: state features, action, the observed target,
/// and the successor features when the episode continued.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub features: Vec<f64>,
    pub action: AgentAction,
    pub y_target: f64,
    pub successor: Option<Vec<f64>>,
    pub multiplicity: u32,
}

impl Experience {
    /// Validates terminality: only a relevant question carries a successor.
    pub fn new(
        features: Vec<f64>,
        action: AgentAction,
        outcome: Outcome,
        y_target: f64,
        successor: Option<Vec<f64>>,
        multiplicity: u32,
    ) -> Result<Self> {
        assert!(multiplicity >= 1, "multiplicity must be at least 1");
        let terminal = !matches!(outcome, Outcome::AskedRelevant);
        if terminal && successor.is_some() {
            return Err(Error::InconsistentTarget("terminal experience with a successor".into()));
        }
        if !terminal && successor.is_none() {
            return Err(Error::InconsistentTarget("non-terminal experience without successor".into()));
        }
        if matches!(outcome, Outcome::Answered { .. }) != matches!(action, AgentAction::Answer) {
            return Err(Error::InconsistentTarget("outcome does not match action".into()));
        }
        Ok(Experience { features, action, y_target, successor, multiplicity })
    }
}

/// Bounded FIFO experience store.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    items: VecDeque<Experience>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { items: VecDeque::with_capacity(capacity.min(4096)), capacity }
    }

    pub fn push(&mut self, exp: Experience) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(exp);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items.iter()
    }

    /// Index list with ask-multiplicity expansion; zero-target experiences
    /// are excluded entirely.
    fn effective_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, e) in self.items.iter().enumerate() {
            if e.y_target == 0.0 {
                continue;
            }
            for _ in 0..e.multiplicity {
                out.push(i);
            }
        }
        out
    }
}

/// Runs `steps` sampled replay batches against the live network. Targets
/// for non-terminal experiences are recomputed each step from the current
/// network (no separate target network). Returns per-step losses.
pub fn replay_train(
    net: &mut DenseNet,
    buffer: &ReplayBuffer,
    optimizer: &TrainingConfig,
    reward: &RewardConfig,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let effective = buffer.effective_indices();
    if effective.is_empty() {
        return Err(Error::EmptyEffectiveBuffer);
    }
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(optimizer.batch_size);
        for _ in 0..optimizer.batch_size {
            let exp = &buffer.items[effective[rng.gen_range(0..effective.len())]];
            let target = match &exp.successor {
                None => exp.y_target,
                Some(succ) => {
                    let out = net.forward(succ)?;
                    make_target(
                        exp.action,
                        &Outcome::AskedRelevant,
                        reward,
                        Some(out[0].max(out[1])),
                    )?
                }
            };
            batch.push((
                exp.features.clone(),
                LossSpec::MseMasked { index: exp.action.index(), target },
            ));
        }
        losses.push(backward_and_step(net, &batch, optimizer)?);
    }
    Ok(losses)
}

/// Linear epsilon decay over the first `decay_fraction` of episodes, then
/// constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_fraction: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule { start: 1.0, end: 0.05, decay_fraction: 0.5 }
    }
}

impl EpsilonSchedule {
    pub fn epsilon_at(&self, episode: usize, total_episodes: usize) -> f64 {
        let horizon = (total_episodes as f64 * self.decay_fraction).max(1.0);
        let t = (episode as f64 / horizon).min(1.0);
        self.start + (self.end - self.start) * t
    }
}

/// Knobs of the reinforcement-learning loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrainConfig {
    pub episodes: usize,
    /// Replay-train after every this many episodes.
    pub replay_every: usize,
    /// Sampled batches per replay round.
    pub replay_batches: usize,
    pub buffer_capacity: usize,
    pub ask_multiplicity: u32,
    pub optimizer: TrainingConfig,
    pub schedule: EpsilonSchedule,
}

impl Default for AgentTrainConfig {
    fn default() -> Self {
        AgentTrainConfig {
            episodes: 2000,
            replay_every: 1,
            replay_batches: 2,
            buffer_capacity: 10_000,
            ask_multiplicity: 3,
            optimizer: TrainingConfig { batch_size: 64, ..Default::default() },
            schedule: EpsilonSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub episode: usize,
    pub epsilon: f64,
    pub loss: Option<f64>,
    pub mean_reward: f64,
}

pub fn training_log_to_csv(log: &[TrainLogEntry]) -> String {
    let mut s = String::from("episode,epsilon,loss,mean_reward\n");
    for e in log {
        let loss = e.loss.map(|l| l.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", e.episode, e.epsilon, loss, e.mean_reward));
    }
    s
}

/// Trains the decision network by playing episodes against the simulated
/// user with epsilon-greedy exploration, collecting experiences, and
/// periodically replay-training. The rerankers inside `env` stay frozen.
pub fn train_agent(
    env: &EpisodeEnv,
    conversations: &[Conversation],
    user: &UserModel,
    reward: &RewardConfig,
    config: &AgentTrainConfig,
    initial: DenseNet,
) -> Result<(DenseNet, Vec<TrainLogEntry>)> {
    let prepared = env.prepare_all(conversations)?;
    train_agent_prepared(env, &prepared, user, reward, config, initial)
}

/// Same loop over conversations already prepared against this env.
pub fn train_agent_prepared(
    env: &EpisodeEnv,
    prepared: &[PreparedConversation],
    user: &UserModel,
    reward: &RewardConfig,
    config: &AgentTrainConfig,
    initial: DenseNet,
) -> Result<(DenseNet, Vec<TrainLogEntry>)> {
    reward.validate()?;
    let mut net = initial;
    if config.episodes == 0 {
        return Ok((net, Vec::new()));
    }
    assert!(!prepared.is_empty(), "cannot train on an empty corpus");
    let seed = config.optimizer.seed;
    let mut episode_rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, "agent-episodes", 0));
    let mut replay_rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, "agent-replay", 0));
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut log = Vec::with_capacity(config.episodes);
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for episode in 0..config.episodes {
        let slot = episode % prepared.len();
        if slot == 0 {
            use rand::seq::SliceRandom;
            order.shuffle(&mut episode_rng);
        }
        let epsilon = config.schedule.epsilon_at(episode, config.episodes);
        let conv = &prepared[order[slot]];
        let (outcome, raw) = {
            let mut decider =
                DqnDecider { net: &net, mode: env.feature_mode, epsilon, rng: &mut episode_rng };
            run_episode_prepared(conv, &mut decider, user)?
        };
        for r in raw {
            let (y_target, multiplicity) = match r.outcome {
                Outcome::Answered { reciprocal_rank } => (reciprocal_rank, 1),
                Outcome::AskedIrrelevant => (reward.p_cq, config.ask_multiplicity),
                Outcome::AskedRelevant => {
                    let succ = r.successor.as_ref().expect("relevant ask has a successor");
                    let out = net.forward(succ)?;
                    let observed =
                        make_target(r.action, &r.outcome, reward, Some(out[0].max(out[1])))?;
                    (observed, config.ask_multiplicity)
                }
            };
            buffer.push(Experience::new(
                r.features,
                r.action,
                r.outcome,
                y_target,
                r.successor,
                multiplicity,
            )?);
        }
        let mut loss = None;
        if (episode + 1) % config.replay_every == 0 && buffer.len() >= config.optimizer.batch_size {
            let losses = replay_train(
                &mut net,
                &buffer,
                &config.optimizer,
                reward,
                config.replay_batches,
                &mut replay_rng,
            )?;
            loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
        }
        log.push(TrainLogEntry { episode, epsilon, loss, mean_reward: outcome.reciprocal_rank });
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_state(dim: usize, k: usize) -> DecisionState {
        DecisionState {
            query: vec![0.1; dim],
            history: vec![0.2; dim],
            question_encodings: vec![vec![0.3; dim]; k],
            answer_encodings: vec![vec![0.4; dim]; k],
            question_scores: vec![0.5; k],
            answer_scores: vec![0.6; k],
        }
    }

    #[test]
    fn feature_lengths_per_mode() {
        let (d, k) = (8, 2);
        let s = tiny_state(d, k);
        assert_eq!(s.features(FeatureMode::Both).len(), (2 + 2 * k) * d + 2 * k);
        assert_eq!(s.features(FeatureMode::EncodedText).len(), (2 + 2 * k) * d);
        assert_eq!(s.features(FeatureMode::Score).len(), 2 * k);
        for mode in [FeatureMode::Both, FeatureMode::EncodedText, FeatureMode::Score] {
            assert_eq!(s.features(mode).len(), DecisionState::feature_len(mode, d, k));
        }
    }

    #[test]
    fn both_mode_is_text_then_scores() {
        let s = tiny_state(4, 2);
        let both = s.features(FeatureMode::Both);
        let text = s.features(FeatureMode::EncodedText);
        let scores = s.features(FeatureMode::Score);
        assert_eq!(&both[..text.len()], &text[..]);
        assert_eq!(&both[text.len()..], &scores[..]);
    }

    #[test]
    fn zero_net_predicts_zero_and_answers_by_tie_rule() {
        let s = tiny_state(4, 2);
        let input = DecisionState::feature_len(FeatureMode::Both, 4, 2);
        let mut net = DenseNet::two_layer(input, 8, 2, 1);
        net.set_params(&vec![0.0; net.param_count()]);
        let av = predict(&net, &s, FeatureMode::Both).unwrap();
        assert_eq!(av.r_ans_pred, 0.0);
        assert_eq!(av.r_cq_pred, 0.0);
        assert_eq!(av.chosen, AgentAction::Answer);
    }

    #[test]
    fn predict_output_is_always_two_rewards() {
        let s = tiny_state(4, 2);
        let input = DecisionState::feature_len(FeatureMode::Score, 4, 2);
        let net = DenseNet::two_layer(input, 8, 2, 9);
        let av = predict(&net, &s, FeatureMode::Score).unwrap();
        assert!(av.r_ans_pred.is_finite() && av.r_cq_pred.is_finite());
    }

    #[test]
    fn make_target_covers_the_policy_table() {
        let cfg = RewardConfig::default();
        // Answer with truth at rank 1: full reward.
        let full = make_target(
            AgentAction::Answer,
            &Outcome::Answered { reciprocal_rank: 1.0 },
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(full, 1.0);
        // Relevant question discounts the best successor prediction.
        let ask = make_target(AgentAction::Ask, &Outcome::AskedRelevant, &cfg, Some(0.5)).unwrap();
        assert!((ask - 0.605).abs() < 1e-12);
        // Irrelevant question: flat penalty.
        let bad = make_target(AgentAction::Ask, &Outcome::AskedIrrelevant, &cfg, None).unwrap();
        assert_eq!(bad, -0.79);
    }

    #[test]
    fn make_target_rejects_inconsistent_arguments() {
        let cfg = RewardConfig::default();
        assert!(make_target(
            AgentAction::Answer,
            &Outcome::Answered { reciprocal_rank: 0.5 },
            &cfg,
            Some(0.1)
        )
        .is_err());
        assert!(make_target(AgentAction::Ask, &Outcome::AskedRelevant, &cfg, None).is_err());
        assert!(make_target(AgentAction::Ask, &Outcome::AskedIrrelevant, &cfg, Some(0.0)).is_err());
        assert!(make_target(AgentAction::Answer, &Outcome::AskedRelevant, &cfg, Some(0.0)).is_err());
    }

    #[test]
    fn experience_terminality_is_enforced() {
        assert!(Experience::new(
            vec![0.0],
            AgentAction::Answer,
            Outcome::Answered { reciprocal_rank: 0.5 },
            0.5,
            Some(vec![0.0]),
            1
        )
        .is_err());
        assert!(Experience::new(vec![0.0], AgentAction::Ask, Outcome::AskedRelevant, 0.21, None, 1)
            .is_err());
        assert!(Experience::new(
            vec![0.0],
            AgentAction::Ask,
            Outcome::AskedIrrelevant,
            -0.79,
            None,
            3
        )
        .is_ok());
    }

    fn answer_exp(features: Vec<f64>, rr: f64) -> Experience {
        Experience::new(
            features,
            AgentAction::Answer,
            Outcome::Answered { reciprocal_rank: rr },
            rr,
            None,
            1,
        )
        .unwrap()
    }

    #[test]
    fn single_experience_converges_to_its_target() {
        let mut buffer = ReplayBuffer::new(16);
        buffer.push(answer_exp(vec![0.5, -0.5, 1.0, 0.0], 0.7));
        let mut net = DenseNet::two_layer(4, 8, 2, 3);
        let optimizer = TrainingConfig {
            learning_rate: 0.05,
            l2_weight: 0.0,
            batch_size: 8,
            epochs: 0,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        replay_train(&mut net, &buffer, &optimizer, &RewardConfig::default(), 2000, &mut rng)
            .unwrap();
        let out = net.forward(&[0.5, -0.5, 1.0, 0.0]).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-3, "prediction {} should reach 0.7", out[0]);
    }

    #[test]
    fn zero_target_experiences_are_never_sampled() {
        let mut buffer = ReplayBuffer::new(16);
        buffer.push(answer_exp(vec![1.0, 0.0], 0.0));
        let mut net = DenseNet::two_layer(2, 4, 2, 3);
        let optimizer = TrainingConfig { batch_size: 4, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = replay_train(&mut net, &buffer, &optimizer, &RewardConfig::default(), 1, &mut rng);
        assert!(matches!(err, Err(Error::EmptyEffectiveBuffer)));
        // A non-zero experience alongside it is the only thing sampled.
        buffer.push(answer_exp(vec![0.0, 1.0], 0.5));
        assert_eq!(buffer.effective_indices(), vec![1]);
    }

    #[test]
    fn ask_multiplicity_oversamples_by_the_configured_factor() {
        let mut buffer = ReplayBuffer::new(16);
        buffer.push(answer_exp(vec![1.0, 0.0], 0.5));
        buffer.push(
            Experience::new(
                vec![0.0, 1.0],
                AgentAction::Ask,
                Outcome::AskedIrrelevant,
                -0.79,
                None,
                3,
            )
            .unwrap(),
        );
        let effective = buffer.effective_indices();
        assert_eq!(effective, vec![0, 1, 1, 1]);
        // Counter check over sampled batches.
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ask = 0usize;
        let mut answer = 0usize;
        for _ in 0..40_000 {
            match effective[rng.gen_range(0..effective.len())] {
                0 => answer += 1,
                _ => ask += 1,
            }
        }
        let ratio = ask as f64 / answer as f64;
        assert!((ratio - 3.0).abs() < 0.3, "ratio {ratio} should be near 3");
    }

    #[test]
    fn replay_buffer_evicts_oldest_when_full() {
        let mut buffer = ReplayBuffer::new(2);
        buffer.push(answer_exp(vec![1.0], 0.1));
        buffer.push(answer_exp(vec![2.0], 0.2));
        buffer.push(answer_exp(vec![3.0], 0.3));
        assert_eq!(buffer.len(), 2);
        assert_eq!(buffer.iter().next().unwrap().features, vec![2.0]);
    }

    #[test]
    fn epsilon_one_explores_uniformly() {
        let s = tiny_state(2, 1);
        let input = DecisionState::feature_len(FeatureMode::Both, 2, 1);
        let net = DenseNet::two_layer(input, 4, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut answers = 0;
        for _ in 0..10_000 {
            if explore_or_exploit(&net, &s, FeatureMode::Both, 1.0, &mut rng).unwrap()
                == AgentAction::Answer
            {
                answers += 1;
            }
        }
        let freq = answers as f64 / 10_000.0;
        assert!((freq - 0.5).abs() < 0.02, "frequency {freq} should be near 0.5");
    }

    #[test]
    fn epsilon_zero_is_always_greedy() {
        let s = tiny_state(2, 1);
        let input = DecisionState::feature_len(FeatureMode::Both, 2, 1);
        let net = DenseNet::two_layer(input, 4, 2, 5);
        let greedy = predict(&net, &s, FeatureMode::Both).unwrap().chosen;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            assert_eq!(
                explore_or_exploit(&net, &s, FeatureMode::Both, 0.0, &mut rng).unwrap(),
                greedy
            );
        }
    }

    #[test]
    fn epsilon_half_with_answer_greedy_yields_three_quarters_answers() {
        // Force greedy = Answer by biasing the output layer.
        let s = tiny_state(2, 1);
        let input = DecisionState::feature_len(FeatureMode::Both, 2, 1);
        let mut net = DenseNet::two_layer(input, 4, 2, 5);
        let mut params = net.flatten_params();
        let n = params.len();
        for p in params.iter_mut().take(n - 2) {
            *p = 0.0;
        }
        params[n - 2] = 1.0; // answer bias
        params[n - 1] = -1.0; // ask bias
        net.set_params(&params);
        assert_eq!(predict(&net, &s, FeatureMode::Both).unwrap().chosen, AgentAction::Answer);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut answers = 0;
        for _ in 0..10_000 {
            if explore_or_exploit(&net, &s, FeatureMode::Both, 0.5, &mut rng).unwrap()
                == AgentAction::Answer
            {
                answers += 1;
            }
        }
        // 0.5 greedy + 0.5 * 0.5 random.
        let freq = answers as f64 / 10_000.0;
        assert!((freq - 0.75).abs() < 0.02, "frequency {freq} should be near 0.75");
    }

    #[test]
    fn epsilon_schedule_is_monotone_non_increasing() {
        let sched = EpsilonSchedule::default();
        let total = 100;
        let mut last = f64::INFINITY;
        for ep in 0..total {
            let e = sched.epsilon_at(ep, total);
            assert!(e <= last + 1e-12);
            last = e;
        }
        assert!((sched.epsilon_at(0, total) - 1.0).abs() < 1e-9);
        assert!((sched.epsilon_at(99, total) - 0.05).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn greedy_choice_is_scale_invariant(
            r_ans in -10.0f64..10.0,
            r_cq in -10.0f64..10.0,
            scale in 0.001f64..100.0,
        ) {
            prop_assert_eq!(greedy_choice(r_ans, r_cq), greedy_choice(r_ans * scale, r_cq * scale));
        }

        #[test]
        fn make_target_matches_brute_force_table(
            case in 0..3usize,
            rr in 0.01f64..1.0,
            succ in -2.0f64..2.0,
            r_cq in 0.01f64..1.0,
            p_cq in -2.0f64..-0.01,
            sigma in 0.0f64..1.0,
        ) {
            let cfg = RewardConfig { r_cq, p_cq, sigma };
            // Independent re-statement of the policy table.
            let (action, outcome, successor, expected) = match case {
                0 => (AgentAction::Answer, Outcome::Answered { reciprocal_rank: rr }, None, rr),
                1 => (AgentAction::Ask, Outcome::AskedRelevant, Some(succ), r_cq + sigma * succ),
                _ => (AgentAction::Ask, Outcome::AskedIrrelevant, None, p_cq),
            };
            let got = make_target(action, &outcome, &cfg, successor).unwrap();
            prop_assert!((got - expected).abs() < 1e-12);
        }
    }
}
