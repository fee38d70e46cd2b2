//! Episode engine coupling an agent policy to a rule-based simulated user
//! with bounded tolerance for off-topic questions, plus the fixed baseline
//! policies and the lookahead oracle.
//!
//! Episode dynamics are deterministic given the conversation and the pool
//! seed: pools, rankings, and states on the ground-truth path depend only
//! on (conversation, turn). A conversation is therefore prepared once —
//! per-turn rankings, decision states, and a lookahead plan — and every
//! policy replays against the same prepared data.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_pool, Conversation, ResponseKind};
use crate::encode::Encoder;
use crate::neural::{backward_and_step, softmax, DenseNet, LossSpec, TrainingConfig};
use crate::policy::{
    explore_or_exploit, greedy_choice, AgentAction, DecisionState, FeatureMode, Outcome,
};
use crate::rerank::{rank_prepared, Head, PreparedCandidate, RankedList};
use crate::{Error, Result};

/// Simulated user with a bounded tolerance for off-topic questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserModel {
    pub tolerance: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Answered,
    UserLeft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub turn: usize,
    pub action: AgentAction,
    pub candidate_id: String,
    pub was_relevant: bool,
}

/// Result of one simulated conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub conversation_id: String,
    pub trace: Vec<TraceStep>,
    pub terminal: TerminalReason,
    pub reciprocal_rank: f64,
    pub decisions_worse: usize,
    pub turns_used: usize,
}

pub fn episodes_to_jsonl(outcomes: &[EpisodeOutcome]) -> String {
    let mut s = String::new();
    for o in outcomes {
        s.push_str(&serde_json::to_string(o).expect("outcome serialization"));
        s.push('\n');
    }
    s
}

/// A decision with everything needed to replay it later.
#[derive(Debug, Clone, PartialEq)]
pub struct RawExperience {
    pub features: Vec<f64>,
    pub action: AgentAction,
    pub outcome: Outcome,
    pub successor: Option<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Episode environment and preparation
// ---------------------------------------------------------------------------

struct CatalogEntry {
    text: String,
    pooled: Vec<f64>,
    prepared: PreparedCandidate,
}

/// Frozen models plus pool configuration; prepares conversations for
/// simulation.
pub struct EpisodeEnv<'a> {
    pub corpus: &'a [Conversation],
    pub encoder: &'a Encoder,
    pub answer_head: &'a Head,
    pub question_head: &'a Head,
    pub n_negatives: usize,
    pub pools_seed: u64,
    pub k: usize,
    pub feature_mode: FeatureMode,
    answers: HashMap<String, CatalogEntry>,
    questions: HashMap<String, CatalogEntry>,
}

/// Rankings and decision state at one turn of the ground-truth path.
#[derive(Debug, Clone)]
pub struct TurnData {
    pub state: DecisionState,
    pub features: Vec<f64>,
    pub answer_ranking: RankedList,
    pub question_ranking: RankedList,
}

/// Per-turn summary driving the oracle lookahead: the truth's reciprocal
/// rank in the answer ranking, and the 1-based position of the first
/// relevant entry in the question ranking (None at the final turn).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPlan {
    pub answer_rr: Vec<f64>,
    pub question_relevant_pos: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct PreparedConversation {
    pub conversation_id: String,
    pub n: usize,
    pub turns: Vec<TurnData>,
    pub plan: TurnPlan,
}

impl<'a> EpisodeEnv<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        corpus: &'a [Conversation],
        encoder: &'a Encoder,
        answer_head: &'a Head,
        question_head: &'a Head,
        n_negatives: usize,
        pools_seed: u64,
        k: usize,
        feature_mode: FeatureMode,
    ) -> Self {
        // Candidate catalogs mirror pool eligibility: final voted agent
        // turns are answers, all other agent turns are questions.
        let entries: Vec<(Vec<(String, CatalogEntry)>, Vec<(String, CatalogEntry)>)> = corpus
            .par_iter()
            .map(|conv| {
                let mut ans = Vec::new();
                let mut qs = Vec::new();
                let agents: Vec<_> = conv.agent_utterances().collect();
                for (i, u) in agents.iter().enumerate() {
                    let id = conv.agent_turn_id(i + 1);
                    let enc = encoder.encode(&u.text);
                    if i + 1 == agents.len() && u.is_voted_answer {
                        ans.push((
                            id,
                            CatalogEntry {
                                text: u.text.clone(),
                                pooled: enc.pooled.clone(),
                                prepared: answer_head.prepare_candidate(&enc),
                            },
                        ));
                    } else if !u.is_voted_answer {
                        qs.push((
                            id,
                            CatalogEntry {
                                text: u.text.clone(),
                                pooled: enc.pooled.clone(),
                                prepared: question_head.prepare_candidate(&enc),
                            },
                        ));
                    }
                }
                (ans, qs)
            })
            .collect();
        let mut answers = HashMap::new();
        let mut questions = HashMap::new();
        for (ans, qs) in entries {
            answers.extend(ans);
            questions.extend(qs);
        }
        EpisodeEnv {
            corpus,
            encoder,
            answer_head,
            question_head,
            n_negatives,
            pools_seed,
            k,
            feature_mode,
            answers,
            questions,
        }
    }

    fn pool_seed(&self, kind: ResponseKind, conversation_id: &str, turn: usize) -> u64 {
        let tag = match kind {
            ResponseKind::Answer => "pool-answer",
            ResponseKind::Question => "pool-question",
        };
        crate::derive_seed(self.pools_seed, &format!("{tag}:{conversation_id}"), turn as u64)
    }

    fn rank_pool(
        &self,
        conv: &Conversation,
        turn: usize,
        kind: ResponseKind,
        context: &crate::encode::TokenSequenceEncoding,
    ) -> Result<RankedList> {
        let (head, catalog) = match kind {
            ResponseKind::Answer => (self.answer_head, &self.answers),
            ResponseKind::Question => (self.question_head, &self.questions),
        };
        let pool = sample_pool(
            conv,
            turn,
            kind,
            self.corpus,
            self.n_negatives,
            self.pool_seed(kind, &conv.id, turn),
        )?;
        let prepared_ctx = head.prepare_context(context);
        let truth_id = pool.truth().map(|t| t.id.clone());
        let items: Vec<(&str, &str, &PreparedCandidate)> = pool
            .candidates
            .iter()
            .map(|c| {
                let entry = catalog
                    .get(&c.id)
                    .unwrap_or_else(|| panic!("candidate {} missing from catalog", c.id));
                (c.id.as_str(), entry.text.as_str(), &entry.prepared)
            })
            .collect();
        Ok(rank_prepared(head, &prepared_ctx, &items, kind, truth_id.as_deref()))
    }

    fn top_k_state(
        &self,
        ranking: &RankedList,
        catalog: &HashMap<String, CatalogEntry>,
    ) -> (Vec<Vec<f64>>, Vec<f64>) {
        let d = self.encoder.dimension;
        let mut encodings = Vec::with_capacity(self.k);
        let mut scores = Vec::with_capacity(self.k);
        for i in 0..self.k {
            match ranking.entries.get(i) {
                Some(e) => {
                    encodings.push(catalog[&e.candidate_id].pooled.clone());
                    scores.push(e.score);
                }
                None => {
                    encodings.push(vec![0.0; d]);
                    scores.push(0.0);
                }
            }
        }
        (encodings, scores)
    }

    /// Computes rankings, decision states, and the lookahead plan for every
    /// turn of the conversation's ground-truth path.
    pub fn prepare(&self, conv: &Conversation) -> Result<PreparedConversation> {
        let n = conv.n_agent_turns();
        assert!(n >= 1, "conversation without agent turns");
        let mut turns = Vec::with_capacity(n);
        let mut answer_rr = Vec::with_capacity(n);
        let mut question_relevant_pos = Vec::with_capacity(n);
        let query_enc = self.encoder.encode(conv.initial_query());
        for turn in 1..=n {
            let context_enc = self.encoder.encode(&conv.context_text(turn));
            let history_enc = self.encoder.encode(&conv.history_text(turn));
            let answer_ranking = self.rank_pool(conv, turn, ResponseKind::Answer, &context_enc)?;
            let question_ranking =
                self.rank_pool(conv, turn, ResponseKind::Question, &context_enc)?;
            let (question_encodings, question_scores) =
                self.top_k_state(&question_ranking, &self.questions);
            let (answer_encodings, answer_scores) =
                self.top_k_state(&answer_ranking, &self.answers);
            let state = DecisionState {
                query: query_enc.pooled.clone(),
                history: history_enc.pooled.clone(),
                question_encodings,
                answer_encodings,
                question_scores,
                answer_scores,
            };
            let features = state.features(self.feature_mode);
            answer_rr.push(answer_ranking.truth_reciprocal_rank());
            // Relevance is positional: the asked question must match the
            // conversation's clarifying question for this turn.
            question_relevant_pos.push(if turn < n {
                let truth_text = conv.agent_text(turn).expect("agent turn exists");
                question_ranking.entries.iter().position(|e| e.text == truth_text).map(|p| p + 1)
            } else {
                None
            });
            turns.push(TurnData { state, features, answer_ranking, question_ranking });
        }
        Ok(PreparedConversation {
            conversation_id: conv.id.clone(),
            n,
            turns,
            plan: TurnPlan { answer_rr, question_relevant_pos },
        })
    }

    pub fn prepare_all(&self, conversations: &[Conversation]) -> Result<Vec<PreparedConversation>> {
        conversations.par_iter().map(|c| self.prepare(c)).collect()
    }
}

// ---------------------------------------------------------------------------
// Oracle lookahead and the worse-decision rule
// ---------------------------------------------------------------------------

/// Value of asking at `turn` under the retry rule: the chain consumes
/// ranked questions until the relevant one or until patience runs out.
/// Failure scores 0; success continues optimally with reduced patience.
pub fn oracle_ask_value(plan: &TurnPlan, turn: usize, patience: u32) -> f64 {
    match plan.question_relevant_pos[turn - 1] {
        Some(pos) if pos <= patience as usize + 1 => {
            optimal_value(plan, turn + 1, patience - (pos as u32 - 1))
        }
        _ => 0.0,
    }
}

/// Best achievable final reciprocal rank from `turn` on.
pub fn optimal_value(plan: &TurnPlan, turn: usize, patience: u32) -> f64 {
    let answer = plan.answer_rr[turn - 1];
    let ask = oracle_ask_value(plan, turn, patience);
    answer.max(ask)
}

/// Lookahead decision: ask only when it strictly beats answering now.
pub fn oracle_decide(plan: &TurnPlan, turn: usize, patience: u32) -> AgentAction {
    if oracle_ask_value(plan, turn, patience) > plan.answer_rr[turn - 1] {
        AgentAction::Ask
    } else {
        AgentAction::Answer
    }
}

/// Whether a decision was worse: an ask whose retry chain cannot reach the
/// relevant question before patience runs out, or an answer whose achieved
/// reciprocal rank is strictly below the lookahead value of asking.
pub fn worse_decision(
    action: AgentAction,
    plan: &TurnPlan,
    turn: usize,
    patience: u32,
    achieved_rr: f64,
) -> bool {
    match action {
        AgentAction::Ask => match plan.question_relevant_pos[turn - 1] {
            Some(pos) => pos > patience as usize + 1,
            None => true,
        },
        AgentAction::Answer => oracle_ask_value(plan, turn, patience) > achieved_rr,
    }
}

// ---------------------------------------------------------------------------
// Deciders
// ---------------------------------------------------------------------------

/// What a policy sees when deciding at a turn.
pub struct TurnView<'a> {
    pub turn: usize,
    pub n_turns: usize,
    pub state: &'a DecisionState,
    pub features: &'a [f64],
    pub answer_ranking: &'a RankedList,
    pub question_ranking: &'a RankedList,
    pub plan: &'a TurnPlan,
    pub patience_left: u32,
}

pub trait Decider {
    fn decide(&mut self, view: &TurnView) -> Result<AgentAction>;
}

/// Asks exactly `questions_before_answer` questions, then answers.
pub struct FixedAskDecider {
    pub questions_before_answer: usize,
    asked: usize,
}

impl FixedAskDecider {
    pub fn new(questions_before_answer: usize) -> Self {
        FixedAskDecider { questions_before_answer, asked: 0 }
    }
}

impl Decider for FixedAskDecider {
    fn decide(&mut self, _view: &TurnView) -> Result<AgentAction> {
        if self.asked < self.questions_before_answer {
            self.asked += 1;
            Ok(AgentAction::Ask)
        } else {
            Ok(AgentAction::Answer)
        }
    }
}

/// Context-only binary classifier: answers when the predicted probability
/// of the answer class reaches the threshold.
pub struct CtxPredDecider<'a> {
    pub net: &'a DenseNet,
    pub threshold: f64,
}

/// Feature vector of the context classifier: query and history encodings.
pub fn ctxpred_features(state: &DecisionState) -> Vec<f64> {
    let mut f = state.query.clone();
    f.extend_from_slice(&state.history);
    f
}

impl Decider for CtxPredDecider<'_> {
    fn decide(&mut self, view: &TurnView) -> Result<AgentAction> {
        let logits = self.net.forward(&ctxpred_features(view.state))?;
        let p_answer = softmax(&logits)[AgentAction::Answer.index()];
        Ok(if p_answer >= self.threshold { AgentAction::Answer } else { AgentAction::Ask })
    }
}

/// Q-network decider; epsilon-greedy during training, greedy at zero.
pub struct DqnDecider<'a> {
    pub net: &'a DenseNet,
    pub mode: FeatureMode,
    pub epsilon: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Decider for DqnDecider<'_> {
    fn decide(&mut self, view: &TurnView) -> Result<AgentAction> {
        if self.epsilon > 0.0 {
            explore_or_exploit(self.net, view.state, self.mode, self.epsilon, self.rng)
        } else {
            let out = self.net.forward(view.features)?;
            Ok(greedy_choice(out[0], out[1]))
        }
    }
}

/// Exhaustive-lookahead decider; decision error zero by construction.
pub struct OracleDecider;

impl Decider for OracleDecider {
    fn decide(&mut self, view: &TurnView) -> Result<AgentAction> {
        Ok(oracle_decide(view.plan, view.turn, view.patience_left))
    }
}

/// Policy descriptor used by the evaluation harness.
#[derive(Debug, Clone)]
pub enum AgentPolicy {
    Q0A,
    Q1A,
    Q2A,
    CtxPred { net: DenseNet, threshold: f64 },
    Dqn { net: DenseNet },
    Oracle,
}

impl AgentPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            AgentPolicy::Q0A => "q0a",
            AgentPolicy::Q1A => "q1a",
            AgentPolicy::Q2A => "q2a",
            AgentPolicy::CtxPred { .. } => "ctxpred",
            AgentPolicy::Dqn { .. } => "dqn",
            AgentPolicy::Oracle => "oracle",
        }
    }

    /// Fresh decider for one episode. Evaluation is always greedy.
    pub fn make_decider<'a>(
        &'a self,
        mode: FeatureMode,
        rng: &'a mut ChaCha8Rng,
    ) -> Box<dyn Decider + 'a> {
        match self {
            AgentPolicy::Q0A => Box::new(FixedAskDecider::new(0)),
            AgentPolicy::Q1A => Box::new(FixedAskDecider::new(1)),
            AgentPolicy::Q2A => Box::new(FixedAskDecider::new(2)),
            AgentPolicy::CtxPred { net, threshold } => {
                Box::new(CtxPredDecider { net, threshold: *threshold })
            }
            AgentPolicy::Dqn { net } => Box::new(DqnDecider { net, mode, epsilon: 0.0, rng }),
            AgentPolicy::Oracle => Box::new(OracleDecider),
        }
    }
}

// ---------------------------------------------------------------------------
// Episode loop
// ---------------------------------------------------------------------------

/// Plays one conversation against the simulated user.
///
/// Per turn the policy answers or asks. Answering ends the episode with
/// the truth's reciprocal rank. Asking consumes ranked questions from the
/// top: each off-topic question burns one unit of patience (the next
/// attempt takes the next-ranked question), and the episode ends with
/// score zero when patience runs out. A relevant question extends the
/// context with the scripted reply and play continues at the next turn.
pub fn run_episode_prepared(
    prep: &PreparedConversation,
    policy: &mut dyn Decider,
    user: &UserModel,
) -> Result<(EpisodeOutcome, Vec<RawExperience>)> {
    let mut patience = user.tolerance;
    let mut turn = 1usize;
    let mut trace = Vec::new();
    let mut worse = 0usize;
    let mut raw = Vec::new();
    loop {
        let td = &prep.turns[turn - 1];
        let view = TurnView {
            turn,
            n_turns: prep.n,
            state: &td.state,
            features: &td.features,
            answer_ranking: &td.answer_ranking,
            question_ranking: &td.question_ranking,
            plan: &prep.plan,
            patience_left: patience,
        };
        let action = policy.decide(&view)?;
        match action {
            AgentAction::Answer => {
                let rr = td.answer_ranking.truth_reciprocal_rank();
                let top_id = td
                    .answer_ranking
                    .entries
                    .first()
                    .map(|e| e.candidate_id.clone())
                    .unwrap_or_default();
                trace.push(TraceStep {
                    turn,
                    action,
                    candidate_id: top_id,
                    was_relevant: td.answer_ranking.truth_rank == Some(1),
                });
                if worse_decision(action, &prep.plan, turn, patience, rr) {
                    worse += 1;
                }
                raw.push(RawExperience {
                    features: td.features.clone(),
                    action,
                    outcome: Outcome::Answered { reciprocal_rank: rr },
                    successor: None,
                });
                return Ok((
                    EpisodeOutcome {
                        conversation_id: prep.conversation_id.clone(),
                        trace,
                        terminal: TerminalReason::Answered,
                        reciprocal_rank: rr,
                        decisions_worse: worse,
                        turns_used: turn,
                    },
                    raw,
                ));
            }
            AgentAction::Ask => {
                let entries = &td.question_ranking.entries;
                let pos = prep.plan.question_relevant_pos[turn - 1];
                let chain_succeeds =
                    matches!(pos, Some(p) if p <= patience as usize + 1 && p <= entries.len());
                if worse_decision(action, &prep.plan, turn, patience, 0.0) {
                    worse += 1;
                }
                if chain_succeeds {
                    let p = pos.unwrap();
                    for (o, entry) in entries.iter().take(p).enumerate() {
                        trace.push(TraceStep {
                            turn,
                            action,
                            candidate_id: entry.candidate_id.clone(),
                            was_relevant: o + 1 == p,
                        });
                    }
                    patience -= p as u32 - 1;
                    let successor = prep.turns[turn].features.clone();
                    raw.push(RawExperience {
                        features: td.features.clone(),
                        action,
                        outcome: Outcome::AskedRelevant,
                        successor: Some(successor),
                    });
                    turn += 1;
                } else {
                    let asked = ((patience as usize) + 1).min(entries.len());
                    for entry in entries.iter().take(asked) {
                        trace.push(TraceStep {
                            turn,
                            action,
                            candidate_id: entry.candidate_id.clone(),
                            was_relevant: false,
                        });
                    }
                    raw.push(RawExperience {
                        features: td.features.clone(),
                        action,
                        outcome: Outcome::AskedIrrelevant,
                        successor: None,
                    });
                    return Ok((
                        EpisodeOutcome {
                            conversation_id: prep.conversation_id.clone(),
                            trace,
                            terminal: TerminalReason::UserLeft,
                            reciprocal_rank: 0.0,
                            decisions_worse: worse,
                            turns_used: turn,
                        },
                        raw,
                    ));
                }
            }
        }
    }
}

/// Prepares the conversation against the environment and plays it.
pub fn run_episode(
    conversation: &Conversation,
    policy: &mut dyn Decider,
    env: &EpisodeEnv,
    user: &UserModel,
) -> Result<(EpisodeOutcome, Vec<RawExperience>)> {
    let prep = env.prepare(conversation)?;
    run_episode_prepared(&prep, policy, user)
}

// ---------------------------------------------------------------------------
// Context-only classifier training
// ---------------------------------------------------------------------------

/// Per-turn samples for the context classifier: (query ++ history)
/// features, answer label exactly at the final turn.
pub fn ctxpred_samples(
    conversations: &[Conversation],
    encoder: &Encoder,
) -> Vec<(Vec<f64>, AgentAction)> {
    let mut out = Vec::new();
    for conv in conversations {
        let n = conv.n_agent_turns();
        let query = encoder.encode(conv.initial_query()).pooled;
        for turn in 1..=n {
            let mut features = query.clone();
            features.extend_from_slice(&encoder.encode(&conv.history_text(turn)).pooled);
            let label = if turn == n { AgentAction::Answer } else { AgentAction::Ask };
            out.push((features, label));
        }
    }
    out
}

/// Trains the answer-or-ask context classifier with cross-entropy.
pub fn ctxpred_train(
    conversations: &[Conversation],
    encoder: &Encoder,
    config: &TrainingConfig,
) -> Result<DenseNet> {
    let samples = ctxpred_samples(conversations, encoder);
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let classes: Vec<usize> = samples.iter().map(|(_, l)| l.index()).collect();
    if classes.iter().all(|&c| c == classes[0]) {
        return Err(Error::SingleClass);
    }
    let dim = samples[0].0.len();
    let mut net = DenseNet::linear(dim, 2, crate::derive_seed(config.seed, "ctxpred-init", 0));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(
            config.seed,
            "ctxpred-epoch",
            epoch as u64,
        ));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<(Vec<f64>, LossSpec)> = chunk
                .iter()
                .map(|&i| {
                    (samples[i].0.clone(), LossSpec::CrossEntropy { positive: samples[i].1.index() })
                })
                .collect();
            backward_and_step(&mut net, &batch, config)?;
        }
    }
    Ok(net)
}
