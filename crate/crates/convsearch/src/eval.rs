//! Metrics, k-fold cross-validation with paired significance tests,
//! reciprocal-rank histograms, group-split analyses, and the feature
//! ablation harness.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{fold_split, Conversation, SplitRole};
use crate::encode::Encoder;
use crate::neural::{DenseNet, TrainingConfig};
use crate::policy::{
    train_agent_prepared, AgentTrainConfig, DecisionState, FeatureMode, RewardConfig,
    TrainLogEntry,
};
use crate::rerank::{answer_pairs, question_pairs, train_inbatch, Head, HeadKind};
use crate::simulate::{
    ctxpred_train, run_episode_prepared, AgentPolicy, EpisodeEnv, EpisodeOutcome, TerminalReason,
    UserModel,
};
use crate::{derive_seed, Error, Result};

// ---------------------------------------------------------------------------
// Core metrics
// ---------------------------------------------------------------------------

/// Fraction of episodes where the user eventually received the truth at
/// rank 1; abandoned episodes count zero.
pub fn recall_at_1(outcomes: &[EpisodeOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::EmptyOutcomes);
    }
    let hits = outcomes
        .iter()
        .filter(|o| o.terminal == TerminalReason::Answered && o.reciprocal_rank == 1.0)
        .count();
    Ok(hits as f64 / outcomes.len() as f64)
}

/// Mean reciprocal rank with zeros for abandoned episodes.
pub fn mrr(outcomes: &[EpisodeOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::EmptyOutcomes);
    }
    Ok(outcomes.iter().map(|o| o.reciprocal_rank).sum::<f64>() / outcomes.len() as f64)
}

/// Fraction of episodes containing at least one worse decision.
pub fn decision_error(outcomes: &[EpisodeOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::EmptyOutcomes);
    }
    let tainted = outcomes.iter().filter(|o| o.decisions_worse > 0).count();
    Ok(tainted as f64 / outcomes.len() as f64)
}

// ---------------------------------------------------------------------------
// Significance
// ---------------------------------------------------------------------------

/// Paired two-sided t-test result over per-conversation reciprocal ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub mean_diff: f64,
    /// None when the pairs are identical or too few for the test.
    pub p_value: Option<f64>,
    pub identical: bool,
}

pub fn paired_ttest(a: &[f64], b: &[f64]) -> Significance {
    assert_eq!(a.len(), b.len(), "paired test needs aligned samples");
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n.max(1) as f64;
    if diffs.iter().all(|&d| d == 0.0) {
        return Significance { mean_diff: 0.0, p_value: None, identical: true };
    }
    if n < 2 {
        return Significance { mean_diff: mean, p_value: None, identical: false };
    }
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        // Constant non-zero difference: as significant as the test can say.
        return Significance { mean_diff: mean, p_value: Some(0.0), identical: false };
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid t distribution");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Significance { mean_diff: mean, p_value: Some(p.clamp(0.0, 1.0)), identical: false }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub episodes: usize,
    pub recall_at_1: f64,
    pub mrr: f64,
    pub decision_error: f64,
}

/// Headline metrics plus per-fold breakdown and significance against the
/// named baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub episodes: usize,
    pub recall_at_1: f64,
    pub mrr: f64,
    pub decision_error: f64,
    pub per_fold: Vec<FoldMetrics>,
    pub significance: BTreeMap<String, Significance>,
}

fn fold_metrics(fold: usize, outcomes: &[EpisodeOutcome]) -> Result<FoldMetrics> {
    Ok(FoldMetrics {
        fold,
        episodes: outcomes.len(),
        recall_at_1: recall_at_1(outcomes)?,
        mrr: mrr(outcomes)?,
        decision_error: decision_error(outcomes)?,
    })
}

/// Reciprocal-rank histogram bins: rank 1, ranks 2-6, ranks 7-10, deeper
/// ranks, and abandoned episodes.
pub const HISTOGRAM_BINS: [&str; 5] = ["1", "[1/6,1/2]", "[1/10,1/7]", "(0,1/10)", "0"];

pub fn histogram(outcomes: &[EpisodeOutcome]) -> BTreeMap<String, usize> {
    let mut bins: BTreeMap<String, usize> =
        HISTOGRAM_BINS.iter().map(|b| (b.to_string(), 0)).collect();
    for o in outcomes {
        let bin = if o.reciprocal_rank == 0.0 {
            "0"
        } else {
            let rank = (1.0 / o.reciprocal_rank).round() as usize;
            match rank {
                1 => "1",
                2..=6 => "[1/6,1/2]",
                7..=10 => "[1/10,1/7]",
                _ => "(0,1/10)",
            }
        };
        *bins.get_mut(bin).unwrap() += 1;
    }
    bins
}

pub fn histogram_csv(outcomes_by_policy: &BTreeMap<String, Vec<EpisodeOutcome>>) -> String {
    let mut s = String::from("policy,bin,count,fraction\n");
    for (policy, outcomes) in outcomes_by_policy {
        let bins = histogram(outcomes);
        let total = outcomes.len().max(1) as f64;
        for bin in HISTOGRAM_BINS {
            let count = bins[bin];
            s.push_str(&format!("{policy},{bin},{count},{}\n", count as f64 / total));
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Group analysis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub episodes: usize,
    pub recall_at_1: f64,
    pub mrr: f64,
    pub decision_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub conversations: usize,
    pub per_policy: BTreeMap<String, GroupMetrics>,
}

/// Conversations split by how hard they are for the direct-answer
/// baseline, with per-group metrics for every policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSplit {
    pub rule: String,
    pub groups: Vec<GroupReport>,
}

/// Splits by the direct-answer baseline's truth rank: rank 1 (easy) vs
/// deeper (hard), with the hard group subdivided at rank 2.
pub fn group_analysis(
    outcomes_by_policy: &BTreeMap<String, Vec<EpisodeOutcome>>,
) -> Result<GroupSplit> {
    let q0a = outcomes_by_policy
        .get("q0a")
        .ok_or_else(|| Error::MissingBaseline { name: "q0a".into() })?;
    let rank_of: BTreeMap<&str, f64> =
        q0a.iter().map(|o| (o.conversation_id.as_str(), o.reciprocal_rank)).collect();
    let member = |group: &str, rr: f64| -> bool {
        match group {
            "easy_q0a_rank1" => rr == 1.0,
            "hard_q0a_rank_gt1" => rr < 1.0,
            "hard_q0a_rank2" => rr == 0.5,
            "hard_q0a_rank_gt2" => rr < 0.5,
            _ => unreachable!(),
        }
    };
    let mut groups = Vec::new();
    for name in ["easy_q0a_rank1", "hard_q0a_rank_gt1", "hard_q0a_rank2", "hard_q0a_rank_gt2"] {
        let ids: Vec<&str> =
            rank_of.iter().filter(|(_, &rr)| member(name, rr)).map(|(id, _)| *id).collect();
        let mut per_policy = BTreeMap::new();
        for (policy, outcomes) in outcomes_by_policy {
            let subset: Vec<EpisodeOutcome> = outcomes
                .iter()
                .filter(|o| ids.contains(&o.conversation_id.as_str()))
                .cloned()
                .collect();
            if subset.is_empty() {
                continue;
            }
            per_policy.insert(
                policy.clone(),
                GroupMetrics {
                    episodes: subset.len(),
                    recall_at_1: recall_at_1(&subset)?,
                    mrr: mrr(&subset)?,
                    decision_error: decision_error(&subset)?,
                },
            );
        }
        groups.push(GroupReport { group: name.to_string(), conversations: ids.len(), per_policy });
    }
    Ok(GroupSplit { rule: "q0a_truth_rank".to_string(), groups })
}

pub fn group_split_csv(split: &GroupSplit) -> String {
    let mut s = String::from("group,policy,conversations,recall_at_1,mrr,decision_error\n");
    for g in &split.groups {
        for (policy, m) in &g.per_policy {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                g.group, policy, m.episodes, m.recall_at_1, m.mrr, m.decision_error
            ));
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Experiment harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Q0A,
    Q1A,
    Q2A,
    CtxPred,
    Dqn,
    DqnUntrained,
    Oracle,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Q0A => "q0a",
            PolicyKind::Q1A => "q1a",
            PolicyKind::Q2A => "q2a",
            PolicyKind::CtxPred => "ctxpred",
            PolicyKind::Dqn => "dqn",
            PolicyKind::DqnUntrained => "dqn_untrained",
            PolicyKind::Oracle => "oracle",
        }
    }

    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::Q0A,
        PolicyKind::Q1A,
        PolicyKind::Q2A,
        PolicyKind::CtxPred,
        PolicyKind::Dqn,
        PolicyKind::DqnUntrained,
        PolicyKind::Oracle,
    ];

    pub fn parse(name: &str) -> Option<PolicyKind> {
        PolicyKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Baselines that significance is reported against.
const BASELINES: [&str; 4] = ["q0a", "q1a", "q2a", "ctxpred"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerParams {
    pub kind: HeadKind,
    pub codes: usize,
    pub training: TrainingConfig,
}

/// Everything a cross-validated experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentParams {
    pub encoder_dim: usize,
    pub reranker: RerankerParams,
    pub reward: RewardConfig,
    pub agent: AgentTrainConfig,
    pub ctxpred_training: TrainingConfig,
    pub ctxpred_threshold: f64,
    pub dqn_hidden: usize,
    pub tolerance: u32,
    pub k: usize,
    pub n_negatives: usize,
    pub folds: usize,
    /// How many fold rotations to run (all of them by default).
    pub rotations: usize,
    pub feature_mode: FeatureMode,
    pub seed: u64,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            encoder_dim: 256,
            reranker: RerankerParams {
                kind: HeadKind::Bi,
                codes: 4,
                training: TrainingConfig {
                    learning_rate: 0.5,
                    l2_weight: 1e-4,
                    batch_size: 100,
                    epochs: 20,
                    seed: 0,
                },
            },
            reward: RewardConfig::default(),
            agent: AgentTrainConfig::default(),
            ctxpred_training: TrainingConfig {
                learning_rate: 0.5,
                l2_weight: 0.0,
                batch_size: 16,
                epochs: 120,
                seed: 0,
            },
            ctxpred_threshold: 0.5,
            dqn_hidden: 128,
            tolerance: 0,
            k: 2,
            n_negatives: 99,
            folds: 5,
            rotations: 5,
            feature_mode: FeatureMode::Both,
            seed: 0,
        }
    }
}

/// Models trained for one fold rotation.
pub struct FoldModels {
    pub encoder: Encoder,
    pub answer_head: Head,
    pub question_head: Head,
    pub ctxpred: DenseNet,
    pub dqn: DenseNet,
    pub dqn_untrained: DenseNet,
    pub dqn_log: Vec<TrainLogEntry>,
    pub answer_loss_curve: Vec<f64>,
    pub question_loss_curve: Vec<f64>,
}

/// Trains encoder, both reranker heads, the context classifier, and the
/// decision network on the training conversations of one rotation.
pub fn train_fold(
    corpus: &[Conversation],
    set_aside: &[Conversation],
    train: &[Conversation],
    params: &ExperimentParams,
    fold: usize,
) -> Result<FoldModels> {
    let texts: Vec<String> = train
        .iter()
        .chain(set_aside)
        .flat_map(|c| c.turns.iter().map(|u| u.text.clone()))
        .collect();
    let encoder =
        Encoder::fit(&texts, params.encoder_dim, derive_seed(params.seed, "encoder", fold as u64))?;

    let mut answer_head = Head::new(
        params.reranker.kind,
        params.encoder_dim,
        params.reranker.codes,
        derive_seed(params.seed, "answer-head-init", fold as u64),
    );
    let mut answer_cfg = params.reranker.training.clone();
    answer_cfg.seed = derive_seed(params.seed, "answer-head-train", fold as u64);
    let answer_groups = answer_pairs(train, &encoder);
    let answer_loss_curve = train_inbatch(&mut answer_head, &answer_groups, &answer_cfg)?;

    let mut question_head = Head::new(
        params.reranker.kind,
        params.encoder_dim,
        params.reranker.codes,
        derive_seed(params.seed, "question-head-init", fold as u64),
    );
    let mut question_cfg = params.reranker.training.clone();
    question_cfg.seed = derive_seed(params.seed, "question-head-train", fold as u64);
    let question_groups = question_pairs(train, set_aside, &encoder);
    let question_loss_curve = train_inbatch(&mut question_head, &question_groups, &question_cfg)?;

    let mut ctxpred_cfg = params.ctxpred_training.clone();
    ctxpred_cfg.seed = derive_seed(params.seed, "ctxpred", fold as u64);
    let ctxpred = ctxpred_train(train, &encoder, &ctxpred_cfg)?;

    let input_dim = DecisionState::feature_len(params.feature_mode, params.encoder_dim, params.k);
    let dqn_untrained = DenseNet::two_layer(
        input_dim,
        params.dqn_hidden,
        2,
        derive_seed(params.seed, "dqn-init", fold as u64),
    );
    let env = EpisodeEnv::new(
        corpus,
        &encoder,
        &answer_head,
        &question_head,
        params.n_negatives,
        derive_seed(params.seed, "pools", fold as u64),
        params.k,
        params.feature_mode,
    );
    let mut agent_cfg = params.agent.clone();
    agent_cfg.optimizer.seed = derive_seed(params.seed, "agent", fold as u64);
    let prepared_train = env.prepare_all(train)?;
    let (dqn, dqn_log) = train_agent_prepared(
        &env,
        &prepared_train,
        &UserModel { tolerance: params.tolerance },
        &params.reward,
        &agent_cfg,
        dqn_untrained.clone(),
    )?;

    Ok(FoldModels {
        encoder,
        answer_head,
        question_head,
        ctxpred,
        dqn,
        dqn_untrained,
        dqn_log,
        answer_loss_curve,
        question_loss_curve,
    })
}

fn instantiate(kind: PolicyKind, models: &FoldModels, threshold: f64) -> AgentPolicy {
    match kind {
        PolicyKind::Q0A => AgentPolicy::Q0A,
        PolicyKind::Q1A => AgentPolicy::Q1A,
        PolicyKind::Q2A => AgentPolicy::Q2A,
        PolicyKind::CtxPred => AgentPolicy::CtxPred { net: models.ctxpred.clone(), threshold },
        PolicyKind::Dqn => AgentPolicy::Dqn { net: models.dqn.clone() },
        PolicyKind::DqnUntrained => AgentPolicy::Dqn { net: models.dqn_untrained.clone() },
        PolicyKind::Oracle => AgentPolicy::Oracle,
    }
}

/// Runs every policy over the evaluation conversations with shared pools.
pub fn evaluate_policies(
    corpus: &[Conversation],
    models: &FoldModels,
    eval: &[Conversation],
    params: &ExperimentParams,
    tolerance: u32,
    fold: usize,
    policies: &[PolicyKind],
) -> Result<BTreeMap<String, Vec<EpisodeOutcome>>> {
    let env = EpisodeEnv::new(
        corpus,
        &models.encoder,
        &models.answer_head,
        &models.question_head,
        params.n_negatives,
        derive_seed(params.seed, "pools", fold as u64),
        params.k,
        params.feature_mode,
    );
    let prepared = env.prepare_all(eval)?;
    let user = UserModel { tolerance };
    let mut out = BTreeMap::new();
    for &kind in policies {
        let policy = instantiate(kind, models, params.ctxpred_threshold);
        let outcomes: Result<Vec<EpisodeOutcome>> = prepared
            .par_iter()
            .enumerate()
            .map(|(i, prep)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    params.seed,
                    "eval-episode",
                    (fold * eval.len() + i) as u64,
                ));
                let mut decider = policy.make_decider(params.feature_mode, &mut rng);
                Ok(run_episode_prepared(prep, decider.as_mut(), &user)?.0)
            })
            .collect();
        out.insert(kind.name().to_string(), outcomes?);
    }
    Ok(out)
}

/// Full cross-validation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub folds: usize,
    pub rotations: usize,
    pub tolerance: u32,
    pub seed: u64,
    pub policies: BTreeMap<String, MetricsReport>,
}

/// Cross-validated evaluation: rotates which fold is held out, trains all
/// models on the remainder, and evaluates every requested policy on the
/// held-out conversations with shared pools. Returns the report and the
/// raw per-policy outcomes (fold-major, conversation-id order inside each
/// fold).
pub fn crossval(
    corpus: &[Conversation],
    set_aside: &[Conversation],
    params: &ExperimentParams,
    policies: &[PolicyKind],
) -> Result<(CrossvalReport, BTreeMap<String, Vec<EpisodeOutcome>>)> {
    if corpus.len() < params.folds * 2 {
        return Err(Error::InvalidFormat(format!(
            "need at least {} conversations for {} folds",
            params.folds * 2,
            params.folds
        )));
    }
    let split = fold_split(
        corpus,
        params.folds,
        derive_seed(params.seed, "fold-split", 0),
        SplitRole::AgentTrainEval,
    );
    let rotations = params.rotations.min(params.folds).max(1);
    let mut all: BTreeMap<String, Vec<EpisodeOutcome>> = BTreeMap::new();
    let mut per_fold: BTreeMap<String, Vec<FoldMetrics>> = BTreeMap::new();
    for fold in 0..rotations {
        let eval_ids = split.fold_members(fold);
        let train: Vec<Conversation> =
            corpus.iter().filter(|c| split.fold_of(&c.id) != Some(fold)).cloned().collect();
        let mut eval: Vec<Conversation> =
            corpus.iter().filter(|c| eval_ids.contains(&c.id.as_str())).cloned().collect();
        eval.sort_by(|a, b| a.id.cmp(&b.id));
        let models = train_fold(corpus, set_aside, &train, params, fold)?;
        let fold_outcomes =
            evaluate_policies(corpus, &models, &eval, params, params.tolerance, fold, policies)?;
        for (policy, outcomes) in fold_outcomes {
            per_fold.entry(policy.clone()).or_default().push(fold_metrics(fold, &outcomes)?);
            all.entry(policy).or_default().extend(outcomes);
        }
    }
    let mut reports = BTreeMap::new();
    for (policy, outcomes) in &all {
        let mut significance = BTreeMap::new();
        for baseline in BASELINES {
            if baseline == policy || !all.contains_key(baseline) {
                continue;
            }
            let a: Vec<f64> = outcomes.iter().map(|o| o.reciprocal_rank).collect();
            let b: Vec<f64> = all[baseline].iter().map(|o| o.reciprocal_rank).collect();
            significance.insert(baseline.to_string(), paired_ttest(&a, &b));
        }
        reports.insert(
            policy.clone(),
            MetricsReport {
                policy: policy.clone(),
                episodes: outcomes.len(),
                recall_at_1: recall_at_1(outcomes)?,
                mrr: mrr(outcomes)?,
                decision_error: decision_error(outcomes)?,
                per_fold: per_fold[policy].clone(),
                significance,
            },
        );
    }
    Ok((
        CrossvalReport {
            folds: params.folds,
            rotations,
            tolerance: params.tolerance,
            seed: params.seed,
            policies: reports,
        },
        all,
    ))
}

/// Same experiment with the decision network fed different feature
/// subsets.
pub fn ablate(
    corpus: &[Conversation],
    set_aside: &[Conversation],
    params: &ExperimentParams,
    modes: &[FeatureMode],
) -> Result<BTreeMap<String, MetricsReport>> {
    let mut out = BTreeMap::new();
    for &mode in modes {
        let mut p = params.clone();
        p.feature_mode = mode;
        let (report, _) = crossval(corpus, set_aside, &p, &[PolicyKind::Dqn])?;
        out.insert(feature_mode_name(mode).to_string(), report.policies["dqn"].clone());
    }
    Ok(out)
}

pub fn feature_mode_name(mode: FeatureMode) -> &'static str {
    match mode {
        FeatureMode::EncodedText => "encoded_text",
        FeatureMode::Score => "score",
        FeatureMode::Both => "encoded_text_plus_score",
    }
}

pub fn report_to_json(report: &CrossvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serialization")
}

pub fn report_to_csv(report: &CrossvalReport) -> String {
    let mut s = String::from("policy,episodes,recall_at_1,mrr,decision_error\n");
    for (name, m) in &report.policies {
        s.push_str(&format!(
            "{name},{},{},{},{}\n",
            m.episodes, m.recall_at_1, m.mrr, m.decision_error
        ));
    }
    s
}
