use std::time::Instant;

use convsearch::corpus::{generate_synthetic, SyntheticConfig};
use convsearch::eval::{crossval, ExperimentParams, PolicyKind, RerankerParams};
use convsearch::neural::TrainingConfig;
use convsearch::policy::{AgentTrainConfig, FeatureMode};
use convsearch::rerank::HeadKind;

fn main() {
    let t0 = Instant::now();
    let corpus = generate_synthetic(&SyntheticConfig {
        topics: 10,
        conversations_per_topic: 50,
        ambiguity_rate: 0.5,
        risk_marker_rate: 0.3,
        vocabulary_size: 1200,
        seed: 42,
    })
    .unwrap();
    let dim: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(192);
    let episodes: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let params = ExperimentParams {
        encoder_dim: dim,
        reranker: RerankerParams {
            kind: HeadKind::Bi,
            codes: 4,
            training: TrainingConfig {
                learning_rate: 0.5,
                l2_weight: 1e-4,
                batch_size: 50,
                epochs: 15,
                seed: 0,
            },
        },
        agent: AgentTrainConfig {
            episodes,
            replay_every: 1,
            replay_batches: 2,
            buffer_capacity: 10_000,
            ask_multiplicity: 3,
            optimizer: TrainingConfig {
                learning_rate: 3e-3,
                l2_weight: 1e-4,
                batch_size: 32,
                epochs: 0,
                seed: 0,
            },
            schedule: Default::default(),
        },
        ctxpred_training: TrainingConfig {
            learning_rate: 0.5,
            l2_weight: 0.0,
            batch_size: 16,
            epochs: 60,
            seed: 0,
        },
        dqn_hidden: 64,
        tolerance: 0,
        n_negatives: 99,
        folds: 5,
        rotations: 1,
        feature_mode: FeatureMode::Both,
        seed: 7,
        ..Default::default()
    };
    let (report, _) = crossval(&corpus, &[], &params, &PolicyKind::ALL).unwrap();
    println!("dim={dim} episodes={episodes} elapsed={:?}", t0.elapsed());
    println!("{:<14} {:>8} {:>8} {:>8}", "policy", "r@1", "mrr", "dec.err");
    for (name, m) in &report.policies {
        println!("{:<14} {:>8.4} {:>8.4} {:>8.4}", name, m.recall_at_1, m.mrr, m.decision_error);
    }
}
