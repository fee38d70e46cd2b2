use convsearch::corpus::{fold_split, generate_synthetic, SplitRole, SyntheticConfig};
use convsearch::eval::{train_fold, ExperimentParams, RerankerParams};
use convsearch::neural::TrainingConfig;
use convsearch::policy::{AgentTrainConfig, FeatureMode};
use convsearch::rerank::HeadKind;
use convsearch::simulate::EpisodeEnv;

fn main() {
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
        agent: AgentTrainConfig { episodes: 0, ..Default::default() },
        dqn_hidden: 64,
        tolerance: 0,
        n_negatives: 99,
        folds: 5,
        rotations: 1,
        feature_mode: FeatureMode::Both,
        seed: 7,
        ..Default::default()
    };
    let split = fold_split(&corpus, 5, convsearch::derive_seed(7, "fold-split", 0), SplitRole::AgentTrainEval);
    let train: Vec<_> = corpus.iter().filter(|c| split.fold_of(&c.id) != Some(0)).cloned().collect();
    let eval: Vec<_> = corpus.iter().filter(|c| split.fold_of(&c.id) == Some(0)).cloned().collect();
    let models = train_fold(&corpus, &[], &train, &params, 0).unwrap();
    println!("answer loss curve: {:?}", models.answer_loss_curve.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    println!("question loss curve: {:?}", models.question_loss_curve.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    let env = EpisodeEnv::new(
        &corpus, &models.encoder, &models.answer_head, &models.question_head,
        99, convsearch::derive_seed(7, "pools", 0), 2, FeatureMode::Both,
    );
    let prepared = env.prepare_all(&eval).unwrap();
    // Classify eval conversations by their structure.
    let mut stats: std::collections::BTreeMap<&str, Vec<(f64, Option<usize>, f64, f64, f64, f64, f64)>> = Default::default();
    for (conv, prep) in eval.iter().zip(&prepared) {
        let query = conv.initial_query();
        let question = conv.agent_text(1).unwrap();
        let class = if query.contains(" urgent") {
            "trap"
        } else if question.starts_with("which variant") {
            "ambiguous"
        } else {
            "unambiguous"
        };
        let ans_margin = prep.turns[0].state.answer_scores[0] - prep.turns[0].state.answer_scores[1];
        let q_top = prep.turns[0].state.question_scores[0];
        stats.entry(class).or_default().push((
            prep.plan.answer_rr[0],
            prep.plan.question_relevant_pos[0],
            prep.plan.answer_rr[1],
            ans_margin,
            q_top,
            prep.turns[0].state.answer_scores[0],
            prep.turns[0].state.question_scores[1],
        ));
    }
    for (class, rows) in &stats {
        let n = rows.len() as f64;
        let rr1: f64 = rows.iter().map(|r| r.0).sum::<f64>() / n;
        let pos1_frac = rows.iter().filter(|r| r.1 == Some(1)).count() as f64 / n;
        let pos_le3 = rows.iter().filter(|r| matches!(r.1, Some(p) if p <= 3)).count() as f64 / n;
        let median_pos: Vec<usize> = { let mut v: Vec<usize> = rows.iter().filter_map(|r| r.1).collect(); v.sort(); v };
        let rr2: f64 = rows.iter().map(|r| r.2).sum::<f64>() / n;
        let margin: f64 = rows.iter().map(|r| r.3).sum::<f64>() / n;
        let qtop: f64 = rows.iter().map(|r| r.4).sum::<f64>() / n;
        let atop: f64 = rows.iter().map(|r| r.5).sum::<f64>() / n;
        println!(
            "{class:<12} n={:>3} t1_rr={rr1:.3} qpos1={pos1_frac:.2} qpos<=3={pos_le3:.2} medpos={:?} t2_rr={rr2:.3} ans_margin={margin:.3} a_top={atop:.3} q_top={qtop:.3}",
            rows.len(),
            median_pos.get(median_pos.len() / 2),
        );
    }
}
