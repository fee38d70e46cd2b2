//! Bi-encoder and poly-encoder scoring heads over the text encoder,
//! in-batch-negative cross-entropy training, and ranking utilities.
//!
//! The bi-encoder projects the pooled context and candidate vectors
//! separately and scores by dot product. The poly-encoder attends the
//! context token vectors to m learnable codes, mixes the attended views by
//! candidate attention, and scores the mixture against the projected
//! candidate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CandidatePool, Conversation, ResponseKind};
use crate::encode::{Encoder, TokenSequenceEncoding};
use crate::neural::{dot, softmax, Mat, TrainingConfig};
use crate::{Error, Result};

/// Separate projections for context and candidate encodings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiEncoderHead {
    pub ctx_proj: Mat,
    pub cand_proj: Mat,
}

impl BiEncoderHead {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BiEncoderHead {
            ctx_proj: Mat::uniform_init(dim, dim, &mut rng),
            cand_proj: Mat::uniform_init(dim, dim, &mut rng),
        }
    }

    pub fn identity(dim: usize) -> Self {
        BiEncoderHead { ctx_proj: Mat::identity(dim), cand_proj: Mat::identity(dim) }
    }

    pub fn dim(&self) -> usize {
        self.ctx_proj.rows
    }
}

/// m learnable codes plus a candidate projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyEncoderHead {
    pub codes: Vec<Vec<f64>>,
    pub cand_proj: Mat,
}

impl PolyEncoderHead {
    pub fn new(dim: usize, m: usize, seed: u64) -> Self {
        assert!(m >= 1, "poly head needs at least one code");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = (0..m).map(|_| Mat::uniform_init(1, dim, &mut rng).data).collect();
        PolyEncoderHead { codes, cand_proj: Mat::uniform_init(dim, dim, &mut rng) }
    }

    pub fn dim(&self) -> usize {
        self.cand_proj.rows
    }

    pub fn n_codes(&self) -> usize {
        self.codes.len()
    }
}

/// A reranker head of either structure behind one scoring interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Head {
    Bi(BiEncoderHead),
    Poly(PolyEncoderHead),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Bi,
    Poly,
}

impl Head {
    pub fn new(kind: HeadKind, dim: usize, m: usize, seed: u64) -> Self {
        match kind {
            HeadKind::Bi => Head::Bi(BiEncoderHead::new(dim, seed)),
            HeadKind::Poly => Head::Poly(PolyEncoderHead::new(dim, m, seed)),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Head::Bi(h) => h.dim(),
            Head::Poly(h) => h.dim(),
        }
    }

    pub fn score(&self, context: &TokenSequenceEncoding, candidate: &TokenSequenceEncoding) -> Result<f64> {
        match self {
            Head::Bi(h) => score_bi(h, &context.pooled, &candidate.pooled),
            Head::Poly(h) => score_poly(h, &context.token_vectors, &candidate.pooled),
        }
    }

    pub fn prepare_context(&self, context: &TokenSequenceEncoding) -> PreparedContext {
        match self {
            Head::Bi(h) => PreparedContext::Bi { projected: h.ctx_proj.matvec(&context.pooled) },
            Head::Poly(h) => {
                PreparedContext::Poly { attended: attend_codes(&h.codes, &context.token_vectors) }
            }
        }
    }

    pub fn prepare_candidate(&self, candidate: &TokenSequenceEncoding) -> PreparedCandidate {
        let projected = match self {
            Head::Bi(h) => h.cand_proj.matvec(&candidate.pooled),
            Head::Poly(h) => h.cand_proj.matvec(&candidate.pooled),
        };
        PreparedCandidate { projected }
    }

    pub fn score_prepared(&self, context: &PreparedContext, candidate: &PreparedCandidate) -> f64 {
        match (self, context) {
            (Head::Bi(_), PreparedContext::Bi { projected }) => dot(projected, &candidate.projected),
            (Head::Poly(_), PreparedContext::Poly { attended }) => {
                mix_score(attended, &candidate.projected)
            }
            _ => panic!("prepared context does not match head kind"),
        }
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        match self {
            Head::Bi(h) => {
                let mut p = h.ctx_proj.data.clone();
                p.extend_from_slice(&h.cand_proj.data);
                p
            }
            Head::Poly(h) => {
                let mut p: Vec<f64> = h.codes.iter().flatten().copied().collect();
                p.extend_from_slice(&h.cand_proj.data);
                p
            }
        }
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "param vector length mismatch");
        match self {
            Head::Bi(h) => {
                let w = h.ctx_proj.data.len();
                h.ctx_proj.data.copy_from_slice(&params[..w]);
                h.cand_proj.data.copy_from_slice(&params[w..]);
            }
            Head::Poly(h) => {
                let d = h.cand_proj.rows;
                let mut off = 0;
                for code in h.codes.iter_mut() {
                    code.copy_from_slice(&params[off..off + d]);
                    off += d;
                }
                h.cand_proj.data.copy_from_slice(&params[off..]);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Head::Bi(h) => 2 * h.ctx_proj.data.len(),
            Head::Poly(h) => h.codes.len() * h.dim() + h.cand_proj.data.len(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("head serialization")
    }

    pub fn from_json(json: &str) -> Result<Head> {
        Ok(serde_json::from_str(json)?)
    }
}

/// Context prepared for repeated scoring against many candidates.
#[derive(Debug, Clone)]
pub enum PreparedContext {
    Bi { projected: Vec<f64> },
    Poly { attended: Vec<Vec<f64>> },
}

#[derive(Debug, Clone)]
pub struct PreparedCandidate {
    pub projected: Vec<f64>,
}

/// Dot product of separately projected encodings.
pub fn score_bi(head: &BiEncoderHead, context: &[f64], candidate: &[f64]) -> Result<f64> {
    let d = head.dim();
    if context.len() != d || candidate.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: if context.len() != d { context.len() } else { candidate.len() },
        });
    }
    Ok(dot(&head.ctx_proj.matvec(context), &head.cand_proj.matvec(candidate)))
}

/// Attended context views, one per code: q_i = sum_j softmax_j(C_i . h_j) h_j.
fn attend_codes(codes: &[Vec<f64>], tokens: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = codes[0].len();
    if tokens.is_empty() {
        return vec![vec![0.0; d]; codes.len()];
    }
    codes
        .iter()
        .map(|code| {
            let logits: Vec<f64> = tokens.iter().map(|h| dot(code, h)).collect();
            let w = softmax(&logits);
            let mut q = vec![0.0; d];
            for (wj, h) in w.iter().zip(tokens) {
                for (qv, hv) in q.iter_mut().zip(h) {
                    *qv += wj * hv;
                }
            }
            q
        })
        .collect()
}

/// Candidate-attended mixture score: softmax over (e . q_i) mixes the
/// attended views, and the mixture is scored against e.
fn mix_score(attended: &[Vec<f64>], projected_candidate: &[f64]) -> f64 {
    let u: Vec<f64> = attended.iter().map(|q| dot(projected_candidate, q)).collect();
    let a = softmax(&u);
    a.iter().zip(&u).map(|(ai, ui)| ai * ui).sum()
}

/// Full poly-encoder score of a context token sequence against a candidate
/// encoding.
pub fn score_poly(head: &PolyEncoderHead, tokens: &[Vec<f64>], candidate: &[f64]) -> Result<f64> {
    let d = head.dim();
    if candidate.len() != d {
        return Err(Error::DimensionMismatch { expected: d, actual: candidate.len() });
    }
    if let Some(t) = tokens.first() {
        if t.len() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: t.len() });
        }
    }
    let e = head.cand_proj.matvec(candidate);
    Ok(mix_score(&attend_codes(&head.codes, tokens), &e))
}

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub candidate_id: String,
    pub score: f64,
    pub text: String,
}

/// Candidates sorted by descending score, ties broken by ascending
/// candidate id. `truth_rank` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub kind: ResponseKind,
    pub entries: Vec<RankedEntry>,
    pub truth_rank: Option<usize>,
}

impl RankedList {
    /// 1/truth_rank, or 0 when no truth is present.
    pub fn truth_reciprocal_rank(&self) -> f64 {
        self.truth_rank.map(|r| 1.0 / r as f64).unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("candidate_id,score,rank,is_truth\n");
        for (i, e) in self.entries.iter().enumerate() {
            let is_truth = self.truth_rank == Some(i + 1);
            s.push_str(&format!("{},{},{},{}\n", e.candidate_id, e.score, i + 1, is_truth));
        }
        s
    }
}

fn sort_entries(entries: &mut [RankedEntry]) {
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.candidate_id.cmp(&b.candidate_id))
    });
}

/// Scores and sorts a candidate pool against a context.
pub fn rank(head: &Head, encoder: &Encoder, context_text: &str, pool: &CandidatePool) -> RankedList {
    let ctx = encoder.encode(context_text);
    let prepared = head.prepare_context(&ctx);
    let truth_id = pool.truth().map(|t| t.id.clone());
    let mut entries: Vec<RankedEntry> = pool
        .candidates
        .iter()
        .map(|c| {
            let cand = encoder.encode(&c.text);
            let score = head.score_prepared(&prepared, &head.prepare_candidate(&cand));
            RankedEntry { candidate_id: c.id.clone(), score, text: c.text.clone() }
        })
        .collect();
    sort_entries(&mut entries);
    let truth_rank = truth_id
        .and_then(|id| entries.iter().position(|e| e.candidate_id == id))
        .map(|p| p + 1);
    RankedList { kind: pool.kind, entries, truth_rank }
}

/// Ranking over candidates whose projections were prepared up front.
pub fn rank_prepared(
    head: &Head,
    prepared_context: &PreparedContext,
    candidates: &[(&str, &str, &PreparedCandidate)],
    kind: ResponseKind,
    truth_id: Option<&str>,
) -> RankedList {
    let mut entries: Vec<RankedEntry> = candidates
        .iter()
        .map(|(id, text, prep)| RankedEntry {
            candidate_id: (*id).to_string(),
            score: head.score_prepared(prepared_context, prep),
            text: (*text).to_string(),
        })
        .collect();
    sort_entries(&mut entries);
    let truth_rank = truth_id
        .and_then(|id| entries.iter().position(|e| e.candidate_id == id))
        .map(|p| p + 1);
    RankedList { kind, entries, truth_rank }
}

// ---------------------------------------------------------------------------
// In-batch negative training
// ---------------------------------------------------------------------------

/// One (context, positive response) training pair, pre-encoded.
#[derive(Debug, Clone)]
pub struct InbatchPair {
    pub context: TokenSequenceEncoding,
    pub positive: TokenSequenceEncoding,
}

/// Training pairs for the answer head: at every agent turn the context so
/// far pairs with the conversation's final answer. Pairs are grouped per
/// conversation so a batch never holds two pairs with the same positive.
pub fn answer_pairs(conversations: &[Conversation], encoder: &Encoder) -> Vec<Vec<InbatchPair>> {
    conversations
        .iter()
        .filter_map(|conv| {
            let answer = encoder.encode(conv.ground_truth_answer()?);
            let n = conv.n_agent_turns();
            let group: Vec<InbatchPair> = (1..=n)
                .map(|i| InbatchPair {
                    context: encoder.encode(&conv.context_text(i)),
                    positive: answer.clone(),
                })
                .collect();
            (!group.is_empty()).then_some(group)
        })
        .collect()
}

/// Training pairs for the question head: at every non-voted agent turn the
/// context so far pairs with that turn's clarifying question. The set-aside
/// pool participates too.
pub fn question_pairs(
    conversations: &[Conversation],
    set_aside: &[Conversation],
    encoder: &Encoder,
) -> Vec<Vec<InbatchPair>> {
    conversations
        .iter()
        .chain(set_aside)
        .filter_map(|conv| {
            let group: Vec<InbatchPair> = conv
                .agent_utterances()
                .enumerate()
                .filter(|(_, u)| !u.is_voted_answer)
                .map(|(idx, u)| InbatchPair {
                    context: encoder.encode(&conv.context_text(idx + 1)),
                    positive: encoder.encode(&u.text),
                })
                .collect();
            (!group.is_empty()).then_some(group)
        })
        .collect()
}

/// Mean cross-entropy over rows of an in-batch score matrix whose diagonal
/// holds the positives.
pub fn inbatch_ce_loss(scores: &Mat) -> f64 {
    assert_eq!(scores.rows, scores.cols, "in-batch score matrix must be square");
    let n = scores.rows;
    let mut loss = 0.0;
    for b in 0..n {
        let row = &scores.data[b * n..(b + 1) * n];
        let p = softmax(row);
        loss -= p[b].max(f64::MIN_POSITIVE).ln();
    }
    loss / n as f64
}

/// Loss and analytic parameter gradient (in `flatten_params` order) of the
/// in-batch cross-entropy on one batch of pairs.
pub fn inbatch_gradient(head: &Head, batch: &[&InbatchPair]) -> (f64, Vec<f64>) {
    let n = batch.len();
    assert!(n >= 2, "in-batch loss needs at least two pairs");
    let d = head.dim();
    match head {
        Head::Bi(h) => {
            let ctx_proj: Vec<Vec<f64>> =
                batch.iter().map(|p| h.ctx_proj.matvec(&p.context.pooled)).collect();
            let cand_proj: Vec<Vec<f64>> =
                batch.iter().map(|p| h.cand_proj.matvec(&p.positive.pooled)).collect();
            let mut scores = Mat::zeros(n, n);
            for b in 0..n {
                for j in 0..n {
                    *scores.at_mut(b, j) = dot(&ctx_proj[b], &cand_proj[j]);
                }
            }
            let loss = inbatch_ce_loss(&scores);
            let mut grad_ctx = Mat::zeros(d, d);
            let mut grad_cand = Mat::zeros(d, d);
            for b in 0..n {
                let row = &scores.data[b * n..(b + 1) * n];
                let p = softmax(row);
                for j in 0..n {
                    let delta = (p[j] - if j == b { 1.0 } else { 0.0 }) / n as f64;
                    if delta == 0.0 {
                        continue;
                    }
                    // s = (B x_b) . (A c_j): dA = delta (B x_b) c_j^T, dB = delta (A c_j) x_b^T
                    grad_cand.add_outer(delta, &ctx_proj[b], &batch[j].positive.pooled);
                    grad_ctx.add_outer(delta, &cand_proj[j], &batch[b].context.pooled);
                }
            }
            let mut g = grad_ctx.data;
            g.extend_from_slice(&grad_cand.data);
            (loss, g)
        }
        Head::Poly(h) => {
            let m = h.n_codes();
            struct Attn {
                weights: Vec<Vec<f64>>, // m x tokens
                views: Vec<Vec<f64>>,   // m x d
            }
            let attn: Vec<Attn> = batch
                .iter()
                .map(|p| {
                    let tokens = &p.context.token_vectors;
                    if tokens.is_empty() {
                        return Attn { weights: vec![Vec::new(); m], views: vec![vec![0.0; d]; m] };
                    }
                    let mut weights = Vec::with_capacity(m);
                    let mut views = Vec::with_capacity(m);
                    for code in &h.codes {
                        let logits: Vec<f64> = tokens.iter().map(|t| dot(code, t)).collect();
                        let w = softmax(&logits);
                        let mut q = vec![0.0; d];
                        for (wj, t) in w.iter().zip(tokens) {
                            for (qv, tv) in q.iter_mut().zip(t) {
                                *qv += wj * tv;
                            }
                        }
                        weights.push(w);
                        views.push(q);
                    }
                    Attn { weights, views }
                })
                .collect();
            let cand_proj: Vec<Vec<f64>> =
                batch.iter().map(|p| h.cand_proj.matvec(&p.positive.pooled)).collect();
            let mut scores = Mat::zeros(n, n);
            for b in 0..n {
                for j in 0..n {
                    *scores.at_mut(b, j) = mix_score(&attn[b].views, &cand_proj[j]);
                }
            }
            let loss = inbatch_ce_loss(&scores);
            let mut grad_codes = vec![vec![0.0; d]; m];
            let mut grad_proj = Mat::zeros(d, d);
            for b in 0..n {
                let row = &scores.data[b * n..(b + 1) * n];
                let p = softmax(row);
                let tokens = &batch[b].context.token_vectors;
                for j in 0..n {
                    let delta = (p[j] - if j == b { 1.0 } else { 0.0 }) / n as f64;
                    if delta == 0.0 || tokens.is_empty() {
                        continue;
                    }
                    let e = &cand_proj[j];
                    let u: Vec<f64> = attn[b].views.iter().map(|q| dot(e, q)).collect();
                    let a = softmax(&u);
                    let s: f64 = a.iter().zip(&u).map(|(ai, ui)| ai * ui).sum();
                    // ds/du_i through both the mixture weights and values.
                    let g: Vec<f64> = a.iter().zip(&u).map(|(ai, ui)| ai * (1.0 + ui - s)).collect();
                    // ds/de = sum_i g_i q_i, and e = cand_proj . c
                    let mut ds_de = vec![0.0; d];
                    for (gi, q) in g.iter().zip(&attn[b].views) {
                        for (dv, qv) in ds_de.iter_mut().zip(q) {
                            *dv += gi * qv;
                        }
                    }
                    grad_proj.add_outer(delta, &ds_de, &batch[j].positive.pooled);
                    // ds/dC_i = sum_t g_i w_it (e.h_t - e.q_i) h_t
                    for i in 0..m {
                        let eq = dot(e, &attn[b].views[i]);
                        for (t, h_t) in tokens.iter().enumerate() {
                            let coeff = delta * g[i] * attn[b].weights[i][t] * (dot(e, h_t) - eq);
                            if coeff == 0.0 {
                                continue;
                            }
                            for (gc, hv) in grad_codes[i].iter_mut().zip(h_t) {
                                *gc += coeff * hv;
                            }
                        }
                    }
                }
            }
            let mut grads: Vec<f64> = grad_codes.into_iter().flatten().collect();
            grads.extend_from_slice(&grad_proj.data);
            (loss, grads)
        }
    }
}

fn sgd_step(head: &mut Head, grads: &[f64], cfg: &TrainingConfig) {
    let lr = cfg.learning_rate;
    let lambda = cfg.l2_weight;
    let mut params = head.flatten_params();
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * (g + lambda * *p);
    }
    head.set_params(&params);
}

/// In-batch negative training. Each epoch draws one (context, positive)
/// variant per conversation group, shuffles the groups, and steps per
/// batch. Returns the per-epoch mean loss curve.
pub fn train_inbatch(
    head: &mut Head,
    groups: &[Vec<InbatchPair>],
    cfg: &TrainingConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.batch_size < 2 {
        return Err(Error::BatchTooSmall(cfg.batch_size));
    }
    if groups.len() < 2 {
        return Err(Error::BatchTooSmall(groups.len()));
    }
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, "inbatch-epoch", epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&InbatchPair> =
                chunk.iter().map(|&gi| &groups[gi][(epoch + gi) % groups[gi].len()]).collect();
            let (loss, grads) = inbatch_gradient(head, &batch);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: epoch });
            }
            sgd_step(head, &grads, cfg);
            epoch_losses.push(loss);
        }
        if epoch_losses.is_empty() {
            return Err(Error::BatchTooSmall(groups.len()));
        }
        curve.push(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);
    }
    Ok(curve)
}
