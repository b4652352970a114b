//! Ranking (1 positive + sampled negatives) and retrieval (all items)
//! protocols with HR, NDCG and MRR at fixed cutoffs.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align_personal::sample_negatives;
use crate::corpus::InteractionCorpus;
use crate::error::{MapsError, Result};
use crate::model::{MapsModel, ModelInputs};

pub const HR_NDCG_CUTOFFS: [usize; 4] = [5, 10, 20, 50];
pub const MRR_CUTOFFS: [usize; 3] = [10, 20, 50];
pub const RANKING_NEGATIVES: usize = 99;

fn check_rank(rank: usize) -> Result<()> {
    if rank < 1 {
        return Err(MapsError::Contract("ranks start at 1".into()));
    }
    Ok(())
}

pub fn hr_at_k(rank: usize, k: usize) -> Result<f64> {
    check_rank(rank)?;
    Ok(if rank <= k { 1.0 } else { 0.0 })
}

/// Single relevant item, so the ideal DCG is 1.
pub fn ndcg_at_k(rank: usize, k: usize) -> Result<f64> {
    check_rank(rank)?;
    Ok(if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 })
}

pub fn mrr_at_k(rank: usize, k: usize) -> Result<f64> {
    check_rank(rank)?;
    Ok(if rank <= k { 1.0 / rank as f64 } else { 0.0 })
}

fn before(sa: f64, ida: &str, sb: f64, idb: &str) -> bool {
    match sa.total_cmp(&sb) {
        Ordering::Greater => true,
        Ordering::Equal => ida < idb,
        Ordering::Less => false,
    }
}

/// Candidate positions by descending score, ties by ascending item id.
pub fn rank_candidates(scores: &[f64], ids: &[&str]) -> Vec<usize> {
    assert_eq!(scores.len(), ids.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(ids[b])));
    order
}

/// 1-based rank of position `target` under the ordering of [`rank_candidates`].
pub fn rank_of(scores: &[f64], ids: &[&str], target: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| j != target && before(scores[j], ids[j], scores[target], ids[target]))
        .count()
}

/// Anything that scores every corpus item for a session.
pub trait SessionScorer {
    fn score_all(&self, session: usize) -> Result<Vec<f64>>;

    fn score_all_batch(&self, sessions: &[usize]) -> Result<Vec<Vec<f64>>> {
        sessions.iter().map(|&s| self.score_all(s)).collect()
    }
}

/// Trained model over a fixed set of inputs.
pub struct ModelScorer<'a> {
    pub model: &'a MapsModel,
    pub inputs: &'a ModelInputs<'a>,
    /// Sessions sharing one tape.
    pub chunk: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a MapsModel, inputs: &'a ModelInputs<'a>) -> Self {
        Self { model, inputs, chunk: 16 }
    }
}

impl SessionScorer for ModelScorer<'_> {
    fn score_all(&self, session: usize) -> Result<Vec<f64>> {
        Ok(self.score_all_batch(&[session])?.remove(0))
    }

    fn score_all_batch(&self, sessions: &[usize]) -> Result<Vec<Vec<f64>>> {
        let all: Vec<usize> = (0..self.inputs.corpus.items().len()).collect();
        let mut out = Vec::with_capacity(sessions.len());
        for chunk in sessions.chunks(self.chunk.max(1)) {
            let reqs: Vec<(usize, Vec<usize>)> = chunk.iter().map(|&s| (s, all.clone())).collect();
            out.extend(self.model.score_sessions(self.inputs, &reqs)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRank {
    pub session: usize,
    pub user_id: String,
    pub item_id: String,
    /// Rank among the ground truth and its sampled negatives.
    pub ranking_rank: usize,
    /// Rank among all items.
    pub retrieval_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub protocol: String,
    pub ranking_candidates: usize,
    pub retrieval_candidates: usize,
    pub sessions: usize,
    pub checkpoint_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
    pub metadata: ReportMetadata,
    pub ranks: Vec<SessionRank>,
}

impl EvalReport {
    pub fn metric(&self, key: &str) -> f64 {
        self.metrics[key]
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Ranks under both protocols for each session.
pub fn session_ranks(
    scorer: &dyn SessionScorer,
    corpus: &InteractionCorpus,
    sessions: &[usize],
    num_neg: usize,
    seed: u64,
) -> Result<Vec<SessionRank>> {
    let n = corpus.items().len();
    if n < num_neg + 1 {
        return Err(MapsError::Sampling(format!("ranking protocol needs {} items, corpus has {n}", num_neg + 1)));
    }
    let ids: Vec<&str> = corpus.items().iter().map(|i| i.item_id.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let negatives: Vec<Vec<usize>> = sessions
        .iter()
        .map(|&s| sample_negatives(&mut rng, n, corpus.sessions()[s].clicked_item.0, num_neg))
        .collect::<Result<_>>()?;
    let scores = scorer.score_all_batch(sessions)?;
    let mut out = Vec::with_capacity(sessions.len());
    for ((&s, negs), all) in sessions.iter().zip(&negatives).zip(&scores) {
        if all.len() != n {
            return Err(MapsError::Contract(format!("scorer returned {} scores for {n} items", all.len())));
        }
        let sess = &corpus.sessions()[s];
        let gt = sess.clicked_item.0;
        let mut cand = vec![gt];
        cand.extend_from_slice(negs);
        let cs: Vec<f64> = cand.iter().map(|&v| all[v]).collect();
        let cid: Vec<&str> = cand.iter().map(|&v| ids[v]).collect();
        out.push(SessionRank {
            session: s,
            user_id: corpus.user(sess.user).user_id.clone(),
            item_id: ids[gt].to_string(),
            ranking_rank: rank_of(&cs, &cid, 0),
            retrieval_rank: rank_of(all, &ids, gt),
        });
    }
    Ok(out)
}

/// HR@k and NDCG@k means of ranking-protocol ranks.
pub fn ranking_metrics(ranks: &[usize]) -> Result<BTreeMap<String, f64>> {
    if ranks.is_empty() {
        return Err(MapsError::EmptyInput("no sessions to evaluate".into()));
    }
    let n = ranks.len() as f64;
    let mut m = BTreeMap::new();
    for k in HR_NDCG_CUTOFFS {
        let mut hr = 0.0;
        let mut nd = 0.0;
        for &r in ranks {
            hr += hr_at_k(r, k)?;
            nd += ndcg_at_k(r, k)?;
        }
        m.insert(format!("HR@{k}"), hr / n);
        m.insert(format!("NDCG@{k}"), nd / n);
    }
    Ok(m)
}

/// MRR@k means of retrieval-protocol ranks.
pub fn retrieval_metrics(ranks: &[usize]) -> Result<BTreeMap<String, f64>> {
    if ranks.is_empty() {
        return Err(MapsError::EmptyInput("no sessions to evaluate".into()));
    }
    let n = ranks.len() as f64;
    let mut m = BTreeMap::new();
    for k in MRR_CUTOFFS {
        let mut s = 0.0;
        for &r in ranks {
            s += mrr_at_k(r, k)?;
        }
        m.insert(format!("MRR@{k}"), s / n);
    }
    Ok(m)
}

/// Ranking protocol alone.
pub fn ranking_protocol(
    scorer: &dyn SessionScorer,
    corpus: &InteractionCorpus,
    sessions: &[usize],
    num_neg: usize,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let ranks = session_ranks(scorer, corpus, sessions, num_neg, seed)?;
    ranking_metrics(&ranks.iter().map(|r| r.ranking_rank).collect::<Vec<_>>())
}

/// Retrieval protocol alone: every corpus item is a candidate.
pub fn retrieval_protocol(
    scorer: &dyn SessionScorer,
    corpus: &InteractionCorpus,
    sessions: &[usize],
) -> Result<BTreeMap<String, f64>> {
    let ids: Vec<&str> = corpus.items().iter().map(|i| i.item_id.as_str()).collect();
    let scores = scorer.score_all_batch(sessions)?;
    let ranks: Vec<usize> =
        sessions.iter().zip(&scores).map(|(&s, all)| rank_of(all, &ids, corpus.sessions()[s].clicked_item.0)).collect();
    retrieval_metrics(&ranks)
}

/// Both protocols: eight ranking metrics plus three retrieval metrics.
pub fn evaluate(
    scorer: &dyn SessionScorer,
    corpus: &InteractionCorpus,
    sessions: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    let ranks = session_ranks(scorer, corpus, sessions, RANKING_NEGATIVES, seed)?;
    let mut metrics = ranking_metrics(&ranks.iter().map(|r| r.ranking_rank).collect::<Vec<_>>())?;
    metrics.extend(retrieval_metrics(&ranks.iter().map(|r| r.retrieval_rank).collect::<Vec<_>>())?);
    Ok(EvalReport {
        metrics,
        metadata: ReportMetadata {
            seed,
            protocol: "ranking+retrieval".into(),
            ranking_candidates: RANKING_NEGATIVES + 1,
            retrieval_candidates: corpus.items().len(),
            sessions: sessions.len(),
            checkpoint_sha256: None,
        },
        ranks,
    })
}

/// Validation NDCG@10: ranking protocol when the corpus has enough items,
/// otherwise over all items.
pub fn validation_ndcg10(
    scorer: &dyn SessionScorer,
    corpus: &InteractionCorpus,
    sessions: &[usize],
    seed: u64,
) -> Result<f64> {
    if corpus.items().len() > RANKING_NEGATIVES {
        return Ok(ranking_protocol(scorer, corpus, sessions, RANKING_NEGATIVES, seed)?["NDCG@10"]);
    }
    let ids: Vec<&str> = corpus.items().iter().map(|i| i.item_id.as_str()).collect();
    let scores = scorer.score_all_batch(sessions)?;
    let mut total = 0.0;
    for (&s, all) in sessions.iter().zip(&scores) {
        total += ndcg_at_k(rank_of(all, &ids, corpus.sessions()[s].clicked_item.0), 10)?;
    }
    if sessions.is_empty() {
        return Err(MapsError::EmptyInput("no validation sessions".into()));
    }
    Ok(total / sessions.len() as f64)
}
