//! Token-to-item mapping from per-item text collections, filtered by search
//! frequency, and the bidirectional in-batch contrastive loss over it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::consult_rules::{relevant_consultations, RelevanceLevel, RelevanceRuleConfig};
use crate::corpus::{InteractionCorpus, ItemIdx};
use crate::embed_store::TokenEmbeddingStore;
use crate::error::{MapsError, Result};
use crate::tensor::Mat;

/// Multiset of token ids gathered for one item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemTextCollection {
    pub item: ItemIdx,
    pub counts: BTreeMap<u32, usize>,
}

impl ItemTextCollection {
    fn add_text(&mut self, store: &TokenEmbeddingStore, text: &str) {
        if text.trim().is_empty() {
            return;
        }
        for t in store.tokenize(text) {
            *self.counts.entry(t).or_default() += 1;
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.counts.keys().copied()
    }
}

/// Collections for every item: own textual features, queries of sessions that
/// clicked it, and consultations related to those sessions under `rule`.
/// A consultation related to several such sessions contributes once.
pub fn build_text_collections(
    corpus: &InteractionCorpus,
    store: &TokenEmbeddingStore,
    rule: &RelevanceRuleConfig,
) -> Vec<ItemTextCollection> {
    let mut out: Vec<ItemTextCollection> = (0..corpus.items().len())
        .map(|i| ItemTextCollection { item: ItemIdx(i), counts: BTreeMap::new() })
        .collect();
    for (i, item) in corpus.items().iter().enumerate() {
        for (_, text) in &item.textual_features {
            out[i].add_text(store, text);
        }
    }
    let mut consults: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); corpus.items().len()];
    for (si, s) in corpus.sessions().iter().enumerate() {
        out[s.clicked_item.0].add_text(store, &s.query_text);
        consults[s.clicked_item.0].extend(relevant_consultations(corpus, si, rule));
    }
    for (i, set) in consults.iter().enumerate() {
        for &c in set {
            out[i].add_text(store, &corpus.consultations()[c].full_text());
        }
    }
    out
}

pub fn build_text_collection(
    corpus: &InteractionCorpus,
    store: &TokenEmbeddingStore,
    item: ItemIdx,
    rule: &RelevanceRuleConfig,
) -> ItemTextCollection {
    build_text_collections(corpus, store, rule).swap_remove(item.0)
}

/// Token occurrences over search-scenario texts: every session's query and
/// the title of its clicked item.
pub fn search_frequencies(corpus: &InteractionCorpus, store: &TokenEmbeddingStore) -> HashMap<u32, usize> {
    let mut freq = HashMap::new();
    for s in corpus.sessions() {
        let title = corpus.item(s.clicked_item).title();
        for text in [s.query_text.as_str(), title] {
            if text.trim().is_empty() {
                continue;
            }
            for t in store.tokenize(text) {
                *freq.entry(t).or_default() += 1;
            }
        }
    }
    freq
}

/// `{w in A_v : freq(w) > t}`; a negative `t` disables the filter.
pub fn filter_by_search_frequency(collection: &ItemTextCollection, freq: &HashMap<u32, usize>, t: i64) -> BTreeSet<u32> {
    collection
        .tokens()
        .filter(|w| t < 0 || freq.get(w).copied().unwrap_or(0) as i64 > t)
        .collect()
}

/// Deduplicated `(token, item)` pairs that drive the alignment loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenItemMapping {
    pub pairs: Vec<(u32, ItemIdx)>,
    pub threshold: i64,
}

impl TokenItemMapping {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `token<TAB>item_id` lines with a header.
    pub fn write_tsv(&self, path: impl AsRef<Path>, store: &TokenEmbeddingStore, corpus: &InteractionCorpus) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "token\titem_id")?;
        for &(t, v) in &self.pairs {
            writeln!(f, "{}\t{}", store.token(t), corpus.item(v).item_id)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Relevance rule used to pick the consultations that enter item collections.
pub fn collection_rule(window_days: u64) -> RelevanceRuleConfig {
    RelevanceRuleConfig { level: RelevanceLevel::Lenient, window_days, per_term_lenient: false }
}

/// Mapping from a training-period corpus. Pairs are sorted by `(item, token)`.
pub fn build_mapping(
    train: &InteractionCorpus,
    store: &TokenEmbeddingStore,
    t: i64,
    rule: &RelevanceRuleConfig,
) -> TokenItemMapping {
    let freq = search_frequencies(train, store);
    let mut pairs = Vec::new();
    for c in build_text_collections(train, store, rule) {
        for w in filter_by_search_frequency(&c, &freq, t) {
            pairs.push((w, c.item));
        }
    }
    if pairs.is_empty() {
        log::warn!("token-item mapping is empty at threshold {t}; alignment loss will be skipped");
    }
    TokenItemMapping { pairs, threshold: t }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau1: f64,
    pub tau2: f64,
    /// Exclude the positive pair from each denominator.
    pub paper_literal_denominator: bool,
}

impl Default for GaLossConfig {
    fn default() -> Self {
        Self { lambda1: 0.5, lambda2: 0.5, tau1: 0.1, tau2: 0.1, paper_literal_denominator: false }
    }
}

const MASKED: f64 = -1e30;

/// Bidirectional in-batch contrastive loss for row-aligned token and item
/// embeddings `B x d`, summed over the batch.
pub fn ga_loss(tape: &mut Tape, e_t: Var, e_v: Var, cfg: &GaLossConfig) -> Result<Var> {
    let b = tape.value(e_t).rows();
    if b < 2 || tape.value(e_v).rows() != b {
        return Err(MapsError::Contract(format!("contrastive batch needs >= 2 aligned pairs, got {b}")));
    }
    if cfg.tau1 <= 0.0 || cfg.tau2 <= 0.0 {
        return Err(MapsError::Config("ga temperatures must be positive".into()));
    }
    // s[i][j] = e_t[i] . e_v[j]
    let s = tape.matmul_bt(e_t, e_v);
    let pos = tape.row_dots(e_t, e_v);
    let diag_mask = cfg.paper_literal_denominator.then(|| {
        let mut m = Mat::zeros(b, b);
        for i in 0..b {
            m.set(i, i, MASKED);
        }
        tape.constant(m)
    });
    let mut terms = Vec::new();
    for (lambda, tau, by_token) in [(cfg.lambda1, cfg.tau1, true), (cfg.lambda2, cfg.tau2, false)] {
        if lambda == 0.0 {
            continue;
        }
        // token direction: candidates are all batch tokens for a fixed item
        let m = if by_token { tape.transpose(s) } else { s };
        let mut scaled = tape.scale(m, 1.0 / tau);
        if let Some(mask) = diag_mask {
            scaled = tape.add(scaled, mask);
        }
        let lse = tape.log_sum_exp_rows(scaled, None);
        let p = tape.scale(pos, 1.0 / tau);
        let d = tape.sub(lse, p);
        let total = tape.sum(d);
        terms.push(tape.scale(total, lambda));
    }
    if terms.is_empty() {
        return Ok(tape.constant(Mat::scalar(0.0)));
    }
    Ok(tape.add_all(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Consultation, ItemRecord, SearchSession, UserIdx, UserRecord};

    fn store(words: &[&str]) -> TokenEmbeddingStore {
        let vocab: Vec<String> = words.iter().map(|s| s.to_string()).collect();
        let table = Mat::from_vec(vocab.len(), 2, (0..vocab.len() * 2).map(|x| x as f64).collect());
        TokenEmbeddingStore::from_parts(vocab, table).unwrap()
    }

    fn item(id: &str, title: &str) -> ItemRecord {
        ItemRecord {
            item_id: id.into(),
            categorical_features: vec![("item_id".into(), id.into())],
            textual_features: vec![("title".into(), title.into())],
        }
    }

    fn corpus(items: Vec<ItemRecord>, sessions: Vec<(&str, usize, u64)>, consults: Vec<(&str, u64)>) -> InteractionCorpus {
        let users = vec![UserRecord { user_id: "u".into(), categorical_features: vec![], textual_features: vec![] }];
        let sessions = sessions
            .into_iter()
            .map(|(q, v, ts)| SearchSession { user: UserIdx(0), timestamp: ts, query_text: q.into(), clicked_item: ItemIdx(v) })
            .collect();
        let consults = consults
            .into_iter()
            .map(|(t, ts)| Consultation { user: UserIdx(0), timestamp: ts, inquiry_text: t.into(), response_text: String::new() })
            .collect();
        InteractionCorpus::new(users, items, sessions, consults).unwrap()
    }

    fn multiset(st: &TokenEmbeddingStore, c: &ItemTextCollection) -> BTreeMap<String, usize> {
        c.counts.iter().map(|(&t, &n)| (st.token(t).to_string(), n)).collect()
    }

    #[test]
    fn collection_multiset() {
        let st = store(&["alpha", "beta", "gamma"]);
        let c = corpus(vec![item("a", "alpha beta"), item("b", "gamma")], vec![("beta", 0, 100), ("beta", 0, 200)], vec![]);
        let rule = collection_rule(7);
        let got = multiset(&st, &build_text_collection(&c, &st, ItemIdx(0), &rule));
        // oracle: title tokens + each click's query tokens
        let mut oracle = BTreeMap::new();
        for w in "alpha beta beta beta".split(' ') {
            *oracle.entry(w.to_string()).or_insert(0) += 1;
        }
        assert_eq!(got, oracle, "duplicate queries count twice");
        let lone = multiset(&st, &build_text_collection(&c, &st, ItemIdx(1), &rule));
        assert_eq!(lone, BTreeMap::from([("gamma".to_string(), 1)]));

        let c1 = corpus(vec![item("a", "alpha beta")], vec![("beta", 0, 100)], vec![]);
        let one = multiset(&st, &build_text_collection(&c1, &st, ItemIdx(0), &rule));
        assert_eq!(one, BTreeMap::from([("alpha".to_string(), 1), ("beta".to_string(), 2)]));
    }

    #[test]
    fn related_consultations_are_included_once() {
        let st = store(&["alpha", "beta", "gamma", "delta"]);
        let c = corpus(
            vec![item("a", "alpha beta")],
            vec![("gamma", 0, 1000), ("gamma", 0, 2000)],
            vec![("alpha beta delta", 10), ("delta only", 20)],
        );
        let got = multiset(&st, &build_text_collection(&c, &st, ItemIdx(0), &collection_rule(7)));
        assert_eq!(got["delta"], 1);
        assert_eq!(got["alpha"], 2);
        assert!(!got.contains_key("only"));
    }

    #[test]
    fn frequency_filter_toy() {
        let st = store(&["phone", "cool", "case"]);
        // six lines: sessions whose query+title carry phone x5 and cool x1
        let c = corpus(
            vec![item("p", "phone"), item("q", "case")],
            vec![("phone", 0, 10), ("phone", 0, 20), ("cool", 1, 30)],
            vec![],
        );
        let freq = search_frequencies(&c, &st);
        let ph = st.token_id("phone").unwrap();
        let co = st.token_id("cool").unwrap();
        assert_eq!(freq[&ph], 4);
        assert_eq!(freq[&co], 1);
        let mut freq = freq;
        freq.insert(ph, 5);
        let coll = ItemTextCollection { item: ItemIdx(0), counts: BTreeMap::from([(ph, 1), (co, 1)]) };
        assert_eq!(filter_by_search_frequency(&coll, &freq, 2), BTreeSet::from([ph]));
        assert_eq!(filter_by_search_frequency(&coll, &freq, 0), BTreeSet::from([ph, co]));
        assert!(filter_by_search_frequency(&coll, &freq, 5).is_empty());
        assert_eq!(filter_by_search_frequency(&coll, &freq, -1).len(), 2);
    }

    #[test]
    fn mapping_counts_and_train_only() {
        let st = store(&["a1", "a2", "a3", "b1", "b2", "b3", "both"]);
        let items = vec![item("a", "a1 a2 a3"), item("b", "b1 b2 b3")];
        let c = corpus(items.clone(), vec![("a1 a2 a3", 0, 10), ("b1 b2 b3", 1, 20)], vec![]);
        let m = build_mapping(&c, &st, 0, &collection_rule(7));
        assert_eq!(m.len(), 6);
        let c2 = corpus(
            vec![item("a", "a1 a2 a3 both"), item("b", "b1 b2 b3 both")],
            vec![("a1 a2 a3", 0, 10), ("b1 b2 b3", 1, 20)],
            vec![],
        );
        let m2 = build_mapping(&c2, &st, 0, &collection_rule(7));
        let both = st.token_id("both").unwrap();
        assert_eq!(m2.pairs.iter().filter(|p| p.0 == both).count(), 2);
        assert!(build_mapping(&c, &st, 100, &collection_rule(7)).is_empty());
    }

    #[test]
    fn tsv_export() {
        let st = store(&["a1", "b1"]);
        let c = corpus(vec![item("a", "a1"), item("b", "b1")], vec![("a1", 0, 10), ("b1", 1, 20)], vec![]);
        let m = build_mapping(&c, &st, 0, &collection_rule(7));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("token_item_map.tsv");
        m.write_tsv(&p, &st, &c).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "token\titem_id\na1\ta\nb1\tb\n");
    }

    fn loss_of(et: Mat, ev: Mat, cfg: &GaLossConfig) -> f64 {
        let mut t = Tape::new();
        let a = t.constant(et);
        let b = t.constant(ev);
        let l = ga_loss(&mut t, a, b, cfg).unwrap();
        t.scalar_value(l)
    }

    #[test]
    fn closed_forms() {
        let same = Mat::from_rows(&[vec![0.3, 0.4], vec![0.3, 0.4]]);
        let cfg = GaLossConfig { lambda1: 1.0, lambda2: 1.0, tau1: 1.0, tau2: 1.0, paper_literal_denominator: false };
        assert!((loss_of(same.clone(), same.clone(), &cfg) - 4.0 * 2f64.ln()).abs() < 1e-12);
        let half = GaLossConfig { lambda2: 0.0, ..cfg };
        assert!((loss_of(same.clone(), same, &half) - 2.0 * 2f64.ln()).abs() < 1e-12);

        // e_t1.e_v1 = 2, e_t1.e_v2 = 0, e_t2.e_v2 = 2, e_t2.e_v1 = 0
        let et = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let ev = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let cfg = GaLossConfig { lambda1: 0.5, lambda2: 0.5, tau1: 1.0, tau2: 1.0, paper_literal_denominator: false };
        let e2 = 2f64.exp();
        let oracle = 2.0 * -(e2 / (e2 + 1.0)).ln();
        let got = loss_of(et, ev, &cfg);
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.2539).abs() < 1e-4);
    }

    #[test]
    fn literal_denominator_excludes_positive() {
        let et = Mat::from_rows(&[vec![1.0, 0.5], vec![-0.2, 0.3], vec![0.1, 0.1]]);
        let ev = Mat::from_rows(&[vec![0.4, 0.2], vec![0.3, -0.1], vec![-0.5, 0.6]]);
        let cfg = GaLossConfig { lambda1: 0.3, lambda2: 0.7, tau1: 0.5, tau2: 0.2, paper_literal_denominator: true };
        let s = et.matmul_bt(&ev);
        let mut oracle = 0.0;
        for i in 0..3 {
            let col: Vec<f64> = (0..3).filter(|&j| j != i).map(|j| s.get(j, i) / 0.5).collect();
            let row: Vec<f64> = (0..3).filter(|&j| j != i).map(|j| s.get(i, j) / 0.2).collect();
            oracle += 0.3 * (crate::tensor::log_sum_exp(&col) - s.get(i, i) / 0.5);
            oracle += 0.7 * (crate::tensor::log_sum_exp(&row) - s.get(i, i) / 0.2);
        }
        assert!((loss_of(et, ev, &cfg) - oracle).abs() < 1e-9);
    }

    #[test]
    fn degenerate_batch_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Mat::zeros(1, 2));
        assert!(ga_loss(&mut t, a, a, &GaLossConfig::default()).is_err());
    }

    #[test]
    fn permutation_invariant_and_monotone() {
        let et = Mat::from_rows(&[vec![1.0, 0.5], vec![-0.2, 0.3], vec![0.1, 0.9]]);
        let ev = Mat::from_rows(&[vec![0.4, 0.2], vec![0.3, -0.1], vec![-0.5, 0.6]]);
        let cfg = GaLossConfig::default();
        let base = loss_of(et.clone(), ev.clone(), &cfg);
        let perm = |m: &Mat| Mat::from_rows(&[m.row(2).to_vec(), m.row(0).to_vec(), m.row(1).to_vec()]);
        assert!((loss_of(perm(&et), perm(&ev), &cfg) - base).abs() < 1e-9);
        // orthonormal items: moving e_t0 along e_v0 changes only s[0][0]
        let ev = Mat::identity(3);
        let et = Mat::from_rows(&[vec![1.0, 0.5, 0.0], vec![-0.2, 0.3, 0.4], vec![0.1, 0.9, -0.3]]);
        let base = loss_of(et.clone(), ev.clone(), &cfg);
        let mut et2 = et.clone();
        et2.set(0, 0, 1.01);
        assert!(loss_of(et2, ev, &cfg) < base);
    }
}
