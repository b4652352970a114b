//! The full ranking model: parameters, per-corpus inputs, and a memoizing
//! forward pass over one tape.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align_general::{ga_loss, GaLossConfig};
use crate::align_personal::{
    aggregate_motivation, encode_motivation, final_query_embedding, pa_loss_from_scores, EncoderConfig,
    MotivationWeights, TransformerEncoder,
};
use crate::autograd::{Tape, Var};
use crate::corpus::{feature, CorpusSchema, InteractionCorpus, ItemIdx};
use crate::embed_store::{TextProjection, TokenEmbeddingStore};
use crate::error::{MapsError, Result};
use crate::fusion::{CategoryLookup, EntityEmbedder, EntityKind, FusionAblation, HeadActivation, HeadInputs};
use crate::moae::{CrossQuery, Moae, MoaeConfig, PreparedText};
use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_t: usize,
    pub d_uni: usize,
    pub d_id: usize,
    pub head_layers: usize,
    pub activation: HeadActivation,
    pub ablate: FusionAblation,
    pub moae: MoaeConfig,
    pub encoder_layers: usize,
    pub heads: usize,
    pub positional: bool,
    pub max_history: usize,
    pub disable_consult: bool,
    pub disable_query_hist: bool,
    pub disable_all: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_t: 32,
            d_uni: 64,
            d_id: 16,
            head_layers: 1,
            activation: HeadActivation::Tanh,
            ablate: FusionAblation::None,
            moae: MoaeConfig::default(),
            encoder_layers: 1,
            heads: 2,
            positional: false,
            max_history: 30,
            disable_consult: false,
            disable_query_hist: false,
            disable_all: false,
        }
    }
}

/// Known categorical values per feature, in schema order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryVocab {
    pub user: Vec<Vec<String>>,
    pub item: Vec<Vec<String>>,
}

impl CategoryVocab {
    pub fn from_corpus(corpus: &InteractionCorpus, schema: &CorpusSchema) -> Self {
        Self {
            user: CategoryLookup::collect_vocab(&schema.user_categorical, corpus.users().iter().map(|u| &u.categorical_features)),
            item: CategoryLookup::collect_vocab(&schema.item_categorical, corpus.items().iter().map(|i| &i.categorical_features)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MapsModel {
    pub config: ModelConfig,
    pub schema: CorpusSchema,
    pub vocab: CategoryVocab,
    pub d_llm: usize,
    pub params: ParamStore,
    projection: TextProjection,
    moae: Moae,
    user_ids: CategoryLookup,
    item_ids: CategoryLookup,
    embedder: EntityEmbedder,
    enc_c: TransformerEncoder,
    enc_s: TransformerEncoder,
    enc_final: TransformerEncoder,
    alphas: MotivationWeights,
}

impl MapsModel {
    /// Parameters initialized from `seed` in a fixed registration order.
    pub fn new(config: ModelConfig, schema: CorpusSchema, vocab: CategoryVocab, d_llm: usize, seed: u64) -> Result<Self> {
        if config.d_t == 0 || config.d_uni == 0 || config.d_id == 0 || config.max_history == 0 {
            return Err(MapsError::Config("model dimensions and max_history must be positive".into()));
        }
        if vocab.user.len() != schema.user_categorical.len() || vocab.item.len() != schema.item_categorical.len() {
            return Err(MapsError::Schema("category vocabulary does not match the schema".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let projection = TextProjection::new(&mut params, d_llm, config.d_t, &mut rng);
        let moae = Moae::new(&mut params, config.d_t, config.moae, &mut rng)?;
        let user_ids = CategoryLookup::new(&mut params, "fusion.user_id", &schema.user_categorical, &vocab.user, config.d_id, &mut rng);
        let item_ids = CategoryLookup::new(&mut params, "fusion.item_id", &schema.item_categorical, &vocab.item, config.d_id, &mut rng);
        let inputs = HeadInputs {
            user: (user_ids.dim(), schema.user_textual.len() * config.d_t),
            item: (item_ids.dim(), schema.item_textual.len() * config.d_t),
            query: config.d_t,
            consultation: config.d_t,
        };
        let embedder =
            EntityEmbedder::new(&mut params, inputs, config.d_uni, config.head_layers, config.activation, config.ablate, &mut rng)?;
        let enc_cfg = EncoderConfig {
            layers: config.encoder_layers,
            heads: config.heads,
            positional: config.positional,
            max_positions: config.max_history + 1,
        };
        let enc_c = TransformerEncoder::new(&mut params, "pa.encoder_c", config.d_uni, enc_cfg, &mut rng)?;
        let enc_s = TransformerEncoder::new(&mut params, "pa.encoder_s", config.d_uni, enc_cfg, &mut rng)?;
        let enc_final = TransformerEncoder::new(&mut params, "pa.encoder_final", config.d_uni, enc_cfg, &mut rng)?;
        let alphas = MotivationWeights::new(&mut params);
        Ok(Self {
            config,
            schema,
            vocab,
            d_llm,
            params,
            projection,
            moae,
            user_ids,
            item_ids,
            embedder,
            enc_c,
            enc_s,
            enc_final,
            alphas,
        })
    }

    /// Model whose schema and category vocabulary come from `corpus`.
    pub fn for_corpus(config: ModelConfig, corpus: &InteractionCorpus, d_llm: usize, seed: u64) -> Result<Self> {
        let schema = corpus.schema();
        let vocab = CategoryVocab::from_corpus(corpus, &schema);
        Self::new(config, schema, vocab, d_llm, seed)
    }

    /// Switches an ablation that changes the forward pass but no parameter
    /// shapes, so it can be applied to a trained model.
    pub fn set_ablation(&mut self, key: &str, value: &str) -> Result<()> {
        let flag = || {
            value.parse::<bool>().map_err(|_| MapsError::Config(format!("{key}: {value:?} is not true or false")))
        };
        match key {
            "pa.disable_consult" => self.config.disable_consult = flag()?,
            "pa.disable_query_hist" => self.config.disable_query_hist = flag()?,
            "pa.disable_all" => self.config.disable_all = flag()?,
            "moae.mean_pooling" => {
                self.config.moae.mean_pooling = flag()?;
                self.moae.config.mean_pooling = self.config.moae.mean_pooling;
            }
            "fusion.ablate" => {
                self.config.ablate = FusionAblation::parse(value)?;
                self.embedder.ablate = self.config.ablate;
            }
            _ => return Err(MapsError::Config(format!("{key} cannot be ablated on a trained model"))),
        }
        Ok(())
    }

    /// Tokenized and looked-up inputs for `corpus`.
    pub fn inputs<'a>(&self, corpus: &'a InteractionCorpus, store: &'a TokenEmbeddingStore) -> Result<ModelInputs<'a>> {
        if store.dim() != self.d_llm {
            return Err(MapsError::Shape {
                name: "token embedding dimension".into(),
                expected: (1, self.d_llm),
                found: (1, store.dim()),
            });
        }
        let raw = |text: &str| store.rows(&store.tokenize(text));
        let text_feats = |f: &crate::corpus::Features, names: &[String]| -> Vec<Option<Mat>> {
            names.iter().map(|n| feature(f, n).filter(|t| !t.trim().is_empty()).map(raw)).collect()
        };
        let check_text = |f: &crate::corpus::Features, names: &[String], owner: &str| -> Result<()> {
            for (n, _) in f {
                if !names.contains(n) {
                    return Err(MapsError::Schema(format!("textual feature {n:?} of {owner} is not in the schema")));
                }
            }
            Ok(())
        };
        let mut user_rows = Vec::with_capacity(corpus.users().len());
        let mut user_texts = Vec::with_capacity(corpus.users().len());
        for u in corpus.users() {
            user_rows.push(self.user_ids.rows(&u.categorical_features)?);
            check_text(&u.textual_features, &self.schema.user_textual, &u.user_id)?;
            user_texts.push(text_feats(&u.textual_features, &self.schema.user_textual));
        }
        let mut item_rows = Vec::with_capacity(corpus.items().len());
        let mut item_texts = Vec::with_capacity(corpus.items().len());
        for it in corpus.items() {
            item_rows.push(self.item_ids.rows(&it.categorical_features)?);
            check_text(&it.textual_features, &self.schema.item_textual, &it.item_id)?;
            item_texts.push(text_feats(&it.textual_features, &self.schema.item_textual));
        }
        Ok(ModelInputs {
            corpus,
            store,
            user_rows,
            item_rows,
            user_texts,
            item_texts,
            query_texts: corpus.sessions().iter().map(|s| raw(&s.query_text)).collect(),
            consult_texts: corpus.consultations().iter().map(|c| raw(&c.model_text())).collect(),
        })
    }

    pub fn forward<'m>(&'m self, inputs: &'m ModelInputs<'m>) -> Forward<'m> {
        Forward {
            model: self,
            inputs,
            tape: Tape::new(),
            h: HashMap::new(),
            prepared: HashMap::new(),
            query_text: HashMap::new(),
            query_emb: HashMap::new(),
            cross: HashMap::new(),
            items: HashMap::new(),
            users: HashMap::new(),
            consults: HashMap::new(),
            ids: HashMap::new(),
            repr: HashMap::new(),
        }
    }

    /// Scores of `candidates` for corpus session `session`.
    pub fn score_session(&self, inputs: &ModelInputs, session: usize, candidates: &[usize]) -> Result<Vec<f64>> {
        let mut f = self.forward(inputs);
        let s = f.scores(session, candidates)?;
        Ok(f.tape.value(s).data().to_vec())
    }

    /// Scores of several sessions sharing one tape (item embeddings that do
    /// not depend on the query are computed once).
    pub fn score_sessions(&self, inputs: &ModelInputs, requests: &[(usize, Vec<usize>)]) -> Result<Vec<Vec<f64>>> {
        let mut f = self.forward(inputs);
        requests
            .iter()
            .map(|(s, c)| {
                let v = f.scores(*s, c)?;
                Ok(f.tape.value(v).data().to_vec())
            })
            .collect()
    }
}

/// Per-corpus model inputs: raw token rows of every text and ID table rows.
pub struct ModelInputs<'a> {
    pub corpus: &'a InteractionCorpus,
    pub store: &'a TokenEmbeddingStore,
    user_rows: Vec<Vec<usize>>,
    item_rows: Vec<Vec<usize>>,
    user_texts: Vec<Vec<Option<Mat>>>,
    item_texts: Vec<Vec<Option<Mat>>>,
    query_texts: Vec<Mat>,
    consult_texts: Vec<Mat>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum TextKey {
    User(usize, usize),
    Item(usize, usize),
    Query(usize),
    Consult(usize),
}

/// Which query, if any, steers the cross experts of an entity's texts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum QueryMode {
    /// Cross experts masked out.
    Plain,
    /// Cross experts allowed; `q'` is the pooled text of this session's query.
    Session(usize),
    /// Cross experts allowed but none selected.
    Static,
}

/// One forward pass. Every intermediate is memoized on the tape, so repeated
/// references to the same entity share nodes and gradients accumulate.
pub struct Forward<'m> {
    model: &'m MapsModel,
    inputs: &'m ModelInputs<'m>,
    pub tape: Tape,
    h: HashMap<TextKey, Var>,
    prepared: HashMap<(TextKey, bool), PreparedText>,
    query_text: HashMap<usize, Var>,
    query_emb: HashMap<usize, Var>,
    cross: HashMap<usize, CrossQuery>,
    items: HashMap<(usize, QueryMode), Var>,
    users: HashMap<(usize, QueryMode), Var>,
    consults: HashMap<(usize, QueryMode), Var>,
    ids: HashMap<(bool, usize), Var>,
    repr: HashMap<usize, Var>,
}

impl<'m> Forward<'m> {
    fn raw(&self, key: TextKey) -> Option<&'m Mat> {
        let i = self.inputs;
        match key {
            TextKey::User(u, f) => i.user_texts[u][f].as_ref(),
            TextKey::Item(v, f) => i.item_texts[v][f].as_ref(),
            TextKey::Query(s) => Some(&i.query_texts[s]),
            TextKey::Consult(c) => Some(&i.consult_texts[c]),
        }
    }

    fn h(&mut self, key: TextKey) -> Option<Var> {
        if let Some(&v) = self.h.get(&key) {
            return Some(v);
        }
        let raw = self.raw(key)?.clone();
        let m = self.model;
        let v = m.projection.project_raw(&mut self.tape, &m.params, raw);
        self.h.insert(key, v);
        Some(v)
    }

    fn prepared(&mut self, key: TextKey, with_query: bool) -> Result<Option<PreparedText>> {
        if let Some(p) = self.prepared.get(&(key, with_query)) {
            return Ok(Some(p.clone()));
        }
        let Some(h) = self.h(key) else { return Ok(None) };
        let m = self.model;
        let p = m.moae.prepare(&mut self.tape, &m.params, h, with_query)?;
        self.prepared.insert((key, with_query), p.clone());
        Ok(Some(p))
    }

    fn finish(&mut self, p: &PreparedText, session: Option<usize>) -> Result<Var> {
        let m = self.model;
        match session {
            Some(s) if p.needs_query() => {
                let q = self.query_text(s)?;
                let mut cq = self.cross.remove(&s).unwrap_or_else(|| CrossQuery::new(q));
                let out = m.moae.finish(&mut self.tape, &m.params, p, Some(&mut cq));
                self.cross.insert(s, cq);
                out
            }
            _ => m.moae.finish(&mut self.tape, &m.params, p, None),
        }
    }

    /// Pooled text vector `e^text_s` of a session's query (cross experts masked).
    pub fn query_text(&mut self, s: usize) -> Result<Var> {
        if let Some(&v) = self.query_text.get(&s) {
            return Ok(v);
        }
        let p = self.prepared(TextKey::Query(s), false)?.expect("queries always have tokens");
        let v = self.finish(&p, None)?;
        self.query_text.insert(s, v);
        Ok(v)
    }

    /// `e_s = act(FFN_s(e^text_s))`.
    pub fn query_embedding(&mut self, s: usize) -> Result<Var> {
        if let Some(&v) = self.query_emb.get(&s) {
            return Ok(v);
        }
        let text = self.query_text(s)?;
        let m = self.model;
        let v = m.embedder.embed(&mut self.tape, &m.params, EntityKind::Query, None, Some(text))?;
        self.query_emb.insert(s, v);
        Ok(v)
    }

    /// Concatenated feature text vectors; absent features are zero blocks.
    fn entity_text(&mut self, keys: Vec<TextKey>, with_query: bool, steer: Option<usize>) -> Result<Option<Var>> {
        if keys.is_empty() {
            return Ok(None);
        }
        let d_t = self.model.config.d_t;
        let mut parts = Vec::with_capacity(keys.len());
        for k in keys {
            match self.prepared(k, with_query)? {
                Some(p) => parts.push(self.finish(&p, steer)?),
                None => parts.push(self.tape.constant(Mat::zeros(1, d_t))),
            }
        }
        Ok(Some(self.tape.concat_cols(parts)))
    }

    fn id_vector(&mut self, item: bool, idx: usize) -> Option<Var> {
        if let Some(&v) = self.ids.get(&(item, idx)) {
            return Some(v);
        }
        let m = self.model;
        let (lookup, rows) =
            if item { (&m.item_ids, &self.inputs.item_rows[idx]) } else { (&m.user_ids, &self.inputs.user_rows[idx]) };
        let v = lookup.embed_rows(&mut self.tape, &m.params, std::slice::from_ref(rows))?;
        self.ids.insert((item, idx), v);
        Some(v)
    }

    fn mode_for(&mut self, keys: &[TextKey], session: Option<usize>) -> Result<QueryMode> {
        let Some(s) = session else { return Ok(QueryMode::Plain) };
        for &k in keys {
            if let Some(p) = self.prepared(k, true)? {
                if p.needs_query() {
                    return Ok(QueryMode::Session(s));
                }
            }
        }
        Ok(QueryMode::Static)
    }

    fn entity(&mut self, kind: EntityKind, idx: usize, session: Option<usize>) -> Result<Var> {
        let keys: Vec<TextKey> = match kind {
            EntityKind::User => (0..self.model.schema.user_textual.len()).map(|f| TextKey::User(idx, f)).collect(),
            EntityKind::Item => (0..self.model.schema.item_textual.len()).map(|f| TextKey::Item(idx, f)).collect(),
            EntityKind::Consultation => vec![TextKey::Consult(idx)],
            EntityKind::Query => unreachable!("queries use query_embedding"),
        };
        let mode = self.mode_for(&keys, session)?;
        let memo = match kind {
            EntityKind::User => &self.users,
            EntityKind::Item => &self.items,
            _ => &self.consults,
        };
        if let Some(&v) = memo.get(&(idx, mode)) {
            return Ok(v);
        }
        let steer = if let QueryMode::Session(s) = mode { Some(s) } else { None };
        let text = self.entity_text(keys, mode != QueryMode::Plain, steer)?;
        let id = match kind {
            EntityKind::User => self.id_vector(false, idx),
            EntityKind::Item => self.id_vector(true, idx),
            _ => None,
        };
        let m = self.model;
        let v = m.embedder.embed(&mut self.tape, &m.params, kind, id, text)?;
        let memo = match kind {
            EntityKind::User => &mut self.users,
            EntityKind::Item => &mut self.items,
            _ => &mut self.consults,
        };
        memo.insert((idx, mode), v);
        Ok(v)
    }

    /// Item embedding; `session` supplies the cross-expert query.
    pub fn item_embedding(&mut self, v: usize, session: Option<usize>) -> Result<Var> {
        self.entity(EntityKind::Item, v, session)
    }

    pub fn user_embedding(&mut self, u: usize, session: Option<usize>) -> Result<Var> {
        self.entity(EntityKind::User, u, session)
    }

    pub fn consultation_embedding(&mut self, c: usize, session: Option<usize>) -> Result<Var> {
        self.entity(EntityKind::Consultation, c, session)
    }

    /// `e''` for corpus session `s` from its strictly earlier history.
    pub fn session_repr(&mut self, s: usize) -> Result<Var> {
        if let Some(&v) = self.repr.get(&s) {
            return Ok(v);
        }
        let m = self.model;
        let cfg = &m.config;
        let corpus = self.inputs.corpus;
        let hist = corpus.history(s, cfg.max_history);
        let e_s = self.query_embedding(s)?;
        let e_prime = if cfg.disable_all {
            e_s
        } else {
            let e_c = if cfg.disable_consult {
                None
            } else {
                let rows = hist
                    .consultations
                    .iter()
                    .map(|&c| self.consultation_embedding(c, Some(s)))
                    .collect::<Result<Vec<_>>>()?;
                let h = (!rows.is_empty()).then(|| self.tape.concat_rows(rows));
                Some(encode_motivation(&mut self.tape, &m.params, &m.enc_c, e_s, h, None)?)
            };
            let e_sh = if cfg.disable_query_hist {
                None
            } else {
                let rows = hist.sessions.iter().map(|&p| self.query_embedding(p)).collect::<Result<Vec<_>>>()?;
                let h = (!rows.is_empty()).then(|| self.tape.concat_rows(rows));
                Some(encode_motivation(&mut self.tape, &m.params, &m.enc_s, e_s, h, None)?)
            };
            let alpha = m.alphas.alpha.map(|a| self.tape.param(&m.params, a));
            aggregate_motivation(&mut self.tape, e_c, e_sh, e_s, alpha)
        };
        let rows = hist
            .sessions
            .iter()
            .map(|&p| self.item_embedding(corpus.sessions()[p].clicked_item.0, Some(s)))
            .collect::<Result<Vec<_>>>()?;
        let items = (!rows.is_empty()).then(|| self.tape.concat_rows(rows));
        let e_u = self.user_embedding(corpus.sessions()[s].user.0, Some(s))?;
        let v = final_query_embedding(&mut self.tape, &m.params, &m.enc_final, e_prime, items, e_u, None)?;
        self.repr.insert(s, v);
        Ok(v)
    }

    /// `1 x C` dot-product scores of `candidates` for session `s`.
    pub fn scores(&mut self, s: usize, candidates: &[usize]) -> Result<Var> {
        if candidates.is_empty() {
            return Err(MapsError::EmptyInput("no candidates to score".into()));
        }
        let e2 = self.session_repr(s)?;
        let rows = candidates.iter().map(|&v| self.item_embedding(v, Some(s))).collect::<Result<Vec<_>>>()?;
        let cands = self.tape.concat_rows(rows);
        Ok(self.tape.matmul_bt(e2, cands))
    }

    /// Summed sampled-softmax loss; each entry is `(session, negatives)` and
    /// the positive is the session's clicked item.
    pub fn pa_loss(&mut self, batch: &[(usize, Vec<usize>)]) -> Result<Var> {
        let corpus = self.inputs.corpus;
        let mut rows = Vec::with_capacity(batch.len());
        for (s, negs) in batch {
            let mut cands = Vec::with_capacity(negs.len() + 1);
            cands.push(corpus.sessions()[*s].clicked_item.0);
            cands.extend_from_slice(negs);
            rows.push(self.scores(*s, &cands)?);
        }
        let scores = self.tape.concat_rows(rows);
        Ok(pa_loss_from_scores(&mut self.tape, scores))
    }

    /// Token embeddings `e_t = act(FFN_s(proj(store row)))`, `B x d_uni`.
    pub fn token_embeddings(&mut self, tokens: &[u32]) -> Result<Var> {
        let m = self.model;
        let raw = self.inputs.store.rows(tokens);
        let h = m.projection.project_raw(&mut self.tape, &m.params, raw);
        m.embedder.embed(&mut self.tape, &m.params, EntityKind::Query, None, Some(h))
    }

    /// Bidirectional contrastive loss over `(token, item)` pairs.
    pub fn ga_loss(&mut self, pairs: &[(u32, ItemIdx)], cfg: &GaLossConfig) -> Result<Var> {
        let tokens: Vec<u32> = pairs.iter().map(|p| p.0).collect();
        let e_t = self.token_embeddings(&tokens)?;
        let rows = pairs.iter().map(|p| self.item_embedding(p.1 .0, None)).collect::<Result<Vec<_>>>()?;
        let e_v = self.tape.concat_rows(rows);
        ga_loss(&mut self.tape, e_t, e_v, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig};

    fn small() -> (crate::corpus::SyntheticData, ModelConfig) {
        let cfg = SynthConfig { num_users: 6, num_items: 24, num_categories: 6, ..Default::default() };
        let data = generate_synthetic(&cfg, 3).unwrap();
        let mc = ModelConfig { d_t: 8, d_uni: 8, d_id: 4, ..Default::default() };
        (data, mc)
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let (data, mc) = small();
        let model = MapsModel::for_corpus(mc.clone(), &data.corpus, data.store.dim(), 7).unwrap();
        let inputs = model.inputs(&data.corpus, &data.store).unwrap();
        let s = data.corpus.sessions().len() - 1;
        let a = model.score_session(&inputs, s, &[0, 1, 2]).unwrap();
        let b = model.score_session(&inputs, s, &[0, 1, 2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let again = MapsModel::for_corpus(mc, &data.corpus, data.store.dim(), 7).unwrap();
        assert_eq!(again.score_session(&inputs, s, &[0, 1, 2]).unwrap(), a);
        let shared = model.score_sessions(&inputs, &[(s, vec![0, 1, 2]), (0, vec![3])]).unwrap();
        assert_eq!(shared[0], a);
    }

    #[test]
    fn losses_are_finite_and_backprop() {
        let (data, mc) = small();
        let model = MapsModel::for_corpus(mc, &data.corpus, data.store.dim(), 1).unwrap();
        let inputs = model.inputs(&data.corpus, &data.store).unwrap();
        let mut f = model.forward(&inputs);
        let l = f.pa_loss(&[(5, vec![1, 2, 3]), (9, vec![0, 4, 6])]).unwrap();
        assert!(f.tape.scalar_value(l).is_finite() && f.tape.scalar_value(l) > 0.0);
        let g = f.tape.backward(l);
        assert!(!g.params().is_empty());
        let mut f = model.forward(&inputs);
        let pairs = vec![(3u32, ItemIdx(0)), (5, ItemIdx(1)), (7, ItemIdx(2))];
        let l = f.ga_loss(&pairs, &GaLossConfig::default()).unwrap();
        assert!(f.tape.scalar_value(l).is_finite());
    }

    #[test]
    fn ablation_flags_change_scores() {
        let (data, mc) = small();
        let s = data.corpus.sessions().len() - 1;
        let base = MapsModel::for_corpus(mc.clone(), &data.corpus, data.store.dim(), 1).unwrap();
        let inputs = base.inputs(&data.corpus, &data.store).unwrap();
        let reference = base.score_session(&inputs, s, &[0, 1, 2, 3]).unwrap();
        for flag in 0..3 {
            let mut c = mc.clone();
            match flag {
                0 => c.disable_consult = true,
                1 => c.disable_query_hist = true,
                _ => c.disable_all = true,
            }
            let m = MapsModel::for_corpus(c, &data.corpus, data.store.dim(), 1).unwrap();
            assert_ne!(m.score_session(&inputs, s, &[0, 1, 2, 3]).unwrap(), reference, "flag {flag}");
        }
    }

    #[test]
    fn mismatched_store_dimension_is_shape_error() {
        let (data, mc) = small();
        let model = MapsModel::for_corpus(mc, &data.corpus, data.store.dim() + 1, 1).unwrap();
        assert!(matches!(model.inputs(&data.corpus, &data.store), Err(MapsError::Shape { .. })));
    }
}
