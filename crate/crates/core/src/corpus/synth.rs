//! Deterministic synthetic corpus with a planted search-motivation signal.
//!
//! Items belong to a category and carry one value per attribute type. A
//! search query names only the category; with probability
//! `motivation_strength` the user consulted shortly before the search and
//! mentioned the clicked item's attribute values, which the query omits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Consultation, InteractionCorpus, ItemIdx, ItemRecord, SearchSession, UserIdx, UserRecord, SECONDS_PER_DAY};
use crate::embed_store::{TokenEmbeddingStore, SEP_TOKEN, UNK_TOKEN};
use crate::error::{MapsError, Result};
use crate::tensor::Mat;

/// UTC midnight, 2023-11-14.
const BASE_TS: u64 = 1_699_920_000;

const TEMPLATE_WORDS: &[&str] = &[
    "i", "need", "a", "looking", "for", "we", "recommend", "options", "suggest", "try", "hello", "thanks", "sure",
    "want", "with", "likes", "best", "cheap", "new", "good", "about", "some",
];
const QUERY_PREFIXES: &[&str] = &["", "best", "cheap", "new", "good"];
const SYLLABLES: &[&str] = &["ka", "lo", "mi", "ru", "te", "no", "sa", "vi", "po", "de", "zu", "ha", "be", "gi", "fo", "ye"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub attribute_types: usize,
    pub values_per_attribute: usize,
    pub num_brands: usize,
    /// Pseudo-words available for categories, attribute values, brands and filler.
    pub vocab_size: usize,
    pub days: u64,
    pub min_train_sessions: usize,
    pub max_train_sessions: usize,
    /// Sessions per user on each of the last two days.
    pub eval_sessions_per_user: usize,
    pub noise_consultations_per_user: usize,
    pub motivation_strength: f64,
    /// Probability that a target item carries the user's preferred first attribute.
    pub preference_bias: f64,
    /// Upper bound on how long before its search a planted consultation happens.
    pub max_lead_hours: u64,
    pub d_llm: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 150,
            num_items: 120,
            num_categories: 12,
            attribute_types: 2,
            values_per_attribute: 4,
            num_brands: 10,
            vocab_size: 200,
            days: 31,
            min_train_sessions: 4,
            max_train_sessions: 8,
            eval_sessions_per_user: 1,
            noise_consultations_per_user: 2,
            motivation_strength: 0.8,
            preference_bias: 0.5,
            max_lead_hours: 48,
            d_llm: 24,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(MapsError::Config(m));
        if !(0.0..=1.0).contains(&self.motivation_strength) {
            return err(format!("motivation_strength {} outside [0,1]", self.motivation_strength));
        }
        if !(0.0..=1.0).contains(&self.preference_bias) {
            return err(format!("preference_bias {} outside [0,1]", self.preference_bias));
        }
        if self.num_users == 0 || self.num_items == 0 || self.num_categories == 0 || self.attribute_types == 0 {
            return err("users, items, categories and attribute types must be positive".into());
        }
        if self.values_per_attribute == 0 || self.num_brands == 0 || self.d_llm == 0 {
            return err("attribute values, brands and d_llm must be positive".into());
        }
        let required = self.num_categories + self.attribute_types * self.values_per_attribute + self.num_brands;
        if self.vocab_size < required {
            return err(format!("vocab_size {} smaller than the {required} words needed for categories, attributes and brands", self.vocab_size));
        }
        let per_category = self.num_items.div_ceil(self.num_categories);
        let combos = self.values_per_attribute.checked_pow(self.attribute_types as u32).unwrap_or(usize::MAX);
        if combos < per_category {
            return err(format!("{combos} attribute combinations cannot distinguish {per_category} items per category"));
        }
        if self.days < 3 {
            return err("need at least 3 days".into());
        }
        if self.min_train_sessions > self.max_train_sessions {
            return err("min_train_sessions > max_train_sessions".into());
        }
        if self.max_lead_hours == 0 {
            return err("max_lead_hours must be positive".into());
        }
        if SYLLABLES.len().pow(3) < self.vocab_size {
            return err(format!("vocab_size {} exceeds the word generator's capacity", self.vocab_size));
        }
        Ok(())
    }
}

/// Ground truth: the consultation planted for a session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotivationLink {
    pub session: usize,
    pub consultation: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub corpus: InteractionCorpus,
    pub links: Vec<MotivationLink>,
    pub store: TokenEmbeddingStore,
}

fn pseudo_word(i: usize) -> String {
    let n = SYLLABLES.len();
    format!("{}{}{}", SYLLABLES[i % n], SYLLABLES[(i / n) % n], SYLLABLES[(i / (n * n)) % n])
}

struct PendingSession {
    user: usize,
    ts: u64,
    query: String,
    item: usize,
    planted: Option<usize>,
}

struct PendingConsult {
    user: usize,
    ts: u64,
    inquiry: String,
    response: String,
}

/// Pure function of `(config, seed)`.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Shuffle word indices so categories/attributes are not alphabetical runs.
    let mut word_ids: Vec<usize> = (0..config.vocab_size).collect();
    word_ids.shuffle(&mut rng);
    let words: Vec<String> = word_ids.iter().map(|&i| pseudo_word(i)).collect();
    let mut cursor = 0;
    let mut take = |n: usize| {
        let s = words[cursor..cursor + n].to_vec();
        cursor += n;
        s
    };
    let categories = take(config.num_categories);
    let attr_values: Vec<Vec<String>> = (0..config.attribute_types).map(|_| take(config.values_per_attribute)).collect();
    let brands = take(config.num_brands);
    let fillers: Vec<String> = words[cursor..].to_vec();

    // Items: distinct attribute combination within each category.
    let combos: Vec<Vec<usize>> = {
        let total = config.values_per_attribute.pow(config.attribute_types as u32);
        (0..total)
            .map(|mut c| {
                (0..config.attribute_types)
                    .map(|_| {
                        let v = c % config.values_per_attribute;
                        c /= config.values_per_attribute;
                        v
                    })
                    .collect()
            })
            .collect()
    };
    let mut combo_orders: Vec<Vec<usize>> = (0..config.num_categories)
        .map(|_| {
            let mut o: Vec<usize> = (0..combos.len()).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    let mut item_category = Vec::with_capacity(config.num_items);
    let mut item_attrs: Vec<Vec<usize>> = Vec::with_capacity(config.num_items);
    let mut items = Vec::with_capacity(config.num_items);
    for i in 0..config.num_items {
        let cat = i % config.num_categories;
        let combo = &combos[combo_orders[cat].pop().expect("validated combination count")];
        let brand = &brands[rng.gen_range(0..brands.len())];
        let attr_words: Vec<&str> = combo.iter().enumerate().map(|(t, &v)| attr_values[t][v].as_str()).collect();
        let mut categorical = vec![("item_id".to_string(), format!("i{i:04}")), ("category".to_string(), categories[cat].clone())];
        for (t, w) in attr_words.iter().enumerate() {
            categorical.push((format!("attr{t}"), w.to_string()));
        }
        let desc: Vec<&str> = (0..3).map(|_| fillers_pick(&fillers, &mut rng)).collect();
        items.push(ItemRecord {
            item_id: format!("i{i:04}"),
            categorical_features: categorical,
            textual_features: vec![
                ("title".to_string(), format!("{brand} {} {}", attr_words.join(" "), categories[cat])),
                ("description".to_string(), format!("{} {}", desc.join(" "), categories[cat])),
            ],
        });
        item_category.push(cat);
        item_attrs.push(combo.clone());
    }
    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); config.num_categories];
    for (i, &c) in item_category.iter().enumerate() {
        by_category[c].push(i);
    }
    let non_empty_categories: Vec<usize> = (0..config.num_categories).filter(|&c| !by_category[c].is_empty()).collect();

    let mut users = Vec::with_capacity(config.num_users);
    let mut sessions: Vec<PendingSession> = Vec::new();
    let mut consults: Vec<PendingConsult> = Vec::new();
    let last_train_day = config.days - 2;
    for u in 0..config.num_users {
        let pref = rng.gen_range(0..config.values_per_attribute);
        users.push(UserRecord {
            user_id: format!("u{u:04}"),
            categorical_features: vec![
                ("user_id".to_string(), format!("u{u:04}")),
                ("segment".to_string(), format!("s{}", u % 4)),
            ],
            textual_features: vec![("profile".to_string(), format!("likes {}", attr_values[0][pref]))],
        });
        let n_train = rng.gen_range(config.min_train_sessions..=config.max_train_sessions);
        let mut days: Vec<u64> = (0..n_train).map(|_| rng.gen_range(0..last_train_day)).collect();
        if u == 0 && !days.is_empty() {
            days[0] = 0;
        }
        for _ in 0..config.eval_sessions_per_user {
            days.push(config.days - 2);
            days.push(config.days - 1);
        }
        let mut cats = non_empty_categories.clone();
        cats.shuffle(&mut rng);
        for (k, &day) in days.iter().enumerate() {
            let ts = BASE_TS + day * SECONDS_PER_DAY + rng.gen_range(3_600..SECONDS_PER_DAY);
            let cat = cats[k % cats.len()];
            let pool = &by_category[cat];
            let preferred: Vec<usize> = pool.iter().copied().filter(|&i| item_attrs[i][0] == pref).collect();
            let item = if !preferred.is_empty() && rng.gen_bool(config.preference_bias) {
                preferred[rng.gen_range(0..preferred.len())]
            } else {
                pool[rng.gen_range(0..pool.len())]
            };
            let prefix = QUERY_PREFIXES[rng.gen_range(0..QUERY_PREFIXES.len())];
            let query = if prefix.is_empty() { categories[cat].clone() } else { format!("{prefix} {}", categories[cat]) };
            let planted = if rng.gen_bool(config.motivation_strength) {
                let lead = rng.gen_range(3_600..=config.max_lead_hours * 3_600);
                let cts = ts.saturating_sub(lead).max(BASE_TS + 1).min(ts - 1);
                let attrs: Vec<&str> = item_attrs[item].iter().enumerate().map(|(t, &v)| attr_values[t][v].as_str()).collect();
                let opener = if rng.gen_bool(0.5) { "hello " } else { "" };
                consults.push(PendingConsult {
                    user: u,
                    ts: cts,
                    inquiry: format!("{opener}i need a {} {}", attrs.join(" "), categories[cat]),
                    response: format!("we recommend {} {} options", attrs.join(" "), categories[cat]),
                });
                Some(consults.len() - 1)
            } else {
                None
            };
            sessions.push(PendingSession { user: u, ts, query, item, planted });
        }
        for _ in 0..config.noise_consultations_per_user {
            let other = rng.gen_range(0..config.num_items);
            let attrs: Vec<&str> = item_attrs[other].iter().enumerate().map(|(t, &v)| attr_values[t][v].as_str()).collect();
            let ts = BASE_TS + rng.gen_range(1..config.days * SECONDS_PER_DAY);
            consults.push(PendingConsult {
                user: u,
                ts,
                inquiry: format!("i want some {} {}", attrs.join(" "), categories[item_category[other]]),
                response: format!("sure try {}", fillers_pick(&fillers, &mut rng)),
            });
        }
    }

    // Canonical order: by (timestamp, user, creation order).
    let mut s_order: Vec<usize> = (0..sessions.len()).collect();
    s_order.sort_by_key(|&i| (sessions[i].ts, sessions[i].user, i));
    let mut c_order: Vec<usize> = (0..consults.len()).collect();
    c_order.sort_by_key(|&i| (consults[i].ts, consults[i].user, i));
    let mut c_new = vec![0; consults.len()];
    for (new, &old) in c_order.iter().enumerate() {
        c_new[old] = new;
    }
    let mut links = Vec::new();
    let mut final_sessions = Vec::with_capacity(sessions.len());
    for (new, &old) in s_order.iter().enumerate() {
        let s = &sessions[old];
        if let Some(c) = s.planted {
            links.push(MotivationLink { session: new, consultation: c_new[c] });
        }
        final_sessions.push(SearchSession {
            user: UserIdx(s.user),
            timestamp: s.ts,
            query_text: s.query.clone(),
            clicked_item: ItemIdx(s.item),
        });
    }
    let final_consults = c_order
        .iter()
        .map(|&i| {
            let c = &consults[i];
            Consultation { user: UserIdx(c.user), timestamp: c.ts, inquiry_text: c.inquiry.clone(), response_text: c.response.clone() }
        })
        .collect();
    let corpus = InteractionCorpus::new(users, items, final_sessions, final_consults)?;

    let mut vocab: Vec<String> = vec![UNK_TOKEN.to_string(), SEP_TOKEN.to_string()];
    vocab.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
    let mut sorted_words = words.clone();
    sorted_words.sort();
    vocab.extend(sorted_words);
    let scale = (3.0 / config.d_llm as f64).sqrt();
    let table = Mat::from_vec(
        vocab.len(),
        config.d_llm,
        (0..vocab.len() * config.d_llm).map(|_| (rng.gen_range(-1.0..1.0f64) * scale) as f32 as f64).collect(),
    );
    let store = TokenEmbeddingStore::from_parts(vocab, table)?;
    Ok(SyntheticData { corpus, links, store })
}

fn fillers_pick<'a>(fillers: &'a [String], rng: &mut impl Rng) -> &'a str {
    if fillers.is_empty() {
        "some"
    } else {
        &fillers[rng.gen_range(0..fillers.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{chronological_split, write_corpus, SplitSpans};
    use std::collections::HashSet;

    fn small() -> SynthConfig {
        SynthConfig { num_users: 20, num_items: 50, num_categories: 10, values_per_attribute: 3, ..SynthConfig::default() }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = generate_synthetic(&small(), 11).unwrap();
        let b = generate_synthetic(&small(), 11).unwrap();
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_corpus(&a.corpus, da.path()).unwrap();
        write_corpus(&b.corpus, db.path()).unwrap();
        for f in [super::super::USERS_FILE, super::super::ITEMS_FILE, super::super::INTERACTIONS_FILE] {
            assert_eq!(std::fs::read(da.path().join(f)).unwrap(), std::fs::read(db.path().join(f)).unwrap());
        }
        assert_eq!(a.links, b.links);
        assert_eq!(a.store.table(), b.store.table());
        let c = generate_synthetic(&small(), 12).unwrap();
        assert_ne!(a.corpus.sessions(), c.corpus.sessions());
    }

    #[test]
    fn full_strength_links_every_test_session() {
        let cfg = SynthConfig { motivation_strength: 1.0, ..small() };
        let d = generate_synthetic(&cfg, 3).unwrap();
        let split = chronological_split(&d.corpus, SplitSpans::default()).unwrap();
        let linked: HashSet<usize> = d.links.iter().map(|l| l.session).collect();
        assert!(!split.test.is_empty());
        let covered = split.test.iter().filter(|s| linked.contains(s)).count();
        assert_eq!(covered, split.test.len(), "coverage must be 100%");
        for l in &d.links {
            let s = &d.corpus.sessions()[l.session];
            let c = &d.corpus.consultations()[l.consultation];
            assert_eq!(s.user, c.user);
            assert!(c.timestamp < s.timestamp);
            assert!(s.timestamp - c.timestamp <= 48 * 3600);
            let item = d.corpus.item(s.clicked_item);
            for (name, value) in &item.categorical_features {
                if name.starts_with("attr") {
                    assert!(c.inquiry_text.contains(value.as_str()));
                    assert!(!s.query_text.contains(value.as_str()), "query must omit attributes");
                }
            }
        }
    }

    #[test]
    fn zero_strength_plants_nothing() {
        let cfg = SynthConfig { motivation_strength: 0.0, ..small() };
        let d = generate_synthetic(&cfg, 3).unwrap();
        assert!(d.links.is_empty());
        assert_eq!(d.corpus.consultations().len(), cfg.num_users * cfg.noise_consultations_per_user);
    }

    #[test]
    fn infeasible_vocab_is_config_error() {
        let cfg = SynthConfig { vocab_size: 5, ..small() };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(MapsError::Config(_))));
        let cfg = SynthConfig { values_per_attribute: 1, attribute_types: 1, ..small() };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(MapsError::Config(_))));
    }

    #[test]
    fn earliest_event_is_on_day_zero() {
        let d = generate_synthetic(&small(), 5).unwrap();
        let min = d.corpus.min_timestamp().unwrap();
        assert_eq!(min / SECONDS_PER_DAY * SECONDS_PER_DAY, BASE_TS);
    }
}
