//! Surface-string rules deciding whether a consultation relates to a later
//! search session, and the proportion report built on them.

use serde::{Deserialize, Serialize};

use crate::corpus::{Consultation, InteractionCorpus, ItemRecord, SearchSession, SECONDS_PER_DAY};
use crate::error::{MapsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceLevel {
    Lenient,
    Moderate,
    Strict,
}

impl RelevanceLevel {
    pub const ALL: [RelevanceLevel; 3] = [Self::Lenient, Self::Moderate, Self::Strict];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lenient" => Ok(Self::Lenient),
            "moderate" => Ok(Self::Moderate),
            "strict" => Ok(Self::Strict),
            other => Err(MapsError::Config(format!("unknown relevance level {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Lenient => "lenient",
            Self::Moderate => "moderate",
            Self::Strict => "strict",
        }
    }
}

pub const DEFAULT_WINDOWS_DAYS: [u64; 4] = [3, 5, 7, 14];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceRuleConfig {
    pub level: RelevanceLevel,
    pub window_days: u64,
    /// Lenient query clause needs one term occurring twice instead of two
    /// occurrences in total.
    pub per_term_lenient: bool,
}

impl Default for RelevanceRuleConfig {
    fn default() -> Self {
        Self { level: RelevanceLevel::Lenient, window_days: 7, per_term_lenient: false }
    }
}

/// Lowercases, drops punctuation, splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Occurrences of `needle` as a contiguous token run in `haystack`.
pub fn count_phrase(haystack: &[String], needle: &[String]) -> usize {
    if needle.is_empty() || needle.len() > haystack.len() {
        return 0;
    }
    haystack.windows(needle.len()).filter(|w| *w == needle).count()
}

/// Display texts of an item's categorical features other than identifiers.
pub fn item_attributes(item: &ItemRecord) -> Vec<&str> {
    item.categorical_features
        .iter()
        .filter(|(n, _)| n != "id" && !n.ends_with("_id"))
        .map(|(_, v)| v.as_str())
        .collect()
}

/// Pre-normalized view of a session and its clicked item.
#[derive(Clone, Debug)]
pub struct SessionTarget {
    pub timestamp: u64,
    title: Vec<String>,
    attributes: Vec<Vec<String>>,
    terms: Vec<String>,
}

impl SessionTarget {
    pub fn new(session: &SearchSession, item: &ItemRecord) -> Self {
        let mut terms = normalize(&session.query_text);
        terms.sort();
        terms.dedup();
        Self {
            timestamp: session.timestamp,
            title: normalize(item.title()),
            attributes: item_attributes(item).into_iter().map(normalize).filter(|a| !a.is_empty()).collect(),
            terms,
        }
    }

    /// Clause evaluation against a normalized consultation text.
    pub fn matches(&self, text: &[String], level: RelevanceLevel, per_term_lenient: bool) -> bool {
        if count_phrase(text, &self.title) >= 1 {
            return true;
        }
        let attr_hits = self.attributes.iter().filter(|a| count_phrase(text, a) >= 1).count();
        let term_counts: Vec<usize> =
            self.terms.iter().map(|t| text.iter().filter(|w| *w == t).count()).collect();
        let term_hits = term_counts.iter().filter(|&&c| c > 0).count();
        let na = self.attributes.len();
        let nt = self.terms.len();
        match level {
            RelevanceLevel::Lenient => {
                let query_clause = if per_term_lenient {
                    term_counts.iter().any(|&c| c >= 2)
                } else {
                    term_counts.iter().sum::<usize>() >= 2
                };
                attr_hits >= 1 || query_clause
            }
            RelevanceLevel::Moderate => {
                (na > 0 && 2 * attr_hits > na) || (nt > 0 && 2 * term_hits > nt)
            }
            RelevanceLevel::Strict => {
                (na > 0 && 4 * attr_hits >= 3 * na) || (nt > 0 && 4 * term_hits >= 3 * nt)
            }
        }
    }
}

/// Whether `consultation` relates to `session` (whose clicked item is `item`)
/// at `level`. The consultation must precede the session.
pub fn classify_relevance(
    consultation: &Consultation,
    session: &SearchSession,
    item: &ItemRecord,
    level: RelevanceLevel,
    per_term_lenient: bool,
) -> Result<bool> {
    if consultation.timestamp >= session.timestamp {
        return Err(MapsError::Contract(format!(
            "consultation at {} does not precede the session at {}",
            consultation.timestamp, session.timestamp
        )));
    }
    let target = SessionTarget::new(session, item);
    Ok(target.matches(&normalize(&consultation.full_text()), level, per_term_lenient))
}

/// Consultations of the session's user inside `[ts - window, ts)`, in time order.
pub fn window_consultations(corpus: &InteractionCorpus, session: usize, window_days: u64) -> Vec<usize> {
    let s = &corpus.sessions()[session];
    let start = s.timestamp.saturating_sub(window_days * SECONDS_PER_DAY);
    corpus
        .user_consultations(s.user)
        .iter()
        .copied()
        .filter(|&c| {
            let ts = corpus.consultations()[c].timestamp;
            ts >= start && ts < s.timestamp
        })
        .collect()
}

/// Consultations relevant to `session` under `rule`.
pub fn relevant_consultations(corpus: &InteractionCorpus, session: usize, rule: &RelevanceRuleConfig) -> Vec<usize> {
    let s = &corpus.sessions()[session];
    let target = SessionTarget::new(s, corpus.item(s.clicked_item));
    window_consultations(corpus, session, rule.window_days)
        .into_iter()
        .filter(|&c| {
            let text = normalize(&corpus.consultations()[c].full_text());
            target.matches(&text, rule.level, rule.per_term_lenient)
        })
        .collect()
}

/// Fraction of `sessions` with at least one relevant consultation in the
/// window; `None` when there are no sessions.
pub fn proportion_report(corpus: &InteractionCorpus, sessions: &[usize], rule: &RelevanceRuleConfig) -> Option<f64> {
    if sessions.is_empty() {
        return None;
    }
    let hits = sessions.iter().filter(|&&s| !relevant_consultations(corpus, s, rule).is_empty()).count();
    Some(hits as f64 / sessions.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProportionCell {
    pub window_days: u64,
    pub level: RelevanceLevel,
    pub proportion: Option<f64>,
    pub sessions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsultReport {
    pub per_term_lenient: bool,
    pub cells: Vec<ProportionCell>,
}

/// One cell per `(window, level)` over all corpus sessions.
pub fn proportion_grid(
    corpus: &InteractionCorpus,
    windows: &[u64],
    levels: &[RelevanceLevel],
    per_term_lenient: bool,
) -> ConsultReport {
    let sessions: Vec<usize> = (0..corpus.sessions().len()).collect();
    let mut cells = Vec::new();
    for &w in windows {
        for &level in levels {
            let rule = RelevanceRuleConfig { level, window_days: w, per_term_lenient };
            cells.push(ProportionCell {
                window_days: w,
                level,
                proportion: proportion_report(corpus, &sessions, &rule),
                sessions: sessions.len(),
            });
        }
    }
    ConsultReport { per_term_lenient, cells }
}
