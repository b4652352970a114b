//! Line-delimited JSON corpus files.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{Consultation, Features, InteractionCorpus, ItemIdx, ItemRecord, SearchSession, UserIdx, UserRecord};
use crate::corpus::MotivationLink;
use crate::error::{MapsError, Result};

pub const USERS_FILE: &str = "users.jsonl";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const LINKS_FILE: &str = "motivation_links.jsonl";

#[derive(Serialize, Deserialize)]
struct UserLine {
    user_id: String,
    #[serde(default, with = "feature_map")]
    categorical: Features,
    #[serde(default, with = "feature_map")]
    textual: Features,
}

#[derive(Serialize, Deserialize)]
struct ItemLine {
    item_id: String,
    #[serde(default, with = "feature_map")]
    categorical: Features,
    #[serde(default, with = "feature_map")]
    textual: Features,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum InteractionLine {
    Search { user_id: String, timestamp: u64, query: String, item_id: String },
    Consultation { user_id: String, timestamp: u64, inquiry: String, response: String },
}

/// JSON object <-> ordered feature list, rejecting duplicate names.
mod feature_map {
    use super::*;

    pub fn serialize<S: Serializer>(f: &Features, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(f.len()))?;
        for (k, v) in f {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Features, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Features;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object of feature name to string or number")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Features, A::Error> {
                let mut out: Features = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    if out.iter().any(|(n, _)| *n == k) {
                        return Err(serde::de::Error::custom(format!("duplicate feature {k}")));
                    }
                    let v = match v {
                        serde_json::Value::String(s) => s,
                        serde_json::Value::Number(n) => n.to_string(),
                        other => return Err(serde::de::Error::custom(format!("feature {k}: unsupported value {other}"))),
                    };
                    out.push((k, v));
                }
                Ok(out)
            }
        }
        d.deserialize_map(V)
    }
}

fn read_lines(dir: &Path, name: &str) -> Result<Vec<(usize, String)>> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|source| MapsError::Load { path: path.clone(), source })?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn parse<T: for<'de> Deserialize<'de>>(file: &str, line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| MapsError::Parse { file: file.into(), line, message: e.to_string() })
}

/// Loads `users.jsonl`, `items.jsonl` and `interactions.jsonl` from `dir`.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<InteractionCorpus> {
    let dir = dir.as_ref();
    let mut users = Vec::new();
    for (line, text) in read_lines(dir, USERS_FILE)? {
        let u: UserLine = parse(USERS_FILE, line, &text)?;
        users.push(UserRecord { user_id: u.user_id, categorical_features: u.categorical, textual_features: u.textual });
    }
    let mut items = Vec::new();
    for (line, text) in read_lines(dir, ITEMS_FILE)? {
        let i: ItemLine = parse(ITEMS_FILE, line, &text)?;
        if super::feature(&i.textual, "title").is_none_or(|t| t.trim().is_empty()) {
            return Err(MapsError::Integrity {
                file: ITEMS_FILE.into(),
                line,
                message: format!("item {} lacks a non-empty title", i.item_id),
            });
        }
        items.push(ItemRecord { item_id: i.item_id, categorical_features: i.categorical, textual_features: i.textual });
    }
    let user_ix: std::collections::HashMap<&str, usize> =
        users.iter().enumerate().map(|(i, u)| (u.user_id.as_str(), i)).collect();
    let item_ix: std::collections::HashMap<&str, usize> =
        items.iter().enumerate().map(|(i, v)| (v.item_id.as_str(), i)).collect();
    let integrity = |line: usize, message: String| MapsError::Integrity { file: INTERACTIONS_FILE.into(), line, message };
    let mut sessions = Vec::new();
    let mut consultations = Vec::new();
    for (line, text) in read_lines(dir, INTERACTIONS_FILE)? {
        match parse::<InteractionLine>(INTERACTIONS_FILE, line, &text)? {
            InteractionLine::Search { user_id, timestamp, query, item_id } => {
                let u = *user_ix.get(user_id.as_str()).ok_or_else(|| integrity(line, format!("unknown user_id {user_id}")))?;
                let v = *item_ix.get(item_id.as_str()).ok_or_else(|| integrity(line, format!("unknown item_id {item_id}")))?;
                sessions.push(SearchSession { user: UserIdx(u), timestamp, query_text: query, clicked_item: ItemIdx(v) });
            }
            InteractionLine::Consultation { user_id, timestamp, inquiry, response } => {
                let u = *user_ix.get(user_id.as_str()).ok_or_else(|| integrity(line, format!("unknown user_id {user_id}")))?;
                if inquiry.trim().is_empty() && response.trim().is_empty() {
                    return Err(integrity(line, "consultation has neither inquiry nor response".into()));
                }
                consultations.push(Consultation { user: UserIdx(u), timestamp, inquiry_text: inquiry, response_text: response });
            }
        }
    }
    InteractionCorpus::new(users, items, sessions, consultations)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the three corpus files. Interactions are merged by timestamp; ties
/// keep searches before consultations and each kind in corpus order, so the
/// per-kind order survives a reload.
pub fn write_corpus(corpus: &InteractionCorpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_jsonl(
        &dir.join(USERS_FILE),
        corpus.users().iter().map(|u| UserLine {
            user_id: u.user_id.clone(),
            categorical: u.categorical_features.clone(),
            textual: u.textual_features.clone(),
        }),
    )?;
    write_jsonl(
        &dir.join(ITEMS_FILE),
        corpus.items().iter().map(|i| ItemLine {
            item_id: i.item_id.clone(),
            categorical: i.categorical_features.clone(),
            textual: i.textual_features.clone(),
        }),
    )?;
    let sessions = corpus.sessions();
    let consults = corpus.consultations();
    let mut lines = Vec::with_capacity(sessions.len() + consults.len());
    let (mut i, mut j) = (0, 0);
    while i < sessions.len() || j < consults.len() {
        let take_session = j >= consults.len() || (i < sessions.len() && sessions[i].timestamp <= consults[j].timestamp);
        if take_session {
            let s = &sessions[i];
            lines.push(InteractionLine::Search {
                user_id: corpus.user(s.user).user_id.clone(),
                timestamp: s.timestamp,
                query: s.query_text.clone(),
                item_id: corpus.item(s.clicked_item).item_id.clone(),
            });
            i += 1;
        } else {
            let c = &consults[j];
            lines.push(InteractionLine::Consultation {
                user_id: corpus.user(c.user).user_id.clone(),
                timestamp: c.timestamp,
                inquiry: c.inquiry_text.clone(),
                response: c.response_text.clone(),
            });
            j += 1;
        }
    }
    write_jsonl(&dir.join(INTERACTIONS_FILE), lines.into_iter())
}

pub fn write_links(links: &[MotivationLink], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), links.iter())
}

pub fn read_links(path: impl AsRef<Path>) -> Result<Vec<MotivationLink>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| MapsError::Load { path: path.to_path_buf(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse(LINKS_FILE, i + 1, l))
        .collect()
}
