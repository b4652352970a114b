//! Flat `section.key = value` run configuration.
//!
//! Every key has a default. Values are layered: defaults, then a config
//! file, then `MAPS_OUTPUT_DIR`, then command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::align_general::GaLossConfig;
use crate::corpus::{SplitSpans, SynthConfig};
use crate::error::{MapsError, Result};
use crate::fusion::{FusionAblation, HeadActivation};
use crate::model::ModelConfig;
use crate::moae::MoaeConfig;
use crate::trainer::TrainConfig;

pub const OUTPUT_DIR_ENV: &str = "MAPS_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueKind {
    Text,
    Bool,
    Uint,
    Int,
    Float,
    /// Unsigned integer or `none`.
    OptUint,
    Choice(&'static [&'static str]),
}

#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub kind: ValueKind,
    pub doc: &'static str,
}

const fn k(key: &'static str, default: &'static str, kind: ValueKind, doc: &'static str) -> KeySpec {
    KeySpec { key, default, kind, doc }
}

use ValueKind::*;

const ACTIVATIONS: &[&str] = &["identity", "tanh", "silu", "prelu", "gelu", "relu"];
const ABLATIONS: &[&str] = &["none", "id_only", "llm_only"];
const SPLITS: &[&str] = &["train", "val", "test"];

pub const KEYS: &[KeySpec] = &[
    k("paths.corpus_dir", "data", Text, "directory holding users.jsonl, items.jsonl and interactions.jsonl"),
    k("paths.embeddings", "data/embeddings.bin", Text, "token embedding table"),
    k("paths.vocab", "data/vocab.txt", Text, "vocabulary, one token per line"),
    k("paths.output_dir", "out", Text, "artifact directory"),
    k("paths.checkpoint", "", Text, "checkpoint to read or write; empty means <output_dir>/model.ckpt"),
    k("run.seed", "0", Uint, "seed for parameter initialization, shuffling and sampling"),
    k("data.min_interactions", "5", Uint, "users with fewer searches plus consultations are dropped"),
    k("data.train_days", "29", Uint, "days in the training split"),
    k("data.val_days", "1", Uint, "days in the validation split"),
    k("data.test_days", "1", Uint, "days in the test split"),
    k("data.max_history", "30", Uint, "most recent history entries kept per source"),
    k("synth.num_users", "150", Uint, "synthetic users"),
    k("synth.num_items", "120", Uint, "synthetic items"),
    k("synth.num_categories", "12", Uint, "synthetic item categories"),
    k("synth.attribute_types", "2", Uint, "attributes per item"),
    k("synth.values_per_attribute", "4", Uint, "values per attribute type"),
    k("synth.num_brands", "10", Uint, "synthetic brands"),
    k("synth.vocab_size", "200", Uint, "pseudo-words available to the generator"),
    k("synth.days", "31", Uint, "days spanned by the synthetic corpus"),
    k("synth.min_train_sessions", "4", Uint, "fewest training-period searches per user"),
    k("synth.max_train_sessions", "8", Uint, "most training-period searches per user"),
    k("synth.eval_sessions_per_user", "1", Uint, "searches per user on each of the last two days"),
    k("synth.noise_consultations_per_user", "2", Uint, "unrelated consultations per user"),
    k("synth.motivation_strength", "0.8", Float, "fraction of searches preceded by an informative consultation"),
    k("synth.preference_bias", "0.5", Float, "probability a target carries the user's preferred attribute"),
    k("synth.max_lead_hours", "48", Uint, "latest a planted consultation precedes its search"),
    k("synth.d_llm", "24", Uint, "dimension of generated token embeddings"),
    k("embed.d_t", "32", Uint, "projected token dimension"),
    k("moae.n_e", "2", Uint, "experts per family"),
    k("moae.k", "2", Uint, "experts selected per text"),
    k("moae.paper_literal_scaling", "false", Bool, "scale pooled outputs by 1/L"),
    k("moae.mean_pooling", "false", Bool, "replace expert pooling by the token mean"),
    k("fusion.d_uni", "64", Uint, "unified entity dimension"),
    k("fusion.d_id", "16", Uint, "width of each categorical lookup"),
    k("fusion.activation", "tanh", Choice(ACTIVATIONS), "head activation"),
    k("fusion.ablate", "none", Choice(ABLATIONS), "drop text or ID inputs of users and items"),
    k("fusion.head_layers", "1", Uint, "layers per entity head"),
    k("ga.threshold_t", "2", Int, "search-frequency cutoff; negative keeps every token"),
    k("ga.window_days", "7", Uint, "consultation window when collecting item texts"),
    k("ga.lambda1", "0.5", Float, "weight of the token-side contrastive term"),
    k("ga.lambda2", "0.5", Float, "weight of the item-side contrastive term"),
    k("ga.tau1", "0.1", Float, "temperature of the token-side term"),
    k("ga.tau2", "0.1", Float, "temperature of the item-side term"),
    k("ga.batch_size", "256", Uint, "token-item pairs per GA batch"),
    k("ga.batches_per_step", "1", Uint, "GA batches per PA batch; 0 disables GA"),
    k("ga.lambda3", "0.1", Float, "weight of the GA loss in the overall objective"),
    k("ga.paper_literal_denominator", "false", Bool, "exclude the positive from contrastive denominators"),
    k("pa.encoder_layers", "1", Uint, "transformer layers per encoder"),
    k("pa.heads", "2", Uint, "attention heads"),
    k("pa.positional", "false", Bool, "learned positional embeddings"),
    k("pa.num_negatives", "10", Uint, "sampled negatives per training session"),
    k("pa.disable_consult", "false", Bool, "drop the consultation-history term"),
    k("pa.disable_query_hist", "false", Bool, "drop the search-history term"),
    k("pa.disable_all", "false", Bool, "use the query embedding alone"),
    k("train.learning_rate", "0.0005", Float, "Adam step size"),
    k("train.epochs", "100", Uint, "maximum epochs"),
    k("train.patience", "10", OptUint, "epochs without validation improvement before stopping; none disables"),
    k("train.batch_size", "72", Uint, "sessions per PA batch"),
    k("train.lambda4", "0.000001", Float, "parameter-norm penalty"),
    k("train.unsquared_norm", "false", Bool, "penalize the norm rather than its square"),
    k("eval.seed", "0", Uint, "seed of the sampled ranking negatives"),
    k("eval.split", "test", Choice(SPLITS), "sessions to evaluate"),
    k("consult.per_term_lenient", "false", Bool, "lenient query clause needs one term twice"),
];

pub fn key_spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

fn check_value(spec: &KeySpec, value: &str) -> Result<()> {
    let bad = |what: &str| Err(MapsError::Config(format!("{}: {value:?} is not {what}", spec.key)));
    match spec.kind {
        Text => Ok(()),
        Bool => value.parse::<bool>().map(|_| ()).or_else(|_| bad("true or false")),
        Uint => value.parse::<u64>().map(|_| ()).or_else(|_| bad("an unsigned integer")),
        Int => value.parse::<i64>().map(|_| ()).or_else(|_| bad("an integer")),
        Float => match value.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(()),
            _ => bad("a finite number"),
        },
        OptUint => {
            if value == "none" || value.parse::<u64>().is_ok() {
                Ok(())
            } else {
                bad("an unsigned integer or none")
            }
        }
        Choice(options) => {
            if options.contains(&value) {
                Ok(())
            } else {
                bad(&format!("one of {}", options.join(", ")))
            }
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_flat(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(MapsError::Config(format!("{origin}:{}: expected `key = value`", i + 1)));
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Cross product of overrides whose values are comma lists, in flag order.
pub fn expand_grid(overrides: &[(String, String)]) -> Vec<Vec<(String, String)>> {
    let mut runs: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, value) in overrides {
        let options: Vec<&str> = value.split(',').map(str::trim).collect();
        runs = runs
            .into_iter()
            .flat_map(|run| {
                options.iter().map(move |v| {
                    let mut r = run.clone();
                    r.push((key.clone(), v.to_string()));
                    r
                })
            })
            .collect();
    }
    runs
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|s| (s.key.to_string(), s.default.to_string())).collect() }
    }
}

impl RunConfig {
    /// Sets a known key after checking its value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = key_spec(key).ok_or_else(|| MapsError::Config(format!("unknown config key {key}")))?;
        check_value(spec, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| MapsError::Load { path: path.to_path_buf(), source })?;
        self.apply(&parse_flat(&text, &path.display().to_string())?)
    }

    /// Layers defaults, `file`, the output-directory environment value and `overrides`.
    pub fn layered(file: Option<&Path>, env_output_dir: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        if let Some(dir) = env_output_dir.filter(|d| !d.is_empty()) {
            cfg.set("paths.output_dir", dir)?;
        }
        cfg.apply(overrides)?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("unregistered config key {key}"))
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key).parse().expect("validated bool")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated unsigned integer")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated unsigned integer")
    }

    pub fn i64(&self, key: &str) -> i64 {
        self.get(key).parse().expect("validated integer")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated number")
    }

    pub fn opt_usize(&self, key: &str) -> Option<usize> {
        match self.get(key) {
            "none" => None,
            v => Some(v.parse().expect("validated unsigned integer")),
        }
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Keys whose values differ from their defaults.
    pub fn non_defaults(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .filter(|s| self.get(s.key) != s.default)
            .map(|s| (s.key.to_string(), self.get(s.key).to_string()))
            .collect()
    }

    /// Every key as `key = value` lines, readable by [`parse_flat`].
    pub fn to_flat(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.get(key))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.path("paths.output_dir")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        match self.get("paths.checkpoint") {
            "" => self.output_dir().join("model.ckpt"),
            p => PathBuf::from(p),
        }
    }

    pub fn seed(&self) -> u64 {
        self.u64("run.seed")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_t: self.usize("embed.d_t"),
            d_uni: self.usize("fusion.d_uni"),
            d_id: self.usize("fusion.d_id"),
            head_layers: self.usize("fusion.head_layers"),
            activation: HeadActivation::parse(self.get("fusion.activation")).expect("validated activation"),
            ablate: FusionAblation::parse(self.get("fusion.ablate")).expect("validated ablation"),
            moae: MoaeConfig {
                n_e: self.usize("moae.n_e"),
                k: self.usize("moae.k"),
                paper_literal_scaling: self.bool("moae.paper_literal_scaling"),
                mean_pooling: self.bool("moae.mean_pooling"),
            },
            encoder_layers: self.usize("pa.encoder_layers"),
            heads: self.usize("pa.heads"),
            positional: self.bool("pa.positional"),
            max_history: self.usize("data.max_history"),
            disable_consult: self.bool("pa.disable_consult"),
            disable_query_hist: self.bool("pa.disable_query_hist"),
            disable_all: self.bool("pa.disable_all"),
        }
    }

    pub fn ga_loss_config(&self) -> GaLossConfig {
        GaLossConfig {
            lambda1: self.f64("ga.lambda1"),
            lambda2: self.f64("ga.lambda2"),
            tau1: self.f64("ga.tau1"),
            tau2: self.f64("ga.tau2"),
            paper_literal_denominator: self.bool("ga.paper_literal_denominator"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.f64("train.learning_rate"),
            epochs: self.usize("train.epochs"),
            patience: self.opt_usize("train.patience"),
            batch_size: self.usize("train.batch_size"),
            lambda3: self.f64("ga.lambda3"),
            lambda4: self.f64("train.lambda4"),
            unsquared_norm: self.bool("train.unsquared_norm"),
            num_negatives: self.usize("pa.num_negatives"),
            ga: self.ga_loss_config(),
            ga_batch_size: self.usize("ga.batch_size"),
            ga_batches_per_step: self.usize("ga.batches_per_step"),
            seed: self.seed(),
            eval_seed: self.u64("eval.seed"),
        }
    }

    pub fn split_spans(&self) -> SplitSpans {
        SplitSpans {
            train_days: self.u64("data.train_days"),
            val_days: self.u64("data.val_days"),
            test_days: self.u64("data.test_days"),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_users: self.usize("synth.num_users"),
            num_items: self.usize("synth.num_items"),
            num_categories: self.usize("synth.num_categories"),
            attribute_types: self.usize("synth.attribute_types"),
            values_per_attribute: self.usize("synth.values_per_attribute"),
            num_brands: self.usize("synth.num_brands"),
            vocab_size: self.usize("synth.vocab_size"),
            days: self.u64("synth.days"),
            min_train_sessions: self.usize("synth.min_train_sessions"),
            max_train_sessions: self.usize("synth.max_train_sessions"),
            eval_sessions_per_user: self.usize("synth.eval_sessions_per_user"),
            noise_consultations_per_user: self.usize("synth.noise_consultations_per_user"),
            motivation_strength: self.f64("synth.motivation_strength"),
            preference_bias: self.f64("synth.preference_bias"),
            max_lead_hours: self.u64("synth.max_lead_hours"),
            d_llm: self.usize("synth.d_llm"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_library_defaults() {
        for s in KEYS {
            check_value(s, s.default).unwrap();
        }
        let c = RunConfig::default();
        assert_eq!(c.model_config(), ModelConfig::default());
        assert_eq!(c.train_config(), TrainConfig::default());
        assert_eq!(c.synth_config(), SynthConfig::default());
        assert_eq!(c.ga_loss_config(), GaLossConfig::default());
        assert!(c.non_defaults().is_empty());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::default().set("moae.typo", "1").unwrap_err();
        assert!(err.to_string().contains("moae.typo"));
        assert!(RunConfig::default().set("moae.k", "two").is_err());
        assert!(RunConfig::default().set("fusion.activation", "swish").is_err());
    }

    #[test]
    fn precedence_file_env_flags() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.conf");
        std::fs::write(&f, "# comment\nmoae.k = 1\npaths.output_dir = from_file\ntrain.epochs = 7\n").unwrap();
        let c = RunConfig::layered(Some(&f), Some("from_env"), &[("train.epochs".into(), "3".into())]).unwrap();
        assert_eq!(c.usize("moae.k"), 1);
        assert_eq!(c.get("paths.output_dir"), "from_env");
        assert_eq!(c.usize("train.epochs"), 3);
        let c = RunConfig::layered(Some(&f), Some("from_env"), &[("paths.output_dir".into(), "flag".into())]).unwrap();
        assert_eq!(c.get("paths.output_dir"), "flag");
        assert_eq!(c.checkpoint_path(), PathBuf::from("flag/model.ckpt"));
    }

    #[test]
    fn flat_round_trip_and_malformed_line() {
        let mut c = RunConfig::default();
        c.set("train.patience", "none").unwrap();
        let mut back = RunConfig::default();
        back.apply(&parse_flat(&c.to_flat(), "snapshot").unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.opt_usize("train.patience"), None);
        assert!(parse_flat("just words", "x").is_err());
    }

    #[test]
    fn grid_expansion() {
        let g = expand_grid(&[("a".into(), "1,2".into()), ("b".into(), "x".into()), ("c".into(), "p, q".into())]);
        assert_eq!(g.len(), 4);
        assert_eq!(g[1], vec![("a".into(), "1".into()), ("b".into(), "x".into()), ("c".into(), "q".into())]);
        assert_eq!(expand_grid(&[]), vec![Vec::<(String, String)>::new()]);
    }
}
