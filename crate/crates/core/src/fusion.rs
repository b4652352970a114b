//! Categorical ID lookups and the per-entity projection heads into `d_uni`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Tape, Var};
use crate::corpus::Features;
use crate::error::{MapsError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

/// Elementwise nonlinearity applied after every head layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadActivation {
    Identity,
    Tanh,
    Silu,
    Prelu,
    Gelu,
    Relu,
}

impl HeadActivation {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "identity" => Self::Identity,
            "tanh" => Self::Tanh,
            "silu" => Self::Silu,
            "prelu" => Self::Prelu,
            "gelu" => Self::Gelu,
            "relu" => Self::Relu,
            other => return Err(MapsError::Config(format!("unknown activation {other:?}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Tanh => "tanh",
            Self::Silu => "silu",
            Self::Prelu => "prelu",
            Self::Gelu => "gelu",
            Self::Relu => "relu",
        }
    }
}

/// Which half of the user/item input is zeroed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionAblation {
    #[default]
    None,
    /// Text part replaced by zeros.
    IdOnly,
    /// ID part replaced by zeros.
    LlmOnly,
}

impl FusionAblation {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "id_only" => Self::IdOnly,
            "llm_only" => Self::LlmOnly,
            other => return Err(MapsError::Config(format!("unknown fusion ablation {other:?}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::IdOnly => "id_only",
            Self::LlmOnly => "llm_only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    User,
    Item,
    Query,
    Consultation,
}

impl EntityKind {
    const ALL: [EntityKind; 4] = [Self::User, Self::Item, Self::Query, Self::Consultation];

    fn tag(self) -> &'static str {
        match self {
            Self::User => "u",
            Self::Item => "v",
            Self::Query => "s",
            Self::Consultation => "c",
        }
    }

    fn has_id(self) -> bool {
        matches!(self, Self::User | Self::Item)
    }
}

#[derive(Clone, Debug)]
struct CategoryTable {
    name: String,
    table: ParamId,
    /// value -> row; row 0 is reserved for unseen values.
    rows: BTreeMap<String, usize>,
}

/// One embedding table per categorical feature, concatenated in schema order.
#[derive(Clone, Debug)]
pub struct CategoryLookup {
    tables: Vec<CategoryTable>,
    pub d_id: usize,
}

impl CategoryLookup {
    /// `vocab[f]` lists the known values of feature `names[f]`.
    pub fn new(
        params: &mut ParamStore,
        prefix: &str,
        names: &[String],
        vocab: &[Vec<String>],
        d_id: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(names.len(), vocab.len());
        let tables = names
            .iter()
            .zip(vocab)
            .map(|(name, values)| {
                let rows: BTreeMap<String, usize> =
                    values.iter().enumerate().map(|(i, v)| (v.clone(), i + 1)).collect();
                let table = params.add_uniform(format!("{prefix}.{name}"), rows.len() + 1, d_id, 0.1, rng);
                CategoryTable { name: name.clone(), table, rows }
            })
            .collect();
        Self { tables, d_id }
    }

    /// Feature vocabularies observed on `entities`, sorted.
    pub fn collect_vocab<'a>(names: &[String], entities: impl Iterator<Item = &'a Features>) -> Vec<Vec<String>> {
        let mut sets: Vec<std::collections::BTreeSet<String>> = vec![Default::default(); names.len()];
        for f in entities {
            for (n, v) in f {
                if let Some(i) = names.iter().position(|x| x == n) {
                    sets[i].insert(v.clone());
                }
            }
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.tables.iter().map(|t| t.name.clone()).collect()
    }

    pub fn vocab(&self) -> Vec<Vec<String>> {
        self.tables
            .iter()
            .map(|t| {
                let mut v: Vec<(&String, &usize)> = t.rows.iter().collect();
                v.sort_by_key(|(_, &r)| r);
                v.into_iter().map(|(s, _)| s.clone()).collect()
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.tables.len() * self.d_id
    }

    /// Table rows for one entity; absent features and unseen values map to row 0.
    pub fn rows(&self, features: &Features) -> Result<Vec<usize>> {
        for (n, _) in features {
            if !self.tables.iter().any(|t| &t.name == n) {
                return Err(MapsError::Schema(format!("categorical feature {n:?} is not in the schema")));
            }
        }
        Ok(self
            .tables
            .iter()
            .map(|t| crate::corpus::feature(features, &t.name).and_then(|v| t.rows.get(v).copied()).unwrap_or(0))
            .collect())
    }

    /// `B x (n * d_id)` concatenated lookups for a batch of row lists.
    pub fn embed_rows(&self, tape: &mut Tape, params: &ParamStore, rows: &[Vec<usize>]) -> Option<Var> {
        if self.tables.is_empty() {
            return None;
        }
        let parts = self
            .tables
            .iter()
            .enumerate()
            .map(|(f, t)| {
                let table = tape.param(params, t.table);
                tape.gather(table, rows.iter().map(|r| r[f]).collect())
            })
            .collect();
        Some(tape.concat_cols(parts))
    }

    /// Concatenated ID vector of one entity.
    pub fn id_embedding(&self, tape: &mut Tape, params: &ParamStore, features: &Features) -> Result<Option<Var>> {
        let rows = self.rows(features)?;
        Ok(self.embed_rows(tape, params, &[rows]))
    }
}

#[derive(Clone, Debug)]
struct Head {
    layers: Vec<(ParamId, ParamId)>,
    id_dim: usize,
    text_dim: usize,
}

/// `act(FFN_k(concat(id, text)))` for the four entity kinds.
#[derive(Clone, Debug)]
pub struct EntityEmbedder {
    heads: Vec<Head>,
    pub activation: HeadActivation,
    prelu_slope: Option<ParamId>,
    pub ablate: FusionAblation,
    pub d_uni: usize,
}

/// Input widths of each head: `(id_dim, text_dim)` for user, item, query,
/// consultation.
#[derive(Clone, Copy, Debug)]
pub struct HeadInputs {
    pub user: (usize, usize),
    pub item: (usize, usize),
    pub query: usize,
    pub consultation: usize,
}

impl EntityEmbedder {
    pub fn new(
        params: &mut ParamStore,
        inputs: HeadInputs,
        d_uni: usize,
        depth: usize,
        activation: HeadActivation,
        ablate: FusionAblation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(MapsError::Config("fusion.head_layers must be >= 1".into()));
        }
        let mut heads = Vec::new();
        for kind in EntityKind::ALL {
            let (id_dim, text_dim) = match kind {
                EntityKind::User => inputs.user,
                EntityKind::Item => inputs.item,
                EntityKind::Query => (0, inputs.query),
                EntityKind::Consultation => (0, inputs.consultation),
            };
            if id_dim + text_dim == 0 {
                return Err(MapsError::Schema(format!("{kind:?} head has no inputs")));
            }
            let mut layers = Vec::with_capacity(depth);
            let mut fan_in = id_dim + text_dim;
            for l in 0..depth {
                let w = params.add_glorot(format!("fusion.ffn_{}.{l}.weight", kind.tag()), fan_in, d_uni, rng);
                let b = params.add_filled(format!("fusion.ffn_{}.{l}.bias", kind.tag()), 1, d_uni, 0.0);
                layers.push((w, b));
                fan_in = d_uni;
            }
            heads.push(Head { layers, id_dim, text_dim });
        }
        let prelu_slope = (activation == HeadActivation::Prelu).then(|| params.add_filled("fusion.prelu.slope", 1, 1, 0.25));
        Ok(Self { heads, activation, prelu_slope, ablate, d_uni })
    }

    fn head(&self, kind: EntityKind) -> &Head {
        &self.heads[EntityKind::ALL.iter().position(|&k| k == kind).unwrap()]
    }

    pub fn apply_activation(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Var {
        match self.activation {
            HeadActivation::Identity => x,
            HeadActivation::Tanh => tape.act(x, Activation::Tanh),
            HeadActivation::Silu => tape.act(x, Activation::Silu),
            HeadActivation::Gelu => tape.act(x, Activation::Gelu),
            HeadActivation::Relu => tape.act(x, Activation::Relu),
            HeadActivation::Prelu => {
                let slope = tape.param(params, self.prelu_slope.expect("prelu slope registered"));
                tape.prelu(x, slope)
            }
        }
    }

    /// Row-batched entity embeddings `B x d_uni`. User and item heads take an
    /// ID part; query and consultation heads take text only.
    pub fn embed(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        kind: EntityKind,
        id: Option<Var>,
        text: Option<Var>,
    ) -> Result<Var> {
        let head = self.head(kind);
        if (head.id_dim > 0) != id.is_some() || (head.text_dim > 0) != text.is_some() {
            return Err(MapsError::Contract(format!("{kind:?} embedding called with the wrong input arity")));
        }
        let rows = id.or(text).map(|v| tape.value(v).rows()).ok_or_else(|| {
            MapsError::Contract(format!("{kind:?} embedding called without inputs"))
        })?;
        let mut parts = Vec::new();
        if head.id_dim > 0 {
            let id = id.unwrap();
            check_width(tape, id, head.id_dim, kind)?;
            if kind.has_id() && self.ablate == FusionAblation::LlmOnly {
                parts.push(tape.constant(Mat::zeros(rows, head.id_dim)));
            } else {
                parts.push(id);
            }
        }
        if head.text_dim > 0 {
            let text = text.unwrap();
            check_width(tape, text, head.text_dim, kind)?;
            if kind.has_id() && self.ablate == FusionAblation::IdOnly {
                parts.push(tape.constant(Mat::zeros(rows, head.text_dim)));
            } else {
                parts.push(text);
            }
        }
        let mut x = tape.concat_cols(parts);
        for &(w, b) in &head.layers {
            let w = tape.param(params, w);
            let b = tape.param(params, b);
            let y = tape.matmul(x, w);
            let y = tape.add_row(y, b);
            x = self.apply_activation(tape, params, y);
        }
        Ok(x)
    }
}

fn check_width(tape: &Tape, v: Var, expected: usize, kind: EntityKind) -> Result<()> {
    let found = tape.value(v).cols();
    if found != expected {
        return Err(MapsError::Shape { name: format!("{kind:?} input"), expected: (1, expected), found: (1, found) });
    }
    Ok(())
}
