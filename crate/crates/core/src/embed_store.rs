//! Frozen token embeddings produced offline by a language model, plus the
//! trainable projection to the text dimension.
//!
//! Binary layout: magic `MAPSEMB1`, vocabulary size and dimension as u64 LE,
//! then `V * d_llm` f32 LE values row-major. The companion `vocab.txt` holds
//! one token per line; the line number is the token id.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{MapsError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 8] = b"MAPSEMB1";
pub const UNK_TOKEN: &str = "<unk>";
pub const SEP_TOKEN: &str = "<sep>";

#[derive(Clone, Debug)]
pub struct TokenEmbeddingStore {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    table: Mat,
    unk: u32,
    max_token_chars: usize,
}

impl TokenEmbeddingStore {
    /// Builds a store. If `<unk>` is missing it is appended; its vector is
    /// the mean of all other rows.
    pub fn from_parts(mut vocab: Vec<String>, table: Mat) -> Result<Self> {
        if vocab.len() != table.rows() {
            return Err(MapsError::Format(format!("{} vocabulary entries for {} vectors", vocab.len(), table.rows())));
        }
        if !table.is_finite() {
            return Err(MapsError::Format("embedding table contains non-finite values".into()));
        }
        let d = table.cols();
        let mut data = table.into_vec();
        let unk = match vocab.iter().position(|t| t == UNK_TOKEN) {
            Some(p) => p,
            None => {
                vocab.push(UNK_TOKEN.to_string());
                data.extend(std::iter::repeat_n(0.0, d));
                vocab.len() - 1
            }
        };
        let rows = vocab.len();
        let others = rows - 1;
        if others > 0 {
            let mut mean = vec![0.0f64; d];
            for r in (0..rows).filter(|&r| r != unk) {
                for (m, x) in mean.iter_mut().zip(&data[r * d..(r + 1) * d]) {
                    *m += x;
                }
            }
            for (j, m) in mean.iter().enumerate() {
                data[unk * d + j] = (m / others as f64) as f32 as f64;
            }
        }
        let mut index = HashMap::with_capacity(rows);
        for (i, t) in vocab.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(MapsError::Format(format!("vocabulary entry {i} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(MapsError::Format(format!("duplicate vocabulary entry {t}")));
            }
        }
        let max_token_chars = vocab.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Self { vocab, index, table: Mat::from_vec(rows, d, data), unk: unk as u32, max_token_chars })
    }

    pub fn load(embeddings: impl AsRef<Path>, vocab: impl AsRef<Path>) -> Result<Self> {
        let (ep, vp) = (embeddings.as_ref(), vocab.as_ref());
        let bytes = fs::read(ep).map_err(|source| MapsError::Load { path: ep.to_path_buf(), source })?;
        let text = fs::read_to_string(vp).map_err(|source| MapsError::Load { path: vp.to_path_buf(), source })?;
        let table = decode_table(&bytes)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() != table.rows() {
            return Err(MapsError::Format(format!(
                "vocab.txt has {} lines but the embedding header declares {}",
                tokens.len(),
                table.rows()
            )));
        }
        Self::from_parts(tokens, table)
    }

    pub fn write(&self, embeddings: impl AsRef<Path>, vocab: impl AsRef<Path>) -> Result<()> {
        fs::write(embeddings, encode_table(&self.table))?;
        let mut w = std::io::BufWriter::new(fs::File::create(vocab)?);
        for t in &self.vocab {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn table(&self) -> &Mat {
        &self.table
    }

    /// Stacked table rows for a token sequence.
    pub fn rows(&self, tokens: &[u32]) -> Mat {
        let mut raw = Mat::zeros(tokens.len(), self.dim());
        for (r, &t) in tokens.iter().enumerate() {
            raw.row_mut(r).copy_from_slice(self.table.row(t as usize));
        }
        raw
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn token(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Whitespace pre-split, then greedy longest match against the vocabulary.
    /// A run of characters no token starts at becomes one `<unk>`. Empty text
    /// yields a single `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let chars: Vec<(usize, char)> = word.char_indices().collect();
            let mut pos = 0;
            let mut in_unknown = false;
            while pos < chars.len() {
                let start = chars[pos].0;
                let max = self.max_token_chars.min(chars.len() - pos);
                let mut matched = None;
                for len in (1..=max).rev() {
                    let end = chars.get(pos + len).map_or(word.len(), |c| c.0);
                    if let Some(&id) = self.index.get(&word[start..end]) {
                        matched = Some((id, len));
                        break;
                    }
                }
                match matched {
                    Some((id, len)) => {
                        out.push(id);
                        pos += len;
                        in_unknown = false;
                    }
                    None => {
                        if !in_unknown {
                            out.push(self.unk);
                            in_unknown = true;
                        }
                        pos += 1;
                    }
                }
            }
        }
        if out.is_empty() {
            out.push(self.unk);
        }
        out
    }

    /// SHA-256 over the f32 payload.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(encode_table(&self.table)))
    }
}

fn encode_table(table: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + table.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(table.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(table.cols() as u64).to_le_bytes());
    for &x in table.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

fn decode_table(bytes: &[u8]) -> Result<Mat> {
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(MapsError::Format("missing MAPSEMB1 header".into()));
    }
    let v = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = v.checked_mul(d).and_then(|n| n.checked_mul(4)).ok_or_else(|| MapsError::Format("header overflow".into()))?;
    let payload = &bytes[24..];
    if payload.len() as u64 != expected {
        return Err(MapsError::Format(format!(
            "header declares {v}x{d} floats ({expected} bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity((v * d) as usize);
    for chunk in payload.chunks_exact(4) {
        let x = f32::from_le_bytes(chunk.try_into().unwrap());
        if x.is_nan() {
            return Err(MapsError::Format("NaN in embedding payload".into()));
        }
        data.push(x as f64);
    }
    Ok(Mat::from_vec(v as usize, d as usize, data))
}

/// Trainable affine map from `d_llm` to `d_t`, shared by every text source.
#[derive(Clone, Copy, Debug)]
pub struct TextProjection {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_t: usize,
}

impl TextProjection {
    pub fn new(params: &mut ParamStore, d_llm: usize, d_t: usize, rng: &mut impl Rng) -> Self {
        let weight = params.add_glorot("text_proj.weight", d_llm, d_t, rng);
        let bias = params.add_filled("text_proj.bias", 1, d_t, 0.0);
        Self { weight, bias, d_t }
    }

    /// Projected token rows `L x d_t`. Store rows enter the tape as constants.
    pub fn project(&self, tape: &mut Tape, params: &ParamStore, store: &TokenEmbeddingStore, tokens: &[u32]) -> Var {
        self.project_raw(tape, params, store.rows(tokens))
    }

    /// Projection of raw store rows `L x d_llm`.
    pub fn project_raw(&self, tape: &mut Tape, params: &ParamStore, raw: Mat) -> Var {
        let x = tape.constant(raw);
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// Projected token vectors for `text` with its token ids.
pub fn embed_tokens(
    store: &TokenEmbeddingStore,
    projection: &TextProjection,
    params: &ParamStore,
    text: &str,
) -> (Mat, Vec<u32>) {
    let tokens = store.tokenize(text);
    let mut tape = Tape::new();
    let h = projection.project(&mut tape, params, store, &tokens);
    (tape.value(h).clone(), tokens)
}
