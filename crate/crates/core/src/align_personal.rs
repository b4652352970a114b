//! History encoders with an anchor readout, motivation aggregation, the final
//! query embedding, scoring, and the sampled-softmax ranking loss.

use rand::Rng;

use crate::autograd::{Activation, Tape, Var};
use crate::error::{MapsError, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Pre-norm bidirectional transformer encoder read out at position 0.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
    pub heads: usize,
    pub d: usize,
    positional: Option<ParamId>,
    pub max_positions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub positional: bool,
    /// Longest input including the anchor.
    pub max_positions: usize,
}

impl TransformerEncoder {
    pub fn new(params: &mut ParamStore, name: &str, d: usize, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(MapsError::Config("pa.encoder_layers must be >= 1".into()));
        }
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(MapsError::Config(format!("pa.heads = {} must divide d_uni = {d}", cfg.heads)));
        }
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    ln1: (params.add_filled(format!("{p}.ln1.gamma"), 1, d, 1.0), params.add_filled(format!("{p}.ln1.beta"), 1, d, 0.0)),
                    wq: params.add_glorot(format!("{p}.attn.wq"), d, d, rng),
                    wk: params.add_glorot(format!("{p}.attn.wk"), d, d, rng),
                    wv: params.add_glorot(format!("{p}.attn.wv"), d, d, rng),
                    wo: params.add_glorot(format!("{p}.attn.wo"), d, d, rng),
                    ln2: (params.add_filled(format!("{p}.ln2.gamma"), 1, d, 1.0), params.add_filled(format!("{p}.ln2.beta"), 1, d, 0.0)),
                    w1: params.add_glorot(format!("{p}.ffn.w1"), d, 4 * d, rng),
                    b1: params.add_filled(format!("{p}.ffn.b1"), 1, 4 * d, 0.0),
                    w2: params.add_glorot(format!("{p}.ffn.w2"), 4 * d, d, rng),
                    b2: params.add_filled(format!("{p}.ffn.b2"), 1, d, 0.0),
                }
            })
            .collect();
        let positional = cfg
            .positional
            .then(|| params.add_uniform(format!("{name}.positional"), cfg.max_positions, d, 0.02, rng));
        Ok(Self { layers, heads: cfg.heads, d, positional, max_positions: cfg.max_positions })
    }

    /// Output row 0 of the encoder over `x (n x d)`. `key_mask[j] == false`
    /// hides position `j` from attention; position 0 must stay visible.
    pub fn encode(&self, tape: &mut Tape, params: &ParamStore, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let n = tape.value(x).rows();
        if n == 0 {
            return Err(MapsError::EmptyInput("encoder input without an anchor".into()));
        }
        if let Some(m) = key_mask {
            if m.len() != n || !m[0] {
                return Err(MapsError::Contract("key mask must cover every position and keep the anchor".into()));
            }
        }
        let mut h = x;
        if let Some(p) = self.positional {
            if n > self.max_positions {
                return Err(MapsError::Contract(format!("sequence of {n} exceeds {} positions", self.max_positions)));
            }
            let table = tape.param(params, p);
            let pos = tape.slice_rows(table, 0, n);
            h = tape.add(h, pos);
        }
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = self.block(tape, params, layer, h, key_mask, l == last);
        }
        Ok(h)
    }

    fn block(&self, tape: &mut Tape, params: &ParamStore, ly: &EncoderLayer, x: Var, mask: Option<&[bool]>, readout: bool) -> Var {
        let g1 = tape.param(params, ly.ln1.0);
        let b1 = tape.param(params, ly.ln1.1);
        let xn = tape.layer_norm(x, g1, b1);
        let queries_in = if readout { tape.slice_rows(xn, 0, 1) } else { xn };
        let resid = if readout { tape.slice_rows(x, 0, 1) } else { x };
        let wq = tape.param(params, ly.wq);
        let wk = tape.param(params, ly.wk);
        let wv = tape.param(params, ly.wv);
        let wo = tape.param(params, ly.wo);
        let q = tape.matmul(queries_in, wq);
        let k = tape.matmul(xn, wk);
        let v = tape.matmul(xn, wv);
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let vh = tape.slice_cols(v, hd * dh, dh);
            let s = tape.matmul_bt(qh, kh);
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s, mask.map(|m| m.to_vec()));
            outs.push(tape.matmul(a, vh));
        }
        let att = tape.concat_cols(outs);
        let att = tape.matmul(att, wo);
        let h = tape.add(resid, att);

        let g2 = tape.param(params, ly.ln2.0);
        let b2 = tape.param(params, ly.ln2.1);
        let hn = tape.layer_norm(h, g2, b2);
        let w1 = tape.param(params, ly.w1);
        let bb1 = tape.param(params, ly.b1);
        let w2 = tape.param(params, ly.w2);
        let bb2 = tape.param(params, ly.b2);
        let f = tape.matmul(hn, w1);
        let f = tape.add_row(f, bb1);
        let f = tape.act(f, Activation::Gelu);
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, bb2);
        tape.add(h, f)
    }
}

/// Encoder output at the anchor for `[anchor; history]`.
pub fn encode_motivation(
    tape: &mut Tape,
    params: &ParamStore,
    encoder: &TransformerEncoder,
    anchor: Var,
    history: Option<Var>,
    pad_mask: Option<&[bool]>,
) -> Result<Var> {
    let x = match history {
        Some(h) => tape.concat_rows(vec![anchor, h]),
        None => anchor,
    };
    encoder.encode(tape, params, x, pad_mask)
}

/// Learnable mixing scalars for the motivation terms.
#[derive(Clone, Copy, Debug)]
pub struct MotivationWeights {
    pub alpha: [ParamId; 3],
}

impl MotivationWeights {
    pub fn new(params: &mut ParamStore) -> Self {
        let init = 1.0 / 3.0;
        Self {
            alpha: [
                params.add_filled("pa.alpha1", 1, 1, init),
                params.add_filled("pa.alpha2", 1, 1, init),
                params.add_filled("pa.alpha3", 1, 1, init),
            ],
        }
    }
}

/// `e' = α1·e^C + α2·e^S + α3·e_s`; absent terms are dropped.
pub fn aggregate_motivation(
    tape: &mut Tape,
    e_c: Option<Var>,
    e_s_hist: Option<Var>,
    e_s: Var,
    alpha: [Var; 3],
) -> Var {
    let mut parts = Vec::with_capacity(3);
    if let Some(c) = e_c {
        parts.push(tape.scale_by(c, alpha[0]));
    }
    if let Some(s) = e_s_hist {
        parts.push(tape.scale_by(s, alpha[1]));
    }
    parts.push(tape.scale_by(e_s, alpha[2]));
    tape.add_all(&parts)
}

/// `e'' = Encoder_final([e'; E_items])[0] + e_u`.
pub fn final_query_embedding(
    tape: &mut Tape,
    params: &ParamStore,
    encoder: &TransformerEncoder,
    e_prime: Var,
    items: Option<Var>,
    e_u: Var,
    pad_mask: Option<&[bool]>,
) -> Result<Var> {
    let enc = encode_motivation(tape, params, encoder, e_prime, items, pad_mask)?;
    Ok(tape.add(enc, e_u))
}

/// Dot-product relevance.
pub fn score(a: &[f64], b: &[f64]) -> f64 {
    crate::tensor::dot(a, b)
}

/// `Σ_rows LSE(scores_row) - scores_row[0]` where column 0 holds the positive.
pub fn pa_loss_from_scores(tape: &mut Tape, scores: Var) -> Var {
    let lse = tape.log_sum_exp_rows(scores, None);
    let pos = tape.slice_cols(scores, 0, 1);
    let d = tape.sub(lse, pos);
    tape.sum(d)
}

/// Sampled softmax cross-entropy of `e'' (1 x d)` against the positive item
/// and negatives `(n x d)`.
pub fn pa_loss(tape: &mut Tape, e2: Var, positive: Var, negatives: Var) -> Var {
    let cands = tape.concat_rows(vec![positive, negatives]);
    let s = tape.matmul_bt(e2, cands);
    pa_loss_from_scores(tape, s)
}

/// `n` distinct items drawn uniformly from `0..num_items` without `positive`,
/// redrawing on collision.
pub fn sample_negatives(rng: &mut impl Rng, num_items: usize, positive: usize, n: usize) -> Result<Vec<usize>> {
    if num_items < n + 1 {
        return Err(MapsError::Sampling(format!("{n} negatives need more than {num_items} items")));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = rng.gen_range(0..num_items);
        if v != positive && !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(positional: bool) -> (TransformerEncoder, ParamStore) {
        let mut p = ParamStore::new();
        let cfg = EncoderConfig { layers: 1, heads: 2, positional, max_positions: 31 };
        let e = TransformerEncoder::new(&mut p, "enc", 8, cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (e, p)
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
        a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn empty_history_depends_on_anchor_only() {
        let (e, p) = encoder(false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 1, 8);
        let mut t = Tape::new();
        let av = t.constant(a.clone());
        let o1 = encode_motivation(&mut t, &p, &e, av, None, None).unwrap();
        let av2 = t.constant(a);
        let o2 = encode_motivation(&mut t, &p, &e, av2, None, None).unwrap();
        assert_eq!(t.value(o1), t.value(o2));
        assert_eq!(t.value(o1).shape(), (1, 8));
    }

    #[test]
    fn history_permutation_invariance_without_positions() {
        let (e, p) = encoder(false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 1, 8);
        let h = rand_mat(&mut rng, 3, 8);
        let hp = Mat::from_rows(&[h.row(2).to_vec(), h.row(0).to_vec(), h.row(1).to_vec()]);
        let mut t = Tape::new();
        let av = t.constant(a);
        let h1 = t.constant(h);
        let h2 = t.constant(hp);
        let o1 = encode_motivation(&mut t, &p, &e, av, Some(h1), None).unwrap();
        let o2 = encode_motivation(&mut t, &p, &e, av, Some(h2), None).unwrap();
        assert!(close(t.value(o1), t.value(o2), 1e-12));

        let (ep, pp) = encoder(true);
        let o1 = encode_motivation(&mut t, &pp, &ep, av, Some(h1), None).unwrap();
        let o2 = encode_motivation(&mut t, &pp, &ep, av, Some(h2), None).unwrap();
        assert!(!close(t.value(o1), t.value(o2), 1e-9), "positions break the symmetry");
    }

    #[test]
    fn padding_is_masked() {
        for layers in [1, 2] {
            let mut p = ParamStore::new();
            let cfg = EncoderConfig { layers, heads: 2, positional: false, max_positions: 31 };
            let e = TransformerEncoder::new(&mut p, "enc", 8, cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let a = rand_mat(&mut rng, 1, 8);
            let h = rand_mat(&mut rng, 2, 8);
            let mut padded = h.data().to_vec();
            padded.extend((0..28 * 8).map(|_| 7.0));
            let mut t = Tape::new();
            let av = t.constant(a);
            let hv = t.constant(h);
            let hpad = t.constant(Mat::from_vec(30, 8, padded));
            let o1 = encode_motivation(&mut t, &p, &e, av, Some(hv), None).unwrap();
            let mut mask = vec![false; 31];
            mask[..3].iter_mut().for_each(|m| *m = true);
            let o2 = encode_motivation(&mut t, &p, &e, av, Some(hpad), Some(&mask)).unwrap();
            assert!(close(t.value(o1), t.value(o2), 1e-6), "layers={layers}");
        }
    }

    #[test]
    fn aggregation_oracle() {
        let mut t = Tape::new();
        let mut v = |i: usize| {
            let mut m = Mat::zeros(1, 5);
            m.set(0, i, 4.0);
            t.constant(m)
        };
        let (c, s, q) = (v(0), v(1), v(2));
        let al = [t.constant(Mat::scalar(0.5)), t.constant(Mat::scalar(0.25)), t.constant(Mat::scalar(0.25))];
        let out = aggregate_motivation(&mut t, Some(c), Some(s), q, al);
        assert_eq!(t.value(out).data(), &[2.0, 1.0, 1.0, 0.0, 0.0]);
        let al = [t.constant(Mat::scalar(0.0)), t.constant(Mat::scalar(0.0)), t.constant(Mat::scalar(1.0))];
        let out = aggregate_motivation(&mut t, Some(c), Some(s), q, al);
        assert_eq!(t.value(out), t.value(q));
        let z = t.constant(Mat::zeros(1, 5));
        let al = [t.constant(Mat::scalar(1.0)), t.constant(Mat::scalar(0.0)), t.constant(Mat::scalar(0.0))];
        let out = aggregate_motivation(&mut t, Some(z), Some(s), q, al);
        assert!(t.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn user_vector_is_added_in_place() {
        let (e, p) = encoder(false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let ep = t.constant(rand_mat(&mut rng, 1, 8));
        let items = t.constant(rand_mat(&mut rng, 4, 8));
        let u = rand_mat(&mut rng, 1, 8);
        let zero = t.constant(Mat::zeros(1, 8));
        let uv = t.constant(u.clone());
        let u2 = t.constant(u.scaled(2.0));
        let base = final_query_embedding(&mut t, &p, &e, ep, Some(items), zero, None).unwrap();
        let plain = encode_motivation(&mut t, &p, &e, ep, Some(items), None).unwrap();
        assert_eq!(t.value(base), t.value(plain));
        let one = final_query_embedding(&mut t, &p, &e, ep, Some(items), uv, None).unwrap();
        let two = final_query_embedding(&mut t, &p, &e, ep, Some(items), u2, None).unwrap();
        for j in 0..8 {
            let d = t.value(two).get(0, j) - t.value(one).get(0, j);
            assert!((d - u.get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_and_losses() {
        assert_eq!(score(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(score(&[1.0, 2.0], &[3.0, -1.0]), 1.0);

        let mut t = Tape::new();
        let s = t.constant(Mat::filled(1, 11, 0.7));
        let l = pa_loss_from_scores(&mut t, s);
        assert!((t.scalar_value(l) - 11f64.ln()).abs() < 1e-12);

        let s = t.constant(Mat::row_vector(vec![1.0, 0.0, 0.0]));
        let l = pa_loss_from_scores(&mut t, s);
        let e = 1f64.exp();
        assert!((t.scalar_value(l) - -(e / (e + 2.0)).ln()).abs() < 1e-12);
        assert!((t.scalar_value(l) - 0.5514).abs() < 1e-4);

        let s = t.constant(Mat::row_vector(vec![200.0, 0.0, 0.0]));
        let l = pa_loss_from_scores(&mut t, s);
        assert!(t.scalar_value(l) < 1e-80);

        let e2 = t.constant(Mat::row_vector(vec![1.0, 2.0]));
        let pos = t.constant(Mat::row_vector(vec![3.0, -1.0]));
        let neg = t.constant(Mat::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]));
        let l = pa_loss(&mut t, e2, pos, neg);
        assert!((t.scalar_value(l) - -(e / (e + 2.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn negatives_are_distinct_and_exclude_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let negs = sample_negatives(&mut rng, 12, 3, 10).unwrap();
            assert_eq!(negs.len(), 10);
            assert!(!negs.contains(&3));
            let mut d = negs.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 10);
        }
        assert!(sample_negatives(&mut rng, 10, 0, 10).is_err());
    }

    #[test]
    fn config_errors() {
        let mut p = ParamStore::new();
        let cfg = EncoderConfig { layers: 1, heads: 3, positional: false, max_positions: 4 };
        assert!(TransformerEncoder::new(&mut p, "x", 8, cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
