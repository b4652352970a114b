//! Mixture-of-attention-experts pooling of token sequences into one text vector.
//!
//! Three expert families attend over the projected token rows `H (L x d_t)`:
//! a learned query vector, per-position self scores, and the current search
//! query's text vector. A gating network keeps the top-K experts and mixes
//! their pooled vectors with softmax weights over the kept logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{MapsError, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Parameterized,
    #[serde(rename = "self")]
    SelfAttention,
    Cross,
}

#[derive(Clone, Copy, Debug)]
pub struct PoolingExpert {
    pub kind: ExpertKind,
    pub w_k: ParamId,
    pub w_q: Option<ParamId>,
    pub q: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct GatingNetwork {
    pub weight: ParamId,
    pub n_e: usize,
    pub k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoaeConfig {
    /// Experts per family.
    pub n_e: usize,
    /// Experts activated per text.
    pub k: usize,
    /// Multiply pooled vectors by `1/L` as the expert formulas are typeset.
    pub paper_literal_scaling: bool,
    /// Replace the mixture by plain mean pooling.
    pub mean_pooling: bool,
}

impl Default for MoaeConfig {
    fn default() -> Self {
        Self { n_e: 2, k: 2, paper_literal_scaling: false, mean_pooling: false }
    }
}

/// Output of one attention expert.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub output: Var,
    /// `1 x L` attention weights.
    pub weights: Var,
}

fn check_rows(tape: &Tape, h: Var) -> Result<usize> {
    let l = tape.value(h).rows();
    if l == 0 {
        return Err(MapsError::EmptyInput("attention pooling over zero tokens".into()));
    }
    Ok(l)
}

fn weighted_sum(tape: &mut Tape, scores: Var, h: Var, literal: bool) -> Pooled {
    let weights = tape.softmax_rows(scores, None);
    let mut output = tape.matmul(weights, h);
    if literal {
        let l = tape.value(h).rows() as f64;
        output = tape.scale(output, 1.0 / l);
    }
    Pooled { output, weights }
}

fn expect_kind(expert: &PoolingExpert, kind: ExpertKind) -> Result<()> {
    if expert.kind != kind {
        return Err(MapsError::Contract(format!("expected a {kind:?} expert, got {:?}", expert.kind)));
    }
    Ok(())
}

/// `softmax_i(q · (h_i W^k) / sqrt(d_t))` weighted sum of rows.
pub fn param_attention_pool(
    tape: &mut Tape,
    params: &ParamStore,
    expert: &PoolingExpert,
    h: Var,
    literal: bool,
) -> Result<Pooled> {
    expect_kind(expert, ExpertKind::Parameterized)?;
    check_rows(tape, h)?;
    let d = tape.value(h).cols() as f64;
    let wk = tape.param(params, expert.w_k);
    let q = tape.param(params, expert.q.expect("parameterized expert has a query"));
    let keys = tape.matmul(h, wk);
    let s = tape.matmul_bt(q, keys);
    let s = tape.scale(s, 1.0 / d.sqrt());
    Ok(weighted_sum(tape, s, h, literal))
}

/// `softmax_i((h_i W^q) · (h_i W^k) / sqrt(d_t))` weighted sum of rows.
pub fn self_attention_pool(
    tape: &mut Tape,
    params: &ParamStore,
    expert: &PoolingExpert,
    h: Var,
    literal: bool,
) -> Result<Pooled> {
    expect_kind(expert, ExpertKind::SelfAttention)?;
    check_rows(tape, h)?;
    let d = tape.value(h).cols() as f64;
    let wk = tape.param(params, expert.w_k);
    let wq = tape.param(params, expert.w_q.expect("self expert has W^q"));
    let keys = tape.matmul(h, wk);
    let queries = tape.matmul(h, wq);
    let s = tape.row_dots(queries, keys);
    let s = tape.transpose(s);
    let s = tape.scale(s, 1.0 / d.sqrt());
    Ok(weighted_sum(tape, s, h, literal))
}

/// `softmax_i((q' W^q) · (h_i W^k) / sqrt(d_t))` weighted sum of rows.
pub fn cross_attention_pool(
    tape: &mut Tape,
    params: &ParamStore,
    expert: &PoolingExpert,
    h: Var,
    q_prime: Var,
    literal: bool,
) -> Result<Pooled> {
    expect_kind(expert, ExpertKind::Cross)?;
    check_rows(tape, h)?;
    let wk = tape.param(params, expert.w_k);
    let keys = tape.matmul(h, wk);
    let wq = tape.param(params, expert.w_q.expect("cross expert has W^q"));
    let qq = tape.matmul(q_prime, wq);
    Ok(cross_from_keys(tape, h, keys, qq, literal))
}

fn cross_from_keys(tape: &mut Tape, h: Var, keys: Var, qq: Var, literal: bool) -> Pooled {
    let d = tape.value(h).cols() as f64;
    let s = tape.matmul_bt(qq, keys);
    let s = tape.scale(s, 1.0 / d.sqrt());
    weighted_sum(tape, s, h, literal)
}

/// Experts chosen by the gate with their mixture weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSelection {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Top-K of `logits` among `allowed` experts, ties to the lower index, with
/// softmax weights over the selected logits only.
pub fn gate_select(logits: &[f64], allowed: &[bool], k: usize) -> Result<GateSelection> {
    let experts = top_k(logits, allowed, k)?;
    let sel: Vec<f64> = experts.iter().map(|&j| logits[j]).collect();
    Ok(GateSelection { experts, weights: crate::tensor::softmax(&sel) })
}

fn top_k(logits: &[f64], allowed: &[bool], k: usize) -> Result<Vec<usize>> {
    let n_allowed = allowed.iter().filter(|&&a| a).count();
    if k == 0 || n_allowed < k {
        return Err(MapsError::Config(format!("cannot activate {k} experts out of {n_allowed} allowed")));
    }
    let mut idx: Vec<usize> = (0..logits.len()).filter(|&j| allowed[j]).collect();
    // stable sort keeps lower indices first among equal logits
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    Ok(idx)
}

/// Gating decisions and query-independent parts of one text's pooling.
#[derive(Clone, Debug)]
pub struct PreparedText {
    pub h: Var,
    pub selected: Vec<usize>,
    /// `1 x K` gate weights.
    pub gate: Var,
    /// Weighted sum of the selected non-cross experts.
    static_sum: Option<Var>,
    /// `(slot in selection, expert index, keys)` for selected cross experts.
    cross: Vec<(usize, usize, Var)>,
    mean: Option<Var>,
}

impl PreparedText {
    pub fn needs_query(&self) -> bool {
        !self.cross.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Moae {
    pub experts: Vec<PoolingExpert>,
    pub gating: GatingNetwork,
    pub config: MoaeConfig,
    pub d_t: usize,
}

impl Moae {
    pub fn new(params: &mut ParamStore, d_t: usize, config: MoaeConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.n_e == 0 {
            return Err(MapsError::Config("moae.n_e must be >= 1".into()));
        }
        if config.k == 0 || config.k > 3 * config.n_e {
            return Err(MapsError::Config(format!("moae.k must be in 1..={}", 3 * config.n_e)));
        }
        let mut experts = Vec::with_capacity(3 * config.n_e);
        for (fam, kind) in [ExpertKind::Parameterized, ExpertKind::SelfAttention, ExpertKind::Cross].into_iter().enumerate() {
            for m in 0..config.n_e {
                let j = fam * config.n_e + m;
                let w_k = params.add_glorot(format!("moae.expert{j}.w_k"), d_t, d_t, rng);
                let (w_q, q) = match kind {
                    ExpertKind::Parameterized => {
                        (None, Some(params.add_uniform(format!("moae.expert{j}.q"), 1, d_t, (3.0 / d_t as f64).sqrt(), rng)))
                    }
                    _ => (Some(params.add_glorot(format!("moae.expert{j}.w_q"), d_t, d_t, rng)), None),
                };
                experts.push(PoolingExpert { kind, w_k, w_q, q });
            }
        }
        let weight = params.add_glorot("moae.gate.weight", d_t, 3 * config.n_e, rng);
        Ok(Self { experts, gating: GatingNetwork { weight, n_e: config.n_e, k: config.k }, config, d_t })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Gate logits for the mean of the token rows.
    pub fn gate_logits(&self, tape: &mut Tape, params: &ParamStore, h: Var) -> Var {
        let summary = tape.mean_rows(h);
        let w = tape.param(params, self.gating.weight);
        tape.matmul(summary, w)
    }

    /// Runs gating and every query-independent expert. `with_query` controls
    /// whether cross experts may be selected.
    pub fn prepare(&self, tape: &mut Tape, params: &ParamStore, h: Var, with_query: bool) -> Result<PreparedText> {
        check_rows(tape, h)?;
        let lit = self.config.paper_literal_scaling;
        if self.config.mean_pooling {
            let mut m = tape.mean_rows(h);
            if lit {
                let l = tape.value(h).rows() as f64;
                m = tape.scale(m, 1.0 / l);
            }
            let gate = tape.constant(crate::tensor::Mat::scalar(1.0));
            return Ok(PreparedText { h, selected: vec![], gate, static_sum: None, cross: vec![], mean: Some(m) });
        }
        let logits = self.gate_logits(tape, params, h);
        let allowed: Vec<bool> = self.experts.iter().map(|e| with_query || e.kind != ExpertKind::Cross).collect();
        let selected = top_k(tape.value(logits).data(), &allowed, self.gating.k)?;
        let sel_logits = tape.select_cols(logits, selected.clone());
        let gate = tape.softmax_rows(sel_logits, None);
        let mut parts = Vec::new();
        let mut cross = Vec::new();
        for (slot, &j) in selected.iter().enumerate() {
            let e = &self.experts[j];
            let pooled = match e.kind {
                ExpertKind::Parameterized => param_attention_pool(tape, params, e, h, lit)?,
                ExpertKind::SelfAttention => self_attention_pool(tape, params, e, h, lit)?,
                ExpertKind::Cross => {
                    let wk = tape.param(params, e.w_k);
                    let keys = tape.matmul(h, wk);
                    cross.push((slot, j, keys));
                    continue;
                }
            };
            let g = tape.pick(gate, 0, slot);
            parts.push(tape.scale_by(pooled.output, g));
        }
        let static_sum = if parts.is_empty() { None } else { Some(tape.add_all(&parts)) };
        Ok(PreparedText { h, selected, gate, static_sum, cross, mean: None })
    }

    /// Completes a prepared text with the current query's text vector.
    pub fn finish(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        p: &PreparedText,
        query: Option<&mut CrossQuery>,
    ) -> Result<Var> {
        if let Some(m) = p.mean {
            return Ok(m);
        }
        let mut parts: Vec<Var> = p.static_sum.into_iter().collect();
        if !p.cross.is_empty() {
            let q = query.ok_or_else(|| MapsError::Contract("cross expert selected without a query vector".into()))?;
            for &(slot, j, keys) in &p.cross {
                let qq = q.projected(tape, params, &self.experts[j], j);
                let pooled = cross_from_keys(tape, p.h, keys, qq, self.config.paper_literal_scaling);
                let g = tape.pick(p.gate, 0, slot);
                parts.push(tape.scale_by(pooled.output, g));
            }
        }
        Ok(tape.add_all(&parts))
    }

    /// `e_text = Σ_j gate_j · pool_j(H)` over the top-K experts. Without a
    /// query vector the cross family is masked out before selection.
    pub fn pool_text(&self, tape: &mut Tape, params: &ParamStore, h: Var, q_prime: Option<Var>) -> Result<Var> {
        let mut q = q_prime.map(CrossQuery::new);
        let p = self.prepare(tape, params, h, q.is_some())?;
        self.finish(tape, params, &p, q.as_mut())
    }
}

/// Query vector `q'` for cross experts with its per-expert `q' W^q` cache.
#[derive(Clone, Debug)]
pub struct CrossQuery {
    pub q: Var,
    projected: Vec<(usize, Var)>,
}

impl CrossQuery {
    pub fn new(q: Var) -> Self {
        Self { q, projected: Vec::new() }
    }

    fn projected(&mut self, tape: &mut Tape, params: &ParamStore, expert: &PoolingExpert, j: usize) -> Var {
        if let Some(&(_, v)) = self.projected.iter().find(|(e, _)| *e == j) {
            return v;
        }
        let wq = tape.param(params, expert.w_q.expect("cross expert has W^q"));
        let v = tape.matmul(self.q, wq);
        self.projected.push((j, v));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn expert(params: &mut ParamStore, kind: ExpertKind, wk: Mat, wq: Option<Mat>, q: Option<Mat>) -> PoolingExpert {
        let n = params.len();
        PoolingExpert {
            kind,
            w_k: params.add(format!("k{n}"), wk),
            w_q: wq.map(|m| params.add(format!("wq{n}"), m)),
            q: q.map(|m| params.add(format!("q{n}"), m)),
        }
    }

    #[test]
    fn param_pool_matches_scalar_oracle() {
        let mut p = ParamStore::new();
        let e = expert(&mut p, ExpertKind::Parameterized, Mat::identity(2), None, Some(Mat::row_vector(vec![1.0, 0.0])));
        let mut t = Tape::new();
        let h = t.constant(Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let out = param_attention_pool(&mut t, &p, &e, h, false).unwrap();
        // scores (1/sqrt2, 0)
        let w0 = 1.0 / (1.0 + (-(0.5f64).sqrt()).exp());
        assert!(close(t.value(out.weights).data(), &[w0, 1.0 - w0], 1e-12));
        assert!(close(t.value(out.output).data(), &[0.6698, 0.3302], 1e-4));
    }

    #[test]
    fn self_pool_matches_scalar_oracle() {
        let mut p = ParamStore::new();
        let e = expert(&mut p, ExpertKind::SelfAttention, Mat::identity(2), Some(Mat::identity(2)), None);
        let mut t = Tape::new();
        let h = t.constant(Mat::from_rows(&[vec![2.0, 0.0], vec![1.0, 0.0]]));
        let out = self_attention_pool(&mut t, &p, &e, h, false).unwrap();
        // scores (4, 1) / sqrt2
        let w0 = 1.0 / (1.0 + (-3.0 / 2f64.sqrt()).exp());
        assert!(close(t.value(out.weights).data(), &[w0, 1.0 - w0], 1e-12));
        assert!(close(t.value(out.weights).data(), &[0.89296, 0.10704], 1e-5));
        assert!(close(t.value(out.output).data(), &[1.89296, 0.0], 1e-5));
    }

    #[test]
    fn cross_pool_matches_scalar_oracle() {
        let mut p = ParamStore::new();
        let e = expert(&mut p, ExpertKind::Cross, Mat::identity(2), Some(Mat::identity(2)), None);
        let mut t = Tape::new();
        let h = t.constant(Mat::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]));
        let q = t.constant(Mat::row_vector(vec![1.0, 0.0]));
        let out = cross_attention_pool(&mut t, &p, &e, h, q, false).unwrap();
        assert!(close(t.value(out.weights).data(), &[0.8044, 0.1956], 1e-4));
        assert!(close(t.value(out.output).data(), &[0.6088, 0.0], 1e-4));

        let zero = t.constant(Mat::row_vector(vec![0.0, 0.0]));
        let out = cross_attention_pool(&mut t, &p, &e, h, zero, false).unwrap();
        assert!(close(t.value(out.output).data(), &[0.0, 0.0], 1e-12));
    }

    #[test]
    fn singleton_and_uniform_cases() {
        let mut p = ParamStore::new();
        let e = expert(&mut p, ExpertKind::SelfAttention, Mat::zeros(3, 3), Some(Mat::zeros(3, 3)), None);
        let mut t = Tape::new();
        let one = t.constant(Mat::row_vector(vec![0.3, -1.0, 2.0]));
        let out = self_attention_pool(&mut t, &p, &e, one, false).unwrap();
        assert_eq!(t.value(out.output).data(), &[0.3, -1.0, 2.0]);
        let h = t.constant(Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]]));
        let out = self_attention_pool(&mut t, &p, &e, h, false).unwrap();
        assert!(close(t.value(out.output).data(), &[2.0, 2.0, 2.0], 1e-12));
        let out = self_attention_pool(&mut t, &p, &e, h, true).unwrap();
        assert!(close(t.value(out.output).data(), &[1.0, 1.0, 1.0], 1e-12), "1/L scaling");
    }

    #[test]
    fn empty_input_is_error() {
        let mut p = ParamStore::new();
        let e = expert(&mut p, ExpertKind::Parameterized, Mat::identity(2), None, Some(Mat::zeros(1, 2)));
        let mut t = Tape::new();
        let h = t.constant(Mat::zeros(0, 2));
        assert!(matches!(param_attention_pool(&mut t, &p, &e, h, false), Err(MapsError::EmptyInput(_))));
    }

    #[test]
    fn gate_selection_rules() {
        let all = [true; 6];
        let s = gate_select(&[3.0, 1.0, 0.0, 0.0, 0.0, 0.0], &all, 2).unwrap();
        assert_eq!(s.experts, vec![0, 1]);
        let e2 = 2f64.exp();
        assert!(close(&s.weights, &[e2 / (e2 + 1.0), 1.0 / (e2 + 1.0)], 1e-12));
        assert!(close(&s.weights, &[0.8808, 0.1192], 1e-4));

        let s = gate_select(&[0.5; 6], &all, 2).unwrap();
        assert_eq!(s.experts, vec![0, 1]);
        assert_eq!(s.weights, vec![0.5, 0.5]);

        let l = [0.2, -1.0, 0.7];
        let s = gate_select(&l, &[true; 3], 3).unwrap();
        assert_eq!(s.experts, vec![2, 0, 1]);
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        assert!(matches!(gate_select(&l, &[true, false, false], 2), Err(MapsError::Config(_))));
    }

    fn moae(n_e: usize, k: usize, seed: u64) -> (Moae, ParamStore) {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Moae::new(&mut params, 4, MoaeConfig { n_e, k, ..Default::default() }, &mut rng).unwrap();
        (m, params)
    }

    #[test]
    fn masking_removes_cross_experts() {
        let (m, mut params) = moae(1, 1, 3);
        // force the gate to prefer the cross expert
        *params.get_mut(m.gating.weight) = Mat::from_rows(&vec![vec![0.0, 0.0, 5.0]; 4]);
        let mut t = Tape::new();
        let h = t.constant(Mat::from_rows(&[vec![1.0, 0.5, 0.2, 0.1], vec![0.3, 0.1, 0.9, 0.4]]));
        let with = m.prepare(&mut t, &params, h, true).unwrap();
        assert_eq!(with.selected, vec![2]);
        let without = m.prepare(&mut t, &params, h, false).unwrap();
        assert_eq!(without.selected, vec![0]);
        let out = m.pool_text(&mut t, &params, h, None).unwrap();
        let p = param_attention_pool(&mut t, &params, &m.experts[0], h, false).unwrap();
        assert!(close(t.value(out).data(), t.value(p.output).data(), 1e-12), "K=1 returns the single expert");
    }

    #[test]
    fn zero_weights_reduce_to_mean() {
        let (m, mut params) = moae(1, 2, 9);
        for id in params.ids().collect::<Vec<_>>() {
            let (r, c) = params.get(id).shape();
            *params.get_mut(id) = Mat::zeros(r, c);
        }
        let mut t = Tape::new();
        let rows = Mat::from_rows(&[vec![1.0, 2.0, 0.0, -1.0], vec![3.0, 0.0, 1.0, 1.0], vec![-1.0, 1.0, 2.0, 0.0]]);
        let h = t.constant(rows.clone());
        let out = m.pool_text(&mut t, &params, h, None).unwrap();
        // oracle: 0.5 * mean + 0.5 * mean
        let mean = rows.mean_rows();
        let oracle: Vec<f64> = mean.data().iter().map(|x| 0.5 * x + 0.5 * x).collect();
        assert!(close(t.value(out).data(), &oracle, 1e-12));
    }
}
