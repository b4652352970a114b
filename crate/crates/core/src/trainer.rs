//! Adam training of the combined objective with validation early stopping.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align_general::{GaLossConfig, TokenItemMapping};
use crate::align_personal::sample_negatives;
use crate::corpus::{InteractionCorpus, ItemIdx};
use crate::embed_store::TokenEmbeddingStore;
use crate::error::{MapsError, Result};
use crate::evaluator::{validation_ndcg10, ModelScorer};
use crate::model::{MapsModel, ModelInputs};
use crate::params::{f32_round, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; `None` never stops early.
    pub patience: Option<usize>,
    pub batch_size: usize,
    pub lambda3: f64,
    pub lambda4: f64,
    /// Penalize `||Θ||` instead of `||Θ||²`.
    pub unsquared_norm: bool,
    pub num_negatives: usize,
    pub ga: GaLossConfig,
    pub ga_batch_size: usize,
    /// GA batches folded into each PA step.
    pub ga_batches_per_step: usize,
    pub seed: u64,
    /// Seed of the validation negatives, fixed across epochs.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            epochs: 100,
            patience: Some(10),
            batch_size: 72,
            lambda3: 0.1,
            lambda4: 1e-6,
            unsquared_norm: false,
            num_negatives: 10,
            ga: GaLossConfig::default(),
            ga_batch_size: 256,
            ga_batches_per_step: 1,
            seed: 0,
            eval_seed: 0,
        }
    }
}

impl TrainConfig {
    // negated comparisons so that NaN fails validation
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MapsError::Config(m.into()));
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.num_negatives == 0 {
            return bad("learning rate, epochs, batch size and negatives must be positive");
        }
        if !(self.lambda3 >= 0.0) || !(self.lambda4 >= 0.0) {
            return bad("lambda3 and lambda4 must be non-negative");
        }
        if self.ga_batch_size < 2 {
            return bad("GA batch size must be at least 2");
        }
        if !(self.ga.tau1 > 0.0) || !(self.ga.tau2 > 0.0) {
            return bad("GA temperatures must be positive");
        }
        Ok(())
    }
}

fn regularizer(params: &ParamStore, unsquared: bool) -> f64 {
    let sq = params.squared_norm();
    if unsquared { sq.sqrt() } else { sq }
}

/// `L_PA + λ3·L_GA + λ4·||Θ||²` (or `||Θ||` when `unsquared`).
pub fn overall_loss(pa: f64, ga: f64, params: &ParamStore, lambda3: f64, lambda4: f64, unsquared: bool) -> Result<f64> {
    if !pa.is_finite() || !ga.is_finite() {
        return Err(MapsError::Diverged { epoch: 0, message: format!("non-finite loss term (pa {pa}, ga {ga})") });
    }
    let reg = if lambda4 == 0.0 { 0.0 } else { lambda4 * regularizer(params, unsquared) };
    Ok(pa + lambda3 * ga + reg)
}

/// Adam with bias-corrected moment estimates; updated values are rounded
/// onto the f32 grid.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, p)| Mat::zeros(p.value.rows(), p.value.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// `grads[i]` is the gradient of parameter `i`; `None` means zero.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Mat>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<ParamId> = params.ids().collect();
        for ((i, g), id) in grads.iter().enumerate().zip(ids) {
            let value = params.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..value.len() {
                let gk = g.as_ref().map_or(0.0, |g| g.data()[k]);
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let x = value.data()[k] - self.lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                value.data_mut()[k] = f32_round(x);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-step `L_overall`.
    pub train_loss: f64,
    pub train_pa_loss: f64,
    pub train_ga_loss: f64,
    /// Mean per-session PA loss on validation sessions, fixed negatives.
    pub val_loss: Option<f64>,
    pub val_ndcg10: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_ndcg10: Option<f64>,
    /// Parameters after the last epoch, before restoring the best ones.
    pub final_params: ParamStore,
}

/// Training inputs. `corpus` holds every interaction so histories resolve;
/// `train` and `val` index into it. The mapping comes from the training period.
pub struct TrainData<'a> {
    pub corpus: &'a InteractionCorpus,
    pub store: &'a TokenEmbeddingStore,
    pub train: &'a [usize],
    pub val: &'a [usize],
    pub mapping: &'a TokenItemMapping,
}

struct GaCursor {
    pairs: Vec<(u32, ItemIdx)>,
    pos: usize,
}

impl GaCursor {
    fn next(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<(u32, ItemIdx)> {
        let n = n.min(self.pairs.len());
        if self.pos + n > self.pairs.len() || self.pos == 0 {
            self.pairs.shuffle(rng);
            self.pos = 0;
        }
        let out = self.pairs[self.pos..self.pos + n].to_vec();
        self.pos += n;
        out
    }
}

fn step_gradients(
    model: &MapsModel,
    inputs: &ModelInputs,
    batch: &[(usize, Vec<usize>)],
    ga_batches: &[Vec<(u32, ItemIdx)>],
    cfg: &TrainConfig,
) -> Result<(f64, f64, Vec<Option<Mat>>)> {
    let mut f = model.forward(inputs);
    let pa = f.pa_loss(batch)?;
    let mut total = pa;
    let mut ga_value = 0.0;
    if cfg.lambda3 > 0.0 {
        for pairs in ga_batches {
            let ga = f.ga_loss(pairs, &cfg.ga)?;
            ga_value += f.tape.scalar_value(ga);
            let w = f.tape.scale(ga, cfg.lambda3);
            total = f.tape.add(total, w);
        }
    }
    let pa_value = f.tape.scalar_value(pa);
    let g = f.tape.backward(total);
    let mut grads: Vec<Option<Mat>> = vec![None; model.params.len()];
    for (id, m) in g.params() {
        grads[id.index()] = Some(m.clone());
    }
    Ok((pa_value, ga_value, grads))
}

fn add_regularizer_gradient(params: &ParamStore, grads: &mut [Option<Mat>], lambda4: f64, unsquared: bool) {
    if lambda4 == 0.0 {
        return;
    }
    let coef = if unsquared {
        let norm = params.squared_norm().sqrt();
        if norm == 0.0 {
            return;
        }
        lambda4 / norm
    } else {
        2.0 * lambda4
    };
    for (i, (_, p)) in params.iter().enumerate() {
        let g = grads[i].get_or_insert_with(|| Mat::zeros(p.value.rows(), p.value.cols()));
        for (gk, &x) in g.data_mut().iter_mut().zip(p.value.data()) {
            *gk += coef * x;
        }
    }
}

fn grads_finite(grads: &[Option<Mat>]) -> bool {
    grads.iter().flatten().all(|g| g.is_finite())
}

/// One optimizer step on a PA batch; returns `L_overall` before the step.
pub fn train_step(
    model: &mut MapsModel,
    inputs: &ModelInputs,
    adam: &mut Adam,
    batch: &[(usize, Vec<usize>)],
    ga_batches: &[Vec<(u32, ItemIdx)>],
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64)> {
    let (pa, ga, mut grads) = step_gradients(model, inputs, batch, ga_batches, cfg)?;
    let loss = overall_loss(pa, ga, &model.params, cfg.lambda3, cfg.lambda4, cfg.unsquared_norm)?;
    add_regularizer_gradient(&model.params, &mut grads, cfg.lambda4, cfg.unsquared_norm);
    if !grads_finite(&grads) {
        return Err(MapsError::Diverged { epoch: 0, message: "non-finite gradient".into() });
    }
    adam.step(&mut model.params, &grads);
    Ok((loss, pa, ga))
}

/// Mean per-session PA loss with negatives drawn from `seed`.
pub fn mean_pa_loss(model: &MapsModel, inputs: &ModelInputs, sessions: &[usize], num_neg: usize, seed: u64) -> Result<f64> {
    if sessions.is_empty() {
        return Err(MapsError::EmptyInput("no sessions".into()));
    }
    let corpus = inputs.corpus;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for chunk in sessions.chunks(32) {
        let batch: Vec<(usize, Vec<usize>)> = chunk
            .iter()
            .map(|&s| {
                let negs = sample_negatives(&mut rng, corpus.items().len(), corpus.sessions()[s].clicked_item.0, num_neg)?;
                Ok((s, negs))
            })
            .collect::<Result<_>>()?;
        let mut f = model.forward(inputs);
        let l = f.pa_loss(&batch)?;
        total += f.tape.scalar_value(l);
    }
    Ok(total / sessions.len() as f64)
}

fn write_metrics(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut s = serde_json::to_string_pretty(history)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Trains `model` in place and leaves it holding the best-validation
/// parameters. On divergence the model is restored to the last completed
/// epoch's best parameters and `Diverged` is returned. `metrics_path`, when
/// set, is rewritten with the full history after every epoch.
pub fn train(model: &mut MapsModel, data: &TrainData, cfg: &TrainConfig, metrics_path: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(MapsError::EmptyInput("no training sessions".into()));
    }
    let n_items = data.corpus.items().len();
    if n_items <= cfg.num_negatives {
        return Err(MapsError::Sampling(format!("{n_items} items cannot supply {} negatives", cfg.num_negatives)));
    }
    let inputs = model.inputs(data.corpus, data.store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let ga_active = cfg.lambda3 > 0.0 && cfg.ga_batches_per_step > 0 && data.mapping.len() >= 2;
    if cfg.lambda3 > 0.0 && data.mapping.len() < 2 {
        log::warn!("token-item mapping has {} pairs, GA term disabled", data.mapping.len());
    }
    let mut cursor = GaCursor { pairs: data.mapping.pairs.clone(), pos: 0 };
    if data.val.is_empty() {
        log::warn!("no validation sessions; keeping the last epoch");
    }
    let mut order = data.train.to_vec();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_pa, mut sum_ga, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, Vec<usize>)> = chunk
                .iter()
                .map(|&s| {
                    let pos = data.corpus.sessions()[s].clicked_item.0;
                    Ok((s, sample_negatives(&mut rng, n_items, pos, cfg.num_negatives)?))
                })
                .collect::<Result<_>>()?;
            let ga_batches: Vec<_> = if ga_active {
                (0..cfg.ga_batches_per_step).map(|_| cursor.next(cfg.ga_batch_size, &mut rng)).collect()
            } else {
                Vec::new()
            };
            match train_step(model, &inputs, &mut adam, &batch, &ga_batches, cfg) {
                Ok((l, pa, ga)) => {
                    sum_loss += l;
                    sum_pa += pa;
                    sum_ga += ga;
                    steps += 1;
                }
                Err(MapsError::Diverged { message, .. }) => {
                    if let Some((_, _, p)) = &best {
                        model.params = p.clone();
                    }
                    if let Some(path) = metrics_path {
                        write_metrics(path, &history)?;
                    }
                    return Err(MapsError::Diverged { epoch, message });
                }
                Err(e) => return Err(e),
            }
        }
        let steps_f = steps as f64;
        let (val_loss, val_ndcg10) = if data.val.is_empty() {
            (None, None)
        } else {
            let scorer = ModelScorer::new(model, &inputs);
            let ndcg = validation_ndcg10(&scorer, data.corpus, data.val, cfg.eval_seed)?;
            (Some(mean_pa_loss(model, &inputs, data.val, cfg.num_negatives, cfg.eval_seed)?), Some(ndcg))
        };
        let m = EpochMetrics {
            epoch,
            train_loss: sum_loss / steps_f,
            train_pa_loss: sum_pa / steps_f,
            train_ga_loss: sum_ga / steps_f,
            val_loss,
            val_ndcg10,
        };
        log::info!("epoch {epoch}: loss {:.5} val ndcg@10 {:?}", m.train_loss, m.val_ndcg10);
        history.push(m);
        if let Some(path) = metrics_path {
            write_metrics(path, &history)?;
        }
        let score = val_ndcg10.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((_, b, _)) => val_ndcg10.is_none() || score > *b,
        };
        if improved {
            best = Some((epoch, score, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    let final_params = model.params.clone();
    let (best_epoch, best_score, best_params) = best.expect("at least one epoch ran");
    model.params = best_params;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_ndcg10: best_score.is_finite().then_some(best_score),
        final_params,
    })
}
