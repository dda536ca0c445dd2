//! Optimization of every post-encoder parameter against the total loss.
//!
//! One step: draw a batch of videos with one caption each, run the fusion
//! pooling and both probabilistic heads on a fresh tape, backpropagate the
//! total loss and apply AdamW under a cosine learning-rate schedule.

mod checkpoint;
mod gradcheck;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ciffp::{ciffp_forward, ciffp_scores, CiffpParams};
use crate::embio::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::losses::{
    ddsl_forward, dst_forward, total_forward, total_loss, vtm_forward, LogitScale, LossBreakdown,
    DEFAULT_LAMBDA,
};
use crate::metrics::{evaluate_scores, RetrievalReport};
use crate::msalm::{construct_forward, MsalmParams, MsalmVars, DECAYED_FIELDS, DEFAULT_K, FIELDS};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use checkpoint::{read_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file, CKPT_MAGIC, CKPT_VERSION};
pub use gradcheck::{model_gradcheck, GradCheckSetup, LossTerm};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// All learnable state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub ciffp: CiffpParams<T>,
    pub msalm_text: MsalmParams<T>,
    pub msalm_video: MsalmParams<T>,
    pub scale: LogitScale<T>,
}

/// Number of named tensors in [`ModelParams::flatten`].
pub const NUM_TENSORS: usize = 2 + 2 * FIELDS.len() + 1;

impl<T: Real> ModelParams<T> {
    pub fn dim(&self) -> usize {
        self.ciffp.dim()
    }

    pub fn k(&self) -> usize {
        self.msalm_text.k()
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dim();
        if self.ciffp.gate_weight.shape() != [d] {
            return Err(Error::shape("ciffp gate", self.ciffp.gate_weight.shape(), &[d]));
        }
        self.msalm_text.check()?;
        self.msalm_video.check()?;
        if self.msalm_text.dim() != d || self.msalm_video.dim() != d {
            return Err(Error::Contract("parameter dimensions disagree".into()));
        }
        if self.msalm_text.k() != self.msalm_video.k() {
            return Err(Error::Contract("text and video k differ".into()));
        }
        let scalars = [self.ciffp.gate_bias, self.scale.log_tau_inv];
        if !self.ciffp.gate_weight.all_finite() || scalars.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Named tensors in a fixed order; scalars have shape `[]`.
    pub fn flatten(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(NUM_TENSORS);
        out.push(("ciffp.gate_weight".to_string(), self.ciffp.gate_weight.clone()));
        out.push(("ciffp.gate_bias".to_string(), Tensor::scalar(self.ciffp.gate_bias)));
        for (prefix, p) in [("msalm_text", &self.msalm_text), ("msalm_video", &self.msalm_video)] {
            for (name, t) in FIELDS.iter().zip(p.fields()) {
                out.push((format!("{prefix}.{name}"), t.clone()));
            }
        }
        out.push(("scale.log_tau_inv".to_string(), Tensor::scalar(self.scale.log_tau_inv)));
        out
    }

    /// Overwrites every tensor from `named`, which must cover [`Self::flatten`]'s names
    /// with matching shapes.
    pub fn assign(&mut self, named: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let get = |name: &str, like: &[usize]| -> Result<Tensor<T>> {
            let t = named
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if t.shape() != like {
                return Err(Error::shape("assign", t.shape(), like));
            }
            Ok(t.clone())
        };
        let gw = get("ciffp.gate_weight", self.ciffp.gate_weight.shape())?;
        let gb = get("ciffp.gate_bias", &[])?.item()?;
        let mut text = self.msalm_text.clone();
        let mut video = self.msalm_video.clone();
        for (prefix, p) in [("msalm_text", &mut text), ("msalm_video", &mut video)] {
            for (name, slot) in FIELDS.iter().zip(p.fields_mut()) {
                *slot = get(&format!("{prefix}.{name}"), slot.shape())?;
            }
        }
        let ls = get("scale.log_tau_inv", &[])?.item()?;
        self.ciffp.gate_weight = gw;
        self.ciffp.gate_bias = gb;
        self.msalm_text = text;
        self.msalm_video = video;
        self.scale.log_tau_inv = ls;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            ciffp: self.ciffp.cast(),
            msalm_text: self.msalm_text.cast(),
            msalm_video: self.msalm_video.cast(),
            scale: LogitScale::new(U::c(self.scale.log_tau_inv.f64())),
        }
    }

    /// Registers every tensor on `tape` as a trainable parameter.
    pub fn to_tape(&self, tape: &mut Tape<T>) -> ModelVars {
        let vars: Vec<Var> = self
            .flatten()
            .into_iter()
            .map(|(name, t)| tape.param(name, t))
            .collect();
        ModelVars::from_slice(&vars, self.msalm_text.sigma_floor.f64(), self.msalm_video.sigma_floor.f64())
    }
}

/// Whether the named tensor takes decoupled weight decay.
pub fn is_decayed(name: &str) -> bool {
    if name == "ciffp.gate_weight" {
        return true;
    }
    match name.split_once('.') {
        Some(("msalm_text" | "msalm_video", field)) => DECAYED_FIELDS.contains(&field),
        _ => false,
    }
}

/// Tape handles for a [`ModelParams`], in the order of `flatten`.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub gate_weight: Var,
    pub gate_bias: Var,
    pub text: MsalmVars,
    pub video: MsalmVars,
    pub log_scale: Var,
}

impl ModelVars {
    pub fn from_slice(vars: &[Var], text_floor: f64, video_floor: f64) -> Self {
        assert_eq!(vars.len(), NUM_TENSORS, "one handle per parameter tensor");
        let n = FIELDS.len();
        let slot = |range: std::ops::Range<usize>| -> [Var; 11] { vars[range].try_into().expect("11 fields") };
        Self {
            gate_weight: vars[0],
            gate_bias: vars[1],
            text: MsalmVars {
                fields: slot(2..2 + n),
                sigma_floor: text_floor,
            },
            video: MsalmVars {
                fields: slot(2 + n..2 + 2 * n),
                sigma_floor: video_floor,
            },
            log_scale: vars[2 + 2 * n],
        }
    }
}

/// One paired batch: row `i` of every tensor belongs to pair `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch<T: Real = f32> {
    /// `[B×F×D]`
    pub frames: Tensor<T>,
    /// `[B×D]`
    pub video_pooled: Tensor<T>,
    /// `[B×L×D]`
    pub tokens: Tensor<T>,
    /// `[B×D]`
    pub text_pooled: Tensor<T>,
}

impl PairedBatch<f32> {
    /// Gathers `pairs` of (video index, text index) from `data`.
    pub fn gather(data: &EmbeddingBatch, pairs: &[(usize, usize)]) -> Result<Self> {
        let vids: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let txts: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        Ok(Self {
            frames: data.stack_frames(&vids)?,
            video_pooled: data.stack_video_pooled(&vids)?,
            tokens: data.stack_tokens(&txts)?,
            text_pooled: data.stack_text_pooled(&txts)?,
        })
    }
}

impl<T: Real> PairedBatch<T> {
    pub fn cast<U: Real>(&self) -> PairedBatch<U> {
        PairedBatch {
            frames: self.frames.cast(),
            video_pooled: self.video_pooled.cast(),
            tokens: self.tokens.cast(),
            text_pooled: self.text_pooled.cast(),
        }
    }
}

/// Handles of the three losses and their total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub vtm: Var,
    pub ddsl: Var,
    pub dst: Var,
    pub total: Var,
}

/// Records the full model and objective on `tape`.
pub fn model_forward<T: Real>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    batch: &PairedBatch<T>,
    lambda: T,
) -> Result<LossVars> {
    let frames = tape.constant(batch.frames.clone());
    let video_pooled = tape.constant(batch.video_pooled.clone());
    let tokens = tape.constant(batch.tokens.clone());
    let text_pooled = tape.constant(batch.text_pooled.clone());

    let fused = ciffp_forward(tape, frames, text_pooled, vars.gate_weight, vars.gate_bias)?;
    let vtm = vtm_forward(tape, fused.s_vt, vars.log_scale)?;
    let (t_mu, t_sigma) = construct_forward(tape, tokens, text_pooled, &vars.text)?;
    let (v_mu, v_sigma) = construct_forward(tape, frames, video_pooled, &vars.video)?;
    let ddsl = ddsl_forward(tape, t_mu, t_sigma, v_mu, v_sigma)?;
    let dst = dst_forward(tape, t_mu, t_sigma, v_mu, v_sigma)?;
    let total = total_forward(tape, vtm, ddsl, dst, lambda)?;
    Ok(LossVars { vtm, ddsl, dst, total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub k: usize,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 500,
            base_lr: 1e-5,
            weight_decay: 0.2,
            lambda: DEFAULT_LAMBDA,
            k: DEFAULT_K,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("steps", self.steps),
            ("k", self.k),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::Contract(format!("{name} must be at least 1")));
            }
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Contract(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Contract(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Contract(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Identity projections, zero gate, log scale `ln 100`, seeded queries.
///
/// Text queries are drawn before video queries from one ChaCha8 stream
/// seeded with `config.seed`.
pub fn init_params<T: Real>(dim: usize, config: &TrainConfig) -> Result<ModelParams<T>> {
    if dim == 0 {
        return Err(Error::Contract("dim must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let text = MsalmParams::<f64>::init(dim, config.k, &mut rng)?;
    let video = MsalmParams::<f64>::init(dim, config.k, &mut rng)?;
    Ok(ModelParams {
        ciffp: CiffpParams::zeros(dim),
        msalm_text: text.cast(),
        msalm_video: video.cast(),
        scale: LogitScale::default(),
    })
}

/// `base · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Contract(format!(
            "step {step} outside 0..={total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// First and second moments per named tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

/// One AdamW update in place. Tensors without a gradient entry are treated
/// as having a zero gradient.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::Contract(format!("learning rate must be non-negative, got {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(ADAM_BETA1), T::c(ADAM_BETA2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr_t = T::c(lr);
    let eps = T::c(ADAM_EPS);

    let mut updated = BTreeMap::new();
    for (name, mut p) in params.flatten() {
        let zero;
        let g = match grads.get(&name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(p.shape().to_vec());
                &zero
            }
        };
        if g.shape() != p.shape() {
            return Err(Error::Contract(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let decay = if is_decayed(&name) { T::c(lr * weight_decay) } else { T::zero() };
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi = *pi - decay * *pi - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        updated.insert(name, p);
    }
    params.assign(&updated)?;
    params.scale.clamp();
    Ok(())
}

/// Per-step losses and periodic retrieval reports.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub losses: Vec<LossBreakdown>,
    /// `(steps completed, text-to-video, video-to-text)`
    pub evals: Vec<(usize, RetrievalReport, RetrievalReport)>,
}

/// Seeded epoch-wise sampler of (video, caption) pairs.
struct PairSampler {
    rng: ChaCha8Rng,
    captions: Vec<Vec<usize>>,
    eligible: Vec<usize>,
    batch: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl PairSampler {
    fn new(data: &EmbeddingBatch, batch_size: usize, seed: u64) -> Result<Self> {
        let captions = data.captions_by_video()?;
        let eligible: Vec<usize> = (0..captions.len()).filter(|&v| !captions[v].is_empty()).collect();
        if eligible.is_empty() {
            return Err(Error::Contract("no video has a caption; nothing to train on".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let batch = batch_size.min(eligible.len());
        Ok(Self {
            rng,
            captions,
            eligible,
            batch,
            order: Vec::new(),
            cursor: usize::MAX,
        })
    }

    fn next(&mut self) -> Vec<(usize, usize)> {
        if self.cursor.saturating_add(self.batch) > self.order.len() {
            self.order = self.eligible.clone();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let vids = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        vids.iter()
            .map(|&v| {
                let caps = &self.captions[v];
                (v, caps[self.rng.random_range(0..caps.len())])
            })
            .collect()
    }
}

/// Forward and backward for one batch.
pub fn loss_and_grads<T: Real>(
    params: &ModelParams<T>,
    batch: &PairedBatch<T>,
    lambda: f64,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor<T>>)> {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let lv = model_forward(&mut tape, &vars, batch, T::c(lambda))?;
    let item = |v: Var| tape.value(v).item();
    let breakdown = total_loss(item(lv.vtm)?, item(lv.ddsl)?, item(lv.dst)?, T::c(lambda))?;
    let grads = tape.backward(lv.total)?;
    Ok((breakdown, grads.by_name()))
}

/// Trains from [`init_params`]. Fully determined by `(data, config)`.
pub fn train(data: &EmbeddingBatch, config: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    train_with(data, config, |_, _| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(
    data: &EmbeddingBatch,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<(ModelParams, TrainHistory)> {
    config.check()?;
    data.check()?;
    if data.uniform_frames().is_none() || data.uniform_tokens().is_none() {
        return Err(Error::Contract(
            "training needs one frame count for all videos and one token count for all texts".into(),
        ));
    }
    let mut params: ModelParams = init_params(data.dim, config)?;
    let mut state = OptimizerState::default();
    let mut sampler = PairSampler::new(data, config.batch_size, config.seed)?;
    let mut history = TrainHistory::default();

    for step in 0..config.steps {
        let batch = PairedBatch::gather(data, &sampler.next())?;
        let (breakdown, grads) = loss_and_grads(&params, &batch, config.lambda).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
            other => other,
        })?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {step}: total {} (vtm {}, ddsl {}, dst {})",
                breakdown.total, breakdown.l_vtm, breakdown.l_ddsl, breakdown.l_dst
            )));
        }
        let lr = cosine_lr(step, config.steps, config.base_lr)?;
        adam_step(&mut params, &grads, &mut state, lr, config.weight_decay)?;
        on_step(step, &breakdown);
        history.losses.push(breakdown);

        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            let (t2v, v2t) = evaluate(data, &params)?;
            history.evals.push((done, t2v, v2t));
        }
    }
    Ok((params, history))
}

/// Scores every video against every text with the fusion pooling and
/// reports both directions. The probabilistic heads are not used.
pub fn evaluate<T: Real>(data: &EmbeddingBatch, params: &ModelParams<T>) -> Result<(RetrievalReport, RetrievalReport)> {
    let scores = score_all(data, &params.ciffp.cast())?;
    evaluate_scores(&scores, &data.ground_truth()?)
}

/// Full `[V×T]` similarity matrix for a batch.
pub fn score_all(data: &EmbeddingBatch, ciffp: &CiffpParams<f32>) -> Result<Tensor<f32>> {
    data.check()?;
    let frames: Vec<&Tensor<f32>> = data.videos.iter().map(|v| &v.frames).collect();
    ciffp_scores(&frames, &data.all_text_pooled()?, ciffp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embio::{gen_synthetic, SynthSpec};

    fn small_data(seed: u64) -> EmbeddingBatch {
        gen_synthetic(&SynthSpec {
            num_videos: 6,
            frames_per_video: 3,
            captions_per_video: 2,
            token_len: 4,
            dim: 8,
            cluster_noise: 0.1,
            seed,
        })
        .unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            steps: 6,
            k: 3,
            eval_every: 3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_identity() {
        let c = TrainConfig::default();
        let a: ModelParams<f32> = init_params(16, &c).unwrap();
        let b: ModelParams<f32> = init_params(16, &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.msalm_text.ff_weight, Tensor::eye(16));
        assert_eq!(a.ciffp.gate_bias, 0.0);
        assert_ne!(a.msalm_text.queries, a.msalm_video.queries);
        assert!((a.scale.scale() - 100.0).abs() < 1e-3);
        a.check().unwrap();
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 10, 1e-3).unwrap(), 1e-3);
        assert!(cosine_lr(10, 10, 1e-3).unwrap().abs() < 1e-18);
        assert!((cosine_lr(5, 10, 1e-3).unwrap() - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(11, 10, 1e-3).is_err());
        assert!(cosine_lr(0, 0, 1e-3).is_err());
    }

    #[test]
    fn adam_zero_gradient() {
        let c = TrainConfig { k: 2, ..TrainConfig::default() };
        let mut p: ModelParams<f64> = init_params(3, &c).unwrap();
        let before = p.clone();
        let mut st = OptimizerState::default();
        adam_step(&mut p, &BTreeMap::new(), &mut st, 0.01, 0.0).unwrap();
        assert_eq!(p, before);

        adam_step(&mut p, &BTreeMap::new(), &mut st, 0.01, 0.2).unwrap();
        for ((name, a), (_, b)) in p.flatten().iter().zip(before.flatten()) {
            let factor = if is_decayed(name) { 0.998 } else { 1.0 };
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y * factor).abs() < 1e-15, "{name}");
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let c = TrainConfig { k: 2, ..TrainConfig::default() };
        let mut p: ModelParams<f64> = init_params(3, &c).unwrap();
        let before = p.clone();
        let grads: BTreeMap<String, Tensor<f64>> = p
            .flatten()
            .into_iter()
            .map(|(n, t)| {
                let g = t.map(|_| 0.0);
                let mut g = g;
                for (i, x) in g.data_mut().iter_mut().enumerate() {
                    *x = if i % 2 == 0 { 0.3 } else { -2.0 };
                }
                (n, g)
            })
            .collect();
        let mut st = OptimizerState::default();
        adam_step(&mut p, &grads, &mut st, 1e-3, 0.0).unwrap();
        for ((name, a), (_, b)) in p.flatten().iter().zip(before.flatten()) {
            if name == "scale.log_tau_inv" {
                continue; // clamped at the bound
            }
            for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                let want = if i % 2 == 0 { -1e-3 } else { 1e-3 };
                assert!((x - y - want).abs() < 1e-8, "{name}[{i}]");
            }
        }
    }

    #[test]
    fn decay_set() {
        assert!(is_decayed("ciffp.gate_weight"));
        assert!(is_decayed("msalm_text.queries"));
        assert!(is_decayed("msalm_video.sigma_weight"));
        assert!(!is_decayed("ciffp.gate_bias"));
        assert!(!is_decayed("msalm_text.ln_gamma"));
        assert!(!is_decayed("msalm_video.mu_bias"));
        assert!(!is_decayed("scale.log_tau_inv"));
    }

    #[test]
    fn flatten_assign_round_trip() {
        let p: ModelParams<f32> = init_params(4, &TrainConfig { k: 2, ..TrainConfig::default() }).unwrap();
        assert_eq!(p.flatten().len(), NUM_TENSORS);
        let mut q: ModelParams<f32> = init_params(4, &TrainConfig { k: 2, seed: 9, ..TrainConfig::default() }).unwrap();
        q.assign(&p.flatten().into_iter().collect()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_data(1);
        let (a, ha) = train(&data, &small_config()).unwrap();
        let (b, hb) = train(&data, &small_config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.losses.len(), 6);
        assert_eq!(ha.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![3, 6]);
    }

    #[test]
    fn every_group_receives_gradient() {
        // heavy noise keeps the contrastive loss away from saturation at scale 100
        let data = gen_synthetic(&SynthSpec {
            cluster_noise: 1.0,
            num_videos: 6,
            frames_per_video: 3,
            token_len: 4,
            dim: 8,
            seed: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig { steps: 1, ..small_config() };
        let (p, _) = train(&data, &cfg).unwrap();
        let init: ModelParams<f32> = init_params(data.dim, &cfg).unwrap();
        for group in ["ciffp.", "msalm_text.", "msalm_video.", "scale."] {
            let changed = p
                .flatten()
                .iter()
                .zip(init.flatten())
                .any(|((n, a), (_, b))| n.starts_with(group) && a != &b);
            assert!(changed, "{group} did not move");
        }
    }

    #[test]
    fn lambda_does_not_change_first_vtm() {
        let data = small_data(3);
        let (_, h0) = train(&data, &TrainConfig { lambda: 0.0, steps: 1, ..small_config() }).unwrap();
        let (_, h1) = train(&data, &TrainConfig { lambda: 0.1, steps: 1, ..small_config() }).unwrap();
        assert_eq!(h0.losses[0].l_vtm, h1.losses[0].l_vtm);
        assert_ne!(h0.losses[0].total, h1.losses[0].total);
    }

    #[test]
    fn evaluate_is_read_only_and_perfect_on_orthogonal_centers() {
        let d = 4;
        let mut videos = Vec::new();
        let mut texts = Vec::new();
        for i in 0..d {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            let frames: Vec<f64> = (0..3).flat_map(|_| e.clone()).collect();
            videos.push(crate::embio::VideoRecord {
                id: i as u64,
                frames: Tensor::from_f64([3, d], &frames).unwrap(),
                pooled: Tensor::from_f64([d], &e).unwrap(),
            });
            texts.push(crate::embio::TextRecord {
                id: 100 + i as u64,
                video_id: i as u64,
                tokens: Tensor::from_f64([1, d], &e).unwrap(),
                pooled: Tensor::from_f64([d], &e).unwrap(),
            });
        }
        let data = EmbeddingBatch { dim: d, videos, texts };
        let params: ModelParams = init_params(d, &TrainConfig::default()).unwrap();
        let before = params.clone();
        let (t2v, v2t) = evaluate(&data, &params).unwrap();
        assert_eq!(params, before);
        assert_eq!(t2v.recall(1), 1.0);
        assert_eq!(v2t.recall(1), 1.0);
    }

    #[test]
    fn rejects_ragged_frames() {
        let mut data = small_data(4);
        data.videos[0].frames = Tensor::zeros([1, data.dim]).map(|_| 0.5);
        assert!(matches!(train(&data, &small_config()), Err(Error::Contract(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let c = TrainConfig { steps: 42, lambda: 0.0, ..TrainConfig::default() };
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        let partial: TrainConfig = serde_json::from_str(r#"{"steps": 7}"#).unwrap();
        assert_eq!(partial.steps, 7);
        assert_eq!(partial.batch_size, 32);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 7}"#).is_err());
    }
}
