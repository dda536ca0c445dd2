//! Adaptive semantic construction: k probabilistic embeddings per sample.
//!
//! ```text
//! A = attend(queries, sequence)        [N×k×D]   one head, D×D key/value maps
//! H = pooled ⊙ sigmoid(A)              [N×k×D]
//! P = LayerNorm(H) · W_f + b_f
//! μ = P · W_μ + b_μ
//! σ = softplus(P · W_σ + b_σ) + floor
//! ```
//!
//! The same construction runs once per modality with its own parameters.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::ops::LAYER_NORM_EPS;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Default number of embeddings per sample.
pub const DEFAULT_K: usize = 7;
/// Lower bound added to every σ.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct MsalmParams<T: Real = f32> {
    /// `[k×D]`
    pub queries: Tensor<T>,
    pub attn_proj_key: Tensor<T>,
    pub attn_proj_value: Tensor<T>,
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
    pub ff_weight: Tensor<T>,
    pub ff_bias: Tensor<T>,
    pub mu_weight: Tensor<T>,
    pub mu_bias: Tensor<T>,
    pub sigma_weight: Tensor<T>,
    pub sigma_bias: Tensor<T>,
    pub sigma_floor: T,
}

/// Probabilistic embeddings: `k` means and deviations per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbEmbedding<T: Real = f32> {
    /// `[N×k×D]`
    pub mu: Tensor<T>,
    /// `[N×k×D]`, elementwise positive
    pub sigma: Tensor<T>,
}

impl<T: Real> ProbEmbedding<T> {
    pub fn new(mu: Tensor<T>, sigma: Tensor<T>) -> Result<Self> {
        if mu.shape() != sigma.shape() || mu.rank() != 3 {
            return Err(Error::shape("prob embedding", mu.shape(), sigma.shape()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn k(&self) -> usize {
        self.mu.dim(1)
    }
}

/// Field names in checkpoint order.
pub const FIELDS: [&str; 11] = [
    "queries",
    "attn_proj_key",
    "attn_proj_value",
    "ln_gamma",
    "ln_beta",
    "ff_weight",
    "ff_bias",
    "mu_weight",
    "mu_bias",
    "sigma_weight",
    "sigma_bias",
];

/// Fields that take decoupled weight decay.
pub const DECAYED_FIELDS: [&str; 6] = [
    "queries",
    "attn_proj_key",
    "attn_proj_value",
    "ff_weight",
    "mu_weight",
    "sigma_weight",
];

impl<T: Real> MsalmParams<T> {
    /// Identity projections, zero biases, unit gamma, zero beta and the given queries.
    pub fn with_queries(queries: Tensor<T>) -> Result<Self> {
        if queries.rank() != 2 {
            return Err(Error::InvalidShape(format!(
                "queries must be [k, D], got {:?}",
                queries.shape()
            )));
        }
        let d = queries.dim(1);
        Ok(Self {
            queries,
            attn_proj_key: Tensor::eye(d),
            attn_proj_value: Tensor::eye(d),
            ln_gamma: Tensor::ones([d]),
            ln_beta: Tensor::zeros([d]),
            ff_weight: Tensor::eye(d),
            ff_bias: Tensor::zeros([d]),
            mu_weight: Tensor::eye(d),
            mu_bias: Tensor::zeros([d]),
            sigma_weight: Tensor::eye(d),
            sigma_bias: Tensor::zeros([d]),
            sigma_floor: T::c(SIGMA_FLOOR),
        })
    }

    /// Identity-initialized parameters with Gaussian queries scaled by `1/sqrt(D)`.
    pub fn init<R: Rng>(dim: usize, k: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || k == 0 {
            return Err(Error::Contract(format!("need dim >= 1 and k >= 1, got {dim}, {k}")));
        }
        let scale = 1.0 / (dim as f64).sqrt();
        let q: Vec<f64> = (0..k * dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::with_queries(Tensor::from_f64([k, dim], &q)?)
    }

    pub fn k(&self) -> usize {
        self.queries.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.queries.dim(1)
    }

    pub fn fields(&self) -> [&Tensor<T>; 11] {
        [
            &self.queries,
            &self.attn_proj_key,
            &self.attn_proj_value,
            &self.ln_gamma,
            &self.ln_beta,
            &self.ff_weight,
            &self.ff_bias,
            &self.mu_weight,
            &self.mu_bias,
            &self.sigma_weight,
            &self.sigma_bias,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Tensor<T>; 11] {
        [
            &mut self.queries,
            &mut self.attn_proj_key,
            &mut self.attn_proj_value,
            &mut self.ln_gamma,
            &mut self.ln_beta,
            &mut self.ff_weight,
            &mut self.ff_bias,
            &mut self.mu_weight,
            &mut self.mu_bias,
            &mut self.sigma_weight,
            &mut self.sigma_bias,
        ]
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dim();
        let expect: [&[usize]; 11] = [
            &[self.k(), d],
            &[d, d],
            &[d, d],
            &[d],
            &[d],
            &[d, d],
            &[d],
            &[d, d],
            &[d],
            &[d, d],
            &[d],
        ];
        for ((name, t), shape) in FIELDS.iter().zip(self.fields()).zip(expect) {
            if t.shape() != shape {
                return Err(Error::shape("msalm params", t.shape(), shape));
            }
            if !t.all_finite() {
                return Err(Error::Validation(format!("msalm field {name} is not finite")));
            }
        }
        if self.sigma_floor.is_nan() || self.sigma_floor <= T::zero() {
            return Err(Error::Contract("sigma_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> MsalmParams<U> {
        let f = self.fields();
        MsalmParams {
            queries: f[0].cast(),
            attn_proj_key: f[1].cast(),
            attn_proj_value: f[2].cast(),
            ln_gamma: f[3].cast(),
            ln_beta: f[4].cast(),
            ff_weight: f[5].cast(),
            ff_bias: f[6].cast(),
            mu_weight: f[7].cast(),
            mu_bias: f[8].cast(),
            sigma_weight: f[9].cast(),
            sigma_bias: f[10].cast(),
            sigma_floor: U::c(self.sigma_floor.f64()),
        }
    }

    /// Puts every field on `tape`, as trainable parameters named
    /// `{prefix}.{field}` when `prefix` is given, as constants otherwise.
    pub fn to_tape(&self, tape: &mut Tape<T>, prefix: Option<&str>) -> MsalmVars {
        let vars: Vec<Var> = FIELDS
            .iter()
            .zip(self.fields())
            .map(|(name, t)| match prefix {
                Some(p) => tape.param(format!("{p}.{name}"), t.clone()),
                None => tape.constant(t.clone()),
            })
            .collect();
        MsalmVars {
            fields: vars.try_into().expect("one var per field"),
            sigma_floor: self.sigma_floor.f64(),
        }
    }
}

/// Tape handles of one modality's parameters, in the order of [`FIELDS`].
#[derive(Clone, Copy, Debug)]
pub struct MsalmVars {
    pub fields: [Var; 11],
    pub sigma_floor: f64,
}

impl MsalmVars {
    fn get(&self, name: &str) -> Var {
        let i = FIELDS.iter().position(|f| *f == name).expect("known field");
        self.fields[i]
    }
}

/// Attention pooling with `k` learned queries: `[N×S×D] → [N×k×D]`.
pub fn attention_pool_k_forward<T: Real>(tape: &mut Tape<T>, seq: Var, vars: &MsalmVars) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    let q = vars.get("queries");
    let qshape = tape.shape(q).to_vec();
    if shape.len() != 3 || qshape.len() != 2 || shape[2] != qshape[1] {
        return Err(Error::shape("attention_pool_k", &shape, &qshape));
    }
    let (n, s, d) = (shape[0], shape[1], shape[2]);
    let k = qshape[0];
    let keys = tape.linear(seq, vars.get("attn_proj_key"), None)?;
    let values = tape.linear(seq, vars.get("attn_proj_value"), None)?;
    let keys_flat = tape.reshape(keys, [n * s, d])?;
    let qt = tape.transpose_last(q)?;
    let logits = tape.matmul(keys_flat, qt)?;
    let logits = tape.reshape(logits, [n, s, k])?;
    let logits = tape.transpose_last(logits)?;
    let logits = tape.scale(logits, T::one() / T::c(d as f64).sqrt());
    let weights = tape.softmax(logits, 2)?;
    tape.matmul(weights, values)
}

/// Full construction on the tape; returns `(μ, σ)`, each `[N×k×D]`.
pub fn construct_forward<T: Real>(
    tape: &mut Tape<T>,
    seq: Var,
    pooled: Var,
    vars: &MsalmVars,
) -> Result<(Var, Var)> {
    let att = attention_pool_k_forward(tape, seq, vars)?;
    let pshape = tape.shape(pooled).to_vec();
    let ashape = tape.shape(att).to_vec();
    if pshape.len() != 2 || pshape[0] != ashape[0] || pshape[1] != ashape[2] {
        return Err(Error::shape("adaptive construction", &pshape, &ashape));
    }
    let pooled = tape.reshape(pooled, [pshape[0], 1, pshape[1]])?;
    let gate = tape.sigmoid(att);
    let h = tape.mul(pooled, gate)?;
    let normed = tape.layer_norm(h, vars.get("ln_gamma"), vars.get("ln_beta"), T::c(LAYER_NORM_EPS))?;
    let p = tape.linear(normed, vars.get("ff_weight"), Some(vars.get("ff_bias")))?;
    let mu = tape.linear(p, vars.get("mu_weight"), Some(vars.get("mu_bias")))?;
    let raw = tape.linear(p, vars.get("sigma_weight"), Some(vars.get("sigma_bias")))?;
    let soft = tape.softplus(raw);
    let sigma = tape.shift(soft, T::c(vars.sigma_floor));
    Ok((mu, sigma))
}

fn check_finite<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Validation(format!("non-finite {what}")))
    }
}

/// Plain-tensor version of [`attention_pool_k_forward`].
pub fn attention_pool_k<T: Real>(seq: &Tensor<T>, params: &MsalmParams<T>) -> Result<Tensor<T>> {
    params.check()?;
    check_finite(seq, "sequence")?;
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, None);
    let s = tape.constant(seq.clone());
    let out = attention_pool_k_forward(&mut tape, s, &vars)?;
    Ok(tape.value(out).clone())
}

/// Builds `k` probabilistic embeddings from a sequence `[N×S×D]` and its
/// pooled summary `[N×D]`.
pub fn adaptive_semantic_construction<T: Real>(
    seq: &Tensor<T>,
    pooled: &Tensor<T>,
    params: &MsalmParams<T>,
) -> Result<ProbEmbedding<T>> {
    params.check()?;
    check_finite(seq, "sequence")?;
    check_finite(pooled, "pooled embedding")?;
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, None);
    let s = tape.constant(seq.clone());
    let p = tape.constant(pooled.clone());
    let (mu, sigma) = construct_forward(&mut tape, s, p, &vars)?;
    ProbEmbedding::new(tape.value(mu).clone(), tape.value(sigma).clone())
}
