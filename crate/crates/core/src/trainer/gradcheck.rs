//! Finite-difference check of the whole model against every loss term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{init_params, model_forward, ModelParams, PairedBatch, TrainConfig};
use crate::embio::{gen_synthetic, SynthSpec};
use crate::error::Result;
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Vtm,
    Ddsl,
    Dst,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Vtm, LossTerm::Ddsl, LossTerm::Dst, LossTerm::Total];

    pub fn as_str(self) -> &'static str {
        match self {
            LossTerm::Vtm => "l_vtm",
            LossTerm::Ddsl => "l_ddsl",
            LossTerm::Dst => "l_dst",
            LossTerm::Total => "total",
        }
    }
}

/// Problem size and perturbations for [`model_gradcheck`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSetup {
    /// Paired samples (B = T).
    pub pairs: usize,
    pub frames: usize,
    pub token_len: usize,
    pub dim: usize,
    pub k: usize,
    pub noise: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Standard deviation of the Gaussian jitter added to every parameter,
    /// so the check does not sit on the symmetric identity initialization.
    pub jitter: f64,
    /// Log scale used for the check. It must sit below the clamp bound,
    /// where the loss is not differentiable from both sides.
    pub log_scale: f64,
    pub step: f64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self {
            pairs: 8,
            frames: 4,
            token_len: 4,
            dim: 16,
            k: 3,
            noise: 0.3,
            lambda: 0.1,
            seed: 1,
            jitter: 0.05,
            log_scale: 10f64.ln(),
            step: 1e-5,
        }
    }
}

/// Compares backward gradients of each loss term with central differences
/// over every parameter, in 64-bit precision.
pub fn model_gradcheck(setup: &GradCheckSetup) -> Result<Vec<(LossTerm, GradCheckReport)>> {
    let data = gen_synthetic(&SynthSpec {
        num_videos: setup.pairs,
        frames_per_video: setup.frames,
        captions_per_video: 1,
        token_len: setup.token_len,
        dim: setup.dim,
        cluster_noise: setup.noise,
        seed: setup.seed,
    })?;
    let pairs: Vec<(usize, usize)> = (0..setup.pairs).map(|i| (i, i)).collect();
    let batch: PairedBatch<f64> = PairedBatch::gather(&data, &pairs)?.cast();

    let config = TrainConfig {
        k: setup.k,
        seed: setup.seed,
        ..TrainConfig::default()
    };
    let mut params: ModelParams<f64> = init_params(setup.dim, &config)?;
    params.scale.log_tau_inv = setup.log_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    rng.set_stream(2);
    let named: Vec<(String, Tensor<f64>)> = params
        .flatten()
        .into_iter()
        .map(|(n, mut t)| {
            for x in t.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += setup.jitter * z;
            }
            (n, t)
        })
        .collect();
    let floors = (params.msalm_text.sigma_floor, params.msalm_video.sigma_floor);

    LossTerm::ALL
        .iter()
        .map(|&term| {
            let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
                let mv = super::ModelVars::from_slice(vars, floors.0, floors.1);
                let lv = model_forward(tape, &mv, &batch, setup.lambda)?;
                Ok(match term {
                    LossTerm::Vtm => lv.vtm,
                    LossTerm::Ddsl => lv.ddsl,
                    LossTerm::Dst => lv.dst,
                    LossTerm::Total => lv.total,
                })
            };
            Ok((term, grad_check(f, &named, setup.step)?))
        })
        .collect()
}
