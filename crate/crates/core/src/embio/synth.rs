//! Seeded synthetic embedding batches.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), seeded through
//! `SeedableRng::seed_from_u64`, with Gaussian draws from
//! `rand_distr::StandardNormal`. Both algorithms are fixed and
//! platform-independent, so a seed reproduces the same batch everywhere.
//! All draws are made in `f64` and rounded to `f32` once at the end.
//!
//! Draw order: for each video in order, the cluster center (`D` draws),
//! then each frame's noise (`F·D`), then for each caption its pooled
//! noise (`D`) followed by its token noise (`L·D`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EmbeddingBatch, TextRecord, VideoRecord};
use crate::error::{Error, Result};
use crate::tensor::ops::l2_normalized_vec;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub captions_per_video: usize,
    pub token_len: usize,
    pub dim: usize,
    /// Noise scale in `[0, 1]`; 0 makes every frame and caption equal to its center.
    pub cluster_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 16,
            frames_per_video: 12,
            captions_per_video: 5,
            token_len: 8,
            dim: 32,
            cluster_noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn check(&self) -> Result<()> {
        let counts = [
            ("num_videos", self.num_videos),
            ("frames_per_video", self.frames_per_video),
            ("captions_per_video", self.captions_per_video),
            ("token_len", self.token_len),
            ("dim", self.dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Contract(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.cluster_noise) {
            return Err(Error::Contract(format!(
                "cluster_noise {} outside [0, 1]",
                self.cluster_noise
            )));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn noisy_unit(center: &[f64], rng: &mut ChaCha8Rng, noise: f64) -> Vec<f64> {
    let g = gaussian(rng, center.len());
    let v: Vec<f64> = center.iter().zip(&g).map(|(c, z)| c + noise * z).collect();
    l2_normalized_vec(&v, 1e-12)
}

fn to_f32(shape: &[usize], v: &[f64]) -> Tensor<f32> {
    Tensor::from_f64(shape.to_vec(), v).expect("generator shapes are consistent")
}

/// Generates a batch of noisy clusters: one unit-norm center per video.
///
/// Video `i` has id `i`; its captions have ids `i·C .. (i+1)·C`.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<EmbeddingBatch> {
    spec.check()?;
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut videos = Vec::with_capacity(spec.num_videos);
    let mut texts = Vec::with_capacity(spec.num_videos * spec.captions_per_video);
    for vi in 0..spec.num_videos {
        let center = l2_normalized_vec(&gaussian(&mut rng, d), 1e-12);

        let mut frames = Vec::with_capacity(spec.frames_per_video * d);
        let mut mean = vec![0.0; d];
        for _ in 0..spec.frames_per_video {
            let f = noisy_unit(&center, &mut rng, spec.cluster_noise);
            for (m, x) in mean.iter_mut().zip(&f) {
                *m += x;
            }
            frames.extend(f);
        }
        let pooled = l2_normalized_vec(&mean, 1e-12);
        videos.push(VideoRecord {
            id: vi as u64,
            frames: to_f32(&[spec.frames_per_video, d], &frames),
            pooled: to_f32(&[d], &pooled),
        });

        for ci in 0..spec.captions_per_video {
            let pooled = noisy_unit(&center, &mut rng, spec.cluster_noise);
            let noise = gaussian(&mut rng, spec.token_len * d);
            let tokens: Vec<f64> = noise
                .chunks(d)
                .flat_map(|row| {
                    row.iter()
                        .zip(&pooled)
                        .map(|(z, p)| p + spec.cluster_noise * z)
                        .collect::<Vec<_>>()
                })
                .collect();
            texts.push(TextRecord {
                id: (vi * spec.captions_per_video + ci) as u64,
                video_id: vi as u64,
                tokens: to_f32(&[spec.token_len, d], &tokens),
                pooled: to_f32(&[d], &pooled),
            });
        }
    }
    Ok(EmbeddingBatch {
        dim: d,
        videos,
        texts,
    })
}
