//! Seeded checks shared by the property and acceptance suites.
#![allow(dead_code)]

use msam::ciffp::{ciffp_similarity, CiffpParams};
use msam::embio::{decode, gen_synthetic, write_container, SynthSpec};
use msam::metrics::{oracle_ranks, report, t2v_ranks, v2t_ranks, Direction, GroundTruth};
use msam::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random pooling problem with a nonzero gate.
pub struct CiffpCase {
    pub frames: Tensor<f64>,
    pub texts: Tensor<f64>,
    pub params: CiffpParams<f64>,
}

/// With a single text or a single frame the text-conditioned summary equals
/// the frame summary and the gate has no effect; `min_len = 2` rules that out.
pub fn ciffp_case(seed: u64, min_len: usize) -> CiffpCase {
    let mut r = rng(seed);
    let b = r.random_range(1..=5);
    let t = r.random_range(min_len..=5);
    let f = r.random_range(min_len..=6);
    let d = r.random_range(2..=8);
    let frames = gaussian(&mut r, &[b, f, d]);
    let texts = gaussian(&mut r, &[t, d]);
    let params = CiffpParams {
        gate_weight: gaussian(&mut r, &[d]),
        gate_bias: r.random_range(-1.0..1.0),
    };
    CiffpCase { frames, texts, params }
}

/// Largest deviations observed on one [`ciffp_case`].
#[derive(Debug, Default)]
pub struct CiffpDeviations {
    pub frame_permutation: f64,
    pub scaling: f64,
    /// Video permutation reproduces rows bit for bit.
    pub video_equivariant: bool,
    /// Text permutation reorders sums over the text axis, so columns agree
    /// up to rounding only.
    pub text_permutation: f64,
    pub normalization: f64,
}

fn permute_axis1(x: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let (b, f, d) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for &fi in order {
            let start = (bi * f + fi) * d;
            out.extend_from_slice(&x.data()[start..start + d]);
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn permute_rows(x: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let row = x.len() / x.dim(0);
    let mut out = Vec::with_capacity(x.len());
    for &i in order {
        out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn ciffp_deviations(seed: u64) -> CiffpDeviations {
    let case = ciffp_case(seed, 1);
    let mut r = rng(seed ^ 0x9e37_79b9);
    let base = ciffp_similarity(&case.frames, &case.texts, &case.params).unwrap();
    let (b, f, d) = (case.frames.dim(0), case.frames.dim(1), case.frames.dim(2));
    let t = case.texts.dim(0);

    let mut order: Vec<usize> = (0..f).collect();
    order.shuffle(&mut r);
    let permuted = ciffp_similarity(&permute_axis1(&case.frames, &order), &case.texts, &case.params).unwrap();
    let frame_permutation = base.s_vt.max_abs_diff(&permuted.s_vt).unwrap();

    let mut scaled_frames = case.frames.clone();
    for row in scaled_frames.data_mut().chunks_mut(d) {
        let c: f64 = r.random_range(0.01..100.0);
        row.iter_mut().for_each(|x| *x *= c);
    }
    let mut scaled_texts = case.texts.clone();
    for row in scaled_texts.data_mut().chunks_mut(d) {
        let c: f64 = r.random_range(0.01..100.0);
        row.iter_mut().for_each(|x| *x *= c);
    }
    let scaled = ciffp_similarity(&scaled_frames, &scaled_texts, &case.params).unwrap();
    let scaling = base.s_vt.max_abs_diff(&scaled.s_vt).unwrap();

    let mut vorder: Vec<usize> = (0..b).collect();
    vorder.shuffle(&mut r);
    let by_video = ciffp_similarity(&permute_rows(&case.frames, &vorder), &case.texts, &case.params).unwrap();
    let video_equivariant = (0..b)
        .all(|i| (0..t).all(|j| by_video.s_vt.get(&[i, j]).to_bits() == base.s_vt.get(&[vorder[i], j]).to_bits()));
    let mut torder: Vec<usize> = (0..t).collect();
    torder.shuffle(&mut r);
    let by_text = ciffp_similarity(&case.frames, &permute_rows(&case.texts, &torder), &case.params).unwrap();
    let text_permutation = (0..b)
        .flat_map(|i| (0..t).map(move |j| (i, j)))
        .map(|(i, j)| (by_text.s_vt.get(&[i, j]) - base.s_vt.get(&[i, torder[j]])).abs())
        .fold(0.0, f64::max);

    // s_v2t is [B×F×T], normalized over F; s_t2v is [B×T×1], normalized over T.
    let mut normalization: f64 = 0.0;
    for bi in 0..b {
        for ti in 0..t {
            let s: f64 = (0..f).map(|fi| base.s_v2t.get(&[bi, fi, ti])).sum();
            normalization = normalization.max((s - 1.0).abs());
        }
        let s: f64 = (0..t).map(|ti| base.s_t2v.get(&[bi, ti, 0])).sum();
        normalization = normalization.max((s - 1.0).abs());
    }

    CiffpDeviations {
        frame_permutation,
        scaling,
        video_equivariant,
        text_permutation,
        normalization,
    }
}

/// Random score matrix with a random caption assignment. With `ties`,
/// scores come from a tiny integer alphabet so equal values are common.
pub fn score_case(seed: u64, ties: bool) -> (Tensor<f64>, GroundTruth) {
    let mut r = rng(seed);
    let b = r.random_range(1..=12);
    let t = r.random_range(b..=b + 12);
    let mut assign: Vec<usize> = (0..t).map(|i| if i < b { i } else { r.random_range(0..b) }).collect();
    assign.shuffle(&mut r);
    let data: Vec<f64> = (0..b * t)
        .map(|_| if ties { r.random_range(0..3) as f64 } else { StandardNormal.sample(&mut r) })
        .collect();
    (Tensor::new([b, t], data).unwrap(), GroundTruth::new(assign, b).unwrap())
}

/// Counting ranks agree with the sorting oracle and recall is monotone in K.
pub fn metric_case_holds(seed: u64, ties: bool) -> bool {
    let (s, gt) = score_case(seed, ties);
    let pairs = [
        (t2v_ranks(&s, &gt).unwrap(), Direction::TextToVideo),
        (v2t_ranks(&s, &gt).unwrap(), Direction::VideoToText),
    ];
    pairs.into_iter().all(|(ranks, dir)| {
        let oracle = oracle_ranks(&s, &gt, dir).unwrap();
        let rep = report(&ranks, dir).unwrap();
        ranks == oracle && rep.recall(1) <= rep.recall(5) && rep.recall(5) <= rep.recall(10)
    })
}

pub fn small_container(seed: u64) -> Vec<u8> {
    let batch = gen_synthetic(&SynthSpec {
        num_videos: 3,
        frames_per_video: 2,
        captions_per_video: 2,
        token_len: 2,
        dim: 4,
        cluster_noise: 0.1,
        seed,
    })
    .unwrap();
    let mut bytes = Vec::new();
    write_container(&batch, &mut bytes).unwrap();
    bytes
}

/// Flips one random byte of a valid container and reports whether decoding fails.
pub fn corruption_detected(bytes: &[u8], seed: u64) -> bool {
    let mut r = rng(seed);
    let mut bad = bytes.to_vec();
    let pos = r.random_range(0..bad.len());
    bad[pos] ^= r.random_range(1..=255u8);
    decode(&bad).is_err()
}
