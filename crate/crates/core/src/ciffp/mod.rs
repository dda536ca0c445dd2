//! Cross-modal interactive feature fusion pooling.
//!
//! For every (video, text) pair the frames are attention-pooled under the
//! text, the pooled features of a video are re-weighted across all texts,
//! and a learned sigmoid gate blends the two before a residual connection:
//!
//! ```text
//! s_v2t = softmax_F(N̂_v · f̂_tᵀ)                    [B×F×T]
//! n_v2v = Σ_F s_v2t · N̂_v                          [B×T×D]
//! s_t2v = softmax_T(⟨n_v2v, f̂_t⟩)                   [B×T×1]
//! n_t2v = Σ_T s_t2v · n_v2v                        [B×D], replicated over T
//! s_v   = sigmoid(n_v2v · w + b)                   [B×T×1]
//! n_vv  = n_v2v + (s_v·n_v2v + (1 − s_v)·n_t2v)    [B×T×D]
//! s_vt  = ⟨n_vv, f̂_t⟩                               [B×T]
//! ```
//!
//! `N̂_v` and `f̂_t` are L2-normalized along D. Only the text side is
//! normalized in the final product, so `s_vt` is not bounded by 1.
//!
//! Two routes compute `s_vt`: [`ciffp_forward`] records the full pipeline on
//! a tape (training, traces), and [`ciffp_scores`] streams one video at a
//! time using a rearranged algebra that never materializes `B×T×D`
//! intermediates (evaluation).

pub mod baselines;

use rayon::prelude::*;

pub use baselines::{
    mean_pool_similarity, self_attention_pool_similarity, topk_pool_similarity, SelfAttentionParams,
};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, dot, sigmoid_scalar, L2_EPS};
use crate::tensor::{Real, Tape, Tensor, Var};

/// The gate map `D → 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CiffpParams<T: Real = f32> {
    /// `[D]`
    pub gate_weight: Tensor<T>,
    pub gate_bias: T,
}

impl<T: Real> CiffpParams<T> {
    /// Zero gate: `s_v = 0.5` everywhere.
    pub fn zeros(dim: usize) -> Self {
        Self {
            gate_weight: Tensor::zeros([dim]),
            gate_bias: T::zero(),
        }
    }

    pub fn dim(&self) -> usize {
        self.gate_weight.len()
    }

    pub fn cast<U: Real>(&self) -> CiffpParams<U> {
        CiffpParams {
            gate_weight: self.gate_weight.cast(),
            gate_bias: U::c(self.gate_bias.f64()),
        }
    }
}

/// Every intermediate of one pooling pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CiffpTrace<T: Real = f32> {
    pub s_v2t: Tensor<T>,
    pub n_v2v: Tensor<T>,
    pub s_t2v: Tensor<T>,
    pub n_t2v: Tensor<T>,
    pub s_v: Tensor<T>,
    pub n_vv: Tensor<T>,
    pub s_vt: Tensor<T>,
}

/// Tape handles of the pooling intermediates.
#[derive(Clone, Copy, Debug)]
pub struct CiffpVars {
    pub s_v2t: Var,
    pub n_v2v: Var,
    pub s_t2v: Var,
    pub n_t2v: Var,
    pub s_v: Var,
    pub n_vv: Var,
    pub s_vt: Var,
}

fn check_inputs(frames: &[usize], texts: &[usize], gate: &[usize]) -> Result<()> {
    if frames.len() != 3 || texts.len() != 2 || frames[2] != texts[1] {
        return Err(Error::shape("ciffp", frames, texts));
    }
    if gate != [frames[2]] {
        return Err(Error::shape("ciffp gate", gate, &frames[2..]));
    }
    Ok(())
}

/// Records the pooling pipeline on `tape`.
///
/// `frames` is `[B×F×D]`, `texts` is `[T×D]`, `gate_weight` is `[D]` and
/// `gate_bias` is a scalar.
pub fn ciffp_forward<T: Real>(
    tape: &mut Tape<T>,
    frames: Var,
    texts: Var,
    gate_weight: Var,
    gate_bias: Var,
) -> Result<CiffpVars> {
    let fshape = tape.shape(frames).to_vec();
    check_inputs(&fshape, tape.shape(texts), tape.shape(gate_weight))?;
    let (b, f, d) = (fshape[0], fshape[1], fshape[2]);
    let t = tape.shape(texts)[0];
    let eps = T::c(L2_EPS);

    let frames_n = tape.l2_normalize(frames, 2, eps)?;
    let texts_n = tape.l2_normalize(texts, 1, eps)?;

    let flat = tape.reshape(frames_n, [b * f, d])?;
    let texts_nt = tape.transpose_last(texts_n)?;
    let dots = tape.matmul(flat, texts_nt)?;
    let dots = tape.reshape(dots, [b, f, t])?;
    let s_v2t = tape.softmax(dots, 1)?;

    let weights = tape.transpose_last(s_v2t)?;
    let n_v2v = tape.matmul(weights, frames_n)?;

    let prod = tape.mul(n_v2v, texts_n)?;
    let text_logits = tape.sum_axis(prod, 2, false)?;
    let s_t2v_bt = tape.softmax(text_logits, 1)?;
    let s_t2v = tape.reshape(s_t2v_bt, [b, t, 1])?;

    let s_row = tape.reshape(s_t2v_bt, [b, 1, t])?;
    let n_t2v_b1d = tape.matmul(s_row, n_v2v)?;
    let n_t2v = tape.reshape(n_t2v_b1d, [b, d])?;

    let w = tape.reshape(gate_weight, [d, 1])?;
    let gate_logit = tape.linear(n_v2v, w, Some(gate_bias))?;
    let s_v = tape.sigmoid(gate_logit);

    let video_part = tape.mul(s_v, n_v2v)?;
    let neg = tape.neg(s_v);
    let one_minus = tape.shift(neg, T::one());
    let text_part = tape.mul(one_minus, n_t2v_b1d)?;
    let fused = tape.add(video_part, text_part)?;
    let n_vv = tape.add(n_v2v, fused)?;

    let prod = tape.mul(n_vv, texts_n)?;
    let s_vt = tape.sum_axis(prod, 2, false)?;

    Ok(CiffpVars {
        s_v2t,
        n_v2v,
        s_t2v,
        n_t2v,
        s_v,
        n_vv,
        s_vt,
    })
}

/// Runs the pooling pipeline and returns every intermediate.
pub fn ciffp_similarity<T: Real>(
    frames: &Tensor<T>,
    text_pooled: &Tensor<T>,
    params: &CiffpParams<T>,
) -> Result<CiffpTrace<T>> {
    check_inputs(frames.shape(), text_pooled.shape(), params.gate_weight.shape())?;
    if !frames.all_finite() || !text_pooled.all_finite() || !params.gate_weight.all_finite() {
        return Err(Error::Validation("non-finite input to ciffp".into()));
    }
    let mut tape = Tape::new();
    let fv = tape.constant(frames.clone());
    let tv = tape.constant(text_pooled.clone());
    let w = tape.constant(params.gate_weight.clone());
    let bias = tape.scalar(params.gate_bias);
    let vars = ciffp_forward(&mut tape, fv, tv, w, bias)?;
    let get = |v: Var| tape.value(v).clone();
    Ok(CiffpTrace {
        s_v2t: get(vars.s_v2t),
        n_v2v: get(vars.n_v2v),
        s_t2v: get(vars.s_t2v),
        n_t2v: get(vars.n_t2v),
        s_v: get(vars.s_v),
        n_vv: get(vars.n_vv),
        s_vt: get(vars.s_vt),
    })
}

/// `s_vt` row for one video. `texts_n` holds L2-normalized texts `[T×D]`.
///
/// Uses `⟨n_v2v[t], f̂_t⟩ = Σ_f w_ft ⟨N̂_f, f̂_t⟩`,
/// `n_t2v = Σ_f (Σ_t s_t w_ft) N̂_f` and `⟨n_v2v[t], g⟩ = Σ_f w_ft ⟨N̂_f, g⟩`,
/// so the only `D`-length work is the frame–text dot products.
fn score_video<T: Real>(frames: &Tensor<T>, texts_n: &[T], t: usize, params: &CiffpParams<T>) -> Vec<T> {
    let d = frames.dim(1);
    let f = frames.dim(0);
    let eps = T::c(L2_EPS);
    let frames_n: Vec<Vec<T>> = (0..f)
        .map(|i| ops::l2_normalized_vec(frames.row(i), eps))
        .collect();
    let gate_dots: Vec<T> = frames_n
        .iter()
        .map(|fr| dot(fr, params.gate_weight.data()))
        .collect();

    // weights[t][f] = softmax over f of ⟨N̂_f, f̂_t⟩
    let mut weights = vec![T::zero(); t * f];
    let mut col = vec![T::zero(); f];
    let mut logits = vec![T::zero(); t];
    let mut gate = vec![T::zero(); t];
    for ti in 0..t {
        let text = &texts_n[ti * d..(ti + 1) * d];
        for (c, fr) in col.iter_mut().zip(&frames_n) {
            *c = dot(fr, text);
        }
        let w = &mut weights[ti * f..(ti + 1) * f];
        ops::softmax_slice(&col, w);
        logits[ti] = w.iter().zip(&col).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let g = w.iter().zip(&gate_dots).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        gate[ti] = sigmoid_scalar(g + params.gate_bias);
    }
    let mut s_t2v = vec![T::zero(); t];
    ops::softmax_slice(&logits, &mut s_t2v);

    // n_t2v = Σ_f c_f N̂_f with c_f = Σ_t s_t w_tf
    let mut coef = vec![T::zero(); f];
    for ti in 0..t {
        for (c, &w) in coef.iter_mut().zip(&weights[ti * f..(ti + 1) * f]) {
            *c = *c + s_t2v[ti] * w;
        }
    }
    let mut n_t2v = vec![T::zero(); d];
    for (c, fr) in coef.iter().zip(&frames_n) {
        for (o, &x) in n_t2v.iter_mut().zip(fr) {
            *o = *o + *c * x;
        }
    }

    let one = T::one();
    (0..t)
        .map(|ti| {
            let text = &texts_n[ti * d..(ti + 1) * d];
            (one + gate[ti]) * logits[ti] + (one - gate[ti]) * dot(&n_t2v, text)
        })
        .collect()
}

/// Similarity matrix `[B×T]` computed video by video.
///
/// Frame counts may differ between videos. Rows are computed in parallel on
/// the current rayon pool and assembled in input order.
pub fn ciffp_scores<T: Real>(
    videos: &[&Tensor<T>],
    text_pooled: &Tensor<T>,
    params: &CiffpParams<T>,
) -> Result<Tensor<T>> {
    if text_pooled.rank() != 2 || videos.is_empty() {
        return Err(Error::shape("ciffp_scores", &[videos.len()], text_pooled.shape()));
    }
    let (t, d) = (text_pooled.dim(0), text_pooled.dim(1));
    if params.gate_weight.shape() != [d] {
        return Err(Error::shape("ciffp gate", params.gate_weight.shape(), &[d]));
    }
    for v in videos {
        if v.rank() != 2 || v.dim(1) != d {
            return Err(Error::shape("ciffp_scores", v.shape(), text_pooled.shape()));
        }
        if !v.all_finite() {
            return Err(Error::Validation("non-finite frame embedding".into()));
        }
    }
    if !text_pooled.all_finite() {
        return Err(Error::Validation("non-finite text embedding".into()));
    }
    let texts_n = ops::l2_normalize(text_pooled, 1, T::c(L2_EPS))?;
    let rows: Vec<Vec<T>> = videos
        .par_iter()
        .map(|v| score_video(v, texts_n.data(), t, params))
        .collect();
    Tensor::new([videos.len(), t], rows.concat())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_example() -> (Tensor<f64>, Tensor<f64>) {
        (
            Tensor::from_f64([1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap(),
        )
    }

    #[test]
    fn hand_trace() {
        let (frames, text) = hand_example();
        let tr = ciffp_similarity(&frames, &text, &CiffpParams::zeros(2)).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-6;
        assert!(close(tr.s_v2t.get(&[0, 0, 0]), 0.731059));
        assert!(close(tr.s_v2t.get(&[0, 1, 0]), 0.268941));
        assert!(close(tr.n_v2v.get(&[0, 0, 0]), 0.731059));
        assert!(close(tr.n_v2v.get(&[0, 0, 1]), 0.268941));
        assert_eq!(tr.s_t2v.data(), &[1.0]);
        assert_eq!(tr.s_v.data(), &[0.5]);
        assert!(close(tr.n_vv.get(&[0, 0, 0]), 2.0 * 0.731059));
        assert!((tr.s_vt.item().unwrap() - 1.462117).abs() < 1e-5);
        assert_eq!(tr.n_t2v.shape(), &[1, 2]);
    }

    #[test]
    fn single_frame_weights_are_one() {
        let frames = Tensor::<f64>::from_f64([2, 1, 3], &[1.0, 2.0, 2.0, 0.0, 3.0, 4.0]).unwrap();
        let texts = Tensor::from_f64([3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let tr = ciffp_similarity(&frames, &texts, &CiffpParams::zeros(3)).unwrap();
        assert!(tr.s_v2t.data().iter().all(|&w| w == 1.0));
        for t in 0..3 {
            assert!((tr.n_v2v.get(&[0, t, 1]) - 2.0 / 3.0).abs() < 1e-15);
            assert!((tr.n_v2v.get(&[1, t, 2]) - 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn scaling_inputs_leaves_scores_unchanged() {
        let (frames, text) = hand_example();
        let base = ciffp_similarity(&frames, &text, &CiffpParams::zeros(2)).unwrap().s_vt;
        let scaled = ciffp_similarity(&frames.map(|x| 3.0 * x), &text.map(|x| 3.0 * x), &CiffpParams::zeros(2))
            .unwrap()
            .s_vt;
        assert!(base.max_abs_diff(&scaled).unwrap() < 1e-5);
    }

    #[test]
    fn streaming_route_matches_hand_trace() {
        let (frames, text) = hand_example();
        let f0 = frames.reshape([2, 2]).unwrap();
        let s = ciffp_scores(&[&f0], &text, &CiffpParams::zeros(2)).unwrap();
        assert!((s.item().unwrap() - 1.462117).abs() < 1e-5);
    }

    #[test]
    fn shape_and_nan_errors() {
        let frames = Tensor::<f64>::ones([1, 2, 3]);
        let text = Tensor::<f64>::ones([1, 2]);
        assert!(matches!(
            ciffp_similarity(&frames, &text, &CiffpParams::zeros(3)),
            Err(Error::Shape { .. })
        ));
        let mut bad = Tensor::<f64>::ones([1, 2]);
        bad.data_mut()[0] = f64::NAN;
        let frames = Tensor::<f64>::ones([1, 2, 2]);
        assert!(matches!(
            ciffp_similarity(&frames, &bad, &CiffpParams::zeros(2)),
            Err(Error::Validation(_))
        ));
    }
}
