//! Text-independent and top-k frame poolers used for ablations.
//!
//! Frames are L2-normalized before pooling, as in the fusion pipeline.

use crate::error::{Error, Result};
use crate::tensor::ops::{self, dot, L2_EPS};
use crate::tensor::{Real, Tensor};

/// Scalar frame-scoring projection `D → 1` for self-attention pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttentionParams<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: T,
}

impl<T: Real> SelfAttentionParams<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: Tensor::zeros([dim]),
            bias: T::zero(),
        }
    }
}

struct Prepared<T> {
    b: usize,
    f: usize,
    d: usize,
    frames_n: Tensor<T>,
    texts_n: Tensor<T>,
}

fn prepare<T: Real>(frames: &Tensor<T>, texts: &Tensor<T>) -> Result<Prepared<T>> {
    if frames.rank() != 3 || texts.rank() != 2 || frames.dim(2) != texts.dim(1) {
        return Err(Error::shape("pooling", frames.shape(), texts.shape()));
    }
    let eps = T::c(L2_EPS);
    Ok(Prepared {
        b: frames.dim(0),
        f: frames.dim(1),
        d: frames.dim(2),
        frames_n: ops::l2_normalize(frames, 2, eps)?,
        texts_n: ops::l2_normalize(texts, 1, eps)?,
    })
}

/// Cosine of each pooled video vector `[B×D]` with each text.
fn cosine_table<T: Real>(pooled: &[Vec<T>], texts_n: &Tensor<T>) -> Result<Tensor<T>> {
    let t = texts_n.dim(0);
    let eps = T::c(L2_EPS);
    let mut out = Vec::with_capacity(pooled.len() * t);
    for v in pooled {
        let v = ops::l2_normalized_vec(v, eps);
        out.extend((0..t).map(|ti| dot(&v, texts_n.row(ti))));
    }
    Tensor::new([pooled.len(), t], out)
}

fn weighted_pool<T: Real>(p: &Prepared<T>, weights: impl Fn(usize) -> Vec<T>) -> Vec<Vec<T>> {
    (0..p.b)
        .map(|bi| {
            let w = weights(bi);
            let mut acc = vec![T::zero(); p.d];
            for (fi, &wf) in w.iter().enumerate() {
                let fr = &p.frames_n.data()[(bi * p.f + fi) * p.d..(bi * p.f + fi + 1) * p.d];
                for (a, &x) in acc.iter_mut().zip(fr) {
                    *a = *a + wf * x;
                }
            }
            acc
        })
        .collect()
}

/// Cosine between the (renormalized) mean frame and each text.
pub fn mean_pool_similarity<T: Real>(frames: &Tensor<T>, text_pooled: &Tensor<T>) -> Result<Tensor<T>> {
    let p = prepare(frames, text_pooled)?;
    let w = T::one() / T::c(p.f as f64);
    let pooled = weighted_pool(&p, |_| vec![w; p.f]);
    cosine_table(&pooled, &p.texts_n)
}

/// Mean of the `k_frames` largest frame–text cosines per pair.
pub fn topk_pool_similarity<T: Real>(
    frames: &Tensor<T>,
    text_pooled: &Tensor<T>,
    k_frames: usize,
) -> Result<Tensor<T>> {
    let p = prepare(frames, text_pooled)?;
    if k_frames == 0 || k_frames > p.f {
        return Err(Error::Contract(format!(
            "top-k frame count {k_frames} outside 1..={}",
            p.f
        )));
    }
    let t = p.texts_n.dim(0);
    let mut out = Vec::with_capacity(p.b * t);
    let mut cos = vec![T::zero(); p.f];
    for bi in 0..p.b {
        for ti in 0..t {
            let text = p.texts_n.row(ti);
            for (fi, c) in cos.iter_mut().enumerate() {
                let fr = &p.frames_n.data()[(bi * p.f + fi) * p.d..(bi * p.f + fi + 1) * p.d];
                *c = dot(fr, text);
            }
            cos.sort_by(|a, b| b.partial_cmp(a).expect("finite cosines"));
            let top = cos[..k_frames].iter().copied().sum::<T>();
            out.push(top / T::c(k_frames as f64));
        }
    }
    Tensor::new([p.b, t], out)
}

/// Text-independent attention over frames: softmax of a scalar projection
/// of each frame, weighted sum, then cosine with each text.
pub fn self_attention_pool_similarity<T: Real>(
    frames: &Tensor<T>,
    text_pooled: &Tensor<T>,
    params: &SelfAttentionParams<T>,
) -> Result<Tensor<T>> {
    let p = prepare(frames, text_pooled)?;
    if params.weight.shape() != [p.d] {
        return Err(Error::shape("self-attention projection", params.weight.shape(), &[p.d]));
    }
    let pooled = weighted_pool(&p, |bi| {
        let logits: Vec<T> = (0..p.f)
            .map(|fi| {
                let fr = &p.frames_n.data()[(bi * p.f + fi) * p.d..(bi * p.f + fi + 1) * p.d];
                dot(fr, params.weight.data()) + params.bias
            })
            .collect();
        let mut w = vec![T::zero(); p.f];
        ops::softmax_slice(&logits, &mut w);
        w
    });
    cosine_table(&pooled, &p.texts_n)
}
