//! Training objectives: symmetric InfoNCE over the similarity matrix, a
//! distribution term between paired probabilistic embeddings, and an
//! orthogonality term on each sample's mean/deviation ratios.
//!
//! ```text
//! vtm  = mean_i −log softmax_row(S·s)[i,i] + mean_i −log softmax_col(S·s)[i,i]
//! ddsl = mean  log(Tσ/Vσ) − 1 + (Vσ/Tσ)² + (Tμ − Vμ)²/Tσ²
//! dst  = mean_n ‖F Fᵀ − I‖_F (text) + mean_n ‖F Fᵀ − I‖_F (video),  F = μ/σ
//! total = vtm + ddsl + λ·dst
//! ```
//!
//! The distribution term is not a KL divergence. Its minimum is
//! `0.5·ln 2 − 0.5` at `Vσ/Tσ = 1/√2`, so it can be negative.

use crate::error::{Error, Result};
use crate::msalm::ProbEmbedding;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Upper bound on the log of the logit scale (`ln 100`).
pub const MAX_LOG_SCALE: f64 = 4.605_170_185_988_092;
/// Default weight of the orthogonality term.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Learnable inverse temperature, stored in log space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogitScale<T: Real = f32> {
    pub log_tau_inv: T,
}

impl<T: Real> Default for LogitScale<T> {
    fn default() -> Self {
        Self {
            log_tau_inv: T::c(MAX_LOG_SCALE),
        }
    }
}

impl<T: Real> LogitScale<T> {
    pub fn new(log_tau_inv: T) -> Self {
        Self { log_tau_inv }
    }

    /// Effective multiplier `exp(min(log_tau_inv, ln 100))`.
    pub fn scale(&self) -> T {
        self.log_tau_inv.min(T::c(MAX_LOG_SCALE)).exp()
    }

    /// Pulls the stored value back under the bound.
    pub fn clamp(&mut self) {
        self.log_tau_inv = self.log_tau_inv.min(T::c(MAX_LOG_SCALE));
    }
}

/// Component losses of one step, widened to `f64` for reporting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_vtm: f64,
    pub l_ddsl: f64,
    pub l_dst: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Combines component losses; the total is computed in `T`.
pub fn total_loss<T: Real>(l_vtm: T, l_ddsl: T, l_dst: T, lambda: T) -> Result<LossBreakdown> {
    for (name, v) in [("l_vtm", l_vtm), ("l_ddsl", l_ddsl), ("l_dst", l_dst), ("lambda", lambda)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    if lambda < T::zero() {
        return Err(Error::Contract(format!("lambda must be non-negative, got {lambda}")));
    }
    let total = l_vtm + l_ddsl + lambda * l_dst;
    Ok(LossBreakdown {
        l_vtm: l_vtm.f64(),
        l_ddsl: l_ddsl.f64(),
        l_dst: l_dst.f64(),
        lambda: lambda.f64(),
        total: total.f64(),
    })
}

/// Symmetric InfoNCE on the tape. `s_vt` is `[N×N]`, `log_scale` a scalar.
pub fn vtm_forward<T: Real>(tape: &mut Tape<T>, s_vt: Var, log_scale: Var) -> Result<Var> {
    let shape = tape.shape(s_vt).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Contract(format!(
            "similarity matrix must be square, got {shape:?}"
        )));
    }
    let n = shape[0];
    let clamped = tape.clamp_max(log_scale, T::c(MAX_LOG_SCALE));
    let scale = tape.exp(clamped);
    let logits = tape.mul(s_vt, scale)?;
    let eye = tape.constant(Tensor::eye(n));
    let mut total = None;
    for axis in [1, 0] {
        let ls = tape.log_softmax(logits, axis)?;
        let diag = tape.mul(ls, eye)?;
        let s = tape.sum_all(diag);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    Ok(tape.scale(total.expect("two directions"), -T::one() / T::c(n as f64)))
}

fn check_pair<T: Real>(tape: &Tape<T>, vars: [Var; 4]) -> Result<()> {
    let s0 = tape.shape(vars[0]);
    for v in &vars[1..] {
        if tape.shape(*v) != s0 {
            return Err(Error::Contract(format!(
                "probabilistic embedding shapes differ: {:?} vs {:?}",
                s0,
                tape.shape(*v)
            )));
        }
    }
    if s0.len() != 3 {
        return Err(Error::Contract(format!("expected [N, k, D], got {s0:?}")));
    }
    Ok(())
}

/// Distribution term on the tape, text as the reference.
pub fn ddsl_forward<T: Real>(
    tape: &mut Tape<T>,
    t_mu: Var,
    t_sigma: Var,
    v_mu: Var,
    v_sigma: Var,
) -> Result<Var> {
    check_pair(tape, [t_mu, t_sigma, v_mu, v_sigma])?;
    let ratio = tape.div(t_sigma, v_sigma)?;
    let log_ratio = tape.log(ratio);
    let inv = tape.div(v_sigma, t_sigma)?;
    let inv_sq = tape.square(inv);
    let diff = tape.sub(t_mu, v_mu)?;
    let diff_sq = tape.square(diff);
    let t_var = tape.square(t_sigma);
    let mean_term = tape.div(diff_sq, t_var)?;
    let a = tape.shift(log_ratio, -T::one());
    let b = tape.add(a, inv_sq)?;
    let elem = tape.add(b, mean_term)?;
    Ok(tape.mean_all(elem))
}

/// `mean_n ‖F Fᵀ − I‖_F` for one modality, `F = μ/σ`.
fn orthogonality<T: Real>(tape: &mut Tape<T>, mu: Var, sigma: Var) -> Result<Var> {
    let k = tape.shape(mu)[1];
    let f = tape.div(mu, sigma)?;
    let ft = tape.transpose_last(f)?;
    let gram = tape.matmul(f, ft)?;
    let eye = tape.constant(Tensor::eye(k));
    let off = tape.sub(gram, eye)?;
    let sq = tape.square(off);
    let rows = tape.sum_axis(sq, 2, false)?;
    let per_sample = tape.sum_axis(rows, 1, false)?;
    let norms = tape.sqrt(per_sample);
    Ok(tape.mean_all(norms))
}

/// Orthogonality term on the tape, summed over both modalities.
pub fn dst_forward<T: Real>(
    tape: &mut Tape<T>,
    t_mu: Var,
    t_sigma: Var,
    v_mu: Var,
    v_sigma: Var,
) -> Result<Var> {
    check_pair(tape, [t_mu, t_sigma, v_mu, v_sigma])?;
    let text = orthogonality(tape, t_mu, t_sigma)?;
    let video = orthogonality(tape, v_mu, v_sigma)?;
    tape.add(text, video)
}

/// `vtm + ddsl + λ·dst` on the tape.
pub fn total_forward<T: Real>(tape: &mut Tape<T>, vtm: Var, ddsl: Var, dst: Var, lambda: T) -> Result<Var> {
    let base = tape.add(vtm, ddsl)?;
    let reg = tape.scale(dst, lambda);
    tape.add(base, reg)
}

fn check_sigma<T: Real>(p: &ProbEmbedding<T>, which: &str) -> Result<()> {
    if !p.mu.all_finite() || !p.sigma.all_finite() {
        return Err(Error::Contract(format!("{which} embedding is not finite")));
    }
    if p.sigma.data().iter().any(|&s| s.is_nan() || s <= T::zero()) {
        return Err(Error::Contract(format!("{which} sigma must be positive")));
    }
    Ok(())
}

fn eval_pair<T: Real>(
    text: &ProbEmbedding<T>,
    video: &ProbEmbedding<T>,
    f: impl FnOnce(&mut Tape<T>, Var, Var, Var, Var) -> Result<Var>,
) -> Result<T> {
    check_sigma(text, "text")?;
    check_sigma(video, "video")?;
    let mut tape = Tape::new();
    let vars = [&text.mu, &text.sigma, &video.mu, &video.sigma].map(|t| tape.constant(t.clone()));
    let out = f(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    tape.value(out).item()
}

/// Symmetric InfoNCE of a paired similarity matrix.
pub fn vtm_loss<T: Real>(s_vt: &Tensor<T>, scale: &LogitScale<T>) -> Result<T> {
    if !s_vt.all_finite() {
        return Err(Error::Contract("similarity matrix is not finite".into()));
    }
    let mut tape = Tape::new();
    let s = tape.constant(s_vt.clone());
    let l = tape.scalar(scale.log_tau_inv);
    let out = vtm_forward(&mut tape, s, l)?;
    tape.value(out).item()
}

pub fn ddsl_loss<T: Real>(text: &ProbEmbedding<T>, video: &ProbEmbedding<T>) -> Result<T> {
    eval_pair(text, video, ddsl_forward)
}

pub fn dst_loss<T: Real>(text: &ProbEmbedding<T>, video: &ProbEmbedding<T>) -> Result<T> {
    eval_pair(text, video, dst_forward)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pe(shape: [usize; 3], mu: &[f64], sigma: &[f64]) -> ProbEmbedding<f64> {
        ProbEmbedding::new(
            Tensor::from_f64(shape, mu).unwrap(),
            Tensor::from_f64(shape, sigma).unwrap(),
        )
        .unwrap()
    }

    fn unit() -> LogitScale<f64> {
        LogitScale::new(0.0)
    }

    #[test]
    fn vtm_anchors() {
        let zero = Tensor::<f64>::zeros([2, 2]);
        assert!((vtm_loss(&zero, &unit()).unwrap() - 1.386294).abs() < 1e-6);
        assert!((vtm_loss(&zero, &LogitScale::default()).unwrap() - 4f64.ln()).abs() < 1e-12);
        let eye = Tensor::<f64>::eye(2);
        assert!((vtm_loss(&eye, &unit()).unwrap() - 0.626523).abs() < 1e-6);
        let shifted = eye.map(|x| x + 3.5);
        assert!((vtm_loss(&shifted, &unit()).unwrap() - vtm_loss(&eye, &unit()).unwrap()).abs() < 1e-9);
        assert!(matches!(
            vtm_loss(&Tensor::<f64>::zeros([2, 3]), &unit()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn vtm_constant_is_two_log_n() {
        for n in [1, 3, 8] {
            let c = Tensor::<f64>::full([n, n], 0.37);
            let want = 2.0 * (n as f64).ln();
            assert!((vtm_loss(&c, &LogitScale::default()).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn vtm_drops_as_diagonal_grows() {
        let mut prev = f64::INFINITY;
        for boost in [0.5, 1.0, 2.0] {
            let s = Tensor::<f64>::from_f64([3, 3], &[1.0 + boost, 0.2, 0.1, 0.3, 1.0 + boost, 0.0, 0.1, 0.1, 1.0 + boost]).unwrap();
            let l = vtm_loss(&s, &unit()).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn scale_is_clamped() {
        let mut s = LogitScale::<f64>::new(10.0);
        assert!((s.scale() - 100.0).abs() < 1e-9);
        s.clamp();
        assert_eq!(s.log_tau_inv, MAX_LOG_SCALE);
    }

    #[test]
    fn ddsl_anchors() {
        let p = pe([1, 2, 2], &[0.3, -1.0, 2.0, 0.0], &[0.5, 1.0, 2.0, 0.1]);
        assert!(ddsl_loss(&p, &p).unwrap().abs() < 1e-9);

        let r = 1.0 / 2f64.sqrt();
        let t = pe([1, 1, 2], &[0.0, 1.0], &[1.0, 2.0]);
        let v = pe([1, 1, 2], &[0.0, 1.0], &[r, 2.0 * r]);
        assert!((ddsl_loss(&t, &v).unwrap() - (-0.153426)).abs() < 1e-6);

        let t = pe([1, 1, 1], &[1.0], &[1.0]);
        let v = pe([1, 1, 1], &[0.0], &[1.0]);
        assert!((ddsl_loss(&t, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ddsl_rejects_bad_sigma_and_shapes() {
        let t = pe([1, 1, 1], &[1.0], &[0.0]);
        let v = pe([1, 1, 1], &[0.0], &[1.0]);
        assert!(matches!(ddsl_loss(&t, &v), Err(Error::Contract(_))));
        let w = pe([1, 1, 2], &[0.0, 0.0], &[1.0, 1.0]);
        assert!(matches!(ddsl_loss(&v, &w), Err(Error::Contract(_))));
    }

    #[test]
    fn dst_anchors() {
        let ortho = pe([1, 2, 2], &[1.0, 0.0, 0.0, 1.0], &[1.0; 4]);
        assert!(dst_loss(&ortho, &ortho).unwrap().abs() < 1e-9);

        let ones = pe([1, 2, 2], &[1.0; 4], &[1.0; 4]);
        assert!((dst_loss(&ones, &ortho).unwrap() - 3.162278).abs() < 1e-6);
        assert!((dst_loss(&ortho, &ones).unwrap() - 3.162278).abs() < 1e-6);

        // ratio rows are orthonormal even though μ and σ are not unit
        let scaled = pe([1, 2, 2], &[2.0, 0.0, 0.0, 0.5], &[2.0, 1.0, 3.0, 0.5]);
        assert!(dst_loss(&scaled, &ortho).unwrap().abs() < 1e-12);
    }

    #[test]
    fn dst_single_slot_is_norm_gap() {
        let t = pe([2, 1, 3], &[1.0, 2.0, 0.0, 0.0, 0.5, 0.5], &[1.0; 6]);
        let v = pe([2, 1, 3], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0], &[1.0; 6]);
        let want = ((5.0f64 - 1.0).abs() + (0.5f64 - 1.0).abs()) / 2.0;
        assert!((dst_loss(&t, &v).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(1.0f64, 0.0, 0.0, 0.1).unwrap().total, 1.0);
        assert!((total_loss(1.0f64, 0.5, 2.0, 0.1).unwrap().total - 1.7).abs() < 1e-12);
        let a = total_loss(1.0f64, 0.5, 2.0, 0.0).unwrap();
        let b = total_loss(1.0f64, 0.5, 9.0, 0.0).unwrap();
        assert_eq!(a.total, b.total);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, 0.1), Err(Error::NonFinite(m)) if m.contains("l_vtm")));
        assert!(total_loss(1.0f64, 0.0, 0.0, -1.0).is_err());
    }
}
