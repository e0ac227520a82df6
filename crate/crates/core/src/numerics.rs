//! Numerically stable scalar/vector kernels shared by every other module:
//! softmax, log-sum-exp, RMS normalization, and the rotary operator with
//! its inverse.
//!
//! All arithmetic is 64-bit internally; stored tensors may be 32-bit.

use crate::error::{MiError, Result};

/// Stable softmax via max-subtraction. Preserves the argmax and is exactly
/// invariant under adding a constant to all scores.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(MiError::invalid("softmax: empty input"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MiError::invalid("softmax: non-finite score"));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    Ok(out)
}

/// log(sum(exp(s_i))), max-shifted. Exact for a single element.
pub fn logsumexp(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(MiError::invalid("logsumexp: empty input"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MiError::invalid("logsumexp: non-finite score"));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if scores.len() == 1 {
        return Ok(scores[0]);
    }
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok(max + sum.ln())
}

/// RMS-normalize `vec` then scale elementwise by `gain`:
/// `out_i = vec_i / sqrt(mean(vec^2) + eps) * gain_i`.
pub fn rms_norm(vec: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    if vec.len() != gain.len() {
        return Err(MiError::invalid(format!(
            "rms_norm: length mismatch ({} vs {})",
            vec.len(),
            gain.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(MiError::invalid("rms_norm: eps must be positive"));
    }
    let n = vec.len() as f64;
    let mean_sq = vec.iter().map(|v| v * v).sum::<f64>() / n;
    let inv = 1.0 / (mean_sq + eps).sqrt();
    Ok(vec
        .iter()
        .zip(gain.iter())
        .map(|(v, g)| v * inv * g)
        .collect())
}

/// Logistic sigmoid, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Index of the maximum element; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Rotary position operator `R_t` over a head vector, with inverse.
///
/// Pairs consecutive coordinates (2i, 2i+1) and rotates pair i by
/// `position * freq_i` where `freq_i = theta_base^(-2i / head_dim)`.
/// The pairing convention is fixed project-wide; query and key paths must
/// use the same operator instance.
#[derive(Debug, Clone)]
pub struct RotaryOperator {
    head_dim: usize,
    theta_base: f64,
    freqs: Vec<f64>,
}

impl RotaryOperator {
    /// `head_dim` must be even and positive; `theta_base >= 1` so the
    /// frequency table is strictly positive and nonincreasing.
    pub fn new(head_dim: usize, theta_base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(MiError::invalid(format!(
                "rotary: head_dim must be even and positive, got {head_dim}"
            )));
        }
        if !theta_base.is_finite() || theta_base < 1.0 {
            return Err(MiError::invalid(format!(
                "rotary: theta_base must be >= 1, got {theta_base}"
            )));
        }
        let half = head_dim / 2;
        let freqs = (0..half)
            .map(|i| theta_base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(RotaryOperator {
            head_dim,
            theta_base,
            freqs,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn theta_base(&self) -> f64 {
        self.theta_base
    }

    /// Apply `R_position`. Position 0 is the identity.
    pub fn apply(&self, vec: &[f64], position: i64) -> Result<Vec<f64>> {
        let mut out = vec.to_vec();
        self.rotate_in_place(&mut out, position as f64)?;
        Ok(out)
    }

    /// Apply `R_position^{-1}` (same rotation with negated angle).
    pub fn unapply(&self, vec: &[f64], position: i64) -> Result<Vec<f64>> {
        let mut out = vec.to_vec();
        self.rotate_in_place(&mut out, -(position as f64))?;
        Ok(out)
    }

    pub fn apply_in_place(&self, vec: &mut [f64], position: i64) -> Result<()> {
        self.rotate_in_place(vec, position as f64)
    }

    fn rotate_in_place(&self, vec: &mut [f64], position: f64) -> Result<()> {
        if vec.len() != self.head_dim {
            return Err(MiError::invalid(format!(
                "rotary: vector length {} does not match head_dim {}",
                vec.len(),
                self.head_dim
            )));
        }
        if position == 0.0 {
            return Ok(());
        }
        for (i, freq) in self.freqs.iter().enumerate() {
            let angle = position * freq;
            let (sin, cos) = angle.sin_cos();
            let x0 = vec[2 * i];
            let x1 = vec[2 * i + 1];
            vec[2 * i] = x0 * cos - x1 * sin;
            vec[2 * i + 1] = x0 * sin + x1 * cos;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_analytic() {
        let p = softmax(&[3f64.ln(), 1f64.ln()]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_scores_no_overflow() {
        let p = softmax(&[1000.0, 1000.0, 1000.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_errors() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let s = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = s.iter().map(|x| x + 7.25).collect();
        let a = softmax(&s).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn logsumexp_single_and_copies() {
        assert_eq!(logsumexp(&[3.7]).unwrap(), 3.7);
        let m = 5;
        let s = 1.25;
        let got = logsumexp(&vec![s; m]).unwrap();
        assert!((got - (s + (m as f64).ln())).abs() < 1e-12);
        let two = logsumexp(&[0.0, 0.0]).unwrap();
        assert!((two - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_bounds() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..200 {
            let n = 1 + rng.below(6);
            let s: Vec<f64> = (0..n).map(|_| rng.uniform(20.0)).collect();
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = logsumexp(&s).unwrap();
            assert!(lse >= max - 1e-12);
            assert!(lse <= max + (n as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn rms_norm_zero_and_constant() {
        let z = rms_norm(&[0.0; 4], &[1.0; 4], 1e-6).unwrap();
        assert_eq!(z, vec![0.0; 4]);
        let c = rms_norm(&[2.0; 8], &[1.0; 8], 1e-12).unwrap();
        for v in &c {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_scale_invariance() {
        let v = [1.0, -2.0, 0.5, 3.0];
        let scaled: Vec<f64> = v.iter().map(|x| x * 7.0).collect();
        let g = [1.0; 4];
        let a = rms_norm(&v, &g, 1e-12).unwrap();
        let b = rms_norm(&scaled, &g, 1e-12).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_length_mismatch() {
        assert!(rms_norm(&[1.0], &[1.0, 2.0], 1e-6).is_err());
    }

    #[test]
    fn rotary_identity_at_zero() {
        let rope = RotaryOperator::new(8, 10000.0).unwrap();
        let v: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        assert_eq!(rope.apply(&v, 0).unwrap(), v);
        assert_eq!(rope.unapply(&v, 0).unwrap(), v);
    }

    #[test]
    fn rotary_norm_preserving() {
        let rope = RotaryOperator::new(16, 10000.0).unwrap();
        let mut rng = SplitMix64::new(5);
        for &t in &[1i64, 7, 1024] {
            let v: Vec<f64> = (0..16).map(|_| rng.uniform(2.0)).collect();
            let r = rope.apply(&v, t).unwrap();
            let rel = (norm(&r) - norm(&v)).abs() / norm(&v).max(1e-12);
            assert!(rel < 1e-6);
        }
    }

    #[test]
    fn rotary_inverse_roundtrip() {
        let rope = RotaryOperator::new(8, 10000.0).unwrap();
        let mut rng = SplitMix64::new(9);
        for &t in &[0i64, 7, 1024] {
            let v: Vec<f64> = (0..8).map(|_| rng.uniform(1.0)).collect();
            let back = rope.unapply(&rope.apply(&v, t).unwrap(), t).unwrap();
            for (a, b) in v.iter().zip(back.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rotary_position_additive() {
        let rope = RotaryOperator::new(8, 10000.0).unwrap();
        let mut rng = SplitMix64::new(13);
        let v: Vec<f64> = (0..8).map(|_| rng.uniform(1.0)).collect();
        let (a, b) = (37i64, 15i64);
        let two_step = rope
            .unapply(&rope.apply(&v, a).unwrap(), b)
            .unwrap();
        let direct = rope.apply(&v, a - b).unwrap();
        for (x, y) in two_step.iter().zip(direct.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn rotary_derotated_dot_matches_canonical() {
        // <unapply(apply(q̄, t), t), k̃> == <q̄, k̃>
        let rope = RotaryOperator::new(8, 10000.0).unwrap();
        let mut rng = SplitMix64::new(21);
        for &t in &[0i64, 7, 1024] {
            let q: Vec<f64> = (0..8).map(|_| rng.uniform(1.0)).collect();
            let k: Vec<f64> = (0..8).map(|_| rng.uniform(1.0)).collect();
            let q_t = rope.apply(&q, t).unwrap();
            let q_back = rope.unapply(&q_t, t).unwrap();
            assert!((dot(&q_back, &k) - dot(&q, &k)).abs() < 1e-9);
        }
    }

    #[test]
    fn rotary_rejects_bad_inputs() {
        assert!(RotaryOperator::new(7, 10000.0).is_err());
        assert!(RotaryOperator::new(0, 10000.0).is_err());
        assert!(RotaryOperator::new(8, 0.5).is_err());
        let rope = RotaryOperator::new(8, 10000.0).unwrap();
        assert!(rope.apply(&[1.0; 7], 3).is_err());
    }

    #[test]
    fn rotary_freqs_nonincreasing() {
        let rope = RotaryOperator::new(32, 10000.0).unwrap();
        for w in rope.freqs.windows(2) {
            assert!(w[0] >= w[1]);
            assert!(w[1] > 0.0);
        }
    }

    #[test]
    fn sigmoid_complement() {
        assert_eq!(sigmoid(0.0), 0.5);
        for &x in &[-500.0, -3.2, 0.1, 42.0, 500.0] {
            let s = sigmoid(x);
            assert!((0.0..=1.0).contains(&s));
        }
    }
}
