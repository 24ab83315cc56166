//! Charbonnier-penalized training objective.
//!
//! ```text
//! L = λ_w Σ Φ(F_avg - I_gt) + λ_e Σ Φ(Î - I_gt),   F_avg = (F_prev + F_next) / 2
//! Φ(x) = sqrt(x² + ε²)
//! ```
//!
//! Sums run jointly over every pixel of every channel.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::FieldMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the warped-average term.
    pub lambda_w: f64,
    /// Weight of the enhanced-output term.
    pub lambda_e: f64,
    /// Charbonnier smoothing constant.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_w: 1.0,
            lambda_e: 0.5,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_w >= 0.0 && self.lambda_e >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument("Charbonnier epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Smallest attainable loss for `n` pixel-channels: `(λ_w + λ_e)·n·ε`.
    pub fn floor(&self, n: usize) -> f64 {
        (self.lambda_w + self.lambda_e) * n as f64 * self.epsilon
    }
}

/// `Φ(x) = sqrt(x² + ε²)`.
#[inline]
pub fn charbonnier<T: Scalar>(x: T, epsilon: T) -> T {
    (x * x + epsilon * epsilon).sqrt()
}

/// `Φ'(x) = x / Φ(x)`.
#[inline]
pub fn charbonnier_derivative<T: Scalar>(x: T, epsilon: T) -> T {
    x / charbonnier(x, epsilon)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub warped_term: T,
    pub enhanced_term: T,
    pub d_prev: FieldMap<T>,
    pub d_next: FieldMap<T>,
    pub d_enhanced: FieldMap<T>,
}

/// Loss value and its gradients with respect to both warped frames and the
/// enhanced output. Summation is sequential in channel-major order, so the
/// value is reproducible bit for bit.
pub fn total_loss<T: Scalar>(
    warped_prev: &FieldMap<T>,
    warped_next: &FieldMap<T>,
    enhanced: &FieldMap<T>,
    gt: &FieldMap<T>,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    cfg.validate()?;
    warped_prev.expect_same_shape(gt, "loss warped_prev")?;
    warped_next.expect_same_shape(gt, "loss warped_next")?;
    enhanced.expect_same_shape(gt, "loss enhanced")?;
    let (lw, le, eps) = (lit::<T>(cfg.lambda_w), lit::<T>(cfg.lambda_e), lit::<T>(cfg.epsilon));
    let half = lit::<T>(0.5);

    let (c, h, w) = gt.shape();
    let n = c * h * w;
    let mut d_prev = Vec::with_capacity(n);
    let mut d_next = Vec::with_capacity(n);
    let mut d_enh = Vec::with_capacity(n);
    let (mut warped_term, mut enhanced_term) = (T::zero(), T::zero());
    for (((p, q), e), g) in warped_prev.iter().zip(warped_next.iter()).zip(enhanced.iter()).zip(gt.iter()) {
        let rw = half * (p + q) - g;
        let re = e - g;
        warped_term += charbonnier(rw, eps);
        enhanced_term += charbonnier(re, eps);
        let dw = lw * charbonnier_derivative(rw, eps) * half;
        d_prev.push(dw);
        d_next.push(dw);
        d_enh.push(le * charbonnier_derivative(re, eps));
    }
    Ok(LossOutput {
        value: lw * warped_term + le * enhanced_term,
        warped_term,
        enhanced_term,
        d_prev: FieldMap::from_vec(c, h, w, d_prev)?,
        d_next: FieldMap::from_vec(c, h, w, d_next)?,
        d_enhanced: FieldMap::from_vec(c, h, w, d_enh)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn charbonnier_values() {
        assert_eq!(charbonnier(0.0f64, 1e-6), 1e-6);
        assert!((charbonnier(1.0f64, 1e-6) - 1.0).abs() < 1e-12);
        assert_eq!(charbonnier_derivative(0.0f64, 1e-6), 0.0);
        assert!((charbonnier_derivative(1e6f64, 1e-6) - 1.0).abs() < 1e-12);
        assert!((charbonnier_derivative(-1e6f64, 1e-6) + 1.0).abs() < 1e-12);
    }

    fn random_map(rng: &mut ChaCha8Rng) -> FieldMap<f64> {
        FieldMap::from_vec(3, 4, 5, (0..60).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn floor_at_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_map(&mut rng);
        let cfg = LossConfig::default();
        let out = total_loss(&gt, &gt, &gt, &gt, &cfg).unwrap();
        assert!((out.value - cfg.floor(60)).abs() <= 1e-12 * cfg.floor(60));
        // ±2 offsets cancel in the average
        let up = gt.map(|v| v + 2.0).unwrap();
        let down = gt.map(|v| v - 2.0).unwrap();
        let out = total_loss(&up, &down, &gt, &gt, &cfg).unwrap();
        assert!((out.value - cfg.floor(60)).abs() <= 1e-9 * cfg.floor(60));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, q, e, g) = (random_map(&mut rng), random_map(&mut rng), random_map(&mut rng), random_map(&mut rng));
        let cfg = LossConfig::default();
        let out = total_loss(&p, &q, &e, &g, &cfg).unwrap();
        let h = 1e-6;
        let bump = |m: &FieldMap<f64>, i: usize, d: f64| {
            let mut v: Vec<f64> = m.iter().collect();
            v[i] += d;
            FieldMap::from_vec(3, 4, 5, v).unwrap()
        };
        for i in [0, 17, 59] {
            let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
            let a = fd(&|d| total_loss(&bump(&p, i, d), &q, &e, &g, &cfg).unwrap().value);
            let b = fd(&|d| total_loss(&p, &bump(&q, i, d), &e, &g, &cfg).unwrap().value);
            let c = fd(&|d| total_loss(&p, &q, &bump(&e, i, d), &g, &cfg).unwrap().value);
            let an: Vec<f64> = [&out.d_prev, &out.d_next, &out.d_enhanced].iter().map(|m| m.iter().nth(i).unwrap()).collect();
            for (x, y) in an.iter().zip([a, b, c]) {
                assert!((x - y).abs() / x.abs().max(y.abs()) < 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let m = FieldMap::<f64>::zeros(1, 2, 2).unwrap();
        let bad = LossConfig { epsilon: 0.0, ..Default::default() };
        assert!(total_loss(&m, &m, &m, &m, &bad).is_err());
        let other = FieldMap::<f64>::zeros(1, 2, 3).unwrap();
        assert!(total_loss(&m, &other, &m, &m, &LossConfig::default()).unwrap_err().is_dimension_mismatch());
    }
}
