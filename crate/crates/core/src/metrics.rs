//! PSNR and SSIM.

use crate::error::{Error, Result};
use crate::scalar::{to_f64, Scalar};
use crate::tensor::{FieldMap, Plane};

/// Reported PSNR for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// `10·log10(peak² / MSE)` over all pixel-channels, capped at 99 dB.
pub fn psnr<T: Scalar>(a: &FieldMap<T>, b: &FieldMap<T>, peak: f64) -> Result<f64> {
    a.expect_same_shape(b, "psnr inputs")?;
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::InvalidArgument(format!("peak must be positive, got {peak}")));
    }
    let (sum, n) = a
        .iter()
        .zip(b.iter())
        .fold((0.0f64, 0usize), |(s, n), (x, y)| {
            let d = to_f64(x) - to_f64(y);
            (s + d * d, n + 1)
        });
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: output is `(h-10) x (w-10)`.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn luma<T: Scalar>(m: &FieldMap<T>) -> Vec<f64> {
    let c = m.channels() as f64;
    let (h, w) = m.dims();
    (0..h * w)
        .map(|i| m.planes().iter().map(|p| to_f64(p.as_slice()[i])).sum::<f64>() / c)
        .collect()
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5) and
/// `C1 = (0.01·peak)²`, `C2 = (0.03·peak)²`. Multi-channel inputs are reduced
/// to their channel mean first.
pub fn ssim<T: Scalar>(a: &FieldMap<T>, b: &FieldMap<T>, peak: f64) -> Result<f64> {
    a.expect_same_shape(b, "ssim inputs")?;
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::InvalidArgument(format!("peak must be positive, got {peak}")));
    }
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let k = gaussian_window();
    let (x, y) = (luma(a), luma(b));
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mu_x = filter_valid(&x, h, w, &k);
    let mu_y = filter_valid(&y, h, w, &k);
    let e_xx = filter_valid(&xx, h, w, &k);
    let e_yy = filter_valid(&yy, h, w, &k);
    let e_xy = filter_valid(&xy, h, w, &k);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sxx = e_xx[i] - mx * mx;
            let syy = e_yy[i] - my * my;
            let sxy = e_xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// SSIM of two single planes.
pub fn ssim_plane<T: Scalar>(a: &Plane<T>, b: &Plane<T>, peak: f64) -> Result<f64> {
    ssim(&FieldMap::new(vec![a.clone()])?, &FieldMap::new(vec![b.clone()])?, peak)
}

/// The two report lines, e.g. `PSNR: 99.0000 dB` and `SSIM: 1.0000`.
pub fn format_metrics(psnr_db: f64, ssim: f64) -> String {
    format!("PSNR: {psnr_db:.4} dB\nSSIM: {ssim:.4}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> FieldMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FieldMap::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn psnr_values() {
        let a = random_image(1, 16, 16);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
        let b = a.map(|v| v + 0.1).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-6);
        let c = a.map(|v| v - 0.01).unwrap();
        assert!((psnr(&a, &c, 1.0).unwrap() - 40.0).abs() < 1e-6);
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = random_image(2, 12, 12);
        let mut last = f64::INFINITY;
        for amp in [0.001, 0.01, 0.05, 0.2, 0.5] {
            let p = psnr(&a, &a.map(|v| v + amp).unwrap(), 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = random_image(3, 20, 24);
        let b = random_image(4, 20, 24);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
        let s = ssim(&a, &b, 1.0).unwrap();
        assert!((-1.0..=1.0).contains(&s) && s < 0.5);
    }

    #[test]
    fn ssim_constant_images() {
        let (c1v, c2v) = (0.3, 0.7);
        let a = FieldMap::filled(1, 16, 16, c1v).unwrap();
        let b = FieldMap::filled(1, 16, 16, c2v).unwrap();
        let k1 = 0.01f64.powi(2);
        let expected = (2.0 * c1v * c2v + k1) / (c1v * c1v + c2v * c2v + k1);
        assert!((ssim(&a, &b, 1.0).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_shift_invariance() {
        let a = random_image(5, 16, 16).map(|v| 0.5 * v).unwrap();
        let b = random_image(6, 16, 16).map(|v| 0.5 * v).unwrap();
        let s0 = ssim(&a, &b, 1.0).unwrap();
        let s1 = ssim(&a.map(|v| v + 0.25).unwrap(), &b.map(|v| v + 0.25).unwrap(), 1.0).unwrap();
        // only the luminance constant C1 breaks exact invariance
        assert!((s0 - s1).abs() < 0.05, "{s0} {s1}");
        let s2 = ssim(&a.map(|v| v + 1e-9).unwrap(), &b.map(|v| v + 1e-9).unwrap(), 1.0).unwrap();
        assert!((s0 - s2).abs() < 1e-6);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = random_image(7, 10, 30);
        assert!(ssim(&a, &a, 1.0).is_err());
    }

    #[test]
    fn report_format() {
        assert_eq!(format_metrics(99.0, 1.0), "PSNR: 99.0000 dB\nSSIM: 1.0000");
    }
}
