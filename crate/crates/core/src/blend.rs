//! Occlusion-weighted blending of the two warped frames.
//!
//! `Ô = O · F_prev + (1 - O) · F_next`, element-wise, with `O ∈ [0, 1]`
//! weighting the frame warped from the previous reference.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{format_dims, FieldMap, Plane};

/// Visibility of the previous frame, one value in `[0, 1]` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMap<T>(Plane<T>);

impl<T: Scalar> OcclusionMap<T> {
    pub fn new(plane: Plane<T>) -> Result<Self> {
        if let Some(i) = plane.as_slice().iter().position(|&v| v < T::zero() || v > T::one()) {
            return Err(Error::OutOfRange {
                context: "occlusion map".into(),
                detail: format!(
                    "value {} at row {}, column {} outside [0, 1]",
                    plane.as_slice()[i],
                    i / plane.width(),
                    i % plane.width()
                ),
            });
        }
        Ok(Self(plane))
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clamped(plane: Plane<T>) -> Result<Self> {
        Self::new(plane.map(|v| v.max(T::zero()).min(T::one()))?)
    }

    pub fn uniform(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(Plane::filled(height, width, value)?)
    }

    /// Single-channel map; values must already be in range.
    pub fn from_map(map: FieldMap<T>) -> Result<Self> {
        if map.channels() != 1 {
            return Err(Error::mismatch("occlusion map channels", 1, map.channels()));
        }
        Self::new(map.into_planes().remove(0))
    }

    pub fn plane(&self) -> &Plane<T> {
        &self.0
    }

    pub fn into_map(self) -> FieldMap<T> {
        FieldMap::new(vec![self.0]).expect("one channel")
    }
}

fn check<T: Scalar>(prev: &Plane<T>, next: &Plane<T>, occ: &OcclusionMap<T>) -> Result<()> {
    prev.expect_same_dims(next, "blend warped frames")?;
    if occ.plane().dims() != prev.dims() {
        return Err(Error::mismatch(
            "blend occlusion map",
            format_dims(prev.dims()),
            format_dims(occ.plane().dims()),
        ));
    }
    Ok(())
}

pub fn blend<T: Scalar>(warped_prev: &Plane<T>, warped_next: &Plane<T>, occ: &OcclusionMap<T>) -> Result<Plane<T>> {
    check(warped_prev, warped_next, occ)?;
    let data = warped_prev
        .as_slice()
        .iter()
        .zip(warped_next.as_slice())
        .zip(occ.plane().as_slice())
        .map(|((&a, &b), &o)| o * a + (T::one() - o) * b)
        .collect();
    Plane::from_vec(warped_prev.height(), warped_prev.width(), data)
}

/// Blends every channel with the same occlusion map.
pub fn blend_frames<T: Scalar>(
    warped_prev: &FieldMap<T>,
    warped_next: &FieldMap<T>,
    occ: &OcclusionMap<T>,
) -> Result<FieldMap<T>> {
    warped_prev.expect_same_shape(warped_next, "blend warped frames")?;
    FieldMap::new(
        warped_prev
            .planes()
            .iter()
            .zip(warped_next.planes())
            .map(|(a, b)| blend(a, b, occ))
            .collect::<Result<_>>()?,
    )
}

/// Gradients of a loss through [`blend`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlendGradients<T> {
    pub d_prev: Plane<T>,
    pub d_next: Plane<T>,
    pub d_occ: Plane<T>,
}

pub fn blend_grads<T: Scalar>(
    upstream: &Plane<T>,
    warped_prev: &Plane<T>,
    warped_next: &Plane<T>,
    occ: &OcclusionMap<T>,
) -> Result<BlendGradients<T>> {
    check(warped_prev, warped_next, occ)?;
    upstream.expect_same_dims(warped_prev, "blend upstream")?;
    let o = occ.plane();
    Ok(BlendGradients {
        d_prev: upstream.zip_map(o, |g, o| g * o)?,
        d_next: upstream.zip_map(o, |g, o| g * (T::one() - o))?,
        d_occ: upstream.zip_map(&warped_prev.zip_map(warped_next, |a, b| a - b)?, |g, d| g * d)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plane(v: &[f64]) -> Plane<f64> {
        Plane::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn selection_identities() {
        let a = plane(&[0.1, 0.7, 0.3]);
        let b = plane(&[0.9, 0.2, 0.4]);
        assert_eq!(blend(&a, &b, &OcclusionMap::uniform(1, 3, 1.0).unwrap()).unwrap(), a);
        assert_eq!(blend(&a, &b, &OcclusionMap::uniform(1, 3, 0.0).unwrap()).unwrap(), b);
    }

    #[test]
    fn half_weight_averages() {
        let a = Plane::filled(2, 2, 10.0).unwrap();
        let b = Plane::filled(2, 2, 20.0).unwrap();
        let out = blend(&a, &b, &OcclusionMap::uniform(2, 2, 0.5).unwrap()).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 15.0));
    }

    #[test]
    fn range_and_shape_checked() {
        assert!(OcclusionMap::new(plane(&[0.5, 1.2])).is_err());
        assert!(OcclusionMap::new(plane(&[-0.01])).is_err());
        let occ = OcclusionMap::clamped(plane(&[-3.0, 4.0])).unwrap();
        assert_eq!(occ.plane().as_slice(), &[0.0, 1.0]);
        let a = plane(&[0.0, 1.0]);
        let b = plane(&[0.0, 1.0, 2.0]);
        assert!(blend(&a, &b, &occ).unwrap_err().is_dimension_mismatch());
    }

    #[test]
    fn gradient_special_cases() {
        let a = plane(&[0.3, 0.6]);
        let up = plane(&[1.5, -2.0]);
        let g = blend_grads(&up, &a, &a, &OcclusionMap::uniform(1, 2, 0.3).unwrap()).unwrap();
        assert!(g.d_occ.as_slice().iter().all(|&v| v == 0.0));
        let b = plane(&[0.9, 0.1]);
        let g = blend_grads(&up, &a, &b, &OcclusionMap::uniform(1, 2, 1.0).unwrap()).unwrap();
        assert_eq!(g.d_prev, up);
        assert!(g.d_next.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let a = plane(&[0.3, 0.6, 0.15]);
        let b = plane(&[0.9, 0.1, 0.45]);
        let o = plane(&[0.2, 0.5, 0.8]);
        let up = plane(&[1.5, -2.0, 0.75]);
        let occ = OcclusionMap::new(o.clone()).unwrap();
        let g = blend_grads(&up, &a, &b, &occ).unwrap();
        let loss = |a: &Plane<f64>, b: &Plane<f64>, o: &Plane<f64>| -> f64 {
            let out = blend(a, b, &OcclusionMap::new(o.clone()).unwrap()).unwrap();
            out.as_slice().iter().zip(up.as_slice()).map(|(x, u)| x * u).sum()
        };
        let h = 1e-6;
        for i in 0..3 {
            let bump = |p: &Plane<f64>, d: f64| {
                let mut q = p.clone();
                q.as_mut_slice()[i] += d;
                q
            };
            let fd_a = (loss(&bump(&a, h), &b, &o) - loss(&bump(&a, -h), &b, &o)) / (2.0 * h);
            let fd_b = (loss(&a, &bump(&b, h), &o) - loss(&a, &bump(&b, -h), &o)) / (2.0 * h);
            let fd_o = (loss(&a, &b, &bump(&o, h)) - loss(&a, &b, &bump(&o, -h))) / (2.0 * h);
            for (an, fd) in [
                (g.d_prev.as_slice()[i], fd_a),
                (g.d_next.as_slice()[i], fd_b),
                (g.d_occ.as_slice()[i], fd_o),
            ] {
                assert!((an - fd).abs() / an.abs().max(1.0) < 1e-8, "{an} vs {fd}");
            }
        }
    }

    proptest! {
        #[test]
        fn convex_and_complementary(
            data in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.0f64..=1.0), 1..20)
        ) {
            let a = Plane::from_vec(1, data.len(), data.iter().map(|d| d.0).collect()).unwrap();
            let b = Plane::from_vec(1, data.len(), data.iter().map(|d| d.1).collect()).unwrap();
            let occ = OcclusionMap::new(Plane::from_vec(1, data.len(), data.iter().map(|d| d.2).collect()).unwrap()).unwrap();
            let ab = blend(&a, &b, &occ).unwrap();
            let ba = blend(&b, &a, &occ).unwrap();
            for i in 0..data.len() {
                let (x, y) = (a.as_slice()[i], b.as_slice()[i]);
                let v = ab.as_slice()[i];
                prop_assert!(v >= x.min(y) - 1e-12 && v <= x.max(y) + 1e-12);
                prop_assert!((v + ba.as_slice()[i] - (x + y)).abs() < 1e-12);
            }
        }
    }
}
