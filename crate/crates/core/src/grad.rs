//! Analytic backward pass of the deformable warp.
//!
//! The quadrant classification and `⌊f(A)⌋` are piecewise constant and are
//! held fixed; only the smooth factors are differentiated:
//!
//! * offsets: `∂Î/∂Δu_r = w_r^b · w_r^k · ∂I(q_r)/∂u`, with the bilinear
//!   derivative taken from the four integer neighbours of `q_r`
//!   (see [`BilinearCorners::gradient`]);
//! * kernels: `∂Î/∂w_r^k = w_r^b · I(q_r)`;
//! * image: the adjoint of bilinear sampling, scattering
//!   `w_r^b · w_r^k · corner weight` onto the four neighbours of `q_r`;
//! * flow: through `θ` only, `∂Î/∂f_x = Σ_r ∂w_r^b/∂θ_x · w_r^k · I(q_r)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::scalar::Scalar;
use crate::tensor::{format_shape, BilinearCorners, FieldMap, Plane};
use crate::warp::{KernelCoeffMap, KernelGeometry, OffsetField, Stencil, WarpInputs, WarpParams};

/// Gradients of a scalar loss with respect to every warp input.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpGradients<T> {
    pub d_offsets: OffsetField<T>,
    pub d_kernels: KernelCoeffMap<T>,
    /// One channel per channel of the warped frame.
    pub d_image: FieldMap<T>,
    pub d_flow: FlowField<T>,
}

/// `(∂/∂Δx_r, ∂/∂Δy_r)` of `upstream · Î(A)` for every reference point.
pub fn grad_offset<T: Scalar>(inputs: &WarpInputs<'_, T>, x: usize, y: usize, upstream: T) -> Result<Vec<(T, T)>> {
    inputs.check_target(x, y)?;
    let stencil = Stencil::build(inputs.params, inputs.geometry, x, y);
    Ok(stencil
        .points
        .iter()
        .map(|pt| {
            let (du, dv) = BilinearCorners::locate(inputs.reference, pt.position).gradient(inputs.reference);
            let s = upstream * pt.bilinear * pt.kernel;
            (s * du, s * dv)
        })
        .collect())
}

/// `∂/∂w_r^k` of `upstream · Î(A)` for every reference point.
pub fn grad_kernel<T: Scalar>(inputs: &WarpInputs<'_, T>, x: usize, y: usize, upstream: T) -> Result<Vec<T>> {
    inputs.check_target(x, y)?;
    let stencil = Stencil::build(inputs.params, inputs.geometry, x, y);
    Ok(stencil
        .points
        .iter()
        .map(|pt| {
            upstream * pt.bilinear * BilinearCorners::locate(inputs.reference, pt.position).sample(inputs.reference)
        })
        .collect())
}

/// Sparse contributions `((x, y), value)` of `upstream · Î(A)` to the image
/// gradient. Entries may repeat a pixel; callers sum them.
pub fn grad_image<T: Scalar>(
    inputs: &WarpInputs<'_, T>,
    x: usize,
    y: usize,
    upstream: T,
) -> Result<Vec<((usize, usize), T)>> {
    inputs.check_target(x, y)?;
    let stencil = Stencil::build(inputs.params, inputs.geometry, x, y);
    let mut out = Vec::with_capacity(4 * stencil.points.len());
    for pt in &stencil.points {
        let s = upstream * pt.bilinear * pt.kernel;
        let corners = BilinearCorners::locate(inputs.reference, pt.position);
        for (idx, w) in corners.idx.iter().zip(corners.weights()) {
            out.push((*idx, s * w));
        }
    }
    Ok(out)
}

/// `(∂/∂f_x, ∂/∂f_y)` of `upstream · Î(A)` at the target's own flow vector.
pub fn grad_flow<T: Scalar>(inputs: &WarpInputs<'_, T>, x: usize, y: usize, upstream: T) -> Result<(T, T)> {
    inputs.check_target(x, y)?;
    let stencil = Stencil::build(inputs.params, inputs.geometry, x, y);
    Ok(flow_term(&stencil, inputs.reference, upstream))
}

fn flow_term<T: Scalar>(stencil: &Stencil<T>, reference: &Plane<T>, upstream: T) -> (T, T) {
    let (tx, ty) = (stencil.fraction.theta_x, stencil.fraction.theta_y);
    let (mut gx, mut gy) = (T::zero(), T::zero());
    for pt in &stencil.points {
        let (dwx, dwy) = pt.quadrant.weight_gradient(tx, ty);
        let v = pt.kernel * BilinearCorners::locate(reference, pt.position).sample(reference);
        gx += dwx * v;
        gy += dwy * v;
    }
    (upstream * gx, upstream * gy)
}

/// Pulls `upstream` (one plane per channel of `frame`) back through
/// [`crate::warp::warp_frame`].
///
/// Kernels, offsets and flow are shared by all channels, so their gradients
/// sum over channels. Per-pixel terms are computed in parallel by row; the
/// image scatter runs sequentially in row-major target order, so the result
/// does not depend on the worker count.
pub fn warp_backward<T: Scalar>(
    frame: &FieldMap<T>,
    params: &WarpParams<T>,
    geometry: &KernelGeometry,
    upstream: &FieldMap<T>,
) -> Result<WarpGradients<T>> {
    let (h, w) = frame.dims();
    params.validate(geometry, h, w)?;
    if upstream.shape() != frame.shape() {
        return Err(Error::mismatch(
            "warp_backward upstream",
            format_shape(frame.shape()),
            format_shape(upstream.shape()),
        ));
    }
    let npts = geometry.count();

    struct RowGrads<T> {
        stencils: Vec<Stencil<T>>,
        kernels: Vec<T>,
        offsets_x: Vec<T>,
        offsets_y: Vec<T>,
        flow_x: Vec<T>,
        flow_y: Vec<T>,
    }

    let rows: Vec<RowGrads<T>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = RowGrads {
                stencils: Vec::with_capacity(w),
                kernels: vec![T::zero(); npts * w],
                offsets_x: vec![T::zero(); npts * w],
                offsets_y: vec![T::zero(); npts * w],
                flow_x: vec![T::zero(); w],
                flow_y: vec![T::zero(); w],
            };
            for x in 0..w {
                let stencil = Stencil::build(params, geometry, x, y);
                for (plane, up) in frame.planes().iter().zip(upstream.planes()) {
                    let g = up.get(x, y);
                    if g == T::zero() {
                        continue;
                    }
                    for (r, pt) in stencil.points.iter().enumerate() {
                        let corners = BilinearCorners::locate(plane, pt.position);
                        let sample = corners.sample(plane);
                        let (du, dv) = corners.gradient(plane);
                        let s = g * pt.bilinear * pt.kernel;
                        row.kernels[r * w + x] += g * pt.bilinear * sample;
                        row.offsets_x[r * w + x] += s * du;
                        row.offsets_y[r * w + x] += s * dv;
                    }
                    let (fx, fy) = flow_term(&stencil, plane, g);
                    row.flow_x[x] += fx;
                    row.flow_y[x] += fy;
                }
                row.stencils.push(stencil);
            }
            row
        })
        .collect();

    let mut d_kernels = vec![vec![T::zero(); h * w]; npts];
    let mut d_off = vec![vec![T::zero(); h * w]; 2 * npts];
    let mut d_fx = Vec::with_capacity(h * w);
    let mut d_fy = Vec::with_capacity(h * w);
    let mut d_image = vec![vec![T::zero(); h * w]; frame.channels()];

    for (y, row) in rows.iter().enumerate() {
        for r in 0..npts {
            let src = r * w..(r + 1) * w;
            let dst = y * w..(y + 1) * w;
            d_kernels[r][dst.clone()].copy_from_slice(&row.kernels[src.clone()]);
            d_off[r][dst.clone()].copy_from_slice(&row.offsets_x[src.clone()]);
            d_off[npts + r][dst].copy_from_slice(&row.offsets_y[src]);
        }
        d_fx.extend_from_slice(&row.flow_x);
        d_fy.extend_from_slice(&row.flow_y);
        for (x, stencil) in row.stencils.iter().enumerate() {
            for (c, (plane, up)) in frame.planes().iter().zip(upstream.planes()).enumerate() {
                let g = up.get(x, y);
                if g == T::zero() {
                    continue;
                }
                for pt in &stencil.points {
                    let s = g * pt.bilinear * pt.kernel;
                    let corners = BilinearCorners::locate(plane, pt.position);
                    for (&(ix, iy), cw) in corners.idx.iter().zip(corners.weights()) {
                        d_image[c][iy * w + ix] += s * cw;
                    }
                }
            }
        }
    }

    let to_map = |planes: Vec<Vec<T>>| -> Result<FieldMap<T>> {
        FieldMap::new(
            planes
                .into_iter()
                .map(|d| Plane::from_vec(h, w, d))
                .collect::<Result<_>>()?,
        )
    };
    Ok(WarpGradients {
        d_offsets: OffsetField::new(to_map(d_off)?)?,
        d_kernels: KernelCoeffMap::new(to_map(d_kernels)?),
        d_image: to_map(d_image)?,
        d_flow: FlowField::from_planes(Plane::from_vec(h, w, d_fx)?, Plane::from_vec(h, w, d_fy)?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::{synthesize_pixel, warp_frame};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, g: &KernelGeometry, h: usize, w: usize) -> WarpParams<f64> {
        let r = g.count();
        let flow = FieldMap::from_vec(2, h, w, (0..2 * h * w).map(|_| rng.gen_range(-2.5..2.5)).collect()).unwrap();
        let kernels = FieldMap::from_vec(r, h, w, (0..r * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let offsets =
            FieldMap::from_vec(2 * r, h, w, (0..2 * r * h * w).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
        WarpParams {
            flow: FlowField::new(flow).unwrap(),
            kernels: KernelCoeffMap::new(kernels),
            offsets: OffsetField::new(offsets).unwrap(),
        }
    }

    #[test]
    fn constant_image_has_no_offset_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = KernelGeometry::standard();
        let img = Plane::filled(8, 8, 0.4).unwrap();
        let params = random_params(&mut rng, &g, 8, 8);
        let inputs = WarpInputs::new(&img, &params, &g).unwrap();
        for (x, y) in [(0, 0), (3, 4), (7, 7)] {
            assert!(grad_offset(&inputs, x, y, 1.3).unwrap().iter().all(|&(a, b)| a == 0.0 && b == 0.0));
            let stencil = Stencil::build(&params, &g, x, y);
            let dk = grad_kernel(&inputs, x, y, 2.0).unwrap();
            for (pt, d) in stencil.points.iter().zip(dk) {
                assert!((d - 2.0 * pt.bilinear * 0.4).abs() < 1e-15);
            }
        }
        // The flow gradient does not vanish here: Î = c·Σ w^b w^k still
        // depends on θ. It equals c times the θ-derivative of that sum.
        let stencil = Stencil::build(&params, &g, 3, 4);
        let (fx, fy) = grad_flow(&inputs, 3, 4, 1.0).unwrap();
        let (tx, ty) = (stencil.fraction.theta_x, stencil.fraction.theta_y);
        let ex: f64 = stencil.points.iter().map(|p| p.quadrant.weight_gradient(tx, ty).0 * p.kernel * 0.4).sum();
        let ey: f64 = stencil.points.iter().map(|p| p.quadrant.weight_gradient(tx, ty).1 * p.kernel * 0.4).sum();
        assert!((fx - ex).abs() < 1e-14 && (fy - ey).abs() < 1e-14);
    }

    #[test]
    fn linear_image_offset_gradient_is_slope() {
        let g = KernelGeometry::standard();
        let slope = 0.75;
        let img = Plane::from_fn(12, 12, |x, y| 0.1 + slope * x as f64 + 0.02 * y as f64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = random_params(&mut rng, &g, 12, 12);
        // keep samples inside the frame
        params.flow = FlowField::uniform(12, 12, 0.3, 0.6).unwrap();
        params.offsets = OffsetField::new(
            FieldMap::from_vec(32, 12, 12, (0..32 * 144).map(|_| rng.gen_range(-0.9..0.9)).collect()).unwrap(),
        )
        .unwrap();
        let inputs = WarpInputs::new(&img, &params, &g).unwrap();
        let stencil = Stencil::build(&params, &g, 6, 6);
        let d = grad_offset(&inputs, 6, 6, 1.5).unwrap();
        for (pt, (du, dv)) in stencil.points.iter().zip(d) {
            let s = 1.5 * pt.bilinear * pt.kernel;
            assert!((du - s * slope).abs() < 1e-12);
            assert!((dv - s * 0.02).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_kernel_and_image_gradients() {
        let g = KernelGeometry::standard();
        let img = Plane::from_fn(5, 5, |x, y| (x + 2 * y) as f64 * 0.1).unwrap();
        let params = WarpParams::identity(&g, 5, 5).unwrap();
        let inputs = WarpInputs::new(&img, &params, &g).unwrap();
        let stencil = Stencil::build(&params, &g, 2, 3);
        let dk = grad_kernel(&inputs, 2, 3, 1.0).unwrap();
        assert_eq!(dk[g.index_of((0, 0)).unwrap()], img.get(2, 3));
        for (r, (pt, d)) in stencil.points.iter().zip(&dk).enumerate() {
            let (px, py) = g.coords()[r];
            if px <= 0 && py <= 0 {
                assert_eq!(*d, img.get_clamped(2 + px, 3 + py));
            } else {
                assert_eq!(pt.bilinear, 0.0);
                assert_eq!(*d, 0.0);
            }
        }
        let mut sum = Plane::<f64>::zeros(5, 5).unwrap();
        for ((x, y), v) in grad_image(&inputs, 2, 3, 0.7).unwrap() {
            sum.set(x, y, sum.get(x, y) + v);
        }
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(sum.get(x, y), if (x, y) == (2, 3) { 0.7 } else { 0.0 });
            }
        }
    }

    #[test]
    fn half_pixel_offset_splits_image_gradient_evenly() {
        let g = KernelGeometry::standard();
        let img = Plane::filled(6, 6, 1.0).unwrap();
        let mut params = WarpParams::identity(&g, 6, 6).unwrap();
        let origin = g.index_of((0, 0)).unwrap();
        params.offsets.as_map_mut().plane_mut(origin).set(2, 2, 0.5);
        params.offsets.as_map_mut().plane_mut(16 + origin).set(2, 2, 0.5);
        let inputs = WarpInputs::new(&img, &params, &g).unwrap();
        // θ = 0 and (0,0)+(0.5,0.5) > 0 on both axes: bottom-right, weight 0.
        // Use a fractional flow so the bottom-right coefficient is nonzero.
        let mut params2 = params.clone();
        params2.flow = FlowField::uniform(6, 6, 0.25, 0.25).unwrap();
        let inputs2 = WarpInputs::new(&img, &params2, &g).unwrap();
        let wb = 0.25 * 0.25;
        let contrib = grad_image(&inputs2, 2, 2, 2.0).unwrap();
        let nonzero: Vec<_> = contrib.iter().filter(|(_, v)| *v != 0.0).collect();
        assert_eq!(nonzero.len(), 4);
        for (_, v) in nonzero {
            assert_eq!(*v, 0.25 * wb * 2.0);
        }
        assert!(grad_image(&inputs, 2, 2, 2.0).unwrap().iter().all(|(_, v)| *v == 0.0));
    }

    #[test]
    fn flow_gradient_at_integer_position() {
        let g = KernelGeometry::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Plane::from_fn(8, 8, |_, _| rng.gen::<f64>()).unwrap();
        let mut params = WarpParams::identity(&g, 8, 8).unwrap();
        params.flow = FlowField::uniform(8, 8, 1.0, -2.0).unwrap();
        params.kernels = KernelCoeffMap::new(
            FieldMap::from_vec(16, 8, 8, (0..16 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        let inputs = WarpInputs::new(&img, &params, &g).unwrap();
        let (x, y) = (4, 5);
        let up = 0.8;
        let (fx, fy) = grad_flow(&inputs, x, y, up).unwrap();
        // θ = 0: TL points are those with p ≤ 0 on both axes, all sampled at
        // integer positions. ∂w_TL/∂θx = -1, ∂w_TR/∂θx = 1 (TR has weight 0
        // but a nonzero derivative), likewise for y.
        let (bx, by) = (x as i64 + 1, y as i64 - 2);
        let mut ex = 0.0;
        let mut ey = 0.0;
        for (r, &(px, py)) in g.coords().iter().enumerate() {
            let v = params.kernels.coeff(r, x, y) * img.get_clamped(bx + px, by + py);
            match (px > 0, py > 0) {
                (false, false) => {
                    ex -= v;
                    ey -= v;
                }
                (true, false) => ex += v,
                (false, true) => ey += v,
                (true, true) => {}
            }
        }
        assert!((fx - up * ex).abs() < 1e-12);
        assert!((fy - up * ey).abs() < 1e-12);
    }

    #[test]
    fn zero_kernels_give_zero_flow_gradient() {
        let g = KernelGeometry::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Plane::from_fn(6, 6, |_, _| rng.gen::<f64>()).unwrap();
        let mut params = random_params(&mut rng, &g, 6, 6);
        params.kernels = KernelCoeffMap::new(FieldMap::zeros(16, 6, 6).unwrap());
        let inputs = WarpInputs::new(&img, &params, &g).unwrap();
        assert_eq!(grad_flow(&inputs, 1, 2, 1.0).unwrap(), (0.0, 0.0));
    }

    /// The frame-level backward pass must agree with the per-pixel
    /// operations summed over targets and channels.
    #[test]
    fn frame_backward_matches_per_pixel_sums() {
        let g = KernelGeometry::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h, w) = (7, 9);
        let frame = FieldMap::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let upstream = FieldMap::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let params = random_params(&mut rng, &g, h, w);
        let grads = warp_backward(&frame, &params, &g, &upstream).unwrap();

        let mut d_image = FieldMap::<f64>::zeros(3, h, w).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (mut fx, mut fy) = (0.0, 0.0);
                let mut dk = [0.0; 16];
                let mut doff = vec![(0.0, 0.0); 16];
                for c in 0..3 {
                    let inputs = WarpInputs::new(frame.plane(c), &params, &g).unwrap();
                    let up = upstream.plane(c).get(x, y);
                    let (a, b) = grad_flow(&inputs, x, y, up).unwrap();
                    fx += a;
                    fy += b;
                    for (r, v) in grad_kernel(&inputs, x, y, up).unwrap().into_iter().enumerate() {
                        dk[r] += v;
                    }
                    for (r, (a, b)) in grad_offset(&inputs, x, y, up).unwrap().into_iter().enumerate() {
                        doff[r].0 += a;
                        doff[r].1 += b;
                    }
                    for ((ix, iy), v) in grad_image(&inputs, x, y, up).unwrap() {
                        let p = d_image.plane_mut(c);
                        p.set(ix, iy, p.get(ix, iy) + v);
                    }
                }
                assert!((grads.d_flow.at(x, y).0 - fx).abs() < 1e-12);
                assert!((grads.d_flow.at(x, y).1 - fy).abs() < 1e-12);
                for r in 0..16 {
                    assert!((grads.d_kernels.coeff(r, x, y) - dk[r]).abs() < 1e-12);
                    let (a, b) = grads.d_offsets.offset(r, x, y);
                    assert!((a - doff[r].0).abs() < 1e-12 && (b - doff[r].1).abs() < 1e-12);
                }
            }
        }
        for (a, b) in grads.d_image.iter().zip(d_image.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Adjoint identity: <upstream, warp(I)> = <d_image, I> because the warp
    /// is linear in the image.
    #[test]
    fn image_gradient_is_adjoint_of_warp() {
        let g = KernelGeometry::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w) = (6, 6);
        let frame = FieldMap::from_vec(1, h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let upstream = FieldMap::from_vec(1, h, w, (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let params = random_params(&mut rng, &g, h, w);
        let out = warp_frame(&frame, &params, &g).unwrap();
        let grads = warp_backward(&frame, &params, &g, &upstream).unwrap();
        let lhs: f64 = upstream.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = grads.d_image.iter().zip(frame.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let inputs = WarpInputs::new(frame.plane(0), &params, &g).unwrap();
        let direct: f64 = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| upstream.plane(0).get(x, y) * synthesize_pixel(&inputs, x, y).unwrap())
            .sum();
        assert!((direct - lhs).abs() < 1e-12);
    }

    #[test]
    fn upstream_shape_checked() {
        let g = KernelGeometry::standard();
        let frame = FieldMap::<f64>::zeros(3, 4, 4).unwrap();
        let params = WarpParams::identity(&g, 4, 4).unwrap();
        let up = FieldMap::<f64>::zeros(1, 4, 4).unwrap();
        assert!(warp_backward(&frame, &params, &g, &up).unwrap_err().is_dimension_mismatch());
    }
}
