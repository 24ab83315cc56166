//! Forward pass of the deformable kernel-region warp.
//!
//! A target pixel `A = (x, y)` is displaced by its flow to `A' = A + f(A)`.
//! Writing `A' = base + θ` with `base = ⌊A'⌋` and `θ ∈ [0,1)²`, every reference
//! point `p_r` of the kernel region is moved by its learned offset `Δp_r` and
//! sampled bilinearly at
//!
//! ```text
//! q_r = base + p_r + Δp_r
//! ```
//!
//! Each sample is weighted by its kernel coefficient `w_r^k` and by the
//! bilinear coefficient `w_r^b` of the quadrant (TL, TR, BL, BR) that
//! `p_r + Δp_r` falls into relative to `θ`:
//!
//! ```text
//! Î(A) = Σ_r w_r^b · w_r^k · I(q_r)
//! ```
//!
//! The reference points cover a `side × side` block starting one pixel up and
//! left of `base`, so `(0, 0)` is the integer pixel at the top-left of `A'`.
//! Iterating that block from its top-left corner with absolute coordinates
//! and comparing against `A'` gives the same partition as the relative
//! comparison against `θ` used here; the relative form keeps coordinates
//! small.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::scalar::{lit, Scalar};
use crate::tensor::{format_dims, BilinearCorners, FieldMap, PixelCoord, Plane};

/// Side length of the kernel region supported by the public pipeline.
pub const KERNEL_SIDE: usize = 4;

/// Relative coordinates of the reference points of a square kernel region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelGeometry {
    side: usize,
    coords: Vec<(i64, i64)>,
}

impl KernelGeometry {
    /// Region of `side × side` points spanning `-(side/2 - 1) ..= side/2` on
    /// both axes, listed x-major ascending: `(-1,-1), (-1,0), …, (2,2)` for
    /// side 4. Only even sides are meaningful.
    pub fn new(side: usize) -> Result<Self> {
        if side == 0 || !side.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel side must be a positive even number, got {side}"
            )));
        }
        let lo = 1 - (side as i64 / 2);
        let hi = side as i64 / 2;
        let coords = (lo..=hi).flat_map(|px| (lo..=hi).map(move |py| (px, py))).collect();
        Ok(Self { side, coords })
    }

    /// The 4×4 region (16 reference points).
    pub fn standard() -> Self {
        Self::new(KERNEL_SIDE).expect("4 is a valid side")
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of reference points `R = side²`.
    pub fn count(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[(i64, i64)] {
        &self.coords
    }

    /// Index of the reference point with relative coordinate `p`.
    pub fn index_of(&self, p: (i64, i64)) -> Option<usize> {
        self.coords.iter().position(|&c| c == p)
    }
}

/// Per-pixel kernel coefficients, one channel per reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelCoeffMap<T>(FieldMap<T>);

impl<T: Scalar> KernelCoeffMap<T> {
    pub fn new(map: FieldMap<T>) -> Self {
        Self(map)
    }

    /// Coefficient one at reference point `(0,0)`, zero elsewhere.
    pub fn one_hot_origin(geometry: &KernelGeometry, height: usize, width: usize) -> Result<Self> {
        let mut map = FieldMap::zeros(geometry.count(), height, width)?;
        let origin = geometry.index_of((0, 0)).expect("every region contains (0,0)");
        *map.plane_mut(origin) = Plane::filled(height, width, T::one())?;
        Ok(Self(map))
    }

    #[inline]
    pub fn coeff(&self, r: usize, x: usize, y: usize) -> T {
        self.0.plane(r).get(x, y)
    }

    pub fn as_map(&self) -> &FieldMap<T> {
        &self.0
    }

    pub fn as_map_mut(&mut self) -> &mut FieldMap<T> {
        &mut self.0
    }

    pub fn into_map(self) -> FieldMap<T> {
        self.0
    }
}

/// Per-pixel offsets: channels `[0, R)` hold x offsets, `[R, 2R)` y offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField<T>(FieldMap<T>);

impl<T: Scalar> OffsetField<T> {
    pub fn new(map: FieldMap<T>) -> Result<Self> {
        if !map.channels().is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "offset field needs an even channel count, got {}",
                map.channels()
            )));
        }
        Ok(Self(map))
    }

    pub fn zeros(geometry: &KernelGeometry, height: usize, width: usize) -> Result<Self> {
        Self::new(FieldMap::zeros(2 * geometry.count(), height, width)?)
    }

    /// Number of reference points covered.
    pub fn points(&self) -> usize {
        self.0.channels() / 2
    }

    /// Offset `(Δx, Δy)` of reference point `r` at pixel `(x, y)`.
    #[inline]
    pub fn offset(&self, r: usize, x: usize, y: usize) -> (T, T) {
        (self.0.plane(r).get(x, y), self.0.plane(self.points() + r).get(x, y))
    }

    pub fn as_map(&self) -> &FieldMap<T> {
        &self.0
    }

    pub fn as_map_mut(&mut self) -> &mut FieldMap<T> {
        &mut self.0
    }

    pub fn into_map(self) -> FieldMap<T> {
        self.0
    }
}

/// Flow, kernel coefficients and offsets that drive the warp of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpParams<T> {
    pub flow: FlowField<T>,
    pub kernels: KernelCoeffMap<T>,
    pub offsets: OffsetField<T>,
}

impl<T: Scalar> WarpParams<T> {
    /// Zero flow, zero offsets, kernel one-hot at `(0,0)`: reproduces the
    /// reference frame.
    pub fn identity(geometry: &KernelGeometry, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            flow: FlowField::zeros(height, width)?,
            kernels: KernelCoeffMap::one_hot_origin(geometry, height, width)?,
            offsets: OffsetField::zeros(geometry, height, width)?,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.flow.dims()
    }

    /// Checks channel counts against `geometry` and spatial size against
    /// `(height, width)`.
    pub fn validate(&self, geometry: &KernelGeometry, height: usize, width: usize) -> Result<()> {
        let r = geometry.count();
        if self.kernels.as_map().channels() != r {
            return Err(Error::mismatch("kernel channels", r, self.kernels.as_map().channels()));
        }
        if self.offsets.as_map().channels() != 2 * r {
            return Err(Error::mismatch(
                "offset channels",
                2 * r,
                self.offsets.as_map().channels(),
            ));
        }
        let want = format_dims((height, width));
        for (name, dims) in [
            ("flow", self.flow.dims()),
            ("kernels", self.kernels.as_map().dims()),
            ("offsets", self.offsets.as_map().dims()),
        ] {
            if dims != (height, width) {
                return Err(Error::mismatch(format!("{name} size"), &want, format_dims(dims)));
            }
        }
        Ok(())
    }
}

/// One reference plane together with the parameters that warp it.
#[derive(Debug, Clone, Copy)]
pub struct WarpInputs<'a, T> {
    pub reference: &'a Plane<T>,
    pub params: &'a WarpParams<T>,
    pub geometry: &'a KernelGeometry,
}

impl<'a, T: Scalar> WarpInputs<'a, T> {
    pub fn new(
        reference: &'a Plane<T>,
        params: &'a WarpParams<T>,
        geometry: &'a KernelGeometry,
    ) -> Result<Self> {
        params.validate(geometry, reference.height(), reference.width())?;
        Ok(Self {
            reference,
            params,
            geometry,
        })
    }

    pub(crate) fn check_target(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.reference.width() || y >= self.reference.height() {
            return Err(Error::OutOfRange {
                context: "target pixel".into(),
                detail: format!(
                    "({x}, {y}) outside {}",
                    format_dims(self.reference.dims())
                ),
            });
        }
        Ok(())
    }
}

/// Integer base and fractional part of a flow-displaced position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowFraction<T> {
    pub theta_x: T,
    pub theta_y: T,
    pub base_x: i64,
    pub base_y: i64,
}

/// Splits `target + flow` into `⌊·⌋` and the fraction in `[0, 1)`.
pub fn fractional_parts<T: Scalar>(target: (usize, usize), flow: (T, T)) -> FlowFraction<T> {
    let xp = lit::<T>(target.0 as f64) + flow.0;
    let yp = lit::<T>(target.1 as f64) + flow.1;
    let (fx, fy) = (xp.floor(), yp.floor());
    FlowFraction {
        theta_x: clamp_fraction(xp - fx),
        theta_y: clamp_fraction(yp - fy),
        base_x: fx.to_i64().unwrap_or(0),
        base_y: fy.to_i64().unwrap_or(0),
    }
}

// x - floor(x) rounds up to 1 for tiny negative x.
#[inline]
fn clamp_fraction<T: Scalar>(t: T) -> T {
    if t >= T::one() {
        T::one() - T::epsilon()
    } else {
        t
    }
}

/// Quadrant a displaced reference point falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    #[inline]
    fn is_right(self) -> bool {
        matches!(self, Quadrant::TopRight | Quadrant::BottomRight)
    }

    #[inline]
    fn is_bottom(self) -> bool {
        matches!(self, Quadrant::BottomLeft | Quadrant::BottomRight)
    }

    /// Bilinear coefficient of this quadrant for fraction `θ`.
    #[inline]
    pub fn weight<T: Scalar>(self, theta_x: T, theta_y: T) -> T {
        let wx = if self.is_right() { theta_x } else { T::one() - theta_x };
        let wy = if self.is_bottom() { theta_y } else { T::one() - theta_y };
        wx * wy
    }

    /// `(∂w/∂θx, ∂w/∂θy)` of [`Quadrant::weight`].
    #[inline]
    pub fn weight_gradient<T: Scalar>(self, theta_x: T, theta_y: T) -> (T, T) {
        let (wx, dwx) = if self.is_right() {
            (theta_x, T::one())
        } else {
            (T::one() - theta_x, -T::one())
        };
        let (wy, dwy) = if self.is_bottom() {
            (theta_y, T::one())
        } else {
            (T::one() - theta_y, -T::one())
        };
        (dwx * wy, wx * dwy)
    }
}

/// Bilinear coefficients `(TL, TR, BL, BR)` for a fraction in `[0, 1)²`.
pub fn quadrant_weights<T: Scalar>(theta_x: T, theta_y: T) -> Result<[T; 4]> {
    let unit = |t: T| t >= T::zero() && t < T::one();
    if !unit(theta_x) || !unit(theta_y) {
        return Err(Error::OutOfRange {
            context: "quadrant_weights".into(),
            detail: format!("θ = ({theta_x}, {theta_y}) outside [0,1)²"),
        });
    }
    Ok(Quadrant::ALL.map(|q| q.weight(theta_x, theta_y)))
}

/// Assigns `p + Δ` to a quadrant relative to `θ`; ties go left and top.
#[inline]
pub fn classify_quadrant<T: Scalar>(p: (i64, i64), delta: (T, T), theta_x: T, theta_y: T) -> Quadrant {
    let right = lit::<T>(p.0 as f64) + delta.0 > theta_x;
    let bottom = lit::<T>(p.1 as f64) + delta.1 > theta_y;
    match (right, bottom) {
        (false, false) => Quadrant::TopLeft,
        (true, false) => Quadrant::TopRight,
        (false, true) => Quadrant::BottomLeft,
        (true, true) => Quadrant::BottomRight,
    }
}

/// Everything about one reference point of one target pixel that does not
/// depend on the reference image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StencilPoint<T> {
    pub quadrant: Quadrant,
    pub bilinear: T,
    pub kernel: T,
    pub position: PixelCoord<T>,
}

/// Sampling pattern of one target pixel, shared by all color channels.
#[derive(Debug, Clone)]
pub(crate) struct Stencil<T> {
    pub fraction: FlowFraction<T>,
    pub points: Vec<StencilPoint<T>>,
}

impl<T: Scalar> Stencil<T> {
    pub fn build(params: &WarpParams<T>, geometry: &KernelGeometry, x: usize, y: usize) -> Self {
        let fraction = fractional_parts((x, y), params.flow.at(x, y));
        let (tx, ty) = (fraction.theta_x, fraction.theta_y);
        let points = geometry
            .coords()
            .iter()
            .enumerate()
            .map(|(r, &p)| {
                let delta = params.offsets.offset(r, x, y);
                let quadrant = classify_quadrant(p, delta, tx, ty);
                StencilPoint {
                    quadrant,
                    bilinear: quadrant.weight(tx, ty),
                    kernel: params.kernels.coeff(r, x, y),
                    position: PixelCoord::new(
                        lit::<T>((fraction.base_x + p.0) as f64) + delta.0,
                        lit::<T>((fraction.base_y + p.1) as f64) + delta.1,
                    ),
                }
            })
            .collect();
        Self { fraction, points }
    }

    #[inline]
    pub fn apply(&self, reference: &Plane<T>) -> T {
        // Four accumulators, summed TL + TR + BL + BR.
        let mut acc = [T::zero(); 4];
        for pt in &self.points {
            let sample = BilinearCorners::locate(reference, pt.position).sample(reference);
            acc[pt.quadrant.index()] += pt.bilinear * pt.kernel * sample;
        }
        acc[0] + acc[1] + acc[2] + acc[3]
    }
}

/// Synthesizes the warped value of target pixel `(x, y)`.
pub fn synthesize_pixel<T: Scalar>(inputs: &WarpInputs<'_, T>, x: usize, y: usize) -> Result<T> {
    inputs.check_target(x, y)?;
    Ok(Stencil::build(inputs.params, inputs.geometry, x, y).apply(inputs.reference))
}

/// Warps a single plane. Rows are processed in parallel on the current
/// rayon pool; each output value depends only on its own pixel, so the result
/// is identical for any worker count.
pub fn warp_plane<T: Scalar>(inputs: &WarpInputs<'_, T>) -> Result<Plane<T>> {
    let (h, w) = inputs.reference.dims();
    let rows: Vec<Vec<T>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| Stencil::build(inputs.params, inputs.geometry, x, y).apply(inputs.reference))
                .collect()
        })
        .collect();
    Plane::from_vec(h, w, rows.concat())
}

/// Warps every channel of `frame` with the same parameters.
pub fn warp_frame<T: Scalar>(
    frame: &FieldMap<T>,
    params: &WarpParams<T>,
    geometry: &KernelGeometry,
) -> Result<FieldMap<T>> {
    let (h, w) = frame.dims();
    params.validate(geometry, h, w)?;
    let stencils: Vec<Vec<Stencil<T>>> = (0..h)
        .into_par_iter()
        .map(|y| (0..w).map(|x| Stencil::build(params, geometry, x, y)).collect())
        .collect();
    let planes = frame
        .planes()
        .iter()
        .map(|plane| {
            let rows: Vec<Vec<T>> = stencils
                .par_iter()
                .map(|row| row.iter().map(|s| s.apply(plane)).collect())
                .collect();
            Plane::from_vec(h, w, rows.concat())
        })
        .collect::<Result<Vec<_>>>()?;
    FieldMap::new(planes)
}
