//! 2-D sample grids, boundary handling and bilinear sampling.
//!
//! Coordinates follow one convention everywhere in the crate: pixel centers
//! sit at integer coordinates, `x` is the column (growing rightward) and `y`
//! is the row (growing downward). Samples outside the image rectangle are
//! resolved by clamp-to-border, i.e. edge pixels are replicated.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A single-channel grid of samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Plane<T> {
    /// Plane filled with `value`.
    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        check_dims(height, width)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("plane fill value".into()));
        }
        Ok(Self {
            height,
            width,
            data: vec![value; height * width],
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, T::zero())
    }

    /// Wraps row-major samples; rejects wrong lengths and non-finite values.
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::mismatch(
                "plane sample count",
                height * width,
                data.len(),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "plane sample at row {}, column {}",
                i / width,
                i % width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds a plane by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        check_dims(height, width)?;
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::from_vec(height, width, data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the samples. Callers must keep them finite.
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Sample at column `x`, row `y`. Panics when out of bounds.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    /// Sample at signed integer coordinates with clamp-to-border.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> T {
        let (cx, cy) = self.clamp_index(x, y);
        self.data[cy * self.width + cx]
    }

    #[inline]
    pub(crate) fn clamp_index(&self, x: i64, y: i64) -> (usize, usize) {
        (
            x.clamp(0, self.width as i64 - 1) as usize,
            y.clamp(0, self.height as i64 - 1) as usize,
        )
    }

    /// Element-wise map producing a new plane of the same shape.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::from_vec(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Element-wise combination of two planes of identical shape.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_dims(other, "plane zip")?;
        Self::from_vec(
            self.height,
            self.width,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    pub(crate) fn expect_same_dims(&self, other: &Self, context: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::mismatch(
                context,
                format_dims(self.dims()),
                format_dims(other.dims()),
            ));
        }
        Ok(())
    }

    /// Converts every sample to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Result<Plane<U>> {
        let data = self
            .data
            .iter()
            .map(|v| U::from(*v).unwrap_or_else(U::nan))
            .collect();
        Plane::from_vec(self.height, self.width, data)
    }
}

pub(crate) fn format_dims((h, w): (usize, usize)) -> String {
    format!("{h}x{w}")
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "plane dimensions must be positive, got {height}x{width}"
        )));
    }
    Ok(())
}

/// A stack of equally sized planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap<T> {
    planes: Vec<Plane<T>>,
}

impl<T: Scalar> FieldMap<T> {
    pub fn new(planes: Vec<Plane<T>>) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::InvalidArgument("field map needs at least one channel".into()))?;
        for (c, p) in planes.iter().enumerate().skip(1) {
            if p.dims() != first.dims() {
                return Err(Error::mismatch(
                    format!("field map channel {c}"),
                    format_dims(first.dims()),
                    format_dims(p.dims()),
                ));
            }
        }
        Ok(Self { planes })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("field map needs at least one channel".into()));
        }
        let plane = Plane::filled(height, width, value)?;
        Ok(Self {
            planes: vec![plane; channels],
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, T::zero())
    }

    /// Channel-major, then row-major samples.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("field map needs at least one channel".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::mismatch(
                "field map sample count",
                channels * height * width,
                data.len(),
            ));
        }
        let planes = data
            .chunks_exact(height * width)
            .map(|chunk| Plane::from_vec(height, width, chunk.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(planes)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.planes[0].height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.planes[0].width()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.planes[0].dims()
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    #[inline]
    pub fn plane(&self, channel: usize) -> &Plane<T> {
        &self.planes[channel]
    }

    #[inline]
    pub fn plane_mut(&mut self, channel: usize) -> &mut Plane<T> {
        &mut self.planes[channel]
    }

    pub fn planes(&self) -> &[Plane<T>] {
        &self.planes
    }

    pub fn into_planes(self) -> Vec<Plane<T>> {
        self.planes
    }

    /// Iterates all samples channel-major.
    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.planes.iter().flat_map(|p| p.as_slice().iter().copied())
    }

    pub fn map(&self, f: impl Fn(T) -> T + Copy) -> Result<Self> {
        Self::new(self.planes.iter().map(|p| p.map(f)).collect::<Result<_>>()?)
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T + Copy) -> Result<Self> {
        self.expect_same_shape(other, "field map zip")?;
        Self::new(
            self.planes
                .iter()
                .zip(&other.planes)
                .map(|(a, b)| a.zip_map(b, f))
                .collect::<Result<_>>()?,
        )
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, context: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::mismatch(
                context,
                format_shape(self.shape()),
                format_shape(other.shape()),
            ));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Result<FieldMap<U>> {
        FieldMap::new(self.planes.iter().map(|p| p.cast()).collect::<Result<_>>()?)
    }
}

pub(crate) fn format_shape((c, h, w): (usize, usize, usize)) -> String {
    format!("{c}x{h}x{w}")
}

/// Real-valued pixel position (`x` = column, `y` = row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> PixelCoord<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }
}

/// The four integer neighbours of a fractional position and their weights.
///
/// Corner order is top-left, top-right, bottom-left, bottom-right. Indices are
/// already clamped into the plane, so two corners may alias the same pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearCorners<T> {
    /// Clamped (x, y) of TL, TR, BL, BR.
    pub idx: [(usize, usize); 4],
    /// Fractional offsets of the position inside its cell.
    pub frac_x: T,
    pub frac_y: T,
}

impl<T: Scalar> BilinearCorners<T> {
    pub fn locate(plane: &Plane<T>, p: PixelCoord<T>) -> Self {
        let fx = p.x.floor();
        let fy = p.y.floor();
        let x0 = fx.to_i64().unwrap_or(0);
        let y0 = fy.to_i64().unwrap_or(0);
        Self {
            idx: [
                plane.clamp_index(x0, y0),
                plane.clamp_index(x0 + 1, y0),
                plane.clamp_index(x0, y0 + 1),
                plane.clamp_index(x0 + 1, y0 + 1),
            ],
            frac_x: p.x - fx,
            frac_y: p.y - fy,
        }
    }

    /// Interpolation weights of the TL, TR, BL, BR corners.
    #[inline]
    pub fn weights(&self) -> [T; 4] {
        let one = T::one();
        let (a, b) = (self.frac_x, self.frac_y);
        [(one - a) * (one - b), a * (one - b), (one - a) * b, a * b]
    }

    #[inline]
    pub fn values(&self, plane: &Plane<T>) -> [T; 4] {
        self.idx.map(|(x, y)| plane.get(x, y))
    }

    #[inline]
    pub fn sample(&self, plane: &Plane<T>) -> T {
        let w = self.weights();
        let v = self.values(plane);
        w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3]
    }

    /// Partial derivatives of the interpolated value with respect to the
    /// horizontal and vertical sample coordinate.
    ///
    /// Horizontal coefficients are `-(1-λv), (1-λv), -λv, λv` over TL, TR, BL,
    /// BR with `λv` the vertical fraction; the vertical ones swap the axes.
    /// Corners that alias after clamping cancel, giving a zero derivative
    /// along a clamped axis.
    #[inline]
    pub fn gradient(&self, plane: &Plane<T>) -> (T, T) {
        let one = T::one();
        let v = self.values(plane);
        let (lu, lv) = (self.frac_x, self.frac_y);
        // Same sums, grouped as differences so equal corners cancel exactly.
        let du = (one - lv) * (v[1] - v[0]) + lv * (v[3] - v[2]);
        let dv = (one - lu) * (v[2] - v[0]) + lu * (v[3] - v[1]);
        (du, dv)
    }
}

/// Bilinear interpolation of `plane` at `p` with clamp-to-border.
///
/// Returns the sample itself at integer coordinates.
pub fn bilinear_sample<T: Scalar>(plane: &Plane<T>, p: PixelCoord<T>) -> Result<T> {
    if !p.x.is_finite() || !p.y.is_finite() {
        return Err(Error::NonFinite(format!("sample coordinate ({}, {})", p.x, p.y)));
    }
    Ok(BilinearCorners::locate(plane, p).sample(plane))
}
