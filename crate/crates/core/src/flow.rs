//! Flow fields, projection of inter-frame flow onto the middle frame, hole
//! filling and synthetic flow generators.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{format_dims, FieldMap, Plane};

/// Two-channel displacement map in pixels: channel 0 is x, channel 1 is y.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T>(FieldMap<T>);

impl<T: Scalar> FlowField<T> {
    pub fn new(map: FieldMap<T>) -> Result<Self> {
        if map.channels() != 2 {
            return Err(Error::mismatch("flow field channels", 2, map.channels()));
        }
        Ok(Self(map))
    }

    pub fn from_planes(dx: Plane<T>, dy: Plane<T>) -> Result<Self> {
        Self::new(FieldMap::new(vec![dx, dy])?)
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(FieldMap::zeros(2, height, width)?)
    }

    pub fn uniform(height: usize, width: usize, dx: T, dy: T) -> Result<Self> {
        Self::from_planes(Plane::filled(height, width, dx)?, Plane::filled(height, width, dy)?)
    }

    #[inline]
    pub fn dx(&self) -> &Plane<T> {
        self.0.plane(0)
    }

    #[inline]
    pub fn dy(&self) -> &Plane<T> {
        self.0.plane(1)
    }

    /// Displacement at pixel (x, y).
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (T, T) {
        (self.dx().get(x, y), self.dy().get(x, y))
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
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

/// Diagnostics of one projection direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProjectionReport {
    /// Cells that received no candidate before hole filling.
    pub hole_count: usize,
    /// Cells that received two or more candidates.
    pub collision_count: usize,
}

/// Flows anchored at the middle frame.
#[derive(Debug, Clone)]
pub struct ProjectedFlows<T> {
    /// Motion from the middle frame towards the previous frame.
    pub to_prev: FlowField<T>,
    /// Motion from the middle frame towards the next frame.
    pub to_next: FlowField<T>,
    pub report_prev: ProjectionReport,
    pub report_next: ProjectionReport,
}

/// Projects bidirectional flow between the reference frames onto the
/// midpoint.
///
/// Every source pixel `p` of the previous frame with flow `v` votes `-v/2`
/// into the middle-frame cell nearest to `p + v/2` (rounding half away from
/// zero); the next frame votes symmetrically with its own flow. Votes are
/// averaged per cell, cells without votes are filled by [`fill_holes`].
///
/// The source domain is extended past the frame by replicating the border
/// flow, so a frame-wide translation covers the edge cells as well. Votes
/// landing outside the frame are discarded.
pub fn project_flow<T: Scalar>(
    prev_to_next: &FlowField<T>,
    next_to_prev: &FlowField<T>,
) -> Result<ProjectedFlows<T>> {
    if prev_to_next.dims() != next_to_prev.dims() {
        return Err(Error::mismatch(
            "project_flow inputs",
            format_dims(prev_to_next.dims()),
            format_dims(next_to_prev.dims()),
        ));
    }
    let (to_prev, report_prev) = project_one(prev_to_next)?;
    let (to_next, report_next) = project_one(next_to_prev)?;
    Ok(ProjectedFlows {
        to_prev,
        to_next,
        report_prev,
        report_next,
    })
}

fn project_one<T: Scalar>(flow: &FlowField<T>) -> Result<(FlowField<T>, ProjectionReport)> {
    let (h, w) = flow.dims();
    let half = lit::<T>(0.5);
    let margin = border_margin(flow);

    let mut sum_x = vec![T::zero(); h * w];
    let mut sum_y = vec![T::zero(); h * w];
    let mut count = vec![0u32; h * w];

    for sy in -margin..h as i64 + margin {
        for sx in -margin..w as i64 + margin {
            let cx = sx.clamp(0, w as i64 - 1) as usize;
            let cy = sy.clamp(0, h as i64 - 1) as usize;
            let (vx, vy) = flow.at(cx, cy);
            let tx = (lit::<T>(sx as f64) + half * vx).round();
            let ty = (lit::<T>(sy as f64) + half * vy).round();
            let (Some(tx), Some(ty)) = (tx.to_i64(), ty.to_i64()) else {
                continue;
            };
            if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
                continue;
            }
            let i = ty as usize * w + tx as usize;
            sum_x[i] -= half * vx;
            sum_y[i] -= half * vy;
            count[i] += 1;
        }
    }

    let mut report = ProjectionReport::default();
    let mut holes = vec![false; h * w];
    for i in 0..h * w {
        match count[i] {
            0 => {
                holes[i] = true;
                report.hole_count += 1;
            }
            n => {
                if n >= 2 {
                    report.collision_count += 1;
                }
                let n = lit::<T>(n as f64);
                sum_x[i] /= n;
                sum_y[i] /= n;
            }
        }
    }
    let raw = FlowField::from_planes(Plane::from_vec(h, w, sum_x)?, Plane::from_vec(h, w, sum_y)?)?;
    Ok((fill_holes(&raw, &HoleMask::from_vec(h, w, holes)?)?, report))
}

/// How far past the frame a replicated border source can still land inside.
fn border_margin<T: Scalar>(flow: &FlowField<T>) -> i64 {
    let (h, w) = flow.dims();
    let mut max = T::zero();
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                let (vx, vy) = flow.at(x, y);
                max = max.max(vx.abs()).max(vy.abs());
            }
        }
    }
    (lit::<T>(0.5) * max).ceil().to_i64().unwrap_or(0).min(1 << 16) + 1
}

/// Boolean map marking cells whose flow is unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoleMask {
    height: usize,
    width: usize,
    holes: Vec<bool>,
}

impl HoleMask {
    pub fn from_vec(height: usize, width: usize, holes: Vec<bool>) -> Result<Self> {
        if holes.len() != height * width {
            return Err(Error::mismatch("hole mask length", height * width, holes.len()));
        }
        Ok(Self {
            height,
            width,
            holes,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            holes: vec![false; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_hole(&self, x: usize, y: usize) -> bool {
        self.holes[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, hole: bool) {
        self.holes[y * self.width + x] = hole;
    }

    pub fn count(&self) -> usize {
        self.holes.iter().filter(|&&h| h).count()
    }
}

/// Fills masked cells with the mean of their known 8-neighbours.
///
/// Runs in passes: each pass fills every hole that touches at least one known
/// cell, using only values known at the start of the pass, so the result does
/// not depend on scan order. A mask covering the whole field yields zero flow.
pub fn fill_holes<T: Scalar>(flow: &FlowField<T>, mask: &HoleMask) -> Result<FlowField<T>> {
    let (h, w) = flow.dims();
    if mask.dims() != (h, w) {
        return Err(Error::mismatch(
            "fill_holes mask",
            format_dims((h, w)),
            format_dims(mask.dims()),
        ));
    }
    let mut known: Vec<bool> = mask.holes.iter().map(|&hole| !hole).collect();
    if !known.iter().any(|&k| k) {
        return FlowField::zeros(h, w);
    }
    let mut vx = flow.dx().as_slice().to_vec();
    let mut vy = flow.dy().as_slice().to_vec();
    for i in 0..h * w {
        if !known[i] {
            vx[i] = T::zero();
            vy[i] = T::zero();
        }
    }

    let mut remaining = known.iter().filter(|&&k| !k).count();
    while remaining > 0 {
        let mut updates = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if known[y * w + x] {
                    continue;
                }
                let (mut sx, mut sy, mut n) = (T::zero(), T::zero(), 0usize);
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let j = ny * w + nx;
                        if known[j] {
                            sx += vx[j];
                            sy += vy[j];
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    let n = lit::<T>(n as f64);
                    updates.push((y * w + x, sx / n, sy / n));
                }
            }
        }
        // Non-empty while any known cell exists: the field is connected.
        debug_assert!(!updates.is_empty());
        remaining -= updates.len();
        for (i, ux, uy) in updates {
            vx[i] = ux;
            vy[i] = uy;
            known[i] = true;
        }
    }
    FlowField::from_planes(Plane::from_vec(h, w, vx)?, Plane::from_vec(h, w, vy)?)
}

/// Analytic flow patterns used to generate test data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowPattern {
    /// Constant displacement.
    Translation { dx: f64, dy: f64 },
    /// Displacement taking each pixel to its position rotated about
    /// `(cx, cy)` by `radians` (positive turns +x towards +y).
    Rotation { cx: f64, cy: f64, radians: f64 },
}

pub fn synthetic_flow<T: Scalar>(pattern: FlowPattern, height: usize, width: usize) -> Result<FlowField<T>> {
    match pattern {
        FlowPattern::Translation { dx, dy } => {
            if !dx.is_finite() || !dy.is_finite() {
                return Err(Error::NonFinite("translation parameters".into()));
            }
            FlowField::uniform(height, width, lit(dx), lit(dy))
        }
        FlowPattern::Rotation { cx, cy, radians } => {
            if !(cx.is_finite() && cy.is_finite() && radians.is_finite()) {
                return Err(Error::NonFinite("rotation parameters".into()));
            }
            let (s, c) = radians.sin_cos();
            let disp = |x: usize, y: usize| {
                let (rx, ry) = (x as f64 - cx, y as f64 - cy);
                (c * rx - s * ry - rx, s * rx + c * ry - ry)
            };
            FlowField::from_planes(
                Plane::from_fn(height, width, |x, y| lit(disp(x, y).0))?,
                Plane::from_fn(height, width, |x, y| lit(disp(x, y).1))?,
            )
        }
    }
}

/// Mirrors a flow field left-right, negating the x component.
pub fn mirror_horizontal<T: Scalar>(flow: &FlowField<T>) -> Result<FlowField<T>> {
    let (h, w) = flow.dims();
    FlowField::from_planes(
        Plane::from_fn(h, w, |x, y| -flow.dx().get(w - 1 - x, y))?,
        Plane::from_fn(h, w, |x, y| flow.dy().get(w - 1 - x, y))?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_flow_projects_to_zero() {
        let z = FlowField::<f64>::zeros(7, 9).unwrap();
        let p = project_flow(&z, &z).unwrap();
        assert!(p.to_prev.as_map().iter().all(|v| v == 0.0));
        assert!(p.to_next.as_map().iter().all(|v| v == 0.0));
        assert_eq!(p.report_prev, ProjectionReport::default());
        assert_eq!(p.report_next, ProjectionReport::default());
    }

    #[test]
    fn uniform_translation_halves_and_negates() {
        let fwd = FlowField::<f64>::uniform(16, 16, 2.0, 0.0).unwrap();
        let bwd = FlowField::<f64>::uniform(16, 16, -2.0, 0.0).unwrap();
        let p = project_flow(&fwd, &bwd).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(p.to_prev.at(x, y), (-1.0, 0.0));
                assert_eq!(p.to_next.at(x, y), (1.0, 0.0));
            }
        }
        assert_eq!(p.report_prev.hole_count, 0);
        assert_eq!(p.report_next.hole_count, 0);
        assert_eq!(p.report_prev.collision_count, 0);
    }

    /// Candidate lists per cell, enumerated directly for a single moving
    /// pixel: (4,4) moves by (4,0) on a 9x9 grid, everything else is static.
    /// Static pixels vote zero onto themselves, the mover votes (-2,0) onto
    /// (6,4), leaving (4,4) empty and (6,4) with {(-2,0), (0,0)}.
    #[test]
    fn single_moving_pixel() {
        let mut fwd = FlowField::<f64>::zeros(9, 9).unwrap();
        fwd.as_map_mut().plane_mut(0).set(4, 4, 4.0);
        let bwd = FlowField::<f64>::zeros(9, 9).unwrap();
        let p = project_flow(&fwd, &bwd).unwrap();
        assert_eq!(p.report_prev, ProjectionReport { hole_count: 1, collision_count: 1 });
        assert_eq!(p.to_prev.at(6, 4), (-1.0, 0.0));
        assert_eq!(p.to_prev.at(4, 4), (0.0, 0.0));
        for y in 0..9 {
            for x in 0..9 {
                if (x, y) != (6, 4) {
                    assert_eq!(p.to_prev.at(x, y), (0.0, 0.0), "cell ({x},{y})");
                }
            }
        }
        assert_eq!(p.report_next, ProjectionReport::default());
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let a = FlowField::<f64>::zeros(4, 4).unwrap();
        let b = FlowField::<f64>::zeros(4, 5).unwrap();
        assert!(project_flow(&a, &b).unwrap_err().is_dimension_mismatch());
    }

    #[test]
    fn fill_without_holes_is_identity() {
        let f = synthetic_flow::<f64>(FlowPattern::Rotation { cx: 2.0, cy: 3.0, radians: 0.3 }, 5, 6).unwrap();
        assert_eq!(fill_holes(&f, &HoleMask::empty(5, 6)).unwrap(), f);
    }

    #[test]
    fn single_hole_takes_neighbour_mean() {
        let mut f = FlowField::<f64>::uniform(3, 3, 1.0, 0.0).unwrap();
        f.as_map_mut().plane_mut(0).set(1, 1, 55.0);
        let mut mask = HoleMask::empty(3, 3);
        mask.set(1, 1, true);
        let out = fill_holes(&f, &mask).unwrap();
        assert_eq!(out.at(1, 1), (1.0, 0.0));
    }

    #[test]
    fn all_holes_become_zero() {
        let f = FlowField::<f64>::uniform(4, 4, 3.0, -1.0).unwrap();
        let mask = HoleMask::from_vec(4, 4, vec![true; 16]).unwrap();
        let out = fill_holes(&f, &mask).unwrap();
        assert!(out.as_map().iter().all(|v| v == 0.0));
    }

    #[test]
    fn large_hole_fills_outside_in() {
        let f = FlowField::<f64>::uniform(7, 7, 2.0, 1.0).unwrap();
        let mut mask = HoleMask::empty(7, 7);
        for y in 1..6 {
            for x in 1..6 {
                mask.set(x, y, true);
            }
        }
        let out = fill_holes(&f, &mask).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                assert_eq!(out.at(x, y), (2.0, 1.0));
            }
        }
    }

    #[test]
    fn synthetic_generators() {
        let z = synthetic_flow::<f64>(FlowPattern::Translation { dx: 0.0, dy: 0.0 }, 3, 4).unwrap();
        assert!(z.as_map().iter().all(|v| v == 0.0));
        let t = synthetic_flow::<f64>(FlowPattern::Translation { dx: 3.7, dy: -2.2 }, 3, 4).unwrap();
        assert!(t.dx().as_slice().iter().all(|&v| v == 3.7));
        assert!(t.dy().as_slice().iter().all(|&v| v == -2.2));
        let r = synthetic_flow::<f64>(FlowPattern::Rotation { cx: 1.5, cy: 2.0, radians: 0.0 }, 5, 5).unwrap();
        assert!(r.as_map().iter().all(|v| v == 0.0));
        let q = synthetic_flow::<f64>(
            FlowPattern::Rotation { cx: 0.0, cy: 0.0, radians: std::f64::consts::FRAC_PI_2 },
            3,
            3,
        )
        .unwrap();
        // (2,0) rotates to (0,2)
        let (dx, dy) = q.at(2, 0);
        assert!((dx + 2.0).abs() < 1e-12 && (dy - 2.0).abs() < 1e-12);
    }

    fn random_flow(h: usize, w: usize) -> impl Strategy<Value = FlowField<f64>> {
        prop::collection::vec(-3.0f64..3.0, 2 * h * w)
            .prop_map(move |d| FlowField::new(FieldMap::from_vec(2, h, w, d).unwrap()).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projection_is_mirror_equivariant(a in random_flow(6, 7), b in random_flow(6, 7)) {
            let p = project_flow(&a, &b).unwrap();
            let m = project_flow(&mirror_horizontal(&a).unwrap(), &mirror_horizontal(&b).unwrap()).unwrap();
            let expect_prev = mirror_horizontal(&p.to_prev).unwrap();
            let expect_next = mirror_horizontal(&p.to_next).unwrap();
            for (u, v) in m.to_prev.as_map().iter().zip(expect_prev.as_map().iter()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
            for (u, v) in m.to_next.as_map().iter().zip(expect_next.as_map().iter()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
            prop_assert_eq!(p.report_prev, m.report_prev);
            prop_assert_eq!(p.report_next, m.report_next);
        }

        #[test]
        fn projection_output_is_finite_and_counts_bounded(a in random_flow(5, 5), b in random_flow(5, 5)) {
            let p = project_flow(&a, &b).unwrap();
            prop_assert!(p.to_prev.as_map().iter().all(f64::is_finite));
            prop_assert!(p.to_next.as_map().iter().all(f64::is_finite));
            prop_assert!(p.report_prev.hole_count <= 25 && p.report_prev.collision_count <= 25);
        }

        #[test]
        fn filled_field_has_no_unknowns(
            f in random_flow(5, 6),
            holes in prop::collection::vec(any::<bool>(), 30),
        ) {
            let mask = HoleMask::from_vec(5, 6, holes.clone()).unwrap();
            let out = fill_holes(&f, &mask).unwrap();
            prop_assert!(out.as_map().iter().all(f64::is_finite));
            for (i, &hole) in holes.iter().enumerate() {
                if !hole {
                    prop_assert_eq!(out.dx().as_slice()[i], f.dx().as_slice()[i]);
                }
            }
        }
    }
}
