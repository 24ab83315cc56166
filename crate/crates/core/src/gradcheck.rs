//! Central finite-difference audit of the warp gradients.
//!
//! Each trial draws one small random instance, picks a target pixel and
//! compares the analytic gradient of `upstream · Î(A)` with central
//! differences of [`synthesize_pixel`] for every scalar input that can reach
//! that pixel. The warp is piecewise linear in every input, so instances are
//! drawn away from the kinks (quadrant switches, integer crossings of the flow
//! and of the sample positions) and the differences are then exact up to
//! rounding.
//!
//! Errors are measured as `|analytic - numeric| / max(1, |analytic|, |numeric|)`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::grad::{grad_flow, grad_image, grad_kernel, grad_offset};
use crate::tensor::{FieldMap, Plane};
use crate::warp::{synthesize_pixel, KernelCoeffMap, KernelGeometry, OffsetField, WarpInputs, WarpParams};

/// Input families checked by the audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Offsets,
    Kernels,
    Image,
    Flow,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Offsets, Family::Kernels, Family::Image, Family::Flow];

    pub fn name(self) -> &'static str {
        match self {
            Family::Offsets => "offsets",
            Family::Kernels => "kernels",
            Family::Image => "image",
            Family::Flow => "flow",
        }
    }

    /// Pass threshold at the standard step. The map is exactly linear in the
    /// kernel and image inputs, so those get the tighter bound.
    pub fn threshold(self) -> f64 {
        match self {
            Family::Offsets | Family::Flow => 1e-5,
            Family::Kernels | Family::Image => 1e-8,
        }
    }
}

/// Steps above this are flagged as coarse and audited at [`COARSE_THRESHOLD`].
pub const COARSE_STEP: f64 = 1e-3;
pub const COARSE_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct AuditConfig {
    pub trials: usize,
    pub step: f64,
    pub seed: u64,
    /// Side of the square test frames.
    pub size: usize,
    /// Minimum distance of every kink from the evaluation point.
    pub exclusion: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            step: 1e-5,
            seed: 0,
            size: 8,
            exclusion: 1e-2,
        }
    }
}

impl AuditConfig {
    /// Exclusion zone actually applied: wide enough that a `±step` probe
    /// never crosses a kink.
    pub fn effective_exclusion(&self) -> f64 {
        self.exclusion.max(2.0 * self.step)
    }

    pub fn is_coarse(&self) -> bool {
        self.step > COARSE_STEP
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidArgument(format!("step must be positive, got {}", self.step)));
        }
        if self.size < 2 {
            return Err(Error::InvalidArgument("audit frames need side >= 2".into()));
        }
        if self.effective_exclusion() >= 0.25 {
            return Err(Error::InvalidArgument(format!(
                "exclusion zone {} leaves no admissible instances",
                self.effective_exclusion()
            )));
        }
        Ok(())
    }
}

/// One audited configuration: a single-channel frame, its warp parameters, a
/// target pixel and the upstream gradient at that pixel.
#[derive(Debug, Clone)]
pub struct AuditInstance {
    pub image: Plane<f64>,
    pub params: WarpParams<f64>,
    pub target: (usize, usize),
    pub upstream: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyResult {
    pub family: Family,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl FamilyResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub trials: usize,
    pub step: f64,
    pub families: Vec<FamilyResult>,
    pub warning: Option<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.families.iter().all(FamilyResult::passed)
    }

    pub fn family(&self, family: Family) -> &FamilyResult {
        self.families.iter().find(|f| f.family == family).expect("all families audited")
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(w) = &self.warning {
            writeln!(f, "warning: {w}")?;
        }
        for r in &self.families {
            writeln!(
                f,
                "{:<8} trials={} max_rel_error={:.3e} threshold={:.0e} {}",
                r.family.name(),
                self.trials,
                r.max_rel_error,
                r.threshold,
                if r.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Error measure used throughout the audit.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn frac(v: f64) -> f64 {
    v - v.floor()
}

/// Integer part drawn from `-span..=span` plus a fraction kept `margin` away
/// from 0 and 1.
fn value_off_integers(rng: &mut ChaCha8Rng, span: i64, margin: f64) -> f64 {
    rng.gen_range(-span..=span) as f64 + rng.gen_range(margin..1.0 - margin)
}

/// True when no kink of the warp at `target` lies within `margin`.
pub fn is_admissible(inst: &AuditInstance, geometry: &KernelGeometry, margin: f64) -> bool {
    let (x, y) = inst.target;
    let (fx, fy) = inst.params.flow.at(x, y);
    let (tx, ty) = (frac(fx), frac(fy));
    let inner = |t: f64| t >= margin && t <= 1.0 - margin;
    if !inner(tx) || !inner(ty) {
        return false;
    }
    geometry.coords().iter().enumerate().all(|(r, &(px, py))| {
        let (dx, dy) = inst.params.offsets.offset(r, x, y);
        (px as f64 + dx - tx).abs() >= margin
            && (py as f64 + dy - ty).abs() >= margin
            && inner(frac(dx))
            && inner(frac(dy))
    })
}

/// Random instance with all kinks at least `margin` away.
pub fn random_instance(rng: &mut ChaCha8Rng, geometry: &KernelGeometry, size: usize, margin: f64) -> AuditInstance {
    let r = geometry.count();
    let n = size * size;
    let image = Plane::from_vec(size, size, (0..n).map(|_| rng.gen::<f64>()).collect()).expect("valid plane");
    let flow = FieldMap::from_vec(2, size, size, (0..2 * n).map(|_| value_off_integers(rng, 2, margin)).collect())
        .expect("valid flow");
    let kernels = FieldMap::from_vec(r, size, size, (0..r * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("valid kernels");
    let offsets = FieldMap::from_vec(2 * r, size, size, (0..2 * r * n).map(|_| value_off_integers(rng, 1, margin)).collect())
        .expect("valid offsets");
    let target = (rng.gen_range(0..size), rng.gen_range(0..size));
    let mut inst = AuditInstance {
        image,
        params: WarpParams {
            flow: FlowField::new(flow).expect("two channels"),
            kernels: KernelCoeffMap::new(kernels),
            offsets: OffsetField::new(offsets).expect("even channels"),
        },
        target,
        upstream: rng.gen_range(0.5..2.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 },
    };
    // Redraw the target's offsets until no reference point sits near a
    // quadrant boundary.
    let (x, y) = target;
    let (tx, ty) = {
        let (fx, fy) = inst.params.flow.at(x, y);
        (frac(fx), frac(fy))
    };
    for (i, &(px, py)) in geometry.coords().iter().enumerate() {
        loop {
            let (dx, dy) = inst.params.offsets.offset(i, x, y);
            if (px as f64 + dx - tx).abs() >= margin && (py as f64 + dy - ty).abs() >= margin {
                break;
            }
            let map = inst.params.offsets.as_map_mut();
            map.plane_mut(i).set(x, y, value_off_integers(rng, 1, margin));
            map.plane_mut(r + i).set(x, y, value_off_integers(rng, 1, margin));
        }
    }
    debug_assert!(is_admissible(&inst, geometry, margin));
    inst
}

/// Worst relative error per family for one instance.
pub fn audit_instance(inst: &AuditInstance, geometry: &KernelGeometry, step: f64) -> Result<[f64; 4]> {
    let (x, y) = inst.target;
    let up = inst.upstream;
    let eval = |image: &Plane<f64>, params: &WarpParams<f64>| -> Result<f64> {
        Ok(up * synthesize_pixel(&WarpInputs::new(image, params, geometry)?, x, y)?)
    };
    let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * step);
    let inputs = WarpInputs::new(&inst.image, &inst.params, geometry)?;
    let mut worst = [0.0f64; 4];

    // offsets
    let d_off = grad_offset(&inputs, x, y, up)?;
    let r = geometry.count();
    for (i, &(ax, ay)) in d_off.iter().enumerate() {
        for (channel, analytic) in [(i, ax), (r + i, ay)] {
            let mut p = inst.params.clone();
            let base = p.offsets.as_map().plane(channel).get(x, y);
            p.offsets.as_map_mut().plane_mut(channel).set(x, y, base + step);
            let plus = eval(&inst.image, &p)?;
            p.offsets.as_map_mut().plane_mut(channel).set(x, y, base - step);
            let minus = eval(&inst.image, &p)?;
            worst[0] = worst[0].max(relative_error(analytic, central(plus, minus)));
        }
    }

    // kernels
    for (i, analytic) in grad_kernel(&inputs, x, y, up)?.into_iter().enumerate() {
        let mut p = inst.params.clone();
        let base = p.kernels.coeff(i, x, y);
        p.kernels.as_map_mut().plane_mut(i).set(x, y, base + step);
        let plus = eval(&inst.image, &p)?;
        p.kernels.as_map_mut().plane_mut(i).set(x, y, base - step);
        let minus = eval(&inst.image, &p)?;
        worst[1] = worst[1].max(relative_error(analytic, central(plus, minus)));
    }

    // image
    let (h, w) = inst.image.dims();
    let mut d_img = vec![0.0; h * w];
    for ((ix, iy), v) in grad_image(&inputs, x, y, up)? {
        d_img[iy * w + ix] += v;
    }
    let mut img = inst.image.clone();
    for iy in 0..h {
        for ix in 0..w {
            let base = img.get(ix, iy);
            img.set(ix, iy, base + step);
            let plus = eval(&img, &inst.params)?;
            img.set(ix, iy, base - step);
            let minus = eval(&img, &inst.params)?;
            img.set(ix, iy, base);
            worst[2] = worst[2].max(relative_error(d_img[iy * w + ix], central(plus, minus)));
        }
    }

    // flow
    let (gx, gy) = grad_flow(&inputs, x, y, up)?;
    for (channel, analytic) in [(0, gx), (1, gy)] {
        let mut p = inst.params.clone();
        let base = p.flow.as_map().plane(channel).get(x, y);
        p.flow.as_map_mut().plane_mut(channel).set(x, y, base + step);
        let plus = eval(&inst.image, &p)?;
        p.flow.as_map_mut().plane_mut(channel).set(x, y, base - step);
        let minus = eval(&inst.image, &p)?;
        worst[3] = worst[3].max(relative_error(analytic, central(plus, minus)));
    }
    Ok(worst)
}

/// Audits `cfg.trials` instances produced by `generator`.
///
/// Trial `i` draws from its own ChaCha stream seeded by `(cfg.seed, i)`, and
/// the per-family maximum is order independent, so the report is identical
/// for any worker count.
pub fn finite_difference_audit<G>(cfg: &AuditConfig, generator: G) -> Result<AuditReport>
where
    G: Fn(&mut ChaCha8Rng, &KernelGeometry, usize, f64) -> AuditInstance + Sync,
{
    cfg.validate()?;
    let geometry = KernelGeometry::standard();
    let margin = cfg.effective_exclusion();
    let per_trial: Vec<[f64; 4]> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(trial as u64);
            let inst = generator(&mut rng, &geometry, cfg.size, margin);
            audit_instance(&inst, &geometry, cfg.step)
        })
        .collect::<Result<_>>()?;
    let mut worst = [0.0f64; 4];
    for t in &per_trial {
        for (w, v) in worst.iter_mut().zip(t) {
            *w = w.max(*v);
        }
    }
    let coarse = cfg.is_coarse();
    Ok(AuditReport {
        trials: cfg.trials,
        step: cfg.step,
        families: Family::ALL
            .iter()
            .zip(worst)
            .map(|(&family, max_rel_error)| FamilyResult {
                family,
                max_rel_error,
                threshold: if coarse { COARSE_THRESHOLD } else { family.threshold() },
            })
            .collect(),
        warning: coarse.then(|| {
            format!(
                "step {} exceeds {COARSE_STEP:e}; finite differences are coarse, thresholds relaxed to {COARSE_THRESHOLD:e}",
                cfg.step
            )
        }),
    })
}

/// Audit with the built-in random instance generator.
pub fn run_default_audit(cfg: &AuditConfig) -> Result<AuditReport> {
    finite_difference_audit(cfg, random_instance)
}
