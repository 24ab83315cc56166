//! Direct optimization of per-pixel kernels, offsets and occlusion by
//! gradient descent on the interpolation loss.
//!
//! Flows are inputs and stay fixed. The enhancement stage is the identity, so
//! the enhanced frame in the loss is the blended frame itself. The occlusion
//! map is `sigmoid(logits)`, which keeps it in `[0, 1]` under any update.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blend::{blend_frames, OcclusionMap};
use crate::error::{Error, Result};
use crate::flow::{synthetic_flow, FlowField, FlowPattern};
use crate::grad::warp_backward;
use crate::io::write_atomically;
use crate::loss::{total_loss, LossConfig};
use crate::metrics::{psnr, ssim};
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::{bilinear_sample, FieldMap, PixelCoord, Plane};
use crate::warp::{warp_frame, KernelCoeffMap, KernelGeometry, OffsetField, WarpParams};

#[derive(Debug, Clone)]
pub struct DemoConfig {
    pub iterations: usize,
    /// Step applied to the gradient of the summed loss.
    pub step_size: f64,
    /// Seed for map initialization.
    pub seed: u64,
    /// Progress callback cadence; 0 disables it.
    pub log_every: usize,
    /// Halve the step and reject the update whenever the loss would rise.
    pub backtracking: bool,
    /// Control run: replace every gradient by zero.
    pub zero_gradients: bool,
    pub loss: LossConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            step_size: 1e-3,
            seed: 0,
            log_every: 50,
            backtracking: true,
            zero_gradients: false,
            loss: LossConfig::default(),
        }
    }
}

impl DemoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        self.loss.validate()
    }
}

/// A reference pair, the true middle frame and flows from the middle frame to
/// each reference.
#[derive(Debug, Clone)]
pub struct FrameTriple<T> {
    pub prev: FieldMap<T>,
    pub gt: FieldMap<T>,
    pub next: FieldMap<T>,
    pub flow_to_prev: FlowField<T>,
    pub flow_to_next: FlowField<T>,
}

impl<T: Scalar> FrameTriple<T> {
    pub fn validate(&self) -> Result<()> {
        self.prev.expect_same_shape(&self.gt, "triple gt")?;
        self.prev.expect_same_shape(&self.next, "triple next")?;
        for (name, f) in [("flow to prev", &self.flow_to_prev), ("flow to next", &self.flow_to_next)] {
            if f.dims() != self.prev.dims() {
                return Err(Error::mismatch(
                    name,
                    crate::tensor::format_dims(self.prev.dims()),
                    crate::tensor::format_dims(f.dims()),
                ));
            }
        }
        Ok(())
    }
}

/// Motion between the two reference frames of a synthetic triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticMotion {
    Translation { dx: f64, dy: f64 },
    /// Rotation about the frame center.
    Rotation { radians: f64 },
}

/// Smooth random RGB texture in `[0.05, 0.95]`.
pub fn synthetic_pattern<T: Scalar>(height: usize, width: usize, seed: u64) -> Result<FieldMap<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes = (0..3)
        .map(|_| {
            let waves: Vec<(f64, f64, f64, f64)> = (0..4)
                .map(|_| {
                    let angle = rng.gen_range(0.0..std::f64::consts::PI);
                    let freq = std::f64::consts::TAU / rng.gen_range(6.0..18.0);
                    (freq * angle.cos(), freq * angle.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.5..1.0))
                })
                .collect();
            let norm: f64 = waves.iter().map(|w| w.3).sum();
            Plane::from_fn(height, width, |x, y| {
                let s: f64 = waves
                    .iter()
                    .map(|&(kx, ky, phase, amp)| amp * (kx * x as f64 + ky * y as f64 + phase).sin())
                    .sum();
                lit(0.5 + 0.45 * s / norm)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FieldMap::new(planes)
}

fn resample<T: Scalar>(frame: &FieldMap<T>, map: impl Fn(f64, f64) -> (f64, f64)) -> Result<FieldMap<T>> {
    let (h, w) = frame.dims();
    FieldMap::new(
        frame
            .planes()
            .iter()
            .map(|p| {
                Plane::from_fn(h, w, |x, y| {
                    let (sx, sy) = map(x as f64, y as f64);
                    bilinear_sample(p, PixelCoord::new(lit(sx), lit(sy))).expect("finite coordinate")
                })
            })
            .collect::<Result<_>>()?,
    )
}

/// Synthetic triple: the pattern is the previous frame, the next frame and
/// the middle frame are bilinear resamplings of it at the full and half
/// motion, so the middle frame is exactly reachable from the previous one.
pub fn synthetic_triple<T: Scalar>(
    motion: SyntheticMotion,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<FrameTriple<T>> {
    let prev = synthetic_pattern(height, width, seed)?;
    match motion {
        SyntheticMotion::Translation { dx, dy } => Ok(FrameTriple {
            next: resample(&prev, |x, y| (x - dx, y - dy))?,
            gt: resample(&prev, |x, y| (x - 0.5 * dx, y - 0.5 * dy))?,
            flow_to_prev: synthetic_flow(FlowPattern::Translation { dx: -0.5 * dx, dy: -0.5 * dy }, height, width)?,
            flow_to_next: synthetic_flow(FlowPattern::Translation { dx: 0.5 * dx, dy: 0.5 * dy }, height, width)?,
            prev,
        }),
        SyntheticMotion::Rotation { radians } => {
            let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
            let rotate = move |a: f64| {
                let (s, c) = a.sin_cos();
                move |x: f64, y: f64| (cx + c * (x - cx) - s * (y - cy), cy + s * (x - cx) + c * (y - cy))
            };
            Ok(FrameTriple {
                next: resample(&prev, rotate(-radians))?,
                gt: resample(&prev, rotate(-0.5 * radians))?,
                flow_to_prev: synthetic_flow(FlowPattern::Rotation { cx, cy, radians: -0.5 * radians }, height, width)?,
                flow_to_next: synthetic_flow(FlowPattern::Rotation { cx, cy, radians: 0.5 * radians }, height, width)?,
                prev,
            })
        }
    }
}

/// Per-pixel quantities optimized by the demo.
///
/// Each side is stored as full [`WarpParams`]; its flow is the fixed input
/// flow and is never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableMaps<T> {
    pub prev: WarpParams<T>,
    pub next: WarpParams<T>,
    /// Unconstrained; the occlusion map is their logistic squashing.
    pub occ_logits: Plane<T>,
}

impl<T: Scalar> TrainableMaps<T> {
    pub fn kernels_prev(&self) -> &KernelCoeffMap<T> {
        &self.prev.kernels
    }

    pub fn kernels_next(&self) -> &KernelCoeffMap<T> {
        &self.next.kernels
    }

    pub fn offsets_prev(&self) -> &OffsetField<T> {
        &self.prev.offsets
    }

    pub fn offsets_next(&self) -> &OffsetField<T> {
        &self.next.offsets
    }

    pub fn occlusion(&self) -> Result<OcclusionMap<T>> {
        OcclusionMap::new(self.occ_logits.map(sigmoid)?)
    }

    fn is_finite(&self) -> bool {
        [&self.prev, &self.next]
            .iter()
            .all(|p| p.kernels.as_map().iter().all(|v| v.is_finite()) && p.offsets.as_map().iter().all(|v| v.is_finite()))
            && self.occ_logits.as_slice().iter().all(|v| v.is_finite())
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Identity initialization: kernels one-hot at `(0,0)`, zero offsets,
/// logits zero (occlusion 0.5). Flows start as zero; [`run_overfit`] installs
/// the input flows. The result does not depend on `seed` beyond being
/// reproducible for it.
pub fn init_maps<T: Scalar>(height: usize, width: usize, seed: u64) -> Result<TrainableMaps<T>> {
    let _ = seed;
    let g = KernelGeometry::standard();
    Ok(TrainableMaps {
        prev: WarpParams::identity(&g, height, width)?,
        next: WarpParams::identity(&g, height, width)?,
        occ_logits: Plane::zeros(height, width)?,
    })
}

/// Forward pass of the whole pipeline for a set of maps.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub warped_prev: FieldMap<T>,
    pub warped_next: FieldMap<T>,
    pub occlusion: OcclusionMap<T>,
    pub blended: FieldMap<T>,
    pub loss: T,
}

pub fn evaluate<T: Scalar>(triple: &FrameTriple<T>, maps: &TrainableMaps<T>, loss: &LossConfig) -> Result<Evaluation<T>> {
    let g = KernelGeometry::standard();
    let warped_prev = warp_frame(&triple.prev, &maps.prev, &g)?;
    let warped_next = warp_frame(&triple.next, &maps.next, &g)?;
    let occlusion = maps.occlusion()?;
    let blended = blend_frames(&warped_prev, &warped_next, &occlusion)?;
    let value = total_loss(&warped_prev, &warped_next, &blended, &triple.gt, loss)?.value;
    Ok(Evaluation {
        warped_prev,
        warped_next,
        occlusion,
        blended,
        loss: value,
    })
}

/// Gradient of the loss with respect to every trainable map, in the same
/// layout as the maps.
pub fn gradient<T: Scalar>(
    triple: &FrameTriple<T>,
    maps: &TrainableMaps<T>,
    eval: &Evaluation<T>,
    loss: &LossConfig,
) -> Result<TrainableMaps<T>> {
    let g = KernelGeometry::standard();
    let out = total_loss(&eval.warped_prev, &eval.warped_next, &eval.blended, &triple.gt, loss)?;
    let occ = eval.occlusion.plane();
    let (h, w) = occ.dims();

    // Chain the enhanced-term gradient through the blend.
    let mut d_prev = out.d_prev;
    let mut d_next = out.d_next;
    let mut d_occ = vec![T::zero(); h * w];
    for c in 0..d_prev.channels() {
        let de = out.d_enhanced.plane(c).as_slice();
        let fp = eval.warped_prev.plane(c).as_slice();
        let fnx = eval.warped_next.plane(c).as_slice();
        let dp = d_prev.plane_mut(c).as_mut_slice();
        for i in 0..h * w {
            dp[i] += de[i] * occ.as_slice()[i];
            d_occ[i] += de[i] * (fp[i] - fnx[i]);
        }
        let dn = d_next.plane_mut(c).as_mut_slice();
        for i in 0..h * w {
            dn[i] += de[i] * (T::one() - occ.as_slice()[i]);
        }
    }
    let d_logits = Plane::from_vec(
        h,
        w,
        d_occ
            .iter()
            .zip(occ.as_slice())
            .map(|(&d, &o)| d * o * (T::one() - o))
            .collect(),
    )?;
    let gp = warp_backward(&triple.prev, &maps.prev, &g, &d_prev)?;
    let gn = warp_backward(&triple.next, &maps.next, &g, &d_next)?;
    Ok(TrainableMaps {
        prev: WarpParams {
            flow: FlowField::zeros(h, w)?,
            kernels: gp.d_kernels,
            offsets: gp.d_offsets,
        },
        next: WarpParams {
            flow: FlowField::zeros(h, w)?,
            kernels: gn.d_kernels,
            offsets: gn.d_offsets,
        },
        occ_logits: d_logits,
    })
}

/// `maps - step · grad` on kernels, offsets and logits.
fn step_maps<T: Scalar>(maps: &TrainableMaps<T>, grad: &TrainableMaps<T>, step: T) -> Result<TrainableMaps<T>> {
    let upd = |a: &FieldMap<T>, g: &FieldMap<T>| a.zip_map(g, |v, d| v - step * d);
    let side = |p: &WarpParams<T>, g: &WarpParams<T>| -> Result<WarpParams<T>> {
        Ok(WarpParams {
            flow: p.flow.clone(),
            kernels: KernelCoeffMap::new(upd(p.kernels.as_map(), g.kernels.as_map())?),
            offsets: OffsetField::new(upd(p.offsets.as_map(), g.offsets.as_map())?)?,
        })
    };
    Ok(TrainableMaps {
        prev: side(&maps.prev, &grad.prev)?,
        next: side(&maps.next, &grad.next)?,
        occ_logits: maps.occ_logits.zip_map(&grad.occ_logits, |v, d| v - step * d)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loss: f64,
    pub psnr: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct OverfitResult<T> {
    pub maps: TrainableMaps<T>,
    /// One entry per iteration, after that iteration's update.
    pub trace: Vec<TraceEntry>,
    pub initial_loss: f64,
    pub initial_psnr: f64,
    pub initial_ssim: f64,
    pub final_loss: f64,
    pub final_psnr: f64,
    pub final_ssim: f64,
    pub final_frame: FieldMap<T>,
}

/// Gradient descent from the identity initialization.
///
/// With backtracking, a step that would raise the loss is rejected and the
/// step size halved, so the recorded loss never increases. Without it every
/// step is taken and the run aborts once the loss exceeds ten times its
/// initial value.
pub fn run_overfit<T: Scalar>(
    triple: &FrameTriple<T>,
    cfg: &DemoConfig,
    mut on_log: impl FnMut(&TraceEntry),
) -> Result<OverfitResult<T>> {
    cfg.validate()?;
    triple.validate()?;
    let (h, w) = triple.prev.dims();
    let mut maps = init_maps::<T>(h, w, cfg.seed)?;
    maps.prev.flow = triple.flow_to_prev.clone();
    maps.next.flow = triple.flow_to_next.clone();

    let mut eval = evaluate(triple, &maps, &cfg.loss)?;
    let initial_loss = to_f64(eval.loss);
    let initial_psnr = psnr(&eval.blended, &triple.gt, 1.0)?;
    let initial_ssim = ssim(&eval.blended, &triple.gt, 1.0)?;
    let mut step = cfg.step_size;
    let mut trace = Vec::with_capacity(cfg.iterations);

    for iteration in 1..=cfg.iterations {
        let grad = if cfg.zero_gradients {
            let mut z = gradient(triple, &maps, &eval, &cfg.loss)?;
            for side in [&mut z.prev, &mut z.next] {
                side.kernels = KernelCoeffMap::new(side.kernels.as_map().map(|_| T::zero())?);
                side.offsets = OffsetField::new(side.offsets.as_map().map(|_| T::zero())?)?;
            }
            z.occ_logits = z.occ_logits.map(|_| T::zero())?;
            z
        } else {
            gradient(triple, &maps, &eval, &cfg.loss)?
        };
        let candidate = step_maps(&maps, &grad, lit(step))?;
        let accepted = if candidate.is_finite() {
            let cand_eval = evaluate(triple, &candidate, &cfg.loss)?;
            let cand_loss = to_f64(cand_eval.loss);
            if cfg.backtracking && (cand_loss.is_nan() || cand_loss > to_f64(eval.loss)) {
                step *= 0.5;
                false
            } else {
                maps = candidate;
                eval = cand_eval;
                true
            }
        } else if cfg.backtracking {
            step *= 0.5;
            false
        } else {
            return Err(Error::NonFinite(format!("maps after iteration {iteration}")));
        };
        let loss = to_f64(eval.loss);
        if !cfg.backtracking && accepted && loss > 10.0 * initial_loss {
            return Err(Error::Diverged {
                iteration,
                loss,
                initial: initial_loss,
            });
        }
        let entry = TraceEntry {
            iteration,
            loss,
            psnr: psnr(&eval.blended, &triple.gt, 1.0)?,
            step,
        };
        if cfg.log_every > 0 && (iteration % cfg.log_every == 0 || iteration == cfg.iterations) {
            on_log(&entry);
        }
        trace.push(entry);
    }

    Ok(OverfitResult {
        final_loss: to_f64(eval.loss),
        final_psnr: psnr(&eval.blended, &triple.gt, 1.0)?,
        final_ssim: ssim(&eval.blended, &triple.gt, 1.0)?,
        final_frame: eval.blended,
        maps,
        trace,
        initial_loss,
        initial_psnr,
        initial_ssim,
    })
}

/// `iteration<TAB>loss<TAB>psnr` per line.
pub fn format_trace(trace: &[TraceEntry]) -> String {
    let mut s = String::new();
    for e in trace {
        let _ = writeln!(s, "{}\t{:.12e}\t{:.6}", e.iteration, e.loss, e.psnr);
    }
    s
}

pub fn write_trace(trace: &[TraceEntry], path: impl AsRef<Path>) -> Result<()> {
    let text = format_trace(trace);
    write_atomically(path.as_ref(), |f| std::io::Write::write_all(f, text.as_bytes()))
}
