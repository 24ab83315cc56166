use std::fmt;
use std::path::{Path, PathBuf};

use defwarp_core::demo::{run_overfit, synthetic_triple, write_trace, DemoConfig, SyntheticMotion};
use defwarp_core::gradcheck::run_default_audit;
use defwarp_core::warp::KERNEL_SIDE;
use defwarp_core::{
    blend_frames, format_metrics, project_flow, psnr, read_image, read_tensor, ssim, synthetic_flow,
    warp_frame, write_image, write_tensor, AuditConfig, Error, FieldMap, FlowField, FlowPattern,
    FrameTriple, KernelCoeffMap, KernelGeometry, OcclusionMap, OffsetField, WarpParams,
};

use crate::{GradcheckArgs, InterpolateArgs, MetricsArgs, MotionArgs, MotionKind, OverfitArgs, SynthArgs, SynthKind};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Mismatch(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Mismatch(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Mismatch(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Error while reading or checking the input given by `flag`.
fn input_error(flag: &str, path: &Path, e: Error) -> CliError {
    let msg = match e {
        Error::Io { .. } | Error::Image { .. } | Error::UnsupportedImage { .. } => format!("{flag}: {e}"),
        _ => format!("{flag} {}: {e}", path.display()),
    };
    if e.is_dimension_mismatch() {
        CliError::Mismatch(msg)
    } else {
        CliError::Validation(msg)
    }
}

fn runtime_error(e: Error) -> CliError {
    match e {
        Error::DimensionMismatch { .. } => CliError::Mismatch(e.to_string()),
        Error::InvalidArgument(_) => CliError::Validation(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

fn is_tensor_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("dkw"))
}

/// Frame from an 8-bit image or, for `.dkw` paths, a tensor file.
fn load_frame(flag: &str, path: &Path) -> CliResult<FieldMap> {
    let r = if is_tensor_path(path) {
        read_tensor(path)
    } else {
        read_image(path)
    };
    r.map_err(|e| input_error(flag, path, e))
}

fn save_frame(path: &Path, frame: &FieldMap) -> CliResult {
    let r = if is_tensor_path(path) {
        write_tensor(frame, path)
    } else {
        write_image(frame, path)
    };
    r.map_err(runtime_error)
}

/// Tensor with exactly `channels` channels of size `dims`.
fn load_shaped(flag: &str, path: &Path, channels: usize, dims: (usize, usize)) -> CliResult<FieldMap> {
    let map = read_tensor(path).map_err(|e| input_error(flag, path, e))?;
    let want = (channels, dims.0, dims.1);
    if map.shape() != want {
        let (c, h, w) = map.shape();
        return Err(CliError::Mismatch(format!(
            "{flag} {}: expected {}x{}x{} (channels x height x width), found {c}x{h}x{w}",
            path.display(),
            want.0,
            want.1,
            want.2
        )));
    }
    Ok(map)
}

fn load_flow(flag: &str, path: &Path, dims: (usize, usize)) -> CliResult<FlowField> {
    let map = load_shaped(flag, path, 2, dims)?;
    FlowField::new(map).map_err(|e| input_error(flag, path, e))
}

fn expect_same_shape(flag: &str, path: &Path, reference: &FieldMap, other: &FieldMap) -> CliResult {
    if reference.shape() != other.shape() {
        let (c, h, w) = reference.shape();
        let (oc, oh, ow) = other.shape();
        return Err(CliError::Mismatch(format!(
            "{flag} {}: expected {c}x{h}x{w}, found {oc}x{oh}x{ow}",
            path.display()
        )));
    }
    Ok(())
}

fn check_peak(peak: f64) -> CliResult {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(CliError::Validation(format!("--peak must be positive, got {peak}")));
    }
    Ok(())
}

fn flagged<'a>(flag: &'a str, path: &'a Option<PathBuf>) -> Option<(&'a str, &'a Path)> {
    path.as_deref().map(|p| (flag, p))
}

fn side_params(
    geometry: &KernelGeometry,
    dims: (usize, usize),
    flow: FlowField,
    kernels: Option<(&str, &Path)>,
    offsets: Option<(&str, &Path)>,
) -> CliResult<WarpParams> {
    let (h, w) = dims;
    let r = geometry.count();
    let kernels = match kernels {
        Some((flag, path)) => KernelCoeffMap::new(load_shaped(flag, path, r, dims)?),
        None => KernelCoeffMap::one_hot_origin(geometry, h, w).map_err(runtime_error)?,
    };
    let offsets = match offsets {
        Some((flag, path)) => {
            OffsetField::new(load_shaped(flag, path, 2 * r, dims)?).map_err(|e| input_error(flag, path, e))?
        }
        None => OffsetField::zeros(geometry, h, w).map_err(runtime_error)?,
    };
    Ok(WarpParams { flow, kernels, offsets })
}

pub fn interpolate(a: InterpolateArgs, verbose: bool) -> CliResult {
    if a.kernel_size != KERNEL_SIDE {
        return Err(CliError::Validation(format!(
            "--kernel-size must be {KERNEL_SIDE}, got {}",
            a.kernel_size
        )));
    }
    check_peak(a.peak)?;
    let geometry = KernelGeometry::standard();

    let prev = load_frame("--prev", &a.prev)?;
    let next = load_frame("--next", &a.next)?;
    expect_same_shape("--next", &a.next, &prev, &next)?;
    let dims = prev.dims();

    let fwd = load_flow("--flow-fwd", &a.flow_fwd, dims)?;
    let bwd = load_flow("--flow-bwd", &a.flow_bwd, dims)?;
    let (to_prev, to_next) = if a.project_flows {
        let p = project_flow(&fwd, &bwd).map_err(runtime_error)?;
        if verbose {
            eprintln!(
                "projection: to prev {} holes {} collisions, to next {} holes {} collisions",
                p.report_prev.hole_count,
                p.report_prev.collision_count,
                p.report_next.hole_count,
                p.report_next.collision_count
            );
        }
        (p.to_prev, p.to_next)
    } else {
        (bwd, fwd)
    };

    let params_prev = side_params(
        &geometry,
        dims,
        to_prev,
        flagged("--kernels-prev", &a.kernels_prev),
        flagged("--offsets-prev", &a.offsets_prev),
    )?;
    let params_next = side_params(
        &geometry,
        dims,
        to_next,
        flagged("--kernels-next", &a.kernels_next),
        flagged("--offsets-next", &a.offsets_next),
    )?;
    let occ = match &a.occlusion {
        Some(path) => OcclusionMap::from_map(load_shaped("--occlusion", path, 1, dims)?)
            .map_err(|e| input_error("--occlusion", path, e))?,
        None => OcclusionMap::uniform(dims.0, dims.1, a.occlusion_value)
            .map_err(|e| CliError::Validation(format!("--occlusion-value: {e}")))?,
    };
    let gt = match &a.gt {
        Some(path) => {
            let gt = load_frame("--gt", path)?;
            expect_same_shape("--gt", path, &prev, &gt)?;
            Some(gt)
        }
        None => None,
    };

    let warped_prev = warp_frame(&prev, &params_prev, &geometry).map_err(runtime_error)?;
    let warped_next = warp_frame(&next, &params_next, &geometry).map_err(runtime_error)?;
    let out = blend_frames(&warped_prev, &warped_next, &occ).map_err(runtime_error)?;
    let scores = match &gt {
        Some(gt) => Some((
            psnr(&out, gt, a.peak).map_err(runtime_error)?,
            ssim(&out, gt, a.peak).map_err(runtime_error)?,
        )),
        None => None,
    };
    save_frame(&a.out, &out)?;
    if let Some((p, s)) = scores {
        println!("{}", format_metrics(p, s));
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult {
    let cfg = AuditConfig {
        trials: a.trials,
        step: a.step,
        seed: a.seed,
        size: a.size,
        exclusion: a.exclusion,
    };
    cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    let report = run_default_audit(&cfg).map_err(runtime_error)?;
    print!("{report}");
    if !report.passed() {
        return Err(CliError::Runtime("gradient audit failed".into()));
    }
    Ok(())
}

fn synthetic_motion(m: &MotionArgs) -> SyntheticMotion {
    match m.motion {
        MotionKind::Translation => SyntheticMotion::Translation { dx: m.dx, dy: m.dy },
        MotionKind::Rotation => SyntheticMotion::Rotation {
            radians: m.angle.to_radians(),
        },
    }
}

fn check_dims(h: usize, w: usize) -> CliResult {
    if h == 0 || w == 0 {
        return Err(CliError::Validation(format!("frame size must be positive, got {h}x{w}")));
    }
    Ok(())
}

fn load_triple(a: &OverfitArgs) -> CliResult<FrameTriple> {
    let (Some(prev_p), Some(gt_p), Some(next_p), Some(fwd_p), Some(bwd_p)) =
        (&a.prev, &a.gt, &a.next, &a.flow_fwd, &a.flow_bwd)
    else {
        return Err(CliError::Validation(
            "a file triple needs --prev, --gt, --next, --flow-fwd and --flow-bwd".into(),
        ));
    };
    let prev = load_frame("--prev", prev_p)?;
    let gt = load_frame("--gt", gt_p)?;
    expect_same_shape("--gt", gt_p, &prev, &gt)?;
    let next = load_frame("--next", next_p)?;
    expect_same_shape("--next", next_p, &prev, &next)?;
    let dims = prev.dims();
    Ok(FrameTriple {
        flow_to_next: load_flow("--flow-fwd", fwd_p, dims)?,
        flow_to_prev: load_flow("--flow-bwd", bwd_p, dims)?,
        prev,
        gt,
        next,
    })
}

pub fn overfit(a: OverfitArgs, verbose: bool) -> CliResult {
    let cfg = DemoConfig {
        iterations: a.iterations,
        step_size: a.step,
        seed: a.seed,
        log_every: if verbose { a.log_every } else { 0 },
        backtracking: !a.no_backtracking,
        zero_gradients: a.zero_gradients,
        ..DemoConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    let triple = if a.prev.is_some() {
        load_triple(&a)?
    } else {
        check_dims(a.motion.size, a.motion.size)?;
        synthetic_triple(synthetic_motion(&a.motion), a.motion.size, a.motion.size, a.seed)
            .map_err(runtime_error)?
    };
    let res = run_overfit(&triple, &cfg, |e| {
        eprintln!("iter {:>5}  loss {:.6e}  psnr {:.4} dB  step {:.3e}", e.iteration, e.loss, e.psnr, e.step)
    })
    .map_err(runtime_error)?;
    save_frame(&a.out, &res.final_frame)?;
    write_trace(&res.trace, &a.trace).map_err(runtime_error)?;
    println!(
        "loss: {:.6e} -> {:.6e} ({:.2}% of initial)",
        res.initial_loss,
        res.final_loss,
        100.0 * res.final_loss / res.initial_loss
    );
    println!("PSNR: {:.4} dB -> {:.4} dB", res.initial_psnr, res.final_psnr);
    println!("SSIM: {:.4} -> {:.4}", res.initial_ssim, res.final_ssim);
    Ok(())
}

pub fn synth(a: SynthArgs) -> CliResult {
    let h = a.height.unwrap_or(a.motion.size);
    let w = a.width.unwrap_or(a.motion.size);
    check_dims(h, w)?;
    let geometry = KernelGeometry::standard();
    match a.kind {
        SynthKind::Flow => {
            let pattern = match a.motion.motion {
                MotionKind::Translation => FlowPattern::Translation {
                    dx: a.motion.dx,
                    dy: a.motion.dy,
                },
                MotionKind::Rotation => FlowPattern::Rotation {
                    cx: (w as f64 - 1.0) / 2.0,
                    cy: (h as f64 - 1.0) / 2.0,
                    radians: a.motion.angle.to_radians(),
                },
            };
            let flow: FlowField = synthetic_flow(pattern, h, w).map_err(runtime_error)?;
            write_tensor(flow.as_map(), &a.out).map_err(runtime_error)
        }
        SynthKind::Kernels => {
            let k = KernelCoeffMap::one_hot_origin(&geometry, h, w).map_err(runtime_error)?;
            write_tensor(k.as_map(), &a.out).map_err(runtime_error)
        }
        SynthKind::Offsets => {
            let o = OffsetField::zeros(&geometry, h, w).map_err(runtime_error)?;
            write_tensor(o.as_map(), &a.out).map_err(runtime_error)
        }
        SynthKind::Occlusion => {
            let occ = OcclusionMap::uniform(h, w, a.value)
                .map_err(|e| CliError::Validation(format!("--value: {e}")))?;
            write_tensor(&occ.into_map(), &a.out).map_err(runtime_error)
        }
        SynthKind::Triple => {
            let t: FrameTriple = synthetic_triple(synthetic_motion(&a.motion), h, w, a.seed).map_err(runtime_error)?;
            std::fs::create_dir_all(&a.out)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", a.out.display())))?;
            save_frame(&a.out.join("prev.ppm"), &t.prev)?;
            save_frame(&a.out.join("gt.ppm"), &t.gt)?;
            save_frame(&a.out.join("next.ppm"), &t.next)?;
            write_tensor(t.flow_to_next.as_map(), a.out.join("flow_fwd.dkw")).map_err(runtime_error)?;
            write_tensor(t.flow_to_prev.as_map(), a.out.join("flow_bwd.dkw")).map_err(runtime_error)
        }
    }
}

pub fn metrics(a: MetricsArgs) -> CliResult {
    check_peak(a.peak)?;
    let x = load_frame("a", &a.a)?;
    let y = load_frame("b", &a.b)?;
    expect_same_shape("b", &a.b, &x, &y)?;
    let p = psnr(&x, &y, a.peak).map_err(runtime_error)?;
    let s = ssim(&x, &y, a.peak).map_err(runtime_error)?;
    println!("{}", format_metrics(p, s));
    Ok(())
}
