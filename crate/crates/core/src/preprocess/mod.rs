//! Frame averaging, quality regulation, defect repair and drift-aware
//! flat-field correction of raw projection stacks.

mod controller;
mod defects;
mod flatfield;
mod quality;

pub use controller::{run_adaptive_acquisition, ControllerLog, DeliveredProjection};
pub use defects::{detect_defects, repair_defects, DefectConfig, DefectMask};
pub use flatfield::{
    estimate_drift_slopes, flat_field_correct, DriftSlopes, ReferenceSet, DENOMINATOR_FLOOR, SLOPE_FLOOR,
};
pub use quality::{
    adapt_num_frames, average_frames, compute_qef, qef_estimator_std, required_initial_frames, Adapted,
    QefPolicy,
};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imgops::Image;
use crate::simulator::{FrameStack, RawReferences};

/// Calibration derived from the raw reference frames.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub mask: DefectMask,
    pub refs: ReferenceSet,
    pub slopes: DriftSlopes,
}

/// Detects defects on the start references, then averages and repairs all
/// reference maps and estimates the drift slopes. With `static_flatfield`
/// the slopes are zero and only the start references matter.
pub fn calibrate(raw: &RawReferences, defects: &DefectConfig, static_flatfield: bool) -> Result<Calibration> {
    defects.validate()?;
    let (dark, _) = average_frames(&raw.dark_start)?;
    let (flat, _) = average_frames(&raw.flat_start)?;
    let mask = detect_defects(&dark, &flat, defects.k_mad)?;
    let refs = ReferenceSet::from_raw(raw, &mask)?;
    let slopes = if static_flatfield {
        DriftSlopes::zero(refs.dim())
    } else {
        estimate_drift_slopes(&refs, SLOPE_FLOOR)?
    };
    Ok(Calibration { mask, refs, slopes })
}

/// Flat-field corrected projections, one per angular position.
#[derive(Debug, Clone, Default)]
pub struct CorrectedStack {
    pub projections: Vec<Image>,
    pub angles_deg: Vec<f64>,
    /// Mean cumulative time of the frames averaged into each projection.
    pub time_s: Vec<f64>,
    pub frames_averaged: Vec<usize>,
    /// Q_ef of the defect-repaired average (NaN for a noise-free band).
    pub qef_measured: Vec<f64>,
    pub fallback_pixels: Vec<usize>,
}

impl CorrectedStack {
    pub fn len(&self) -> usize {
        self.projections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projections.is_empty()
    }

    pub fn dim(&self) -> Option<(usize, usize)> {
        self.projections.first().map(|p| p.dim())
    }
}

/// One corrected projection with its bookkeeping.
#[derive(Debug, Clone)]
pub struct CorrectedProjection {
    pub image: Image,
    pub time_s: f64,
    pub frames_averaged: usize,
    pub qef: f64,
    pub fallback_pixels: usize,
}

/// Average, defect repair, Q_ef on `band`, then the interpolated flat-field
/// at the mean frame time.
pub fn correct_projection(
    frames: &[Image],
    times: &[f64],
    cal: &Calibration,
    band: std::ops::Range<usize>,
) -> Result<CorrectedProjection> {
    if frames.len() != times.len() {
        return Err(Error::Dimension("frame and time counts differ".into()));
    }
    let (avg, _) = average_frames(frames)?;
    let cc = repair_defects(&avg, &cal.mask)?;
    let qef = match compute_qef(&cc, band) {
        Ok(q) => q,
        Err(Error::DegenerateBand) => f64::NAN,
        Err(e) => return Err(e),
    };
    let time_s = times.iter().sum::<f64>() / times.len() as f64;
    let (image, fallback_pixels) = flat_field_correct(&cc, time_s, &cal.refs, &cal.slopes, DENOMINATOR_FLOOR)?;
    Ok(CorrectedProjection {
        image,
        time_s,
        frames_averaged: frames.len(),
        qef,
        fallback_pixels,
    })
}

impl CorrectedStack {
    pub fn push(&mut self, angle_deg: f64, p: CorrectedProjection) {
        self.projections.push(p.image);
        self.angles_deg.push(angle_deg);
        self.time_s.push(p.time_s);
        self.frames_averaged.push(p.frames_averaged);
        self.qef_measured.push(p.qef);
        self.fallback_pixels.push(p.fallback_pixels);
    }
}

/// [`correct_projection`] for every projection group of a stack, in
/// parallel.
pub fn correct_stack(stack: &FrameStack, cal: &Calibration, band: std::ops::Range<usize>) -> Result<CorrectedStack> {
    stack.validate()?;
    if stack.is_empty() {
        return Err(Error::Empty("frame stack has no frames".into()));
    }
    let groups = stack.projection_groups();
    let results: Vec<Result<CorrectedProjection>> = groups
        .par_iter()
        .map(|g| correct_projection(&stack.frames[g.clone()], &stack.cumulative_time_s[g.clone()], cal, band.clone()))
        .collect();
    let mut out = CorrectedStack::default();
    for (g, r) in groups.iter().zip(results) {
        out.push(stack.angle_deg[g.start], r?);
    }
    Ok(out)
}
