use std::ops::Range;

use ndarray::Array2;

use super::degradation::{simulate_frame, DegradationModel, Noise};
use super::edge::apply_edge_enhancement;
use super::phantom::Phantom;
use super::projector::{forward_project, ProjectorConfig};
use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, DetectorSpec, ScanConfig};
use crate::imgops::Image;

/// Raw frames in acquisition order with their timing sidecar content.
#[derive(Debug, Clone, Default)]
pub struct FrameStack {
    pub frames: Vec<Image>,
    /// Cumulative irradiation time at the end of each frame.
    pub cumulative_time_s: Vec<f64>,
    pub angle_deg: Vec<f64>,
    /// Number of frames averaged for the projection this frame belongs to.
    pub frames_averaged: Vec<usize>,
    /// Quality factor measured at acquisition time (NaN when not measured).
    pub qef_measured: Vec<f64>,
}

impl FrameStack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| f.dim())
    }

    pub fn push(&mut self, frame: Image, time: f64, angle: f64) {
        self.frames.push(frame);
        self.cumulative_time_s.push(time);
        self.angle_deg.push(angle);
        self.frames_averaged.push(0);
        self.qef_measured.push(f64::NAN);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if [
            self.cumulative_time_s.len(),
            self.angle_deg.len(),
            self.frames_averaged.len(),
            self.qef_measured.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(Error::Dimension("frame stack columns differ in length".into()));
        }
        if let Some(dim) = self.dim() {
            if self.frames.iter().any(|f| f.dim() != dim) {
                return Err(Error::Dimension("frames differ in shape".into()));
            }
        }
        if self.cumulative_time_s.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("cumulative times must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Frame ranges of each projection: maximal runs of equal angle.
    pub fn projection_groups(&self) -> Vec<Range<usize>> {
        let mut groups = Vec::new();
        let mut start = 0;
        for i in 1..=self.angle_deg.len() {
            if i == self.angle_deg.len() || self.angle_deg[i] != self.angle_deg[start] {
                groups.push(start..i);
                start = i;
            }
        }
        groups
    }
}

/// Averaging inputs for the time-interpolated flat-field correction: raw
/// dark and flat frames taken before the scan (t = 0) and after it.
#[derive(Debug, Clone, PartialEq)]
pub struct RawReferences {
    pub dark_start: Vec<Image>,
    pub flat_start: Vec<Image>,
    pub dark_end: Vec<Image>,
    pub flat_end: Vec<Image>,
    pub t_end_s: f64,
}

/// What the simulator knows and the pipeline has to recover.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub model: DegradationModel,
    pub angles_deg: Vec<f64>,
    /// Ideal transmission seen by the detector at each angle.
    pub transmission: Vec<Image>,
}

/// Simulated scanner: geometry, sensor model and noise settings.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub geometry: ConeBeamGeometry,
    pub detector: DetectorSpec,
    pub model: DegradationModel,
    pub projector: ProjectorConfig,
    /// Edge-enhancement strength (pixel^2); zero for pure absorption.
    pub edge_alpha_px2: f64,
    pub noise: bool,
    pub seed: u64,
}

const REFERENCE_STREAM_BASE: u64 = 1 << 48;

impl Simulator {
    pub fn ideal_projections(&self, phantom: &Phantom, angles_deg: &[f64]) -> Result<Vec<Image>> {
        let ideal = forward_project(phantom, &self.geometry, &self.detector, angles_deg, &self.projector)?;
        if self.edge_alpha_px2 > 0.0 {
            ideal
                .iter()
                .map(|t| apply_edge_enhancement(t, self.edge_alpha_px2))
                .collect()
        } else {
            Ok(ideal)
        }
    }

    fn noise(&self, stream: u64) -> Noise {
        if self.noise {
            Noise::Poisson {
                seed: self.seed,
                stream,
            }
        } else {
            Noise::Disabled
        }
    }

    /// Raw frame number `stream` of the scan, exposed behind `ideal` at time `t`.
    pub fn frame(&self, ideal: &Image, t: f64, stream: u64) -> Result<Image> {
        simulate_frame(ideal, &self.model, t, self.noise(stream))
    }

    fn reference_frames(&self, transmission: f64, t: f64, n: usize, tag: u64) -> Result<Vec<Image>> {
        let ideal = Array2::from_elem(self.model.dim(), transmission);
        (0..n)
            .map(|k| {
                let stream = REFERENCE_STREAM_BASE + tag * (1 << 32) + k as u64;
                simulate_frame(&ideal, &self.model, t, self.noise(stream))
            })
            .collect()
    }
}

/// Dark (source off) and flat (no sample) reference frames taken before the
/// scan, at t = 0.
pub fn simulate_start_references(sim: &Simulator, n_frames: usize) -> Result<(Vec<Image>, Vec<Image>)> {
    check_reference_count(n_frames)?;
    Ok((sim.reference_frames(0.0, 0.0, n_frames, 0)?, sim.reference_frames(1.0, 0.0, n_frames, 1)?))
}

/// Dark and flat reference frames taken after the scan, at `t_end_s`.
pub fn simulate_end_references(sim: &Simulator, n_frames: usize, t_end_s: f64) -> Result<(Vec<Image>, Vec<Image>)> {
    check_reference_count(n_frames)?;
    Ok((
        sim.reference_frames(0.0, t_end_s, n_frames, 2)?,
        sim.reference_frames(1.0, t_end_s, n_frames, 3)?,
    ))
}

fn check_reference_count(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("reference frame count must be >= 1".into()));
    }
    Ok(())
}

/// Start and end references together. References are idealized as
/// instantaneous: acquiring them does not advance the irradiation clock.
pub fn simulate_references(sim: &Simulator, n_frames: usize, t_end_s: f64) -> Result<RawReferences> {
    let (dark_start, flat_start) = simulate_start_references(sim, n_frames)?;
    let (dark_end, flat_end) = simulate_end_references(sim, n_frames, t_end_s)?;
    Ok(RawReferences {
        dark_start,
        flat_start,
        dark_end,
        flat_end,
        t_end_s,
    })
}

/// Open-loop acquisition: `schedule[k]` one-second frames at angle k, the
/// irradiation clock advancing 1 s per frame.
pub fn simulate_acquisition(
    sim: &Simulator,
    phantom: &Phantom,
    scan: &ScanConfig,
    schedule: &[usize],
) -> Result<(FrameStack, GroundTruth)> {
    let angles = scan.angles_deg()?;
    if schedule.len() != angles.len() {
        return Err(Error::Config(format!(
            "schedule has {} entries for {} angles",
            schedule.len(),
            angles.len()
        )));
    }
    if schedule.iter().any(|&n| n == 0) {
        return Err(Error::Config("every angle needs at least one frame".into()));
    }
    let ideal = sim.ideal_projections(phantom, &angles)?;
    let mut stack = FrameStack::default();
    let mut clock = 0.0;
    let mut index = 0u64;
    for ((&angle, &n), t_img) in angles.iter().zip(schedule).zip(&ideal) {
        for _ in 0..n {
            clock += 1.0;
            let frame = sim.frame(t_img, clock, index)?;
            stack.push(frame, clock, angle);
            *stack.frames_averaged.last_mut().expect("pushed") = n;
            index += 1;
        }
    }
    let truth = GroundTruth {
        model: sim.model.clone(),
        angles_deg: angles,
        transmission: ideal,
    };
    Ok((stack, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{DegradationParams, PhantomKind};

    fn sim(noise: bool) -> Simulator {
        let detector = DetectorSpec::new(24, 24, 100.0, 1023.0).unwrap();
        Simulator {
            geometry: ConeBeamGeometry::new(750.0, 560.0).unwrap(),
            detector,
            model: DegradationModel::generate(&detector, &DegradationParams::default(), 1).unwrap(),
            projector: ProjectorConfig::default(),
            edge_alpha_px2: 0.0,
            noise,
            seed: 11,
        }
    }

    fn phantom() -> Phantom {
        Phantom::analytic(PhantomKind::UniformSphere, 16, 0.5, 0.3, 0.1).unwrap()
    }

    #[test]
    fn single_frame_timing() {
        let s = sim(false);
        let scan = ScanConfig::full_rotation(360.0).unwrap();
        let (stack, truth) = simulate_acquisition(&s, &phantom(), &scan, &[1]).unwrap();
        assert_eq!(stack.cumulative_time_s, vec![1.0]);
        assert_eq!(truth.transmission.len(), 1);
    }

    #[test]
    fn schedule_bookkeeping() {
        let s = sim(true);
        let scan = ScanConfig::full_rotation(120.0).unwrap();
        let (stack, _) = simulate_acquisition(&s, &phantom(), &scan, &[2, 2, 2]).unwrap();
        assert_eq!(stack.len(), 6);
        assert_eq!(stack.cumulative_time_s, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(stack.projection_groups(), vec![0..2, 2..4, 4..6]);
        stack.validate().unwrap();
        assert!(simulate_acquisition(&s, &phantom(), &scan, &[2, 2]).is_err());
    }

    #[test]
    fn dark_noise_grows_with_irradiation() {
        let mut s = sim(true);
        s.model.k_dark = 1e-3;
        let refs = simulate_references(&s, 1, 3600.0).unwrap();
        let std = |img: &Image| {
            let v: Vec<f64> = img.iter().copied().collect();
            crate::stats::std_dev(&v)
        };
        assert!(std(&refs.dark_end[0]) > std(&refs.dark_start[0]));
    }

    #[test]
    fn acquisition_is_deterministic() {
        let s = sim(true);
        let scan = ScanConfig::full_rotation(90.0).unwrap();
        let (a, _) = simulate_acquisition(&s, &phantom(), &scan, &[1, 2, 1, 1]).unwrap();
        let (b, _) = simulate_acquisition(&s, &phantom(), &scan, &[1, 2, 1, 1]).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.cumulative_time_s, b.cumulative_time_s);
    }
}
