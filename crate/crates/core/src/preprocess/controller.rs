//! Closed-loop frame-count regulation during acquisition.

use super::defects::{repair_defects, DefectMask};
use super::quality::{adapt_num_frames, compute_qef, required_initial_frames, QefPolicy};
use crate::error::{Error, Result};
use crate::imgops::Image;

/// One averaged projection as delivered by the controller.
#[derive(Debug, Clone)]
pub struct DeliveredProjection {
    pub angle_index: usize,
    pub frames: Vec<Image>,
    /// Cumulative irradiation time at the end of each frame.
    pub times: Vec<f64>,
    /// Defect-repaired average of `frames`.
    pub average: Image,
    pub qef: f64,
    pub saturated: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControllerLog {
    pub frames_used: Vec<usize>,
    pub qef: Vec<f64>,
    pub saturated: Vec<bool>,
    /// Irradiation clock after the last frame.
    pub t_end_s: f64,
}

// A constant band has no measurable noise; treat it as arbitrarily good.
fn measure(avg: &Image, policy: &QefPolicy) -> Result<f64> {
    match compute_qef(avg, policy.band_rows.clone()) {
        Ok(q) => Ok(q),
        Err(Error::DegenerateBand) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

struct Accumulator {
    frames: Vec<Image>,
    times: Vec<f64>,
    sum: Option<Image>,
}

impl Accumulator {
    fn push(&mut self, frame: Image, t: f64) {
        match &mut self.sum {
            Some(s) => *s += &frame,
            None => self.sum = Some(frame.clone()),
        }
        self.frames.push(frame);
        self.times.push(t);
    }

    fn average(&self, mask: &DefectMask) -> Result<Image> {
        let sum = self.sum.as_ref().ok_or_else(|| Error::Empty("no frames acquired".into()))?;
        repair_defects(&(sum / self.frames.len() as f64), mask)
    }
}

/// Drives an acquisition of `n_angles` projections with one-second frames.
///
/// `acquire(angle_index, t, frame_index)` returns the raw frame ending at
/// cumulative time `t`. The first frame sets the initial count through the
/// square-root law and is kept as part of the first projection. At every
/// angle the current count is acquired and measured; while the average
/// misses the threshold, the count is raised and topped up. The count never
/// decreases. Each finished projection is handed to `sink`.
pub fn run_adaptive_acquisition<A, S>(
    n_angles: usize,
    policy: &QefPolicy,
    mask: &DefectMask,
    mut acquire: A,
    mut sink: S,
) -> Result<ControllerLog>
where
    A: FnMut(usize, f64, u64) -> Result<Image>,
    S: FnMut(DeliveredProjection) -> Result<()>,
{
    policy.validate()?;
    let mut log = ControllerLog::default();
    if n_angles == 0 {
        return Ok(log);
    }
    let mut clock = 0.0;
    let mut index = 0u64;
    let mut next = |angle: usize, acc: &mut Accumulator| -> Result<()> {
        clock += 1.0;
        let f = acquire(angle, clock, index)?;
        index += 1;
        acc.push(f, clock);
        Ok(())
    };

    let mut first = Accumulator {
        frames: Vec::new(),
        times: Vec::new(),
        sum: None,
    };
    next(0, &mut first)?;
    let q_single = measure(&first.average(mask)?, policy)?;
    let mut n = required_initial_frames(q_single, policy);
    log::info!("single-frame Q_ef {q_single:.2}: starting with {n} frames");

    let mut pending = Some(first);
    for angle in 0..n_angles {
        let mut acc = pending.take().unwrap_or(Accumulator {
            frames: Vec::new(),
            times: Vec::new(),
            sum: None,
        });
        while acc.frames.len() < n {
            next(angle, &mut acc)?;
        }
        let mut avg = acc.average(mask)?;
        let mut q = measure(&avg, policy)?;
        let mut saturated = false;
        while q < policy.threshold {
            let a = adapt_num_frames(q, n, policy);
            if a.saturated {
                saturated = true;
                log::warn!("projection {angle}: Q_ef {q:.2} below threshold at n_max = {n}");
                break;
            }
            n = a.frames;
            while acc.frames.len() < n {
                next(angle, &mut acc)?;
            }
            avg = acc.average(mask)?;
            q = measure(&avg, policy)?;
        }
        log.frames_used.push(acc.frames.len());
        log.qef.push(q);
        log.saturated.push(saturated);
        sink(DeliveredProjection {
            angle_index: angle,
            frames: acc.frames,
            times: acc.times,
            average: avg,
            qef: q,
            saturated,
        })?;
    }
    log.t_end_s = clock;
    Ok(log)
}
