//! Reference maps, drift slopes and the time-interpolated flat-field
//! correction
//!
//! `IC = (CC - DF0 (1 + K_D t)) / (FF0 (1 + K_F t) - DF0 (1 + K_D t))`.

use ndarray::Array2;

use super::defects::{repair_defects, repair_with, DefectMask};
use super::quality::average_frames;
use crate::error::{Error, Result};
use crate::imgops::Image;
use crate::simulator::RawReferences;
use crate::stats;

/// Averaged, defect-repaired reference maps at the start and end of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub dark0: Image,
    pub flat0: Image,
    pub dark_end: Image,
    pub flat_end: Image,
    pub t_end_s: f64,
}

impl ReferenceSet {
    pub fn new(dark0: Image, flat0: Image, dark_end: Image, flat_end: Image, t_end_s: f64) -> Result<Self> {
        let r = Self {
            dark0,
            flat0,
            dark_end,
            flat_end,
            t_end_s,
        };
        r.validate()?;
        Ok(r)
    }

    /// Averages the raw reference frames and repairs defects in each map.
    pub fn from_raw(raw: &RawReferences, mask: &DefectMask) -> Result<Self> {
        let avg = |frames: &[Image]| -> Result<Image> {
            let (m, _) = average_frames(frames)?;
            repair_defects(&m, mask)
        };
        Self::new(
            avg(&raw.dark_start)?,
            avg(&raw.flat_start)?,
            avg(&raw.dark_end)?,
            avg(&raw.flat_end)?,
            raw.t_end_s,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dark0.dim();
        if [&self.flat0, &self.dark_end, &self.flat_end]
            .iter()
            .any(|m| m.dim() != dim)
        {
            return Err(Error::Dimension("reference maps differ in shape".into()));
        }
        if !(self.t_end_s > 0.0) {
            return Err(Error::Domain(format!(
                "end-reference time must be > 0 s, got {}",
                self.t_end_s
            )));
        }
        let bad = self
            .flat0
            .iter()
            .zip(self.dark0.iter())
            .filter(|(f, d)| f <= d)
            .count();
        if bad > 0 {
            return Err(Error::Calibration(format!(
                "{bad} pixels have a start flat not above the start dark"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> (usize, usize) {
        self.dark0.dim()
    }
}

/// Per-pixel drift slopes (1/s) with their robust scalar summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftSlopes {
    pub k_dark: Image,
    pub k_flat: Image,
    pub k_dark_summary: f64,
    pub k_flat_summary: f64,
}

impl DriftSlopes {
    /// No drift: the correction reduces to the static flat-field.
    pub fn zero(dim: (usize, usize)) -> Self {
        Self {
            k_dark: Array2::zeros(dim),
            k_flat: Array2::zeros(dim),
            k_dark_summary: 0.0,
            k_flat_summary: 0.0,
        }
    }
}

/// Default floor below which a start reference is too small to divide by.
pub const SLOPE_FLOOR: f64 = 1e-3;

fn slope_map(start: &Image, end: &Image, t_end: f64, floor: f64) -> (Image, f64) {
    let raw = ndarray::Zip::from(start)
        .and(end)
        .map_collect(|&s, &e| if s >= floor { (e / s - 1.0) / t_end } else { f64::NAN });
    let valid: Vec<f64> = raw.iter().copied().filter(|v| v.is_finite()).collect();
    let summary = stats::median(&valid);
    let summary = if summary.is_finite() { summary.max(0.0) } else { 0.0 };
    let map = raw.mapv(|v| if v.is_finite() { v.max(0.0) } else { summary });
    (map, summary)
}

pub fn estimate_drift_slopes(refs: &ReferenceSet, floor: f64) -> Result<DriftSlopes> {
    if !(refs.t_end_s > 0.0) {
        return Err(Error::Domain(format!(
            "end-reference time must be > 0 s, got {}",
            refs.t_end_s
        )));
    }
    let (k_dark, k_dark_summary) = slope_map(&refs.dark0, &refs.dark_end, refs.t_end_s, floor);
    let (k_flat, k_flat_summary) = slope_map(&refs.flat0, &refs.flat_end, refs.t_end_s, floor);
    Ok(DriftSlopes {
        k_dark,
        k_flat,
        k_dark_summary,
        k_flat_summary,
    })
}

/// Default smallest admissible denominator, in raw counts.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

/// Normalized transmission of a defect-repaired projection acquired at
/// cumulative time `t`. Pixels whose denominator falls below `epsilon` are
/// filled from their neighbors; their count is returned alongside.
pub fn flat_field_correct(
    cc: &Image,
    t: f64,
    refs: &ReferenceSet,
    slopes: &DriftSlopes,
    epsilon: f64,
) -> Result<(Image, usize)> {
    let dim = refs.dim();
    if cc.dim() != dim || slopes.k_dark.dim() != dim || slopes.k_flat.dim() != dim {
        return Err(Error::Dimension(format!(
            "projection {:?} does not match references {dim:?}",
            cc.dim()
        )));
    }
    let mut bad = Array2::from_elem(dim, false);
    let mut out = Array2::zeros(dim);
    for (p, o) in out.indexed_iter_mut() {
        let dark = refs.dark0[p] * (1.0 + slopes.k_dark[p] * t);
        let denom = refs.flat0[p] * (1.0 + slopes.k_flat[p] * t) - dark;
        if denom > epsilon {
            *o = (cc[p] - dark) / denom;
        } else {
            bad[p] = true;
        }
    }
    let fallbacks = bad.iter().filter(|&&b| b).count();
    if fallbacks == 0 {
        return Ok((out, 0));
    }
    log::warn!("{fallbacks} pixels fell back to neighbor repair in flat-field correction");
    Ok((repair_with(&out, &bad)?, fallbacks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(d0: f64, f0: f64, de: f64, fe: f64, t: f64) -> ReferenceSet {
        let m = |v: f64| Array2::from_elem((3, 4), v);
        ReferenceSet::new(m(d0), m(f0), m(de), m(fe), t).unwrap()
    }

    #[test]
    fn dark_slope_definition() {
        let r = refs(10.0, 100.0, 12.0, 100.0, 1000.0);
        let s = estimate_drift_slopes(&r, SLOPE_FLOOR).unwrap();
        assert!(s.k_dark.iter().all(|&k| (k - 2e-4).abs() < 1e-15));
        assert!(s.k_flat.iter().all(|&k| k == 0.0));
        assert!((s.k_dark_summary - 2e-4).abs() < 1e-15);
    }

    #[test]
    fn negative_slopes_clamp_and_floor_falls_back() {
        let mut r = refs(10.0, 100.0, 12.0, 90.0, 1000.0);
        r.dark0[[0, 0]] = 0.0;
        r.dark_end[[0, 0]] = 5.0;
        let s = estimate_drift_slopes(&r, SLOPE_FLOOR).unwrap();
        assert!(s.k_flat.iter().all(|&k| k == 0.0));
        assert!((s.k_dark[[0, 0]] - 2e-4).abs() < 1e-15);
        r.t_end_s = 0.0;
        assert!(estimate_drift_slopes(&r, SLOPE_FLOOR).is_err());
    }

    #[test]
    fn worked_example() {
        // K_D t = 0.1, K_F t = 0.05 at t = 100
        let r = refs(10.0, 110.0, 11.0, 115.5, 100.0);
        let s = estimate_drift_slopes(&r, SLOPE_FLOOR).unwrap();
        let cc = Array2::from_elem((3, 4), 60.0);
        let (ic, n) = flat_field_correct(&cc, 100.0, &r, &s, DENOMINATOR_FLOOR).unwrap();
        assert_eq!(n, 0);
        assert!((ic[[1, 1]] - 49.0 / 104.5).abs() < 1e-12);
        // pure dark and pure flat at that time
        let (z, _) = flat_field_correct(&Array2::from_elem((3, 4), 11.0), 100.0, &r, &s, 1e-6).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-12));
        let (o, _) = flat_field_correct(&Array2::from_elem((3, 4), 115.5), 100.0, &r, &s, 1e-6).unwrap();
        assert!(o.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_time_is_static_flat_field() {
        let r = refs(10.0, 110.0, 11.0, 115.5, 100.0);
        let s = estimate_drift_slopes(&r, SLOPE_FLOOR).unwrap();
        let cc = Array2::from_elem((3, 4), 60.0);
        let (ic, _) = flat_field_correct(&cc, 0.0, &r, &s, 1e-6).unwrap();
        assert!((ic[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn low_denominator_falls_back() {
        let r = refs(10.0, 110.0, 10.0, 110.0, 100.0);
        let mut s = estimate_drift_slopes(&r, SLOPE_FLOOR).unwrap();
        // dark catches up with flat at one pixel
        s.k_dark[[1, 1]] = 0.1;
        let cc = Array2::from_elem((3, 4), 60.0);
        let (ic, n) = flat_field_correct(&cc, 100.0, &r, &s, 1e-6).unwrap();
        assert_eq!(n, 1);
        assert!((ic[[1, 1]] - 0.5).abs() < 1e-12);
    }
}
