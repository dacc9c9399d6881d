//! Frame averaging and the empirical quality factor Q_ef = mean / std over
//! an unshadowed detector band.

use std::ops::Range;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::Image;

/// Pixelwise mean and unbiased variance. The variance is `None` for a single
/// frame, where it is undefined.
pub fn average_frames(frames: &[Image]) -> Result<(Image, Option<Image>)> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Empty("no frames to average".into()))?;
    let dim = first.dim();
    if let Some(bad) = frames.iter().position(|f| f.dim() != dim) {
        return Err(Error::Dimension(format!(
            "frame {bad} is {:?}, expected {dim:?}",
            frames[bad].dim()
        )));
    }
    let n = frames.len() as f64;
    let mut mean = Array2::zeros(dim);
    for f in frames {
        mean += f;
    }
    mean /= n;
    if frames.len() < 2 {
        return Ok((mean, None));
    }
    let mut var = Array2::zeros(dim);
    for f in frames {
        ndarray::Zip::from(&mut var)
            .and(f)
            .and(&mean)
            .for_each(|v, &x, &m| *v += (x - m) * (x - m));
    }
    var /= n - 1.0;
    Ok((mean, Some(var)))
}

/// Mean over standard deviation (n - 1) of the rows in `band`, full width.
pub fn compute_qef(image: &Image, band: Range<usize>) -> Result<f64> {
    let (rows, cols) = image.dim();
    if band.is_empty() || band.end > rows || cols == 0 {
        return Err(Error::Domain(format!(
            "Q_ef band {band:?} is empty or outside a {rows}-row image"
        )));
    }
    let view = image.slice(s![band, ..]);
    let n = view.len() as f64;
    let mean = view.sum() / n;
    let ss: f64 = view.iter().map(|v| (v - mean) * (v - mean)).sum();
    if n < 2.0 || ss == 0.0 {
        return Err(Error::DegenerateBand);
    }
    Ok(mean / (ss / (n - 1.0)).sqrt())
}

/// Approximate sampling standard deviation of the Q_ef estimator for a band
/// of `n_pixels` roughly Gaussian values with true quality `q`.
pub fn qef_estimator_std(q: f64, n_pixels: usize) -> f64 {
    let n = n_pixels as f64;
    q * (1.0 / (2.0 * (n - 1.0)) + 1.0 / (n * q * q)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QefPolicy {
    pub threshold: f64,
    #[serde(default = "default_band")]
    pub band_rows: Range<usize>,
    #[serde(default = "default_n_min")]
    pub n_min: usize,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_growth")]
    pub growth_step: f64,
}

fn default_band() -> Range<usize> {
    0..50
}
fn default_n_min() -> usize {
    1
}
fn default_n_max() -> usize {
    64
}
fn default_growth() -> f64 {
    1.1
}

impl QefPolicy {
    pub fn new(threshold: f64) -> Result<Self> {
        let p = Self {
            threshold,
            band_rows: default_band(),
            n_min: default_n_min(),
            n_max: default_n_max(),
            growth_step: default_growth(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::Config(format!("Q_ef threshold must be > 0, got {}", self.threshold)));
        }
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(Error::Config(format!(
                "frame bounds need 1 <= n_min <= n_max, got {}..{}",
                self.n_min, self.n_max
            )));
        }
        if !(self.growth_step >= 1.0) {
            return Err(Error::Config(format!("growth_step must be >= 1, got {}", self.growth_step)));
        }
        if self.band_rows.is_empty() {
            return Err(Error::Config("Q_ef band is empty".into()));
        }
        Ok(())
    }
}

// ceil() of a ratio that should be an exact integer must not round up on
// floating-point noise
fn ceil_tolerant(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Frames needed for the threshold given the single-frame quality, from the
/// square-root law, clamped to the policy bounds.
pub fn required_initial_frames(q_single: f64, policy: &QefPolicy) -> usize {
    let ratio = policy.threshold / q_single;
    ceil_tolerant(ratio * ratio).clamp(policy.n_min, policy.n_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Adapted {
    pub frames: usize,
    /// The threshold is missed and the count is already at `n_max`.
    pub saturated: bool,
}

/// Monotone controller update: never lowers the frame count.
pub fn adapt_num_frames(measured_qef: f64, current_n: usize, policy: &QefPolicy) -> Adapted {
    if measured_qef >= policy.threshold {
        return Adapted {
            frames: current_n,
            saturated: false,
        };
    }
    if current_n >= policy.n_max {
        return Adapted {
            frames: current_n,
            saturated: true,
        };
    }
    let ratio = policy.threshold / measured_qef;
    let factor = policy.growth_step.max(ratio * ratio);
    let n = ceil_tolerant(current_n as f64 * factor)
        .max(current_n + 1)
        .min(policy.n_max);
    Adapted {
        frames: n,
        saturated: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_frame_average() {
        let a = Array2::from_elem((2, 2), 10.0);
        let b = Array2::from_elem((2, 2), 20.0);
        let (m, v) = average_frames(&[a.clone(), b]).unwrap();
        assert_eq!(m[[0, 0]], 15.0);
        assert_eq!(v.unwrap()[[1, 1]], 50.0);
        let (m1, v1) = average_frames(&[a.clone()]).unwrap();
        assert_eq!(m1, a);
        assert!(v1.is_none());
        assert!(matches!(average_frames(&[]), Err(Error::Empty(_))));
        assert!(average_frames(&[a, Array2::zeros((2, 3))]).is_err());
    }

    #[test]
    fn qef_basic() {
        // mean 100, sample std 10 over two values: 100 +- 10/sqrt(2)
        let d = 10.0 / 2f64.sqrt();
        let img = Array2::from_shape_vec((1, 2), vec![100.0 - d, 100.0 + d]).unwrap();
        assert!((compute_qef(&img, 0..1).unwrap() - 10.0).abs() < 1e-12);
        let flat = Array2::from_elem((4, 4), 3.0);
        assert!(matches!(compute_qef(&flat, 0..2), Err(Error::DegenerateBand)));
        assert!(compute_qef(&flat, 2..6).is_err());
    }

    #[test]
    fn initial_frames() {
        let mut p = QefPolicy::new(30.0).unwrap();
        assert_eq!(required_initial_frames(30.0, &p), 1);
        assert_eq!(required_initial_frames(10.0, &p), 9);
        p.threshold = 50.0;
        assert_eq!(required_initial_frames(5.0, &p), 64);
    }

    #[test]
    fn adapt() {
        let mut p = QefPolicy::new(40.0).unwrap();
        assert_eq!(adapt_num_frames(41.0, 16, &p).frames, 16);
        assert_eq!(adapt_num_frames(0.8 * 40.0, 16, &p).frames, 25);
        p.n_max = 16;
        let a = adapt_num_frames(10.0, 16, &p);
        assert_eq!(a, Adapted { frames: 16, saturated: true });
    }

    #[test]
    fn policy_validation() {
        assert!(QefPolicy::new(0.0).is_err());
        let mut p = QefPolicy::new(1.0).unwrap();
        p.n_min = 5;
        p.n_max = 4;
        assert!(p.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn qef_scale_invariant(vals in proptest::collection::vec(1.0f64..100.0, 8..40), k in 0.01f64..100.0) {
            let n = vals.len();
            let img = Array2::from_shape_vec((1, n), vals).unwrap();
            if let Ok(q) = compute_qef(&img, 0..1) {
                let q2 = compute_qef(&(&img * k), 0..1).unwrap();
                proptest::prop_assert!((q - q2).abs() <= 1e-9 * q.abs());
            }
        }

        #[test]
        fn controller_never_decreases(q in 0.1f64..200.0, n in 1usize..64) {
            let p = QefPolicy::new(40.0).unwrap();
            let a = adapt_num_frames(q, n, &p);
            proptest::prop_assert!(a.frames >= n && a.frames <= p.n_max);
        }
    }
}
