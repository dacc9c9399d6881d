//! Row-wise band-limited ramp filtering through the FFT.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    RamLak,
    /// Ramp times a raised cosine reaching zero at Nyquist.
    #[default]
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    #[serde(default)]
    pub kind: FilterKind,
    /// FFT length per row; the default is the next power of two at or above
    /// twice the row width, which makes the convolution linear.
    #[serde(default)]
    pub padding: Option<usize>,
}

impl FilterSpec {
    pub fn ram_lak() -> Self {
        Self {
            kind: FilterKind::RamLak,
            padding: None,
        }
    }

    pub fn hann() -> Self {
        Self {
            kind: FilterKind::Hann,
            padding: None,
        }
    }

    pub fn padded_len(&self, width: usize) -> Result<usize> {
        let p = self.padding.unwrap_or_else(|| (2 * width).next_power_of_two());
        if p < width || width == 0 {
            return Err(Error::Config(format!(
                "filter padding {p} is shorter than the row width {width}"
            )));
        }
        Ok(p)
    }
}

/// Spatial band-limited ramp for unit sample spacing:
/// `h(0) = 1/4`, `h(n) = -1/(π² n²)` for odd n, 0 for even n.
pub fn ram_lak_tap(n: i64) -> f64 {
    if n == 0 {
        0.25
    } else if n % 2 == 0 {
        0.0
    } else {
        -1.0 / (PI * PI * (n * n) as f64)
    }
}

/// Precomputed transfer function and FFT plans for one row width.
pub struct RampFilter {
    width: usize,
    len: usize,
    response: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    pub fn new(width: usize, spec: &FilterSpec) -> Result<Self> {
        let len = spec.padded_len(width)?;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        // circularly wrapped kernel, symmetric about index 0
        let mut kernel: Vec<Complex<f64>> = (0..len)
            .map(|k| {
                let n = k.min(len - k) as i64;
                Complex::new(ram_lak_tap(n), 0.0)
            })
            .collect();
        // The truncated kernel sums to a small positive residue. Moving it
        // onto the farthest lag zeroes the DC response; with padding of at
        // least twice the width that lag never reaches a valid output sample.
        let residue: f64 = kernel.iter().map(|c| c.re).sum();
        if len % 2 == 0 {
            kernel[len / 2].re -= residue;
        } else {
            kernel[len / 2].re -= 0.5 * residue;
            kernel[len / 2 + 1].re -= 0.5 * residue;
        }
        forward.process(&mut kernel);
        let mut response: Vec<f64> = kernel.iter().map(|c| c.re).collect();
        if spec.kind == FilterKind::Hann {
            for (k, r) in response.iter_mut().enumerate() {
                let f = k.min(len - k) as f64 / (len as f64 / 2.0);
                *r *= 0.5 * (1.0 + (PI * f).cos());
            }
        }
        Ok(Self {
            width,
            len,
            response,
            forward,
            inverse,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Filters `row` in place, using `buf` as scratch.
    pub fn apply(&self, row: &mut [f64], buf: &mut Vec<Complex<f64>>) {
        debug_assert_eq!(row.len(), self.width);
        buf.clear();
        buf.extend(row.iter().map(|&v| Complex::new(v, 0.0)));
        buf.resize(self.len, Complex::new(0.0, 0.0));
        self.forward.process(buf);
        for (c, &h) in buf.iter_mut().zip(&self.response) {
            *c *= h;
        }
        self.inverse.process(buf);
        let norm = 1.0 / self.len as f64;
        for (r, c) in row.iter_mut().zip(buf.iter()) {
            *r = c.re * norm;
        }
    }

    pub fn apply_image(&self, img: &Image) -> Result<Image> {
        if img.ncols() != self.width {
            return Err(Error::Dimension(format!(
                "row width {} does not match filter width {}",
                img.ncols(),
                self.width
            )));
        }
        let mut out = img.as_standard_layout().to_owned();
        let mut buf = Vec::with_capacity(self.len);
        for mut row in out.rows_mut() {
            let slice = row.as_slice_mut().expect("standard layout");
            self.apply(slice, &mut buf);
        }
        Ok(out)
    }
}

/// Ramp-filters every row of `p` with unit sample spacing.
pub fn ramp_filter(p: &Image, spec: &FilterSpec) -> Result<Image> {
    RampFilter::new(p.ncols(), spec)?.apply_image(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn impulse_gives_ram_lak_taps() {
        let w = 65;
        let mut row = Array2::zeros((1, w));
        row[[0, 32]] = 1.0;
        let out = ramp_filter(&row, &FilterSpec::ram_lak()).unwrap();
        for n in -32..=32i64 {
            let got = out[[0, (32 + n) as usize]];
            assert!((got - ram_lak_tap(n)).abs() < 1e-12, "tap {n}: {got}");
        }
    }

    #[test]
    fn padded_ram_lak_matches_direct_convolution() {
        let w = 37;
        let row = Array2::from_shape_fn((1, w), |(_, c)| ((c * 7919) % 13) as f64 - 4.0 + 0.1 * c as f64);
        let out = ramp_filter(&row, &FilterSpec::ram_lak()).unwrap();
        for i in 0..w {
            let direct: f64 = (0..w).map(|j| row[[0, j]] * ram_lak_tap(i as i64 - j as i64)).sum();
            assert!((out[[0, i]] - direct).abs() < 1e-10, "{i}");
        }
    }

    #[test]
    fn constant_row_is_annihilated_without_padding() {
        let w = 64;
        let row = Array2::from_elem((2, w), 7.5);
        for kind in [FilterKind::RamLak, FilterKind::Hann] {
            let spec = FilterSpec { kind, padding: Some(w) };
            let out = ramp_filter(&row, &spec).unwrap();
            let m = out.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(m < 1e-6 * 7.5, "{kind:?}: {m}");
        }
    }

    #[test]
    fn padding_shorter_than_row_is_rejected() {
        let spec = FilterSpec {
            kind: FilterKind::RamLak,
            padding: Some(10),
        };
        assert!(ramp_filter(&Array2::zeros((1, 16)), &spec).is_err());
    }

    #[test]
    fn hann_response_vanishes_at_nyquist() {
        let f = RampFilter::new(32, &FilterSpec::hann()).unwrap();
        assert!(f.response[f.len / 2].abs() < 1e-12);
        assert!(f.response[1] > 0.0);
    }

    proptest::proptest! {
        #[test]
        fn filter_is_linear(
            x in proptest::collection::vec(-10.0f64..10.0, 24),
            y in proptest::collection::vec(-10.0f64..10.0, 24),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let x = Array2::from_shape_vec((1, 24), x).unwrap();
            let y = Array2::from_shape_vec((1, 24), y).unwrap();
            let spec = FilterSpec::hann();
            let lhs = ramp_filter(&(&x * a + &y * b), &spec).unwrap();
            let rhs = ramp_filter(&x, &spec).unwrap() * a + ramp_filter(&y, &spec).unwrap() * b;
            let d = (&lhs - &rhs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            proptest::prop_assert!(d < 1e-9);
        }
    }
}
