use std::collections::HashSet;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DetectorSpec;
use crate::imgops::Image;

/// Fraction of the ceiling that hot pixels sit at.
pub const HOT_PIXEL_LEVEL: f64 = 0.97;

/// Knobs used to draw a [`DegradationModel`]. Magnitudes are order-of-magnitude
/// choices for a 1 s exposure, not calibrated sensor values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationParams {
    /// Mean dark level at t = 0 (counts).
    pub dark_level: f64,
    /// Relative pixel-to-pixel spread of the dark level.
    pub dark_nonuniformity: f64,
    /// Mean dark-subtracted flat response at t = 0 (counts).
    pub flat_level: f64,
    pub flat_nonuniformity: f64,
    pub gain_nonuniformity: f64,
    /// Relative dark-level growth per second of irradiation.
    pub k_dark_per_s: f64,
    /// Relative flat-response growth per second of irradiation.
    pub k_flat_per_s: f64,
    pub hot_pixels: usize,
    pub dead_pixels: usize,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            dark_level: 20.0,
            dark_nonuniformity: 0.1,
            flat_level: 200.0,
            flat_nonuniformity: 0.005,
            gain_nonuniformity: 0.005,
            k_dark_per_s: 1.5e-4,
            k_flat_per_s: 1.0e-5,
            hot_pixels: 0,
            dead_pixels: 0,
        }
    }
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("dark_level", self.dark_level),
            ("dark_nonuniformity", self.dark_nonuniformity),
            ("flat_nonuniformity", self.flat_nonuniformity),
            ("gain_nonuniformity", self.gain_nonuniformity),
            ("k_dark_per_s", self.k_dark_per_s),
            ("k_flat_per_s", self.k_flat_per_s),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.flat_level > 0.0) {
            return Err(Error::Config(format!(
                "flat_level must be positive, got {}",
                self.flat_level
            )));
        }
        // spreads are clipped at 4 sigma; keep the maps positive
        for (name, v) in [
            ("dark_nonuniformity", self.dark_nonuniformity),
            ("flat_nonuniformity", self.flat_nonuniformity),
            ("gain_nonuniformity", self.gain_nonuniformity),
        ] {
            if 4.0 * v >= 1.0 {
                return Err(Error::Config(format!("{name} must be < 0.25, got {v}")));
            }
        }
        Ok(())
    }
}

/// Ground-truth aging model of the sensor. The expected raw value of pixel p
/// at cumulative irradiation time t behind transmission T is
///
/// `DF0(p) (1 + K_D t) + gain(p) (FF0(p) - DF0(p)) (1 + K_F t) T(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationModel {
    pub dark0: Image,
    pub flat0: Image,
    pub gain: Image,
    pub k_dark: f64,
    pub k_flat: f64,
    pub hot_pixels: Vec<(usize, usize)>,
    pub dead_pixels: Vec<(usize, usize)>,
    pub mean_flat_photon_level: f64,
    pub ceiling: f64,
}

fn clipped_map(rows: usize, cols: usize, mean: f64, rel_sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    if rel_sigma == 0.0 {
        return Array2::from_elem((rows, cols), mean);
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = normal.sample(rng);
        mean * (1.0 + rel_sigma * z.clamp(-4.0, 4.0))
    })
}

impl DegradationModel {
    /// Draws the per-pixel maps and defect sites for a detector.
    pub fn generate(det: &DetectorSpec, params: &DegradationParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let (rows, cols) = (det.rows, det.cols);
        let n_defects = params.hot_pixels + params.dead_pixels;
        if 2 * n_defects >= rows * cols {
            return Err(Error::Config(format!(
                "{n_defects} defects requested for a {rows}x{cols} detector"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dark0 = clipped_map(rows, cols, params.dark_level, params.dark_nonuniformity, &mut rng);
        let response = clipped_map(rows, cols, params.flat_level, params.flat_nonuniformity, &mut rng);
        let flat0 = &dark0 + &response;
        let gain = clipped_map(rows, cols, 1.0, params.gain_nonuniformity, &mut rng);

        let mut taken = HashSet::new();
        let mut pick = |count: usize, rng: &mut ChaCha8Rng| {
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                let p = (rng.random_range(0..rows), rng.random_range(0..cols));
                if taken.insert(p) {
                    out.push(p);
                }
            }
            out
        };
        let hot_pixels = pick(params.hot_pixels, &mut rng);
        let dead_pixels = pick(params.dead_pixels, &mut rng);

        let model = Self {
            dark0,
            flat0,
            gain,
            k_dark: params.k_dark_per_s,
            k_flat: params.k_flat_per_s,
            hot_pixels,
            dead_pixels,
            mean_flat_photon_level: params.flat_level,
            ceiling: det.max_value,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dark0.dim();
        if self.flat0.dim() != dim || self.gain.dim() != dim {
            return Err(Error::Dimension("degradation maps differ in shape".into()));
        }
        if self.flat0.iter().zip(self.dark0.iter()).any(|(f, d)| f <= d) {
            return Err(Error::Config("flat map must exceed dark map at every pixel".into()));
        }
        if !(self.k_dark >= 0.0 && self.k_flat >= 0.0) {
            return Err(Error::Config("drift slopes must be >= 0".into()));
        }
        let hot: HashSet<_> = self.hot_pixels.iter().collect();
        if self.dead_pixels.iter().any(|p| hot.contains(p)) {
            return Err(Error::Config("hot and dead pixel sets overlap".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> (usize, usize) {
        self.dark0.dim()
    }

    /// Dark level at time t.
    pub fn dark_at(&self, t: f64) -> Image {
        &self.dark0 * (1.0 + self.k_dark * t)
    }

    /// Raw flat frame (source on, no sample) at time t.
    pub fn flat_at(&self, t: f64) -> Image {
        let ones = Array2::from_elem(self.dim(), 1.0);
        self.expected_signal(&ones, t)
    }

    /// Noise-free raw value, before defects and clipping.
    pub fn expected_signal(&self, transmission: &Image, t: f64) -> Image {
        let dk = 1.0 + self.k_dark * t;
        let fk = 1.0 + self.k_flat * t;
        let mut out = Array2::zeros(self.dim());
        ndarray::Zip::from(&mut out)
            .and(&self.dark0)
            .and(&self.flat0)
            .and(&self.gain)
            .and(transmission)
            .for_each(|o, &d, &f, &g, &tr| *o = d * dk + g * (f - d) * fk * tr);
        out
    }

    /// Per-pixel relative drift of the raw flat frame. The raw flat includes
    /// the dark level, so its slope mixes K_D and K_F; this is what a
    /// start/end reference pair measures.
    pub fn raw_flat_slope(&self) -> Image {
        let mut out = Array2::zeros(self.dim());
        ndarray::Zip::from(&mut out)
            .and(&self.dark0)
            .and(&self.flat0)
            .and(&self.gain)
            .for_each(|o, &d, &f, &g| {
                let resp = g * (f - d);
                *o = (d * self.k_dark + resp * self.k_flat) / (d + resp);
            });
        out
    }

    pub fn defect_mask(&self) -> Array2<bool> {
        let mut m = Array2::from_elem(self.dim(), false);
        for &p in self.hot_pixels.iter().chain(&self.dead_pixels) {
            m[p] = true;
        }
        m
    }
}

/// Noise source for [`simulate_frame`]. The seed selects the experiment and
/// the stream selects the frame within it, so frames can be generated in any
/// order or in parallel and still reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    Disabled,
    Poisson { seed: u64, stream: u64 },
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn row_rng(seed: u64, stream: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(stream)));
    rng.set_stream(row as u64);
    rng
}

#[inline]
fn poisson(lambda: f64, rng: &mut ChaCha8Rng) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    match Poisson::new(lambda) {
        Ok(d) => d.sample(rng),
        Err(_) => lambda.round(),
    }
}

/// One raw 1 s frame behind `ideal` transmission at cumulative irradiation
/// time `t`. Dark and photon counts are independent Poisson variables, so
/// the pixel value is drawn from a single Poisson of their summed mean.
pub fn simulate_frame(ideal: &Image, model: &DegradationModel, t: f64, noise: Noise) -> Result<Image> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("irradiation time must be >= 0, got {t}")));
    }
    if ideal.dim() != model.dim() {
        return Err(Error::Dimension(format!(
            "transmission {:?} vs detector {:?}",
            ideal.dim(),
            model.dim()
        )));
    }
    let mut frame = model.expected_signal(ideal, t);
    let ceiling = model.ceiling;
    let hot = HOT_PIXEL_LEVEL * ceiling;
    match noise {
        Noise::Disabled => {
            for &p in &model.hot_pixels {
                frame[p] = hot;
            }
            for &p in &model.dead_pixels {
                frame[p] = 0.0;
            }
        }
        Noise::Poisson { seed, stream } => {
            frame
                .axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(r, mut row)| {
                    let mut rng = row_rng(seed, stream, r);
                    for v in row.iter_mut() {
                        *v = poisson(*v, &mut rng);
                    }
                });
            let mut rng = row_rng(seed, stream, usize::MAX >> 1);
            for &p in &model.hot_pixels {
                frame[p] = hot + poisson(model.dark0[p], &mut rng);
            }
            for &p in &model.dead_pixels {
                frame[p] = poisson(0.5, &mut rng);
            }
        }
    }
    frame.mapv_inplace(|v| v.clamp(0.0, ceiling));
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(hot: usize, dead: usize) -> DegradationModel {
        let det = DetectorSpec::new(16, 20, 5.2, 1023.0).unwrap();
        let params = DegradationParams {
            hot_pixels: hot,
            dead_pixels: dead,
            ..Default::default()
        };
        DegradationModel::generate(&det, &params, 7).unwrap()
    }

    #[test]
    fn flat_and_dark_at_origin() {
        let m = model(0, 0);
        let ones = Array2::from_elem(m.dim(), 1.0);
        let f = simulate_frame(&ones, &m, 0.0, Noise::Disabled).unwrap();
        let expected = &m.dark0 + &(&m.gain * &(&m.flat0 - &m.dark0));
        assert!((&f - &expected).iter().all(|d| d.abs() < 1e-12));
        let zeros = Array2::zeros(m.dim());
        let d = simulate_frame(&zeros, &m, 0.0, Noise::Disabled).unwrap();
        assert!((&d - &m.dark0).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn dark_contribution_doubles_when_kd_t_is_one() {
        let m = model(0, 0);
        let ones = Array2::from_elem(m.dim(), 1.0);
        let t = 1.0 / m.k_dark;
        let f0 = simulate_frame(&ones, &m, 0.0, Noise::Disabled).unwrap();
        let f1 = simulate_frame(&ones, &m, t, Noise::Disabled).unwrap();
        let flat_part0 = &f0 - &m.dark0;
        let flat_part1 = &flat_part0 * (1.0 + m.k_flat * t);
        let dark1 = &f1 - &flat_part1;
        for (a, b) in dark1.iter().zip(m.dark0.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_is_linear_in_time() {
        let m = model(0, 0);
        let tr = Array2::from_shape_fn(m.dim(), |(r, c)| 0.2 + 0.03 * ((r + c) % 10) as f64);
        let a = simulate_frame(&tr, &m, 100.0, Noise::Disabled).unwrap();
        let b = simulate_frame(&tr, &m, 300.0, Noise::Disabled).unwrap();
        let c = simulate_frame(&tr, &m, 500.0, Noise::Disabled).unwrap();
        let mid = (&a + &c) * 0.5;
        assert!((&mid - &b).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn defects_are_pinned() {
        let m = model(3, 3);
        let tr = Array2::from_elem(m.dim(), 0.5);
        let f = simulate_frame(&tr, &m, 0.0, Noise::Disabled).unwrap();
        for &p in &m.hot_pixels {
            assert_eq!(f[p], HOT_PIXEL_LEVEL * 1023.0);
        }
        for &p in &m.dead_pixels {
            assert_eq!(f[p], 0.0);
        }
        let noisy = simulate_frame(&tr, &m, 0.0, Noise::Poisson { seed: 1, stream: 0 }).unwrap();
        assert!(noisy.iter().all(|&v| (0.0..=1023.0).contains(&v)));
    }

    #[test]
    fn noise_is_reproducible_per_stream() {
        let m = model(0, 0);
        let tr = Array2::from_elem(m.dim(), 0.7);
        let a = simulate_frame(&tr, &m, 5.0, Noise::Poisson { seed: 3, stream: 9 }).unwrap();
        let b = simulate_frame(&tr, &m, 5.0, Noise::Poisson { seed: 3, stream: 9 }).unwrap();
        let c = simulate_frame(&tr, &m, 5.0, Noise::Poisson { seed: 3, stream: 10 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn generated_maps_respect_invariants() {
        let m = model(5, 5);
        m.validate().unwrap();
        assert_eq!(m.defect_mask().iter().filter(|&&b| b).count(), 10);
        assert!(simulate_frame(&Array2::zeros((2, 2)), &m, 0.0, Noise::Disabled).is_err());
        assert!(simulate_frame(&Array2::zeros(m.dim()), &m, -1.0, Noise::Disabled).is_err());
    }
}
