//! Scan geometry: detector description, source/object/detector distances and
//! the magnification, voxel-size and fringe-scaling arithmetic built on them.
//!
//! World frame used throughout the crate: the rotation axis is `z` (up), the
//! source sits at `(0, -SOD, 0)` and the detector plane is `y = SDD - SOD`.
//! Detector column `u` runs along `+x`, detector row 0 is the top edge so the
//! vertical coordinate `v` grows as the row index decreases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel array of the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub rows: usize,
    pub cols: usize,
    pub pixel_pitch_um: f64,
    /// Raw-count ceiling; simulated frames are clipped to it.
    pub max_value: f64,
}

impl DetectorSpec {
    pub fn new(rows: usize, cols: usize, pixel_pitch_um: f64, max_value: f64) -> Result<Self> {
        let det = Self {
            rows,
            cols,
            pixel_pitch_um,
            max_value,
        };
        det.validate()?;
        Ok(det)
    }

    /// Micron MT9M001: 1280x1024 pixels of 5.2 um, 10-bit readout.
    pub fn mt9m001() -> Self {
        Self {
            rows: 1024,
            cols: 1280,
            pixel_pitch_um: 5.2,
            max_value: 1023.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Geometry(format!(
                "detector must have at least one row and column, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.pixel_pitch_um > 0.0) || !self.pixel_pitch_um.is_finite() {
            return Err(Error::Geometry(format!(
                "pixel pitch must be positive, got {}",
                self.pixel_pitch_um
            )));
        }
        if !(self.max_value > 0.0) {
            return Err(Error::Geometry(format!(
                "detector ceiling must be positive, got {}",
                self.max_value
            )));
        }
        Ok(())
    }

    pub fn pitch_mm(&self) -> f64 {
        self.pixel_pitch_um * 1e-3
    }

    pub fn width_mm(&self) -> f64 {
        self.cols as f64 * self.pitch_mm()
    }

    pub fn height_mm(&self) -> f64 {
        self.rows as f64 * self.pitch_mm()
    }

    /// Active area (width, height) in mm.
    pub fn active_area_mm(&self) -> (f64, f64) {
        (self.width_mm(), self.height_mm())
    }

    /// Fractional (row, col) of the detector center.
    pub fn center_px(&self) -> (f64, f64) {
        ((self.rows as f64 - 1.0) / 2.0, (self.cols as f64 - 1.0) / 2.0)
    }

    /// Detector-plane coordinates (u, v) in mm of a pixel position.
    pub fn pixel_to_uv(&self, row: f64, col: f64) -> (f64, f64) {
        let (r0, c0) = self.center_px();
        let p = self.pitch_mm();
        ((col - c0) * p, (r0 - row) * p)
    }

    /// Inverse of [`DetectorSpec::pixel_to_uv`]; returns fractional (row, col).
    pub fn uv_to_pixel(&self, u: f64, v: f64) -> (f64, f64) {
        let (r0, c0) = self.center_px();
        let p = self.pitch_mm();
        (r0 - v / p, c0 + u / p)
    }
}

/// Source-to-detector and source-to-object distances of a circular scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeBeamGeometry {
    pub source_to_detector_mm: f64,
    pub source_to_object_mm: f64,
}

impl ConeBeamGeometry {
    pub fn new(source_to_detector_mm: f64, source_to_object_mm: f64) -> Result<Self> {
        let g = Self {
            source_to_detector_mm,
            source_to_object_mm,
        };
        g.validate()?;
        Ok(g)
    }

    /// Builds the geometry from the object-to-sensor distance, the quantity
    /// reported for the experimental setups.
    pub fn from_object_to_sensor(source_to_detector_mm: f64, object_to_sensor_mm: f64) -> Result<Self> {
        Self::new(
            source_to_detector_mm,
            source_to_detector_mm - object_to_sensor_mm,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (sdd, sod) = (self.source_to_detector_mm, self.source_to_object_mm);
        if !(sod > 0.0) || !sdd.is_finite() || !sod.is_finite() {
            return Err(Error::Geometry(format!(
                "source-to-object distance must be positive, got {sod}"
            )));
        }
        if sod > sdd {
            return Err(Error::Geometry(format!(
                "object ({sod} mm) lies beyond the detector ({sdd} mm)"
            )));
        }
        Ok(())
    }

    pub fn object_to_sensor_mm(&self) -> f64 {
        self.source_to_detector_mm - self.source_to_object_mm
    }

    /// SDD / SOD.
    pub fn magnification(&self) -> f64 {
        self.source_to_detector_mm / self.source_to_object_mm
    }

    /// Pixel pitch projected back to the rotation axis.
    pub fn voxel_size_um(&self, det: &DetectorSpec) -> f64 {
        det.pixel_pitch_um / self.magnification()
    }

    /// Projects a point given in world coordinates onto the detector plane,
    /// returning (u, v) in mm.
    #[inline]
    pub fn project_world(&self, x: f64, y: f64, z: f64) -> (f64, f64) {
        let scale = self.source_to_detector_mm / (self.source_to_object_mm + y);
        (x * scale, z * scale)
    }
}

pub fn magnification(geom: &ConeBeamGeometry) -> f64 {
    geom.magnification()
}

pub fn voxel_size_um(geom: &ConeBeamGeometry, det: &DetectorSpec) -> f64 {
    geom.voxel_size_um(det)
}

/// Ratio of the expected propagation-fringe widths at object-to-detector
/// distances `z2_mm` and `z1_mm`; fringe width grows as the square root of
/// the distance.
pub fn fringe_scale_ratio(z1_mm: f64, z2_mm: f64) -> Result<f64> {
    if !(z1_mm > 0.0) || !(z2_mm > 0.0) {
        return Err(Error::Domain(format!(
            "fringe scaling needs positive distances, got {z1_mm} and {z2_mm}"
        )));
    }
    Ok((z2_mm / z1_mm).sqrt())
}

/// Acquisition parameters of one scan. Tube settings and filter are carried
/// as metadata only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub angular_step_deg: f64,
    #[serde(default = "full_rotation")]
    pub angular_range_deg: f64,
    #[serde(default)]
    pub tube_voltage_kv: Option<f64>,
    #[serde(default)]
    pub tube_current_ua: Option<f64>,
    #[serde(default)]
    pub filter_description: Option<String>,
    /// Object far enough from the sensor for propagation fringes.
    #[serde(default)]
    pub phase_contrast: bool,
}

fn full_rotation() -> f64 {
    360.0
}

impl ScanConfig {
    pub fn full_rotation(angular_step_deg: f64) -> Result<Self> {
        let scan = Self {
            angular_step_deg,
            angular_range_deg: 360.0,
            tube_voltage_kv: None,
            tube_current_ua: None,
            filter_description: None,
            phase_contrast: false,
        };
        scan.validate()?;
        Ok(scan)
    }

    pub fn validate(&self) -> Result<()> {
        self.num_projections().map(|_| ())
    }

    pub fn num_projections(&self) -> Result<usize> {
        let step = self.angular_step_deg;
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::Config(format!(
                "angular_step_deg must be positive, got {step}"
            )));
        }
        if (self.angular_range_deg - 360.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "only full 360 degree scans are supported, got angular_range_deg = {}",
                self.angular_range_deg
            )));
        }
        let n = self.angular_range_deg / step;
        let rounded = n.round();
        if (n - rounded).abs() > 1e-6 * rounded.max(1.0) || rounded < 1.0 {
            return Err(Error::Config(format!(
                "angular range {} is not an integer multiple of the step {step}",
                self.angular_range_deg
            )));
        }
        Ok(rounded as usize)
    }

    /// Angular positions k * step for k = 0..N-1.
    pub fn angles_deg(&self) -> Result<Vec<f64>> {
        let n = self.num_projections()?;
        Ok((0..n).map(|k| k as f64 * self.angular_step_deg).collect())
    }
}

/// Distance from source to sensor used for both experimental setups.
pub const PRESET_SDD_MM: f64 = 750.0;

/// The two experimental setups: an absorption scan of a packaged chip close
/// to the sensor and a phase-contrast scan of an insect head at 19 cm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Chip,
    Insect,
}

impl Preset {
    pub fn object_to_sensor_mm(self) -> f64 {
        match self {
            Preset::Chip => 25.0,
            Preset::Insect => 190.0,
        }
    }

    pub fn geometry(self) -> ConeBeamGeometry {
        ConeBeamGeometry::from_object_to_sensor(PRESET_SDD_MM, self.object_to_sensor_mm())
            .expect("preset geometry is valid")
    }

    pub fn scan(self) -> ScanConfig {
        match self {
            Preset::Chip => ScanConfig {
                angular_step_deg: 0.6,
                angular_range_deg: 360.0,
                tube_voltage_kv: Some(35.0),
                tube_current_ua: Some(250.0),
                filter_description: Some("aluminum 20 um".to_string()),
                phase_contrast: false,
            },
            Preset::Insect => ScanConfig {
                angular_step_deg: 0.6,
                angular_range_deg: 360.0,
                tube_voltage_kv: Some(25.0),
                tube_current_ua: Some(100.0),
                filter_description: None,
                phase_contrast: true,
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "chip" => Ok(Preset::Chip),
            "insect" => Ok(Preset::Insect),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected `chip` or `insect`)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn magnification_examples() {
        let g = ConeBeamGeometry::new(750.0, 560.0).unwrap();
        assert!((g.magnification() - 1.339_285_714).abs() < 1e-6);
        let g = ConeBeamGeometry::new(750.0, 750.0).unwrap();
        assert_eq!(g.magnification(), 1.0);
        let g = ConeBeamGeometry::new(750.0, 725.0).unwrap();
        assert!((g.magnification() - 1.0345).abs() < 1e-4);
    }

    #[test]
    fn voxel_size_examples() {
        let det = DetectorSpec::mt9m001();
        let insect = Preset::Insect.geometry();
        let v = insect.voxel_size_um(&det);
        assert!((v - 3.8827).abs() < 1e-3, "{v}");
        assert_eq!((v * 10.0).round() / 10.0, 3.9);
        let unit = ConeBeamGeometry::new(750.0, 750.0).unwrap();
        assert_eq!(unit.voxel_size_um(&det), 5.2);
        let chip = Preset::Chip.geometry();
        assert!((chip.voxel_size_um(&det) - 5.0267).abs() < 1e-3);
    }

    #[test]
    fn fringe_ratio_examples() {
        assert!((fringe_scale_ratio(25.0, 190.0).unwrap() - 2.757).abs() < 1e-3);
        assert_eq!(fringe_scale_ratio(42.0, 42.0).unwrap(), 1.0);
        assert_eq!(fringe_scale_ratio(100.0, 400.0).unwrap(), 2.0);
        assert!(matches!(fringe_scale_ratio(0.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(fringe_scale_ratio(1.0, -3.0), Err(Error::Domain(_))));
    }

    #[test]
    fn geometry_rejects_object_behind_detector() {
        assert!(ConeBeamGeometry::new(750.0, 800.0).is_err());
        assert!(ConeBeamGeometry::new(750.0, 0.0).is_err());
        assert!(ConeBeamGeometry::from_object_to_sensor(750.0, 750.0).is_err());
    }

    #[test]
    fn detector_area_and_coordinates() {
        let det = DetectorSpec::mt9m001();
        let (w, h) = det.active_area_mm();
        assert!((w - 6.656).abs() < 1e-9 && (h - 5.3248).abs() < 1e-9);
        let (u, v) = det.pixel_to_uv(0.0, 0.0);
        assert!(u < 0.0 && v > 0.0);
        let (r, c) = det.uv_to_pixel(u, v);
        assert!(r.abs() < 1e-12 && c.abs() < 1e-12);
        assert!(DetectorSpec::new(0, 4, 1.0, 1.0).is_err());
        assert!(DetectorSpec::new(4, 4, 0.0, 1.0).is_err());
    }

    #[test]
    fn scan_projection_count() {
        let scan = Preset::Insect.scan();
        assert_eq!(scan.num_projections().unwrap(), 600);
        let angles = scan.angles_deg().unwrap();
        assert_eq!(angles[0], 0.0);
        assert!((angles[599] - 359.4).abs() < 1e-9);
        assert!(ScanConfig::full_rotation(0.0).is_err());
        assert!(ScanConfig::full_rotation(0.7).is_err());
    }

    proptest! {
        #[test]
        fn magnification_at_least_one(sdd in 10.0f64..2000.0, frac in 0.01f64..1.0) {
            let g = ConeBeamGeometry::new(sdd, sdd * frac).unwrap();
            prop_assert!(g.magnification() >= 1.0);
            if frac == 1.0 { prop_assert_eq!(g.magnification(), 1.0); }
        }

        #[test]
        fn voxel_size_decreases_with_magnification(sdd in 100.0f64..2000.0, a in 0.05f64..1.0, b in 0.05f64..1.0) {
            let det = DetectorSpec::mt9m001();
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            let g_hi = ConeBeamGeometry::new(sdd, sdd * near).unwrap();
            let g_lo = ConeBeamGeometry::new(sdd, sdd * far).unwrap();
            prop_assert!(g_hi.voxel_size_um(&det) <= g_lo.voxel_size_um(&det));
        }

        #[test]
        fn fringe_ratio_reciprocal(a in 1e-3f64..1e4, b in 1e-3f64..1e4) {
            let p = fringe_scale_ratio(a, b).unwrap() * fringe_scale_ratio(b, a).unwrap();
            prop_assert!((p - 1.0).abs() < 1e-12);
        }
    }
}
