//! Feldkamp (FDK) cone-beam reconstruction for full circular scans.

mod filter;

pub use filter::{ram_lak_tap, ramp_filter, FilterKind, FilterSpec, RampFilter};

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{correct_tilt, AlignmentEstimate};
use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, DetectorSpec};
use crate::imgops::{bilinear, Image};

/// Default transmission floor of the log transform.
pub const LOG_EPSILON: f64 = 1e-6;

/// Reconstructed attenuation (mm⁻¹), indexed `[z, y, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f64>,
    /// Voxel size along (x, y, z).
    pub voxel_size_mm: [f64; 3],
    /// World coordinates of voxel (0, 0, 0), as (x, y, z).
    pub origin_mm: [f64; 3],
}

impl Volume {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self {
            data: Array3::zeros((grid.nz, grid.ny, grid.nx)),
            voxel_size_mm: [grid.voxel_size_mm; 3],
            origin_mm: grid.origin_mm(),
        }
    }

    /// (nx, ny, nz)
    pub fn shape(&self) -> (usize, usize, usize) {
        let (z, y, x) = self.data.dim();
        (x, y, z)
    }

    /// World position of voxel (i, j, k) along (x, y, z).
    pub fn position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin_mm[0] + i as f64 * self.voxel_size_mm[0],
            self.origin_mm[1] + j as f64 * self.voxel_size_mm[1],
            self.origin_mm[2] + k as f64 * self.voxel_size_mm[2],
        ]
    }
}

/// Cartesian reconstruction grid centered on the rotation axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub voxel_size_mm: f64,
    /// z-slices per parallel work unit; fixes the summation layout.
    #[serde(default = "default_slab")]
    pub slab: usize,
}

fn default_slab() -> usize {
    4
}

impl GridSpec {
    pub fn cube(n: usize, voxel_size_mm: f64) -> Self {
        Self {
            nx: n,
            ny: n,
            nz: n,
            voxel_size_mm,
            slab: default_slab(),
        }
    }

    /// Cube with one voxel per detector column, pixel pitch over
    /// magnification.
    pub fn for_detector(geom: &ConeBeamGeometry, det: &DetectorSpec) -> Self {
        Self::cube(det.cols, det.pitch_mm() / geom.magnification())
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 || self.slab == 0 {
            return Err(Error::Config("grid dimensions and slab size must be > 0".into()));
        }
        if !(self.voxel_size_mm > 0.0) {
            return Err(Error::Config(format!("voxel size must be > 0, got {}", self.voxel_size_mm)));
        }
        Ok(())
    }

    pub fn origin_mm(&self) -> [f64; 3] {
        let h = self.voxel_size_mm;
        [
            -(self.nx as f64 - 1.0) / 2.0 * h,
            -(self.ny as f64 - 1.0) / 2.0 * h,
            -(self.nz as f64 - 1.0) / 2.0 * h,
        ]
    }
}

/// `p = -ln(max(IC, epsilon))`; transmissions above one give small negative
/// line integrals, which are kept.
pub fn log_transform(ic: &Image, epsilon: f64) -> Image {
    ic.mapv(|v| -(v.max(epsilon)).ln())
}

/// Multiplies each pixel by `SDD / sqrt(SDD² + u² + v²)`, with (u, v)
/// measured from the piercing point, shifted by `center_offset_px` columns.
pub fn cosine_weight(p: &Image, geom: &ConeBeamGeometry, det: &DetectorSpec, center_offset_px: f64) -> Image {
    let sdd = geom.source_to_detector_mm;
    let pitch = det.pitch_mm();
    let (r0, c0) = det.center_px();
    let mut out = p.clone();
    for ((r, c), v) in out.indexed_iter_mut() {
        let u = (c as f64 - c0 - center_offset_px) * pitch;
        let w = (r0 - r as f64) * pitch;
        *v *= sdd / (sdd * sdd + u * u + w * w).sqrt();
    }
    out
}

/// Cosine-weighted, ramp-filtered projections scaled by the inverse of the
/// detector sampling at isocenter, ready for backprojection.
pub fn filter_projections(
    line_integrals: &[Image],
    geom: &ConeBeamGeometry,
    det: &DetectorSpec,
    center_offset_px: f64,
    spec: &FilterSpec,
) -> Result<Vec<Image>> {
    let filter = RampFilter::new(det.cols, spec)?;
    let tau = det.pitch_mm() / geom.magnification();
    line_integrals
        .par_iter()
        .map(|p| {
            if p.dim() != (det.rows, det.cols) {
                return Err(Error::Dimension(format!(
                    "projection {:?} does not match the {}x{} detector",
                    p.dim(),
                    det.rows,
                    det.cols
                )));
            }
            let w = cosine_weight(p, geom, det, center_offset_px);
            Ok(filter.apply_image(&w)? / tau)
        })
        .collect()
}

/// Voxel-driven FDK backprojection with bilinear detector sampling:
/// `f(x) = Δθ/2 Σ (SOD / (SOD + s))² Q(u, v)`, `s` the voxel's depth along
/// the central ray and Δθ = 360° / views. Work is split into fixed z-slabs
/// and every voxel sums its views in order, so results are reproducible.
pub fn backproject(
    filtered: &[Image],
    angles_deg: &[f64],
    geom: &ConeBeamGeometry,
    det: &DetectorSpec,
    grid: &GridSpec,
    center_offset_px: f64,
) -> Result<Volume> {
    grid.validate()?;
    if filtered.len() != angles_deg.len() {
        return Err(Error::Dimension(format!(
            "{} filtered projections for {} angles",
            filtered.len(),
            angles_deg.len()
        )));
    }
    let mut vol = Volume::zeros(grid);
    if filtered.is_empty() {
        log::warn!("no projections to backproject; returning an empty volume");
        return Ok(vol);
    }
    let sod = geom.source_to_object_mm;
    let sdd = geom.source_to_detector_mm;
    let pitch = det.pitch_mm();
    let (r0, c0) = det.center_px();
    let scale = std::f64::consts::PI / filtered.len() as f64;
    let trig: Vec<(f64, f64)> = angles_deg.iter().map(|a| a.to_radians().sin_cos()).collect();
    let origin = vol.origin_mm;
    let h = grid.voxel_size_mm;
    let (nx, ny) = (grid.nx, grid.ny);

    vol.data
        .axis_chunks_iter_mut(Axis(0), grid.slab)
        .into_par_iter()
        .enumerate()
        .for_each(|(chunk, mut slab)| {
            let k0 = chunk * grid.slab;
            let mut acc = Array2::<f64>::zeros((ny, nx));
            for (dk, mut plane) in slab.axis_iter_mut(Axis(0)).enumerate() {
                let z = origin[2] + (k0 + dk) as f64 * h;
                acc.fill(0.0);
                for (q, &(s, c)) in filtered.iter().zip(&trig) {
                    for j in 0..ny {
                        let y = origin[1] + j as f64 * h;
                        for i in 0..nx {
                            let x = origin[0] + i as f64 * h;
                            // object -> world: rotate by +angle about z
                            let wx = c * x - s * y;
                            let wy = s * x + c * y;
                            let depth = sod + wy;
                            let mag = sdd / depth;
                            let col = wx * mag / pitch + c0 + center_offset_px;
                            let row = r0 - z * mag / pitch;
                            if let Some(v) = bilinear(q, row, col) {
                                let w = sod / depth;
                                acc[[j, i]] += w * w * v;
                            }
                        }
                    }
                }
                plane.assign(&(&acc * scale));
            }
        });
    Ok(vol)
}

/// Tilt correction (when requested), log transform, cosine weighting, ramp
/// filtering and backprojection.
pub fn fdk_reconstruct(
    projections: &[Image],
    angles_deg: &[f64],
    geom: &ConeBeamGeometry,
    det: &DetectorSpec,
    alignment: &AlignmentEstimate,
    grid: &GridSpec,
    spec: &FilterSpec,
) -> Result<Volume> {
    alignment.validate()?;
    let corrected;
    let input = if alignment.tilt_deg != 0.0 {
        corrected = correct_tilt(projections, alignment.tilt_deg)?;
        &corrected[..]
    } else {
        projections
    };
    let p: Vec<Image> = input.par_iter().map(|ic| log_transform(ic, LOG_EPSILON)).collect();
    reconstruct_line_integrals(&p, angles_deg, geom, det, alignment.center_offset_px, grid, spec)
}

/// FDK from line-integral projections; linear in its input.
pub fn reconstruct_line_integrals(
    line_integrals: &[Image],
    angles_deg: &[f64],
    geom: &ConeBeamGeometry,
    det: &DetectorSpec,
    center_offset_px: f64,
    grid: &GridSpec,
    spec: &FilterSpec,
) -> Result<Volume> {
    let q = filter_projections(line_integrals, geom, det, center_offset_px, spec)?;
    backproject(&q, angles_deg, geom, det, grid, center_offset_px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_transform_values() {
        let ic = Array2::from_shape_vec((1, 4), vec![1.0, (-1.0f64).exp(), 0.0, 1.02]).unwrap();
        let p = log_transform(&ic, LOG_EPSILON);
        assert_eq!(p[[0, 0]], 0.0);
        assert!((p[[0, 1]] - 1.0).abs() < 1e-15);
        assert!((p[[0, 2]] - 13.815510557964274).abs() < 1e-12);
        assert!(p[[0, 3]] < 0.0);
    }

    #[test]
    fn cosine_weight_closed_forms() {
        // 3x3 detector whose outer pixels sit at u, v = +-SDD
        let geom = ConeBeamGeometry::new(10.0, 5.0).unwrap();
        let det = DetectorSpec::new(3, 3, 10_000.0, 1.0).unwrap();
        let w = cosine_weight(&Array2::from_elem((3, 3), 1.0), &geom, &det, 0.0);
        assert_eq!(w[[1, 1]], 1.0);
        assert!((w[[1, 2]] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((w[[0, 0]] - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_and_empty_inputs() {
        let geom = ConeBeamGeometry::new(750.0, 560.0).unwrap();
        let det = DetectorSpec::new(16, 16, 100.0, 1023.0).unwrap();
        let grid = GridSpec::cube(8, 0.05);
        let zeros = vec![Array2::zeros((16, 16)); 4];
        let v = backproject(&zeros, &[0.0, 90.0, 180.0, 270.0], &geom, &det, &grid, 0.0).unwrap();
        assert!(v.data.iter().all(|&x| x == 0.0));
        let e = backproject(&[], &[], &geom, &det, &grid, 0.0).unwrap();
        assert_eq!(e.data.dim(), (8, 8, 8));
    }

    #[test]
    fn default_grid_uses_magnified_pitch() {
        let geom = ConeBeamGeometry::new(750.0, 560.0).unwrap();
        let det = DetectorSpec::mt9m001();
        let g = GridSpec::for_detector(&geom, &det);
        assert_eq!((g.nx, g.ny, g.nz), (1280, 1280, 1280));
        assert!((g.voxel_size_mm - 0.0052 * 560.0 / 750.0).abs() < 1e-15);
    }
}
