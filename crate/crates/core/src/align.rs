//! Rotation-axis tilt and center-of-rotation estimation from opposed
//! projection pairs.
//!
//! A projection at θ + 180° is, to first order, the mirror image of the one
//! at θ about the projected rotation axis. For a candidate axis with tilt τ
//! and horizontal offset d the reflection is `F(x) = q + R M Rᵀ (x - q)`,
//! with `R = R(τ)`, `M = diag(-1, 1)` and `q = c + R (d, 0)`. The candidate
//! maximizing the normalized cross-correlation of `I_θ(x)` with
//! `I_θ+180(F(x))` is the estimate.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::{bilinear, gaussian_blur, rotate, Image};

/// Tilts beyond this indicate a broken mechanical setup.
pub const MAX_TILT_DEG: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentEstimate {
    pub tilt_deg: f64,
    pub center_offset_px: f64,
    #[serde(default)]
    pub confidence: f64,
}

impl AlignmentEstimate {
    pub fn identity() -> Self {
        Self {
            tilt_deg: 0.0,
            center_offset_px: 0.0,
            confidence: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tilt_deg.is_finite() || self.tilt_deg.abs() >= MAX_TILT_DEG {
            return Err(Error::Alignment(format!(
                "tilt {} deg is outside +-{MAX_TILT_DEG} deg",
                self.tilt_deg
            )));
        }
        if !self.center_offset_px.is_finite() {
            return Err(Error::Alignment("center offset is not finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub tilt_range_deg: f64,
    pub tilt_step_deg: f64,
    pub offset_range_px: f64,
    pub offset_step_px: f64,
    pub max_pairs: usize,
    pub confidence_floor: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            tilt_range_deg: 3.0,
            tilt_step_deg: 0.05,
            offset_range_px: 50.0,
            offset_step_px: 0.25,
            max_pairs: 5,
            confidence_floor: 0.5,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.tilt_range_deg,
            self.tilt_step_deg,
            self.offset_range_px,
            self.offset_step_px,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.max_pairs == 0 {
            return Err(Error::Config("alignment search ranges and steps must be positive".into()));
        }
        if self.tilt_range_deg >= MAX_TILT_DEG {
            return Err(Error::Config(format!("tilt search range must stay below {MAX_TILT_DEG} deg")));
        }
        Ok(())
    }
}

/// Index pairs (i, j) with angle_j = angle_i + 180° within half the mean
/// angular step.
pub fn opposed_pairs(angles_deg: &[f64]) -> Vec<(usize, usize)> {
    let n = angles_deg.len();
    if n < 2 {
        return Vec::new();
    }
    let mut sorted = angles_deg.to_vec();
    sorted.sort_by(f64::total_cmp);
    let span = sorted[n - 1] - sorted[0];
    let step = if span > 0.0 { span / (n - 1) as f64 } else { 0.0 };
    let tol = (0.5 * step).max(1e-9);
    let mut pairs = Vec::new();
    for (i, &a) in angles_deg.iter().enumerate() {
        let target = a + 180.0;
        let best = angles_deg
            .iter()
            .enumerate()
            .map(|(j, &b)| (j, (b - target).abs()))
            .min_by(|x, y| x.1.total_cmp(&y.1));
        if let Some((j, d)) = best {
            if d <= tol && j != i {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

struct PairScorer<'a> {
    a: &'a Image,
    b: &'a Image,
    center: (f64, f64),
}

impl PairScorer<'_> {
    /// NCC between `a` and `b` resampled on a common axis-aligned frame: a
    /// frame point (u, w) relative to the candidate axis reads `a` at its
    /// tilted position and `b` at the tilted position of (-u, w). Both
    /// images go through the same interpolation, and coordinates are
    /// clamped to the border so the compared pixel set stays fixed.
    fn ncc(&self, tilt_deg: f64, offset: f64, stride: usize) -> f64 {
        let (rows, cols) = self.a.dim();
        let rmax = (rows - 1) as f64;
        let cmax = (cols - 1) as f64;
        let (cr, cc) = self.center;
        let (s, c) = tilt_deg.to_radians().sin_cos();
        // axis point q = center + R (d, 0) in (x = col, y = row)
        let qx = cc + c * offset;
        let qy = cr + s * offset;
        let at = |img: &Image, u: f64, w: f64| {
            let x = qx + c * u - s * w;
            let y = qy + s * u + c * w;
            bilinear(img, y.clamp(0.0, rmax), x.clamp(0.0, cmax)).unwrap_or(0.0)
        };
        let (mut n, mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for r in (0..rows).step_by(stride) {
            let w = r as f64 - cr;
            for col in (0..cols).step_by(stride) {
                let u = col as f64 - cc;
                let va = at(self.a, u, w);
                let vb = at(self.b, -u, w);
                n += 1.0;
                sa += va;
                sb += vb;
                sab += va * vb;
                saa += va * va;
                sbb += vb * vb;
            }
        }
        if n < 16.0 {
            return f64::NEG_INFINITY;
        }
        let cov = sab - sa * sb / n;
        let va = saa - sa * sa / n;
        let vb = sbb - sb * sb / n;
        if va <= 0.0 || vb <= 0.0 {
            return f64::NEG_INFINITY;
        }
        cov / (va * vb).sqrt()
    }
}

fn grid(center: f64, half: f64, step: f64) -> Vec<f64> {
    let k = (half / step).round() as i64;
    (-k..=k).map(|i| center + i as f64 * step).collect()
}

fn best_on(scorer: &PairScorer<'_>, tilts: &[f64], offsets: &[f64], stride: usize) -> (usize, usize, Array2<f64>) {
    let scores: Vec<f64> = (0..tilts.len() * offsets.len())
        .into_par_iter()
        .map(|k| scorer.ncc(tilts[k / offsets.len()], offsets[k % offsets.len()], stride))
        .collect();
    let table = Array2::from_shape_vec((tilts.len(), offsets.len()), scores).expect("grid shape");
    let mut best = (0, 0);
    for ((i, j), &v) in table.indexed_iter() {
        if v > table[best] {
            best = (i, j);
        }
    }
    (best.0, best.1, table)
}

// vertex of the parabola through (-1, a), (0, b), (1, c), in steps
fn parabola_vertex(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if !denom.is_finite() || denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

// light smoothing keeps edge aliasing from biasing the fit
const REGISTRATION_BLUR_PX: f64 = 1.0;

fn register_pair(a: &Image, b: &Image, cfg: &AlignConfig) -> (f64, f64, f64) {
    let (rows, cols) = a.dim();
    let a = gaussian_blur(a, REGISTRATION_BLUR_PX);
    let b = gaussian_blur(b, REGISTRATION_BLUR_PX);
    let scorer = PairScorer {
        a: &a,
        b: &b,
        center: ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0),
    };
    let max_offset = cfg.offset_range_px.min(0.5 * cols as f64 - 1.0).max(cfg.offset_step_px);
    // coarse pass on a subsampled grid, then the full-resolution grid near it
    let coarse_t = (5.0 * cfg.tilt_step_deg).max(cfg.tilt_step_deg);
    let coarse_d = (4.0 * cfg.offset_step_px).max(cfg.offset_step_px);
    let tilts = grid(0.0, cfg.tilt_range_deg, coarse_t);
    let offsets = grid(0.0, max_offset, coarse_d);
    let (i, j, _) = best_on(&scorer, &tilts, &offsets, 2);
    let (mut t0, mut d0) = (tilts[i], offsets[j]);
    // full-resolution window, re-centered while the peak sits on its edge;
    // enough rounds to walk across the whole search range
    let max_rounds = (2.0 * cfg.tilt_range_deg / coarse_t + 2.0 * max_offset / coarse_d).ceil() as usize + 2;
    let mut rounds = 0;
    let (tilts, offsets, i, j, table) = loop {
        let tilts = grid(t0, coarse_t, cfg.tilt_step_deg);
        let offsets = grid(d0, coarse_d, cfg.offset_step_px);
        let (i, j, table) = best_on(&scorer, &tilts, &offsets, 1);
        let on_edge = i == 0 || i + 1 == tilts.len() || j == 0 || j + 1 == offsets.len();
        let inside = tilts[i].abs() < cfg.tilt_range_deg && offsets[j].abs() < max_offset;
        rounds += 1;
        if !on_edge || !inside || rounds >= max_rounds {
            break (tilts, offsets, i, j, table);
        }
        t0 = tilts[i];
        d0 = offsets[j];
    };
    let peak = table[[i, j]];
    let mut tilt = tilts[i];
    let mut offset = offsets[j];
    if i > 0 && i + 1 < tilts.len() {
        tilt += cfg.tilt_step_deg * parabola_vertex(table[[i - 1, j]], peak, table[[i + 1, j]]);
    }
    if j > 0 && j + 1 < offsets.len() {
        offset += cfg.offset_step_px * parabola_vertex(table[[i, j - 1]], peak, table[[i, j + 1]]);
    }
    (tilt, offset, peak)
}

// pair tilts whose mean lies within this many standard errors of zero are
// treated as noise
const TILT_SIGNIFICANCE: f64 = 2.0;

/// Mean of the per-pair tilts, or zero when three or more pairs scatter too
/// much for the mean to differ from zero. Nearly spherical samples carry
/// little tilt information and otherwise yield arbitrary tilts.
fn significant_mean(tilts: &[f64]) -> f64 {
    let k = tilts.len() as f64;
    let mean = tilts.iter().sum::<f64>() / k;
    if tilts.len() < 3 {
        return mean;
    }
    let var = tilts.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let se = (var / k).sqrt();
    if mean.abs() < TILT_SIGNIFICANCE * se {
        log::warn!("pair tilts scatter too much ({mean:.3} +/- {se:.3} deg); assuming zero tilt");
        return 0.0;
    }
    mean
}

/// Estimates tilt and center offset, averaged over up to `max_pairs`
/// opposed pairs spread across the scan.
pub fn estimate_alignment(projections: &[Image], angles_deg: &[f64], cfg: &AlignConfig) -> Result<AlignmentEstimate> {
    cfg.validate()?;
    if projections.len() != angles_deg.len() {
        return Err(Error::Dimension(format!(
            "{} projections for {} angles",
            projections.len(),
            angles_deg.len()
        )));
    }
    let pairs = opposed_pairs(angles_deg);
    if pairs.is_empty() {
        return Err(Error::Alignment(
            "no opposed (theta, theta + 180 deg) projection pairs; supply the tilt manually".into(),
        ));
    }
    let n_use = cfg.max_pairs.min(pairs.len());
    let chosen: Vec<(usize, usize)> = (0..n_use).map(|k| pairs[k * pairs.len() / n_use]).collect();
    let mut tilts = Vec::with_capacity(chosen.len());
    let mut offset = 0.0;
    let mut conf = 0.0;
    for &(i, j) in &chosen {
        if projections[i].dim() != projections[j].dim() {
            return Err(Error::Dimension("projections differ in shape".into()));
        }
        let (t, d, c) = register_pair(&projections[i], &projections[j], cfg);
        log::debug!("pair ({i}, {j}): tilt {t:.3} deg, offset {d:.3} px, ncc {c:.4}");
        tilts.push(t);
        offset += d;
        conf += c;
    }
    let k = chosen.len() as f64;
    let est = AlignmentEstimate {
        tilt_deg: significant_mean(&tilts),
        center_offset_px: offset / k,
        confidence: conf / k,
    };
    if !(est.confidence >= cfg.confidence_floor) {
        log::warn!(
            "alignment confidence {:.3} is below {:.3}; consider --skip-align",
            est.confidence,
            cfg.confidence_floor
        );
    }
    est.validate()?;
    Ok(est)
}

/// Rotates every projection by `-tilt_deg` about its center with bilinear
/// interpolation, filling uncovered pixels with full transmission. A zero
/// tilt returns an exact copy.
pub fn correct_tilt(projections: &[Image], tilt_deg: f64) -> Result<Vec<Image>> {
    if !tilt_deg.is_finite() || tilt_deg.abs() >= MAX_TILT_DEG {
        return Err(Error::Domain(format!("tilt {tilt_deg} deg is outside +-{MAX_TILT_DEG} deg")));
    }
    Ok(projections.par_iter().map(|p| rotate(p, -tilt_deg, 1.0)).collect())
}

/// Row `row` of every projection, stacked in order of increasing angle.
pub fn build_sinogram(projections: &[Image], angles_deg: &[f64], row: usize) -> Result<Image> {
    if projections.len() != angles_deg.len() {
        return Err(Error::Dimension("projection and angle counts differ".into()));
    }
    let Some(first) = projections.first() else {
        return Err(Error::Empty("no projections".into()));
    };
    let (rows, cols) = first.dim();
    if row >= rows {
        return Err(Error::Domain(format!("row {row} outside a {rows}-row detector")));
    }
    let mut order: Vec<usize> = (0..projections.len()).collect();
    order.sort_by(|&a, &b| angles_deg[a].total_cmp(&angles_deg[b]));
    let mut out = Array2::zeros((order.len(), cols));
    for (k, &i) in order.iter().enumerate() {
        if projections[i].dim() != (rows, cols) {
            return Err(Error::Dimension("projections differ in shape".into()));
        }
        out.row_mut(k).assign(&projections[i].row(row));
    }
    Ok(out)
}
