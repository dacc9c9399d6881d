//! Hot/dead pixel detection on averaged references and neighbor repair.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::Image;
use crate::stats;

/// Consistency constant turning a MAD into a Gaussian sigma.
const MAD_TO_SIGMA: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectConfig {
    #[serde(default = "default_k")]
    pub k_mad: f64,
}

fn default_k() -> f64 {
    5.0
}

impl Default for DefectConfig {
    fn default() -> Self {
        Self { k_mad: default_k() }
    }
}

impl DefectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_mad > 0.0) {
            return Err(Error::Config(format!("k_mad must be > 0, got {}", self.k_mad)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefectMask {
    pub mask: Array2<bool>,
    pub hot_count: usize,
    pub dead_count: usize,
}

impl DefectMask {
    pub fn empty(dim: (usize, usize)) -> Self {
        Self {
            mask: Array2::from_elem(dim, false),
            hot_count: 0,
            dead_count: 0,
        }
    }

    pub fn from_mask(mask: Array2<bool>) -> Self {
        let n = mask.iter().filter(|&&m| m).count();
        Self {
            mask,
            hot_count: n,
            dead_count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.mask.len().max(1) as f64
    }
}

fn robust_center_scale(img: &Image) -> (f64, f64) {
    let v: Vec<f64> = img.iter().copied().collect();
    let med = stats::median(&v);
    let scale = MAD_TO_SIGMA * stats::mad(&v, med);
    // a perfectly uniform map has MAD 0; only gross outliers should trip it
    (med, scale.max(1e-6 * med.abs().max(1.0)))
}

/// Hot pixels are bright outliers of the averaged dark; dead pixels are dark
/// outliers of the averaged flat.
pub fn detect_defects(dark_avg: &Image, flat_avg: &Image, k_mad: f64) -> Result<DefectMask> {
    if dark_avg.dim() != flat_avg.dim() {
        return Err(Error::Dimension("dark and flat averages differ in shape".into()));
    }
    let (dm, ds) = robust_center_scale(dark_avg);
    let (fm, fs) = robust_center_scale(flat_avg);
    let hot_limit = dm + k_mad * ds;
    let dead_limit = fm - k_mad * fs;
    let mut mask = Array2::from_elem(dark_avg.dim(), false);
    let (mut hot, mut dead) = (0, 0);
    ndarray::Zip::from(&mut mask)
        .and(dark_avg)
        .and(flat_avg)
        .for_each(|m, &d, &f| {
            let is_hot = d > hot_limit;
            let is_dead = f < dead_limit;
            hot += is_hot as usize;
            dead += (is_dead && !is_hot) as usize;
            *m = is_hot || is_dead;
        });
    let out = DefectMask {
        mask,
        hot_count: hot,
        dead_count: dead,
    };
    if out.fraction() >= 0.5 {
        return Err(Error::Calibration(format!(
            "{:.1}% of pixels flagged defective",
            100.0 * out.fraction()
        )));
    }
    Ok(out)
}

/// Replaces masked pixels by the mean of their valid 8-neighbors. Clusters
/// are filled from the outside in, a ring per pass, where each pass only
/// reads unmasked or previously repaired pixels.
pub fn repair_defects(image: &Image, mask: &DefectMask) -> Result<Image> {
    repair_with(image, &mask.mask)
}

pub(crate) fn repair_with(image: &Image, mask: &Array2<bool>) -> Result<Image> {
    if image.dim() != mask.dim() {
        return Err(Error::Dimension("image and defect mask differ in shape".into()));
    }
    let mut pending: Vec<(usize, usize)> = mask
        .indexed_iter()
        .filter_map(|(p, &m)| m.then_some(p))
        .collect();
    if pending.is_empty() {
        return Ok(image.clone());
    }
    if pending.len() == image.len() {
        return Err(Error::Calibration("every pixel is masked; nothing to repair from".into()));
    }
    let (rows, cols) = image.dim();
    let mut out = image.clone();
    let mut valid = mask.mapv(|m| !m);
    while !pending.is_empty() {
        let mut done = Vec::new();
        let mut rest = Vec::new();
        for &(r, c) in &pending {
            let mut sum = 0.0;
            let mut n = 0usize;
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let rr = r as isize + dr;
                    let cc = c as isize + dc;
                    if rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                        continue;
                    }
                    let q = (rr as usize, cc as usize);
                    if valid[q] {
                        sum += out[q];
                        n += 1;
                    }
                }
            }
            if n > 0 {
                done.push(((r, c), sum / n as f64));
            } else {
                rest.push((r, c));
            }
        }
        for &(p, v) in &done {
            out[p] = v;
            valid[p] = true;
        }
        pending = rest;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_neighbors() {
        let mut img = Array2::from_elem((5, 5), 10.0);
        img[[2, 2]] = 1000.0;
        let mut m = DefectMask::empty((5, 5));
        m.mask[[2, 2]] = true;
        assert_eq!(repair_defects(&img, &m).unwrap()[[2, 2]], 10.0);
        img[[1, 1]] = 8.0;
        img[[1, 2]] = 12.0;
        assert_eq!(repair_defects(&img, &m).unwrap()[[2, 2]], 10.0);
    }

    #[test]
    fn cluster_repair() {
        let mut img = Array2::from_elem((6, 6), 50.0);
        let mut m = DefectMask::empty((6, 6));
        for p in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            img[p] = 0.0;
            m.mask[p] = true;
        }
        let r = repair_defects(&img, &m).unwrap();
        assert!(r.iter().all(|&v| v == 50.0));
    }

    #[test]
    fn fully_masked_is_an_error() {
        let img = Array2::from_elem((3, 3), 1.0);
        let m = DefectMask::from_mask(Array2::from_elem((3, 3), true));
        assert!(repair_defects(&img, &m).is_err());
    }

    #[test]
    fn clean_and_hot() {
        let dark = Array2::from_shape_fn((20, 20), |(r, c)| 100.0 + ((r * 7 + c * 3) % 21) as f64 - 10.0);
        let flat = &dark + 500.0;
        assert_eq!(detect_defects(&dark, &flat, 5.0).unwrap().count(), 0);
        let mut d2 = dark.clone();
        d2[[4, 5]] = 1023.0;
        let m = detect_defects(&d2, &flat, 5.0).unwrap();
        assert!(m.mask[[4, 5]]);
        assert_eq!((m.hot_count, m.dead_count), (1, 0));
        let mut f2 = flat.clone();
        f2[[7, 7]] = 0.0;
        let m = detect_defects(&dark, &f2, 5.0).unwrap();
        assert_eq!((m.hot_count, m.dead_count), (0, 1));
    }

    #[test]
    fn uniform_maps_are_clean() {
        let dark = Array2::from_elem((8, 8), 20.0);
        let flat = Array2::from_elem((8, 8), 220.0);
        assert_eq!(detect_defects(&dark, &flat, 5.0).unwrap().count(), 0);
    }

    proptest::proptest! {
        #[test]
        fn repair_is_idempotent(
            vals in proptest::collection::vec(0.0f64..100.0, 64),
            bits in proptest::collection::vec(proptest::bool::weighted(0.3), 64),
        ) {
            let img = Array2::from_shape_vec((8, 8), vals).unwrap();
            let mut mask = Array2::from_shape_vec((8, 8), bits).unwrap();
            mask[[0, 0]] = false;
            let m = DefectMask::from_mask(mask);
            let once = repair_defects(&img, &m).unwrap();
            let twice = repair_defects(&once, &m).unwrap();
            proptest::prop_assert_eq!(once, twice);
        }
    }
}
