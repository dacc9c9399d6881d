use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::fringe_scale_ratio;
use crate::imgops::Image;

/// Lower bound applied to enhanced transmission so the log stays finite.
pub const MIN_TRANSMISSION: f64 = 1e-6;

/// Five-point Laplacian with replicated borders.
pub fn laplacian(img: &Image) -> Image {
    let (rows, cols) = img.dim();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let up = img[[r.saturating_sub(1), c]];
        let down = img[[(r + 1).min(rows - 1), c]];
        let left = img[[r, c.saturating_sub(1)]];
        let right = img[[r, (c + 1).min(cols - 1)]];
        up + down + left + right - 4.0 * img[[r, c]]
    })
}

/// Propagation-fringe surrogate: `T - alpha * lap(T)`, kept strictly positive.
/// `alpha` is in pixel^2.
pub fn apply_edge_enhancement(transmission: &Image, alpha: f64) -> Result<Image> {
    if !(alpha >= 0.0) {
        return Err(Error::Domain(format!("edge alpha must be >= 0, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(transmission.clone());
    }
    let lap = laplacian(transmission);
    Ok(ndarray::Zip::from(transmission)
        .and(&lap)
        .map_collect(|&t, &l| (t - alpha * l).max(MIN_TRANSMISSION)))
}

/// Edge strength for an object-to-detector distance, scaled from a reference
/// strength by the square-root fringe-width law.
pub fn edge_alpha_for_distance(alpha_ref: f64, reference_mm: f64, distance_mm: f64) -> Result<f64> {
    Ok(alpha_ref * fringe_scale_ratio(reference_mm, distance_mm)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_alpha_is_identity() {
        let img = Array2::from_shape_fn((5, 6), |(r, c)| 0.1 + 0.01 * (r * c) as f64);
        assert_eq!(apply_edge_enhancement(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn constant_image_unchanged() {
        let img = Array2::from_elem((7, 7), 0.42);
        assert_eq!(apply_edge_enhancement(&img, 3.0).unwrap(), img);
    }

    #[test]
    fn step_edge_overshoot() {
        // columns < 4 at 0.3, columns >= 4 at 0.8
        let (a, h, alpha) = (0.3, 0.5, 0.2);
        let img = Array2::from_shape_fn((5, 8), |(_, c)| if c < 4 { a } else { a + h });
        let out = apply_edge_enhancement(&img, alpha).unwrap();
        assert!((out[[2, 3]] - (a - alpha * h)).abs() < 1e-12);
        assert!((out[[2, 4]] - (a + h + alpha * h)).abs() < 1e-12);
        assert_eq!(out[[2, 0]], a);
        assert_eq!(out[[2, 7]], a + h);
    }

    #[test]
    fn output_stays_positive() {
        let img = Array2::from_shape_fn((5, 5), |(r, c)| if r == 2 && c == 2 { 0.01 } else { 1.0 });
        let out = apply_edge_enhancement(&img, 10.0).unwrap();
        assert!(out.iter().all(|&v| v >= MIN_TRANSMISSION));
        assert!(apply_edge_enhancement(&img, -1.0).is_err());
    }

    #[test]
    fn alpha_scales_with_root_distance() {
        let a = edge_alpha_for_distance(1.0, 25.0, 100.0).unwrap();
        assert!((a - 2.0).abs() < 1e-12);
    }
}
