//! Resampling primitives for 2D detector images.

use ndarray::Array2;

/// A detector image indexed `[row, col]`.
pub type Image = Array2<f64>;

/// Bilinear sample at fractional (row, col); `None` outside the pixel grid.
#[inline]
pub fn bilinear(img: &Image, row: f64, col: f64) -> Option<f64> {
    let (rows, cols) = img.dim();
    if !(row >= 0.0 && col >= 0.0) {
        return None;
    }
    let r_max = (rows - 1) as f64;
    let c_max = (cols - 1) as f64;
    if row > r_max || col > c_max {
        return None;
    }
    let r0 = (row.floor() as usize).min(rows.saturating_sub(2));
    let c0 = (col.floor() as usize).min(cols.saturating_sub(2));
    let fr = row - r0 as f64;
    let fc = col - c0 as f64;
    if rows == 1 || cols == 1 {
        // Degenerate strip: fall back to 1D interpolation.
        let r1 = (r0 + 1).min(rows - 1);
        let c1 = (c0 + 1).min(cols - 1);
        let a = img[[r0, c0]] * (1.0 - fc) + img[[r0, c1]] * fc;
        let b = img[[r1, c0]] * (1.0 - fc) + img[[r1, c1]] * fc;
        return Some(a * (1.0 - fr) + b * fr);
    }
    let a = img[[r0, c0]] * (1.0 - fc) + img[[r0, c0 + 1]] * fc;
    let b = img[[r0 + 1, c0]] * (1.0 - fc) + img[[r0 + 1, c0 + 1]] * fc;
    Some(a * (1.0 - fr) + b * fr)
}


/// Rotates image content by `angle_deg` about the image center: output pixel
/// `x` samples the input at `R(-angle) (x - c) + c`, in (col, row) pixel
/// coordinates. Pixels mapping outside the input take `fill`.
pub fn rotate(img: &Image, angle_deg: f64, fill: f64) -> Image {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (rows, cols) = img.dim();
    let r0 = (rows as f64 - 1.0) / 2.0;
    let c0 = (cols as f64 - 1.0) / 2.0;
    let (s, c) = angle_deg.to_radians().sin_cos();
    Array2::from_shape_fn((rows, cols), |(r, col)| {
        let dx = col as f64 - c0;
        let dy = r as f64 - r0;
        // inverse rotation
        let sx = c * dx + s * dy + c0;
        let sy = -s * dx + c * dy + r0;
        sample_or_fill(img, sy, sx, fill)
    })
}

/// Translates image content by `dx` columns and `dy` rows.
pub fn shift(img: &Image, dx: f64, dy: f64, fill: f64) -> Image {
    let (rows, cols) = img.dim();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        sample_or_fill(img, r as f64 - dy, c as f64 - dx, fill)
    })
}

/// Mirrors columns: `out[r, c] = img[r, cols - 1 - c]`.
pub fn mirror_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().to_owned()
}

/// Separable Gaussian blur with edge replication. `sigma <= 0` copies.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if !(sigma > 0.0) {
        return img.clone();
    }
    let half = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-half..=half).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= total);
    let (rows, cols) = img.dim();
    let pass = |src: &Image, along_rows: bool| {
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let k = i as isize - half;
                    let v = if along_rows {
                        src[[(r as isize + k).clamp(0, rows as isize - 1) as usize, c]]
                    } else {
                        src[[r, (c as isize + k).clamp(0, cols as isize - 1) as usize]]
                    };
                    w * v
                })
                .sum()
        })
    };
    pass(&pass(img, false), true)
}

#[inline]
fn sample_or_fill(img: &Image, row: f64, col: f64, fill: f64) -> f64 {
    const EDGE: f64 = 1e-9;
    let (rows, cols) = img.dim();
    // snap coordinates that land on the border within rounding
    let row = if row > -EDGE && row < 0.0 { 0.0 } else { row };
    let col = if col > -EDGE && col < 0.0 { 0.0 } else { col };
    let rmax = (rows - 1) as f64;
    let cmax = (cols - 1) as f64;
    let row = if row > rmax && row < rmax + EDGE { rmax } else { row };
    let col = if col > cmax && col < cmax + EDGE { cmax } else { col };
    bilinear(img, row, col).unwrap_or(fill)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_is_exact_on_linear_images() {
        let img = Array2::from_shape_fn((5, 7), |(r, c)| 2.0 * r as f64 + 3.0 * c as f64 + 1.0);
        let v = bilinear(&img, 1.25, 4.5).unwrap();
        assert!((v - (2.0 * 1.25 + 3.0 * 4.5 + 1.0)).abs() < 1e-12);
        assert_eq!(bilinear(&img, 4.0, 6.0), Some(img[[4, 6]]));
        assert!(bilinear(&img, -0.1, 1.0).is_none());
        assert!(bilinear(&img, 1.0, 6.01).is_none());
    }

    #[test]
    fn rotate_zero_and_full_turn() {
        let img = Array2::from_shape_fn((6, 6), |(r, c)| (r * 6 + c) as f64);
        assert_eq!(rotate(&img, 0.0, 1.0), img);
        let back = rotate(&rotate(&img, 90.0, -1.0), -90.0, -1.0);
        for (a, b) in back.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn shift_integer_moves_content() {
        let mut img = Array2::zeros((4, 6));
        img[[1, 2]] = 1.0;
        let s = shift(&img, 2.0, 1.0, 0.0);
        assert_eq!(s[[2, 4]], 1.0);
        assert_eq!(s.sum(), 1.0);
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let flat = Array2::from_elem((9, 11), 3.5);
        assert!(gaussian_blur(&flat, 1.3).iter().all(|v| (v - 3.5).abs() < 1e-12));
        let mut img = Array2::zeros((21, 21));
        img[[10, 10]] = 1.0;
        let b = gaussian_blur(&img, 1.0);
        assert!((b.sum() - 1.0).abs() < 1e-12);
        assert_eq!(b[[10, 9]], b[[9, 10]]);
        assert!(b[[10, 10]] > b[[10, 11]]);
        assert_eq!(gaussian_blur(&img, 0.0), img);
    }

    #[test]
    fn mirror_flips_columns() {
        let img = Array2::from_shape_fn((2, 3), |(_, c)| c as f64);
        let m = mirror_horizontal(&img);
        assert_eq!(m.row(0).to_vec(), vec![2.0, 1.0, 0.0]);
    }
}
