use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    UniformSphere,
    NestedSpheres,
    Cube,
    PointImpulse,
    /// Built from an explicit attenuation grid.
    Custom,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_sphere" => Ok(Self::UniformSphere),
            "nested_spheres" => Ok(Self::NestedSpheres),
            "cube" => Ok(Self::Cube),
            "point_impulse" => Ok(Self::PointImpulse),
            other => Err(Error::Config(format!(
                "unknown phantom kind `{other}` (expected uniform_sphere, nested_spheres, cube or point_impulse)"
            ))),
        }
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::UniformSphere => "uniform_sphere",
            Self::NestedSpheres => "nested_spheres",
            Self::Cube => "cube",
            Self::PointImpulse => "point_impulse",
            Self::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// Analytic building block of a phantom, in object coordinates (mm).
/// Attenuation of overlapping primitives adds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64, mu: f64 },
    Cube { half_edge: f64, mu: f64 },
}

impl Primitive {
    #[inline]
    fn mu_at(&self, p: [f64; 3]) -> f64 {
        match *self {
            Primitive::Sphere { center, radius, mu } => {
                let d2 = (p[0] - center[0]).powi(2)
                    + (p[1] - center[1]).powi(2)
                    + (p[2] - center[2]).powi(2);
                if d2 <= radius * radius {
                    mu
                } else {
                    0.0
                }
            }
            Primitive::Cube { half_edge, mu } => {
                if p.iter().all(|c| c.abs() <= half_edge) {
                    mu
                } else {
                    0.0
                }
            }
        }
    }

    /// Exact `mu * length` along the unit-direction ray `o + s d`.
    fn line_integral(&self, o: [f64; 3], d: [f64; 3]) -> f64 {
        match *self {
            Primitive::Sphere { center, radius, mu } => {
                let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
                let b = oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2];
                let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius;
                let disc = b * b - c;
                if disc > 0.0 {
                    2.0 * disc.sqrt() * mu
                } else {
                    0.0
                }
            }
            Primitive::Cube { half_edge, mu } => {
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a].abs() < 1e-300 {
                        if o[a].abs() > half_edge {
                            return 0.0;
                        }
                        continue;
                    }
                    let t1 = (-half_edge - o[a]) / d[a];
                    let t2 = (half_edge - o[a]) / d[a];
                    lo = lo.max(t1.min(t2));
                    hi = hi.min(t1.max(t2));
                }
                (hi - lo).max(0.0) * mu
            }
        }
    }
}

/// Attenuation phantom on a cubic grid centered on the rotation axis.
/// The grid is indexed `[z, y, x]`; voxel `(k, j, i)` sits at
/// `((i - c) h, (j - c) h, (k - c) h)` with `c = (n - 1) / 2`.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub kind: PhantomKind,
    pub attenuation: Array3<f64>,
    pub grid_spacing_mm: f64,
    primitives: Vec<Primitive>,
}

/// Offset of the inner sphere of `nested_spheres`, as a fraction of the outer
/// radius, along +x. Keeps the phantom asymmetric about the rotation axis.
pub const NESTED_INNER_OFFSET: f64 = 0.35;
/// Inner sphere radius as a fraction of the outer radius.
pub const NESTED_INNER_RADIUS: f64 = 0.4;

const SUPERSAMPLE: usize = 3;

impl Phantom {
    /// Builds one of the analytic phantoms. Sizes are fractions of the grid
    /// extent `grid_size * grid_spacing_mm`; `radius_fraction` is ignored for
    /// the point impulse.
    pub fn analytic(
        kind: PhantomKind,
        grid_size: usize,
        mu: f64,
        radius_fraction: f64,
        grid_spacing_mm: f64,
    ) -> Result<Self> {
        if grid_size < 8 {
            return Err(Error::Config(format!("phantom grid_size must be >= 8, got {grid_size}")));
        }
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::Config(format!("phantom mu must be >= 0, got {mu}")));
        }
        if !(grid_spacing_mm > 0.0) {
            return Err(Error::Config(format!(
                "phantom grid spacing must be positive, got {grid_spacing_mm}"
            )));
        }
        if kind != PhantomKind::PointImpulse && !(radius_fraction > 0.0 && radius_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "radius_fraction must lie in (0, 0.5], got {radius_fraction}"
            )));
        }
        let extent = grid_size as f64 * grid_spacing_mm;
        let radius = radius_fraction * extent;
        let primitives = match kind {
            PhantomKind::UniformSphere => vec![Primitive::Sphere {
                center: [0.0; 3],
                radius,
                mu,
            }],
            PhantomKind::NestedSpheres => vec![
                Primitive::Sphere {
                    center: [0.0; 3],
                    radius,
                    mu,
                },
                Primitive::Sphere {
                    center: [NESTED_INNER_OFFSET * radius, 0.0, 0.0],
                    radius: NESTED_INNER_RADIUS * radius,
                    mu,
                },
            ],
            PhantomKind::Cube => vec![Primitive::Cube {
                half_edge: radius,
                mu,
            }],
            PhantomKind::PointImpulse => Vec::new(),
            PhantomKind::Custom => {
                return Err(Error::Config(
                    "custom phantoms are built with Phantom::from_grid".to_string(),
                ))
            }
        };

        let attenuation = if kind == PhantomKind::PointImpulse {
            let mut a = Array3::zeros((grid_size, grid_size, grid_size));
            let c = grid_size / 2;
            a[[c, c, c]] = mu;
            a
        } else {
            voxelize(&primitives, grid_size, grid_spacing_mm)
        };

        Ok(Self {
            kind,
            attenuation,
            grid_spacing_mm,
            primitives,
        })
    }

    pub fn from_grid(attenuation: Array3<f64>, grid_spacing_mm: f64) -> Result<Self> {
        let (nz, ny, nx) = attenuation.dim();
        if nz != ny || ny != nx {
            return Err(Error::Dimension(format!(
                "phantom grid must be cubic, got {nz}x{ny}x{nx}"
            )));
        }
        if attenuation.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("phantom attenuation must be >= 0".to_string()));
        }
        Ok(Self {
            kind: PhantomKind::Custom,
            attenuation,
            grid_spacing_mm,
            primitives: Vec::new(),
        })
    }

    /// Phantom with no attenuation anywhere.
    pub fn empty(grid_size: usize, grid_spacing_mm: f64) -> Self {
        Self {
            kind: PhantomKind::Custom,
            attenuation: Array3::zeros((grid_size, grid_size, grid_size)),
            grid_spacing_mm,
            primitives: Vec::new(),
        }
    }

    pub fn grid_size(&self) -> usize {
        self.attenuation.dim().0
    }

    pub fn extent_mm(&self) -> f64 {
        self.grid_size() as f64 * self.grid_spacing_mm
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    /// Exact attenuation from the analytic description, when there is one.
    pub fn analytic_mu(&self, p: [f64; 3]) -> Option<f64> {
        if self.primitives.is_empty() {
            return None;
        }
        Some(self.primitives.iter().map(|s| s.mu_at(p)).sum())
    }

    /// Exact line integral of the analytic primitives along `o + s d`
    /// (`d` unit length); `None` for grid-only phantoms.
    pub fn analytic_line_integral(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        if self.primitives.is_empty() {
            return None;
        }
        Some(self.primitives.iter().map(|s| s.line_integral(o, d)).sum())
    }

    /// Trilinear interpolation of the attenuation grid; zero outside.
    #[inline]
    pub fn grid_mu(&self, p: [f64; 3]) -> f64 {
        let n = self.grid_size();
        let c = (n as f64 - 1.0) / 2.0;
        let h = self.grid_spacing_mm;
        let gx = p[0] / h + c;
        let gy = p[1] / h + c;
        let gz = p[2] / h + c;
        let x0 = gx.floor();
        let y0 = gy.floor();
        let z0 = gz.floor();
        if x0 < -1.0 || y0 < -1.0 || z0 < -1.0 || x0 >= n as f64 || y0 >= n as f64 || z0 >= n as f64 {
            return 0.0;
        }
        let (fx, fy, fz) = (gx - x0, gy - y0, gz - z0);
        let (xi, yi, zi) = (x0 as isize, y0 as isize, z0 as isize);
        let a = &self.attenuation;
        let at = |z: isize, y: isize, x: isize| -> f64 {
            if x < 0 || y < 0 || z < 0 || x >= n as isize || y >= n as isize || z >= n as isize {
                0.0
            } else {
                a[[z as usize, y as usize, x as usize]]
            }
        };
        let mut acc = 0.0;
        for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
            if wz == 0.0 {
                continue;
            }
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                if wy == 0.0 {
                    continue;
                }
                let w = wz * wy;
                acc += w
                    * ((1.0 - fx) * at(zi + dz, yi + dy, xi)
                        + fx * at(zi + dz, yi + dy, xi + 1));
            }
        }
        acc
    }

    /// Radius (mm) of a sphere about the grid center that contains every
    /// nonzero voxel including its interpolation footprint, plus the largest
    /// cylindrical radius and |z| of that support.
    pub fn support(&self) -> Support {
        let n = self.grid_size();
        let c = (n as f64 - 1.0) / 2.0;
        let h = self.grid_spacing_mm;
        let mut r_xy: f64 = 0.0;
        let mut z_max: f64 = 0.0;
        let mut any = false;
        for ((k, j, i), &v) in self.attenuation.indexed_iter() {
            if v == 0.0 {
                continue;
            }
            any = true;
            // trilinear footprint reaches one voxel in every direction
            let x = (i as f64 - c).abs() + 1.0;
            let y = (j as f64 - c).abs() + 1.0;
            let z = (k as f64 - c).abs() + 1.0;
            r_xy = r_xy.max((x * x + y * y).sqrt() * h);
            z_max = z_max.max(z * h);
        }
        if !any {
            return Support::default();
        }
        Support {
            radius_xy_mm: r_xy,
            half_height_mm: z_max,
        }
    }
}

/// Bounding cylinder of a phantom's nonzero region.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Support {
    pub radius_xy_mm: f64,
    pub half_height_mm: f64,
}

impl Support {
    pub fn is_empty(&self) -> bool {
        self.radius_xy_mm == 0.0 && self.half_height_mm == 0.0
    }

    pub fn bounding_radius_mm(&self) -> f64 {
        self.radius_xy_mm.hypot(self.half_height_mm)
    }
}

/// Partial-volume voxelization by SUPERSAMPLE^3 sub-samples per voxel.
fn voxelize(primitives: &[Primitive], n: usize, h: f64) -> Array3<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let s = SUPERSAMPLE;
    let offsets: Vec<f64> = (0..s).map(|k| (k as f64 + 0.5) / s as f64 - 0.5).collect();
    let norm = 1.0 / (s * s * s) as f64;
    Array3::from_shape_fn((n, n, n), |(k, j, i)| {
        let x = (i as f64 - c) * h;
        let y = (j as f64 - c) * h;
        let z = (k as f64 - c) * h;
        let mut acc = 0.0;
        for &oz in &offsets {
            for &oy in &offsets {
                for &ox in &offsets {
                    let p = [x + ox * h, y + oy * h, z + oz * h];
                    acc += primitives.iter().map(|s| s.mu_at(p)).sum::<f64>();
                }
            }
        }
        acc * norm
    })
}
