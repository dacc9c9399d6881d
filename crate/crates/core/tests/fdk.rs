use microct::align::AlignmentEstimate;
use microct::geometry::{ConeBeamGeometry, DetectorSpec, ScanConfig};
use microct::recon::{fdk_reconstruct, reconstruct_line_integrals, FilterSpec, GridSpec, Volume};
use microct::simulator::{forward_project, Phantom, PhantomKind, ProjectorConfig, Sampling};
use microct::Image;

const H: f64 = 0.1;

fn setup(rows: usize) -> (ConeBeamGeometry, DetectorSpec) {
    let geom = ConeBeamGeometry::new(750.0, 560.0).unwrap();
    let det = DetectorSpec::new(rows, 81, 1000.0 * H * geom.magnification(), 1023.0).unwrap();
    (geom, det)
}

fn project(p: &Phantom, geom: &ConeBeamGeometry, det: &DetectorSpec, views: usize) -> (Vec<Image>, Vec<f64>) {
    let angles = ScanConfig::full_rotation(360.0 / views as f64).unwrap().angles_deg().unwrap();
    let cfg = ProjectorConfig {
        step_fraction: 0.5,
        sampling: Sampling::Analytic,
    };
    (forward_project(p, geom, det, &angles, &cfg).unwrap(), angles)
}

/// Interior mean, interior RMSE and background mean |mu| relative to mu.
fn sphere_scores(v: &Volume, radius: f64, mu: f64) -> (f64, f64, f64) {
    let (nx, ny, nz) = v.shape();
    let (mut si, mut ss, mut ni, mut sb, mut nb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = v.position(i, j, k);
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                let x = v.data[[k, j, i]];
                if r < 0.8 * radius {
                    si += x;
                    ss += (x - mu) * (x - mu);
                    ni += 1.0;
                } else if r > 1.2 * radius && r < 0.45 * nx as f64 * H {
                    sb += x.abs();
                    nb += 1.0;
                }
            }
        }
    }
    (si / ni / mu, (ss / ni).sqrt() / mu, sb / nb / mu)
}

#[test]
fn uniform_sphere_is_recovered() {
    let (geom, det) = setup(81);
    let mu = 0.05;
    let phantom = Phantom::analytic(PhantomKind::UniformSphere, 64, mu, 0.3, H).unwrap();
    let (proj, angles) = project(&phantom, &geom, &det, 360);
    let grid = GridSpec::cube(64, H);
    let vol = fdk_reconstruct(&proj, &angles, &geom, &det, &AlignmentEstimate::identity(), &grid, &FilterSpec::ram_lak()).unwrap();
    let (mean, rmse, bg) = sphere_scores(&vol, 0.3 * 6.4, mu);
    eprintln!("mean {mean:.4} rmse {rmse:.4} bg {bg:.4}");
    assert!((mean - 1.0).abs() < 0.05);
    assert!(rmse < 0.05);
    assert!(bg < 0.05);
}

#[test]
fn reconstruction_is_linear() {
    let (geom, det) = setup(33);
    let phantom = Phantom::analytic(PhantomKind::NestedSpheres, 32, 0.05, 0.3, H).unwrap();
    let (proj, angles) = project(&phantom, &geom, &det, 60);
    let p: Vec<Image> = proj.iter().map(|t| t.mapv(|v| -v.ln())).collect();
    let grid = GridSpec::cube(32, H);
    let spec = FilterSpec::hann();
    let a = 2.5;
    let v1 = reconstruct_line_integrals(&p, &angles, &geom, &det, 0.0, &grid, &spec).unwrap();
    let pa: Vec<Image> = p.iter().map(|x| x * a).collect();
    let v2 = reconstruct_line_integrals(&pa, &angles, &geom, &det, 0.0, &grid, &spec).unwrap();
    let d = (&v2.data - &(&v1.data * a)).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(d < 1e-9, "{d}");
}

fn sphere_volume(views: usize) -> (Volume, f64) {
    let (geom, det) = setup(81);
    let mu = 0.05;
    let phantom = Phantom::analytic(PhantomKind::UniformSphere, 64, mu, 0.3, H).unwrap();
    let (proj, angles) = project(&phantom, &geom, &det, views);
    let grid = GridSpec::cube(64, H);
    let vol = fdk_reconstruct(&proj, &angles, &geom, &det, &AlignmentEstimate::identity(), &grid, &FilterSpec::ram_lak()).unwrap();
    (vol, mu)
}

#[test]
fn sphere_passes_at_600_views() {
    let (vol, mu) = sphere_volume(600);
    let (mean, rmse, bg) = sphere_scores(&vol, 0.3 * 6.4, mu);
    assert!((mean - 1.0).abs() < 0.05, "{mean}");
    assert!(rmse < 0.05, "{rmse}");
    assert!(bg < 0.05, "{bg}");
}

#[test]
fn more_views_never_increase_interior_rmse() {
    let rmse: Vec<f64> = [150, 300, 600]
        .iter()
        .map(|&n| {
            let (vol, mu) = sphere_volume(n);
            sphere_scores(&vol, 0.3 * 6.4, mu).1
        })
        .collect();
    eprintln!("interior rmse {rmse:?}");
    assert!(rmse[1] <= rmse[0] && rmse[2] <= rmse[1], "{rmse:?}");
}

#[test]
fn central_slice_is_radially_symmetric() {
    let (vol, mu) = sphere_volume(360);
    let k = vol.shape().2 / 2;
    // annulus well inside the sphere, in the slice through its center
    let (mut s, mut ss, mut n) = (0.0, 0.0, 0.0);
    let (nx, ny, _) = vol.shape();
    for j in 0..ny {
        for i in 0..nx {
            let p = vol.position(i, j, k);
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if (0.9..1.5).contains(&r) {
                let x = vol.data[[k, j, i]];
                s += x;
                ss += x * x;
                n += 1.0;
            }
        }
    }
    let std = (ss / n - (s / n).powi(2)).max(0.0).sqrt();
    eprintln!("annulus std {:.4} of mu over {n} voxels", std / mu);
    assert!(std < 0.03 * mu);
}
