use microct::align::{correct_tilt, estimate_alignment, AlignConfig};
use microct::geometry::{ConeBeamGeometry, DetectorSpec};
use microct::imgops::{rotate, shift};
use microct::simulator::{forward_project, Phantom, PhantomKind, ProjectorConfig, Sampling};
use microct::Image;

fn cube_views() -> (Vec<Image>, Vec<f64>) {
    let geom = ConeBeamGeometry::new(750.0, 560.0).unwrap();
    let det = DetectorSpec::new(64, 80, 100.0, 1023.0).unwrap();
    let phantom = Phantom::analytic(PhantomKind::Cube, 32, 0.5, 0.3, 0.125).unwrap();
    let angles: Vec<f64> = (0..10).map(|k| 36.0 * k as f64).collect();
    let cfg = ProjectorConfig {
        step_fraction: 0.5,
        sampling: Sampling::Analytic,
    };
    (forward_project(&phantom, &geom, &det, &angles, &cfg).unwrap(), angles)
}

#[test]
fn correcting_the_estimate_leaves_no_tilt() {
    let (ideal, angles) = cube_views();
    let tilted: Vec<Image> = ideal.iter().map(|p| rotate(&shift(p, 2.0, 0.0, 1.0), 1.5, 1.0)).collect();
    let cfg = AlignConfig::default();
    let est = estimate_alignment(&tilted, &angles, &cfg).unwrap();
    assert!((est.tilt_deg - 1.5).abs() < 0.1, "{est:?}");
    assert!((est.center_offset_px - 2.0).abs() < 0.25, "{est:?}");
    let fixed = correct_tilt(&tilted, est.tilt_deg).unwrap();
    let again = estimate_alignment(&fixed, &angles, &cfg).unwrap();
    assert!(again.tilt_deg.abs() < 0.1, "{again:?}");
}

#[test]
fn negative_tilts_are_recovered() {
    let (ideal, angles) = cube_views();
    for tilt in [-0.5, -2.0] {
        let tilted: Vec<Image> = ideal.iter().map(|p| rotate(&shift(p, -1.0, 0.0, 1.0), tilt, 1.0)).collect();
        let est = estimate_alignment(&tilted, &angles, &AlignConfig::default()).unwrap();
        assert!((est.tilt_deg - tilt).abs() < 0.1, "{tilt}: {est:?}");
        assert!((est.center_offset_px + 1.0).abs() < 0.25, "{tilt}: {est:?}");
    }
}
