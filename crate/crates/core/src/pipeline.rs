//! File-based pipeline stages. Each stage reads only what earlier stages
//! wrote into the run directory plus the configuration, so any stage can be
//! rerun on its own.
//!
//! ```text
//! run/
//!   raw/        frames, timing.tsv, ref_{dark,flat}_{start,end}, references.txt
//!   truth/      transmission, dark0, flat0, gain, raw_flat_slope, defects.tsv, model.txt
//!   corrected/  projections, timing.tsv, calibration.txt, defects.tsv
//!   recon/      volume.raw, volume.meta, slice_*.pgm, slices.tsv, manifest.txt, config.resolved.toml
//!   plots/      qef_vs_index.tsv, std_vs_time.tsv, *.pgm
//! ```

use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::align::{estimate_alignment, AlignmentEstimate};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::DetectorSpec;
use crate::imgops::Image;
use crate::io::{
    parse_key_values, read_stack, read_table, read_text, read_timing, write_pgm16, write_stack, write_table,
    write_text, write_timing, write_volume, central_slices, Dtype, Layout, StackHeader, StackPaths, StackReader,
    StackWriter, TimingRow,
};
use crate::preprocess::{
    average_frames, calibrate, compute_qef, correct_projection, detect_defects, qef_estimator_std, repair_defects,
    run_adaptive_acquisition, DefectMask, DeliveredProjection,
};
use crate::recon::{fdk_reconstruct, Volume};
use crate::simulator::{
    check_field_of_view, simulate_end_references, simulate_start_references, DegradationModel, Phantom,
    RawReferences, Simulator,
};
use crate::stats;

pub const FRAMES: &str = "frames";
pub const PROJECTIONS: &str = "projections";
pub const TIMING: &str = "timing.tsv";
pub const REFERENCE_STACKS: [&str; 4] = ["ref_dark_start", "ref_flat_start", "ref_dark_end", "ref_flat_end"];
pub const REFERENCE_INFO: &str = "references.txt";

/// Subdirectories of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn raw(&self) -> PathBuf {
        self.root.join("raw")
    }

    pub fn truth(&self) -> PathBuf {
        self.root.join("truth")
    }

    pub fn corrected(&self) -> PathBuf {
        self.root.join("corrected")
    }

    pub fn recon(&self) -> PathBuf {
        self.root.join("recon")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

pub fn build_phantom(cfg: &PipelineConfig) -> Result<Phantom> {
    let p = &cfg.phantom;
    Phantom::analytic(p.kind, p.grid_size, p.mu, p.radius_fraction, cfg.phantom_spacing_mm()?)
}

pub fn build_simulator(cfg: &PipelineConfig) -> Result<Simulator> {
    let detector = cfg.detector;
    Ok(Simulator {
        geometry: cfg.geometry()?,
        detector,
        model: DegradationModel::generate(&detector, &cfg.simulate.degradation, cfg.seed)?,
        projector: cfg.simulate.projector,
        edge_alpha_px2: cfg.edge_alpha_px2()?,
        noise: cfg.simulate.noise,
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub projections: usize,
    pub frames: usize,
    pub t_end_s: f64,
    pub saturated: usize,
}

/// Simulates start references, the projection frames (closed loop unless a
/// fixed frame count is configured) and end references at the final clock.
pub fn simulate(cfg: &PipelineConfig, run: &RunLayout) -> Result<SimulateSummary> {
    cfg.validate()?;
    let sim = build_simulator(cfg)?;
    let phantom = build_phantom(cfg)?;
    let det = sim.detector;
    check_field_of_view(&phantom, &sim.geometry, &det)?;
    let angles = cfg.scan()?.angles_deg()?;
    let raw_dir = run.raw();
    let truth_dir = run.truth();
    let pitch = det.pixel_pitch_um;
    let dtype = cfg.output.dtype;
    let n_ref = cfg.simulate.reference_frames;

    let (dark0, flat0) = simulate_start_references(&sim, n_ref)?;
    write_stack(&raw_dir, REFERENCE_STACKS[0], &dark0, pitch, dtype)?;
    write_stack(&raw_dir, REFERENCE_STACKS[1], &flat0, pitch, dtype)?;
    let mask = detect_defects(&average_frames(&dark0)?.0, &average_frames(&flat0)?.0, cfg.defects.k_mad)?;
    drop((dark0, flat0));

    let mut frames = StackWriter::create(&raw_dir, FRAMES, det.rows, det.cols, pitch, dtype, Layout::Concatenated)?;
    let mut truth = StackWriter::create(&truth_dir, "transmission", det.rows, det.cols, pitch, Dtype::F64le, Layout::Concatenated)?;
    let mut timing: Vec<TimingRow> = Vec::new();
    let mut current: Option<(usize, Image)> = None;
    let mut ideal_at = |a: usize| -> Result<Image> {
        if current.as_ref().map(|c| c.0) != Some(a) {
            let img = sim.ideal_projections(&phantom, &angles[a..=a])?.remove(0);
            truth.push(&img)?;
            current = Some((a, img));
        }
        Ok(current.as_ref().expect("set above").1.clone())
    };
    let mut record = |p: DeliveredProjection, timing: &mut Vec<TimingRow>| -> Result<()> {
        for (f, &t) in p.frames.iter().zip(&p.times) {
            frames.push(f)?;
            timing.push(TimingRow {
                index: timing.len(),
                angle_deg: angles[p.angle_index],
                cumulative_time_s: t,
                frames_averaged: p.frames.len(),
                qef_measured: p.qef,
            });
        }
        Ok(())
    };

    let mut saturated = 0;
    match cfg.simulate.frames_per_projection {
        None => {
            let log = run_adaptive_acquisition(
                angles.len(),
                &cfg.qef,
                &mask,
                |a, t, k| sim.frame(&ideal_at(a)?, t, k),
                |p| record(p, &mut timing),
            )?;
            saturated = log.saturated.iter().filter(|&&s| s).count();
            log::info!(
                "controller: N from {} to {} over {} projections",
                log.frames_used.first().copied().unwrap_or(0),
                log.frames_used.last().copied().unwrap_or(0),
                angles.len()
            );
        }
        Some(n) => {
            let mut clock = 0.0;
            let mut k = 0u64;
            for a in 0..angles.len() {
                let ideal = ideal_at(a)?;
                let mut fs = Vec::with_capacity(n);
                let mut ts = Vec::with_capacity(n);
                for _ in 0..n {
                    clock += 1.0;
                    fs.push(sim.frame(&ideal, clock, k)?);
                    ts.push(clock);
                    k += 1;
                }
                let average = repair_defects(&average_frames(&fs)?.0, &mask)?;
                let qef = measured_qef(&average, cfg.qef.band_rows.clone())?;
                record(
                    DeliveredProjection {
                        angle_index: a,
                        frames: fs,
                        times: ts,
                        average,
                        qef,
                        saturated: false,
                    },
                    &mut timing,
                )?;
            }
        }
    }
    frames.finish()?;
    truth.finish()?;
    write_timing(&raw_dir.join(TIMING), &timing)?;

    let t_end_s = timing.last().map(|r| r.cumulative_time_s).unwrap_or(0.0);
    let (dark_end, flat_end) = simulate_end_references(&sim, n_ref, t_end_s)?;
    write_stack(&raw_dir, REFERENCE_STACKS[2], &dark_end, pitch, dtype)?;
    write_stack(&raw_dir, REFERENCE_STACKS[3], &flat_end, pitch, dtype)?;
    write_text(
        &raw_dir.join(REFERENCE_INFO),
        &format!("t_end_s={t_end_s:?}\nframes={n_ref}\n"),
    )?;
    write_truth(cfg, &sim, &truth_dir)?;
    Ok(SimulateSummary {
        projections: angles.len(),
        frames: timing.len(),
        t_end_s,
        saturated,
    })
}

fn measured_qef(avg: &Image, band: Range<usize>) -> Result<f64> {
    match compute_qef(avg, band) {
        Ok(q) => Ok(q),
        Err(Error::DegenerateBand) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

fn write_truth(cfg: &PipelineConfig, sim: &Simulator, dir: &Path) -> Result<()> {
    let m = &sim.model;
    let pitch = sim.detector.pixel_pitch_um;
    for (name, img) in [
        ("dark0", &m.dark0),
        ("flat0", &m.flat0),
        ("gain", &m.gain),
        ("raw_flat_slope", &m.raw_flat_slope()),
    ] {
        write_stack(dir, name, std::slice::from_ref(img), pitch, Dtype::F64le)?;
    }
    let rows: Vec<Vec<String>> = m
        .hot_pixels
        .iter()
        .map(|p| (p, "hot"))
        .chain(m.dead_pixels.iter().map(|p| (p, "dead")))
        .map(|(&(r, c), kind)| vec![r.to_string(), c.to_string(), kind.to_string()])
        .collect();
    write_table(&dir.join("defects.tsv"), &["row", "col", "kind"], &rows)?;
    let text = format!(
        "seed={}\nk_dark_per_s={:?}\nk_flat_per_s={:?}\nedge_alpha_px2={:?}\nphantom={}\nmu_per_mm={:?}\nphantom_spacing_mm={:?}\n",
        cfg.seed,
        m.k_dark,
        m.k_flat,
        sim.edge_alpha_px2,
        cfg.phantom.kind,
        cfg.phantom.mu,
        cfg.phantom_spacing_mm()?
    );
    write_text(&dir.join("model.txt"), &text)
}

fn check_detector(h: &StackHeader, det: &DetectorSpec, what: &str) -> Result<()> {
    if (h.rows, h.cols) != (det.rows, det.cols) {
        return Err(Error::Dimension(format!(
            "{what} is {}x{} but the configured detector is {}x{}",
            h.rows, h.cols, det.rows, det.cols
        )));
    }
    if (h.pixel_pitch_um - det.pixel_pitch_um).abs() > 1e-9 * det.pixel_pitch_um {
        return Err(Error::Dimension(format!(
            "{what} has pixel pitch {} um but the configured detector has {} um",
            h.pixel_pitch_um, det.pixel_pitch_um
        )));
    }
    Ok(())
}

/// Loads the four reference stacks, naming every missing file at once.
pub fn read_references(raw_dir: &Path) -> Result<RawReferences> {
    let mut expected: Vec<PathBuf> = REFERENCE_STACKS
        .iter()
        .map(|n| StackPaths::new(raw_dir, n).header)
        .collect();
    expected.push(raw_dir.join(REFERENCE_INFO));
    let missing: Vec<String> = expected
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFile {
            path: raw_dir.to_path_buf(),
            what: format!("reference files not found: {}", missing.join(", ")),
        });
    }
    let info = parse_key_values(&read_text(&raw_dir.join(REFERENCE_INFO), "reference info")?)?;
    let t_end_s: f64 = info
        .iter()
        .find(|(k, _)| k == "t_end_s")
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| Error::Header {
            field: "t_end_s".into(),
            reason: format!("missing or not a number in {}", raw_dir.join(REFERENCE_INFO).display()),
        })?;
    let load = |name: &str| -> Result<Vec<Image>> { Ok(read_stack(raw_dir, name)?.1) };
    Ok(RawReferences {
        dark_start: load(REFERENCE_STACKS[0])?,
        flat_start: load(REFERENCE_STACKS[1])?,
        dark_end: load(REFERENCE_STACKS[2])?,
        flat_end: load(REFERENCE_STACKS[3])?,
        t_end_s,
    })
}

/// Frame ranges sharing one angle, in acquisition order.
pub fn projection_groups(timing: &[TimingRow]) -> Vec<Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=timing.len() {
        if i == timing.len() || timing[i].angle_deg != timing[start].angle_deg {
            groups.push(start..i);
            start = i;
        }
    }
    groups
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSummary {
    pub projections: usize,
    pub defects: usize,
    pub k_dark: f64,
    pub k_flat: f64,
    pub fallback_pixels: usize,
}

/// Calibrates from the references, then averages, repairs and flat-field
/// corrects each projection group, streaming the result to disk.
pub fn preprocess(cfg: &PipelineConfig, run: &RunLayout) -> Result<PreprocessSummary> {
    cfg.validate()?;
    let raw_dir = run.raw();
    let out_dir = run.corrected();
    let det = cfg.detector;
    let refs = read_references(&raw_dir)?;
    let cal = calibrate(&refs, &cfg.defects, cfg.preprocess.static_flatfield)?;
    drop(refs);
    let reader = StackReader::open(&raw_dir, FRAMES)?;
    check_detector(&reader.header, &det, "raw frame stack")?;
    let timing = read_timing(&raw_dir.join(TIMING))?;
    if timing.len() != reader.len() {
        return Err(Error::Dimension(format!(
            "timing sidecar lists {} frames but the stack holds {}",
            timing.len(),
            reader.len()
        )));
    }
    if cal.mask.mask.dim() != (det.rows, det.cols) {
        return Err(Error::Dimension("reference frames do not match the detector".into()));
    }

    let groups = projection_groups(&timing);
    let band = cfg.qef.band_rows.clone();
    let mut writer = StackWriter::create(&out_dir, PROJECTIONS, det.rows, det.cols, det.pixel_pitch_um, cfg.output.dtype, Layout::Concatenated)?;
    let mut rows = Vec::with_capacity(groups.len());
    let mut fallback = 0;
    let chunk = 4 * rayon::current_num_threads();
    for part in groups.chunks(chunk) {
        let done: Vec<Result<_>> = part
            .par_iter()
            .map(|g| {
                let frames = reader.read_range(g.clone())?;
                let times: Vec<f64> = timing[g.clone()].iter().map(|r| r.cumulative_time_s).collect();
                correct_projection(&frames, &times, &cal, band.clone())
            })
            .collect();
        for (g, p) in part.iter().zip(done) {
            let p = p?;
            writer.push(&p.image)?;
            fallback += p.fallback_pixels;
            rows.push(TimingRow {
                index: rows.len(),
                angle_deg: timing[g.start].angle_deg,
                cumulative_time_s: p.time_s,
                frames_averaged: p.frames_averaged,
                qef_measured: p.qef,
            });
        }
    }
    writer.finish()?;
    write_timing(&out_dir.join(TIMING), &rows)?;

    let defect_rows: Vec<Vec<String>> = cal
        .mask
        .mask
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|((r, c), _)| vec![r.to_string(), c.to_string()])
        .collect();
    write_table(&out_dir.join("defects.tsv"), &["row", "col"], &defect_rows)?;
    let text = format!(
        "static_flatfield={}\nt_end_s={:?}\nk_dark_summary={:?}\nk_flat_summary={:?}\ndefects={}\nhot={}\ndead={}\nfallback_pixels={}\n",
        cfg.preprocess.static_flatfield,
        cal.refs.t_end_s,
        cal.slopes.k_dark_summary,
        cal.slopes.k_flat_summary,
        cal.mask.count(),
        cal.mask.hot_count,
        cal.mask.dead_count,
        fallback
    );
    write_text(&out_dir.join("calibration.txt"), &text)?;
    log::info!(
        "preprocess: {} projections, {} defects, K_D {:.3e}/s, K_F {:.3e}/s",
        rows.len(),
        cal.mask.count(),
        cal.slopes.k_dark_summary,
        cal.slopes.k_flat_summary
    );
    Ok(PreprocessSummary {
        projections: rows.len(),
        defects: cal.mask.count(),
        k_dark: cal.slopes.k_dark_summary,
        k_flat: cal.slopes.k_flat_summary,
        fallback_pixels: fallback,
    })
}

/// Where the alignment used for a reconstruction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentSource {
    Skipped,
    Configured,
    Estimated,
}

impl AlignmentSource {
    fn as_str(self) -> &'static str {
        match self {
            Self::Skipped => "skipped",
            Self::Configured => "configured",
            Self::Estimated => "estimated",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructSummary {
    pub alignment: AlignmentEstimate,
    pub source: AlignmentSource,
    pub volume: Volume,
}

/// Loads the corrected stack, aligns it (unless skipped or given) and runs
/// FDK. Writes the volume, central slices and a manifest.
pub fn reconstruct(cfg: &PipelineConfig, run: &RunLayout) -> Result<ReconstructSummary> {
    cfg.validate()?;
    let in_dir = run.corrected();
    let out_dir = run.recon();
    let det = cfg.detector;
    let geom = cfg.geometry()?;
    let (header, projections) = read_stack(&in_dir, PROJECTIONS)?;
    check_detector(&header, &det, "corrected stack")?;
    let timing = read_timing(&in_dir.join(TIMING))?;
    if timing.len() != projections.len() {
        return Err(Error::Dimension(format!(
            "timing sidecar lists {} projections but the stack holds {}",
            timing.len(),
            projections.len()
        )));
    }
    let expected = cfg.scan()?.num_projections()?;
    if expected != projections.len() {
        return Err(Error::Dimension(format!(
            "scan configuration expects {expected} projections but the stack holds {}",
            projections.len()
        )));
    }
    let angles: Vec<f64> = timing.iter().map(|r| r.angle_deg).collect();

    let t0 = Instant::now();
    let (alignment, source) = if cfg.align.skip {
        (AlignmentEstimate::identity(), AlignmentSource::Skipped)
    } else if cfg.align.tilt_deg.is_some() || cfg.align.center_offset_px.is_some() {
        let a = AlignmentEstimate {
            tilt_deg: cfg.align.tilt_deg.unwrap_or(0.0),
            center_offset_px: cfg.align.center_offset_px.unwrap_or(0.0),
            confidence: 1.0,
        };
        a.validate()?;
        (a, AlignmentSource::Configured)
    } else {
        (estimate_alignment(&projections, &angles, &cfg.align.search)?, AlignmentSource::Estimated)
    };
    let align_s = t0.elapsed().as_secs_f64();
    log::info!(
        "alignment ({}): tilt {:.3} deg, offset {:.3} px, confidence {:.3}",
        source.as_str(),
        alignment.tilt_deg,
        alignment.center_offset_px,
        alignment.confidence
    );

    let t1 = Instant::now();
    let grid = cfg.grid()?;
    let volume = fdk_reconstruct(&projections, &angles, &geom, &det, &alignment, &grid, &cfg.filter)?;
    let fdk_s = t1.elapsed().as_secs_f64();
    drop(projections);

    write_volume(&out_dir, &volume)?;
    let mut slice_rows = Vec::new();
    for (name, img) in central_slices(&volume) {
        let (lo, hi) = write_pgm16(&out_dir.join(format!("slice_{name}.pgm")), &img, None)?;
        slice_rows.push(vec![name.to_string(), format!("{lo:?}"), format!("{hi:?}")]);
    }
    write_table(&out_dir.join("slices.tsv"), &["slice", "window_lo", "window_hi"], &slice_rows)?;

    let mut resolved = cfg.clone();
    resolved.align.skip = false;
    resolved.align.tilt_deg = Some(alignment.tilt_deg);
    resolved.align.center_offset_px = Some(alignment.center_offset_px);
    write_text(&out_dir.join("config.resolved.toml"), &resolved.to_toml()?)?;

    let (nx, ny, nz) = volume.shape();
    let mut m = String::new();
    writeln!(m, "config_sha256={}", cfg.hash()?).expect("string write");
    writeln!(m, "alignment_source={}", source.as_str()).expect("string write");
    writeln!(m, "tilt_deg={:?}", alignment.tilt_deg).expect("string write");
    writeln!(m, "center_offset_px={:?}", alignment.center_offset_px).expect("string write");
    writeln!(m, "alignment_confidence={:?}", alignment.confidence).expect("string write");
    writeln!(m, "projections={}", angles.len()).expect("string write");
    writeln!(m, "grid={nx}x{ny}x{nz}").expect("string write");
    writeln!(m, "voxel_size_mm={:?}", grid.voxel_size_mm).expect("string write");
    writeln!(m, "filter={:?}", cfg.filter.kind).expect("string write");
    writeln!(m, "align_seconds={align_s:.3}").expect("string write");
    writeln!(m, "fdk_seconds={fdk_s:.3}").expect("string write");
    write_text(&out_dir.join("manifest.txt"), &m)?;
    Ok(ReconstructSummary {
        alignment,
        source,
        volume,
    })
}

/// Sample std over `band` rows of the defect-repaired average of `frames`.
pub fn band_std(frames: &[Image], mask: &DefectMask, band: Range<usize>) -> Result<f64> {
    let avg = repair_defects(&average_frames(frames)?.0, mask)?;
    if band.is_empty() || band.end > avg.nrows() {
        return Err(Error::Config(format!("band {band:?} outside the {} image rows", avg.nrows())));
    }
    let vals: Vec<f64> = avg.slice(s![band, ..]).iter().copied().collect();
    Ok(stats::std_dev(&vals))
}

/// Start indices of `points` blocks of `n` consecutive frames spread evenly
/// over `total` frames.
pub fn block_starts(total: usize, n: usize, points: usize) -> Vec<usize> {
    if n > total || points == 0 {
        return Vec::new();
    }
    let span = total - n;
    if points == 1 {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..points)
        .map(|k| ((k as f64) * span as f64 / (points - 1) as f64).round() as usize)
        .collect();
    v.dedup();
    v
}

/// One point of a std-vs-time curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StdPoint {
    pub n_avg: usize,
    pub t_s: f64,
    pub std: f64,
}

/// Writes `qef_vs_index.tsv` and `std_vs_time.tsv` with rendered previews.
pub fn plot(cfg: &PipelineConfig, run: &RunLayout) -> Result<()> {
    cfg.validate()?;
    let out_dir = run.plots();
    let timing = read_timing(&run.corrected().join(TIMING))?;
    if timing.is_empty() {
        return Err(Error::Empty("corrected timing log has no rows".into()));
    }
    let n_pixels = cfg.qef.band_rows.len() * cfg.detector.cols;
    let threshold = cfg.qef.threshold;
    let rows: Vec<Vec<String>> = timing
        .iter()
        .map(|r| {
            let q = r.qef_measured;
            let floor = if q.is_finite() { threshold - 3.0 * qef_estimator_std(q, n_pixels) } else { threshold };
            vec![
                r.index.to_string(),
                format!("{:?}", r.angle_deg),
                format!("{:?}", r.cumulative_time_s),
                r.frames_averaged.to_string(),
                format!("{q:?}"),
                format!("{threshold:?}"),
                format!("{floor:?}"),
            ]
        })
        .collect();
    write_table(
        &out_dir.join("qef_vs_index.tsv"),
        &["index", "angle_deg", "time_s", "frames_averaged", "qef_measured", "threshold", "qef_floor"],
        &rows,
    )?;
    let idx: Vec<f64> = timing.iter().map(|r| r.index as f64).collect();
    let q: Vec<f64> = timing.iter().map(|r| r.qef_measured).collect();
    let n: Vec<f64> = timing.iter().map(|r| r.frames_averaged as f64).collect();
    write_pgm16(
        &out_dir.join("qef_vs_index.pgm"),
        &render_plot(&[(&idx, &q), (&idx, &vec![threshold; idx.len()])]),
        Some((0.0, 1.0)),
    )?;
    write_pgm16(&out_dir.join("frames_vs_index.pgm"), &render_plot(&[(&idx, &n)]), Some((0.0, 1.0)))?;

    let raw_dir = run.raw();
    let refs = read_references(&raw_dir)?;
    let mask = detect_defects(
        &average_frames(&refs.dark_start)?.0,
        &average_frames(&refs.flat_start)?.0,
        cfg.defects.k_mad,
    )?;
    drop(refs);
    let reader = StackReader::open(&raw_dir, FRAMES)?;
    let raw_timing = read_timing(&raw_dir.join(TIMING))?;
    if raw_timing.len() != reader.len() {
        return Err(Error::Dimension("raw timing sidecar does not match the frame stack".into()));
    }
    let mut points = Vec::new();
    for &n_avg in &cfg.plot.averages {
        let starts = block_starts(reader.len(), n_avg, cfg.plot.points);
        if starts.is_empty() {
            log::warn!("std-vs-time: only {} frames, too few for N = {n_avg}", reader.len());
        }
        for s in starts {
            let frames = reader.read_range(s..s + n_avg)?;
            let t = stats::mean(&raw_timing[s..s + n_avg].iter().map(|r| r.cumulative_time_s).collect::<Vec<_>>());
            points.push(StdPoint {
                n_avg,
                t_s: t,
                std: band_std(&frames, &mask, cfg.qef.band_rows.clone())?,
            });
        }
    }
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| vec![p.n_avg.to_string(), format!("{:?}", p.t_s), format!("{:?}", p.std)])
        .collect();
    write_table(&out_dir.join("std_vs_time.tsv"), &["n_avg", "t_s", "std"], &rows)?;
    let curves: Vec<(Vec<f64>, Vec<f64>)> = cfg
        .plot
        .averages
        .iter()
        .map(|&n| {
            let pts: Vec<&StdPoint> = points.iter().filter(|p| p.n_avg == n).collect();
            (pts.iter().map(|p| p.t_s).collect(), pts.iter().map(|p| p.std).collect())
        })
        .collect();
    let refs: Vec<(&[f64], &[f64])> = curves.iter().map(|(x, y)| (&x[..], &y[..])).collect();
    write_pgm16(&out_dir.join("std_vs_time.pgm"), &render_plot(&refs), Some((0.0, 1.0)))?;
    Ok(())
}

/// Reads a plot table back; for tests and scripts.
pub fn read_plot_table(run: &RunLayout, name: &str) -> Result<crate::io::Table> {
    read_table(&run.plots().join(name), "plot table")
}

const PLOT_H: usize = 240;
const PLOT_W: usize = 320;
const MARGIN: usize = 12;

/// Line plot of each `(x, y)` series on a shared scale; series k is drawn at
/// gray level (k + 1) / n, the frame at 0.25.
fn render_plot<X: AsRef<[f64]>, Y: AsRef<[f64]>>(series: &[(X, Y)]) -> Image {
    let mut img = Array2::zeros((PLOT_H, PLOT_W));
    let finite = |v: &[f64]| v.iter().copied().filter(|x| x.is_finite()).collect::<Vec<_>>();
    let range = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    };
    let (x0, x1) = range(series.iter().flat_map(|(x, _)| finite(x.as_ref())).collect());
    let (y0, y1) = range(series.iter().flat_map(|(_, y)| finite(y.as_ref())).collect());
    let w = (PLOT_W - 2 * MARGIN) as f64;
    let h = (PLOT_H - 2 * MARGIN) as f64;
    let to_px = |x: f64, y: f64| {
        (
            MARGIN as f64 + (1.0 - (y - y0) / (y1 - y0)) * h,
            MARGIN as f64 + (x - x0) / (x1 - x0) * w,
        )
    };
    for c in MARGIN..PLOT_W - MARGIN {
        img[[MARGIN, c]] = 0.25;
        img[[PLOT_H - MARGIN, c]] = 0.25;
    }
    for r in MARGIN..=PLOT_H - MARGIN {
        img[[r, MARGIN]] = 0.25;
        img[[r, PLOT_W - MARGIN]] = 0.25;
    }
    let n = series.len().max(1) as f64;
    for (k, (x, y)) in series.iter().enumerate() {
        let level = (k as f64 + 1.0) / n;
        let pts: Vec<(f64, f64)> = x
            .as_ref()
            .iter()
            .zip(y.as_ref())
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(&a, &b)| to_px(a, b))
            .collect();
        let mut plot_at = |r: f64, c: f64| {
            let (r, c) = (r.round() as usize, c.round() as usize);
            if r < PLOT_H && c < PLOT_W {
                img[[r, c]] = level;
            }
        };
        if let [p] = pts[..] {
            plot_at(p.0, p.1);
        }
        for seg in pts.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for i in 0..=steps {
                let f = i as f64 / steps as f64;
                plot_at(a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
            }
        }
    }
    img
}

/// simulate, preprocess, reconstruct and plot in sequence.
pub fn full(cfg: &PipelineConfig, run: &RunLayout) -> Result<ReconstructSummary> {
    let t = Instant::now();
    let s = simulate(cfg, run)?;
    log::info!("simulate: {} frames for {} projections", s.frames, s.projections);
    preprocess(cfg, run)?;
    let r = reconstruct(cfg, run)?;
    plot(cfg, run)?;
    log::info!("full pipeline finished in {:.1} s", t.elapsed().as_secs_f64());
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_starts_cover_the_run() {
        assert_eq!(block_starts(100, 10, 4), vec![0, 30, 60, 90]);
        assert_eq!(block_starts(5, 10, 4), Vec::<usize>::new());
        assert_eq!(block_starts(10, 10, 3), vec![0]);
    }

    #[test]
    fn groups_follow_angle_runs() {
        let row = |a: f64, t: f64| TimingRow {
            index: 0,
            angle_deg: a,
            cumulative_time_s: t,
            frames_averaged: 1,
            qef_measured: f64::NAN,
        };
        let t = [row(0.0, 1.0), row(0.0, 2.0), row(6.0, 3.0), row(12.0, 4.0), row(12.0, 5.0)];
        assert_eq!(projection_groups(&t), vec![0..2, 2..3, 3..5]);
    }

    #[test]
    fn rendered_plot_marks_series() {
        let x = [0.0, 1.0, 2.0];
        let y = [1.0, 3.0, 2.0];
        let img = render_plot(&[(&x[..], &y[..])]);
        assert_eq!(img.dim(), (PLOT_H, PLOT_W));
        assert!(img.iter().any(|&v| v == 1.0));
    }
}
