use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use microct::config::PipelineConfig;
use microct::geometry::{ConeBeamGeometry, DetectorSpec};
use microct::pipeline::{self, RunLayout};
use microct::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "microct", version, about = "Cone-beam micro-CT simulation, preprocessing and FDK reconstruction")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Reconstruct without alignment.
    #[arg(long, global = true)]
    skip_align: bool,
    /// Flat-field with the start references only.
    #[arg(long, global = true)]
    static_flatfield: bool,
    /// Overrides the configured run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a degraded acquisition into <run>/raw and <run>/truth.
    Simulate,
    /// Defect repair and interpolated flat-field correction into <run>/corrected.
    Preprocess,
    /// Alignment and FDK reconstruction into <run>/recon.
    Reconstruct,
    /// Diagnostic tables and previews into <run>/plots.
    Plot,
    /// All stages in order.
    Full,
    /// Runs a small end-to-end check; exit status 3 on failure.
    Selftest,
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_SELFTEST: u8 = 3;

fn load(cli: &Cli) -> Result<(PipelineConfig, RunLayout)> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.skip_align {
        cfg.align.skip = true;
    }
    if cli.static_flatfield {
        cfg.preprocess.static_flatfield = true;
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let root = match &cli.run_dir {
        Some(d) => d.clone(),
        None => cfg.run_dir(base),
    };
    Ok((cfg, RunLayout::new(root)))
}

fn check(ok: bool, what: &str, failures: &mut Vec<String>) {
    println!("{} {what}", if ok { "PASS" } else { "FAIL" });
    if !ok {
        failures.push(what.to_string());
    }
}

fn selftest(cli: &Cli) -> Result<Vec<String>> {
    let mut failures = Vec::new();
    let det = DetectorSpec::mt9m001();
    let g = ConeBeamGeometry::from_object_to_sensor(750.0, 190.0)?;
    check(
        (g.magnification() - 1.339).abs() < 5e-4 && (g.voxel_size_um(&det) - 3.88).abs() < 5e-3,
        "geometry: magnification 1.339, voxel 3.88 um at 19 cm",
        &mut failures,
    );

    let mut cfg = PipelineConfig::example();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let dir = tempfile::tempdir().map_err(|e| Error::Io {
        path: std::env::temp_dir(),
        source: e,
    })?;
    let run = RunLayout::new(dir.path());
    let r = pipeline::full(&cfg, &run)?;
    let v = &r.volume.data;
    check(v.iter().all(|x| x.is_finite()), "reconstruction is finite", &mut failures);
    // the inner sphere sits at +x inside the outer one and doubles mu
    let (nz, ny, nx) = v.dim();
    let mu = cfg.phantom.mu;
    let voxel = cfg.grid()?.voxel_size_mm;
    let r_outer = cfg.phantom.radius_fraction * cfg.phantom.grid_size as f64 * cfg.phantom_spacing_mm()?;
    let inner_x = microct::simulator::NESTED_INNER_OFFSET * r_outer / voxel;
    let (cz, cy, cx) = (nz / 2, ny / 2, nx / 2);
    let inner = v[[cz, cy, (cx as f64 + inner_x).round() as usize]];
    let outer = v[[cz, cy, (cx as f64 - 0.5 * r_outer / voxel).round() as usize]];
    check(
        inner > outer && outer > 0.5 * mu && inner < 3.0 * mu,
        "nested spheres: inner brighter than outer, both near the phantom mu",
        &mut failures,
    );
    let tables = ["qef_vs_index.tsv", "std_vs_time.tsv"]
        .iter()
        .all(|t| pipeline::read_plot_table(&run, t).map(|t| !t.rows.is_empty()).unwrap_or(false));
    check(tables, "plot tables written", &mut failures);
    Ok(failures)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
    }
    if let Command::Selftest = cli.command {
        let failures = selftest(cli)?;
        return Ok(if failures.is_empty() {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(EXIT_SELFTEST)
        });
    }
    let (cfg, layout) = load(cli)?;
    match cli.command {
        Command::Simulate => {
            let s = pipeline::simulate(&cfg, &layout)?;
            println!(
                "simulated {} projections ({} frames, {:.0} s irradiation) into {}",
                s.projections,
                s.frames,
                s.t_end_s,
                layout.raw().display()
            );
        }
        Command::Preprocess => {
            let s = pipeline::preprocess(&cfg, &layout)?;
            println!(
                "corrected {} projections ({} defects) into {}",
                s.projections,
                s.defects,
                layout.corrected().display()
            );
        }
        Command::Reconstruct => {
            let r = pipeline::reconstruct(&cfg, &layout)?;
            let (nx, ny, nz) = r.volume.shape();
            println!(
                "reconstructed {nx}x{ny}x{nz} volume (tilt {:.3} deg, offset {:.3} px) into {}",
                r.alignment.tilt_deg,
                r.alignment.center_offset_px,
                layout.recon().display()
            );
        }
        Command::Plot => {
            pipeline::plot(&cfg, &layout)?;
            println!("plot tables written to {}", layout.plots().display());
        }
        Command::Full => {
            pipeline::full(&cfg, &layout)?;
            println!("run complete in {}", layout.root.display());
        }
        Command::Selftest => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
