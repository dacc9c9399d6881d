//! TOML pipeline configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{AlignConfig, MAX_TILT_DEG};
use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, DetectorSpec, Preset, ScanConfig};
use crate::io::Dtype;
use crate::preprocess::{DefectConfig, QefPolicy};
use crate::recon::{FilterSpec, GridSpec};
use crate::simulator::{edge_alpha_for_distance, DegradationParams, PhantomKind, ProjectorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub source_to_detector_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_to_sensor_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_to_object_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub kind: PhantomKind,
    pub grid_size: usize,
    pub mu: f64,
    pub radius_fraction: f64,
    /// Defaults to a grid spanning half the smaller detector extent,
    /// demagnified to the object plane.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_spacing_mm: Option<f64>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            kind: PhantomKind::UniformSphere,
            grid_size: 32,
            mu: 0.05,
            radius_fraction: 0.3,
            grid_spacing_mm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub noise: bool,
    pub reference_frames: usize,
    /// Fixed frames per projection; unset runs the Q_ef controller.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames_per_projection: Option<usize>,
    /// Edge-enhancement strength (pixel²). Unset: zero for absorption scans,
    /// and scaled from `edge_alpha_at_reference_px2` by the square root of
    /// the object-to-sensor distance for phase-contrast scans.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_alpha_px2: Option<f64>,
    pub edge_alpha_at_reference_px2: f64,
    pub edge_reference_distance_mm: f64,
    pub degradation: DegradationParams,
    pub projector: ProjectorConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            noise: true,
            reference_frames: 10,
            frames_per_projection: None,
            edge_alpha_px2: None,
            edge_alpha_at_reference_px2: 1.0,
            edge_reference_distance_mm: 190.0,
            degradation: DegradationParams::default(),
            projector: ProjectorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Use only the start references (ordinary flat-field correction).
    pub static_flatfield: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignSection {
    pub skip: bool,
    /// Known alignment; when either is set no estimation is run and the
    /// other defaults to zero.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tilt_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_offset_px: Option<f64>,
    pub search: AlignConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Run directory; relative paths resolve against the config file.
    pub run_dir: PathBuf,
    pub dtype: Dtype,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("run"),
            dtype: Dtype::F32le,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    /// Averaging depths of the std-vs-time curves.
    pub averages: Vec<usize>,
    pub points: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            averages: vec![5, 23],
            points: 10,
        }
    }
}

fn default_detector() -> DetectorSpec {
    DetectorSpec::mt9m001()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Fills `geometry` and `scan` when those sections are absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometryConfig>,
    #[serde(default = "default_detector")]
    pub detector: DetectorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanConfig>,
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    pub qef: QefPolicy,
    #[serde(default)]
    pub defects: DefectConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub align: AlignSection,
    #[serde(default)]
    pub filter: FilterSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub plot: PlotConfig,
}

/// 1-based line of `key` inside `[section]` (or at top level when `section`
/// is empty), falling back to the section header.
fn locate(source: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header_line = None;
    for (n, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[') {
            current = name.trim_start_matches('[').trim_end_matches(']').trim().to_string();
            if current == section {
                header_line = Some(n + 1);
            }
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim();
        let full = if current.is_empty() {
            k.to_string()
        } else {
            format!("{current}.{k}")
        };
        let want = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        if full == want {
            return Some(n + 1);
        }
    }
    header_line
}

fn line_of_offset(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

/// A validation failure: dotted path of the offending field and the reason.
struct Invalid(&'static str, &'static str, String);

fn wrap(section: &'static str, key: &'static str, r: Result<()>) -> std::result::Result<(), Invalid> {
    r.map_err(|e| Invalid(section, key, e.to_string()))
}

impl PipelineConfig {
    /// Parses and validates; errors carry `origin:line:` prefixes.
    pub fn parse(source: &str, origin: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(source).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(source, s.start));
            let msg = e.message().to_string();
            match line {
                Some(l) => Error::Config(format!("{origin}:{l}: {msg}")),
                None => Error::Config(format!("{origin}: {msg}")),
            }
        })?;
        if let Err(Invalid(section, key, msg)) = cfg.check() {
            let at = match locate(source, section, key) {
                Some(l) => format!("{origin}:{l}"),
                None => origin.to_string(),
            };
            let path = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            return Err(Error::Config(format!("{at}: {path}: {msg}")));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_text(path, "configuration file")?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|Invalid(s, k, m)| {
            let path = if s.is_empty() { k.to_string() } else { format!("{s}.{k}") };
            Error::Config(format!("{path}: {m}"))
        })
    }

    fn check(&self) -> std::result::Result<(), Invalid> {
        if self.geometry.is_none() && self.preset.is_none() {
            return Err(Invalid("", "geometry", "a [geometry] section or a preset is required".into()));
        }
        if let Some(g) = &self.geometry {
            match (g.object_to_sensor_mm, g.source_to_object_mm) {
                (Some(_), Some(_)) => {
                    return Err(Invalid(
                        "geometry",
                        "source_to_object_mm",
                        "give either object_to_sensor_mm or source_to_object_mm, not both".into(),
                    ))
                }
                (None, None) => {
                    return Err(Invalid(
                        "geometry",
                        "source_to_detector_mm",
                        "object_to_sensor_mm or source_to_object_mm is required".into(),
                    ))
                }
                _ => {}
            }
            let key = if g.object_to_sensor_mm.is_some() { "object_to_sensor_mm" } else { "source_to_object_mm" };
            wrap("geometry", key, self.geometry().map(|_| ()))?;
        }
        wrap("detector", "rows", self.detector.validate())?;
        if self.scan.is_none() && self.preset.is_none() {
            return Err(Invalid("", "scan", "a [scan] section or a preset is required".into()));
        }
        wrap("scan", "angular_step_deg", self.scan().and_then(|s| s.validate()))?;
        let p = &self.phantom;
        if p.grid_size < 8 {
            return Err(Invalid("phantom", "grid_size", format!("must be >= 8, got {}", p.grid_size)));
        }
        if !(p.mu >= 0.0) {
            return Err(Invalid("phantom", "mu", format!("must be >= 0, got {}", p.mu)));
        }
        if p.kind != PhantomKind::PointImpulse && !(p.radius_fraction > 0.0 && p.radius_fraction <= 0.5) {
            return Err(Invalid("phantom", "radius_fraction", format!("must lie in (0, 0.5], got {}", p.radius_fraction)));
        }
        if p.kind == PhantomKind::Custom {
            return Err(Invalid("phantom", "kind", "custom phantoms cannot be described in a config file".into()));
        }
        if let Some(h) = p.grid_spacing_mm {
            if !(h > 0.0) {
                return Err(Invalid("phantom", "grid_spacing_mm", format!("must be > 0, got {h}")));
            }
        }
        let s = &self.simulate;
        if s.reference_frames == 0 {
            return Err(Invalid("simulate", "reference_frames", "must be >= 1".into()));
        }
        if s.frames_per_projection == Some(0) {
            return Err(Invalid("simulate", "frames_per_projection", "must be >= 1".into()));
        }
        if let Some(a) = s.edge_alpha_px2 {
            if !(a >= 0.0) {
                return Err(Invalid("simulate", "edge_alpha_px2", format!("must be >= 0, got {a}")));
            }
        }
        if !(s.projector.step_fraction > 0.0) {
            return Err(Invalid("simulate", "projector", "step_fraction must be > 0".into()));
        }
        wrap("simulate", "degradation", s.degradation.validate())?;
        wrap("qef", "threshold", self.qef.validate())?;
        if self.qef.band_rows.end > self.detector.rows {
            return Err(Invalid(
                "qef",
                "band_rows",
                format!("band {:?} exceeds the {} detector rows", self.qef.band_rows, self.detector.rows),
            ));
        }
        wrap("defects", "k_mad", self.defects.validate())?;
        wrap("align", "search", self.align.search.validate())?;
        if let Some(t) = self.align.tilt_deg {
            if !(t.abs() < MAX_TILT_DEG) {
                return Err(Invalid("align", "tilt_deg", format!("must be within +-{MAX_TILT_DEG} deg, got {t}")));
            }
        }
        wrap("filter", "padding", self.filter.padded_len(self.detector.cols).map(|_| ()))?;
        if let Some(g) = &self.grid {
            wrap("grid", "nx", g.validate())?;
        }
        if self.plot.averages.iter().any(|&n| n == 0) || self.plot.points < 2 {
            return Err(Invalid("plot", "averages", "averages must be >= 1 and points >= 2".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<ConeBeamGeometry> {
        match (&self.geometry, self.preset) {
            (Some(g), _) => match (g.object_to_sensor_mm, g.source_to_object_mm) {
                (Some(d), None) => ConeBeamGeometry::from_object_to_sensor(g.source_to_detector_mm, d),
                (None, Some(sod)) => ConeBeamGeometry::new(g.source_to_detector_mm, sod),
                _ => Err(Error::Config("geometry needs exactly one object distance".into())),
            },
            (None, Some(p)) => Ok(p.geometry()),
            (None, None) => Err(Error::Config("no geometry and no preset".into())),
        }
    }

    pub fn scan(&self) -> Result<ScanConfig> {
        match (&self.scan, self.preset) {
            (Some(s), _) => Ok(s.clone()),
            (None, Some(p)) => Ok(p.scan()),
            (None, None) => Err(Error::Config("no scan and no preset".into())),
        }
    }

    pub fn phantom_spacing_mm(&self) -> Result<f64> {
        if let Some(h) = self.phantom.grid_spacing_mm {
            return Ok(h);
        }
        let geom = self.geometry()?;
        let extent = 0.5 * self.detector.rows.min(self.detector.cols) as f64 * self.detector.pitch_mm() / geom.magnification();
        Ok(extent / self.phantom.grid_size as f64)
    }

    pub fn edge_alpha_px2(&self) -> Result<f64> {
        if let Some(a) = self.simulate.edge_alpha_px2 {
            return Ok(a);
        }
        if !self.scan()?.phase_contrast {
            return Ok(0.0);
        }
        edge_alpha_for_distance(
            self.simulate.edge_alpha_at_reference_px2,
            self.simulate.edge_reference_distance_mm,
            self.geometry()?.object_to_sensor_mm(),
        )
    }

    pub fn grid(&self) -> Result<GridSpec> {
        Ok(match self.grid {
            Some(g) => g,
            None => GridSpec::for_detector(&self.geometry()?, &self.detector),
        })
    }

    /// Run directory, resolving relative paths against `base`.
    pub fn run_dir(&self, base: &Path) -> PathBuf {
        if self.output.run_dir.is_absolute() {
            self.output.run_dir.clone()
        } else {
            base.join(&self.output.run_dir)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }

    /// SHA-256 of the serialized configuration, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// A small, fast configuration used by the self-test and as a template.
    pub fn example() -> Self {
        let text = r#"
seed = 7

[geometry]
source_to_detector_mm = 750.0
object_to_sensor_mm = 190.0

[detector]
rows = 40
cols = 48
pixel_pitch_um = 52.0
max_value = 1023.0

[scan]
angular_step_deg = 6.0

[phantom]
kind = "nested_spheres"
grid_size = 24
mu = 2.0

[qef]
threshold = 30.0
band_rows = { start = 0, end = 6 }

[output]
run_dir = "run"
"#;
        Self::parse(text, "example").expect("example configuration is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_round_trips() {
        let cfg = PipelineConfig::example();
        let text = cfg.to_toml().unwrap();
        let back = PipelineConfig::parse(&text, "rt").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
        assert_eq!(cfg.hash().unwrap().len(), 64);
    }

    #[test]
    fn zero_angle_reports_line() {
        let text = "[geometry]\nsource_to_detector_mm = 750\nobject_to_sensor_mm = 25\n\n[scan]\nangular_step_deg = 0\n\n[qef]\nthreshold = 10\n";
        let e = PipelineConfig::parse(text, "c.toml").unwrap_err().to_string();
        assert!(e.contains("c.toml:6:"), "{e}");
        assert!(e.contains("angular_step_deg"), "{e}");
    }

    #[test]
    fn syntax_errors_report_line() {
        let text = "seed = 1\n[qef]\nthreshold = \n";
        let e = PipelineConfig::parse(text, "c.toml").unwrap_err().to_string();
        assert!(e.contains("c.toml:3:"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "preset = \"chip\"\n[qef]\nthreshold = 10\nband_rows = { start = 0, end = 5 }\nbogus = 1\n";
        let e = PipelineConfig::parse(text, "c.toml").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
    }

    #[test]
    fn presets_fill_geometry_and_scan() {
        let text = "preset = \"insect\"\n[qef]\nthreshold = 10\n";
        let cfg = PipelineConfig::parse(text, "c.toml").unwrap();
        assert_eq!(cfg.scan().unwrap().num_projections().unwrap(), 600);
        assert!((cfg.geometry().unwrap().object_to_sensor_mm() - 190.0).abs() < 1e-12);
        assert!(cfg.edge_alpha_px2().unwrap() > 0.0);
        let chip = PipelineConfig::parse("preset = \"chip\"\n[qef]\nthreshold = 10\n", "c").unwrap();
        assert_eq!(chip.edge_alpha_px2().unwrap(), 0.0);
    }

    #[test]
    fn threshold_is_required() {
        assert!(PipelineConfig::parse("preset = \"chip\"\n", "c").is_err());
    }
}
