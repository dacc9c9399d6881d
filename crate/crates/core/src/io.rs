//! On-disk formats: raw little-endian image stacks with a key=value header,
//! tab-separated sidecar tables, raw volumes and 16-bit PGM slices.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::Image;
use crate::recon::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32le,
    F64le,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32le => 4,
            Dtype::F64le => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32le => "f32le",
            Dtype::F64le => "f64le",
        }
    }
}

impl FromStr for Dtype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32le" => Ok(Dtype::F32le),
            "f64le" => Ok(Dtype::F64le),
            _ => Err(Error::Header {
                field: "dtype".into(),
                reason: format!("unsupported value `{s}` (expected f32le or f64le)"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    /// One `<name>.raw` holding every frame back to back.
    #[default]
    Concatenated,
    /// `<name>_00000.raw`, `<name>_00001.raw`, ...
    PerFrame,
}

impl Layout {
    fn name(self) -> &'static str {
        match self {
            Layout::Concatenated => "concatenated",
            Layout::PerFrame => "per_frame",
        }
    }
}

/// Text header of an image stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StackHeader {
    pub rows: usize,
    pub cols: usize,
    pub dtype: Dtype,
    pub count: usize,
    pub pixel_pitch_um: f64,
    pub layout: Layout,
}

fn header_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Header {
        field: field.into(),
        reason: reason.into(),
    }
}

impl StackHeader {
    pub fn to_text(&self) -> String {
        format!(
            "rows={}\ncols={}\ndtype={}\ncount={}\npixel_pitch_um={}\nlayout={}\n",
            self.rows,
            self.cols,
            self.dtype.name(),
            self.count,
            self.pixel_pitch_um,
            self.layout.name()
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| -> Result<&str> {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| header_err(k, "missing"))
        };
        fn num<T: FromStr>(field: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| header_err(field, format!("cannot parse `{v}`")))
        }
        let rows: usize = num("rows", get("rows")?)?;
        let cols: usize = num("cols", get("cols")?)?;
        let count: usize = num("count", get("count")?)?;
        let pixel_pitch_um: f64 = num("pixel_pitch_um", get("pixel_pitch_um")?)?;
        if rows == 0 {
            return Err(header_err("rows", "must be > 0"));
        }
        if cols == 0 {
            return Err(header_err("cols", "must be > 0"));
        }
        if !(pixel_pitch_um > 0.0) {
            return Err(header_err("pixel_pitch_um", "must be > 0"));
        }
        let dtype = get("dtype")?.parse()?;
        let layout = match kv.iter().find(|(k, _)| k == "layout").map(|(_, v)| v.as_str()) {
            None | Some("concatenated") => Layout::Concatenated,
            Some("per_frame") => Layout::PerFrame,
            Some(other) => return Err(header_err("layout", format!("unknown layout `{other}`"))),
        };
        Ok(Self {
            rows,
            cols,
            dtype,
            count,
            pixel_pitch_um,
            layout,
        })
    }

    fn frame_bytes(&self) -> usize {
        self.rows * self.cols * self.dtype.size()
    }
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Header {
            field: format!("line {}", n + 1),
            reason: format!("expected key=value, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path, what: &str) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
            what: what.into(),
        });
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn encode(img: &Image, dtype: Dtype, out: &mut Vec<u8>) {
    out.clear();
    out.reserve(img.len() * dtype.size());
    for &v in img.iter() {
        match dtype {
            Dtype::F32le => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64le => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

fn decode(bytes: &[u8], rows: usize, cols: usize, dtype: Dtype) -> Image {
    let vals: Vec<f64> = match dtype {
        Dtype::F32le => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64le => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Array2::from_shape_vec((rows, cols), vals).expect("frame size checked")
}

/// Paths of a stack called `name` inside `dir`.
pub struct StackPaths {
    pub header: PathBuf,
    dir: PathBuf,
    name: String,
}

impl StackPaths {
    pub fn new(dir: &Path, name: &str) -> Self {
        Self {
            header: dir.join(format!("{name}.header")),
            dir: dir.to_path_buf(),
            name: name.to_string(),
        }
    }

    pub fn data(&self) -> PathBuf {
        self.dir.join(format!("{}.raw", self.name))
    }

    pub fn frame(&self, k: usize) -> PathBuf {
        self.dir.join(format!("{}_{k:05}.raw", self.name))
    }
}

/// Streams frames to disk; the header is written by [`StackWriter::finish`].
pub struct StackWriter {
    paths: StackPaths,
    header: StackHeader,
    out: Option<BufWriter<File>>,
    buf: Vec<u8>,
}

impl StackWriter {
    pub fn create(dir: &Path, name: &str, rows: usize, cols: usize, pixel_pitch_um: f64, dtype: Dtype, layout: Layout) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = StackPaths::new(dir, name);
        let out = match layout {
            Layout::Concatenated => {
                let p = paths.data();
                Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
            }
            Layout::PerFrame => None,
        };
        Ok(Self {
            paths,
            header: StackHeader {
                rows,
                cols,
                dtype,
                count: 0,
                pixel_pitch_um,
                layout,
            },
            out,
            buf: Vec::new(),
        })
    }

    pub fn push(&mut self, img: &Image) -> Result<()> {
        if img.dim() != (self.header.rows, self.header.cols) {
            return Err(Error::Dimension(format!(
                "frame {:?} does not match stack {}x{}",
                img.dim(),
                self.header.rows,
                self.header.cols
            )));
        }
        encode(img, self.header.dtype, &mut self.buf);
        match &mut self.out {
            Some(w) => w.write_all(&self.buf).map_err(|e| Error::io(self.paths.data(), e))?,
            None => {
                let p = self.paths.frame(self.header.count);
                fs::write(&p, &self.buf).map_err(|e| Error::io(&p, e))?;
            }
        }
        self.header.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<StackHeader> {
        if let Some(w) = &mut self.out {
            w.flush().map_err(|e| Error::io(self.paths.data(), e))?;
        }
        write_text(&self.paths.header, &self.header.to_text())?;
        Ok(self.header)
    }
}

pub fn write_stack(dir: &Path, name: &str, images: &[Image], pixel_pitch_um: f64, dtype: Dtype) -> Result<StackHeader> {
    let (rows, cols) = images.first().map(|i| i.dim()).unwrap_or((1, 1));
    let mut w = StackWriter::create(dir, name, rows, cols, pixel_pitch_um, dtype, Layout::Concatenated)?;
    for img in images {
        w.push(img)?;
    }
    w.finish()
}

/// Random access to a stack on disk.
pub struct StackReader {
    pub header: StackHeader,
    paths: StackPaths,
}

impl StackReader {
    pub fn open(dir: &Path, name: &str) -> Result<Self> {
        let paths = StackPaths::new(dir, name);
        let header = StackHeader::parse(&read_text(&paths.header, &format!("{name} stack header"))?)?;
        let expected = header.count as u64 * header.frame_bytes() as u64;
        match header.layout {
            Layout::Concatenated => {
                let p = paths.data();
                let len = fs::metadata(&p)
                    .map_err(|_| Error::MissingFile {
                        path: p.clone(),
                        what: format!("{name} frame data"),
                    })?
                    .len();
                if len != expected {
                    return Err(header_err(
                        "count",
                        format!("{} frames need {expected} bytes but {} holds {len}", header.count, p.display()),
                    ));
                }
            }
            Layout::PerFrame => {
                for k in 0..header.count {
                    if !paths.frame(k).exists() {
                        return Err(header_err("count", format!("frame file {} is missing", paths.frame(k).display())));
                    }
                }
            }
        }
        Ok(Self { header, paths })
    }

    pub fn len(&self) -> usize {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    /// Frames `range.start .. range.end`.
    pub fn read_range(&self, range: std::ops::Range<usize>) -> Result<Vec<Image>> {
        if range.end > self.header.count {
            return Err(Error::Dimension(format!(
                "frames {range:?} requested from a stack of {}",
                self.header.count
            )));
        }
        let h = &self.header;
        let fb = h.frame_bytes();
        let mut out = Vec::with_capacity(range.len());
        match h.layout {
            Layout::Concatenated => {
                let p = self.paths.data();
                let mut f = BufReader::new(File::open(&p).map_err(|e| Error::io(&p, e))?);
                f.seek(SeekFrom::Start((range.start * fb) as u64)).map_err(|e| Error::io(&p, e))?;
                let mut buf = vec![0u8; fb];
                for _ in range {
                    f.read_exact(&mut buf).map_err(|e| Error::io(&p, e))?;
                    out.push(decode(&buf, h.rows, h.cols, h.dtype));
                }
            }
            Layout::PerFrame => {
                for k in range {
                    let p = self.paths.frame(k);
                    let buf = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                    if buf.len() != fb {
                        return Err(header_err("rows", format!("{} holds {} bytes, expected {fb}", p.display(), buf.len())));
                    }
                    out.push(decode(&buf, h.rows, h.cols, h.dtype));
                }
            }
        }
        Ok(out)
    }

    pub fn read_all(&self) -> Result<Vec<Image>> {
        self.read_range(0..self.header.count)
    }
}

pub fn read_stack(dir: &Path, name: &str) -> Result<(StackHeader, Vec<Image>)> {
    let r = StackReader::open(dir, name)?;
    let imgs = r.read_all()?;
    Ok((r.header, imgs))
}

/// One row of a timing sidecar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingRow {
    pub index: usize,
    pub angle_deg: f64,
    pub cumulative_time_s: f64,
    pub frames_averaged: usize,
    pub qef_measured: f64,
}

pub const TIMING_COLUMNS: [&str; 5] = ["index", "angle_deg", "cumulative_time_s", "frames_averaged", "qef_measured"];

pub fn write_timing(path: &Path, rows: &[TimingRow]) -> Result<()> {
    let mut s = TIMING_COLUMNS.join("\t");
    s.push('\n');
    for r in rows {
        // round-trip exact float formatting
        writeln!(
            s,
            "{}\t{:?}\t{:?}\t{}\t{:?}",
            r.index, r.angle_deg, r.cumulative_time_s, r.frames_averaged, r.qef_measured
        )
        .expect("string write");
    }
    write_text(path, &s)
}

pub fn read_timing(path: &Path) -> Result<Vec<TimingRow>> {
    let table = read_table(path, "timing sidecar")?;
    if table.columns != TIMING_COLUMNS {
        return Err(header_err(
            "timing columns",
            format!("expected {:?}, got {:?}", TIMING_COLUMNS, table.columns),
        ));
    }
    let mut out: Vec<TimingRow> = Vec::with_capacity(table.rows.len());
    for (n, r) in table.rows.iter().enumerate() {
        let f = |k: usize| -> Result<f64> {
            r[k].parse().map_err(|_| header_err(TIMING_COLUMNS[k], format!("row {}: cannot parse `{}`", n + 1, r[k])))
        };
        let row = TimingRow {
            index: f(0)? as usize,
            angle_deg: f(1)?,
            cumulative_time_s: f(2)?,
            frames_averaged: f(3)? as usize,
            qef_measured: f(4)?,
        };
        if let Some(prev) = out.last() {
            if !(row.cumulative_time_s > prev.cumulative_time_s) {
                return Err(header_err(
                    "cumulative_time_s",
                    format!("row {}: times must increase strictly", n + 1),
                ));
            }
        }
        out.push(row);
    }
    Ok(out)
}

/// A parsed tab-separated table with a header line.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Values of a numeric column.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        let k = self
            .column(name)
            .ok_or_else(|| header_err(name, "column missing"))?;
        self.rows
            .iter()
            .map(|r| r[k].parse().map_err(|_| header_err(name, format!("cannot parse `{}`", r[k]))))
            .collect()
    }
}

pub fn write_table(path: &Path, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = columns.join("\t");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join("\t"));
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn read_table(path: &Path, what: &str) -> Result<Table> {
    let text = read_text(path, what)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let columns: Vec<String> = lines
        .next()
        .ok_or_else(|| header_err("columns", format!("{} is empty", path.display())))?
        .split('\t')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (n, l) in lines.enumerate() {
        let r: Vec<String> = l.split('\t').map(str::to_string).collect();
        if r.len() != columns.len() {
            return Err(header_err(
                "columns",
                format!("{} row {} has {} fields, expected {}", path.display(), n + 1, r.len(), columns.len()),
            ));
        }
        rows.push(r);
    }
    Ok(Table { columns, rows })
}

/// Writes `volume.raw` (f32le, z-major) and `volume.meta` into `dir`.
pub fn write_volume(dir: &Path, vol: &Volume) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (nx, ny, nz) = vol.shape();
    let p = dir.join("volume.raw");
    let mut w = BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?);
    for &v in vol.data.iter() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    let [vx, vy, vz] = vol.voxel_size_mm;
    let [ox, oy, oz] = vol.origin_mm;
    let meta = format!(
        "nx={nx}\nny={ny}\nnz={nz}\ndtype=f32le\norder=z,y,x\nunits=1/mm\nvoxel_size_mm={vx},{vy},{vz}\norigin_mm={ox},{oy},{oz}\n"
    );
    write_text(&dir.join("volume.meta"), &meta)
}

pub fn read_volume(dir: &Path) -> Result<Volume> {
    let kv = parse_key_values(&read_text(&dir.join("volume.meta"), "volume metadata")?)?;
    let get = |k: &str| -> Result<&str> {
        kv.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| header_err(k, "missing"))
    };
    let dims: Vec<usize> = ["nx", "ny", "nz"]
        .iter()
        .map(|k| get(k)?.parse().map_err(|_| header_err(k, "not an integer")))
        .collect::<Result<_>>()?;
    let triple = |k: &str| -> Result<[f64; 3]> {
        let v: Vec<f64> = get(k)?
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| header_err(k, "not a number")))
            .collect::<Result<_>>()?;
        v.try_into().map_err(|_| header_err(k, "expected three values"))
    };
    let p = dir.join("volume.raw");
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let n = dims[0] * dims[1] * dims[2];
    if bytes.len() != 4 * n {
        return Err(header_err("nx", format!("volume data holds {} bytes, expected {}", bytes.len(), 4 * n)));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Volume {
        data: Array3::from_shape_vec((dims[2], dims[1], dims[0]), vals).expect("size checked"),
        voxel_size_mm: triple("voxel_size_mm")?,
        origin_mm: triple("origin_mm")?,
    })
}

/// Writes a 16-bit binary PGM mapping `[lo, hi]` to `[0, 65535]` and
/// returns the window used (the image range when `window` is `None`).
pub fn write_pgm16(path: &Path, img: &Image, window: Option<(f64, f64)>) -> Result<(f64, f64)> {
    let (lo, hi) = window.unwrap_or_else(|| {
        img.iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    });
    let (lo, hi) = if lo.is_finite() && hi.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (rows, cols) = img.dim();
    let mut bytes = format!("P5\n# window {lo:e} {hi:e}\n{cols} {rows}\n65535\n").into_bytes();
    for &v in img.iter() {
        let q = ((v - lo) / span * 65535.0).round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok((lo, hi))
}

/// Reads a 16-bit PGM written by [`write_pgm16`], as raw gray levels.
pub fn read_pgm16(path: &Path) -> Result<Array2<u16>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields.len() < 4 || fields[0] != "P5" || fields[3] != "65535" {
        return Err(header_err("pgm", format!("{} is not a 16-bit P5 image", path.display())));
    }
    let cols: usize = fields[1].parse().map_err(|_| header_err("pgm width", "not an integer"))?;
    let rows: usize = fields[2].parse().map_err(|_| header_err("pgm height", "not an integer"))?;
    let data = bytes.get(pos..pos + 2 * rows * cols).ok_or_else(|| header_err("pgm", "truncated pixel data"))?;
    let vals: Vec<u16> = data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok(Array2::from_shape_vec((rows, cols), vals).expect("size checked"))
}

/// Central axial (xy), coronal (xz) and sagittal (yz) slices.
pub fn central_slices(vol: &Volume) -> [(&'static str, Image); 3] {
    let (nx, ny, nz) = vol.shape();
    let d = &vol.data;
    let axial = d.index_axis(ndarray::Axis(0), nz / 2).to_owned();
    let coronal = Array2::from_shape_fn((nz, nx), |(k, i)| d[[nz - 1 - k, ny / 2, i]]);
    let sagittal = Array2::from_shape_fn((nz, ny), |(k, j)| d[[nz - 1 - k, j, nx / 2]]);
    [("axial", axial), ("coronal", coronal), ("sagittal", sagittal)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip_and_errors() {
        let h = StackHeader {
            rows: 3,
            cols: 4,
            dtype: Dtype::F64le,
            count: 2,
            pixel_pitch_um: 5.2,
            layout: Layout::PerFrame,
        };
        assert_eq!(StackHeader::parse(&h.to_text()).unwrap(), h);
        let bad = h.to_text().replace("cols=4", "cols=four");
        match StackHeader::parse(&bad) {
            Err(Error::Header { field, .. }) => assert_eq!(field, "cols"),
            other => panic!("{other:?}"),
        }
        let bad = h.to_text().replace("dtype=f64le", "dtype=u8");
        assert!(matches!(StackHeader::parse(&bad), Err(Error::Header { field, .. }) if field == "dtype"));
    }

    #[test]
    fn stacks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<Image> = (0..3).map(|k| Array2::from_shape_fn((2, 5), |(r, c)| (k * 10 + r * 5 + c) as f64 + 0.1)).collect();
        write_stack(dir.path(), "a", &imgs, 5.2, Dtype::F64le).unwrap();
        let (h, back) = read_stack(dir.path(), "a").unwrap();
        assert_eq!(h.count, 3);
        assert_eq!(back, imgs);
        let r = StackReader::open(dir.path(), "a").unwrap();
        assert_eq!(r.read_range(1..2).unwrap()[0], imgs[1]);

        let mut w = StackWriter::create(dir.path(), "b", 2, 5, 5.2, Dtype::F32le, Layout::PerFrame).unwrap();
        for i in &imgs {
            w.push(i).unwrap();
        }
        w.finish().unwrap();
        let (_, back) = read_stack(dir.path(), "b").unwrap();
        for (a, b) in back.iter().zip(&imgs) {
            assert!((a - b).iter().all(|d| d.abs() < 1e-5));
        }
    }

    #[test]
    fn truncated_data_is_reported_against_count() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = vec![Array2::zeros((2, 2)); 2];
        write_stack(dir.path(), "a", &imgs, 1.0, Dtype::F32le).unwrap();
        let h = dir.path().join("a.header");
        let t = fs::read_to_string(&h).unwrap().replace("count=2", "count=3");
        fs::write(&h, t).unwrap();
        assert!(matches!(StackReader::open(dir.path(), "a"), Err(Error::Header { field, .. }) if field == "count"));
    }

    #[test]
    fn timing_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("timing.tsv");
        let rows = vec![
            TimingRow { index: 0, angle_deg: 0.0, cumulative_time_s: 1.0, frames_averaged: 2, qef_measured: f64::NAN },
            TimingRow { index: 1, angle_deg: 0.6, cumulative_time_s: 2.5, frames_averaged: 2, qef_measured: 40.25 },
        ];
        write_timing(&p, &rows).unwrap();
        let back = read_timing(&p).unwrap();
        assert_eq!(back[1], rows[1]);
        assert!(back[0].qef_measured.is_nan());
    }

    #[test]
    fn volume_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume {
            data: Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (z * 20 + y * 5 + x) as f64),
            voxel_size_mm: [0.1; 3],
            origin_mm: [-0.2, -0.15, -0.1],
        };
        write_volume(dir.path(), &vol).unwrap();
        assert_eq!(read_volume(dir.path()).unwrap(), vol);
        let [(_, axial), _, _] = central_slices(&vol);
        let p = dir.path().join("a.pgm");
        let w = write_pgm16(&p, &axial, None).unwrap();
        assert_eq!(w, (20.0, 39.0));
        let g = read_pgm16(&p).unwrap();
        assert_eq!(g.dim(), (4, 5));
        assert_eq!(g[[0, 0]], 0);
        assert_eq!(g[[3, 4]], 65535);
    }
}
