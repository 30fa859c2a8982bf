//! Deterministic CSV tables and P6 heatmaps.
//!
//! Every artifact starts with provenance lines (`# key: value` in CSV, PNM
//! comments in P6) so it can be regenerated. Nothing time- or
//! machine-dependent goes into an artifact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::analysis::similarity::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::store::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Csv,
    Heatmap,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub command: String,
    pub checkpoint_digest: Option<String>,
    pub seed: Option<u64>,
}

impl Provenance {
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![format!("moe-lens {}", env!("CARGO_PKG_VERSION"))];
        out.push(format!("command: {}", self.command));
        if let Some(d) = &self.checkpoint_digest {
            out.push(format!("checkpoint: sha256:{d}"));
        }
        if let Some(s) = self.seed {
            out.push(format!("seed: {s}"));
        }
        out.into_iter()
            .map(|l| l.replace(['\n', '\r'], " "))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportArtifact {
    pub kind: ArtifactKind,
    pub path: PathBuf,
    pub metadata: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Num(f64),
    Empty,
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        self.rows.push(row);
    }

    /// Labeled square matrix: first column holds row labels.
    pub fn from_similarity(m: &SimilarityMatrix) -> Self {
        let labels = m.label_strings();
        let mut t = Table::new(std::iter::once(String::new()).chain(labels.iter().cloned()));
        for (i, label) in labels.iter().enumerate() {
            let mut row = vec![Cell::Text(label.clone())];
            row.extend(m.values[i].iter().map(|&v| Cell::from(v)));
            t.push(row);
        }
        t
    }
}

/// Six decimals, `.` separator, never an exponent, no negative zero.
pub fn format_value(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

fn escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub fn render_csv(table: &Table, prov: &Provenance) -> Result<String> {
    let mut out = String::new();
    for line in prov.lines() {
        writeln!(out, "# {line}").expect("string write");
    }
    let header: Vec<String> = table.header.iter().map(|h| escape(h)).collect();
    writeln!(out, "{}", header.join(",")).expect("string write");
    for row in &table.rows {
        let fields = row
            .iter()
            .map(|c| match c {
                Cell::Text(s) => Ok(escape(s)),
                Cell::Int(i) => Ok(i.to_string()),
                Cell::Num(v) if v.is_finite() => Ok(format_value(*v)),
                Cell::Num(v) => Err(Error::InvalidArgument(format!(
                    "non-finite value {v} in table"
                ))),
                Cell::Empty => Ok(String::new()),
            })
            .collect::<Result<Vec<_>>>()?;
        writeln!(out, "{}", fields.join(",")).expect("string write");
    }
    Ok(out)
}

pub fn emit_csv(
    table: &Table,
    path: impl AsRef<Path>,
    prov: &Provenance,
) -> Result<ReportArtifact> {
    let path = path.as_ref();
    write_atomic(path, render_csv(table, prov)?.as_bytes())?;
    Ok(ReportArtifact {
        kind: ArtifactKind::Csv,
        path: path.to_path_buf(),
        metadata: prov.lines(),
    })
}

pub const DEFAULT_CELL_SIZE: usize = 16;
const DARK: [u8; 3] = [20, 24, 82];
const LIGHT: [u8; 3] = [253, 231, 37];
/// Color of undefined cells.
pub const MASKED: [u8; 3] = [0, 0, 0];

/// Color for step `idx` of the 256-step dark-to-light ramp.
pub fn colormap(idx: u8) -> [u8; 3] {
    let mut c = [0u8; 3];
    for k in 0..3 {
        let (a, b) = (f64::from(DARK[k]), f64::from(LIGHT[k]));
        c[k] = (a + (b - a) * f64::from(idx) / 255.0).round() as u8;
    }
    c
}

fn color_for(v: Option<f64>, range: (f64, f64)) -> [u8; 3] {
    match v {
        None => MASKED,
        Some(v) => {
            let (lo, hi) = range;
            let t = if hi > lo {
                ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                1.0
            };
            colormap((t * 255.0).round() as u8)
        }
    }
}

/// Binary PPM (P6) with one `cell × cell` pixel block per matrix entry.
pub fn render_heatmap(
    values: &[Vec<Option<f64>>],
    range: (f64, f64),
    cell: usize,
    prov: &Provenance,
) -> Result<Vec<u8>> {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyInput("heatmap matrix"));
    }
    if values.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidArgument("ragged heatmap matrix".into()));
    }
    if values.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "heatmap values must be finite".into(),
        ));
    }
    if cell == 0 || !(range.0.is_finite() && range.1.is_finite()) || range.0 > range.1 {
        return Err(Error::InvalidArgument(
            "invalid cell size or value range".into(),
        ));
    }
    let (w, h) = (cols * cell, rows * cell);
    let mut out = Vec::new();
    out.extend_from_slice(b"P6\n");
    for line in prov.lines() {
        out.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    out.extend_from_slice(
        format!(
            "# range: {} {}\n",
            format_value(range.0),
            format_value(range.1)
        )
        .as_bytes(),
    );
    out.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    for row in values {
        let line: Vec<u8> = row
            .iter()
            .flat_map(|&v| std::iter::repeat_n(color_for(v, range), cell))
            .flatten()
            .collect();
        for _ in 0..cell {
            out.extend_from_slice(&line);
        }
    }
    Ok(out)
}

/// Sidecar file recording a heatmap's value range.
pub fn range_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".range.txt");
    PathBuf::from(s)
}

pub fn emit_heatmap(
    values: &[Vec<Option<f64>>],
    path: impl AsRef<Path>,
    range: (f64, f64),
    cell: usize,
    prov: &Provenance,
) -> Result<ReportArtifact> {
    let path = path.as_ref();
    write_atomic(path, &render_heatmap(values, range, cell, prov)?)?;
    let mut side = String::new();
    for line in prov.lines() {
        writeln!(side, "# {line}").expect("string write");
    }
    writeln!(
        side,
        "min {}\nmax {}",
        format_value(range.0),
        format_value(range.1)
    )
    .expect("string write");
    write_atomic(&range_sidecar_path(path), side.as_bytes())?;
    Ok(ReportArtifact {
        kind: ArtifactKind::Heatmap,
        path: path.to_path_buf(),
        metadata: prov.lines(),
    })
}

/// Splits a P6 file into `(width, height, pixels)`, skipping comments.
pub fn parse_p6(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let bad = || Error::InvalidArgument("not a P6 image".into());
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
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
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = &bytes[pos + 1..];
    if pixels.len() != w * h * 3 {
        return Err(bad());
    }
    Ok((w, h, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_formatting() {
        assert_eq!(format_value(1.0), "1.000000");
        assert_eq!(format_value(-0.5), "-0.500000");
        assert_eq!(format_value(-1e-9), "0.000000");
        assert_eq!(format_value(1.5e-4), "0.000150");
        assert_eq!(format_value(12345.678), "12345.678000");
    }

    #[test]
    fn masked_cells_are_empty_fields() {
        let mut t = Table::new(["a", "b", "c"]);
        t.push(vec![Cell::Num(1.0), Cell::Empty, Cell::Num(-0.5)]);
        let csv = render_csv(&t, &Provenance::default()).unwrap();
        let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body, vec!["a,b,c", "1.000000,,-0.500000"]);
    }

    #[test]
    fn non_finite_rejected() {
        let mut t = Table::new(["a"]);
        t.push(vec![Cell::Num(f64::NAN)]);
        assert!(render_csv(&t, &Provenance::default()).is_err());
    }

    #[test]
    fn single_cell_at_max_is_brightest() {
        let img =
            render_heatmap(&[vec![Some(1.0)]], (0.0, 1.0), 4, &Provenance::default()).unwrap();
        let (w, h, px) = parse_p6(&img).unwrap();
        assert_eq!((w, h), (4, 4));
        assert!(px.chunks(3).all(|c| c == colormap(255)));
        assert_eq!(colormap(255), LIGHT);
        assert_eq!(colormap(0), DARK);
    }

    #[test]
    fn identity_blocks() {
        let m = vec![vec![Some(1.0), Some(0.0)], vec![Some(0.0), Some(1.0)]];
        let img = render_heatmap(&m, (0.0, 1.0), 2, &Provenance::default()).unwrap();
        let (w, _, px) = parse_p6(&img).unwrap();
        let at = |x: usize, y: usize| &px[(y * w + x) * 3..(y * w + x) * 3 + 3];
        assert_eq!(at(0, 0), colormap(255));
        assert_eq!(at(3, 3), colormap(255));
        assert_eq!(at(2, 0), colormap(0));
        assert_eq!(at(1, 3), colormap(0));
    }

    #[test]
    fn values_are_clamped_and_masked() {
        let m = vec![vec![Some(5.0), None, Some(-5.0)]];
        let img = render_heatmap(&m, (-1.0, 1.0), 1, &Provenance::default()).unwrap();
        let (_, _, px) = parse_p6(&img).unwrap();
        assert_eq!(&px[0..3], colormap(255));
        assert_eq!(&px[3..6], MASKED);
        assert_eq!(&px[6..9], colormap(0));
    }

    #[test]
    fn empty_matrix_rejected() {
        assert!(render_heatmap(&[], (0.0, 1.0), 1, &Provenance::default()).is_err());
    }

    #[test]
    fn re_emission_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = vec![vec![Some(0.25), Some(-0.75)], vec![None, Some(0.5)]];
        let prov = Provenance {
            command: "test".into(),
            checkpoint_digest: Some("ab".into()),
            seed: Some(3),
        };
        let p = dir.path().join("h.ppm");
        emit_heatmap(&m, &p, (-1.0, 1.0), 3, &prov).unwrap();
        let first = std::fs::read(&p).unwrap();
        emit_heatmap(&m, &p, (-1.0, 1.0), 3, &prov).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
        let side = std::fs::read_to_string(range_sidecar_path(&p)).unwrap();
        assert!(side.contains("min -1.000000"));
    }
}
