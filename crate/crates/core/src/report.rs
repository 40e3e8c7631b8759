//! Standalone SVG charts and a checksummed artifact manifest.
//!
//! Every chart maps data values to pixels through one affine transform. The
//! plot area spans `[MARGIN_LEFT, WIDTH − MARGIN_RIGHT]` horizontally and
//! `[MARGIN_TOP, HEIGHT − MARGIN_BOTTOM]` vertically. With `lo = min(0, data)`
//! and `hi = max(0, data)`, a value `v` lands at
//!
//! ```text
//! y(v) = MARGIN_TOP + (hi − v) / (hi − lo) · plot_height
//! ```
//!
//! so zero is always on screen and nothing is clipped. Output is byte-for-byte
//! deterministic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::analysis::{ClassAggregate, ClassId};
use crate::error::{Error, Result};

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 400.0;
pub const MARGIN_LEFT: f64 = 70.0;
pub const MARGIN_RIGHT: f64 = 20.0;
pub const MARGIN_TOP: f64 = 40.0;
pub const MARGIN_BOTTOM: f64 = 60.0;
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChartKind {
    ClassBars,
    TopkStrips,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChartSpec {
    pub kind: ChartKind,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
}

impl ChartSpec {
    pub fn new(kind: ChartKind, title: impl Into<String>) -> Self {
        let (x_label, y_label) = match kind {
            ChartKind::ClassBars => ("class", "total attention"),
            ChartKind::TopkStrips => ("top-k slots per class", "attention score"),
        };
        ChartSpec {
            kind,
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
        }
    }
}

/// The value-to-pixel mapping shared by all charts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
}

impl Axis {
    pub fn covering(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo == hi {
            hi = lo + 1.0;
        }
        Axis { lo, hi }
    }

    pub fn plot_height() -> f64 {
        HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    }

    pub fn plot_width() -> f64 {
        WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    }

    pub fn y(&self, v: f64) -> f64 {
        MARGIN_TOP + (self.hi - v) / (self.hi - self.lo) * Self::plot_height()
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn class_label((task, class): ClassId) -> String {
    format!("{task}:{class}")
}

fn check_finite(values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::contract("chart values must be finite"))
    }
}

fn open_svg(s: &mut String, spec: &ChartSpec, axis: &Axis) {
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">
<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>
<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>
<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        WIDTH / 2.0,
        escape(&spec.title),
        MARGIN_LEFT + Axis::plot_width() / 2.0,
        HEIGHT - 12.0,
        escape(&spec.x_label),
        MARGIN_TOP + Axis::plot_height() / 2.0,
        MARGIN_TOP + Axis::plot_height() / 2.0,
        escape(&spec.y_label),
    );
    for v in [axis.lo, 0.0, axis.hi] {
        let y = axis.y(v);
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ccc"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.4e}</text>"##,
            MARGIN_LEFT,
            WIDTH - MARGIN_RIGHT,
            MARGIN_LEFT - 4.0,
            y + 4.0,
        );
    }
}

/// One bar per (task, class), in id order, rising from the zero line.
pub fn render_class_bars(aggregate: &ClassAggregate, spec: &ChartSpec) -> Result<String> {
    if aggregate.totals.is_empty() {
        return Err(Error::contract("nothing to plot: empty class aggregate"));
    }
    check_finite(aggregate.totals.values().copied())?;
    let axis = Axis::covering(aggregate.totals.values().copied());
    let mut s = String::new();
    open_svg(&mut s, spec, &axis);
    let n = aggregate.totals.len() as f64;
    let slot = Axis::plot_width() / n;
    let best = aggregate.argmax();
    for (i, (&class, &v)) in aggregate.totals.iter().enumerate() {
        let (y0, y1) = (axis.y(0.0), axis.y(v));
        let x = MARGIN_LEFT + slot * i as f64 + slot * 0.1;
        let fill = if Some(class) == best { "#d62728" } else { "#1f77b4" };
        let _ = writeln!(
            s,
            r#"<rect class="bar" data-class="{}" data-value="{v:e}" x="{x:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{fill}"/>"#,
            class_label(class),
            y0.min(y1),
            slot * 0.8,
            (y1 - y0).abs(),
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x + slot * 0.4,
            HEIGHT - MARGIN_BOTTOM + 16.0,
            class_label(class)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Per class, its descending score curve in its own segment of the x-axis.
/// Point `i` of a segment of width `w` starting at `x₀` sits at
/// `x₀ + (i + 0.5) / k_max · w`, where `k_max` is the longest list.
pub fn render_topk_strips(topk: &BTreeMap<ClassId, Vec<(usize, f64)>>, spec: &ChartSpec) -> Result<String> {
    if topk.is_empty() || topk.values().all(Vec::is_empty) {
        return Err(Error::contract("nothing to plot: empty top-k lists"));
    }
    check_finite(topk.values().flatten().map(|p| p.1))?;
    let axis = Axis::covering(topk.values().flatten().map(|p| p.1));
    let k_max = topk.values().map(Vec::len).max().unwrap_or(1) as f64;
    let seg = Axis::plot_width() / topk.len() as f64;
    let mut s = String::new();
    open_svg(&mut s, spec, &axis);
    for (i, (&class, list)) in topk.iter().enumerate() {
        let x0 = MARGIN_LEFT + seg * i as f64;
        let points: Vec<String> = list
            .iter()
            .enumerate()
            .map(|(j, &(_, v))| format!("{:.3},{:.3}", x0 + (j as f64 + 0.5) / k_max * seg, axis.y(v)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline class="strip" data-class="{}" points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
            class_label(class),
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r##"<line x1="{x0:.2}" y1="{:.2}" x2="{x0:.2}" y2="{:.2}" stroke="#999"/><text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            MARGIN_TOP,
            HEIGHT - MARGIN_BOTTOM,
            x0 + seg / 2.0,
            HEIGHT - MARGIN_BOTTOM + 16.0,
            class_label(class)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the bundled directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path != root.join(MANIFEST_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

/// Lists every file under `dir` (except an existing manifest) with its size
/// and SHA-256, writes the list to `dir/manifest.csv` and returns it.
pub fn bundle_report(dir: &Path) -> Result<Vec<ManifestEntry>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "report directory does not exist"),
        ));
    }
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut entries = files
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).expect("under root");
            Ok(ManifestEntry {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                bytes: fs::metadata(p).map_err(|e| Error::io(p, e))?.len(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let mut csv = String::from("path,bytes,sha256\n");
    for e in &entries {
        let _ = writeln!(csv, "{},{},{}", e.path, e.bytes, e.sha256);
    }
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, csv).map_err(|e| Error::io(&manifest, e))?;
    Ok(entries)
}
