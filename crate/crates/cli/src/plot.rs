//! SVG rendering of run directories. Values are copied verbatim from the CSV
//! files into `data-value` attributes; only positions are derived.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dynammo::metrics::ConfusionMatrix;
use dynammo::pipeline::METRICS_FILE;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Point {
    pub task: usize,
    /// Accuracy exactly as written in metrics.csv.
    pub raw: String,
    pub value: f64,
}

pub struct Heatmap {
    pub task: usize,
    pub classes: Vec<u32>,
    pub matrix: ConfusionMatrix,
}

pub struct RunData {
    pub label: String,
    pub points: Vec<Point>,
    pub heatmaps: Vec<Heatmap>,
}

impl RunData {
    /// Reads metrics.csv and every confusion_{t}.csv it implies; lists all
    /// missing files at once.
    pub fn load(dir: &Path) -> Result<Self> {
        let metrics = dir.join(METRICS_FILE);
        if !metrics.is_file() {
            bail!("incomplete run directory {}: missing {METRICS_FILE}", dir.display());
        }
        let mut reader = csv::Reader::from_path(&metrics).with_context(|| format!("reading {}", metrics.display()))?;
        let mut points = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.with_context(|| format!("{}: row {}", metrics.display(), i + 2))?;
            let (Some(t), Some(a)) = (rec.get(0), rec.get(1)) else {
                bail!("{}: row {} has too few fields", metrics.display(), i + 2);
            };
            let task = t.parse().with_context(|| format!("{}: bad task id `{t}`", metrics.display()))?;
            let value = a.parse().with_context(|| format!("{}: bad accuracy `{a}`", metrics.display()))?;
            points.push(Point {
                task,
                raw: a.to_owned(),
                value,
            });
        }
        let missing: Vec<String> = points
            .iter()
            .map(|p| format!("confusion_{}.csv", p.task))
            .filter(|f| !dir.join(f).is_file())
            .collect();
        if !missing.is_empty() {
            bail!("incomplete run directory {}: missing {}", dir.display(), missing.join(", "));
        }
        let mut heatmaps = Vec::with_capacity(points.len());
        for p in &points {
            let (classes, matrix) = ConfusionMatrix::read_csv(&dir.join(format!("confusion_{}.csv", p.task)))?;
            heatmaps.push(Heatmap {
                task: p.task,
                classes,
                matrix,
            });
        }
        let label = dir
            .canonicalize()
            .ok()
            .and_then(|d| d.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Self {
            label,
            points,
            heatmaps,
        })
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Accuracy (0..100) against task index, one polyline per run.
pub fn curves_svg(runs: &[RunData]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 160.0, 30.0, 50.0);
    let n = runs.iter().flat_map(|r| r.points.iter().map(|p| p.task)).max().unwrap_or(1).max(2);
    let x = |t: usize| left + (t - 1) as f64 * (w - left - right) / (n - 1) as f64;
    let y = |a: f64| top + (100.0 - a) * (h - top - bottom) / 100.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for tick in (0..=100).step_by(20) {
        let ty = y(tick as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{ty}" x2="{}" y2="{ty}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{tick}</text>"##,
            w - right,
            left - 6.0,
            ty + 4.0
        );
    }
    for t in 1..=n {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{t}</text>"#, x(t), h - bottom + 18.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">task</text><text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">accuracy (%)</text>"#,
        (left + w - right) / 2.0,
        h - 10.0,
        h / 2.0,
        h / 2.0
    );
    for (i, run) in runs.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let label = esc(&run.label);
        let pts: Vec<String> = run.points.iter().map(|p| format!("{},{}", x(p.task), y(p.value))).collect();
        let _ = writeln!(s, r#"<g class="run" data-run="{label}">"#);
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for p in &run.points {
            let _ = writeln!(
                s,
                r#"<circle class="point" cx="{}" cy="{}" r="4" fill="{colour}" data-task="{}" data-value="{}"><title>{label} task {}: {}</title></circle>"#,
                x(p.task),
                y(p.value),
                p.task,
                esc(&p.raw),
                p.task,
                esc(&p.raw)
            );
        }
        let ly = top + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="12" height="12" fill="{colour}"/><text class="legend" x="{}" y="{}">{label}</text>"#,
            w - right + 12.0,
            ly,
            w - right + 30.0,
            ly + 10.0
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

/// Count heatmap: rows are true classes, columns predictions.
pub fn heatmap_svg(title: &str, m: &Heatmap) -> String {
    let k = m.classes.len().max(1);
    let cell = (360.0 / k as f64).clamp(16.0, 48.0);
    let (left, top) = (60.0, 50.0);
    let side = cell * k as f64;
    let (w, h) = (left + side + 20.0, top + side + 20.0);
    let max = (0..m.classes.len())
        .flat_map(|r| (0..m.classes.len()).map(move |c| (r, c)))
        .map(|(r, c)| m.matrix.get(r, c))
        .max()
        .unwrap_or(0)
        .max(1);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">{}</text>"#, esc(title));
    for (i, c) in m.classes.iter().enumerate() {
        let mid = left + cell * (i as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{mid}" y="{}" text-anchor="middle">{c}</text>"#, top - 6.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{c}</text>"#, left - 6.0, top + cell * (i as f64 + 0.5) + 4.0);
    }
    for r in 0..m.classes.len() {
        for c in 0..m.classes.len() {
            let v = m.matrix.get(r, c);
            let shade = 255 - (v * 200 / max) as u8;
            let (cx, cy) = (left + cell * c as f64, top + cell * r as f64);
            let _ = writeln!(
                s,
                r##"<rect class="cell" x="{cx}" y="{cy}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#fff" data-true="{}" data-pred="{}" data-value="{v}"/><text x="{}" y="{}" text-anchor="middle">{v}</text>"##,
                m.classes[r],
                m.classes[c],
                cx + cell / 2.0,
                cy + cell / 2.0 + 4.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes the curve figure to `out` and one heatmap per task and run beside it.
pub fn render(runs: &[RunData], out: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(anyhow!("no runs to plot"));
    }
    let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plot".into());
    write(out, &curves_svg(runs))?;
    let mut written = vec![out.to_path_buf()];
    for run in runs {
        for m in &run.heatmaps {
            let name = if runs.len() == 1 {
                format!("{stem}_confusion_{}.svg", m.task)
            } else {
                format!("{stem}_{}_confusion_{}.svg", run.label, m.task)
            };
            let path = dir.join(name);
            write(&path, &heatmap_svg(&format!("{} after task {}", run.label, m.task), m))?;
            written.push(path);
        }
    }
    Ok(written)
}
