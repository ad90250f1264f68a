use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, Rgb, RgbImage};

use super::{AblationResult, CellSummary, StageGridResult};
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Published CIFAR-100 grid values (240-epoch schedule) shown for
/// comparison: baseline, then `(student stage, teacher stage, accuracy)`.
pub const GRID_REFERENCE: (f64, &[(usize, usize, f64)]) = (69.1, &[(3, 3, 71.0), (1, 4, 66.3)]);

/// Published CIFAR-100 accuracies of the six ablation rows.
pub const ABLATION_REFERENCE: [f64; 6] = [74.3, 75.2, 75.6, 76.0, 75.8, 76.2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Png,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "png" => Ok(ReportFormat::Png),
            other => Err(Error::UnsupportedFormat(other.to_string())),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
            ReportFormat::Png => "png",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Report<'a> {
    Grid(&'a StageGridResult),
    Ablation(&'a AblationResult),
}

/// Renders `report` to bytes. Identical results give identical bytes.
pub fn render(report: Report<'_>, format: ReportFormat) -> Result<Vec<u8>> {
    match (report, format) {
        (Report::Grid(g), ReportFormat::Csv) => grid_csv(g),
        (Report::Grid(g), ReportFormat::Markdown) => Ok(grid_markdown(g).into_bytes()),
        (Report::Grid(g), ReportFormat::Png) => png(&grid_image(g)),
        (Report::Ablation(a), ReportFormat::Csv) => ablation_csv(a),
        (Report::Ablation(a), ReportFormat::Markdown) => Ok(ablation_markdown(a).into_bytes()),
        (Report::Ablation(a), ReportFormat::Png) => png(&ablation_image(a)),
    }
}

/// Renders and writes `report` atomically to `path`.
pub fn emit_report(report: Report<'_>, format: ReportFormat, path: &Path) -> Result<()> {
    write_atomic(path, &render(report, format)?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Other(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Other(e.to_string()))
}

fn summary_fields(s: &CellSummary) -> Vec<String> {
    vec![
        fmt_opt(s.mean),
        fmt_opt(s.variance),
        s.runs.len().to_string(),
        s.error.clone().unwrap_or_default(),
    ]
}

fn grid_csv(g: &StageGridResult) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    if let Some(b) = &g.baseline {
        let mut r = vec!["baseline".to_string(), String::new(), String::new()];
        r.extend(summary_fields(b));
        rows.push(r);
    }
    for c in &g.cells {
        let mut r = vec!["cell".to_string(), c.student_stage.to_string(), c.teacher_stage.to_string()];
        r.extend(summary_fields(&c.summary));
        rows.push(r);
    }
    csv_bytes(
        &["kind", "student_stage", "teacher_stage", "mean", "variance", "runs", "error"],
        rows,
    )
}

fn grid_markdown(g: &StageGridResult) -> String {
    let base = g.baseline.as_ref().and_then(|b| b.mean);
    let mut out = String::new();
    let _ = writeln!(out, "| student \\ teacher |{}", (1..=g.stages).map(|j| format!(" {j} |")).collect::<String>());
    let _ = writeln!(out, "|---|{}", "---|".repeat(g.stages));
    for i in 1..=g.stages {
        let _ = write!(out, "| {i} |");
        for j in 1..=g.stages {
            let text = match g.cell(i, j) {
                Some(c) if !c.failed() => match (c.mean, base) {
                    (Some(m), Some(b)) if m > b => format!("{m:.2} ↑"),
                    (Some(m), Some(b)) if m < b => format!("{m:.2} ↓"),
                    (Some(m), _) => format!("{m:.2}"),
                    (None, _) => "—".into(),
                },
                _ => "—".into(),
            };
            let _ = write!(out, " {text} |");
        }
        out.push('\n');
    }
    let btext = match &g.baseline {
        Some(b) if !b.failed() => fmt_mean(b.mean),
        _ => "—".into(),
    };
    let _ = writeln!(out, "| baseline | {btext} |{}", " |".repeat(g.stages.saturating_sub(1)));
    let _ = writeln!(
        out,
        "\n↑ / ↓: above / below the plain-student baseline. Repeats per cell: {}.",
        g.repeats
    );
    let (rb, cells) = GRID_REFERENCE;
    let refs: Vec<String> = cells.iter().map(|(i, j, v)| format!("({i}, {j}) {v:.1}")).collect();
    let _ = writeln!(
        out,
        "Published CIFAR-100 reference: baseline {rb:.1}; {}.",
        refs.join("; ")
    );
    out
}

fn fmt_mean(m: Option<f64>) -> String {
    m.map(|v| format!("{v:.2}")).unwrap_or_else(|| "—".into())
}

fn ablation_csv(a: &AblationResult) -> Result<Vec<u8>> {
    let rows = a
        .rows
        .iter()
        .map(|r| {
            let f = r.flags;
            let mut v = vec![
                r.label.clone(),
                f.rm.to_string(),
                f.rlf.to_string(),
                f.abf.to_string(),
                f.hcl.to_string(),
            ];
            v.extend(summary_fields(&r.summary));
            v
        })
        .collect();
    csv_bytes(
        &["row", "rm", "rlf", "abf", "hcl", "mean", "variance", "runs", "error"],
        rows,
    )
}

fn ablation_markdown(a: &AblationResult) -> String {
    let mut out = String::from("| RM | RLF | ABF | HCL | accuracy | variance | reference |\n|---|---|---|---|---|---|---|\n");
    let mark = |b: bool| if b { "✓" } else { "" };
    for (k, r) in a.rows.iter().enumerate() {
        let f = r.flags;
        let (m, v) = if r.summary.failed() {
            ("—".to_string(), "—".to_string())
        } else {
            (fmt_mean(r.summary.mean), r.summary.variance.map(|v| format!("{v:.2}")).unwrap_or("—".into()))
        };
        let reference = ABLATION_REFERENCE.get(k).map(|v| format!("{v:.1}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {m} | {v} | {reference} |",
            mark(f.rm),
            mark(f.rlf),
            mark(f.abf),
            mark(f.hcl)
        );
    }
    let _ = writeln!(
        out,
        "\nMean and sample variance over {} seeds. Reference: published CIFAR-100 accuracies.",
        a.repeats
    );
    out
}

fn png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    PngEncoder::new(&mut bytes)
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| Error::Other(e.to_string()))?;
    Ok(bytes)
}

const CELL: u32 = 48;
const GRAY: Rgb<u8> = Rgb([160, 160, 160]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

fn fill(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, color);
        }
    }
}

/// Red above the baseline, blue below, intensity by distance; gray for
/// failed cells. The bottom-left strip shows the baseline itself.
fn grid_image(g: &StageGridResult) -> RgbImage {
    let n = g.stages.max(1) as u32;
    let mut img = RgbImage::from_pixel(n * CELL, (n + 1) * CELL, WHITE);
    let base = g.baseline.as_ref().and_then(|b| b.mean);
    let spread = g
        .cells
        .iter()
        .filter_map(|c| c.summary.mean.zip(base).map(|(m, b)| (m - b).abs()))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    for c in &g.cells {
        let color = match (c.summary.mean, base) {
            (Some(m), Some(b)) => {
                let t = ((m - b).abs() / spread).min(1.0);
                let fade = (255.0 * (1.0 - t)) as u8;
                if m >= b {
                    Rgb([255, fade, fade])
                } else {
                    Rgb([fade, fade, 255])
                }
            }
            (Some(m), None) => {
                let v = (255.0 * (m / 100.0).clamp(0.0, 1.0)) as u8;
                Rgb([v, v, v])
            }
            _ => GRAY,
        };
        let x = (c.teacher_stage as u32 - 1) * CELL;
        let y = (c.student_stage as u32 - 1) * CELL;
        fill(&mut img, x + 1, y + 1, CELL - 2, CELL - 2, color);
    }
    let bcolor = if base.is_some() { Rgb([255, 255, 255]) } else { GRAY };
    fill(&mut img, 0, n * CELL, CELL, CELL, Rgb([0, 0, 0]));
    fill(&mut img, 2, n * CELL + 2, CELL - 4, CELL - 4, bcolor);
    img
}

/// One bar per row with a one-standard-deviation whisker; failed rows are
/// gray stubs.
fn ablation_image(a: &AblationResult) -> RgbImage {
    let rows = a.rows.len().max(1) as u32;
    let (width, height) = (rows * CELL, 240u32);
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let means: Vec<f64> = a.rows.iter().filter_map(|r| r.summary.mean).collect();
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if means.is_empty() { (0.0, 1.0) } else { (lo - 1.0, hi + 1.0) };
    let scale = |v: f64| -> u32 { ((v - lo) / (hi - lo) * f64::from(height - 20)).clamp(0.0, f64::from(height - 20)) as u32 };
    for (k, r) in a.rows.iter().enumerate() {
        let x = k as u32 * CELL;
        match r.summary.mean {
            Some(m) if !r.summary.failed() => {
                let h = scale(m).max(1);
                fill(&mut img, x + 6, height - h, CELL - 12, h, Rgb([70, 110, 200]));
                let sd = r.summary.variance.unwrap_or(0.0).sqrt();
                let (top, bottom) = (scale(m + sd), scale(m - sd));
                fill(&mut img, x + CELL / 2 - 1, height - top, 2, top - bottom + 1, Rgb([0, 0, 0]));
            }
            _ => fill(&mut img, x + 6, height - 4, CELL - 12, 4, GRAY),
        }
    }
    img
}
