//! Per-step training logs as CSV, and SVG line charts drawn from them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use scaledp_core::training::{population_std, StepRecord};

use crate::codec::write_file;
use crate::error::{HarnessError, Result};

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub total_norm: f64,
    pub block_magnitudes: Vec<f64>,
    pub cross_block_std: f64,
    /// Success rate when the step was followed by an evaluation.
    pub eval_success: Option<f64>,
}

impl LogRow {
    pub fn from_record(r: &StepRecord, eval_success: Option<f64>) -> Self {
        Self {
            step: r.step,
            loss: r.loss,
            total_norm: r.stats.total_norm,
            block_magnitudes: r.stats.per_block_magnitude.clone(),
            cross_block_std: r.stats.cross_block_std,
            eval_success,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},{}", self.step, self.loss, self.total_norm);
        for m in &self.block_magnitudes {
            write!(s, ",{m}").expect("write to string");
        }
        write!(s, ",{},", self.cross_block_std).expect("write to string");
        if let Some(e) = self.eval_success {
            write!(s, "{e}").expect("write to string");
        }
        s
    }
}

pub fn log_header(blocks: usize) -> String {
    let mut cols = vec!["step".to_string(), "loss".into(), "total_norm".into()];
    cols.extend((0..blocks).map(|i| format!("grad_mag_block_{i}")));
    cols.push("cross_block_std".into());
    cols.push("eval_success".into());
    cols.join(",")
}

/// A parsed log: the block count from the header plus every row.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLog {
    pub blocks: usize,
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn render(&self) -> String {
        let mut s = log_header(self.blocks);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let err = |line: usize, detail: String| HarnessError::Log { path: path.to_path_buf(), line, detail };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let Some((_, header)) = lines.next() else {
            return Ok(Self { blocks: 0, rows: Vec::new() });
        };
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let blocks = cols.len().checked_sub(5).ok_or_else(|| err(1, format!("header has {} columns", cols.len())))?;
        if cols != log_header(blocks).split(',').collect::<Vec<_>>() {
            return Err(err(1, format!("header does not match the log schema: {header}")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let n = i + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(err(n, format!("{} fields, expected {}", fields.len(), cols.len())));
            }
            let num = |j: usize| -> Result<f64> {
                fields[j].parse::<f64>().map_err(|_| err(n, format!("{}: not a number '{}'", cols[j], fields[j])))
            };
            let step = fields[0].parse::<usize>().map_err(|_| err(n, format!("step: '{}'", fields[0])))?;
            let last = fields.len() - 1;
            rows.push(LogRow {
                step,
                loss: num(1)?,
                total_norm: num(2)?,
                block_magnitudes: (3..3 + blocks).map(num).collect::<Result<_>>()?,
                cross_block_std: num(3 + blocks)?,
                eval_success: if fields[last].is_empty() { None } else { Some(num(last)?) },
            });
        }
        Ok(Self { blocks, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(path, &text)
    }
}

pub const SVG_WIDTH: f64 = 800.0;
pub const SVG_HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// A single-series line chart in a fixed 800×400 viewport.
pub fn line_chart(title: &str, points: &[(f64, f64)]) -> String {
    let finite: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = finite.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = finite.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let (w, h) = (SVG_WIDTH - 2.0 * MARGIN, SVG_HEIGHT - 2.0 * MARGIN);
    let coords: Vec<String> = finite
        .iter()
        .map(|(x, y)| {
            let px = MARGIN + (x - x0) / (x1 - x0) * w;
            let py = SVG_HEIGHT - MARGIN - (y - y0) / (y1 - y0) * h;
            format!("{px:.2},{py:.2}")
        })
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="25" text-anchor="middle" font-size="16">{title}</text>"#, SVG_WIDTH / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{m},{t} V{b} H{r}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = SVG_HEIGHT - MARGIN,
        r = SVG_WIDTH - MARGIN
    );
    let _ = writeln!(s, r#"<text x="5" y="{}" font-size="11">{y1:.4e}</text>"#, MARGIN);
    let _ = writeln!(s, r#"<text x="5" y="{}" font-size="11">{y0:.4e}</text>"#, SVG_HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11">{x0}</text>"#, MARGIN, SVG_HEIGHT - MARGIN + 15.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{x1}</text>"#,
        SVG_WIDTH - MARGIN,
        SVG_HEIGHT - MARGIN + 15.0
    );
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportOutput {
    pub csv: PathBuf,
    /// Chart files; empty when the log had no rows.
    pub charts: Vec<PathBuf>,
}

/// Writes `report.csv` and, for a non-empty log, `loss.svg` and
/// `cross_block_std.svg` into `out`.
pub fn emit_report(log: &TrainingLog, out: &Path) -> Result<ReportOutput> {
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let csv = out.join("report.csv");
    write_file(&csv, log.render().as_bytes())?;
    let mut charts = Vec::new();
    if log.rows.is_empty() {
        log::warn!("log has no rows; wrote header only and no charts");
        return Ok(ReportOutput { csv, charts });
    }
    let series: [(&str, fn(&LogRow) -> f64); 2] =
        [("loss", |r| r.loss), ("cross_block_std", |r| r.cross_block_std)];
    for (name, f) in series {
        let pts: Vec<(f64, f64)> = log.rows.iter().map(|r| (r.step as f64, f(r))).collect();
        let path = out.join(format!("{name}.svg"));
        write_file(&path, line_chart(&format!("{name} vs step"), &pts).as_bytes())?;
        charts.push(path);
    }
    Ok(ReportOutput { csv, charts })
}

/// Largest gap between a row's stored cross-block std and the value
/// recomputed from its block columns.
pub fn max_recompute_error(log: &TrainingLog) -> f64 {
    log.rows.iter().map(|r| (population_std(&r.block_magnitudes) - r.cross_block_std).abs()).fold(0.0, f64::max)
}
