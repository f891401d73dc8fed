//! Run artifacts: CSV tables, a JSON manifest, and self-contained SVG
//! charts. Everything here is deterministic in its inputs so repeated runs
//! produce byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sweep::{AblationRow, SweepRow, ABLATION_HEADER, SWEEP_HEADER};
use super::train::EpochStats;
use crate::{Error, Real, Result};

/// Write a CSV with the given header line and prerendered rows.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let lines: Vec<String> = rows.iter().map(|r| r.csv_line()).collect();
    write_csv(path, SWEEP_HEADER, &lines)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let lines: Vec<String> = rows.iter().map(|r| r.csv_line()).collect();
    write_csv(path, ABLATION_HEADER, &lines)
}

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let lines: Vec<String> = history
        .iter()
        .map(|h| {
            format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                h.epoch, h.lr, h.loss, h.detection, h.imitation, h.gap
            )
        })
        .collect();
    write_csv(path, "epoch,lr,loss,detection,imitation,gap", &lines)
}

/// Parse a sweep CSV back into (label, ap50, ap70) triples.
pub fn read_sweep_csv(path: &Path) -> Result<Vec<(String, Real, Real)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == SWEEP_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "expected header '{SWEEP_HEADER}', found {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse(format!("line {}: expected 3 fields", n + 2)));
        }
        let ap50: Real =
            parts[1].parse().map_err(|_| Error::Parse(format!("line {}: bad ap50", n + 2)))?;
        let ap70: Real =
            parts[2].parse().map_err(|_| Error::Parse(format!("line {}: bad ap70", n + 2)))?;
        rows.push((parts[0].to_string(), ap50, ap70));
    }
    Ok(rows)
}

/// What a run wrote and under which settings. The notes spell out where the
/// desk-scale setup deliberately simplifies a full road deployment.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    /// Full settings echo, rendered as TOML, so a run can be repeated from
    /// its manifest alone.
    pub config_toml: String,
    pub seed: u64,
    pub precision: String,
    pub deterministic: bool,
    pub artifacts: Vec<String>,
    pub notes: Vec<String>,
}

impl Manifest {
    pub fn new(cfg: &super::Config, seed: u64) -> Manifest {
        Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            config_toml: toml::to_string(cfg).expect("config serializes"),
            seed,
            precision: crate::PRECISION.to_string(),
            deterministic: true,
            artifacts: Vec::new(),
            notes: standard_notes(),
        }
    }

    pub fn with_artifacts(mut self, names: &[&str]) -> Manifest {
        self.artifacts.extend(names.iter().map(|s| s.to_string()));
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Fixed caveats describing how this workbench differs from a full-scale
/// deployment; they ship with every manifest.
pub fn standard_notes() -> Vec<String> {
    [
        "scenes are synthetic box worlds with surface-sampled points, not recorded drives",
        "the grid, channel count, and schedule are desk-scale so runs finish in minutes on a CPU",
        "one remote sensor and a single past ego frame by default",
        "sensor heterogeneity is emulated through density, ring, and intensity differences",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// One named polyline of a chart.
pub struct Series {
    pub name: String,
    pub points: Vec<(Real, Real)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Render a fixed-size line chart as a standalone SVG document.
pub fn render_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (width, height) = (640.0, 400.0);
    let (left, right, top, bottom) = (64.0, 24.0, 40.0, 48.0);
    let (plot_w, plot_h) = (width - left - right, height - top - bottom);

    let finite_points: Vec<(Real, Real)> =
        series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (0.0, 1.0, 0.0, 1.0);
    if !finite_points.is_empty() {
        x0 = finite_points.iter().map(|p| p.0).fold(Real::INFINITY, Real::min);
        x1 = finite_points.iter().map(|p| p.0).fold(Real::NEG_INFINITY, Real::max);
        y0 = finite_points.iter().map(|p| p.1).fold(Real::INFINITY, Real::min);
        y1 = finite_points.iter().map(|p| p.1).fold(Real::NEG_INFINITY, Real::max);
        if x1 == x0 {
            x1 = x0 + 1.0;
        }
        if y1 == y0 {
            y1 = y0 + 1.0;
        }
        // Scores live in [0, 1]; use that natural range when it applies.
        if y0 >= 0.0 && y1 <= 1.0 {
            y0 = 0.0;
            y1 = 1.0;
        }
    }

    let sx = |x: Real| left + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: Real| top + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        width / 2.0,
        escape(title)
    ));

    // Axes and ticks.
    svg.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h
    ));
    svg.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + plot_h
    ));
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as Real / 4.0;
        let fy = y0 + (y1 - y0) * k as Real / 4.0;
        let px = sx(fx);
        let py = sy(fy);
        svg.push_str(&format!(
            "  <line x1=\"{px}\" y1=\"{}\" x2=\"{px}\" y2=\"{}\" stroke=\"black\"/>\n",
            top + plot_h,
            top + plot_h + 4.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{px}\" y=\"{}\" text-anchor=\"middle\">{fx:.2}</text>\n",
            top + plot_h + 18.0
        ));
        svg.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{py}\" x2=\"{left}\" y2=\"{py}\" stroke=\"black\"/>\n",
            left - 4.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{fy:.2}</text>\n",
            left - 8.0,
            py + 4.0
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        left + plot_w / 2.0,
        height - 10.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "  <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        escape(y_label)
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        for &(x, y) in &s.points {
            svg.push_str(&format!(
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        let ly = top + 8.0 + 16.0 * i as Real;
        svg.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            left + plot_w - 110.0,
            left + plot_w - 90.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\">{}</text>\n",
            left + plot_w - 84.0,
            ly + 4.0,
            escape(&s.name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
