//! Point clouds and agent identities shared across the pipeline.

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Which kind of sensor platform produced an observation. Vehicle and
/// roadside-infrastructure lidars differ in mounting height, sweep density
/// and beam pattern, so several pipeline stages key their parameters on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentType {
    Vehicle,
    Infrastructure,
}

impl AgentType {
    pub const ALL: [AgentType; 2] = [AgentType::Vehicle, AgentType::Infrastructure];

    /// Dense index for parameter tables keyed by type.
    pub fn index(self) -> usize {
        match self {
            AgentType::Vehicle => 0,
            AgentType::Infrastructure => 1,
        }
    }
}

impl std::fmt::Display for AgentType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AgentType::Vehicle => "vehicle",
            AgentType::Infrastructure => "infrastructure",
        })
    }
}

/// One lidar return in an agent's local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: Real,
    pub y: Real,
    pub z: Real,
    pub intensity: Real,
}

/// An unordered set of lidar returns in one agent's local frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new() -> PointCloud {
        PointCloud { points: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Point) {
        self.points.push(p);
    }

    /// Parse the plain-text exchange format: one `x y z intensity` line per
    /// point, whitespace separated. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<PointCloud> {
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::Parse(format!(
                    "line {}: expected 4 fields (x y z intensity), got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let mut v = [0.0; 4];
            for (slot, field) in v.iter_mut().zip(&fields) {
                *slot = field.parse::<Real>().map_err(|e| {
                    Error::Parse(format!("line {}: {:?}: {e}", lineno + 1, field))
                })?;
            }
            points.push(Point { x: v[0], y: v[1], z: v[2], intensity: v[3] });
        }
        Ok(PointCloud { points })
    }

    /// Serialize to the plain-text exchange format.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 32);
        for p in &self.points {
            out.push_str(&format!("{} {} {} {}\n", p.x, p.y, p.z, p.intensity));
        }
        out
    }

    pub fn read_file(path: &std::path::Path) -> Result<PointCloud> {
        PointCloud::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    /// Rigidly transform every point; intensities are carried through.
    pub fn transform(&self, m: &Matrix4<Real>) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| {
                let v = m * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
                Point { x: v[0], y: v[1], z: v[2], intensity: p.intensity }
            })
            .collect();
        PointCloud { points }
    }

    /// Concatenate clouds already expressed in a common frame.
    pub fn merge(parts: &[&PointCloud]) -> PointCloud {
        let mut points = Vec::with_capacity(parts.iter().map(|c| c.len()).sum());
        for c in parts {
            points.extend_from_slice(&c.points);
        }
        PointCloud { points }
    }
}
