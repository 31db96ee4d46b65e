//! Report assembly and the plain-text comparison table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{FpsMeasurement, RankDiagnostic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneStab {
    pub scene: String,
    pub e_stab: f64,
}

/// One model's scores over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub model: String,
    pub scenes: Vec<SceneStab>,
    pub sum: f64,
    #[serde(default)]
    pub fps: Option<FpsMeasurement>,
    #[serde(default)]
    pub rank: Vec<RankDiagnostic>,
    #[serde(default)]
    pub fingerprint: Option<String>,
}

impl StabilityReport {
    pub fn new(model: &str, scenes: Vec<SceneStab>) -> Self {
        let sum = scenes.iter().map(|s| s.e_stab).sum();
        Self {
            model: model.to_string(),
            scenes,
            sum,
            fps: None,
            rank: Vec::new(),
            fingerprint: None,
        }
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.scenes.len().max(1) as f64
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.model = label.to_string();
        self
    }
}

/// Scenes as rows, models as columns, then a `Sum` row and, when any model
/// was benchmarked, an `FPS` row.
pub fn render_table(reports: &[StabilityReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else {
        return out;
    };
    let w0 = first
        .scenes
        .iter()
        .map(|s| s.scene.len())
        .chain(["Scene".len()])
        .max()
        .unwrap_or(5);
    let widths: Vec<usize> = reports.iter().map(|r| r.model.len().max(10)).collect();
    let _ = write!(out, "{:<w0$}", "Scene");
    for (r, w) in reports.iter().zip(&widths) {
        let _ = write!(out, "  {:>w$}", r.model);
    }
    out.push('\n');
    for (i, s) in first.scenes.iter().enumerate() {
        let _ = write!(out, "{:<w0$}", s.scene);
        for (r, w) in reports.iter().zip(&widths) {
            match r.scenes.get(i) {
                Some(v) => {
                    let _ = write!(out, "  {:>w$.4}", v.e_stab);
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-");
                }
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<w0$}", "Sum");
    for (r, w) in reports.iter().zip(&widths) {
        let _ = write!(out, "  {:>w$.4}", r.sum);
    }
    out.push('\n');
    if reports.iter().any(|r| r.fps.is_some()) {
        let _ = write!(out, "{:<w0$}", "FPS");
        for (r, w) in reports.iter().zip(&widths) {
            match &r.fps {
                Some(f) => {
                    let _ = write!(out, "  {:>w$.2}", f.fps);
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
