//! Evaluation reports and their stable JSON encoding.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episodic::RepMode;
use crate::error::{Error, Result};

use super::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: RepMode,
    pub split: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub tasks: usize,
    pub seed: u64,
    pub mean_accuracy: f64,
    pub ci95: f64,
    /// Mean IoU of query localizations against ground-truth boxes.
    pub loc_mean_iou: f64,
    /// Fraction of query localizations with IoU ≥ 0.5.
    pub corloc: f64,
    pub per_task_accuracy: Vec<f64>,
    pub config: RunConfig,
}

/// Prototype and refined evaluations of one checkpoint on the same tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Refined representations are expected to classify at least as well.
    pub expectation: String,
    pub refined_minus_prototype: f64,
    pub improved: bool,
    pub prototype: EvalReport,
    pub refined: EvalReport,
}

impl ComparisonReport {
    pub fn new(prototype: EvalReport, refined: EvalReport) -> Self {
        let delta = refined.mean_accuracy - prototype.mean_accuracy;
        Self {
            expectation: "refined accuracy >= prototype accuracy".into(),
            refined_minus_prototype: delta,
            improved: delta > 0.0,
            prototype,
            refined,
        }
    }
}

/// Normal-approximation 95% interval half-width: `1.96·s/√n` with the
/// sample standard deviation `s`; zero for fewer than two values.
pub fn ci95(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

/// Writes floats with 17 significant digits; everything else as compact JSON.
struct FixedDigits;

impl serde_json::ser::Formatter for FixedDigits {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes `value` with fields in declaration order and 17-digit reals.
pub fn to_stable_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedDigits);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn report_emit<T: Serialize>(report: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_stable_json(report)?).map_err(|e| Error::io(path, e))
}

pub fn read_report<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
