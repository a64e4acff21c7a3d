//! Accuracy, confusion matrices, the new-class bias diagnostic, and
//! machine-readable report emission.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bias::{apply_bias, BiasParams};
use crate::data::LabeledSample;
use crate::error::{BicError, Result};
use crate::matrix::DenseMatrix;
use crate::nn::NetworkModel;

/// Square count matrix over seen classes; rows are true classes, columns
/// predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    /// Row-major counts, `classes * classes` entries.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class * self.classes + predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }
}

/// Top-1 accuracy and confusion matrix over a test set, with the current
/// step's bias correction applied to the logits when present.
pub fn evaluate(
    model: &NetworkModel,
    bias: Option<&BiasParams>,
    test_set: &[LabeledSample],
    n: usize,
    m: usize,
) -> Result<(f64, ConfusionMatrix)> {
    let classes = n + m;
    if model.output_dim() != classes {
        return Err(BicError::Shape(format!(
            "model has {} outputs, expected n+m = {}",
            model.output_dim(),
            classes
        )));
    }
    if let Some(s) = test_set.iter().find(|s| s.label >= classes) {
        return Err(BicError::Data(format!(
            "test sample {} has unseen class {}",
            s.id, s.label
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    if test_set.is_empty() {
        return Ok((0.0, cm));
    }
    let features: Vec<Vec<f64>> = test_set.iter().map(|s| s.features.clone()).collect();
    let logits = model.forward(&DenseMatrix::from_rows(&features)?)?;
    for (row, sample) in logits.iter_rows().zip(test_set) {
        let corrected;
        let scores: &[f64] = match bias {
            Some(b) => {
                corrected = apply_bias(row, b.new_class_range.0, b)?;
                &corrected
            }
            None => row,
        };
        let predicted = scores
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        cm.record(sample.label, predicted);
    }
    Ok((cm.accuracy(), cm))
}

/// Fraction of old-class test samples predicted as any new class:
/// `sum_{i<n, j>=n} cm[i][j] / sum_{i<n} row_sum(i)`.
pub fn new_class_bias_ratio(cm: &ConfusionMatrix, n: usize, m: usize) -> Result<f64> {
    if n == 0 || m == 0 || cm.classes != n + m {
        return Err(BicError::Argument(format!(
            "bias ratio needs n >= 1, m >= 1 and a {}x{} matrix",
            n + m,
            n + m
        )));
    }
    let mut old_total = 0u64;
    let mut old_to_new = 0u64;
    for i in 0..n {
        for j in 0..cm.classes {
            let c = cm.get(i, j);
            old_total += c;
            if j >= n {
                old_to_new += c;
            }
        }
    }
    if old_total == 0 {
        return Err(BicError::Data("no old-class test samples".into()));
    }
    Ok(old_to_new as f64 / old_total as f64)
}

/// One completed increment in a run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub classes_seen: usize,
    pub accuracy: f64,
    /// Fitted bias parameters; absent at step 0 and for non-bic variants.
    pub bias: Option<BiasParams>,
    pub confusion: ConfusionMatrix,
}

/// Full machine-readable result of one incremental run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    /// Flat key=value echo of the resolved configuration.
    pub config: BTreeMap<String, String>,
    pub steps: Vec<StepReport>,
    /// Final accuracy gap to the joint upper bound, when known.
    pub degradation: Option<f64>,
}

impl RunReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.steps.last().map(|s| s.accuracy)
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let io = |e: std::io::Error| BicError::io(path.display().to_string(), e);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(contents).map_err(io)?;
    f.flush().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Writes `accuracy.csv`, one `confusion_step<t>.csv` per step, and
/// `summary.json` into `out_dir`, overwriting atomically.
pub fn emit_report(report: &RunReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| BicError::io(out_dir.display().to_string(), e))?;

    let mut acc = String::from("step,classes_seen,variant,accuracy\n");
    for s in &report.steps {
        acc.push_str(&format!(
            "{},{},{},{:.6}\n",
            s.step, s.classes_seen, report.variant, s.accuracy
        ));
    }
    write_atomic(&out_dir.join("accuracy.csv"), acc.as_bytes())?;

    for s in &report.steps {
        let mut csv = String::new();
        let header: Vec<String> = (0..s.confusion.classes).map(|c| c.to_string()).collect();
        csv.push_str(&header.join(","));
        csv.push('\n');
        for i in 0..s.confusion.classes {
            let row: Vec<String> = (0..s.confusion.classes)
                .map(|j| s.confusion.get(i, j).to_string())
                .collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        write_atomic(
            &out_dir.join(format!("confusion_step{}.csv", s.step)),
            csv.as_bytes(),
        )?;
    }

    let json = serde_json::to_vec_pretty(report)
        .map_err(|e| BicError::Data(format!("report serialization failed: {e}")))?;
    write_atomic(&out_dir.join("summary.json"), &json)
}

/// Reads a `summary.json` back.
pub fn load_report(path: &Path) -> Result<RunReport> {
    let bytes = fs::read(path).map_err(|e| BicError::io(path.display().to_string(), e))?;
    serde_json::from_slice(&bytes).map_err(|e| BicError::Format {
        path: path.display().to_string(),
        detail: format!("summary.json does not parse: {e}"),
    })
}
