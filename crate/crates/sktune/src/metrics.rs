//! Evaluation metrics and CSV/JSON report emission.
//!
//! Conventions used everywhere: F1 is positive-class for binary tasks and
//! unweighted macro for multiclass; a class with zero precision+recall
//! contributes F1 = 0; MCC is binary-only and 0 when any marginal factor is 0.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint::format_f64;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::TrainRun;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: Option<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
    pub averaging: Averaging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    BinaryPos,
    Macro,
}

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty);
    }
    Ok(())
}

/// Row = true label, column = prediction.
pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    check_lengths(preds, labels)?;
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::LabelOutOfRange { label: p.max(y), classes });
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// Correct predictions over total, generalized to multiclass.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn class_f1(m: &[Vec<usize>], c: usize) -> f64 {
    let classes = m.len();
    let tp = m[c][c] as f64;
    let fp: f64 = (0..classes).filter(|&y| y != c).map(|y| m[y][c] as f64).sum();
    let fn_: f64 = (0..classes).filter(|&p| p != c).map(|p| m[c][p] as f64).sum();
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Unweighted mean of the per-class F1 scores, summed in value order so the
/// result is exactly invariant under class relabeling.
fn macro_f1(m: &[Vec<usize>]) -> f64 {
    let mut scores: Vec<f64> = (0..m.len()).map(|c| class_f1(m, c)).collect();
    scores.sort_by(f64::total_cmp);
    scores.iter().sum::<f64>() / m.len() as f64
}

/// Harmonic mean of precision and recall, per the selected averaging.
pub fn f1(preds: &[usize], labels: &[usize], averaging: Averaging) -> Result<f64> {
    check_lengths(preds, labels)?;
    let classes = preds.iter().chain(labels).max().unwrap() + 1;
    let m = confusion(preds, labels, classes)?;
    Ok(match averaging {
        Averaging::BinaryPos => class_f1(&m, 1.min(classes - 1)),
        Averaging::Macro => macro_f1(&m),
    })
}

/// Matthews correlation coefficient for binary predictions.
pub fn mcc(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    if preds.iter().chain(labels).any(|&v| v > 1) {
        return Err(Error::NonBinary);
    }
    let mut tp = 0f64;
    let mut tn = 0f64;
    let mut fp = 0f64;
    let mut fn_ = 0f64;
    for (&p, &y) in preds.iter().zip(labels) {
        match (y, p) {
            (1, 1) => tp += 1.0,
            (0, 0) => tn += 1.0,
            (0, 1) => fp += 1.0,
            (1, 0) => fn_ += 1.0,
            _ => unreachable!(),
        }
    }
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fn_) / denom.sqrt())
}

/// Full report with the task-appropriate averaging: binary tasks get
/// positive-class F1 plus MCC, multiclass gets macro F1.
pub fn report(preds: &[usize], labels: &[usize], classes: usize) -> Result<MetricsReport> {
    let m = confusion(preds, labels, classes)?;
    let averaging = if classes == 2 { Averaging::BinaryPos } else { Averaging::Macro };
    let f1_value = match averaging {
        Averaging::BinaryPos => class_f1(&m, 1),
        Averaging::Macro => macro_f1(&m),
    };
    Ok(MetricsReport {
        accuracy: accuracy(preds, labels)?,
        f1: f1_value,
        mcc: if classes == 2 { Some(mcc(preds, labels)?) } else { None },
        confusion: m,
        n: preds.len(),
        averaging,
    })
}

/// The summary schema emitted next to every run CSV.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub method: String,
    pub params_pct: f64,
    pub convergence_step: Option<usize>,
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: Option<f64>,
}

impl RunSummary {
    pub fn of(run: &TrainRun) -> RunSummary {
        RunSummary {
            method: run.method.clone(),
            params_pct: run.trainable_pct,
            convergence_step: run.convergence_step,
            accuracy: run.metrics.accuracy,
            f1: run.metrics.f1,
            mcc: run.metrics.mcc,
        }
    }
}

/// Write `step,loss` rows (17-significant-digit floats) at `path` and a
/// sibling `summary.json`.
pub fn emit_run_csv(run: &TrainRun, path: &Path) -> Result<()> {
    let mut csv = String::from("step,loss\n");
    for (i, loss) in run.losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i, format_f64(*loss)));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(csv.as_bytes())?;
    let summary = serde_json::to_string_pretty(&RunSummary::of(run)).expect("summary serializes");
    let sibling = path.with_file_name("summary.json");
    std::fs::write(sibling, summary.as_bytes())?;
    Ok(())
}

/// Labeled attention matrix export for one (layer, head): header row of
/// column tokens, one row per query token, every data row summing to 1.
pub fn emit_attention_csv(
    attn: &Tensor,
    layer: usize,
    head: usize,
    row_tokens: &[String],
    col_tokens: &[String],
    path: &Path,
) -> Result<()> {
    let shape = attn.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!("attention tensor rank {:?}", shape)));
    }
    let (layers, heads, rows, cols) = (shape[0], shape[1], shape[2], shape[3]);
    if layer >= layers || head >= heads {
        return Err(Error::IndexOutOfRange(format!(
            "layer {} head {} of [{} layers, {} heads]",
            layer, head, layers, heads
        )));
    }
    if row_tokens.len() != rows || col_tokens.len() != cols {
        return Err(Error::LengthMismatch(format!(
            "{} row / {} col labels for a {}x{} map",
            row_tokens.len(),
            col_tokens.len(),
            rows,
            cols
        )));
    }
    let data = attn.data();
    let base = (layer * heads + head) * rows * cols;
    let mut out = String::from("token");
    for tok in col_tokens {
        out.push(',');
        out.push_str(tok);
    }
    out.push('\n');
    for (i, tok) in row_tokens.iter().enumerate() {
        out.push_str(tok);
        for j in 0..cols {
            out.push(',');
            out.push_str(&format_f64(data[base + i * cols + j]));
        }
        out.push('\n');
    }
    drop(data);
    std::fs::write(path, out.as_bytes())?;
    Ok(())
}
