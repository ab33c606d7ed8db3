//! Confusion matrices, UAR, accuracy and multi-model label fusion.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{class_index, CLASS_NAMES, N_CLASSES};

/// Tolerance on row sums for probabilities held in memory.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;
/// Looser bound for rows parsed from 6-decimal CSV; such rows are renormalised.
const CSV_ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
        }
        Ok(Self {
            n,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.n..(truth + 1) * self.n]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Aligned table with class names as row and column headers.
    pub fn to_text(&self, names: &[&str]) -> String {
        let label = |i: usize| names.get(i).map_or_else(|| i.to_string(), |s| s.to_string());
        let width = (0..self.n)
            .map(|i| label(i).len())
            .chain(self.counts.iter().map(|c| c.to_string().len()))
            .max()
            .unwrap_or(1)
            .max("true\\pred".len());
        let mut out = format!("{:>width$}", "true\\pred");
        for j in 0..self.n {
            write!(out, " {:>width$}", label(j)).unwrap();
        }
        out.push('\n');
        for i in 0..self.n {
            write!(out, "{:>width$}", label(i)).unwrap();
            for &c in self.row(i) {
                write!(out, " {c:>width$}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self, names: &[&str]) -> String {
        let label = |i: usize| names.get(i).map_or_else(|| i.to_string(), |s| s.to_string());
        let mut out = String::from("true");
        for j in 0..self.n {
            write!(out, ",{}", label(j)).unwrap();
        }
        out.push('\n');
        for i in 0..self.n {
            out.push_str(&label(i));
            for &c in self.row(i) {
                write!(out, ",{c}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if classes == 0 {
        return Err(Error::InvalidArgument("confusion matrix needs at least one class".into()));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= classes || p >= classes {
            return Err(Error::InvalidArgument(format!("label pair ({t}, {p}) outside 0..{classes}")));
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { n: classes, counts })
}

/// Mean per-class recall over the classes present in the ground truth.
pub fn uar(cm: &ConfusionMatrix) -> Result<f64> {
    let mut sum = 0.0;
    let mut present = 0usize;
    for i in 0..cm.n {
        let row_total: u64 = cm.row(i).iter().sum();
        if row_total == 0 {
            log::warn!("class {i} has no true samples and is left out of the UAR");
            continue;
        }
        sum += cm.get(i, i) as f64 / row_total as f64;
        present += 1;
    }
    if present == 0 {
        return Err(Error::Empty("UAR of an empty confusion matrix".into()));
    }
    Ok(sum / present as f64)
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Empty("accuracy of no samples".into()));
    }
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y_true.len() as f64)
}

/// Per-clip class probabilities, `N × 8` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub ids: Vec<String>,
    pub probs: Vec<f32>,
}

impl PredictionSet {
    pub fn new(ids: Vec<String>, probs: Vec<f32>) -> Result<Self> {
        let set = Self { ids, probs };
        set.validate(ROW_SUM_TOLERANCE)?;
        Ok(set)
    }

    fn validate(&self, tol: f64) -> Result<()> {
        if self.probs.len() != self.ids.len() * N_CLASSES {
            return Err(Error::Shape(format!(
                "{} ids but {} probabilities",
                self.ids.len(),
                self.probs.len()
            )));
        }
        for (id, row) in self.ids.iter().zip(self.probs.chunks_exact(N_CLASSES)) {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Numeric(format!("prediction row {id} has invalid probabilities")));
            }
            let s: f64 = row.iter().map(|&p| f64::from(p)).sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::Numeric(format!("prediction row {id} sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.probs[i * N_CLASSES..(i + 1) * N_CLASSES]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.probs.chunks_exact(N_CLASSES).map(argmax).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMethod {
    /// Elementwise mean of member probabilities.
    #[default]
    Mean,
    /// Majority vote over member labels; the row holds vote fractions.
    Vote,
}

fn check_ids(sets: &[PredictionSet]) -> Result<()> {
    let first = &sets[0];
    for s in &sets[1..] {
        if let Some(row) = (0..first.len().max(s.len())).find(|&i| first.ids.get(i) != s.ids.get(i)) {
            return Err(Error::IdMismatch {
                row,
                expected: first.ids.get(row).cloned().unwrap_or_default(),
                found: s.ids.get(row).cloned().unwrap_or_default(),
            });
        }
    }
    Ok(())
}

/// Combines prediction sets over identical id lists.
pub fn fuse_labels(sets: &[PredictionSet], method: FusionMethod) -> Result<PredictionSet> {
    if sets.is_empty() {
        return Err(Error::Empty("fusion of zero prediction sets".into()));
    }
    check_ids(sets)?;
    let k = sets.len() as f64;
    let n = sets[0].probs.len();
    let probs = match method {
        FusionMethod::Mean => (0..n)
            .map(|i| (sets.iter().map(|s| f64::from(s.probs[i])).sum::<f64>() / k) as f32)
            .collect(),
        FusionMethod::Vote => {
            let mut votes = vec![0.0f64; n];
            for s in sets {
                for (r, row) in s.probs.chunks_exact(N_CLASSES).enumerate() {
                    votes[r * N_CLASSES + argmax(row)] += 1.0;
                }
            }
            votes.into_iter().map(|v| (v / k) as f32).collect()
        }
    };
    Ok(PredictionSet {
        ids: sets[0].ids.clone(),
        probs,
    })
}

/// `id,label,p0..p7` with the label as a class name and six decimals.
pub fn predictions_to_csv(set: &PredictionSet) -> String {
    let mut out = String::from("id,label");
    for c in 0..N_CLASSES {
        write!(out, ",p{c}").unwrap();
    }
    out.push('\n');
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for (i, id) in set.ids.iter().enumerate() {
        let row = set.row(i);
        let mut rec = vec![id.clone(), CLASS_NAMES[argmax(row)].to_string()];
        rec.extend(row.iter().map(|p| format!("{p:.6}")));
        w.write_record(&rec).expect("in-memory write");
    }
    out.push_str(std::str::from_utf8(&w.into_inner().expect("in-memory flush")).expect("utf-8"));
    out
}

pub fn write_predictions(path: impl AsRef<Path>, set: &PredictionSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, predictions_to_csv(set)).map_err(|e| Error::io(path, e))
}

/// Parses a predictions file. Rows are renormalised after parsing,
/// since six-decimal rounding alone can move a row sum by a few 1e-6.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, path)
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<PredictionSet> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::malformed(path, e.to_string()))?;
    let expected: Vec<String> = ["id".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..N_CLASSES).map(|c| format!("p{c}")))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::malformed(path, format!("header must be {}", expected.join(","))));
    }
    let mut ids = Vec::new();
    let mut probs = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::malformed(path, e.to_string()))?;
        let row: Vec<f32> = rec
            .iter()
            .skip(2)
            .map(|v| v.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::malformed(path, format!("row {}: {e}", line + 1)))?;
        if class_index(&rec[1]).is_none() {
            return Err(Error::malformed(path, format!("row {}: unknown class {:?}", line + 1, &rec[1])));
        }
        let s: f64 = row.iter().map(|&p| f64::from(p)).sum();
        if !(s - 1.0).is_finite() || (s - 1.0).abs() > CSV_ROW_SUM_TOLERANCE {
            return Err(Error::malformed(path, format!("row {}: probabilities sum to {s}", line + 1)));
        }
        probs.extend(row.iter().map(|&p| (f64::from(p) / s) as f32));
        ids.push(rec[0].to_string());
    }
    let set = PredictionSet { ids, probs };
    set.validate(CSV_ROW_SUM_TOLERANCE)?;
    Ok(set)
}
