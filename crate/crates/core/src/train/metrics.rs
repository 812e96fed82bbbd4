//! Confusion matrix, precision/recall/F1 and the evaluation report.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Rows are ground truth, columns predictions.
    pub confusion_matrix: Vec<Vec<usize>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub sample_count: usize,
    /// Images per second over pure forward passes.
    pub throughput: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl EvalReport {
    /// Metrics from parallel truth/prediction label lists.
    pub fn from_predictions(
        class_names: &[String],
        truth: &[usize],
        predicted: &[usize],
        throughput: f64,
    ) -> Result<Self> {
        let k = class_names.len();
        if truth.len() != predicted.len() {
            return Err(Error::usage("truth and prediction counts differ"));
        }
        if let Some(&bad) = truth.iter().chain(predicted).find(|&&l| l >= k) {
            return Err(Error::usage(format!("label {bad} outside {k} classes")));
        }
        let mut cm = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            cm[t][p] += 1;
        }
        Ok(Self::from_confusion(class_names.to_vec(), cm, throughput))
    }

    pub fn from_confusion(class_names: Vec<String>, cm: Vec<Vec<usize>>, throughput: f64) -> Self {
        let k = cm.len();
        let mut precision = Vec::with_capacity(k);
        let mut recall = Vec::with_capacity(k);
        let mut f1 = Vec::with_capacity(k);
        for (c, row) in cm.iter().enumerate() {
            let tp = row[c];
            let predicted: usize = cm.iter().map(|r| r[c]).sum();
            let actual: usize = row.iter().sum();
            let p = ratio(tp, predicted);
            let r = ratio(tp, actual);
            precision.push(p);
            recall.push(r);
            f1.push(if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            });
        }
        Self {
            class_names,
            sample_count: cm.iter().flatten().sum(),
            macro_precision: mean(&precision),
            macro_recall: mean(&recall),
            macro_f1: mean(&f1),
            confusion_matrix: cm,
            precision,
            recall,
            f1,
            throughput,
        }
    }

    pub fn accuracy(&self) -> f64 {
        let correct: usize = (0..self.confusion_matrix.len())
            .map(|c| self.confusion_matrix[c][c])
            .sum();
        ratio(correct, self.sample_count)
    }

    /// Line-oriented `key=value` report; lists are comma separated and
    /// matrix rows `;` separated. Floats use shortest round-trip formatting.
    pub fn to_machine(&self) -> String {
        let floats = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let cm = self
            .confusion_matrix
            .iter()
            .map(|row| {
                row.iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join(";");
        let mut out = String::new();
        let _ = writeln!(out, "class_names={}", self.class_names.join(","));
        let _ = writeln!(out, "confusion_matrix={cm}");
        let _ = writeln!(out, "precision={}", floats(&self.precision));
        let _ = writeln!(out, "recall={}", floats(&self.recall));
        let _ = writeln!(out, "f1={}", floats(&self.f1));
        let _ = writeln!(out, "macro_precision={:?}", self.macro_precision);
        let _ = writeln!(out, "macro_recall={:?}", self.macro_recall);
        let _ = writeln!(out, "macro_f1={:?}", self.macro_f1);
        let _ = writeln!(out, "sample_count={}", self.sample_count);
        let _ = writeln!(out, "throughput={:?}", self.throughput);
        out
    }

    pub fn parse_machine(text: &str) -> Result<Self> {
        let bad = |m: String| Error::config(format!("eval report: {m}"));
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line `{line}` is not key=value")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| bad(format!("missing `{k}`")))
        };
        let float = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("bad number `{s}`")))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("bad count `{s}`")))
        };
        let floats = |s: &str| s.split(',').map(float).collect::<Result<Vec<_>>>();
        let cm = get("confusion_matrix")?
            .split(';')
            .map(|row| row.split(',').map(int).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class_names: get("class_names")?.split(',').map(str::to_string).collect(),
            confusion_matrix: cm,
            precision: floats(get("precision")?)?,
            recall: floats(get("recall")?)?,
            f1: floats(get("f1")?)?,
            macro_precision: float(get("macro_precision")?)?,
            macro_recall: float(get("macro_recall")?)?,
            macro_f1: float(get("macro_f1")?)?,
            sample_count: int(get("sample_count")?)?,
            throughput: float(get("throughput")?)?,
        })
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = self
            .class_names
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(5)
            .max(5);
        let lw = w.max(10);
        let _ = write!(out, "{:lw$}", "truth\\pred");
        for n in &self.class_names {
            let _ = write!(out, " {n:>w$}");
        }
        out.push('\n');
        for (n, row) in self.class_names.iter().zip(&self.confusion_matrix) {
            let _ = write!(out, "{n:lw$}");
            for v in row {
                let _ = write!(out, " {v:>w$}");
            }
            out.push('\n');
        }
        out.push('\n');
        let _ = writeln!(out, "{:w$}  precision  recall      f1", "class");
        for (i, n) in self.class_names.iter().enumerate() {
            let _ = writeln!(
                out,
                "{n:w$}  {:9.4}  {:6.4}  {:6.4}",
                self.precision[i], self.recall[i], self.f1[i]
            );
        }
        let _ = writeln!(
            out,
            "{:w$}  {:9.4}  {:6.4}  {:6.4}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1
        );
        let _ = writeln!(out, "samples: {}", self.sample_count);
        let _ = writeln!(out, "throughput: {:.1} images/s", self.throughput);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        ["fog", "rain", "snow", "sun"].map(String::from).to_vec()
    }

    #[test]
    fn perfect_predictions() {
        let t = vec![0, 1, 2, 3, 3];
        let r = EvalReport::from_predictions(&names(), &t, &t, 1.0).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        for (i, row) in r.confusion_matrix.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!(i == j || v == 0);
            }
        }
    }

    #[test]
    fn binary_hand_case() {
        // class 0: TP=3, FP=1, FN=1
        let truth = vec![0, 0, 0, 0, 1];
        let pred = vec![0, 0, 0, 1, 0];
        let r = EvalReport::from_predictions(&names()[..2], &truth, &pred, 0.0).unwrap();
        assert_eq!((r.precision[0], r.recall[0], r.f1[0]), (0.75, 0.75, 0.75));
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let truth: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let pred = vec![2; 40];
        let r = EvalReport::from_predictions(&names(), &truth, &pred, 0.0).unwrap();
        assert_eq!(r.recall[2], 1.0);
        assert_eq!(r.precision[2], 0.25);
        assert!((r.f1[2] - 0.4).abs() < 1e-12);
        assert!((r.macro_f1 - 0.1).abs() < 1e-12);
        assert_eq!(r.f1[0], 0.0);
    }

    #[test]
    fn machine_report_roundtrips() {
        let truth = vec![0, 1, 2, 3, 1, 2, 0];
        let pred = vec![0, 2, 2, 3, 1, 1, 3];
        let r = EvalReport::from_predictions(&names(), &truth, &pred, 123.456789).unwrap();
        assert_eq!(EvalReport::parse_machine(&r.to_machine()).unwrap(), r);
        assert!(r.to_text().contains("macro"));
    }
}
