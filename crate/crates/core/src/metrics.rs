//! Confusion counts and the derived report columns.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// Sensitivity with the convention `TP+FN = 0 -> 1 if FP = 0 else 0`.
    pub fn sensitivity(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            if self.fp == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    /// Specificity with the convention `TN+FP = 0 -> 1 if FN = 0 else 0`.
    pub fn specificity(&self) -> f64 {
        if self.tn + self.fp == 0 {
            if self.fn_ == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tn as f64 / (self.tn + self.fp) as f64
        }
    }
}

/// Count a binary prediction against a binary target.
pub fn confusion(preds: &[bool], targets: &[bool]) -> Result<Confusion> {
    if preds.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &t) in preds.iter().zip(targets) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1: f64,
    pub iou: f64,
    pub balanced_accuracy: f64,
    pub plr: f64,
    pub nlr: f64,
}

pub fn report(c: &Confusion) -> Result<MetricsReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Contract("empty confusion matrix".into()));
    }
    let sens = c.sensitivity();
    let spec = c.specificity();
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    let f1 = if tp + fp + fn_ == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    let iou = if tp + fp + fn_ == 0.0 { 1.0 } else { tp / (tp + fp + fn_) };
    Ok(MetricsReport {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        f1,
        iou,
        balanced_accuracy: (sens + spec) / 2.0,
        plr: if spec == 1.0 { f64::INFINITY } else { sens / (1.0 - spec) },
        nlr: if spec == 0.0 { f64::INFINITY } else { (1.0 - sens) / spec },
    })
}

/// Multi-class report: exact accuracy, the remaining columns averaged over
/// one-vs-rest confusions of the classes present in targets or predictions.
pub fn multiclass_report(preds: &[usize], targets: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if preds.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Contract("no predictions".into()));
    }
    let correct = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    let mut sum = [0.0f64; 5];
    let mut used = 0;
    for k in 0..num_classes {
        if !preds.contains(&k) && !targets.contains(&k) {
            continue;
        }
        let p: Vec<bool> = preds.iter().map(|&x| x == k).collect();
        let t: Vec<bool> = targets.iter().map(|&x| x == k).collect();
        let r = report(&confusion(&p, &t)?)?;
        for (s, v) in sum.iter_mut().zip([r.f1, r.iou, r.balanced_accuracy, r.plr, r.nlr]) {
            *s += v;
        }
        used += 1;
    }
    let n = used as f64;
    Ok(MetricsReport {
        accuracy: correct as f64 / preds.len() as f64,
        f1: sum[0] / n,
        iou: sum[1] / n,
        balanced_accuracy: sum[2] / n,
        plr: sum[3] / n,
        nlr: sum[4] / n,
    })
}

fn fmt4(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "acc,f1,iou,bacc,plr,nlr";

    pub fn csv_row(&self) -> String {
        [
            self.accuracy,
            self.f1,
            self.iou,
            self.balanced_accuracy,
            self.plr,
            self.nlr,
        ]
        .map(fmt4)
        .join(",")
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let vals: Vec<f64> = line
            .trim()
            .split(',')
            .map(|s| {
                if s == "inf" {
                    Ok(f64::INFINITY)
                } else {
                    s.parse::<f64>().map_err(|e| Error::Format(format!("metric `{s}`: {e}")))
                }
            })
            .collect::<Result<_>>()?;
        let [accuracy, f1, iou, balanced_accuracy, plr, nlr] = vals[..] else {
            return Err(Error::Format(format!("expected 6 metrics, got {}", vals.len())));
        };
        Ok(Self {
            accuracy,
            f1,
            iou,
            balanced_accuracy,
            plr,
            nlr,
        })
    }
}
