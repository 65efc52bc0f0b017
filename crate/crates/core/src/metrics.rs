//! Evaluation measures: concordance correlation, F1, confusion statistics and
//! the challenge composite scores.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground truth and prediction series of equal, nonzero length.
#[derive(Clone, Copy, Debug)]
pub struct SeriesPair<'a> {
    truth: &'a [f64],
    pred: &'a [f64],
}

impl<'a> SeriesPair<'a> {
    pub fn new(truth: &'a [f64], pred: &'a [f64]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Dimension {
                context: "series pair",
                expected: truth.len(),
                got: pred.len(),
            });
        }
        if truth.is_empty() {
            return Err(Error::InvalidInput("empty series".into()));
        }
        if truth.iter().chain(pred).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite value in series".into()));
        }
        Ok(SeriesPair { truth, pred })
    }

    pub fn truth(&self) -> &[f64] {
        self.truth
    }

    pub fn pred(&self) -> &[f64] {
        self.pred
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

/// Population moments of a pair of series.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Moments {
    pub mean_t: f64,
    pub mean_p: f64,
    pub var_t: f64,
    pub var_p: f64,
    pub cov: f64,
}

impl Moments {
    pub fn of(truth: &[f64], pred: &[f64]) -> Moments {
        let n = truth.len() as f64;
        // A constant series has its value as exact mean, so its deviations
        // are exactly zero.
        let mean = |xs: &[f64]| {
            if xs.iter().all(|&x| x == xs[0]) {
                xs[0]
            } else {
                xs.iter().sum::<f64>() / n
            }
        };
        let (mean_t, mean_p) = (mean(truth), mean(pred));
        let (mut var_t, mut var_p, mut cov) = (0.0, 0.0, 0.0);
        for (&t, &p) in truth.iter().zip(pred) {
            let (dt, dp) = (t - mean_t, p - mean_p);
            var_t += dt * dt;
            var_p += dp * dp;
            cov += dt * dp;
        }
        Moments {
            mean_t,
            mean_p,
            var_t: var_t / n,
            var_p: var_p / n,
            cov: cov / n,
        }
    }

    pub fn denominator(&self) -> f64 {
        let dm = self.mean_t - self.mean_p;
        self.var_t + self.var_p + dm * dm
    }

    /// CCC; a zero denominator means two equal constants, which agree perfectly.
    pub fn ccc(&self) -> f64 {
        let den = self.denominator();
        if den == 0.0 {
            1.0
        } else {
            (2.0 * self.cov / den).clamp(-1.0, 1.0)
        }
    }
}

/// Concordance correlation coefficient with population moments.
pub fn ccc(series: SeriesPair<'_>) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::InvalidInput(
            "concordance needs at least two paired values".into(),
        ));
    }
    Ok(Moments::of(series.truth, series.pred).ccc())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl BinaryCounts {
    pub fn tally(truth: &[bool], pred: &[bool]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Dimension {
                context: "binary labels",
                expected: truth.len(),
                got: pred.len(),
            });
        }
        let mut c = BinaryCounts::default();
        for (&t, &p) in truth.iter().zip(pred) {
            match (t, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.tp + self.fp + self.fn_ + self.tn;
        if total == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / total as f64
    }
}

/// F1 = 2TP / (2TP + FP + FN), 1.0 when there is nothing to find.
pub fn f1_binary(truth: &[bool], pred: &[bool]) -> Result<f64> {
    Ok(BinaryCounts::tally(truth, pred)?.f1())
}

pub fn binary_accuracy(truth: &[bool], pred: &[bool]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::InvalidInput("empty label vector".into()));
    }
    Ok(BinaryCounts::tally(truth, pred)?.accuracy())
}

/// K×K counts, rows = truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidInput("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    pub fn from_labels(k: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Dimension {
                context: "class labels",
                expected: truth.len(),
                got: pred.len(),
            });
        }
        let mut cm = ConfusionMatrix::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= k || p >= k {
                return Err(Error::InvalidInput(format!("class index out of range 0..{k}")));
            }
            cm.counts[t * k + p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.k..(truth + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, pred)).sum()
    }

    /// Recall per class; `None` for classes absent from the truth.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let rs = self.row_sum(c);
                (rs > 0).then(|| self.get(c, c) as f64 / rs as f64)
            })
            .collect()
    }

    /// One-vs-rest F1 per class.
    pub fn f1_per_class(&self) -> Vec<f64> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let counts = BinaryCounts {
                    tp,
                    fp: self.col_sum(c) - tp,
                    fn_: self.row_sum(c) - tp,
                    tn: 0,
                };
                counts.f1()
            })
            .collect()
    }

    /// Row-normalized matrix (rows without samples stay zero).
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        (0..self.k)
            .map(|t| {
                let rs = self.row_sum(t);
                (0..self.k)
                    .map(|p| {
                        if rs == 0 {
                            0.0
                        } else {
                            self.get(t, p) as f64 / rs as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionStats {
    pub total_accuracy: f64,
    pub mean_diagonal: f64,
    pub uar: f64,
    pub recalls: Vec<Option<f64>>,
}

pub fn confusion_stats(cm: &ConfusionMatrix) -> Result<ConfusionStats> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidInput("confusion matrix is all zero".into()));
    }
    let trace: u64 = (0..cm.k).map(|c| cm.get(c, c)).sum();
    let recalls = cm.recalls();
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    let uar = present.iter().sum::<f64>() / present.len() as f64;

    let norm = cm.normalized();
    let diag: Vec<f64> = (0..cm.k).filter(|&c| cm.row_sum(c) > 0).map(|c| norm[c][c]).collect();
    let mean_diagonal = diag.iter().sum::<f64>() / diag.len() as f64;

    Ok(ConfusionStats {
        total_accuracy: trace as f64 / total as f64,
        mean_diagonal,
        uar,
        recalls,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChallengeScores {
    pub au_score: f64,
    pub expr_score: f64,
}

pub fn challenge_scores(per_au_f1: &[f64], per_au_acc: &[f64], emo_f1_mean: f64, uar: f64) -> Result<ChallengeScores> {
    if per_au_f1.is_empty() || per_au_acc.is_empty() {
        return Err(Error::InvalidInput("challenge scores need per-AU values".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(ChallengeScores {
        au_score: (mean(per_au_f1) + mean(per_au_acc)) / 2.0,
        expr_score: (emo_f1_mean + uar) / 2.0,
    })
}

/// One `(task, metric, split, value)` row of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: String,
    pub metric: String,
    pub split: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(task: &str, metric: impl Into<String>, split: &str, value: f64) -> Self {
        MetricRecord {
            task: task.to_string(),
            metric: metric.into(),
            split: split.to_string(),
            value,
        }
    }
}

pub fn write_metrics_csv<W: Write>(records: &[MetricRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
