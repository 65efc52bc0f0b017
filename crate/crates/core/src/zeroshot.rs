//! Zero-shot compound-expression classification from basic-task predictions.
//!
//! Each compound class scores a prediction by how well the predicted AUs
//! cover the class's AU set, how much mass the two constituent emotions get,
//! and, for the classes built on happiness, whether the valence is positive.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::labels::{au_index, Emotion, CANONICAL_AUS, N_AUS, N_EMOTIONS};
use crate::metrics::{confusion_stats, ConfusionMatrix, ConfusionStats};
use crate::network::{Network, Predictions};
use crate::relatedness::CompoundClass;

/// Basic-task outputs for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionTriple {
    pub emo: [f64; N_EMOTIONS],
    pub au: [f64; N_AUS],
    /// Valence, arousal.
    pub va: [f64; 2],
}

impl PredictionTriple {
    /// Row `r` of a network output; VA is clamped to [-1, 1].
    pub fn from_predictions(preds: &Predictions, r: usize) -> Result<Self> {
        if preds.emo_probs.ncols() != N_EMOTIONS {
            return Err(Error::Dimension {
                context: "zero-shot expression head",
                expected: N_EMOTIONS,
                got: preds.emo_probs.ncols(),
            });
        }
        Ok(PredictionTriple {
            emo: std::array::from_fn(|k| preds.emo_probs[[r, k]]),
            au: std::array::from_fn(|i| preds.au_probs[[r, i]]),
            va: [0, 1].map(|c| preds.va[[r, c]].clamp(-1.0, 1.0)),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompoundPredictionConfig {
    pub classes: Vec<CompoundClass>,
    /// Use the class AU weights as p(AU | class) instead of 1.
    pub weighted: bool,
    /// Switch for the valence-sign term; on by default.
    pub valence_term: bool,
}

impl CompoundPredictionConfig {
    pub fn new(classes: Vec<CompoundClass>) -> Result<Self> {
        let cfg = CompoundPredictionConfig {
            classes,
            weighted: false,
            valence_term: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidInput("no compound classes".into()));
        }
        for c in &self.classes {
            for &au in c.au_weights.keys() {
                au_index(au)?;
            }
        }
        Ok(())
    }
}

/// Normalized AU coverage, in [0, 1].
pub fn au_term(pred: &PredictionTriple, cls: &CompoundClass, weighted: bool) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (&au, &w) in &cls.au_weights {
        let p_cls = if weighted { w } else { 1.0 };
        num += pred.au[au_index(au).expect("validated class")] * p_cls;
        den += p_cls;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// `0.5 (v / |v| + 1)`: 1 for positive valence, 0 for negative, and 0 at
/// exactly zero, where the sign is undefined.
pub fn valence_sign_term(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        0.5 * (v.signum() + 1.0)
    }
}

/// AU coverage plus the two constituent emotion probabilities, plus the
/// valence-sign term for classes that carry it.
pub fn candidate_score(pred: &PredictionTriple, cls: &CompoundClass, weighted: bool, valence_term: bool) -> f64 {
    let mut s = au_term(pred, cls, weighted) + pred.emo[cls.emo1.index()] + pred.emo[cls.emo2.index()];
    if valence_term && cls.valence_term_applies {
        s += valence_sign_term(pred.va[0]);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub index: usize,
    pub name: String,
    pub scores: Vec<f64>,
    /// Another class reached the same top score; the lowest index won.
    pub tie: bool,
}

pub fn classify(pred: &PredictionTriple, cfg: &CompoundPredictionConfig) -> Classification {
    let scores: Vec<f64> = cfg
        .classes
        .iter()
        .map(|c| candidate_score(pred, c, cfg.weighted, cfg.valence_term))
        .collect();
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = k;
        }
    }
    let tie = scores.iter().enumerate().any(|(k, &s)| k != best && s == scores[best]);
    Classification {
        index: best,
        name: cfg.classes[best].name.clone(),
        scores,
        tie,
    }
}

pub fn classify_all(preds: &[PredictionTriple], cfg: &CompoundPredictionConfig, exec: Exec) -> Vec<Classification> {
    exec.map(preds, |p| classify(p, cfg))
}

/// Runs `net` on `features` and classifies every row.
pub fn classify_network(
    net: &Network,
    features: ArrayView2<f64>,
    cfg: &CompoundPredictionConfig,
    exec: Exec,
) -> Result<Vec<Classification>> {
    let preds = net.predict(features, exec)?;
    let triples = (0..preds.rows())
        .map(|r| PredictionTriple::from_predictions(&preds, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(classify_all(&triples, cfg, exec))
}

/// Confusion over the compound classes given true class indices.
pub fn score_classifications(
    results: &[Classification],
    labels: &[usize],
    classes: usize,
) -> Result<(ConfusionMatrix, ConfusionStats)> {
    let pred: Vec<usize> = results.iter().map(|c| c.index).collect();
    let cm = ConfusionMatrix::from_labels(classes, labels, &pred)?;
    let stats = confusion_stats(&cm)?;
    Ok((cm, stats))
}

fn prediction_header() -> Vec<String> {
    let mut h: Vec<String> = Emotion::ALL.iter().map(|e| format!("emo_{}", e.name())).collect();
    h.extend(CANONICAL_AUS.iter().map(|id| format!("au_{id}")));
    h.push("valence".into());
    h.push("arousal".into());
    h
}

pub fn write_predictions_csv<W: Write>(preds: &[PredictionTriple], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(prediction_header())?;
    for p in preds {
        let row = p.emo.iter().chain(&p.au).chain(&p.va).map(f64::to_string);
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV with columns `emo_<emotion>` (7), `au_<id>` (17), `valence`
/// and `arousal`, in any order.
pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<PredictionTriple>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_reader(File::open(path)?);
    let headers = r.headers()?.clone();
    let cols: Vec<usize> = prediction_header()
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MalformedData(format!("{}: missing column {name}", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals = cols
            .iter()
            .map(|&c| {
                rec.get(c)
                    .and_then(|t| t.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::MalformedData(format!("{}: line {}: bad value", path.display(), k + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        let p = PredictionTriple {
            emo: std::array::from_fn(|i| vals[i]),
            au: std::array::from_fn(|i| vals[N_EMOTIONS + i]),
            va: [vals[N_EMOTIONS + N_AUS], vals[N_EMOTIONS + N_AUS + 1]],
        };
        let probs_ok = p.emo.iter().chain(&p.au).all(|v| (0.0..=1.0).contains(v));
        if !probs_ok {
            return Err(Error::MalformedData(format!(
                "{}: line {}: probabilities must lie in [0, 1]",
                path.display(),
                k + 2
            )));
        }
        out.push(p);
    }
    Ok(out)
}

/// One row per prediction: every class score, the winner and the tie flag.
pub fn write_classifications_csv<W: Write>(
    results: &[Classification],
    cfg: &CompoundPredictionConfig,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["row".to_string()];
    header.extend(cfg.classes.iter().map(|c| format!("score_{}", c.name)));
    header.extend(["prediction".to_string(), "tie".to_string()]);
    w.write_record(&header)?;
    for (r, c) in results.iter().enumerate() {
        let mut rec = vec![r.to_string()];
        rec.extend(c.scores.iter().map(f64::to_string));
        rec.push(c.name.clone());
        rec.push(u8::from(c.tie).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
