//! Coupling between the expression and action-unit tasks.
//!
//! Three strategies share one relatedness table:
//!
//! * hard co-annotation: expression labels imply weighted AU targets, and a
//!   full AU pattern implies an expression label;
//! * soft co-annotation: AU annotations yield a soft expression distribution
//!   that the expression head is trained to match;
//! * distribution matching: predicted AU probabilities are matched to a
//!   mixture of per-expression AU profiles weighted by the predicted
//!   expression distribution.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{au_index, Emotion, N_AUS, N_EMOTIONS};
use crate::losses::{AuTarget, LabeledBatch, Term, LOG_FLOOR};
use crate::network::{PredictionGrads, Predictions};
use crate::relatedness::RelatednessTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingConfig {
    pub co_annotation: bool,
    pub soft_co_annotation: bool,
    pub distribution_matching: bool,
    /// Use table weights for p(AU | emotion) in the mixture.
    pub weighted_q: bool,
    /// Use table weights in the soft-label scores.
    pub weighted_soft: bool,
    /// Treat the mixture as a constant target.
    pub stop_gradient_q: bool,
    /// Divide each mixture column by its number (or weight sum) of
    /// associated emotions; off gives the plain sum.
    pub normalize_q: bool,
    /// Add the `(1 - p) log(1 - q)` complement to distribution matching.
    pub full_bernoulli: bool,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        CouplingConfig {
            co_annotation: false,
            soft_co_annotation: false,
            distribution_matching: false,
            weighted_q: false,
            weighted_soft: true,
            stop_gradient_q: false,
            normalize_q: true,
            full_bernoulli: false,
        }
    }
}

impl CouplingConfig {
    /// All strategies off.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn mixture_model(&self, table: &RelatednessTable) -> MixtureModel {
        if self.normalize_q {
            MixtureModel::new(table, self.weighted_q)
        } else {
            MixtureModel::unnormalized(table, self.weighted_q)
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.co_annotation || self.soft_co_annotation || self.distribution_matching
    }
}

/// One co-annotated AU: `(AU id, target, weight)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoAnnotation {
    pub au: u32,
    pub target: f64,
    pub weight: f64,
}

/// Every AU associated with `emo`, to be treated as active, weighted by the
/// table (prototypical AUs weigh 1.0).
pub fn co_annotate_emotion_to_aus(emo: Emotion, table: &RelatednessTable) -> Vec<CoAnnotation> {
    table
        .row(emo)
        .iter()
        .map(|e| CoAnnotation {
            au: e.au,
            target: 1.0,
            weight: e.weight,
        })
        .collect()
}

/// The emotion whose whole AU set is active. When several qualify the one
/// with the most AUs wins; a tie at the top yields no label.
pub fn co_annotate_aus_to_emotion(active: &[bool; N_AUS], table: &RelatednessTable) -> Option<Emotion> {
    let mut best: Option<(usize, Emotion)> = None;
    let mut tied = false;
    for emo in Emotion::ALL {
        let row = table.row(emo);
        if row.is_empty() {
            continue;
        }
        let complete = row.iter().all(|e| active[au_index(e.au).expect("validated table")]);
        if !complete {
            continue;
        }
        match best {
            Some((n, _)) if row.len() < n => {}
            Some((n, _)) if row.len() == n => tied = true,
            _ => {
                best = Some((row.len(), emo));
                tied = false;
            }
        }
    }
    if tied {
        None
    } else {
        best.map(|(_, e)| e)
    }
}

/// Per-emotion evidence score: the (weighted) fraction of the emotion's AUs
/// that are active. Neutral scores 0.
pub fn emotion_scores(active: &[bool; N_AUS], table: &RelatednessTable, weighted: bool) -> [f64; N_EMOTIONS] {
    std::array::from_fn(|k| {
        let row = table.row(Emotion::ALL[k]);
        let (mut num, mut den) = (0.0, 0.0);
        for e in row {
            let w = if weighted { e.weight } else { 1.0 };
            if active[au_index(e.au).expect("validated table")] {
                num += w;
            }
            den += w;
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    })
}

/// Softmax of [`emotion_scores`].
pub fn soft_emotion_label(active: &[bool; N_AUS], table: &RelatednessTable, weighted: bool) -> [f64; N_EMOTIONS] {
    let scores = emotion_scores(active, table, weighted);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = scores.map(|s| (s - max).exp());
    let sum: f64 = exp.iter().sum();
    exp.map(|e| e / sum)
}

/// The AU mixture induced by an expression distribution:
/// `q_i = Σ_e p(e) p(AU_i | e) / Z_i`, where `Z_i` counts (or, weighted, sums
/// the weights of) the emotions associated with AU `i`. AUs shared by several
/// emotions therefore never reach 1 from a single emotion;
/// [`MixtureModel::unnormalized`] drops `Z_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureModel {
    /// p(AU_i | e) divided by Z_i; zero columns for unassociated AUs.
    coeffs: [[f64; N_AUS]; N_EMOTIONS],
}

impl MixtureModel {
    pub fn new(table: &RelatednessTable, weighted: bool) -> Self {
        let m = table.matrix(weighted);
        let mut coeffs = [[0.0; N_AUS]; N_EMOTIONS];
        for i in 0..N_AUS {
            let z: f64 = (0..N_EMOTIONS).map(|e| m[e][i]).sum();
            if z > 0.0 {
                for e in 0..N_EMOTIONS {
                    coeffs[e][i] = m[e][i] / z;
                }
            }
        }
        MixtureModel { coeffs }
    }

    /// `q_i = Σ_e p(e) p(AU_i | e)`; still within [0, 1] because every
    /// p(AU | e) is at most 1.
    pub fn unnormalized(table: &RelatednessTable, weighted: bool) -> Self {
        MixtureModel {
            coeffs: table.matrix(weighted),
        }
    }

    pub fn coefficient(&self, emo: Emotion, au_idx: usize) -> f64 {
        self.coeffs[emo.index()][au_idx]
    }

    pub fn q(&self, emo_probs: &[f64]) -> Result<[f64; N_AUS]> {
        if emo_probs.len() != N_EMOTIONS {
            return Err(Error::Dimension {
                context: "expression distribution",
                expected: N_EMOTIONS,
                got: emo_probs.len(),
            });
        }
        let mut q = [0.0; N_AUS];
        for (p, row) in emo_probs.iter().zip(&self.coeffs) {
            for (qi, c) in q.iter_mut().zip(row) {
                *qi += p * c;
            }
        }
        Ok(q)
    }

    pub fn q_batch(&self, emo_probs: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((emo_probs.nrows(), N_AUS));
        for (r, row) in emo_probs.rows().into_iter().enumerate() {
            let q = self.q(&row.to_vec())?;
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&q));
        }
        Ok(out)
    }
}

/// `mixture_q` for a single expression distribution.
pub fn mixture_q(emo_probs: &[f64], table: &RelatednessTable, weighted: bool) -> Result<[f64; N_AUS]> {
    MixtureModel::new(table, weighted).q(emo_probs)
}

/// Mean over rows of `Σ_i -p_i ln(q_i + ε)`.
pub fn distribution_matching_loss(au_probs: &Array2<f64>, q: &Array2<f64>) -> Result<f64> {
    if au_probs.dim() != q.dim() {
        return Err(Error::Dimension {
            context: "distribution matching",
            expected: au_probs.len(),
            got: q.len(),
        });
    }
    let n = au_probs.nrows().max(1) as f64;
    Ok(au_probs
        .iter()
        .zip(q)
        .map(|(p, q)| -p * (q + LOG_FLOOR).ln())
        .sum::<f64>()
        / n)
}

/// Distribution-matching value and gradient, flowing into both heads unless
/// `stop_gradient_q` is set.
pub fn distribution_matching_term(
    preds: &Predictions,
    model: &MixtureModel,
    stop_gradient_q: bool,
    full_bernoulli: bool,
) -> Result<Term> {
    if preds.emo_probs.ncols() != N_EMOTIONS {
        return Err(Error::InvalidInput(
            "distribution matching needs the seven-way expression head".into(),
        ));
    }
    let q = model.q_batch(&preds.emo_probs)?;
    let n = preds.rows();
    let mut grad = PredictionGrads::zeros_like(preds);
    if n == 0 {
        return Ok(Term { value: 0.0, grad });
    }
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    for r in 0..n {
        let mut d_q = [0.0; N_AUS];
        for i in 0..N_AUS {
            let (p, qi) = (preds.au_probs[[r, i]], q[[r, i]]);
            let ln_q = (qi + LOG_FLOOR).ln();
            value -= p * ln_q;
            let mut d_p = -ln_q;
            d_q[i] = -p / (qi + LOG_FLOOR);
            if full_bernoulli {
                let ln_nq = (1.0 - qi + LOG_FLOOR).ln();
                value -= (1.0 - p) * ln_nq;
                d_p += ln_nq;
                d_q[i] += (1.0 - p) / (1.0 - qi + LOG_FLOOR);
            }
            grad.au_probs[[r, i]] = d_p * scale;
        }
        if !stop_gradient_q {
            for e in 0..N_EMOTIONS {
                let d: f64 = (0..N_AUS).map(|i| d_q[i] * model.coeffs[e][i]).sum();
                grad.emo_probs[[r, e]] = d * scale;
            }
        }
    }
    Ok(Term {
        value: value * scale,
        grad,
    })
}

/// Mean over targeted rows of `Σ_e -s_e ln(p_e + ε)`.
pub fn soft_coannotation_loss(emo_probs: &Array2<f64>, targets: &[Option<[f64; N_EMOTIONS]>]) -> Result<f64> {
    Ok(soft_coannotation_term(emo_probs, targets)?.value)
}

pub fn soft_coannotation_term(emo_probs: &Array2<f64>, targets: &[Option<[f64; N_EMOTIONS]>]) -> Result<Term> {
    if targets.len() != emo_probs.nrows() || emo_probs.ncols() != N_EMOTIONS {
        return Err(Error::Dimension {
            context: "soft co-annotation targets",
            expected: emo_probs.nrows(),
            got: targets.len(),
        });
    }
    let mut grad = PredictionGrads::zeros(emo_probs.nrows(), N_EMOTIONS);
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Ok(Term { value: 0.0, grad });
    }
    let scale = 1.0 / count as f64;
    let mut value = 0.0;
    for (r, s) in targets.iter().enumerate() {
        let Some(s) = s else { continue };
        for e in 0..N_EMOTIONS {
            let p = emo_probs[[r, e]] + LOG_FLOOR;
            value -= s[e] * p.ln();
            grad.emo_probs[[r, e]] = -s[e] / p * scale;
        }
    }
    Ok(Term {
        value: value * scale,
        grad,
    })
}

/// Fills the batch's coupling blocks according to `cfg`.
///
/// Hard co-annotation adds weighted AU targets to expression-labelled rows and
/// expression labels to AU-labelled rows whose observed pattern completes an
/// emotion. Soft co-annotation gives every AU-labelled row a soft expression
/// target. Unannotated AUs count as inactive.
pub fn couple_batch(batch: &mut LabeledBatch, table: &RelatednessTable, cfg: &CouplingConfig) -> Result<()> {
    let n = batch.rows();
    batch.coanno_au_targets = vec![Vec::new(); n];
    batch.coanno_emo_labels = vec![None; n];
    batch.soft_emo_targets = vec![None; n];
    for r in 0..n {
        if cfg.co_annotation {
            if let Some(y) = batch.emo_labels[r] {
                let emo = Emotion::from_index(y)?;
                batch.coanno_au_targets[r] = co_annotate_emotion_to_aus(emo, table)
                    .into_iter()
                    .map(|c| {
                        Ok(AuTarget {
                            au_index: au_index(c.au)?,
                            target: c.target,
                            weight: c.weight,
                        })
                    })
                    .collect::<Result<_>>()?;
            }
        }
        if let Some(labels) = &batch.au_labels[r] {
            let active = labels.observed_active();
            if cfg.co_annotation && batch.emo_labels[r].is_none() {
                batch.coanno_emo_labels[r] = co_annotate_aus_to_emotion(&active, table).map(Emotion::index);
            }
            if cfg.soft_co_annotation {
                batch.soft_emo_targets[r] = Some(soft_emotion_label(&active, table, cfg.weighted_soft));
            }
        }
    }
    Ok(())
}
