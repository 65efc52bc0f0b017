//! Task losses and their weighted aggregate.
//!
//! Every loss returns its value together with the gradient with respect to the
//! network predictions; [`PredictionGrads::to_logit_grads`] carries it on to
//! the heads.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::coupling::{self, MixtureModel};
use crate::error::{Error, Result};
use crate::labels::{N_AUS, N_EMOTIONS};
use crate::metrics::Moments;
use crate::network::{PredictionGrads, Predictions};

/// Floor applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Binary AU annotation of one sample; `mask[i]` marks AUs that were labelled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AuLabels {
    pub values: [bool; N_AUS],
    pub mask: [bool; N_AUS],
}

impl AuLabels {
    pub fn full(values: [bool; N_AUS]) -> Self {
        AuLabels {
            values,
            mask: [true; N_AUS],
        }
    }

    /// Active and annotated.
    pub fn observed_active(&self) -> [bool; N_AUS] {
        std::array::from_fn(|i| self.values[i] && self.mask[i])
    }
}

/// A co-annotated AU target with its contribution weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuTarget {
    pub au_index: usize,
    pub target: f64,
    pub weight: f64,
}

/// A concatenated mini-batch with per-row partial labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledBatch {
    pub features: Array2<f64>,
    pub emo_labels: Vec<Option<usize>>,
    pub au_labels: Vec<Option<AuLabels>>,
    pub va_labels: Vec<Option<[f64; 2]>>,
    /// Soft expression targets from soft co-annotation.
    pub soft_emo_targets: Vec<Option<[f64; N_EMOTIONS]>>,
    /// Expression labels derived from AU annotations (hard co-annotation).
    pub coanno_emo_labels: Vec<Option<usize>>,
    /// AU targets derived from expression labels (hard co-annotation).
    pub coanno_au_targets: Vec<Vec<AuTarget>>,
}

impl LabeledBatch {
    /// Batch with empty coupling blocks.
    pub fn new(
        features: Array2<f64>,
        emo_labels: Vec<Option<usize>>,
        au_labels: Vec<Option<AuLabels>>,
        va_labels: Vec<Option<[f64; 2]>>,
    ) -> Result<Self> {
        let n = features.nrows();
        let batch = LabeledBatch {
            features,
            emo_labels,
            au_labels,
            va_labels,
            soft_emo_targets: vec![None; n],
            coanno_emo_labels: vec![None; n],
            coanno_au_targets: vec![Vec::new(); n],
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rows();
        for (name, len) in [
            ("emotion labels", self.emo_labels.len()),
            ("AU labels", self.au_labels.len()),
            ("VA labels", self.va_labels.len()),
            ("soft targets", self.soft_emo_targets.len()),
            ("co-annotated emotions", self.coanno_emo_labels.len()),
            ("co-annotated AUs", self.coanno_au_targets.len()),
        ] {
            if len != n {
                return Err(Error::Dimension {
                    context: name,
                    expected: n,
                    got: len,
                });
            }
        }
        for s in self.soft_emo_targets.iter().flatten() {
            let sum: f64 = s.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || s.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidInput(format!("soft target row sums to {sum}")));
            }
        }
        for va in self.va_labels.iter().flatten() {
            if va.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("non-finite VA label".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// AU term.
    pub lambda1: f64,
    /// Valence/arousal term.
    pub lambda2: f64,
    /// Distribution matching.
    pub mu_dm: f64,
    /// Soft co-annotation.
    pub mu_sca: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            mu_dm: 1.0,
            mu_sca: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.mu_dm, self.mu_sca];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput(format!(
                "loss weights must be nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_emo: f64,
    pub l_au: f64,
    pub l_va: f64,
    pub l_dm: f64,
    pub l_sca: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn recompute_total(&self) -> f64 {
        let w = &self.weights;
        self.l_emo + w.lambda1 * self.l_au + w.lambda2 * self.l_va + w.mu_dm * self.l_dm + w.mu_sca * self.l_sca
    }
}

/// A loss value and its gradient with respect to the predictions.
#[derive(Clone, Debug)]
pub struct Term {
    pub value: f64,
    pub grad: PredictionGrads,
}

fn floored_ln(p: f64) -> (f64, f64) {
    // (ln, d ln / dp)
    if p > LOG_FLOOR {
        (p.ln(), 1.0 / p)
    } else {
        (LOG_FLOOR.ln(), 0.0)
    }
}

/// Mean negative log-likelihood of the labelled rows.
pub fn expression_ce(emo_probs: &Array2<f64>, labels: &[Option<usize>]) -> Result<Term> {
    if labels.len() != emo_probs.nrows() {
        return Err(Error::Dimension {
            context: "expression labels",
            expected: emo_probs.nrows(),
            got: labels.len(),
        });
    }
    let k = emo_probs.ncols();
    let labelled = labels.iter().flatten().count();
    if labelled == 0 {
        return Err(Error::InvalidInput("no rows carry an expression label".into()));
    }
    let mut grad = PredictionGrads::zeros(emo_probs.nrows(), k);
    let scale = 1.0 / labelled as f64;
    let mut value = 0.0;
    for (r, y) in labels.iter().enumerate() {
        let Some(y) = *y else { continue };
        if y >= k {
            return Err(Error::InvalidInput(format!("expression label {y} outside 0..{k}")));
        }
        let (ln, dln) = floored_ln(emo_probs[[r, y]]);
        value -= ln;
        grad.emo_probs[[r, y]] = -dln * scale;
    }
    Ok(Term {
        value: value * scale,
        grad,
    })
}

/// Weighted masked binary cross-entropy.
///
/// `weights[[r, i]] > 0` marks AU `i` of row `r` as annotated; each annotated
/// term is multiplied by its weight and the row is normalized by its number of
/// annotated AUs. Rows without annotations are left out of the row average.
pub fn weighted_au_bce(au_probs: &Array2<f64>, targets: &Array2<f64>, weights: &Array2<f64>) -> Result<Term> {
    if targets.dim() != au_probs.dim() || weights.dim() != au_probs.dim() {
        return Err(Error::Dimension {
            context: "AU targets",
            expected: au_probs.len(),
            got: targets.len().min(weights.len()),
        });
    }
    let rows = au_probs.nrows();
    let mut grad = PredictionGrads::zeros(rows, N_EMOTIONS);
    grad.au_probs = Array2::zeros(au_probs.raw_dim());
    let active_rows = weights
        .rows()
        .into_iter()
        .filter(|w| w.iter().any(|&v| v > 0.0))
        .count();
    if active_rows == 0 {
        return Ok(Term { value: 0.0, grad });
    }
    let row_scale = 1.0 / active_rows as f64;
    let mut value = 0.0;
    for r in 0..rows {
        let annotated = weights.row(r).iter().filter(|&&w| w > 0.0).count();
        if annotated == 0 {
            continue;
        }
        let norm = row_scale / annotated as f64;
        for i in 0..au_probs.ncols() {
            let w = weights[[r, i]];
            if w <= 0.0 {
                continue;
            }
            let (p, y) = (au_probs[[r, i]], targets[[r, i]]);
            let (ln_p, dln_p) = floored_ln(p);
            let (ln_q, dln_q) = floored_ln(1.0 - p);
            value -= norm * w * (y * ln_p + (1.0 - y) * ln_q);
            grad.au_probs[[r, i]] = -norm * w * (y * dln_p - (1.0 - y) * dln_q);
        }
    }
    Ok(Term { value, grad })
}

/// Masked binary cross-entropy with 0/1 labels and a 0/1 annotation mask.
pub fn masked_au_bce(au_probs: &Array2<f64>, labels: &Array2<f64>, mask: &Array2<f64>) -> Result<Term> {
    weighted_au_bce(au_probs, labels, mask)
}

/// `1 - (CCC_valence + CCC_arousal) / 2` across the rows.
pub fn va_ccc_loss(va_pred: ArrayView2<f64>, va_labels: ArrayView2<f64>) -> Result<Term> {
    if va_pred.dim() != va_labels.dim() || va_pred.ncols() != 2 {
        return Err(Error::Dimension {
            context: "VA predictions",
            expected: va_labels.len(),
            got: va_pred.len(),
        });
    }
    let n = va_pred.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "the CCC loss needs at least 2 VA-labelled rows per batch, got {n}; increase the VA batch size"
        )));
    }
    let mut grad = PredictionGrads::zeros(n, N_EMOTIONS);
    let mut ccc_sum = 0.0;
    for col in 0..2 {
        let truth: Vec<f64> = va_labels.column(col).to_vec();
        let pred: Vec<f64> = va_pred.column(col).to_vec();
        let m = Moments::of(&truth, &pred);
        let den = m.denominator();
        ccc_sum += m.ccc();
        if den == 0.0 {
            continue;
        }
        let nf = n as f64;
        let dm = m.mean_t - m.mean_p;
        for i in 0..n {
            let d_cov = (truth[i] - m.mean_t) / nf;
            let d_den = 2.0 * (pred[i] - m.mean_p) / nf - 2.0 * dm / nf;
            let d_rho = (2.0 * d_cov * den - 2.0 * m.cov * d_den) / (den * den);
            grad.va[[i, col]] = -0.5 * d_rho;
        }
    }
    Ok(Term {
        value: 1.0 - ccc_sum / 2.0,
        grad,
    })
}

/// Effective AU targets and weights for a batch: real annotations first, then
/// co-annotated targets on positions the real annotations leave open.
pub fn au_target_matrices(batch: &LabeledBatch) -> (Array2<f64>, Array2<f64>) {
    let n = batch.rows();
    let mut targets = Array2::zeros((n, N_AUS));
    let mut weights = Array2::zeros((n, N_AUS));
    for r in 0..n {
        if let Some(labels) = &batch.au_labels[r] {
            for i in 0..N_AUS {
                if labels.mask[i] {
                    targets[[r, i]] = f64::from(u8::from(labels.values[i]));
                    weights[[r, i]] = 1.0;
                }
            }
        }
        for t in &batch.coanno_au_targets[r] {
            if weights[[r, t.au_index]] == 0.0 {
                targets[[r, t.au_index]] = t.target;
                weights[[r, t.au_index]] = t.weight;
            }
        }
    }
    (targets, weights)
}

/// Expression labels including co-annotated ones (real labels win).
pub fn effective_emo_labels(batch: &LabeledBatch) -> Vec<Option<usize>> {
    batch
        .emo_labels
        .iter()
        .zip(&batch.coanno_emo_labels)
        .map(|(real, co)| real.or(*co))
        .collect()
}

/// Distribution-matching settings used by [`aggregate`].
#[derive(Clone, Debug)]
pub struct DistributionMatching<'a> {
    pub model: &'a MixtureModel,
    pub stop_gradient_q: bool,
    pub full_bernoulli: bool,
}

/// Computes every available term, applies the weights and returns the
/// breakdown with the combined prediction gradient. Terms whose weight is zero
/// contribute nothing to the gradient.
pub fn aggregate(
    batch: &LabeledBatch,
    preds: &Predictions,
    weights: &LossWeights,
    dm: Option<&DistributionMatching<'_>>,
) -> Result<(LossBreakdown, PredictionGrads)> {
    weights.validate()?;
    if preds.rows() != batch.rows() {
        return Err(Error::Dimension {
            context: "predictions vs batch",
            expected: batch.rows(),
            got: preds.rows(),
        });
    }
    let mut grad = PredictionGrads::zeros_like(preds);
    let mut out = LossBreakdown {
        weights: *weights,
        ..Default::default()
    };
    let mut any = false;
    let add = |term: &Term, weight: f64, grad: &mut PredictionGrads| {
        if weight != 0.0 {
            grad.scaled_add(weight, &term.grad);
        }
    };

    let emo_labels = effective_emo_labels(batch);
    if emo_labels.iter().any(Option::is_some) {
        let t = expression_ce(&preds.emo_probs, &emo_labels)?;
        out.l_emo = t.value;
        add(&t, 1.0, &mut grad);
        any = true;
    }

    let (targets, au_weights) = au_target_matrices(batch);
    if au_weights.iter().any(|&w| w > 0.0) {
        let t = weighted_au_bce(&preds.au_probs, &targets, &au_weights)?;
        out.l_au = t.value;
        add(&t, weights.lambda1, &mut grad);
        any = true;
    }

    let va_rows: Vec<usize> = (0..batch.rows()).filter(|&r| batch.va_labels[r].is_some()).collect();
    if !va_rows.is_empty() {
        let labels = Array2::from_shape_fn((va_rows.len(), 2), |(i, c)| {
            batch.va_labels[va_rows[i]].expect("filtered")[c]
        });
        let pred = preds.va.select(ndarray::Axis(0), &va_rows);
        let t = va_ccc_loss(pred.view(), labels.view())?;
        out.l_va = t.value;
        if weights.lambda2 != 0.0 {
            for (i, &r) in va_rows.iter().enumerate() {
                for c in 0..2 {
                    grad.va[[r, c]] += weights.lambda2 * t.grad.va[[i, c]];
                }
            }
        }
        any = true;
    }

    if let Some(dm) = dm {
        let t = coupling::distribution_matching_term(preds, dm.model, dm.stop_gradient_q, dm.full_bernoulli)?;
        out.l_dm = t.value;
        add(&t, weights.mu_dm, &mut grad);
    }

    if batch.soft_emo_targets.iter().any(Option::is_some) {
        let t = coupling::soft_coannotation_term(&preds.emo_probs, &batch.soft_emo_targets)?;
        out.l_sca = t.value;
        add(&t, weights.mu_sca, &mut grad);
    }

    if !any {
        return Err(Error::InvalidInput("batch carries no task labels".into()));
    }
    out.total = out.recompute_total();
    Ok((out, grad))
}
