//! Training loop, evaluation, single-task baselines, the coupling ablation
//! grid and compound fine-tuning.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::{couple_batch, CouplingConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::labels::{Emotion, CANONICAL_AUS, N_AUS};
use crate::losses::{aggregate, DistributionMatching, LabeledBatch, LossBreakdown, LossWeights};
use crate::metrics::{
    self, challenge_scores, confusion_stats, BinaryCounts, ChallengeScores, ConfusionMatrix, ConfusionStats,
    MetricRecord, SeriesPair,
};
use crate::network::{Network, NetworkConfig, Params, Predictions};
use crate::relatedness::RelatednessTable;
use crate::synthdata::{gather_batch, schedule_subset, CompoundDataset, Dataset, EpochSampler, SyntheticData};

/// The three tasks, also naming the training set that carries each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Va,
    Au,
    Expr,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Va, Task::Au, Task::Expr];

    pub fn name(self) -> &'static str {
        match self {
            Task::Va => "va",
            Task::Au => "au",
            Task::Expr => "expr",
        }
    }

    /// Position in the VA, AU, EXPR set order.
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskMask {
    pub va: bool,
    pub au: bool,
    pub expr: bool,
}

impl Default for TaskMask {
    fn default() -> Self {
        TaskMask {
            va: true,
            au: true,
            expr: true,
        }
    }
}

impl TaskMask {
    pub fn only(task: Task) -> Self {
        TaskMask {
            va: task == Task::Va,
            au: task == Task::Au,
            expr: task == Task::Expr,
        }
    }

    pub fn contains(&self, task: Task) -> bool {
        [self.va, self.au, self.expr][task.index()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    /// Concatenated batches per epoch.
    pub iterations: usize,
    pub weights: LossWeights,
    /// Set separately in experiment files.
    #[serde(skip)]
    pub coupling: CouplingConfig,
    /// Training sets that feed the run.
    pub tasks: TaskMask,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 30,
            momentum: 0.0,
            iterations: 10,
            weights: LossWeights::default(),
            coupling: CouplingConfig::none(),
            tasks: TaskMask::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput("momentum must lie in [0, 1)".into()));
        }
        if !(self.tasks.va || self.tasks.au || self.tasks.expr) {
            return Err(Error::InvalidInput("no training set enabled".into()));
        }
        self.weights.validate()
    }
}

/// Seeded stream for one purpose within one epoch.
fn run_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 8) | purpose);
    rng
}

const PURPOSE_SHUFFLE: u64 = 0;
const PURPOSE_DROPOUT: u64 = 1;

/// SGD with optional momentum over the network's accumulated gradients.
struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Params,
}

impl Sgd {
    fn new(net: &Network, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: net.params().zeros_like(),
        }
    }

    fn step(&mut self, net: &mut Network) {
        if self.lr == 0.0 {
            return;
        }
        self.velocity.scale(self.momentum);
        self.velocity.scaled_add(1.0, net.grads());
        net.params_mut().scaled_add(-self.lr, &self.velocity);
    }
}

fn mean_breakdown(parts: &[LossBreakdown], weights: LossWeights) -> LossBreakdown {
    let n = parts.len() as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l_emo: mean(|b| b.l_emo),
        l_au: mean(|b| b.l_au),
        l_va: mean(|b| b.l_va),
        l_dm: mean(|b| b.l_dm),
        l_sca: mean(|b| b.l_sca),
        total: mean(|b| b.total),
        weights,
    }
}

/// One gradient step on `batch`; returns its loss breakdown.
fn train_step(
    net: &mut Network,
    batch: &LabeledBatch,
    weights: &LossWeights,
    dm: Option<&DistributionMatching<'_>>,
    dropout: &mut ChaCha8Rng,
    opt: &mut Sgd,
    at: (usize, usize),
) -> Result<LossBreakdown> {
    let fwd = net.forward(batch.features.view(), Some(dropout))?;
    let (breakdown, grad) = aggregate(batch, &fwd.preds, weights, dm)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: at.0,
            iteration: at.1,
            state: format!("{breakdown:?}; parameters finite: {}", net.params().all_finite()),
        });
    }
    net.zero_grads();
    net.backward(&fwd.cache, &grad.to_logit_grads(&fwd.preds))?;
    opt.step(net);
    Ok(breakdown)
}

/// Trains `net` in place and evaluates it on the test split.
pub fn train(
    net: &mut Network,
    data: &SyntheticData,
    table: &RelatednessTable,
    cfg: &TrainConfig,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let sets = data.train_sets();
    let sizes: [usize; 3] = Task::ALL.map(|t| {
        if cfg.tasks.contains(t) {
            sets[t.index()].len()
        } else {
            0
        }
    });
    let schedule = schedule_subset(sizes, cfg.iterations)?;
    let mixture = cfg
        .coupling
        .distribution_matching
        .then(|| cfg.coupling.mixture_model(table));
    let dm = mixture.as_ref().map(|model| DistributionMatching {
        model,
        stop_gradient_q: cfg.coupling.stop_gradient_q,
        full_bernoulli: cfg.coupling.full_bernoulli,
    });
    let mut opt = Sgd::new(net, cfg.learning_rate, cfg.momentum);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut rows_seen = [0usize; 3];

    for epoch in 0..cfg.epochs {
        let mut sampler = EpochSampler::new(schedule, sizes, &mut run_rng(cfg.seed, epoch, PURPOSE_SHUFFLE))?;
        let mut dropout = run_rng(cfg.seed, epoch, PURPOSE_DROPOUT);
        let mut parts = Vec::with_capacity(schedule.iterations);
        for iteration in 0..schedule.iterations {
            let idx = sampler.next_indices()?;
            for k in 0..3 {
                rows_seen[k] += idx[k].len();
            }
            let mut batch = gather_batch(sets, idx)?;
            couple_batch(&mut batch, table, &cfg.coupling)?;
            let b = train_step(
                net,
                &batch,
                &cfg.weights,
                dm.as_ref(),
                &mut dropout,
                &mut opt,
                (epoch, iteration),
            )?;
            parts.push(b);
        }
        let mean = mean_breakdown(&parts, cfg.weights);
        log::debug!("epoch {epoch}: total {:.5}", mean.total);
        epochs.push(mean);
    }

    let mut metrics = evaluate(net, &data.test, Exec::Sequential)?;
    metrics.retain(cfg.tasks);
    Ok(ExperimentReport {
        seed: cfg.seed,
        epochs,
        rows_seen,
        metrics,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaMetrics {
    pub ccc_v: f64,
    pub ccc_a: f64,
}

impl VaMetrics {
    pub fn mean(&self) -> f64 {
        (self.ccc_v + self.ccc_a) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExprMetrics {
    pub stats: ConfusionStats,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
}

impl ExprMetrics {
    /// Mean of macro F1 and UAR.
    pub fn headline(&self) -> f64 {
        (self.macro_f1 + self.stats.uar) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuMetrics {
    pub per_au_f1: Vec<f64>,
    pub per_au_accuracy: Vec<f64>,
    pub mean_f1: f64,
    pub mean_accuracy: f64,
}

/// Test metrics for the tasks a split (or run) covers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub va: Option<VaMetrics>,
    pub expr: Option<ExprMetrics>,
    pub au: Option<AuMetrics>,
    pub challenge: Option<ChallengeScores>,
}

impl EvalReport {
    /// Mean CCC for VA, (macro F1 + UAR) / 2 for expressions, mean F1 for AUs.
    pub fn headline(&self, task: Task) -> Option<f64> {
        match task {
            Task::Va => self.va.map(|m| m.mean()),
            Task::Au => self.au.as_ref().map(|m| m.mean_f1),
            Task::Expr => self.expr.as_ref().map(ExprMetrics::headline),
        }
    }

    /// Drops metrics of tasks outside `mask`.
    pub fn retain(&mut self, mask: TaskMask) {
        if !mask.va {
            self.va = None;
        }
        if !mask.au {
            self.au = None;
        }
        if !mask.expr {
            self.expr = None;
        }
        if !(mask.au && mask.expr) {
            self.challenge = None;
        }
    }

    pub fn records(&self, split: &str) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        if let Some(va) = &self.va {
            out.push(MetricRecord::new("va", "ccc_valence", split, va.ccc_v));
            out.push(MetricRecord::new("va", "ccc_arousal", split, va.ccc_a));
            out.push(MetricRecord::new("va", "ccc_mean", split, va.mean()));
        }
        if let Some(e) = &self.expr {
            out.push(MetricRecord::new("expr", "accuracy", split, e.stats.total_accuracy));
            out.push(MetricRecord::new("expr", "mean_diagonal", split, e.stats.mean_diagonal));
            out.push(MetricRecord::new("expr", "uar", split, e.stats.uar));
            out.push(MetricRecord::new("expr", "macro_f1", split, e.macro_f1));
            out.push(MetricRecord::new("expr", "headline", split, e.headline()));
            for (k, f1) in e.per_class_f1.iter().enumerate() {
                out.push(MetricRecord::new("expr", format!("f1_{}", class_name(k)), split, *f1));
            }
        }
        if let Some(au) = &self.au {
            for (i, id) in CANONICAL_AUS.iter().enumerate() {
                out.push(MetricRecord::new("au", format!("f1_au{id}"), split, au.per_au_f1[i]));
                out.push(MetricRecord::new(
                    "au",
                    format!("accuracy_au{id}"),
                    split,
                    au.per_au_accuracy[i],
                ));
            }
            out.push(MetricRecord::new("au", "mean_f1", split, au.mean_f1));
            out.push(MetricRecord::new("au", "mean_accuracy", split, au.mean_accuracy));
        }
        if let Some(c) = &self.challenge {
            out.push(MetricRecord::new("challenge", "au_score", split, c.au_score));
            out.push(MetricRecord::new("challenge", "expr_score", split, c.expr_score));
        }
        out
    }
}

fn class_name(k: usize) -> String {
    Emotion::from_index(k).map_or_else(|_| format!("class{k}"), |e| e.name().to_string())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = k;
        }
    }
    best
}

/// Scores `preds` against the labels of `data` for every task it annotates.
/// VA predictions are clamped to [-1, 1] first; AUs are active at p >= 0.5.
pub fn evaluate_predictions(preds: &Predictions, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty split".into()));
    }
    if preds.rows() != data.len() {
        return Err(Error::Dimension {
            context: "predictions vs split",
            expected: data.len(),
            got: preds.rows(),
        });
    }
    let mut report = EvalReport::default();

    let va_rows: Vec<usize> = (0..data.len()).filter(|&r| data.samples[r].va.is_some()).collect();
    if va_rows.len() >= 2 {
        let col = |c: usize| -> (Vec<f64>, Vec<f64>) {
            va_rows
                .iter()
                .map(|&r| {
                    (
                        data.samples[r].va.expect("filtered")[c],
                        preds.va[[r, c]].clamp(-1.0, 1.0),
                    )
                })
                .unzip()
        };
        let (tv, pv) = col(0);
        let (ta, pa) = col(1);
        report.va = Some(VaMetrics {
            ccc_v: metrics::ccc(SeriesPair::new(&tv, &pv)?)?,
            ccc_a: metrics::ccc(SeriesPair::new(&ta, &pa)?)?,
        });
    }

    let emo_rows: Vec<usize> = (0..data.len()).filter(|&r| data.samples[r].emotion.is_some()).collect();
    if !emo_rows.is_empty() {
        let k = preds.emo_probs.ncols();
        let truth: Vec<usize> = emo_rows
            .iter()
            .map(|&r| data.samples[r].emotion.expect("filtered"))
            .collect();
        let pred: Vec<usize> = emo_rows.iter().map(|&r| argmax(preds.emo_probs.row(r))).collect();
        let cm = ConfusionMatrix::from_labels(k, &truth, &pred)?;
        let per_class_f1 = cm.f1_per_class();
        report.expr = Some(ExprMetrics {
            stats: confusion_stats(&cm)?,
            macro_f1: mean(&per_class_f1),
            per_class_f1,
        });
    }

    if data.samples.iter().any(|s| s.aus.is_some()) {
        let mut per_au_f1 = Vec::with_capacity(N_AUS);
        let mut per_au_accuracy = Vec::with_capacity(N_AUS);
        for (i, au) in CANONICAL_AUS.iter().enumerate() {
            let (truth, pred): (Vec<bool>, Vec<bool>) = data
                .samples
                .iter()
                .enumerate()
                .filter_map(|(r, s)| {
                    s.aus
                        .filter(|l| l.mask[i])
                        .map(|l| (l.values[i], preds.au_probs[[r, i]] >= 0.5))
                })
                .unzip();
            if truth.is_empty() {
                return Err(Error::InvalidInput(format!("AU{au} is never annotated in the split")));
            }
            let counts = BinaryCounts::tally(&truth, &pred)?;
            per_au_f1.push(counts.f1());
            per_au_accuracy.push(counts.accuracy());
        }
        report.au = Some(AuMetrics {
            mean_f1: mean(&per_au_f1),
            mean_accuracy: mean(&per_au_accuracy),
            per_au_f1,
            per_au_accuracy,
        });
    }

    if let (Some(au), Some(e)) = (&report.au, &report.expr) {
        report.challenge = Some(challenge_scores(
            &au.per_au_f1,
            &au.per_au_accuracy,
            e.macro_f1,
            e.stats.uar,
        )?);
    }
    if report.va.is_none() && report.expr.is_none() && report.au.is_none() {
        return Err(Error::InvalidInput("split carries no labels to score".into()));
    }
    Ok(report)
}

pub fn evaluate(net: &Network, data: &Dataset, exec: Exec) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty split".into()));
    }
    let preds = net.predict(data.features().view(), exec)?;
    evaluate_predictions(&preds, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    /// Mean loss breakdown of every epoch.
    pub epochs: Vec<LossBreakdown>,
    /// Rows drawn from the VA, AU and EXPR sets over the whole run.
    pub rows_seen: [usize; 3],
    pub metrics: EvalReport,
    /// Not written to CSV reports.
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    pub fn write_loss_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "l_emo", "l_au", "l_va", "l_dm", "l_sca", "total"])?;
        for (e, b) in self.epochs.iter().enumerate() {
            let vals = [b.l_emo, b.l_au, b.l_va, b.l_dm, b.l_sca, b.total];
            let mut rec = vec![e.to_string()];
            rec.extend(vals.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_metrics_csv<W: Write>(&self, out: W) -> Result<()> {
        metrics::write_metrics_csv(&self.metrics.records("test"), out)
    }
}

/// One single-task network per set, with only that set's loss and the same
/// trunk and budget as a joint run. Returned in VA, AU, EXPR order.
pub fn single_task_baselines(
    net_cfg: &NetworkConfig,
    data: &SyntheticData,
    table: &RelatednessTable,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<Vec<ExperimentReport>> {
    exec.map(&Task::ALL, |&task| single_task(net_cfg, data, table, cfg, task))
        .into_iter()
        .collect()
}

fn single_task(
    net_cfg: &NetworkConfig,
    data: &SyntheticData,
    table: &RelatednessTable,
    cfg: &TrainConfig,
    task: Task,
) -> Result<ExperimentReport> {
    let mut net = Network::new(net_cfg.clone())?;
    let cfg = TrainConfig {
        coupling: CouplingConfig::none(),
        tasks: TaskMask::only(task),
        ..cfg.clone()
    };
    train(&mut net, data, table, &cfg)
}

/// Rows of the coupling ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    None,
    CoAnnotation,
    SoftCoAnnotation,
    DistrMatching,
    /// Soft co-annotation plus distribution matching.
    Both,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::None,
        Variant::CoAnnotation,
        Variant::SoftCoAnnotation,
        Variant::DistrMatching,
        Variant::Both,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::CoAnnotation => "co-annotation",
            Variant::SoftCoAnnotation => "soft co-annotation",
            Variant::DistrMatching => "distr-matching",
            Variant::Both => "both",
        }
    }

    /// `base` with this variant's strategies switched on and the rest off.
    pub fn coupling(self, base: &CouplingConfig) -> CouplingConfig {
        CouplingConfig {
            co_annotation: self == Variant::CoAnnotation,
            soft_co_annotation: matches!(self, Variant::SoftCoAnnotation | Variant::Both),
            distribution_matching: matches!(self, Variant::DistrMatching | Variant::Both),
            ..*base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Joint(Variant),
    SingleTask(Task),
}

impl Arm {
    pub fn label(self) -> String {
        match self {
            Arm::Joint(v) => v.label().to_string(),
            Arm::SingleTask(t) => format!("single-task {}", t.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub arm: Arm,
    pub seed: u64,
    pub report: ExperimentReport,
}

/// Mean test metrics of one row over seeds; `None` where the row has no
/// model for that task.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub ccc_v: Option<f64>,
    pub ccc_a: Option<f64>,
    pub expr_accuracy: Option<f64>,
    pub expr_uar: Option<f64>,
    pub expr_headline: Option<f64>,
    pub au_f1: Option<f64>,
}

impl SummaryRow {
    pub fn headline(&self, task: Task) -> Option<f64> {
        match task {
            Task::Va => Some((self.ccc_v? + self.ccc_a?) / 2.0),
            Task::Au => self.au_f1,
            Task::Expr => self.expr_headline,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

fn mean_of<I: Iterator<Item = Option<f64>>>(values: I) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<_>>()?;
    (!v.is_empty()).then(|| mean(&v))
}

impl AblationReport {
    fn reports(&self, pick: impl Fn(Arm) -> bool) -> Vec<&ExperimentReport> {
        self.cells.iter().filter(|c| pick(c.arm)).map(|c| &c.report).collect()
    }

    fn row(
        label: String,
        va: &[&ExperimentReport],
        au: &[&ExperimentReport],
        expr: &[&ExperimentReport],
    ) -> SummaryRow {
        let m = |rs: &[&ExperimentReport], f: &dyn Fn(&EvalReport) -> Option<f64>| {
            if rs.is_empty() {
                None
            } else {
                mean_of(rs.iter().map(|r| f(&r.metrics)))
            }
        };
        SummaryRow {
            label,
            ccc_v: m(va, &|e| e.va.map(|v| v.ccc_v)),
            ccc_a: m(va, &|e| e.va.map(|v| v.ccc_a)),
            expr_accuracy: m(expr, &|e| e.expr.as_ref().map(|x| x.stats.total_accuracy)),
            expr_uar: m(expr, &|e| e.expr.as_ref().map(|x| x.stats.uar)),
            expr_headline: m(expr, &|e| e.headline(Task::Expr)),
            au_f1: m(au, &|e| e.headline(Task::Au)),
        }
    }

    /// Rows in the order: the single-task row (when baselines were run),
    /// then none, co-annotation, soft co-annotation, distr-matching, both.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows = Vec::new();
        let single = |t: Task| self.reports(|a| a == Arm::SingleTask(t));
        if self.cells.iter().any(|c| matches!(c.arm, Arm::SingleTask(_))) {
            rows.push(Self::row(
                "single-task".into(),
                &single(Task::Va),
                &single(Task::Au),
                &single(Task::Expr),
            ));
        }
        for v in Variant::ALL {
            let rs = self.reports(|a| a == Arm::Joint(v));
            if !rs.is_empty() {
                rows.push(Self::row(v.label().into(), &rs, &rs, &rs));
            }
        }
        rows
    }

    pub fn row_for(&self, label: &str) -> Option<SummaryRow> {
        self.summary().into_iter().find(|r| r.label == label)
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.summary() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Every cell's test metrics, one row per (arm, seed, metric).
    pub fn write_cells_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["arm", "seed", "task", "metric", "value"])?;
        for c in &self.cells {
            for r in c.report.metrics.records("test") {
                w.write_record([c.arm.label(), c.seed.to_string(), r.task, r.metric, r.value.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Fixed-width table of the summary.
    pub fn summary_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>8} {:>8} {:>9} {:>9} {:>10} {:>8}",
            "coupling", "CCC-V", "CCC-A", "EXPR-acc", "EXPR-UAR", "EXPR-head", "AU-F1"
        );
        for r in self.summary() {
            let _ = writeln!(
                s,
                "{:<20} {:>8} {:>8} {:>9} {:>9} {:>10} {:>8}",
                r.label,
                fmt(r.ccc_v),
                fmt(r.ccc_a),
                fmt(r.expr_accuracy),
                fmt(r.expr_uar),
                fmt(r.expr_headline),
                fmt(r.au_f1)
            );
        }
        let _ = writeln!(s, "mean over {} seed(s)", self.seeds.len());
        s
    }
}

/// Trains every variant for every seed, plus the three single-task baselines
/// when `with_baselines` is set. Network and training seeds are both set to
/// the cell's seed, so arms with equal seeds start from the same weights.
pub fn run_ablation(
    net_cfg: &NetworkConfig,
    data: &SyntheticData,
    table: &RelatednessTable,
    cfg: &TrainConfig,
    seeds: &[u64],
    with_baselines: bool,
    exec: Exec,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("ablation needs at least one seed".into()));
    }
    let mut jobs: Vec<(Arm, u64)> = Vec::new();
    for &seed in seeds {
        if with_baselines {
            jobs.extend(Task::ALL.map(|t| (Arm::SingleTask(t), seed)));
        }
        jobs.extend(Variant::ALL.map(|v| (Arm::Joint(v), seed)));
    }
    let results = exec.map(&jobs, |&(arm, seed)| {
        let net_cfg = NetworkConfig {
            seed,
            ..net_cfg.clone()
        };
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let report = match arm {
            Arm::Joint(v) => {
                let mut net = Network::new(net_cfg)?;
                let cfg = TrainConfig {
                    coupling: v.coupling(&cfg.coupling),
                    ..cfg
                };
                train(&mut net, data, table, &cfg)?
            }
            Arm::SingleTask(t) => single_task(&net_cfg, data, table, &cfg, t)?,
        };
        Ok(AblationCell { arm, seed, report })
    });
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        cells: results.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            learning_rate: 0.1,
            epochs: 30,
            batch_size: 16,
            momentum: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneReport {
    pub class_names: Vec<String>,
    /// Mean cross-entropy of every epoch.
    pub epoch_losses: Vec<f64>,
    pub confusion: ConfusionMatrix,
    pub stats: ConfusionStats,
}

impl FineTuneReport {
    pub fn records(&self, split: &str) -> Vec<MetricRecord> {
        let mut out = vec![
            MetricRecord::new("compound", "accuracy", split, self.stats.total_accuracy),
            MetricRecord::new("compound", "mean_diagonal", split, self.stats.mean_diagonal),
        ];
        for (name, recall) in self.class_names.iter().zip(&self.stats.recalls) {
            out.push(MetricRecord::new(
                "compound",
                format!("recall_{name}"),
                split,
                recall.unwrap_or(f64::NAN),
            ));
        }
        out
    }
}

/// Confusion of the argmax of the network's categorical head.
pub fn compound_confusion(net: &Network, data: &CompoundDataset, exec: Exec) -> Result<ConfusionMatrix> {
    let preds = net.predict(data.features.view(), exec)?;
    let pred: Vec<usize> = preds.emo_probs.rows().into_iter().map(argmax).collect();
    ConfusionMatrix::from_labels(data.classes(), &data.labels, &pred)
}

/// Replaces the categorical head with a `K`-way head and trains the whole
/// network with cross-entropy on `train`; scores on `test`.
pub fn fine_tune_compound(
    net: &mut Network,
    train: &CompoundDataset,
    test: &CompoundDataset,
    cfg: &FineTuneConfig,
) -> Result<FineTuneReport> {
    let k = train.classes();
    if k < 2 {
        return Err(Error::InvalidInput(
            "fine-tuning needs at least two compound classes".into(),
        ));
    }
    if test.class_names != train.class_names {
        return Err(Error::InvalidInput("train and test compound classes differ".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || train.is_empty() {
        return Err(Error::InvalidInput(
            "fine-tuning needs epochs, a batch size and samples".into(),
        ));
    }
    net.replace_emotion_head(k, cfg.seed)?;
    let mut opt = Sgd::new(net, cfg.learning_rate, cfg.momentum);
    let weights = LossWeights::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut run_rng(cfg.seed, epoch, PURPOSE_SHUFFLE));
        let mut dropout = run_rng(cfg.seed, epoch, PURPOSE_DROPOUT);
        let mut losses = Vec::new();
        for (iteration, rows) in order.chunks(cfg.batch_size).enumerate() {
            let features = Array2::from_shape_fn((rows.len(), train.features.ncols()), |(r, c)| {
                train.features[[rows[r], c]]
            });
            let n = rows.len();
            let batch = LabeledBatch::new(
                features,
                rows.iter().map(|&r| Some(train.labels[r])).collect(),
                vec![None; n],
                vec![None; n],
            )?;
            let b = train_step(net, &batch, &weights, None, &mut dropout, &mut opt, (epoch, iteration))?;
            losses.push(b.l_emo);
        }
        epoch_losses.push(mean(&losses));
    }
    let confusion = compound_confusion(net, test, Exec::Sequential)?;
    Ok(FineTuneReport {
        class_names: train.class_names.clone(),
        epoch_losses,
        stats: confusion_stats(&confusion)?,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::AuLabels;
    use crate::synthdata::{generate, GeneratorConfig, Sample};

    fn tiny_data() -> SyntheticData {
        let cfg = GeneratorConfig {
            va_size: 80,
            au_size: 50,
            expr_size: 20,
            test_size: 70,
            ..Default::default()
        };
        generate(&cfg, Exec::Sequential).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            iterations: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = tiny_data();
        let mut net = Network::new(NetworkConfig::default()).unwrap();
        let before = net.params().clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..tiny_cfg()
        };
        train(&mut net, &data, &RelatednessTable::cognitive(), &cfg).unwrap();
        assert_eq!(net.params(), &before);
    }

    #[test]
    fn same_seed_same_report() {
        let data = tiny_data();
        let t = RelatednessTable::cognitive();
        let cfg = TrainConfig {
            coupling: Variant::Both.coupling(&CouplingConfig::none()),
            ..tiny_cfg()
        };
        let run = || {
            let mut net = Network::new(NetworkConfig::default()).unwrap();
            let mut r = train(&mut net, &data, &t, &cfg).unwrap();
            r.wall_clock_secs = 0.0;
            (r, net.params().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_coupling_weights_match_plain_run() {
        let data = tiny_data();
        let t = RelatednessTable::cognitive();
        let plain = tiny_cfg();
        let muted = TrainConfig {
            weights: LossWeights {
                mu_dm: 0.0,
                mu_sca: 0.0,
                ..LossWeights::default()
            },
            coupling: Variant::Both.coupling(&CouplingConfig::none()),
            ..tiny_cfg()
        };
        let params = |cfg: &TrainConfig| {
            let mut net = Network::new(NetworkConfig::default()).unwrap();
            train(&mut net, &data, &t, cfg).unwrap();
            net.params().clone()
        };
        assert_eq!(params(&plain), params(&muted));
    }

    #[test]
    fn baselines_see_only_their_set() {
        let data = tiny_data();
        let reports = single_task_baselines(
            &NetworkConfig::default(),
            &data,
            &RelatednessTable::cognitive(),
            &tiny_cfg(),
            Exec::Parallel,
        )
        .unwrap();
        for (task, r) in Task::ALL.iter().zip(&reports) {
            for other in Task::ALL {
                assert_eq!(r.rows_seen[other.index()] > 0, other == *task);
                assert_eq!(r.metrics.headline(other).is_some(), other == *task);
            }
        }
    }

    fn oracle_predictions(data: &Dataset) -> Predictions {
        let n = data.len();
        let mut p = Predictions {
            emo_probs: Array2::zeros((n, 7)),
            au_probs: Array2::zeros((n, N_AUS)),
            va: Array2::zeros((n, 2)),
        };
        for (r, s) in data.samples.iter().enumerate() {
            p.emo_probs[[r, s.emotion.unwrap()]] = 1.0;
            for i in 0..N_AUS {
                p.au_probs[[r, i]] = f64::from(u8::from(s.aus.unwrap().values[i]));
            }
            p.va[[r, 0]] = s.va.unwrap()[0];
            p.va[[r, 1]] = s.va.unwrap()[1];
        }
        p
    }

    #[test]
    fn oracle_scores_perfectly() {
        let data = tiny_data();
        let m = evaluate_predictions(&oracle_predictions(&data.test), &data.test).unwrap();
        assert_eq!(m.va.unwrap().ccc_v, 1.0);
        assert_eq!(m.va.unwrap().ccc_a, 1.0);
        let e = m.expr.as_ref().unwrap();
        assert_eq!((e.stats.total_accuracy, e.stats.uar, e.macro_f1), (1.0, 1.0, 1.0));
        assert!(m.au.as_ref().unwrap().per_au_f1.iter().all(|&f| f == 1.0));
        assert_eq!(m.challenge.unwrap().au_score, 1.0);
    }

    #[test]
    fn va_predictions_are_clamped() {
        let data = Dataset {
            feature_dim: 1,
            samples: vec![
                Sample {
                    features: vec![0.0],
                    emotion: None,
                    aus: None,
                    va: Some([1.0, -1.0]),
                },
                Sample {
                    features: vec![0.0],
                    emotion: None,
                    aus: Some(AuLabels::full([false; N_AUS])),
                    va: Some([-1.0, 1.0]),
                },
            ],
        };
        let mut p = Predictions {
            emo_probs: Array2::zeros((2, 7)),
            au_probs: Array2::zeros((2, N_AUS)),
            va: Array2::from_shape_vec((2, 2), vec![5.0, -5.0, -5.0, 5.0]).unwrap(),
        };
        let m = evaluate_predictions(&p, &data).unwrap();
        assert_eq!(m.va.unwrap().mean(), 1.0);
        assert!(m.expr.is_none() && m.challenge.is_none());
        p.va[[0, 0]] = f64::NAN;
        assert!(evaluate_predictions(&p, &Dataset::default()).is_err());
    }

    #[test]
    fn variant_couplings() {
        let base = CouplingConfig::none();
        assert!(!Variant::None.coupling(&base).any_enabled());
        let both = Variant::Both.coupling(&base);
        assert!(both.soft_co_annotation && both.distribution_matching && !both.co_annotation);
    }

    #[test]
    fn ablation_summary_shape() {
        let data = tiny_data();
        let r = run_ablation(
            &NetworkConfig::default(),
            &data,
            &RelatednessTable::cognitive(),
            &tiny_cfg(),
            &[0, 1],
            true,
            Exec::Parallel,
        )
        .unwrap();
        let labels: Vec<String> = r.summary().into_iter().map(|s| s.label).collect();
        assert_eq!(
            labels,
            [
                "single-task",
                "none",
                "co-annotation",
                "soft co-annotation",
                "distr-matching",
                "both"
            ]
        );
        assert!(r
            .summary()
            .iter()
            .all(|s| Task::ALL.iter().all(|&t| s.headline(t).is_some())));
        assert!(r.summary_table().contains("soft co-annotation"));
    }
}
