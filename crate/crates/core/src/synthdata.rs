//! Seeded synthetic affect data and the three-stream batch scheduler.
//!
//! Each sample draws an emotion, a valence/arousal point from that emotion's
//! region and AU activations from the relatedness table. Its features are a
//! fixed random linear map of `[onehot(emotion); v; a; au bits]` plus Gaussian
//! noise. The three training sets then keep only their own task's labels.

use std::fs::File;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::labels::{Emotion, CANONICAL_AUS, N_AUS, N_EMOTIONS};
use crate::losses::{AuLabels, LabeledBatch};
use crate::relatedness::{CompoundClass, RelatednessTable};

const LATENT_DIM: usize = N_EMOTIONS + 2 + N_AUS;

const STREAM_MAP: u64 = 0;
const STREAM_VA: u64 = 1;
const STREAM_AU: u64 = 2;
const STREAM_EXPR: u64 = 3;
const STREAM_TEST: u64 = 4;
const STREAM_JOINT: u64 = 5;
const STREAM_COMPOUND: u64 = 6;

/// Gaussian valence/arousal region of one emotion, clipped to [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaRegion {
    pub emotion: Emotion,
    pub valence: f64,
    pub arousal: f64,
    pub spread: f64,
}

pub fn default_va_regions() -> Vec<VaRegion> {
    serde_json::from_str(include_str!("../data/va_regions.json")).expect("bundled VA regions")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Generating relatedness table; chosen by the caller, not serialized.
    #[serde(skip, default = "RelatednessTable::cognitive")]
    pub table: RelatednessTable,
    pub va_size: usize,
    pub au_size: usize,
    pub expr_size: usize,
    /// Held-out split carrying every label, AU masks full.
    pub test_size: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub au_background_rate: f64,
    /// Number of AUs marked annotated per AU-Set sample.
    pub annotated_aus: usize,
    /// Fraction of VA-Set samples that also keep their emotion label.
    pub overlap_fraction: f64,
    pub seed: u64,
    pub va_regions: Vec<VaRegion>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            table: RelatednessTable::cognitive(),
            va_size: 4010,
            au_size: 2470,
            expr_size: 1030,
            test_size: 1400,
            feature_dim: 32,
            noise_sigma: 0.5,
            au_background_rate: 0.05,
            annotated_aus: 12,
            overlap_fraction: 0.0,
            seed: 0,
            va_regions: default_va_regions(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("generator config: {m}")));
        if self.va_size == 0 || self.au_size == 0 || self.expr_size == 0 {
            return bad("set sizes must be at least 1");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if !(0.0..0.5).contains(&self.au_background_rate) {
            return bad("au_background_rate must lie in [0, 0.5)");
        }
        if self.annotated_aus == 0 || self.annotated_aus > N_AUS {
            return bad("annotated_aus must lie in 1..=17");
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return bad("overlap_fraction must lie in [0, 1]");
        }
        for emo in Emotion::ALL {
            let n = self.va_regions.iter().filter(|r| r.emotion == emo).count();
            if n != 1 {
                return bad(&format!("expected one VA region for {emo}, found {n}"));
            }
        }
        for r in &self.va_regions {
            if !(r.spread >= 0.0 && r.valence.abs() <= 1.0 && r.arousal.abs() <= 1.0) {
                return bad(&format!("VA region for {} out of range", r.emotion));
            }
        }
        Ok(())
    }

    fn region(&self, emo: Emotion) -> &VaRegion {
        self.va_regions
            .iter()
            .find(|r| r.emotion == emo)
            .expect("validated regions")
    }

    fn stream(&self, tag: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((tag << 48) | index);
        rng
    }

    /// The fixed `feature_dim x latent` projection shared by every split.
    fn projection(&self) -> Array2<f64> {
        let mut rng = self.stream(STREAM_MAP, 0);
        let scale = 1.0 / (LATENT_DIM as f64).sqrt();
        Array2::from_shape_simple_fn((self.feature_dim, LATENT_DIM), || {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
    }
}

/// One generated sample. Absent labels are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub emotion: Option<usize>,
    pub aus: Option<AuLabels>,
    pub va: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self) -> Array2<f64> {
        self.features_of(&(0..self.len()).collect::<Vec<_>>())
    }

    fn features_of(&self, rows: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn((rows.len(), self.feature_dim), |(r, c)| {
            self.samples[rows[r]].features[c]
        })
    }

    /// The given rows as a batch with all of their labels.
    pub fn batch(&self, rows: &[usize]) -> Result<LabeledBatch> {
        let picked: Vec<&Sample> = rows.iter().map(|&r| &self.samples[r]).collect();
        LabeledBatch::new(
            self.features_of(rows),
            picked.iter().map(|s| s.emotion).collect(),
            picked.iter().map(|s| s.aus).collect(),
            picked.iter().map(|s| s.va).collect(),
        )
    }
}

/// The three training pools plus a fully-labelled test split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SyntheticData {
    pub va: Dataset,
    pub au: Dataset,
    pub expr: Dataset,
    pub test: Dataset,
}

impl SyntheticData {
    pub fn train_sets(&self) -> [&Dataset; 3] {
        [&self.va, &self.au, &self.expr]
    }

    pub fn train_sizes(&self) -> [usize; 3] {
        self.train_sets().map(Dataset::len)
    }
}

/// Ground truth of one draw before any label is stripped.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Latent {
    emotion: Emotion,
    va: [f64; 2],
    aus: [bool; N_AUS],
}

fn draw_va(region: &VaRegion, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let mut draw = |centre: f64| {
        let z: f64 = rng.sample(StandardNormal);
        (centre + region.spread * z).clamp(-1.0, 1.0)
    };
    let v = draw(region.valence);
    [v, draw(region.arousal)]
}

fn draw_aus(weights: &[f64; N_AUS], rng: &mut ChaCha8Rng) -> [bool; N_AUS] {
    std::array::from_fn(|i| rng.random::<f64>() < weights[i])
}

fn au_probabilities(cfg: &GeneratorConfig, emo: Emotion) -> [f64; N_AUS] {
    let mut w = [cfg.au_background_rate; N_AUS];
    for e in cfg.table.row(emo) {
        w[crate::labels::au_index(e.au).expect("validated table")] = e.weight;
    }
    w
}

fn draw_latent(cfg: &GeneratorConfig, emo: Emotion, rng: &mut ChaCha8Rng) -> Latent {
    let va = draw_va(cfg.region(emo), rng);
    let aus = draw_aus(&au_probabilities(cfg, emo), rng);
    Latent { emotion: emo, va, aus }
}

fn embed(
    map: &Array2<f64>,
    emo_mix: &[f64; N_EMOTIONS],
    va: [f64; 2],
    aus: &[bool; N_AUS],
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut z = [0.0; LATENT_DIM];
    z[..N_EMOTIONS].copy_from_slice(emo_mix);
    z[N_EMOTIONS] = va[0];
    z[N_EMOTIONS + 1] = va[1];
    for (i, &a) in aus.iter().enumerate() {
        z[N_EMOTIONS + 2 + i] = f64::from(u8::from(a));
    }
    map.rows()
        .into_iter()
        .map(|row| {
            let clean: f64 = row.iter().zip(&z).map(|(w, x)| w * x).sum();
            let noise: f64 = rng.sample(StandardNormal);
            clean + sigma * noise
        })
        .collect()
}

fn one_hot(emo: Emotion) -> [f64; N_EMOTIONS] {
    let mut v = [0.0; N_EMOTIONS];
    v[emo.index()] = 1.0;
    v
}

fn random_emotion(rng: &mut ChaCha8Rng) -> Emotion {
    Emotion::ALL[rng.random_range(0..N_EMOTIONS)]
}

fn generate_set(cfg: &GeneratorConfig, map: &Array2<f64>, tag: u64, n: usize, exec: Exec) -> Dataset {
    let samples = exec.map_range(n, |i| {
        let mut rng = cfg.stream(tag, i as u64);
        let emo = random_emotion(&mut rng);
        let lat = draw_latent(cfg, emo, &mut rng);
        let features = embed(map, &one_hot(emo), lat.va, &lat.aus, cfg.noise_sigma, &mut rng);
        let mut s = Sample {
            features,
            emotion: None,
            aus: None,
            va: None,
        };
        match tag {
            STREAM_VA => {
                s.va = Some(lat.va);
                if rng.random::<f64>() < cfg.overlap_fraction {
                    s.emotion = Some(emo.index());
                }
            }
            STREAM_AU => {
                let mut mask = [false; N_AUS];
                for k in sample_indices(&mut rng, N_AUS, cfg.annotated_aus) {
                    mask[k] = true;
                }
                let values = std::array::from_fn(|k| mask[k] && lat.aus[k]);
                s.aus = Some(AuLabels { values, mask });
            }
            STREAM_EXPR => s.emotion = Some(emo.index()),
            _ => {
                s.emotion = Some(emo.index());
                s.aus = Some(AuLabels::full(lat.aus));
                s.va = Some(lat.va);
            }
        }
        s
    });
    Dataset {
        feature_dim: cfg.feature_dim,
        samples,
    }
}

/// Generates VA-Set, AU-Set, EXPR-Set and the test split. Output does not
/// depend on `exec`.
pub fn generate(cfg: &GeneratorConfig, exec: Exec) -> Result<SyntheticData> {
    cfg.validate()?;
    let map = cfg.projection();
    Ok(SyntheticData {
        va: generate_set(cfg, &map, STREAM_VA, cfg.va_size, exec),
        au: generate_set(cfg, &map, STREAM_AU, cfg.au_size, exec),
        expr: generate_set(cfg, &map, STREAM_EXPR, cfg.expr_size, exec),
        test: generate_set(cfg, &map, STREAM_TEST, cfg.test_size, exec),
    })
}

/// `n_per_emotion` fully-observed AU patterns for every emotion, for table
/// inference.
pub fn generate_au_patterns(
    cfg: &GeneratorConfig,
    n_per_emotion: usize,
    exec: Exec,
) -> Result<Vec<(Emotion, [bool; N_AUS])>> {
    cfg.validate()?;
    Ok(exec.map_range(n_per_emotion * N_EMOTIONS, |i| {
        let emo = Emotion::ALL[i / n_per_emotion];
        let mut rng = cfg.stream(STREAM_JOINT, i as u64);
        (emo, draw_aus(&au_probabilities(cfg, emo), &mut rng))
    }))
}

/// Samples of compound classes; labels index into `class_names`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompoundDataset {
    pub class_names: Vec<String>,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub va: Vec<[f64; 2]>,
}

impl CompoundDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }
}

/// `per_class` samples of every compound class, drawn through the same
/// feature map as [`generate`]. The expression part of the latent is split
/// evenly between the two constituents, VA comes from the midpoint of their
/// regions and AUs follow the class AU weights. `split` selects an
/// independent stream so train and test sets do not overlap.
pub fn generate_compound(
    cfg: &GeneratorConfig,
    classes: &[CompoundClass],
    per_class: usize,
    split: u64,
    exec: Exec,
) -> Result<CompoundDataset> {
    cfg.validate()?;
    if classes.is_empty() || per_class == 0 {
        return Err(Error::InvalidInput(
            "compound generation needs classes and samples".into(),
        ));
    }
    let map = cfg.projection();
    let n = classes.len() * per_class;
    let rows = exec.map_range(n, |i| {
        let cls = &classes[i / per_class];
        let mut rng = cfg.stream(STREAM_COMPOUND, (split << 32) | i as u64);
        let (r1, r2) = (cfg.region(cls.emo1), cfg.region(cls.emo2));
        let mid = VaRegion {
            emotion: cls.emo1,
            valence: (r1.valence + r2.valence) / 2.0,
            arousal: (r1.arousal + r2.arousal) / 2.0,
            spread: (r1.spread + r2.spread) / 2.0,
        };
        let va = draw_va(&mid, &mut rng);
        let mut weights = [cfg.au_background_rate; N_AUS];
        for (&au, &w) in &cls.au_weights {
            weights[crate::labels::au_index(au).expect("validated class")] = w;
        }
        let aus = draw_aus(&weights, &mut rng);
        let mut mix = [0.0; N_EMOTIONS];
        mix[cls.emo1.index()] += 0.5;
        mix[cls.emo2.index()] += 0.5;
        (embed(&map, &mix, va, &aus, cfg.noise_sigma, &mut rng), va)
    });
    let features = Array2::from_shape_fn((n, cfg.feature_dim), |(r, c)| rows[r].0[c]);
    Ok(CompoundDataset {
        class_names: classes.iter().map(|c| c.name.clone()).collect(),
        features,
        labels: (0..n).map(|i| i / per_class).collect(),
        va: rows.iter().map(|r| r.1).collect(),
    })
}

/// Per-set batch sizes for an epoch of `iterations` concatenated batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    /// VA, AU and EXPR batch sizes; 0 leaves a set out.
    pub batch_sizes: [usize; 3],
    pub iterations: usize,
}

impl BatchSchedule {
    pub fn rows_per_batch(&self) -> usize {
        self.batch_sizes.iter().sum()
    }

    /// Samples of each set used in one epoch.
    pub fn used(&self) -> [usize; 3] {
        self.batch_sizes.map(|b| b * self.iterations)
    }
}

/// Batch sizes `size / iterations` per set, trimming each set to a multiple
/// of `iterations`.
pub fn schedule(sizes: [usize; 3], iterations: usize) -> Result<BatchSchedule> {
    if sizes.contains(&0) {
        return Err(Error::InvalidInput("every set needs at least one sample".into()));
    }
    schedule_subset(sizes, iterations)
}

/// As [`schedule`], but sets of size 0 are left out of every batch.
pub fn schedule_subset(sizes: [usize; 3], iterations: usize) -> Result<BatchSchedule> {
    let smallest = sizes.iter().copied().filter(|&s| s > 0).min();
    let Some(smallest) = smallest else {
        return Err(Error::InvalidInput("no set to schedule".into()));
    };
    if iterations == 0 || iterations > smallest {
        return Err(Error::InvalidInput(format!(
            "iterations {iterations} must lie in 1..={smallest} (smallest set)"
        )));
    }
    Ok(BatchSchedule {
        batch_sizes: sizes.map(|s| s / iterations),
        iterations,
    })
}

/// Hands out one epoch of concatenated batches.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    schedule: BatchSchedule,
    orders: [Vec<usize>; 3],
    next: usize,
}

impl EpochSampler {
    /// Shuffles every set with `rng`; trimmed samples differ per epoch.
    pub fn new(schedule: BatchSchedule, sizes: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut orders: [Vec<usize>; 3] = Default::default();
        for k in 0..3 {
            let used = schedule.used()[k];
            if used > sizes[k] {
                return Err(Error::InvalidInput(format!(
                    "schedule needs {used} samples from set {k}, which has {}",
                    sizes[k]
                )));
            }
            let mut order: Vec<usize> = (0..sizes[k]).collect();
            order.shuffle(rng);
            order.truncate(used);
            orders[k] = order;
        }
        Ok(EpochSampler {
            schedule,
            orders,
            next: 0,
        })
    }

    pub fn remaining(&self) -> usize {
        self.schedule.iterations - self.next
    }

    /// Sample indices of the next batch, per set.
    pub fn next_indices(&mut self) -> Result<[&[usize]; 3]> {
        if self.next >= self.schedule.iterations {
            return Err(Error::EpochExhausted(self.schedule.iterations));
        }
        let i = self.next;
        self.next += 1;
        let b = self.schedule.batch_sizes;
        Ok([0, 1, 2].map(|k| &self.orders[k][i * b[k]..(i + 1) * b[k]]))
    }

    /// The next VA, AU and EXPR batches concatenated in that order.
    pub fn next_batch(&mut self, sets: [&Dataset; 3]) -> Result<LabeledBatch> {
        let idx = self.next_indices()?;
        gather_batch(sets, idx)
    }
}

/// Rows `idx[k]` of `sets[k]`, concatenated in set order.
pub fn gather_batch(sets: [&Dataset; 3], idx: [&[usize]; 3]) -> Result<LabeledBatch> {
    let [a, b, c] = [0, 1, 2].map(|k| sets[k].batch(idx[k]));
    concat_batches(&[a?, b?, c?])
}

fn concat_batches(parts: &[LabeledBatch]) -> Result<LabeledBatch> {
    let views: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
    let features = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| Error::InvalidInput(format!("batch concatenation: {e}")))?;
    LabeledBatch::new(
        features,
        parts.iter().flat_map(|p| p.emo_labels.iter().copied()).collect(),
        parts.iter().flat_map(|p| p.au_labels.iter().copied()).collect(),
        parts.iter().flat_map(|p| p.va_labels.iter().copied()).collect(),
    )
}

fn au_header(prefix: &str) -> impl Iterator<Item = String> + '_ {
    CANONICAL_AUS.iter().map(move |id| format!("{prefix}_{id}"))
}

fn header(feature_dim: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..feature_dim).map(|i| format!("feature_{i}")).collect();
    h.push("emo".into());
    h.extend(au_header("au"));
    h.extend(au_header("delta"));
    h.push("valence".into());
    h.push("arousal".into());
    h
}

fn bit(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(header(data.feature_dim))?;
    for s in &data.samples {
        let mut rec: Vec<String> = s.features.iter().map(f64::to_string).collect();
        rec.push(s.emotion.map(|e| e.to_string()).unwrap_or_default());
        match &s.aus {
            Some(l) => {
                rec.extend((0..N_AUS).map(|i| if l.mask[i] { bit(l.values[i]) } else { String::new() }));
                rec.extend(l.mask.iter().map(|&m| bit(m)));
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 2 * N_AUS)),
        }
        match s.va {
            Some([v, a]) => rec.extend([v.to_string(), a.to_string()]),
            None => rec.extend([String::new(), String::new()]),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn malformed(msg: String) -> Error {
    Error::MalformedData(msg)
}

fn parse_bit(text: &str, column: &str, line: usize) -> Result<bool> {
    match text {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(malformed(format!("line {line}: {column} must be 0 or 1, got {text:?}"))),
    }
}

fn parse_f64(text: &str, column: &str, line: usize) -> Result<f64> {
    text.parse()
        .ok()
        .filter(|v: &f64| v.is_finite())
        .ok_or_else(|| malformed(format!("line {line}: {column} is not a finite number: {text:?}")))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(malformed(format!("{}: empty file", path.display())));
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| malformed(format!("{}: missing column {name}", path.display())))
    };
    let feature_dim = (0..)
        .take_while(|i| headers.iter().any(|h| h == format!("feature_{i}")))
        .count();
    if feature_dim == 0 {
        return Err(malformed(format!("{}: no feature columns", path.display())));
    }
    let feat_cols: Vec<usize> = (0..feature_dim)
        .map(|i| col(&format!("feature_{i}")))
        .collect::<Result<_>>()?;
    let emo_col = col("emo")?;
    let au_cols: Vec<usize> = au_header("au").map(|h| col(&h)).collect::<Result<_>>()?;
    let delta_cols: Vec<usize> = au_header("delta").map(|h| col(&h)).collect::<Result<_>>()?;
    let (v_col, a_col) = (col("valence")?, col("arousal")?);

    let mut samples = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let features = feat_cols
            .iter()
            .enumerate()
            .map(|(i, &c)| parse_f64(field(c), &format!("feature_{i}"), line))
            .collect::<Result<_>>()?;
        let emotion = match field(emo_col) {
            "" => None,
            t => Some(
                t.parse::<usize>()
                    .ok()
                    .filter(|&e| e < N_EMOTIONS)
                    .ok_or_else(|| malformed(format!("line {line}: bad emo {t:?}")))?,
            ),
        };
        let annotated = delta_cols.iter().chain(&au_cols).any(|&c| !field(c).is_empty());
        let aus = if annotated {
            let mut l = AuLabels {
                values: [false; N_AUS],
                mask: [false; N_AUS],
            };
            for i in 0..N_AUS {
                let name = format!("au_{}", CANONICAL_AUS[i]);
                l.mask[i] = parse_bit(field(delta_cols[i]), &format!("delta_{}", CANONICAL_AUS[i]), line)?;
                let value = field(au_cols[i]);
                l.values[i] = match (l.mask[i], value) {
                    (true, v) => parse_bit(v, &name, line)?,
                    (false, "") => false,
                    (false, _) => return Err(malformed(format!("line {line}: {name} set on an unannotated AU"))),
                };
            }
            Some(l)
        } else {
            None
        };
        let va = match (field(v_col), field(a_col)) {
            ("", "") => None,
            (v, a) => Some([parse_f64(v, "valence", line)?, parse_f64(a, "arousal", line)?]),
        };
        samples.push(Sample {
            features,
            emotion,
            aus,
            va,
        });
    }
    if samples.is_empty() {
        return Err(malformed(format!("{}: no rows", path.display())));
    }
    Ok(Dataset { feature_dim, samples })
}

const FILES: [&str; 4] = ["va.csv", "au.csv", "expr.csv", "test.csv"];

/// Writes `va.csv`, `au.csv`, `expr.csv` and `test.csv` into `dir`.
pub fn save(data: &SyntheticData, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (set, name) in [&data.va, &data.au, &data.expr, &data.test].into_iter().zip(FILES) {
        save_dataset(set, dir.join(name))?;
    }
    Ok(())
}

pub fn load(dir: impl AsRef<Path>) -> Result<SyntheticData> {
    let dir = dir.as_ref();
    let [va, au, expr, test] = FILES.map(|f| load_dataset(dir.join(f)));
    Ok(SyntheticData {
        va: va?,
        au: au?,
        expr: expr?,
        test: test?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::au_index;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            va_size: 60,
            au_size: 40,
            expr_size: 20,
            test_size: 30,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_strategy_independent() {
        let cfg = small();
        let a = generate(&cfg, Exec::Sequential).unwrap();
        let b = generate(&cfg, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let other = generate(&GeneratorConfig { seed: 1, ..small() }, Exec::Sequential).unwrap();
        assert_ne!(a.va.samples[0].features, other.va.samples[0].features);
    }

    #[test]
    fn sets_keep_only_their_labels() {
        let d = generate(&small(), Exec::Sequential).unwrap();
        assert!(d
            .va
            .samples
            .iter()
            .all(|s| s.va.is_some() && s.emotion.is_none() && s.aus.is_none()));
        assert!(d
            .expr
            .samples
            .iter()
            .all(|s| s.va.is_none() && s.emotion.is_some() && s.aus.is_none()));
        for s in &d.au.samples {
            let l = s.aus.unwrap();
            assert!(s.va.is_none() && s.emotion.is_none());
            assert_eq!(l.mask.iter().filter(|&&m| m).count(), 12);
            assert!((0..N_AUS).all(|i| l.mask[i] || !l.values[i]));
        }
        assert!(d
            .test
            .samples
            .iter()
            .all(|s| s.va.is_some() && s.emotion.is_some() && s.aus.unwrap().mask == [true; N_AUS]));
    }

    #[test]
    fn prototypical_aus_always_fire() {
        let cfg = GeneratorConfig {
            au_background_rate: 0.0,
            noise_sigma: 0.0,
            ..small()
        };
        let d = generate(&cfg, Exec::Sequential).unwrap();
        let happy = Emotion::Happiness.index();
        let rows: Vec<_> = d.test.samples.iter().filter(|s| s.emotion == Some(happy)).collect();
        assert!(!rows.is_empty());
        for s in rows {
            let l = s.aus.unwrap();
            assert!(l.values[au_index(12).unwrap()] && l.values[au_index(25).unwrap()]);
        }
    }

    #[test]
    fn schedule_examples() {
        let s = schedule([401 * 7, 247 * 7, 103 * 7], 7).unwrap();
        assert_eq!(s.batch_sizes, [401, 247, 103]);
        assert_eq!(schedule([9, 9, 9], 9).unwrap().batch_sizes, [1, 1, 1]);
        assert_eq!(schedule([1000, 500, 250], 250).unwrap().batch_sizes, [4, 2, 1]);
        assert_eq!(schedule([1003, 500, 250], 250).unwrap().used(), [1000, 500, 250]);
        assert!(schedule([1000, 500, 250], 251).is_err());
        assert!(schedule([1000, 500, 250], 0).is_err());
        assert!(schedule([1000, 0, 250], 10).is_err());
        assert_eq!(schedule_subset([0, 0, 250], 10).unwrap().batch_sizes, [0, 0, 25]);
    }

    #[test]
    fn sampler_exhausts_epoch() {
        let d = generate(&small(), Exec::Sequential).unwrap();
        let sched = schedule(d.train_sizes(), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sampler = EpochSampler::new(sched, d.train_sizes(), &mut rng).unwrap();
        let mut seen: [Vec<usize>; 3] = Default::default();
        while sampler.remaining() > 0 {
            let batch = sampler.next_batch(d.train_sets()).unwrap();
            assert_eq!(batch.rows(), 6 + 4 + 2);
            assert!(batch.emo_labels[..6].iter().all(Option::is_none));
            assert!(batch.va_labels[..6].iter().all(Option::is_some));
        }
        assert!(matches!(
            sampler.next_batch(d.train_sets()),
            Err(Error::EpochExhausted(10))
        ));

        let mut sampler = EpochSampler::new(sched, d.train_sizes(), &mut rng).unwrap();
        while sampler.remaining() > 0 {
            let idx = sampler.next_indices().unwrap();
            for (s, i) in seen.iter_mut().zip(idx) {
                s.extend_from_slice(i);
            }
        }
        for (s, n) in seen.iter_mut().zip(d.train_sizes()) {
            s.sort_unstable();
            assert_eq!(*s, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn csv_round_trip() {
        let d = generate(
            &GeneratorConfig {
                overlap_fraction: 0.5,
                ..small()
            },
            Exec::Sequential,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&d, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), d);
    }

    #[test]
    fn csv_rejects_bad_files() {
        let d = generate(&small(), Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("au.csv");
        save_dataset(&d.au, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // drop the delta_4 column
        let drop = header(d.au.feature_dim).iter().position(|h| h == "delta_4").unwrap();
        let cut: String = text
            .lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                f.remove(drop);
                f.join(",") + "\n"
            })
            .collect();
        std::fs::write(&path, cut).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("delta_4"), "{err}");

        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn compound_samples_follow_classes() {
        let cfg = small();
        let classes = crate::relatedness::default_compound_classes(&cfg.table);
        let c = generate_compound(&cfg, &classes, 5, 0, Exec::Parallel).unwrap();
        assert_eq!(c.len(), 55);
        assert_eq!(c.labels[5], 1);
        assert_eq!(c, generate_compound(&cfg, &classes, 5, 0, Exec::Sequential).unwrap());
        assert_ne!(
            c.features,
            generate_compound(&cfg, &classes, 5, 1, Exec::Sequential)
                .unwrap()
                .features
        );
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig {
            au_background_rate: 0.5,
            ..small()
        }
        .validate()
        .is_err());
        assert!(GeneratorConfig { va_size: 0, ..small() }.validate().is_err());
        assert!(GeneratorConfig {
            noise_sigma: -1.0,
            ..small()
        }
        .validate()
        .is_err());
        let mut c = small();
        c.va_regions.pop();
        assert!(c.validate().is_err());
    }
}
