use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use affect_core::coupling::{co_annotate_aus_to_emotion, co_annotate_emotion_to_aus, soft_emotion_label};
use affect_core::experiment::{ExperimentConfig, TableSource};
use affect_core::labels::au_index;
use affect_core::metrics::{write_metrics_csv, ConfusionMatrix, MetricRecord};
use affect_core::network::Network;
use affect_core::relatedness::{
    default_compound_classes, infer_table, load_compound_classes, DEFAULT_INFERENCE_THRESHOLD,
};
use affect_core::synthdata::{self, generate, generate_compound, load_dataset};
use affect_core::trainer::{self, evaluate, fine_tune_compound, run_ablation};
use affect_core::zeroshot::{
    classify_all, classify_network, read_predictions_csv, score_classifications, write_classifications_csv,
    CompoundPredictionConfig,
};
use affect_core::{Emotion, Error, Exec, CANONICAL_AUS, N_AUS};

const CONFIG_KEYS: &str = "\
CONFIG FILE (JSON; every block and key optional, defaults in brackets):
  table                              \"cognitive\" | \"empirical\" | path to a table file [cognitive]
  generator.va_size / au_size / expr_size / test_size
                                     samples per set [4010 / 2470 / 1030 / 1400]
  generator.feature_dim              feature width [32]
  generator.noise_sigma              feature noise [1.0]
  generator.au_background_rate       activation rate of unrelated AUs, in [0, 0.5) [0.05]
  generator.annotated_aus            AUs annotated per AU-Set sample [12]
  generator.overlap_fraction         VA-Set samples that keep their emotion label [0]
  generator.seed                     data seed [0]
  generator.va_regions               list of {emotion, valence, arousal, spread}
  network.input_dim                  must equal generator.feature_dim [32]
  network.hidden_dims                tanh trunk widths [[64, 64]]
  network.dropout_rate               trunk dropout [0.5]
  network.emotion_classes            categorical head width [7]
  train.learning_rate / momentum     SGD settings [0.1 / 0]
  train.epochs / iterations          epochs, concatenated batches per epoch [40 / 40]
  train.weights.lambda1 / lambda2    AU and VA loss weights [1 / 1]
  train.weights.mu_dm / mu_sca       distribution-matching and soft co-annotation weights [0.1 / 0.3]
  train.tasks.va / au / expr         training sets in use [true]
  coupling.co_annotation / soft_co_annotation / distribution_matching
                                     strategy switches [false]; ablate sets them per row
  coupling.weighted_q                table weights inside the AU mixture [false]
  coupling.normalize_q               divide the mixture by the emotions sharing an AU [false]
  coupling.full_bernoulli            add the (1 - p) log(1 - q) term [true]
  coupling.stop_gradient_q           treat the mixture as a constant target [false]
  coupling.weighted_soft             table weights in soft labels [true]
  compound.classes                   compound class file [bundled eleven classes]
  compound.train_per_class / test_per_class
                                     synthetic compound samples [20 / 100]
  compound.weighted / valence_term   zero-shot scoring switches [false / true]
  fine_tune.learning_rate / epochs / batch_size / momentum
                                     compound fine-tuning [0.1 / 30 / 16 / 0]

Seeds given with --seed override train.seed, network.seed and fine_tune.seed.
Print the complete defaults with `affect config`.";

#[derive(Parser, Debug)]
#[command(
    name = "affect",
    version,
    about = "Joint expression, action-unit and valence/arousal experiments"
)]
#[command(after_long_help = CONFIG_KEYS)]
struct Cli {
    /// Run data-parallel steps on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Experiment config file; benchmark defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the default experiment config.
    Config,
    /// Generate VA-Set, AU-Set, EXPR-Set and a test split.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides generator.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one joint network with the configured coupling.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset file or on a data directory's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every coupling variant (and single-task baselines) for several seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// First seed; the grid uses seed, seed + 1, ...
        #[arg(long)]
        seed: u64,
        /// Number of seeds.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Skip the single-task baselines.
        #[arg(long)]
        no_baselines: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate a relatedness table from a dataset with emotion and full AU labels.
    InferTable {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_INFERENCE_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the relatedness rules to one emotion or one AU pattern.
    CoAnnotate {
        /// "cognitive", "empirical" or a table file.
        #[arg(long, default_value = "cognitive")]
        table: String,
        #[arg(long, conflicts_with = "aus", required_unless_present = "aus")]
        emotion: Option<String>,
        /// Comma-separated active AU ids, e.g. 1,2,5,25,26.
        #[arg(long, value_delimiter = ',')]
        aus: Option<Vec<u32>>,
        /// Unit weights in the soft label.
        #[arg(long)]
        unweighted: bool,
        /// JSON output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify compound expressions from basic-task predictions.
    ZeroShot {
        /// Prediction CSV: emo_<emotion> x7, au_<id> x17, valence, arousal.
        #[arg(long, required_unless_present = "checkpoint")]
        preds: Option<PathBuf>,
        /// Predict with a checkpoint on --data instead.
        #[arg(long, requires = "data", conflicts_with = "preds")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Compound class file; the bundled list when absent.
        #[arg(long)]
        classes: Option<PathBuf>,
        #[arg(long, default_value = "cognitive")]
        table: String,
        /// Table weights as p(AU | class).
        #[arg(long)]
        weighted: bool,
        #[arg(long)]
        no_valence_term: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a checkpoint on synthetic compound samples.
    FineTune {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Error with a category for the message and exit code.
struct CliError {
    category: &'static str,
    code: u8,
    message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (category, code) = match &e {
            Error::Io(_) => ("io", 3),
            Error::MalformedData(_) | Error::Csv(_) => ("data", 4),
            Error::NonFiniteLoss { .. } => ("training", 5),
            _ => ("input", 6),
        };
        CliError {
            category,
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn context(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |e| {
        let mut c = CliError::from(e);
        c.message = format!("{}: {}", path.display(), c.message);
        c
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category, e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_config(arg: &ConfigArg) -> CliResult<(ExperimentConfig, PathBuf)> {
    match &arg.config {
        Some(p) => {
            let cfg = ExperimentConfig::load(p).map_err(context(p))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((cfg, base))
        }
        None => Ok((ExperimentConfig::default(), PathBuf::from("."))),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| context(path)(e.into()))?))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| context(path)(e.into()))
}

/// Appends a timestamped line to `run.log`; timestamps live only here.
fn sidecar_log(dir: &Path, line: &str) -> CliResult<()> {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let path = dir.join("run.log");
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    writeln!(f, "unix_time={now} {line}")?;
    Ok(())
}

fn run(command: Command, exec: Exec) -> CliResult<()> {
    let start = Instant::now();
    match command {
        Command::Config => {
            println!("{}", ExperimentConfig::default().to_json_string());
            Ok(())
        }
        Command::Generate { config, seed, out } => {
            let (mut cfg, base) = load_config(&config)?;
            if let Some(s) = seed {
                cfg.generator.seed = s;
            }
            let gen = cfg.generator_config(&base)?;
            let data = generate(&gen, exec)?;
            synthdata::save(&data, &out).map_err(context(&out))?;
            write_text(&out.join("config.json"), &cfg.to_json_string())?;
            sidecar_log(
                &out,
                &format!("generate wall_clock_secs={:.3}", start.elapsed().as_secs_f64()),
            )
        }
        Command::Train {
            config,
            data,
            seed,
            out,
        } => {
            let (cfg, base) = load_config(&config)?;
            let cfg = cfg.with_seed(seed);
            let table = cfg.table.resolve(&base)?;
            let dataset = synthdata::load(&data).map_err(context(&data))?;
            let mut net = Network::new(cfg.network.clone())?;
            let report = trainer::train(&mut net, &dataset, &table, &cfg.train_config())?;
            fs::create_dir_all(&out)?;
            report.write_loss_csv(create(&out.join("losses.csv"))?)?;
            report.write_metrics_csv(create(&out.join("metrics.csv"))?)?;
            net.save(out.join("checkpoint.json"))?;
            write_text(&out.join("config.json"), &cfg.to_json_string())?;
            sidecar_log(
                &out,
                &format!("train seed={seed} wall_clock_secs={:.3}", report.wall_clock_secs),
            )
        }
        Command::Evaluate { checkpoint, data, out } => {
            let net = Network::load(&checkpoint).map_err(context(&checkpoint))?;
            let split = if data.is_dir() {
                data.join("test.csv")
            } else {
                data.clone()
            };
            let dataset = load_dataset(&split).map_err(context(&split))?;
            let report = evaluate(&net, &dataset, exec)?;
            fs::create_dir_all(&out)?;
            write_metrics_csv(&report.records("eval"), create(&out.join("metrics.csv"))?)?;
            sidecar_log(
                &out,
                &format!("evaluate wall_clock_secs={:.3}", start.elapsed().as_secs_f64()),
            )
        }
        Command::Ablate {
            config,
            data,
            seed,
            seeds,
            no_baselines,
            out,
        } => {
            if seeds == 0 {
                return Err(Error::InvalidInput("--seeds must be at least 1".into()).into());
            }
            let (cfg, base) = load_config(&config)?;
            let cfg = cfg.with_seed(seed);
            let table = cfg.table.resolve(&base)?;
            let dataset = synthdata::load(&data).map_err(context(&data))?;
            let seed_list: Vec<u64> = (seed..seed + seeds).collect();
            let report = run_ablation(
                &cfg.network,
                &dataset,
                &table,
                &cfg.train_config(),
                &seed_list,
                !no_baselines,
                exec,
            )?;
            fs::create_dir_all(&out)?;
            report.write_summary_csv(create(&out.join("summary.csv"))?)?;
            report.write_cells_csv(create(&out.join("cells.csv"))?)?;
            write_text(&out.join("summary.txt"), &report.summary_table())?;
            write_text(&out.join("config.json"), &cfg.to_json_string())?;
            print!("{}", report.summary_table());
            sidecar_log(
                &out,
                &format!(
                    "ablate seeds={seed_list:?} wall_clock_secs={:.3}",
                    start.elapsed().as_secs_f64()
                ),
            )
        }
        Command::InferTable { data, threshold, out } => {
            let dataset = load_dataset(&data).map_err(context(&data))?;
            let samples: Vec<(Emotion, [bool; N_AUS])> = dataset
                .samples
                .iter()
                .filter_map(|s| {
                    let labels = s.aus.filter(|l| l.mask == [true; N_AUS])?;
                    Some((Emotion::from_index(s.emotion?).ok()?, labels.values))
                })
                .collect();
            if samples.is_empty() {
                return Err(
                    Error::InvalidInput("no rows carry both an emotion and a full AU annotation".into()).into(),
                );
            }
            let inferred = infer_table(&samples, threshold)?;
            for w in &inferred.warnings {
                eprintln!("warning: {}: {}", w.emotion, w.reason);
            }
            inferred.table.save(&out).map_err(context(&out))
        }
        Command::CoAnnotate {
            table,
            emotion,
            aus,
            unweighted,
            out,
        } => {
            let table = TableSource(table).resolve(Path::new("."))?;
            let value = if let Some(name) = emotion {
                let emo: Emotion = name.parse()?;
                let targets: Vec<_> = co_annotate_emotion_to_aus(emo, &table)
                    .into_iter()
                    .map(|c| serde_json::json!({"au": c.au, "target": c.target, "weight": c.weight}))
                    .collect();
                serde_json::json!({"emotion": emo.name(), "au_targets": targets})
            } else {
                let ids = aus.unwrap_or_default();
                let mut active = [false; N_AUS];
                for id in &ids {
                    active[au_index(*id)?] = true;
                }
                let label = co_annotate_aus_to_emotion(&active, &table);
                let soft = soft_emotion_label(&active, &table, !unweighted);
                let soft: serde_json::Map<String, serde_json::Value> = Emotion::ALL
                    .iter()
                    .map(|e| (e.name().to_string(), soft[e.index()].into()))
                    .collect();
                serde_json::json!({
                    "active_aus": CANONICAL_AUS.iter().filter(|id| ids.contains(id)).collect::<Vec<_>>(),
                    "emotion": label.map(Emotion::name),
                    "soft_label": soft,
                })
            };
            let text = serde_json::to_string_pretty(&value).map_err(Error::from)? + "\n";
            match out {
                Some(p) => write_text(&p, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::ZeroShot {
            preds,
            checkpoint,
            data,
            classes,
            table,
            weighted,
            no_valence_term,
            out,
        } => {
            let table = TableSource(table).resolve(Path::new("."))?;
            let classes = match &classes {
                Some(p) => load_compound_classes(p, &table).map_err(context(p))?,
                None => default_compound_classes(&table),
            };
            let mut cfg = CompoundPredictionConfig::new(classes)?;
            cfg.weighted = weighted;
            cfg.valence_term = !no_valence_term;
            let results = match (preds, checkpoint, data) {
                (Some(p), _, _) => classify_all(&read_predictions_csv(&p).map_err(context(&p))?, &cfg, exec),
                (None, Some(ckpt), Some(d)) => {
                    let net = Network::load(&ckpt).map_err(context(&ckpt))?;
                    let dataset = load_dataset(&d).map_err(context(&d))?;
                    classify_network(&net, dataset.features().view(), &cfg, exec)?
                }
                _ => return Err(Error::InvalidInput("give --preds or --checkpoint with --data".into()).into()),
            };
            write_classifications_csv(&results, &cfg, create(&out)?)?;
            Ok(())
        }
        Command::FineTune {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let (cfg, base) = load_config(&config)?;
            let cfg = cfg.with_seed(seed);
            let gen = cfg.generator_config(&base)?;
            let classes = cfg.compound_classes(&gen.table, &base)?;
            let train_set = generate_compound(&gen, &classes, cfg.compound.train_per_class, 0, exec)?;
            let test_set = generate_compound(&gen, &classes, cfg.compound.test_per_class, 1, exec)?;
            let mut net = Network::load(&checkpoint).map_err(context(&checkpoint))?;

            let zs_cfg = cfg.compound_prediction_config(classes)?;
            let zs = classify_network(&net, test_set.features.view(), &zs_cfg, exec)?;
            let (_, zs_stats) = score_classifications(&zs, &test_set.labels, test_set.classes())?;

            let report = fine_tune_compound(&mut net, &train_set, &test_set, &cfg.fine_tune)?;
            let mut records = vec![
                MetricRecord::new("zero_shot", "accuracy", "test", zs_stats.total_accuracy),
                MetricRecord::new("zero_shot", "mean_diagonal", "test", zs_stats.mean_diagonal),
            ];
            records.extend(report.records("test"));
            fs::create_dir_all(&out)?;
            write_metrics_csv(&records, create(&out.join("metrics.csv"))?)?;
            write_confusion(&report.confusion, &report.class_names, &out.join("confusion.csv"))?;
            net.save(out.join("checkpoint.json"))?;
            write_text(&out.join("config.json"), &cfg.to_json_string())?;
            sidecar_log(
                &out,
                &format!(
                    "fine-tune seed={seed} wall_clock_secs={:.3}",
                    start.elapsed().as_secs_f64()
                ),
            )
        }
    }
}

fn write_confusion(cm: &ConfusionMatrix, names: &[String], path: &Path) -> CliResult<()> {
    let mut w = create(path)?;
    writeln!(w, "truth,{}", names.join(","))?;
    for (t, name) in names.iter().enumerate() {
        let row: Vec<String> = (0..names.len()).map(|p| cm.get(t, p).to_string()).collect();
        writeln!(w, "{name},{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
