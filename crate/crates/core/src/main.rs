use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use keyguard::attacks::{run_attack, AttackConfig};
use keyguard::checkpoint::Checkpoint;
use keyguard::data::{load_mnist_dir, DatasetSplit};
use keyguard::harness::attribution::{
    attribute, build_attribution_corpus, FeatureMode, SvmConfig, DEFAULT_TEST_PER_KEY, DEFAULT_TRAIN_PER_KEY,
};
use keyguard::harness::config::{field_or, ConfigFile, Section};
use keyguard::harness::flops::flop_count;
use keyguard::harness::report::{render_markdown, Format};
use keyguard::harness::transfer::{self, transfer_table, DEFAULT_SUBSET};
use keyguard::model::{build_model, ArchDescriptor};
use keyguard::train::{calibrate_lambda_with, train_with, Optimizer, TrainConfig};
use keyguard::{Error, Key, Result};

#[derive(Parser)]
#[command(name = "keyguard", version, about = "Keyed CNN defense lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from the [train] section of a config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "data/mnist")]
        data: PathBuf,
    },
    /// Run the first [attack] section against a checkpoint and save the batch.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "data/mnist")]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SUBSET)]
        subset: usize,
    },
    /// Clean row plus one transfer row per [attack] section, as CSV.
    Transfer {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "data/mnist")]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SUBSET)]
        subset: usize,
        /// Also write the rendered markdown table here.
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
    /// Attribute adversarial images to the keyed model that made them.
    Attribute {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 2.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long, default_value = "data/mnist")]
        data: PathBuf,
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
    /// Operation counts of an architecture with its instrumentation.
    Flops {
        #[arg(long, default_value = "lenet5")]
        model: String,
        #[arg(long, default_value_t = 2)]
        degree: usize,
        #[arg(long, value_enum, default_value_t = OutFormat::Csv)]
        format: OutFormat,
    },
    /// Validate a transfer CSV and render it.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = OutFormat::Markdown)]
        format: OutFormat,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Markdown,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Csv => Format::Csv,
            OutFormat::Markdown => Format::Markdown,
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(text: &str) -> Result<()> {
    io::stdout().write_all(text.as_bytes()).map_err(|e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    })
}

fn list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("`{what}`: cannot parse `{v}`"))))
        .collect()
}

/// Reads the [train] section; unknown keys are rejected.
fn train_config(s: Option<&Section>) -> Result<TrainConfig> {
    const KNOWN: [&str; 16] = [
        "model", "key", "seed", "epochs", "batch_size", "lr", "optimizer", "momentum", "milestones", "decay",
        "lambda", "init_samples", "lambda_grid", "validation", "exhaustive", "train_samples",
    ];
    if let Some(k) = s.and_then(|s| s.fields.keys().find(|k| !KNOWN.contains(&k.as_str()))) {
        return Err(Error::Config(format!("unknown [train] field `{k}`")));
    }
    let d = TrainConfig::default();
    let optimizer = match field_or(s, "optimizer", "sgd".to_string())?.as_str() {
        "sgd" => Optimizer::Sgd {
            momentum: field_or(s, "momentum", 0.9)?,
        },
        "adam" => Optimizer::adam(),
        other => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
    };
    let milestones = match s.and_then(|s| s.get("milestones")) {
        Some("") => Vec::new(),
        Some(v) => list(v, "milestones")?,
        None => d.milestones.clone(),
    };
    let cfg = TrainConfig {
        epochs: field_or(s, "epochs", d.epochs)?,
        batch_size: field_or(s, "batch_size", d.batch_size)?,
        learning_rate: field_or(s, "lr", d.learning_rate)?,
        optimizer,
        milestones,
        decay: field_or(s, "decay", d.decay)?,
        lambda: field_or(s, "lambda", d.lambda)?,
        seed: field_or(s, "seed", d.seed)?,
        init_samples: field_or(s, "init_samples", d.init_samples)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn attack_configs(file: &ConfigFile) -> Result<Vec<AttackConfig>> {
    let v: Vec<AttackConfig> = file
        .all("attack")
        .map(|s| AttackConfig::from_fields(&s.fields))
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::Config("config has no [attack] section".into()));
    }
    Ok(v)
}

fn cmd_train(config: &Path, out: &Path, data: &Path) -> Result<()> {
    let file = ConfigFile::load(config)?;
    let s = file.one("train")?;
    let cfg = train_config(s)?;
    let model_name = field_or(s, "model", "lenet5".to_string())?;
    let key = match s.and_then(|s| s.get("key")) {
        None | Some("none") => None,
        Some(spec) => Some(Key::parse(spec)?),
    };
    let template = build_model(&model_name, key, cfg.seed)?;
    let mut train = load_mnist_dir(data, "train")?;
    let limit: usize = field_or(s, "train_samples", train.len())?;
    train = train.range(0, limit.min(train.len()));
    let test = load_mnist_dir(data, "test")?;
    let log = |l: &keyguard::train::EpochLog| {
        let eval = l.eval.as_ref().map_or(String::new(), |e| {
            format!(" acc={:.4} fpr={:.4}", e.accuracy, e.clean_fpr)
        });
        eprintln!(
            "epoch {} lr={} loss={:.4} ce={:.4} reg={:.4}{eval}",
            l.epoch, l.learning_rate, l.mean_loss, l.mean_ce, l.mean_reg
        );
    };
    let ckpt = match s.and_then(|s| s.get("lambda_grid")) {
        None => train_with(template, &train, &cfg, Some(&test), log)?,
        Some(grid) => {
            // λ is chosen on a held-out tail of the training split
            let held: usize = field_or(s, "validation", 5000usize)?;
            if held == 0 || held >= train.len() {
                return Err(Error::Config(format!("validation = {held} leaves no training data")));
            }
            let cut = train.len() - held;
            let (fit, val) = (train.range(0, cut), train.range(cut, train.len()));
            let grid: Vec<f64> = list(grid, "lambda_grid")?;
            let exhaustive = field_or(s, "exhaustive", false)?;
            let cal = calibrate_lambda_with(&template, &fit, &val, &grid, &cfg, exhaustive, |p, _| {
                eprintln!("lambda={} acc={:.4} fpr={:.4}", p.lambda, p.accuracy, p.clean_fpr)
            })?;
            match cal.chosen {
                Some(l) => eprintln!("calibrated lambda = {l}"),
                None => eprintln!("no lambda met the targets; keeping the best trade-off"),
            }
            cal.checkpoint
        }
    };
    ckpt.save(out)?;
    emit(&format!(
        "model,key,seed,lambda,accuracy,clean_fpr,fingerprint\n{},{},{},{},{},{},{}\n",
        model_name,
        ckpt.model.key().map_or("none", |k| k.spec()),
        ckpt.meta.seed,
        ckpt.meta.lambda,
        ckpt.meta.final_accuracy,
        ckpt.meta.final_fpr,
        ckpt.model.fingerprint()
    ))
}

fn test_split(data: &Path) -> Result<DatasetSplit> {
    load_mnist_dir(data, "test")
}

fn cmd_attack(model: &Path, config: &Path, out: &Path, data: &Path, subset: usize) -> Result<()> {
    let ckpt = Checkpoint::load(model)?;
    let attack = attack_configs(&ConfigFile::load(config)?)?.remove(0);
    let eval = transfer::eval_subset(&test_split(data)?, subset);
    let batch = run_attack(&ckpt.model, &eval.images, &eval.labels, &attack)?;
    batch.to_container().save(out)?;
    let (l2, linf) = keyguard::attacks::distortion_norms(&batch);
    emit(&format!(
        "attack,samples,success_rate,l2,linf\n{},{},{},{},{}\n",
        attack.label(),
        batch.len(),
        batch.success_rate(),
        l2,
        linf
    ))
}

fn cmd_transfer(
    source: &Path,
    target: &Path,
    config: &Path,
    data: &Path,
    subset: usize,
    markdown: Option<&Path>,
) -> Result<()> {
    let attacks = attack_configs(&ConfigFile::load(config)?)?;
    let rows = transfer_table(
        &Checkpoint::load(source)?,
        &Checkpoint::load(target)?,
        &attacks,
        &test_split(data)?,
        subset,
    )?;
    if let Some(path) = markdown {
        write_file(path, &render_markdown(&rows)?)?;
    }
    emit(&transfer::to_csv(&rows)?)
}

fn cmd_attribute(config: &Path, models: &[PathBuf], data: &Path, markdown: Option<&Path>) -> Result<()> {
    let file = ConfigFile::load(config)?;
    let attacks = attack_configs(&file)?;
    let s = file.one("attribute")?;
    let mode = match field_or(s, "features", "residual".to_string())?.as_str() {
        "residual" => FeatureMode::Residual,
        "raw" => FeatureMode::Raw,
        other => return Err(Error::Config(format!("unknown feature mode `{other}`"))),
    };
    let svm = SvmConfig {
        epochs: field_or(s, "epochs", SvmConfig::default().epochs)?,
        learning_rate: field_or(s, "lr", SvmConfig::default().learning_rate)?,
        l2: field_or(s, "l2", SvmConfig::default().l2)?,
        seed: field_or(s, "seed", 0)?,
    };
    let ckpts: Vec<Checkpoint> = models.iter().map(Checkpoint::load).collect::<Result<_>>()?;
    let refs: Vec<_> = ckpts.iter().map(|c| &c.model).collect();
    let corpus = build_attribution_corpus(
        &refs,
        &attacks,
        &test_split(data)?,
        field_or(s, "train_per_key", DEFAULT_TRAIN_PER_KEY)?,
        field_or(s, "test_per_key", DEFAULT_TEST_PER_KEY)?,
        mode,
        svm.seed,
    )?;
    let report = attribute(&corpus, &svm)?;
    if let Some(path) = markdown {
        write_file(path, &report.to_markdown())?;
    }
    emit(&report.to_csv())
}

fn cmd_report(input: &Path, format: Format) -> Result<()> {
    let file = fs::File::open(input).map_err(|e| Error::Io {
        path: input.to_path_buf(),
        source: e,
    })?;
    let rows = transfer::read_csv(file)?;
    match format {
        Format::Markdown => emit(&render_markdown(&rows)?),
        Format::Csv => emit(&transfer::to_csv(&rows)?),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, data } => cmd_train(&config, &out, &data),
        Command::Attack {
            model,
            config,
            out,
            data,
            subset,
        } => cmd_attack(&model, &config, &out, &data, subset),
        Command::Transfer {
            source,
            target,
            config,
            data,
            subset,
            markdown,
        } => cmd_transfer(&source, &target, &config, &data, subset, markdown.as_deref()),
        Command::Attribute {
            config,
            models,
            data,
            markdown,
        } => cmd_attribute(&config, &models, &data, markdown.as_deref()),
        Command::Flops { model, degree, format } => {
            let report = flop_count(&ArchDescriptor::by_name(&model)?, degree);
            emit(&match Format::from(format) {
                Format::Csv => report.to_csv(),
                Format::Markdown => report.to_markdown(),
            })
        }
        Command::Report { input, format } => cmd_report(&input, format.into()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
