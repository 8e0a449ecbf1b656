//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_assignment, parse_flat, TrainConfig};
use crate::data::{load_metadata, read_wav, split_holdout, synth_dataset, write_dataset, write_matrix, SynthConfig};
use crate::error::{MuserError, Result};
use crate::evaluation::{eval_zero_shot, few_shot_sweep, template_ablation, TaskKind, TaskSpec};
use crate::signal::stft;
use crate::text::{ablation_templates, TemplateSpec};
use crate::training::{fine_tune, load_checkpoint, resume, save_checkpoint, train, Checkpoint, TrainLog};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const SEED_ENV: &str = "MUSER_SEED";

#[derive(Debug, Parser)]
#[command(name = "muser", about = "Tri-modal contrastive audio, spectrum and text embeddings")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic tone corpus as WAV files plus metadata.
    Synth(SynthArgs),
    /// Train from scratch, resume a checkpoint, or fine-tune one.
    Train(TrainArgs),
    /// Zero-shot evaluation on a genre or tagging task.
    Eval(EvalArgs),
    /// Zero-shot genre classification; prints `accuracy=`.
    Zeroshot(ZeroshotArgs),
    /// Fine-tune on nested fractions of a training set and evaluate each.
    Fewshot(FewshotArgs),
    /// Write the STFT magnitude matrix of a WAV file.
    Stft(StftArgs),
    /// Evaluate the same checkpoint under each ablation template.
    AblateTemplates(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    seconds: f64,
    #[arg(long, default_value_t = 8000)]
    rate: u32,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of each class written to `test.jsonl`.
    #[arg(long, default_value_t = 0.25)]
    holdout: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Drop the spectrum branch from the objective.
    #[arg(long)]
    no_spectrum: bool,
    /// Continue this checkpoint's run up to its epoch budget.
    #[arg(long, conflicts_with = "init")]
    resume: Option<PathBuf>,
    /// Fine-tune starting from this checkpoint's parameters.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "tagging")]
    task: String,
    /// Defaults to the checkpoint's training template.
    #[arg(long)]
    template: Option<String>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ZeroshotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    template: Option<String>,
}

#[derive(Debug, Args)]
struct FewshotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.4,1.0")]
    ratios: Vec<f64>,
    #[arg(long, default_value = "genre")]
    task: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct StftArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    frame_len: Option<usize>,
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long)]
    window: Option<String>,
    /// Keep raw magnitudes.
    #[arg(long)]
    no_log: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "tagging")]
    task: String,
}

/// Maps an error onto the process exit-code contract.
pub fn exit_code(e: &MuserError) -> i32 {
    match e {
        MuserError::InvalidArgument(_) | MuserError::Config(_) => EXIT_USAGE,
        MuserError::Numerical(_) | MuserError::NonFinite(_) | MuserError::Shape { .. } => EXIT_NUMERICAL,
        MuserError::MissingField(_)
        | MuserError::Template(_)
        | MuserError::Format(_)
        | MuserError::Data(_)
        | MuserError::Io { .. } => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Results go to `out`, diagnostics to `err`.
pub fn run<I, S>(args: I, env_seed: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match dispatch(cli, env_seed, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn base_config(cli: &Cli, env_seed: Option<&str>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(s) = env_seed {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| MuserError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?;
    }
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| MuserError::io(path, e))?;
        for (k, v) in parse_flat(&text).map_err(|e| MuserError::Config(format!("{}: {e}", path.display())))? {
            cfg.set(&k, &v)?;
        }
    }
    for o in &cli.overrides {
        let (k, v) = parse_assignment(o)?;
        cfg.set(&k, &v)?;
    }
    Ok(cfg)
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| MuserError::io("<stdout>", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MuserError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MuserError::io(path, e))
}

fn template_or(ckpt: &Checkpoint, template: &Option<String>) -> Result<TemplateSpec> {
    match template {
        Some(t) => TemplateSpec::new(t),
        None => ckpt.config.template_spec(),
    }
}

fn dispatch(cli: Cli, env_seed: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let mut cfg = base_config(&cli, env_seed)?;
    match cli.command {
        Command::Synth(a) => {
            let seed = a.seed.unwrap_or(cfg.seed);
            let records = synth_dataset(&SynthConfig {
                classes: a.classes,
                per_class: a.per_class,
                clip_seconds: a.seconds,
                rate_hz: a.rate,
                seed,
            })?;
            let (train_set, test_set) = split_holdout(&records, "genre", a.holdout)?;
            create_dir(&a.out)?;
            write_dataset(a.out.join("metadata.jsonl"), "audio", &records)?;
            // Audio is already on disk; the split files reference it.
            let as_files = |rs: Vec<crate::data::DatasetRecord>| -> Vec<crate::data::DatasetRecord> {
                rs.into_iter()
                    .map(|mut r| {
                        r.audio = crate::data::AudioSource::File(PathBuf::from(format!("audio/{}.wav", r.id)));
                        r
                    })
                    .collect()
            };
            write_dataset(a.out.join("train.jsonl"), "audio", &as_files(train_set))?;
            write_dataset(a.out.join("test.jsonl"), "audio", &as_files(test_set))?;
            write_out(
                out,
                &format!("records={}\nout={}\n", records.len(), a.out.display()),
            )
        }
        Command::Train(a) => {
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.lr = lr;
            }
            if a.no_spectrum {
                cfg.spectrum_enabled = false;
            }
            let dataset = load_metadata(&a.data)?;
            let out_dir = a.out.clone();
            let mut sink = |c: &Checkpoint| -> Result<()> {
                create_dir(&out_dir)?;
                save_checkpoint(c, out_dir.join(format!("epoch_{:04}.ckpt", c.epoch)))
            };
            let (ckpt, log): (Checkpoint, TrainLog) = match (&a.resume, &a.init) {
                (Some(path), _) => {
                    let mut c = load_checkpoint(path)?;
                    if let Some(e) = a.epochs {
                        c.config.epochs = e;
                    }
                    resume(c, &dataset, &mut sink)?
                }
                (None, Some(path)) => fine_tune(&load_checkpoint(path)?, &cfg, &dataset, &mut sink)?,
                (None, None) => train(&cfg, &dataset, &mut sink)?,
            };
            create_dir(&a.out)?;
            save_checkpoint(&ckpt, a.out.join("model.ckpt"))?;
            write_file(&a.out.join("train.log"), &log.to_text())?;
            let last = log.epoch_means.last().map_or(f64::NAN, |m| m.1);
            write_out(out, &format!("epochs={}\nfinal_loss={last}\n", ckpt.epoch))
        }
        Command::Eval(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let data = load_metadata(&a.data)?;
            let task = TaskSpec::new(a.task.parse::<TaskKind>()?);
            let report = eval_zero_shot(&data, &ckpt, &template_or(&ckpt, &a.template)?, &task)?;
            if let Some(p) = &a.json {
                write_file(p, &report.to_json()?)?;
            }
            write_out(out, &report.to_kv())
        }
        Command::Zeroshot(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let data = load_metadata(&a.data)?;
            let report = eval_zero_shot(&data, &ckpt, &template_or(&ckpt, &a.template)?, &TaskSpec::genre())?;
            write_out(out, &report.to_kv())
        }
        Command::Fewshot(a) => {
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.lr = lr;
            }
            let base = load_checkpoint(&a.ckpt)?;
            let train_set = load_metadata(&a.train)?;
            let test_set = load_metadata(&a.test)?;
            let task = TaskSpec::new(a.task.parse::<TaskKind>()?);
            let template = cfg.template_spec()?;
            let strat = if task.kind == TaskKind::Genre { task.field.clone() } else { "genre".into() };
            let points = few_shot_sweep(&train_set, &strat, &a.ratios, cfg.seed, cfg.batch_size, |subset| {
                let (tuned, _) = fine_tune(&base, &cfg, subset, &mut |_| Ok(()))?;
                eval_zero_shot(&test_set, &tuned, &template, &task)
            })?;
            let mut text = String::new();
            for p in points {
                text.push_str(&format!("ratio={} n_train={}", p.ratio, p.n_train));
                match (&p.report, &p.skipped) {
                    (Some(r), _) => {
                        for (k, v) in [("accuracy", r.accuracy), ("roc_auc_macro", r.roc_auc_macro), ("ap_macro", r.ap_macro)] {
                            if let Some(v) = v {
                                text.push_str(&format!(" {k}={v}"));
                            }
                        }
                    }
                    (None, Some(why)) => text.push_str(&format!(" skipped=\"{why}\"")),
                    (None, None) => {}
                }
                text.push('\n');
            }
            write_out(out, &text)
        }
        Command::Stft(a) => {
            let mut sc = cfg.stft;
            if let Some(n) = a.frame_len {
                sc.frame_len = n;
            }
            if let Some(h) = a.hop {
                sc.hop = h;
            }
            if let Some(w) = &a.window {
                sc.window = w.parse()?;
            }
            if a.no_log {
                sc.log_compress = false;
            }
            let spec = stft(&read_wav(&a.input)?, &sc)?;
            write_matrix(&a.out, &spec.mags)?;
            write_out(out, &format!("bins={}\nframes={}\n", spec.bins(), spec.frames()))
        }
        Command::AblateTemplates(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let data = load_metadata(&a.data)?;
            let task = TaskSpec::new(a.task.parse::<TaskKind>()?);
            let rows = template_ablation(&data, &ckpt, &ablation_templates(), &task)?;
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
            let mut text = String::from("template\tn_examples\taccuracy\troc_auc_macro\tap_macro\n");
            for (t, r) in rows {
                text.push_str(&format!(
                    "{t}\t{}\t{}\t{}\t{}\n",
                    r.n_examples,
                    fmt(r.accuracy),
                    fmt(r.roc_auc_macro),
                    fmt(r.ap_macro)
                ));
            }
            write_out(out, &text)
        }
    }
}
