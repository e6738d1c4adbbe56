use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde_json::{json, Value};
use xmar_core::baseline::{run_baselines, DEFAULT_HOLDOUT};
use xmar_core::data::{
    load_dna_tsv_pair, load_splice, load_text_csv, longest_sequence, DatasetSplit, SpliceOptions, TextOptions, Vocab,
    DEFAULT_MAX_VOCAB, PAD, SPLICE_TEST, SPLICE_TRAIN,
};
use xmar_core::image::{export_png, export_png_within, load_base_image, ImageSpec};
use xmar_core::program::{select_patch_size, AdversarialProgram, BoundedProgram, Program};
use xmar_core::remap::Aggregation;
use xmar_core::timing::{bench_timing, TimingConfig};
use xmar_core::train::{evaluate, train, RemapMode, TrainConfig, TrainEvent, TrainState};
use xmar_core::victim::{
    build_victim_with_patch, pretrain_victim, Arch, PretrainConfig, SyntheticImageTask, VictimModel,
    DEFAULT_VICTIM_PATCH, SHAPE_NAMES,
};
use xmar_tensor::{Checkpoint, Tensor};

use crate::config::Config;
use crate::error::{io_error, CliError};

type Result<T> = std::result::Result<T, CliError>;

pub const VICTIM_FILE: &str = "victim.xmar";
pub const PRETRAIN_REPORT: &str = "pretrain_report.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.xmar";
pub const PROGRAM_FILE: &str = "program.xmar";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SAMPLES_DIR: &str = "samples";
pub const DEFAULT_SAMPLES: usize = 4;
/// Largest doubling ratio accepted by `bench-timing`.
pub const TIMING_RATIO_BOUND: f64 = 3.0;

const DATA_KEYS: &[&str] = &[
    "dataset_format",
    "train_path",
    "test_path",
    "splice_train_size",
    "splice_test_size",
    "split_seed",
    "max_vocab",
    "test_fraction",
];

const PRETRAIN_KEYS: &[&str] = &[
    "arch",
    "image",
    "num_labels",
    "victim_patch",
    "task_classes",
    "task_seed",
    "epochs",
    "samples_per_epoch",
    "batch_size",
    "lr",
    "heldout",
    "seed",
    "out_dir",
];

const TRAIN_KEYS: &[&str] = &[
    "victim",
    "patch",
    "bounded",
    "epsilon",
    "base_image",
    "batch_size",
    "lr",
    "lambda",
    "max_steps",
    "m",
    "eval_every",
    "seed",
    "remap_mode",
    "q",
    "accessible",
    "use_bias",
    "aggregation",
    "patience",
    "checkpoint_every",
    "train_eval_limit",
    "samples",
    "out_dir",
];

const BASELINE_KEYS: &[&str] = &["holdout", "seed", "out_dir"];

const TIMING_KEYS: &[&str] = &["sizes", "patch", "channels", "vocab_size", "samples", "inner", "seed", "out_dir"];

fn allowed(groups: &[&[&'static str]]) -> Vec<&'static str> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

fn parse_image(cfg: &Config, key: &str, default: ImageSpec) -> Result<ImageSpec> {
    let Some(raw) = cfg.str(key) else { return Ok(default) };
    let dims: Vec<usize> = raw
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| cfg.invalid(key, format!("expected HxWxC, got {raw:?}")))?;
    let &[h, w, c] = dims.as_slice() else {
        return Err(cfg.invalid(key, format!("expected HxWxC, got {raw:?}")));
    };
    ImageSpec::new(h, w, c).map_err(|e| cfg.invalid(key, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json");
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Writes through a temporary file so an interrupted run never leaves a
/// truncated checkpoint behind.
fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write_file(&tmp, &ck.to_bytes())?;
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_error(path, e))?;
    writeln!(f, "{line}").map_err(|e| io_error(path, e))
}

fn print_json(value: &Value) {
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(value).expect("json"));
}

pub fn pretrain(cfg: &Config) -> Result<()> {
    cfg.check_keys(PRETRAIN_KEYS)?;
    let arch: Arch = cfg.parse_required("arch")?;
    let out_dir = cfg.require_path("out_dir")?;
    let image = parse_image(cfg, "image", ImageSpec::new(64, 64, 3)?)?;
    let num_labels: usize = cfg.get_or("num_labels", 10)?;
    let patch: usize = cfg.get_or("victim_patch", DEFAULT_VICTIM_PATCH)?;
    let task_classes: usize = cfg.get_or("task_classes", num_labels.min(SHAPE_NAMES.len()))?;
    let task_seed: u64 = cfg.get_or("task_seed", 0)?;
    let defaults = PretrainConfig::default();
    let config = PretrainConfig {
        epochs: cfg.get_or("epochs", defaults.epochs)?,
        samples_per_epoch: cfg.get_or("samples_per_epoch", defaults.samples_per_epoch)?,
        batch_size: cfg.get_or("batch_size", defaults.batch_size)?,
        lr: cfg.get_or("lr", defaults.lr)?,
        heldout: cfg.get_or("heldout", defaults.heldout)?,
        seed: cfg.get_or("seed", defaults.seed)?,
    };
    if num_labels < 2 {
        return Err(cfg.invalid("num_labels", "need at least 2 labels"));
    }
    if task_classes < 2 || task_classes > num_labels.min(SHAPE_NAMES.len()) {
        return Err(cfg.invalid("task_classes", format!("must be in 2..={}", num_labels.min(SHAPE_NAMES.len()))));
    }
    if config.batch_size == 0 {
        return Err(cfg.invalid("batch_size", "must be positive"));
    }
    if config.heldout == 0 {
        return Err(cfg.invalid("heldout", "must be positive"));
    }
    if !(config.lr.is_finite() && config.lr >= 0.0) {
        return Err(cfg.invalid("lr", "must be finite and non-negative"));
    }
    let mut victim = build_victim_with_patch(arch, image, num_labels, patch, config.seed)
        .map_err(|e| CliError::Config(format!("victim geometry: {e}")))?;
    let task = SyntheticImageTask::new(task_seed, task_classes, image)?;
    let report = pretrain_victim(&mut victim, &task, &config)?;

    ensure_dir(&out_dir)?;
    let mut ck = victim.to_checkpoint();
    ck.set_meta("config", cfg.echo());
    let path = out_dir.join(VICTIM_FILE);
    save_checkpoint(&ck, &path)?;
    let summary = json!({
        "arch": arch.name(),
        "image": image.to_json(),
        "num_labels": num_labels,
        "param_count": victim.param_count(),
        "heldout_accuracy": report.heldout_accuracy,
        "final_train_loss": if report.final_train_loss.is_finite() { json!(report.final_train_loss) } else { Value::Null },
        "steps": report.steps,
        "victim_sha256": victim.checksum(),
        "checkpoint": path.display().to_string(),
        "config": cfg.echo(),
    });
    write_json(&out_dir.join(PRETRAIN_REPORT), &summary)?;
    print_json(&summary);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tokenizer {
    Chars,
    Words,
}

impl Tokenizer {
    fn name(self) -> &'static str {
        match self {
            Tokenizer::Chars => "chars",
            Tokenizer::Words => "words",
        }
    }

    fn parse(name: &str) -> Result<Self> {
        match name {
            "chars" => Ok(Tokenizer::Chars),
            "words" => Ok(Tokenizer::Words),
            _ => Err(CliError::Runtime(format!("unknown tokenizer {name:?} in checkpoint"))),
        }
    }

    fn encode(self, vocab: &Vocab, text: &str) -> Vec<usize> {
        match self {
            Tokenizer::Chars => vocab.encode_chars(text),
            Tokenizer::Words => vocab.encode_words(text),
        }
    }
}

fn load_dataset(cfg: &Config) -> Result<(DatasetSplit, Tokenizer)> {
    let format = cfg.require("dataset_format")?;
    let train_path = cfg.require_path("train_path")?;
    match format {
        "splice" => {
            let options = SpliceOptions {
                train_size: cfg.get_or("splice_train_size", SPLICE_TRAIN)?,
                test_size: cfg.get_or("splice_test_size", SPLICE_TEST)?,
                seed: cfg.get_or("split_seed", SpliceOptions::default().seed)?,
            };
            Ok((load_splice(&train_path, &options)?, Tokenizer::Chars))
        }
        "dna_tsv" => {
            let test_path = cfg.require_path("test_path")?;
            Ok((load_dna_tsv_pair(&train_path, &test_path)?, Tokenizer::Chars))
        }
        "text_csv" => {
            let options = TextOptions {
                max_size: cfg.get_or("max_vocab", DEFAULT_MAX_VOCAB)?,
                test_fraction: cfg.get_or("test_fraction", TextOptions::default().test_fraction)?,
                seed: cfg.get_or("split_seed", 0)?,
            };
            let test_path = cfg.path("test_path");
            Ok((load_text_csv(&train_path, test_path.as_deref(), &options)?, Tokenizer::Words))
        }
        other => Err(cfg.invalid("dataset_format", format!("{other:?} is not one of splice, dna_tsv, text_csv"))),
    }
}

fn load_victim(cfg: &Config) -> Result<VictimModel> {
    let path = cfg.require_path("victim")?;
    let ck = Checkpoint::load(&path)?;
    let mut victim = VictimModel::from_checkpoint(&ck)?;
    victim.freeze();
    Ok(victim)
}

fn parse_aggregation(cfg: &Config) -> Result<Aggregation> {
    match cfg.str("aggregation") {
        None | Some("max") => Ok(Aggregation::Max),
        Some("mean") => Ok(Aggregation::Mean),
        Some(other) => Err(cfg.invalid("aggregation", format!("{other:?} is not max or mean"))),
    }
}

fn train_config(cfg: &Config) -> Result<TrainConfig> {
    let bounded: bool = cfg.get_or("bounded", false)?;
    let epsilon: Option<f64> = cfg.parse_opt("epsilon")?;
    let epsilon = match (bounded, epsilon) {
        (true, None) => return Err(cfg.invalid("epsilon", "required when bounded = true")),
        (false, Some(_)) => return Err(cfg.invalid("epsilon", "only allowed when bounded = true")),
        (_, eps) => eps,
    };
    if !bounded && cfg.has("base_image") {
        return Err(cfg.invalid("base_image", "only allowed when bounded = true"));
    }
    let base = match epsilon {
        Some(eps) => TrainConfig::bounded(eps),
        None => TrainConfig::default(),
    };
    let remap_mode: RemapMode = cfg.get_or("remap_mode", RemapMode::Max)?;
    let config = TrainConfig {
        batch_size: cfg.get_or("batch_size", base.batch_size)?,
        lr: cfg.parse_opt("lr")?,
        lambda: cfg.get_or("lambda", base.lambda)?,
        max_steps: cfg.get_or("max_steps", base.max_steps)?,
        m: cfg.get_or("m", base.m)?,
        eval_every: cfg.get_or("eval_every", base.eval_every)?,
        seed: cfg.get_or("seed", base.seed)?,
        remap_mode,
        epsilon,
        q: cfg.parse_opt("q")?,
        accessible: cfg.list("accessible")?,
        use_bias: cfg.get_or("use_bias", base.use_bias)?,
        aggregation: parse_aggregation(cfg)?,
        patience: cfg.parse_opt("patience")?,
        checkpoint_every: cfg.parse_opt("checkpoint_every")?,
        train_eval_limit: cfg.parse_opt("train_eval_limit")?,
    };
    if remap_mode == RemapMode::Linear && config.q.is_none() && config.accessible.is_none() {
        return Err(cfg.invalid("q", "required when remap_mode = linear"));
    }
    if remap_mode == RemapMode::Max && (config.q.is_some() || config.accessible.is_some()) {
        return Err(cfg.invalid("q", "q and accessible only apply when remap_mode = linear"));
    }
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

/// Everything a reprogramming or eval run derives from its config.
struct Setup {
    victim: VictimModel,
    victim_sha: String,
    split: DatasetSplit,
    tokenizer: Tokenizer,
    config: TrainConfig,
}

fn setup(cfg: &Config) -> Result<Setup> {
    cfg.check_keys(&allowed(&[DATA_KEYS, TRAIN_KEYS]))?;
    let config = train_config(cfg)?;
    let victim = load_victim(cfg)?;
    let (split, tokenizer) = load_dataset(cfg)?;
    let victim_sha = victim.checksum();
    Ok(Setup { victim, victim_sha, split, tokenizer, config })
}

fn build_program(cfg: &Config, s: &Setup) -> Result<Program> {
    let spec = s.victim.image_spec();
    let patch = match cfg.parse_opt::<usize>("patch")? {
        Some(p) => p,
        None => {
            let longest = longest_sequence(&s.split.train)?.max(longest_sequence(&s.split.test)?);
            select_patch_size(spec.h, spec.w, s.victim.patch_unit(), longest)?
        }
    };
    let inner = AdversarialProgram::new(s.split.vocab.len(), spec, patch, PAD, s.config.seed)
        .map_err(|e| cfg.invalid("patch", e))?;
    Ok(match s.config.epsilon {
        None => Program::Plain(inner),
        Some(eps) => {
            let base = match cfg.path("base_image") {
                Some(path) => load_base_image(&path, spec)?,
                None => Tensor::zeros(spec.shape().to_vec()).map_err(xmar_core::XmarError::from)?,
            };
            Program::Bounded(BoundedProgram::new(inner, base, eps)?)
        }
    })
}

fn annotate(ck: &mut Checkpoint, cfg: &Config, s: &Setup) {
    ck.set_meta("vocab", s.split.vocab.to_json());
    ck.set_meta("tokenizer", s.tokenizer.name());
    ck.set_meta("victim_sha256", s.victim_sha.clone());
    ck.set_meta("train_config", s.config.to_json());
    ck.set_meta("config", cfg.echo());
}

fn sample_png(program: &Program, tokens: &[usize]) -> Result<Vec<u8>> {
    let image = program.render(tokens)?;
    Ok(match program {
        Program::Plain(_) => export_png(&image)?,
        Program::Bounded(b) => export_png_within(&image, b.base(), b.epsilon())?,
    })
}

pub fn reprogram(cfg: &Config, resume: Option<&Path>) -> Result<()> {
    let s = setup(cfg)?;
    let out_dir = cfg.require_path("out_dir")?;
    let samples: usize = cfg.get_or("samples", DEFAULT_SAMPLES)?;
    let num_targets = s.split.train.num_labels();

    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let saved = ck.meta_str("victim_sha256")?;
            if saved != s.victim_sha {
                return Err(CliError::Runtime(format!(
                    "checkpoint was trained against victim {saved}, config names victim {}",
                    s.victim_sha
                )));
            }
            let vocab = Vocab::from_json(ck.meta_value("vocab")?)?;
            if vocab != s.split.vocab {
                return Err(CliError::Runtime("checkpoint vocabulary differs from the dataset vocabulary".into()));
            }
            TrainState::from_checkpoint(&ck)?
        }
        None => TrainState::new(build_program(cfg, &s)?, &s.victim, num_targets, &s.config)?,
    };

    ensure_dir(&out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    if resume.is_none() {
        File::create(&metrics_path).map_err(|e| io_error(&metrics_path, e))?;
    }
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let started = Instant::now();
    let mut failure = None;
    let outcome = train(&mut state, &s.victim, &s.split.train, &s.split.test, &s.config, &mut |event| {
        let result = match event {
            TrainEvent::Step { .. } => Ok(()),
            TrainEvent::Metrics(m) => append_line(&metrics_path, &m.to_json_line()),
            TrainEvent::Checkpoint(st) => {
                let mut ck = st.to_checkpoint();
                annotate(&mut ck, cfg, &s);
                save_checkpoint(&ck, &checkpoint_path)
            }
        };
        result.map_err(|e| {
            let stop = xmar_core::XmarError::Invalid(e.to_string());
            failure = Some(e);
            stop
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let summary = outcome?;

    if s.victim.checksum() != s.victim_sha {
        return Err(CliError::Runtime("victim weights changed during reprogramming".into()));
    }
    let mut program_ck = state.to_checkpoint();
    annotate(&mut program_ck, cfg, &s);
    save_checkpoint(&program_ck, &out_dir.join(PROGRAM_FILE))?;

    let samples_dir = out_dir.join(SAMPLES_DIR);
    ensure_dir(&samples_dir)?;
    for (i, e) in s.split.test.examples.iter().take(samples).enumerate() {
        write_file(&samples_dir.join(format!("test_{i}.png")), &sample_png(&state.program, &e.tokens)?)?;
    }

    let (train_acc, test_acc) = match &summary.final_metrics {
        Some(m) => (m.train_acc, m.test_acc),
        None => (
            evaluate(&state.program, &s.victim, &state.remap, &s.split.train)?,
            evaluate(&state.program, &s.victim, &state.remap, &s.split.test)?,
        ),
    };
    let report = json!({
        "steps": summary.steps,
        "resumed": resume.is_some(),
        "early_stopped": summary.early_stopped,
        "final_train_acc": train_acc,
        "final_test_acc": test_acc,
        "majority_rate": s.split.test.majority_rate(),
        "remap_mode": state.remap.mode_name(),
        "patch": state.program.inner().patch(),
        "epsilon": state.program.epsilon(),
        "victim_sha256": s.victim_sha,
        "run_seconds": started.elapsed().as_secs_f64(),
        "train_config": s.config.to_json(),
        "config": cfg.echo(),
    });
    write_json(&out_dir.join(SUMMARY_FILE), &report)?;
    print_json(&report);
    Ok(())
}

fn load_trained(path: &Path) -> Result<(Checkpoint, TrainState)> {
    let ck = Checkpoint::load(path)?;
    let state = TrainState::from_checkpoint(&ck)?;
    Ok((ck, state))
}

pub fn eval(cfg: &Config, checkpoint: &Path) -> Result<()> {
    let s = setup(cfg)?;
    let (ck, state) = load_trained(checkpoint)?;
    if let Ok(saved) = ck.meta_str("victim_sha256") {
        if saved != s.victim_sha {
            return Err(CliError::Runtime(format!("checkpoint was trained against victim {saved}, not {}", s.victim_sha)));
        }
    }
    let vocab = Vocab::from_json(ck.meta_value("vocab")?)?;
    if vocab != s.split.vocab {
        return Err(CliError::Runtime("checkpoint vocabulary differs from the dataset vocabulary".into()));
    }
    let report = json!({
        "checkpoint": checkpoint.display().to_string(),
        "step": state.step(),
        "train_acc": evaluate(&state.program, &s.victim, &state.remap, &s.split.train)?,
        "test_acc": evaluate(&state.program, &s.victim, &state.remap, &s.split.test)?,
        "majority_rate": s.split.test.majority_rate(),
        "victim_sha256": s.victim_sha,
        "config": cfg.echo(),
    });
    print_json(&report);
    Ok(())
}

pub fn export_image(checkpoint: &Path, input: &str, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let program = Program::from_checkpoint(&ck)?;
    let vocab = Vocab::from_json(ck.meta_value("vocab")?)?;
    let tokenizer = Tokenizer::parse(ck.meta_str("tokenizer")?)?;
    let tokens = tokenizer.encode(&vocab, input);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_file(out, &sample_png(&program, &tokens)?)?;
    let max = program.inner().max_tokens();
    print_json(&json!({
        "out": out.display().to_string(),
        "tokens": tokens.len(),
        "clipped": tokens.len() > max,
        "max_tokens": max,
    }));
    Ok(())
}

pub fn baseline(cfg: &Config) -> Result<()> {
    cfg.check_keys(&allowed(&[DATA_KEYS, BASELINE_KEYS]))?;
    let holdout: f64 = cfg.get_or("holdout", DEFAULT_HOLDOUT)?;
    if !(holdout > 0.0 && holdout <= 0.5) {
        return Err(cfg.invalid("holdout", "must be in (0, 0.5]"));
    }
    let seed: u64 = cfg.get_or("seed", 0)?;
    let (split, _) = load_dataset(cfg)?;
    let mut report = run_baselines(&split, holdout, seed)?.to_json();
    report["config"] = cfg.echo();
    if let Some(dir) = cfg.path("out_dir") {
        ensure_dir(&dir)?;
        append_line(&dir.join(METRICS_FILE), &report.to_string())?;
    }
    print_json(&report);
    Ok(())
}

pub fn timing(cfg: &Config) -> Result<()> {
    cfg.check_keys(TIMING_KEYS)?;
    let d = TimingConfig::default();
    let config = TimingConfig {
        sizes: cfg.list("sizes")?.unwrap_or(d.sizes),
        patch: cfg.get_or("patch", d.patch)?,
        channels: cfg.get_or("channels", d.channels)?,
        vocab_size: cfg.get_or("vocab_size", d.vocab_size)?,
        samples: cfg.get_or("samples", d.samples)?,
        inner: cfg.get_or("inner", d.inner)?,
        seed: cfg.get_or("seed", d.seed)?,
    };
    let report = bench_timing(&config).map_err(|e| CliError::Config(e.to_string()))?;
    let worst = report.ratios.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let mut out = report.to_json();
    out["max_ratio"] = json!(worst);
    out["ratio_bound"] = json!(TIMING_RATIO_BOUND);
    out["within_bound"] = json!(worst <= TIMING_RATIO_BOUND);
    out["config"] = cfg.echo();
    if let Some(dir) = cfg.path("out_dir") {
        ensure_dir(&dir)?;
        write_json(&dir.join("timing.json"), &out)?;
    }
    print_json(&out);
    Ok(())
}
