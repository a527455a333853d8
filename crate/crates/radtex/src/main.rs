use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use radtex::bench::{self, ExperimentSpec, NTrain, RunOptions, Split};
use radtex::config::{read_json, resolve};
use radtex::core::decode::generate_report;
use radtex::core::gradcheck;
use radtex::core::model::{BackboneConfig, Model, TextualHeadConfig};
use radtex::core::synthdata::{Example, GrayImage, SynthConfig};
use radtex::core::textpipe::{train_vocab, DEFAULT_MAX_CAPTION_LEN, DEFAULT_VOCAB_SIZE};
use radtex::core::train::{
    epoch_means, evaluate, predict, stratified_subset, transfer, transfer_model, LossRecord, Mode, RunSpec, Task,
};
use radtex::{io, thread_count, Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "radtex", version, about = "Captioning pretraining and label-efficient transfer for radiographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long, alias = "spec")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (falls back to RADTEX_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
}

/// Flags mirroring RunSpec fields.
#[derive(Args, Clone, Default)]
struct RunFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
}

impl RunFlags {
    fn overrides(&self, prefix: &str) -> Vec<(String, Value)> {
        let key = |k: &str| format!("{prefix}.{k}");
        let mut v = Vec::new();
        if let Some(x) = self.epochs {
            v.push((key("epochs"), json!(x)));
        }
        if let Some(x) = self.batch_size {
            v.push((key("batch_size"), json!(x)));
        }
        if let Some(x) = self.max_lr {
            v.push((key("max_lr"), json!(x)));
        }
        if let Some(x) = self.warmup_fraction {
            v.push((key("warmup_fraction"), json!(x)));
        }
        if let Some(x) = self.momentum {
            v.push((key("momentum"), json!(x)));
        }
        if let Some(x) = self.weight_decay {
            v.push((key("weight_decay"), json!(x)));
        }
        v
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        canvas: Option<usize>,
    },
    /// Train a wordpiece vocabulary on a dataset's findings.
    TrainVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Captioning pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Existing vocabulary; trained on the data when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Downstream classification from a checkpoint or from scratch.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out dataset to evaluate on.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// frozen | unfrozen | scratch
        #[arg(long)]
        mode: Option<String>,
        /// pathology9 | edema-severity | finding-<name>
        #[arg(long)]
        task: Option<String>,
        /// Count or "all".
        #[arg(long)]
        n_train: Option<String>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Generate reports for a dataset with beam search.
    Caption {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        beams: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run a label-efficiency experiment grid.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Finite-difference check of every differentiable op.
    GradCheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    n: usize,
    seed: u64,
    synth: SynthConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabConfig {
    data: Option<PathBuf>,
    size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainConfig {
    data: Option<PathBuf>,
    vocab: Option<PathBuf>,
    vocab_size: usize,
    max_caption_len: usize,
    backbone: BackboneConfig,
    textual: TextualHeadConfig,
    run: RunSpec,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransferConfig {
    data: Option<PathBuf>,
    test: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    task: Task,
    n_train: NTrain,
    backbone: BackboneConfig,
    run: RunSpec,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionConfig {
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    vocab: Option<PathBuf>,
    beams: usize,
    max_len: Option<usize>,
    limit: Option<usize>,
}

fn file_config(common: &Common) -> Result<Option<Value>> {
    common.config.as_deref().map(read_json).transpose()
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::config(format!("{what} path missing (flag or config)")))
}

fn push<T: Serialize>(v: &mut Vec<(String, Value)>, key: &str, x: Option<T>) {
    if let Some(x) = x {
        v.push((key.to_string(), json!(x)));
    }
}

/// Creates the output directory and records the resolved configuration.
fn begin<T: Serialize>(out: &Path, resolved: &T) -> Result<()> {
    io::create_dir(out)?;
    io::write_json(&out.join("config.resolved.json"), resolved)
}

fn log_epochs(label: &str) -> impl FnMut(&LossRecord) + '_ {
    let mut epoch = usize::MAX;
    let mut sum = 0.0;
    let mut count = 0usize;
    move |r: &LossRecord| {
        if r.epoch != epoch {
            if count > 0 {
                eprintln!("{label} epoch {epoch}: mean loss {:.4}", sum / count as f64);
            }
            epoch = r.epoch;
            sum = 0.0;
            count = 0;
        }
        sum += r.loss;
        count += 1;
    }
}

fn gen_data(common: Common, n: Option<usize>, canvas: Option<usize>) -> Result<()> {
    let defaults = GenDataConfig { n: 1000, seed: 0, synth: SynthConfig::default() };
    let mut o = Vec::new();
    push(&mut o, "n", n);
    push(&mut o, "seed", common.seed);
    push(&mut o, "synth.canvas", canvas);
    let cfg: GenDataConfig = resolve(&defaults, file_config(&common)?, o)?;
    cfg.synth.validate()?;
    if cfg.n == 0 {
        return Err(Error::config("n must be at least 1"));
    }
    begin(&common.out, &cfg)?;
    let indices: Vec<usize> = (0..cfg.n).collect();
    let examples = bench::par_map(&indices, thread_count(common.threads), |&i| {
        radtex::core::synthdata::generate(&cfg.synth, cfg.seed, i)
    })
    .into_iter()
    .collect::<radtex::core::Result<Vec<Example>>>()?;
    io::write_dataset(&common.out, &examples)?;
    eprintln!("wrote {} examples to {}", examples.len(), common.out.display());
    Ok(())
}

fn train_vocab_cmd(common: Common, data: Option<PathBuf>, size: Option<usize>) -> Result<()> {
    let defaults = VocabConfig { data: None, size: DEFAULT_VOCAB_SIZE };
    let mut o = Vec::new();
    push(&mut o, "data", data);
    push(&mut o, "size", size);
    let cfg: VocabConfig = resolve(&defaults, file_config(&common)?, o)?;
    let data = required(cfg.data.clone(), "data")?;
    begin(&common.out, &cfg)?;
    let examples = io::read_dataset(&data)?;
    let texts = examples.iter().map(Example::findings).collect::<radtex::core::Result<Vec<_>>>()?;
    let vocab = train_vocab(texts.iter().map(String::as_str), cfg.size)?;
    io::write_vocab(&common.out.join("vocab.txt"), &vocab)?;
    eprintln!("vocabulary of {} pieces", vocab.len());
    Ok(())
}

fn pretrain_cmd(common: Common, data: Option<PathBuf>, vocab: Option<PathBuf>, run: RunFlags) -> Result<()> {
    let defaults = PretrainConfig {
        data: None,
        vocab: None,
        vocab_size: DEFAULT_VOCAB_SIZE,
        max_caption_len: DEFAULT_MAX_CAPTION_LEN,
        backbone: BackboneConfig::default(),
        textual: TextualHeadConfig::default(),
        run: RunSpec::for_mode(Mode::Pretrain),
    };
    let mut o = run.overrides("run");
    push(&mut o, "data", data);
    push(&mut o, "vocab", vocab);
    push(&mut o, "run.seed", common.seed);
    let cfg: PretrainConfig = resolve(&defaults, file_config(&common)?, o)?;
    if cfg.run.mode != Mode::Pretrain {
        return Err(Error::config("pretrain needs run.mode = pretrain"));
    }
    cfg.run.validate()?;
    let data = required(cfg.data.clone(), "data")?;
    begin(&common.out, &cfg)?;
    let examples = io::read_dataset(&data)?;
    let vocab = cfg.vocab.as_deref().map(io::read_vocab).transpose()?;
    let (model, vocab, log) = bench::pretrain_captioner(
        &examples,
        vocab,
        cfg.vocab_size,
        cfg.max_caption_len,
        &cfg.backbone,
        &cfg.textual,
        &cfg.run,
        &mut log_epochs("pretrain"),
    )?;
    io::write_checkpoint(&common.out.join("model.ckpt"), &model)?;
    io::write_vocab(&common.out.join("vocab.txt"), &vocab)?;
    io::write_loss_csv(&common.out.join("loss.csv"), &log)?;
    if let Some(last) = epoch_means(&log).last() {
        eprintln!("final epoch mean loss {last:.4}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn transfer_cmd(
    common: Common,
    data: Option<PathBuf>,
    test: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    mode: Option<String>,
    task: Option<String>,
    n_train: Option<String>,
    run: RunFlags,
) -> Result<()> {
    let file = file_config(&common)?;
    // The mode picks the defaults that the file and flags then override.
    let mode = match mode.or_else(|| file.as_ref()?.pointer("/run/mode")?.as_str().map(String::from)) {
        None => Mode::TransferFrozen,
        Some(m) => match m.as_str() {
            "frozen" | "transfer-frozen" => Mode::TransferFrozen,
            "unfrozen" | "transfer-unfrozen" => Mode::TransferUnfrozen,
            "scratch" => Mode::Scratch,
            other => return Err(Error::config(format!("unknown downstream mode {other:?}"))),
        },
    };
    let defaults = TransferConfig {
        data: None,
        test: None,
        checkpoint: None,
        task: Task::Pathology,
        n_train: NTrain::All,
        backbone: BackboneConfig::default(),
        run: RunSpec::for_mode(mode),
    };
    let mut o = run.overrides("run");
    o.push(("run.mode".into(), json!(mode)));
    push(&mut o, "data", data);
    push(&mut o, "test", test);
    push(&mut o, "checkpoint", checkpoint);
    push(&mut o, "task", task);
    push(&mut o, "run.seed", common.seed);
    if let Some(n) = n_train {
        o.push(("n_train".into(), json!(n.parse::<NTrain>()?)));
    }
    let mut cfg: TransferConfig = resolve(&defaults, file, o)?;
    cfg.run.loss = cfg.task.loss();
    cfg.run.validate()?;
    let data = required(cfg.data.clone(), "data")?;
    let ckpt = cfg.checkpoint.as_deref().map(io::read_checkpoint_bytes).transpose()?;
    if let Some(bytes) = &ckpt {
        cfg.backbone = Model::from_bytes(bytes)?.config().backbone.clone();
    }
    begin(&common.out, &cfg)?;

    let examples = io::read_dataset(&data)?;
    let train = Split::new(&cfg.task, &examples)?;
    let n = cfg.n_train.resolve(train.len());
    if n == 0 || n > train.len() {
        return Err(Error::config(format!("n_train={} but the dataset has {} examples", cfg.n_train, train.len())));
    }
    let idx: Vec<usize> = if n == train.len() {
        (0..n).collect()
    } else {
        stratified_subset(&train.targets, n, &mut ChaCha8Rng::seed_from_u64(cfg.run.seed))?
    };
    let images: Vec<&GrayImage> = idx.iter().map(|&i| train.images[i]).collect();
    let mut model = transfer_model(cfg.run.mode, &cfg.backbone, &cfg.task, ckpt.as_deref(), cfg.run.seed)?;
    let log = transfer(&mut model, &cfg.run, &images, &train.targets.select(&idx), &mut log_epochs("transfer"))?;
    io::write_checkpoint(&common.out.join("model.ckpt"), &model)?;
    io::write_loss_csv(&common.out.join("loss.csv"), &log)?;
    if let Some(test) = &cfg.test {
        let test_examples = io::read_dataset(test)?;
        let split = Split::new(&cfg.task, &test_examples)?;
        let eval = evaluate(&predict(&model, &split.images)?, &split.targets)?;
        let metrics = json!({
            "task": cfg.task,
            "mode": cfg.run.mode.name(),
            "n_train": n,
            "auc": eval.auc,
            "aucpr": eval.aucpr,
            "macro_f1": eval.macro_f1,
            "per_class_auc": cfg.task.classes().into_iter().zip(eval.per_class_auc).collect::<std::collections::BTreeMap<_, _>>(),
        });
        io::write_json(&common.out.join("metrics.json"), &metrics)?;
        eprintln!("test auc {:.4} aucpr {:.4}", eval.auc, eval.aucpr);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn caption_cmd(
    common: Common,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    vocab: Option<PathBuf>,
    beams: Option<usize>,
    max_len: Option<usize>,
    limit: Option<usize>,
) -> Result<()> {
    let defaults = CaptionConfig { data: None, checkpoint: None, vocab: None, beams: 2, max_len: None, limit: None };
    let mut o = Vec::new();
    push(&mut o, "data", data);
    push(&mut o, "checkpoint", checkpoint);
    push(&mut o, "vocab", vocab);
    push(&mut o, "beams", beams);
    push(&mut o, "max_len", max_len);
    push(&mut o, "limit", limit);
    let cfg: CaptionConfig = resolve(&defaults, file_config(&common)?, o)?;
    let model = io::read_checkpoint(&required(cfg.checkpoint.clone(), "checkpoint")?)?;
    let vocab = io::read_vocab(&required(cfg.vocab.clone(), "vocab")?)?;
    let data = required(cfg.data.clone(), "data")?;
    let cap = model.textual()?.config().max_positions;
    let max_len = cfg.max_len.unwrap_or(cap);
    begin(&common.out, &cfg)?;
    let mut examples = io::read_dataset(&data)?;
    examples.truncate(cfg.limit.unwrap_or(usize::MAX));
    let lines = bench::par_map(&examples, thread_count(common.threads), |e| -> Result<String> {
        let generated = generate_report(&model, &e.image, &vocab, cfg.beams, max_len)?;
        Ok(serde_json::to_string(&json!({"id": e.id, "generated": generated, "reference": e.findings()?}))?)
    });
    let path = common.out.join("captions.jsonl");
    let mut text = String::new();
    for line in lines {
        text.push_str(&line?);
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|source| Error::Io { path, source })?;
    Ok(())
}

fn bench_cmd(common: Common, trials: Option<usize>) -> Result<()> {
    let mut o = Vec::new();
    push(&mut o, "trials", trials);
    push(&mut o, "seed", common.seed);
    let spec: ExperimentSpec = resolve(&ExperimentSpec::default(), file_config(&common)?, o)?;
    spec.validate()?;
    begin(&common.out, &spec)?;
    let options = RunOptions { threads: thread_count(common.threads), cache: Some(common.out.join("checkpoints")) };
    let result = bench::run_experiment(&spec, &options, &|line| eprintln!("{line}"))?;
    for path in bench::write_outputs(&common.out, &spec, &result)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn grad_check(out: Option<PathBuf>, instances: usize, seed: u64) -> Result<()> {
    let reports = gradcheck::run_suite(instances, seed)?;
    let mut stdout = std::io::stdout().lock();
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(gradcheck::TOLERANCE);
        let _ = writeln!(stdout, "{:<24} {:>4} instances  max rel err {:.3e}  {}", r.op, r.instances, r.max_rel_error, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(r.op);
        }
    }
    if let Some(dir) = out {
        io::create_dir(&dir)?;
        let mut w = csv::Writer::from_path(dir.join("gradcheck.csv"))?;
        w.write_record(["op", "instances", "max_rel_error", "passed"])?;
        for r in &reports {
            w.serialize((r.op, r.instances, r.max_rel_error, r.passed(gradcheck::TOLERANCE)))?;
        }
        w.flush().map_err(|source| Error::Io { path: dir, source })?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(radtex::core::Error::Contract(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, n, canvas } => gen_data(common, n, canvas),
        Command::TrainVocab { common, data, size } => train_vocab_cmd(common, data, size),
        Command::Pretrain { common, data, vocab, run } => pretrain_cmd(common, data, vocab, run),
        Command::Transfer { common, data, test, checkpoint, mode, task, n_train, run } => {
            transfer_cmd(common, data, test, checkpoint, mode, task, n_train, run)
        }
        Command::Caption { common, data, checkpoint, vocab, beams, max_len, limit } => {
            caption_cmd(common, data, checkpoint, vocab, beams, max_len, limit)
        }
        Command::Bench { common, trials } => bench_cmd(common, trials),
        Command::GradCheck { out, instances, seed } => grad_check(out, instances, seed),
    }
}

fn error_line(kind: &str, message: &str) -> String {
    json!({"error": kind, "message": message}).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
