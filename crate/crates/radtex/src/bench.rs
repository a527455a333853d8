//! Label-efficiency experiments: downstream trials over a grid of modes,
//! training-set sizes and pretraining fractions, aggregated into
//! Student-t confidence intervals.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use radtex_core::model::{BackboneConfig, Model, ModelConfig, TextualHeadConfig};
use radtex_core::synthdata::{generate_corpus, Example, GrayImage, SynthConfig};
use radtex_core::textpipe::{tokenize, train_vocab, Vocabulary, DEFAULT_MAX_CAPTION_LEN, DEFAULT_VOCAB_SIZE};
use radtex_core::train::{
    evaluate, pretrain, predict, stratified_subset, transfer, transfer_model, LossRecord, Mode, RunSpec, Targets, Task,
};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::io;
use crate::plot;

/// Number of downstream training examples: a count or the whole split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NTrain {
    Count(usize),
    All,
}

impl NTrain {
    pub fn resolve(self, available: usize) -> usize {
        match self {
            Self::Count(n) => n,
            Self::All => available,
        }
    }
}

impl fmt::Display for NTrain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Count(n) => write!(f, "{n}"),
            Self::All => f.write_str("all"),
        }
    }
}

impl FromStr for NTrain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Self::All);
        }
        s.parse().map(Self::Count).map_err(|_| Error::config(format!("n_train {s:?} is neither a count nor \"all\"")))
    }
}

impl Serialize for NTrain {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Count(n) => s.serialize_u64(*n as u64),
            Self::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for NTrain {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(Self::Count(n)),
            Raw::Name(s) if s == "all" => Ok(Self::All),
            Raw::Name(s) => Err(serde::de::Error::custom(format!("n_train {s:?} is neither a count nor \"all\""))),
        }
    }
}

/// Result of one downstream trial.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub task: Task,
    pub mode: Mode,
    pub pretrain_fraction: f64,
    pub n_train: NTrain,
    pub trial: usize,
    pub seed: u64,
    pub auc: f64,
    pub aucpr: f64,
    pub macro_f1: Option<f64>,
    pub per_class_auc: Vec<f64>,
}

/// Sample mean and Student-t half-width at confidence `level`.
pub fn mean_ci(values: &[f64], level: f64) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(radtex_core::Error::Parameter(format!("confidence interval needs n >= 2, got {n}")).into());
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(radtex_core::Error::Parameter(format!("confidence level {level} outside (0, 1)")).into());
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| radtex_core::Error::Parameter(e.to_string()))?
        .inverse_cdf(0.5 + level / 2.0);
    Ok((mean, t * (var / n as f64).sqrt()))
}

/// Images and targets of one split for one task.
pub struct Split<'a> {
    pub images: Vec<&'a GrayImage>,
    pub targets: Targets,
}

impl<'a> Split<'a> {
    pub fn new(task: &Task, examples: &'a [Example]) -> Result<Self> {
        let refs: Vec<&Example> = examples.iter().collect();
        Ok(Self { images: examples.iter().map(|e| &e.image).collect(), targets: task.targets(&refs)? })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Everything fixed across the trials of one grid cell.
#[derive(Debug, Clone)]
pub struct TrialSetup<'a> {
    pub task: Task,
    pub run: RunSpec,
    pub backbone: BackboneConfig,
    pub checkpoint: Option<&'a [u8]>,
    pub n_train: NTrain,
    pub pretrain_fraction: f64,
}

const SUBSET_STREAM: u64 = 20;

/// Trial `trial` runs with seed `run.seed + trial`, which drives the
/// training subset, the head initialization and the training loop.
pub fn run_trial(setup: &TrialSetup<'_>, train: &Split<'_>, test: &Split<'_>, trial: usize) -> Result<MetricRecord> {
    let seed = setup.run.seed.wrapping_add(trial as u64);
    let available = train.len();
    let idx: Vec<usize> = match setup.n_train {
        NTrain::All => (0..available).collect(),
        NTrain::Count(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(SUBSET_STREAM);
            stratified_subset(&train.targets, n, &mut rng)?
        }
    };
    let images: Vec<&GrayImage> = idx.iter().map(|&i| train.images[i]).collect();
    let targets = train.targets.select(&idx);
    let mut model = transfer_model(setup.run.mode, &setup.backbone, &setup.task, setup.checkpoint, seed)?;
    let run = RunSpec { seed, loss: setup.task.loss(), ..setup.run.clone() };
    transfer(&mut model, &run, &images, &targets, &mut |_| {})?;
    let eval = evaluate(&predict(&model, &test.images)?, &test.targets)?;
    Ok(MetricRecord {
        task: setup.task,
        mode: setup.run.mode,
        pretrain_fraction: setup.pretrain_fraction,
        n_train: setup.n_train,
        trial,
        seed,
        auc: eval.auc,
        aucpr: eval.aucpr,
        macro_f1: eval.macro_f1,
        per_class_auc: eval.per_class_auc,
    })
}

/// Trials `0..n_trials` of one cell, in trial order.
pub fn run_trials(
    setup: &TrialSetup<'_>,
    train: &Split<'_>,
    test: &Split<'_>,
    n_trials: usize,
    threads: usize,
) -> Result<Vec<MetricRecord>> {
    let trials: Vec<usize> = (0..n_trials).collect();
    par_map(&trials, threads, |&t| run_trial(setup, train, test, t)).into_iter().collect()
}

/// Maps `f` over `items` on up to `threads` scoped workers, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = threads.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Sizes and generator settings of the synthetic splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub synth: SynthConfig,
    /// Image/report pairs available for pretraining at fraction 1.
    pub pretrain_pairs: usize,
    /// Labeled pool that downstream subsets are drawn from.
    pub train_pool: usize,
    pub test: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            pretrain_pairs: 5000,
            train_pool: 2000,
            test: 1000,
            vocab_size: DEFAULT_VOCAB_SIZE,
            max_caption_len: DEFAULT_MAX_CAPTION_LEN,
        }
    }
}

/// Declarative sweep. The experiment seed overrides the seeds of the
/// individual run specs; trial `t` uses `seed + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub tasks: Vec<Task>,
    pub modes: Vec<Mode>,
    pub n_train: Vec<NTrain>,
    pub pretrain_fractions: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub data: DataSpec,
    pub backbone: BackboneConfig,
    pub textual: TextualHeadConfig,
    pub pretrain: RunSpec,
    pub frozen: RunSpec,
    pub unfrozen: RunSpec,
    pub scratch: RunSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            tasks: vec![Task::Pathology],
            modes: Mode::DOWNSTREAM.to_vec(),
            n_train: vec![NTrain::Count(10), NTrain::Count(100), NTrain::Count(1000), NTrain::All],
            pretrain_fractions: vec![0.01, 0.1, 0.5, 1.0],
            trials: 5,
            seed: 0,
            data: DataSpec::default(),
            backbone: BackboneConfig::default(),
            textual: TextualHeadConfig::default(),
            pretrain: RunSpec::for_mode(Mode::Pretrain),
            frozen: RunSpec::for_mode(Mode::TransferFrozen),
            unfrozen: RunSpec::for_mode(Mode::TransferUnfrozen),
            scratch: RunSpec::for_mode(Mode::Scratch),
        }
    }
}

impl ExperimentSpec {
    pub fn run_spec(&self, mode: Mode) -> &RunSpec {
        match mode {
            Mode::Pretrain => &self.pretrain,
            Mode::TransferFrozen => &self.frozen,
            Mode::TransferUnfrozen => &self.unfrozen,
            Mode::Scratch => &self.scratch,
        }
    }

    /// Pretraining pairs used at `fraction`, at least one.
    pub fn pretrain_count(&self, fraction: f64) -> usize {
        ((fraction * self.data.pretrain_pairs as f64).ceil() as usize).clamp(1, self.data.pretrain_pairs)
    }

    fn needs_pretraining(&self) -> bool {
        self.modes.iter().any(|m| m.needs_checkpoint())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.modes.is_empty() || self.n_train.is_empty() || self.pretrain_fractions.is_empty() {
            return Err(Error::config("experiment grid has an empty axis"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if let Some(f) = self.pretrain_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::config(format!("pretrain fraction {f} outside (0, 1]")));
        }
        if self.modes.contains(&Mode::Pretrain) {
            return Err(Error::config("pretrain is not a downstream mode"));
        }
        let d = &self.data;
        if d.pretrain_pairs == 0 || d.train_pool == 0 || d.test == 0 {
            return Err(Error::config("every data split needs at least one example"));
        }
        d.synth.validate()?;
        for mode in [Mode::Pretrain, Mode::TransferFrozen, Mode::TransferUnfrozen, Mode::Scratch] {
            let run = self.run_spec(mode);
            if run.mode != mode {
                return Err(Error::config(format!("run spec for {} declares mode {:?}", mode.name(), run.mode)));
            }
            run.validate()?;
        }
        for task in &self.tasks {
            for &mode in &self.modes {
                for &fraction in &self.pretrain_fractions {
                    for &n in &self.n_train {
                        if n == NTrain::Count(0) || n.resolve(d.train_pool) > d.train_pool {
                            return Err(Error::config(format!(
                                "cell task={task} mode={} pretrain_fraction={fraction} n_train={n}: \
                                 needs 1..={} examples from the training split",
                                mode.name(),
                                d.train_pool
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Aggregated trials of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub task: Task,
    pub mode: Mode,
    pub pretrain_fraction: f64,
    pub n_train: NTrain,
    pub trials: usize,
    pub auc_mean: f64,
    pub auc_ci95: Option<f64>,
    pub aucpr_mean: f64,
    pub aucpr_ci95: Option<f64>,
    pub macro_f1_mean: Option<f64>,
    pub macro_f1_ci95: Option<f64>,
}

fn summarize(values: &[f64]) -> (f64, Option<f64>) {
    match mean_ci(values, 0.95) {
        Ok((m, h)) => (m, Some(h)),
        Err(_) => (values.iter().sum::<f64>() / values.len() as f64, None),
    }
}

/// Groups records by cell, keeping first-appearance order.
pub fn aggregate(records: &[MetricRecord]) -> Vec<Aggregate> {
    let mut cells: Vec<(&MetricRecord, Vec<&MetricRecord>)> = Vec::new();
    for r in records {
        let same = |c: &MetricRecord| {
            c.task == r.task && c.mode == r.mode && c.pretrain_fraction == r.pretrain_fraction && c.n_train == r.n_train
        };
        match cells.iter_mut().find(|(k, _)| same(k)) {
            Some((_, group)) => group.push(r),
            None => cells.push((r, vec![r])),
        }
    }
    cells
        .into_iter()
        .map(|(k, group)| {
            let (auc_mean, auc_ci95) = summarize(&group.iter().map(|r| r.auc).collect::<Vec<_>>());
            let (aucpr_mean, aucpr_ci95) = summarize(&group.iter().map(|r| r.aucpr).collect::<Vec<_>>());
            let f1: Option<Vec<f64>> = group.iter().map(|r| r.macro_f1).collect();
            let (macro_f1_mean, macro_f1_ci95) = match f1 {
                Some(v) => {
                    let (m, h) = summarize(&v);
                    (Some(m), h)
                }
                None => (None, None),
            };
            Aggregate {
                task: k.task,
                mode: k.mode,
                pretrain_fraction: k.pretrain_fraction,
                n_train: k.n_train,
                trials: group.len(),
                auc_mean,
                auc_ci95,
                aucpr_mean,
                aucpr_ci95,
                macro_f1_mean,
                macro_f1_ci95,
            }
        })
        .collect()
}

/// Corpora of one experiment: pretraining pairs, the labeled pool and the
/// test split come from distinct seeds.
pub struct Corpora {
    pub pretrain: Vec<Example>,
    pub pool: Vec<Example>,
    pub test: Vec<Example>,
}

impl Corpora {
    pub fn generate(spec: &ExperimentSpec) -> Result<Self> {
        let d = &spec.data;
        let pretrain = if spec.needs_pretraining() {
            generate_corpus(&d.synth, d.pretrain_pairs, spec.seed)?
        } else {
            Vec::new()
        };
        Ok(Self {
            pretrain,
            pool: generate_corpus(&d.synth, d.train_pool, spec.seed.wrapping_add(1))?,
            test: generate_corpus(&d.synth, d.test, spec.seed.wrapping_add(2))?,
        })
    }
}

/// Trains a vocabulary on the examples' findings and pretrains a fresh
/// captioning model on them.
pub fn pretrain_captioner(
    examples: &[Example],
    vocab: Option<Vocabulary>,
    vocab_size: usize,
    max_caption_len: usize,
    backbone: &BackboneConfig,
    textual: &TextualHeadConfig,
    run: &RunSpec,
    progress: &mut dyn FnMut(&LossRecord),
) -> Result<(Model, Vocabulary, Vec<LossRecord>)> {
    let texts = examples.iter().map(Example::findings).collect::<radtex_core::Result<Vec<_>>>()?;
    let vocab = match vocab {
        Some(v) => v,
        None => train_vocab(texts.iter().map(String::as_str), vocab_size)?,
    };
    let captions: Vec<Vec<usize>> = texts.iter().map(|t| tokenize(t, &vocab, max_caption_len)).collect();
    let textual = TextualHeadConfig { vocab_size: vocab.len(), max_positions: max_caption_len, ..textual.clone() };
    let mut model = Model::new(ModelConfig::captioning(backbone.clone(), textual), run.seed)?;
    let images: Vec<&GrayImage> = examples.iter().map(|e| &e.image).collect();
    let log = pretrain(&mut model, run, &images, &captions, progress)?;
    Ok((model, vocab, log))
}

/// A pretrained checkpoint with its loss log.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub fraction: f64,
    pub pairs: usize,
    pub checkpoint: Vec<u8>,
    pub log: Vec<LossRecord>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct CacheKey {
    pairs: usize,
    seed: u64,
    data: DataSpec,
    backbone: BackboneConfig,
    textual: TextualHeadConfig,
    pretrain: RunSpec,
}

fn cache_paths(dir: &Path, fraction: f64) -> (PathBuf, PathBuf, PathBuf) {
    let stem = format!("pretrain_{fraction}");
    (dir.join(format!("{stem}.ckpt")), dir.join(format!("{stem}.json")), dir.join(format!("{stem}_loss.csv")))
}

fn pretrain_fraction(
    spec: &ExperimentSpec,
    corpora: &Corpora,
    fraction: f64,
    cache: Option<&Path>,
    log_line: &(dyn Fn(&str) + Sync),
) -> Result<Pretrained> {
    let pairs = spec.pretrain_count(fraction);
    let run = RunSpec { seed: spec.seed, ..spec.pretrain.clone() };
    let key = CacheKey {
        pairs,
        seed: spec.seed,
        data: spec.data.clone(),
        backbone: spec.backbone.clone(),
        textual: spec.textual.clone(),
        pretrain: run.clone(),
    };
    if let Some(dir) = cache {
        let (ckpt, meta, loss) = cache_paths(dir, fraction);
        let cached = std::fs::read(&meta).ok().and_then(|b| serde_json::from_slice::<CacheKey>(&b).ok());
        if cached.as_ref() == Some(&key) {
            if let (Ok(checkpoint), Ok(log)) = (io::read_checkpoint_bytes(&ckpt), io::read_loss_csv(&loss)) {
                log_line(&format!("pretrain fraction {fraction}: reusing {}", ckpt.display()));
                return Ok(Pretrained { fraction, pairs, checkpoint, log });
            }
        }
    }
    let d = &spec.data;
    let mut last_epoch = usize::MAX;
    let (model, _, log) = pretrain_captioner(
        &corpora.pretrain[..pairs],
        None,
        d.vocab_size,
        d.max_caption_len,
        &spec.backbone,
        &spec.textual,
        &run,
        &mut |r| {
            if r.epoch != last_epoch {
                last_epoch = r.epoch;
                log_line(&format!("pretrain fraction {fraction} ({pairs} pairs): epoch {}", r.epoch));
            }
        },
    )?;
    let checkpoint = model.to_bytes();
    if let Some(dir) = cache {
        let (ckpt, meta, loss) = cache_paths(dir, fraction);
        io::create_dir(dir)?;
        std::fs::write(&ckpt, &checkpoint).map_err(|source| Error::Io { path: ckpt, source })?;
        io::write_loss_csv(&loss, &log)?;
        io::write_json(&meta, &key)?;
    }
    Ok(Pretrained { fraction, pairs, checkpoint, log })
}

/// Execution settings that do not affect results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub threads: usize,
    /// Directory holding reusable pretraining checkpoints.
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<MetricRecord>,
    pub aggregates: Vec<Aggregate>,
    pub pretrained: Vec<Pretrained>,
    /// Size of the labeled pool, the x position of `n_train = all`.
    pub pool_size: usize,
}

/// Runs the whole grid. Records are ordered task, mode, fraction, n_train,
/// trial. Scratch cells ignore the pretraining fraction, so their trials run
/// once per `n_train` and the rows repeat under every fraction.
pub fn run_experiment(
    spec: &ExperimentSpec,
    options: &RunOptions,
    log_line: &(dyn Fn(&str) + Sync),
) -> Result<ExperimentResult> {
    spec.validate()?;
    let corpora = Corpora::generate(spec)?;
    let pretrained: Vec<Pretrained> = if spec.needs_pretraining() {
        par_map(&spec.pretrain_fractions, options.threads, |&f| {
            pretrain_fraction(spec, &corpora, f, options.cache.as_deref(), log_line)
        })
        .into_iter()
        .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    struct Job {
        task: usize,
        mode: Mode,
        fraction: usize,
        n_train: NTrain,
        trial: usize,
    }
    let mut jobs = Vec::new();
    for task in 0..spec.tasks.len() {
        for &mode in &spec.modes {
            let fractions = if mode.needs_checkpoint() { spec.pretrain_fractions.len() } else { 1 };
            for fraction in 0..fractions {
                for &n_train in &spec.n_train {
                    for trial in 0..spec.trials {
                        jobs.push(Job { task, mode, fraction, n_train, trial });
                    }
                }
            }
        }
    }

    let splits = spec
        .tasks
        .iter()
        .map(|t| Ok((Split::new(t, &corpora.pool)?, Split::new(t, &corpora.test)?)))
        .collect::<Result<Vec<_>>>()?;
    let done = AtomicUsize::new(0);
    let results = par_map(&jobs, options.threads, |job| {
        let task = spec.tasks[job.task];
        let setup = TrialSetup {
            task,
            run: RunSpec { seed: spec.seed, ..spec.run_spec(job.mode).clone() },
            backbone: spec.backbone.clone(),
            checkpoint: job.mode.needs_checkpoint().then(|| pretrained[job.fraction].checkpoint.as_slice()),
            n_train: job.n_train,
            pretrain_fraction: spec.pretrain_fractions[job.fraction],
        };
        let (train, test) = &splits[job.task];
        let r = run_trial(&setup, train, test, job.trial);
        let k = done.fetch_add(1, Ordering::Relaxed) + 1;
        if let Ok(rec) = &r {
            log_line(&format!(
                "[{k}/{}] {task} {} fraction={} n_train={} trial={}: auc {:.4}",
                jobs.len(),
                job.mode.name(),
                setup.pretrain_fraction,
                job.n_train,
                job.trial,
                rec.auc
            ));
        }
        r
    });
    let computed: Vec<MetricRecord> = results.into_iter().collect::<Result<_>>()?;

    let mut records = Vec::new();
    for r in computed {
        if r.mode.needs_checkpoint() {
            records.push(r);
        } else {
            for &f in &spec.pretrain_fractions {
                records.push(MetricRecord { pretrain_fraction: f, ..r.clone() });
            }
        }
    }
    records.sort_by(|a, b| {
        let pos = |r: &MetricRecord| {
            (
                spec.tasks.iter().position(|t| *t == r.task),
                spec.modes.iter().position(|m| *m == r.mode),
                spec.pretrain_fractions.iter().position(|f| *f == r.pretrain_fraction),
                spec.n_train.iter().position(|n| *n == r.n_train),
                r.trial,
            )
        };
        pos(a).cmp(&pos(b))
    });
    let aggregates = aggregate(&records);
    Ok(ExperimentResult { records, aggregates, pretrained, pool_size: corpora.pool.len() })
}

pub const RECORDS_FILE: &str = "records.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

pub const RECORD_HEADER: [&str; 8] = ["task", "mode", "pretrain_fraction", "n_train", "trial", "auc", "aucpr", "macro_f1"];

pub fn write_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RECORD_HEADER)?;
    for r in records {
        w.serialize((
            r.task.to_string(),
            r.mode.name(),
            r.pretrain_fraction,
            r.n_train.to_string(),
            r.trial,
            r.auc,
            r.aucpr,
            r.macro_f1,
        ))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.into(), source })
}

pub fn write_aggregates(path: &Path, aggregates: &[Aggregate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "task",
        "mode",
        "pretrain_fraction",
        "n_train",
        "trials",
        "auc_mean",
        "auc_ci95",
        "aucpr_mean",
        "aucpr_ci95",
        "macro_f1_mean",
        "macro_f1_ci95",
    ])?;
    for a in aggregates {
        w.serialize((
            a.task.to_string(),
            a.mode.name(),
            a.pretrain_fraction,
            a.n_train.to_string(),
            a.trials,
            a.auc_mean,
            a.auc_ci95,
            a.aucpr_mean,
            a.aucpr_ci95,
            a.macro_f1_mean,
            a.macro_f1_ci95,
        ))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.into(), source })
}

/// Wide per-class AUC table for one task: `auc_<class>` columns.
pub fn write_per_class(path: &Path, task: &Task, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["task", "mode", "pretrain_fraction", "n_train", "trial", "auc"].map(String::from).to_vec();
    header.extend(task.classes().iter().map(|c| format!("auc_{c}")));
    w.write_record(&header)?;
    for r in records.iter().filter(|r| r.task == *task) {
        let mut row = vec![
            r.task.to_string(),
            r.mode.name().to_string(),
            r.pretrain_fraction.to_string(),
            r.n_train.to_string(),
            r.trial.to_string(),
            r.auc.to_string(),
        ];
        row.extend(r.per_class_auc.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| Error::Io { path: path.into(), source })
}

/// Writes the record, aggregate and per-class CSVs, the pretraining loss
/// logs and one SVG per task into `dir`.
pub fn write_outputs(dir: &Path, spec: &ExperimentSpec, result: &ExperimentResult) -> Result<Vec<PathBuf>> {
    io::create_dir(dir)?;
    let mut written = Vec::new();
    let path = dir.join(RECORDS_FILE);
    write_records(&path, &result.records)?;
    written.push(path);
    let path = dir.join(AGGREGATE_FILE);
    write_aggregates(&path, &result.aggregates)?;
    written.push(path);
    for p in &result.pretrained {
        let path = dir.join(format!("pretrain_{}_loss.csv", p.fraction));
        io::write_loss_csv(&path, &p.log)?;
        written.push(path);
    }
    for task in &spec.tasks {
        let path = dir.join(format!("per_class_{task}.csv"));
        write_per_class(&path, task, &result.records)?;
        written.push(path);
        let path = dir.join(format!("{task}.svg"));
        let svg = plot::task_figure(task, spec, &result.aggregates, result.pool_size);
        std::fs::write(&path, svg).map_err(|source| Error::Io { path: path.clone(), source })?;
        written.push(path);
    }
    Ok(written)
}

/// Mean AUC per `(mode, fraction, n_train)` cell of one task.
pub fn auc_table(aggregates: &[Aggregate], task: &Task) -> BTreeMap<(Mode, String, NTrain), (f64, Option<f64>)> {
    aggregates
        .iter()
        .filter(|a| a.task == *task)
        .map(|a| ((a.mode, a.pretrain_fraction.to_string(), a.n_train), (a.auc_mean, a.auc_ci95)))
        .collect()
}
