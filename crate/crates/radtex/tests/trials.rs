use radtex::bench::{
    aggregate, run_experiment, run_trial, run_trials, write_records, DataSpec, ExperimentSpec, NTrain, RunOptions,
    Split, TrialSetup,
};
use radtex::core::model::{BackboneConfig, TextualHeadConfig};
use radtex::core::synthdata::{generate_corpus, SynthConfig};
use radtex::core::train::{Mode, RunSpec, Task};

fn backbone() -> BackboneConfig {
    BackboneConfig { stem_width: 4, widths: vec![4, 8], blocks: vec![1, 1], ..Default::default() }
}

fn small_spec() -> ExperimentSpec {
    ExperimentSpec {
        tasks: vec![Task::Pathology, Task::Severity],
        modes: vec![Mode::TransferFrozen, Mode::Scratch],
        n_train: vec![NTrain::Count(12), NTrain::All],
        pretrain_fractions: vec![0.5, 1.0],
        trials: 2,
        seed: 3,
        data: DataSpec {
            synth: SynthConfig { canvas: 32, ..Default::default() },
            pretrain_pairs: 12,
            train_pool: 24,
            test: 40,
            vocab_size: 80,
            max_caption_len: 64,
        },
        backbone: backbone(),
        textual: TextualHeadConfig { width: 16, layers: 1, heads: 2, ffn_width: 32, ..Default::default() },
        pretrain: RunSpec { epochs: 1, batch_size: 8, ..RunSpec::for_mode(Mode::Pretrain) },
        frozen: RunSpec { epochs: 2, ..RunSpec::for_mode(Mode::TransferFrozen) },
        unfrozen: RunSpec::for_mode(Mode::TransferUnfrozen),
        scratch: RunSpec { epochs: 1, ..RunSpec::for_mode(Mode::Scratch) },
    }
}

#[test]
fn trials_use_consecutive_seeds_and_forced_seeds_agree() {
    let cfg = SynthConfig { canvas: 32, ..Default::default() };
    let pool = generate_corpus(&cfg, 30, 1).unwrap();
    let test = generate_corpus(&cfg, 30, 2).unwrap();
    let task = Task::Pathology;
    let (train, test) = (Split::new(&task, &pool).unwrap(), Split::new(&task, &test).unwrap());
    let setup = TrialSetup {
        task,
        run: RunSpec { epochs: 1, seed: 5, ..RunSpec::for_mode(Mode::Scratch) },
        backbone: backbone(),
        checkpoint: None,
        n_train: NTrain::Count(10),
        pretrain_fraction: 1.0,
    };
    let records = run_trials(&setup, &train, &test, 3, 2).unwrap();
    assert_eq!(records.iter().map(|r| (r.trial, r.seed)).collect::<Vec<_>>(), vec![(0, 5), (1, 6), (2, 7)]);
    assert!(records.iter().all(|r| r.task == task && r.mode == Mode::Scratch && r.n_train == NTrain::Count(10)));
    assert_ne!(records[0].auc, records[1].auc);

    // seed 5 + trial 1 and seed 6 + trial 0 are the same run
    let shifted = TrialSetup { run: RunSpec { seed: 4, ..setup.run.clone() }, ..setup.clone() };
    let a = run_trial(&shifted, &train, &test, 2).unwrap();
    assert_eq!((a.auc, a.aucpr, &a.per_class_auc), (records[1].auc, records[1].aucpr, &records[1].per_class_auc));
    let serial = run_trials(&setup, &train, &test, 3, 1).unwrap();
    assert_eq!(serial, records);
}

#[test]
fn experiment_grid_counts_orders_and_averages() {
    let spec = small_spec();
    let result = run_experiment(&spec, &RunOptions { threads: 2, cache: None }, &|_| {}).unwrap();
    let rows = spec.tasks.len() * spec.modes.len() * spec.n_train.len() * spec.pretrain_fractions.len() * spec.trials;
    assert_eq!(result.records.len(), rows);
    assert_eq!(result.pretrained.len(), 2);
    assert_eq!(result.pretrained[0].pairs, 6);

    for r in &result.records {
        assert!((0.0..=1.0).contains(&r.auc) && (0.0..=1.0).contains(&r.aucpr));
        assert_eq!(r.macro_f1.is_some(), r.task == Task::Severity);
        let mean = r.per_class_auc.iter().sum::<f64>() / r.per_class_auc.len() as f64;
        assert!((mean - r.auc).abs() < 1e-12);
        assert_eq!(r.per_class_auc.len(), r.task.classes().len());
    }
    // scratch ignores the fraction: identical rows under each fraction
    let scratch: Vec<_> = result.records.iter().filter(|r| r.mode == Mode::Scratch && r.task == Task::Pathology).collect();
    assert_eq!(scratch.len(), 8);
    for (a, b) in scratch[..4].iter().zip(&scratch[4..]) {
        assert_eq!((a.pretrain_fraction, b.pretrain_fraction), (0.5, 1.0));
        assert_eq!((a.auc, a.n_train, a.trial), (b.auc, b.n_train, b.trial));
    }
    // frozen trials differ by checkpoint
    let frozen = |f: f64| {
        result.records.iter().find(|r| r.mode == Mode::TransferFrozen && r.pretrain_fraction == f).unwrap().auc
    };
    assert_ne!(frozen(0.5), frozen(1.0));

    let agg = aggregate(&result.records);
    assert_eq!(agg.len(), rows / spec.trials);
    assert!(agg.iter().all(|a| a.trials == 2 && a.auc_ci95.is_some()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_records(&path, &result.records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), rows + 1);
    let severity_row = text.lines().find(|l| l.starts_with("edema-severity")).unwrap();
    let pathology_row = text.lines().find(|l| l.starts_with("pathology9,frozen,0.5,12,0,")).unwrap();
    assert!(!severity_row.ends_with(','));
    assert!(pathology_row.ends_with(','));

    let again = run_experiment(&spec, &RunOptions { threads: 1, cache: None }, &|_| {}).unwrap();
    assert_eq!(again.records, result.records);
}
