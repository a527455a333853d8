use super::*;
use crate::model::TextualHeadConfig;
use crate::synthdata::{generate_corpus, Example, SynthConfig};
use crate::textpipe::{tokenize, train_vocab, Vocabulary};

fn backbone() -> BackboneConfig {
    BackboneConfig { stem_width: 4, widths: vec![4, 8], blocks: vec![1, 1], ..Default::default() }
}

fn corpus(n: usize) -> Vec<Example> {
    generate_corpus(&SynthConfig { canvas: 32, ..Default::default() }, n, 5).unwrap()
}

fn captions(examples: &[Example]) -> (Vocabulary, Vec<Vec<usize>>) {
    let texts: Vec<String> = examples.iter().map(|e| e.findings().unwrap()).collect();
    let vocab = train_vocab(texts.iter().map(String::as_str), 60).unwrap();
    let caps = texts.iter().map(|t| tokenize(t, &vocab, 48)).collect();
    (vocab, caps)
}

fn captioner(vocab: &Vocabulary) -> Model {
    let textual = TextualHeadConfig {
        width: 16,
        layers: 1,
        heads: 2,
        ffn_width: 32,
        vocab_size: vocab.len(),
        max_positions: 48,
        ..Default::default()
    };
    Model::new(ModelConfig::captioning(backbone(), textual), 3).unwrap()
}

fn pretrain_spec(epochs: usize) -> RunSpec {
    RunSpec { epochs, batch_size: 8, max_lr: 0.05, seed: 9, ..RunSpec::for_mode(Mode::Pretrain) }
}

fn run_pretrain(examples: &[Example], epochs: usize) -> (Model, Vec<LossRecord>) {
    let (vocab, caps) = captions(examples);
    let mut model = captioner(&vocab);
    let images: Vec<&GrayImage> = examples.iter().map(|e| &e.image).collect();
    let log = pretrain(&mut model, &pretrain_spec(epochs), &images, &caps, &mut |_| {}).unwrap();
    (model, log)
}

#[test]
fn defaults_follow_mode() {
    assert_eq!(RunSpec::for_mode(Mode::Scratch).epochs, 50);
    assert_eq!(RunSpec::for_mode(Mode::TransferFrozen).epochs, 20);
    assert_eq!(RunSpec::for_mode(Mode::TransferUnfrozen).epochs, 20);
    assert_eq!(RunSpec::for_mode(Mode::Scratch).max_lr, 2e-1);
    assert_eq!(RunSpec::for_mode(Mode::TransferFrozen).max_lr, 2e-2);
    assert_eq!(RunSpec::for_mode(Mode::TransferUnfrozen).max_lr, 2e-3);
    for m in Mode::DOWNSTREAM {
        let s = RunSpec::for_mode(m);
        assert_eq!((s.weight_decay, s.lookahead), (0.0, None));
        s.validate().unwrap();
    }
    let p = RunSpec::for_mode(Mode::Pretrain);
    assert!(p.lookahead.is_some() && p.weight_decay > 0.0);
    p.validate().unwrap();
}

#[test]
fn spec_rejects_mismatched_loss() {
    let s = RunSpec { loss: LossKind::BinaryCe, ..RunSpec::for_mode(Mode::Pretrain) };
    assert!(matches!(s.validate(), Err(Error::Config(_))));
    let s = RunSpec { loss: LossKind::Caption, ..RunSpec::for_mode(Mode::Scratch) };
    assert!(s.validate().is_err());
    let json = serde_json::to_string(&RunSpec::for_mode(Mode::TransferUnfrozen)).unwrap();
    assert!(json.contains("\"transfer-unfrozen\""));
    assert_eq!(serde_json::from_str::<RunSpec>(&json).unwrap(), RunSpec::for_mode(Mode::TransferUnfrozen));
}

#[test]
fn pretrain_logs_every_step_and_is_deterministic() {
    let examples = corpus(20);
    let (a, log_a) = run_pretrain(&examples, 2);
    let (b, log_b) = run_pretrain(&examples, 2);
    assert_eq!(log_a.len(), 2 * 3);
    assert_eq!(log_a, log_b);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(log_a.iter().map(|r| r.step).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    assert_eq!(log_a[0].lr, 0.0);
    assert_eq!(epoch_means(&log_a).len(), 2);
}

#[test]
fn pretrain_learns() {
    let examples = corpus(24);
    let (_, log) = run_pretrain(&examples, 6);
    let means = epoch_means(&log);
    assert!(means[5] < means[0], "{means:?}");
}

#[test]
fn pretrain_rejects_empty_and_mismatched_input() {
    let examples = corpus(2);
    let (vocab, caps) = captions(&examples);
    let mut model = captioner(&vocab);
    let err = pretrain(&mut model, &pretrain_spec(1), &[], &[], &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let images = [&examples[0].image];
    assert!(pretrain(&mut model, &pretrain_spec(1), &images, &caps, &mut |_| {}).is_err());
    let wrong = RunSpec::for_mode(Mode::Scratch);
    assert!(pretrain(&mut model, &wrong, &images, &caps[..1], &mut |_| {}).is_err());
}

fn downstream(mode: Mode, ckpt: Option<&[u8]>, examples: &[Example], task: Task, epochs: usize) -> (Model, Vec<LossRecord>) {
    let mut model = transfer_model(mode, &backbone(), &task, ckpt, 4).unwrap();
    let spec = RunSpec { epochs, loss: task.loss(), seed: 2, ..RunSpec::for_mode(mode) };
    let refs: Vec<&Example> = examples.iter().collect();
    let images: Vec<&GrayImage> = refs.iter().map(|e| &e.image).collect();
    let log = transfer(&mut model, &spec, &images, &task.targets(&refs).unwrap(), &mut |_| {}).unwrap();
    (model, log)
}

fn backbone_bytes(model: &Model) -> Vec<(String, Vec<u8>)> {
    model
        .store()
        .iter()
        .filter(|(_, p)| p.name.starts_with("backbone."))
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect()
}

#[test]
fn frozen_transfer_keeps_backbone_bits() {
    let examples = corpus(16);
    let (pre, _) = run_pretrain(&examples, 1);
    let ckpt = pre.to_bytes();
    let (model, _) = downstream(Mode::TransferFrozen, Some(&ckpt), &examples, Task::Pathology, 3);
    assert_eq!(backbone_bytes(&model), backbone_bytes(&pre));
    let (unfrozen, _) = downstream(Mode::TransferUnfrozen, Some(&ckpt), &examples, Task::Pathology, 1);
    assert_ne!(backbone_bytes(&unfrozen), backbone_bytes(&pre));
}

#[test]
fn frozen_cached_features_match_full_forward() {
    let examples = corpus(12);
    let (pre, _) = run_pretrain(&examples, 1);
    let ckpt = pre.to_bytes();
    let (cached, log_a) = downstream(Mode::TransferFrozen, Some(&ckpt), &examples, Task::Severity, 2);
    // a negligible augmentation forces the uncached path
    let mut model = transfer_model(Mode::TransferFrozen, &backbone(), &Task::Severity, Some(&ckpt), 4).unwrap();
    let spec = RunSpec {
        epochs: 2,
        loss: LossKind::MulticlassCe,
        seed: 2,
        augment: AugmentParams { rotation: 1e-9, translation: 0.0 },
        ..RunSpec::for_mode(Mode::TransferFrozen)
    };
    assert_ne!(spec.augment, AugmentParams::NONE);
    let refs: Vec<&Example> = examples.iter().collect();
    let images: Vec<&GrayImage> = refs.iter().map(|e| &e.image).collect();
    let log_b = transfer(&mut model, &spec, &images, &Task::Severity.targets(&refs).unwrap(), &mut |_| {}).unwrap();
    for (a, b) in log_a.iter().zip(&log_b) {
        assert!((a.loss - b.loss).abs() < 1e-5, "{a:?} {b:?}");
    }
    let pa = predict(&cached, &images).unwrap();
    let pb = predict(&model, &images).unwrap();
    for (x, y) in pa.iter().flatten().zip(pb.iter().flatten()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn transfer_mode_contracts() {
    let task = Task::Pathology;
    let err = transfer_model(Mode::TransferFrozen, &backbone(), &task, None, 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(transfer_model(Mode::TransferUnfrozen, &backbone(), &task, None, 0).is_err());
    assert!(transfer_model(Mode::Pretrain, &backbone(), &task, None, 0).is_err());
    let scratch = transfer_model(Mode::Scratch, &backbone(), &task, None, 0).unwrap();
    assert!(transfer_model(Mode::Scratch, &backbone(), &task, Some(&scratch.to_bytes()), 0).is_err());
}

#[test]
fn transfer_rejects_wrong_loss() {
    let examples = corpus(4);
    let refs: Vec<&Example> = examples.iter().collect();
    let images: Vec<&GrayImage> = refs.iter().map(|e| &e.image).collect();
    let mut model = transfer_model(Mode::Scratch, &backbone(), &Task::Pathology, None, 0).unwrap();
    let spec = RunSpec { loss: LossKind::MulticlassCe, ..RunSpec::for_mode(Mode::Scratch) };
    let targets = Task::Pathology.targets(&refs).unwrap();
    assert!(matches!(transfer(&mut model, &spec, &images, &targets, &mut |_| {}), Err(Error::Config(_))));
}

#[test]
fn scratch_memorizes_one_example() {
    let examples = corpus(1);
    let (model, log) = downstream(Mode::Scratch, None, &examples, Task::Finding(0), 50);
    assert_eq!(log.len(), 50);
    let refs: Vec<&Example> = examples.iter().collect();
    let p = predict(&model, &[&examples[0].image]).unwrap()[0][0];
    let target = Task::Finding(0).targets(&refs).unwrap();
    let Targets::MultiLabel(rows) = target else { unreachable!() };
    let loss = -(rows[0][0] * p.ln() + (1.0 - rows[0][0]) * (1.0 - p).ln());
    assert!(log.last().unwrap().loss < 0.01 && loss < 0.05, "train {:?} eval {loss}", log.last());
}

#[test]
fn predict_returns_probabilities() {
    let examples = corpus(3);
    let images: Vec<&GrayImage> = examples.iter().map(|e| &e.image).collect();
    let m = transfer_model(Mode::Scratch, &backbone(), &Task::Severity, None, 1).unwrap();
    for row in predict(&m, &images).unwrap() {
        assert_eq!(row.len(), 4);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let m = transfer_model(Mode::Scratch, &backbone(), &Task::Pathology, None, 1).unwrap();
    for row in predict(&m, &images).unwrap() {
        assert!(row.len() == 9 && row.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
