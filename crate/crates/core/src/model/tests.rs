use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::log_softmax_row;
use crate::textpipe::{EOS, SOS};

fn small_config() -> ModelConfig {
    let backbone = BackboneConfig { stem_width: 4, widths: vec![4, 8], blocks: vec![1, 1], ..Default::default() };
    let textual = TextualHeadConfig {
        width: 16,
        layers: 1,
        heads: 2,
        ffn_width: 32,
        dropout: 0.1,
        vocab_size: 12,
        max_positions: 10,
    };
    ModelConfig::captioning(backbone, textual)
}

fn images(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layers::uniform(&mut rng, &[n, 1, 16, 16], 1.0).map(|v| v.abs())
}

fn logits_of(model: &Model, img: &Tensor, tokens: &[Vec<usize>], direction: Direction) -> Vec<f32> {
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let vis = model.encode_image(&mut tape, x, BnMode::Eval, &mut Vec::new()).unwrap();
    let l = model.decoder_forward(&mut tape, tokens, &vis, direction, None).unwrap();
    tape.value(l).data().to_vec()
}

#[test]
fn encode_shapes() {
    let model = Model::new(small_config(), 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(images(3, 0));
    let vis = model.encode_image(&mut tape, x, BnMode::Eval, &mut Vec::new()).unwrap();
    assert_eq!((vis.batch, vis.len), (3, 4));
    assert_eq!(tape.shape(vis.var), [12, 16]);

    let full = ModelConfig::captioning(BackboneConfig::default(), TextualHeadConfig::default());
    let model = Model::new(full, 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 64, 64]));
    let vis = model.encode_image(&mut tape, x, BnMode::Eval, &mut Vec::new()).unwrap();
    assert_eq!(tape.shape(vis.var), [4, 128]);
}

#[test]
fn encode_rejects_bad_inputs() {
    let model = Model::new(small_config(), 1).unwrap();
    for shape in [[1, 3, 16, 16], [1, 1, 12, 16]] {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&shape));
        let err = model.encode_image(&mut tape, x, BnMode::Eval, &mut Vec::new()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err}");
    }
}

#[test]
fn batch_rows_are_independent() {
    let model = Model::new(small_config(), 2).unwrap();
    let two = images(2, 3);
    let mut data = two.data()[..256].to_vec();
    data.extend_from_slice(&two.data()[..256]);
    data.extend_from_slice(&two.data()[256..]);
    let batch = Tensor::new(&[3, 1, 16, 16], data).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(batch);
    let vis = model.encode_image(&mut tape, x, BnMode::Eval, &mut Vec::new()).unwrap();
    let v = tape.value(vis.var).data();
    let row = 4 * 16;
    assert_eq!(v[..row], v[row..2 * row]);
    assert_ne!(v[..row], v[2 * row..]);
}

#[test]
fn forward_decoder_is_causal() {
    let model = Model::new(small_config(), 3).unwrap();
    let img = images(1, 4);
    let a = vec![vec![SOS, 5, 6, 7, 8, EOS]];
    let base = logits_of(&model, &img, &a, Direction::Forward);
    let v = 12;
    for t in 0..5 {
        let mut b = a.clone();
        b[0][t + 1] = 9;
        let other = logits_of(&model, &img, &b, Direction::Forward);
        assert_eq!(base[..(t + 1) * v], other[..(t + 1) * v], "prefix through {t}");
        assert_ne!(base[(t + 1) * v..], other[(t + 1) * v..]);
    }
}

#[test]
fn backward_decoder_is_causal_on_reversed_indices() {
    let model = Model::new(small_config(), 3).unwrap();
    let img = images(1, 4);
    let a = vec![vec![SOS, 5, 6, 7, 8, EOS, PAD]];
    let base = logits_of(&model, &img, &a, Direction::Backward);
    let v = 12;
    for j in 0..6 {
        let mut b = a.clone();
        b[0][j] = 9;
        let other = logits_of(&model, &img, &b, Direction::Backward);
        let r = 5 - j;
        assert_eq!(base[..r * v], other[..r * v], "token {j}");
        assert_ne!(base[r * v..(r + 1) * v], other[r * v..(r + 1) * v]);
    }
}

#[test]
fn cross_attention_is_live() {
    let model = Model::new(small_config(), 5).unwrap();
    let tokens = vec![vec![SOS, 5, 6]];
    let mut tape = Tape::new();
    let x = tape.constant(images(1, 6));
    let vis = model.encode_image(&mut tape, x, BnMode::Eval, &mut Vec::new()).unwrap();
    let real = model.decoder_forward(&mut tape, &tokens, &vis, Direction::Forward, None).unwrap();
    let zero = tape.constant(Tensor::zeros(&[4, 16]));
    let zvis = Visual { var: zero, ..vis };
    let blank = model.decoder_forward(&mut tape, &tokens, &zvis, Direction::Forward, None).unwrap();
    assert_ne!(tape.value(real).data(), tape.value(blank).data());
}

#[test]
fn too_long_sequence_is_rejected() {
    let model = Model::new(small_config(), 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(images(1, 0));
    let vis = model.encode_image(&mut tape, x, BnMode::Eval, &mut Vec::new()).unwrap();
    let err = model.decoder_forward(&mut tape, &[vec![SOS; 11]], &vis, Direction::Forward, None);
    assert!(matches!(err, Err(Error::Dimension(_))));
}

fn eval_loss(model: &Model, img: &Tensor, captions: &[Vec<usize>]) -> f32 {
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let l = model.caption_loss(&mut tape, x, captions, BnMode::Eval, None, &mut Vec::new()).unwrap();
    tape.value(l).item().unwrap()
}

#[test]
fn caption_loss_matches_enumeration() {
    let model = Model::new(small_config(), 7).unwrap();
    let img = images(1, 8);
    let cap = vec![SOS, 6, EOS];
    let loss = eval_loss(&model, &img, &[cap.clone()]);

    // The backward decoder reverses its input, so [6, EOS] runs as [EOS, 6].
    let cases = [
        (Direction::Forward, cap.clone(), vec![SOS, 6]),
        (Direction::Backward, reverse_caption(&cap), vec![6, EOS]),
    ];
    let mut expect = 0.0f64;
    for (direction, seq, input) in cases {
        let logits = logits_of(&model, &img, &[input], direction);
        let mut ce = 0.0;
        for pos in 0..2 {
            let row: Vec<f64> = logits[pos * 12..(pos + 1) * 12].iter().map(|&v| f64::from(v)).collect();
            ce -= log_softmax_row(&row)[seq[pos + 1]];
        }
        expect += ce / 2.0;
    }
    assert!((f64::from(loss) - expect).abs() < 1e-5, "{loss} vs {expect}");
}

#[test]
fn padding_leaves_loss_unchanged() {
    let model = Model::new(small_config(), 9).unwrap();
    let img = images(2, 10);
    let caps = vec![vec![SOS, 5, 6, EOS], vec![SOS, 7, EOS]];
    let a = eval_loss(&model, &img, &caps);
    let padded: Vec<Vec<usize>> = caps
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.extend([PAD; 3]);
            c
        })
        .collect();
    let b = eval_loss(&model, &img, &padded);
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn empty_caption_is_a_contract_error() {
    let model = Model::new(small_config(), 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(images(1, 0));
    let r = model.caption_loss(&mut tape, x, &[vec![SOS]], BnMode::Eval, None, &mut Vec::new());
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn training_step_reaches_every_trainable_tensor() {
    let model = Model::new(small_config(), 11).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(images(2, 12));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut updates = Vec::new();
    let caps = vec![vec![SOS, 5, 6, EOS], vec![SOS, 7, 8, 9, 10, EOS]];
    let l = model.caption_loss(&mut tape, x, &caps, BnMode::Train, Some(&mut rng), &mut updates).unwrap();
    let grads = tape.backward(l).unwrap();
    let with_grad: Vec<_> = grads.params().map(|(id, _)| id).collect();
    for (id, p) in model.store().iter() {
        assert_eq!(with_grad.contains(&id), p.requires_grad, "{}", p.name);
    }
    assert_eq!(updates.len(), 1 + 2 + 3);
}

fn classifier_config(outputs: usize) -> ModelConfig {
    ModelConfig::classifier(small_config().backbone, ClassifierConfig { outputs, kind: HeadKind::MultiLabel })
}

#[test]
fn zero_head_gives_zero_logits() {
    let mut model = Model::new(classifier_config(1), 1).unwrap();
    for (_, p) in model.store_mut().iter_mut() {
        if p.name.starts_with("head.") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(images(5, 2));
    let y = model.classify(&mut tape, x, BnMode::Eval, &mut Vec::new()).unwrap();
    assert_eq!(tape.shape(y), [5, 1]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn frozen_backbone_gets_no_gradient() {
    let mut model = Model::new(classifier_config(9), 1).unwrap();
    model.set_backbone_trainable(false);
    let mut tape = Tape::new();
    let x = tape.constant(images(4, 2));
    let y = model.classify(&mut tape, x, BnMode::Eval, &mut Vec::new()).unwrap();
    let l = tape.bce_with_logits(y, &[1.0; 36]).unwrap();
    let grads = tape.backward(l).unwrap();
    let names: Vec<&str> = grads.params().map(|(id, _)| model.store().get(id).name.as_str()).collect();
    assert_eq!(names, ["head.w", "head.b"]);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let model = Model::new(small_config(), 13).unwrap();
    let bytes = model.to_bytes();
    let back = Model::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.config(), model.config());
}

#[test]
fn backbone_only_load() {
    let pretrained = Model::new(small_config(), 21).unwrap();
    let mut clf = Model::new(classifier_config(4), 22).unwrap();
    let fresh_head = clf.store().value(clf.store().id("head.w").unwrap()).clone();
    clf.load_backbone(&pretrained.to_bytes()).unwrap();
    for name in clf.backbone_names() {
        let a = clf.store().value(clf.store().id(name).unwrap());
        let b = pretrained.store().value(pretrained.store().id(name).unwrap());
        assert_eq!(a, b, "{name}");
    }
    assert_eq!(clf.store().value(clf.store().id("head.w").unwrap()), &fresh_head);
}

#[test]
fn truncated_checkpoint_changes_nothing() {
    let pretrained = Model::new(small_config(), 21).unwrap();
    let mut clf = Model::new(classifier_config(4), 22).unwrap();
    let before = clf.to_bytes();
    let bytes = pretrained.to_bytes();
    assert!(matches!(clf.load_backbone(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    assert!(Model::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert_eq!(clf.to_bytes(), before);
}

#[test]
fn running_statistics_follow_batches() {
    let mut model = Model::new(classifier_config(1), 1).unwrap();
    let mut updates = Vec::new();
    {
        let mut tape = Tape::new();
        let x = tape.constant(images(4, 3));
        model.classify(&mut tape, x, BnMode::Train, &mut updates).unwrap();
    }
    let id = model.store().id("backbone.stem.bn.mean").unwrap();
    assert!(model.store().value(id).data().iter().all(|&v| v == 0.0));
    apply_bn_updates(model.store_mut(), &updates, 0.1);
    let m = model.store().value(id).data();
    for (c, &v) in m.iter().enumerate() {
        assert!((v - 0.1 * updates[0].stats.mean[c]).abs() < 1e-7);
    }
}
