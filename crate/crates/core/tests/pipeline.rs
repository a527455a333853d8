use radtex_core::decode::{beam_search, generate_report, greedy_decode, LengthNorm, ModelScorer};
use radtex_core::model::{BackboneConfig, Model, ModelConfig, TextualHeadConfig};
use radtex_core::synthdata::{generate_corpus, is_consistent, GrayImage, SynthConfig};
use radtex_core::textpipe::{tokenize, train_vocab, EOS, SOS};
use radtex_core::train::{epoch_means, pretrain, predict, transfer, transfer_model, Mode, RunSpec, Task};

fn small() -> (BackboneConfig, TextualHeadConfig) {
    (
        BackboneConfig { stem_width: 4, widths: vec![4, 8], blocks: vec![1, 1], ..Default::default() },
        TextualHeadConfig { width: 16, layers: 1, heads: 2, ffn_width: 32, ..Default::default() },
    )
}

#[test]
fn pretrain_then_decode_then_transfer() {
    let cfg = SynthConfig { canvas: 32, ..Default::default() };
    let corpus = generate_corpus(&cfg, 24, 5).unwrap();
    assert!(corpus.iter().all(is_consistent));
    let texts: Vec<String> = corpus.iter().map(|e| e.findings().unwrap()).collect();
    let vocab = train_vocab(texts.iter().map(String::as_str), 120).unwrap();
    let caps: Vec<Vec<usize>> = texts.iter().map(|t| tokenize(t, &vocab, 48)).collect();

    let (backbone, textual) = small();
    let textual = TextualHeadConfig { vocab_size: vocab.len(), max_positions: 48, ..textual };
    let mut model = Model::new(ModelConfig::captioning(backbone.clone(), textual), 2).unwrap();
    let images: Vec<&GrayImage> = corpus.iter().map(|e| &e.image).collect();
    let run = RunSpec { epochs: 3, batch_size: 8, ..RunSpec::for_mode(Mode::Pretrain) };
    let log = pretrain(&mut model, &run, &images, &caps, &mut |_| {}).unwrap();
    let means = epoch_means(&log);
    assert_eq!(means.len(), 3);
    assert!(means.iter().all(|m| m.is_finite()));

    // every image decodes to a bounded sequence starting at SOS
    for e in &corpus[..4] {
        let mut scorer = ModelScorer::new(&model, &e.image).unwrap();
        for cap in [2, 7, 48] {
            let g = greedy_decode(&mut scorer, cap).unwrap();
            let b = beam_search(&mut scorer, 2, cap, LengthNorm::None).unwrap();
            for d in [&g, &b] {
                assert_eq!(d.tokens[0], SOS);
                assert!(d.tokens.len() <= cap);
                assert!(d.tokens.len() == cap || d.tokens.last() == Some(&EOS));
                assert!(d.log_prob <= 0.0);
            }
            assert!(b.log_prob >= g.log_prob);
        }
        assert!(greedy_decode(&mut scorer, 49).is_err());
        let text = generate_report(&model, &e.image, &vocab, 2, 48).unwrap();
        assert!(!text.contains("[SOS]"));
    }

    let task = Task::Pathology;
    let refs: Vec<_> = corpus.iter().collect();
    let targets = task.targets(&refs).unwrap();
    let bytes = model.to_bytes();
    let mut probe = transfer_model(Mode::TransferFrozen, &backbone, &task, Some(&bytes), 0).unwrap();
    let run = RunSpec { epochs: 2, ..RunSpec::for_mode(Mode::TransferFrozen) };
    transfer(&mut probe, &run, &images, &targets, &mut |_| {}).unwrap();
    let scores = predict(&probe, &images).unwrap();
    assert_eq!(scores.len(), corpus.len());
    assert!(scores.iter().all(|row| row.len() == 9 && row.iter().all(|s| s.is_finite())));
}
