use radtex::core::model::{BackboneConfig, Model, ModelConfig, TextualHeadConfig};
use radtex::core::synthdata::{generate_corpus, SynthConfig};
use radtex::core::textpipe::train_vocab;
use radtex::core::train::LossRecord;
use radtex::io;

fn corpus(n: usize, seed: u64) -> Vec<radtex::core::synthdata::Example> {
    generate_corpus(&SynthConfig { canvas: 32, ..Default::default() }, n, seed).unwrap()
}

fn tree_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_round_trip_keeps_images_labels_and_findings() {
    let examples = corpus(6, 4);
    let dir = tempfile::tempdir().unwrap();
    io::write_dataset(dir.path(), &examples).unwrap();
    let back = io::read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), examples.len());
    for (a, b) in examples.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.severity, b.severity);
        assert_eq!(a.findings().unwrap(), b.findings().unwrap());
    }
    let first = std::fs::read_to_string(dir.path().join(io::REPORTS_FILE)).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let keys: Vec<&str> = line.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys.len(), 4);
    for k in ["id", "findings", "labels", "severity"] {
        assert!(keys.contains(&k));
    }
    assert_eq!(line["labels"].as_object().unwrap().len(), 9);
}

#[test]
fn dataset_bytes_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    io::write_dataset(a.path(), &corpus(5, 9)).unwrap();
    io::write_dataset(b.path(), &corpus(5, 9)).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
    let c = tempfile::tempdir().unwrap();
    io::write_dataset(c.path(), &corpus(5, 10)).unwrap();
    assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
}

#[test]
fn real_style_records_load() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("images")).unwrap();
    std::fs::write(dir.path().join("images/p1.pgm"), b"P5\n2 2\n255\n\x00\x40\x80\xff").unwrap();
    let labels: serde_json::Map<String, serde_json::Value> =
        radtex::core::synthdata::FINDINGS.iter().map(|f| (f.to_string(), serde_json::json!(u8::from(*f == "edema")))).collect();
    let line = serde_json::json!({"id": "p1", "findings": "Mild pulmonary edema.", "labels": labels, "severity": null});
    std::fs::write(dir.path().join("reports.jsonl"), format!("{line}\n\n")).unwrap();
    let ex = io::read_dataset(dir.path()).unwrap();
    assert_eq!(ex.len(), 1);
    assert!(ex[0].labels[3] && ex[0].labels.iter().filter(|l| **l).count() == 1);
    assert_eq!(ex[0].severity, None);
    assert_eq!(ex[0].findings().unwrap(), "mild pulmonary edema .");
    assert_eq!(ex[0].image.pixels[3], 1.0);
}

#[test]
fn missing_image_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    io::write_dataset(dir.path(), &corpus(2, 1)).unwrap();
    std::fs::remove_file(dir.path().join("images/s000001.pgm")).unwrap();
    let err = io::read_dataset(dir.path()).unwrap_err();
    assert_eq!(err.kind(), "io");
}

#[test]
fn vocab_checkpoint_and_loss_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let texts: Vec<String> = corpus(10, 2).iter().map(|e| e.findings().unwrap()).collect();
    let vocab = train_vocab(texts.iter().map(String::as_str), 80).unwrap();
    let vpath = dir.path().join("vocab.txt");
    io::write_vocab(&vpath, &vocab).unwrap();
    assert_eq!(io::read_vocab(&vpath).unwrap(), vocab);

    let backbone = BackboneConfig { stem_width: 4, widths: vec![4, 8], blocks: vec![1, 1], ..Default::default() };
    let textual = TextualHeadConfig { width: 8, layers: 1, heads: 2, ffn_width: 16, vocab_size: vocab.len(), max_positions: 40, ..Default::default() };
    let model = Model::new(ModelConfig::captioning(backbone, textual), 1).unwrap();
    let cpath = dir.path().join("model.ckpt");
    io::write_checkpoint(&cpath, &model).unwrap();
    let bytes = std::fs::read(&cpath).unwrap();
    assert_eq!(&bytes[..8], b"RTXCKPT1");
    assert_eq!(io::read_checkpoint(&cpath).unwrap().to_bytes(), bytes);

    let log = vec![
        LossRecord { epoch: 0, step: 0, lr: 0.0, loss: 2.5 },
        LossRecord { epoch: 0, step: 1, lr: 0.012_5, loss: 2.25 },
        LossRecord { epoch: 1, step: 2, lr: 1e-17, loss: 0.1 + 0.2 },
    ];
    let lpath = dir.path().join("loss.csv");
    io::write_loss_csv(&lpath, &log).unwrap();
    let text = std::fs::read_to_string(&lpath).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,step,lr,loss");
    assert_eq!(io::read_loss_csv(&lpath).unwrap(), log);
}
