//! On-disk formats: binary PGM images, dataset directories with a
//! `reports.jsonl` index, vocabulary files, checkpoints and loss logs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use radtex_core::model::Model;
use radtex_core::synthdata::{Example, GrayImage, FINDINGS, N_FINDINGS};
use radtex_core::textpipe::{extract_findings, ReportDoc, Vocabulary};
use radtex_core::train::LossRecord;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const REPORTS_FILE: &str = "reports.jsonl";
pub const IMAGES_DIR: &str = "images";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Core(radtex_core::Error::Format(msg.into()))
}

/// Binary `P5` encoding with maxval 255.
pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_bytes());
    out
}

/// Parses a binary PGM with 8-bit samples. Header comments are skipped and
/// samples are rescaled by `maxval`.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err("non-ASCII PGM header"))?);
    }
    if fields[0] != "P5" {
        return Err(format_err(format!("unsupported PGM magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(format!("bad PGM header field {s:?}")));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format_err(format!("PGM maxval {maxval} not in 1..=255")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = bytes.get(pos + 1..).unwrap_or_default();
    if data.len() != width * height {
        return Err(format_err(format!("PGM raster has {} bytes, expected {}", data.len(), width * height)));
    }
    let scale = maxval as f32;
    Ok(GrayImage::new(width, height, data.iter().map(|&b| (f32::from(b) / scale).min(1.0)).collect())?)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&fs::read(path).at(path)?)
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(image)).at(path)
}

/// One line of `reports.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub id: String,
    pub findings: String,
    pub labels: BTreeMap<String, u8>,
    pub severity: Option<u8>,
}

impl ReportRecord {
    pub fn from_example(example: &Example) -> Result<Self> {
        let doc = ReportDoc::parse(&example.report);
        let findings = extract_findings(&doc)?.to_string();
        let labels = FINDINGS.iter().zip(example.labels).map(|(n, l)| (n.to_string(), u8::from(l))).collect();
        Ok(Self { id: example.id.clone(), findings, labels, severity: example.severity })
    }

    /// Rebuilds an example around `image`; the report holds the FINDINGS
    /// section only.
    pub fn into_example(self, image: GrayImage) -> Result<Example> {
        let mut labels = [false; N_FINDINGS];
        for (flag, name) in labels.iter_mut().zip(FINDINGS) {
            *flag = match self.labels.get(name) {
                Some(0) => false,
                Some(1) => true,
                Some(v) => return Err(format_err(format!("{}: label {name} = {v}, expected 0 or 1", self.id))),
                None => return Err(format_err(format!("{}: missing label {name}", self.id))),
            };
        }
        if let Some(extra) = self.labels.keys().find(|k| !FINDINGS.contains(&k.as_str())) {
            return Err(format_err(format!("{}: unknown label {extra}", self.id)));
        }
        Ok(Example { id: self.id, image, report: format!("FINDINGS: {}", self.findings), labels, severity: self.severity })
    }
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(format_err(format!("example id {id:?} is not a plain file name")))
    }
}

/// Writes `images/<id>.pgm` per example and one `reports.jsonl` line each.
pub fn write_dataset(dir: &Path, examples: &[Example]) -> Result<()> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).at(&images)?;
    let index = dir.join(REPORTS_FILE);
    let file = fs::File::create(&index).at(&index)?;
    let mut out = BufWriter::new(file);
    for example in examples {
        check_id(&example.id)?;
        write_pgm(&images.join(format!("{}.pgm", example.id)), &example.image)?;
        serde_json::to_writer(&mut out, &ReportRecord::from_example(example)?)?;
        out.write_all(b"\n").at(&index)?;
    }
    out.flush().at(&index)
}

/// Loads a dataset directory in `reports.jsonl` order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Example>> {
    let index = dir.join(REPORTS_FILE);
    let file = fs::File::open(&index).at(&index)?;
    let mut examples = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(&index)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ReportRecord = serde_json::from_str(&line)
            .map_err(|e| format_err(format!("{}:{}: {e}", index.display(), line_no + 1)))?;
        check_id(&record.id)?;
        let image = read_pgm(&dir.join(IMAGES_DIR).join(format!("{}.pgm", record.id)))?;
        examples.push(record.into_example(image)?);
    }
    Ok(examples)
}

/// One piece per line.
pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    fs::write(path, vocab.to_text()).at(path)
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    Ok(Vocabulary::from_text(&fs::read_to_string(path).at(path)?)?)
}

pub fn write_checkpoint(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, model.to_bytes()).at(path)
}

pub fn read_checkpoint_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).at(path)
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    Ok(Model::from_bytes(&read_checkpoint_bytes(path)?)?)
}

/// `epoch,step,lr,loss`, one row per optimizer step.
pub fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "step", "lr", "loss"])?;
    for r in log {
        w.serialize((r.epoch, r.step, r.lr, r.loss))?;
    }
    w.flush().at(path)
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut log = Vec::new();
    for row in r.deserialize() {
        let (epoch, step, lr, loss): (usize, usize, f64, f64) = row?;
        log.push(LossRecord { epoch, step, lr, loss });
    }
    Ok(log)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).at(path)
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use radtex_core::synthdata::{generate_corpus, SynthConfig};

    #[test]
    fn pgm_round_trip_is_exact() {
        let ex = &generate_corpus(&SynthConfig { canvas: 32, ..Default::default() }, 1, 3).unwrap()[0];
        let back = decode_pgm(&encode_pgm(&ex.image)).unwrap();
        assert_eq!(back, ex.image);
    }

    #[test]
    fn pgm_header_comments_and_maxval() {
        let bytes = b"P5 # comment\n2 # w\n1\n# c\n100\n\x00\x64";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels, vec![0.0, 1.0]);
    }

    #[test]
    fn pgm_rejects_bad_input() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n1").is_err());
    }

    #[test]
    fn record_rejects_bad_labels() {
        let ex = &generate_corpus(&SynthConfig { canvas: 32, ..Default::default() }, 1, 3).unwrap()[0];
        let mut rec = ReportRecord::from_example(ex).unwrap();
        rec.labels.insert("edema".into(), 2);
        assert!(rec.clone().into_example(ex.image.clone()).is_err());
        rec.labels.remove("edema");
        assert!(rec.clone().into_example(ex.image.clone()).is_err());
        rec.labels.insert("edema".into(), 0);
        rec.labels.insert("fracture".into(), 0);
        assert!(rec.into_example(ex.image.clone()).is_err());
    }

    #[test]
    fn ids_must_be_file_names() {
        assert!(check_id("s000001").is_ok());
        assert!(check_id("../x").is_err());
        assert!(check_id("").is_err());
    }
}
