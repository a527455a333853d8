//! Report text handling: normalization, section extraction, a corpus-trained
//! wordpiece vocabulary, tokenization and the edema severity rule table.

use crate::prelude::*;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const MASK: usize = 4;

/// Reserved pieces, in id order.
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[SOS]", "[EOS]", "[MASK]"];

pub const DEFAULT_MAX_CAPTION_LEN: usize = 170;
pub const DEFAULT_VOCAB_SIZE: usize = 1000;

const CONTINUATION: &str = "##";

/// Lowercases, isolates ASCII punctuation as its own word and collapses
/// whitespace to single spaces.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    let push = |out: &mut String, word: &str, pending: &mut bool| {
        if *pending && !out.is_empty() {
            out.push(' ');
        }
        *pending = false;
        out.push_str(word);
    };
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = true;
        } else if c.is_ascii_punctuation() {
            pending_space = true;
            let mut buf = [0u8; 4];
            push(&mut out, c.encode_utf8(&mut buf), &mut pending_space);
            pending_space = true;
        } else {
            for l in c.to_lowercase() {
                let mut buf = [0u8; 4];
                push(&mut out, l.encode_utf8(&mut buf), &mut pending_space);
            }
        }
    }
    out
}

/// A raw report split into sections at `HEADER:` markers.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportDoc {
    raw: String,
    sections: Vec<(String, core::ops::Range<usize>)>,
}

impl ReportDoc {
    /// A header is an all-uppercase word (letters or `_`, at least two
    /// characters) at the start of the text or after whitespace, immediately
    /// followed by `:`. Each body runs to the next header or the end.
    pub fn parse(raw: &str) -> Self {
        let bytes = raw.as_bytes();
        let mut headers = Vec::new();
        for (colon, _) in raw.match_indices(':') {
            let mut start = colon;
            while start > 0 && (bytes[start - 1].is_ascii_uppercase() || bytes[start - 1] == b'_') {
                start -= 1;
            }
            let at_boundary = start == 0 || bytes[start - 1].is_ascii_whitespace();
            if colon - start >= 2 && at_boundary && bytes[start].is_ascii_uppercase() {
                headers.push((start, colon));
            }
        }
        let sections = headers
            .iter()
            .enumerate()
            .map(|(i, &(start, colon))| {
                let end = headers.get(i + 1).map_or(raw.len(), |h| h.0);
                let body = &raw[colon + 1..end];
                let lead = body.len() - body.trim_start().len();
                let body_start = colon + 1 + lead;
                let body_end = body_start + body.trim().len();
                (raw[start..colon].to_string(), body_start..body_end)
            })
            .collect();
        Self { raw: raw.to_string(), sections }
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    /// Body of the first section with this header, trimmed.
    pub fn section(&self, header: &str) -> Option<&str> {
        self.sections.iter().find(|(h, _)| h == header).map(|(_, r)| &self.raw[r.clone()])
    }

    pub fn headers(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(h, _)| h.as_str())
    }
}

/// The FINDINGS body of a report.
pub fn extract_findings(doc: &ReportDoc) -> Result<&str> {
    doc.section("FINDINGS").ok_or_else(|| Error::AbsentSection("FINDINGS".into()))
}

/// Wordpiece inventory. Ids are positions in `pieces`; the first five are
/// [`RESERVED`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() < RESERVED.len() || pieces.iter().zip(RESERVED).any(|(p, r)| p != r) {
            return Err(Error::Format(format!("vocabulary must start with {RESERVED:?}")));
        }
        let mut index = BTreeMap::new();
        for (id, p) in pieces.iter().enumerate() {
            if p.is_empty() || p.contains(char::is_whitespace) {
                return Err(Error::Format(format!("invalid piece {p:?} at line {}", id + 1)));
            }
            if index.insert(p.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate piece {p:?}")));
            }
        }
        Ok(Self { pieces, index })
    }

    /// Parses the one-piece-per-line file format.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pieces(text.lines().map(str::to_string).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.pieces {
            s.push_str(p);
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
        .collect()
}

fn merged(a: &str, b: &str) -> String {
    format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(b))
}

/// Trains a wordpiece vocabulary by repeatedly merging the most frequent
/// adjacent symbol pair. Equal counts go to the lexicographically smallest
/// pair. Training stops at `target_size` or when no pair is left, so the
/// result may be smaller than requested.
pub fn train_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>, target_size: usize) -> Result<Vocabulary> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for text in corpus {
        for w in normalize(text).split(' ').filter(|w| !w.is_empty()) {
            *counts.entry(w.to_string()).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, u64)> = counts.into_iter().map(|(w, c)| (initial_symbols(&w), c)).collect();

    let mut pieces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let alphabet: alloc::collections::BTreeSet<&String> = words.iter().flat_map(|(s, _)| s).collect();
    pieces.extend(alphabet.into_iter().cloned());
    if target_size < pieces.len() {
        return Err(Error::Parameter(format!(
            "target size {target_size} below alphabet plus reserved ({})",
            pieces.len()
        )));
    }
    let mut known: alloc::collections::BTreeSet<String> = pieces.iter().cloned().collect();

    while pieces.len() < target_size {
        let mut pairs: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pairs.entry((&w[0], &w[1])).or_default() += c;
            }
        }
        // BTreeMap iterates in ascending pair order, so the first maximum wins ties.
        let Some(((a, b), _)) = pairs.iter().fold(None, |best: Option<(&(&str, &str), u64)>, (p, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((p, c)),
        }) else {
            break;
        };
        let (a, b) = (a.to_string(), b.to_string());
        let joined = merged(&a, &b);
        for (syms, _) in &mut words {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == a && syms[i + 1] == b {
                    syms[i] = joined.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        if known.insert(joined.clone()) {
            pieces.push(joined);
        }
    }
    Vocabulary::from_pieces(pieces)
}

fn word_pieces(word: &str, vocab: &Vocabulary, out: &mut Vec<usize>) {
    let start_len = out.len();
    let mut rest = word;
    let mut first = true;
    while !rest.is_empty() {
        let mut found = None;
        let mut end = rest.len();
        while end > 0 {
            if rest.is_char_boundary(end) {
                let cand = &rest[..end];
                let id = if first { vocab.id(cand) } else { vocab.id(&format!("{CONTINUATION}{cand}")) };
                if let Some(id) = id {
                    found = Some((id, end));
                    break;
                }
            }
            end -= 1;
        }
        match found {
            Some((id, end)) => {
                out.push(id);
                rest = &rest[end..];
                first = false;
            }
            None => {
                out.truncate(start_len);
                out.push(UNK);
                return;
            }
        }
    }
}

/// Greedy longest-match wordpiece tokenization of normalized text, wrapped in
/// `[SOS]`/`[EOS]`. A word with an uncoverable remainder becomes a single
/// `[UNK]`. Output longer than `max_len` (at least 2) is cut to `max_len`
/// with `[EOS]` kept last.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let max_len = max_len.max(2);
    let mut ids = vec![SOS];
    for w in text.split_whitespace() {
        word_pieces(w, vocab, &mut ids);
        if ids.len() >= max_len {
            break;
        }
    }
    ids.truncate(max_len - 1);
    ids.push(EOS);
    ids
}

/// Joins pieces back into text, gluing `##` continuations to the previous
/// piece. Stops at `[EOS]`; `[PAD]`, `[SOS]` and `[MASK]` are skipped.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for &id in ids {
        match id {
            EOS => break,
            PAD | SOS | MASK => continue,
            _ => {}
        }
        let piece = vocab.piece(id).unwrap_or(RESERVED[UNK]);
        match piece.strip_prefix(CONTINUATION) {
            Some(tail) if !out.is_empty() => out.push_str(tail),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(piece);
            }
        }
    }
    out
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 · n)` of
/// the sorted list.
pub fn percentile_length(lengths: &[usize], p: f64) -> Result<usize> {
    if lengths.is_empty() {
        return Err(Error::Parameter("percentile of an empty list".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Parameter(format!("percentile {p} outside (0, 100]")));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let rank = ((p * n as f64) / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Phrases of the edema severity rule table and their grades.
pub const SEVERITY_PHRASES: [(&str, u8); 4] = [
    ("no pulmonary edema", 0),
    ("mild pulmonary edema", 1),
    ("moderate pulmonary edema", 2),
    ("severe pulmonary edema", 3),
];

/// True if `phrase` occurs in `text` as a whole-word sequence.
pub fn contains_phrase(text: &str, phrase: &str) -> bool {
    let words: Vec<&str> = text.split_whitespace().collect();
    let target: Vec<&str> = phrase.split_whitespace().collect();
    !target.is_empty() && words.windows(target.len()).any(|w| w == target.as_slice())
}

/// Highest grade whose phrase occurs in normalized findings text.
pub fn severity_label(findings: &str) -> Option<u8> {
    SEVERITY_PHRASES.iter().filter(|(p, _)| contains_phrase(findings, p)).map(|&(_, g)| g).max()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(extra: &[&str]) -> Vocabulary {
        let mut p: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        p.extend(extra.iter().map(|s| s.to_string()));
        Vocabulary::from_pieces(p).unwrap()
    }

    #[test]
    fn normalize_rules() {
        assert_eq!(normalize("No  Visible\nPneumothorax."), "no visible pneumothorax .");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("  a,b  "), "a , b");
        for t in ["No  Visible\nPneumothorax.", "x..y ( z )", "\t"] {
            let once = normalize(t);
            assert_eq!(normalize(&once), once);
        }
    }

    #[test]
    fn findings_extraction() {
        let doc = ReportDoc::parse("FINDINGS: clear lungs. IMPRESSION: normal.");
        assert_eq!(extract_findings(&doc).unwrap(), "clear lungs.");
        assert_eq!(doc.section("IMPRESSION"), Some("normal."));

        let doc = ReportDoc::parse("IMPRESSION: normal.");
        assert_eq!(extract_findings(&doc), Err(Error::AbsentSection("FINDINGS".into())));

        let doc = ReportDoc::parse("IMPRESSION: stable.\nFINDINGS: small effusion. Ratio 1:2 noted.");
        assert_eq!(extract_findings(&doc).unwrap(), "small effusion. Ratio 1:2 noted.");
        assert_eq!(doc.headers().collect::<Vec<_>>(), ["IMPRESSION", "FINDINGS"]);
    }

    #[test]
    fn longest_match_trace() {
        let v = vocab(&["p", "pneu", "##mo", "##thorax", "##m", "no"]);
        let id = |s| v.id(s).unwrap();
        assert_eq!(tokenize("pneumothorax", &v, 170), [SOS, id("pneu"), id("##mo"), id("##thorax"), EOS]);
        assert_eq!(tokenize("no", &v, 170), [SOS, id("no"), EOS]);
        assert_eq!(tokenize("pneux no", &v, 170), [SOS, UNK, id("no"), EOS]);
    }

    #[test]
    fn truncation_keeps_eos() {
        let v = vocab(&["a"]);
        let text = ["a"; 200].join(" ");
        let ids = tokenize(&text, &v, 170);
        assert_eq!(ids.len(), 170);
        assert_eq!(ids[0], SOS);
        assert_eq!(*ids.last().unwrap(), EOS);
    }

    #[test]
    fn single_word_becomes_one_piece() {
        let corpus = ["consolidation"; 5];
        let v = train_vocab(corpus.iter().copied(), 100).unwrap();
        assert!(v.id("consolidation").is_some());
        assert_eq!(tokenize("consolidation", &v, 170).len(), 3);
    }

    #[test]
    fn minimal_target_is_character_level() {
        let v = train_vocab(["abc ab"], 0).unwrap_err();
        assert!(matches!(v, Error::Parameter(_)));
        // alphabet: a, ##b, ##c
        let v = train_vocab(["abc ab"], 8).unwrap();
        assert_eq!(&v.pieces()[5..], ["##b", "##c", "a"]);
    }

    #[test]
    fn merge_ties_are_lexicographic_and_stable() {
        let corpus = ["ab cd", "cd ab", "ef"];
        let a = train_vocab(corpus, 12).unwrap();
        let b = train_vocab(corpus, 12).unwrap();
        assert_eq!(a, b);
        // ab and cd tie at 2; ab < cd.
        assert_eq!(a.pieces()[11], "ab");
        let c = train_vocab(corpus, 13).unwrap();
        assert_eq!(c.pieces()[12], "cd");
    }

    #[test]
    fn round_trip_and_file_format() {
        let text = "there is severe pulmonary edema . no visible pneumothorax .";
        let v = train_vocab([text], 60).unwrap();
        assert_eq!(detokenize(&tokenize(text, &v, 170), &v), text);
        let reread = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(reread, v);
        assert!(Vocabulary::from_text("[PAD]\n[UNK]\n").is_err());
    }

    #[test]
    fn percentile_nearest_rank() {
        let l: Vec<usize> = (1..=100).collect();
        assert_eq!(percentile_length(&l, 95.0).unwrap(), 95);
        assert_eq!(percentile_length(&l, 100.0).unwrap(), 100);
        assert_eq!(percentile_length(&[7; 9], 12.5).unwrap(), 7);
        assert_eq!(percentile_length(&[4], 50.0).unwrap(), 4);
        assert!(percentile_length(&[], 50.0).is_err());
        assert!(percentile_length(&[1], 0.0).is_err());
    }

    #[test]
    fn severity_rules() {
        assert_eq!(severity_label("there is severe pulmonary edema"), Some(3));
        assert_eq!(severity_label("no pulmonary edema"), Some(0));
        assert_eq!(severity_label("clear lungs"), None);
        assert_eq!(severity_label("no pulmonary edema . mild pulmonary edema ."), Some(1));
    }
}
