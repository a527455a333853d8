//! Synthetic chest-film analog: grayscale scenes with nine finding classes,
//! templated reports and the phrase table that labels them.
//!
//! Example `i` of a corpus draws from its own ChaCha stream `(seed, i)`, so a
//! corpus is the same whether generated serially or in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::prelude::*;
use crate::textpipe::{contains_phrase, normalize, severity_label, ReportDoc};
use crate::{Error, Result};

pub const N_FINDINGS: usize = 9;

/// Finding names as used in dataset labels.
pub const FINDINGS: [&str; N_FINDINGS] = [
    "atelectasis",
    "cardiomegaly",
    "consolidation",
    "edema",
    "effusion",
    "lesion",
    "opacity",
    "pneumonia",
    "pneumothorax",
];

/// Index of the edema analog, the class that carries a severity grade.
pub const EDEMA: usize = 3;

/// Report phrase for each finding.
pub const PHRASES: [&str; N_FINDINGS] = [
    "atelectasis",
    "cardiomegaly",
    "consolidation",
    "pulmonary edema",
    "pleural effusion",
    "lung lesion",
    "lung opacity",
    "pneumonia",
    "pneumothorax",
];

const SEVERITY_WORDS: [&str; 4] = ["no", "mild", "moderate", "severe"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Square canvas extent in pixels.
    pub canvas: usize,
    /// Per-finding presence probability.
    pub priors: [f64; N_FINDINGS],
    /// Relative weights of edema grades 1..=3 when edema is present.
    pub severity_weights: [f64; 3],
    /// Amplitude of the smoothed background noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { canvas: 64, priors: [0.3; N_FINDINGS], severity_weights: [1.0; 3], noise: 0.04 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas < 32 {
            return Err(Error::Config(format!("canvas {} below 32", self.canvas)));
        }
        if self.priors.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("priors must lie in [0, 1]".into()));
        }
        if self.severity_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.severity_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("severity weights must be non-negative with a positive sum".into()));
        }
        if !(self.noise.is_finite() && (0.0..=0.5).contains(&self.noise)) {
            return Err(Error::Config(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        Ok(())
    }
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!("{width}x{height} image with {} pixels", pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0.0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// 8-bit quantization, as stored in PGM files.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }
}

/// Ground truth for one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthScene {
    pub labels: [bool; N_FINDINGS],
    /// Edema grade; nonzero exactly when the edema flag is set.
    pub severity: u8,
}

impl SynthScene {
    pub const EMPTY: Self = Self { labels: [false; N_FINDINGS], severity: 0 };

    pub fn sample(cfg: &SynthConfig, rng: &mut impl Rng) -> Self {
        let mut labels = [false; N_FINDINGS];
        for (l, &p) in labels.iter_mut().zip(&cfg.priors) {
            *l = rng.random::<f64>() < p;
        }
        let severity = if labels[EDEMA] {
            let total: f64 = cfg.severity_weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut grade = 3;
            for (i, &w) in cfg.severity_weights.iter().enumerate() {
                if u < w {
                    grade = i as u8 + 1;
                    break;
                }
                u -= w;
            }
            grade
        } else {
            0
        };
        Self { labels, severity }
    }
}

/// One image with its report and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub image: GrayImage,
    /// Full report text with FINDINGS and IMPRESSION sections.
    pub report: String,
    pub labels: [bool; N_FINDINGS],
    pub severity: Option<u8>,
}

impl Example {
    /// The FINDINGS body, normalized.
    pub fn findings(&self) -> Result<String> {
        let doc = ReportDoc::parse(&self.report);
        crate::textpipe::extract_findings(&doc).map(normalize)
    }
}

pub fn example_id(index: usize) -> String {
    format!("s{index:06}")
}

/// RNG stream of example `index` under `seed`.
pub fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Example `index` of the corpus defined by `(cfg, seed)`.
pub fn generate(cfg: &SynthConfig, seed: u64, index: usize) -> Result<Example> {
    cfg.validate()?;
    let mut rng = example_rng(seed, index);
    let scene = SynthScene::sample(cfg, &mut rng);
    Ok(render_example(cfg, &scene, index, &mut rng))
}

/// Renders a given scene, drawing layout and wording from `rng`.
pub fn generate_scene(cfg: &SynthConfig, scene: &SynthScene, seed: u64, index: usize) -> Result<Example> {
    cfg.validate()?;
    if (scene.severity > 0) != scene.labels[EDEMA] || scene.severity > 3 {
        return Err(Error::Config(format!("severity {} inconsistent with edema flag", scene.severity)));
    }
    let mut rng = example_rng(seed, index);
    Ok(render_example(cfg, scene, index, &mut rng))
}

/// The first `n` examples of the corpus.
pub fn generate_corpus(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<Example>> {
    (0..n).map(|i| generate(cfg, seed, i)).collect()
}

fn render_example(cfg: &SynthConfig, scene: &SynthScene, index: usize, rng: &mut ChaCha8Rng) -> Example {
    let image = render(cfg, scene, rng);
    let report = write_report(scene, rng);
    Example { id: example_id(index), image, report, labels: scene.labels, severity: Some(scene.severity) }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn write_report(scene: &SynthScene, rng: &mut impl Rng) -> String {
    let mut sentences: Vec<String> = Vec::with_capacity(N_FINDINGS);
    for (k, &present) in scene.labels.iter().enumerate() {
        let phrase = if k == EDEMA {
            format!("{} {}", SEVERITY_WORDS[scene.severity as usize], PHRASES[k])
        } else {
            PHRASES[k].to_string()
        };
        let s = if k == EDEMA && !present {
            capitalize(&phrase)
        } else if !present {
            format!("No visible {phrase}")
        } else {
            match rng.random_range(0..3) {
                0 => format!("There is {phrase}"),
                1 => format!("{} is present", capitalize(&phrase)),
                _ => format!("{} is seen", capitalize(&phrase)),
            }
        };
        sentences.push(s);
    }
    // Fisher–Yates on the sentence order.
    for i in (1..sentences.len()).rev() {
        let j = rng.random_range(0..=i);
        sentences.swap(i, j);
    }
    let impression = if scene.labels.iter().any(|&l| l) { "Abnormal study." } else { "No acute cardiopulmonary process." };
    format!("FINDINGS: {}.\nIMPRESSION: {impression}", sentences.join(". "))
}

/// Finding flags recovered from normalized findings text. A sentence that
/// names a finding marks it present unless the sentence starts with "no".
pub fn label_findings(findings: &str) -> [bool; N_FINDINGS] {
    let mut labels = [false; N_FINDINGS];
    for sentence in findings.split(" .").map(str::trim).filter(|s| !s.is_empty()) {
        let negated = sentence.split(' ').next() == Some("no");
        for (l, phrase) in labels.iter_mut().zip(PHRASES) {
            if !negated && contains_phrase(sentence, phrase) {
                *l = true;
            }
        }
    }
    labels
}

/// True if the report text reproduces the example's flags and grade.
pub fn is_consistent(example: &Example) -> bool {
    match example.findings() {
        Ok(text) => label_findings(&text) == example.labels && severity_label(&text) == example.severity,
        Err(_) => false,
    }
}

struct Canvas {
    s: usize,
    v: Vec<f64>,
}

impl Canvas {
    fn coords(&self, i: usize) -> (f64, f64) {
        let s = self.s as f64;
        (((i % self.s) as f64 + 0.5) / s, ((i / self.s) as f64 + 0.5) / s)
    }

    fn apply(&mut self, f: impl Fn(f64, f64) -> f64) {
        for i in 0..self.v.len() {
            let (u, w) = self.coords(i);
            self.v[i] += f(u, w);
        }
    }

    /// Adds `amp` inside an ellipse with a soft edge `edge` (in radius units).
    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, amp: f64, edge: f64) {
        self.apply(|u, w| {
            let r = (((u - cx) / rx).powi(2) + ((w - cy) / ry).powi(2)).sqrt();
            amp * smooth_step(1.0 + edge, 1.0 - edge, r)
        });
    }

    fn gaussian(&mut self, cx: f64, cy: f64, sigma: f64, amp: f64) {
        self.apply(|u, w| amp * (-((u - cx).powi(2) + (w - cy).powi(2)) / (2.0 * sigma * sigma)).exp());
    }
}

fn jitter(rng: &mut impl Rng) -> f64 {
    (rng.random::<f64>() - 0.5) * 0.06
}

fn smooth_step(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn in_lungs(u: f64, w: f64) -> bool {
    LUNGS.iter().any(|&(cx, cy)| ((u - cx) / LUNG_RX).powi(2) + ((w - cy) / LUNG_RY).powi(2) < 0.8)
}

const LUNGS: [(f64, f64); 2] = [(0.32, 0.5), (0.68, 0.5)];
const LUNG_RX: f64 = 0.14;
const LUNG_RY: f64 = 0.3;

fn render(cfg: &SynthConfig, scene: &SynthScene, rng: &mut impl Rng) -> GrayImage {
    let s = cfg.canvas;
    let mut c = Canvas { s, v: vec![0.05; s * s] };

    // Anatomy: thorax, spine, lungs, heart.
    c.ellipse(0.5, 0.55, 0.42, 0.45, 0.35, 0.08);
    c.apply(|u, _| 0.12 * smooth_step(0.03, 0.015, (u - 0.5).abs()));
    for &(cx, cy) in &LUNGS {
        c.ellipse(cx, cy, LUNG_RX, LUNG_RY, -0.22, 0.1);
    }
    let (hx, hy) = (0.54 + jitter(rng) * 0.3, 0.66 + jitter(rng) * 0.3);
    if scene.labels[1] {
        c.ellipse(hx, hy, 0.17, 0.13, 0.25, 0.08);
    } else {
        c.ellipse(hx, hy, 0.10, 0.085, 0.25, 0.08);
    }

    // Atelectasis: thin tilted band, lower left lung.
    if scene.labels[0] {
        let (cx, cy) = (0.30 + jitter(rng), 0.68 + jitter(rng));
        let tilt = (rng.random::<f64>() - 0.5) * 0.4;
        c.apply(|u, w| {
            let d = (w - cy - tilt * (u - cx)).abs();
            0.3 * smooth_step(0.03, 0.012, d) * smooth_step(0.12, 0.09, (u - cx).abs())
        });
    }
    // Consolidation: dense blob, upper right lung.
    if scene.labels[2] {
        let (cx, cy) = (0.68 + jitter(rng), 0.38 + jitter(rng));
        c.ellipse(cx, cy, 0.08, 0.07, 0.35, 0.25);
    }
    // Edema: faint blobs in both lungs, more and brighter with grade.
    if scene.labels[EDEMA] {
        let g = f64::from(scene.severity);
        let count = 3 * scene.severity as usize;
        for _ in 0..count {
            let (cx, cy) = loop {
                let p = (rng.random::<f64>(), rng.random::<f64>());
                if in_lungs(p.0, p.1) {
                    break p;
                }
            };
            c.gaussian(cx, cy, 0.03, 0.08 + 0.06 * g);
        }
    }
    // Effusion: fluid level filling the base of the left lung.
    if scene.labels[4] {
        let level = 0.7 + jitter(rng);
        let (cx, cy) = LUNGS[0];
        c.apply(|u, w| {
            let inside = ((u - cx) / (LUNG_RX * 1.05)).powi(2) + ((w - cy) / (LUNG_RY * 1.05)).powi(2);
            let meniscus = level - 0.04 * ((u - cx) / LUNG_RX).powi(2);
            0.35 * smooth_step(1.05, 0.95, inside) * smooth_step(meniscus - 0.01, meniscus + 0.01, w)
        });
    }
    // Lesion: small sharp nodule anywhere in the lungs.
    if scene.labels[5] {
        let (cx, cy) = loop {
            let p = (rng.random::<f64>(), rng.random::<f64>());
            if in_lungs(p.0, p.1) {
                break p;
            }
        };
        c.ellipse(cx, cy, 0.045, 0.045, 0.45, 0.1);
    }
    // Opacity: broad diffuse haze, mid left lung.
    if scene.labels[6] {
        let (cx, cy) = (0.32 + jitter(rng), 0.42 + jitter(rng));
        c.gaussian(cx, cy, 0.09, 0.18);
    }
    // Pneumonia: speckle field, lower right lung.
    if scene.labels[7] {
        let (cx, cy) = (0.68 + jitter(rng), 0.62 + jitter(rng));
        for _ in 0..40 {
            let px = cx + (rng.random::<f64>() - 0.5) * 0.18;
            let py = cy + (rng.random::<f64>() - 0.5) * 0.16;
            c.gaussian(px, py, 0.012, 0.3);
        }
    }
    // Pneumothorax: dark apical pocket with a bright pleural line.
    if scene.labels[8] {
        let (cx, cy) = (0.32 + jitter(rng), 0.28 + jitter(rng));
        c.apply(|u, w| {
            let r = (((u - cx) / 0.1).powi(2) + ((w - cy) / 0.08).powi(2)).sqrt();
            -0.15 * smooth_step(1.1, 0.9, r) + 0.25 * smooth_step(0.12, 0.0, (r - 1.0).abs())
        });
    }

    // Smoothed background noise.
    let raw: Vec<f64> = (0..s * s).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let smooth = box_blur(&box_blur(&raw, s), s);
    for (v, n) in c.v.iter_mut().zip(&smooth) {
        *v += cfg.noise * 3.0 * n;
    }

    let pixels = c.v.iter().map(|&v| ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32).collect();
    GrayImage { width: s, height: s, pixels }
}

fn box_blur(v: &[f64], s: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for y in 0..s {
        for x in 0..s {
            let mut sum = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(s) {
                for xx in x.saturating_sub(1)..(x + 2).min(s) {
                    sum += v[yy * s + xx];
                    n += 1.0;
                }
            }
            out[y * s + x] = sum / n;
        }
    }
    out
}

/// Random affine augmentation ranges. Scale is fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Maximum absolute rotation in degrees.
    pub rotation: f64,
    /// Maximum absolute translation as a fraction of each extent.
    pub translation: f64,
}

impl AugmentParams {
    pub const SCALE: f64 = 1.0;
    pub const NONE: Self = Self { rotation: 0.0, translation: 0.0 };

    pub fn scale(&self) -> f64 {
        Self::SCALE
    }
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { rotation: 10.0, translation: 0.05 }
    }
}

fn symmetric(rng: &mut impl Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// Rotation and translation sampled from `params`, applied with bilinear
/// resampling and zero fill.
pub fn augment(image: &GrayImage, params: &AugmentParams, rng: &mut impl Rng) -> GrayImage {
    let angle = symmetric(rng, params.rotation);
    let tx = symmetric(rng, params.translation * image.width as f64);
    let ty = symmetric(rng, params.translation * image.height as f64);
    affine(image, angle, tx, ty)
}

/// Rotates by `degrees` about the image center, then shifts by `(tx, ty)`
/// pixels.
pub fn affine(image: &GrayImage, degrees: f64, tx: f64, ty: f64) -> GrayImage {
    let (w, h) = (image.width, image.height);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let sample = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            f64::from(image.pixels[y as usize * w + x as usize])
        }
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - tx;
            let dy = y as f64 - cy - ty;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * sample(x0, y0) + fx * sample(x0 + 1, y0))
                + fy * ((1.0 - fx) * sample(x0, y0 + 1) + fx * sample(x0 + 1, y0 + 1));
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    GrayImage { width: w, height: h, pixels: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene() {
        let cfg = SynthConfig::default();
        let ex = generate_scene(&cfg, &SynthScene::EMPTY, 3, 0).unwrap();
        let text = ex.findings().unwrap();
        assert_eq!(text.matches(" .").count(), 9);
        assert_eq!(label_findings(&text), [false; N_FINDINGS]);
        assert_eq!(severity_label(&text), Some(0));
        assert!(is_consistent(&ex));
    }

    #[test]
    fn same_seed_same_example() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg, 11, 5).unwrap(), generate(&cfg, 11, 5).unwrap());
        assert_ne!(generate(&cfg, 11, 5).unwrap().image, generate(&cfg, 11, 6).unwrap().image);
    }

    #[test]
    fn severe_edema_is_labelled() {
        let mut scene = SynthScene::EMPTY;
        scene.labels[EDEMA] = true;
        scene.severity = 3;
        let ex = generate_scene(&SynthConfig::default(), &scene, 1, 0).unwrap();
        let text = ex.findings().unwrap();
        assert!(text.contains("severe"));
        assert_eq!(severity_label(&text), Some(3));
        scene.severity = 0;
        assert!(generate_scene(&SynthConfig::default(), &scene, 1, 0).is_err());
    }

    #[test]
    fn corpus_is_consistent_and_balanced() {
        let cfg = SynthConfig::default();
        let corpus = generate_corpus(&cfg, 1000, 42).unwrap();
        assert!(corpus.iter().all(is_consistent));
        for k in 0..N_FINDINGS {
            let rate = corpus.iter().filter(|e| e.labels[k]).count() as f64 / 1000.0;
            assert!((rate - 0.3).abs() <= 0.05, "{} rate {rate}", FINDINGS[k]);
        }
        assert!(corpus.iter().all(|e| e.image.pixels.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn pixels_survive_quantization() {
        let ex = generate(&SynthConfig::default(), 0, 0).unwrap();
        let back = GrayImage::from_bytes(64, 64, &ex.image.to_bytes()).unwrap();
        assert_eq!(back, ex.image);
    }

    #[test]
    fn small_canvas_rejected() {
        let cfg = SynthConfig { canvas: 16, ..SynthConfig::default() };
        assert!(matches!(generate(&cfg, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_transform_is_identity() {
        let ex = generate(&SynthConfig::default(), 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&ex.image, &AugmentParams::NONE, &mut rng), ex.image);
    }

    #[test]
    fn integer_translation_shifts() {
        let img = GrayImage::new(4, 3, (0..12).map(|v| v as f32 / 11.0).collect()).unwrap();
        let out = affine(&img, 0.0, 1.0, -1.0);
        for y in 0..3 {
            for x in 0..4 {
                let expect = if x >= 1 && y + 1 < 3 { img.get(x - 1, y + 1) } else { 0.0 };
                assert_eq!(out.get(x, y), expect);
            }
        }
    }

    #[test]
    fn small_rotation_preserves_interior_mean() {
        let ex = generate(&SynthConfig::default(), 9, 1).unwrap();
        let out = affine(&ex.image, 3.0, 0.0, 0.0);
        let mean = |im: &GrayImage| {
            let mut s = 0.0;
            for y in 16..48 {
                for x in 16..48 {
                    s += f64::from(im.get(x, y));
                }
            }
            s / 1024.0
        };
        assert!((mean(&out) / mean(&ex.image) - 1.0).abs() < 0.02);
    }

    #[test]
    fn augment_stays_in_range() {
        let ex = generate(&SynthConfig::default(), 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let out = augment(&ex.image, &AugmentParams::default(), &mut rng);
            assert_eq!((out.width, out.height), (64, 64));
            assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
