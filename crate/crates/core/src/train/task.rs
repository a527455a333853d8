use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LossKind;
use crate::metrics::{argmax, auc, aucpr, macro_f1};
use crate::model::{ClassifierConfig, HeadKind};
use crate::prelude::*;
use crate::synthdata::{Example, FINDINGS, N_FINDINGS};
use crate::{Error, Result};

/// Edema grades none, mild, moderate, severe.
pub const SEVERITY_GRADES: usize = 4;

/// A downstream classification task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Task {
    /// All nine findings as independent binary outputs.
    Pathology,
    /// Edema grade as one of four classes.
    Severity,
    /// A single finding as one binary output.
    Finding(usize),
}

impl Task {
    pub fn head(&self) -> ClassifierConfig {
        match self {
            Task::Pathology => ClassifierConfig { outputs: N_FINDINGS, kind: HeadKind::MultiLabel },
            Task::Severity => ClassifierConfig { outputs: SEVERITY_GRADES, kind: HeadKind::MultiClass },
            Task::Finding(_) => ClassifierConfig { outputs: 1, kind: HeadKind::MultiLabel },
        }
    }

    pub fn loss(&self) -> LossKind {
        match self {
            Task::Severity => LossKind::MulticlassCe,
            _ => LossKind::BinaryCe,
        }
    }

    /// Column names of per-class results.
    pub fn classes(&self) -> Vec<String> {
        match self {
            Task::Pathology => FINDINGS.iter().map(|s| s.to_string()).collect(),
            Task::Severity => ["none", "mild", "moderate", "severe"].iter().map(|s| s.to_string()).collect(),
            Task::Finding(k) => vec![FINDINGS[*k].to_string()],
        }
    }

    pub fn targets(&self, examples: &[&Example]) -> Result<Targets> {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        Ok(match self {
            Task::Pathology => Targets::MultiLabel(examples.iter().map(|e| e.labels.map(flag).to_vec()).collect()),
            Task::Finding(k) => Targets::MultiLabel(examples.iter().map(|e| vec![flag(e.labels[*k])]).collect()),
            Task::Severity => Targets::Classes(
                examples
                    .iter()
                    .map(|e| match e.severity {
                        Some(s) if usize::from(s) < SEVERITY_GRADES => Ok(usize::from(s)),
                        Some(s) => Err(Error::Config(format!("example {} has severity {s}", e.id))),
                        None => Err(Error::Config(format!("example {} has no severity grade", e.id))),
                    })
                    .collect::<Result<_>>()?,
            ),
        })
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Pathology => f.write_str("pathology9"),
            Task::Severity => f.write_str("edema-severity"),
            Task::Finding(k) => write!(f, "finding-{}", FINDINGS[*k]),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pathology9" => Ok(Task::Pathology),
            "edema-severity" => Ok(Task::Severity),
            _ => s
                .strip_prefix("finding-")
                .and_then(|name| FINDINGS.iter().position(|f| *f == name))
                .map(Task::Finding)
                .ok_or_else(|| Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

impl TryFrom<String> for Task {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Task> for String {
    fn from(t: Task) -> String {
        t.to_string()
    }
}

/// Supervision for a classifier, one entry per example.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// 0/1 per output.
    MultiLabel(Vec<Vec<f64>>),
    /// Class index.
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::MultiLabel(r) => r.len(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn loss(&self) -> LossKind {
        match self {
            Targets::MultiLabel(_) => LossKind::BinaryCe,
            Targets::Classes(_) => LossKind::MulticlassCe,
        }
    }

    pub(crate) fn check(&self, n: usize, outputs: usize) -> Result<()> {
        if self.len() != n {
            return Err(Error::Config(format!("{} targets for {} images", self.len(), n)));
        }
        let ok = match self {
            Targets::MultiLabel(rows) => rows.iter().all(|r| r.len() == outputs),
            Targets::Classes(c) => c.iter().all(|&c| c < outputs),
        };
        if !ok {
            return Err(Error::Config(format!("targets do not fit a head with {outputs} outputs")));
        }
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::MultiLabel(r) => Targets::MultiLabel(idx.iter().map(|&i| r[i].clone()).collect()),
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
        }
    }

    /// Strata an example belongs to: (column, positive) pairs for
    /// multi-label targets, the class for multiclass ones.
    fn strata(&self, i: usize) -> Vec<(usize, bool)> {
        match self {
            Targets::MultiLabel(r) => r[i].iter().enumerate().map(|(k, &v)| (k, v > 0.5)).collect(),
            Targets::Classes(c) => vec![(c[i], true)],
        }
    }
}

/// `n` distinct indices drawn at random, first covering every stratum
/// present in the pool (each finding positive and negative, or each class)
/// while room remains.
pub fn stratified_subset(targets: &Targets, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let total = targets.len();
    if n == 0 || n > total {
        return Err(Error::Config(format!("cannot draw {n} training examples from a split of {total}")));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    let mut taken = vec![false; total];
    let mut covered = BTreeSet::new();
    let mut chosen = Vec::with_capacity(n);
    let all: BTreeSet<(usize, bool)> = (0..total).flat_map(|i| targets.strata(i)).collect();
    for stratum in &all {
        if chosen.len() == n {
            break;
        }
        if covered.contains(stratum) {
            continue;
        }
        if let Some(&i) = order.iter().find(|&&i| !taken[i] && targets.strata(i).contains(stratum)) {
            taken[i] = true;
            covered.extend(targets.strata(i));
            chosen.push(i);
        }
    }
    for &i in &order {
        if chosen.len() == n {
            break;
        }
        if !taken[i] {
            taken[i] = true;
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Test-set metrics of one trained classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean of the per-class AUCs.
    pub auc: f64,
    /// Mean per-class average precision.
    pub aucpr: f64,
    /// Multiclass tasks only.
    pub macro_f1: Option<f64>,
    /// One-vs-rest AUC per output column.
    pub per_class_auc: Vec<f64>,
}

/// Scores each output column against the targets. Multiclass columns are
/// scored one-vs-rest; macro-F1 uses the arg-max class.
pub fn evaluate(scores: &[Vec<f64>], targets: &Targets) -> Result<Evaluation> {
    if scores.len() != targets.len() || scores.is_empty() {
        return Err(Error::Config(format!("{} score rows for {} targets", scores.len(), targets.len())));
    }
    let k = scores[0].len();
    if scores.iter().any(|r| r.len() != k) {
        return Err(Error::Config("score rows differ in width".into()));
    }
    let mut per_class_auc = Vec::with_capacity(k);
    let mut aps = Vec::with_capacity(k);
    for c in 0..k {
        let column: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let labels: Vec<bool> = match targets {
            Targets::MultiLabel(rows) => rows.iter().map(|r| r[c] > 0.5).collect(),
            Targets::Classes(classes) => classes.iter().map(|&t| t == c).collect(),
        };
        per_class_auc.push(auc(&column, &labels)?);
        aps.push(aucpr(&column, &labels)?);
    }
    let macro_f1 = match targets {
        Targets::MultiLabel(_) => None,
        Targets::Classes(classes) => {
            let preds: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
            Some(macro_f1(&preds, classes, k)?)
        }
    };
    Ok(Evaluation {
        auc: per_class_auc.iter().sum::<f64>() / k as f64,
        aucpr: aps.iter().sum::<f64>() / k as f64,
        macro_f1,
        per_class_auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn task_names_round_trip() {
        for t in [Task::Pathology, Task::Severity, Task::Finding(0), Task::Finding(8)] {
            assert_eq!(t.to_string().parse::<Task>().unwrap(), t);
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(serde_json::from_str::<Task>(&json).unwrap(), t);
        }
        assert_eq!("finding-edema".parse::<Task>().unwrap(), Task::Finding(3));
        assert!("finding-gout".parse::<Task>().is_err());
    }

    #[test]
    fn subset_covers_both_classes_at_small_n() {
        let mut labels = vec![vec![0.0]; 200];
        labels[17][0] = 1.0;
        labels[150][0] = 1.0;
        let t = Targets::MultiLabel(labels);
        for seed in 0..20 {
            let s = stratified_subset(&t, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(s.len(), 3);
            assert!(s.contains(&17) || s.contains(&150));
            let mut d = s.clone();
            d.dedup();
            assert_eq!(d.len(), 3);
        }
    }

    #[test]
    fn subset_covers_every_class() {
        let classes: Vec<usize> = (0..100).map(|i| if i % 25 == 0 { i % 4 } else { 0 }).collect();
        let present: BTreeSet<usize> = classes.iter().copied().collect();
        let t = Targets::Classes(classes.clone());
        let s = stratified_subset(&t, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let got: BTreeSet<usize> = s.iter().map(|&i| classes[i]).collect();
        assert_eq!(got, present);
    }

    #[test]
    fn subset_size_limits() {
        let t = Targets::Classes(vec![0, 1, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(stratified_subset(&t, 3, &mut rng).unwrap(), vec![0, 1, 2]);
        assert!(matches!(stratified_subset(&t, 4, &mut rng), Err(Error::Config(_))));
        assert!(stratified_subset(&t, 0, &mut rng).is_err());
    }

    #[test]
    fn evaluate_averages_columns() {
        let scores = vec![vec![0.9, 0.1], vec![0.4, 0.8], vec![0.3, 0.2], vec![0.5, 0.7]];
        let t = Targets::MultiLabel(vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0], vec![0.0, 1.0]]);
        let e = evaluate(&scores, &t).unwrap();
        assert_eq!(e.per_class_auc, vec![0.75, 1.0]);
        assert_eq!(e.auc, 0.875);
        assert_eq!(e.macro_f1, None);
    }

    #[test]
    fn evaluate_multiclass() {
        let scores = vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.6, 0.4], vec![0.1, 0.9]];
        let t = Targets::Classes(vec![0, 1, 1, 1]);
        let e = evaluate(&scores, &t).unwrap();
        // predictions 0,1,0,1: class 0 F1 = 2/3, class 1 F1 = 0.8
        assert!((e.macro_f1.unwrap() - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert_eq!(e.per_class_auc, vec![1.0, 1.0]);
    }
}
