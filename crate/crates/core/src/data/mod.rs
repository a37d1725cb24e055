//! Patient journeys, corpus files, code grouping and splits.
//!
//! Corpus files hold one JSON record per line:
//!
//! ```text
//! {"id":7,"visits":[{"admit_day":0.0,"discharge_day":2.5,"codes":[4,17]}, ...]}
//! ```
//!
//! Grouper files hold one `leaf_id<TAB>category_id` pair per line.

pub mod generator;
pub mod oracle;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::OntologyDag;

pub use generator::{generate_corpus, GeneratorParams, KernelKind, SyntheticCorpus, TransitionModel};
pub use oracle::{bayes_oracle_accuracy, best_constant_accuracy};

/// Fraction of patients held out for validation.
pub const VALID_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Visit {
    pub admit_day: f64,
    pub discharge_day: f64,
    pub codes: Vec<usize>,
}

impl Visit {
    pub fn length_of_stay(&self) -> f64 {
        self.discharge_day - self.admit_day
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientJourney {
    pub id: u64,
    pub visits: Vec<Visit>,
}

impl PatientJourney {
    /// Checks ordering, non-empty duplicate-free visits and, when given, the
    /// leaf-id range and per-visit code cap.
    pub fn validate(&self, leaf_count: Option<usize>, max_codes: Option<usize>) -> Result<()> {
        let bad = |detail: String| Error::Journey { id: self.id, detail };
        if self.visits.len() < 2 {
            return Err(bad(format!("{} visit(s), at least 2 required", self.visits.len())));
        }
        for (i, v) in self.visits.iter().enumerate() {
            if !v.admit_day.is_finite() || !v.discharge_day.is_finite() {
                return Err(bad(format!("visit {i} has a non-finite time")));
            }
            if v.discharge_day < v.admit_day {
                return Err(bad(format!(
                    "visit {i} discharged ({}) before admission ({})",
                    v.discharge_day, v.admit_day
                )));
            }
            if let Some(next) = self.visits.get(i + 1) {
                if next.admit_day < v.discharge_day {
                    return Err(bad(format!("visit {} admitted before visit {i} was discharged", i + 1)));
                }
            }
            if v.codes.is_empty() {
                return Err(bad(format!("visit {i} has no codes")));
            }
            if let Some(cap) = max_codes {
                if v.codes.len() > cap {
                    return Err(bad(format!("visit {i} has {} codes, cap is {cap}", v.codes.len())));
                }
            }
            let mut seen = v.codes.clone();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(bad(format!("visit {i} repeats a code")));
            }
            if let (Some(n), Some(&max)) = (leaf_count, seen.last()) {
                if max >= n {
                    return Err(bad(format!("visit {i} code {max} is not a leaf (< {n})")));
                }
            }
        }
        Ok(())
    }

    /// The most recent `max_len` visits.
    pub fn truncated(&self, max_len: usize) -> PatientJourney {
        let skip = self.visits.len().saturating_sub(max_len);
        PatientJourney {
            id: self.id,
            visits: self.visits[skip..].to_vec(),
        }
    }
}

pub fn parse_corpus(text: &str) -> Result<Vec<PatientJourney>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PatientJourney = serde_json::from_str(line).map_err(|e| Error::CorpusParse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        p.validate(None, None).map_err(|e| Error::CorpusParse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn corpus_to_string(corpus: &[PatientJourney]) -> Result<String> {
    let mut s = String::new();
    for p in corpus {
        s.push_str(&serde_json::to_string(p)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_corpus(path: &Path) -> Result<Vec<PatientJourney>> {
    parse_corpus(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_corpus(corpus: &[PatientJourney], path: &Path) -> Result<()> {
    let text = corpus_to_string(corpus)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Total map from leaf id to label category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grouper {
    category: Vec<usize>,
    count: usize,
}

impl Grouper {
    pub fn new(category: Vec<usize>) -> Result<Self> {
        if category.is_empty() {
            return Err(Error::Labels("grouper maps no codes".into()));
        }
        let count = category.iter().max().map_or(0, |m| m + 1);
        Ok(Self { category, count })
    }

    pub fn from_ontology(dag: &OntologyDag) -> Result<Self> {
        Self::new((0..dag.leaf_count()).map(|i| dag.category_of(i)).collect())
    }

    /// Parses `leaf<TAB>category` lines; every leaf in `0..n` must appear once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |d: &str| Error::Labels(format!("grouper line {}: {d}", i + 1));
            let (a, b) = line.split_once('\t').ok_or_else(|| err("expected leaf<TAB>category"))?;
            let leaf: usize = a.trim().parse().map_err(|_| err("bad leaf id"))?;
            let cat: usize = b.trim().parse().map_err(|_| err("bad category id"))?;
            pairs.push((leaf, cat));
        }
        let n = pairs.len();
        let mut category = vec![usize::MAX; n];
        for (leaf, cat) in pairs {
            if leaf >= n || category[leaf] != usize::MAX {
                return Err(Error::Labels(format!("leaf {leaf} is duplicated or out of range")));
            }
            category[leaf] = cat;
        }
        Self::new(category)
    }

    pub fn to_text(&self) -> String {
        self.category
            .iter()
            .enumerate()
            .map(|(l, c)| format!("{l}\t{c}\n"))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn leaf_count(&self) -> usize {
        self.category.len()
    }

    pub fn category_count(&self) -> usize {
        self.count
    }

    pub fn category(&self, code: usize) -> Result<usize> {
        self.category.get(code).copied().ok_or(Error::UnknownCode(code))
    }

    /// Union of the categories of `codes` as a 0/1 vector.
    pub fn labels(&self, codes: &[usize]) -> Result<Vec<bool>> {
        let mut y = vec![false; self.count];
        for &c in codes {
            y[self.category(c)?] = true;
        }
        Ok(y)
    }
}

/// Patient indices of a train / validation / test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Validation gets 10% of the patients, training `train_fraction`, test the
/// remainder. Counts are rounded to the nearest patient.
pub fn split_corpus(patients: usize, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0 - VALID_FRACTION) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} must lie in (0, {})",
            1.0 - VALID_FRACTION
        )));
    }
    let n_valid = (patients as f64 * VALID_FRACTION).round() as usize;
    let n_train = ((patients as f64 * train_fraction).round() as usize).min(patients - n_valid);
    let mut order: Vec<usize> = (0..patients).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut valid = order[n_train..n_train + n_valid].to_vec();
    let mut test = order[n_train + n_valid..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, valid, test })
}
