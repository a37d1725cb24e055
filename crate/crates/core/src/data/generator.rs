//! Synthetic corpora with a planted, time-dependent signal.
//!
//! Every patient follows a hidden primary category `s_t` drawn from a Markov
//! chain. A visit with primary category `s` shows `s`, its companion category
//! with probability `companion_prob`, and every other category with
//! probability `noise_prob`; each shown category contributes
//! `1 + Poisson(λ)` distinct leaf codes.
//!
//! The step `s_t → s_{t+1}` tilts the base kernel row by
//!
//! ```text
//! exp(coupling · (−z_gap · [s' = s] + z_los · [s' = jump(s)]))
//! ```
//!
//! where `z_gap` is the standardised log of the gap that preceded visit `t`
//! (0 for the first visit) and `z_los` the standardised log of visit `t`'s
//! length of stay. Short gaps keep the patient in place; long stays push to
//! the jump category. Both quantities are known when visit `t+1` is
//! predicted.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, LogNormal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Grouper, PatientJourney, Visit};
use crate::error::{Error, Result};
use crate::ontology::{toy_ontology, OntologyDag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// Stay / successor / second successor / jump mass plus a uniform floor.
    #[default]
    Structured,
    Identity,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub patients: usize,
    pub leaves: usize,
    pub categories: usize,
    pub top_categories: usize,
    pub mean_visits: f64,
    pub mean_codes: f64,
    pub max_codes: usize,
    pub kernel: KernelKind,
    pub companion_prob: f64,
    pub noise_prob: f64,
    pub interval_median: f64,
    pub interval_sigma: f64,
    pub los_median: f64,
    pub los_sigma: f64,
    /// Strength of the gap / length-of-stay tilt; 0 disables it.
    pub coupling: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            patients: 1000,
            leaves: 300,
            categories: 20,
            top_categories: 18,
            mean_visits: 3.5,
            mean_codes: 12.0,
            max_codes: 39,
            kernel: KernelKind::Structured,
            companion_prob: 0.35,
            noise_prob: 0.03,
            interval_median: 30.0,
            interval_sigma: 0.8,
            los_median: 3.0,
            los_sigma: 0.7,
            coupling: 1.0,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.leaves == 0 || self.categories == 0 || self.top_categories == 0 {
            return bad("the ontology is empty");
        }
        if self.leaves < self.categories {
            return bad("every category needs at least one leaf");
        }
        if !(self.mean_visits >= 2.0) {
            return bad("mean_visits must be at least 2");
        }
        if !(self.mean_codes >= 1.0) || self.max_codes == 0 {
            return bad("codes per visit must be positive");
        }
        for (name, p) in [("companion_prob", self.companion_prob), ("noise_prob", self.noise_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, v) in [
            ("interval_median", self.interval_median),
            ("interval_sigma", self.interval_sigma),
            ("los_median", self.los_median),
            ("los_sigma", self.los_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !self.coupling.is_finite() {
            return bad("coupling must be finite");
        }
        Ok(())
    }
}

/// The generating process, as far as labels are concerned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub categories: usize,
    /// Row-stochastic base kernel.
    pub base: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub jump: Vec<usize>,
    pub companion: Vec<usize>,
    pub companion_prob: f64,
    pub noise_prob: f64,
    pub coupling: f64,
    pub interval_median: f64,
    pub interval_sigma: f64,
    pub los_median: f64,
    pub los_sigma: f64,
}

impl TransitionModel {
    fn build(params: &GeneratorParams, rng: &mut ChaCha8Rng) -> Self {
        let l = params.categories;
        let mut order: Vec<usize> = (0..l).collect();
        order.shuffle(rng);
        let mut pos = vec![0; l];
        for (i, &c) in order.iter().enumerate() {
            pos[c] = i;
        }
        let shift = |s: usize, k: usize| order[(pos[s] + k) % l];
        let base = (0..l)
            .map(|s| {
                let mut row = vec![0.0; l];
                match params.kernel {
                    KernelKind::Identity => row[s] = 1.0,
                    KernelKind::Uniform => row.iter_mut().for_each(|v| *v = 1.0 / l as f64),
                    KernelKind::Structured => {
                        row.iter_mut().for_each(|v| *v = 0.15 / l as f64);
                        row[s] += 0.3;
                        row[shift(s, 1)] += 0.25;
                        row[shift(s, 2)] += 0.1;
                        row[shift(s, l / 2)] += 0.2;
                        let z: f64 = row.iter().sum();
                        row.iter_mut().for_each(|v| *v /= z);
                    }
                }
                row
            })
            .collect();
        Self {
            categories: l,
            base,
            initial: vec![1.0 / l as f64; l],
            jump: (0..l).map(|s| shift(s, l / 2)).collect(),
            companion: (0..l).map(|s| shift(s, 3)).collect(),
            companion_prob: params.companion_prob,
            noise_prob: params.noise_prob,
            coupling: params.coupling,
            interval_median: params.interval_median,
            interval_sigma: params.interval_sigma,
            los_median: params.los_median,
            los_sigma: params.los_sigma,
        }
    }

    fn z_gap(&self, gap: Option<f64>) -> f64 {
        gap.map_or(0.0, |g| (g.max(1e-9).ln() - self.interval_median.ln()) / self.interval_sigma)
    }

    fn z_los(&self, los: f64) -> f64 {
        (los.max(1e-9).ln() - self.los_median.ln()) / self.los_sigma
    }

    /// `P(s_{t+1} | s_t = s)` given the gap before visit `t` and its stay.
    pub fn transition_row(&self, s: usize, prev_gap: Option<f64>, los: f64) -> Vec<f64> {
        let (zg, zl) = (self.z_gap(prev_gap), self.z_los(los));
        let mut row = self.base[s].clone();
        if self.coupling != 0.0 {
            row[s] *= (-self.coupling * zg).exp();
            row[self.jump[s]] *= (self.coupling * zl).exp();
        }
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
        row
    }

    /// Inclusion probability of category `c` in a visit whose primary is `s`.
    pub fn inclusion(&self, s: usize, c: usize) -> f64 {
        if c == s {
            1.0
        } else if c == self.companion[s] {
            self.companion_prob
        } else {
            self.noise_prob
        }
    }

    /// `P(category set = y | primary = s)`.
    pub fn emission(&self, s: usize, y: &[bool]) -> f64 {
        (0..self.categories)
            .map(|c| {
                let q = self.inclusion(s, c);
                if y[c] {
                    q
                } else {
                    1.0 - q
                }
            })
            .product()
    }

    /// `E[1{c ∈ Y} / |Y| | primary = s]` for every `(s, c)`.
    pub fn coverage(&self) -> Vec<Vec<f64>> {
        let l = self.categories;
        // E[1 / (base + Σ_{j ∉ skip} Bernoulli(q_j))] by a Poisson-binomial DP
        let expect_inv = |s: usize, skip: &[usize], base: usize| {
            let mut dist = vec![1.0];
            for j in (0..l).filter(|j| !skip.contains(j)) {
                let q = self.inclusion(s, j);
                let mut next = vec![0.0; dist.len() + 1];
                for (m, p) in dist.iter().enumerate() {
                    next[m] += p * (1.0 - q);
                    next[m + 1] += p * q;
                }
                dist = next;
            }
            dist.iter().enumerate().map(|(m, p)| p / (base + m) as f64).sum::<f64>()
        };
        (0..l)
            .map(|s| {
                (0..l)
                    .map(|c| {
                        if c == s {
                            expect_inv(s, &[s], 1)
                        } else {
                            self.inclusion(s, c) * expect_inv(s, &[s, c], 2)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub ontology: OntologyDag,
    pub grouper: Grouper,
    pub journeys: Vec<PatientJourney>,
    pub model: TransitionModel,
}

/// Expected number of categories shown per visit, averaged over primaries.
fn mean_category_count(m: &TransitionModel) -> f64 {
    let l = m.categories;
    (0..l)
        .map(|s| (0..l).map(|c| m.inclusion(s, c)).sum::<f64>())
        .sum::<f64>()
        / l as f64
}

pub fn generate_corpus(params: &GeneratorParams, seed: u64) -> Result<SyntheticCorpus> {
    params.validate()?;
    let ontology = toy_ontology(params.leaves, params.categories, params.top_categories)?;
    let grouper = Grouper::from_ontology(&ontology)?;
    let mut by_category = vec![Vec::new(); params.categories];
    for leaf in 0..ontology.leaf_count() {
        by_category[ontology.category_of(leaf)].push(leaf);
    }
    let mut root_rng = ChaCha8Rng::seed_from_u64(seed);
    let model = TransitionModel::build(params, &mut root_rng);
    let extra = (params.mean_codes / mean_category_count(&model) - 1.0).max(0.0);
    let journeys = (0..params.patients as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id + 1);
            sample_patient(id, params, &model, &by_category, extra, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCorpus {
        ontology,
        grouper,
        journeys,
        model,
    })
}

fn draw(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn sample_patient(
    id: u64,
    params: &GeneratorParams,
    model: &TransitionModel,
    by_category: &[Vec<usize>],
    extra_codes: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PatientJourney> {
    let dist_err = |e: String| Error::Config(format!("generator: {e}"));
    let geo = Geometric::new(1.0 / (params.mean_visits - 1.0)).map_err(|e| dist_err(e.to_string()))?;
    let gap_dist = LogNormal::new(params.interval_median.ln(), params.interval_sigma)
        .map_err(|e| dist_err(e.to_string()))?;
    let los_dist =
        LogNormal::new(params.los_median.ln(), params.los_sigma).map_err(|e| dist_err(e.to_string()))?;
    let poisson = if extra_codes > 0.0 {
        Some(Poisson::new(extra_codes).map_err(|e| dist_err(e.to_string()))?)
    } else {
        None
    };
    let count = 2 + geo.sample(rng) as usize;
    let mut visits = Vec::with_capacity(count);
    let mut state = draw(&model.initial, rng);
    let mut admit = 0.0;
    let mut prev_gap = None;
    for t in 0..count {
        let los = los_dist.sample(rng);
        let discharge = admit + los;
        let mut cats = vec![state];
        for c in 0..model.categories {
            if c != state && rng.random::<f64>() < model.inclusion(state, c) {
                cats.push(c);
            }
        }
        let mut codes = Vec::new();
        // the primary's first code is always kept; extra codes fill up to the cap
        let mut per_cat = Vec::with_capacity(cats.len());
        for &c in &cats {
            let pool = &by_category[c];
            let want = 1 + poisson.as_ref().map_or(0, |p| p.sample(rng) as usize);
            let k = want.min(pool.len());
            per_cat.push(index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect::<Vec<_>>());
        }
        for chosen in &per_cat {
            codes.push(chosen[0]);
        }
        codes.truncate(params.max_codes);
        'fill: for chosen in &per_cat {
            for &leaf in &chosen[1..] {
                if codes.len() >= params.max_codes {
                    break 'fill;
                }
                codes.push(leaf);
            }
        }
        codes.sort_unstable();
        visits.push(Visit {
            admit_day: admit,
            discharge_day: discharge,
            codes,
        });
        if t + 1 < count {
            let row = model.transition_row(state, prev_gap, los);
            state = draw(&row, rng);
            let gap = gap_dist.sample(rng);
            admit = discharge + gap;
            prev_gap = Some(gap);
        }
    }
    Ok(PatientJourney { id, visits })
}
