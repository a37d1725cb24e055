//! Accuracy ceilings: the Bayes-optimal predictor that knows the generating
//! process, and the best predictor that ignores history.
//!
//! Accuracy@k of a top-k set `S` on a visit with category set `Y` is
//! `Σ_{c∈S} 1{c∈Y}/|Y|`, so its expectation is maximised by the `k`
//! categories with the largest `E[1{c∈Y}/|Y|]`. The oracle computes that
//! expectation from the filtered hidden state; the constant predictor uses
//! the empirical average over the evaluated visits.

use super::{generator::TransitionModel, Grouper, PatientJourney};
use crate::error::{Error, Result};
use crate::metrics::accuracy_at_k;

/// Oracle scores for visits `2..T` of `journey`, one row per predicted visit.
pub fn oracle_scores(
    journey: &PatientJourney,
    model: &TransitionModel,
    grouper: &Grouper,
    coverage: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let l = model.categories;
    if grouper.category_count() > l {
        return Err(Error::Labels(format!(
            "grouper has {} categories, generator {l}",
            grouper.category_count()
        )));
    }
    let mut belief = model.initial.clone();
    let mut prev_gap = None;
    let mut out = Vec::with_capacity(journey.visits.len().saturating_sub(1));
    for (t, v) in journey.visits.iter().enumerate() {
        let mut y = grouper.labels(&v.codes)?;
        y.resize(l, false);
        for (s, b) in belief.iter_mut().enumerate() {
            *b *= model.emission(s, &y);
        }
        let z: f64 = belief.iter().sum();
        if z <= 0.0 {
            return Err(Error::Labels(format!("patient {} visit {t} is impossible under the model", journey.id)));
        }
        belief.iter_mut().for_each(|b| *b /= z);
        let Some(next) = journey.visits.get(t + 1) else {
            break;
        };
        let mut predicted = vec![0.0; l];
        for (s, &b) in belief.iter().enumerate() {
            if b > 0.0 {
                for (p, q) in predicted.iter_mut().zip(model.transition_row(s, prev_gap, v.length_of_stay())) {
                    *p += b * q;
                }
            }
        }
        let mut scores = vec![0.0; l];
        for (s, &p) in predicted.iter().enumerate() {
            for (w, c) in scores.iter_mut().zip(&coverage[s]) {
                *w += p * c;
            }
        }
        scores.truncate(grouper.category_count());
        out.push(scores);
        prev_gap = Some(next.admit_day - v.discharge_day);
        belief = predicted;
    }
    Ok(out)
}

fn label_rows(journeys: &[PatientJourney], grouper: &Grouper) -> Result<Vec<Vec<bool>>> {
    let mut rows = Vec::new();
    for j in journeys {
        for v in &j.visits[1..] {
            rows.push(grouper.labels(&v.codes)?);
        }
    }
    Ok(rows)
}

/// Accuracy@k of the Bayes-optimal predictor over every predicted visit.
pub fn bayes_oracle_accuracy(
    journeys: &[PatientJourney],
    model: &TransitionModel,
    grouper: &Grouper,
    k: usize,
) -> Result<f64> {
    let coverage = model.coverage();
    let mut scores = Vec::new();
    for j in journeys {
        scores.extend(oracle_scores(j, model, grouper, &coverage)?);
    }
    accuracy_at_k(&scores, &label_rows(journeys, grouper)?, k)
}

/// Accuracy@k of the best single ranking applied to every predicted visit.
pub fn best_constant_accuracy(journeys: &[PatientJourney], grouper: &Grouper, k: usize) -> Result<f64> {
    let labels = label_rows(journeys, grouper)?;
    let mut share = vec![0.0; grouper.category_count()];
    for y in &labels {
        let n = y.iter().filter(|&&b| b).count() as f64;
        for (s, &b) in share.iter_mut().zip(y) {
            if b {
                *s += 1.0 / n;
            }
        }
    }
    let scores = vec![share; labels.len()];
    accuracy_at_k(&scores, &labels, k)
}
