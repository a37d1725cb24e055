//! The assembled next-visit model.
//!
//! Per journey with visits `1..T` (inputs are visits `1..T-1`):
//!
//! 1. code rows from `M`, ontology rows from `G` (ancestor attention),
//! 2. visit encoder and attention pooling → `v_t`,
//! 3. discharge states `v_t^dis` (stay ODE) and interval states `h_t`
//!    (interval ODE over admission times), or learnable positions,
//! 4. `ṽ_t = LN(v_t + v_t^dis + h_t)`,
//! 5. causal journey transformer → `v^o_t`,
//! 6. head on `v^o_t` scores visit `t+1`.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rayon::prelude::*;

use crate::config::{AblationFlags, ModelConfig};
use crate::data::{Grouper, PatientJourney};
use crate::embedding::{OntologyAttention, EMBED_INIT};
use crate::encoder::{VisitBatch, VisitEncoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::journey::{sequence_loss, JourneyTransformer, PredictionHead};
use crate::nn::{Dropout, LayerNorm, Linear};
use crate::ode::{fuse, interval_states, los_state, IntervalInit, OdeFunc, PositionalTable, SolverConfig};
use crate::ontology::OntologyDag;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// A journey turned into model inputs and next-visit targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedJourney {
    pub id: u64,
    /// Input visits `1..T-1`.
    pub batch: VisitBatch,
    /// Days since the first kept admission.
    pub admits: Vec<f64>,
    pub discharges: Vec<f64>,
    /// `(T-1) × |C'|` targets for visits `2..T`.
    pub labels: Tensor,
    pub label_sets: Vec<Vec<bool>>,
}

impl PreparedJourney {
    pub fn steps(&self) -> usize {
        self.label_sets.len()
    }
}

/// Usage counts for structure checks.
#[derive(Debug, Default)]
pub struct Counters {
    ontology_embeddings: AtomicUsize,
    positional_lookups: AtomicUsize,
}

impl Counters {
    pub fn ontology_embeddings(&self) -> usize {
        self.ontology_embeddings.load(Ordering::Relaxed)
    }

    pub fn positional_lookups(&self) -> usize {
        self.positional_lookups.load(Ordering::Relaxed)
    }
}

/// Embedding tables for one graph: `M` and, with the ontology branch, `G`.
#[derive(Debug, Clone, Copy)]
pub struct Tables {
    pub codes: Var,
    pub ontology: Option<Var>,
}

/// Intermediate rows of one journey, `len × d` each (`len` includes padding).
#[derive(Debug, Clone, Copy)]
pub struct JourneyOutput {
    pub pooled: Var,
    pub fused: Var,
    pub contextual: Var,
    pub logits: Var,
}

#[derive(Debug)]
pub struct SetorModel {
    pub config: ModelConfig,
    pub solver: SolverConfig,
    pub ablation: AblationFlags,
    pub labels: usize,
    pub leaves: usize,
    pub ontology_attention: Option<OntologyAttention>,
    pub code_embedding: ParamId,
    pub encoder: VisitEncoder,
    pub los_func: Option<OdeFunc>,
    pub interval_func: Option<OdeFunc>,
    pub interval_init: Option<Linear>,
    pub positions: Option<PositionalTable>,
    pub fuse_norm: LayerNorm,
    pub journey: Option<JourneyTransformer>,
    pub head: PredictionHead,
    pub counters: Counters,
}

impl SetorModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dag: &OntologyDag,
        labels: usize,
        config: &ModelConfig,
        solver: &SolverConfig,
        ablation: &AblationFlags,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        solver.validate()?;
        ablation.validate()?;
        let d = config.d;
        let ontology_attention = (!ablation.wo_ontology)
            .then(|| OntologyAttention::new(store, dag, d, rng))
            .transpose()?;
        let code_embedding = store.add_uniform("codes.M", &[dag.leaf_count(), d], EMBED_INIT, rng)?;
        let encoder = VisitEncoder::new(
            store,
            d,
            config.heads,
            config.attention_scale,
            !ablation.wo_ontology,
            rng,
        )?;
        let los_func = ablation.uses_los().then(|| OdeFunc::new(store, "ode.los", d, rng)).transpose()?;
        let interval_func = ablation
            .uses_interval()
            .then(|| OdeFunc::new(store, "ode.interval", d, rng))
            .transpose()?;
        let interval_init = (ablation.uses_interval() && config.interval_init == IntervalInit::Affine)
            .then(|| Linear::new(store, "ode.interval_init", d, d, true, rng))
            .transpose()?;
        let positions = ablation
            .wo_ode
            .then(|| PositionalTable::new(store, "positions", config.max_journey_len, d, rng))
            .transpose()?;
        let fuse_norm = LayerNorm::new(store, "fuse.norm", d)?;
        let journey = (!ablation.wo_j_trans)
            .then(|| {
                JourneyTransformer::new(
                    store,
                    config.layers,
                    d,
                    config.heads,
                    config.ffn_width(),
                    config.attention_scale,
                    rng,
                )
            })
            .transpose()?;
        let head = PredictionHead::new(store, d, labels, config.head_activation, rng)?;
        Ok(Self {
            config: config.clone(),
            solver: *solver,
            ablation: *ablation,
            labels,
            leaves: dag.leaf_count(),
            ontology_attention,
            code_embedding,
            encoder,
            los_func,
            interval_func,
            interval_init,
            positions,
            fuse_norm,
            journey,
            head,
            counters: Counters::default(),
        })
    }

    /// Truncates to the most recent `max_journey_len` visits, shifts times to
    /// start at 0, pads codes and groups the targets.
    pub fn prepare(&self, journey: &PatientJourney, grouper: &Grouper) -> Result<PreparedJourney> {
        journey.validate(Some(self.leaves), Some(self.config.max_codes))?;
        if grouper.category_count() > self.labels || grouper.leaf_count() != self.leaves {
            return Err(Error::Labels(format!(
                "grouper maps {} leaves into {} categories; model expects {} and {}",
                grouper.leaf_count(),
                grouper.category_count(),
                self.leaves,
                self.labels
            )));
        }
        let j = journey.truncated(self.config.max_journey_len);
        let t0 = j.visits[0].admit_day;
        let inputs = &j.visits[..j.visits.len() - 1];
        let codes: Vec<&[usize]> = inputs.iter().map(|v| v.codes.as_slice()).collect();
        let mut label_sets = Vec::with_capacity(inputs.len());
        for v in &j.visits[1..] {
            let mut y = grouper.labels(&v.codes)?;
            y.resize(self.labels, false);
            label_sets.push(y);
        }
        let flat = label_sets.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(PreparedJourney {
            id: j.id,
            batch: VisitBatch::new(&codes, self.config.max_codes)?,
            admits: inputs.iter().map(|v| v.admit_day - t0).collect(),
            discharges: inputs.iter().map(|v| v.discharge_day - t0).collect(),
            labels: Tensor::matrix(label_sets.len(), self.labels, flat)?,
            label_sets,
        })
    }

    /// Places `M` and (unless ablated) a freshly computed `G` on the graph.
    pub fn tables(&self, g: &mut Graph, store: &ParamStore, dag: &OntologyDag) -> Result<Tables> {
        let codes = g.param(store, self.code_embedding);
        let ontology = match &self.ontology_attention {
            Some(att) => {
                self.counters.ontology_embeddings.fetch_add(1, Ordering::Relaxed);
                Some(att.forward(g, store, dag)?)
            }
            None => None,
        };
        Ok(Tables { codes, ontology })
    }

    /// Runs one journey. With `pad_to > steps`, zero rows are appended after
    /// fusion and masked out of the journey transformer.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tables: Tables,
        journey: &PreparedJourney,
        dropout: &mut Dropout,
        pad_to: Option<usize>,
    ) -> Result<JourneyOutput> {
        let steps = journey.steps();
        let pooled = self.encoder.forward(g, store, &journey.batch, tables.codes, tables.ontology)?;
        let fused = if let Some(pos) = &self.positions {
            self.counters.positional_lookups.fetch_add(1, Ordering::Relaxed);
            let p = pos.lookup(g, store, &(0..steps).collect::<Vec<_>>())?;
            fuse(g, store, &self.fuse_norm, pooled, Some(p), None)?
        } else {
            let discharge = self
                .los_func
                .as_ref()
                .map(|f| los_state(g, store, f, pooled, &journey.admits, &journey.discharges, &self.solver))
                .transpose()?;
            let interval = match &self.interval_func {
                Some(f) => {
                    let v1 = g.slice_rows(pooled, 0, 1)?;
                    let hs = interval_states(
                        g,
                        store,
                        f,
                        self.interval_init.as_ref(),
                        v1,
                        &journey.admits,
                        &self.solver,
                    )?;
                    Some(if hs.len() == 1 { hs[0] } else { g.concat_rows(&hs)? })
                }
                None => None,
            };
            fuse(g, store, &self.fuse_norm, pooled, discharge, interval)?
        };
        let len = pad_to.unwrap_or(steps).max(steps);
        let (fused, real) = if len > steps {
            let pad = g.constant(Tensor::zeros(&[len - steps, self.config.d]));
            let mut real = vec![true; steps];
            real.resize(len, false);
            (g.concat_rows(&[fused, pad])?, real)
        } else {
            (fused, vec![true; steps])
        };
        let contextual = match &self.journey {
            Some(jt) => {
                let x = dropout.apply(g, fused)?;
                jt.forward(g, store, x, &real, dropout)?
            }
            None => fused,
        };
        let logits = self.head.logits(g, store, contextual)?;
        Ok(JourneyOutput {
            pooled,
            fused,
            contextual,
            logits,
        })
    }

    /// Mean next-visit loss of one journey.
    pub fn journey_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tables: Tables,
        journey: &PreparedJourney,
        dropout: &mut Dropout,
        pad_to: Option<usize>,
    ) -> Result<Var> {
        let out = self.forward(g, store, tables, journey, dropout, pad_to)?;
        let rows = g.value(out.logits).rows();
        let steps = journey.steps();
        let labels = if rows > steps {
            let mut data = journey.labels.data().to_vec();
            data.resize(rows * self.labels, 0.0);
            Tensor::matrix(rows, self.labels, data)?
        } else {
            journey.labels.clone()
        };
        let mask: Vec<bool> = (0..rows).map(|t| t < steps).collect();
        let probs = self.head.probabilities(g, out.logits)?;
        sequence_loss(g, probs, &labels, &mask)
    }

    /// Mean of the per-journey losses.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        dag: &OntologyDag,
        journeys: &[&PreparedJourney],
        dropout: &mut Dropout,
    ) -> Result<Var> {
        if journeys.is_empty() {
            return Err(Error::AllMasked("batch_loss"));
        }
        let tables = self.tables(g, store, dag)?;
        let losses = journeys
            .iter()
            .map(|j| self.journey_loss(g, store, tables, j, dropout, None))
            .collect::<Result<Vec<_>>>()?;
        let total = g.add_all(&losses)?;
        Ok(g.scale(total, 1.0 / journeys.len() as f64))
    }

    /// Evaluation-mode logits and loss per journey, computed in parallel over
    /// a read-only parameter snapshot.
    pub fn predict(
        &self,
        store: &ParamStore,
        dag: &OntologyDag,
        journeys: &[PreparedJourney],
    ) -> Result<Vec<(Tensor, f64)>> {
        let mut g = Graph::inference();
        let t = self.tables(&mut g, store, dag)?;
        let codes = g.value(t.codes).clone();
        let onto = t.ontology.map(|v| g.value(v).clone());
        journeys
            .par_iter()
            .map(|j| {
                let mut g = Graph::inference();
                let tables = Tables {
                    codes: g.constant(codes.clone()),
                    ontology: onto.as_ref().map(|o| g.constant(o.clone())),
                };
                let out = self.forward(&mut g, store, tables, j, &mut Dropout::eval(), None)?;
                let probs = self.head.probabilities(&mut g, out.logits)?;
                let loss = sequence_loss(&mut g, probs, &j.labels, &vec![true; j.steps()])?;
                Ok((g.value(out.logits).clone(), g.value(loss).item()))
            })
            .collect()
    }

    /// The current `G` table (`None` without the ontology branch).
    pub fn ontology_table(&self, store: &ParamStore, dag: &OntologyDag) -> Result<Option<Tensor>> {
        let mut g = Graph::inference();
        let t = self.tables(&mut g, store, dag)?;
        Ok(t.ontology.map(|v| g.value(v).clone()))
    }
}
