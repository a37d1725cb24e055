//! Training, evaluation and ablation runs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{AblationFlags, RunConfig};
use crate::data::{generate_corpus, read_corpus, split_corpus, Grouper, PatientJourney, Split, TransitionModel};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::Graph;
use crate::metrics::{accuracy_at_k, Metrics};
use crate::model::{PreparedJourney, SetorModel};
use crate::nn::Dropout;
use crate::ontology::OntologyDag;
use crate::optim::Adadelta;
use crate::params::ParamStore;

/// Best-epoch parameters inside an output directory.
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Independent seed for one purpose, derived from the run seed.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(u64::MAX - purpose);
    r.random()
}

const SEED_INIT: u64 = 1;
const SEED_SHUFFLE: u64 = 2;
const SEED_DROPOUT: u64 = 3;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub ontology: OntologyDag,
    pub grouper: Grouper,
    pub journeys: Vec<PatientJourney>,
    /// The generating process, when the corpus is synthetic.
    pub process: Option<TransitionModel>,
}

impl Dataset {
    /// Reads the configured files, or generates the synthetic corpus.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        if cfg.data.from_files()? {
            let path = |p: &Option<PathBuf>| p.clone().expect("checked by from_files");
            let ontology = OntologyDag::load(&path(&cfg.data.ontology))?;
            let grouper = Grouper::load(&path(&cfg.data.grouper))?;
            let journeys = read_corpus(&path(&cfg.data.corpus))?;
            Ok(Self { ontology, grouper, journeys, process: None })
        } else {
            let c = generate_corpus(&cfg.generator, cfg.seed)?;
            Ok(Self {
                ontology: c.ontology,
                grouper: c.grouper,
                journeys: c.journeys,
                process: Some(c.model),
            })
        }
    }

    pub fn split(&self, cfg: &RunConfig) -> Result<Split> {
        split_corpus(self.journeys.len(), cfg.train.train_fraction, cfg.seed)
    }

    /// Journeys of `indices`, truncated as the model sees them.
    pub fn subset(&self, indices: &[usize], max_len: usize) -> Vec<PatientJourney> {
        indices.iter().map(|&i| self.journeys[i].truncated(max_len)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub ablation: AblationFlags,
    pub parameters: usize,
    pub split_sizes: [usize; 3],
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub select_k: usize,
    pub best_valid_accuracy: f64,
    pub checkpoint: Option<String>,
    pub test: Metrics,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A trained model with its best-epoch parameters loaded.
#[derive(Debug)]
pub struct Trained {
    pub model: SetorModel,
    pub store: ParamStore,
    pub report: TrainReport,
}

pub fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<(SetorModel, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_INIT));
    let labels = data.grouper.category_count();
    let model = SetorModel::new(
        &mut store,
        &data.ontology,
        labels,
        &cfg.model,
        &cfg.solver,
        &cfg.ablation,
        &mut rng,
    )?;
    Ok((model, store))
}

pub fn prepare_all(model: &SetorModel, data: &Dataset) -> Result<Vec<PreparedJourney>> {
    data.journeys.iter().map(|j| model.prepare(j, &data.grouper)).collect()
}

/// Metrics of `journeys` in evaluation mode (no dropout).
pub fn evaluate(
    model: &SetorModel,
    store: &ParamStore,
    dag: &OntologyDag,
    journeys: &[PreparedJourney],
    ks: &[usize],
    split: &str,
) -> Result<Metrics> {
    if journeys.is_empty() {
        return Err(Error::Config(format!("the {split} split is empty")));
    }
    let outputs = model.predict(store, dag, journeys)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut loss = 0.0;
    for ((logits, l), j) in outputs.iter().zip(journeys) {
        scores.extend(logits.to_rows());
        labels.extend(j.label_sets.iter().cloned());
        loss += l;
    }
    let accuracy = ks
        .iter()
        .map(|&k| accuracy_at_k(&scores, &labels, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics {
        split: split.to_string(),
        ks: ks.to_vec(),
        accuracy,
        loss: loss / journeys.len() as f64,
        patients: journeys.len(),
        steps: scores.len(),
    })
}

fn pick(all: &[PreparedJourney], idx: &[usize]) -> Vec<PreparedJourney> {
    idx.iter().map(|&i| all[i].clone()).collect()
}

/// Minibatch Adadelta training with per-epoch validation. The parameters of
/// the best validation epoch are kept (and written to `out_dir`, if given);
/// the test split is evaluated once, at the end.
pub fn train(cfg: &RunConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<Trained> {
    cfg.validate()?;
    let (model, mut store) = build_model(cfg, data)?;
    let prepared = prepare_all(&model, data)?;
    let split = data.split(cfg)?;
    if split.train.is_empty() || split.valid.is_empty() || split.test.is_empty() {
        return Err(Error::Config(format!(
            "{} patients leave an empty split ({}/{}/{})",
            data.journeys.len(),
            split.train.len(),
            split.valid.len(),
            split.test.len()
        )));
    }
    let train_set = pick(&prepared, &split.train);
    let valid_set = pick(&prepared, &split.valid);
    let mut opt = Adadelta::new(cfg.train.optimizer)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_SHUFFLE));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_DROPOUT));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut best: Option<(usize, f64, Vec<crate::Tensor>)> = None;
    let checkpoint_path = out_dir.map(|d| d.join(BEST_CHECKPOINT));
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for epoch in 1..=cfg.train.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<&PreparedJourney> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut dropout = Dropout::train(cfg.model.dropout, ChaCha8Rng::seed_from_u64(dropout_rng.random()));
            store.zero_grad();
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &store, &data.ontology, &batch, &mut dropout)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { param: format!("training loss at epoch {epoch}"), index: 0 });
            }
            total += value * batch.len() as f64;
            g.backward(loss, &mut store)?;
            opt.step(&mut store)?;
        }
        let valid = evaluate(&model, &store, &data.ontology, &valid_set, &cfg.train.ks, "valid")?;
        let score = match valid.at(cfg.train.select_k) {
            Some(a) => a,
            None => evaluate(&model, &store, &data.ontology, &valid_set, &[cfg.train.select_k], "valid")?.accuracy[0],
        };
        if best.as_ref().is_none_or(|b| score > b.1) {
            best = Some((epoch, score, store.snapshot()));
            if let Some(p) = &checkpoint_path {
                checkpoint::write_store(&store, p)?;
            }
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            valid,
        });
    }
    let (best_epoch, best_valid_accuracy, values) = best.expect("at least one epoch");
    store.restore(&values)?;
    let test_set = pick(&prepared, &split.test);
    let test = evaluate(&model, &store, &data.ontology, &test_set, &cfg.train.ks, "test")?;
    let report = TrainReport {
        seed: cfg.seed,
        ablation: cfg.ablation,
        parameters: store.num_scalars(),
        split_sizes: [split.train.len(), split.valid.len(), split.test.len()],
        epochs,
        best_epoch,
        select_k: cfg.train.select_k,
        best_valid_accuracy,
        checkpoint: checkpoint_path.map(|p| p.display().to_string()),
        test,
    };
    Ok(Trained { model, store, report })
}

/// Metrics of a saved checkpoint on one split (`train`, `valid` or `test`).
pub fn evaluate_checkpoint(cfg: &RunConfig, data: &Dataset, path: &Path, split_name: &str) -> Result<Metrics> {
    cfg.validate()?;
    let (model, mut store) = build_model(cfg, data)?;
    checkpoint::load_into(&mut store, &checkpoint::read(path)?)?;
    let split = data.split(cfg)?;
    let idx = match split_name {
        "train" => &split.train,
        "valid" => &split.valid,
        "test" => &split.test,
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    };
    let prepared = prepare_all(&model, data)?;
    evaluate(&model, &store, &data.ontology, &pick(&prepared, idx), &cfg.train.ks, split_name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub ablation: AblationFlags,
    pub best_epoch: usize,
    pub test: Metrics,
    pub positional_lookups: usize,
    pub ontology_embeddings: usize,
}

/// The full model and its five single-component removals, trained on the
/// same corpus, seed and split.
pub fn ablate(cfg: &RunConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(6);
    for (name, flags) in AblationFlags::variants() {
        let mut c = cfg.clone();
        c.ablation = flags;
        let dir = out_dir.map(|d| d.join(name));
        let t = train(&c, data, dir.as_deref())?;
        rows.push(AblationRow {
            variant: name.to_string(),
            ablation: flags,
            best_epoch: t.report.best_epoch,
            test: t.report.test.clone(),
            positional_lookups: t.model.counters.positional_lookups(),
            ontology_embeddings: t.model.counters.ontology_embeddings(),
        });
    }
    Ok(rows)
}

/// Plain-text comparison table of Accuracy@k per variant.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant");
    if let Some(r) = rows.first() {
        for k in &r.test.ks {
            s.push_str(&format!("\tacc@{k}"));
        }
    }
    s.push('\n');
    for r in rows {
        s.push_str(&r.variant);
        for a in &r.test.accuracy {
            s.push_str(&format!("\t{:.4}", a));
        }
        s.push('\n');
    }
    s
}

/// Small configuration for the full-pipeline gradient check: d = 8, two
/// heads, one journey layer, three-visit journeys, no dropout.
pub fn gradcheck_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 11;
    c.model.d = 8;
    c.model.heads = 2;
    c.model.layers = 1;
    c.model.dropout = 0.0;
    c.model.max_codes = 8;
    c.model.max_journey_len = 3;
    c.generator.patients = 12;
    c.generator.leaves = 24;
    c.generator.categories = 6;
    c.generator.top_categories = 3;
    c.generator.mean_codes = 4.0;
    c.generator.max_codes = 8;
    c.generator.mean_visits = 4.0;
    c.generator.interval_median = 4.0;
    c.generator.los_median = 2.0;
    c
}

/// Central-difference check of the training loss of the first `patients`
/// journeys with at least `max_journey_len` visits, over every parameter.
pub fn pipeline_grad_check(cfg: &RunConfig, data: &Dataset, patients: usize) -> Result<GradCheckReport> {
    cfg.validate()?;
    let (model, mut store) = build_model(cfg, data)?;
    let len = cfg.model.max_journey_len;
    let chosen = data
        .journeys
        .iter()
        .filter(|j| j.visits.len() >= len)
        .take(patients)
        .map(|j| model.prepare(j, &data.grouper))
        .collect::<Result<Vec<_>>>()?;
    if chosen.len() < patients {
        return Err(Error::Config(format!("fewer than {patients} journeys have {len} visits")));
    }
    let ids: Vec<_> = store.ids().collect();
    let batch: Vec<&PreparedJourney> = chosen.iter().collect();
    grad_check(&mut store, &ids, 1e-5, |g, s| {
        model.batch_loss(g, s, &data.ontology, &batch, &mut Dropout::eval())
    })
}
