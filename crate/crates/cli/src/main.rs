//! `setor`: generate corpora, train, evaluate, ablate, check gradients and
//! export embeddings.
//!
//! Failures print one JSON line to stderr,
//! `{"error":"<kind>","message":"<text>"}`, and exit with 2 for usage errors
//! (bad flags, overrides, configs or input files) or 1 otherwise.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use setor::checkpoint;
use setor::config::RunConfig;
use setor::data::write_corpus;
use setor::trainer::{
    ablate, ablation_table, build_model, evaluate_checkpoint, gradcheck_config, pipeline_grad_check, train,
    Dataset,
};
use setor::Error;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "setor", version, about = "Sequential diagnosis prediction")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set model.d=32`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Root seed, applied after the overrides.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Write a synthetic corpus, its grouper and ontology.
    Generate,
    /// Train and keep the best validation checkpoint.
    Train,
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Train the full model and the five ablated variants.
    Ablate,
    /// Finite-difference check of the whole pipeline on a small model.
    Gradcheck,
    /// Write the ontology (G) and code (M) embedding rows of a checkpoint.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Verb {
    fn name(&self) -> &'static str {
        match self {
            Verb::Generate => "generate",
            Verb::Train => "train",
            Verb::Eval { .. } => "eval",
            Verb::Ablate => "ablate",
            Verb::Gradcheck => "gradcheck",
            Verb::ExportEmbeddings { .. } => "export-embeddings",
        }
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, kind: "usage", message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::OntologyParse { .. }
            | Error::OntologyCycle { .. }
            | Error::OntologyOrphan(_)
            | Error::Ontology(_)
            | Error::CorpusParse { .. }
            | Error::Journey { .. }
            | Error::Labels(_) => "data",
            _ => "runtime",
        };
        Self { code: 1, kind, message: e.to_string() }
    }
}

/// Setup errors are the caller's fault: bad config, missing or malformed
/// inputs.
fn setup<T>(r: setor::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        f.code = 2;
        f
    })
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match (&cli.config, &cli.verb) {
        (Some(p), _) => setup(RunConfig::load(p))?,
        (None, Verb::Gradcheck) => gradcheck_config(),
        (None, _) => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| Failure::usage(e.to_string()))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    setup(cfg.validate())?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::from(Error::Io { path: path.to_path_buf(), source: e }))
}

fn write_manifest(out: &Path, verb: &str, cfg: &RunConfig, toml: &str, outputs: &[&str]) -> Result<(), Failure> {
    let manifest = json!({
        "verb": verb,
        "config_sha256": hex::encode(Sha256::digest(toml.as_bytes())),
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "outputs": outputs,
    });
    write(&out.join("manifest.json"), &format!("{manifest:#}\n"))
}

fn embedding_rows(labels: impl Fn(usize) -> (String, usize), table: &setor::Tensor) -> String {
    let mut s = String::new();
    for (i, row) in table.to_rows().iter().enumerate() {
        let (leaf, cat) = labels(i);
        let reals: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        s.push_str(&format!("{leaf}\t{cat}\t{}\n", reals.join(",")));
    }
    s
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve_config(&cli)?;
    let toml = cfg.to_toml().map_err(Failure::from)?;
    let out = cli.out.as_path();
    let verb = cli.verb.name();
    // inputs are read before anything is written
    let data = setup(Dataset::load(&cfg))?;
    if let Verb::Eval { checkpoint: p, .. } | Verb::ExportEmbeddings { checkpoint: p } = &cli.verb {
        setup(checkpoint::read(p))?;
    }
    fs::create_dir_all(out).map_err(|e| Failure::from(Error::Io { path: out.to_path_buf(), source: e }))?;
    write(&out.join("config.toml"), &toml)?;
    let outputs: Vec<&str> = match &cli.verb {
        Verb::Generate => {
            write_corpus(&data.journeys, &out.join("corpus.jsonl"))?;
            data.grouper.save(&out.join("grouper.tsv"))?;
            data.ontology.save(&out.join("ontology.txt"))?;
            println!("{} patients, {} leaves, {} categories", data.journeys.len(), data.ontology.leaf_count(), data.grouper.category_count());
            vec!["corpus.jsonl", "grouper.tsv", "ontology.txt"]
        }
        Verb::Train => {
            let t = train(&cfg, &data, Some(out))?;
            write(&out.join("report.json"), &t.report.to_json()?)?;
            for e in &t.report.epochs {
                println!("epoch {}\tloss {:.6}\tvalid@{} {:.4}", e.epoch, e.train_loss, cfg.train.select_k, e.valid.at(cfg.train.select_k).unwrap_or(f64::NAN));
            }
            println!("best epoch {}", t.report.best_epoch);
            for (k, a) in t.report.test.ks.iter().zip(&t.report.test.accuracy) {
                println!("test acc@{k} {a:.4}");
            }
            vec!["best.ckpt", "report.json"]
        }
        Verb::Eval { checkpoint: p, split } => {
            let m = evaluate_checkpoint(&cfg, &data, p, split.as_str())?;
            let text = serde_json::to_string_pretty(&m).map_err(|e| Failure::from(Error::from(e)))?;
            write(&out.join("metrics.json"), &text)?;
            println!("{text}");
            vec!["metrics.json"]
        }
        Verb::Ablate => {
            let rows = ablate(&cfg, &data, Some(out))?;
            let table = ablation_table(&rows);
            write(&out.join("ablation.tsv"), &table)?;
            let text = serde_json::to_string_pretty(&rows).map_err(|e| Failure::from(Error::from(e)))?;
            write(&out.join("ablation.json"), &text)?;
            print!("{table}");
            vec!["ablation.tsv", "ablation.json"]
        }
        Verb::Gradcheck => {
            let r = pipeline_grad_check(&cfg, &data, 2)?;
            for (name, err) in &r.per_param {
                println!("{name}\t{err:.3e}");
            }
            println!("max_relative_error {:.3e} over {} entries", r.max_relative_error, r.entries_checked);
            write_manifest(out, verb, &cfg, &toml, &["config.toml"])?;
            if r.max_relative_error >= GRADCHECK_TOLERANCE {
                return Err(Failure {
                    code: 1,
                    kind: "gradcheck",
                    message: format!("max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}", r.max_relative_error),
                });
            }
            vec![]
        }
        Verb::ExportEmbeddings { checkpoint: p } => {
            let (model, mut store) = build_model(&cfg, &data)?;
            checkpoint::load_into(&mut store, &checkpoint::read(p)?)?;
            let dag = &data.ontology;
            let labels = |i: usize| (dag.leaf_label(i).to_string(), data.grouper.category(i).unwrap_or(dag.category_of(i)));
            write(&out.join("codes.tsv"), &embedding_rows(labels, store.value(model.code_embedding)))?;
            let mut written = vec!["codes.tsv"];
            if let Some(g) = model.ontology_table(&store, dag)? {
                write(&out.join("ontology.tsv"), &embedding_rows(labels, &g))?;
                written.push("ontology.tsv");
            }
            println!("{} leaves exported", dag.leaf_count());
            written
        }
    };
    let mut all = vec!["config.toml"];
    all.extend(outputs);
    write_manifest(out, verb, &cfg, &toml, &all)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({"error": f.kind, "message": f.message}));
            ExitCode::from(f.code)
        }
    }
}
