use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use lightkg::checkpoint::Checkpoint;
use lightkg::config::RunConfig;
use lightkg::dataset::Corpus;
use lightkg::diagnostics::{self, RelationPath};
use lightkg::evaluator::{per_user_csv, EvalSplit, Evaluator};
use lightkg::experiment::{self, Prepared};
use lightkg::model::propagate;
use lightkg::trainer::{gradient_check, GradCheckOptions, StopReason};

#[derive(Parser)]
#[command(name = "lightkg", version, about = "Train and evaluate LightKG recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, epoch log and report
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation or test split
    Eval(EvalArgs),
    /// Train and test once per sparsity sampling ratio
    Sweep(SweepArgs),
    /// Coefficient variance, top relation scalars and optional KG ablation
    Diagnose(DiagnoseArgs),
    /// Finite-difference check of the analytic gradients on random graphs
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Interaction file: user, item, [rating, [timestamp]], tab separated
    #[arg(long, value_name = "PATH")]
    interactions: Option<PathBuf>,
    /// Knowledge-graph triplets: head, relation, tail
    #[arg(long, value_name = "PATH")]
    kg: Option<PathBuf>,
    /// Optional item-to-entity link file
    #[arg(long, value_name = "PATH")]
    links: Option<PathBuf>,
    /// Key = value configuration file; environment and flags override it
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_rating: Option<f64>,
    /// Reject link lines naming unknown items
    #[arg(long)]
    strict: bool,
    /// Worker threads (0 = all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Extra configuration as KEY=VALUE, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta_u: Option<f64>,
    #[arg(long)]
    beta_i: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Freeze every relation scalar at this value (1 gives LightGCN)
    #[arg(long)]
    fixed_scalars: Option<f64>,
    /// Cutoff for Recall@K and MRR@K
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Fraction of the interaction log kept for training
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long, value_name = "DIR", default_value = "lightkg-out")]
    out: PathBuf,
    /// Also write per-user test rankings to this CSV
    #[arg(long, value_name = "PATH")]
    per_user: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Validation,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    per_user: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated sampling ratios in (0, 1]
    #[arg(long, default_value = "0.8,0.4,0.2,0.1")]
    ratios: String,
    #[arg(long, value_name = "DIR", default_value = "lightkg-out")]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Number of relation scalars to list
    #[arg(long, default_value_t = 5)]
    top: usize,
    /// Also train with and without the KG and compare test metrics
    #[arg(long)]
    ablate_kg: bool,
    /// Raw id of a node whose neighbor-group variance to report
    #[arg(long, value_name = "ID")]
    anchor: Option<String>,
    /// Relation names followed from the anchor, separated by '/'
    #[arg(long, value_name = "R1/R2", default_value = "interact")]
    path: String,
    /// Print a table instead of JSON
    #[arg(long)]
    table: bool,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exit code 2 for usage problems, 1 for everything that fails later.
enum Failure {
    Usage(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<lightkg::Error> for Failure {
    fn from(e: lightkg::Error) -> Self {
        Failure::Run(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn resolve(data: &DataArgs, model: Option<&ModelArgs>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &data.config {
        cfg.apply_file(path).map_err(|e| usage(format!("--config: {e}")))?;
    }
    cfg.apply_env(std::env::vars()).map_err(|e| usage(format!("environment: {e}")))?;
    let mut set = |key: &str, value: String| cfg.set(key, &value).map_err(|e| usage(format!("--{key}: {e}")));
    macro_rules! flag {
        ($key:literal, $v:expr) => {
            if let Some(v) = &$v {
                set($key, v.to_string())?;
            }
        };
    }
    flag!("seed", data.seed);
    flag!("min_rating", data.min_rating);
    flag!("threads", data.threads);
    if let Some(m) = model {
        flag!("dim", m.dim);
        flag!("layers", m.layers);
        flag!("lr", m.lr);
        flag!("beta_u", m.beta_u);
        flag!("beta_i", m.beta_i);
        flag!("lambda", m.lambda);
        flag!("negatives", m.negatives);
        flag!("batch_size", m.batch_size);
        flag!("max_epochs", m.max_epochs);
        flag!("patience", m.patience);
        flag!("fixed_scalars", m.fixed_scalars);
        flag!("k", m.k);
    }
    for kv in &data.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v).map_err(|e| usage(format!("--set {kv}: {e}")))?;
    }
    if data.strict {
        cfg.strict = true;
    }
    if let Some(p) = &data.interactions {
        cfg.interactions = Some(p.clone());
    }
    if let Some(p) = &data.kg {
        cfg.kg = Some(p.clone());
    }
    if let Some(p) = &data.links {
        cfg.links = Some(p.clone());
    }
    Ok(cfg)
}

fn check_inputs(cfg: &RunConfig) -> CliResult<()> {
    let inter = cfg
        .interactions
        .as_ref()
        .ok_or_else(|| usage("missing dataset: pass --interactions PATH"))?;
    if !inter.is_file() {
        return Err(usage(format!("--interactions: no such file {}", inter.display())));
    }
    for (flag, p) in [("--kg", &cfg.kg), ("--links", &cfg.links)] {
        if let Some(p) = p {
            if !p.is_file() {
                return Err(usage(format!("{flag}: no such file {}", p.display())));
            }
        }
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(())
}

fn init_threads(n: usize) {
    if n > 0 {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn load(cfg: &RunConfig) -> CliResult<Corpus> {
    init_threads(cfg.threads);
    Ok(experiment::load_corpus(cfg).context("loading dataset")?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn dataset_summary(corpus: &Corpus, prepared: &Prepared) -> serde_json::Value {
    json!({
        "users": corpus.space.users,
        "items": corpus.space.items,
        "entities": corpus.space.entities,
        "relations": corpus.vocab.relations.len(),
        "interactions": corpus.interactions.len(),
        "kg_triplets": corpus.kg.len(),
        "train": prepared.split.train.len(),
        "validation": prepared.split.validation.len(),
        "test": prepared.split.test.len(),
        "pruned_validation": prepared.prune.validation_dropped,
        "pruned_test": prepared.prune.test_dropped,
    })
}

fn resolved_config(cfg: &RunConfig) -> serde_json::Value {
    json!({ "values": cfg, "seeds": cfg.seeds() })
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let mut cfg = resolve(&args.data, Some(&args.model))?;
    if let Some(r) = args.ratio {
        cfg.set("ratio", &r.to_string()).map_err(|e| usage(format!("--ratio: {e}")))?;
    }
    check_inputs(&cfg)?;
    let corpus = load(&cfg)?;
    let prepared = experiment::prepare(&corpus, &cfg)?;
    eprintln!(
        "train {} / validation {} / test {} interactions, {} KG triplets",
        prepared.split.train.len(),
        prepared.split.validation.len(),
        prepared.split.test.len(),
        corpus.kg.len()
    );
    let mut progress = |e: &lightkg::trainer::EpochRecord| {
        eprintln!(
            "epoch {:>4}  loss {:.6}  val recall {:.4}  mrr {:.4}  {:.2}s",
            e.epoch, e.loss.total, e.val_recall, e.val_mrr, e.train_seconds
        );
    };
    let out = experiment::run(&prepared, &cfg, Some(&mut progress))?;

    let ckpt = Checkpoint {
        layers: cfg.layers,
        space: corpus.space,
        data_seed: cfg.seed,
        sampling_ratio: cfg.ratio,
        params: out.params.clone(),
    };
    let bytes = ckpt.to_bytes();
    write(&args.out.join("model.ckpt"), &bytes)?;
    write(&args.out.join("epochs.jsonl"), out.log.to_jsonl())?;
    let report = json!({
        "command": "train",
        "config": resolved_config(&cfg),
        "dataset": dataset_summary(&corpus, &prepared),
        "best_epoch": out.log.best_epoch,
        "epochs_run": out.log.epochs.len(),
        "stopped": out.log.stopped_reason,
        "seconds_per_epoch": out.seconds_per_epoch(),
        "validation": out.validation,
        "test": out.test,
        "checkpoint_sha256": sha256_hex(&bytes),
    });
    write(&args.out.join("report.json"), serde_json::to_string_pretty(&report).expect("json"))?;
    if let Some(path) = &args.per_user {
        let state = propagate(&prepared.graph, &out.params.layer0, &out.params.scalars, cfg.layers)?;
        let ev = Evaluator::new(prepared.graph.space(), &prepared.split);
        let (results, _) = ev.rank_all(state.combined(), EvalSplit::Test, cfg.k)?;
        write(path, per_user_csv(&results, |n| corpus.raw_name(n).to_string()))?;
    }
    println!(
        "{}",
        json!({"validation": out.validation, "test": out.test, "out": args.out})
    );
    if let StopReason::NonFinite { epoch, detail } = &out.log.stopped_reason {
        return Err(Failure::Run(anyhow::anyhow!(
            "training aborted at epoch {epoch}: {detail}; best parameters were saved"
        )));
    }
    Ok(())
}

/// Rebuilds the training graph a checkpoint was produced on.
fn checkpoint_context(data: &DataArgs, model: Option<&ModelArgs>, path: &Path) -> CliResult<(RunConfig, Corpus, Prepared, Checkpoint)> {
    let mut cfg = resolve(data, model)?;
    check_inputs(&cfg)?;
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    cfg.seed = ckpt.data_seed;
    cfg.ratio = ckpt.sampling_ratio;
    cfg.layers = ckpt.layers;
    cfg.dim = ckpt.params.dim();
    let corpus = load(&cfg)?;
    if corpus.space != ckpt.space || corpus.vocab.relations.len() != ckpt.params.scalars.num_relations() {
        return Err(Failure::Run(anyhow::anyhow!(
            "checkpoint was trained on {} users / {} items / {} entities / {} relations, dataset has {} / {} / {} / {}",
            ckpt.space.users,
            ckpt.space.items,
            ckpt.space.entities,
            ckpt.params.scalars.num_relations(),
            corpus.space.users,
            corpus.space.items,
            corpus.space.entities,
            corpus.vocab.relations.len()
        )));
    }
    let prepared = experiment::prepare(&corpus, &cfg)?;
    Ok((cfg, corpus, prepared, ckpt))
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    if args.k == 0 {
        return Err(usage("--k must be positive"));
    }
    let (cfg, corpus, prepared, ckpt) = checkpoint_context(&args.data, None, &args.checkpoint)?;
    let which = match args.split {
        SplitArg::Validation => EvalSplit::Validation,
        SplitArg::Test => EvalSplit::Test,
    };
    let report = experiment::evaluate_params(&prepared, &ckpt.params, ckpt.layers, which, args.k)?;
    let doc = json!({ "command": "eval", "config": resolved_config(&cfg), "report": report });
    if let Some(dir) = &args.out {
        write(&dir.join("eval.json"), serde_json::to_string_pretty(&doc).expect("json"))?;
    }
    if let Some(path) = &args.per_user {
        let state = propagate(&prepared.graph, &ckpt.params.layer0, &ckpt.params.scalars, ckpt.layers)?;
        let ev = Evaluator::new(prepared.graph.space(), &prepared.split);
        let (results, _) = ev.rank_all(state.combined(), which, args.k)?;
        write(path, per_user_csv(&results, |n| corpus.raw_name(n).to_string()))?;
    }
    println!("{}", serde_json::to_string(&report).expect("json"));
    Ok(())
}

fn parse_ratios(text: &str) -> CliResult<Vec<f64>> {
    let ratios = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| usage(format!("--ratios: `{s}` is not a number"))))
        .collect::<CliResult<Vec<_>>>()?;
    experiment::validate_ratios(&ratios).map_err(|e| usage(format!("--ratios: {e}")))?;
    Ok(ratios)
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let ratios = parse_ratios(&args.ratios)?;
    let cfg = resolve(&args.data, Some(&args.model))?;
    check_inputs(&cfg)?;
    let corpus = load(&cfg)?;
    let mut on_row = |r: &experiment::SweepRow| {
        eprintln!(
            "ratio {:<5} recall {:.4} mrr {:.4} {:.3}s/epoch",
            r.ratio, r.recall, r.mrr, r.seconds_per_epoch
        );
    };
    let report = experiment::sweep_sparsity(&corpus, &cfg, &ratios, Some(&mut on_row))?;
    for (dense, sparse) in &report.violations {
        eprintln!("warning: recall rose from ratio {dense} to sparser ratio {sparse}");
    }
    let csv = report.to_csv();
    write(&args.out.join("sweep.csv"), &csv)?;
    let doc = json!({ "command": "sweep", "config": resolved_config(&cfg), "sweep": report });
    write(&args.out.join("report.json"), serde_json::to_string_pretty(&doc).expect("json"))?;
    print!("{csv}");
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> CliResult<()> {
    let (cfg, corpus, prepared, ckpt) = checkpoint_context(&args.data, Some(&args.model), &args.checkpoint)?;
    let report = diagnostics::diagnose(&prepared.graph, &ckpt.params.scalars, args.top)?;
    let mut doc = json!({
        "command": "diagnose",
        "config": resolved_config(&cfg),
        "diagnostics": report,
    });
    let mut table = report.to_table();
    if let Some(raw) = &args.anchor {
        let anchor = corpus
            .user_node(raw)
            .or_else(|| corpus.item_node(raw))
            .or_else(|| corpus.vocab.entities.get(raw).map(|e| corpus.space.entity(e as usize)))
            .ok_or_else(|| usage(format!("--anchor: unknown id `{raw}`")))?;
        let path = RelationPath::parse(&args.path, prepared.graph.relation_names())
            .map_err(|e| usage(format!("--path: {e}")))?;
        let group = diagnostics::path_coefficients(&prepared.graph, &ckpt.params.scalars, anchor, &path)?;
        let variance = diagnostics::population_variance(&group.values().copied().collect::<Vec<_>>())?;
        table.push_str(&format!("\ngroup of {raw} along {}: {} nodes, variance {variance:.6}\n", args.path, group.len()));
        doc["group"] = json!({ "anchor": raw, "path": args.path, "size": group.len(), "variance": variance });
    }
    if args.ablate_kg {
        let ablation = diagnostics::kg_ablation_run(&corpus, &cfg)?;
        table.push_str(&format!(
            "\nwith KG    recall {:.4} mrr {:.4}\nwithout KG recall {:.4} mrr {:.4}\nrecall improvement {:+.2}%\n",
            ablation.with_kg.recall_at_k,
            ablation.with_kg.mrr_at_k,
            ablation.without_kg.recall_at_k,
            ablation.without_kg.mrr_at_k,
            100.0 * ablation.recall_improvement
        ));
        doc["ablation"] = json!(ablation);
    }
    let text = serde_json::to_string_pretty(&doc).expect("json");
    if let Some(dir) = &args.out {
        write(&dir.join("diagnostics.json"), &text)?;
    }
    if args.table {
        print!("{table}");
    } else {
        println!("{text}");
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult<()> {
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..args.instances {
        let seed = args.seed.wrapping_add(i);
        let opts = GradCheckOptions {
            layers: (i % 4) as usize,
            dim: 2 + (i % 7) as usize,
            seed,
            ..GradCheckOptions::default()
        };
        let report = gradient_check(&opts, args.tolerance)?;
        worst = worst.max(report.max_rel_error());
        if !report.passed() {
            failures += 1;
            eprintln!("instance seed {seed}: failing {:?}", report.failing());
        }
    }
    println!(
        "{}",
        json!({ "instances": args.instances, "failures": failures, "max_rel_error": worst, "tolerance": args.tolerance })
    );
    if failures > 0 {
        return Err(Failure::Run(anyhow::anyhow!("{failures} instance(s) exceeded the tolerance")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
