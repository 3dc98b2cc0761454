//! End-to-end runs: load, split, sample, train, evaluate; sparsity sweeps and
//! small grid searches built on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ckg::CollaborativeKG;
use crate::config::RunConfig;
use crate::dataset::{
    load_dataset, load_item_links, sample_sparsity, split_811, Corpus, CorpusOptions, PruneStats, SamplingSpec,
    SplitDataset,
};
use crate::error::{Error, Result};
use crate::evaluator::{EvalReport, EvalSplit, Evaluator};
use crate::model::{propagate, Parameters};
use crate::trainer::{train_with_validator, EpochRecord, SplitValidator, StopReason, TrainLog};

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let inter = cfg
        .interactions
        .as_deref()
        .ok_or_else(|| Error::invalid("no interaction file configured"))?;
    load_corpus_from(inter, cfg.kg.as_deref(), cfg.links.as_deref(), cfg.min_rating, cfg.strict)
}

pub fn load_corpus_from(
    interactions: &Path,
    kg: Option<&Path>,
    links: Option<&Path>,
    min_rating: Option<f64>,
    strict: bool,
) -> Result<Corpus> {
    let (records, triplets) = load_dataset(interactions, kg, min_rating)?;
    let item_links = match links {
        Some(p) => load_item_links(p)?,
        None => Vec::new(),
    };
    Corpus::from_records(&records, &triplets, &CorpusOptions { strict, item_links })
}

/// Split (pruned and sampled) plus the training graph built from it.
pub struct Prepared {
    pub split: SplitDataset,
    pub prune: PruneStats,
    pub graph: CollaborativeKG,
}

/// Global 8:1:1 split, cold validation/test pairs dropped, then training
/// pairs subsampled to `cfg.ratio` of the full interaction list.
pub fn prepare(corpus: &Corpus, cfg: &RunConfig) -> Result<Prepared> {
    let seeds = cfg.seeds();
    let mut split = split_811(&corpus.interactions, seeds.split)?;
    let prune = split.prune_unrankable();
    let split = sample_sparsity(
        &split,
        SamplingSpec {
            ratio: cfg.ratio,
            seed: seeds.sampling,
        },
    )?;
    let graph = corpus.graph(&split.train)?;
    Ok(Prepared { split, prune, graph })
}

pub struct RunOutcome {
    pub params: Parameters,
    pub log: TrainLog,
    pub validation: EvalReport,
    pub test: EvalReport,
}

impl RunOutcome {
    pub fn seconds_per_epoch(&self) -> f64 {
        self.log.mean_train_seconds()
    }

    pub fn diverged(&self) -> bool {
        matches!(self.log.stopped_reason, StopReason::NonFinite { .. })
    }
}

pub fn evaluate_params(
    prepared: &Prepared,
    params: &Parameters,
    layers: usize,
    which: EvalSplit,
    k: usize,
) -> Result<EvalReport> {
    let state = propagate(&prepared.graph, &params.layer0, &params.scalars, layers)?;
    Evaluator::new(prepared.graph.space(), &prepared.split).evaluate(state.combined(), which, k)
}

pub fn run(prepared: &Prepared, cfg: &RunConfig, on_epoch: Option<&mut dyn FnMut(&EpochRecord)>) -> Result<RunOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    let train_cfg = cfg.train_config();
    let mut validator = SplitValidator::new(&prepared.graph, &prepared.split, cfg.k);
    let out = train_with_validator(
        &prepared.graph,
        &prepared.split.train,
        &model_cfg,
        &train_cfg,
        &mut validator,
        on_epoch,
    )?;
    let validation = evaluate_params(prepared, &out.params, cfg.layers, EvalSplit::Validation, cfg.k)?;
    let test = evaluate_params(prepared, &out.params, cfg.layers, EvalSplit::Test, cfg.k)?;
    Ok(RunOutcome {
        params: out.params,
        log: out.log,
        validation,
        test,
    })
}

pub fn run_corpus(corpus: &Corpus, cfg: &RunConfig) -> Result<RunOutcome> {
    let prepared = prepare(corpus, cfg)?;
    run(&prepared, cfg, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub train_interactions: usize,
    pub recall: f64,
    pub mrr: f64,
    pub seconds_per_epoch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Adjacent pairs, ordered from dense to sparse, whose sparser ratio
    /// scored a higher recall.
    pub violations: Vec<(f64, f64)>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ratio,recall,mrr,seconds_per_epoch\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.ratio, r.recall, r.mrr, r.seconds_per_epoch));
        }
        out
    }
}

pub fn validate_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.is_empty() {
        return Err(Error::invalid("no sampling ratios given"));
    }
    for &r in ratios {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::invalid(format!("sampling ratio {r} outside (0, 1]")));
        }
    }
    Ok(())
}

/// Pairs `(denser, sparser)` where recall increased as data got sparser.
pub fn monotone_violations(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| b.ratio.total_cmp(&a.ratio));
    sorted
        .windows(2)
        .filter(|w| w[1].recall > w[0].recall)
        .map(|w| (w[0].ratio, w[1].ratio))
        .collect()
}

/// Trains and tests once per ratio on the same base split. Test metrics are
/// reported.
pub fn sweep_sparsity(
    corpus: &Corpus,
    cfg: &RunConfig,
    ratios: &[f64],
    mut on_row: Option<&mut dyn FnMut(&SweepRow)>,
) -> Result<SweepReport> {
    validate_ratios(ratios)?;
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let c = RunConfig { ratio, ..cfg.clone() };
        let prepared = prepare(corpus, &c)?;
        let out = run(&prepared, &c, None)?;
        let row = SweepRow {
            ratio,
            train_interactions: prepared.split.train.len(),
            recall: out.test.recall_at_k,
            mrr: out.test.mrr_at_k,
            seconds_per_epoch: out.seconds_per_epoch(),
        };
        if let Some(f) = on_row.as_mut() {
            f(&row);
        }
        rows.push(row);
    }
    let violations = monotone_violations(&rows);
    Ok(SweepReport { rows, violations })
}

pub struct GridResult {
    pub config: RunConfig,
    pub outcome: RunOutcome,
}

/// Runs every candidate configuration and keeps the one with the best
/// validation Recall@K (ties by MRR, then by order).
pub fn grid_search(corpus: &Corpus, candidates: &[RunConfig]) -> Result<(GridResult, Vec<(RunConfig, EvalReport)>)> {
    let mut best: Option<GridResult> = None;
    let mut all = Vec::new();
    for c in candidates {
        let outcome = run_corpus(corpus, c)?;
        all.push((c.clone(), outcome.validation.clone()));
        let better = best.as_ref().is_none_or(|b| {
            let (v, bv) = (&outcome.validation, &b.outcome.validation);
            v.recall_at_k > bv.recall_at_k || (v.recall_at_k == bv.recall_at_k && v.mrr_at_k > bv.mrr_at_k)
        });
        if better {
            best = Some(GridResult {
                config: c.clone(),
                outcome,
            });
        }
    }
    best.map(|b| (b, all)).ok_or_else(|| Error::invalid("empty configuration grid"))
}
