//! Mini-batch Adam training with early stopping on validation Recall@K.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ckg::{CollaborativeKG, NodeId, NodeKind};
use crate::dataset::{SplitDataset, UserItems};
use crate::error::{Error, Result};
use crate::evaluator::{EvalSplit, Evaluator};
use crate::matrix::Matrix;
use crate::model::{init_parameters, propagate, EmbeddingState, ModelConfig, Parameters, RelationScalars};
use crate::objective::{
    sample_contrast_pairs, total_loss, total_loss_and_grads, total_loss_and_grads_in, Workspace, ContrastPair, ContrastPairBatch, Gradients,
    LossBreakdown, ObjectiveConfig, TripletBatch,
};
use crate::synthetic::random_ckg;

pub const LEARNING_RATE_GRID: [f64; 5] = [0.01, 0.005, 0.001, 0.0005, 0.0001];
pub const LAYER_GRID: [usize; 4] = [1, 2, 3, 4];
pub const NEGATIVES_GRID: [usize; 4] = [1, 2, 5, 10];
pub const BETA_GRID: [f64; 6] = [1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9];

const NEGATIVE_RETRIES: usize = 100;

/// How the sampled-pair mean of a contrastive term is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastReduction {
    /// Mean over sampled pairs.
    #[default]
    Mean,
    /// Mean times the number of ordered node pairs: an unbiased estimate of
    /// the sum over all pairs.
    SumEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub num_negatives: usize,
    pub beta_u: f64,
    pub beta_i: f64,
    pub lambda: f64,
    pub stopping_patience: usize,
    pub max_epochs: usize,
    /// Contrastive pairs sampled per step and node kind; 0 means `2 * batch_size`.
    pub pair_samples: usize,
    pub contrast_reduction: ContrastReduction,
    /// Freeze every relation scalar at this value.
    pub fixed_scalars: Option<f64>,
    pub eval_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            batch_size: 2048,
            num_negatives: 1,
            // mean form; under SumEstimate use the 1e-4..1e-9 grid instead
            beta_u: 0.1,
            beta_i: 0.1,
            lambda: 1e-5,
            stopping_patience: 20,
            max_epochs: 500,
            pair_samples: 0,
            contrast_reduction: ContrastReduction::Mean,
            fixed_scalars: None,
            eval_k: 10,
            seed: 2024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be a finite non-negative number");
        }
        if self.batch_size == 0 || self.num_negatives == 0 {
            return bad("batch size and negative count must be positive");
        }
        if self.stopping_patience == 0 {
            return bad("stopping patience must be at least 1");
        }
        if self.eval_k == 0 {
            return bad("K must be at least 1");
        }
        for (name, v) in [("beta_u", self.beta_u), ("beta_i", self.beta_i), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn pairs_per_step(&self) -> usize {
        if self.pair_samples == 0 {
            2 * self.batch_size
        } else {
            self.pair_samples
        }
    }

    fn objective(&self, layers: usize) -> ObjectiveConfig {
        ObjectiveConfig {
            layers,
            beta_u: self.beta_u,
            beta_i: self.beta_i,
            lambda: self.lambda,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_values: usize) -> Self {
        Self {
            m: vec![0.0; num_values],
            v: vec![0.0; num_values],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place. `grads` must have the same length.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.update_parts(&mut [(params, grads)], lr);
    }

    /// One step over several parameter blocks laid out back to back in the
    /// moment buffers.
    pub fn update_parts(&mut self, parts: &mut [(&mut [f64], &[f64])], lr: f64) {
        debug_assert_eq!(parts.iter().map(|p| p.0.len()).sum::<usize>(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut offset = 0;
        for (params, grads) in parts.iter_mut() {
            let n = params.len();
            let m = &mut self.m[offset..offset + n];
            let v = &mut self.v[offset..offset + n];
            params
                .par_iter_mut()
                .zip(grads.par_iter())
                .zip(m.par_iter_mut().zip(v.par_iter_mut()))
                .for_each(|((p, &g), (m, v))| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
            offset += n;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_recall: f64,
    pub val_mrr: f64,
    /// Wall-clock seconds of the optimisation pass (evaluation excluded).
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub skipped_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    NonFinite { epoch: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the restored parameters; 0 when none was evaluated.
    pub best_epoch: usize,
    pub stopped_reason: StopReason,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn mean_train_seconds(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.train_seconds).sum::<f64>() / self.epochs.len() as f64
    }

    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("serialisable") + "\n")
            .collect()
    }
}

pub struct TrainOutcome {
    pub params: Parameters,
    pub log: TrainLog,
}

impl TrainOutcome {
    pub fn embeddings(&self, g: &CollaborativeKG, layers: usize) -> Result<EmbeddingState> {
        propagate(g, &self.params.layer0, &self.params.scalars, layers)
    }
}

/// Validation score used for model selection: `(recall, mrr)`.
pub trait Validator {
    fn validate(&mut self, g: &CollaborativeKG, params: &Parameters, layers: usize) -> Result<(f64, f64)>;
}

impl<F> Validator for F
where
    F: FnMut(&CollaborativeKG, &Parameters, usize) -> Result<(f64, f64)>,
{
    fn validate(&mut self, g: &CollaborativeKG, params: &Parameters, layers: usize) -> Result<(f64, f64)> {
        self(g, params, layers)
    }
}

/// Full-rank validation Recall@K / MRR@K.
pub struct SplitValidator {
    evaluator: Evaluator,
    k: usize,
}

impl SplitValidator {
    pub fn new(g: &CollaborativeKG, split: &SplitDataset, k: usize) -> Self {
        Self {
            evaluator: Evaluator::new(g.space(), split),
            k,
        }
    }
}

impl Validator for SplitValidator {
    fn validate(&mut self, g: &CollaborativeKG, params: &Parameters, layers: usize) -> Result<(f64, f64)> {
        let state = propagate(g, &params.layer0, &params.scalars, layers)?;
        match self.evaluator.evaluate(state.combined(), EvalSplit::Validation, self.k) {
            Ok(r) => Ok((r.recall_at_k, r.mrr_at_k)),
            // nothing to validate on: every epoch ties
            Err(Error::Empty(_)) => Ok((0.0, 0.0)),
            Err(e) => Err(e),
        }
    }
}

/// Draws a negative item for `u` uniformly among items it has no training
/// interaction with.
fn sample_negative<R: Rng + ?Sized>(rng: &mut R, g: &CollaborativeKG, train: &UserItems, u: NodeId) -> Option<NodeId> {
    let space = g.space();
    for _ in 0..NEGATIVE_RETRIES {
        let cand = space.item(rng.gen_range(0..space.items));
        if !train.contains(u, cand) {
            return Some(cand);
        }
    }
    None
}

fn scale_for(reduction: ContrastReduction, population: usize) -> f64 {
    match reduction {
        ContrastReduction::Mean => 1.0,
        ContrastReduction::SumEstimate => (population * population.saturating_sub(1)) as f64,
    }
}

/// Prepared per-run state shared by every epoch.
struct Session<'a> {
    g: &'a CollaborativeKG,
    cfg: &'a TrainConfig,
    objective: ObjectiveConfig,
    train: UserItems,
    positives: Vec<(NodeId, NodeId)>,
    users: Vec<NodeId>,
    items: Vec<NodeId>,
    frozen_rows: Vec<usize>,
    workspace: Workspace,
}

impl Session<'_> {
    fn contrast(&self, kind: NodeKind, beta: f64, rng: &mut ChaCha8Rng) -> Result<ContrastPairBatch> {
        let cands = if kind == NodeKind::User { &self.users } else { &self.items };
        if beta == 0.0 {
            return Ok(ContrastPairBatch::empty(kind));
        }
        let scale = scale_for(self.cfg.contrast_reduction, cands.len());
        sample_contrast_pairs(self.g, kind, cands, self.cfg.pairs_per_step(), scale, rng)
    }

    fn apply(&self, params: &mut Parameters, grads: &mut Gradients, adam: &mut AdamState) {
        for &r in &self.frozen_rows {
            grads.layer0.row_mut(r).fill(0.0);
        }
        let lr = self.cfg.learning_rate;
        if self.cfg.fixed_scalars.is_some() {
            let mut keep = params.scalars.slots().to_vec();
            grads.scalars.iter_mut().for_each(|g| *g = 0.0);
            adam.update_parts(
                &mut [
                    (params.layer0.as_mut_slice(), grads.layer0.as_slice()),
                    (&mut keep, &grads.scalars),
                ],
                lr,
            );
        } else {
            adam.update_parts(
                &mut [
                    (params.layer0.as_mut_slice(), grads.layer0.as_slice()),
                    (params.scalars.slots_mut(), &grads.scalars),
                ],
                lr,
            );
        }
    }

    /// One pass over the shuffled training positives.
    fn epoch(
        &mut self,
        params: &mut Parameters,
        adam: &mut AdamState,
        rng: &mut ChaCha8Rng,
    ) -> Result<(LossBreakdown, usize)> {
        self.positives.shuffle(rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        let mut skipped = 0usize;
        let positives = std::mem::take(&mut self.positives);
        for chunk in positives.chunks(self.cfg.batch_size) {
            let mut triplets = TripletBatch {
                entries: Vec::with_capacity(chunk.len() * self.cfg.num_negatives),
            };
            for &(u, i) in chunk {
                for _ in 0..self.cfg.num_negatives {
                    match sample_negative(rng, self.g, &self.train, u) {
                        Some(j) => triplets.entries.push((u, i, j)),
                        None => skipped += 1,
                    }
                }
            }
            let user_pairs = self.contrast(NodeKind::User, self.cfg.beta_u, rng)?;
            let item_pairs = self.contrast(NodeKind::Item, self.cfg.beta_i, rng)?;
            let loss = total_loss_and_grads_in(
                &mut self.workspace,
                self.g,
                params,
                &self.objective,
                &triplets,
                &user_pairs,
                &item_pairs,
            )?;
            let mut grads = std::mem::take(&mut self.workspace.grads);
            self.apply(params, &mut grads, adam);
            self.workspace.grads = grads;
            sum.bpr += loss.bpr;
            sum.contrast_user += loss.contrast_user;
            sum.contrast_item += loss.contrast_item;
            sum.reg += loss.reg;
            sum.total += loss.total;
            batches += 1;
        }
        self.positives = positives;
        let n = batches.max(1) as f64;
        Ok((
            LossBreakdown {
                bpr: sum.bpr / n,
                contrast_user: sum.contrast_user / n,
                contrast_item: sum.contrast_item / n,
                reg: sum.reg / n,
                total: sum.total / n,
            },
            skipped,
        ))
    }
}

/// Trains with full-rank validation on `split.validation`.
pub fn train(
    g: &CollaborativeKG,
    split: &SplitDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut validator = SplitValidator::new(g, split, train_cfg.eval_k);
    train_with_validator(g, &split.train, model_cfg, train_cfg, &mut validator, None)
}

pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Training loop with a caller-supplied validation score and an optional
/// per-epoch hook. The best-validation parameters are restored at exit;
/// ties on recall are broken by MRR, then by the earlier epoch.
pub fn train_with_validator(
    g: &CollaborativeKG,
    positives: &[(NodeId, NodeId)],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    validator: &mut dyn Validator,
    mut on_epoch: Option<EpochHook<'_>>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if positives.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut params = init_parameters(g, model_cfg)?;
    if let Some(v) = train_cfg.fixed_scalars {
        params.scalars = RelationScalars::constant(g.num_relations(), v);
    }
    let frozen_rows = (0..g.num_nodes())
        .filter(|&k| g.degree(NodeId(k as u32)) == 0)
        .collect();
    let mut session = Session {
        g,
        cfg: train_cfg,
        objective: train_cfg.objective(model_cfg.layers),
        train: UserItems::new(g.space(), positives),
        positives: positives.to_vec(),
        users: g.connected_nodes(NodeKind::User),
        items: g.connected_nodes(NodeKind::Item),
        frozen_rows,
        workspace: Workspace::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut adam = AdamState::new(params.num_values());

    let mut best: Option<(f64, f64, usize, Parameters)> = None;
    let mut epochs = Vec::new();
    let mut stopped_reason = StopReason::MaxEpochs;
    for epoch in 1..=train_cfg.max_epochs {
        let start = Instant::now();
        let (loss, skipped) = match session.epoch(&mut params, &mut adam, &mut rng) {
            Ok(v) => v,
            Err(Error::NonFinite { component, value }) => {
                stopped_reason = StopReason::NonFinite {
                    epoch,
                    detail: format!("{component} = {value}"),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        let train_seconds = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let (val_recall, val_mrr) = validator.validate(g, &params, model_cfg.layers)?;
        let record = EpochRecord {
            epoch,
            loss,
            val_recall,
            val_mrr,
            train_seconds,
            eval_seconds: start.elapsed().as_secs_f64(),
            skipped_negatives: skipped,
        };
        if let Some(hook) = on_epoch.as_mut() {
            hook(&record);
        }
        epochs.push(record);
        let improved = match &best {
            None => true,
            Some((r, m, _, _)) => val_recall > *r || (val_recall == *r && val_mrr > *m),
        };
        if improved {
            best = Some((val_recall, val_mrr, epoch, params.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.2) >= train_cfg.stopping_patience {
            stopped_reason = StopReason::Patience;
            break;
        }
    }
    let (best_epoch, params) = match best {
        Some((_, _, e, p)) => (e, p),
        None => {
            // diverged before the first evaluation: fall back to the initial state
            let mut p = init_parameters(g, model_cfg)?;
            if let Some(v) = train_cfg.fixed_scalars {
                p.scalars = RelationScalars::constant(g.num_relations(), v);
            }
            (0, p)
        }
    };
    Ok(TrainOutcome {
        params,
        log: TrainLog {
            epochs,
            best_epoch,
            stopped_reason,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Embedding,
    ForwardScalar,
    BackwardScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub dim: usize,
    pub layers: usize,
    pub max_nodes: usize,
    pub beta_u: f64,
    pub beta_i: f64,
    pub lambda: f64,
    pub epsilon: f64,
    /// Entries with `max(|analytic|, |numeric|)` below this are compared
    /// absolutely against `tolerance * floor`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            dim: 4,
            layers: 2,
            max_nodes: 20,
            beta_u: 0.7,
            beta_i: 0.4,
            lambda: 0.05,
            epsilon: 1e-4,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: ParamClass,
    pub entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub classes: Vec<ClassReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.classes.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> Vec<ParamClass> {
        self.classes.iter().filter(|c| !c.passed).map(|c| c.class).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.classes.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference check of every gradient entry of the full objective on
/// a random small CKG.
pub fn gradient_check(opts: &GradCheckOptions, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let g = random_ckg(&mut rng, opts.max_nodes)?;
    let model_cfg = ModelConfig {
        dim: opts.dim,
        layers: opts.layers,
        init_seed: rng.gen(),
    };
    let mut params = init_parameters(&g, &model_cfg)?;
    // spread magnitudes beyond the Xavier range so every term matters
    for x in params.layer0.as_mut_slice() {
        *x = rng.gen_range(-1.0..1.0);
    }
    let space = g.space();
    let interactions: Vec<_> = g.interactions().collect();
    let train = UserItems::new(space, &interactions);
    let mut triplets = TripletBatch::default();
    for &(u, i) in &interactions {
        if let Some(j) = sample_negative(&mut rng, &g, &train, u) {
            triplets.entries.push((u, i, j));
        }
    }
    let pairs = |kind: NodeKind, rng: &mut ChaCha8Rng| -> Result<ContrastPairBatch> {
        let cands = g.connected_nodes(kind);
        let mut b = sample_contrast_pairs(&g, kind, &cands, 6, 1.0, rng)?;
        // overlap statistics are constants of the graph; perturb them so the
        // exponent and the weight are both non-trivial
        b.pairs = b
            .pairs
            .into_iter()
            .map(|p| ContrastPair {
                s: p.s * 0.5,
                w: 0.25 + p.w * 0.5,
                ..p
            })
            .collect();
        Ok(b)
    };
    let user_pairs = pairs(NodeKind::User, &mut rng)?;
    let item_pairs = pairs(NodeKind::Item, &mut rng)?;
    let cfg = ObjectiveConfig {
        layers: opts.layers,
        beta_u: opts.beta_u,
        beta_i: opts.beta_i,
        lambda: opts.lambda,
    };
    let (_, grads) = total_loss_and_grads(&g, &params, &cfg, &triplets, &user_pairs, &item_pairs)?;
    let eval = |p: &Parameters| -> Result<f64> {
        Ok(total_loss(&g, p, &cfg, &triplets, &user_pairs, &item_pairs)?.total)
    };

    let eps = opts.epsilon;
    let mut worst = [0.0f64; 3];
    let mut counts = [0usize; 3];
    let n0 = params.layer0.as_slice().len();
    for idx in 0..n0 {
        let orig = params.layer0.as_slice()[idx];
        params.layer0.as_mut_slice()[idx] = orig + eps;
        let up = eval(&params)?;
        params.layer0.as_mut_slice()[idx] = orig - eps;
        let down = eval(&params)?;
        params.layer0.as_mut_slice()[idx] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(grads.layer0.as_slice()[idx], numeric, opts.floor);
        worst[0] = worst[0].max(err);
        counts[0] += 1;
    }
    for slot in 0..params.scalars.slots().len() {
        let orig = params.scalars.slots()[slot];
        params.scalars.slots_mut()[slot] = orig + eps;
        let up = eval(&params)?;
        params.scalars.slots_mut()[slot] = orig - eps;
        let down = eval(&params)?;
        params.scalars.slots_mut()[slot] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(grads.scalars[slot], numeric, opts.floor);
        let c = 1 + slot % 2;
        worst[c] = worst[c].max(err);
        counts[c] += 1;
    }
    let classes = [ParamClass::Embedding, ParamClass::ForwardScalar, ParamClass::BackwardScalar]
        .into_iter()
        .enumerate()
        .map(|(c, class)| ClassReport {
            class,
            entries: counts[c],
            max_rel_error: worst[c],
            passed: worst[c] <= tolerance,
        })
        .collect();
    Ok(GradCheckReport { tolerance, classes })
}

/// Layer-0 gradient of BPR alone, for comparison against reference
/// implementations.
pub fn bpr_layer0_gradient(
    g: &CollaborativeKG,
    params: &Parameters,
    layers: usize,
    triplets: &TripletBatch,
) -> Result<Matrix> {
    let cfg = ObjectiveConfig {
        layers,
        beta_u: 0.0,
        beta_i: 0.0,
        lambda: 0.0,
    };
    let empty_u = ContrastPairBatch::empty(NodeKind::User);
    let empty_i = ContrastPairBatch::empty(NodeKind::Item);
    Ok(total_loss_and_grads(g, params, &cfg, triplets, &empty_u, &empty_i)?.1.layer0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckg::{NodeSpace, INTERACT_NAME};

    fn toy() -> (CollaborativeKG, Vec<(NodeId, NodeId)>) {
        let space = NodeSpace::new(4, 6, 0);
        let pairs: Vec<_> = (0..4)
            .flat_map(|u| [(space.user(u), space.item(u)), (space.user(u), space.item(u + 1))])
            .collect();
        let g = CollaborativeKG::new(space, vec![INTERACT_NAME.into()], pairs.clone(), vec![]).unwrap();
        (g, pairs)
    }

    fn constant_validator(g: &CollaborativeKG, p: &Parameters, l: usize) -> Result<(f64, f64)> {
        let _ = (g, p, l);
        Ok((0.5, 0.5))
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (g, pairs) = toy();
        let mcfg = ModelConfig { dim: 8, layers: 2, init_seed: 3 };
        let tcfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 3,
            max_epochs: 4,
            stopping_patience: 10,
            ..Default::default()
        };
        let mut v = constant_validator;
        let out = train_with_validator(&g, &pairs, &mcfg, &tcfg, &mut v, None).unwrap();
        assert_eq!(out.params, init_parameters(&g, &mcfg).unwrap());
        assert_eq!(out.log.epochs.len(), 4);
        assert_eq!(out.log.stopped_reason, StopReason::MaxEpochs);
    }

    #[test]
    fn patience_one_stops_after_two_evaluations() {
        let (g, pairs) = toy();
        let mut recall = 1.0;
        let mut decreasing = |_: &CollaborativeKG, _: &Parameters, _: usize| {
            recall -= 0.1;
            Ok((recall, 0.0))
        };
        let tcfg = TrainConfig {
            stopping_patience: 1,
            max_epochs: 50,
            ..Default::default()
        };
        let out = train_with_validator(&g, &pairs, &ModelConfig::default(), &tcfg, &mut decreasing, None).unwrap();
        assert_eq!(out.log.epochs.len(), 2);
        assert_eq!(out.log.best_epoch, 1);
        assert_eq!(out.log.stopped_reason, StopReason::Patience);
    }

    #[test]
    fn never_runs_past_patience() {
        let (g, pairs) = toy();
        let mut k = 0;
        let mut bumpy = |_: &CollaborativeKG, _: &Parameters, _: usize| {
            k += 1;
            Ok((if k == 3 { 0.9 } else { 0.1 }, 0.0))
        };
        let tcfg = TrainConfig {
            stopping_patience: 4,
            max_epochs: 100,
            ..Default::default()
        };
        let out = train_with_validator(&g, &pairs, &ModelConfig::default(), &tcfg, &mut bumpy, None).unwrap();
        assert_eq!(out.log.best_epoch, 3);
        assert_eq!(out.log.epochs.len(), 7);
    }

    #[test]
    fn training_is_deterministic() {
        let (g, pairs) = toy();
        let run = || {
            let mut v = constant_validator;
            let cfg = TrainConfig {
                max_epochs: 3,
                batch_size: 4,
                ..Default::default()
            };
            train_with_validator(&g, &pairs, &ModelConfig { dim: 4, layers: 2, init_seed: 1 }, &cfg, &mut v, None)
                .unwrap()
        };
        let (a, b) = (run(), run());
        let losses = |o: &TrainOutcome| o.log.epochs.iter().map(|e| e.loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn fixed_scalars_stay_fixed() {
        let (g, pairs) = toy();
        let mut v = constant_validator;
        let cfg = TrainConfig {
            max_epochs: 2,
            fixed_scalars: Some(1.0),
            learning_rate: 0.01,
            ..Default::default()
        };
        let out = train_with_validator(&g, &pairs, &ModelConfig::default(), &cfg, &mut v, None).unwrap();
        assert!(out.params.scalars.slots().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn empty_train_rejected() {
        let (g, _) = toy();
        let mut v = constant_validator;
        let r = train_with_validator(&g, &[], &ModelConfig::default(), &TrainConfig::default(), &mut v, None);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = AdamState::new(2);
        let mut p = vec![1.0, -1.0];
        adam.update(&mut p, &[0.5, -3.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn gradient_check_bpr_only_linear() {
        let opts = GradCheckOptions {
            layers: 0,
            beta_u: 0.0,
            beta_i: 0.0,
            lambda: 0.0,
            ..Default::default()
        };
        let r = gradient_check(&opts, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn gradient_check_full_objective() {
        let r = gradient_check(&GradCheckOptions { layers: 2, seed: 11, ..Default::default() }, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn gradient_check_flags_failures() {
        let r = gradient_check(&GradCheckOptions { layers: 2, seed: 11, ..Default::default() }, 0.0).unwrap();
        assert!(!r.passed());
        assert!(!r.failing().is_empty());
    }
}
