//! Training orchestration: virtual-batched SGD over per-pair gradients,
//! periodic pair regeneration, validation-metric model selection, and the
//! two-stage classification-then-retrieval pipeline.
//!
//! Inputs of different sizes cannot be batched, so the trainer feeds one
//! pair (or item, or triplet) at a time, accumulates gradients, and applies
//! one optimizer step per `virtual_batch` inputs using the mean of the
//! accumulated gradients; the remainder at the end of an epoch is applied
//! with the mean over its actual count. Everything is sequential and
//! deterministic for a given seed.

use std::collections::{BTreeMap, BTreeSet};

use crate::checkpoint::{fnv1a64, Checkpoint};
use crate::dataset::{LoadedDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{
    distance_distributions, evaluate, DistanceDistributionSummary, EvalReport, RetrievalIndex,
};
use crate::losses::{
    class_weights_from_counts, double_margin_loss, pair_distance_backward, single_margin_loss,
    triplet_loss, MarginConfig, PairLabel, TRIPLET_MARGIN_DEFAULT,
};
use crate::model::{
    backward_classify, backward_embed, forward_classify, forward_embed, init_params, ModelParams,
    ModelSpec,
};
use crate::numerics::{Embedding, RngState};
use crate::optim::{sgd_step, OptimizerConfig, OptimizerState};
use crate::sampling::{generate_pairs, generate_triplets, regeneration_due};

/// Which objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Stage {
    #[serde(rename = "cls")]
    Classification,
    #[serde(rename = "retr-s")]
    RetrievalSingle,
    #[serde(rename = "retr-d")]
    RetrievalDouble,
    #[serde(rename = "retr-t")]
    RetrievalTriplet,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Classification => "cls",
            Stage::RetrievalSingle => "retr-s",
            Stage::RetrievalDouble => "retr-d",
            Stage::RetrievalTriplet => "retr-t",
        }
    }

    pub fn is_retrieval(self) -> bool {
        self != Stage::Classification
    }
}

/// Full description of one training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Contrastive margins; retr-s uses `alpha2` as its single margin.
    pub margins: MarginConfig,
    pub triplet_margin: f64,
    /// Optimizer step per this many pairs/items/triplets.
    pub virtual_batch: usize,
    pub max_epochs: u64,
    pub pairs_per_class: usize,
    /// Regenerate training pairs every this many epochs.
    pub regeneration_period: u64,
    /// Evaluate the validation metric every this many epochs (the final
    /// epoch is always evaluated).
    pub eval_every: u64,
    pub seed: u64,
    /// Trunk layer widths used when this config initializes a model.
    pub layers: Vec<usize>,
    pub optimizer: OptimizerConfig,
}

impl TrainConfig {
    pub fn defaults_for(stage: Stage) -> Self {
        Self {
            stage,
            margins: MarginConfig::preset(),
            triplet_margin: TRIPLET_MARGIN_DEFAULT,
            virtual_batch: 64,
            max_epochs: 30,
            pairs_per_class: 180,
            regeneration_period: 5,
            eval_every: 1,
            seed: 1,
            layers: vec![32, 64],
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.virtual_batch >= 1
            && self.max_epochs >= 1
            && self.pairs_per_class >= 1
            && self.regeneration_period >= 1
            && self.eval_every >= 1
            && self.triplet_margin >= 0.0
            && self.triplet_margin.is_finite()
            && !self.layers.is_empty()
            && !self.layers.contains(&0);
        if !ok {
            return Err(Error::BadSpec { context: format!("invalid train config {self:?}") });
        }
        MarginConfig::new(self.margins.alpha1, self.margins.alpha2)?;
        self.optimizer.validate()
    }

    /// Hash of the canonical JSON form, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a64(json.as_bytes())
    }
}

/// One JSON-lines record of the training log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub stage: String,
    pub mean_loss: f64,
    pub lr: f64,
    /// Validation mAP (retrieval) or accuracy (classification); present on
    /// evaluation epochs.
    pub val_metric: Option<f64>,
}

/// Outcome of a training run: the best-validation checkpoint plus the
/// per-epoch log.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub logs: Vec<EpochLog>,
}

/// Embed the dataset entries at `indices`, keeping their class labels.
pub fn embed_entries(
    params: &ModelParams,
    data: &LoadedDataset,
    indices: &[usize],
) -> Result<Vec<(Embedding, u32)>> {
    indices
        .iter()
        .map(|&i| {
            let (e, _) = forward_embed(params, &data.features[i])?;
            Ok((e, data.manifest.entries[i].class_id))
        })
        .collect()
}

/// Retrieval evaluation of one split: its query items against its database
/// items.
pub fn evaluate_split(params: &ModelParams, data: &LoadedDataset, split: Split) -> Result<EvalReport> {
    let (queries, database) = data.queries_and_database(split);
    if queries.is_empty() || database.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let db = embed_entries(params, data, &database)?;
    let (embeddings, labels): (Vec<_>, Vec<_>) = db.into_iter().unzip();
    let index = RetrievalIndex::new(embeddings, labels)?;
    let q = embed_entries(params, data, &queries)?;
    evaluate(&index, &q)
}

/// Positive/negative distance distributions over all items of a split.
pub fn split_distance_distributions(
    params: &ModelParams,
    data: &LoadedDataset,
    split: Split,
    sample_pairs: usize,
    rng: &mut RngState,
) -> Result<(DistanceDistributionSummary, DistanceDistributionSummary)> {
    let items = data.items(split);
    let indices: Vec<usize> = items.iter().map(|it| it.feature).collect();
    let embedded = embed_entries(params, data, &indices)?;
    let (embeddings, labels): (Vec<_>, Vec<_>) = embedded.into_iter().unzip();
    distance_distributions(&embeddings, &labels, sample_pairs, rng)
}

/// Gradient accumulator for one virtual batch.
struct BatchAccumulator {
    grads: ModelParams,
    count: usize,
}

impl BatchAccumulator {
    fn new(params: &ModelParams) -> Self {
        Self { grads: params.zeros_like(), count: 0 }
    }

    fn add(&mut self, contribution: &ModelParams) -> Result<()> {
        self.grads.accumulate(contribution)?;
        Ok(())
    }

    /// Apply the mean of the accumulated gradients and reset.
    fn flush(&mut self, params: &mut ModelParams, opt: &mut OptimizerState) -> Result<()> {
        if self.count == 0 {
            return Ok(());
        }
        self.grads.scale(1.0 / self.count as f64);
        sgd_step(params, &self.grads, opt)?;
        self.grads = params.zeros_like();
        self.count = 0;
        Ok(())
    }
}

/// Train with a pairwise or triplet retrieval objective, selecting the
/// checkpoint with the best validation mAP.
///
/// Pairs regenerate on the configured schedule and are reshuffled every
/// epoch in between; pairs whose embedding collapses to the zero vector are
/// skipped.
pub fn train_retrieval(
    initial: ModelParams,
    data: &LoadedDataset,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<TrainRun> {
    cfg.validate()?;
    if !cfg.stage.is_retrieval() {
        return Err(Error::BadSpec { context: "train_retrieval needs a retrieval stage".into() });
    }
    initial.validate()?;
    let items = data.items(Split::Train);
    if items.is_empty() {
        return Err(Error::BadSpec { context: "train split is empty".into() });
    }
    {
        let (q, db) = data.queries_and_database(Split::Validation);
        if q.is_empty() || db.is_empty() {
            return Err(Error::EmptyValidation);
        }
    }

    let config_hash = cfg.hash();
    let mut params = initial;
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), &params)?;
    let mut best: Option<Checkpoint> = None;
    let mut logs = Vec::with_capacity(cfg.max_epochs as usize);
    let mut pairs: Vec<(usize, usize, PairLabel)> = Vec::new();
    let mut triplets: Vec<(usize, usize, usize)> = Vec::new();

    for epoch in 0..cfg.max_epochs {
        opt.enter_epoch(epoch);
        let regenerate = regeneration_due(epoch, cfg.regeneration_period);
        if cfg.stage == Stage::RetrievalTriplet {
            if regenerate || triplets.is_empty() {
                triplets = generate_triplets(&items, cfg.pairs_per_class, rng)?;
            } else {
                rng.shuffle(&mut triplets);
            }
        } else if regenerate || pairs.is_empty() {
            let mut batch = generate_pairs(&items, cfg.pairs_per_class, rng)?;
            batch.epoch = epoch;
            pairs = batch.pairs;
        } else {
            rng.shuffle(&mut pairs);
        }

        let mut accum = BatchAccumulator::new(&params);
        let mut loss_sum = 0.0;
        let mut processed = 0usize;

        if cfg.stage == Stage::RetrievalTriplet {
            for &(a, p, n) in &triplets {
                let fa = &data.features[items[a].feature];
                let fp = &data.features[items[p].feature];
                let fn_ = &data.features[items[n].feature];
                let (ea, ta, ep, tp, en, tn) =
                    match (forward_embed(&params, fa), forward_embed(&params, fp), forward_embed(&params, fn_)) {
                        (Ok((ea, ta)), Ok((ep, tp)), Ok((en, tn))) => (ea, ta, ep, tp, en, tn),
                        (Err(Error::ZeroVector { .. }), _, _)
                        | (_, Err(Error::ZeroVector { .. }), _)
                        | (_, _, Err(Error::ZeroVector { .. })) => continue,
                        (Err(e), _, _) => return Err(e),
                        (_, Err(e), _) => return Err(e),
                        (_, _, Err(e)) => return Err(e),
                    };
                let d_ap = ea.distance(&ep)?;
                let d_an = ea.distance(&en)?;
                let (loss, g_dap, g_dan) = triplet_loss(d_ap, d_an, cfg.triplet_margin)?;
                let (ga1, gp) = pair_distance_backward(ea.values(), ep.values(), g_dap)?;
                let (ga2, gn) = pair_distance_backward(ea.values(), en.values(), g_dan)?;
                let ga: Vec<f64> = ga1.iter().zip(&ga2).map(|(x, y)| x + y).collect();
                accum.add(&backward_embed(&params, &ta, &ga)?)?;
                accum.add(&backward_embed(&params, &tp, &gp)?)?;
                accum.add(&backward_embed(&params, &tn, &gn)?)?;
                loss_sum += loss;
                processed += 1;
                accum.count += 1;
                if accum.count == cfg.virtual_batch {
                    accum.flush(&mut params, &mut opt)?;
                }
            }
        } else {
            for &(a, b, label) in &pairs {
                let fa = &data.features[items[a].feature];
                let fb = &data.features[items[b].feature];
                let (ea, ta, eb, tb) = match (forward_embed(&params, fa), forward_embed(&params, fb)) {
                    (Ok((ea, ta)), Ok((eb, tb))) => (ea, ta, eb, tb),
                    (Err(Error::ZeroVector { .. }), _) | (_, Err(Error::ZeroVector { .. })) => continue,
                    (Err(e), _) => return Err(e),
                    (_, Err(e)) => return Err(e),
                };
                let d = ea.distance(&eb)?;
                let (loss, dloss_dd) = match cfg.stage {
                    Stage::RetrievalSingle => single_margin_loss(d, label, cfg.margins.alpha2)?,
                    Stage::RetrievalDouble => double_margin_loss(d, label, &cfg.margins)?,
                    _ => unreachable!("pair loop only runs for pairwise stages"),
                };
                let (ga, gb) = pair_distance_backward(ea.values(), eb.values(), dloss_dd)?;
                accum.add(&backward_embed(&params, &ta, &ga)?)?;
                accum.add(&backward_embed(&params, &tb, &gb)?)?;
                loss_sum += loss;
                processed += 1;
                accum.count += 1;
                if accum.count == cfg.virtual_batch {
                    accum.flush(&mut params, &mut opt)?;
                }
            }
        }
        accum.flush(&mut params, &mut opt)?;

        let evaluate_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.max_epochs;
        let val_metric = if evaluate_now {
            Some(evaluate_split(&params, data, Split::Validation)?.map)
        } else {
            None
        };
        if let Some(metric) = val_metric {
            if best.as_ref().map_or(true, |b| metric > b.best_metric) {
                best = Some(Checkpoint {
                    params: params.clone(),
                    optimizer: opt.clone(),
                    epoch,
                    best_metric: metric,
                    config_hash,
                });
            }
        }
        logs.push(EpochLog {
            epoch,
            stage: cfg.stage.as_str().to_string(),
            mean_loss: loss_sum / processed.max(1) as f64,
            lr: opt.lr,
            val_metric,
        });
    }

    Ok(TrainRun { checkpoint: best.expect("final epoch always evaluates"), logs })
}

/// Distinct classes of the classification stage (train plus validation
/// splits), sorted.
pub fn classification_classes(data: &LoadedDataset) -> Vec<u32> {
    let mut classes: BTreeSet<u32> = data.manifest.split_classes(Split::Train);
    classes.extend(data.manifest.split_classes(Split::Validation));
    classes.into_iter().collect()
}

/// Train the classification head (and trunk) with weighted cross-entropy,
/// selecting on validation accuracy. Items come from the train and
/// validation splits together, re-split 70/30 within each class.
pub fn train_classification(
    initial: ModelParams,
    data: &LoadedDataset,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<TrainRun> {
    cfg.validate()?;
    if cfg.stage != Stage::Classification {
        return Err(Error::BadSpec { context: "train_classification needs stage cls".into() });
    }
    initial.validate()?;
    if initial.head.is_none() {
        return Err(Error::MissingHead);
    }

    let classes = classification_classes(data);
    if classes.len() < 2 {
        return Err(Error::SingleClassDataset);
    }
    if initial.classes() != Some(classes.len()) {
        return Err(Error::BadSpec {
            context: format!("head has {:?} outputs, dataset has {} classes", initial.classes(), classes.len()),
        });
    }
    let class_index: BTreeMap<u32, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    // 70/30 within-class split of the pooled items, seeded
    let mut items = data.items(Split::Train);
    items.extend(data.items(Split::Validation));
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for it in &items {
        by_class.entry(it.class_id).or_default().push(it.feature);
    }
    let mut train_items: Vec<(usize, usize)> = Vec::new(); // (feature idx, class idx)
    let mut val_items: Vec<(usize, usize)> = Vec::new();
    for (&class, members) in &by_class {
        let mut pool = members.clone();
        rng.shuffle(&mut pool);
        let n_train = ((0.7 * pool.len() as f64).round() as usize).clamp(1, pool.len());
        let idx = class_index[&class];
        for (i, &feature) in pool.iter().enumerate() {
            if i < n_train {
                train_items.push((feature, idx));
            } else {
                val_items.push((feature, idx));
            }
        }
    }
    if val_items.is_empty() {
        return Err(Error::EmptyValidation);
    }

    let mut counts = vec![0usize; classes.len()];
    for &(_, idx) in &train_items {
        counts[idx] += 1;
    }
    let weights = class_weights_from_counts(&counts)?;

    let accuracy = |params: &ModelParams| -> Result<f64> {
        let mut hits = 0usize;
        for &(feature, target) in &val_items {
            let (logits, _) = forward_classify(params, &data.features[feature])?;
            let predicted = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            if predicted == target {
                hits += 1;
            }
        }
        Ok(hits as f64 / val_items.len() as f64)
    };

    let config_hash = cfg.hash();
    let mut params = initial;
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), &params)?;
    let mut best: Option<Checkpoint> = None;
    let mut logs = Vec::with_capacity(cfg.max_epochs as usize);

    for epoch in 0..cfg.max_epochs {
        opt.enter_epoch(epoch);
        rng.shuffle(&mut train_items);

        let mut accum = BatchAccumulator::new(&params);
        let mut loss_sum = 0.0;
        for &(feature, target) in &train_items {
            let (logits, trace) = forward_classify(&params, &data.features[feature])?;
            let (loss, g_logits) = crate::losses::weighted_cross_entropy(&logits, target, &weights)?;
            accum.add(&backward_classify(&params, &trace, &g_logits)?)?;
            loss_sum += loss;
            accum.count += 1;
            if accum.count == cfg.virtual_batch {
                accum.flush(&mut params, &mut opt)?;
            }
        }
        accum.flush(&mut params, &mut opt)?;

        let evaluate_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.max_epochs;
        let val_metric = if evaluate_now { Some(accuracy(&params)?) } else { None };
        if let Some(metric) = val_metric {
            if best.as_ref().map_or(true, |b| metric > b.best_metric) {
                best = Some(Checkpoint {
                    params: params.clone(),
                    optimizer: opt.clone(),
                    epoch,
                    best_metric: metric,
                    config_hash,
                });
            }
        }
        logs.push(EpochLog {
            epoch,
            stage: cfg.stage.as_str().to_string(),
            mean_loss: loss_sum / train_items.len().max(1) as f64,
            lr: opt.lr,
            val_metric,
        });
    }

    Ok(TrainRun { checkpoint: best.expect("final epoch always evaluates"), logs })
}

/// The two-stage pipeline: fine-tune for classification, strip the head,
/// then fine-tune the same trunk for retrieval. Stage 2 starts from the
/// best stage-1 checkpoint with fresh optimizer state.
pub fn two_stage(
    data: &LoadedDataset,
    cfg_cls: &TrainConfig,
    cfg_retr: &TrainConfig,
    rng: &mut RngState,
) -> Result<(TrainRun, TrainRun)> {
    if cfg_cls.stage != Stage::Classification {
        return Err(Error::BadSpec { context: "stage 1 must be cls".into() });
    }
    if !cfg_retr.stage.is_retrieval() {
        return Err(Error::BadSpec { context: "stage 2 must be a retrieval stage".into() });
    }
    let classes = classification_classes(data);
    if classes.len() < 2 {
        return Err(Error::SingleClassDataset);
    }
    let spec = ModelSpec {
        input_dim: data.channels(),
        layer_widths: cfg_cls.layers.clone(),
        classes: Some(classes.len()),
    };
    let initial = init_params(&spec, rng)?;
    let stage1 = train_classification(initial, data, cfg_cls, rng)?;
    let stage2_init = stage1.checkpoint.params.clone().without_head();
    let stage2 = train_retrieval(stage2_init, data, cfg_retr, rng)?;
    Ok((stage1, stage2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, split_disjoint, SyntheticSpec};
    use crate::losses::PairLabel;

    fn tiny_dataset(seed: u64) -> LoadedDataset {
        let spec = SyntheticSpec {
            classes: 6,
            items_per_class: (6, 6),
            descriptor_dim: 4,
            grid: (1, 2),
            center_spread: 1.0,
            within_noise: 0.2,
            seed,
        };
        let data = generate_synthetic(&spec).unwrap();
        let manifest = split_disjoint(&data.items, (0.5, 0.25, 0.25), &mut RngState::new(seed ^ 0xa5)).unwrap();
        LoadedDataset::from_parts(manifest, data.features).unwrap()
    }

    fn tiny_cfg(stage: Stage, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::defaults_for(stage);
        cfg.max_epochs = 3;
        cfg.pairs_per_class = 8;
        cfg.virtual_batch = 8;
        cfg.layers = vec![6, 8];
        cfg.seed = seed;
        cfg.optimizer.initial_lr = 0.05;
        cfg
    }

    fn init_for(data: &LoadedDataset, cfg: &TrainConfig, classes: Option<usize>, seed: u64) -> ModelParams {
        let spec = ModelSpec { input_dim: data.channels(), layer_widths: cfg.layers.clone(), classes };
        init_params(&spec, &mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn zero_lr_single_epoch_is_noop() {
        let data = tiny_dataset(3);
        let mut cfg = tiny_cfg(Stage::RetrievalDouble, 3);
        cfg.max_epochs = 1;
        cfg.optimizer.initial_lr = 0.0;
        let initial = init_for(&data, &cfg, None, 5);
        let run = train_retrieval(initial.clone(), &data, &cfg, &mut RngState::new(7)).unwrap();
        assert_eq!(run.checkpoint.epoch, 0);
        assert_eq!(run.checkpoint.params, initial);
        assert_eq!(run.logs.len(), 1);
        assert!(run.logs[0].val_metric.is_some());
    }

    #[test]
    fn deterministic_checkpoints() {
        let data = tiny_dataset(4);
        let cfg = tiny_cfg(Stage::RetrievalDouble, 4);
        let run_once = || {
            let initial = init_for(&data, &cfg, None, 11);
            train_retrieval(initial, &data, &cfg, &mut RngState::new(cfg.seed)).unwrap()
        };
        let a = run_once();
        let b = run_once();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        assert_eq!(a.logs, b.logs);
    }

    #[test]
    fn single_vs_double_identical_at_zero_alpha1() {
        // with alpha1 = 0 the two losses coincide, so the runs diverge only
        // through the loss branch and must produce identical parameters
        let data = tiny_dataset(5);
        let mut cfg_s = tiny_cfg(Stage::RetrievalSingle, 5);
        cfg_s.margins = MarginConfig::new(0.0, 1.2).unwrap();
        let mut cfg_d = cfg_s.clone();
        cfg_d.stage = Stage::RetrievalDouble;
        let initial = init_for(&data, &cfg_s, None, 13);
        let run_s = train_retrieval(initial.clone(), &data, &cfg_s, &mut RngState::new(9)).unwrap();
        let run_d = train_retrieval(initial, &data, &cfg_d, &mut RngState::new(9)).unwrap();
        assert_eq!(run_s.checkpoint.params, run_d.checkpoint.params);
        assert_eq!(run_s.checkpoint.epoch, run_d.checkpoint.epoch);
    }

    #[test]
    fn accumulation_matches_manual_replication() {
        // one epoch, one big virtual batch: the trainer's update must equal
        // a hand-rolled mean-gradient SGD step over the same pairs
        let data = tiny_dataset(6);
        let mut cfg = tiny_cfg(Stage::RetrievalDouble, 6);
        cfg.max_epochs = 1;
        cfg.virtual_batch = 10_000;
        let initial = init_for(&data, &cfg, None, 17);

        let run = train_retrieval(initial.clone(), &data, &cfg, &mut RngState::new(23)).unwrap();

        // replicate: same rng stream, same pair set
        let mut rng = RngState::new(23);
        let items = data.items(Split::Train);
        let batch = generate_pairs(&items, cfg.pairs_per_class, &mut rng).unwrap();
        let mut grads = initial.zeros_like();
        let mut count = 0usize;
        for &(a, b, label) in &batch.pairs {
            // skip zero-embedding pairs exactly like the trainer does
            let Ok((ea, ta)) = forward_embed(&initial, &data.features[items[a].feature]) else {
                continue;
            };
            let Ok((eb, tb)) = forward_embed(&initial, &data.features[items[b].feature]) else {
                continue;
            };
            let d = ea.distance(&eb).unwrap();
            let (_, dldd) = double_margin_loss(d, label, &cfg.margins).unwrap();
            let (ga, gb) = pair_distance_backward(ea.values(), eb.values(), dldd).unwrap();
            grads.accumulate(&backward_embed(&initial, &ta, &ga).unwrap()).unwrap();
            grads.accumulate(&backward_embed(&initial, &tb, &gb).unwrap()).unwrap();
            count += 1;
        }
        grads.scale(1.0 / count as f64);
        let mut manual = initial.clone();
        let mut opt = OptimizerState::new(cfg.optimizer.clone(), &manual).unwrap();
        opt.enter_epoch(0);
        sgd_step(&mut manual, &grads, &mut opt).unwrap();

        let got = run.checkpoint.params.tensor_slices().concat();
        let expect = manual.tensor_slices().concat();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn classification_beats_chance_and_requires_head() {
        let data = tiny_dataset(7);
        let mut cfg = tiny_cfg(Stage::Classification, 7);
        cfg.max_epochs = 10;
        let classes = classification_classes(&data).len();
        let headless = init_for(&data, &cfg, None, 19);
        assert!(matches!(
            train_classification(headless, &data, &cfg, &mut RngState::new(3)),
            Err(Error::MissingHead)
        ));
        let initial = init_for(&data, &cfg, Some(classes), 19);
        let run = train_classification(initial, &data, &cfg, &mut RngState::new(3)).unwrap();
        assert!(run.checkpoint.best_metric > 1.0 / classes as f64);
    }

    #[test]
    fn classification_zero_lr_is_noop() {
        let data = tiny_dataset(14);
        let mut cfg = tiny_cfg(Stage::Classification, 14);
        cfg.max_epochs = 2;
        cfg.optimizer.initial_lr = 0.0;
        let classes = classification_classes(&data).len();
        let initial = init_for(&data, &cfg, Some(classes), 51);
        let run = train_classification(initial.clone(), &data, &cfg, &mut RngState::new(5)).unwrap();
        assert_eq!(run.checkpoint.params, initial);
    }

    #[test]
    fn classification_rejects_single_class() {
        let data = tiny_dataset(8);
        // keep only test rows plus train rows collapsed to one class, so
        // train+validation hold a single class
        let mut entries = Vec::new();
        let mut features = Vec::new();
        for (e, f) in data.manifest.entries.iter().zip(&data.features) {
            match e.split {
                Split::Test => {
                    entries.push(e.clone());
                    features.push(f.clone());
                }
                Split::Train => {
                    let mut e = e.clone();
                    e.class_id = 1000;
                    entries.push(e);
                    features.push(f.clone());
                }
                Split::Validation => {}
            }
        }
        let collapsed =
            LoadedDataset::from_parts(crate::dataset::DatasetManifest { entries }, features).unwrap();
        let cfg = tiny_cfg(Stage::Classification, 8);
        let initial = init_for(&collapsed, &cfg, Some(2), 19);
        assert!(matches!(
            train_classification(initial, &collapsed, &cfg, &mut RngState::new(3)),
            Err(Error::SingleClassDataset)
        ));
    }

    #[test]
    fn two_stage_inits_stage2_from_stage1() {
        let data = tiny_dataset(9);
        let mut cfg_cls = tiny_cfg(Stage::Classification, 9);
        cfg_cls.max_epochs = 2;
        let mut cfg_retr = tiny_cfg(Stage::RetrievalDouble, 9);
        cfg_retr.max_epochs = 1;
        cfg_retr.optimizer.initial_lr = 0.0; // freeze stage 2
        let (stage1, stage2) =
            two_stage(&data, &cfg_cls, &cfg_retr, &mut RngState::new(31)).unwrap();
        // with stage 2 frozen its checkpoint params equal stage 1 minus head
        let stripped = stage1.checkpoint.params.clone().without_head();
        assert_eq!(stage2.checkpoint.params, stripped);
        let fm = &data.features[0];
        let (e1, _) = forward_embed(&stripped, fm).unwrap();
        let (e2, _) = forward_embed(&stage2.checkpoint.params, fm).unwrap();
        assert_eq!(e1.values(), e2.values());
    }

    #[test]
    fn lr_logged_non_increasing() {
        let data = tiny_dataset(10);
        let mut cfg = tiny_cfg(Stage::RetrievalDouble, 10);
        cfg.max_epochs = 6;
        cfg.optimizer.decay_period = 2;
        cfg.optimizer.decay_factor = 10.0;
        let initial = init_for(&data, &cfg, None, 37);
        let run = train_retrieval(initial, &data, &cfg, &mut RngState::new(4)).unwrap();
        let lrs: Vec<f64> = run.logs.iter().map(|l| l.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!((lrs[0] / lrs[5] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn triplet_stage_runs_and_improves_or_holds() {
        let data = tiny_dataset(11);
        let mut cfg = tiny_cfg(Stage::RetrievalTriplet, 11);
        cfg.max_epochs = 4;
        let initial = init_for(&data, &cfg, None, 41);
        let before = evaluate_split(&initial, &data, Split::Validation).unwrap().map;
        let run = train_retrieval(initial, &data, &cfg, &mut RngState::new(6)).unwrap();
        assert!(run.checkpoint.best_metric >= before - 1e-12);
    }

    #[test]
    fn pair_label_sanity() {
        assert_eq!(PairLabel::from_same_class(true).indicator(), 1.0);
        assert_eq!(PairLabel::from_same_class(false).indicator(), 0.0);
    }

    #[test]
    fn empty_validation_rejected() {
        let data = tiny_dataset(12);
        // drop every validation row
        let manifest = crate::dataset::DatasetManifest {
            entries: data
                .manifest
                .entries
                .iter()
                .filter(|e| e.split != Split::Validation)
                .cloned()
                .collect(),
        };
        let features: Vec<_> = data
            .manifest
            .entries
            .iter()
            .zip(&data.features)
            .filter(|(e, _)| e.split != Split::Validation)
            .map(|(_, f)| f.clone())
            .collect();
        let trimmed = LoadedDataset::from_parts(manifest, features).unwrap();
        // feature indices in items() refer to the trimmed dataset
        let cfg = tiny_cfg(Stage::RetrievalDouble, 12);
        let initial = init_for(&trimmed, &cfg, None, 43);
        assert!(matches!(
            train_retrieval(initial, &trimmed, &cfg, &mut RngState::new(8)),
            Err(Error::EmptyValidation)
        ));
    }
}
