//! Metric-learning training of the aggregation head on synthetic domains.
//!
//! Each step composes a batch of `n × k × m` images, encodes them through
//! the taped pipeline, scores them with the multi-similarity loss and
//! applies one AdamW update to the aggregation parameters. Validation
//! Recall@1 after every epoch picks the returned checkpoint.

mod batch;
mod checkpoint;
mod ms_loss;
mod optimizer;

pub use batch::{compose_batch, BatchItem, BatchPlan, LabeledBatch};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use ms_loss::{ms_loss, MsLossOutput, MsLossParams};
pub use optimizer::{optimizer_step, AdamState, OptimizerConfig, ParamSet};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paradigms::{ParadigmKind, SinkhornConfig};
use crate::pipeline::{backward_image, backward_queries, encode_all, forward_image, forward_queries, ImageGrads};
use crate::qaa_agg::{Descriptor, QaaConfig, QaaParams};
use crate::retrieval_eval::{recall_at_ks, PlaceRecord, Position, PositiveCriterion, RecallReport};
use crate::synth_data::{Dataset, EvalSet, PlaceObservation, SyntheticWorld, WorldSpec};

/// Distance under which a database image counts as the same place.
pub const VALIDATION_RADIUS_M: f64 = 25.0;

/// Images per parallel work unit during a training step.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: QaaConfig,
    pub paradigm: ParadigmKind,
    /// Places per dataset in a batch.
    pub k: usize,
    /// Images per place in a batch.
    pub m: usize,
    pub optimizer: OptimizerConfig,
    pub ms_loss: MsLossParams,
    pub sinkhorn: SinkhornConfig,
    pub iters_per_epoch: usize,
    /// Post-warmup epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: QaaConfig::new(16, 64, 16, 32),
            paradigm: ParadigmKind::Cs,
            k: 8,
            m: 4,
            optimizer: OptimizerConfig {
                lr: 2e-3,
                warmup_iters: 200,
                ..OptimizerConfig::default()
            },
            ms_loss: MsLossParams::default(),
            sinkhorn: SinkhornConfig::default(),
            iters_per_epoch: 20,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn plan(&self, datasets: usize) -> BatchPlan {
        BatchPlan::new(datasets, self.k, self.m)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.ms_loss.validate()?;
        self.sinkhorn.validate()?;
        if self.iters_per_epoch == 0 || self.optimizer.max_epochs == 0 {
            return Err(Error::Config("iters_per_epoch and max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// How the world's places are turned into training and validation data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Held-out places, rendered in every domain for validation.
    pub val_places: usize,
    /// Pre-rendered training images per place.
    pub images_per_place: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            val_places: 200,
            images_per_place: 8,
            seed: 0,
        }
    }
}

/// Full experiment description, as stored in a JSON config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub data: DataConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

/// Training places of each domain and the shared validation places.
///
/// The last `val_places` places are held out. The rest are split into
/// contiguous, disjoint chunks, one per domain, so a single-domain run and
/// a joint run see identical data for that domain.
pub fn allocate_places(num_places: usize, domains: usize, val_places: usize) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let (train, val) = crate::synth_data::split_places(num_places, val_places)?;
    if domains == 0 || train.len() < domains {
        return Err(Error::Data(format!(
            "{} training places cannot be split over {domains} domains",
            train.len()
        )));
    }
    let per = train.len() / domains;
    Ok(((0..domains).map(|d| train[d * per..(d + 1) * per].to_vec()).collect(), val))
}

fn domain_rng(seed: u64, domain: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (domain as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

/// Training datasets for `domains` and validation sets for every domain.
pub fn prepare_data(world: &SyntheticWorld, data: &DataConfig, domains: &[usize]) -> Result<(Vec<Dataset>, Vec<EvalSet>)> {
    let (train_places, val_places) = allocate_places(world.num_places(), world.domains.len(), data.val_places)?;
    let datasets = domains
        .iter()
        .map(|&d| {
            let places = train_places
                .get(d)
                .ok_or_else(|| Error::Index(format!("domain {d} of {}", world.domains.len())))?;
            Dataset::render(world, d, places, data.images_per_place, &mut domain_rng(data.seed, d, 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let evals = (0..world.domains.len())
        .map(|d| EvalSet::render(world, d, &val_places, &mut domain_rng(data.seed, d, 2)))
        .collect::<Result<Vec<_>>>()?;
    Ok((datasets, evals))
}

pub fn observation_record(o: &PlaceObservation, descriptor: Descriptor, dataset: &str) -> PlaceRecord {
    PlaceRecord {
        descriptor,
        position: Position::Planar { x: o.x_m, y: o.y_m },
        dataset: dataset.to_string(),
    }
}

fn encode_observations(
    obs: &[PlaceObservation],
    params: &QaaParams,
    paradigm: ParadigmKind,
    sinkhorn: &SinkhornConfig,
    dataset: &str,
) -> Result<Vec<PlaceRecord>> {
    let maps: Vec<_> = obs.iter().map(|o| o.features.clone()).collect();
    let descs = encode_all(&maps, params, paradigm, sinkhorn)?;
    Ok(obs
        .iter()
        .zip(descs)
        .map(|(o, d)| observation_record(o, d, dataset))
        .collect())
}

/// Recall@K of `params` on one held-out set under the 25 m criterion.
pub fn evaluate_set(
    params: &QaaParams,
    paradigm: ParadigmKind,
    sinkhorn: &SinkhornConfig,
    set: &EvalSet,
    ks: &[usize],
) -> Result<Vec<RecallReport>> {
    let db = encode_observations(&set.database, params, paradigm, sinkhorn, &set.name)?;
    let q = encode_observations(&set.queries, params, paradigm, sinkhorn, &set.name)?;
    recall_at_ks(&set.name, &q, &db, ks, PositiveCriterion::DistanceM(VALIDATION_RADIUS_M))
}

/// Recall@1 on each set.
pub fn recall1_per_set(
    params: &QaaParams,
    paradigm: ParadigmKind,
    sinkhorn: &SinkhornConfig,
    sets: &[EvalSet],
) -> Result<Vec<f64>> {
    sets.iter()
        .map(|s| Ok(evaluate_set(params, paradigm, sinkhorn, s, &[1])?[0].recall))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    /// Mean validation Recall@1 over the validation sets.
    pub recall1: f64,
    pub recall1_per_set: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Plateau { epoch: usize },
    /// Loss or parameters went non-finite; the outcome holds the best
    /// parameters seen before that.
    Diverged { epoch: usize, iteration: u64, message: String },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best parameters by validation Recall@1.
    pub params: QaaParams,
    pub paradigm: ParadigmKind,
    pub metrics: Vec<EpochMetrics>,
    pub initial_recall1: f64,
    pub best_epoch: usize,
    pub best_recall1: f64,
    pub stop: StopReason,
    pub iterations: u64,
}

impl TrainOutcome {
    /// `epoch,loss,recall1` with a header; epoch 0 is the untrained model.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,loss,recall1\n");
        out.push_str(&format!("0,,{:.6}\n", self.initial_recall1));
        for m in &self.metrics {
            out.push_str(&format!("{},{:.6},{:.6}\n", m.epoch, m.loss, m.recall1));
        }
        out
    }
}

struct StepResult {
    loss: f64,
    grads: QaaParams,
}

/// Loss and full parameter gradient for one batch.
fn batch_gradient(batch: &LabeledBatch<'_>, params: &QaaParams, cfg: &TrainConfig) -> Result<StepResult> {
    let (cache, qtape) = forward_queries(params)?;
    let forwards = batch
        .items
        .par_iter()
        .map(|it| forward_image(it.features, params, &cache, cfg.paradigm, &cfg.sinkhorn))
        .collect::<Result<Vec<_>>>()?;
    let descs: Vec<Descriptor> = forwards.iter().map(|(d, _, _)| d.clone()).collect();
    let loss = ms_loss(&descs, &batch.labels(), &cfg.ms_loss)?;

    let partials = forwards
        .par_chunks(CHUNK)
        .zip(loss.grads.par_chunks(CHUNK))
        .map(|(fw, gs)| {
            let mut acc = ImageGrads::zeros(params);
            for ((_, _, tape), g) in fw.iter().zip(gs) {
                backward_image(tape, params, &cache, g, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ImageGrads::zeros(params);
    for p in &partials {
        total.accumulate(p)?;
    }
    Ok(StepResult {
        loss: loss.loss,
        grads: backward_queries(&qtape, params, &total)?,
    })
}

/// Loss and gradient of one batch; exposed for gradient checks.
pub fn loss_and_gradient(batch: &LabeledBatch<'_>, params: &QaaParams, cfg: &TrainConfig) -> Result<(f64, QaaParams)> {
    let r = batch_gradient(batch, params, cfg)?;
    Ok((r.loss, r.grads))
}

fn all_finite(p: &QaaParams) -> bool {
    p.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
}

/// Trains from a seeded initialization. Results are deterministic for a
/// fixed config, independent of the worker count.
pub fn train(datasets: &[Dataset], val_sets: &[EvalSet], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(7);
    let params = QaaParams::init(cfg.model, &mut init_rng)?;
    train_from(params, datasets, val_sets, cfg)
}

/// Same as [`train`] but starting from the given parameters.
pub fn train_from(
    mut params: QaaParams,
    datasets: &[Dataset],
    val_sets: &[EvalSet],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.config != cfg.model {
        return Err(Error::Config("initial parameters do not match the model config".into()));
    }
    if datasets.is_empty() || val_sets.is_empty() {
        return Err(Error::Data("training needs at least one dataset and one validation set".into()));
    }
    let plan = cfg.plan(datasets.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let initial = recall1_per_set(&params, cfg.paradigm, &cfg.sinkhorn, val_sets)?;
    let initial_recall1 = mean(&initial);
    info!("epoch 0: recall@1 {initial_recall1:.4}");

    let mut best = params.clone();
    let mut best_recall1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut state = AdamState::default();
    let mut metrics = Vec::new();
    let mut iter: u64 = 0;
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=cfg.optimizer.max_epochs {
        let mut loss_sum = 0.0;
        for _ in 0..cfg.iters_per_epoch {
            let batch = compose_batch(datasets, &plan, &mut rng)?;
            let step = batch_gradient(&batch, &params, cfg);
            let failure = match step {
                Ok(s) if s.loss.is_finite() => {
                    let mut next = params.clone();
                    match optimizer_step(&mut next, &s.grads, &cfg.optimizer, &mut state, iter) {
                        Ok(()) if all_finite(&next) => {
                            params = next;
                            loss_sum += s.loss;
                            None
                        }
                        Ok(()) => Some("parameters became non-finite".to_string()),
                        Err(e) => Some(e.to_string()),
                    }
                }
                Ok(s) => Some(format!("loss is {}", s.loss)),
                Err(e @ (Error::Numeric(_) | Error::DegenerateDescriptor)) => Some(e.to_string()),
                Err(e) => return Err(e),
            };
            if let Some(message) = failure {
                warn!("diverged at epoch {epoch}, iteration {iter}: {message}");
                if best_recall1 == f64::NEG_INFINITY {
                    best = params.clone();
                    best_recall1 = initial_recall1;
                }
                stop = StopReason::Diverged {
                    epoch,
                    iteration: iter,
                    message,
                };
                break 'epochs;
            }
            iter += 1;
        }
        let per_set = recall1_per_set(&params, cfg.paradigm, &cfg.sinkhorn, val_sets)?;
        let recall1 = mean(&per_set);
        let loss = loss_sum / cfg.iters_per_epoch as f64;
        info!("epoch {epoch}: loss {loss:.5} recall@1 {recall1:.4}");
        metrics.push(EpochMetrics {
            epoch,
            loss,
            recall1,
            recall1_per_set: per_set,
        });
        if recall1 > best_recall1 {
            best_recall1 = recall1;
            best_epoch = epoch;
            best = params.clone();
            stale = 0;
        } else if iter >= cfg.optimizer.warmup_iters {
            stale += 1;
            if stale >= cfg.patience {
                stop = StopReason::Plateau { epoch };
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best,
        paradigm: cfg.paradigm,
        metrics,
        initial_recall1,
        best_epoch,
        best_recall1,
        stop,
        iterations: iter,
    })
}

/// One row of a cross-dataset ablation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub trained_on: String,
    /// Recall@1 on every domain's validation set, in domain order.
    pub recall1: Vec<f64>,
    pub min_recall1: f64,
}

/// Trains on `domains` of `world` and evaluates on every domain.
pub fn train_and_evaluate(
    world: &SyntheticWorld,
    data: &DataConfig,
    cfg: &TrainConfig,
    domains: &[usize],
) -> Result<(TrainOutcome, AblationRow)> {
    let (datasets, evals) = prepare_data(world, data, domains)?;
    let val: Vec<EvalSet> = domains.iter().map(|&d| evals[d].clone()).collect();
    let outcome = train(&datasets, &val, cfg)?;
    let recall1 = recall1_per_set(&outcome.params, cfg.paradigm, &cfg.sinkhorn, &evals)?;
    let min_recall1 = recall1.iter().copied().fold(f64::INFINITY, f64::min);
    let trained_on = domains
        .iter()
        .map(|&d| world.domains[d].name.as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok((
        outcome,
        AblationRow {
            trained_on,
            recall1,
            min_recall1,
        },
    ))
}

/// Every single-domain model followed by the joint model.
pub fn cross_dataset_ablation(world: &SyntheticWorld, data: &DataConfig, cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    let n = world.domains.len();
    let mut rows = Vec::with_capacity(n + 1);
    for d in 0..n {
        rows.push(train_and_evaluate(world, data, cfg, &[d])?.1);
    }
    rows.push(train_and_evaluate(world, data, cfg, &(0..n).collect::<Vec<_>>())?.1);
    Ok(rows)
}
