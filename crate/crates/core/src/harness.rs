//! Continual-learning driver: per-task training, knowledge snapshots,
//! full-stream evaluation and Acc/BWF.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{encode_frame, AdapterStack, FrozenBackbone};
use crate::datagen::{generate_stream, SyntheticVideo, TaskStream};
use crate::error::{Error, Result};
use crate::expert::{clone_and_freeze, encode_spatiotemporal, ExpertParams};
use crate::fssd::{accumulate_importance, class_importance, ImportanceTable};
use crate::losses::LossBreakdown;
use crate::objective::{batch_loss_grad, video_spatial_mean, Batch, DistillTarget, Terms, Trainables};
use crate::param::{sgd_step, Parameterized};
use crate::rng::SeedStream;
use crate::runconfig::{Components, DistillStrategy, Preset, RunConfig};
use crate::tdmoe::{argmax, build_anchors, build_spatial_anchors, classify, fuse, route_scores, spatial_mean, AnchorPool, RoutingStrategy};

/// Model state carried across tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub backbone: FrozenBackbone,
    pub adapters: AdapterStack,
    /// Frozen copy of the adapters at the end of the previous task.
    pub prev_adapters: Option<AdapterStack>,
    /// Frozen experts, one per completed task (empty without experts).
    pub bank: Vec<ExpertParams>,
    pub anchors: AnchorPool,
    pub spatial_anchors: AnchorPool,
    pub importance: ImportanceTable,
    pub completed: usize,
}

impl Learner {
    pub fn new(cfg: &RunConfig) -> Self {
        let root = SeedStream::new(cfg.seed);
        let mut adapters = AdapterStack::new(&cfg.model, root.split("adapter"));
        if !cfg.components().adapter {
            adapters.freeze_all();
        }
        Self {
            backbone: FrozenBackbone::new(&cfg.model),
            adapters,
            prev_adapters: None,
            bank: Vec::new(),
            anchors: AnchorPool::default(),
            spatial_anchors: AnchorPool::default(),
            importance: ImportanceTable::new(cfg.model.d_vt),
            completed: 0,
        }
    }
}

/// Per-epoch mean losses of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCurve {
    pub task: usize,
    pub epochs: Vec<LossBreakdown>,
}

/// Knowledge held after a task finishes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAccounting {
    pub task: usize,
    pub frozen_backbone: usize,
    pub experts: usize,
    pub anchors: usize,
    pub importance_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub backbone_frozen: usize,
    pub adapter: usize,
    pub adapter_trainable: usize,
    pub adapter_closed_form: usize,
    pub experts: Vec<usize>,
    pub expert_closed_form: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub preset: Preset,
    pub routing: RoutingStrategy,
    pub distill: DistillStrategy,
    pub acc: f64,
    pub bwf: f64,
    /// Row `i` holds accuracies on tasks `0..=i` after training task `i`.
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub eval_counts: Vec<usize>,
    /// Share of final-evaluation samples whose own task's expert scores highest.
    pub routing_hit_rate: Option<f64>,
    pub loss_curves: Vec<TaskCurve>,
    pub accounting: Vec<TaskAccounting>,
    pub parameters: ParameterCounts,
    /// Highest accumulated importance weights after the final task.
    pub top_channels: Vec<ChannelWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeight {
    pub channel: usize,
    pub weight: f64,
}

pub const TOP_CHANNELS: usize = 5;

fn terms(components: Components) -> Terms {
    Terms {
        spatiotemporal: components.moe,
        spatial: components.adapter,
    }
}

fn frame_features(video: &SyntheticVideo, learner: &Learner) -> Result<Vec<Vec<f64>>> {
    video
        .frames
        .iter()
        .map(|f| encode_frame(f, &learner.backbone, &learner.adapters))
        .collect()
}

/// Trains task `b`, then freezes its expert, snapshots the adapters and
/// records importance and anchors for its classes.
pub fn train_task(b: usize, stream: &TaskStream, learner: &mut Learner, cfg: &RunConfig) -> Result<TaskCurve> {
    if b != learner.completed {
        return Err(Error::input(
            "train_task",
            format!("task {b} requested after {} completed tasks", learner.completed),
        ));
    }
    let task = stream
        .tasks
        .get(b)
        .ok_or_else(|| Error::input("train_task", format!("stream has no task {b}")))?;
    let components = cfg.components();
    let loss_cfg = cfg.train.loss();
    let root = SeedStream::new(cfg.seed);
    let texts: BTreeMap<usize, Vec<f64>> = task.classes.iter().map(|c| (*c, stream.texts[c].clone())).collect();

    let expert = components
        .moe
        .then(|| ExpertParams::new(&cfg.model, b, root.split("expert").split_index("task", b as u64)));
    let mut params = Trainables {
        adapters: learner.adapters.clone(),
        expert,
    };
    let training = components.adapter || components.moe;
    let weights: Option<Vec<f64>> = match (components.adapter, components.distill, &learner.prev_adapters) {
        (true, DistillStrategy::Fssd, Some(_)) => Some(learner.importance.accumulated.clone()),
        (true, DistillStrategy::Uniform, Some(_)) => Some(vec![1.0; cfg.model.d_vt]),
        _ => None,
    };

    let prev_features: Vec<Vec<f64>> = match (&weights, &learner.prev_adapters) {
        (Some(_), Some(prev)) => task
            .train
            .par_iter()
            .map(|v| video_spatial_mean(v, &learner.backbone, prev))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };

    let mut curve = TaskCurve { task: b, epochs: Vec::new() };
    let epochs = if training { cfg.train.epochs_for(b) } else { 0 };
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut root.split("shuffle").split_index("task", b as u64).split_index("epoch", epoch as u64).rng());
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.train.batch_size) {
            let videos: Vec<&SyntheticVideo> = chunk.iter().map(|&i| &task.train[i]).collect();
            let batch = Batch {
                videos: &videos,
                texts: &texts,
            };
            let prev: Vec<&[f64]> = if weights.is_some() {
                chunk.iter().map(|&i| prev_features[i].as_slice()).collect()
            } else {
                Vec::new()
            };
            let distill = weights.as_ref().map(|w| DistillTarget {
                prev_features: &prev,
                weights: w,
            });
            params.zero_grad();
            let l = batch_loss_grad(&learner.backbone, &mut params, &batch, distill, terms(components), &loss_cfg)?;
            // the learner still holds the state of the last completed task
            if !l.total.is_finite() {
                return Err(Error::Divergence {
                    task: b,
                    epoch,
                    loss: l.total,
                });
            }
            sgd_step(&mut params, cfg.train.lr);
            sum.spatiotemporal += l.spatiotemporal;
            sum.spatial += l.spatial;
            sum.distill = l.distill.map(|d| d + sum.distill.unwrap_or(0.0));
            sum.total += l.total;
            batches += 1;
        }
        let n = batches as f64;
        curve.epochs.push(LossBreakdown {
            spatiotemporal: sum.spatiotemporal / n,
            spatial: sum.spatial / n,
            distill: sum.distill.map(|d| d / n),
            total: sum.total / n,
        });
    }

    learner.adapters = params.adapters;
    let features: Vec<(usize, Vec<Vec<f64>>)> = task
        .train
        .par_iter()
        .map(|v| frame_features(v, learner).map(|f| (v.label, f)))
        .collect::<Result<_>>()?;

    if let Some(expert) = params.expert {
        let frozen = clone_and_freeze(&expert);
        learner.anchors.insert_task(b, build_anchors(&features, &task.classes, &frozen)?)?;
        learner.bank.push(frozen);
    }
    learner
        .spatial_anchors
        .insert_task(b, build_spatial_anchors(&features, &task.classes)?)?;

    if components.adapter {
        let mut by_class: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for (label, frames) in &features {
            by_class.entry(*label).or_default().push(spatial_mean(frames)?);
        }
        let rows = class_importance(&by_class, &texts)?;
        learner.importance = accumulate_importance(std::mem::replace(&mut learner.importance, ImportanceTable::new(0)), rows)?;
        let mut snapshot = learner.adapters.clone();
        snapshot.freeze_all();
        learner.prev_adapters = Some(snapshot);
    }
    learner.completed += 1;
    Ok(curve)
}

/// Outcome of classifying one evaluation video.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    /// Bank index with the highest routing score, when experts exist.
    pub routed_task: Option<usize>,
}

/// Inference for one video against every seen class.
pub fn predict(
    video: &SyntheticVideo,
    learner: &Learner,
    routing: RoutingStrategy,
    texts: &BTreeMap<usize, Vec<f64>>,
) -> Result<Prediction> {
    let frames = frame_features(video, learner)?;
    let vbar = spatial_mean(&frames)?;
    if learner.bank.is_empty() {
        return Ok(Prediction {
            class: classify(&vbar, texts)?,
            routed_task: None,
        });
    }
    let outputs = learner
        .bank
        .iter()
        .map(|e| encode_spatiotemporal(&frames, e).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    let tasks: Vec<usize> = learner.bank.iter().map(|e| e.task_id).collect();
    let scores = route_scores(routing, &vbar, &outputs, &tasks, &learner.anchors, &learner.spatial_anchors)?;
    let fused = fuse(&vbar, &outputs, &scores)?;
    Ok(Prediction {
        class: classify(&fused, texts)?,
        routed_task: argmax(&scores).map(|k| tasks[k]),
    })
}

/// Accuracy on each task `0..=upto` plus routing hits/total over those samples.
pub fn evaluate_all(learner: &Learner, stream: &TaskStream, upto: usize, routing: RoutingStrategy) -> Result<(Vec<f64>, usize, usize)> {
    let texts = stream.seen_texts(upto);
    let mut row = Vec::with_capacity(upto + 1);
    let mut hits = 0;
    let mut total = 0;
    for task in &stream.tasks[..=upto] {
        let preds = task
            .eval
            .par_iter()
            .map(|v| predict(v, learner, routing, &texts))
            .collect::<Result<Vec<_>>>()?;
        let correct = preds.iter().zip(&task.eval).filter(|(p, v)| p.class == v.label).count();
        row.push(correct as f64 / task.eval.len() as f64);
        for p in &preds {
            if let Some(t) = p.routed_task {
                hits += usize::from(t == task.id);
                total += 1;
            }
        }
    }
    Ok((row, hits, total))
}

/// Sample-weighted mean of the final row.
pub fn compute_acc(matrix: &[Vec<f64>], eval_counts: &[usize]) -> Result<f64> {
    let last = matrix.last().ok_or_else(|| Error::input("compute_acc", "empty accuracy matrix"))?;
    if last.len() != eval_counts.len() {
        return Err(Error::dim(
            "compute_acc",
            format!("final row has {} entries for {} tasks", last.len(), eval_counts.len()),
        ));
    }
    let n: usize = eval_counts.iter().sum();
    if n == 0 {
        return Err(Error::input("compute_acc", "no evaluation samples"));
    }
    Ok(last.iter().zip(eval_counts).map(|(a, &c)| a * c as f64).sum::<f64>() / n as f64)
}

/// `(1/(B−1)) Σ_{j<B} (A[j][j] − A[B][j])`, and 0 when `B = 1`.
pub fn compute_bwf(matrix: &[Vec<f64>]) -> Result<f64> {
    let b = matrix.len();
    if b == 0 {
        return Err(Error::input("compute_bwf", "empty accuracy matrix"));
    }
    for (i, row) in matrix.iter().enumerate() {
        if row.len() != i + 1 {
            return Err(Error::dim("compute_bwf", format!("row {i} has {} entries", row.len())));
        }
    }
    if b == 1 {
        return Ok(0.0);
    }
    let last = &matrix[b - 1];
    Ok((0..b - 1).map(|j| matrix[j][j] - last[j]).sum::<f64>() / (b - 1) as f64)
}

/// Full run with a hook after every task (used to snapshot state).
pub fn run_sequence_observed(
    cfg: &RunConfig,
    stream: &TaskStream,
    mut on_task_end: impl FnMut(usize, &Learner),
) -> Result<(MetricsReport, Learner)> {
    cfg.validate()?;
    if stream.model != cfg.model {
        return Err(Error::Config("stream was generated for a different model configuration".into()));
    }
    let components = cfg.components();
    let mut learner = Learner::new(cfg);
    let mut matrix = Vec::with_capacity(stream.tasks.len());
    let mut curves = Vec::with_capacity(stream.tasks.len());
    let mut accounting = Vec::with_capacity(stream.tasks.len());
    let mut last_hits = (0, 0);
    for b in 0..stream.tasks.len() {
        curves.push(train_task(b, stream, &mut learner, cfg)?);
        let (row, hits, total) = evaluate_all(&learner, stream, b, cfg.train.routing)?;
        matrix.push(row);
        last_hits = (hits, total);
        accounting.push(TaskAccounting {
            task: b,
            frozen_backbone: learner.backbone.count_params() - learner.backbone.count_trainable(),
            experts: learner.bank.len(),
            anchors: learner.anchors.len(),
            importance_rows: learner.importance.rows.len(),
        });
        on_task_end(b, &learner);
    }
    let eval_counts: Vec<usize> = stream.tasks.iter().map(|t| t.eval.len()).collect();
    let report = MetricsReport {
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        preset: cfg.preset,
        routing: cfg.train.routing,
        distill: components.distill,
        acc: compute_acc(&matrix, &eval_counts)?,
        bwf: compute_bwf(&matrix)?,
        accuracy_matrix: matrix,
        eval_counts,
        routing_hit_rate: (last_hits.1 > 0).then(|| last_hits.0 as f64 / last_hits.1 as f64),
        loss_curves: curves,
        accounting,
        parameters: ParameterCounts {
            backbone_frozen: learner.backbone.count_params() - learner.backbone.count_trainable(),
            adapter: learner.adapters.count_params(),
            adapter_trainable: learner.adapters.count_trainable(),
            adapter_closed_form: AdapterStack::expected_count(&cfg.model),
            experts: learner.bank.iter().map(|e| e.count_params()).collect(),
            expert_closed_form: ExpertParams::expected_count(&cfg.model),
        },
        top_channels: learner
            .importance
            .ranked_channels()
            .into_iter()
            .take(TOP_CHANNELS)
            .map(|(channel, weight)| ChannelWeight { channel, weight })
            .collect(),
    };
    Ok((report, learner))
}

pub fn run_sequence(cfg: &RunConfig, stream: &TaskStream) -> Result<MetricsReport> {
    run_sequence_observed(cfg, stream, |_, _| {}).map(|(r, _)| r)
}

/// Generates the configured stream and runs it.
pub fn run_config(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let stream = generate_stream(cfg.seed, &cfg.stream, &cfg.model)?;
    run_sequence(cfg, &stream)
}

/// Default configuration with the given preset.
pub fn run_preset(name: &str) -> Result<MetricsReport> {
    let cfg = RunConfig {
        preset: name.parse()?,
        ..Default::default()
    };
    run_config(&cfg)
}
