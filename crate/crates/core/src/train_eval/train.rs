use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::{augment, SegDataset, SegMap, SegSequence};
use crate::error::{Error, Result};
use crate::segnet::{forward_one_step, ModelConfig, ModelParams};
use crate::tensor::{derive_seed, Tensor};
use crate::train_eval::adam::{adam_step, AdamConfig, AdamState};
use crate::train_eval::checkpoint::Checkpoint;
use crate::train_eval::metrics::MetricsReport;
use crate::train_eval::predict::{evaluate_model, windows, EvalOptions};
use crate::INPUT_FRAMES;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1 << 20;
const AUGMENT_STREAM: u64 = 2 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Training windows per Adam update.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Random crop to the model's input size plus a random quarter-turn per sequence.
    pub augment: bool,
    /// Largest horizon in the final evaluation.
    pub horizon: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 6,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 7,
            augment: true,
            horizon: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Invalid("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's windows.
    pub loss: f64,
    /// One-step validation mIoU, when validation data is given.
    pub miou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation mIoU (the last epoch without validation data).
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
    /// Mean loss of the first batch, before any update.
    pub initial_loss: Option<f64>,
    /// Validation report of `checkpoint`, with the loss curve attached.
    pub report: Option<MetricsReport>,
}

impl TrainOutcome {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.loss).collect()
    }
}

pub fn train(cfg: &TrainConfig, train_data: &SegDataset, val_data: Option<&SegDataset>) -> Result<TrainOutcome> {
    train_with(cfg, train_data, val_data, |_| {})
}

fn check_data(cfg: &ModelConfig, data: &SegDataset, exact_size: bool, what: &str) -> Result<()> {
    data.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.num_classes != cfg.num_classes {
        return Err(Error::Invalid(format!(
            "{what} data has {} classes, model {}",
            data.num_classes, cfg.num_classes
        )));
    }
    let size_ok = if exact_size {
        data.height == cfg.height && data.width == cfg.width
    } else {
        data.height >= cfg.height && data.width >= cfg.width
    };
    if !size_ok {
        return Err(Error::Invalid(format!(
            "{what} frames are {}x{}, model input is {}x{}",
            data.height, data.width, cfg.height, cfg.width
        )));
    }
    if let Some(s) = data.sequences.iter().find(|s| s.len() < INPUT_FRAMES + 1) {
        return Err(Error::Invalid(format!(
            "{what} sequence of {} frames is too short for {INPUT_FRAMES} inputs and a target",
            s.len()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of one window and its gradient with respect to every
/// parameter tensor, in [`ModelParams::named`] order.
fn window_gradient(
    params: &ModelParams<Tensor<f32>>,
    cfg: &ModelConfig,
    inputs: &[&SegMap],
    target: &SegMap,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let logits = forward_one_step(&mut g, &bound, cfg, inputs)?;
    let targets: Vec<usize> = target.data().iter().map(|&c| c as usize).collect();
    let loss = g.softmax_cross_entropy(logits, &targets)?;
    let mut grads = g.backward(loss)?;
    let ids: Vec<NodeId> = bound.named().into_iter().map(|(_, &id)| id).collect();
    let grads = ids
        .into_iter()
        .map(|id| grads.take(id).ok_or_else(|| Error::Invalid("missing parameter gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok((g.value(loss).data()[0] as f64, grads))
}

fn quarter_turns(cfg: &ModelConfig) -> &'static [u8] {
    if cfg.height == cfg.width {
        &[0, 1, 2, 3]
    } else {
        &[0, 2]
    }
}

/// Trains with Adam on every window of `train_data`, calling `on_epoch` after each epoch.
pub fn train_with(
    cfg: &TrainConfig,
    train_data: &SegDataset,
    val_data: Option<&SegDataset>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = &cfg.model;
    check_data(model, train_data, !cfg.augment, "training")?;
    if let Some(v) = val_data {
        check_data(model, v, true, "validation")?;
    }
    let mut params = ModelParams::<Tensor<f32>>::init(model, derive_seed(cfg.seed, INIT_STREAM))?;
    let mut adam = AdamState::new(params.named().into_iter().map(|(_, t)| t));
    let snapshot = |params: &ModelParams<Tensor<f32>>, epochs: usize| Checkpoint {
        config: model.clone(),
        params: params.clone(),
        seed: cfg.seed,
        epochs: epochs as u32,
    };
    let mut best = snapshot(&params, 0);
    let mut best_miou = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM + epoch as u64)));
        let augment_seed = derive_seed(cfg.seed, AUGMENT_STREAM + epoch as u64);
        let sequences: Vec<SegSequence> = order
            .iter()
            .map(|&i| {
                let seq = &train_data.sequences[i];
                if cfg.augment {
                    augment(
                        seq,
                        derive_seed(augment_seed, i as u64),
                        (model.height, model.width),
                        quarter_turns(model),
                    )
                } else {
                    Ok(seq.clone())
                }
            })
            .collect::<Result<_>>()?;
        let samples: Vec<(usize, usize)> = sequences
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| windows(seq.len(), 1).map(move |i| (s, i)))
            .collect();

        let mut loss_sum = 0.0;
        for batch in samples.chunks(cfg.batch_size) {
            step += 1;
            let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> = batch
                .par_iter()
                .map(|&(s, i)| {
                    let frames = &sequences[s].frames;
                    let inputs: Vec<&SegMap> = frames[i..i + INPUT_FRAMES].iter().collect();
                    window_gradient(&params, model, &inputs, &frames[i + INPUT_FRAMES])
                })
                .collect();
            let mut batch_loss = 0.0;
            let mut total: Option<Vec<Tensor<f32>>> = None;
            for r in results {
                let (loss, grads) = r.map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        epoch,
                        step,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
                batch_loss += loss;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.add_assign(g)?;
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            initial_loss.get_or_insert(batch_loss / batch.len() as f64);
            loss_sum += batch_loss;
            let scale = 1.0 / batch.len() as f32;
            let grads: Vec<Tensor<f32>> = total
                .expect("non-empty batch")
                .iter()
                .map(|g| g.scale(scale))
                .collect();
            let mut slots = params.tensors_mut();
            adam_step(&mut slots, &grads, &mut adam, &cfg.adam)?;
            if slots.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss / batch.len() as f64,
                });
            }
        }

        let mut metrics = EpochMetrics {
            epoch,
            loss: loss_sum / samples.len() as f64,
            miou: None,
            per_class_iou: Vec::new(),
        };
        let current = snapshot(&params, epoch);
        match val_data {
            Some(v) => {
                let r = evaluate_model(&current, v, EvalOptions::default())?;
                metrics.miou = Some(r.miou);
                metrics.per_class_iou = r.per_class_iou;
                if r.miou > best_miou {
                    best_miou = r.miou;
                    best = current;
                }
            }
            None => best = current,
        }
        on_epoch(&metrics);
        history.push(metrics);
    }

    let report = match val_data {
        Some(v) => {
            let mut r = evaluate_model(
                &best,
                v,
                EvalOptions {
                    horizon: cfg.horizon,
                    threads: None,
                },
            )?;
            r.loss_curve = history.iter().map(|e| e.loss).collect();
            Some(r)
        }
        None => None,
    };
    Ok(TrainOutcome {
        checkpoint: best,
        history,
        initial_loss,
        report,
    })
}
