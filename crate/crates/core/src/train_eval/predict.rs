use std::ops::Range;

use rayon::prelude::*;

use crate::data::{argmax_classes, SegDataset, SegMap, SegSequence};
use crate::error::{Error, Result};
use crate::segnet::predict_logits;
use crate::train_eval::checkpoint::Checkpoint;
use crate::train_eval::metrics::{ConfusionMatrix, MetricsReport};
use crate::INPUT_FRAMES;

/// Start indices `i` of the windows whose inputs are frames `i..i+4` and whose
/// targets `i+4..i+4+horizon` all exist in a sequence of `len` frames.
pub fn windows(len: usize, horizon: usize) -> Range<usize> {
    0..(len + 1).saturating_sub(INPUT_FRAMES + horizon)
}

/// Argmax of the model's logits for the frame after `inputs`; ties go to the lowest class.
pub fn predict_one_step(ckpt: &Checkpoint, inputs: &[&SegMap]) -> Result<SegMap> {
    let logits = predict_logits(&ckpt.params, &ckpt.config, inputs)?;
    Ok(argmax_classes(&logits)?.remove(0))
}

/// `horizon` maps, each predicted from the previous four (observed or predicted) maps.
pub fn predict_autoregressive(ckpt: &Checkpoint, inputs: &[&SegMap], horizon: usize) -> Result<Vec<SegMap>> {
    if horizon == 0 {
        return Err(Error::Invalid("horizon must be at least 1".into()));
    }
    if inputs.len() != INPUT_FRAMES {
        return Err(Error::FrameCount {
            expected: INPUT_FRAMES,
            got: inputs.len(),
        });
    }
    let first = predict_one_step(ckpt, inputs)?;
    continue_autoregressive(ckpt, inputs, first, horizon)
}

fn continue_autoregressive(ckpt: &Checkpoint, inputs: &[&SegMap], first: SegMap, horizon: usize) -> Result<Vec<SegMap>> {
    let mut window: Vec<SegMap> = inputs[1..].iter().map(|&m| m.clone()).collect();
    window.push(first.clone());
    let mut out = vec![first];
    while out.len() < horizon {
        let refs: Vec<&SegMap> = window.iter().collect();
        let next = predict_one_step(ckpt, &refs)?;
        window.remove(0);
        window.push(next.clone());
        out.push(next);
    }
    Ok(out)
}

/// The most recent input, unchanged.
pub fn copy_last_baseline(inputs: &[&SegMap]) -> Result<SegMap> {
    inputs
        .last()
        .map(|&m| m.clone())
        .ok_or_else(|| Error::Invalid("copy-last needs at least one input".into()))
}

/// Evaluation settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Largest prediction horizon reported.
    pub horizon: usize,
    /// Cap on worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            horizon: 1,
            threads: None,
        }
    }
}

/// Confusion matrices of one sequence: index 0 covers one-step predictions
/// over every window, index `h` covers horizon `h` over the windows that
/// admit the largest horizon.
type SequenceCounts = Vec<ConfusionMatrix>;

fn evaluate_with<F>(data: &SegDataset, opts: EvalOptions, per_sequence: F) -> Result<MetricsReport>
where
    F: Fn(&SegSequence) -> Result<SequenceCounts> + Sync,
{
    if opts.horizon == 0 {
        return Err(Error::Invalid("horizon must be at least 1".into()));
    }
    data.validate()?;
    let run = || -> Result<Vec<SequenceCounts>> { data.sequences.par_iter().map(&per_sequence).collect() };
    let counts = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let mut total: SequenceCounts = (0..=opts.horizon).map(|_| ConfusionMatrix::new(data.num_classes)).collect();
    for seq in &counts {
        for (t, c) in total.iter_mut().zip(seq) {
            t.merge(c);
        }
    }
    let mut report = MetricsReport::from_confusion(&total[0])?;
    report.per_horizon_miou = total[1..]
        .iter()
        .map(|cm| cm.miou().ok_or(Error::EmptyDataset))
        .collect::<Result<_>>()?;
    Ok(report)
}

/// Scores `predict` (one map per horizon for the window starting at `i`)
/// against the true frames of one sequence.
fn score_sequence(
    seq: &SegSequence,
    num_classes: usize,
    horizon: usize,
    mut predict: impl FnMut(usize, usize) -> Result<Vec<SegMap>>,
) -> Result<SequenceCounts> {
    let mut out: SequenceCounts = (0..=horizon).map(|_| ConfusionMatrix::new(num_classes)).collect();
    let far = windows(seq.len(), horizon);
    for i in windows(seq.len(), 1) {
        let steps = if far.contains(&i) { horizon } else { 1 };
        let preds = predict(i, steps)?;
        out[0].add(&preds[0], &seq.frames[i + INPUT_FRAMES])?;
        if steps == horizon {
            for (h, p) in preds.iter().enumerate() {
                out[h + 1].add(p, &seq.frames[i + INPUT_FRAMES + h])?;
            }
        }
    }
    Ok(out)
}

/// mIoU of the model's one-step predictions over every window, plus
/// autoregressive mIoU at horizons `1..=opts.horizon`.
pub fn evaluate_model(ckpt: &Checkpoint, data: &SegDataset, opts: EvalOptions) -> Result<MetricsReport> {
    ckpt.validate()?;
    if data.num_classes != ckpt.config.num_classes {
        return Err(Error::Checkpoint(format!(
            "dataset has {} classes, model {}",
            data.num_classes, ckpt.config.num_classes
        )));
    }
    evaluate_with(data, opts, |seq| {
        score_sequence(seq, data.num_classes, opts.horizon, |i, steps| {
            let inputs: Vec<&SegMap> = seq.frames[i..i + INPUT_FRAMES].iter().collect();
            predict_autoregressive(ckpt, &inputs, steps)
        })
    })
}

/// The same report for the copy-last baseline, on the same windows.
pub fn evaluate_copy_last(data: &SegDataset, opts: EvalOptions) -> Result<MetricsReport> {
    evaluate_with(data, opts, |seq| {
        score_sequence(seq, data.num_classes, opts.horizon, |i, steps| {
            let inputs: Vec<&SegMap> = seq.frames[i..i + INPUT_FRAMES].iter().collect();
            let last = copy_last_baseline(&inputs)?;
            Ok(vec![last; steps])
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig};
    use crate::segnet::{LstmMode, ModelConfig, ModelParams};

    fn zero_ckpt() -> Checkpoint {
        let config = ModelConfig {
            num_classes: 3,
            height: 16,
            width: 16,
            widths: [2, 2, 2, 2],
            mode: LstmMode::Uni,
            share_directions: false,
        };
        Checkpoint {
            params: ModelParams::zeros(&config).unwrap(),
            config,
            seed: 0,
            epochs: 0,
        }
    }

    fn small_data(sequences: usize, max_speed: i64) -> SegDataset {
        generate_dataset(&GenConfig {
            height: 16,
            width: 16,
            num_classes: 3,
            shapes_per_sequence: 1,
            min_size: 3,
            max_size: 6,
            max_speed,
            frames: 8,
            sequences,
            seed: 11,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn window_ranges() {
        assert_eq!(windows(8, 1), 0..4);
        assert_eq!(windows(8, 3), 0..2);
        assert_eq!(windows(5, 1), 0..1);
        assert_eq!(windows(4, 1), 0..0);
        assert_eq!(windows(0, 3), 0..0);
    }

    #[test]
    fn zero_checkpoint_predicts_class_zero() {
        let ckpt = zero_ckpt();
        let data = small_data(1, 2);
        let inputs: Vec<&SegMap> = data.sequences[0].frames[..4].iter().collect();
        let one = predict_one_step(&ckpt, &inputs).unwrap();
        assert!(one.data().iter().all(|&c| c == 0));
        let many = predict_autoregressive(&ckpt, &inputs, 3).unwrap();
        assert_eq!(many.len(), 3);
        for m in &many {
            assert_eq!((m.height(), m.width()), (16, 16));
            assert!(m.data().iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn horizon_one_matches_one_step() {
        let config = zero_ckpt().config;
        let ckpt = Checkpoint {
            params: ModelParams::init(&config, 4).unwrap(),
            ..zero_ckpt()
        };
        let data = small_data(1, 2);
        let inputs: Vec<&SegMap> = data.sequences[0].frames[..4].iter().collect();
        let one = predict_one_step(&ckpt, &inputs).unwrap();
        assert_eq!(predict_autoregressive(&ckpt, &inputs, 1).unwrap(), vec![one.clone()]);
        assert_eq!(predict_autoregressive(&ckpt, &inputs, 3).unwrap()[0], one);
        assert!(predict_autoregressive(&ckpt, &inputs, 0).is_err());
        assert!(predict_one_step(&ckpt, &inputs[..3]).is_err());
    }

    #[test]
    fn copy_last_is_the_last_input() {
        let data = small_data(1, 2);
        let inputs: Vec<&SegMap> = data.sequences[0].frames[..4].iter().collect();
        assert_eq!(&copy_last_baseline(&inputs).unwrap(), inputs[3]);
        assert!(copy_last_baseline(&[]).is_err());
    }

    #[test]
    fn copy_last_is_perfect_on_static_scenes() {
        let r = evaluate_copy_last(&small_data(3, 0), EvalOptions { horizon: 3, threads: Some(1) }).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_horizon_miou, vec![1.0; 3]);
    }

    #[test]
    fn copy_last_loses_on_moving_scenes() {
        let data = small_data(1, 2);
        let moving = data.sequences[0].frames.windows(2).any(|w| w[0] != w[1]);
        assert!(moving);
        let r = evaluate_copy_last(&data, EvalOptions::default()).unwrap();
        assert!(r.miou < 1.0);
    }

    #[test]
    fn thread_cap_does_not_change_results() {
        let ckpt = Checkpoint {
            params: ModelParams::init(&zero_ckpt().config, 4).unwrap(),
            ..zero_ckpt()
        };
        let data = small_data(3, 2);
        let a = evaluate_model(&ckpt, &data, EvalOptions { horizon: 2, threads: Some(1) }).unwrap();
        let b = evaluate_model(&ckpt, &data, EvalOptions { horizon: 2, threads: Some(3) }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_horizon_miou.len(), 2);
    }
}
