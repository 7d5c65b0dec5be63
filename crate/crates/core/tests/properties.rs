use futureseg::convlstm::{run_bidirectional, run_sequence, CellShape, ConvLstmParams};
use futureseg::data::{
    argmax_classes, augment, one_hot, read_segv_from, write_segv_to, SegDataset, SegMap, SegSequence,
};
use futureseg::segnet::{LstmMode, ModelConfig, ModelParams};
use futureseg::train_eval::{read_checkpoint_from, write_checkpoint_to, Checkpoint};
use futureseg::{conv2d, Conv2dSpec, Init, Tensor};
use proptest::prelude::*;

fn seg_map(h: usize, w: usize, k: u8) -> impl Strategy<Value = SegMap> {
    prop::collection::vec(0..k, h * w).prop_map(move |d| SegMap::new(h, w, d).unwrap())
}

fn sequence(frames: usize, h: usize, w: usize, k: u8) -> impl Strategy<Value = SegSequence> {
    prop::collection::vec(seg_map(h, w, k), frames).prop_map(|frames| SegSequence { frames })
}

fn classes(m: &SegMap) -> std::collections::BTreeSet<u8> {
    m.data().iter().copied().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_is_linear(
        seed in any::<u64>(),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
        stride in 1usize..=2,
        dilation in 1usize..=2,
    ) {
        let x = Tensor::<f64>::new([2, 3, 6, 6], Init::Normal { std: 1.0, seed }).unwrap();
        let y = Tensor::<f64>::new([2, 3, 6, 6], Init::Normal { std: 1.0, seed: seed ^ 1 }).unwrap();
        let w = Tensor::<f64>::new([4, 3, 3, 3], Init::Normal { std: 1.0, seed: seed ^ 2 }).unwrap();
        let spec = Conv2dSpec { stride, padding: dilation, dilation };
        let mixed = x.scale(alpha).add(&y.scale(beta)).unwrap();
        let lhs = conv2d(&mixed, &w, None, spec).unwrap();
        let rhs = conv2d(&x, &w, None, spec).unwrap().scale(alpha)
            .add(&conv2d(&y, &w, None, spec).unwrap().scale(beta)).unwrap();
        let scale = rhs.max_abs().max(1.0);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * scale);
        }
    }

    #[test]
    fn upsampling_preserves_the_mean(seed in any::<u64>(), factor in 1usize..4) {
        let x = Tensor::<f64>::new([1, 2, 3, 5], Init::Uniform { bound: 4.0, seed }).unwrap();
        let up = x.upsample_nearest(factor).unwrap();
        prop_assert_eq!(up.dims(), [1, 2, 3 * factor, 5 * factor]);
        prop_assert!((up.mean() - x.mean()).abs() < 1e-12);
    }

    #[test]
    fn augmentation_never_invents_classes(
        seq in sequence(5, 12, 10, 4),
        seed in any::<u64>(),
        ch in 1usize..=12,
        cw in 1usize..=10,
    ) {
        let out = augment(&seq, seed, (ch, cw), &[0, 1, 2, 3]).unwrap();
        prop_assert_eq!(out.frames.len(), seq.frames.len());
        for (a, b) in out.frames.iter().zip(&seq.frames) {
            prop_assert!(classes(a).is_subset(&classes(b)));
            let dims = (a.height(), a.width());
            prop_assert!(dims == (ch, cw) || dims == (cw, ch));
        }
    }

    #[test]
    fn full_frame_augmentation_keeps_histograms(seq in sequence(4, 8, 8, 5), seed in any::<u64>()) {
        let out = augment(&seq, seed, (8, 8), &[0, 1, 2, 3]).unwrap();
        for (a, b) in out.frames.iter().zip(&seq.frames) {
            prop_assert_eq!(a.histogram(5), b.histogram(5));
        }
    }

    #[test]
    fn half_turn_is_an_involution(m in seg_map(5, 7, 6)) {
        prop_assert_eq!(m.rotate(2).rotate(2), m.clone());
        prop_assert_eq!(m.rotate(1).rotate(3), m);
    }

    #[test]
    fn one_hot_is_inverted_by_argmax(m in seg_map(6, 5, 4)) {
        let t = one_hot::<f32>(&m, 4).unwrap();
        for p in 0..30 {
            let s: f32 = (0..4).map(|c| t.data()[c * 30 + p]).sum();
            prop_assert_eq!(s, 1.0);
        }
        prop_assert_eq!(argmax_classes(&t).unwrap().remove(0), m);
    }

    #[test]
    fn segv_round_trips(seqs in prop::collection::vec(sequence(5, 4, 6, 3), 0..4)) {
        let ds = SegDataset { num_classes: 3, height: 4, width: 6, sequences: seqs };
        let mut buf = Vec::new();
        write_segv_to(&mut buf, &ds).unwrap();
        prop_assert_eq!(buf.len(), 24 + ds.sequences.len() * (4 + 5 * 24));
        prop_assert_eq!(read_segv_from(&mut buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn convlstm_hidden_state_is_bounded(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let shape = CellShape { in_channels: 2, out_channels: 3, kernel: 3, height: 4, width: 4 };
        let p = ConvLstmParams::<Tensor<f64>>::random(shape, scale, seed).unwrap();
        let seq: Vec<Tensor<f64>> = (0..4)
            .map(|i| Tensor::new([1, 2, 4, 4], Init::Normal { std: scale, seed: seed ^ (i + 10) }).unwrap())
            .collect();
        let h = run_sequence(&p, &seq).unwrap();
        prop_assert!(h.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn shared_bidirectional_swaps_halves_under_time_reversal(seed in any::<u64>()) {
        let shape = CellShape { in_channels: 2, out_channels: 2, kernel: 3, height: 4, width: 4 };
        let p = ConvLstmParams::<Tensor<f32>>::random(shape, 0.7, seed).unwrap();
        let seq: Vec<Tensor<f32>> = (0..4)
            .map(|i| Tensor::new([1, 2, 4, 4], Init::Normal { std: 1.0, seed: seed ^ (i + 1) }).unwrap())
            .collect();
        let rev: Vec<Tensor<f32>> = seq.iter().rev().cloned().collect();
        let a = run_bidirectional(&p, &p, &seq).unwrap();
        let b = run_bidirectional(&p, &p, &rev).unwrap();
        prop_assert_eq!(a.slice_channels(0, 2).unwrap(), b.slice_channels(2, 2).unwrap());
        prop_assert_eq!(a.slice_channels(2, 2).unwrap(), b.slice_channels(0, 2).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), mode in 0u8..3, share in any::<bool>()) {
        let config = ModelConfig {
            num_classes: 5,
            height: 32,
            width: 16,
            widths: [3, 4, 5, 6],
            mode: LstmMode::from_code(mode).unwrap(),
            share_directions: share,
        };
        let ckpt = Checkpoint { params: ModelParams::init(&config, seed).unwrap(), config, seed, epochs: 3 };
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &ckpt).unwrap();
        prop_assert_eq!(read_checkpoint_from(&mut buf.as_slice()).unwrap(), ckpt);
    }
}
