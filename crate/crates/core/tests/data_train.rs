use mgcn_core::data::{
    make_windows, parse_csv, read_sequences, synth_kinematic, window_count, write_sequences, DEFAULT_RATE,
};
use mgcn_core::optim::{adam_step, AdamState};
use mgcn_core::train::{
    evaluate, evaluate_baseline, evaluate_with, mpjpe_loss, train, zero_velocity_baseline, TrainConfig,
};
use mgcn_core::{skeleton_preset, Error, ForecastModel, ModelConfig, PoseSequence, Strategy, SynthConfig, Tensor};
use proptest::prelude::*;
use proptest::strategy::Strategy as Gen;

fn sequence() -> impl Gen<Value = PoseSequence> {
    (1usize..5, 0usize..6, prop::option::of("[a-z_]{1,8}"), 1.0f64..120.0).prop_flat_map(|(v, f, label, rate)| {
        prop::collection::vec(-10.0f64..10.0, v * f * 3)
            .prop_map(move |c| PoseSequence::new(v, c, rate, label.clone()).unwrap())
    })
}

fn synth(joints: usize, frames: usize, seed: u64, start: usize) -> PoseSequence {
    synth_kinematic(&SynthConfig {
        joints,
        amplitude: 0.5,
        period: 16.0,
        frames,
        seed,
        noise: 0.0,
        start_frame: start,
    })
    .unwrap()
}

proptest! {
    #[test]
    fn mgps_round_trip_is_byte_identical(v in 1usize..4, seqs in prop::collection::vec(sequence(), 0..4)) {
        let seqs: Vec<PoseSequence> = seqs
            .into_iter()
            .map(|s| PoseSequence::new(v, vec![0.25; v * 3 * s.frame_count()], s.rate, s.label).unwrap())
            .collect();
        let bytes = write_sequences(&seqs);
        let back = read_sequences(&bytes).unwrap();
        prop_assert_eq!(&back, &seqs);
        prop_assert_eq!(write_sequences(&back), bytes);
    }

    #[test]
    fn arbitrary_coordinates_round_trip(s in sequence()) {
        let bytes = write_sequences(std::slice::from_ref(&s));
        prop_assert_eq!(read_sequences(&bytes).unwrap(), vec![s]);
    }

    #[test]
    fn window_counts_match_oracle(frames in prop::collection::vec(0usize..60, 1..4), t in 1usize..8, k in 1usize..8, stride in 1usize..4) {
        let sk = skeleton_preset("chain_2").unwrap();
        let seqs: Vec<_> = frames.iter().map(|&f| PoseSequence::new(2, vec![0.0; f * 6], 25.0, None).unwrap()).collect();
        let set = make_windows(&seqs, &sk, t, k, stride).unwrap();
        let oracle: usize = frames
            .iter()
            .map(|&f| (0..f).step_by(stride).filter(|&s| s + t + k <= f).count())
            .sum();
        prop_assert_eq!(set.len(), oracle);
        prop_assert_eq!(oracle, frames.iter().map(|&f| window_count(f, t, k, stride)).sum::<usize>());
    }

    #[test]
    fn loss_is_translation_invariant(
        p in prop::collection::vec(-3.0f64..3.0, 12),
        y in prop::collection::vec(-3.0f64..3.0, 12),
        c in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let shift = |v: &[f64]| -> Vec<f64> { v.iter().enumerate().map(|(i, x)| x + c[i % 3]).collect() };
        let t = |v: Vec<f64>| Tensor::new(v, &[1, 2, 2, 3]).unwrap();
        let a = mpjpe_loss(&t(p.clone()), &t(y.clone())).unwrap().item();
        let b = mpjpe_loss(&t(shift(&p)), &t(shift(&y))).unwrap().item();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn malformed_files_report_offsets() {
    let s = PoseSequence::new(2, vec![1.0; 12], 25.0, Some("walk".into())).unwrap();
    let bytes = write_sequences(&[s.clone()]);
    assert_eq!(read_sequences(&[]).unwrap(), vec![]);
    assert!(matches!(read_sequences(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'Z';
    assert!(matches!(read_sequences(&bad), Err(Error::Parse { offset: 0, .. })));
    let other = PoseSequence::new(3, vec![1.0; 9], 25.0, None).unwrap();
    let mut mixed = write_sequences(&[s]);
    mixed.extend_from_slice(&write_sequences(&[other])[5..]);
    assert!(matches!(read_sequences(&mixed), Err(Error::Parse { offset, .. }) if offset == bytes.len()));
}

#[test]
fn csv_import() {
    let text = "frame,joint,x,y,z\n0,0,1,2,3\n0,1,4,5,6\n1,1,10,11,12\n1,0,7,8,9\n";
    let s = parse_csv(text, DEFAULT_RATE, None).unwrap();
    assert_eq!(s.frame_count(), 2);
    assert_eq!(s.joint(1, 0), [7.0, 8.0, 9.0]);
    assert!(parse_csv("frame,joint,x,y,z\n0,0,1,2,3\n1,1,1,2,3\n", 25.0, None).is_err());
    assert!(parse_csv("frame,joint,x,y\n0,0,1,2\n", 25.0, None).is_err());
}

#[test]
fn synthetic_chain_preserves_bones_and_period() {
    let s = synth(6, 40, 3, 0);
    for f in 0..40 {
        assert_eq!(s.joint(f, 0), [0.0; 3]);
        for v in 1..6 {
            let (a, b) = (s.joint(f, v - 1), s.joint(f, v));
            let len = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            assert!((len - 1.0).abs() < 1e-12);
        }
    }
    for v in 0..6 {
        for (a, b) in s.joint(3, v).iter().zip(s.joint(19, v)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let later = synth(6, 10, 3, 30);
    assert_eq!(later.frame(0), s.frame(30));
}

fn tiny_model(strategy: Strategy) -> ForecastModel {
    let cfg = ModelConfig::new(4, 3, 1, 1, strategy).with_channels(&[3, 8, 3]);
    ForecastModel::new(skeleton_preset("chain_4").unwrap(), cfg, 3).unwrap()
}

#[test]
fn one_small_adam_step_lowers_loss() {
    let sk = skeleton_preset("chain_4").unwrap();
    let data = make_windows(&[synth(4, 20, 1, 0)], &sk, 4, 3, 1).unwrap();
    let (x, y) = data.batch(&(0..data.len()).collect::<Vec<_>>());
    for strategy in [Strategy::PseudoAutoregressive, Strategy::Anchor] {
        let mut model = tiny_model(strategy);
        let bound = model.params().bind();
        let loss = mpjpe_loss(&model.forward(&bound, &x).unwrap().predictions, &y).unwrap();
        let before = loss.item();
        loss.backward().unwrap();
        let mut state = AdamState::new(model.params());
        adam_step(model.params_mut(), &bound.gradients(), &mut state, 1e-4).unwrap();
        let after = mpjpe_loss(&model.predict(&x).unwrap(), &y).unwrap().item();
        assert!(after < before, "{strategy:?}: {after} >= {before}");
    }
}

#[test]
fn zero_epochs_leave_parameters_alone() {
    let sk = skeleton_preset("chain_4").unwrap();
    let data = make_windows(&[synth(4, 12, 1, 0)], &sk, 4, 3, 1).unwrap();
    let mut model = tiny_model(Strategy::Anchor);
    let before = model.params().clone();
    let log = train(&mut model, &data, &TrainConfig::desk(0, 4)).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(model.params(), &before);
}

#[test]
fn training_rejects_mismatched_data() {
    let sk = skeleton_preset("chain_4").unwrap();
    let data = make_windows(&[synth(4, 12, 1, 0)], &sk, 5, 3, 1).unwrap();
    let mut model = tiny_model(Strategy::None);
    assert!(matches!(train(&mut model, &data, &TrainConfig::desk(1, 4)), Err(Error::Dimension { .. })));
    let empty = make_windows(&[], &sk, 4, 3, 1).unwrap();
    assert!(matches!(train(&mut model, &empty, &TrainConfig::desk(1, 4)), Err(Error::EmptyDataset)));
}

#[test]
fn evaluation_matches_hand_loop() {
    let sk = skeleton_preset("chain_4").unwrap();
    let mut a = synth(4, 15, 1, 0);
    a.label = Some("a".into());
    let mut b = synth(4, 12, 2, 0);
    b.label = Some("b".into());
    let data = make_windows(&[a, b], &sk, 4, 3, 2).unwrap();
    let model = tiny_model(Strategy::PseudoAutoregressive);
    let report = evaluate(&model, &data, &[1, 3]).unwrap();
    assert_eq!(report.windows, data.len());

    let mut sums = [0.0; 2];
    for w in &data.windows {
        let x = Tensor::new(w.input.clone(), &[1, 4, 4, 3]).unwrap();
        let p = model.predict(&x).unwrap();
        for (slot, h) in [1usize, 3].into_iter().enumerate() {
            let at = (h - 1) * 12;
            let mut e = 0.0;
            for j in 0..4 {
                let d: f64 = (0..3).map(|c| (p.data()[at + j * 3 + c] - w.target[at + j * 3 + c]).powi(2)).sum();
                e += d.sqrt() / 4.0;
            }
            sums[slot] += e;
        }
    }
    for (slot, h) in [1usize, 3].into_iter().enumerate() {
        assert!((report.overall[&h] - sums[slot] / data.len() as f64).abs() < 1e-12);
    }
    assert_eq!(report.per_action.len(), 2);
    assert!(matches!(evaluate(&model, &data, &[4]), Err(Error::HorizonOutOfRange { horizon: 4, max: 3 })));

    // A perfect predictor scores zero.
    let perfect = evaluate_with(&data, &[1, 2, 3], |x| {
        let n = x.shape()[0];
        let idx: Vec<usize> = (0..data.len()).collect();
        let found: Vec<f64> = idx
            .chunks(n)
            .find(|c| data.batch(c).0.data() == x.data())
            .map(|c| data.batch(c).1.data().to_vec())
            .unwrap();
        Tensor::new(found, &[n, 3, 4, 3])
    })
    .unwrap();
    assert!(perfect.overall.values().all(|&e| e == 0.0));
}

#[test]
fn zero_velocity_baseline_repeats_last_frame() {
    let x = Tensor::new((0..24).map(f64::from).collect(), &[1, 4, 2, 3]).unwrap();
    let y = zero_velocity_baseline(&x, 3).unwrap();
    assert_eq!(y.shape(), &[1, 3, 2, 3]);
    for k in 0..3 {
        assert_eq!(&y.data()[k * 6..k * 6 + 6], &x.data()[18..24]);
    }
    let sk = skeleton_preset("chain_4").unwrap();
    let data = make_windows(&[synth(4, 20, 1, 0)], &sk, 4, 3, 1).unwrap();
    let report = evaluate_baseline(&data, &[1, 3]).unwrap();
    assert!(report.overall[&1] < report.overall[&3]);
}
