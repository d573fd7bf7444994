use mgcn_core::graph::multigraph_for;
use mgcn_core::layer::MgcnTower;
use mgcn_core::model::{temporal_align, VALUE_CHANNELS};
use mgcn_core::{skeleton_preset, Error, ForecastModel, ModelConfig, ParamSet, SkeletonGraph, Strategy, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

#[test]
fn full_size_shapes() {
    let sk = skeleton_preset("h36m22").unwrap();
    let model = ForecastModel::new(sk.clone(), ModelConfig::new(10, 25, 1, 2, Strategy::PseudoAutoregressive), 1)
        .unwrap();
    let x = random_input(&[2, 10, 22, 3], 1);
    assert_eq!(model.predict(&x).unwrap().shape(), &[2, 25, 22, 3]);

    let graph = multigraph_for(&sk, 10, 1, 2).unwrap();
    let mut ps = ParamSet::new();
    let tower = MgcnTower::new(&mut ps, "v", &VALUE_CHANNELS, 3, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let out = tower.forward(&ps.bind_frozen(), &x, &graph).unwrap();
    assert_eq!(out.shape(), &[2, 220, 3]);
}

#[test]
fn parameter_counts() {
    let sk = skeleton_preset("chain_5").unwrap();
    let count = |d: usize| {
        let mut cfg = ModelConfig::new(4, 3, 1, d, Strategy::None);
        cfg.refine = false;
        let m = ForecastModel::new(sk.clone(), cfg, 0).unwrap();
        let recorded: usize = m.params().iter().map(|p| p.shape.iter().product::<usize>()).sum();
        assert_eq!(m.count_parameters(), recorded);
        m.count_parameters() - 3 * 4
    };
    let per_partition = 3 * 64 + 64 * 32 + 32 * 64 + 64 * 3;
    assert_eq!(count(0), per_partition);
    assert_eq!(count(1), 2 * count(0));
    assert_eq!(count(3), 4 * count(0));
}

#[test]
fn tower_is_joint_permutation_equivariant() {
    let g = skeleton_preset("h36m22").unwrap();
    let (t, v) = (4, g.joint_count());
    let mut perm: Vec<usize> = (0..v).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let h = g.relabel(&perm).unwrap();

    let mut ps = ParamSet::new();
    let tower = MgcnTower::new(&mut ps, "v", &[3, 16, 8, 3], 3, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let bound = ps.bind_frozen();
    let x = random_input(&[2, t, v, 3], 9);
    let mut px = vec![0.0; x.numel()];
    for n in 0..2 * t {
        for j in 0..v {
            let (src, dst) = ((n * v + j) * 3, (n * v + perm[j]) * 3);
            px[dst..dst + 3].copy_from_slice(&x.data()[src..src + 3]);
        }
    }
    let px = Tensor::new(px, x.shape()).unwrap();
    let y = tower.forward(&bound, &x, &multigraph_for(&g, t, 1, 2).unwrap()).unwrap();
    let py = tower.forward(&bound, &px, &multigraph_for(&h, t, 1, 2).unwrap()).unwrap();
    for n in 0..2 * t {
        for j in 0..v {
            for d in 0..3 {
                let a = y.data()[(n * v + j) * 3 + d];
                let b = py.data()[(n * v + perm[j]) * 3 + d];
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn zero_value_tower_reproduces_last_frame() {
    let sk = skeleton_preset("chain_6").unwrap();
    let mut cfg = ModelConfig::new(5, 4, 1, 1, Strategy::PseudoAutoregressive).with_channels(&[3, 8, 3]);
    cfg.refine = false;
    let mut model = ForecastModel::new(sk, cfg, 2).unwrap();
    for p in model.params_mut().iter_mut().filter(|p| p.name.starts_with("v_tower")) {
        p.values.iter_mut().for_each(|v| *v = 0.0);
    }
    let x = random_input(&[3, 5, 6, 3], 4);
    let out = model.forward(&model.params().bind_frozen(), &x).unwrap();
    let frame = 6 * 3;
    for b in 0..3 {
        let last = &x.data()[(b * 5 + 4) * frame..(b * 5 + 5) * frame];
        for i in 0..5 {
            let z = &out.intermediate.data()[(b * 5 + i) * frame..(b * 5 + i + 1) * frame];
            assert_eq!(z, last);
        }
        for k in 0..4 {
            let p = &out.predictions.data()[(b * 4 + k) * frame..(b * 4 + k + 1) * frame];
            for (a, e) in p.iter().zip(last) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn every_strategy_builds_and_runs() {
    let sk = skeleton_preset("chain_5").unwrap();
    let x = random_input(&[2, 6, 5, 3], 8);
    for (strategy, anchors, refine) in [
        (Strategy::None, 6, true),
        (Strategy::Plain, 6, true),
        (Strategy::PseudoAutoregressive, 6, true),
        (Strategy::Anchor, 2, true),
        (Strategy::Anchor, 6, true),
        (Strategy::Anchor, 6, false),
    ] {
        let mut cfg = ModelConfig::new(6, 3, 2, 3, strategy).with_channels(&[3, 6, 3]);
        cfg.anchor_count = anchors;
        cfg.refine = refine;
        let m = ForecastModel::new(sk.clone(), cfg, 1).unwrap();
        assert_eq!(m.q_tower().is_some(), strategy.uses_scores());
        assert_eq!(m.refine_tower().is_some(), refine);
        assert_eq!(m.predict(&x).unwrap().shape(), &[2, 3, 5, 3]);
    }
}

#[test]
fn construction_rejects_bad_configs() {
    let sk = skeleton_preset("chain_5").unwrap();
    let mut cfg = ModelConfig::new(6, 3, 1, 1, Strategy::Anchor);
    cfg.anchor_count = 7;
    assert!(matches!(ForecastModel::new(sk.clone(), cfg, 0), Err(Error::Config { .. })));
    let cfg = ModelConfig::new(6, 3, 1, 1, Strategy::None).with_channels(&[3, 8, 4]);
    assert!(ForecastModel::new(sk.clone(), cfg, 0).is_err());
    let disconnected = SkeletonGraph::new(4, [(0, 1), (2, 3)]).unwrap();
    let cfg = ModelConfig::new(6, 3, 1, 1, Strategy::None);
    assert!(ForecastModel::new(disconnected, cfg, 0).is_err());
    let model = ForecastModel::new(sk, ModelConfig::new(6, 3, 1, 1, Strategy::None), 0).unwrap();
    assert!(model.predict(&Tensor::zeros(&[1, 5, 5, 3])).is_err());
}

#[test]
fn same_seed_same_model() {
    let sk = skeleton_preset("chain_4").unwrap();
    let cfg = ModelConfig::new(4, 2, 1, 1, Strategy::Anchor).with_channels(&[3, 5, 3]);
    let a = ForecastModel::new(sk.clone(), cfg.clone(), 42).unwrap();
    let b = ForecastModel::new(sk.clone(), cfg.clone(), 42).unwrap();
    let c = ForecastModel::new(sk, cfg, 43).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    let x = random_input(&[2, 4, 4, 3], 0);
    assert_eq!(a.predict(&x).unwrap().data(), b.predict(&x).unwrap().data());
}

#[test]
fn frozen_inference_is_shareable_across_threads() {
    let sk = skeleton_preset("chain_4").unwrap();
    let cfg = ModelConfig::new(4, 2, 1, 1, Strategy::PseudoAutoregressive).with_channels(&[3, 5, 3]);
    let model = ForecastModel::new(sk, cfg, 1).unwrap();
    let x = random_input(&[1, 4, 4, 3], 0).data().to_vec();
    let want = model.predict(&Tensor::new(x.clone(), &[1, 4, 4, 3]).unwrap()).unwrap().data().to_vec();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..3)
            .map(|_| s.spawn(|| model.predict(&Tensor::new(x.clone(), &[1, 4, 4, 3]).unwrap()).unwrap().data().to_vec()))
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), want);
        }
    });
}

#[test]
fn temporal_align_is_a_time_matmul() {
    let z = random_input(&[1, 3, 2, 3], 6);
    let tcn = Tensor::new(vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.0], &[2, 3]).unwrap();
    let out = temporal_align(&z, &tcn).unwrap();
    assert_eq!(out.shape(), &[1, 2, 2, 3]);
    assert_eq!(&out.data()[..6], &z.data()[..6]);
    for i in 0..6 {
        assert!((out.data()[6 + i] - 0.5 * (z.data()[i] + z.data()[6 + i])).abs() < 1e-15);
    }
}
