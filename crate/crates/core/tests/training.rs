use sefc::data::{make_windows, synthetic_sinusoid, SinusoidSpec, Window, WindowSpec};
use sefc::model::{Model, ModelConfig};
use sefc::numerics::{Graph, Tensor};
use sefc::training::{evaluate_loss, fit, loss, TrainConfig};
use sefc::Error;

fn windows(len: usize, seed: u64) -> (Vec<Window<f64>>, Vec<Window<f64>>) {
    let frame = synthetic_sinusoid::<f64>(&SinusoidSpec {
        len,
        period: 8.0,
        seed,
        ..SinusoidSpec::default()
    });
    let spec = WindowSpec {
        context_len: 32,
        horizon: 8,
        stride: 2,
    };
    let cut = len * 4 / 5;
    let train = make_windows(&frame.rows(0, cut).unwrap(), spec, true, 1e-5).unwrap();
    let val = make_windows(&frame.rows(cut - 32, len - cut + 32).unwrap(), spec, true, 1e-5).unwrap();
    (train, val)
}

fn cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: 2,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_examples() {
    let mut g = Graph::<f64>::new();
    let a = g
        .constant(Tensor::from_f64([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
        .unwrap();
    let b = g
        .constant(Tensor::from_f64([2, 3], &[2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap())
        .unwrap();
    let same = loss(&mut g, a, a, None, 0.0).unwrap();
    assert_eq!(g.value(same).data()[0], 0.0);
    let off = loss(&mut g, a, b, None, 0.0).unwrap();
    assert_eq!(g.value(off).data()[0], 1.0);
    let mu = g.constant(Tensor::zeros([2, 4])).unwrap();
    let lv = g.constant(Tensor::zeros([2, 4])).unwrap();
    let with_kl = loss(&mut g, a, a, Some((mu, lv)), 1.0).unwrap();
    assert_eq!(g.value(with_kl).data()[0], 0.0);
    let c = g.constant(Tensor::zeros([3, 2])).unwrap();
    assert!(loss(&mut g, a, c, None, 0.0).is_err());
}

#[test]
fn kl_term_is_weighted() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([1, 2])).unwrap();
    let mu = g.constant(Tensor::ones([1, 2])).unwrap();
    let lv = g.constant(Tensor::zeros([1, 2])).unwrap();
    let l = loss(&mut g, a, a, Some((mu, lv)), 2.0).unwrap();
    assert!((g.value(l).data()[0] - 1.0).abs() < 1e-12);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            clip_norm: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            kl_weight: -1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn empty_streams_are_rejected() {
    let (train, _) = windows(200, 1);
    let mut m = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
    assert!(fit(&mut m, &train, &[], &cfg(1)).is_err());
    assert!(fit(&mut m, &[], &train, &cfg(1)).is_err());
}

#[test]
fn equal_seeds_give_identical_runs() {
    let (train, val) = windows(240, 2);
    let run = |depth: usize| {
        let mut m = Model::<f64>::new(ModelConfig::tiny(), 5).unwrap();
        let c = TrainConfig {
            queue_depth: depth,
            ..cfg(9)
        };
        let r = fit(&mut m, &train, &val, &c).unwrap();
        (r, m.store.digest(&m.store.ids().collect::<Vec<_>>()))
    };
    let (a, da) = run(4);
    let (b, db) = run(1);
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_eq!(da, db);
    assert_eq!(a.batch_fingerprint(), b.batch_fingerprint());
    let mut m = Model::<f64>::new(ModelConfig::tiny(), 5).unwrap();
    let c = fit(&mut m, &train, &val, &cfg(10)).unwrap();
    assert_ne!(a.batch_fingerprint(), c.batch_fingerprint());
}

#[test]
fn hundred_steps_touch_only_trainable_parameters() {
    let (train, val) = windows(400, 3);
    let mut m = Model::<f64>::new(ModelConfig::tiny(), 7).unwrap();
    let frozen = m.store.frozen_ids();
    let before: Vec<String> = m.store.ids().map(|id| m.store.digest(&[id])).collect();
    let c = TrainConfig {
        max_epochs: 100,
        patience: 100,
        max_steps: Some(100),
        ..cfg(3)
    };
    let r = fit(&mut m, &train, &val, &c).unwrap();
    assert_eq!(r.steps, 100);
    assert_eq!(m.store.digest(&frozen), r.frozen_digest);
    for (id, old) in m.store.ids().zip(&before) {
        let p = m.store.get(id);
        let changed = &m.store.digest(&[id]) != old;
        assert_eq!(changed, p.trainable, "{}", p.name);
    }
    assert_ne!(r.trainable_digest_before, r.trainable_digest_after);
}

#[test]
fn report_invariants() {
    let (train, val) = windows(240, 4);
    let mut m = Model::<f64>::new(ModelConfig::tiny(), 8).unwrap();
    let r = fit(
        &mut m,
        &train,
        &val,
        &TrainConfig {
            max_epochs: 4,
            ..cfg(4)
        },
    )
    .unwrap();
    let min = r.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(r.best_val_loss, min);
    assert_eq!(r.epochs[r.best_epoch - 1].val_loss, min);
    assert_eq!(r.batch_digests.len(), r.steps);
    assert_eq!(r.counts.trainable_tensors + r.counts.frozen_tensors, m.store.len());
    assert!(m.is_trained());
    assert_eq!(evaluate_loss(&m, &val, 8).unwrap(), r.best_val_loss);
}

#[test]
fn early_stopping_honors_patience() {
    let (train, val) = windows(240, 5);
    let mut stopped = 0;
    for patience in [1, 2] {
        let mut m = Model::<f64>::new(ModelConfig::tiny(), 9).unwrap();
        let c = TrainConfig {
            learning_rate: 0.03,
            max_epochs: 12,
            patience,
            ..cfg(5)
        };
        let r = fit(&mut m, &train, &val, &c).unwrap();
        let ran = r.epochs.len();
        assert!(
            ran == c.max_epochs || ran - r.best_epoch == patience,
            "{patience}: {ran} {}",
            r.best_epoch
        );
        stopped += usize::from(ran < c.max_epochs);
    }
    assert!(stopped > 0);
}

#[test]
fn divergence_restores_last_good_parameters() {
    let (train, val) = windows(240, 6);
    let mut m = Model::<f64>::new(ModelConfig::tiny(), 10).unwrap();
    let start = m.store.digest(&m.store.ids().collect::<Vec<_>>());
    let c = TrainConfig {
        learning_rate: 1e300,
        ..cfg(6)
    };
    let err = fit(&mut m, &train, &val, &c).unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 1, .. }), "{err}");
    assert_eq!(m.store.digest(&m.store.ids().collect::<Vec<_>>()), start);
    assert!(!m.is_trained());
}

#[test]
fn training_reduces_sinusoid_loss() {
    for seed in 0..3 {
        let (train, val) = windows(400, seed);
        let mut m = Model::<f64>::new(ModelConfig::tiny(), seed).unwrap();
        let r = fit(
            &mut m,
            &train,
            &val,
            &TrainConfig {
                max_epochs: 1,
                ..cfg(seed)
            },
        )
        .unwrap();
        assert!(r.final_train_loss < r.initial_train_loss, "seed {seed}: {r:?}");
    }
}

#[test]
fn kl_weighted_training_runs() {
    let (train, val) = windows(200, 7);
    let mut m = Model::<f64>::new(ModelConfig::tiny(), 11).unwrap();
    let r = fit(
        &mut m,
        &train,
        &val,
        &TrainConfig {
            kl_weight: 0.1,
            max_epochs: 1,
            ..cfg(7)
        },
    )
    .unwrap();
    assert!(r.best_val_loss.is_finite());
}
