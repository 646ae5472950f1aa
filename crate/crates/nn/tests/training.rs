//! Training-loop contracts on a small noiseless synthetic dataset.

use std::sync::OnceLock;

use tensorformer_core::{GradientScheme, PhantomSpec};
use tensorformer_nn::autodiff::Tape;
use tensorformer_nn::dataset::{synthetic_dataset, LabelMode, SyntheticSpec};
use tensorformer_nn::trainer::{train_model_s_with, Adam};
use tensorformer_nn::{
    train_model_s, train_model_st, Dataset, ModelConfig, ModelS, NnError, StopReason, TrainConfig,
};

fn config() -> ModelConfig {
    ModelConfig {
        patch: 3,
        d_model: 16,
        d_head: 16,
        ..ModelConfig::default()
    }
}

/// 200 patches of side 3 from two noiseless 15³ phantoms (125 each, trimmed).
fn smoke() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let spec = SyntheticSpec {
            phantoms: (0..2)
                .map(|i| PhantomSpec {
                    dims: [15, 15, 15],
                    seed: 40 + i,
                    length_scale: 6.0,
                    ..PhantomSpec::default()
                })
                .collect(),
            snrs_db: vec![f64::INFINITY],
            noise_seed: 0,
            side: 3,
            stride: 3,
            labels: LabelMode::GroundTruth,
        };
        let mut d = synthetic_dataset(&spec, &GradientScheme::skare6(1000.0)).unwrap();
        assert_eq!(d.len(), 250);
        d.pairs.retain(|p| p.origin[0] < 12);
        assert_eq!(d.len(), 200);
        d
    })
}

fn smoke_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 50,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn smoke_training_reduces_loss_tenfold() {
    // default widths and trainer settings, side-3 patches
    let cfg = ModelConfig {
        patch: 3,
        ..ModelConfig::default()
    };
    let (_, log) = train_model_s(ModelS::new(cfg, 1).unwrap(), smoke(), &smoke_config()).unwrap();
    let first = log.epochs[0].train_loss;
    let last = log.epochs.last().unwrap().train_loss;
    assert!(log.epochs.len() <= 50);
    assert!(last < 0.1 * first, "epoch 1 {first}, final {last} after {} epochs", log.epochs.len());
}

#[test]
fn first_steps_decrease_batch_loss() {
    let data = smoke();
    let mut m = ModelS::new(config(), 2).unwrap();
    let batch: Vec<_> = data.pairs.iter().take(10).collect();
    let mut adam = Adam::new(&m.store, 1e-4);
    let mut losses = Vec::new();
    for _ in 0..6 {
        let mut total = 0.0;
        let mut grads = Vec::new();
        for p in &batch {
            let mut t = Tape::new();
            let x = t.input(p.signals.clone());
            let y = m.forward(&mut t, x).unwrap();
            let l = t.squared_error(y, &p.target).unwrap();
            total += t.value(l).unwrap()[[0, 0]];
            grads.push(t.backward(l, &m.store).unwrap());
        }
        losses.push(total / batch.len() as f64);
        m.store.load_gradients(&grads, 1.0 / batch.len() as f64);
        adam.step(&mut m.store);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn schedule_and_log_contracts() {
    let cfg = TrainConfig {
        max_epochs: 12,
        initial_lr: 3e-3,
        early_stop_patience: 100,
        ..smoke_config()
    };
    // alternate improvement and stalls so the schedule is exercised
    let mut hook = |epoch: usize, v: f64| if epoch % 3 == 0 { v } else { 1e9 - epoch as f64 * 1e-3 * (epoch % 2) as f64 };
    let (_, log) = train_model_s_with(ModelS::new(config(), 1).unwrap(), smoke(), &cfg, Some(&mut hook)).unwrap();
    assert_eq!(log.epochs.len(), 12);
    assert_eq!(log.stop_reason, StopReason::MaxEpochs);
    let mut decays = 0;
    for w in log.epochs.windows(2) {
        assert_eq!(w[1].epoch, w[0].epoch + 1);
        if w[1].lr != w[0].lr {
            assert_eq!(w[1].lr, w[0].lr * 0.9);
            decays += 1;
        }
    }
    assert!(decays > 0);
    let best = log.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(log.best_val_loss, best);
    assert_eq!(log.epochs[log.best_epoch - 1].val_loss, best);
    let jsonl = log.to_jsonl().unwrap();
    assert_eq!(jsonl.lines().count(), 13);
    assert!(jsonl.lines().last().unwrap().contains("\"max-epochs\""));
}

#[test]
fn frozen_validation_loss_triggers_early_stop() {
    let cfg = TrainConfig {
        max_epochs: 20,
        ..smoke_config()
    };
    let mut hook = |_: usize, _: f64| 1.0;
    let (_, log) = train_model_s_with(ModelS::new(config(), 1).unwrap(), smoke(), &cfg, Some(&mut hook)).unwrap();
    assert_eq!(log.stop_reason, StopReason::EarlyStop);
    assert_eq!(log.epochs.len(), 3);
    let lrs: Vec<f64> = log.epochs.iter().map(|e| e.lr).collect();
    assert_eq!(lrs, vec![1e-4, 1e-4, 1e-4 * 0.9]);
}

#[test]
fn nan_loss_and_empty_data_abort() {
    let mut hook = |_: usize, _: f64| f64::NAN;
    let err = train_model_s_with(ModelS::new(config(), 1).unwrap(), smoke(), &smoke_config(), Some(&mut hook))
        .unwrap_err();
    assert!(matches!(err, NnError::Training(ref m) if m.contains("non-finite")), "{err}");
    let err = train_model_s(ModelS::new(config(), 1).unwrap(), &Dataset::default(), &smoke_config()).unwrap_err();
    assert!(matches!(err, NnError::Training(_)));
}

#[test]
fn training_is_reproducible() {
    let cfg = TrainConfig {
        max_epochs: 3,
        ..smoke_config()
    };
    let (a, la) = train_model_s(ModelS::new(config(), 5).unwrap(), smoke(), &cfg).unwrap();
    let (b, lb) = train_model_s(ModelS::new(config(), 5).unwrap(), smoke(), &cfg).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.hash(), b.hash());
}

#[test]
fn second_stage_keeps_first_stage_frozen_and_improves_on_it() {
    let cfg = TrainConfig {
        max_epochs: 30,
        initial_lr: 1e-3,
        ..smoke_config()
    };
    let (s, log_s) = train_model_s(ModelS::new(config(), 1).unwrap(), smoke(), &cfg).unwrap();
    let before = s.hash();
    let (st, log_st) = train_model_st(&s, smoke(), &cfg).unwrap();
    assert_eq!(s.hash(), before);
    assert_eq!(st.model_s_hash(), before);
    assert_eq!(st.model_s().unwrap().hash(), before);
    assert!(
        log_st.best_val_loss <= log_s.best_val_loss,
        "ST {} vs S {}",
        log_st.best_val_loss,
        log_s.best_val_loss
    );
}

#[test]
fn second_stage_rejects_foreign_first_stage() {
    let s1 = ModelS::new(config(), 1).unwrap();
    let s2 = ModelS::new(config(), 2).unwrap();
    let st = tensorformer_nn::ModelST::new(&s1, 3).unwrap();
    let err = tensorformer_nn::trainer::train_model_st_with(st, &s2, smoke(), &smoke_config(), None).unwrap_err();
    assert!(matches!(err, NnError::Checkpoint(_)));
}
