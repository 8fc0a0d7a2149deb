use agm_core::bridge::{training_loss, LossWeights, TrainingBatch};
use agm_core::datasets::{DatasetKind, ToyDataset};
use agm_core::model::{read_checkpoint, train, write_checkpoint, Ema, FeatureMap, ForceNet, TrainConfig, TrainState};
use agm_core::{AgmError, DiffusionSchedule, KernelTable, Mode, Sigma0};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(iterations: usize) -> TrainConfig {
    TrainConfig { iterations, batch_size: 32, warmup: 2, hidden: vec![8, 8], n_freq: 2, seed: 3, ..TrainConfig::default() }
}

fn setup() -> (ToyDataset, KernelTable) {
    let ds = ToyDataset::new(DatasetKind::mog8(), 0).unwrap();
    let tab = KernelTable::build(DiffusionSchedule::default(), Sigma0::default(), ds.sigma_data()).unwrap();
    (ds, tab)
}

#[test]
fn finite_difference_gradient() {
    let tab = KernelTable::build(DiffusionSchedule::default(), Sigma0::default(), 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let features = FeatureMap { d: 1, n_freq: 0, precondition: true, sigma_data: 1.0 };
    let net = ForceNet::<f64>::new(features, &[5], Mode::Ode, &mut rng).unwrap();
    assert!(net.mlp.n_params() <= 50);
    let x1: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let batch = TrainingBatch::sample(&x1, 1, &tab, Mode::Ode, (0.01, 0.95), &mut rng).unwrap();
    let w = LossWeights { mode: Mode::Ode, sigma_data: 1.0 };
    let (_, grad) = training_loss(&net, &batch, &w).unwrap();
    let h = 1e-6;
    for i in 0..net.mlp.n_params() {
        let mut plus = net.clone();
        plus.mlp.params_mut()[i] += h;
        let mut minus = net.clone();
        minus.mlp.params_mut()[i] -= h;
        let fd = (training_loss(&plus, &batch, &w).unwrap().0 - training_loss(&minus, &batch, &w).unwrap().0) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / grad[i].abs().max(1e-3);
        assert!(rel < 1e-4, "param {i}: fd {fd} vs {}", grad[i]);
    }
}

#[test]
fn ema_is_a_geometric_blend() {
    let theta0 = vec![1.0f64, -2.0, 0.5];
    let p = vec![3.0f64, 0.0, 0.5];
    let mut ema = Ema::new(0.9, &theta0);
    for _ in 0..25 {
        ema.update(&p);
    }
    let w = 0.9f64.powi(25);
    for i in 0..3 {
        let want = w * theta0[i] + (1.0 - w) * p[i];
        assert!((ema.shadow[i] - want).abs() < 1e-12);
    }
}

#[test]
fn zero_iterations_give_the_initial_network() {
    let (ds, tab) = setup();
    let cfg = small_config(0);
    let st: TrainState<f32> = train(&ds, &tab, &cfg, None, |_, _| true).unwrap();
    assert_eq!(st.step, 0);
    let fresh = TrainState::<f32>::fresh(st.net.features.clone(), &cfg).unwrap();
    assert_eq!(st.net, fresh.net);
    assert_eq!(st.ema.shadow, st.net.mlp.params());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (ds, tab) = setup();
    let st: TrainState<f32> = train(&ds, &tab, &small_config(5), None, |_, _| true).unwrap();
    let meta = vec![("config_hash".to_string(), "abc123".to_string()), ("seed".to_string(), "3".to_string())];
    let mut buf = Vec::new();
    write_checkpoint(&st, &meta, &mut buf).unwrap();
    let back = read_checkpoint::<f32, _>(&buf[..]).unwrap();
    assert_eq!(back.precision, "f32");
    assert_eq!(back.meta, meta);
    let mut restored = back.state;
    restored.losses = st.losses.clone();
    assert_eq!(restored, st);
}

#[test]
fn interrupted_training_resumes_bit_exactly() {
    let (ds, tab) = setup();
    let cfg = small_config(10);
    let full: TrainState<f32> = train(&ds, &tab, &cfg, None, |_, _| true).unwrap();
    let part: TrainState<f32> = train(&ds, &tab, &cfg, None, |s, _| s < 4).unwrap();
    assert_eq!(part.step, 4);
    let mut buf = Vec::new();
    write_checkpoint(&part, &[], &mut buf).unwrap();
    let loaded = read_checkpoint::<f32, _>(&buf[..]).unwrap().state;
    let mut steps = Vec::new();
    let resumed = train(&ds, &tab, &cfg, Some(loaded), |s, _| {
        steps.push(s);
        true
    })
    .unwrap();
    assert_eq!(steps, (5..=10).collect::<Vec<_>>());
    assert_eq!(resumed.net, full.net);
    assert_eq!(resumed.ema, full.ema);
    assert_eq!(resumed.opt, full.opt);
    assert_eq!(resumed.rng_word_pos, full.rng_word_pos);
    assert_eq!(resumed.losses[..], full.losses[4..]);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let (ds, tab) = setup();
    let st: TrainState<f32> = train(&ds, &tab, &small_config(1), None, |_, _| true).unwrap();
    let mut cfg = small_config(2);
    cfg.mode = Mode::Sde;
    assert!(matches!(train(&ds, &tab, &cfg, Some(st), |_, _| true), Err(AgmError::Config(_))));
    assert!(read_checkpoint::<f32, _>(&b"not a checkpoint\n"[..]).is_err());
}

#[test]
fn loss_decreases_over_a_short_run() {
    let (ds, tab) = setup();
    let cfg = TrainConfig { iterations: 300, batch_size: 256, warmup: 30, hidden: vec![32, 32], seed: 1, ..TrainConfig::default() };
    let st: TrainState<f32> = train(&ds, &tab, &cfg, None, |_, _| true).unwrap();
    let head = st.losses[..30].iter().sum::<f64>() / 30.0;
    let tail = st.losses[270..].iter().sum::<f64>() / 30.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn single_and_double_precision_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let features = FeatureMap { d: 2, n_freq: 3, precondition: true, sigma_data: 2.0 };
    let net = ForceNet::<f64>::new(features, &[16, 16], Mode::Ode, &mut rng).unwrap();
    let single = ForceNet { mlp: net.mlp.cast::<f32>(), features: net.features.clone(), mode: net.mode };
    let tab = KernelTable::build(DiffusionSchedule::default(), Sigma0::default(), 2.0).unwrap();
    let x1: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
    let b = TrainingBatch::sample(&x1, 2, &tab, Mode::Ode, (1e-5, 0.999), &mut rng).unwrap();
    let a = net.eval(&b.states, &b.kernel).unwrap();
    let c = single.eval(&b.states, &b.kernel).unwrap();
    for (x, y) in a.iter().zip(&c) {
        assert!((x - y).abs() < 1e-4 * x.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn ema_stays_between_start_and_target(decay in 0.01f64..0.999, k in 1usize..50, a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let mut ema = Ema::new(decay, &[a]);
        for _ in 0..k {
            ema.update(&[b]);
        }
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(ema.shadow[0] >= lo - 1e-12 && ema.shadow[0] <= hi + 1e-12);
    }
}
