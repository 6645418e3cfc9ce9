use super::*;
use crate::data::Split;
use crate::model_zoo::Base;
use crate::tensor::{ParamKind, Shape};
use proptest::prelude::*;

#[test]
fn schedule_boundaries() {
    let s = TrainConfig::standard(0).schedule;
    for (epoch, lr) in [(0, 0.1), (99, 0.1), (100, 0.01), (149, 0.01), (150, 0.001), (199, 0.001)] {
        assert_eq!(s.lr_at(epoch), lr, "epoch {epoch}");
    }
    let smoke = TrainConfig::smoke(0).schedule;
    assert_eq!((smoke.lr_at(7), smoke.lr_at(8)), (0.1, 0.01));
    assert!(LrSchedule::new(vec![5, 5], vec![0.1, 0.1, 0.1]).is_err());
    assert!(LrSchedule::new(vec![5], vec![0.1]).is_err());
    assert!(LrSchedule::new(vec![5], vec![0.1, 0.0]).is_err());
}

fn one_param(value: f64, grad: f64, kind: ParamKind) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    let id = s.add("w", Tensor::full(&Shape::new(vec![1]).unwrap(), value), kind).unwrap();
    s.get_mut(id).accumulate_grad(&Tensor::full(&Shape::new(vec![1]).unwrap(), grad));
    s
}

fn w(s: &ParamStore<f64>) -> f64 {
    s.by_name("w").unwrap().value().data()[0]
}

#[test]
fn sgd_reference_updates() {
    let mut s = one_param(1.0, 0.5, ParamKind::Weight);
    sgd_step(&mut s, &mut SgdState::default(), 0.1, 0.0, 0.0).unwrap();
    assert_eq!(w(&s), 1.0 - 0.1 * 0.5);

    // v1 = g, v2 = 1.9 g.
    let mut s = one_param(0.0, 2.0, ParamKind::Weight);
    let mut st = SgdState::default();
    sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0).unwrap();
    sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0).unwrap();
    assert!((w(&s) + 0.1 * 2.0 * 2.9).abs() < 1e-15);

    let mut s = one_param(3.0, 7.0, ParamKind::Weight);
    sgd_step(&mut s, &mut SgdState::default(), 0.0, 0.9, 1e-4).unwrap();
    assert_eq!(w(&s), 3.0);
}

#[test]
fn weight_decay_skips_affine_parameters() {
    let mut s = one_param(2.0, 0.0, ParamKind::Weight);
    sgd_step(&mut s, &mut SgdState::default(), 0.5, 0.0, 0.1).unwrap();
    assert_eq!(w(&s), 2.0 - 0.5 * 0.1 * 2.0);
    let mut s = one_param(2.0, 0.0, ParamKind::Affine);
    sgd_step(&mut s, &mut SgdState::default(), 0.5, 0.0, 0.1).unwrap();
    assert_eq!(w(&s), 2.0);
}

#[test]
fn non_finite_gradient_aborts_without_update() {
    let mut s = one_param(1.0, f64::NAN, ParamKind::Weight);
    let err = sgd_step(&mut s, &mut SgdState::default(), 0.1, 0.9, 0.0).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient { ref param, step: 0 } if param == "w"));
    assert_eq!(w(&s), 1.0);
}

proptest! {
    #[test]
    fn momentum_matches_closed_form(g in -5.0f64..5.0, m in 0.0f64..0.99, lr in 0.001f64..1.0, n in 1usize..30) {
        let mut s = one_param(0.0, g, ParamKind::Weight);
        let mut st = SgdState::default();
        for _ in 0..n {
            sgd_step(&mut s, &mut st, lr, m, 0.0).unwrap();
        }
        // v_k = g (1 - m^k) / (1 - m); displacement = lr Σ v_k.
        let expect: f64 = -(1..=n as i32).map(|k| lr * g * (1.0 - m.powi(k)) / (1.0 - m)).sum::<f64>();
        prop_assert!((w(&s) - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
    }
}

#[test]
fn metrics_csv_layout() {
    let r = MetricsRecord { epoch: 1, train_loss: 2.5, train_acc: 0.25, test_error: 0.75, lr: 0.1, wall_seconds: 1.23456 };
    assert_eq!(metrics_csv(&[r]), "epoch,train_loss,train_acc,test_error,lr,wall_seconds\n1,2.5,0.25,0.75,0.1,1.235\n");
}

fn small_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 25, eval_batch_size: 50, ..TrainConfig::smoke(seed) }
}

fn spec() -> ModelSpec {
    ModelSpec::with_config(Base::Resnet20, "001")
}

#[test]
fn constant_predictor_on_balanced_data() {
    let mut t = Trainer::<f32>::new(spec(), small_config(0, 1)).unwrap();
    let wid = t.store.id_of("head.weight").unwrap();
    let bid = t.store.id_of("head.bias").unwrap();
    t.store.get_mut(wid).value_mut().data_mut().fill(0.0);
    t.store.get_mut(bid).value_mut().data_mut()[4] = 1.0;
    let test = Dataset::synthetic(100, 3, Split::Test);
    let e1 = evaluate(&t.model, &mut t.store, &test, &t.policy, 30).unwrap();
    assert_eq!(e1, 0.9);
}

#[test]
fn evaluation_is_repeatable() {
    let mut t = Trainer::<f32>::new(spec(), small_config(1, 1)).unwrap();
    let test = Dataset::synthetic(40, 3, Split::Test);
    let a = evaluate(&t.model, &mut t.store, &test, &t.policy, 16).unwrap();
    let b = evaluate(&t.model, &mut t.store, &test, &t.policy, 7).unwrap();
    assert_eq!(a, b);
}

fn strip_wall(m: &[MetricsRecord]) -> Vec<MetricsRecord> {
    m.iter().map(|r| MetricsRecord { wall_seconds: 0.0, ..r.clone() }).collect()
}

#[test]
fn training_learns_and_is_deterministic() {
    let train = Dataset::synthetic(100, 1, Split::Train);
    let test = Dataset::synthetic(50, 2, Split::Test);
    let mut a = Trainer::<f32>::new(spec(), small_config(5, 3)).unwrap();
    let ra = a.run(&train, &test).unwrap();
    assert!(ra.metrics[2].train_loss < ra.metrics[0].train_loss, "{:?}", ra.metrics);
    assert_eq!(ra.min_test_error, ra.metrics.iter().map(|m| m.test_error).fold(1.0, f64::min));
    let mut b = Trainer::<f32>::new(spec(), small_config(5, 3)).unwrap();
    let rb = b.run(&train, &test).unwrap();
    assert_eq!(strip_wall(&ra.metrics), strip_wall(&rb.metrics));
    let mut c = Trainer::<f32>::new(spec(), small_config(6, 1)).unwrap();
    let rc = c.run(&train, &test).unwrap();
    assert_ne!(rc.metrics[0].train_loss, ra.metrics[0].train_loss);
}

#[test]
fn resume_equals_uninterrupted_run() {
    let train = Dataset::synthetic(50, 1, Split::Train);
    let test = Dataset::synthetic(20, 2, Split::Test);
    let dir = tempfile::tempdir().unwrap();

    let mut straight = Trainer::<f32>::new(spec(), small_config(9, 4)).unwrap();
    straight.run(&train, &test).unwrap();

    let mut first = Trainer::<f32>::new(spec(), small_config(9, 2)).unwrap().with_output(dir.path()).unwrap();
    first.run(&train, &test).unwrap();
    let mut ck = load_checkpoint::<f32>(&dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(ck.epoch, 2);
    ck.config.epochs = 4;
    let mut resumed = Trainer::resume(ck).unwrap();
    resumed.run(&train, &test).unwrap();

    assert_eq!(strip_wall(&resumed.metrics), strip_wall(&straight.metrics));
    for ((_, a), (_, b)) in resumed.store.iter().zip(straight.store.iter()) {
        assert_eq!(a.value(), b.value(), "{}", a.name());
    }
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with(METRICS_HEADER) && csv.lines().count() == 3);
}

#[test]
fn checkpoint_bytes_round_trip_and_integrity() {
    let train = Dataset::synthetic(20, 1, Split::Train);
    let test = Dataset::synthetic(10, 2, Split::Test);
    let mut t = Trainer::<f64>::new(ModelSpec::with_config(Base::Resnet20, "100"), TrainConfig { precision: Precision::F64, ..small_config(2, 1) }).unwrap();
    t.run(&train, &test).unwrap();
    let ck = t.checkpoint();
    let bytes = ck.to_bytes();
    let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    assert!(back.tensor("momentum/stem.conv.weight").is_some());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ck.bin");
    save_checkpoint(&p, &ck).unwrap();
    assert_eq!(fs::read(&p).unwrap(), bytes);

    for pos in [30, bytes.len() / 2, bytes.len() - 9] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(Error::Checksum { .. })), "byte {pos}");
    }
    let mut old = bytes.clone();
    old[8] = 9;
    assert!(matches!(Checkpoint::<f64>::from_bytes(&old), Err(Error::Version { found: 9, .. })));
    assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::<f64>::from_bytes(b"nope"), Err(Error::Format(_))));
}

#[test]
fn divergence_needs_three_high_epochs() {
    let mut t = Trainer::<f32>::new(spec(), small_config(0, 1)).unwrap();
    let rec = |epoch, train_loss| MetricsRecord { epoch, train_loss, train_acc: 0.1, test_error: 0.9, lr: 0.1, wall_seconds: 0.0 };
    t.metrics = vec![rec(1, 2.0), rec(2, 25.0), rec(3, 30.0)];
    assert!(t.divergence().is_none());
    t.metrics.push(rec(4, f64::NAN));
    assert!(matches!(t.divergence(), Some(Error::Diverged { epoch: 4, .. })));
    t.metrics.push(rec(5, 3.0));
    assert!(t.divergence().is_none());
}
