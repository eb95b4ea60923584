use rtp_core::config::ModelConfig;
use rtp_core::layers::serial::SerialModel;
use rtp_core::layers::{build_rtp_transformer, Batch, RtpTransformer, UnitParams};
use rtp_core::ring::{RotationMode, TransportKind};
use rtp_core::Tensor;

fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a.sub(b).unwrap().max_abs();
    let scale = b.max_abs();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn worst_grad_err(a: &[UnitParams<f64>], b: &[UnitParams<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            x.iter()
                .zip(y.iter())
                .map(|(p, q)| rel_err(p, q))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

fn check(config: &ModelConfig, n: usize, mode: RotationMode, transport: TransportKind) {
    let stack = build_rtp_transformer(config, n).unwrap();
    let params = stack.init_params::<f64>(7);
    let batch = Batch::<f64>::random(config, 2 * n, 7);
    let mut serial = SerialModel::new(&stack, params.clone()).unwrap();
    let reference = serial.train_step(&batch).unwrap();
    let mut rtp = RtpTransformer::new(stack, &params, mode, transport).unwrap();
    let out = rtp.train_step(&batch).unwrap();
    let logits = out.gathered_logits().unwrap();
    assert!(
        rel_err(&logits, &reference.logits) < 1e-10,
        "logits n={n} {mode:?}"
    );
    assert!((out.loss - reference.loss).abs() <= 1e-10 * reference.loss.abs());
    let grads = rtp.engine().gradients().unwrap();
    let err = worst_grad_err(&grads, &reference.grads);
    assert!(err < 1e-9, "grads n={n} {mode:?}: {err}");
    assert_eq!(rtp.engine().parameters().unwrap(), params.units);
    for w in rtp.engine().workers() {
        assert!(w.ledger.only_persistent_live(), "rank {} leaked", w.rank);
    }
    assert!(serial.ledger.only_persistent_live());
}

#[test]
fn dense_matches_serial_for_every_worker_count() {
    let cfg = ModelConfig::toy();
    for n in [1, 2, 4, 8] {
        for mode in [RotationMode::InPlace, RotationMode::OutOfPlace] {
            check(&cfg, n, mode, TransportKind::Lockstep);
        }
    }
}

#[test]
fn moe_matches_serial() {
    let cfg = ModelConfig {
        moe: true,
        ..ModelConfig::toy()
    };
    for n in [1, 2, 4] {
        for mode in [RotationMode::InPlace, RotationMode::OutOfPlace] {
            check(&cfg, n, mode, TransportKind::Lockstep);
        }
    }
}

#[test]
fn concurrent_transport_matches_serial() {
    let cfg = ModelConfig::toy();
    check(
        &cfg,
        4,
        RotationMode::OutOfPlace,
        TransportKind::concurrent(),
    );
    check(&cfg, 8, RotationMode::InPlace, TransportKind::concurrent());
}
