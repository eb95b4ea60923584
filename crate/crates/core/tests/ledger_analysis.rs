use rtp_core::analysis::{batch_sweep, collinear, ledger_run, Category, RunStrategy};
use rtp_core::config::ModelConfig;
use rtp_core::layers::GATE_UNIT_OFFSET;
use rtp_core::ring::TransportKind;

const F64: u64 = 8;

fn serial_per_sample_activation(cfg: &ModelConfig) -> u64 {
    cfg.activation_elements_per_sample() * F64
}

#[test]
fn inplace_holds_exactly_one_shard_of_state() {
    let cfg = ModelConfig::toy();
    for n in [1, 2, 4, 8] {
        let run = ledger_run::<f64>(
            &cfg,
            RunStrategy::RtpInplace,
            n,
            1,
            3,
            TransportKind::Lockstep,
        )
        .unwrap();
        let units = run.unit_bytes();
        let total: u64 = units.iter().sum();
        for w in &run.workers {
            assert_eq!(
                w.peak(Category::Param) + w.peak(Category::Grad),
                2 * total / n as u64
            );
            assert_eq!(w.peak(Category::CommBuffer), 0);
            for (u, bytes) in units.iter().enumerate() {
                assert_eq!(w.unit_state_peak(u), 2 * bytes / n as u64);
            }
        }
        let dup = run
            .rows()
            .into_iter()
            .find(|r| r.category == "Param+Grad")
            .unwrap()
            .duplication;
        assert_eq!(dup, 0, "n={n}");
        if n > 1 {
            assert!(run.in_flight_peak() > 0);
        }
    }
}

#[test]
fn outofplace_adds_one_shard_buffer_per_unit() {
    let cfg = ModelConfig::toy();
    for n in [2, 4, 8] {
        let run = ledger_run::<f64>(
            &cfg,
            RunStrategy::RtpOutofplace,
            n,
            1,
            3,
            TransportKind::Lockstep,
        )
        .unwrap();
        let units = run.unit_bytes();
        let total: u64 = units.iter().sum();
        let biggest = *units.iter().max().unwrap();
        for w in &run.workers {
            for (u, bytes) in units.iter().enumerate() {
                assert_eq!(w.unit_state_peak(u), 3 * bytes / n as u64, "unit {u}");
            }
            assert_eq!(w.peak(Category::CommBuffer), biggest / n as u64);
            assert_eq!(w.peak_state(), (2 * total + biggest) / n as u64);
        }
        let state = run
            .rows()
            .into_iter()
            .find(|r| r.category == "ParamState")
            .unwrap();
        assert_eq!(state.duplication, biggest as i64);
    }
}

#[test]
fn single_worker_runs_match_serial() {
    let cfg = ModelConfig::toy();
    for s in [RunStrategy::RtpInplace, RunStrategy::RtpOutofplace] {
        let run = ledger_run::<f64>(&cfg, s, 1, 2, 5, TransportKind::Lockstep).unwrap();
        assert_eq!(run.peak_tracked(), run.serial.peak_tracked());
        assert_eq!(
            run.peak(Category::Activation),
            run.serial.peak(Category::Activation)
        );
    }
}

#[test]
fn serial_report_is_self_consistent() {
    let run = ledger_run::<f64>(
        &ModelConfig::toy(),
        RunStrategy::Serial,
        4,
        1,
        1,
        TransportKind::Lockstep,
    )
    .unwrap();
    assert!(run.rows().iter().all(|r| r.duplication == 0));
}

#[test]
fn serial_activation_matches_closed_form() {
    let cfg = ModelConfig::toy();
    for b in [1, 3] {
        let run =
            ledger_run::<f64>(&cfg, RunStrategy::Serial, 1, b, 2, TransportKind::Lockstep).unwrap();
        assert_eq!(
            run.serial.peak(Category::Activation),
            b as u64 * serial_per_sample_activation(&cfg)
        );
    }
}

#[test]
fn sweep_is_collinear_with_expected_slope() {
    let cfg = ModelConfig::toy();
    let per_sample = serial_per_sample_activation(&cfg) as i128;
    for n in [1, 2, 4, 8] {
        for s in [RunStrategy::RtpInplace, RunStrategy::RtpOutofplace] {
            let pts =
                batch_sweep::<f64>(&cfg, s, n, &[1, 2, 4, 8], 9, TransportKind::Lockstep).unwrap();
            println!("{s} n={n} {pts:?}");
            assert!(collinear(&pts), "{s} n={n}");
            let (a, b) = (pts[0], pts[3]);
            let dy = (b.peak_bytes - a.peak_bytes) as i128;
            let dx = (b.global_batch - a.global_batch) as i128;
            assert_eq!(dy * n as i128, per_sample * dx, "{s} n={n}");
        }
    }
}

#[test]
fn moe_gate_is_booked_once_per_worker() {
    let cfg = ModelConfig {
        moe: true,
        ..ModelConfig::toy()
    };
    let run = ledger_run::<f64>(
        &cfg,
        RunStrategy::RtpInplace,
        2,
        1,
        4,
        TransportKind::Lockstep,
    )
    .unwrap();
    let moe = run
        .stack
        .units
        .iter()
        .find(|u| u.name.ends_with("moe"))
        .unwrap()
        .id;
    let gate = (cfg.hidden_size * 2) as u64 * F64;
    for w in &run.workers {
        assert_eq!(w.unit_state_peak(GATE_UNIT_OFFSET + moe), 2 * gate);
    }
}
