use rtp_core::config::ModelConfig;
use rtp_core::ring::RotationMode;
use rtp_core::verify::{gradient_check, FD_TOL};

#[test]
fn dense_gradients_match_central_differences() {
    let r = gradient_check(&ModelConfig::toy(), 2, RotationMode::OutOfPlace, 1, 11, 80).unwrap();
    println!("{:?}", r.per_kind);
    assert!(r.max_rel < FD_TOL, "{:?}", r.per_kind);
}

#[test]
fn split_attention_gradients_match_central_differences() {
    let r = gradient_check(&ModelConfig::toy(), 8, RotationMode::InPlace, 1, 12, 40).unwrap();
    println!("{:?}", r.per_kind);
    assert!(r.per_kind.contains_key("projection"));
    assert!(r.max_rel < FD_TOL, "{:?}", r.per_kind);
}

#[test]
fn moe_gradients_match_central_differences() {
    let cfg = ModelConfig {
        moe: true,
        ..ModelConfig::toy()
    };
    let r = gradient_check(&cfg, 2, RotationMode::InPlace, 1, 13, 80).unwrap();
    println!("{:?}", r.per_kind);
    assert!(r.per_kind.contains_key("gate") && r.per_kind.contains_key("expert"));
    assert!(r.max_rel < FD_TOL, "{:?}", r.per_kind);
}
