//! Fixtures shared by the criterion benches.

use cbam_swin::swin::Placement;
use cbam_swin::train::{TrainConfig, Trainer};
use cbam_swin::Tensor;

/// Deterministic, non-degenerate values without an RNG.
pub fn wavy(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| (0.37 * i as f64 + phase).sin())
}

/// Nano trainer on the default synthetic set with an effectively unbounded
/// iteration budget, so `step` can be called as often as criterion likes.
pub fn nano_trainer(placement: Placement) -> Trainer {
    let mut cfg = TrainConfig::nano_synthetic();
    cfg.swin.placement = placement;
    cfg.iterations = Some(usize::MAX / 2);
    Trainer::new(&cfg).expect("nano config is valid")
}
