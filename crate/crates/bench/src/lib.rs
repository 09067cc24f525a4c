//! Shared fixtures for the criterion benches.

use triggerlab::detector::calibrate_null;
use triggerlab::synth::{synth_shifted_gaussian, ShiftedGaussianSpec};
use triggerlab::tensor::{inject_patch, sample_noise};
use triggerlab::{LatentTensor, NullCalibration, Region, Shape};

/// Default 24/4 calibration over 100 noises.
pub fn calibration() -> NullCalibration {
    calibrate_null(24, 4, 100, 1).expect("calibration")
}

/// A 4x64x64 noise with a std-1.5 patch at (20, 20).
pub fn injected_noise(seed: u64) -> LatentTensor {
    let region = Region::new(20, 20, 44, 44).expect("region");
    let spec = ShiftedGaussianSpec::new(1.5, 0.0).expect("spec");
    let patch = synth_shifted_gaussian(&spec, region, 4, seed).expect("patch");
    inject_patch(
        &sample_noise(seed, Shape::default()).expect("noise"),
        &patch,
        &region,
    )
    .expect("inject")
}

/// `n` flattened 4x24x24 patches cut from fresh noises.
pub fn patch_rows(n: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n as u64)
        .map(|i| {
            let t = sample_noise(seed.wrapping_add(i), Shape::new(4, 24, 24)).expect("noise");
            t.data().iter().map(|&v| f64::from(v)).collect()
        })
        .collect()
}
