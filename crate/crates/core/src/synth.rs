//! Handcrafted trigger patches.

use std::f64::consts::{FRAC_PI_2, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sample_noise, Patch, Region, Shape};

/// Gaussian patch with a non-standard spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftedGaussianSpec {
    pub std: f64,
    #[serde(default)]
    pub mean: f64,
}

impl ShiftedGaussianSpec {
    pub fn new(std: f64, mean: f64) -> Result<Self> {
        let spec = ShiftedGaussianSpec { std, mean };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite() && self.mean.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "shifted gaussian needs finite mean and std > 0, got mean {} std {}",
                self.mean, self.std
            )));
        }
        Ok(())
    }
}

/// Sinusoidal blend: `sin(theta) * (sin(2πx/lx) + sin(2πy/ly) + sin(2πz/lz)) + cos(theta) * base`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinePatchSpec {
    pub theta: f64,
    pub l_x: f64,
    pub l_y: f64,
    pub l_z: f64,
}

impl Default for SinePatchSpec {
    fn default() -> Self {
        SinePatchSpec {
            theta: 0.0,
            l_x: 24.0,
            l_y: 24.0,
            l_z: 4.0,
        }
    }
}

impl SinePatchSpec {
    pub fn with_theta(theta: f64) -> Result<Self> {
        let spec = SinePatchSpec {
            theta,
            ..Default::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=FRAC_PI_2).contains(&self.theta) {
            return Err(Error::InvalidArgument(format!(
                "theta must lie in [0, π/2], got {}",
                self.theta
            )));
        }
        if [self.l_x, self.l_y, self.l_z]
            .iter()
            .any(|l| !(*l > 0.0 && l.is_finite()))
        {
            return Err(Error::InvalidArgument(
                "wavelengths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// I.i.d. `N(mean, std²)` patch anchored at `region`.
pub fn synth_shifted_gaussian(
    spec: &ShiftedGaussianSpec,
    region: Region,
    channels: usize,
    seed: u64,
) -> Result<Patch> {
    spec.validate()?;
    let base = sample_noise(seed, Shape::new(channels, region.height(), region.width()))?;
    let data = base
        .data()
        .iter()
        .map(|&v| (spec.mean + spec.std * f64::from(v)) as f32)
        .collect();
    Patch::new(region, channels, data)
}

/// Blends a sine lattice into `base`. Coordinates are patch-local; `z` is the channel.
pub fn synth_sine_patch(base: &Patch, spec: &SinePatchSpec) -> Result<Patch> {
    spec.validate()?;
    let (s, c) = spec.theta.sin_cos();
    let region = base.region();
    let (h, w) = (region.height(), region.width());
    let mut data = Vec::with_capacity(base.data().len());
    for z in 0..base.channels() {
        let sz = (TAU * z as f64 / spec.l_z).sin();
        for y in 0..h {
            let sy = (TAU * y as f64 / spec.l_y).sin();
            for x in 0..w {
                let sx = (TAU * x as f64 / spec.l_x).sin();
                let v = s * (sx + sy + sz) + c * f64::from(base.get(z, y, x));
                data.push(v as f32);
            }
        }
    }
    Patch::new(region, base.channels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::moments;

    fn region24() -> Region {
        Region::new(0, 0, 24, 24).unwrap()
    }

    #[test]
    fn wide_gaussian_has_wide_spread() {
        // n = 2304: std of the sample std is about 1.5 / sqrt(2n) ≈ 0.022.
        let spec = ShiftedGaussianSpec::new(1.5, 0.0).unwrap();
        let p = synth_shifted_gaussian(&spec, region24(), 4, 17).unwrap();
        let (_, std) = moments(p.data().iter().map(|&v| f64::from(v)));
        assert!((1.4..=1.6).contains(&std), "std {std}");
    }

    #[test]
    fn concentrated_gaussian() {
        let spec = ShiftedGaussianSpec::new(0.001, 5.0).unwrap();
        let p = synth_shifted_gaussian(&spec, region24(), 4, 1).unwrap();
        assert!(p.data().iter().all(|&v| (4.99..=5.01).contains(&v)));
    }

    #[test]
    fn invalid_specs() {
        assert!(ShiftedGaussianSpec::new(0.0, 0.0).is_err());
        assert!(SinePatchSpec::with_theta(-0.1).is_err());
        assert!(SinePatchSpec::with_theta(2.0).is_err());
        let bad = SinePatchSpec {
            l_z: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unit_gaussian_equals_the_noise_stream() {
        let spec = ShiftedGaussianSpec::new(1.0, 0.0).unwrap();
        let p = synth_shifted_gaussian(&spec, region24(), 4, 99).unwrap();
        let n = sample_noise(99, Shape::new(4, 24, 24)).unwrap();
        assert_eq!(p.data(), n.data());
    }

    #[test]
    fn sine_spot_values() {
        let base = synth_shifted_gaussian(
            &ShiftedGaussianSpec::new(1.0, 0.0).unwrap(),
            region24(),
            4,
            3,
        )
        .unwrap();
        let identity = synth_sine_patch(&base, &SinePatchSpec::with_theta(0.0).unwrap()).unwrap();
        assert_eq!(identity, base);

        let full = synth_sine_patch(&base, &SinePatchSpec::with_theta(FRAC_PI_2).unwrap()).unwrap();
        assert!(full.get(0, 0, 0).abs() < 1e-6);

        let theta = 0.15 * FRAC_PI_2;
        let out = synth_sine_patch(&base, &SinePatchSpec::with_theta(theta).unwrap()).unwrap();
        let p = f64::from(base.get(0, 0, 6));
        let expected = 0.23345 + 0.97237 * p;
        assert!((f64::from(out.get(0, 0, 6)) - expected).abs() < 1e-4);
    }
}
