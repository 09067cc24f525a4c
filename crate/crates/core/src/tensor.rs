//! Latent noise tensors, rectangular regions and patch surgery.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// `(channels, height, width)` of a latent tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn full_region(&self) -> Region {
        Region {
            x1: 0,
            y1: 0,
            x2: self.width,
            y2: self.height,
        }
    }
}

impl Default for Shape {
    fn default() -> Self {
        Shape::new(4, 64, 64)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.channels, self.height, self.width)
    }
}

/// Half-open latent rectangle `[x1, x2) x [y1, y2)` spanning all channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Region {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl Region {
    /// Builds a non-empty region. Bounds against a tensor are checked on use.
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidRegion(format!(
                "({x1}, {y1}, {x2}, {y2}) is empty"
            )));
        }
        Ok(Region { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> usize {
        self.x2 - self.x1
    }

    pub fn height(&self) -> usize {
        self.y2 - self.y1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x1 + self.x2) as f64 / 2.0,
            (self.y1 + self.y2) as f64 / 2.0,
        )
    }

    pub fn fits(&self, shape: &Shape) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.x2 <= shape.width && self.y2 <= shape.height
    }

    pub fn check_bounds(&self, shape: &Shape) -> Result<()> {
        if self.fits(shape) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                region: self.to_string(),
                height: shape.height,
                width: shape.width,
            })
        }
    }

    pub fn intersection(&self, other: &Region) -> Option<Region> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 < x2 && y1 < y2).then_some(Region { x1, y1, x2, y2 })
    }

    pub fn iou(&self, other: &Region) -> f64 {
        let inter = self.intersection(other).map_or(0, |r| r.area());
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    /// A `size x size` square centered on `(cx, cy)`, i.e.
    /// `[cx - size/2, cx + size/2)` per axis, shrunk (never shifted) to stay
    /// inside `shape`.
    pub fn centered(cx: i64, cy: i64, size: usize, shape: &Shape) -> Result<Region> {
        let half = (size / 2) as i64;
        let clip = |lo: i64, hi: i64, max: usize| -> (usize, usize) {
            (
                lo.clamp(0, max as i64) as usize,
                hi.clamp(0, max as i64) as usize,
            )
        };
        let (x1, x2) = clip(cx - half, cx - half + size as i64, shape.width);
        let (y1, y2) = clip(cy - half, cy - half + size as i64, shape.height);
        Region::new(x1, y1, x2, y2)
    }

    /// Left or right half of the frame, full height.
    pub fn half_plane(side: crate::metrics::Side, shape: &Shape) -> Region {
        let mid = shape.width / 2;
        match side {
            crate::metrics::Side::Left => Region {
                x1: 0,
                y1: 0,
                x2: mid,
                y2: shape.height,
            },
            crate::metrics::Side::Right => Region {
                x1: mid,
                y1: 0,
                x2: shape.width,
                y2: shape.height,
            },
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

/// One initial noise, stored in C order as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl LatentTensor {
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape} has a zero dimension"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for {shape}", shape.len()),
                actual: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "tensor contains non-finite values".into(),
            ));
        }
        Ok(LatentTensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        LatentTensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    /// Iterates over the values inside `region`, channel-major then row-major.
    pub fn region_values<'a>(&'a self, region: &Region) -> impl Iterator<Item = f32> + 'a {
        let region = *region;
        (0..self.shape.channels).flat_map(move |c| {
            (region.y1..region.y2).flat_map(move |y| {
                let start = self.index(c, y, region.x1);
                self.data[start..start + region.width()].iter().copied()
            })
        })
    }
}

/// I.i.d. standard normal tensor drawn from the counter stream of `seed`.
pub fn sample_noise(seed: u64, shape: Shape) -> Result<LatentTensor> {
    if shape.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "shape {shape} has a zero dimension"
        )));
    }
    let mut data = vec![0.0f32; shape.len()];
    rng::fill_standard_normal(seed, &mut data);
    Ok(LatentTensor { shape, data })
}

/// A slab of a tensor: `channels x region.height x region.width`, C order.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    region: Region,
    channels: usize,
    data: Vec<f32>,
}

impl Patch {
    pub fn new(region: Region, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expected = channels * region.area();
        if region.x1 >= region.x2 || region.y1 >= region.y2 {
            return Err(Error::InvalidRegion(region.to_string()));
        }
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} values"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Patch {
            region,
            channels,
            data,
        })
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.region.height(), self.region.width())
    }

    /// Patch-local value at channel `z`, row `y`, column `x`.
    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[(z * self.region.height() + y) * self.region.width() + x]
    }

    /// The same values re-anchored at `region` (dimensions must agree).
    pub fn relocated(&self, region: Region) -> Result<Patch> {
        if region.width() != self.region.width() || region.height() != self.region.height() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.region.height(), self.region.width()),
                actual: format!("{}x{}", region.height(), region.width()),
            });
        }
        Ok(Patch {
            region,
            channels: self.channels,
            data: self.data.clone(),
        })
    }
}

pub fn extract_patch(noise: &LatentTensor, region: &Region) -> Result<Patch> {
    region.check_bounds(&noise.shape)?;
    Ok(Patch {
        region: *region,
        channels: noise.shape.channels,
        data: noise.region_values(region).collect(),
    })
}

/// Copies `patch` into a copy of `noise` at `target`.
pub fn inject_patch(noise: &LatentTensor, patch: &Patch, target: &Region) -> Result<LatentTensor> {
    if target.width() != patch.region.width()
        || target.height() != patch.region.height()
        || patch.channels != noise.shape.channels
    {
        return Err(Error::ShapeMismatch {
            expected: format!(
                "{}x{}x{}",
                noise.shape.channels,
                target.height(),
                target.width()
            ),
            actual: format!(
                "{}x{}x{}",
                patch.channels,
                patch.region.height(),
                patch.region.width()
            ),
        });
    }
    target.check_bounds(&noise.shape)?;
    let mut out = noise.clone();
    write_slab(&mut out, target, &patch.data);
    Ok(out)
}

fn write_slab(noise: &mut LatentTensor, region: &Region, values: &[f32]) {
    let w = region.width();
    let mut src = values.chunks_exact(w);
    for c in 0..noise.shape.channels {
        for y in region.y1..region.y2 {
            let start = noise.index(c, y, region.x1);
            noise.data[start..start + w].copy_from_slice(src.next().expect("slab length checked"));
        }
    }
}

/// Replaces `region` with fresh normals from stream `seed`.
///
/// With `match_moments` the fresh slab is affinely mapped so its sample mean
/// and (population) standard deviation equal those of the slab it replaces.
pub fn resample_region(
    noise: &LatentTensor,
    region: &Region,
    seed: u64,
    match_moments: bool,
) -> Result<LatentTensor> {
    region.check_bounds(&noise.shape)?;
    let shape = Shape::new(noise.shape.channels, region.height(), region.width());
    let mut fresh = sample_noise(seed, shape)?.data;
    if match_moments {
        let (old_mean, old_std) = moments(noise.region_values(region).map(f64::from));
        let (new_mean, new_std) = moments(fresh.iter().map(|&v| f64::from(v)));
        let scale = if new_std > 0.0 {
            old_std / new_std
        } else {
            0.0
        };
        for v in &mut fresh {
            *v = ((f64::from(*v) - new_mean) * scale + old_mean) as f32;
        }
    }
    let mut out = noise.clone();
    write_slab(&mut out, region, &fresh);
    Ok(out)
}

/// Sample mean and population standard deviation.
pub fn moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    let values: Vec<f64> = values.collect();
    for &v in &values {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    for &v in &values {
        sq += (v - mean) * (v - mean);
    }
    (mean, (sq / n as f64).sqrt())
}
