//! Energy-distance two-sample testing and the entropy-decile outlier analysis.

use std::collections::HashMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::annotations::DatasetManifest;
use crate::error::{Error, Result};
use crate::metrics::trigger_entropy;
use crate::npy;
use crate::rng;
use crate::tensor::{extract_patch, LatentTensor, Region};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyTestResult {
    pub energy_distance: f64,
    /// `m n / (m + n) * energy_distance`.
    pub statistic: f64,
    pub p_value: f64,
    pub m: usize,
    pub n: usize,
    pub permutations: usize,
}

pub const DEFAULT_PERMUTATIONS: usize = 999;

#[inline]
fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_samples<P: AsRef<[f64]>>(x: &[P], y: &[P]) -> Result<usize> {
    let first = x
        .first()
        .ok_or(Error::EmptyInput("first sample is empty"))?
        .as_ref()
        .len();
    if y.is_empty() {
        return Err(Error::EmptyInput("second sample is empty"));
    }
    for p in x.iter().chain(y) {
        if p.as_ref().len() != first {
            return Err(Error::DimensionMismatch(first, p.as_ref().len()));
        }
    }
    Ok(first)
}

/// Sum over unordered pairs `i < j` of `|v_i - v_j|` for scalars.
fn pair_sum_1d(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &s)| s * (2.0 * i as f64 - n + 1.0))
        .sum()
}

/// Sum over unordered pairs `i < j` of Euclidean distances, rows in parallel.
fn pair_sum<P: AsRef<[f64]> + Sync>(points: &[P]) -> f64 {
    let rows: Vec<f64> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let a = points[i].as_ref();
            points[i + 1..]
                .iter()
                .map(|b| euclidean(a, b.as_ref()))
                .sum()
        })
        .collect();
    rows.iter().sum()
}

fn cross_sum<P: AsRef<[f64]> + Sync>(x: &[P], y: &[P]) -> f64 {
    let rows: Vec<f64> = x
        .par_iter()
        .map(|a| y.iter().map(|b| euclidean(a.as_ref(), b.as_ref())).sum())
        .collect();
    rows.iter().sum()
}

fn combine(cross: f64, within_x: f64, within_y: f64, m: usize, n: usize) -> f64 {
    let (m, n) = (m as f64, n as f64);
    2.0 * cross / (m * n) - 2.0 * within_x / (m * m) - 2.0 * within_y / (n * n)
}

/// Energy distance `2/(mn) ΣΣ|x-y| - 1/m² ΣΣ|x-x'| - 1/n² ΣΣ|y-y'|`.
pub fn energy_distance<P: AsRef<[f64]> + Sync>(x: &[P], y: &[P]) -> Result<f64> {
    let d = check_samples(x, y)?;
    let (m, n) = (x.len(), y.len());
    if m == n && x.iter().zip(y).all(|(a, b)| a.as_ref() == b.as_ref()) {
        return Ok(0.0);
    }
    let e = if d == 1 {
        let xs: Vec<f64> = x.iter().map(|p| p.as_ref()[0]).collect();
        let ys: Vec<f64> = y.iter().map(|p| p.as_ref()[0]).collect();
        let pooled: Vec<f64> = xs.iter().chain(&ys).copied().collect();
        let (wx, wy) = (pair_sum_1d(xs), pair_sum_1d(ys));
        combine(pair_sum_1d(pooled) - wx - wy, wx, wy, m, n)
    } else {
        combine(cross_sum(x, y), pair_sum(x), pair_sum(y), m, n)
    };
    // Rounding can leave a tiny negative value for identical samples.
    Ok(e.max(0.0))
}

/// Pairwise distances of the pooled sample, stored densely.
struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
    total: f64,
}

impl DistanceMatrix {
    fn new<P: AsRef<[f64]> + Sync>(points: &[P]) -> Self {
        let n = points.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let a = points[i].as_ref();
                points.iter().map(|b| euclidean(a, b.as_ref())).collect()
            })
            .collect();
        let d: Vec<f64> = rows.into_iter().flatten().collect();
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                total += d[i * n + j];
            }
        }
        DistanceMatrix { n, d, total }
    }

    fn within(&self, idx: &[usize]) -> f64 {
        let mut s = 0.0;
        for (a, &i) in idx.iter().enumerate() {
            let row = &self.d[i * self.n..(i + 1) * self.n];
            for &j in &idx[a + 1..] {
                s += row[j];
            }
        }
        s
    }

    fn energy(&self, xs: &[usize], ys: &[usize]) -> f64 {
        let wx = self.within(xs);
        let wy = self.within(ys);
        combine(self.total - wx - wy, wx, wy, xs.len(), ys.len())
    }
}

/// Permutation test on the energy statistic.
///
/// Each permutation shuffles the pooled sample with its own derived seed and
/// reassigns the first `m` points to the first group. The p-value is
/// `(1 + #{T_perm >= T_obs}) / (n_perms + 1)`, so it never reaches zero.
pub fn permutation_test<P: AsRef<[f64]> + Sync>(
    x: &[P],
    y: &[P],
    n_perms: usize,
    seed: u64,
) -> Result<EnergyTestResult> {
    check_samples(x, y)?;
    let (m, n) = (x.len(), y.len());
    if m + n < 4 {
        return Err(Error::InvalidArgument(format!(
            "permutation test needs at least 4 points, got {}",
            m + n
        )));
    }
    if n_perms < 99 {
        return Err(Error::InvalidArgument(format!(
            "use at least 99 permutations, got {n_perms}"
        )));
    }
    let pooled: Vec<&[f64]> = x.iter().chain(y).map(AsRef::as_ref).collect();
    let dm = DistanceMatrix::new(&pooled);
    let identity: Vec<usize> = (0..m + n).collect();
    let observed = dm.energy(&identity[..m], &identity[m..]);

    let exceed: usize = (0..n_perms)
        .into_par_iter()
        .map(|p| {
            let mut order = identity.clone();
            order.shuffle(&mut rng::chacha(rng::derive_seed(seed, p as u64)));
            usize::from(dm.energy(&order[..m], &order[m..]) >= observed)
        })
        .sum();

    let e = observed.max(0.0);
    Ok(EnergyTestResult {
        energy_distance: e,
        statistic: (m * n) as f64 / (m + n) as f64 * e,
        p_value: (1 + exceed) as f64 / (n_perms + 1) as f64,
        m,
        n,
        permutations: n_perms,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with a two-sided p-value from the t approximation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(a.len(), b.len()));
    }
    if a.len() < 3 {
        return Err(Error::InvalidArgument(
            "spearman needs at least 3 pairs".into(),
        ));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok((0.0, 1.0));
    }
    let rho = (cov / (va * vb).sqrt()).clamp(-1.0, 1.0);
    if rho.abs() >= 1.0 {
        return Ok((rho, 0.0));
    }
    let df = n - 2.0;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((rho, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

/// Where to find the tensor for a noise id.
pub trait NoiseSource {
    fn load(&self, noise_id: &str) -> Result<LatentTensor>;
}

impl NoiseSource for HashMap<String, LatentTensor> {
    fn load(&self, noise_id: &str) -> Result<LatentTensor> {
        self.get(noise_id)
            .cloned()
            .ok_or_else(|| Error::MissingTensor(noise_id.to_owned()))
    }
}

/// A directory of `<noise_id>.npy` files.
#[derive(Debug, Clone)]
pub struct NoiseDir(pub PathBuf);

impl NoiseSource for NoiseDir {
    fn load(&self, noise_id: &str) -> Result<LatentTensor> {
        let path = self.0.join(format!("{noise_id}.npy"));
        if !path.exists() {
            return Err(Error::MissingTensor(noise_id.to_owned()));
        }
        npy::read_tensor(path)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecileParams {
    pub groups: usize,
    pub patch_size: usize,
    pub n_perms: usize,
    pub seed: u64,
    /// Cap on trigger/negative pairs per group, subsampled deterministically.
    pub max_per_group: Option<usize>,
    /// Draw negatives only from positions not touching the trigger patch.
    pub exclude_overlap: bool,
}

impl Default for DecileParams {
    fn default() -> Self {
        DecileParams {
            groups: 10,
            patch_size: 24,
            n_perms: DEFAULT_PERMUTATIONS,
            seed: 0,
            max_per_group: Some(200),
            exclude_overlap: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileGroup {
    /// 1-based, lowest entropy first.
    pub decile: usize,
    pub records: usize,
    pub patches: usize,
    pub entropy_lo: f64,
    pub entropy_hi: f64,
    pub mean_energy: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileAnalysis {
    pub groups: Vec<DecileGroup>,
    /// Spearman correlation between decile index and energy distance.
    pub spearman_rho: f64,
    pub spearman_p: f64,
    pub skipped_records: usize,
    pub skipped_border_patches: usize,
}

/// Sizes of `groups` consecutive groups covering `n` items: `n / groups` each,
/// with the remainder handed out one apiece starting from the first group.
pub fn partition_sizes(n: usize, groups: usize) -> Vec<usize> {
    let base = n / groups;
    let extra = n % groups;
    (0..groups).map(|g| base + usize::from(g < extra)).collect()
}

fn random_window(
    rng: &mut impl Rng,
    size: usize,
    height: usize,
    width: usize,
    avoid: Option<&Region>,
) -> Region {
    let draw = |rng: &mut dyn rand::RngCore| {
        let x = rng.random_range(0..=width - size);
        let y = rng.random_range(0..=height - size);
        Region {
            x1: x,
            y1: y,
            x2: x + size,
            y2: y + size,
        }
    };
    let first = draw(rng);
    let Some(avoid) = avoid else { return first };
    let mut candidate = first;
    for _ in 0..1000 {
        if candidate.intersection(avoid).is_none() {
            return candidate;
        }
        candidate = draw(rng);
    }
    first
}

/// Splits records into entropy-ordered groups and tests, per group, whether
/// patches at the mean box center differ in distribution from random patches
/// of the same noises.
pub fn decile_analysis(
    manifest: &DatasetManifest,
    noises: &dyn NoiseSource,
    params: &DecileParams,
) -> Result<DecileAnalysis> {
    if params.groups < 3 {
        return Err(Error::InvalidArgument(
            "decile analysis needs at least 3 groups".into(),
        ));
    }
    let mut scored = Vec::new();
    let mut skipped_records = 0;
    for record in &manifest.records {
        let boxes = manifest.latent_boxes(record)?;
        if boxes.is_empty() {
            skipped_records += 1;
            continue;
        }
        let report = trigger_entropy(&record.noise_id, &boxes)?;
        scored.push((report.entropy, record.noise_id.clone(), report.mean_center));
    }
    if scored.len() < params.groups {
        return Err(Error::TooFewRecords {
            needed: params.groups,
            have: scored.len(),
        });
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));

    let size = params.patch_size;
    let mut groups = Vec::with_capacity(params.groups);
    let mut skipped_border = 0;
    let mut start = 0;
    for (g, count) in partition_sizes(scored.len(), params.groups)
        .into_iter()
        .enumerate()
    {
        let members = &scored[start..start + count];
        start += count;
        let mut triggers: Vec<Vec<f64>> = Vec::new();
        let mut negatives: Vec<Vec<f64>> = Vec::new();
        for (i, (_, noise_id, (mx, my))) in members.iter().enumerate() {
            let noise = noises.load(noise_id)?;
            let shape = noise.shape();
            if shape.width < size || shape.height < size {
                return Err(Error::InvalidArgument(format!(
                    "noise `{noise_id}` is smaller than the {size}x{size} patch"
                )));
            }
            let region = Region::centered(mx.round() as i64, my.round() as i64, size, &shape)?;
            if region.width() != size || region.height() != size {
                skipped_border += 1;
                continue;
            }
            let mut rng = rng::chacha(rng::derive_seed(
                rng::derive_seed(params.seed, g as u64),
                i as u64,
            ));
            let avoid = params.exclude_overlap.then_some(&region);
            let neg = random_window(&mut rng, size, shape.height, shape.width, avoid);
            let flat = |r: &Region| -> Result<Vec<f64>> {
                Ok(extract_patch(&noise, r)?
                    .data()
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect())
            };
            triggers.push(flat(&region)?);
            negatives.push(flat(&neg)?);
        }
        if let Some(cap) = params.max_per_group {
            if triggers.len() > cap {
                let mut order: Vec<usize> = (0..triggers.len()).collect();
                order.shuffle(&mut rng::chacha(rng::derive_seed(
                    params.seed ^ 0x5EED,
                    g as u64,
                )));
                order.truncate(cap);
                order.sort_unstable();
                triggers = order.iter().map(|&k| triggers[k].clone()).collect();
                negatives = order.iter().map(|&k| negatives[k].clone()).collect();
            }
        }
        if triggers.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "group {} has fewer than 2 usable patches",
                g + 1
            )));
        }
        let test = permutation_test(
            &triggers,
            &negatives,
            params.n_perms,
            rng::derive_seed(params.seed, 1_000 + g as u64),
        )?;
        groups.push(DecileGroup {
            decile: g + 1,
            records: count,
            patches: triggers.len(),
            entropy_lo: members.first().map_or(0.0, |m| m.0),
            entropy_hi: members.last().map_or(0.0, |m| m.0),
            mean_energy: test.energy_distance,
            p_value: test.p_value,
        });
    }
    let index: Vec<f64> = groups.iter().map(|g| g.decile as f64).collect();
    let energy: Vec<f64> = groups.iter().map(|g| g.mean_energy).collect();
    let (spearman_rho, spearman_p) = spearman(&index, &energy)?;
    Ok(DecileAnalysis {
        groups,
        spearman_rho,
        spearman_p,
        skipped_records,
        skipped_border_patches: skipped_border,
    })
}
