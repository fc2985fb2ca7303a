//! Generator sampling statistics: mean image, pointwise standard deviation,
//! per-pixel histograms and model quality.
//!
//! Realization `i` uses the latent drawn from the stream keyed by
//! `(seed, i)`, so prior and posterior statistics computed with the same
//! seed see the same latents.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Error, Result};
use crate::grid::{Grid, Shape};
use crate::net::{Generator, LatentVec, NetWeights};
use crate::rng::{self, Tag};

/// Realizations per parallel work unit; partial results merge in chunk
/// order.
pub const CHUNK: usize = 64;

pub fn sample_latent(seed: u64, index: usize, dim: usize) -> LatentVec {
    LatentVec::standard_normal(&mut rng::stream(seed, Tag::Sample, &[index as u64]), dim)
}

/// Realizations kept in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub realizations: Vec<Grid>,
}

impl SampleSet {
    pub fn new(realizations: Vec<Grid>) -> Result<Self> {
        let Some(first) = realizations.first() else {
            return invalid("a sample set needs at least one realization");
        };
        let shape = first.shape();
        if let Some(bad) = realizations.iter().find(|g| g.shape() != shape) {
            return shape_err(format!("realization is {}, expected {shape}", bad.shape()));
        }
        Ok(Self { realizations })
    }

    pub fn len(&self) -> usize {
        self.realizations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.realizations.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.realizations[0].shape()
    }

    fn accumulate(&self) -> Welford {
        let mut acc = Welford::new(self.shape());
        for g in &self.realizations {
            acc.push(g.as_slice());
        }
        acc
    }
}

pub fn sample_generator(net: &Generator, w: &NetWeights, m: usize, seed: u64) -> Result<SampleSet> {
    if m == 0 {
        return invalid("sample count must be at least 1");
    }
    let realizations = (0..m)
        .into_par_iter()
        .map(|i| net.forward(w, &sample_latent(seed, i, net.latent_dim())))
        .collect::<Result<Vec<_>>>()?;
    SampleSet::new(realizations)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StdConvention {
    /// Divide by `M`.
    #[default]
    Population,
    /// Divide by `M − 1`.
    Sample,
}

/// Streaming per-pixel mean and sum of squared deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct Welford {
    shape: Shape,
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(shape: Shape) -> Self {
        Self {
            shape,
            count: 0,
            mean: vec![0.0; shape.len()],
            m2: vec![0.0; shape.len()],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn mean(&self) -> Result<Grid> {
        if self.count == 0 {
            return invalid("mean of zero realizations");
        }
        Ok(Grid::from_raw(self.shape, self.mean.clone()))
    }

    pub fn std(&self, convention: StdConvention) -> Result<Grid> {
        if self.count < 2 {
            return invalid(format!(
                "pointwise standard deviation needs at least 2 realizations, got {}",
                self.count
            ));
        }
        let denom = match convention {
            StdConvention::Population => self.count as f64,
            StdConvention::Sample => (self.count - 1) as f64,
        };
        Ok(Grid::from_raw(self.shape, self.m2.iter().map(|s| (s / denom).max(0.0).sqrt()).collect()))
    }
}

pub fn mean_grid(samples: &SampleSet) -> Result<Grid> {
    samples.accumulate().mean()
}

/// Population standard deviation per pixel.
pub fn pointwise_std(samples: &SampleSet) -> Result<Grid> {
    pointwise_std_with(samples, StdConvention::Population)
}

pub fn pointwise_std_with(samples: &SampleSet, convention: StdConvention) -> Result<Grid> {
    samples.accumulate().std(convention)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelHistogram {
    pub pixel: (usize, usize),
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl PixelHistogram {
    /// Equal-width bins over `[min, max]`; bins are right-open except the
    /// last. Constant values get unit-width bins centred on the value.
    pub fn from_values(pixel: (usize, usize), values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return invalid("histogram needs at least one bin");
        }
        if values.is_empty() {
            return invalid("histogram of no values");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("histogram values must be finite");
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins)
            .map(|j| if j == bins { hi } else { lo + j as f64 * width })
            .collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let j = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
            counts[j.min(bins - 1)] += 1;
        }
        Ok(Self { pixel, edges, counts })
    }

    pub const CSV_HEADER: &'static str = "row,col,bin_lo,bin_hi,count";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (j, c) in self.counts.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.pixel.0,
                self.pixel.1,
                self.edges[j],
                self.edges[j + 1],
                c
            );
        }
        out
    }
}

pub fn pixel_histogram(samples: &SampleSet, pixel: (usize, usize), bins: usize) -> Result<PixelHistogram> {
    let shape = samples.shape();
    check_pixel(pixel, shape)?;
    let values: Vec<f64> = samples.realizations.iter().map(|g| g.get(pixel.0, pixel.1)).collect();
    PixelHistogram::from_values(pixel, &values, bins)
}

fn check_pixel(pixel: (usize, usize), shape: Shape) -> Result<()> {
    if pixel.0 >= shape.rows || pixel.1 >= shape.cols {
        return invalid(format!("pixel ({}, {}) outside {shape} grid", pixel.0, pixel.1));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quality {
    pub relative_l2: f64,
    /// `+∞` for an exact match.
    pub snr_db: f64,
}

pub fn model_quality(x: &Grid, truth: &Grid) -> Result<Quality> {
    x.check_same_shape(truth, "model quality")?;
    let norm = truth.norm2();
    if !(norm > 0.0) {
        return invalid("model quality needs a nonzero reference");
    }
    let relative_l2 = x.distance(truth) / norm;
    let snr_db = if relative_l2 == 0.0 {
        f64::INFINITY
    } else {
        -20.0 * relative_l2.log10()
    };
    Ok(Quality { relative_l2, snr_db })
}

/// Streaming statistics of `m` generator realizations plus the values of
/// the requested probe pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamStats {
    pub acc: Welford,
    /// `probe_values[p][i]`: probe `p` in realization `i`.
    pub probe_values: Vec<Vec<f64>>,
}

pub fn stream_statistics(
    net: &Generator,
    w: &NetWeights,
    m: usize,
    seed: u64,
    probes: &[(usize, usize)],
) -> Result<StreamStats> {
    if m == 0 {
        return invalid("sample count must be at least 1");
    }
    let shape = net.output_shape();
    for &p in probes {
        check_pixel(p, shape)?;
    }
    let chunks: Vec<(usize, usize)> = (0..m).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(m))).collect();
    let parts = chunks
        .par_iter()
        .map(|&(start, end)| -> Result<(Welford, Vec<Vec<f64>>)> {
            let mut acc = Welford::new(shape);
            let mut vals = vec![Vec::with_capacity(end - start); probes.len()];
            for i in start..end {
                let g = net.forward(w, &sample_latent(seed, i, net.latent_dim()))?;
                if !g.as_slice().iter().all(|v| v.is_finite()) {
                    return Err(Error::Numerical(format!("realization {i} is not finite")));
                }
                acc.push(g.as_slice());
                for (v, &(r, c)) in vals.iter_mut().zip(probes) {
                    v.push(g.get(r, c));
                }
            }
            Ok((acc, vals))
        })
        .collect::<Vec<_>>();
    let mut acc = Welford::new(shape);
    let mut probe_values = vec![Vec::with_capacity(m); probes.len()];
    for part in parts {
        let (a, vals) = part?;
        acc.merge(&a);
        for (all, v) in probe_values.iter_mut().zip(vals) {
            all.extend(v);
        }
    }
    Ok(StreamStats { acc, probe_values })
}

/// The pixels of largest and median pointwise standard deviation. Ties go
/// to the lower linear index.
pub fn default_probes(std: &Grid) -> [(usize, usize); 2] {
    let mut order: Vec<usize> = (0..std.len()).collect();
    let v = std.as_slice();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let top = v[order[order.len() - 1]];
    let max = v.iter().position(|&s| s == top).unwrap_or(0);
    let median = order[(order.len() - 1) / 2];
    let at = |i: usize| (i / std.cols(), i % std.cols());
    [at(max), at(median)]
}
