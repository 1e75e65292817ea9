//! Synthetic clustered datasets, the dataset file format and two-view
//! augmentation.
//!
//! Dataset file layout (little-endian):
//!
//! ```text
//! "CO2DATA\0" | version u16 | flags u16 (bit 0: labels) | count u32 | dim u32
//! count * dim f32 features | count u32 labels (only when flagged)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Co2Error, Result};
use crate::numeric::ensure_finite;
use crate::rng::{self, Domain, StreamRng};

pub const DATA_MAGIC: &[u8; 8] = b"CO2DATA\0";
pub const DATA_VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub center_seed: u64,
    /// Standard deviation of the class-center coordinates.
    pub center_scale: f64,
    /// Per-coordinate standard deviation around each center.
    pub within_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 64,
            input_dim: 32,
            center_seed: 0,
            center_scale: 0.5,
            within_sigma: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.input_dim < 2 {
            return Err(Co2Error::InvalidConfig(
                "synthetic data needs at least 2 classes and 2 dimensions".into(),
            ));
        }
        if !(self.center_scale >= 0.0 && self.within_sigma >= 0.0) {
            return Err(Co2Error::InvalidConfig(
                "center_scale and within_sigma must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Gaussian blobs around seeded class centers.
///
/// Samples are grouped by class in label order. Values are rounded to `f32`
/// so that a dataset survives a trip through the file format unchanged.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let d = spec.input_dim;
    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for class in 0..spec.num_classes {
        let mut crng = rng::stream(spec.center_seed, Domain::Centers, class as u64, 0);
        let center: Vec<f64> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut crng);
                spec.center_scale * z
            })
            .collect();
        let mut srng = rng::stream(spec.center_seed, Domain::SampleNoise, class as u64, 0);
        for _ in 0..spec.samples_per_class {
            let features = center
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut srng);
                    (c + spec.within_sigma * z) as f32 as f64
                })
                .collect();
            samples.push(Sample {
                features,
                label: Some(class as u32),
            });
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    /// Fraction of coordinates zeroed at random.
    pub mask_fraction: f64,
    /// Global scale drawn from `[1 - s, 1 + s]`.
    pub scale_jitter: f64,
    /// Fraction of coordinates kept by the contiguous crop window.
    pub crop_keep: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.3,
            mask_fraction: 0.1,
            scale_jitter: 0.2,
            crop_keep: 0.75,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_fraction: 0.0,
            scale_jitter: 0.0,
            crop_keep: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.noise_sigma >= 0.0
            && (0.0..1.0).contains(&self.mask_fraction)
            && self.scale_jitter >= 0.0
            && self.scale_jitter.is_finite()
            && self.noise_sigma.is_finite()
            && self.crop_keep > 0.0
            && self.crop_keep <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Co2Error::InvalidConfig(format!("augmentation out of range: {self:?}")))
        }
    }
}

/// Identifies the random substream of one augmented view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewKey {
    pub seed: u64,
    pub epoch: u64,
    pub sample: u64,
}

impl ViewKey {
    fn rng(&self, view: u64) -> StreamRng {
        rng::stream(self.seed, Domain::Augment, self.epoch, self.sample * 2 + view)
    }
}

/// One stochastic view: scale, additive noise, crop window, then masking.
pub fn augment(features: &[f64], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    let d = features.len();
    let scale = if cfg.scale_jitter > 0.0 {
        rng.random_range(1.0 - cfg.scale_jitter..=1.0 + cfg.scale_jitter)
    } else {
        1.0
    };
    let mut out: Vec<f64> = features
        .iter()
        .map(|x| {
            let noise = if cfg.noise_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                cfg.noise_sigma * z
            } else {
                0.0
            };
            scale * x + noise
        })
        .collect();

    if cfg.crop_keep < 1.0 && d > 0 {
        let keep = ((cfg.crop_keep * d as f64).round() as usize).clamp(1, d);
        let start = rng.random_range(0..=d - keep);
        out[..start].fill(0.0);
        out[start + keep..].fill(0.0);
    }
    let masked = (cfg.mask_fraction * d as f64).round() as usize;
    if masked > 0 {
        for i in index::sample(rng, d, masked.min(d)) {
            out[i] = 0.0;
        }
    }
    out
}

/// Query and positive views of the same features from disjoint substreams.
pub fn two_views(features: &[f64], cfg: &AugmentConfig, key: ViewKey) -> (Vec<f64>, Vec<f64>) {
    let xq = augment(features, cfg, &mut key.rng(0));
    let xp = augment(features, cfg, &mut key.rng(1));
    (xq, xp)
}

/// Z-scores every coordinate across the dataset in place.
pub fn standardize(samples: &mut [Sample]) {
    let Some(d) = samples.first().map(|s| s.features.len()) else {
        return;
    };
    let n = samples.len() as f64;
    for j in 0..d {
        let mean = samples.iter().map(|s| s.features[j]).sum::<f64>() / n;
        let var = samples
            .iter()
            .map(|s| (s.features[j] - mean).powi(2))
            .sum::<f64>()
            / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for s in samples.iter_mut() {
            s.features[j] = (s.features[j] - mean) / sd;
        }
    }
}

pub fn write_dataset(w: &mut impl Write, samples: &[Sample]) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let labelled = samples.iter().all(|s| s.label.is_some()) && !samples.is_empty();
    if samples.iter().any(|s| s.features.len() != dim) {
        return Err(Co2Error::DimensionMismatch("samples of unequal dimension".into()));
    }
    w.write_all(DATA_MAGIC)?;
    w.write_all(&DATA_VERSION.to_le_bytes())?;
    let flags = if labelled { FLAG_LABELS } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&binio::usize_to_u32(samples.len(), "sample count")?.to_le_bytes())?;
    w.write_all(&binio::usize_to_u32(dim, "dimension")?.to_le_bytes())?;
    let mut buf = Vec::with_capacity(samples.len() * dim * 4);
    for s in samples {
        for &x in &s.features {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    if labelled {
        for s in samples {
            buf.extend_from_slice(&s.label.expect("checked").to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<Vec<Sample>> {
    let mut magic = [0u8; 8];
    binio::read_exact(r, &mut magic, "dataset magic")?;
    if &magic != DATA_MAGIC {
        return Err(Co2Error::BadMagic("dataset"));
    }
    let version = binio::read_u16(r, "dataset header")?;
    if version != DATA_VERSION {
        return Err(Co2Error::UnsupportedVersion {
            kind: "dataset",
            version,
        });
    }
    let flags = binio::read_u16(r, "dataset header")?;
    let count = binio::read_u32(r, "dataset header")? as usize;
    let dim = binio::read_u32(r, "dataset header")? as usize;
    if dim == 0 && count > 0 {
        return Err(Co2Error::DimensionMismatch("zero-dimensional samples".into()));
    }
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    let mut row = vec![0u8; dim * 4];
    for _ in 0..count {
        binio::read_exact(r, &mut row, "dataset features")?;
        let features: Vec<f64> = row
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        ensure_finite(&features, "dataset features")?;
        samples.push(Sample {
            features,
            label: None,
        });
    }
    if flags & FLAG_LABELS != 0 {
        for s in samples.iter_mut() {
            s.label = Some(binio::read_u32(r, "dataset labels")?);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Co2Error::DimensionMismatch(format!(
            "trailing bytes after {count} samples of dimension {dim}"
        )));
    }
    Ok(samples)
}

pub fn save_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, samples)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}
