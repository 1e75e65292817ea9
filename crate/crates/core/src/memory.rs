//! Momentum key encoder and the FIFO queue of negative keys.

use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};

use crate::binio;
use crate::embeddings::Embeddings;
use crate::encoder::EncoderParams;
use crate::error::{Co2Error, Result};
use crate::numeric::{l2_normalize, norm};
use crate::rng::{self, Domain};

/// Ring buffer of `capacity` unit-norm keys. The slot at `cursor` holds the
/// oldest entry and is the next to be overwritten.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueue {
    dim: usize,
    capacity: usize,
    entries: Vec<f64>,
    cursor: usize,
}

/// `capacity` random unit vectors drawn from `seed`.
pub fn init_queue(capacity: usize, dim: usize, seed: u64) -> Result<FeatureQueue> {
    if capacity == 0 || dim == 0 {
        return Err(Co2Error::InvalidConfig(
            "queue capacity and dimension must be positive".into(),
        ));
    }
    let mut rng = rng::stream(seed, Domain::QueueInit, capacity as u64, dim as u64);
    let mut entries = Vec::with_capacity(capacity * dim);
    let mut row = vec![0.0; dim];
    for _ in 0..capacity {
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            if let Ok(unit) = l2_normalize(&row) {
                entries.extend_from_slice(&unit);
                break;
            }
        }
    }
    Ok(FeatureQueue {
        dim,
        capacity,
        entries,
        cursor: 0,
    })
}

impl FeatureQueue {
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Overwrites the `keys.len()` oldest entries with `keys`, in order.
    pub fn enqueue_batch<R: AsRef<[f64]>>(&mut self, keys: &[R]) -> Result<()> {
        let batch = keys.len();
        if batch == 0 {
            return Ok(());
        }
        if batch > self.capacity {
            return Err(Co2Error::BatchTooLarge {
                batch,
                capacity: self.capacity,
            });
        }
        if !self.capacity.is_multiple_of(batch) {
            return Err(Co2Error::IndivisibleCapacity {
                batch,
                capacity: self.capacity,
            });
        }
        for key in keys {
            let key = key.as_ref();
            if key.len() != self.dim {
                return Err(Co2Error::DimensionMismatch(format!(
                    "key of length {} for queue of dimension {}",
                    key.len(),
                    self.dim
                )));
            }
            if (norm(key) - 1.0).abs() > 1e-6 {
                return Err(Co2Error::InvalidConfig("queued keys must be unit norm".into()));
            }
        }
        for key in keys {
            let start = self.cursor * self.dim;
            self.entries[start..start + self.dim].copy_from_slice(key.as_ref());
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        Ok(())
    }

    /// Copy of the entries ordered oldest first.
    pub fn snapshot(&self) -> Embeddings {
        let split = self.cursor * self.dim;
        let mut data = Vec::with_capacity(self.entries.len());
        data.extend_from_slice(&self.entries[split..]);
        data.extend_from_slice(&self.entries[..split]);
        Embeddings::from_flat(self.dim, data).expect("queue rows are well formed")
    }

    pub(crate) fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.cursor as u64).to_le_bytes())?;
        binio::write_f64s(w, &self.entries)?;
        Ok(())
    }

    pub(crate) fn read_from(r: &mut impl Read) -> Result<Self> {
        let capacity = binio::read_u64(r, "queue header")? as usize;
        let dim = binio::read_u64(r, "queue header")? as usize;
        let cursor = binio::read_u64(r, "queue header")? as usize;
        if capacity == 0 || dim == 0 || cursor >= capacity || capacity.saturating_mul(dim) > 1 << 32 {
            return Err(Co2Error::DimensionMismatch(format!(
                "queue header capacity={capacity} dim={dim} cursor={cursor}"
            )));
        }
        let entries = binio::read_f64s(r, capacity * dim, "queue entries")?;
        Ok(Self {
            dim,
            capacity,
            entries,
            cursor,
        })
    }
}

/// Key encoder parameters and their EMA coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub key_params: EncoderParams,
    momentum: f64,
}

impl MomentumState {
    pub fn new(key_params: EncoderParams, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Co2Error::InvalidConfig(format!(
                "momentum must lie in [0, 1], got {momentum}"
            )));
        }
        Ok(Self {
            key_params,
            momentum,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// `theta_k <- m * theta_k + (1 - m) * theta_q`, elementwise.
    pub fn momentum_update(&mut self, query_params: &EncoderParams) -> Result<()> {
        if !query_params.config().same_shape(self.key_params.config()) {
            return Err(Co2Error::ShapeMismatch {
                expected: self.key_params.len(),
                actual: query_params.len(),
            });
        }
        ema_update(self.key_params.values_mut(), query_params.values(), self.momentum);
        Ok(())
    }
}

/// One EMA step on raw slices, in the exact expression order used everywhere.
#[inline]
pub fn ema_update(target: &mut [f64], source: &[f64], m: f64) {
    for (k, q) in target.iter_mut().zip(source) {
        *k = m * *k + (1.0 - m) * q;
    }
}
