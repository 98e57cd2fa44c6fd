//! Deterministic random-stream derivation.
//!
//! Every random quantity in a simulation draws from its own ChaCha8 stream,
//! keyed by `(master seed, trial index, purpose)`. Streams never share
//! state, so trials can run on any number of threads in any order and still
//! reproduce bit for bit, and an attacker-side simulation never perturbs the
//! defender-side draws.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::psd_sqrt;
use crate::Result;

/// Domain-separation constant mixed into every derived stream key.
const STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// The independent random streams one trial consumes. Defender-side streams
/// drive the real loop; attacker-side streams drive the parallel system a
/// fabricating attacker simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    ProcessNoise,
    MeasurementNoise,
    Drops,
    Watermark,
    AttackerProcessNoise,
    AttackerMeasurementNoise,
    AttackerDrops,
    AttackerWatermark,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::ProcessNoise => 0,
            StreamPurpose::MeasurementNoise => 1,
            StreamPurpose::Drops => 2,
            StreamPurpose::Watermark => 3,
            StreamPurpose::AttackerProcessNoise => 4,
            StreamPurpose::AttackerMeasurementNoise => 5,
            StreamPurpose::AttackerDrops => 6,
            StreamPurpose::AttackerWatermark => 7,
        }
    }

    /// Attacker-side counterpart of a defender-side stream.
    pub fn attacker_side(self) -> StreamPurpose {
        match self {
            StreamPurpose::ProcessNoise => StreamPurpose::AttackerProcessNoise,
            StreamPurpose::MeasurementNoise => StreamPurpose::AttackerMeasurementNoise,
            StreamPurpose::Drops => StreamPurpose::AttackerDrops,
            StreamPurpose::Watermark => StreamPurpose::AttackerWatermark,
            other => other,
        }
    }
}

/// Derive the stream for `(master_seed, trial, purpose)`. The full triple is
/// packed into the 256-bit ChaCha key, so distinct triples give independent
/// streams rather than nearby points of one stream.
pub fn stream_rng(master_seed: u64, trial: u64, purpose: StreamPurpose) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&trial.to_le_bytes());
    key[16..24].copy_from_slice(&purpose.tag().to_le_bytes());
    key[24..32].copy_from_slice(&STREAM_SALT.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Draws `N(0, Σ)` vectors through a fixed symmetric square root of `Σ`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    sqrt: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        Ok(GaussianSampler {
            sqrt: psd_sqrt(cov)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.sqrt.nrows()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.sqrt * z
    }
}

/// Bernoulli draw with success probability `prob`.
pub fn sample_bool(rng: &mut ChaCha8Rng, prob: f64) -> bool {
    rng.random::<f64>() < prob
}
