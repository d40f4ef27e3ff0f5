//! Seeded synthetic embedding pools with a known latent quality.
//!
//! Each sample is `x = q * u + noise`, where `u` is a fixed unit direction,
//! `q` is the latent quality (also used as the MOS) drawn uniformly from
//! [-1, 1], and the noise is isotropic Gaussian whose expected norm is
//! `noise_rms` (per-component sigma `noise_rms / sqrt(D)`).
//!
//! The variants add structure that specific aggregation methods should cope
//! with: a dense low-quality mode for clustering, and a corrupted band near
//! the median for offset peeling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::store::{EmbeddingDataset, EmbeddingRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct LatentModel {
    pub dim: usize,
    pub noise_rms: f64,
    /// Unit direction along which quality varies.
    pub quality_axis: Vec<f64>,
    /// Unit direction orthogonal to `quality_axis`, used for nuisance structure.
    pub nuisance_axis: Vec<f64>,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl LatentModel {
    pub fn new(dim: usize, noise_rms: f64, seed: u64) -> Self {
        assert!(dim >= 2, "need two orthogonal axes");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let quality_axis = random_unit(&mut rng, dim);
        let mut nuisance = random_unit(&mut rng, dim);
        let proj: f64 = nuisance.iter().zip(&quality_axis).map(|(a, b)| a * b).sum();
        for (v, u) in nuisance.iter_mut().zip(&quality_axis) {
            *v -= proj * u;
        }
        let n = nuisance.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nuisance_axis = nuisance.into_iter().map(|x| x / n).collect();
        Self {
            dim,
            noise_rms,
            quality_axis,
            nuisance_axis,
        }
    }

    fn embed(&self, rng: &mut ChaCha8Rng, quality: f64, nuisance: f64) -> Vec<f32> {
        let sigma = self.noise_rms / (self.dim as f64).sqrt();
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        self.quality_axis
            .iter()
            .zip(&self.nuisance_axis)
            .map(|(u, v)| (quality * u + nuisance * v + noise.sample(rng)) as f32)
            .collect()
    }

    fn build(&self, tag: &str, records: Vec<EmbeddingRecord>) -> EmbeddingDataset {
        EmbeddingDataset::from_records(self.dim, tag, records).expect("generated records are valid")
    }

    /// `n` samples with `q ~ U(-1, 1)` and `mos = q`.
    pub fn sample(&self, n: usize, id_prefix: &str, seed: u64) -> EmbeddingDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|i| {
                let q = rng.random_range(-1.0..1.0);
                let e = self.embed(&mut rng, q, 0.0);
                EmbeddingRecord::new(format!("{id_prefix}{i:06}"), e).with_mos(q)
            })
            .collect();
        self.build(id_prefix, records)
    }

    /// An anchor pool whose low-quality half is dominated by one dense mode.
    ///
    /// Half the samples have `q ~ U(0, 1)`. Of the other half, a
    /// `mode_share` fraction sits near `mode_quality * u + mode_offset * v`
    /// and the rest have `q ~ U(-1, 0)`. All low samples get a negative MOS,
    /// so a median split puts exactly the low half in Low.
    pub fn imbalanced_pool(
        &self,
        n: usize,
        mode_share: f64,
        mode_quality: f64,
        mode_offset: f64,
        seed: u64,
    ) -> EmbeddingDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_low = n / 2;
        let n_mode = (mode_share * n_low as f64).round() as usize;
        let records = (0..n)
            .map(|i| {
                let (q, mos, nuisance) = if i < n - n_low {
                    let q = rng.random_range(0.0..1.0);
                    (q, q, 0.0)
                } else if i < n - n_low + n_mode {
                    (mode_quality, rng.random_range(-1.0..0.0), mode_offset)
                } else {
                    let q = rng.random_range(-1.0..0.0);
                    (q, q, 0.0)
                };
                let e = self.embed(&mut rng, q, nuisance);
                EmbeddingRecord::new(format!("pool{i:06}"), e).with_mos(mos)
            })
            .collect();
        self.build("imbalanced", records)
    }

    /// An anchor pool with `q ~ U(-1, 1)` where low samples within `band` of
    /// the median carry an extra `corruption * v` component.
    pub fn corrupted_band_pool(
        &self,
        n: usize,
        band: f64,
        corruption: f64,
        seed: u64,
    ) -> EmbeddingDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|i| {
                let q: f64 = rng.random_range(-1.0..1.0);
                let nuisance = if q < 0.0 && q > -band {
                    corruption
                } else {
                    0.0
                };
                let e = self.embed(&mut rng, q, nuisance);
                EmbeddingRecord::new(format!("pool{i:06}"), e).with_mos(q)
            })
            .collect();
        self.build("corrupted-band", records)
    }
}
