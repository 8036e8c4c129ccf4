//! Seeded synthetic image/instruction/response samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::TrainConfig;
use crate::tensor::{normal_cdf, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `P×P×C` Gaussian image.
    pub image: Tensor,
    pub instruction: Vec<usize>,
    pub response: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub seed: u64,
    pub size: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub vocab: usize,
    pub instruction_len: usize,
    pub response_len: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Dataset {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            seed: splitmix64(cfg.seed ^ 0xDA7A),
            size: cfg.dataset_size,
            image_size: cfg.image_size,
            image_channels: cfg.image_channels,
            vocab: cfg.vocab,
            instruction_len: cfg.instruction_len,
            response_len: cfg.response_len,
        }
    }

    /// Sample `index`, a pure function of `(seed, index)`.
    ///
    /// Response token `t` quantizes the standardized mean of the pixels whose
    /// flat index is `t` modulo the response length, so responses are a
    /// learnable function of the image.
    pub fn sample(&self, index: usize) -> SyntheticSample {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ splitmix64(index as u64)));
        let n = self.image_size * self.image_size * self.image_channels;
        let pixels: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let instruction = (0..self.instruction_len)
            .map(|_| rng.random_range(0..self.vocab))
            .collect();
        let l = self.response_len;
        let response = (0..l)
            .map(|t| {
                let chunk: Vec<f64> = pixels.iter().skip(t).step_by(l).copied().collect();
                let z = chunk.iter().sum::<f64>() / (chunk.len().max(1) as f64).sqrt();
                ((normal_cdf(z) * self.vocab as f64) as usize).min(self.vocab - 1)
            })
            .collect();
        let image = Tensor::new(vec![self.image_size, self.image_size, self.image_channels], pixels)
            .expect("finite gaussian pixels");
        SyntheticSample {
            image,
            instruction,
            response,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let cfg = TrainConfig::default();
        let ds = Dataset::from_config(&cfg);
        let a = ds.sample(3);
        assert_eq!(a, ds.sample(3));
        assert_ne!(a, ds.sample(4));
        assert_eq!(a.image.shape(), &[8, 8, 3]);
        assert_eq!(a.instruction.len(), 8);
        assert_eq!(a.response.len(), 4);
        assert!(a.instruction.iter().chain(&a.response).all(|&t| t < cfg.vocab));
    }
}
