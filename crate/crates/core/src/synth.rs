//! Synthetic layers with injected channel outliers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierLayerSpec {
    pub n: usize,
    pub m: usize,
    /// Total calibration rows, split into samples of `rows_per_sample`.
    pub rows: usize,
    pub rows_per_sample: usize,
    /// Blocks that receive an outlier channel.
    pub outlier_blocks: Vec<usize>,
    /// Magnitude multiplier of each outlier channel.
    pub outlier_scale: f64,
    pub seed: u64,
}

impl Default for OutlierLayerSpec {
    fn default() -> Self {
        OutlierLayerSpec {
            n: 128,
            m: 64,
            rows: 128,
            rows_per_sample: 1,
            outlier_blocks: vec![0, 2],
            outlier_scale: 50.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OutlierLayer {
    pub weights: Mat,
    pub calib_set: Vec<Mat>,
    /// Feature index of each injected outlier channel.
    pub outlier_channels: Vec<usize>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Activations are standard normal; one channel in each outlier block is
/// scaled by `outlier_scale`. Weights are normal with variance `1/n`.
pub fn outlier_layer(spec: &OutlierLayerSpec) -> OutlierLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w_std = 1.0 / (spec.n as f64).sqrt();
    let weights = Mat {
        rows: spec.m,
        cols: spec.n,
        data: (0..spec.m * spec.n).map(|_| normal(&mut rng) * w_std).collect(),
    };
    let outlier_channels: Vec<usize> = spec
        .outlier_blocks
        .iter()
        .map(|&b| b * 32 + rng.gen_range(0..32))
        .collect();
    let samples = spec.rows / spec.rows_per_sample;
    let calib_set = (0..samples)
        .map(|_| {
            let mut x = Mat {
                rows: spec.rows_per_sample,
                cols: spec.n,
                data: (0..spec.rows_per_sample * spec.n).map(|_| normal(&mut rng)).collect(),
            };
            for r in 0..x.rows {
                for &c in &outlier_channels {
                    let v = x.get(r, c);
                    x.set(r, c, v * spec.outlier_scale);
                }
            }
            x
        })
        .collect();
    OutlierLayer {
        weights,
        calib_set,
        outlier_channels,
    }
}
