//! Desk-scale binary segmentation laboratory: a small NCHW autodiff engine,
//! composable residual/attention U-Net blocks with independent ablation
//! toggles, synthetic label-noise generation calibrated to a target overlap,
//! an adaptive denoising training loop, and a full evaluation-metric suite.

pub mod arch;
pub mod data;
pub mod error;
pub mod metrics;
pub mod noise;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub(crate) mod util {
    pub fn fnv1a(s: &str) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for b in s.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Derives an independent stream seed from a base seed and a tag.
    pub fn derive_seed(seed: u64, tag: &str) -> u64 {
        fnv1a(&format!("{seed}/{tag}"))
    }
}
