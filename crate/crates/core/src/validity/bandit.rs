//! Thompson-sampling gate deciding when the expensive exact check is worth it.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

/// Beta-Bernoulli arms indexed by the overlap-volume bin of a node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    pub successes: Vec<u64>,
    pub failures: Vec<u64>,
}

impl BanditState {
    pub fn new(n_bins: usize) -> Self {
        let n = n_bins.max(1);
        Self { successes: vec![1; n], failures: vec![1; n] }
    }

    pub fn n_bins(&self) -> usize {
        self.successes.len()
    }

    /// `floor(n * v)` clamped into range.
    pub fn bin(&self, volume_ratio: f64) -> usize {
        let n = self.n_bins();
        let b = (n as f64 * volume_ratio.clamp(0.0, 1.0)).floor() as usize;
        b.min(n - 1)
    }

    /// Samples `p ~ Beta(succ, fail)` for the bin and draws `r ~ U(0,1)`;
    /// the exact check should run iff `r < p`.
    pub fn should_check<R: Rng>(&self, bin: usize, rng: &mut R) -> bool {
        let beta = Beta::new(self.successes[bin] as f64, self.failures[bin] as f64).expect("counts are positive");
        let p = beta.sample(rng);
        let r: f64 = rng.random();
        r < p
    }

    pub fn record(&mut self, bin: usize, success: bool) {
        if success {
            self.successes[bin] += 1;
        } else {
            self.failures[bin] += 1;
        }
    }
}

impl Default for BanditState {
    fn default() -> Self {
        Self::new(10)
    }
}
