//! Synthetic series: a slow sinusoid plus AR(1) noise.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub amplitude: f64,
    /// Period of the sinusoid, in steps.
    pub period: f64,
    pub offset: f64,
    /// AR(1) coefficient of the noise.
    pub phi: f64,
    /// Standard deviation of the AR(1) innovations.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 8000,
            amplitude: 3.0,
            period: 1200.0,
            offset: 10.0,
            phi: 0.9,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn generate(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let innov = Normal::new(0.0, self.noise_std).expect("noise_std must be finite and >= 0");
        // Start the noise from its stationary distribution.
        let stationary = self.noise_std / (1.0 - self.phi * self.phi).max(1e-12).sqrt();
        let mut e = Normal::new(0.0, stationary).expect("finite").sample(&mut rng);
        let phase = std::f64::consts::TAU * (self.seed as f64 * 0.618_033_988_75).fract();
        (0..self.n)
            .map(|t| {
                if t > 0 {
                    e = self.phi * e + innov.sample(&mut rng);
                }
                let s = (std::f64::consts::TAU * t as f64 / self.period + phase).sin();
                self.offset + self.amplitude * s + e
            })
            .collect()
    }

    /// Write `t,y` rows; values keep 12 decimals.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,y")?;
        for (t, y) in self.generate().iter().enumerate() {
            writeln!(w, "{t},{y:.12}")?;
        }
        Ok(())
    }
}
