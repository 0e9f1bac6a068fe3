use crate::boost::EnsembleClaims;
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

/// `X¹ ~ U(1, 10)`, `X² ~ U(5, 10)`, `Y ~ N(0, (X¹)⁶)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroData {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y: Vec<f64>,
}

impl HeteroData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Standard deviation of `Y` given the row's `X¹`.
    pub fn noise_sd(&self, i: usize) -> f64 {
        self.x1[i].powi(3)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x1: idx.iter().map(|&i| self.x1[i]).collect(),
            x2: idx.iter().map(|&i| self.x2[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

pub fn synth_hetero(n: usize, seed: u64) -> HeteroData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u1 = Uniform::new(1.0, 10.0);
    let u2 = Uniform::new(5.0, 10.0);
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let mut d = HeteroData {
        x1: Vec::with_capacity(n),
        x2: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let x1: f64 = u1.sample(&mut rng);
        let x2 = u2.sample(&mut rng);
        d.y.push(x1.powi(3) * z.sample(&mut rng));
        d.x1.push(x1);
        d.x2.push(x2);
    }
    d
}

/// `(X, Y) ~ N(0, I₂)` with level `α(X) = 1/(1 + e^{−X})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianAlphaData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub fn sigmoid_level(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn synth_gaussian_alpha(n: usize, seed: u64) -> GaussianAlphaData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let x: Vec<f64> = (0..n).map(|_| z.sample(&mut rng)).collect();
    let y = (0..n).map(|_| z.sample(&mut rng)).collect();
    let alpha = x.iter().map(|&v| sigmoid_level(v)).collect();
    GaussianAlphaData { x, y, alpha }
}

/// Standard normal CDF.
pub fn normal_cdf(t: f64) -> f64 {
    NormalDist::new(0.0, 1.0).expect("unit normal").cdf(t)
}

/// `P(|Y| ≤ t)` for `Y ~ N(0, sd²)`.
pub fn abs_normal_coverage(t: f64, sd: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t.is_infinite() {
        1.0
    } else {
        2.0 * normal_cdf(t / sd) - 1.0
    }
}

/// Settings for synthetic pre-scored claim data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClaimMixtureConfig {
    pub min_claims: usize,
    pub max_claims: usize,
    /// Probability that a claim is true, per group.
    pub truth_rate: [f64; 2],
    /// How far the informative base scores separate true from false claims.
    pub signal: [f64; 4],
}

impl Default for ClaimMixtureConfig {
    fn default() -> Self {
        Self {
            min_claims: 3,
            max_claims: 10,
            truth_rate: [0.8, 0.6],
            signal: [0.6, 0.2, 0.0, 0.0],
        }
    }
}

/// One synthetic output: a group label, features `(1, group)` and claims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClaimRecord {
    pub group: usize,
    pub features: Vec<f64>,
    pub claims: EnsembleClaims,
}

/// Outputs whose claims carry four base scores of decreasing informativeness:
/// base score `k` is `signal[k]·W + (1 − signal[k])·U` with `U ~ U(0, 1)`.
pub fn synth_claim_mixture(n: usize, seed: u64, cfg: &ClaimMixtureConfig) -> Result<Vec<SynthClaimRecord>> {
    if cfg.min_claims > cfg.max_claims {
        return Err(Error::Validation("min_claims exceeds max_claims".into()));
    }
    if cfg.truth_rate.iter().chain(&cfg.signal).any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Validation("rates and signals must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let group = usize::from(rng.gen_bool(0.5));
            let k = rng.gen_range(cfg.min_claims..=cfg.max_claims);
            let mut base_scores = Vec::with_capacity(k);
            let mut annotations = Vec::with_capacity(k);
            for _ in 0..k {
                let w = u8::from(rng.gen_bool(cfg.truth_rate[group]));
                let b = cfg
                    .signal
                    .iter()
                    .map(|&s| s * f64::from(w) + (1.0 - s) * rng.gen::<f64>())
                    .collect();
                base_scores.push(b);
                annotations.push(w);
            }
            SynthClaimRecord {
                group,
                features: vec![1.0, group as f64],
                claims: EnsembleClaims {
                    base_scores,
                    annotations,
                },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hetero_is_deterministic_with_expected_moments() {
        let a = synth_hetero(20000, 1);
        assert_eq!(a, synth_hetero(20000, 1));
        let n = a.len() as f64;
        let mean = a.x1.iter().sum::<f64>() / n;
        // Var U(1,10) = 81/12
        let se = (81.0 / 12.0 / n).sqrt();
        assert!((mean - 5.5).abs() <= 3.0 * se, "mean {mean}");
        assert!(a.x1.iter().all(|&v| (1.0..10.0).contains(&v)));
        assert!(a.x2.iter().all(|&v| (5.0..10.0).contains(&v)));
    }

    #[test]
    fn conditional_variance_at_two() {
        // Y/X¹³ is standard normal, so Var(Y | X¹=2) = 64·Var(Y/X¹³)
        let d = synth_hetero(100_000, 8);
        let z: Vec<f64> = (0..d.len()).map(|i| d.y[i] / d.noise_sd(i)).collect();
        let n = z.len() as f64;
        let m = z.iter().sum::<f64>() / n;
        let v = z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        let var_at_two = 64.0 * v;
        // sample variance of N(0,1) has SE √(2/n)
        let se = 64.0 * (2.0 / n).sqrt();
        assert!((var_at_two - 64.0).abs() <= 3.0 * se, "{var_at_two}");
    }

    #[test]
    fn sigmoid_levels() {
        assert_eq!(sigmoid_level(0.0), 0.5);
        let d = synth_gaussian_alpha(1000, 3);
        assert!(d.alpha.iter().all(|&a| a > 0.0 && a < 1.0));
        assert_eq!(d, synth_gaussian_alpha(1000, 3));
    }

    #[test]
    fn coverage_oracles() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-9);
        assert!((abs_normal_coverage(1.959963984540054, 1.0) - 0.95).abs() < 1e-9);
        assert_eq!(abs_normal_coverage(-1.0, 2.0), 0.0);
    }

    #[test]
    fn claim_mixture_shapes() {
        let cfg = ClaimMixtureConfig::default();
        let d = synth_claim_mixture(200, 5, &cfg).unwrap();
        assert_eq!(d.len(), 200);
        for r in &d {
            let k = r.claims.annotations.len();
            assert!((3..=10).contains(&k));
            assert!(r.claims.base_scores.iter().all(|b| b.len() == 4));
            assert!(r.claims.base_scores.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(d, synth_claim_mixture(200, 5, &cfg).unwrap());
    }
}
