//! Simulated functional data with known eigen-decomposition.
//!
//! 1D: `X(t) = Σ_{r≤10} ξ_r φ_r(t)` with `φ_1 = 1`, `φ_r = √2 cos((r−1)πt)`,
//! `λ_r = 0.4 r⁻²`, noise sd 0.5 and `m ~ round(N(6, 2²))`.
//! 2D: six products `e_{k₁}(s) e_{k₂}(t)` with `e_k = √2 cos(kπ·)`,
//! `r = 3(k₁−1)+k₂`, `λ_r = 2^{1−r}`, noise sd 0.2 and `m ~ round(N(25, 6))`.
//!
//! Each subject draws from its own ChaCha20 stream, so generation is
//! reproducible and independent of thread scheduling.

use std::f64::consts::{PI, SQRT_2};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FpcaError, Result};
use crate::eval::FpcTruth;
use crate::model::Subject;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "2d")]
    TwoD,
}

impl Setting {
    pub fn dims(self) -> usize {
        match self {
            Setting::OneD => 1,
            Setting::TwoD => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Setting::OneD => "1d",
            Setting::TwoD => "2d",
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = FpcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1d" => Ok(Setting::OneD),
            "2d" => Ok(Setting::TwoD),
            other => Err(FpcaError::Argument(format!(
                "unknown setting {other:?}, use 1d or 2d"
            ))),
        }
    }
}

/// Ground truth of a simulation, as written to the sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub setting: Setting,
    pub seed: u64,
    pub n: usize,
    pub lambda: Vec<f64>,
    pub noise_sd: f64,
    pub m_mean: f64,
    pub m_sd: f64,
}

impl SimTruth {
    pub fn new(setting: Setting, n: usize, seed: u64) -> Self {
        match setting {
            Setting::OneD => Self {
                setting,
                seed,
                n,
                lambda: (1..=10).map(|r| 0.4 / (r * r) as f64).collect(),
                noise_sd: 0.5,
                m_mean: 6.0,
                m_sd: 2.0,
            },
            Setting::TwoD => Self {
                setting,
                seed,
                n,
                lambda: (0..6).map(|r| 0.5f64.powi(r)).collect(),
                noise_sd: 0.2,
                m_mean: 25.0,
                m_sd: 6f64.sqrt(),
            },
        }
    }

    pub fn dims(&self) -> usize {
        self.setting.dims()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::from)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let truth: Self = serde_json::from_str(&text).map_err(|e| FpcaError::Parse {
            line: e.line(),
            reason: e.to_string(),
        })?;
        let expected = SimTruth::new(truth.setting, truth.n, truth.seed);
        if truth != expected {
            return Err(FpcaError::Parse {
                line: 0,
                reason: format!(
                    "{} does not describe the {} design",
                    path.display(),
                    truth.setting.name()
                ),
            });
        }
        Ok(truth)
    }
}

fn cosine(k: usize, t: f64) -> f64 {
    SQRT_2 * (k as f64 * PI * t).cos()
}

impl FpcTruth for SimTruth {
    fn domain(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0); self.dims()]
    }

    fn components(&self) -> usize {
        self.lambda.len()
    }

    fn eigenvalue(&self, r: usize) -> f64 {
        self.lambda[r]
    }

    fn eigenfunction(&self, r: usize, x: &[f64]) -> f64 {
        match self.setting {
            Setting::OneD if r == 0 => 1.0,
            Setting::OneD => cosine(r, x[0]),
            Setting::TwoD => cosine(r / 3 + 1, x[0]) * cosine(r % 3 + 1, x[1]),
        }
    }
}

/// One simulated subject with its latent scores and noise.
#[cfg_attr(not(test), allow(dead_code))]
struct Draw {
    locations: Vec<f64>,
    values: Vec<f64>,
    scores: Vec<f64>,
    noise: Vec<f64>,
}

fn draw(truth: &SimTruth, i: usize) -> Draw {
    let mut rng = ChaCha20Rng::seed_from_u64(truth.seed);
    rng.set_stream(i as u64);
    let d = truth.dims();
    let m_dist = Normal::new(truth.m_mean, truth.m_sd).expect("positive sd");
    let m = (m_dist.sample(&mut rng).round() as i64).max(1) as usize;
    let scores: Vec<f64> = truth
        .lambda
        .iter()
        .map(|l| l.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let locations: Vec<f64> = (0..m * d).map(|_| rng.random::<f64>()).collect();
    let noise: Vec<f64> = (0..m)
        .map(|_| truth.noise_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let values = locations
        .chunks(d)
        .zip(&noise)
        .map(|(x, e)| {
            scores
                .iter()
                .enumerate()
                .map(|(r, s)| s * truth.eigenfunction(r, x))
                .sum::<f64>()
                + e
        })
        .collect();
    Draw {
        locations,
        values,
        scores,
        noise,
    }
}

/// `n` subjects of `setting`, identified `s0`, `s1`, ….
pub fn generate<T: Scalar>(
    setting: Setting,
    n: usize,
    seed: u64,
) -> Result<(Vec<Subject<T>>, SimTruth)> {
    if n == 0 {
        return Err(FpcaError::Argument(
            "number of subjects must be at least 1".into(),
        ));
    }
    let truth = SimTruth::new(setting, n, seed);
    let subjects = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = draw(&truth, i);
            Subject::new(
                format!("s{i}"),
                truth.dims(),
                d.locations.into_iter().map(T::lit).collect(),
                d.values.into_iter().map(T::lit).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((subjects, truth))
}

pub fn gen_1d<T: Scalar>(n: usize, seed: u64) -> Result<(Vec<Subject<T>>, SimTruth)> {
    generate(Setting::OneD, n, seed)
}

pub fn gen_2d<T: Scalar>(n: usize, seed: u64) -> Result<(Vec<Subject<T>>, SimTruth)> {
    generate(Setting::TwoD, n, seed)
}
