//! Training diffusion schedule with the scaling eliminated from the forward
//! process, noise-level estimation, and the adaptive inference schedule.
//!
//! The forward process never rescales the clean cloud: `x^t = x^0 + σ̄_t z`
//! with `σ̄_t² = (1 - ᾱ_t) / ᾱ_t`. Each Markov step injects variance
//! `β_t / ᾱ_t`, and these per-step variances telescope to `σ̄_t²`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{norm, Point3, PointCloud};

/// Default number of training timesteps.
pub const DEFAULT_STEPS: usize = 1000;
/// Default final beta; puts `σ̄_T` just above 0.03.
pub const DEFAULT_BETA_T: f64 = 2e-6;

/// Variance of a chi distribution with 3 degrees of freedom and unit scale.
pub const CHI3_NORM_VARIANCE: f64 = 3.0 - 8.0 / PI;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// `1 - ᾱ_t`, accumulated without cancellation.
    one_minus_alpha_bar: Vec<f64>,
    sigma_bar_sq: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear schedule `β_t = beta_t_max * t / steps`, with `β_0 = 0`.
    pub fn linear(steps: usize, beta_t_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_t_max > 0.0 && beta_t_max < 1.0) {
            return Err(Error::invalid(format!("beta_T = {beta_t_max} must lie in (0, 1)")));
        }
        let beta: Vec<f64> = (0..=steps)
            .map(|t| beta_t_max * t as f64 / steps as f64)
            .collect();
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut complement = Vec::with_capacity(beta.len());
        let (mut ab, mut c) = (1.0f64, 0.0f64);
        for (t, &b) in beta.iter().enumerate() {
            if t > 0 {
                // 1 - ab*(1-b) = (1-ab) + ab*b
                c += ab * b;
                ab *= 1.0 - b;
            }
            alpha_bar.push(ab);
            complement.push(c);
        }
        let sigma_bar_sq = alpha_bar
            .iter()
            .zip(&complement)
            .map(|(&ab, &c)| c / ab)
            .collect();
        Self {
            beta,
            alpha_bar,
            one_minus_alpha_bar: complement,
            sigma_bar_sq,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.one_minus_alpha_bar[t]
    }

    pub fn sigma_bar_sq(&self, t: usize) -> f64 {
        self.sigma_bar_sq[t]
    }

    pub fn sigma_bar(&self, t: usize) -> f64 {
        self.sigma_bar_sq[t].sqrt()
    }

    pub fn sigma_bar_sq_all(&self) -> &[f64] {
        &self.sigma_bar_sq
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} exceeds T = {}", self.steps())));
        }
        Ok(())
    }

    /// Variance `β_t / ᾱ_t` injected by the single Markov step `t-1 -> t`.
    pub fn per_step_variance(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::invalid("per-step variance is defined for t >= 1"));
        }
        self.check_t(t)?;
        Ok(self.beta[t] / self.alpha_bar[t])
    }

    /// Draws `x^t = x^0 + σ̄_t z`, `z ~ N(0, I)`. The clean cloud is not rescaled.
    pub fn forward_sample<R: Rng + ?Sized>(&self, x0: &PointCloud, t: usize, rng: &mut R) -> Result<PointCloud> {
        self.check_t(t)?;
        let s = self.sigma_bar(t);
        if s == 0.0 {
            return Ok(x0.clone());
        }
        let pts = x0
            .points()
            .iter()
            .map(|p| {
                let mut q = *p;
                for c in q.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *c += s * z;
                }
                q
            })
            .collect();
        PointCloud::new(pts)
    }

    /// Nearest timestep to a target `σ̄²` by linear scan; ties go to the
    /// smaller timestep. Negative or NaN targets map to 0.
    pub fn match_timestep(&self, sigma_bar_sq: f64) -> usize {
        let mut best = 0;
        let mut best_err = (self.sigma_bar_sq[0] - sigma_bar_sq).abs();
        for (t, &s) in self.sigma_bar_sq.iter().enumerate().skip(1) {
            let err = (s - sigma_bar_sq).abs();
            if err < best_err {
                best = t;
                best_err = err;
            }
        }
        best
    }

    /// Plain-text table with one `t beta alpha_bar sigma_bar_sq` row per timestep.
    pub fn to_table(&self) -> String {
        let mut out = String::from("# t beta alpha_bar sigma_bar_sq\n");
        for t in 0..=self.steps() {
            let _ = writeln!(
                out,
                "{t} {:e} {:e} {:e}",
                self.beta[t], self.alpha_bar[t], self.sigma_bar_sq[t]
            );
        }
        out
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_T).expect("default schedule parameters are valid")
    }
}

/// How the raw variance of score norms is mapped to a noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Calibration {
    /// `σ̄² = Var(‖s‖)` as is.
    Raw,
    /// Divide by the variance of a unit 3-dof chi variable, so isotropic
    /// Gaussian displacements recover their per-axis variance.
    #[default]
    Chi3,
}

impl Calibration {
    pub fn factor(self) -> f64 {
        match self {
            Calibration::Raw => 1.0,
            Calibration::Chi3 => 1.0 / CHI3_NORM_VARIANCE,
        }
    }
}

impl std::str::FromStr for Calibration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Calibration::Raw),
            "chi3" => Ok(Calibration::Chi3),
            other => Err(Error::invalid(format!("unknown calibration `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseEstimate {
    pub sigma_bar_sq_raw: f64,
    pub sigma_bar_sq: f64,
    pub calibration: f64,
}

impl NoiseEstimate {
    pub fn sigma_bar(&self) -> f64 {
        self.sigma_bar_sq.sqrt()
    }
}

/// Population variance of the score norms, optionally calibrated.
pub fn estimate_noise_variance(scores: &[Point3], calibration: Calibration) -> Result<NoiseEstimate> {
    if scores.len() < 2 {
        return Err(Error::invalid("noise estimation needs at least two score vectors"));
    }
    let n = scores.len() as f64;
    let norms: Vec<f64> = scores.iter().map(|&s| norm(s)).collect();
    let mean = norms.iter().sum::<f64>() / n;
    let raw = norms.iter().map(|&r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let factor = calibration.factor();
    Ok(NoiseEstimate {
        sigma_bar_sq_raw: raw,
        sigma_bar_sq: raw * factor,
        calibration: factor,
    })
}

/// Increasing timesteps `0 = τ_0 < … < τ_L = τ̂` drawn from the training schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptiveSchedule {
    taus: Vec<usize>,
}

impl AdaptiveSchedule {
    /// Builds a schedule from explicit timesteps; they must start at 0 and
    /// strictly increase.
    pub fn from_taus(taus: Vec<usize>) -> Result<Self> {
        if taus.first() != Some(&0) {
            return Err(Error::invalid("schedule must start at timestep 0"));
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("schedule timesteps must strictly increase"));
        }
        Ok(Self { taus })
    }

    /// Interpolates `[0, τ̂]` into `levels` equal steps, rounds each to the
    /// nearest training timestep and drops duplicates.
    pub fn interpolate(schedule: &DiffusionSchedule, tau_hat: usize, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::invalid("L must be at least 1"));
        }
        schedule.check_t(tau_hat)?;
        let mut taus: Vec<usize> = (0..=levels)
            // round(l * τ̂ / L), halves rounded up, in exact integer arithmetic
            .map(|l| (2 * l * tau_hat + levels) / (2 * levels))
            .collect();
        taus.dedup();
        Self::from_taus(taus)
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn tau_hat(&self) -> usize {
        *self.taus.last().expect("schedule is never empty")
    }

    pub fn num_iterations(&self) -> usize {
        self.taus.len() - 1
    }

    /// `(t, t - Δ)` pairs in execution order, from `τ̂` down to 0.
    pub fn iterations(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.taus.windows(2).rev().map(|w| (w[1], w[0]))
    }
}
