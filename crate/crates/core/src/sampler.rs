//! Reverse diffusion steps and the patch-wise iterative denoising driver.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{extract_patches, norm, stitch_patches, sub, CoverageMode, NeighborIndex, Patch, Point3, PointCloud};
use crate::schedule::{estimate_noise_variance, AdaptiveSchedule, Calibration, DiffusionSchedule, NoiseEstimate};
use crate::score::{Frame, ScoreProvider};

/// Coefficients of one reverse step from `t` to `t_minus_delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub t: usize,
    pub t_minus_delta: usize,
    /// `Σ = σ̄²_{t-Δ} (ᾱ_{t-Δ} - ᾱ_t) / ((1 - ᾱ_t) ᾱ_{t-Δ})`.
    pub sigma_cap: f64,
    /// `Σ_η = η Σ`, the variance of the injected noise.
    pub sigma_eta: f64,
    /// `m`, the share of the score left unapplied.
    pub m: f64,
    /// `1 - m`, the multiplier of the score.
    pub mu_coeff: f64,
}

fn check_step(schedule: &DiffusionSchedule, t: usize, t_minus_delta: usize) -> Result<()> {
    if t_minus_delta >= t || t > schedule.steps() {
        return Err(Error::invalid(format!(
            "reverse step needs 0 <= t - delta < t <= {}, got t = {t}, t - delta = {t_minus_delta}",
            schedule.steps()
        )));
    }
    Ok(())
}

pub fn step_coefficients(
    schedule: &DiffusionSchedule,
    t: usize,
    t_minus_delta: usize,
    eta: f64,
) -> Result<StepCoefficients> {
    check_step(schedule, t, t_minus_delta)?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("eta must be a non-negative number, got {eta}")));
    }
    let s = t_minus_delta;
    let (ab_t, ab_s) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
    let (c_t, c_s) = (schedule.one_minus_alpha_bar(t), schedule.one_minus_alpha_bar(s));
    // ᾱ_s - ᾱ_t from the accumulated complements keeps the difference exact
    let sigma_cap = schedule.sigma_bar_sq(s) * (c_t - c_s) / (c_t * ab_s);
    let sigma_eta = eta * sigma_cap;
    let arg = (c_s - ab_s * sigma_eta) * ab_t / (c_t * ab_s);
    if !(arg >= 0.0) {
        return Err(Error::Numerical(format!(
            "negative variance term {arg:e} in reverse step (t = {t}, delta = {}, eta = {eta})",
            t - s
        )));
    }
    let m = arg.sqrt();
    Ok(StepCoefficients {
        t,
        t_minus_delta,
        sigma_cap,
        sigma_eta,
        m,
        mu_coeff: 1.0 - m,
    })
}

/// Score multiplier of the deterministic step,
/// `1 - sqrt((1 - ᾱ_{t-Δ}) ᾱ_t / ((1 - ᾱ_t) ᾱ_{t-Δ}))`.
pub fn deterministic_mu_coeff(schedule: &DiffusionSchedule, t: usize, t_minus_delta: usize) -> Result<f64> {
    check_step(schedule, t, t_minus_delta)?;
    let (ab_t, ab_s) = (schedule.alpha_bar(t), schedule.alpha_bar(t_minus_delta));
    let (c_t, c_s) = (schedule.one_minus_alpha_bar(t), schedule.one_minus_alpha_bar(t_minus_delta));
    Ok(1.0 - (c_s * ab_t / (c_t * ab_s)).sqrt())
}

/// `x^{t-Δ} = x^t + (1 - m) s + z`, `z ~ N(0, Σ_η I)`. No randomness is drawn
/// when `Σ_η = 0`.
pub fn reverse_step<R: Rng + ?Sized>(
    schedule: &DiffusionSchedule,
    x_t: &[Point3],
    scores: &[Point3],
    t: usize,
    t_minus_delta: usize,
    eta: f64,
    rng: &mut R,
) -> Result<Vec<Point3>> {
    if scores.len() != x_t.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} points",
            scores.len(),
            x_t.len()
        )));
    }
    let c = step_coefficients(schedule, t, t_minus_delta, eta)?;
    let sd = c.sigma_eta.sqrt();
    Ok(x_t
        .iter()
        .zip(scores)
        .map(|(x, s)| {
            let mut y = [0.0; 3];
            for a in 0..3 {
                y[a] = x[a] + c.mu_coeff * s[a];
                if sd > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    y[a] += sd * z;
                }
            }
            y
        })
        .collect())
}

/// The generative DDPM update
/// `x^{t-1} = (x^t - β_t / sqrt(1 - ᾱ_t) s) / sqrt(α_t) + z`, `z ~ N(0, β_t I)`,
/// which rescales the cloud every step. Passing `None` for `rng` drops `z`.
pub fn gdm_reverse_step(
    schedule: &DiffusionSchedule,
    x_t: &[Point3],
    scores: &[Point3],
    t: usize,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Vec<Point3>> {
    check_step(schedule, t, t.wrapping_sub(1))?;
    if scores.len() != x_t.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} points",
            scores.len(),
            x_t.len()
        )));
    }
    let beta = schedule.beta(t);
    let k = beta / schedule.one_minus_alpha_bar(t).sqrt();
    let inv = 1.0 / schedule.alpha(t).sqrt();
    let sd = beta.sqrt();
    Ok(x_t
        .iter()
        .zip(scores)
        .map(|(x, s)| {
            let mut y = [0.0; 3];
            for a in 0..3 {
                y[a] = (x[a] - k * s[a]) * inv;
                if let Some(r) = rng.as_deref_mut() {
                    if sd > 0.0 {
                        let z: f64 = r.sample(StandardNormal);
                        y[a] += sd * z;
                    }
                }
            }
            y
        })
        .collect())
}

/// A schedule fixed in advance rather than adapted to the input: noise
/// levels `α · decay^i · σ̄_T` for `i = 0..steps`, each mapped to the nearest
/// training timestep, followed by a final step to 0.
pub fn fixed_schedule(schedule: &DiffusionSchedule, alpha: f64, decay: f64, steps: usize) -> Result<AdaptiveSchedule> {
    if !(alpha > 0.0 && alpha <= 1.0) || !(decay > 0.0 && decay <= 1.0) || steps == 0 {
        return Err(Error::invalid(format!(
            "fixed schedule needs 0 < alpha <= 1, 0 < decay <= 1, steps >= 1; got ({alpha}, {decay}, {steps})"
        )));
    }
    let top = schedule.sigma_bar(schedule.steps());
    let mut taus: Vec<usize> = (0..steps)
        .map(|i| {
            let level = alpha * decay.powi(i as i32) * top;
            schedule.match_timestep(level * level)
        })
        .collect();
    taus.push(0);
    taus.sort_unstable();
    taus.dedup();
    AdaptiveSchedule::from_taus(taus)
}

/// How the iteration schedule is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplerMode {
    /// `L` aligned steps from the estimated `τ̂` down to 0.
    Adaptive,
    /// A preset geometric schedule, independent of the input.
    Fixed { alpha: f64, decay: f64, steps: usize },
    /// A single step from `τ̂` straight to 0.
    OneStep,
    /// Unit steps from `τ̂` to 0 with the generative DDPM update.
    Gdm,
}

impl SamplerMode {
    pub const DEFAULT_FIXED: SamplerMode = SamplerMode::Fixed {
        alpha: 0.99,
        decay: 0.95,
        steps: 5,
    };
}

impl FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "fixed" => Ok(Self::DEFAULT_FIXED),
            "onestep" => Ok(Self::OneStep),
            "gdm" => Ok(Self::Gdm),
            _ => Err(Error::invalid(format!(
                "unknown mode `{s}` (expected adaptive, fixed, onestep or gdm)"
            ))),
        }
    }
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Adaptive => f.write_str("adaptive"),
            Self::Fixed { alpha, decay, steps } => write!(f, "fixed(alpha={alpha}, decay={decay}, steps={steps})"),
            Self::OneStep => f.write_str("onestep"),
            Self::Gdm => f.write_str("gdm"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub eta: f64,
    pub mode: SamplerMode,
    /// Number of interpolation levels `L` of the adaptive schedule.
    pub levels: usize,
    pub seed: u64,
    pub patch_size: usize,
    pub coverage: CoverageMode,
    pub calibration: Calibration,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
    /// Normalize to the unit sphere before denoising (and undo it after).
    pub normalize: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            eta: 0.0,
            mode: SamplerMode::Adaptive,
            levels: 5,
            seed: 0,
            patch_size: 1000,
            coverage: CoverageMode::Full,
            calibration: Calibration::Chi3,
            jobs: None,
            normalize: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.levels == 0 {
            return Err(Error::invalid("L must be at least 1"));
        }
        if self.patch_size == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        if self.jobs == Some(0) {
            return Err(Error::invalid("jobs must be positive"));
        }
        Ok(())
    }
}

/// Everything the driver learned about one run.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseReport {
    pub estimate: NoiseEstimate,
    pub tau_hat: usize,
    pub schedule: AdaptiveSchedule,
    pub mode: SamplerMode,
    pub patches: usize,
    /// Scale of the unit-sphere normalization (1 when disabled); `σ̂` and the
    /// displacements are in normalized units.
    pub normalization_scale: f64,
    /// `(t, t - Δ, mean |displacement|)` per iteration over all patch points.
    pub steps: Vec<(usize, usize, f64)>,
}

impl DenoiseReport {
    pub fn sigma_hat(&self) -> f64 {
        self.estimate.sigma_bar()
    }

    /// `σ̂` in the input's coordinates.
    pub fn sigma_hat_world(&self) -> f64 {
        self.sigma_hat() * self.normalization_scale
    }
}

impl fmt::Display for DenoiseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sigma_hat = {:.9e}", self.sigma_hat())?;
        writeln!(f, "sigma_hat_world = {:.9e}", self.sigma_hat_world())?;
        writeln!(f, "sigma_bar_sq = {:.9e}", self.estimate.sigma_bar_sq)?;
        writeln!(f, "sigma_bar_sq_raw = {:.9e}", self.estimate.sigma_bar_sq_raw)?;
        writeln!(f, "calibration = {:.9}", self.estimate.calibration)?;
        writeln!(f, "normalization_scale = {:.9e}", self.normalization_scale)?;
        writeln!(f, "tau_hat = {}", self.tau_hat)?;
        writeln!(f, "mode = {}", self.mode)?;
        let taus: Vec<String> = self.schedule.taus().iter().map(usize::to_string).collect();
        writeln!(f, "schedule = {}", taus.join(" "))?;
        writeln!(f, "patches = {}", self.patches)?;
        writeln!(f, "iterations = {}", self.steps.len())?;
        for (i, (t, s, d)) in self.steps.iter().enumerate() {
            writeln!(f, "step {} = {t} -> {s} mean_displacement {d:.9e}", i + 1)?;
        }
        Ok(())
    }
}

struct Prepared {
    cloud: PointCloud,
    scale: f64,
    to_world: crate::geometry::Normalization,
    patches: Vec<Patch>,
}

impl Prepared {
    fn new(cloud: &PointCloud, config: &SamplerConfig) -> Result<Self> {
        config.validate()?;
        let (work, to_world) = if config.normalize {
            cloud.normalize_unit_sphere()
        } else {
            (cloud.clone(), crate::geometry::Normalization::IDENTITY)
        };
        let index = NeighborIndex::new(&work);
        let patches = extract_patches(&work, &index, config.patch_size, config.coverage)?;
        Ok(Self {
            cloud: work,
            scale: to_world.scale,
            to_world,
            patches,
        })
    }

    /// Patch points relative to the patch center, with the frame that maps
    /// them back to the caller's coordinates.
    fn local(&self, patch: &Patch) -> (Vec<Point3>, Point3, Frame) {
        let pts = self.cloud.points();
        let center = pts[patch.center_index];
        let local = patch.indices.iter().map(|&i| sub(pts[i], center)).collect();
        let frame = Frame {
            offset: self.to_world.inverse(center),
            scale: self.to_world.scale,
        };
        (local, center, frame)
    }

    fn estimate<P: ScoreProvider + ?Sized>(
        &self,
        provider: &P,
        schedule: &DiffusionSchedule,
        calibration: Calibration,
    ) -> Result<NoiseEstimate> {
        let t = schedule.steps();
        let per_patch = self
            .patches
            .par_iter()
            .map(|patch| {
                let (local, _, frame) = self.local(patch);
                provider.scores(&local, &local, t, t, frame)
            })
            .collect::<Result<Vec<_>>>()?;
        estimate_noise_variance(&per_patch.concat(), calibration)
    }
}

/// The timesteps visited from `tau_hat` down to 0 under `mode`.
pub fn iteration_plan(
    schedule: &DiffusionSchedule,
    tau_hat: usize,
    mode: SamplerMode,
    levels: usize,
) -> Result<AdaptiveSchedule> {
    match mode {
        SamplerMode::Adaptive => AdaptiveSchedule::interpolate(schedule, tau_hat, levels),
        SamplerMode::Fixed { alpha, decay, steps } => fixed_schedule(schedule, alpha, decay, steps),
        SamplerMode::OneStep => AdaptiveSchedule::from_taus(if tau_hat == 0 { vec![0] } else { vec![0, tau_hat] }),
        SamplerMode::Gdm => AdaptiveSchedule::from_taus((0..=tau_hat).collect()),
    }
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start {n} worker threads: {e}")))?
            .install(f),
    }
}

/// Noise estimate and matched timestep for `cloud`, computed exactly as
/// [`denoise`] does before iterating.
pub fn estimate_schedule<P: ScoreProvider + ?Sized>(
    cloud: &PointCloud,
    provider: &P,
    schedule: &DiffusionSchedule,
    config: &SamplerConfig,
) -> Result<(NoiseEstimate, usize)> {
    with_pool(config.jobs, || {
        let prep = Prepared::new(cloud, config)?;
        let est = prep.estimate(provider, schedule, config.calibration)?;
        Ok((est, schedule.match_timestep(est.sigma_bar_sq)))
    })
}

/// Patch-wise iterative denoising: estimate the noise level from scores on
/// the whole cloud, pick the matching timestep, build the iteration schedule,
/// run the reverse steps on every patch independently, and stitch.
pub fn denoise<P: ScoreProvider + ?Sized>(
    cloud: &PointCloud,
    provider: &P,
    schedule: &DiffusionSchedule,
    config: &SamplerConfig,
) -> Result<(PointCloud, DenoiseReport)> {
    with_pool(config.jobs, || denoise_inner(cloud, provider, schedule, config))
}

fn denoise_inner<P: ScoreProvider + ?Sized>(
    cloud: &PointCloud,
    provider: &P,
    schedule: &DiffusionSchedule,
    config: &SamplerConfig,
) -> Result<(PointCloud, DenoiseReport)> {
    let prep = Prepared::new(cloud, config)?;
    let estimate = prep.estimate(provider, schedule, config.calibration)?;
    let tau_hat = schedule.match_timestep(estimate.sigma_bar_sq);
    let plan = iteration_plan(schedule, tau_hat, config.mode, config.levels)?;
    let t_start = plan.tau_hat();
    let iterations: Vec<(usize, usize)> = plan.iterations().collect();

    let results = prep
        .patches
        .par_iter()
        .enumerate()
        .map(|(ordinal, patch)| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(ordinal as u64);
            let (original, center, frame) = prep.local(patch);
            let mut x = original.clone();
            let mut moved = Vec::with_capacity(iterations.len());
            for &(t, s) in &iterations {
                let scores = provider.scores(&x, &original, t, t_start, frame)?;
                let next = if config.mode == SamplerMode::Gdm {
                    gdm_reverse_step(schedule, &x, &scores, t, Some(&mut rng as &mut dyn RngCore))?
                } else {
                    reverse_step(schedule, &x, &scores, t, s, config.eta, &mut rng)?
                };
                moved.push(next.iter().zip(&x).map(|(a, b)| norm(sub(*a, *b))).sum::<f64>());
                x = next;
            }
            let restored: Vec<Point3> = x.iter().map(|p| crate::geometry::add(*p, center)).collect();
            Ok(((patch.clone(), restored), moved))
        })
        .collect::<Result<Vec<_>>>()?;

    let total_points: usize = prep.patches.iter().map(Patch::len).sum();
    let steps = iterations
        .iter()
        .enumerate()
        .map(|(i, &(t, s))| {
            let sum: f64 = results.iter().map(|r| r.1[i]).sum();
            (t, s, sum / total_points as f64)
        })
        .collect();
    let stitched_input: Vec<_> = results.into_iter().map(|r| r.0).collect();
    let stitched = stitch_patches(&prep.cloud, &stitched_input)?;
    let out = prep.to_world.invert(&stitched);
    let report = DenoiseReport {
        estimate,
        tau_hat,
        schedule: plan,
        mode: config.mode,
        patches: prep.patches.len(),
        normalization_scale: prep.scale,
        steps,
    };
    Ok((out, report))
}
