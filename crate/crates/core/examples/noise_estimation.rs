//! Estimate the noise level of synthetic clouds from exact scores, with and
//! without the chi calibration, and compare it to the true standard deviation.
//!
//! cargo run --release --example noise_estimation -- [n]

use pointdiff::datagen::{apply_noise, gaussian, sample_shape, Shape, ShapeSpec};
use pointdiff::sampler::{estimate_schedule, SamplerConfig};
use pointdiff::schedule::{Calibration, DiffusionSchedule};
use pointdiff::score::OracleScore;

fn main() -> pointdiff::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(50_000, |s| s.parse().expect("n"));
    let schedule = DiffusionSchedule::default();

    println!("{:<8} {:>6} {:>10} {:>10} {:>6}", "shape", "sigma", "raw/sigma", "chi3/sigma", "tau");
    for (seed, shape) in [Shape::Sphere, Shape::UNIT_CUBE, Shape::DEFAULT_TORUS].into_iter().enumerate() {
        let (clean, _) = sample_shape(&ShapeSpec { shape, n, seed: seed as u64 })?.normalize_unit_sphere();
        let oracle = OracleScore::new(&clean);
        for sigma in [0.005, 0.01, 0.02, 0.03] {
            let noisy = apply_noise(&clean, &gaussian(sigma, 7 + seed as u64))?;
            let scale = noisy.normalize_unit_sphere().1.scale;
            let mut ratios = Vec::new();
            let mut tau = 0;
            for calibration in [Calibration::Raw, Calibration::Chi3] {
                let config = SamplerConfig { calibration, ..SamplerConfig::default() };
                let (est, t) = estimate_schedule(&noisy, &oracle, &schedule, &config)?;
                ratios.push(est.sigma_bar() * scale / sigma);
                tau = t;
            }
            println!(
                "{:<8} {sigma:>6} {:>10.3} {:>10.3} {tau:>6}",
                shape.to_string().split(':').next().unwrap_or(""),
                ratios[0],
                ratios[1]
            );
        }
    }
    Ok(())
}
