//! Compare the reverse samplers with the exact score: adaptive, one-step,
//! fixed and the generative DDPM update, plus stochastic sampling via eta.
//!
//! cargo run --release --example sampler_ablations -- [sigma]

use pointdiff::datagen::{apply_noise, gaussian, sample_shape, Shape, ShapeSpec};
use pointdiff::metrics::chamfer;
use pointdiff::sampler::{denoise, SamplerConfig, SamplerMode};
use pointdiff::schedule::DiffusionSchedule;
use pointdiff::score::OracleScore;

fn main() -> pointdiff::Result<()> {
    let sigma: f64 = std::env::args().nth(1).map_or(0.02, |s| s.parse().expect("sigma"));
    let schedule = DiffusionSchedule::default();
    let clean = sample_shape(&ShapeSpec { shape: Shape::DEFAULT_TORUS, n: 10_000, seed: 0 })?;
    let noisy = apply_noise(&clean, &gaussian(sigma, 1))?;
    let oracle = OracleScore::new(&clean);
    println!("noisy chamfer {:.4e}", chamfer(&noisy, &clean)?);

    let fixed = SamplerMode::Fixed { alpha: 0.99, decay: 0.95, steps: 5 };
    let runs = [
        ("adaptive", SamplerMode::Adaptive, 0.0),
        ("adaptive eta=0.5", SamplerMode::Adaptive, 0.5),
        ("adaptive eta=1", SamplerMode::Adaptive, 1.0),
        ("one-step", SamplerMode::OneStep, 0.0),
        ("fixed", fixed, 0.0),
        ("gdm", SamplerMode::Gdm, 0.0),
    ];
    println!("{:<18} {:>12} {:>6} {:>6}", "sampler", "chamfer", "tau", "iters");
    for (name, mode, eta) in runs {
        let config = SamplerConfig { mode, eta, seed: 3, ..SamplerConfig::default() };
        let (out, report) = denoise(&noisy, &oracle, &schedule, &config)?;
        println!(
            "{name:<18} {:>12.4e} {:>6} {:>6}",
            chamfer(&out, &clean)?,
            report.tau_hat,
            report.steps.len()
        );
    }
    Ok(())
}
