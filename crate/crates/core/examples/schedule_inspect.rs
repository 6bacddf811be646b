//! Print the training noise schedule, where a few noise levels land on it and
//! the timesteps an adaptive run would visit.
//!
//! cargo run --release --example schedule_inspect -- [levels]

use pointdiff::sampler::{fixed_schedule, iteration_plan, SamplerMode};
use pointdiff::schedule::{AdaptiveSchedule, DiffusionSchedule};

fn main() -> pointdiff::Result<()> {
    let levels: usize = std::env::args().nth(1).map_or(5, |s| s.parse().expect("levels"));
    let s = DiffusionSchedule::default();

    println!("{:>5} {:>12} {:>12} {:>12}", "t", "beta", "alpha_bar", "sigma_bar");
    for t in [0, 1, 10, 100, 250, 500, 750, 1000] {
        println!("{t:>5} {:>12.4e} {:>12.9} {:>12.6}", s.beta(t), s.alpha_bar(t), s.sigma_bar(t));
    }

    println!("\n{:>8} {:>6} {:>12}  steps", "sigma", "tau", "sigma_bar");
    for sigma in [0.001, 0.005, 0.01, 0.02, 0.03, 0.05] {
        let tau = s.match_timestep(sigma * sigma);
        let plan = AdaptiveSchedule::interpolate(&s, tau, levels)?;
        println!("{sigma:>8} {tau:>6} {:>12.6}  {:?}", s.sigma_bar(tau), plan.taus());
    }

    let fixed = fixed_schedule(&s, 0.99, 0.95, 5)?;
    println!("\nfixed schedule (0.99, 0.95, 5): {:?}", fixed.taus());
    let one = iteration_plan(&s, 600, SamplerMode::OneStep, levels)?;
    println!("one-step plan from 600: {:?}", one.iterations().collect::<Vec<_>>());
    Ok(())
}
