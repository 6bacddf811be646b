//! Train a small score network on three synthetic shapes, then use it to
//! denoise a held-out noisy sphere.
//!
//! cargo run --release --example train_network -- [iterations] [lr] [lambda]

use std::time::Instant;

use pointdiff::datagen::{apply_noise, gaussian, sample_shape, Shape, ShapeSpec};
use pointdiff::metrics::chamfer;
use pointdiff::sampler::{denoise, SamplerConfig};
use pointdiff::schedule::DiffusionSchedule;
use pointdiff::score::{NetHyper, ScoreNet};
use pointdiff::trainer::{train, TrainConfig};

const POINTS: usize = 30_000;

fn main() -> pointdiff::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(2000, |s| s.parse().expect("iterations"));
    let lr: f64 = args.next().map_or(1e-3, |s| s.parse().expect("lr"));
    let lambda: f64 = args.next().map_or(1.0, |s| s.parse().expect("lambda"));

    let shapes = [Shape::Sphere, Shape::UNIT_CUBE, Shape::DEFAULT_TORUS]
        .iter()
        .enumerate()
        .map(|(i, &shape)| {
            sample_shape(&ShapeSpec {
                shape,
                n: POINTS,
                seed: i as u64,
            })
            .map(|c| c.normalize_unit_sphere().0)
        })
        .collect::<pointdiff::Result<Vec<_>>>()?;
    let hyper = NetHyper {
        width: 16,
        ..NetHyper::default()
    };
    let config = TrainConfig {
        patch_size: 64,
        mask_size: 16,
        iterations,
        lr,
        final_lr: Some(lr / 100.0),
        lambda,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut net = ScoreNet::new(hyper, 1)?;
    let start = Instant::now();
    let history = train(&shapes, &mut net, &config)?;
    let ema = history.ema(0.98);
    println!("trained {iterations} iterations in {:.1}s", start.elapsed().as_secs_f64());
    for i in [0, 99, iterations / 4, iterations / 2, iterations - 1] {
        if let Some(v) = ema.get(i) {
            println!("  loss ema at {:>5}: {v:.4e}", i + 1);
        }
    }

    let clean = sample_shape(&ShapeSpec {
        shape: Shape::Sphere,
        n: POINTS,
        seed: 99,
    })?;
    let noisy = apply_noise(&clean, &gaussian(0.02, 7))?;
    let sampler = SamplerConfig {
        patch_size: 64,
        ..SamplerConfig::default()
    };
    let start = Instant::now();
    let (out, report) = denoise(&noisy, &net, &DiffusionSchedule::default(), &sampler)?;
    println!("denoised in {:.1}s", start.elapsed().as_secs_f64());
    print!("{report}");
    println!("chamfer noisy    {:.4e}", chamfer(&noisy, &clean)?);
    println!("chamfer denoised {:.4e}", chamfer(&out, &clean)?);
    Ok(())
}
