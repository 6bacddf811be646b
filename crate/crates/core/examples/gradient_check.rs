//! Finite-difference check of the network's backward pass on the full
//! two-stage training loss.
//!
//! cargo run --release --example gradient_check -- [seed]

use pointdiff::datagen::{sample_shape, Shape, ShapeSpec};
use pointdiff::nn::check_gradients;
use pointdiff::score::{NetHyper, ScoreNet};
use pointdiff::trainer::{masked_loss, sample_training_step, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pointdiff::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let hyper = NetHyper { width: 6, graph_layers: 2, graph_k: 4, fusion_k: 5, residual_blocks: 2, ..NetHyper::default() };
    let net = ScoreNet::new(hyper, seed)?;
    let clean = sample_shape(&ShapeSpec { shape: Shape::DEFAULT_TORUS, n: 300, seed })?;
    let config = TrainConfig { patch_size: 16, mask_size: 6, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = sample_training_step(&clean, &net, &config, &mut rng)?;
    let sigma_bar = config.schedule()?.sigma_bar(sample.t);
    let ratio = (sample.t - sample.delta) as f64 / sample.t as f64;
    println!("t = {}, delta = {}, sigma_bar = {sigma_bar:.5}", sample.t, sample.delta);

    let check = check_gradients(net.params(), 1e-5, 1e-8, |g, p| {
        let first = net.forward(g, p, &sample.x_t, &sample.x_t, 1.0)?;
        let second = net.forward(g, p, &sample.x_prev, &sample.x_t, ratio)?;
        let l1 = masked_loss(g, first, &sample.truth_t, &sample.mask, sigma_bar, config.lambda)?;
        let l2 = masked_loss(g, second, &sample.truth_prev, &sample.mask, sigma_bar, config.lambda)?;
        g.add(l1, l2)
    })?;
    println!(
        "checked {} parameters, skipped {} near ReLU kinks, max relative error {:.3e}",
        check.checked, check.skipped_kinks, check.max_rel_error
    );
    Ok(())
}
