//! Patch-wise training of [`ScoreNet`] with two-stage sampling.

use std::fmt::Write as _;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{dot, scale, sub, NeighborIndex, Patch, Point3, PointCloud};
use crate::nn::{Adam, Graph, ModelParams, Var};
use crate::sampler::reverse_step;
use crate::schedule::{DiffusionSchedule, DEFAULT_BETA_T, DEFAULT_STEPS};
use crate::score::{nearest_displacements, points_tensor, tensor_points, timestep_ratio, ScoreNet};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub beta_t: f64,
    pub patch_size: usize,
    /// Highlighted points per patch (`K_p`); only they enter the loss.
    pub mask_size: usize,
    pub lambda: f64,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    pub augment: bool,
    pub scale_range: (f64, f64),
    /// Call the checkpoint hook every this many iterations (0 disables it).
    pub checkpoint_every: usize,
    /// Global gradient-norm limit for Adam; `None` leaves gradients as they are.
    pub max_grad_norm: Option<f64>,
    /// Learning rate at the last iteration, reached by cosine decay from
    /// `lr`; `None` keeps `lr` constant.
    pub final_lr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_t: DEFAULT_BETA_T,
            patch_size: 1000,
            mask_size: 256,
            lambda: 0.99,
            lr: 1e-4,
            iterations: 1000,
            seed: 0,
            augment: true,
            scale_range: (0.8, 1.25),
            checkpoint_every: 0,
            max_grad_norm: None,
            final_lr: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.mask_size == 0 || self.mask_size > self.patch_size {
            return Err(Error::invalid(format!(
                "mask size {} must lie in 1..={}",
                self.mask_size, self.patch_size
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if let Some(lr) = self.final_lr {
            if !(lr > 0.0 && lr <= self.lr) {
                return Err(Error::invalid(format!("final learning rate must lie in (0, lr], got {lr}")));
            }
        }
        if let Some(max) = self.max_grad_norm {
            if !(max > 0.0) {
                return Err(Error::invalid(format!("gradient norm limit must be positive, got {max}")));
            }
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid(format!("bad scale range ({lo}, {hi})")));
        }
        Ok(())
    }

    /// Learning rate for `iteration` (1-based).
    pub fn lr_at(&self, iteration: usize) -> f64 {
        match self.final_lr {
            Some(end) if self.iterations > 1 => {
                let progress = (iteration.saturating_sub(1)) as f64 / (self.iterations - 1) as f64;
                end + 0.5 * (self.lr - end) * (1.0 + (PI * progress.min(1.0)).cos())
            }
            _ => self.lr,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_t)
    }
}

/// `NN(x, clean) - x` for every point of `x`.
pub fn ground_truth_score(x: &[Point3], clean: &PointCloud) -> Result<Vec<Point3>> {
    nearest_displacements(&NeighborIndex::new(clean), x)
}

/// `(1 - λ) / σ̄_t + λ`.
pub fn loss_weight(sigma_bar_t: f64, lambda: f64) -> Result<f64> {
    if !(sigma_bar_t > 0.0) {
        return Err(Error::invalid(format!(
            "loss weight needs sigma_bar_t > 0 (t >= 1), got {sigma_bar_t}"
        )));
    }
    Ok((1.0 - lambda) / sigma_bar_t + lambda)
}

/// Mean over the masked points of `‖w (pred - truth)‖²`.
pub fn loss(pred: &[Point3], truth: &[Point3], mask: &[bool], sigma_bar_t: f64, lambda: f64) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::invalid(format!(
            "loss inputs differ in length: {}, {}, {}",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    let w = loss_weight(sigma_bar_t, lambda)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, q), &m) in pred.iter().zip(truth).zip(mask) {
        if m {
            let d = scale(sub(*p, *q), w);
            total += dot(d, d);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("mask selects no points"));
    }
    Ok(total / count as f64)
}

/// [`loss`] on the tape, for predictions `[n, 3]`.
pub fn masked_loss(
    g: &mut Graph,
    pred: Var,
    truth: &[Point3],
    mask: &[bool],
    sigma_bar_t: f64,
    lambda: f64,
) -> Result<Var> {
    let w = loss_weight(sigma_bar_t, lambda)?;
    let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(Error::invalid("mask selects no points"));
    }
    let truth = g.constant(points_tensor(truth));
    let diff = g.sub(pred, truth)?;
    let picked = g.gather(diff, &rows)?;
    let sq = g.mul(picked, picked)?;
    let total = g.sum(sq)?;
    g.scale(total, w * w / rows.len() as f64)
}

/// One two-stage training example and the network's predictions on it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// Clean patch, centred on its seed point.
    pub patch: Vec<Point3>,
    pub mask: Vec<bool>,
    pub t: usize,
    pub delta: usize,
    pub x_t: Vec<Point3>,
    pub pred_t: Vec<Point3>,
    pub x_prev: Vec<Point3>,
    pub pred_prev: Vec<Point3>,
    pub truth_t: Vec<Point3>,
    pub truth_prev: Vec<Point3>,
}

struct Staged {
    loss: Var,
    sigma_bar_t: f64,
    sample: TrainSample,
}

/// Crop a patch, optionally rotate and scale it, noise it to a random `t`, predict, take a deterministic
/// reverse step of random size with those predictions, predict again, and
/// sum the masked losses of both stages.
fn two_stage<R: Rng + ?Sized>(
    g: &mut Graph,
    params: &ModelParams,
    net: &ScoreNet,
    cloud: &PointCloud,
    index: &NeighborIndex,
    schedule: &DiffusionSchedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Staged> {
    if cloud.len() < config.patch_size {
        return Err(Error::invalid(format!(
            "training shape has {} points, fewer than the patch size {}",
            cloud.len(),
            config.patch_size
        )));
    }
    let seed = rng.random_range(0..cloud.len());
    let crop = Patch::around(index, seed, config.patch_size, config.mask_size)?;
    let center = cloud.points()[seed];
    let mut patch: Vec<Point3> = crop.indices.iter().map(|&i| sub(cloud.points()[i], center)).collect();
    if config.augment {
        // a similarity transform commutes with the nearest-neighbour crop
        patch = augment(&PointCloud::new(patch)?, config.scale_range, rng)?.into_points();
    }
    let clean = NeighborIndex::from_points(patch.clone());

    let t = rng.random_range(1..=schedule.steps());
    let delta = rng.random_range(1..=t);
    let sigma_bar_t = schedule.sigma_bar(t);
    let x_t: Vec<Point3> = patch
        .iter()
        .map(|p| {
            let mut q = *p;
            for c in &mut q {
                let z: f64 = rng.sample(StandardNormal);
                *c += sigma_bar_t * z;
            }
            q
        })
        .collect();

    let pred_t_var = net.forward(g, params, &x_t, &x_t, 1.0)?;
    let pred_t = tensor_points(g.value(pred_t_var));
    let truth_t = nearest_displacements(&clean, &x_t)?;
    // the stage-2 input is data: no gradient flows back through the step
    let x_prev = reverse_step(schedule, &x_t, &pred_t, t, t - delta, 0.0, rng)?;
    let pred_prev_var = net.forward(g, params, &x_prev, &x_t, timestep_ratio(t - delta, t))?;
    let pred_prev = tensor_points(g.value(pred_prev_var));
    let truth_prev = nearest_displacements(&clean, &x_prev)?;

    let l1 = masked_loss(g, pred_t_var, &truth_t, &crop.mask, sigma_bar_t, config.lambda)?;
    let l2 = masked_loss(g, pred_prev_var, &truth_prev, &crop.mask, sigma_bar_t, config.lambda)?;
    let loss = g.add(l1, l2)?;
    Ok(Staged {
        loss,
        sigma_bar_t,
        sample: TrainSample {
            patch,
            mask: crop.mask,
            t,
            delta,
            x_t,
            pred_t,
            x_prev,
            pred_prev,
            truth_t,
            truth_prev,
        },
    })
}

/// Draws one two-stage training example from `clean` with the current network.
pub fn sample_training_step<R: Rng + ?Sized>(
    clean: &PointCloud,
    net: &ScoreNet,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainSample> {
    config.validate()?;
    let schedule = config.schedule()?;
    let index = NeighborIndex::new(clean);
    let mut g = Graph::new();
    Ok(two_stage(&mut g, net.params(), net, clean, &index, &schedule, config, rng)?.sample)
}

/// Uniformly random rotation (from a normalized Gaussian quaternion) and
/// uniform scale in `range`.
pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, range: (f64, f64), rng: &mut R) -> Result<PointCloud> {
    let mut q = [0.0f64; 4];
    let mut len = 0.0;
    while len < 1e-12 {
        for c in &mut q {
            *c = rng.sample(StandardNormal);
        }
        len = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    }
    let [w, x, y, z] = q.map(|c| c / len);
    let rot = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    let s = if range.0 < range.1 { rng.random_range(range.0..=range.1) } else { range.0 };
    let pts = cloud
        .points()
        .iter()
        .map(|p| rot.map(|row| s * dot(row, *p)))
        .collect();
    PointCloud::new(pts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub sigma_bar_t: f64,
    pub t: usize,
    pub delta: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<LossRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,sigma_bar_t,t,delta\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{:e},{:e},{},{}", r.iteration, r.loss, r.sigma_bar_t, r.t, r.delta);
        }
        out
    }

    /// Exponential moving average of the loss, one value per record.
    pub fn ema(&self, decay: f64) -> Vec<f64> {
        let mut acc = None;
        self.records
            .iter()
            .map(|r| {
                let v = match acc {
                    None => r.loss,
                    Some(a) => decay * a + (1.0 - decay) * r.loss,
                };
                acc = Some(v);
                v
            })
            .collect()
    }
}

/// [`train_with`] without a checkpoint hook.
pub fn train(shapes: &[PointCloud], net: &mut ScoreNet, config: &TrainConfig) -> Result<TrainHistory> {
    train_with(shapes, net, config, |_, _| Ok(()))
}

/// Trains `net` in place on random patches of `shapes` with Adam. The hook
/// runs every `checkpoint_every` iterations and after the last one.
pub fn train_with<F>(shapes: &[PointCloud], net: &mut ScoreNet, config: &TrainConfig, mut on_checkpoint: F) -> Result<TrainHistory>
where
    F: FnMut(usize, &ScoreNet) -> Result<()>,
{
    config.validate()?;
    if shapes.is_empty() {
        return Err(Error::invalid("training needs at least one shape"));
    }
    let schedule = config.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(net.params(), config.lr);
    adam.max_grad_norm = config.max_grad_norm;
    let indices: Vec<NeighborIndex> = shapes.iter().map(NeighborIndex::new).collect();
    let mut history = TrainHistory::default();

    for iteration in 1..=config.iterations {
        let at = |e: Error| match e {
            Error::Numerical(m) => Error::Numerical(format!("iteration {iteration}: {m}")),
            other => other,
        };
        let which = rng.random_range(0..shapes.len());
        let mut g = Graph::new();
        let staged = two_stage(
            &mut g,
            net.params(),
            net,
            &shapes[which],
            &indices[which],
            &schedule,
            config,
            &mut rng,
        )
        .map_err(at)?;
        let value = g.value(staged.loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("iteration {iteration}: loss is {value}")));
        }
        let grads = g.backward(staged.loss).map_err(at)?;
        adam.lr = config.lr_at(iteration);
        adam.step(net.params_mut(), &grads)?;
        if net.params().ids().any(|id| !net.params().get(id).is_finite()) {
            return Err(Error::Numerical(format!("iteration {iteration}: parameters became non-finite")));
        }
        history.records.push(LossRecord {
            iteration,
            loss: value,
            sigma_bar_t: staged.sigma_bar_t,
            t: staged.sample.t,
            delta: staged.sample.delta,
        });
        let due = config.checkpoint_every > 0 && iteration % config.checkpoint_every == 0;
        if due || iteration == config.iterations {
            on_checkpoint(iteration, net)?;
        }
    }
    Ok(history)
}

/// Scalar loss of both stages for a fixed sample, recomputed with `lambda`.
pub fn sample_loss(sample: &TrainSample, sigma_bar_t: f64, lambda: f64) -> Result<f64> {
    Ok(loss(&sample.pred_t, &sample.truth_t, &sample.mask, sigma_bar_t, lambda)?
        + loss(&sample.pred_prev, &sample.truth_prev, &sample.mask, sigma_bar_t, lambda)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::NetHyper;

    fn sphere(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                let v: Point3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                scale(v, 1.0 / dot(v, v).sqrt())
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    fn tiny() -> (ScoreNet, TrainConfig) {
        let hyper = NetHyper {
            width: 8,
            graph_layers: 2,
            graph_k: 6,
            fusion_k: 8,
            residual_blocks: 2,
            ..NetHyper::default()
        };
        let config = TrainConfig {
            patch_size: 32,
            mask_size: 8,
            iterations: 5,
            lr: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        (ScoreNet::new(hyper, 1).unwrap(), config)
    }

    #[test]
    fn cosine_learning_rate_runs_from_lr_to_final() {
        let c = TrainConfig {
            lr: 1e-3,
            final_lr: Some(1e-5),
            iterations: 101,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(1), 1e-3);
        assert!((c.lr_at(51) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-18);
        assert!((c.lr_at(101) - 1e-5).abs() < 1e-18);
        let constant = TrainConfig { final_lr: None, ..c.clone() };
        assert_eq!(constant.lr_at(77), 1e-3);
        assert!(TrainConfig { final_lr: Some(2e-3), ..c }.validate().is_err());
    }

    #[test]
    fn weight_matches_hand_value() {
        assert!((loss_weight(0.01, 0.99).unwrap() - 1.99).abs() < 1e-12);
        assert_eq!(loss_weight(0.3, 1.0).unwrap(), 1.0);
        assert!(loss_weight(0.0, 0.5).is_err());
    }

    #[test]
    fn loss_scales_plain_mse() {
        let pred = vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [5.0, 5.0, 5.0]];
        let truth = vec![[0.0; 3]; 3];
        let mask = vec![true, true, false];
        // masked mean of squared norms = (1 + 4) / 2
        assert_eq!(loss(&pred, &truth, &mask, 0.2, 1.0).unwrap(), 2.5);
        let l = loss(&pred, &truth, &mask, 0.01, 0.99).unwrap();
        assert!((l - 1.99f64.powi(2) * 2.5).abs() < 1e-12);
        assert_eq!(loss(&truth, &truth, &mask, 0.01, 0.99).unwrap(), 0.0);
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let pred = vec![[1.0, -1.0, 0.5], [0.2, 2.0, 0.0], [5.0, 5.0, 5.0]];
        let truth = vec![[0.1, 0.0, 0.3], [0.0, 0.0, -1.0], [0.0; 3]];
        let mask = vec![true, false, true];
        let mut g = Graph::new();
        let p = g.constant(points_tensor(&pred));
        let l = masked_loss(&mut g, p, &truth, &mask, 0.03, 0.9).unwrap();
        let plain = loss(&pred, &truth, &mask, 0.03, 0.9).unwrap();
        assert!((g.value(l).item() - plain).abs() < 1e-12 * plain);
    }

    #[test]
    fn augment_preserves_shape_up_to_scale() {
        let s = sphere(50, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = augment(&s, (0.8, 1.25), &mut rng).unwrap();
        let r0 = dot(a.points()[0], a.points()[0]).sqrt();
        assert!((0.8..=1.25).contains(&r0));
        for p in a.points() {
            assert!((dot(*p, *p).sqrt() - r0).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_has_consistent_shapes() {
        let (net, config) = tiny();
        let s = sphere(200, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sample = sample_training_step(&s, &net, &config, &mut rng).unwrap();
        assert_eq!(sample.patch.len(), 32);
        assert_eq!(sample.mask.iter().filter(|&&m| m).count(), 8);
        assert!(1 <= sample.delta && sample.delta <= sample.t);
        assert_eq!(sample.pred_prev.len(), 32);
    }

    #[test]
    fn training_is_reproducible_and_calls_the_hook() {
        let (net, config) = tiny();
        let shapes = [sphere(150, 6)];
        let mut a = net.clone();
        let mut calls = Vec::new();
        let ha = train_with(&shapes, &mut a, &config, |it, _| {
            calls.push(it);
            Ok(())
        })
        .unwrap();
        let mut b = net.clone();
        let hb = train(&shapes, &mut b, &config).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.params(), b.params());
        assert_eq!(calls, vec![5]);
        assert!(ha.to_csv().starts_with("iteration,loss,sigma_bar_t,t,delta\n1,"));
    }
}
