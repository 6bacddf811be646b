use super::graph::Gradients;
use super::params::ModelParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction and optional global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients whose global L2 norm exceeds this are rescaled to it.
    pub max_grad_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::invalid("optimizer state does not match the parameter set"));
        }
        let ids: Vec<_> = params.ids().collect();
        for &id in &ids {
            if let Some(g) = grads.get(id) {
                if g.shape() != params.get(id).shape() {
                    return Err(Error::Shape {
                        op: "adam",
                        left: params.get(id).shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
            }
        }
        let clip = match self.max_grad_norm {
            Some(max) => {
                let norm = ids
                    .iter()
                    .filter_map(|&id| grads.get(id))
                    .flat_map(|g| g.data().iter())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in ids {
            let i = id.index();
            let g = grads.get_or_zeros(params, id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.get_mut(id).data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                let gk = gk * clip;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
