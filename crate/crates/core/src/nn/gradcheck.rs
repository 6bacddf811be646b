use super::graph::{Graph, Var};
use super::params::ModelParams;
use crate::error::{Error, Result};

/// Outcome of a central finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because every probe step crossed a ReLU or max-pool
    /// switch, where the function is not differentiable.
    pub skipped_kinks: usize,
}

/// Compares the tape gradient of the scalar built by `build` against central
/// differences with step `h`, for every scalar of every parameter.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`. If a probe crosses a
/// kink the step is shrunk (up to twice) before the entry is skipped.
pub fn check_gradients<F>(params: &ModelParams, h: f64, floor: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ModelParams) -> Result<Var>,
{
    let eval = |p: &ModelParams| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let out = build(&mut g, p)?;
        Ok((g.value(out).item(), g.kink_signature()))
    };

    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let base_sig = g.kink_signature();
    let grads = g.backward(loss)?;

    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for id in params.ids() {
        let analytic = grads.get_or_zeros(params, id);
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            let mut numeric = None;
            let mut step = h;
            for _ in 0..3 {
                probe.get_mut(id).data_mut()[k] = orig + step;
                let (fp, sp) = eval(&probe)?;
                probe.get_mut(id).data_mut()[k] = orig - step;
                let (fm, sm) = eval(&probe)?;
                probe.get_mut(id).data_mut()[k] = orig;
                if sp == base_sig && sm == base_sig {
                    numeric = Some((fp - fm) / (2.0 * step));
                    break;
                }
                step *= 0.1;
            }
            let Some(n) = numeric else {
                report.skipped_kinks += 1;
                continue;
            };
            let a = analytic.data()[k];
            if !a.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for {}", params.name(id))));
            }
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
