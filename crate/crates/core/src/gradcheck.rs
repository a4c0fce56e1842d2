//! Finite-difference check of the whole first-stage computation: pixels
//! through the frozen image encoder, the query encoder and the decoder loss.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::CaptionModel;
use crate::nn::{pull_grads, visit_params, visit_params_mut, zero_grads};
use crate::scene::{generate, Role};
use crate::tensor::{central_difference, relative_error, Graph, Tensor};
use crate::train::stream;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    /// Pixel-patch entries checked.
    pub inputs: usize,
    /// Trainable weights checked.
    pub weights: usize,
    pub max_rel_error: f64,
    /// Where the largest error occurred, with the analytic and numeric values.
    pub worst_at: String,
    pub worst_pair: (f64, f64),
}

struct Case {
    model: CaptionModel,
    patches: Tensor,
    instr: Vec<usize>,
    target: Vec<usize>,
}

impl Case {
    fn new(seed: u64) -> Result<Self> {
        let cfg = ModelConfig::tiny();
        let vocab = Vocab::synthetic();
        let mut rng = stream(seed, 0);
        let base = CaptionModel::random_base(&cfg, &mut rng)?;
        let mut model = CaptionModel::stage1(&cfg, &base, &mut rng)?;
        // adapters start at zero, which would hide the gradient of their
        // down-projections
        visit_params_mut(&mut model, "", &mut |_, p| {
            if p.trainable() {
                for v in p.value_mut().data_mut() {
                    *v += rng.gen_range(-0.2..0.2);
                }
            }
        });
        let sample = generate(seed, 1).samples.remove(0);
        let mut instr = vocab.encode(sample.instruction())?.ids;
        instr.truncate(cfg.max_instruction_len);
        let mut target = vocab.encode(&sample.captions.target(Role::Full))?.ids;
        target.truncate(cfg.max_caption_len - 1);
        let patches = model.image.patches(&sample.image)?;
        Ok(Self {
            model,
            patches,
            instr,
            target,
        })
    }

    fn loss(&self, patches: &Tensor) -> Result<f64> {
        let mut g = Graph::no_grad();
        let x = g.leaf(patches.clone());
        let fi = self.model.image.forward(&mut g, x)?;
        let l = self.model.stage1_loss(&mut g, fi, &self.instr, &self.target)?;
        Ok(g.value(l).item())
    }
}

/// Autograd against central differences for every pixel-patch entry and
/// every trainable weight of a tiny first-stage model.
pub fn stage1_gradcheck(seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut case = Case::new(seed)?;

    zero_grads(&mut case.model);
    let mut g = Graph::new();
    let x = g.leaf(case.patches.clone().with_requires_grad(true));
    let fi = case.model.image.forward(&mut g, x)?;
    let l = case.model.stage1_loss(&mut g, fi, &case.instr, &case.target)?;
    g.backward(l)?;
    let pixel_grad = g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; case.patches.numel()]);
    pull_grads(&mut case.model, &g)?;

    let mut worst = Worst::default();
    for (i, &analytic) in pixel_grad.iter().enumerate() {
        let numeric = central_difference(
            |d| {
                let mut x = case.patches.clone();
                x.data_mut()[i] += d;
                case.loss(&x)
            },
            analytic,
            h,
        )?;
        worst.update(analytic, numeric, || format!("pixels[{i}]"));
    }

    let mut paths = Vec::new();
    visit_params(&case.model, "", &mut |path, p| {
        if p.trainable() {
            let grad = p.value().grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value().numel()]);
            paths.push((path.to_string(), grad));
        }
    });
    let mut weights = 0;
    for (path, grad) in &paths {
        for (i, &analytic) in grad.iter().enumerate() {
            let numeric = central_difference(
                |d| {
                    let old = replace(&mut case.model, path, i, |v| v + d);
                    let y = case.loss(&case.patches);
                    replace(&mut case.model, path, i, |_| old);
                    y
                },
                analytic,
                h,
            )?;
            worst.update(analytic, numeric, || format!("{path}[{i}]"));
            weights += 1;
        }
    }
    Ok(GradCheckReport {
        seed,
        inputs: pixel_grad.len(),
        weights,
        max_rel_error: worst.error,
        worst_at: worst.at,
        worst_pair: worst.pair,
    })
}

#[derive(Default)]
struct Worst {
    error: f64,
    at: String,
    pair: (f64, f64),
}

impl Worst {
    fn update(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let e = relative_error(analytic, numeric);
        if e > self.error || self.at.is_empty() {
            self.error = e;
            self.at = at();
            self.pair = (analytic, numeric);
        }
    }
}

/// Rewrites one weight and returns its previous value.
fn replace(model: &mut CaptionModel, path: &str, i: usize, f: impl Fn(f64) -> f64) -> f64 {
    let mut old = f64::NAN;
    visit_params_mut(model, "", &mut |p, param| {
        if p == path {
            let slot = &mut param.value_mut().data_mut()[i];
            old = *slot;
            *slot = f(old);
        }
    });
    old
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_stage1_graph_matches_differences() {
        let r = stage1_gradcheck(3, 1e-4).unwrap();
        assert!(r.inputs > 0 && r.weights > 0);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
