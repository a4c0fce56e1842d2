//! Low-rank adapters on linear layers.
//!
//! An adapter adds `(alpha / r) · (x·Aᵀ)·Bᵀ` to a frozen linear map, with
//! `A: [r × d_in]` uniform and `B: [d_out × r]` zero, so a freshly wrapped
//! layer computes exactly what it computed before.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{visit_linears, visit_linears_mut, Linear, Module, Param};
use crate::tensor::{Graph, Var};

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_ALPHA: f64 = 8.0;

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: Param,
    pub b: Param,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = self.a.bind(g);
        let b = self.b.bind(g);
        let xa = g.matmul_nt(x, a)?;
        let d = g.matmul_nt(xa, b)?;
        Ok(g.scale(d, self.scaling()))
    }
}

/// What a linear layer carries on top of its base weight.
#[derive(Clone, Debug, Default)]
pub enum AdapterState {
    #[default]
    None,
    Active(LoraAdapter),
}

/// Attaches a fresh adapter to `layer` and freezes its base weight and bias.
pub fn wrap(layer: &mut Linear, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<()> {
    if matches!(layer.adapter, AdapterState::Active(_)) {
        return Err(Error::Config("layer already carries an active adapter".into()));
    }
    if rank == 0 || rank > layer.d_in().min(layer.d_out()) {
        return Err(Error::Config(format!(
            "adapter rank {rank} invalid for a {}×{} layer",
            layer.d_in(),
            layer.d_out()
        )));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!("adapter alpha must be positive, got {alpha}")));
    }
    let bound = 1.0 / (layer.d_in() as f64).sqrt();
    layer.adapter = AdapterState::Active(LoraAdapter {
        a: Param::uniform(&[rank, layer.d_in()], bound, rng),
        b: Param::zeros(&[layer.d_out(), rank]),
        rank,
        alpha,
    });
    layer.weight.set_trainable(false);
    layer.bias.set_trainable(false);
    Ok(())
}

/// Folds the adapter into the base weight, `W += (alpha / r) · (B·A)ᵀ`, and
/// leaves the layer without an adapter (it may be wrapped again).
pub fn merge(layer: &mut Linear) -> Result<()> {
    let adapter = match std::mem::take(&mut layer.adapter) {
        AdapterState::Active(a) => a,
        other => {
            layer.adapter = other;
            return Err(Error::Config("no active adapter to merge".into()));
        }
    };
    let s = adapter.scaling();
    let (r, d_in, d_out) = (adapter.rank, layer.d_in(), layer.d_out());
    let a = adapter.a.value().data();
    let b = adapter.b.value().data();
    let w = layer.weight.value_mut().data_mut();
    for i in 0..d_in {
        for o in 0..d_out {
            let mut acc = 0.0;
            for k in 0..r {
                acc += b[o * r + k] * a[k * d_in + i];
            }
            w[i * d_out + o] += s * acc;
        }
    }
    layer.merges += 1;
    Ok(())
}

/// Which linear layers receive adapters, as a predicate on parameter paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoraPlan {
    /// Encoder attention and FFN layers, the projection into the language
    /// model, and the language model's attention q/v and FFN.
    StageOne,
    /// Attention q/v and FFN layers of every expert decoder.
    StageTwo,
}

fn llm_site(rest: &str) -> bool {
    matches!(rest, "attn.q" | "attn.v" | "ffn.up" | "ffn.down")
}

fn vlm_site(rest: &str) -> bool {
    matches!(
        rest,
        "self_attn.q"
            | "self_attn.v"
            | "cross_attn.q"
            | "cross_attn.k"
            | "cross_attn.v"
            | "cross_attn.o"
            | "ffn.up"
            | "ffn.down"
    )
}

/// Splits `head.blocks.<i>.rest` into `(head, rest)`.
fn split_block(path: &str) -> Option<(&str, &str)> {
    let (head, tail) = path.split_once(".blocks.")?;
    let (idx, rest) = tail.split_once('.')?;
    idx.parse::<usize>().ok()?;
    Some((head, rest))
}

impl LoraPlan {
    pub fn targets(self, path: &str) -> bool {
        let block = split_block(path);
        match self {
            LoraPlan::StageOne => {
                matches!(path, "vlm.proj_ffn.up" | "vlm.proj_ffn.down" | "vlm.proj")
                    || block.is_some_and(|(h, r)| (h == "vlm" && vlm_site(r)) || (h == "llm" && llm_site(r)))
            }
            LoraPlan::StageTwo => block.is_some_and(|(h, r)| {
                h.strip_prefix("experts.").is_some_and(|i| i.parse::<usize>().is_ok()) && llm_site(r)
            }),
        }
    }
}

/// Wraps every targeted layer; returns the wrapped paths in visiting order.
pub fn apply_plan(
    model: &mut dyn Module,
    plan: LoraPlan,
    rank: usize,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<Vec<String>> {
    let mut sites = Vec::new();
    let mut err = None;
    visit_linears_mut(model, "", &mut |path, layer| {
        if err.is_none() && plan.targets(path) {
            match wrap(layer, rank, alpha, rng) {
                Ok(()) => sites.push(path.to_string()),
                Err(e) => err = Some(e),
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(sites),
    }
}

/// Merges every active adapter under `prefix` (empty prefix: all).
pub fn merge_all(model: &mut dyn Module, prefix: &str) -> Result<usize> {
    let mut n = 0;
    let mut err = None;
    visit_linears_mut(model, "", &mut |path, layer| {
        if err.is_none() && path.starts_with(prefix) && layer.adapter().is_some() {
            match merge(layer) {
                Ok(()) => n += 1,
                Err(e) => err = Some(e),
            }
        }
    });
    err.map_or(Ok(n), Err)
}

/// Paths of layers with an active adapter.
pub fn active_sites(model: &dyn Module) -> Vec<String> {
    let mut out = Vec::new();
    visit_linears(model, "", &mut |path, l| {
        if l.adapter().is_some() {
            out.push(path.to_string());
        }
    });
    out
}

/// Paths of layers whose weight absorbed an adapter.
pub fn merged_sites(model: &dyn Module) -> Vec<String> {
    let mut out = Vec::new();
    visit_linears(model, "", &mut |path, l| {
        if l.merges > 0 {
            out.push(path.to_string());
        }
    });
    out
}
