//! Parameters and the small set of layers every model component is built
//! from. Layers never own a graph: `forward` binds their parameters onto the
//! caller's [`Graph`], and [`pull_grads`] copies leaf gradients back after
//! `backward`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{AdapterState, LoraAdapter};
use crate::tensor::{Graph, Tensor, Var};

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

fn fresh_key() -> u64 {
    NEXT_KEY.fetch_add(1, Ordering::Relaxed)
}

/// A named-by-position tensor with an identity used to bind it onto graphs.
/// Cloning yields an independent parameter with a new identity.
#[derive(Debug)]
pub struct Param {
    key: u64,
    tensor: Tensor,
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Self {
            key: fresh_key(),
            tensor: self.tensor.clone(),
        }
    }
}

impl Param {
    pub fn new(tensor: Tensor) -> Self {
        Self {
            key: fresh_key(),
            tensor,
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        Self::new(Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound)).with_requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape).with_requires_grad(true))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::new(Tensor::full(shape, 1.0).with_requires_grad(true))
    }

    pub fn bind(&self, g: &mut Graph) -> Var {
        g.keyed_leaf(self.key, &self.tensor)
    }

    pub fn value(&self) -> &Tensor {
        &self.tensor
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.tensor.set_requires_grad(on);
    }

    /// Adds this parameter's gradient from `g`, if it was bound there.
    pub fn pull_grad(&mut self, g: &Graph) -> Result<()> {
        if let Some(v) = g.keyed(self.key) {
            if let Some(grad) = g.grad(v) {
                self.tensor.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }
}

/// Tree of parameters. Composite layers list their children; leaves are
/// [`Param`]s. Linear layers are also reachable by path so adapters can be
/// attached by name.
pub trait Module {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        Vec::new()
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        Vec::new()
    }

    fn as_param(&self) -> Option<&Param> {
        None
    }

    fn as_param_mut(&mut self) -> Option<&mut Param> {
        None
    }

    fn as_linear(&self) -> Option<&Linear> {
        None
    }

    fn as_linear_mut(&mut self) -> Option<&mut Linear> {
        None
    }
}

impl Module for Param {
    fn as_param(&self) -> Option<&Param> {
        Some(self)
    }

    fn as_param_mut(&mut self) -> Option<&mut Param> {
        Some(self)
    }
}

impl<T: Module> Module for Vec<T> {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        self.iter()
            .enumerate()
            .map(|(i, m)| (i.to_string(), m as &dyn Module))
            .collect()
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        self.iter_mut()
            .enumerate()
            .map(|(i, m)| (i.to_string(), m as &mut dyn Module))
            .collect()
    }
}

pub(crate) fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

pub fn visit_params(m: &dyn Module, path: &str, f: &mut dyn FnMut(&str, &Param)) {
    if let Some(p) = m.as_param() {
        f(path, p);
        return;
    }
    for (name, child) in m.children() {
        visit_params(child, &join(path, &name), f);
    }
}

pub fn visit_params_mut(m: &mut dyn Module, path: &str, f: &mut dyn FnMut(&str, &mut Param)) {
    if let Some(p) = m.as_param_mut() {
        f(path, p);
        return;
    }
    for (name, child) in m.children_mut() {
        visit_params_mut(child, &join(path, &name), f);
    }
}

pub fn visit_linears(m: &dyn Module, path: &str, f: &mut dyn FnMut(&str, &Linear)) {
    if let Some(l) = m.as_linear() {
        f(path, l);
        return;
    }
    for (name, child) in m.children() {
        visit_linears(child, &join(path, &name), f);
    }
}

pub fn visit_linears_mut(m: &mut dyn Module, path: &str, f: &mut dyn FnMut(&str, &mut Linear)) {
    if let Some(l) = m.as_linear_mut() {
        f(path, l);
        return;
    }
    for (name, child) in m.children_mut() {
        visit_linears_mut(child, &join(path, &name), f);
    }
}

/// Named parameters, in visiting order.
pub fn named_params(m: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    visit_params(m, "", &mut |name, p| out.push((name.to_string(), p.value().clone())));
    out
}

pub fn param_count(m: &dyn Module) -> usize {
    let mut n = 0;
    visit_params(m, "", &mut |_, p| n += p.value().numel());
    n
}

pub fn trainable_count(m: &dyn Module) -> usize {
    let mut n = 0;
    visit_params(m, "", &mut |_, p| {
        if p.trainable() {
            n += p.value().numel()
        }
    });
    n
}

pub fn set_trainable(m: &mut dyn Module, on: bool) {
    visit_params_mut(m, "", &mut |_, p| p.set_trainable(on));
}

pub fn zero_grads(m: &mut dyn Module) {
    visit_params_mut(m, "", &mut |_, p| p.value_mut().zero_grad());
}

/// Accumulates gradients of every parameter bound on `g`.
pub fn pull_grads(m: &mut dyn Module, g: &Graph) -> Result<()> {
    let mut err = None;
    visit_params_mut(m, "", &mut |_, p| {
        if err.is_none() {
            err = p.pull_grad(g).err();
        }
    });
    err.map_or(Ok(()), Err)
}

/// SHA-256 over every parameter's path, shape and value bits.
pub fn param_hash(m: &dyn Module) -> String {
    let mut h = Sha256::new();
    visit_params(m, "", &mut |name, p| {
        h.update(name.as_bytes());
        for d in p.value().shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in p.value().data() {
            h.update(x.to_bits().to_le_bytes());
        }
    });
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `y = x·W + b`, optionally with a low-rank adapter added to the output.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub adapter: AdapterState,
    /// How many adapters have been folded into `weight`.
    pub merges: u32,
}

impl Linear {
    /// Uniform init with variance `1 / d_in`; bias zero.
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / d_in as f64).sqrt();
        Self {
            weight: Param::uniform(&[d_in, d_out], bound, rng),
            bias: Param::zeros(&[d_out]),
            adapter: AdapterState::None,
            merges: 0,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = self.weight.bind(g);
        let b = self.bias.bind(g);
        let y = g.matmul(x, w)?;
        let y = g.add_row(y, b)?;
        match &self.adapter {
            AdapterState::Active(a) => {
                let delta = a.forward(g, x)?;
                g.add(y, delta)
            }
            _ => Ok(y),
        }
    }

    pub fn adapter(&self) -> Option<&LoraAdapter> {
        match &self.adapter {
            AdapterState::Active(a) => Some(a),
            _ => None,
        }
    }
}

impl Module for Linear {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        let mut out: Vec<(String, &dyn Module)> = vec![
            ("weight".into(), &self.weight),
            ("bias".into(), &self.bias),
        ];
        if let AdapterState::Active(a) = &self.adapter {
            out.push(("lora_a".into(), &a.a));
            out.push(("lora_b".into(), &a.b));
        }
        out
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        let mut out: Vec<(String, &mut dyn Module)> = vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ];
        if let AdapterState::Active(a) = &mut self.adapter {
            out.push(("lora_a".into(), &mut a.a));
            out.push(("lora_b".into(), &mut a.b));
        }
        out
    }

    fn as_linear(&self) -> Option<&Linear> {
        Some(self)
    }

    fn as_linear_mut(&mut self) -> Option<&mut Linear> {
        Some(self)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::ones(&[dim]),
            beta: Param::zeros(&[dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = self.gamma.bind(g);
        let beta = self.beta.bind(g);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

impl Module for LayerNorm {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(dim, hidden, rng),
            down: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

impl Module for FeedForward {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        vec![("up".into(), &self.up), ("down".into(), &self.down)]
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        vec![("up".into(), &mut self.up), ("down".into(), &mut self.down)]
    }
}

/// Multi-head scaled dot-product attention with separate key/value width.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Attention output plus the per-head weight matrices.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new(dim: usize, kv_dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(dim, dim, rng),
            k: Linear::new(kv_dim, dim, rng),
            v: Linear::new(kv_dim, dim, rng),
            o: Linear::new(dim, dim, rng),
            heads,
        })
    }

    /// `mask`, when given, is added to every head's `[queries × keys]` score
    /// matrix (use `-inf` to hide a key).
    pub fn forward(&self, g: &mut Graph, xq: Var, xkv: Var, mask: Option<&Tensor>) -> Result<Var> {
        Ok(self.forward_with_weights(g, xq, xkv, mask)?.out)
    }

    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        xq: Var,
        xkv: Var,
        mask: Option<&Tensor>,
    ) -> Result<AttentionOutput> {
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let dim = g.shape(q)[1];
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let s = g.matmul_nt(qh, kh)?;
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add_const(s, m)?;
            }
            let p = g.softmax(s, 1)?;
            outs.push(g.matmul(p, vh)?);
            weights.push(p);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok(AttentionOutput {
            out: self.o.forward(g, cat)?,
            weights,
        })
    }
}

impl Module for Attention {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        vec![
            ("q".into(), &self.q),
            ("k".into(), &self.k),
            ("v".into(), &self.v),
            ("o".into(), &self.o),
        ]
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        vec![
            ("q".into(), &mut self.q),
            ("k".into(), &mut self.k),
            ("v".into(), &mut self.v),
            ("o".into(), &mut self.o),
        ]
    }
}

/// Standard pre-LN transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct PreNormBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl PreNormBlock {
    pub fn new(dim: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(dim, dim, heads, rng)?,
            ln2: LayerNorm::new(dim),
            ffn: FeedForward::new(dim, hidden, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

impl Module for PreNormBlock {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        vec![
            ("ln1".into(), &self.ln1),
            ("attn".into(), &self.attn),
            ("ln2".into(), &self.ln2),
            ("ffn".into(), &self.ffn),
        ]
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        vec![
            ("ln1".into(), &mut self.ln1),
            ("attn".into(), &mut self.attn),
            ("ln2".into(), &mut self.ln2),
            ("ffn".into(), &mut self.ffn),
        ]
    }
}
