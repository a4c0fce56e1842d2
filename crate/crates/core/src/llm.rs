//! Decoder-only language model conditioned on a prefix of image rows and
//! prompt rows.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Module, Param, PreNormBlock};
use crate::tensor::{Graph, Tensor, Var};
use crate::vocab::{TokenSequence, BOS, EOS, PAD};

/// What follows the image rows in the prefix.
#[derive(Clone, Copy, Debug)]
pub enum Prompt<'a> {
    None,
    /// Token ids embedded with the decoder's own table.
    Tokens(&'a [usize]),
    /// Continuous rows of decoder width.
    Embeddings(Var),
}

/// Graph-free counterpart of [`Prompt`], used for decoding.
#[derive(Clone, Debug, PartialEq)]
pub enum PromptValue {
    None,
    Tokens(Vec<usize>),
    Embeddings(Tensor),
}

impl PromptValue {
    fn bind<'a>(&'a self, g: &mut Graph) -> Prompt<'a> {
        match self {
            PromptValue::None => Prompt::None,
            PromptValue::Tokens(t) => Prompt::Tokens(t),
            PromptValue::Embeddings(t) => Prompt::Embeddings(g.constant(t.clone())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub tok_embed: Param,
    pub pos_embed: Param,
    pub blocks: Vec<PreNormBlock>,
    pub ln: LayerNorm,
    pub head: Linear,
}

/// Additive attention mask over `len` positions: the first `prefix` positions
/// see each other, later positions see the prefix and earlier positions.
pub fn prefix_mask(prefix: usize, len: usize) -> Tensor {
    Tensor::from_fn(&[len, len], |k| {
        let (i, j) = (k / len, k % len);
        if j < prefix || j <= i {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

impl DecoderModel {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        let blocks = (0..cfg.decoder_layers)
            .map(|_| PreNormBlock::new(d, cfg.heads, d * cfg.ffn_mult, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            tok_embed: Param::uniform(&[cfg.vocab_size, d], 1.0, rng),
            pos_embed: Param::uniform(&[cfg.max_positions(), d], 0.1, rng),
            blocks,
            ln: LayerNorm::new(d),
            head: Linear::new(d, cfg.vocab_size, rng),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_embed.value().shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tok_embed.value().shape()[1]
    }

    pub fn max_positions(&self) -> usize {
        self.pos_embed.value().shape()[0]
    }

    /// Deep copy for a model of configuration `cfg`.
    pub fn clone_weights(&self, cfg: &ModelConfig) -> Result<Self> {
        let fits = self.vocab_size() == cfg.vocab_size
            && self.dim() == cfg.embed_dim
            && self.blocks.len() == cfg.decoder_layers
            && self.max_positions() == cfg.max_positions();
        if !fits {
            return Err(Error::Config("decoder does not match the configuration".into()));
        }
        Ok(self.clone())
    }

    fn embed_tokens(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let table = self.tok_embed.bind(g);
        g.gather_rows(table, ids)
    }

    fn prefix_rows(&self, g: &mut Graph, features: Var, prompt: Prompt) -> Result<Vec<Var>> {
        let mut rows = vec![features];
        match prompt {
            Prompt::None => {}
            Prompt::Tokens(t) if t.is_empty() => {}
            Prompt::Tokens(t) => rows.push(self.embed_tokens(g, t)?),
            Prompt::Embeddings(v) => rows.push(v),
        }
        Ok(rows)
    }

    /// Hidden states of the caption positions (BOS onward) after the final
    /// layer norm, `[tokens.len() × D]`; `tokens` starts with BOS.
    fn caption_states(&self, g: &mut Graph, features: Var, prompt: Prompt, tokens: &[usize]) -> Result<Var> {
        let mut rows = self.prefix_rows(g, features, prompt)?;
        let prefix: usize = rows.iter().map(|&r| g.shape(r)[0]).sum();
        let len = prefix + tokens.len();
        if len > self.max_positions() {
            return Err(Error::Input(format!(
                "sequence of {len} positions exceeds the limit of {}",
                self.max_positions()
            )));
        }
        rows.push(self.embed_tokens(g, tokens)?);
        let x = g.concat_rows(&rows)?;
        let pos = self.pos_embed.bind(g);
        let pos = g.slice_rows(pos, 0, len)?;
        let mut x = g.add(x, pos)?;
        let mask = prefix_mask(prefix, len);
        for b in &self.blocks {
            x = b.forward(g, x, Some(&mask))?;
        }
        let x = g.slice_rows(x, prefix, len)?;
        self.ln.forward(g, x)
    }

    /// Teacher-forced logits for positions BOS, target[0], ..., i.e. one row
    /// per target token plus one for EOS.
    pub fn logits(&self, g: &mut Graph, features: Var, prompt: Prompt, target: &[usize]) -> Result<Var> {
        let mut tokens = Vec::with_capacity(target.len() + 1);
        tokens.push(BOS);
        tokens.extend_from_slice(target);
        let h = self.caption_states(g, features, prompt, &tokens)?;
        self.head.forward(g, h)
    }

    /// Mean next-token cross-entropy over the caption and its EOS. `PAD`
    /// entries in `target` are not supervised.
    pub fn forward_loss(&self, g: &mut Graph, features: Var, prompt: Prompt, target: &[usize]) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::Input("empty target: nothing to supervise".into()));
        }
        let logits = self.logits(g, features, prompt, target)?;
        let mut labels = target.to_vec();
        labels.push(EOS);
        // padded targets: EOS where the padding starts, nothing supervised after
        if let Some(k) = target.iter().position(|&t| t == PAD) {
            labels[k] = EOS;
            labels[k + 1..].fill(PAD);
        }
        g.cross_entropy(logits, &labels, Some(PAD))
    }

    /// Greedy decoding; ties go to the lowest token id. Stops after EOS
    /// (not included) or `max_len` tokens.
    pub fn generate(&self, features: &Tensor, prompt: &PromptValue, max_len: usize) -> Result<TokenSequence> {
        let mut tokens = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut g = Graph::no_grad();
            let f = g.constant(features.clone());
            let p = prompt.bind(&mut g);
            let h = self.caption_states(&mut g, f, p, &tokens)?;
            let n = tokens.len();
            let last = g.slice_rows(h, n - 1, n)?;
            let logits = self.head.forward(&mut g, last)?;
            let next = argmax(g.value(logits).data());
            if next == EOS {
                break;
            }
            out.push(next);
            tokens.push(next);
            let prefix = features.rows()
                + match prompt {
                    PromptValue::None => 0,
                    PromptValue::Tokens(t) => t.len(),
                    PromptValue::Embeddings(t) => t.rows(),
                };
            if prefix + tokens.len() > self.max_positions() {
                break;
            }
        }
        Ok(TokenSequence::new(out))
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Module for DecoderModel {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        vec![
            ("tok_embed".into(), &self.tok_embed),
            ("pos_embed".into(), &self.pos_embed),
            ("blocks".into(), &self.blocks),
            ("ln".into(), &self.ln),
            ("head".into(), &self.head),
        ]
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        vec![
            ("tok_embed".into(), &mut self.tok_embed),
            ("pos_embed".into(), &mut self.pos_embed),
            ("blocks".into(), &mut self.blocks),
            ("ln".into(), &mut self.ln),
            ("head".into(), &mut self.head),
        ]
    }
}
