//! Instruction router and role-specialised expert decoders.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::llm::{DecoderModel, Prompt, PromptValue};
use crate::nn::{Linear, Module, Param};
use crate::scene::{Role, SEP_TEXT};
use crate::tensor::{Graph, Tensor, Var};
use crate::vocab::{TokenSequence, Vocab};

/// Maps (instruction, image rows) to one `[K × D]` soft prompt per expert:
/// mean-pooled instruction embedding and mean-pooled image rows are
/// concatenated, passed through a shared GELU trunk, then one linear head per
/// expert.
#[derive(Clone, Debug)]
pub struct InstructionRouter {
    pub instr_embed: Param,
    pub trunk: Linear,
    pub heads: Vec<Linear>,
    prompt_len: usize,
    dim: usize,
}

impl InstructionRouter {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.embed_dim;
        Self {
            instr_embed: Param::uniform(&[cfg.vocab_size, d], 1.0, rng),
            trunk: Linear::new(2 * d, cfg.router_hidden, rng),
            heads: (0..cfg.num_experts)
                .map(|_| Linear::new(cfg.router_hidden, cfg.prompt_len * d, rng))
                .collect(),
            prompt_len: cfg.prompt_len,
            dim: d,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.heads.len()
    }

    /// Shared hidden vector `[1 × H]`.
    pub fn trunk_state(&self, g: &mut Graph, instr: &[usize], fv: Var) -> Result<Var> {
        let pooled_instr = if instr.is_empty() {
            g.constant(Tensor::zeros(&[1, self.dim]))
        } else {
            let table = self.instr_embed.bind(g);
            let rows = g.gather_rows(table, instr)?;
            g.mean_rows(rows)?
        };
        let pooled_img = g.mean_rows(fv)?;
        let x = g.concat_cols(&[pooled_instr, pooled_img])?;
        let h = self.trunk.forward(g, x)?;
        Ok(g.gelu(h))
    }

    pub fn head_prompt(&self, g: &mut Graph, hidden: Var, i: usize) -> Result<Var> {
        let head = self
            .heads
            .get(i)
            .ok_or_else(|| Error::Config(format!("no router head {i}")))?;
        let p = head.forward(g, hidden)?;
        g.reshape(p, &[self.prompt_len, self.dim])
    }

    /// Soft prompt for expert `i` alone.
    pub fn route_one(&self, g: &mut Graph, instr: &[usize], fv: Var, i: usize) -> Result<Var> {
        let h = self.trunk_state(g, instr, fv)?;
        self.head_prompt(g, h, i)
    }

    pub fn route(&self, g: &mut Graph, instr: &[usize], fv: Var) -> Result<Vec<Var>> {
        let h = self.trunk_state(g, instr, fv)?;
        (0..self.heads.len()).map(|i| self.head_prompt(g, h, i)).collect()
    }

    /// Graph-free routing.
    pub fn prompts(&self, instr: &[usize], fv: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::no_grad();
        let f = g.constant(fv.clone());
        let ps = self.route(&mut g, instr, f)?;
        Ok(ps.into_iter().map(|p| g.value(p).clone()).collect())
    }
}

impl Module for InstructionRouter {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        vec![
            ("instr_embed".into(), &self.instr_embed),
            ("trunk".into(), &self.trunk),
            ("heads".into(), &self.heads),
        ]
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        vec![
            ("instr_embed".into(), &mut self.instr_embed),
            ("trunk".into(), &mut self.trunk),
            ("heads".into(), &mut self.heads),
        ]
    }
}

/// Expert decoders with their roles, plus an optional router. Without a
/// router every expert is prompted with the raw instruction tokens.
#[derive(Clone, Debug)]
pub struct MoeModel {
    pub router: Option<InstructionRouter>,
    pub experts: Vec<DecoderModel>,
    pub roles: Vec<Role>,
}

impl MoeModel {
    /// `n` copies of `base`, one per role, and a fresh router if requested.
    pub fn from_decoder(
        cfg: &ModelConfig,
        base: &DecoderModel,
        router: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let roles = roles_for(cfg.num_experts)?;
        let experts = roles
            .iter()
            .map(|_| base.clone_weights(cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            router: router.then(|| InstructionRouter::new(cfg, rng)),
            experts,
            roles,
        })
    }

    /// The same experts with the router removed.
    pub fn without_router(&self) -> Self {
        Self {
            router: None,
            experts: self.experts.clone(),
            roles: self.roles.clone(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Loss of expert `i` against its role's reference tokens.
    pub fn expert_forward_loss(
        &self,
        g: &mut Graph,
        fv: Var,
        instr: &[usize],
        target: &[usize],
        i: usize,
    ) -> Result<Var> {
        let expert = self
            .experts
            .get(i)
            .ok_or_else(|| Error::Config(format!("expert {i} of {}", self.experts.len())))?;
        match &self.router {
            Some(r) => {
                let p = r.route_one(g, instr, fv, i)?;
                expert.forward_loss(g, fv, Prompt::Embeddings(p), target)
            }
            None => expert.forward_loss(g, fv, Prompt::Tokens(instr), target),
        }
    }

    /// Prompt each expert receives.
    pub fn prompts(&self, instr: &[usize], fv: &Tensor) -> Result<Vec<PromptValue>> {
        match &self.router {
            Some(r) => Ok(r
                .prompts(instr, fv)?
                .into_iter()
                .map(PromptValue::Embeddings)
                .collect()),
            None => Ok(vec![PromptValue::Tokens(instr.to_vec()); self.experts.len()]),
        }
    }

    /// Each expert's greedy output, in role order.
    pub fn generate_parts(&self, fv: &Tensor, instr: &[usize], max_len: usize) -> Result<Vec<TokenSequence>> {
        let prompts = self.prompts(instr, fv)?;
        self.experts
            .iter()
            .zip(&prompts)
            .map(|(e, p)| e.generate(fv, p, max_len))
            .collect()
    }

    /// Aggregated caption: expert outputs joined by the separator in role
    /// order.
    pub fn generate(&self, vocab: &Vocab, fv: &Tensor, instr: &[usize], max_len: usize) -> Result<String> {
        let parts = self.generate_parts(fv, instr, max_len)?;
        aggregate(vocab, &parts)
    }
}

fn roles_for(n: usize) -> Result<Vec<Role>> {
    Role::for_experts(n).ok_or_else(|| Error::Config(format!("no role split for {n} experts")))
}

pub fn aggregate(vocab: &Vocab, parts: &[TokenSequence]) -> Result<String> {
    let texts = parts
        .iter()
        .map(|p| vocab.decode(&p.ids))
        .collect::<Result<Vec<_>>>()?;
    Ok(texts.join(&format!(" {SEP_TEXT} ")))
}

impl Module for MoeModel {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        let mut out: Vec<(String, &dyn Module)> = Vec::new();
        if let Some(r) = &self.router {
            out.push(("router".into(), r));
        }
        out.push(("experts".into(), &self.experts));
        out
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        let mut out: Vec<(String, &mut dyn Module)> = Vec::new();
        if let Some(r) = &mut self.router {
            out.push(("router".into(), r));
        }
        out.push(("experts".into(), &mut self.experts));
        out
    }
}
