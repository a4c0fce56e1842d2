//! Frozen patch-transformer image encoder and the instruction-aware query
//! encoder that turns its features into decoder-width prefix rows.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear, Module, Param, PreNormBlock};
use crate::scene::SceneImage;
use crate::tensor::{Graph, Tensor, Var};

/// Image features `[P × C]`, one row per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures(pub Tensor);

/// Decoder prefix rows `[L × D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VlmFeatures(pub Tensor);

/// Rearranges an `H×W×3` pixel buffer into `[P × patch²·3]`, patches in
/// row-major order, each flattened row-major with channels innermost.
pub fn patchify(pixels: &[f64], size: usize, patch: usize) -> Result<Tensor> {
    if pixels.len() != size * size * 3 || patch == 0 || size % patch != 0 {
        return Err(Error::Config(format!(
            "{} pixel values do not form a {size}×{size} image in {patch}-pixel patches",
            pixels.len()
        )));
    }
    let per_side = size / patch;
    let width = patch * patch * 3;
    let mut out = Vec::with_capacity(pixels.len());
    for pr in 0..per_side {
        for pc in 0..per_side {
            for y in 0..patch {
                let start = ((pr * patch + y) * size + pc * patch) * 3;
                out.extend_from_slice(&pixels[start..start + patch * 3]);
            }
        }
    }
    Tensor::new(vec![per_side * per_side, width], out)
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch: Linear,
    pub pos: Param,
    pub blocks: Vec<PreNormBlock>,
    pub ln: LayerNorm,
    image_size: usize,
    patch_size: usize,
}

impl ImageEncoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.image_dim;
        let blocks = (0..cfg.encoder_layers)
            .map(|_| PreNormBlock::new(c, cfg.heads, c * cfg.ffn_mult, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch: Linear::new(cfg.patch_values(), c, rng),
            pos: Param::uniform(&[cfg.num_patches(), c], 0.1, rng),
            blocks,
            ln: LayerNorm::new(c),
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
        })
    }

    pub fn patches(&self, img: &SceneImage) -> Result<Tensor> {
        if img.width() != self.image_size || img.height() != self.image_size {
            return Err(Error::Config(format!(
                "image is {}×{}, encoder expects {}",
                img.width(),
                img.height(),
                self.image_size
            )));
        }
        let centered: Vec<f64> = img.pixels().iter().map(|p| 2.0 * p - 1.0).collect();
        patchify(&centered, self.image_size, self.patch_size)
    }

    /// Encodes a `[P × patch²·3]` patch matrix already on the graph.
    pub fn forward(&self, g: &mut Graph, patches: Var) -> Result<Var> {
        let x = self.patch.forward(g, patches)?;
        let pos = self.pos.bind(g);
        let mut x = g.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, x, None)?;
        }
        self.ln.forward(g, x)
    }

    pub fn encode_image(&self, img: &SceneImage) -> Result<VisualFeatures> {
        let mut g = Graph::no_grad();
        let p = g.constant(self.patches(img)?);
        let f = self.forward(&mut g, p)?;
        Ok(VisualFeatures(g.value(f).clone()))
    }
}

impl Module for ImageEncoder {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        vec![
            ("patch".into(), &self.patch),
            ("pos".into(), &self.pos),
            ("blocks".into(), &self.blocks),
            ("ln".into(), &self.ln),
        ]
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        vec![
            ("patch".into(), &mut self.patch),
            ("pos".into(), &mut self.pos),
            ("blocks".into(), &mut self.blocks),
            ("ln".into(), &mut self.ln),
        ]
    }
}

/// Post-LN query block: joint self-attention over queries and instruction
/// states, cross-attention from queries into image features, then FFN.
#[derive(Clone, Debug)]
pub struct QFormerBlock {
    pub self_attn: Attention,
    pub ln_self: LayerNorm,
    pub cross_attn: Attention,
    pub ln_cross: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl QFormerBlock {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.query_dim;
        Ok(Self {
            self_attn: Attention::new(d, d, cfg.heads, rng)?,
            ln_self: LayerNorm::new(d),
            cross_attn: Attention::new(d, cfg.image_dim, cfg.heads, rng)?,
            ln_cross: LayerNorm::new(d),
            ffn: FeedForward::new(d, d * cfg.ffn_mult, rng),
            ln_ffn: LayerNorm::new(d),
        })
    }

    /// Self-attention over `[queries; instr]`. Returns the updated query rows
    /// and, when an instruction is present, the updated instruction rows.
    pub fn self_attend(&self, g: &mut Graph, queries: Var, instr: Option<Var>) -> Result<(Var, Option<Var>)> {
        let l = g.shape(queries)[0];
        let joint = match instr {
            Some(t) => g.concat_rows(&[queries, t])?,
            None => queries,
        };
        let a = self.self_attn.forward(g, joint, joint, None)?;
        let s = g.add(joint, a)?;
        let s = self.ln_self.forward(g, s)?;
        let n = g.shape(s)[0];
        let q = g.slice_rows(s, 0, l)?;
        let rest = match instr {
            Some(_) => Some(g.slice_rows(s, l, n)?),
            None => None,
        };
        Ok((q, rest))
    }

    /// `LN(fsa + CrossAttn(fsa, fi))`.
    pub fn cross_attend(&self, g: &mut Graph, fsa: Var, fi: Var) -> Result<Var> {
        let a = self.cross_attn.forward(g, fsa, fi, None)?;
        let s = g.add(fsa, a)?;
        self.ln_cross.forward(g, s)
    }

    pub fn feed_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let f = self.ffn.forward(g, x)?;
        let s = g.add(x, f)?;
        self.ln_ffn.forward(g, s)
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, instr: Option<Var>, fi: Var) -> Result<(Var, Option<Var>)> {
        let (q, instr) = self.self_attend(g, queries, instr)?;
        let q = self.cross_attend(g, q, fi)?;
        Ok((self.feed_forward(g, q)?, instr))
    }
}

impl Module for QFormerBlock {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        vec![
            ("self_attn".into(), &self.self_attn),
            ("ln_self".into(), &self.ln_self),
            ("cross_attn".into(), &self.cross_attn),
            ("ln_cross".into(), &self.ln_cross),
            ("ffn".into(), &self.ffn),
            ("ln_ffn".into(), &self.ln_ffn),
        ]
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        vec![
            ("self_attn".into(), &mut self.self_attn),
            ("ln_self".into(), &mut self.ln_self),
            ("cross_attn".into(), &mut self.cross_attn),
            ("ln_cross".into(), &mut self.ln_cross),
            ("ffn".into(), &mut self.ffn),
            ("ln_ffn".into(), &mut self.ln_ffn),
        ]
    }
}

/// Instruction-aware query encoder.
#[derive(Clone, Debug)]
pub struct VlmEncoder {
    pub instr_embed: Param,
    pub instr_pos: Param,
    pub queries: Param,
    pub blocks: Vec<QFormerBlock>,
    pub proj_ffn: FeedForward,
    pub proj: Linear,
    max_instruction_len: usize,
}

impl VlmEncoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.query_dim;
        let blocks = (0..cfg.qformer_layers)
            .map(|_| QFormerBlock::new(cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            instr_embed: Param::uniform(&[cfg.vocab_size, d], 1.0, rng),
            instr_pos: Param::uniform(&[cfg.max_instruction_len, d], 0.1, rng),
            queries: Param::uniform(&[cfg.num_queries, d], 1.0, rng),
            blocks,
            proj_ffn: FeedForward::new(d, d * cfg.ffn_mult, rng),
            proj: Linear::new(d, cfg.embed_dim, rng),
            max_instruction_len: cfg.max_instruction_len,
        })
    }

    /// Token plus positional embeddings; `None` for an empty instruction.
    pub fn embed_instruction(&self, g: &mut Graph, instr: &[usize]) -> Result<Option<Var>> {
        if instr.len() > self.max_instruction_len {
            return Err(Error::Input(format!(
                "instruction has {} tokens, limit is {}",
                instr.len(),
                self.max_instruction_len
            )));
        }
        if instr.is_empty() {
            return Ok(None);
        }
        let table = self.instr_embed.bind(g);
        let tok = g.gather_rows(table, instr)?;
        let pos = self.instr_pos.bind(g);
        let pos = g.slice_rows(pos, 0, instr.len())?;
        Ok(Some(g.add(tok, pos)?))
    }

    /// `FC(x + FFN(x))`: the feed-forward stage followed by the projection to
    /// decoder width.
    pub fn project(&self, g: &mut Graph, fca: Var) -> Result<Var> {
        let f = self.proj_ffn.forward(g, fca)?;
        let h = g.add(fca, f)?;
        self.proj.forward(g, h)
    }

    /// Full pipeline from image features to decoder prefix rows.
    pub fn forward(&self, g: &mut Graph, fi: Var, instr: &[usize]) -> Result<Var> {
        let mut instr_states = self.embed_instruction(g, instr)?;
        let mut q = self.queries.bind(g);
        for b in &self.blocks {
            (q, instr_states) = b.forward(g, q, instr_states, fi)?;
        }
        self.project(g, q)
    }

    pub fn encode(&self, fi: &VisualFeatures, instr: &[usize]) -> Result<VlmFeatures> {
        let mut g = Graph::no_grad();
        let f = g.constant(fi.0.clone());
        let out = self.forward(&mut g, f, instr)?;
        Ok(VlmFeatures(g.value(out).clone()))
    }
}

impl Module for VlmEncoder {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        vec![
            ("instr_embed".into(), &self.instr_embed),
            ("instr_pos".into(), &self.instr_pos),
            ("queries".into(), &self.queries),
            ("blocks".into(), &self.blocks),
            ("proj_ffn".into(), &self.proj_ffn),
            ("proj".into(), &self.proj),
        ]
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        vec![
            ("instr_embed".into(), &mut self.instr_embed),
            ("instr_pos".into(), &mut self.instr_pos),
            ("queries".into(), &mut self.queries),
            ("blocks".into(), &mut self.blocks),
            ("proj_ffn".into(), &mut self.proj_ffn),
            ("proj".into(), &mut self.proj),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate, IMAGE_SIZE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patchify_layout() {
        let size = 4;
        let pixels: Vec<f64> = (0..size * size * 3).map(|i| i as f64).collect();
        let t = patchify(&pixels, size, 2).unwrap();
        assert_eq!(t.shape(), &[4, 12]);
        // second patch starts at pixel (0, 2)
        assert_eq!(t.row(1)[0], 6.0);
        // its third pixel is (1, 2)
        assert_eq!(t.row(1)[6], ((size + 2) * 3) as f64);
        assert!(patchify(&pixels, size, 3).is_err());
    }

    #[test]
    fn image_features_shape_and_purity() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = ImageEncoder::new(&cfg, &mut rng).unwrap();
        let ds = generate(1, 1);
        let a = enc.encode_image(&ds.samples[0].image).unwrap();
        let b = enc.encode_image(&ds.samples[0].image).unwrap();
        assert_eq!(a.0.shape(), &[16, 64]);
        assert_eq!(a, b);
        assert_eq!(IMAGE_SIZE, 32);
    }

    #[test]
    fn overlong_instruction_is_rejected() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vlm = VlmEncoder::new(&cfg, &mut rng).unwrap();
        let fi = VisualFeatures(Tensor::zeros(&[cfg.num_patches(), cfg.image_dim]));
        let long = vec![4; cfg.max_instruction_len + 1];
        assert!(matches!(vlm.encode(&fi, &long), Err(Error::Input(_))));
        let out = vlm.encode(&fi, &[]).unwrap();
        assert_eq!(out.0.shape(), &[cfg.num_queries, cfg.embed_dim]);
    }
}
