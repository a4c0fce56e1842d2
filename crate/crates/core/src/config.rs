use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::lora::{DEFAULT_ALPHA, DEFAULT_RANK};
use crate::scene::IMAGE_SIZE;
use crate::vocab::Vocab;

/// Every size that shapes a model. Serialized as key-value lines in
/// checkpoints and config files.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Image feature width C.
    pub image_dim: usize,
    /// Query width C'.
    pub query_dim: usize,
    /// Query count L.
    pub num_queries: usize,
    /// Decoder width D.
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub qformer_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// FFN hidden width as a multiple of the layer width.
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_instruction_len: usize,
    pub max_caption_len: usize,
    pub num_experts: usize,
    /// Soft-prompt rows K.
    pub prompt_len: usize,
    pub router_hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: IMAGE_SIZE,
            patch_size: 8,
            image_dim: 64,
            query_dim: 64,
            num_queries: 16,
            embed_dim: 64,
            encoder_layers: 2,
            qformer_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_mult: 4,
            vocab_size: Vocab::synthetic().len(),
            max_instruction_len: 8,
            max_caption_len: 48,
            num_experts: 3,
            prompt_len: 4,
            router_hidden: 32,
            lora_rank: DEFAULT_RANK,
            lora_alpha: DEFAULT_ALPHA,
        }
    }
}

macro_rules! config_fields {
    ($m:ident) => {
        $m!(
            image_size,
            patch_size,
            image_dim,
            query_dim,
            num_queries,
            embed_dim,
            encoder_layers,
            qformer_layers,
            decoder_layers,
            heads,
            ffn_mult,
            vocab_size,
            max_instruction_len,
            max_caption_len,
            num_experts,
            prompt_len,
            router_hidden,
            lora_rank
        )
    };
}

impl ModelConfig {
    /// Small enough for finite-difference checks over every weight.
    pub fn tiny() -> Self {
        Self {
            patch_size: 16,
            image_dim: 8,
            query_dim: 8,
            num_queries: 2,
            embed_dim: 8,
            encoder_layers: 1,
            qformer_layers: 1,
            decoder_layers: 2,
            heads: 2,
            ffn_mult: 2,
            max_caption_len: 8,
            max_instruction_len: 8,
            prompt_len: 2,
            router_hidden: 8,
            lora_rank: 2,
            lora_alpha: 4.0,
            ..Self::default()
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_values(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Longest decoder input: queries, prompt, BOS and caption.
    pub fn max_positions(&self) -> usize {
        self.num_queries + self.max_instruction_len.max(self.prompt_len) + 1 + self.max_caption_len
    }

    pub fn validate(&self) -> Result<()> {
        let mut zero = Vec::new();
        macro_rules! check_positive {
            ($($f:ident),*) => { $( if self.$f == 0 { zero.push(stringify!($f)); } )* };
        }
        config_fields!(check_positive);
        if !zero.is_empty() {
            return Err(Error::Config(format!("must be positive: {}", zero.join(", "))));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(Error::Config("lora_alpha must be positive".into()));
        }
        for (name, width) in [
            ("embed_dim", self.embed_dim),
            ("image_dim", self.image_dim),
            ("query_dim", self.query_dim),
        ] {
            if width % self.heads != 0 {
                return Err(Error::Config(format!("{name} {width} not divisible by {} heads", self.heads)));
            }
        }
        if !(1..=4).contains(&self.num_experts) {
            return Err(Error::Config(format!("expert count must be 1..4, got {}", self.num_experts)));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.lora_rank >= self.embed_dim.min(self.query_dim) {
            return Err(Error::Config(format!("lora rank {} too large", self.lora_rank)));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        macro_rules! put {
            ($($f:ident),*) => { $( kv.set(&format!("{prefix}{}", stringify!($f)), self.$f); )* };
        }
        config_fields!(put);
        kv.set(&format!("{prefix}lora_alpha"), self.lora_alpha);
    }

    /// Overrides fields present in `kv` under `prefix`.
    pub fn read_kv(&mut self, kv: &KvMap, prefix: &str) -> Result<()> {
        macro_rules! get {
            ($($f:ident),*) => { $( kv.read_into(&format!("{prefix}{}", stringify!($f)), &mut self.$f)?; )* };
        }
        config_fields!(get);
        kv.read_into(&format!("{prefix}lora_alpha"), &mut self.lora_alpha)?;
        Ok(())
    }

    pub fn keys(prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        macro_rules! names {
            ($($f:ident),*) => { $( out.push(format!("{prefix}{}", stringify!($f))); )* };
        }
        config_fields!(names);
        out.push(format!("{prefix}lora_alpha"));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().num_patches(), 16);
    }

    #[test]
    fn invalid_configs() {
        let bad = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { num_experts: 5, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { num_queries: 0, ..ModelConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("num_queries"));
    }

    #[test]
    fn kv_round_trip() {
        let c = ModelConfig { num_experts: 2, lora_alpha: 3.5, ..ModelConfig::tiny() };
        let mut kv = KvMap::new();
        c.write_kv(&mut kv, "model.");
        let mut back = ModelConfig::default();
        back.read_kv(&kv, "model.").unwrap();
        assert_eq!(back, c);
        assert_eq!(ModelConfig::keys("model.").len(), kv.len());
    }
}
