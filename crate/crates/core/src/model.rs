//! The full captioner: frozen image encoder, query encoder, and either one
//! decoder (first stage) or a mixture of role experts.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::llm::{DecoderModel, Prompt, PromptValue};
use crate::lora::{apply_plan, merge_all, LoraPlan};
use crate::moe::MoeModel;
use crate::nn::{named_params, set_trainable, visit_params_mut, Module};
use crate::pretrain::Foundation;
use crate::scene::{Role, SceneImage};
use crate::tensor::{Graph, Var};
use crate::vision::{ImageEncoder, VisualFeatures, VlmEncoder, VlmFeatures};
use crate::vocab::Vocab;

/// Which training procedure produced a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageTag {
    /// Base weights before any captioning stage.
    Pretrained,
    Stage1,
    Stage2,
    OneStage,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Pretrained => "pretrained",
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
            StageTag::OneStage => "onestage",
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(StageTag::Pretrained),
            "stage1" => Ok(StageTag::Stage1),
            "stage2" => Ok(StageTag::Stage2),
            "onestage" => Ok(StageTag::OneStage),
            _ => Err(Error::Checkpoint(format!("unknown stage tag `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum LanguageHead {
    Single(DecoderModel),
    Moe(MoeModel),
}

#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub stage: StageTag,
    pub image: ImageEncoder,
    pub vlm: VlmEncoder,
    pub head: LanguageHead,
}

impl CaptionModel {
    /// Randomly initialised bases, for tests that do not need pretraining.
    pub fn random_base(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Foundation> {
        Ok(Foundation {
            image: ImageEncoder::new(cfg, rng)?,
            vlm: VlmEncoder::new(cfg, rng)?,
            llm: DecoderModel::new(cfg, rng)?,
        })
    }

    /// First-stage model on copies of `base`: frozen image encoder; adapters
    /// on the query encoder and decoder; trainable queries and decoder
    /// vocabulary interface (token table and output head).
    pub fn stage1(cfg: &ModelConfig, base: &Foundation, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        check_base(cfg, base)?;
        let mut m = Self {
            config: cfg.clone(),
            stage: StageTag::Stage1,
            image: base.image.clone(),
            vlm: base.vlm.clone(),
            head: LanguageHead::Single(base.llm.clone_weights(cfg)?),
        };
        set_trainable(&mut m, false);
        apply_plan(&mut m, LoraPlan::StageOne, cfg.lora_rank, cfg.lora_alpha, rng)?;
        m.vlm.queries.set_trainable(true);
        if let LanguageHead::Single(d) = &mut m.head {
            unfreeze_vocab_interface(d);
        }
        Ok(m)
    }

    /// Second stage from a first-stage model: decoder adapters merged, the
    /// decoder cloned per role, fresh adapters on every expert, encoders
    /// frozen. Only expert adapters and the router train.
    pub fn into_stage2(self, num_experts: usize, router: bool, rng: &mut impl Rng) -> Result<Self> {
        let Self {
            mut config,
            stage,
            image,
            mut vlm,
            head,
        } = self;
        let LanguageHead::Single(mut llm) = head else {
            return Err(Error::Checkpoint(format!(
                "second stage needs a first-stage model, got {stage}"
            )));
        };
        config.num_experts = num_experts;
        config.validate()?;
        merge_all(&mut llm, "")?;
        set_trainable(&mut vlm, false);
        let mut moe = MoeModel::from_decoder(&config, &llm, router, rng)?;
        set_trainable(&mut moe.experts, false);
        let mut m = Self {
            config,
            stage: StageTag::Stage2,
            image,
            vlm,
            head: LanguageHead::Moe(moe),
        };
        let (rank, alpha) = (m.config.lora_rank, m.config.lora_alpha);
        apply_plan(&mut m, LoraPlan::StageTwo, rank, alpha, rng)?;
        Ok(m)
    }

    /// Single-stage model: the query encoder, router and every expert adapt
    /// together from `base`, with no first stage.
    pub fn onestage(cfg: &ModelConfig, base: &Foundation, router: bool, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        check_base(cfg, base)?;
        let moe = MoeModel::from_decoder(cfg, &base.llm, router, rng)?;
        let mut m = Self {
            config: cfg.clone(),
            stage: StageTag::OneStage,
            image: base.image.clone(),
            vlm: base.vlm.clone(),
            head: LanguageHead::Moe(moe),
        };
        set_trainable(&mut m.image, false);
        set_trainable(&mut m.vlm, false);
        if let LanguageHead::Moe(moe) = &mut m.head {
            set_trainable(&mut moe.experts, false);
        }
        apply_plan(&mut m, LoraPlan::StageOne, cfg.lora_rank, cfg.lora_alpha, rng)?;
        apply_plan(&mut m, LoraPlan::StageTwo, cfg.lora_rank, cfg.lora_alpha, rng)?;
        m.vlm.queries.set_trainable(true);
        if let LanguageHead::Moe(moe) = &mut m.head {
            moe.experts.iter_mut().for_each(unfreeze_vocab_interface);
        }
        Ok(m)
    }

    pub fn moe(&self) -> Option<&MoeModel> {
        match &self.head {
            LanguageHead::Moe(m) => Some(m),
            LanguageHead::Single(_) => None,
        }
    }

    pub fn moe_mut(&mut self) -> Option<&mut MoeModel> {
        match &mut self.head {
            LanguageHead::Moe(m) => Some(m),
            LanguageHead::Single(_) => None,
        }
    }

    /// Roles of the decoders, in aggregation order.
    pub fn roles(&self) -> Vec<Role> {
        match &self.head {
            LanguageHead::Single(_) => vec![Role::Full],
            LanguageHead::Moe(m) => m.roles.clone(),
        }
    }

    pub fn has_router(&self) -> bool {
        self.moe().is_some_and(|m| m.router.is_some())
    }

    pub fn image_features(&self, img: &SceneImage) -> Result<VisualFeatures> {
        self.image.encode_image(img)
    }

    pub fn vlm_features(&self, fi: &VisualFeatures, instr: &[usize]) -> Result<VlmFeatures> {
        self.vlm.encode(fi, instr)
    }

    /// First-stage loss for one sample, with the query encoder on the graph.
    pub fn stage1_loss(&self, g: &mut Graph, fi: Var, instr: &[usize], target: &[usize]) -> Result<Var> {
        let LanguageHead::Single(llm) = &self.head else {
            return Err(Error::Config("first-stage loss needs a single decoder".into()));
        };
        let fv = self.vlm.forward(g, fi, instr)?;
        llm.forward_loss(g, fv, Prompt::Tokens(instr), target)
    }

    /// Caption text from precomputed query-encoder rows.
    pub fn caption_from_features(&self, vocab: &Vocab, fv: &VlmFeatures, instr: &[usize]) -> Result<String> {
        let max_len = self.config.max_caption_len;
        match &self.head {
            LanguageHead::Single(llm) => {
                let out = llm.generate(&fv.0, &PromptValue::Tokens(instr.to_vec()), max_len)?;
                vocab.decode(&out.ids)
            }
            LanguageHead::Moe(moe) => moe.generate(vocab, &fv.0, instr, max_len),
        }
    }

    pub fn caption(&self, vocab: &Vocab, img: &SceneImage, instr: &[usize]) -> Result<String> {
        let fi = self.image_features(img)?;
        let fv = self.vlm_features(&fi, instr)?;
        self.caption_from_features(vocab, &fv, instr)
    }
}

fn check_base(cfg: &ModelConfig, base: &Foundation) -> Result<()> {
    let expected = CaptionModel::random_base(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let shapes = |f: &Foundation| -> Vec<(String, Vec<usize>)> {
        named_params(f).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect()
    };
    if shapes(base) != shapes(&expected) {
        return Err(Error::Config("pretrained weights do not match the model configuration".into()));
    }
    Ok(())
}

fn unfreeze_vocab_interface(d: &mut DecoderModel) {
    d.tok_embed.set_trainable(true);
    visit_params_mut(&mut d.head, "", &mut |_, p| p.set_trainable(true));
}

impl Module for CaptionModel {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        let mut out: Vec<(String, &dyn Module)> =
            vec![("image".into(), &self.image), ("vlm".into(), &self.vlm)];
        match &self.head {
            LanguageHead::Single(d) => out.push(("llm".into(), d)),
            LanguageHead::Moe(m) => out.extend(m.children()),
        }
        out
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        let mut out: Vec<(String, &mut dyn Module)> =
            vec![("image".into(), &mut self.image), ("vlm".into(), &mut self.vlm)];
        match &mut self.head {
            LanguageHead::Single(d) => out.push(("llm".into(), d)),
            LanguageHead::Moe(m) => out.extend(m.children_mut()),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::active_sites;
    use crate::nn::{param_count, param_hash, trainable_count};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stage_transitions() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = CaptionModel::random_base(&cfg, &mut rng).unwrap();
        let m1 = CaptionModel::stage1(&cfg, &base, &mut rng).unwrap();
        let sites1 = active_sites(&m1);
        // per query block: 2 self-attention, 4 cross-attention, 2 FFN; the
        // projection FFN and FC; per decoder block: q, v and 2 FFN
        assert_eq!(sites1.len(), cfg.qformer_layers * 8 + 3 + cfg.decoder_layers * 4);
        assert_eq!(trainable_count(&m1.image), 0);
        let ratio = trainable_count(&m1) as f64 / param_count(&m1) as f64;
        assert!(ratio < 0.1, "stage 1 trainable ratio {ratio}");

        let llm_hash = match &m1.head {
            LanguageHead::Single(d) => {
                let mut d = d.clone();
                merge_all(&mut d, "").unwrap();
                param_hash(&d)
            }
            _ => unreachable!(),
        };
        let m2 = m1.into_stage2(3, true, &mut rng).unwrap();
        let moe = m2.moe().unwrap();
        let sites2 = active_sites(moe);
        assert_eq!(sites2.len(), 3 * cfg.decoder_layers * 4);
        assert_eq!(trainable_count(&m2.vlm), 0);
        for e in &moe.experts {
            let mut e = e.clone();
            merge_all(&mut e, "").unwrap();
            assert_eq!(param_hash(&e), llm_hash);
        }
        let ratio = trainable_count(&m2) as f64 / param_count(&m2) as f64;
        assert!(ratio < 0.1, "stage 2 trainable ratio {ratio}");
        assert!(m2.clone().into_stage2(3, true, &mut rng).is_err());
    }
}
