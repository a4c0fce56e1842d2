//! Base-model pretraining on an independently seeded synthetic corpus.
//!
//! The adapted system starts from encoders and decoders that were pretrained
//! elsewhere. At this scale those bases are produced here: the image encoder
//! learns to describe each patch (class, color, count), after which it stays
//! frozen; the query encoder and decoder then learn a generic grounding task,
//! naming every object with its grid position. Both stages use only their own
//! data seed, so the caption splits used later are never seen.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::llm::{DecoderModel, Prompt};
use crate::model::StageTag;
use crate::nn::{set_trainable, Linear, Module};
use crate::optim::AdamWConfig;
use crate::scene::{generate, ObjectClass, Role, Sample, SceneGraph, Theme, GRID, SEP_TEXT};
use crate::tensor::{Graph, Tensor, Var};
use crate::train::{fit, stream, RunLog, TrainConfig};
use crate::vision::{ImageEncoder, VlmEncoder};
use crate::vocab::Vocab;

const VISION_INIT: u64 = 11;
const VISION_SHUFFLE: u64 = 12;
const BASE_INIT: u64 = 13;
const BASE_SHUFFLE: u64 = 14;

/// Classes per patch: every object class plus "empty".
pub const PATCH_CLASSES: usize = ObjectClass::ALL.len() + 1;
/// Colors per patch, plus "empty".
pub const PATCH_COLORS: usize = crate::scene::Color::ALL.len() + 1;
/// Counts 1..=4 plus "empty" at 0.
pub const PATCH_COUNTS: usize = 5;
pub const THEMES: usize = Theme::ALL.len();

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub vision_samples: usize,
    pub vision_epochs: usize,
    pub base_samples: usize,
    pub base_epochs: usize,
    pub lr: f64,
    /// Caption aspects the query encoder and decoder are pretrained on,
    /// joined by the separator.
    pub base_roles: Vec<Role>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 1000,
            data_seed: 1000,
            vision_samples: 2000,
            vision_epochs: 2,
            base_samples: 8000,
            base_epochs: 2,
            lr: 3e-3,
            base_roles: vec![Role::Theme, Role::Objects, Role::Positions],
        }
    }
}

impl PretrainConfig {
    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        kv.set(&format!("{prefix}seed"), self.seed);
        kv.set(&format!("{prefix}data_seed"), self.data_seed);
        kv.set(&format!("{prefix}vision_samples"), self.vision_samples);
        kv.set(&format!("{prefix}vision_epochs"), self.vision_epochs);
        kv.set(&format!("{prefix}base_samples"), self.base_samples);
        kv.set(&format!("{prefix}base_epochs"), self.base_epochs);
        kv.set(&format!("{prefix}lr"), self.lr);
        let roles: Vec<&str> = self.base_roles.iter().map(|r| r.label()).collect();
        kv.set(&format!("{prefix}base_roles"), roles.join(","));
    }

    pub fn read_kv(&mut self, kv: &KvMap, prefix: &str) -> Result<()> {
        kv.read_into(&format!("{prefix}seed"), &mut self.seed)?;
        kv.read_into(&format!("{prefix}data_seed"), &mut self.data_seed)?;
        kv.read_into(&format!("{prefix}vision_samples"), &mut self.vision_samples)?;
        kv.read_into(&format!("{prefix}vision_epochs"), &mut self.vision_epochs)?;
        kv.read_into(&format!("{prefix}base_samples"), &mut self.base_samples)?;
        kv.read_into(&format!("{prefix}base_epochs"), &mut self.base_epochs)?;
        kv.read_into(&format!("{prefix}lr"), &mut self.lr)?;
        let key = format!("{prefix}base_roles");
        if let Some(s) = kv.get(&key) {
            self.base_roles = s
                .split(',')
                .map(|r| {
                    Role::from_label(r.trim())
                        .ok_or_else(|| Error::Config(format!("unknown role `{r}` in `{key}`")))
                })
                .collect::<Result<_>>()?;
            if self.base_roles.is_empty() {
                return Err(Error::Config(format!("`{key}` is empty")));
            }
        }
        Ok(())
    }

    pub fn keys(prefix: &str) -> Vec<String> {
        let mut kv = KvMap::new();
        Self::default().write_kv(&mut kv, prefix);
        kv.keys().map(str::to_string).collect()
    }

    /// Pretraining caption of one sample.
    pub fn base_target(&self, sample: &Sample) -> String {
        let parts: Vec<String> = self.base_roles.iter().map(|&r| sample.captions.target(r)).collect();
        parts.join(&format!(" {SEP_TEXT} "))
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            adamw: AdamWConfig::default(),
            ..TrainConfig::default()
        }
    }
}

/// Per-patch `(class, color, count)` labels in patch order; index 0 of each
/// label means the patch is empty.
pub fn patch_labels(graph: &SceneGraph) -> Vec<(usize, usize, usize)> {
    let mut out = vec![(0, 0, 0); GRID * GRID];
    for o in &graph.objects {
        if let Some(c) = o.cell {
            out[c.row as usize * GRID + c.col as usize] =
                (o.class as usize + 1, o.color as usize + 1, o.count as usize);
        }
    }
    out
}

/// Targets of the vision pretraining task for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisionLabels {
    pub theme: usize,
    pub patches: Vec<(usize, usize, usize)>,
}

impl VisionLabels {
    pub fn of(graph: &SceneGraph) -> Self {
        Self {
            theme: graph.theme.map_or(0, |t| t as usize),
            patches: patch_labels(graph),
        }
    }
}

/// Linear read-outs used only while pretraining the image encoder: three
/// per patch and a theme read-out of the mean patch feature.
#[derive(Clone, Debug)]
pub struct PatchHeads {
    pub class: Linear,
    pub color: Linear,
    pub count: Linear,
    pub theme: Linear,
}

impl PatchHeads {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            class: Linear::new(dim, PATCH_CLASSES, rng),
            color: Linear::new(dim, PATCH_COLORS, rng),
            count: Linear::new(dim, PATCH_COUNTS, rng),
            theme: Linear::new(dim, THEMES, rng),
        }
    }

    /// Summed cross-entropy of the four read-outs; patch terms are averaged
    /// over patches.
    pub fn loss(&self, g: &mut Graph, features: Var, labels: &VisionLabels) -> Result<Var> {
        let p = &labels.patches;
        let class: Vec<usize> = p.iter().map(|l| l.0).collect();
        let color: Vec<usize> = p.iter().map(|l| l.1).collect();
        let count: Vec<usize> = p.iter().map(|l| l.2).collect();
        let a = self.class.forward(g, features)?;
        let a = g.cross_entropy(a, &class, None)?;
        let b = self.color.forward(g, features)?;
        let b = g.cross_entropy(b, &color, None)?;
        let c = self.count.forward(g, features)?;
        let c = g.cross_entropy(c, &count, None)?;
        let pooled = g.mean_rows(features)?;
        let t = self.theme.forward(g, pooled)?;
        let t = g.cross_entropy(t, &[labels.theme], None)?;
        let s = g.add(a, b)?;
        let s = g.add(s, c)?;
        g.add(s, t)
    }

    /// Fraction of patches whose three labels are all predicted exactly, and
    /// fraction of images whose theme is.
    pub fn accuracy(&self, encoder: &ImageEncoder, samples: &[Sample]) -> Result<(f64, f64)> {
        let mut hit = 0usize;
        let mut total = 0usize;
        let mut themes = 0usize;
        for s in samples {
            let f = encoder.encode_image(&s.image)?;
            let mut g = Graph::no_grad();
            let x = g.constant(f.0);
            let heads = [&self.class, &self.color, &self.count];
            let mut preds = Vec::new();
            for h in heads {
                let logits = h.forward(&mut g, x)?;
                preds.push(argmax_rows(g.value(logits)));
            }
            let pooled = g.mean_rows(x)?;
            let t = self.theme.forward(&mut g, pooled)?;
            if argmax_rows(g.value(t))[0] == VisionLabels::of(&s.graph).theme {
                themes += 1;
            }
            for (p, l) in patch_labels(&s.graph).into_iter().enumerate() {
                total += 1;
                if (preds[0][p], preds[1][p], preds[2][p]) == l {
                    hit += 1;
                }
            }
        }
        Ok((hit as f64 / total.max(1) as f64, themes as f64 / samples.len().max(1) as f64))
    }
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

impl Module for PatchHeads {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        vec![
            ("class".into(), &self.class),
            ("color".into(), &self.color),
            ("count".into(), &self.count),
            ("theme".into(), &self.theme),
        ]
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        vec![
            ("class".into(), &mut self.class),
            ("color".into(), &mut self.color),
            ("count".into(), &mut self.count),
            ("theme".into(), &mut self.theme),
        ]
    }
}

struct VisionTask {
    encoder: ImageEncoder,
    heads: PatchHeads,
}

impl Module for VisionTask {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        vec![("encoder".into(), &self.encoder), ("heads".into(), &self.heads)]
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        vec![("encoder".into(), &mut self.encoder), ("heads".into(), &mut self.heads)]
    }
}

/// Pretrained weights every captioner starts from.
#[derive(Clone, Debug)]
pub struct Foundation {
    pub image: ImageEncoder,
    pub vlm: VlmEncoder,
    pub llm: DecoderModel,
}

impl Module for Foundation {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        vec![
            ("image".into(), &self.image),
            ("vlm".into(), &self.vlm),
            ("llm".into(), &self.llm),
        ]
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        vec![
            ("image".into(), &mut self.image),
            ("vlm".into(), &mut self.vlm),
            ("llm".into(), &mut self.llm),
        ]
    }
}

/// Image encoder trained on patch labels; returned frozen with its heads.
pub fn pretrain_vision(
    pc: &PretrainConfig,
    cfg: &ModelConfig,
    log: &mut RunLog,
) -> Result<(ImageEncoder, PatchHeads)> {
    let mut rng = stream(pc.seed, VISION_INIT);
    let mut task = VisionTask {
        encoder: ImageEncoder::new(cfg, &mut rng)?,
        heads: PatchHeads::new(cfg.image_dim, &mut rng),
    };
    let data = generate(pc.data_seed, pc.vision_samples);
    let inputs = data
        .samples
        .iter()
        .map(|s| Ok((task.encoder.patches(&s.image)?, VisionLabels::of(&s.graph))))
        .collect::<Result<Vec<_>>>()?;
    fit(
        &mut task,
        inputs.len(),
        pc.vision_epochs,
        &pc.train_config(),
        &mut stream(pc.seed, VISION_SHUFFLE),
        StageTag::Stage1,
        "vision",
        log,
        |m, g, i| {
            let p = g.constant(inputs[i].0.clone());
            let f = m.encoder.forward(g, p)?;
            m.heads.loss(g, f, &inputs[i].1)
        },
    )?;
    let VisionTask { mut encoder, heads } = task;
    set_trainable(&mut encoder, false);
    Ok((encoder, heads))
}

struct BaseTask {
    vlm: VlmEncoder,
    llm: DecoderModel,
}

impl Module for BaseTask {
    fn children(&self) -> Vec<(String, &dyn Module)> {
        vec![("vlm".into(), &self.vlm), ("llm".into(), &self.llm)]
    }

    fn children_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        vec![("vlm".into(), &mut self.vlm), ("llm".into(), &mut self.llm)]
    }
}

/// Full pretraining: vision first, then query encoder and decoder on the
/// grounding captions of a second, independently seeded corpus.
pub fn pretrain(pc: &PretrainConfig, cfg: &ModelConfig, vocab: &Vocab, log: &mut RunLog) -> Result<Foundation> {
    cfg.validate()?;
    let (image, _) = pretrain_vision(pc, cfg, log)?;
    let mut rng = stream(pc.seed, BASE_INIT);
    let mut task = BaseTask {
        vlm: VlmEncoder::new(cfg, &mut rng)?,
        llm: DecoderModel::new(cfg, &mut rng)?,
    };
    // a different draw from the vision corpus
    let data = generate(pc.data_seed.wrapping_add(1), pc.base_samples);
    let inputs = data
        .samples
        .iter()
        .map(|s| {
            Ok((
                image.encode_image(&s.image)?.0,
                vocab.encode(s.instruction())?.ids,
                vocab.encode(&pc.base_target(s))?.ids,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    fit(
        &mut task,
        inputs.len(),
        pc.base_epochs,
        &pc.train_config(),
        &mut stream(pc.seed, BASE_SHUFFLE),
        StageTag::Stage1,
        "base",
        log,
        |m, g, i| {
            let (fi, instr, target) = &inputs[i];
            let fi = g.constant(fi.clone());
            let fv = m.vlm.forward(g, fi, instr)?;
            m.llm.forward_loss(g, fv, Prompt::Tokens(instr), target)
        },
    )?;
    let BaseTask { vlm, llm } = task;
    Ok(Foundation { image, vlm, llm })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_mark_occupied_cells() {
        let ds = generate(3, 4);
        for s in &ds.samples {
            let labels = patch_labels(&s.graph);
            let occupied = labels.iter().filter(|l| l.0 > 0).count();
            assert_eq!(occupied, s.graph.objects.len());
            assert!(labels.iter().all(|l| (l.0 == 0) == (l.2 == 0) && (l.0 == 0) == (l.1 == 0)));
        }
    }

    #[test]
    fn kv_round_trip() {
        let pc = PretrainConfig {
            base_roles: vec![Role::Theme, Role::Relations],
            lr: 1e-3,
            ..PretrainConfig::default()
        };
        let mut kv = KvMap::new();
        pc.write_kv(&mut kv, "pretrain.");
        let mut back = PretrainConfig::default();
        back.read_kv(&kv, "pretrain.").unwrap();
        assert_eq!(back, pc);
        assert_eq!(PretrainConfig::keys("pretrain.").len(), kv.len());
    }
}
