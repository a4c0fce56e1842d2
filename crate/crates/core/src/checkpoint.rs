//! Self-contained binary checkpoints.
//!
//! Layout: a `rsmoe-checkpoint <version>` line, a line holding the manifest
//! length in bytes, the manifest (key-value text), the tensor payload
//! (64-bit little-endian floats, tensors back to back), and finally the
//! SHA-256 digest of everything before it.
//!
//! The manifest names every tensor with its shape, byte offset and freeze
//! flag, and records what is needed to rebuild the module tree the tensors
//! belong to: stage tag, model configuration, roles, router presence,
//! vocabulary, and how many adapters each linear layer has absorbed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::{CaptionModel, StageTag};
use crate::nn::{hex, visit_linears, visit_linears_mut, visit_params, visit_params_mut, Module};
use crate::pretrain::Foundation;
use crate::scene::Role;
use crate::vocab::Vocab;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "rsmoe-checkpoint";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: StageTag,
    /// Seed of the run that produced the weights; later stages derive their
    /// random streams from it.
    pub seed: u64,
    pub config: ModelConfig,
    pub router: bool,
    pub roles: Vec<Role>,
    pub vocab: Vec<String>,
    /// Linear layers that absorbed adapters, with the number absorbed.
    pub merges: BTreeMap<String, u32>,
    pub tensors: Vec<StoredTensor>,
}

/// Stored and recomputed digests of a file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Integrity {
    pub stored: String,
    pub computed: String,
}

impl Integrity {
    pub fn ok(&self) -> bool {
        self.stored == self.computed
    }
}

fn snapshot(m: &dyn Module) -> (Vec<StoredTensor>, BTreeMap<String, u32>) {
    let mut tensors = Vec::new();
    visit_params(m, "", &mut |name, p| {
        tensors.push(StoredTensor {
            name: name.to_string(),
            shape: p.value().shape().to_vec(),
            data: p.value().data().to_vec(),
            trainable: p.trainable(),
        })
    });
    let mut merges = BTreeMap::new();
    visit_linears(m, "", &mut |path, l| {
        if l.merges > 0 {
            merges.insert(path.to_string(), l.merges);
        }
    });
    (tensors, merges)
}

impl Checkpoint {
    pub fn from_model(model: &CaptionModel, vocab: &Vocab, seed: u64) -> Self {
        let (tensors, merges) = snapshot(model);
        Self {
            stage: model.stage,
            seed,
            config: model.config.clone(),
            router: model.has_router(),
            roles: model.moe().map(|m| m.roles.clone()).unwrap_or_default(),
            vocab: vocab.tokens().to_vec(),
            merges,
            tensors,
        }
    }

    pub fn from_foundation(base: &Foundation, cfg: &ModelConfig, vocab: &Vocab, seed: u64) -> Self {
        let (tensors, merges) = snapshot(base);
        Self {
            stage: StageTag::Pretrained,
            seed,
            config: cfg.clone(),
            router: false,
            roles: Vec::new(),
            vocab: vocab.tokens().to_vec(),
            merges,
            tensors,
        }
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_tokens(self.vocab.clone())
    }

    /// Copies stored values and freeze flags into `target`, whose parameter
    /// names and shapes must match exactly.
    fn install(&self, target: &mut dyn Module) -> Result<()> {
        let mut names = Vec::new();
        visit_params(target, "", &mut |n, _| names.push(n.to_string()));
        let stored: Vec<&str> = self.tensors.iter().map(|t| t.name.as_str()).collect();
        if names != stored {
            let missing: Vec<_> = names.iter().filter(|n| !stored.contains(&n.as_str())).collect();
            let extra: Vec<_> = stored.iter().filter(|n| !names.iter().any(|m| m == *n)).collect();
            return Err(Error::Checkpoint(format!(
                "tensor set does not match a {} model: missing {missing:?}, unexpected {extra:?}",
                self.stage
            )));
        }
        let mut err = None;
        let mut it = self.tensors.iter();
        visit_params_mut(target, "", &mut |name, p| {
            let t = it.next().expect("same length");
            if err.is_some() {
                return;
            }
            if p.value().shape() != t.shape.as_slice() {
                err = Some(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape,
                    p.value().shape()
                )));
                return;
            }
            p.value_mut().data_mut().copy_from_slice(&t.data);
            p.set_trainable(t.trainable);
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut seen = 0;
        visit_linears_mut(target, "", &mut |path, l| {
            l.merges = self.merges.get(path).copied().unwrap_or(0);
            seen += usize::from(self.merges.contains_key(path));
        });
        if seen != self.merges.len() {
            return Err(Error::Checkpoint("merge record names unknown layers".into()));
        }
        Ok(())
    }

    /// Rebuilds the captioning model.
    pub fn model(&self) -> Result<CaptionModel> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = CaptionModel::random_base(cfg, &mut rng)?;
        let mut m = match self.stage {
            StageTag::Pretrained => {
                return Err(Error::Checkpoint(
                    "a pretrained checkpoint holds base weights, not a captioning model".into(),
                ))
            }
            StageTag::Stage1 => CaptionModel::stage1(cfg, &base, &mut rng)?,
            StageTag::Stage2 => {
                CaptionModel::stage1(cfg, &base, &mut rng)?.into_stage2(cfg.num_experts, self.router, &mut rng)?
            }
            StageTag::OneStage => CaptionModel::onestage(cfg, &base, self.router, &mut rng)?,
        };
        if self.stage != StageTag::Stage1 && m.roles() != self.roles {
            return Err(Error::Checkpoint(format!(
                "stored roles {:?} do not match a {}-expert model",
                self.roles, cfg.num_experts
            )));
        }
        self.install(&mut m)?;
        Ok(m)
    }

    /// Rebuilds pretrained base weights.
    pub fn foundation(&self) -> Result<Foundation> {
        if self.stage != StageTag::Pretrained {
            return Err(Error::Checkpoint(format!(
                "expected a pretrained checkpoint, got {}",
                self.stage
            )));
        }
        let mut base = CaptionModel::random_base(&self.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.install(&mut base)?;
        Ok(base)
    }

    fn manifest(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("stage", self.stage);
        kv.set("seed", self.seed);
        kv.set("router", self.router);
        let roles: Vec<&str> = self.roles.iter().map(|r| r.label()).collect();
        kv.set("roles", roles.join(","));
        kv.set("vocab", self.vocab.join(" "));
        kv.set("merged_adapters", !self.merges.is_empty());
        let merges: Vec<String> = self.merges.iter().map(|(p, n)| format!("{p}:{n}")).collect();
        kv.set("merges", merges.join(","));
        self.config.write_kv(&mut kv, "model.");
        let mut offset = 0usize;
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            kv.set(
                &format!("tensor.{}", t.name),
                format!("{};{offset};{}", dims.join("x"), u8::from(t.trainable)),
            );
            offset += t.data.len() * 8;
        }
        kv.set("tensors", self.tensors.len());
        kv.set("payload_bytes", offset);
        kv
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self.manifest().to_text();
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n{}\n", manifest.len()).into_bytes();
        out.extend_from_slice(manifest.as_bytes());
        for t in &self.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses a checkpoint and rejects it if the stored digest disagrees.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (ck, integrity) = Self::read_unverified(bytes)?;
        if !integrity.ok() {
            return Err(Error::Checksum {
                stored: integrity.stored,
                computed: integrity.computed,
            });
        }
        Ok(ck)
    }

    /// Parses a structurally sound checkpoint without judging its digest;
    /// the caller decides what a mismatch means.
    pub fn read_unverified(bytes: &[u8]) -> Result<(Self, Integrity)> {
        let (first, rest) = split_line(bytes)?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Checkpoint("not a checkpoint file".into()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::Version {
                found: version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let (len_line, rest) = split_line(rest)?;
        let manifest_len: usize = len_line
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad manifest length `{len_line}`")))?;
        if rest.len() < manifest_len {
            return Err(truncated(rest.len(), manifest_len));
        }
        let (manifest, rest) = rest.split_at(manifest_len);
        let manifest = std::str::from_utf8(manifest)
            .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        let kv = KvMap::parse(manifest)?;
        let payload_len: usize = kv.parsed("payload_bytes")?;
        if rest.len() < payload_len + DIGEST_LEN {
            return Err(truncated(rest.len(), payload_len + DIGEST_LEN));
        }
        if rest.len() > payload_len + DIGEST_LEN {
            return Err(Error::Checkpoint(format!(
                "{} unexpected bytes after the digest",
                rest.len() - payload_len - DIGEST_LEN
            )));
        }
        let (payload, stored) = rest.split_at(payload_len);
        let body_len = bytes.len() - DIGEST_LEN;
        let integrity = Integrity {
            stored: hex(stored),
            computed: hex(&Sha256::digest(&bytes[..body_len])),
        };
        Ok((Self::from_manifest(&kv, payload)?, integrity))
    }

    fn from_manifest(kv: &KvMap, payload: &[u8]) -> Result<Self> {
        let stage: StageTag = kv.require("stage")?.parse()?;
        let mut config = ModelConfig::default();
        config.read_kv(kv, "model.")?;
        config.validate()?;
        let roles = split_list(kv.require("roles")?)
            .map(|r| Role::from_label(r).ok_or_else(|| Error::Checkpoint(format!("unknown role `{r}`"))))
            .collect::<Result<Vec<_>>>()?;
        let vocab: Vec<String> = kv.require("vocab")?.split(' ').map(str::to_string).collect();
        let merges = split_list(kv.require("merges")?)
            .map(|m| {
                let (p, n) = m
                    .rsplit_once(':')
                    .ok_or_else(|| Error::Checkpoint(format!("bad merge record `{m}`")))?;
                let n = n
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad merge count in `{m}`")))?;
                Ok((p.to_string(), n))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        if kv.parsed::<bool>("merged_adapters")? == merges.is_empty() {
            return Err(Error::Checkpoint("merged_adapters flag disagrees with merge record".into()));
        }

        let mut entries = Vec::new();
        for (key, value) in kv.iter() {
            let Some(name) = key.strip_prefix("tensor.") else { continue };
            let bad = || Error::Checkpoint(format!("bad tensor entry `{key}={value}`"));
            let mut fields = value.split(';');
            let (Some(dims), Some(offset), Some(flag), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad());
            };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            let offset: usize = offset.parse().map_err(|_| bad())?;
            let trainable = match flag {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            entries.push((offset, name.to_string(), shape, trainable));
        }
        if entries.len() != kv.parsed::<usize>("tensors")? {
            return Err(Error::Checkpoint("tensor count disagrees with the manifest".into()));
        }
        entries.sort_by_key(|e| e.0);
        let mut next = 0usize;
        let mut tensors = Vec::with_capacity(entries.len());
        for (offset, name, shape, trainable) in entries {
            if offset != next {
                return Err(Error::Checkpoint(format!(
                    "`{name}` starts at byte {offset}, expected {next}"
                )));
            }
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > payload.len() {
                return Err(truncated(payload.len(), end));
            }
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(StoredTensor {
                name,
                shape,
                data,
                trainable,
            });
            next = end;
        }
        if next != payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensors cover {next} of {} payload bytes",
                payload.len()
            )));
        }
        Ok(Self {
            stage,
            seed: kv.parsed("seed")?,
            config,
            router: kv.parsed("router")?,
            roles,
            vocab,
            merges,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').filter(|x| !x.is_empty())
}

fn split_line(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    Ok((line, &bytes[end + 1..]))
}

fn truncated(have: usize, need: usize) -> Error {
    Error::Checkpoint(format!("truncated file: {have} bytes where at least {need} are needed"))
}

/// Whether a model of stage `found` may seed a run of stage `wanted`.
pub fn check_stage(found: StageTag, wanted: StageTag) -> Result<()> {
    let ok = match wanted {
        StageTag::Stage1 | StageTag::OneStage => found == StageTag::Pretrained,
        StageTag::Stage2 => matches!(found, StageTag::Stage1 | StageTag::Stage2),
        StageTag::Pretrained => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("a {found} checkpoint cannot start a {wanted} run")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> (CaptionModel, Vocab) {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = CaptionModel::random_base(&cfg, &mut rng).unwrap();
        let m = CaptionModel::stage1(&cfg, &base, &mut rng).unwrap();
        (m.into_stage2(3, true, &mut rng).unwrap(), Vocab::synthetic())
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (m, v) = model();
        let bytes = Checkpoint::from_model(&m, &v, 9).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let rebuilt = back.model().unwrap();
        assert_eq!(Checkpoint::from_model(&rebuilt, &v, 9).to_bytes(), bytes);
        assert_eq!(crate::nn::param_hash(&rebuilt), crate::nn::param_hash(&m));
    }

    #[test]
    fn corruption_and_truncation() {
        let (m, v) = model();
        let mut bytes = Checkpoint::from_model(&m, &v, 1).to_bytes();
        let k = bytes.len() - DIGEST_LEN - 5;
        bytes[k] ^= 1;
        let (_, integrity) = Checkpoint::read_unverified(&bytes).unwrap();
        assert!(!integrity.ok());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum { .. })));
        let short = &bytes[..bytes.len() - 40];
        assert!(matches!(Checkpoint::from_bytes(short), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_is_checked() {
        let (m, v) = model();
        let bytes = Checkpoint::from_model(&m, &v, 1).to_bytes();
        let text = String::from_utf8_lossy(&bytes[..20]).replace(" 1\n", " 7\n");
        let mut other = text.into_bytes();
        other.extend_from_slice(&bytes[20..]);
        match Checkpoint::from_bytes(&other) {
            Err(Error::Version { found, expected }) => {
                assert_eq!((found.as_str(), expected.as_str()), ("7", "1"));
            }
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn stage_contract() {
        use StageTag::*;
        assert!(check_stage(Stage1, Stage2).is_ok());
        assert!(check_stage(Stage2, Stage2).is_ok());
        assert!(check_stage(Pretrained, OneStage).is_ok());
        assert!(check_stage(Pretrained, Stage2).is_err());
        assert!(check_stage(Stage2, Stage1).is_err());
        assert!(check_stage(OneStage, Stage2).is_err());
        assert!(check_stage(Pretrained, Stage1).is_ok());
    }
}
