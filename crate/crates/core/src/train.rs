//! Training procedures: the first stage (query encoder and one decoder), the
//! second stage (role experts and router on a frozen encoder), and the
//! single-stage baseline that trains everything at once.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::{CaptionModel, StageTag};
use crate::nn::{pull_grads, set_trainable, zero_grads, Module};
use crate::pretrain::{Foundation, PretrainConfig};
use crate::optim::{clip_grad_norm, scale_grads, AdamW, AdamWConfig, Schedule};
use crate::scene::{Role, Sample};
use crate::tensor::{Graph, Tensor, Var};
use crate::vision::VisualFeatures;
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    TwoStage,
    OneStage,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::TwoStage => "two-stage",
            Strategy::OneStage => "one-stage",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "two-stage" => Some(Strategy::TwoStage),
            "one-stage" => Some(Strategy::OneStage),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub onestage_epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub adamw: AdamWConfig,
    /// Train all experts and the whole router together in the second stage
    /// instead of one expert after another.
    pub joint_router: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            min_lr: 1e-6,
            warmup_epochs: 1,
            stage1_epochs: 5,
            stage2_epochs: 5,
            onestage_epochs: 10,
            batch_size: 8,
            clip_norm: Some(1.0),
            adamw: AdamWConfig::default(),
            joint_router: false,
        }
    }
}

impl TrainConfig {
    fn schedule(&self, epochs: usize) -> Schedule {
        Schedule {
            base_lr: self.lr,
            min_lr: self.min_lr,
            warmup_epochs: self.warmup_epochs,
            epochs,
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub model: ModelConfig,
    pub router: bool,
    pub strategy: Strategy,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            n_train: 500,
            n_test: 100,
            model: ModelConfig::default(),
            router: true,
            strategy: Strategy::TwoStage,
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("seed", self.seed);
        kv.set("data_seed", self.data_seed);
        kv.set("n_train", self.n_train);
        kv.set("n_test", self.n_test);
        kv.set("router", self.router);
        kv.set("strategy", self.strategy.label());
        let t = &self.train;
        kv.set("lr", t.lr);
        kv.set("min_lr", t.min_lr);
        kv.set("warmup_epochs", t.warmup_epochs);
        kv.set("stage1_epochs", t.stage1_epochs);
        kv.set("stage2_epochs", t.stage2_epochs);
        kv.set("onestage_epochs", t.onestage_epochs);
        kv.set("batch_size", t.batch_size);
        kv.set("clip_norm", t.clip_norm.map_or("none".to_string(), |c| c.to_string()));
        kv.set("beta1", t.adamw.beta1);
        kv.set("beta2", t.adamw.beta2);
        kv.set("weight_decay", t.adamw.weight_decay);
        kv.set("eps", t.adamw.eps);
        kv.set("joint_router", t.joint_router);
        self.model.write_kv(&mut kv, "model.");
        self.pretrain.write_kv(&mut kv, "pretrain.");
        kv
    }

    /// Overrides fields present in `kv`; unknown keys are rejected.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        let model_keys = ModelConfig::keys("model.");
        let pretrain_keys = PretrainConfig::keys("pretrain.");
        for k in kv.keys() {
            let known = matches!(
                k,
                "seed" | "data_seed" | "n_train" | "n_test" | "router" | "strategy" | "lr" | "min_lr"
                    | "warmup_epochs" | "stage1_epochs" | "stage2_epochs" | "onestage_epochs"
                    | "batch_size" | "clip_norm" | "beta1" | "beta2" | "weight_decay" | "eps"
                    | "joint_router"
            ) || model_keys.iter().chain(&pretrain_keys).any(|m| m == k);
            if !known {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
        }
        kv.read_into("seed", &mut self.seed)?;
        kv.read_into("data_seed", &mut self.data_seed)?;
        kv.read_into("n_train", &mut self.n_train)?;
        kv.read_into("n_test", &mut self.n_test)?;
        kv.read_into("router", &mut self.router)?;
        if let Some(s) = kv.get("strategy") {
            self.strategy =
                Strategy::from_label(s).ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))?;
        }
        let t = &mut self.train;
        kv.read_into("lr", &mut t.lr)?;
        kv.read_into("min_lr", &mut t.min_lr)?;
        kv.read_into("warmup_epochs", &mut t.warmup_epochs)?;
        kv.read_into("stage1_epochs", &mut t.stage1_epochs)?;
        kv.read_into("stage2_epochs", &mut t.stage2_epochs)?;
        kv.read_into("onestage_epochs", &mut t.onestage_epochs)?;
        kv.read_into("batch_size", &mut t.batch_size)?;
        match kv.get("clip_norm") {
            None => {}
            Some("none") => t.clip_norm = None,
            Some(_) => t.clip_norm = Some(kv.parsed("clip_norm")?),
        }
        kv.read_into("beta1", &mut t.adamw.beta1)?;
        kv.read_into("beta2", &mut t.adamw.beta2)?;
        kv.read_into("weight_decay", &mut t.adamw.weight_decay)?;
        kv.read_into("eps", &mut t.adamw.eps)?;
        kv.read_into("joint_router", &mut t.joint_router)?;
        self.model.read_kv(kv, "model.")?;
        self.pretrain.read_kv(kv, "pretrain.")?;
        self.validate()
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(kv)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(t.lr.is_finite() && t.lr > 0.0 && t.min_lr >= 0.0 && t.min_lr <= t.lr) {
            return Err(Error::Config(format!("bad learning rates lr={} min_lr={}", t.lr, t.min_lr)));
        }
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub stage: StageTag,
    pub role: String,
    pub lr: f64,
    pub loss: f64,
}

/// Per-step training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub entries: Vec<LogEntry>,
}

impl RunLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("step\tstage\trole\tlr\tloss\n");
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}\t{:e}\t{:.17e}", e.step, e.stage, e.role, e.lr, e.loss);
        }
        s
    }

    /// Mean logged loss per epoch for one (stage, role).
    pub fn epoch_means(&self, stage: StageTag, role: &str, steps_per_epoch: usize) -> Vec<f64> {
        let losses: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.stage == stage && e.role == role)
            .map(|e| e.loss)
            .collect();
        losses
            .chunks(steps_per_epoch.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// A training sample with its tokenised instruction and role targets, and
/// the frozen image features.
#[derive(Clone, Debug)]
pub struct Example {
    pub instr: Vec<usize>,
    pub fi: VisualFeatures,
    pub targets: HashMap<Role, Vec<usize>>,
}

impl Example {
    pub fn target(&self, role: Role) -> &[usize] {
        &self.targets[&role]
    }
}

pub fn prepare(model: &CaptionModel, vocab: &Vocab, samples: &[Sample]) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            let mut targets = HashMap::new();
            for role in [
                Role::Full,
                Role::Theme,
                Role::Objects,
                Role::Positions,
                Role::Relations,
                Role::Details,
            ] {
                targets.insert(role, vocab.encode(&s.captions.target(role))?.ids);
            }
            Ok(Example {
                instr: vocab.encode(s.instruction())?.ids,
                fi: model.image_features(&s.image)?,
                targets,
            })
        })
        .collect()
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Mini-batch AdamW over `n` samples. Gradients are averaged over the batch,
/// optionally clipped, and applied with the scheduled learning rate.
#[allow(clippy::too_many_arguments)]
pub fn fit<M: Module>(
    model: &mut M,
    n: usize,
    epochs: usize,
    tc: &TrainConfig,
    rng: &mut ChaCha8Rng,
    stage: StageTag,
    role: &str,
    log: &mut RunLog,
    loss_fn: impl Fn(&M, &mut Graph, usize) -> Result<Var>,
) -> Result<()> {
    if n == 0 {
        return Err(Error::Data("no training samples".into()));
    }
    let spe = steps_per_epoch(n, tc.batch_size);
    let schedule = tc.schedule(epochs);
    let mut opt = AdamW::new(tc.adamw.clone());
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..epochs {
        order.shuffle(rng);
        for batch in order.chunks(tc.batch_size) {
            zero_grads(model);
            let mut total = 0.0;
            for &idx in batch {
                let mut g = Graph::new();
                let loss = loss_fn(model, &mut g, idx)?;
                g.backward(loss)?;
                pull_grads(model, &g)?;
                total += g.value(loss).item();
            }
            scale_grads(model, 1.0 / batch.len() as f64);
            if let Some(c) = tc.clip_norm {
                clip_grad_norm(model, c);
            }
            let lr = schedule.lr_at(step, spe);
            opt.step(model, lr)?;
            let loss = total / batch.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at step {step}")));
            }
            log.entries.push(LogEntry {
                step,
                stage,
                role: role.to_string(),
                lr,
                loss,
            });
            step += 1;
        }
    }
    zero_grads(model);
    Ok(())
}

/// Independent stream for one purpose within a run.
pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const STAGE2_INIT_STREAM: u64 = 3;
const STAGE2_SHUFFLE_STREAM: u64 = 4;

pub fn run_stage1(
    cfg: &RunConfig,
    base: &Foundation,
    vocab: &Vocab,
    train: &[Sample],
    log: &mut RunLog,
) -> Result<CaptionModel> {
    cfg.validate()?;
    let mut model = CaptionModel::stage1(&cfg.model, base, &mut stream(cfg.seed, INIT_STREAM))?;
    let data = prepare(&model, vocab, train)?;
    let mut rng = stream(cfg.seed, SHUFFLE_STREAM);
    fit(
        &mut model,
        data.len(),
        cfg.train.stage1_epochs,
        &cfg.train,
        &mut rng,
        StageTag::Stage1,
        Role::Full.label(),
        log,
        |m, g, i| {
            let ex = &data[i];
            let fi = g.constant(ex.fi.0.clone());
            m.stage1_loss(g, fi, &ex.instr, ex.target(Role::Full))
        },
    )?;
    Ok(model)
}

/// Query-encoder rows for every example; fixed once the encoder is frozen.
fn vlm_cache(model: &CaptionModel, data: &[Example]) -> Result<Vec<Tensor>> {
    data.iter()
        .map(|ex| Ok(model.vlm_features(&ex.fi, &ex.instr)?.0))
        .collect()
}

pub fn run_stage2(
    cfg: &RunConfig,
    vocab: &Vocab,
    start: CaptionModel,
    train: &[Sample],
    log: &mut RunLog,
) -> Result<CaptionModel> {
    cfg.validate()?;
    let mut model = match start.stage {
        StageTag::Stage1 => start.into_stage2(
            cfg.model.num_experts,
            cfg.router,
            &mut stream(cfg.seed, STAGE2_INIT_STREAM),
        )?,
        // resume: the experts keep their adapters and train further
        StageTag::Stage2 => {
            if start.roles().len() != cfg.model.num_experts || start.has_router() != cfg.router {
                return Err(Error::Config(format!(
                    "resumed model has {} experts (router {}), config asks for {} (router {})",
                    start.roles().len(),
                    start.has_router(),
                    cfg.model.num_experts,
                    cfg.router
                )));
            }
            start
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "second stage starts from a stage1 or stage2 model, got {other}"
            )))
        }
    };
    let data = prepare(&model, vocab, train)?;
    let cache = vlm_cache(&model, &data)?;
    let roles = model.roles();
    let mut rng = stream(cfg.seed, STAGE2_SHUFFLE_STREAM);

    if cfg.train.joint_router {
        return fit(
            &mut model,
            data.len(),
            cfg.train.stage2_epochs,
            &cfg.train,
            &mut rng,
            StageTag::Stage2,
            "all",
            log,
            |m, g, i| {
                let moe = m.moe().expect("second-stage model");
                let fv = g.constant(cache[i].clone());
                let mut losses = Vec::with_capacity(roles.len());
                for (k, &role) in roles.iter().enumerate() {
                    losses.push(moe.expert_forward_loss(g, fv, &data[i].instr, data[i].target(role), k)?);
                }
                sum_losses(g, &losses)
            },
        )
        .map(|()| model);
    }

    for (k, &role) in roles.iter().enumerate() {
        if k == 1 {
            // the shared trunk learns with the first expert only
            if let Some(r) = model.moe_mut().and_then(|m| m.router.as_mut()) {
                set_trainable(&mut r.trunk, false);
                r.instr_embed.set_trainable(false);
            }
        }
        fit(
            &mut model,
            data.len(),
            cfg.train.stage2_epochs,
            &cfg.train,
            &mut rng,
            StageTag::Stage2,
            role.label(),
            log,
            |m, g, i| {
                let moe = m.moe().expect("second-stage model");
                let fv = g.constant(cache[i].clone());
                moe.expert_forward_loss(g, fv, &data[i].instr, data[i].target(role), k)
            },
        )?;
    }
    Ok(model)
}

pub fn run_onestage(
    cfg: &RunConfig,
    base: &Foundation,
    vocab: &Vocab,
    train: &[Sample],
    log: &mut RunLog,
) -> Result<CaptionModel> {
    cfg.validate()?;
    let mut model = CaptionModel::onestage(&cfg.model, base, cfg.router, &mut stream(cfg.seed, INIT_STREAM))?;
    let data = prepare(&model, vocab, train)?;
    let roles = model.roles();
    let mut rng = stream(cfg.seed, SHUFFLE_STREAM);
    fit(
        &mut model,
        data.len(),
        cfg.train.onestage_epochs,
        &cfg.train,
        &mut rng,
        StageTag::OneStage,
        "all",
        log,
        |m, g, i| {
            let ex = &data[i];
            let moe = m.moe().expect("mixture model");
            let fi = g.constant(ex.fi.0.clone());
            let fv = m.vlm.forward(g, fi, &ex.instr)?;
            let mut losses = Vec::with_capacity(roles.len());
            for (k, &role) in roles.iter().enumerate() {
                losses.push(moe.expert_forward_loss(g, fv, &ex.instr, ex.target(role), k)?);
            }
            sum_losses(g, &losses)
        },
    )?;
    Ok(model)
}

fn sum_losses(g: &mut Graph, losses: &[Var]) -> Result<Var> {
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_kv_round_trip() {
        let mut c = RunConfig::default();
        c.train.clip_norm = None;
        c.strategy = Strategy::OneStage;
        c.model.num_experts = 2;
        let back = RunConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        let bad = KvMap::parse("learning_rate=3").unwrap();
        assert!(RunConfig::from_kv(&bad).is_err());
    }

    #[test]
    fn log_format() {
        let log = RunLog {
            entries: vec![LogEntry {
                step: 0,
                stage: StageTag::Stage1,
                role: "full".into(),
                lr: 0.0,
                loss: 1.5,
            }],
        };
        let tsv = log.to_tsv();
        assert!(tsv.starts_with("step\tstage\trole\tlr\tloss\n0\tstage1\tfull\t"));
    }
}
