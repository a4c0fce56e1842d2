//! Freezing, cloning and adapter contracts across the training stages.

mod common;

use common::fixtures::{random_foundation, small_model, small_run, split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsmoe::config::ModelConfig;
use rsmoe::llm::Prompt;
use rsmoe::lora::{active_sites, merge_all};
use rsmoe::model::{CaptionModel, LanguageHead};
use rsmoe::nn::{named_params, param_count, param_hash, trainable_count, visit_linears, visit_params_mut};
use rsmoe::scene::Role;
use rsmoe::train::{fit, prepare, run_stage1, run_stage2, stream, RunLog};
use rsmoe::{Graph, Tensor, Vocab};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn encoders_stay_frozen_across_stages() {
    let cfg = small_run(1);
    let base = random_foundation(&cfg.model, 1);
    let vocab = Vocab::synthetic();
    let (train, _) = split(&cfg);
    let image_before = param_hash(&base.image);

    let s1 = run_stage1(&cfg, &base, &vocab, &train, &mut RunLog::default()).unwrap();
    assert_eq!(param_hash(&s1.image), image_before);
    let vlm_after_stage1 = param_hash(&s1.vlm);
    assert_ne!(param_hash(&base.vlm), vlm_after_stage1, "first stage trains the query encoder");

    let mut c = cfg.clone();
    c.model.num_experts = 3;
    let s2 = run_stage2(&c, &vocab, s1, &train, &mut RunLog::default()).unwrap();
    assert_eq!(param_hash(&s2.image), image_before);
    assert_eq!(param_hash(&s2.vlm), vlm_after_stage1);
}

#[test]
fn training_one_expert_leaves_the_others() {
    let cfg = small_run(2);
    let base = random_foundation(&cfg.model, 2);
    let vocab = Vocab::synthetic();
    let (train, _) = split(&cfg);
    let s1 = CaptionModel::stage1(&cfg.model, &base, &mut rng(2)).unwrap();
    let mut model = s1.into_stage2(3, true, &mut rng(3)).unwrap();
    let data = prepare(&model, &vocab, &train).unwrap();
    let fv: Vec<Tensor> = data
        .iter()
        .map(|ex| model.vlm_features(&ex.fi, &ex.instr).unwrap().0)
        .collect();
    let hashes = |m: &CaptionModel| -> Vec<String> { m.moe().unwrap().experts.iter().map(|e| param_hash(e)).collect() };

    for k in 0..3 {
        let before = hashes(&model);
        let role = model.roles()[k];
        fit(
            &mut model,
            data.len(),
            1,
            &cfg.train,
            &mut stream(7, k as u64),
            rsmoe::model::StageTag::Stage2,
            role.label(),
            &mut RunLog::default(),
            |m, g, i| {
                let f = g.constant(fv[i].clone());
                m.moe().unwrap().expert_forward_loss(g, f, &data[i].instr, data[i].target(role), k)
            },
        )
        .unwrap();
        let after = hashes(&model);
        for j in 0..3 {
            if j == k {
                assert_ne!(before[j], after[j], "expert {k} should train");
            } else {
                assert_eq!(before[j], after[j], "expert {j} changed while expert {k} trained");
            }
        }
    }
}

#[test]
fn clones_are_independent() {
    let cfg = small_run(3);
    let base = random_foundation(&cfg.model, 3);
    let vocab = Vocab::synthetic();
    let (train, _) = split(&cfg);
    let s1 = CaptionModel::stage1(&cfg.model, &base, &mut rng(1)).unwrap();
    let before = param_hash(&s1);
    let copy = s1.clone();
    let LanguageHead::Single(llm) = &copy.head else { unreachable!() };
    let llm_hash = param_hash(llm);
    let _ = run_stage2(&cfg, &vocab, copy.clone(), &train, &mut RunLog::default()).unwrap();
    assert_eq!(param_hash(&s1), before);
    assert_eq!(param_hash(&copy), before);

    // experts start as identical copies of the merged decoder and then diverge
    let mut c = cfg.clone();
    c.model.num_experts = 2;
    let s2 = copy.into_stage2(2, false, &mut rng(4)).unwrap();
    let e = &s2.moe().unwrap().experts;
    let base_weights = |m: &dyn rsmoe::nn::Module| -> Vec<(String, Tensor)> {
        named_params(m).into_iter().filter(|(p, _)| !p.contains("lora_")).collect()
    };
    assert_eq!(base_weights(&e[0]), base_weights(&e[1]));
    assert_ne!(param_hash(&e[0]), llm_hash, "adapters were merged and new ones attached");
    let trained = run_stage2(&c, &vocab, s1, &train, &mut RunLog::default()).unwrap();
    let e = &trained.moe().unwrap().experts;
    assert_ne!(param_hash(&e[0]), param_hash(&e[1]));
}

fn decoder_logits(model: &CaptionModel, fv: &Tensor, instr: &[usize], target: &[usize]) -> Vec<f64> {
    let llm = match &model.head {
        LanguageHead::Single(d) => d,
        LanguageHead::Moe(m) => &m.experts[0],
    };
    let mut g = Graph::no_grad();
    let f = g.constant(fv.clone());
    let l = llm.logits(&mut g, f, Prompt::Tokens(instr), target).unwrap();
    g.value(l).data().to_vec()
}

#[test]
fn fresh_adapters_are_bitwise_identity() {
    let cfg = small_model();
    let base = random_foundation(&cfg, 5);
    let s1 = CaptionModel::stage1(&cfg, &base, &mut rng(6)).unwrap();
    let sample = rsmoe::scene::generate(5, 1).samples.remove(0);
    let vocab = Vocab::synthetic();
    let instr = vocab.encode(sample.instruction()).unwrap().ids;
    let target = vocab.encode(&sample.captions.target(Role::Full)).unwrap().ids;

    let fi = base.image.encode_image(&sample.image).unwrap();
    assert_eq!(s1.image_features(&sample.image).unwrap().0.data(), fi.0.data());
    let fv_base = base.vlm.encode(&fi, &instr).unwrap().0;
    let fv = s1.vlm_features(&fi, &instr).unwrap().0;
    assert_eq!(fv.data(), fv_base.data());

    let mut g = Graph::no_grad();
    let f = g.constant(fv_base.clone());
    let l = base.llm.logits(&mut g, f, Prompt::Tokens(&instr), &target).unwrap();
    assert_eq!(decoder_logits(&s1, &fv, &instr, &target), g.value(l).data());
}

#[test]
fn merging_matches_adapted_outputs() {
    let cfg = small_model();
    let base = random_foundation(&cfg, 8);
    let mut s1 = CaptionModel::stage1(&cfg, &base, &mut rng(9)).unwrap();
    let mut r = rng(10);
    visit_params_mut(&mut s1, "", &mut |path, p| {
        if path.ends_with("lora_b") {
            for v in p.value_mut().data_mut() {
                *v = r.gen_range(-0.3..0.3);
            }
        }
    });
    let fv = Tensor::from_fn(&[cfg.num_queries, cfg.embed_dim], |_| r.gen_range(-1.0..1.0));
    let instr = [5, 6, 7];
    let target = [8, 9, 10, 11];
    let adapted = decoder_logits(&s1, &fv, &instr, &target);
    let mut merged = s1.clone();
    assert!(merge_all(&mut merged, "llm").unwrap() > 0);
    assert!(active_sites(&merged).iter().all(|p| !p.starts_with("llm")));
    let after = decoder_logits(&merged, &fv, &instr, &target);
    let worst = adapted.iter().zip(&after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12, "{worst:e}");
}

/// Trainable and total sizes by walking the named tensors, and the adapter
/// size from the site shapes.
fn enumerate(model: &CaptionModel) -> (usize, usize, usize) {
    let named = named_params(model);
    let total = named.iter().map(|(_, t)| t.numel()).sum();
    let trainable = named.iter().filter(|(_, t)| t.requires_grad()).map(|(_, t)| t.numel()).sum();
    let mut adapters = 0;
    visit_linears(model, "", &mut |_, l| {
        if let Some(a) = l.adapter() {
            adapters += a.rank * (l.d_in() + l.d_out());
        }
    });
    (trainable, total, adapters)
}

#[test]
fn default_config_trains_under_a_tenth() {
    let cfg = ModelConfig::default();
    let base = random_foundation(&cfg, 0);
    let s1 = CaptionModel::stage1(&cfg, &base, &mut rng(0)).unwrap();
    let s2 = s1.clone().into_stage2(3, true, &mut rng(1)).unwrap();
    for m in [&s1, &s2] {
        let (trainable, total, adapters) = enumerate(m);
        assert_eq!(trainable, trainable_count(m));
        assert_eq!(total, param_count(m));
        let lora: usize = named_params(m)
            .iter()
            .filter(|(p, _)| p.ends_with("lora_a") || p.ends_with("lora_b"))
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(lora, adapters);
        let ratio = trainable as f64 / total as f64;
        assert!(ratio < 0.10, "{} trains {trainable} of {total} ({ratio:.4})", m.stage);
    }
}
