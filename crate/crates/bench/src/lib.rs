//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsmoe::config::ModelConfig;
use rsmoe::metrics::EvalCorpus;
use rsmoe::model::CaptionModel;
use rsmoe::scene::{generate, reference_captions, Role, Sample};
use rsmoe::vision::VisualFeatures;
use rsmoe::{Tensor, Vocab};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// A first-stage model at default size with one encoded training example.
pub struct Stage1Case {
    pub model: CaptionModel,
    pub vocab: Vocab,
    pub sample: Sample,
    pub features: VisualFeatures,
    pub instr: Vec<usize>,
    pub target: Vec<usize>,
}

impl Stage1Case {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = CaptionModel::random_base(cfg, &mut rng).expect("valid config");
        let model = CaptionModel::stage1(cfg, &base, &mut rng).expect("valid config");
        let vocab = Vocab::synthetic();
        let sample = generate(0, 1).samples.remove(0);
        let features = model.image_features(&sample.image).expect("image fits the encoder");
        let instr = vocab.encode(sample.instruction()).expect("closed vocabulary").ids;
        let target = vocab.encode(&sample.captions.target(Role::Full)).expect("closed vocabulary").ids;
        Self {
            model,
            vocab,
            sample,
            features,
            instr,
            target,
        }
    }
}

/// `n` scenes scored against their own references, with the first
/// reference dropped from each list and used as the hypothesis.
pub fn caption_corpus(n: usize) -> EvalCorpus {
    let mut corpus = EvalCorpus::new();
    for s in generate(1, n).samples {
        let refs = reference_captions(&s.graph);
        corpus.push(&refs[0], &refs[1..]).expect("non-empty references");
    }
    corpus
}
