//! Caption generation over a held-out split and scoring against the five
//! reference paraphrases of each scene.

use crate::error::Result;
use crate::metrics::{semantic_accuracy, EvalCorpus, MetricReport, SemanticScores};
use crate::model::CaptionModel;
use crate::scene::{reference_captions, Sample};
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub captions: Vec<String>,
    pub report: MetricReport,
    pub semantic: SemanticScores,
}

pub fn generate_captions(model: &CaptionModel, vocab: &Vocab, samples: &[Sample]) -> Result<Vec<String>> {
    samples
        .iter()
        .map(|s| {
            let instr = vocab.encode(s.instruction())?.ids;
            model.caption(vocab, &s.image, &instr)
        })
        .collect()
}

pub fn score(captions: &[String], samples: &[Sample]) -> Result<(MetricReport, SemanticScores)> {
    let mut corpus = EvalCorpus::new();
    for (c, s) in captions.iter().zip(samples) {
        corpus.push(c, &reference_captions(&s.graph))?;
    }
    let truths: Vec<_> = samples.iter().map(|s| s.graph.clone()).collect();
    Ok((MetricReport::compute(&corpus)?, semantic_accuracy(captions, &truths)?))
}

pub fn evaluate(model: &CaptionModel, vocab: &Vocab, samples: &[Sample]) -> Result<Evaluation> {
    let captions = generate_captions(model, vocab, samples)?;
    let (report, semantic) = score(&captions, samples)?;
    Ok(Evaluation {
        captions,
        report,
        semantic,
    })
}
