//! Caption metrics: BLEU-1..4, ROUGE-L, METEOR, CIDEr, and a scene-graph
//! accuracy that parses captions back into structure.
//!
//! All scores are reported ×100. CIDEr is the plain (undamped) variant with
//! the ×10 cosine convention, so it lies in [0, 1000].

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::scene::{parse_caption, synonym_groups, SceneGraph};

pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalItem {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Hypotheses with their references, tokenized on whitespace exactly like
/// the model vocabulary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalCorpus {
    pub items: Vec<EvalItem>,
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl EvalCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<S: AsRef<str>>(&mut self, hypothesis: &str, references: &[S]) -> Result<()> {
        if references.is_empty() {
            return Err(Error::Input(format!(
                "image {} has no references",
                self.items.len()
            )));
        }
        self.items.push(EvalItem {
            hypothesis: tokens(hypothesis),
            references: references.iter().map(|r| tokens(r.as_ref())).collect(),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Input("empty evaluation corpus".into()));
        }
        if let Some(i) = self.items.iter().position(|it| it.references.is_empty()) {
            return Err(Error::Input(format!("image {i} has no references")));
        }
        Ok(())
    }
}

fn ngram_counts(words: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if n > 0 && words.len() >= n {
        for g in words.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and the hypothesis n-gram total for one image.
pub fn bleu_counts(hypothesis: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let hyp = ngram_counts(hypothesis, n);
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = hyp
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hypothesis.len().saturating_sub(n - 1))
}

/// Reference length closest to `len`; ties go to the shorter one.
fn closest_ref_len(len: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(len), r))
        .unwrap_or(0)
}

/// Corpus BLEU-n. Orders ≥ 2 with no matches use precision 1/(total+1).
pub fn bleu_n(corpus: &EvalCorpus, n: usize) -> Result<f64> {
    corpus.check()?;
    if !(1..=4).contains(&n) {
        return Err(Error::Input(format!("BLEU order must be 1..4, got {n}")));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for it in &corpus.items {
        for k in 0..n {
            let (m, t) = bleu_counts(&it.hypothesis, &it.references, k + 1);
            matched[k] += m;
            total[k] += t;
        }
        hyp_len += it.hypothesis.len();
        ref_len += closest_ref_len(it.hypothesis.len(), &it.references);
    }
    if hyp_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for k in 0..n {
        let p = if matched[k] == 0 {
            1.0 / (total[k] as f64 + 1.0)
        } else {
            matched[k] as f64 / total[k] as f64
        };
        log_p += p.ln();
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(100.0 * bp * (log_p / n as f64).exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure of one pair, in [0, 1].
pub fn rouge_l_pair(hypothesis: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(hypothesis, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hypothesis.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(corpus: &EvalCorpus) -> Result<f64> {
    corpus.check()?;
    let sum: f64 = corpus
        .items
        .iter()
        .map(|it| {
            it.references
                .iter()
                .map(|r| rouge_l_pair(&it.hypothesis, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(100.0 * sum / corpus.len() as f64)
}

/// Plural-stripping stemmer: `-ies` becomes `-y`; otherwise a trailing `s`
/// is dropped unless the word ends in `ss` or has three letters or fewer.
pub fn stem(word: &str) -> String {
    if word.len() > 4 && word.ends_with("ies") {
        return format!("{}y", &word[..word.len() - 3]);
    }
    if word.len() > 3 && word.ends_with('s') && !word.ends_with("ss") {
        return word[..word.len() - 1].to_string();
    }
    word.to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum MatchStage {
    Exact,
    Stem,
    Synonym,
}

/// METEOR matcher with a closed synonym table.
#[derive(Clone, Debug)]
pub struct Meteor {
    groups: HashMap<String, usize>,
}

/// Best alignment found for one hypothesis/reference pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Alignment {
    pub exact: usize,
    pub stem: usize,
    pub synonym: usize,
    pub chunks: usize,
}

impl Alignment {
    pub fn matches(&self) -> usize {
        self.exact + self.stem + self.synonym
    }

    /// Ordering used to pick the best alignment: more exact matches first,
    /// then stem, then synonym, then fewer chunks.
    pub fn rank(&self) -> (usize, usize, usize, std::cmp::Reverse<usize>) {
        (self.exact, self.stem, self.synonym, std::cmp::Reverse(self.chunks))
    }

    fn add(self, stage: MatchStage, new_chunk: bool) -> Self {
        let mut a = self;
        match stage {
            MatchStage::Exact => a.exact += 1,
            MatchStage::Stem => a.stem += 1,
            MatchStage::Synonym => a.synonym += 1,
        }
        a.chunks += usize::from(new_chunk);
        a
    }
}

/// METEOR score from an alignment, in [0, 1].
pub fn meteor_score(a: &Alignment, hyp_len: usize, ref_len: usize) -> f64 {
    let m = a.matches();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp_len as f64;
    let r = m as f64 / ref_len as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let frag = a.chunks as f64 / m as f64;
    f_mean * (1.0 - 0.5 * frag.powi(3))
}

impl Default for Meteor {
    fn default() -> Self {
        Self::synthetic()
    }
}

impl Meteor {
    /// Synonyms from the scene lexicon.
    pub fn synthetic() -> Self {
        Self::with_groups(&synonym_groups())
    }

    pub fn with_groups<S: AsRef<str>>(groups: &[Vec<S>]) -> Self {
        let mut map = HashMap::new();
        for (i, g) in groups.iter().enumerate() {
            for w in g {
                map.entry(w.as_ref().to_string()).or_insert(i);
                map.entry(stem(w.as_ref())).or_insert(i);
            }
        }
        Self { groups: map }
    }

    fn synonym_group(&self, w: &str) -> Option<usize> {
        self.groups
            .get(w)
            .or_else(|| self.groups.get(&stem(w)))
            .copied()
    }

    /// Earliest stage at which two words match, if any.
    pub fn stage(&self, a: &str, b: &str) -> Option<MatchStage> {
        if a == b {
            Some(MatchStage::Exact)
        } else if stem(a) == stem(b) {
            Some(MatchStage::Stem)
        } else {
            match (self.synonym_group(a), self.synonym_group(b)) {
                (Some(x), Some(y)) if x == y => Some(MatchStage::Synonym),
                _ => None,
            }
        }
    }

    /// Staged alignment: the one-to-one word matching with the most exact
    /// matches, then the most stem matches, then the most synonym matches,
    /// then the fewest chunks. A chunk is a maximal run of matches adjacent
    /// in both sentences.
    ///
    /// The search is exhaustive up to [`ALIGN_BUDGET`] states. Past that
    /// (long captions full of repeated words) it falls back to a beam of
    /// [`ALIGN_BEAM`] partial alignments, which need not be optimal.
    pub fn align(&self, hypothesis: &[String], reference: &[String]) -> Result<Alignment> {
        if reference.len() > 128 {
            return Err(Error::Input(format!(
                "reference of {} tokens exceeds the 128-token alignment limit",
                reference.len()
            )));
        }
        let stages: Vec<Vec<(usize, MatchStage)>> = hypothesis
            .iter()
            .map(|h| {
                reference
                    .iter()
                    .enumerate()
                    .filter_map(|(j, r)| self.stage(h, r).map(|s| (j, s)))
                    .collect()
            })
            .collect();
        // Any best alignment pairs min(h_w, r_w) copies of every word w
        // exactly; choices that make that impossible are pruned.
        let mut hyp_left: HashMap<&str, usize> = HashMap::new();
        for w in hypothesis {
            *hyp_left.entry(w).or_insert(0) += 1;
        }
        let mut search = AlignSearch {
            hyp: hypothesis,
            refs: reference,
            stages,
            memo: HashMap::new(),
            budget: ALIGN_BUDGET,
        };
        let exact = search.best(0, None, 0, &mut hyp_left);
        if search.budget > 0 {
            return Ok(exact.unwrap_or_default());
        }
        Ok(beam_align(&search.stages))
    }

    pub fn pair(&self, hypothesis: &[String], reference: &[String]) -> Result<f64> {
        let a = self.align(hypothesis, reference)?;
        Ok(meteor_score(&a, hypothesis.len(), reference.len()))
    }

    pub fn score(&self, corpus: &EvalCorpus) -> Result<f64> {
        corpus.check()?;
        let mut sum = 0.0;
        for it in &corpus.items {
            let mut best = 0.0f64;
            for r in &it.references {
                best = best.max(self.pair(&it.hypothesis, r)?);
            }
            sum += best;
        }
        Ok(100.0 * sum / corpus.len() as f64)
    }
}

struct AlignSearch<'a> {
    hyp: &'a [String],
    refs: &'a [String],
    stages: Vec<Vec<(usize, MatchStage)>>,
    memo: HashMap<(usize, Option<usize>, u128), Option<Alignment>>,
    budget: usize,
}

pub const ALIGN_BUDGET: usize = 200_000;
pub const ALIGN_BEAM: usize = 64;

/// Left-to-right beam over hypothesis words. States that share the used set
/// and the previous reference index keep only the better one.
fn beam_align(stages: &[Vec<(usize, MatchStage)>]) -> Alignment {
    let mut beam: Vec<(Alignment, u128, Option<usize>)> = vec![(Alignment::default(), 0, None)];
    for cands in stages {
        let mut next: BTreeMap<(u128, Option<usize>), Alignment> = BTreeMap::new();
        let mut push = |a: Alignment, used: u128, prev: Option<usize>| {
            let e = next.entry((used, prev)).or_insert(a);
            if a.rank() > e.rank() {
                *e = a;
            }
        };
        for &(a, used, prev) in &beam {
            push(a, used, None);
            for &(j, stage) in cands {
                let bit = 1u128 << j;
                if used & bit == 0 {
                    let new_chunk = prev.is_none_or(|p| p + 1 != j);
                    push(a.add(stage, new_chunk), used | bit, Some(j));
                }
            }
        }
        beam = next.into_iter().map(|((u, p), a)| (a, u, p)).collect();
        beam.sort_by(|x, y| y.0.rank().cmp(&x.0.rank()));
        beam.truncate(ALIGN_BEAM);
    }
    beam.first().map(|b| b.0).unwrap_or_default()
}

impl<'a> AlignSearch<'a> {
    fn unused_refs(&self, w: &str, used: u128) -> usize {
        self.refs
            .iter()
            .enumerate()
            .filter(|(j, r)| r.as_str() == w && used & (1u128 << j) == 0)
            .count()
    }

    /// Best alignment of `hyp[i..]` given the reference positions already
    /// used and the reference index matched by `hyp[i-1]`. `None` when the
    /// exact-match quota can no longer be met.
    fn best(
        &mut self,
        i: usize,
        prev: Option<usize>,
        used: u128,
        hyp_left: &mut HashMap<&'a str, usize>,
    ) -> Option<Alignment> {
        if i == self.hyp.len() {
            return Some(Alignment::default());
        }
        if let Some(v) = self.memo.get(&(i, prev, used)) {
            return *v;
        }
        if self.budget == 0 {
            return None;
        }
        self.budget -= 1;
        let w = self.hyp[i].as_str();
        let left_after = hyp_left[w] - 1;
        *hyp_left.get_mut(w).unwrap() = left_after;

        let mut best: Option<Alignment> = None;
        let mut consider = |cand: Option<Alignment>| {
            if let Some(c) = cand {
                if best.is_none_or(|b| c.rank() > b.rank()) {
                    best = Some(c);
                }
            }
        };
        let unused_same = self.unused_refs(w, used);
        // leaving this copy without an exact partner is allowed only while
        // later copies can still consume every unused reference copy
        let may_skip_exact = left_after >= unused_same;
        let candidates = self.stages[i].clone();
        for (j, stage) in candidates {
            let bit = 1u128 << j;
            if used & bit != 0 {
                continue;
            }
            if stage != MatchStage::Exact {
                if !may_skip_exact {
                    continue;
                }
                // taking a reference copy of word `r` away from its exact
                // partners must leave enough copies for them
                let r = self.refs[j].as_str();
                let r_hyp_left = hyp_left.get(r).copied().unwrap_or(0);
                if self.unused_refs(r, used) - 1 < r_hyp_left {
                    continue;
                }
            }
            let new_chunk = prev.is_none_or(|p| p + 1 != j);
            let rest = self.best(i + 1, Some(j), used | bit, hyp_left);
            consider(rest.map(|a| a.add(stage, new_chunk)));
        }
        if may_skip_exact {
            let rest = self.best(i + 1, None, used, hyp_left);
            consider(rest);
        }
        *hyp_left.get_mut(w).unwrap() = left_after + 1;
        self.memo.insert((i, prev, used), best);
        best
    }
}

pub fn meteor(corpus: &EvalCorpus) -> Result<f64> {
    Meteor::synthetic().score(corpus)
}

fn cider_vector<'a>(
    words: &'a [String],
    n: usize,
    df: &BTreeMap<&[String], usize>,
    log_n: f64,
) -> (BTreeMap<&'a [String], f64>, f64) {
    let mut v = BTreeMap::new();
    let mut norm = 0.0;
    for (g, c) in ngram_counts(words, n) {
        let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
        let x = c as f64 * (log_n - d.ln());
        norm += x * x;
        v.insert(g, x);
    }
    (v, norm.sqrt())
}

/// Plain CIDEr. Document frequencies come from the reference sets; an
/// n-gram absent from every reference set gets document frequency 1.
pub fn cider(corpus: &EvalCorpus) -> Result<f64> {
    corpus.check()?;
    let log_n = (corpus.len() as f64).ln();
    let mut total = 0.0;
    let mut per_image = vec![0.0; corpus.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for it in &corpus.items {
            let grams: BTreeSet<&[String]> = it
                .references
                .iter()
                .flat_map(|r| ngram_counts(r, n).into_keys())
                .collect();
            for g in grams {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (k, it) in corpus.items.iter().enumerate() {
            let (hv, hn) = cider_vector(&it.hypothesis, n, &df, log_n);
            let mut sim_sum = 0.0;
            for r in &it.references {
                let (rv, rn) = cider_vector(r, n, &df, log_n);
                if hn > 0.0 && rn > 0.0 {
                    let dot: f64 = hv
                        .iter()
                        .filter_map(|(g, x)| rv.get(g).map(|y| x * y))
                        .sum();
                    sim_sum += dot / (hn * rn);
                }
            }
            per_image[k] += 10.0 * sim_sum / it.references.len() as f64 / 4.0;
        }
    }
    for s in per_image {
        total += s;
    }
    Ok(100.0 * total / corpus.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn compute(corpus: &EvalCorpus) -> Result<Self> {
        let mut r = Self {
            bleu: [0.0; 4],
            meteor: meteor(corpus)?,
            rouge_l: rouge_l(corpus)?,
            cider: cider(corpus)?,
            warnings: Vec::new(),
        };
        for n in 1..=4 {
            r.bleu[n - 1] = bleu_n(corpus, n)?;
        }
        if corpus.len() < 2 {
            r.warnings
                .push("single-image corpus: every CIDEr IDF weight is zero".into());
        }
        Ok(r)
    }

    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        for (n, b) in self.bleu.iter().enumerate() {
            kv.set(&format!("{prefix}bleu{}", n + 1), b);
        }
        kv.set(&format!("{prefix}meteor"), self.meteor);
        kv.set(&format!("{prefix}rouge_l"), self.rouge_l);
        kv.set(&format!("{prefix}cider"), self.cider);
    }

    pub fn read_kv(kv: &KvMap, prefix: &str) -> Result<Self> {
        let mut bleu = [0.0; 4];
        for (n, b) in bleu.iter_mut().enumerate() {
            *b = kv.parsed(&format!("{prefix}bleu{}", n + 1))?;
        }
        Ok(Self {
            bleu,
            meteor: kv.parsed(&format!("{prefix}meteor"))?,
            rouge_l: kv.parsed(&format!("{prefix}rouge_l"))?,
            cider: kv.parsed(&format!("{prefix}cider"))?,
            warnings: Vec::new(),
        })
    }
}

/// Structural correctness of parsed captions, each in [0, 1].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SemanticScores {
    pub theme_accuracy: f64,
    pub object_f1: f64,
    pub relation_f1: f64,
}

impl SemanticScores {
    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        kv.set(&format!("{prefix}theme_accuracy"), self.theme_accuracy);
        kv.set(&format!("{prefix}object_f1"), self.object_f1);
        kv.set(&format!("{prefix}relation_f1"), self.relation_f1);
    }
}

/// Size of the multiset intersection of two sorted lists.
fn sorted_overlap<T: Ord>(a: &[T], b: &[T]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Micro-averaged F1; two empty sides count as perfect agreement.
pub fn f1(overlap: usize, predicted: usize, actual: usize) -> f64 {
    if predicted == 0 && actual == 0 {
        return 1.0;
    }
    if overlap == 0 {
        return 0.0;
    }
    2.0 * overlap as f64 / (predicted + actual) as f64
}

/// Theme accuracy plus corpus-level object F1 (class, color and count must
/// all agree) and relation F1 over direction-free class relations.
pub fn semantic_accuracy<S: AsRef<str>>(hypotheses: &[S], truths: &[SceneGraph]) -> Result<SemanticScores> {
    if hypotheses.len() != truths.len() {
        return Err(Error::Input(format!(
            "{} hypotheses for {} scene graphs",
            hypotheses.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::Input("empty evaluation corpus".into()));
    }
    let mut themes = 0usize;
    let (mut obj, mut rel) = ([0usize; 3], [0usize; 3]);
    for (h, t) in hypotheses.iter().zip(truths) {
        let g = parse_caption(h.as_ref()).graph;
        themes += usize::from(g.theme.is_some() && g.theme == t.theme);
        let (gk, tk) = (g.object_keys(), t.object_keys());
        obj[0] += sorted_overlap(&gk, &tk);
        obj[1] += gk.len();
        obj[2] += tk.len();
        let (gr, tr) = (g.canonical_relations(), t.canonical_relations());
        rel[0] += sorted_overlap(&gr, &tr);
        rel[1] += gr.len();
        rel[2] += tr.len();
    }
    Ok(SemanticScores {
        theme_accuracy: themes as f64 / truths.len() as f64,
        object_f1: f1(obj[0], obj[1], obj[2]),
        relation_f1: f1(rel[0], rel[1], rel[2]),
    })
}
