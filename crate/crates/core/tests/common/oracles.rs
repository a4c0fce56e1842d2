//! Slow, direct re-implementations of the caption metrics used to check the
//! library versions on small random corpora.

use rand::Rng;
use rsmoe::metrics::{EvalCorpus, EvalItem, MatchStage, Meteor, ROUGE_BETA};

/// Words chosen so that exact, stem and synonym matches all occur.
pub const ALPHABET: &[&str] = &[
    "a", "b", "c", "the", "boat", "boats", "ship", "ships", "tree", "trees", "gray", "grey",
];

pub fn random_corpus(rng: &mut impl Rng, max_images: usize, max_len: usize) -> EvalCorpus {
    let sentence = |rng: &mut dyn rand::RngCore, min: usize| -> Vec<String> {
        let len = rng.gen_range(min..=max_len);
        (0..len)
            .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())].to_string())
            .collect()
    };
    let images = rng.gen_range(1..=max_images);
    let items = (0..images)
        .map(|_| {
            let hypothesis = sentence(rng, 0);
            let refs = rng.gen_range(1..=3);
            EvalItem {
                hypothesis,
                references: (0..refs).map(|_| sentence(rng, 1)).collect(),
            }
        })
        .collect();
    EvalCorpus { items }
}

/// Occurrences of `gram` in `words`, by scanning every offset.
fn occurrences(words: &[String], gram: &[String]) -> usize {
    if gram.len() > words.len() {
        return 0;
    }
    (0..=words.len() - gram.len())
        .filter(|&i| words[i..i + gram.len()] == *gram)
        .count()
}

pub fn bleu(corpus: &EvalCorpus, n: usize) -> f64 {
    let mut precisions = Vec::new();
    for k in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for it in &corpus.items {
            let h = &it.hypothesis;
            if h.len() < k {
                continue;
            }
            let mut seen: Vec<&[String]> = Vec::new();
            for i in 0..=h.len() - k {
                let g = &h[i..i + k];
                total += 1;
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let cap = it.references.iter().map(|r| occurrences(r, g)).max().unwrap();
                matched += occurrences(h, g).min(cap);
            }
        }
        precisions.push((matched, total));
    }
    let c: usize = corpus.items.iter().map(|it| it.hypothesis.len()).sum();
    if c == 0 || precisions[0].0 == 0 {
        return 0.0;
    }
    let mut r = 0usize;
    for it in &corpus.items {
        let mut lens: Vec<usize> = it.references.iter().map(Vec::len).collect();
        lens.sort();
        let hl = it.hypothesis.len() as i64;
        let mut best = lens[0];
        for &l in &lens {
            if (l as i64 - hl).abs() < (best as i64 - hl).abs() {
                best = l;
            }
        }
        r += best;
    }
    let mut prod = 1.0;
    for (k, &(m, t)) in precisions.iter().enumerate() {
        prod *= if m == 0 && k > 0 { 1.0 / (t as f64 + 1.0) } else { m as f64 / t as f64 };
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * prod.powf(1.0 / n as f64)
}

pub fn lcs_recursive(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    if a[0] == b[0] {
        1 + lcs_recursive(&a[1..], &b[1..])
    } else {
        lcs_recursive(&a[1..], b).max(lcs_recursive(a, &b[1..]))
    }
}

pub fn rouge(corpus: &EvalCorpus) -> f64 {
    let mut sum = 0.0;
    for it in &corpus.items {
        let mut best = 0.0f64;
        for r in &it.references {
            let l = lcs_recursive(&it.hypothesis, r) as f64;
            if l > 0.0 {
                let p = l / it.hypothesis.len() as f64;
                let rc = l / r.len() as f64;
                let b2 = ROUGE_BETA * ROUGE_BETA;
                best = best.max((1.0 + b2) * p * rc / (rc + b2 * p));
            }
        }
        sum += best;
    }
    100.0 * sum / corpus.items.len() as f64
}

/// (exact, stem, synonym, chunks) of an explicit list of matched pairs.
fn describe(pairs: &[(usize, usize, MatchStage)]) -> (usize, usize, usize, usize) {
    let mut sorted = pairs.to_vec();
    sorted.sort();
    let mut chunks = 0;
    for (k, &(i, j, _)) in sorted.iter().enumerate() {
        let continues = k > 0 && sorted[k - 1].0 + 1 == i && sorted[k - 1].1 + 1 == j;
        if !continues {
            chunks += 1;
        }
    }
    let count = |s| pairs.iter().filter(|p| p.2 == s).count();
    (
        count(MatchStage::Exact),
        count(MatchStage::Stem),
        count(MatchStage::Synonym),
        chunks,
    )
}

/// Enumerates every one-to-one partial matching.
fn all_alignments(
    m: &Meteor,
    h: &[String],
    r: &[String],
    i: usize,
    used: &mut Vec<bool>,
    pairs: &mut Vec<(usize, usize, MatchStage)>,
    out: &mut Vec<(usize, usize, usize, usize)>,
) {
    if i == h.len() {
        out.push(describe(pairs));
        return;
    }
    all_alignments(m, h, r, i + 1, used, pairs, out);
    for j in 0..r.len() {
        if used[j] {
            continue;
        }
        if let Some(s) = m.stage(&h[i], &r[j]) {
            used[j] = true;
            pairs.push((i, j, s));
            all_alignments(m, h, r, i + 1, used, pairs, out);
            pairs.pop();
            used[j] = false;
        }
    }
}

pub fn meteor_pair(m: &Meteor, h: &[String], r: &[String]) -> f64 {
    let mut all = Vec::new();
    all_alignments(m, h, r, 0, &mut vec![false; r.len()], &mut Vec::new(), &mut all);
    let best = all
        .into_iter()
        .max_by_key(|&(e, s, y, c)| (e, s, y, std::cmp::Reverse(c)))
        .unwrap();
    let matches = (best.0 + best.1 + best.2) as f64;
    if matches == 0.0 {
        return 0.0;
    }
    let p = matches / h.len() as f64;
    let rc = matches / r.len() as f64;
    let f = 10.0 * p * rc / (rc + 9.0 * p);
    f * (1.0 - 0.5 * (best.3 as f64 / matches).powi(3))
}

pub fn meteor(corpus: &EvalCorpus) -> f64 {
    let m = Meteor::synthetic();
    let sum: f64 = corpus
        .items
        .iter()
        .map(|it| {
            it.references
                .iter()
                .map(|r| meteor_pair(&m, &it.hypothesis, r))
                .fold(0.0, f64::max)
        })
        .sum();
    100.0 * sum / corpus.items.len() as f64
}

/// Dense TF-IDF vectors over an explicit n-gram list.
pub fn cider(corpus: &EvalCorpus) -> f64 {
    let n_images = corpus.items.len() as f64;
    let mut total = 0.0;
    for it in &corpus.items {
        let mut per_n = 0.0;
        for n in 1..=4 {
            let mut grams: Vec<Vec<String>> = Vec::new();
            for other in &corpus.items {
                for s in std::iter::once(&other.hypothesis).chain(&other.references) {
                    for w in s.windows(n) {
                        if !grams.iter().any(|g| g == w) {
                            grams.push(w.to_vec());
                        }
                    }
                }
            }
            let idf: Vec<f64> = grams
                .iter()
                .map(|g| {
                    let df = corpus
                        .items
                        .iter()
                        .filter(|o| o.references.iter().any(|r| occurrences(r, g) > 0))
                        .count();
                    (n_images / df.max(1) as f64).ln()
                })
                .collect();
            let vector = |s: &[String]| -> Vec<f64> {
                grams
                    .iter()
                    .zip(&idf)
                    .map(|(g, w)| occurrences(s, g) as f64 * w)
                    .collect()
            };
            let h = vector(&it.hypothesis);
            let mut sims = 0.0;
            for r in &it.references {
                let rv = vector(r);
                let dot: f64 = h.iter().zip(&rv).map(|(a, b)| a * b).sum();
                let nh = h.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nr = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nh > 0.0 && nr > 0.0 {
                    sims += 10.0 * dot / (nh * nr);
                }
            }
            per_n += sims / it.references.len() as f64;
        }
        total += per_n / 4.0;
    }
    100.0 * total / n_images
}
