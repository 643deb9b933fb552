//! Instruction-comparison metrics: BLEU, ROUGE-L, CIDEr, and proposition
//! F1 over the instruction grammar.
//!
//! These are pinned, self-contained definitions — close to the familiar
//! formulas but with every tie-break and epsilon fixed so scores are
//! reproducible bit for bit:
//!
//! - BLEU-n: clipped modified precision per order with additive epsilon
//!   `(m + 1e-9) / (h + 1e-9)`, geometric mean over orders, brevity
//!   penalty from the closest reference length (ties toward the shorter).
//! - ROUGE-L: token-level LCS F-measure with beta = 1.2, max over refs.
//! - CIDEr: tf-idf cosine per n-gram order 1..4 averaged over references
//!   then orders, times 10. Document frequency counts, per corpus item,
//!   the union of its references' n-grams; idf is `ln(N / max(1, df))`.
//! - proposition F1: set F1 over canonicalized (relation, landmark)
//!   pairs; the directional variant takes the harmonic mean with an edit
//!   similarity over turn-direction sequences. Max over references.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::instr::{parse_propositions, Dir, Instruction};
use crate::{Error, Result};

const EPS: f64 = 1e-9;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU with `max_n` orders (BLEU-1 and BLEU-4 are the ones reported).
pub fn bleu(candidate: &Instruction, references: &[Instruction], max_n: usize) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyInput("bleu references"));
    }
    if candidate.tokens().is_empty() {
        return Err(Error::EmptyInput("bleu candidate"));
    }
    if !(1..=4).contains(&max_n) {
        return Err(Error::MetricInput(format!(
            "bleu order {max_n} outside 1..=4"
        )));
    }
    let cand = candidate.tokens();
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand_counts = ngram_counts(cand, n);
        let hypothesized: usize = cand_counts.values().sum();
        let mut clipped = 0usize;
        for (gram, &count) in &cand_counts {
            let max_ref = references
                .iter()
                .map(|r| ngram_counts(r.tokens(), n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(max_ref);
        }
        let p = (clipped as f64 + EPS) / (hypothesized as f64 + EPS);
        log_sum += p.ln();
    }
    let geo = (log_sum / max_n as f64).exp();

    let c = cand.len() as f64;
    let r = references
        .iter()
        .map(|r| r.tokens().len())
        .min_by_key(|&len| {
            let diff = (len as i64 - cand.len() as i64).abs();
            (diff, len)
        })
        .expect("non-empty references") as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * geo)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut row = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            row[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(row[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut row);
        row[0] = 0;
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with beta = 1.2, maximized over references.
pub fn rouge_l(candidate: &Instruction, references: &[Instruction]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyInput("rouge references"));
    }
    if candidate.tokens().is_empty() {
        return Err(Error::EmptyInput("rouge candidate"));
    }
    const BETA: f64 = 1.2;
    let mut best: f64 = 0.0;
    for reference in references {
        if reference.tokens().is_empty() {
            continue;
        }
        let lcs = lcs_len(candidate.tokens(), reference.tokens()) as f64;
        let precision = lcs / candidate.tokens().len() as f64;
        let recall = lcs / reference.tokens().len() as f64;
        let denom = recall + BETA * BETA * precision;
        let f = if denom > 0.0 {
            (1.0 + BETA * BETA) * precision * recall / denom
        } else {
            0.0
        };
        best = best.max(f);
    }
    Ok(best)
}

/// CIDEr over a whole corpus at once (document frequencies are corpus
/// statistics, so items cannot be scored in isolation). Returns one score
/// per item, in input order.
pub fn cider(corpus: &[(Instruction, Vec<Instruction>)]) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("cider corpus"));
    }
    for (cand, refs) in corpus {
        if cand.tokens().is_empty() {
            return Err(Error::EmptyInput("cider candidate"));
        }
        if refs.is_empty() {
            return Err(Error::EmptyInput("cider references"));
        }
    }
    let n_items = corpus.len() as f64;

    // Document frequency per order: how many items mention the n-gram in
    // at least one reference.
    let mut df: [BTreeMap<Vec<String>, usize>; 4] = Default::default();
    for (_, refs) in corpus {
        for n in 1..=4usize {
            let mut seen: BTreeSet<&[String]> = BTreeSet::new();
            for reference in refs {
                seen.extend(ngram_counts(reference.tokens(), n).into_keys());
            }
            for gram in seen {
                *df[n - 1].entry(gram.to_vec()).or_insert(0) += 1;
            }
        }
    }
    let idf = |n: usize, gram: &[String]| -> f64 {
        let d = df[n - 1].get(gram).copied().unwrap_or(0).max(1);
        (n_items / d as f64).ln()
    };

    let weighted = |tokens: &[String], n: usize| -> BTreeMap<Vec<String>, f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(gram, count)| (gram.to_vec(), count as f64 * idf(n, gram)))
            .collect()
    };
    let cosine = |a: &BTreeMap<Vec<String>, f64>, b: &BTreeMap<Vec<String>, f64>| -> f64 {
        let dot: f64 = a
            .iter()
            .filter_map(|(g, &wa)| b.get(g).map(|&wb| wa * wb))
            .sum();
        let na: f64 = a.values().map(|w| w * w).sum::<f64>().sqrt();
        let nb: f64 = b.values().map(|w| w * w).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };

    let mut scores = Vec::with_capacity(corpus.len());
    for (cand, refs) in corpus {
        let mut order_sum = 0.0;
        for n in 1..=4usize {
            let cand_vec = weighted(cand.tokens(), n);
            let ref_mean = refs
                .iter()
                .map(|r| cosine(&cand_vec, &weighted(r.tokens(), n)))
                .sum::<f64>()
                / refs.len() as f64;
            order_sum += ref_mean;
        }
        scores.push(10.0 * order_sum / 4.0);
    }
    Ok(scores)
}

fn levenshtein(a: &[Dir], b: &[Dir]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut row = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        row[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            row[j] = sub.min(prev[j] + 1).min(row[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut row);
    }
    prev[b.len()]
}

fn set_f1<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => {
            let overlap = a.intersection(b).count() as f64;
            2.0 * overlap / (a.len() + b.len()) as f64
        }
    }
}

fn edit_similarity(a: &[Dir], b: &[Dir]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

/// Proposition F1: how much of what the references assert the candidate
/// asserts, over canonicalized (relation, landmark) pairs, maximized over
/// references. With `directional`, each per-reference score becomes the
/// harmonic mean of the semantic F1 and an edit similarity over the turn
/// direction sequences. Errors if any instruction fails to parse.
pub fn proposition_f1(
    candidate: &Instruction,
    references: &[Instruction],
    directional: bool,
) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyInput("proposition references"));
    }
    let cand = parse_propositions(candidate)?;
    let mut best: f64 = 0.0;
    for reference in references {
        let rf = parse_propositions(reference)?;
        let sem = set_f1(&cand.semantic, &rf.semantic);
        let score = if directional {
            let dir = edit_similarity(&cand.directional, &rf.directional);
            if sem + dir == 0.0 {
                0.0
            } else {
                2.0 * sem * dir / (sem + dir)
            }
        } else {
            sem
        };
        best = best.max(score);
    }
    Ok(best)
}

/// The six reported text metrics for one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub prop_f1: f64,
    pub prop_f1_dir: f64,
}

/// Score a whole corpus of (candidate, references) items at once; CIDEr
/// needs corpus-level statistics, the rest are per item.
pub fn compute_text_scores(
    corpus: &[(Instruction, Vec<Instruction>)],
) -> Result<Vec<TextScores>> {
    let cider_scores = cider(corpus)?;
    corpus
        .iter()
        .zip(cider_scores)
        .map(|((cand, refs), cider_score)| {
            Ok(TextScores {
                bleu1: bleu(cand, refs, 1)?,
                bleu4: bleu(cand, refs, 4)?,
                rouge_l: rouge_l(cand, refs)?,
                cider: cider_score,
                prop_f1: proposition_f1(cand, refs, false)?,
                prop_f1_dir: proposition_f1(cand, refs, true)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instr(text: &str) -> Instruction {
        Instruction::from_text(text)
    }

    #[test]
    fn identical_candidate_scores_one_on_overlap_metrics() {
        let i = instr("turn left , walk past bed , stop");
        let refs = vec![i.clone()];
        assert!((bleu(&i, &refs, 1).unwrap() - 1.0).abs() < 1e-9);
        assert!((bleu(&i, &refs, 4).unwrap() - 1.0).abs() < 1e-9);
        assert!((rouge_l(&i, &refs).unwrap() - 1.0).abs() < 1e-9);
        assert!((proposition_f1(&i, &refs, true).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty_uses_closest_reference_length() {
        // Candidate of 5 tokens against references of 5 and 50 tokens:
        // the closest length (5) wins, so no penalty applies.
        let cand = instr("walk past bed , stop");
        let short = instr("walk past sofa , stop");
        let long_tokens = vec!["stop".to_string(); 50];
        let refs = vec![Instruction::from_tokens(long_tokens), short];
        let b = bleu(&cand, &refs, 1).unwrap();
        // Matches: walk? no. Clipped against best ref: 4 of 5 unigrams.
        assert!((b - (4.0 + 1e-9) / (5.0 + 1e-9)).abs() < 1e-9);
    }

    #[test]
    fn bleu_is_insensitive_to_unigram_order_but_bleu4_is_not() {
        let a = instr("turn around , walk past rug , stop");
        let scrambled = vec![instr("walk past rug , turn around , stop")];
        assert!((bleu(&a, &scrambled, 1).unwrap() - 1.0).abs() < 1e-9);
        assert!(bleu(&a, &scrambled, 4).unwrap() < 1.0);
    }

    #[test]
    fn rouge_handles_disjoint_and_empty_reference_sets() {
        let cand = instr("walk past bed , stop");
        assert!(rouge_l(&cand, &[]).is_err());
        // Completely disjoint tokens: LCS 0 -> F 0.
        let disjoint = vec![instr("head toward lamp")];
        assert_eq!(rouge_l(&cand, &disjoint).unwrap(), 0.0);
    }

    #[test]
    fn cider_rewards_rare_matches_over_common_ones() {
        // Every item shares "stop"; only one pair shares a rare landmark.
        let corpus = vec![
            (
                instr("walk past bed , stop"),
                vec![instr("walk past bed , stop")],
            ),
            (
                instr("walk past sofa , stop"),
                vec![instr("walk past lamp , stop")],
            ),
            (instr("stop"), vec![instr("stop")]),
        ];
        let scores = cider(&corpus).unwrap();
        assert!(scores[0] > scores[1], "exact match should beat mismatch");
        // "stop" appears in every reference set, so its idf is zero and
        // the single-token item has a zero-norm vector at every order.
        assert_eq!(scores[2], 0.0);
    }

    #[test]
    fn proposition_f1_canonicalizes_and_gates_on_direction() {
        let cand = instr("head toward piano , stop near bench");
        let refs = vec![
            instr("walk past piano , stop near bench"),
            instr("head toward organ , stop near pew"),
        ];
        assert!((proposition_f1(&cand, &refs, false).unwrap() - 1.0).abs() < 1e-12);
        assert!((proposition_f1(&cand, &refs, true).unwrap() - 1.0).abs() < 1e-12);

        let flipped = instr("turn left , turn left , walk past vase , stop");
        let reference = vec![instr("turn right , turn right , walk past vase , stop")];
        assert!((proposition_f1(&flipped, &reference, false).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(proposition_f1(&flipped, &reference, true).unwrap(), 0.0);
    }

    #[test]
    fn proposition_f1_on_empty_sets_follows_the_pinned_convention() {
        let bare = instr("stop");
        assert_eq!(proposition_f1(&bare, &[bare.clone()], false).unwrap(), 1.0);
        assert_eq!(proposition_f1(&bare, &[bare.clone()], true).unwrap(), 1.0);
        let named = instr("stop near lamp");
        assert_eq!(proposition_f1(&bare, &[named.clone()], false).unwrap(), 0.0);
        assert_eq!(proposition_f1(&named, &[bare], false).unwrap(), 0.0);
    }

    #[test]
    fn proposition_f1_requires_parseable_instructions() {
        let good = instr("stop");
        let bad = instr("wander aimlessly , stop");
        assert!(proposition_f1(&bad, &[good.clone()], false).is_err());
        assert!(proposition_f1(&good, &[bad], false).is_err());
    }

    #[test]
    fn edit_similarity_counts_substitutions_insertions_deletions() {
        use Dir::*;
        assert_eq!(edit_similarity(&[], &[]), 1.0);
        assert_eq!(edit_similarity(&[Left], &[Right]), 0.0);
        assert_eq!(edit_similarity(&[Left, Right], &[Left]), 0.5);
        assert!((edit_similarity(&[Left, Around, Right], &[Left, Right]) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_scoring_is_consistent_with_piecewise_calls() {
        let corpus = vec![
            (
                instr("turn left , walk past bed , stop"),
                vec![instr("turn left , walk past bed , stop")],
            ),
            (
                instr("walk past mattress , stop"),
                vec![instr("walk past bed , stop")],
            ),
        ];
        let all = compute_text_scores(&corpus).unwrap();
        assert_eq!(all.len(), 2);
        let ciders = cider(&corpus).unwrap();
        for (row, (cand, refs)) in all.iter().zip(&corpus) {
            assert_eq!(row.bleu1, bleu(cand, refs, 1).unwrap());
            assert_eq!(row.prop_f1, proposition_f1(cand, refs, false).unwrap());
        }
        assert_eq!(all[0].cider, ciders[0]);
        assert!((all[1].prop_f1 - 1.0).abs() < 1e-12, "synonyms canonicalize");
    }
}
