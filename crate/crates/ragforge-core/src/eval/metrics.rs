//! Answer-level metrics: normalization, exact match, token F1, and passage
//! hit detection.

use crate::corpus::Passage;
use crate::util::contains_subsequence;

/// Canonical answer form: lowercase, every non-alphanumeric character
/// becomes a space, whitespace-split, articles (`a`, `an`, `the`) dropped.
pub fn normalize_answer(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Normalized-form equality. Two answers that both normalize to nothing
/// (for example `"the"` vs `"a"`) count as a match.
pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize_answer(pred) == normalize_answer(gold)
}

/// Multiset token F1 over normalized forms. Both empty is a perfect 1.0;
/// exactly one empty is 0.0.
pub fn f1_score(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut gold_counts = std::collections::HashMap::new();
    for t in &g {
        *gold_counts.entry(t.as_str()).or_insert(0usize) += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = gold_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Whether the normalized answer occurs as a contiguous token run in the
/// passage's normalized title-plus-body. Empty answers never hit.
pub fn answer_in_passage(answer: &str, passage: &Passage) -> bool {
    let needle = normalize_answer(answer);
    let haystack = normalize_answer(&format!("{} {}", passage.title, passage.body));
    contains_subsequence(&haystack, &needle)
}

/// Whether any of the first `k` passages (ranked best-first by the caller)
/// contains the answer. A hit at rank r implies a hit for every k ≥ r.
pub fn top_k_hit<'a>(
    answer: &str,
    passages: impl IntoIterator<Item = &'a Passage>,
    k: usize,
) -> bool {
    passages
        .into_iter()
        .take(k)
        .any(|p| answer_in_passage(answer, p))
}
