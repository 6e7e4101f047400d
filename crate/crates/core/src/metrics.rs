//! Caption and localization scores.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::argmax;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram totals for `n = 1..=4`.
fn ngram_stats<S: AsRef<str>, T: AsRef<str>>(cand: &[S], reference: &[T]) -> [(usize, usize); 4] {
    let mut out = [(0, 0); 4];
    for (i, slot) in out.iter_mut().enumerate() {
        let n = i + 1;
        let c = ngram_counts(cand, n);
        let r = ngram_counts(reference, n);
        let matched = c.iter().map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0))).sum();
        *slot = (matched, cand.len().saturating_sub(n - 1));
    }
    out
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Corpus-level BLEU-4 against a single reference per candidate: clipped
/// n-gram precisions pooled over the corpus, uniform geometric mean, and the
/// brevity penalty. Unsmoothed, so any zero precision gives 0.
pub fn bleu4<S: AsRef<str>, T: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::invalid("BLEU over an empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut totals = [(0usize, 0usize); 4];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        for (t, s) in totals.iter_mut().zip(ngram_stats(c, r)) {
            t.0 += s.0;
            t.1 += s.1;
        }
        c_len += c.len();
        r_len += r.len();
    }
    if totals.iter().any(|&(m, t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = totals.iter().map(|&(m, t)| (m as f64 / t as f64).ln()).sum::<f64>() / 4.0;
    Ok((brevity_penalty(c_len, r_len) * log_p.exp()).clamp(0.0, 1.0))
}

/// Per-sentence BLEU-4 with add-one smoothing on every precision; for
/// diagnostics only, not comparable to [`bleu4`].
pub fn sentence_bleu4_smoothed<S: AsRef<str>, T: AsRef<str>>(candidate: &[S], reference: &[T]) -> f64 {
    let stats = ngram_stats(candidate, reference);
    let log_p: f64 = stats
        .iter()
        .map(|&(m, t)| ((m + 1) as f64 / (t + 1) as f64).ln())
        .sum::<f64>()
        / 4.0;
    brevity_penalty(candidate.len(), reference.len()) * log_p.exp()
}

/// Whether the peak cell of `gamma` (raster order, lowest index on ties)
/// lies in `footprint`.
pub fn pointing_hit(gamma: &[f64], footprint: &[(usize, usize)], width: usize) -> bool {
    if gamma.is_empty() {
        return false;
    }
    let peak = argmax(gamma);
    footprint.contains(&(peak / width, peak % width))
}

/// Fraction of `(γ, footprint)` pairs scored as hits; 0 for no pairs.
pub fn pointing_accuracy(maps: &[(&[f64], &[(usize, usize)])], width: usize) -> f64 {
    if maps.is_empty() {
        return 0.0;
    }
    let hits = maps.iter().filter(|(g, f)| pointing_hit(g, f, width)).count();
    hits as f64 / maps.len() as f64
}
