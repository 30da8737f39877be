//! ROUGE, generation cleanup and reward-model-judged win rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterSelector, HydraModel};
use crate::objectives::{score_sequences, RewardNormalizer};
use crate::tokenizer::{decode, layout, Token, BOS, EOS, PAD, SEP};

pub const DEFAULT_TIE_BAND: f64 = 0.02;
/// Length of the word n-gram whose repetition ends a generation.
pub const REPEAT_NGRAM: usize = 5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    /// Set when either side had no words; the scores are then zero.
    pub empty: bool,
}

impl RougeScore {
    fn from_overlap(overlap: usize, cand: usize, reference: usize) -> Self {
        if cand == 0 || reference == 0 {
            return Self {
                empty: true,
                ..Self::default()
            };
        }
        let precision = overlap as f64 / cand as f64;
        let recall = overlap as f64 / reference as f64;
        let f_measure = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f_measure,
            empty: false,
        }
    }
}

/// Lowercased whitespace-separated words. No stemming.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Words of a byte-token sequence; special tokens are dropped.
pub fn token_words(tokens: &[Token]) -> Vec<String> {
    words(&decode(tokens))
}

/// Clipped unigram overlap.
pub fn unigram_overlap<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> usize {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in reference {
        *counts.entry(w.as_ref()).or_default() += 1;
    }
    let mut overlap = 0;
    for w in candidate {
        if let Some(c) = counts.get_mut(w.as_ref()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    overlap
}

/// Longest common subsequence length, `O(nm)` time and `O(m)` space.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge1<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> RougeScore {
    RougeScore::from_overlap(
        unigram_overlap(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> RougeScore {
    RougeScore::from_overlap(
        lcs_len(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

/// Mean of each field over non-empty scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeAggregate {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub count: usize,
    pub empty: usize,
}

impl RougeAggregate {
    pub fn of(scores: &[RougeScore]) -> Self {
        let mut agg = Self::default();
        for s in scores {
            if s.empty {
                agg.empty += 1;
                continue;
            }
            agg.precision += s.precision;
            agg.recall += s.recall;
            agg.f_measure += s.f_measure;
            agg.count += 1;
        }
        if agg.count > 0 {
            let n = agg.count as f64;
            agg.precision /= n;
            agg.recall /= n;
            agg.f_measure /= n;
        }
        agg
    }
}

fn is_space(t: Token) -> bool {
    matches!(t, 0x20 | 0x09 | 0x0a | 0x0d)
}

/// Start offsets and contents of the whitespace-separated words of `tokens`.
fn word_spans(tokens: &[Token]) -> Vec<(usize, &[Token])> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if is_space(tokens[i]) {
            i += 1;
            continue;
        }
        let start = i;
        while i < tokens.len() && !is_space(tokens[i]) {
            i += 1;
        }
        out.push((start, &tokens[start..i]));
    }
    out
}

/// Generation cleanup before judging: cut at the first end-of-text token,
/// cut where the model opens a new turn (the separator token), drop padding,
/// then cut at the start of the first word 5-gram that already appeared
/// earlier. Trailing whitespace is trimmed. Idempotent.
pub fn cleanup(tokens: &[Token]) -> Vec<Token> {
    let end = tokens
        .iter()
        .position(|&t| t == EOS || t == SEP)
        .unwrap_or(tokens.len());
    let mut out: Vec<Token> = tokens[..end]
        .iter()
        .copied()
        .filter(|&t| t != PAD && t != BOS)
        .collect();
    let spans = word_spans(&out);
    let mut seen: BTreeMap<Vec<&[Token]>, usize> = BTreeMap::new();
    let mut cut = None;
    for j in 0..spans.len().saturating_sub(REPEAT_NGRAM - 1) {
        let gram: Vec<&[Token]> = spans[j..j + REPEAT_NGRAM].iter().map(|s| s.1).collect();
        if seen.contains_key(&gram) {
            cut = Some(spans[j].0);
            break;
        }
        seen.insert(gram, j);
    }
    if let Some(c) = cut {
        out.truncate(c);
    }
    while out.last().is_some_and(|&t| is_space(t)) {
        out.pop();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    /// Percentages; the three sum to 100.
    pub wins_a: f64,
    pub wins_b: f64,
    pub ties: f64,
    pub n: usize,
    pub tie_band: f64,
}

/// Win/tie percentages from paired scores. `|a - b| <= tie_band` is a tie.
pub fn winrate_from_scores(a: &[f64], b: &[f64], tie_band: f64) -> Result<WinRateReport> {
    if a.len() != b.len() {
        return Err(Error::Misaligned {
            op: "rm_winrate",
            detail: format!("{} outputs against {}", a.len(), b.len()),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument(
            "rm_winrate needs at least one pair".into(),
        ));
    }
    if !(tie_band >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tie_band {tie_band} must be >= 0"
        )));
    }
    let (mut wa, mut wb) = (0usize, 0usize);
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite {
                op: "rm_winrate",
                what: "reward",
                index: i,
            });
        }
        if (x - y).abs() <= tie_band {
            continue;
        }
        if x > y {
            wa += 1;
        } else {
            wb += 1;
        }
    }
    let n = a.len();
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    let (wins_a, wins_b) = (pct(wa), pct(wb));
    Ok(WinRateReport {
        wins_a,
        wins_b,
        ties: pct(n - wa - wb),
        n,
        tie_band,
    })
}

/// Judge that scores `BOS prompt SEP response EOS` with a reward head.
#[derive(Debug, Clone, Copy)]
pub struct RewardJudge<'a> {
    pub model: &'a HydraModel,
    pub selector: AdapterSelector,
    pub normalizer: RewardNormalizer,
}

impl RewardJudge<'_> {
    /// Normalized rewards of the cleaned responses.
    pub fn score(&self, prompts: &[Vec<Token>], responses: &[Vec<Token>]) -> Result<Vec<f64>> {
        if prompts.len() != responses.len() {
            return Err(Error::Misaligned {
                op: "RewardJudge::score",
                detail: format!("{} prompts, {} responses", prompts.len(), responses.len()),
            });
        }
        let max_len = self.model.config().max_seq_len;
        let seqs = prompts
            .iter()
            .zip(responses)
            .map(|(p, r)| {
                let r = cleanup(r);
                layout(p, &r, true, max_len)
                    .map(|e| e.tokens)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("max_seq_len {max_len} too short to judge"))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(score_sequences(self.model, &seqs, self.selector)?
            .into_iter()
            .map(|r| self.normalizer.apply(r))
            .collect())
    }
}

/// Reward-judged win rate of `outputs_a` against `outputs_b` on the same
/// prompts (raw prompt tokens).
pub fn rm_winrate(
    prompts: &[Vec<Token>],
    outputs_a: &[Vec<Token>],
    outputs_b: &[Vec<Token>],
    judge: &RewardJudge<'_>,
    tie_band: f64,
) -> Result<WinRateReport> {
    if outputs_a.len() != prompts.len() || outputs_b.len() != prompts.len() {
        return Err(Error::Misaligned {
            op: "rm_winrate",
            detail: format!(
                "{} prompts, {} and {} outputs",
                prompts.len(),
                outputs_a.len(),
                outputs_b.len()
            ),
        });
    }
    let a = judge.score(prompts, outputs_a)?;
    let b = judge.score(prompts, outputs_b)?;
    winrate_from_scores(&a, &b, tie_band)
}

/// One `a` versus `b` comparison: win rates plus ROUGE of each side
/// against references when available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingReport {
    pub a: String,
    pub b: String,
    pub winrate: WinRateReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge1_a: Option<RougeAggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l_a: Option<RougeAggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge1_b: Option<RougeAggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l_b: Option<RougeAggregate>,
}

/// ROUGE-1 and ROUGE-L aggregates of cleaned outputs against references.
pub fn rouge_against(
    outputs: &[Vec<Token>],
    references: &[Vec<Token>],
) -> Result<(RougeAggregate, RougeAggregate)> {
    if outputs.len() != references.len() {
        return Err(Error::Misaligned {
            op: "rouge_against",
            detail: format!("{} outputs, {} references", outputs.len(), references.len()),
        });
    }
    let (mut r1, mut rl) = (Vec::new(), Vec::new());
    for (o, r) in outputs.iter().zip(references) {
        let (c, r) = (token_words(&cleanup(o)), token_words(&cleanup(r)));
        r1.push(rouge1(&c, &r));
        rl.push(rouge_l(&c, &r));
    }
    Ok((RougeAggregate::of(&r1), RougeAggregate::of(&rl)))
}
