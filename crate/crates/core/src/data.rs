//! Preference data: ranked examples, pairing, JSONL ingestion and the
//! synthetic marker task.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{self, is_special, Encoded, Token};

/// A prompt with completions ordered best first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedExample {
    pub prompt: Vec<Token>,
    pub completions: Vec<Vec<Token>>,
}

impl RankedExample {
    pub fn from_text(prompt: &str, completions: &[&str]) -> Self {
        Self {
            prompt: tokenizer::encode(prompt),
            completions: completions.iter().map(|c| tokenizer::encode(c)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub prompt: Vec<Token>,
    pub winner: Vec<Token>,
    pub loser: Vec<Token>,
}

impl PreferencePair {
    /// Lays out both completions behind the (head-truncated) prompt, each
    /// terminated by EOS. `None` when a completion alone does not fit.
    pub fn encode(&self, max_len: usize) -> Option<(Encoded, Encoded)> {
        Some((
            tokenizer::layout(&self.prompt, &self.winner, true, max_len)?,
            tokenizer::layout(&self.prompt, &self.loser, true, max_len)?,
        ))
    }
}

/// How ranked completions become pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingRule {
    /// Best completion against each of the next ones.
    #[default]
    BestVsOthers,
    /// Every ordered pair `(i, j)` with `i < j`, in lexicographic order.
    AllPairs,
}

pub const DEFAULT_MAX_PAIRS: usize = 3;

pub fn pairs_from_ranking(
    example: &RankedExample,
    max_pairs: usize,
    rule: PairingRule,
) -> Result<Vec<PreferencePair>> {
    if max_pairs == 0 {
        return Err(Error::InvalidArgument("max_pairs must be >= 1".into()));
    }
    let n = example.completions.len();
    if n < 2 {
        log::warn!("ranked example with {n} completion(s) yields no pairs");
        return Ok(Vec::new());
    }
    let pair = |i: usize, j: usize| PreferencePair {
        prompt: example.prompt.clone(),
        winner: example.completions[i].clone(),
        loser: example.completions[j].clone(),
    };
    let out = match rule {
        PairingRule::BestVsOthers => (1..n).take(max_pairs).map(|j| pair(0, j)).collect(),
        PairingRule::AllPairs => (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .take(max_pairs)
            .map(|(i, j)| pair(i, j))
            .collect(),
    };
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct JsonlRecord {
    prompt: String,
    completions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedLine {
    /// 1-based.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<RankedExample>,
    pub skipped: Vec<SkippedLine>,
}

/// Reads `{"prompt": str, "completions": [str, ...]}` per line. Blank lines
/// are ignored; malformed lines and lines with fewer than two distinct
/// completions are recorded and skipped.
pub fn read_jsonl<R: Read>(reader: R) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let skip = |reason: String| SkippedLine {
            line: i + 1,
            reason,
        };
        match serde_json::from_str::<JsonlRecord>(&line) {
            Ok(rec) if rec.completions.len() < 2 => {
                corpus
                    .skipped
                    .push(skip("fewer than two completions".into()));
            }
            Ok(rec) if has_duplicates(&rec.completions) => {
                corpus.skipped.push(skip("duplicate completions".into()));
            }
            Ok(rec) => {
                let refs: Vec<&str> = rec.completions.iter().map(String::as_str).collect();
                corpus
                    .examples
                    .push(RankedExample::from_text(&rec.prompt, &refs));
            }
            Err(e) => corpus.skipped.push(skip(e.to_string())),
        }
    }
    for s in &corpus.skipped {
        log::warn!("skipped line {}: {}", s.line, s.reason);
    }
    Ok(corpus)
}

fn has_duplicates(items: &[String]) -> bool {
    items
        .iter()
        .enumerate()
        .any(|(i, a)| items[..i].contains(a))
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Corpus> {
    read_jsonl(std::fs::File::open(path)?)
}

/// Serializes examples one JSON object per line.
pub fn to_jsonl(examples: &[RankedExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        let rec = JsonlRecord {
            prompt: tokenizer::decode(&ex.prompt),
            completions: ex
                .completions
                .iter()
                .map(|c| tokenizer::decode(c))
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable"));
        out.push('\n');
    }
    out
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic assignment by prompt content, so every method sharing a
/// corpus sees the same split.
pub fn is_validation(prompt: &[Token], val_fraction: f64) -> bool {
    let h = fnv1a(prompt.iter().flat_map(|t| t.to_le_bytes()));
    ((h % 10_000) as f64) < val_fraction * 10_000.0
}

pub fn split(
    examples: Vec<RankedExample>,
    val_fraction: f64,
) -> (Vec<RankedExample>, Vec<RankedExample>) {
    examples
        .into_iter()
        .partition(|e| !is_validation(&e.prompt, val_fraction))
}

/// Marker-counting preference task. A completion is better the more marker
/// bytes it contains; the true reward is the marker fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub marker: u8,
    /// Bytes used for prompts and for non-marker response positions.
    pub filler: String,
    pub prompt_len_min: usize,
    pub prompt_len_max: usize,
    pub response_len: usize,
    pub marker_prob: f64,
    pub completions_per_prompt: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            marker: b'#',
            filler: "abcdefgh".into(),
            prompt_len_min: 3,
            prompt_len_max: 8,
            response_len: 8,
            marker_prob: 0.25,
            completions_per_prompt: 4,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic task: {m}")));
        if self.filler.is_empty() || self.filler.as_bytes().contains(&self.marker) {
            return bad("filler must be non-empty and exclude the marker");
        }
        if self.prompt_len_min == 0 || self.prompt_len_min > self.prompt_len_max {
            return bad("need 1 <= prompt_len_min <= prompt_len_max");
        }
        if self.response_len == 0 {
            return bad("response_len must be positive");
        }
        if self.completions_per_prompt < 2 || self.completions_per_prompt > self.response_len + 1 {
            return bad("completions_per_prompt must be in 2..=response_len + 1");
        }
        if !(0.0..=1.0).contains(&self.marker_prob) {
            return bad("marker_prob must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            marker: self.marker as Token,
        }
    }
}

/// The synthetic task's true reward: marker count over response length,
/// special tokens ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundTruth {
    pub marker: Token,
}

impl GroundTruth {
    pub fn reward(&self, response: &[Token]) -> f64 {
        let content: Vec<Token> = response
            .iter()
            .copied()
            .take_while(|&t| !is_special(t))
            .collect();
        if content.is_empty() {
            return 0.0;
        }
        content.iter().filter(|&&t| t == self.marker).count() as f64 / content.len() as f64
    }
}

/// `n` ranked examples drawn from `spec`. Completions within an example have
/// pairwise distinct marker counts, so the ranking is strict and no two
/// completions coincide.
pub fn synthetic_batch(
    spec: &SyntheticTaskSpec,
    n: usize,
) -> Result<(Vec<RankedExample>, GroundTruth)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "synthetic_batch needs n >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let filler: Vec<Token> = spec.filler.bytes().map(Token::from).collect();
    let marker = spec.marker as Token;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let plen = rng.random_range(spec.prompt_len_min..=spec.prompt_len_max);
        let prompt: Vec<Token> = (0..plen)
            .map(|_| filler[rng.random_range(0..filler.len())])
            .collect();
        let mut completions: Vec<(usize, Vec<Token>)> = Vec::new();
        while completions.len() < spec.completions_per_prompt {
            let c: Vec<Token> = (0..spec.response_len)
                .map(|_| {
                    if rng.random::<f64>() < spec.marker_prob {
                        marker
                    } else {
                        filler[rng.random_range(0..filler.len())]
                    }
                })
                .collect();
            let k = c.iter().filter(|&&t| t == marker).count();
            // regenerate on a marker-count collision
            if completions.iter().all(|(m, _)| *m != k) {
                completions.push((k, c));
            }
        }
        completions.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.len().cmp(&b.1.len())));
        out.push(RankedExample {
            prompt,
            completions: completions.into_iter().map(|(_, c)| c).collect(),
        });
    }
    Ok((out, spec.ground_truth()))
}
