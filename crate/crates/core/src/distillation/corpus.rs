//! Synthetic corpus: alternating spans from a sparse first-order Markov
//! chain ("natural") and from deterministic periodic patterns ("structured").

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Token;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanTag {
    Natural,
    Structured,
}

impl SpanTag {
    pub const ALL: [SpanTag; 2] = [SpanTag::Natural, SpanTag::Structured];

    pub fn as_str(self) -> &'static str {
        match self {
            SpanTag::Natural => "natural",
            SpanTag::Structured => "structured",
        }
    }

    fn code(self) -> char {
        match self {
            SpanTag::Natural => 'n',
            SpanTag::Structured => 's',
        }
    }
}

impl fmt::Display for SpanTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpanTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" | "n" => Ok(SpanTag::Natural),
            "structured" | "s" => Ok(SpanTag::Structured),
            other => Err(Error::input(format!("unknown span tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub num_sequences: usize,
    #[serde(default = "default_heldout")]
    pub heldout_sequences: usize,
    pub seq_len: usize,
    /// Tokens `0..natural_vocab` belong to the chain, the rest to patterns.
    pub natural_vocab: usize,
    /// Nonzero transitions per chain state.
    pub successors: usize,
    /// Dirichlet concentration of each transition row; larger is flatter.
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    /// Inclusive span length ranges.
    pub natural_span: (usize, usize),
    pub structured_span: (usize, usize),
    /// Pattern periods; they partition the structured tokens.
    pub periods: Vec<usize>,
    pub seed: u64,
}

fn default_heldout() -> usize {
    256
}

fn default_concentration() -> f64 {
    1.0
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            num_sequences: 2048,
            heldout_sequences: default_heldout(),
            seq_len: 40,
            natural_vocab: 48,
            successors: 4,
            concentration: default_concentration(),
            natural_span: (8, 16),
            structured_span: (16, 24),
            periods: vec![2, 2, 3, 3, 3, 3],
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.natural_vocab == 0 || self.natural_vocab >= self.vocab_size {
            return fail(format!("natural_vocab {} must lie in 1..{}", self.natural_vocab, self.vocab_size));
        }
        if self.successors == 0 || self.successors > self.natural_vocab {
            return fail(format!("successors {} out of range", self.successors));
        }
        if !(self.concentration > 0.0) {
            return fail("concentration must be positive".into());
        }
        for (name, (lo, hi)) in [("natural_span", self.natural_span), ("structured_span", self.structured_span)] {
            if lo == 0 || lo > hi {
                return fail(format!("{name} ({lo}, {hi}) is not a valid range"));
            }
        }
        let shortest = self.natural_span.0.min(self.structured_span.0);
        if self.seq_len < shortest {
            return fail(format!("seq_len {} is shorter than one span ({shortest})", self.seq_len));
        }
        if self.num_sequences == 0 {
            return fail("num_sequences must be positive".into());
        }
        if self.periods.iter().any(|&p| p < 2) {
            return fail("pattern periods must be at least 2".into());
        }
        let structured = self.vocab_size - self.natural_vocab;
        if self.periods.iter().sum::<usize>() != structured {
            return fail(format!(
                "periods sum to {}, expected the {structured} structured tokens",
                self.periods.iter().sum::<usize>()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<Token>,
    pub tags: Vec<SpanTag>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub sequences: Vec<Sequence>,
}

/// The generating process: transition rows and pattern bank.
#[derive(Clone, Debug)]
pub struct CorpusGenerator {
    spec: CorpusSpec,
    /// Per state: `(next token, probability)` pairs, ascending by token.
    transitions: Vec<Vec<(Token, f64)>>,
    patterns: Vec<Vec<Token>>,
}

impl CorpusGenerator {
    pub fn new(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(spec.seed, "corpus/process");
        let gamma = Gamma::new(spec.concentration, 1.0).map_err(|e| Error::config(e.to_string()))?;
        let states: Vec<Token> = (0..spec.natural_vocab as Token).collect();
        let transitions = (0..spec.natural_vocab)
            .map(|_| {
                let mut next: Vec<Token> = states.choose_multiple(&mut rng, spec.successors).copied().collect();
                next.sort_unstable();
                let w: Vec<f64> = next.iter().map(|_| gamma.sample(&mut rng).max(1e-6)).collect();
                let z: f64 = w.iter().sum();
                next.into_iter().zip(w.into_iter().map(|x| x / z)).collect()
            })
            .collect();
        let mut structured: Vec<Token> = (spec.natural_vocab as Token..spec.vocab_size as Token).collect();
        structured.shuffle(&mut rng);
        let mut patterns = Vec::with_capacity(spec.periods.len());
        let mut rest = structured.as_slice();
        for &p in &spec.periods {
            let (head, tail) = rest.split_at(p);
            patterns.push(head.to_vec());
            rest = tail;
        }
        Ok(Self { spec: spec.clone(), transitions, patterns })
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    pub fn patterns(&self) -> &[Vec<Token>] {
        &self.patterns
    }

    pub fn transitions(&self) -> &[Vec<(Token, f64)>] {
        &self.transitions
    }

    /// Mean conditional entropy (nats) of a chain step under a uniform state.
    pub fn natural_step_entropy(&self) -> f64 {
        let total: f64 = self.transitions.iter().map(|row| row.iter().map(|&(_, p)| -p * p.ln()).sum::<f64>()).sum();
        total / self.transitions.len() as f64
    }

    /// `n` sequences drawn from the stream named `split`.
    pub fn sample(&self, split: &str, n: usize) -> Corpus {
        let sequences = (0..n)
            .map(|i| {
                let mut rng = seed::rng(self.spec.seed, &format!("corpus/{split}/{i}"));
                self.sequence(&mut rng)
            })
            .collect();
        Corpus { sequences }
    }

    fn sequence(&self, rng: &mut impl Rng) -> Sequence {
        let s = &self.spec;
        let mut tokens = Vec::with_capacity(s.seq_len);
        let mut tags = Vec::with_capacity(s.seq_len);
        let mut tag = if rng.random_bool(0.5) { SpanTag::Natural } else { SpanTag::Structured };
        while tokens.len() < s.seq_len {
            let (lo, hi) = match tag {
                SpanTag::Natural => s.natural_span,
                SpanTag::Structured => s.structured_span,
            };
            let len = rng.random_range(lo..=hi).min(s.seq_len - tokens.len());
            match tag {
                SpanTag::Natural => {
                    let mut state = rng.random_range(0..s.natural_vocab) as Token;
                    tokens.push(state);
                    for _ in 1..len {
                        state = self.next_state(state, rng.random::<f64>());
                        tokens.push(state);
                    }
                }
                SpanTag::Structured => {
                    let pat = &self.patterns[rng.random_range(0..self.patterns.len())];
                    let phase = rng.random_range(0..pat.len());
                    tokens.extend((0..len).map(|i| pat[(phase + i) % pat.len()]));
                }
            }
            tags.extend(std::iter::repeat_n(tag, len));
            tag = match tag {
                SpanTag::Natural => SpanTag::Structured,
                SpanTag::Structured => SpanTag::Natural,
            };
        }
        Sequence { tokens, tags }
    }

    fn next_state(&self, state: Token, u: f64) -> Token {
        let row = &self.transitions[state as usize];
        let mut acc = 0.0;
        for &(t, p) in row {
            acc += p;
            if u < acc {
                return t;
            }
        }
        row.last().expect("nonempty row").0
    }
}

/// Training split of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    Ok(CorpusGenerator::new(spec)?.sample("train", spec.num_sequences))
}

/// Held-out split of `spec`, drawn from the same process.
pub fn generate_heldout(spec: &CorpusSpec) -> Result<Corpus> {
    Ok(CorpusGenerator::new(spec)?.sample("heldout", spec.heldout_sequences))
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn token_lists(&self) -> Vec<Vec<Token>> {
        self.sequences.iter().map(|s| s.tokens.clone()).collect()
    }

    /// The first `len` tokens of every sequence.
    pub fn prompts(&self, len: usize) -> Result<Vec<Vec<Token>>> {
        self.sequences
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if s.tokens.len() < len || len == 0 {
                    Err(Error::input(format!(
                        "sequence {i} has {} tokens, cannot take a prompt of {len}",
                        s.tokens.len()
                    )))
                } else {
                    Ok(s.tokens[..len].to_vec())
                }
            })
            .collect()
    }

    /// Count-based unigram entropy (nats) of the tokens carrying `tag`.
    pub fn unigram_entropy(&self, tag: SpanTag) -> f64 {
        let mut counts = std::collections::BTreeMap::<Token, usize>::new();
        let mut n = 0usize;
        for s in &self.sequences {
            for (&t, &g) in s.tokens.iter().zip(&s.tags) {
                if g == tag {
                    *counts.entry(t).or_default() += 1;
                    n += 1;
                }
            }
        }
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n as f64;
                -p * p.ln()
            })
            .sum()
    }

    /// One line per sequence: space-separated tokens, a tab, one tag code per token.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.sequences {
            let toks: Vec<String> = s.tokens.iter().map(|t| t.to_string()).collect();
            let tags: String = s.tags.iter().map(|t| t.code()).collect();
            writeln!(out, "{}\t{}", toks.join(" "), tags)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Self> {
        let mut sequences = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Format(format!("corpus line {}: {m}", n + 1));
            let (toks, tags) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let tokens = toks
                .split(' ')
                .map(|t| t.parse::<Token>().map_err(|_| bad("bad token")))
                .collect::<Result<Vec<_>>>()?;
            let tags = tags
                .chars()
                .map(|c| c.to_string().parse::<SpanTag>().map_err(|_| bad("bad tag")))
                .collect::<Result<Vec<_>>>()?;
            if tags.len() != tokens.len() {
                return Err(bad("tag count differs from token count"));
            }
            sequences.push(Sequence { tokens, tags });
        }
        Ok(Corpus { sequences })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CorpusSpec {
        CorpusSpec { num_sequences: 200, heldout_sequences: 20, ..CorpusSpec::default() }
    }

    #[test]
    fn deterministic_and_fully_tagged() {
        let a = generate_corpus(&spec()).unwrap();
        let b = generate_corpus(&spec()).unwrap();
        assert_eq!(a, b);
        for s in &a.sequences {
            assert_eq!(s.tokens.len(), 40);
            assert_eq!(s.tags.len(), 40);
        }
        let other = generate_corpus(&CorpusSpec { seed: 1, ..spec() }).unwrap();
        assert_ne!(a, other);
        assert_ne!(generate_heldout(&spec()).unwrap().sequences[0], a.sequences[0]);
    }

    #[test]
    fn structured_spans_repeat_their_pattern() {
        let gen = CorpusGenerator::new(&spec()).unwrap();
        let c = gen.sample("train", 50);
        for s in &c.sequences {
            for i in 1..s.tokens.len() {
                if s.tags[i] == SpanTag::Structured && s.tags[i - 1] == SpanTag::Structured {
                    let pat = gen.patterns().iter().find(|p| p.contains(&s.tokens[i - 1])).unwrap();
                    let j = pat.iter().position(|&t| t == s.tokens[i - 1]).unwrap();
                    assert_eq!(s.tokens[i], pat[(j + 1) % pat.len()]);
                }
            }
        }
        // Period-2 pattern a, b gives a, b, a, b, ...
        let two = gen.patterns().iter().find(|p| p.len() == 2).unwrap();
        let seq: Vec<Token> = (0..6).map(|i| two[i % 2]).collect();
        assert_eq!(seq, vec![two[0], two[1], two[0], two[1], two[0], two[1]]);
    }

    #[test]
    fn natural_spans_have_higher_entropy() {
        let c = generate_corpus(&spec()).unwrap();
        assert!(c.unigram_entropy(SpanTag::Natural) > c.unigram_entropy(SpanTag::Structured));
        assert!(CorpusGenerator::new(&spec()).unwrap().natural_step_entropy() > 0.5);
    }

    #[test]
    fn rejects_short_sequences() {
        let bad = CorpusSpec { seq_len: 4, ..spec() };
        assert!(matches!(generate_corpus(&bad), Err(Error::Config(_))));
        let bad = CorpusSpec { periods: vec![2, 2], ..spec() };
        assert!(matches!(generate_corpus(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn text_round_trip() {
        let c = generate_corpus(&spec()).unwrap();
        let mut buf = Vec::new();
        c.write_text(&mut buf).unwrap();
        assert_eq!(Corpus::read_text(buf.as_slice()).unwrap(), c);
        assert!(Corpus::read_text("1 2\tn".as_bytes()).is_err());
    }
}
