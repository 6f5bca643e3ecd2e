//! Held-out metrics: cross-entropy, accuracy and zero-expert usage.

use serde::Serialize;

use super::corpus::{Corpus, SpanTag};
use super::rollout::{generate, log_softmax_row, SamplingConfig, TEACHER_LOGP_FLOOR};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, MoeModel, Token};

const EVAL_CHUNK: usize = 64;

/// Raw sums for one group of tokens.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Tally {
    /// Tokens scored as next-token targets.
    pub targets: usize,
    pub nll_sum: f64,
    pub correct: usize,
    /// Tokens routed (every position), and zero-expert slots taken by them.
    pub routed: usize,
    pub zero_slots: usize,
}

impl Tally {
    pub fn ce(&self) -> f64 {
        self.nll_sum / self.targets as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.targets as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub overall: Tally,
    pub per_tag: Vec<(SpanTag, Tally)>,
    /// Zero-expert slots per layer.
    pub zero_slots_per_layer: Vec<usize>,
    pub top_k: usize,
    pub ce: f64,
    pub accuracy: f64,
    pub r_ze: f64,
    pub r_ze_per_layer: Vec<f64>,
}

impl EvalMetrics {
    pub fn tag(&self, tag: SpanTag) -> Option<&Tally> {
        self.per_tag.iter().find(|(t, _)| *t == tag).map(|(_, m)| m)
    }

    pub fn tag_r_ze(&self, tag: SpanTag) -> Option<f64> {
        let n = self.r_ze_per_layer.len();
        self.tag(tag).map(|m| m.zero_slots as f64 / (m.routed * self.top_k * n) as f64)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Scores every next-token target of `corpus`. A target's tag is the tag of
/// the predicted token; a routed token's tag is its own.
pub fn evaluate(model: &MoeModel, corpus: &Corpus, opts: ForwardOptions) -> Result<EvalMetrics> {
    if corpus.is_empty() {
        return Err(Error::input("empty evaluation split"));
    }
    let l = model.config().num_layers;
    let k = model.config().active_k();
    let mut overall = Tally::default();
    let mut per_tag: Vec<(SpanTag, Tally)> = SpanTag::ALL.iter().map(|&t| (t, Tally::default())).collect();
    let mut layer_slots = vec![0usize; l];
    for chunk in corpus.sequences.chunks(EVAL_CHUNK) {
        let seqs: Vec<Vec<Token>> = chunk.iter().map(|s| s.tokens.clone()).collect();
        let inf = model.run(&seqs, opts)?;
        for (s, seq) in chunk.iter().enumerate() {
            for p in 0..seq.tokens.len() {
                let row = inf.segments[s].0 + p;
                let zero: usize = inf.decisions.iter().map(|d| d[row].zero_selected).sum();
                for (layer, d) in inf.decisions.iter().enumerate() {
                    layer_slots[layer] += d[row].zero_selected;
                }
                let tag_slot = &mut per_tag[seq.tags[p] as usize].1;
                for t in [&mut overall, tag_slot] {
                    t.routed += 1;
                    t.zero_slots += zero;
                }
                if p == 0 {
                    continue;
                }
                let logits = inf.logits_at(s, p - 1);
                let lp = log_softmax_row(logits);
                let y = seq.tokens[p] as usize;
                let hit = argmax(logits) == y;
                let tag_slot = &mut per_tag[seq.tags[p] as usize].1;
                for t in [&mut overall, tag_slot] {
                    t.targets += 1;
                    t.nll_sum -= lp[y];
                    t.correct += hit as usize;
                }
            }
        }
    }
    let denom = (overall.routed * k) as f64;
    Ok(EvalMetrics {
        ce: overall.ce(),
        accuracy: overall.accuracy(),
        r_ze: overall.zero_slots as f64 / (denom * l as f64),
        r_ze_per_layer: layer_slots.iter().map(|&z| z as f64 / denom).collect(),
        zero_slots_per_layer: layer_slots,
        top_k: k,
        overall,
        per_tag,
    })
}

/// Held-out cross-entropy of an add-one smoothed unigram model fitted on `train`.
pub fn unigram_ce(train: &Corpus, heldout: &Corpus, vocab_size: usize) -> f64 {
    let mut counts = vec![1.0; vocab_size];
    for s in &train.sequences {
        for &t in &s.tokens[1..] {
            counts[t as usize] += 1.0;
        }
    }
    let z: f64 = counts.iter().sum();
    let (mut nll, mut n) = (0.0, 0usize);
    for s in &heldout.sequences {
        for &t in &s.tokens[1..] {
            nll -= (counts[t as usize] / z).ln();
            n += 1;
        }
    }
    nll / n as f64
}

/// Monte-Carlo reverse KL `mean_t(logπ_θ(y_t) − logπ_T(y_t))` over tokens
/// sampled from the student.
pub fn reverse_kl_estimate(
    student: &MoeModel,
    teacher: &MoeModel,
    prompts: &[Vec<Token>],
    sampling: &SamplingConfig,
    opts: ForwardOptions,
    seed: u64,
) -> Result<f64> {
    let mut rollouts = generate(student, prompts, sampling, opts, seed, "kl-eval", 0)?;
    super::rollout::attach_teacher_logp(teacher, &mut rollouts)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for r in &rollouts {
        let t = r.teacher_logp.as_ref().expect("scored");
        for (s, tl) in r.logp.iter().zip(t) {
            sum += s - tl.max(TEACHER_LOGP_FLOOR);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}
