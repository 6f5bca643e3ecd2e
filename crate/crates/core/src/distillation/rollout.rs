//! Autoregressive sampling and teacher-forced scoring.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Decoder, ForwardOptions, MoeModel, Token};
use crate::seed;

/// Floor applied to teacher log-probabilities so advantages stay bounded.
pub const TEACHER_LOGP_FLOOR: f64 = -30.0;

/// Sequences per batched forward when scoring.
const SCORE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub max_len: usize,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be positive"));
        }
        Ok(())
    }
}

/// One sampled response with per-token bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Index of the prompt within its batch; also names its random stream.
    pub id: usize,
    /// Optimizer step of the policy that produced the sample.
    pub policy_version: u64,
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    /// Untempered log-probability of each response token under the sampler.
    pub logp: Vec<f64>,
    /// Entropy (nats) of the sampler's untempered next-token distribution.
    pub entropy: Vec<f64>,
    /// `zero_selected[t][layer]` of the forward step that emitted token `t`.
    pub zero_selected: Vec<Vec<usize>>,
    /// Teacher log-probabilities of the response, when scored.
    pub teacher_logp: Option<Vec<f64>>,
    pub temperature: f64,
}

impl Rollout {
    pub fn full_sequence(&self) -> Vec<Token> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.response);
        s
    }
}

pub(crate) fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
    let lz = m + z.ln();
    logits.iter().map(|&x| x - lz).collect()
}

pub(crate) fn entropy_of(logp: &[f64]) -> f64 {
    logp.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { -l.exp() * l }).sum()
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

fn sample_index(logits: &[f64], temperature: f64, u: f64) -> usize {
    if temperature == 0.0 {
        return argmax(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
    let lp = log_softmax_row(&scaled);
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &l) in lp.iter().enumerate() {
        let p = l.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Samples `cfg.max_len` tokens after each prompt. Every prompt draws from
/// its own stream `(seed, "{label}/{index}")`, so results do not depend on
/// batching.
pub fn generate(
    model: &MoeModel,
    prompts: &[Vec<Token>],
    cfg: &SamplingConfig,
    opts: ForwardOptions,
    seed: u64,
    label: &str,
    policy_version: u64,
) -> Result<Vec<Rollout>> {
    cfg.validate()?;
    let Some(first) = prompts.first() else {
        return Ok(Vec::new());
    };
    let plen = first.len();
    if plen == 0 || prompts.iter().any(|p| p.len() != plen) {
        return Err(Error::input("prompts must be nonempty and of equal length"));
    }
    let total = plen + cfg.max_len;
    if total > model.config().max_seq_len {
        return Err(Error::config(format!(
            "prompt {plen} + response {} exceeds max_seq_len {}",
            cfg.max_len,
            model.config().max_seq_len
        )));
    }
    let b = prompts.len();
    let mut rngs: Vec<_> = (0..b).map(|i| seed::rng(seed, &format!("{label}/{i}"))).collect();
    let mut out: Vec<Rollout> = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| Rollout {
            id: i,
            policy_version,
            prompt: p.clone(),
            response: Vec::with_capacity(cfg.max_len),
            logp: Vec::with_capacity(cfg.max_len),
            entropy: Vec::with_capacity(cfg.max_len),
            zero_selected: Vec::with_capacity(cfg.max_len),
            teacher_logp: None,
            temperature: cfg.temperature,
        })
        .collect();
    let mut dec = Decoder::new(model, b, opts);
    let mut input: Vec<Token> = prompts.iter().map(|p| p[0]).collect();
    for pos in 0..total - 1 {
        let step = dec.step(&input)?;
        if pos + 1 < plen {
            input = prompts.iter().map(|p| p[pos + 1]).collect();
            continue;
        }
        for (s, r) in out.iter_mut().enumerate() {
            let logits = step.logits.row(s);
            let u: f64 = rngs[s].random();
            let y = sample_index(logits, cfg.temperature, u);
            let lp = log_softmax_row(logits);
            r.response.push(y as Token);
            r.logp.push(lp[y]);
            r.entropy.push(entropy_of(&lp));
            r.zero_selected.push(step.decisions.iter().map(|d| d[s].zero_selected).collect());
            input[s] = y as Token;
        }
    }
    Ok(out)
}

/// Teacher samples for supervised distillation.
pub fn sample_from_teacher(
    teacher: &MoeModel,
    prompts: &[Vec<Token>],
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Rollout>> {
    let cfg = SamplingConfig { temperature, max_len };
    let mut rs = generate(teacher, prompts, &cfg, ForwardOptions::default(), seed, "teacher-sample", 0)?;
    for r in &mut rs {
        r.teacher_logp = Some(r.logp.clone());
    }
    Ok(rs)
}

/// Teacher-forced log-probabilities of each rollout's response tokens.
pub fn score_responses(model: &MoeModel, rollouts: &[Rollout], opts: ForwardOptions) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(rollouts.len());
    for chunk in rollouts.chunks(SCORE_CHUNK) {
        let seqs: Vec<Vec<Token>> = chunk.iter().map(Rollout::full_sequence).collect();
        let inf = model.run(&seqs, opts)?;
        for (s, r) in chunk.iter().enumerate() {
            let plen = r.prompt.len();
            out.push(
                r.response
                    .iter()
                    .enumerate()
                    .map(|(t, &y)| log_softmax_row(inf.logits_at(s, plen + t - 1))[y as usize])
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Scores rollouts with the teacher, clamping at [`TEACHER_LOGP_FLOOR`].
/// Returns the number of clamped tokens.
pub fn attach_teacher_logp(teacher: &MoeModel, rollouts: &mut [Rollout]) -> Result<usize> {
    let scores = score_responses(teacher, rollouts, ForwardOptions::default())?;
    let mut clamped = 0;
    for (r, s) in rollouts.iter_mut().zip(scores) {
        let s: Vec<f64> = s
            .into_iter()
            .map(|l| {
                if l < TEACHER_LOGP_FLOOR {
                    clamped += 1;
                    TEACHER_LOGP_FLOOR
                } else {
                    l
                }
            })
            .collect();
        r.teacher_logp = Some(s);
    }
    Ok(clamped)
}
