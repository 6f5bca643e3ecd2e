//! Per-token records of student rollouts scored by the teacher.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::distillation::{attach_teacher_logp, generate, score_responses, SamplingConfig, SpanTag};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, MoeModel, Token};

/// Tolerance for the rescoring consistency check.
const RESCORE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub rollout_id: usize,
    /// Index within the response.
    pub position: usize,
    pub token_id: Token,
    pub span_tag: SpanTag,
    /// Tag of the last prompt token, shared by the whole rollout.
    pub rollout_tag: SpanTag,
    pub entropy: f64,
    /// `logπ_T − logπ_θ` at the sampled token.
    pub delta_logp: f64,
    pub student_logp: f64,
    pub teacher_logp: f64,
    pub r_ze_mean: f64,
    pub r_ze_per_layer: Vec<f64>,
}

/// Tag implied by the token id: structured tokens occupy the ids from
/// `natural_vocab` upward.
pub fn tag_of(token: Token, natural_vocab: usize) -> SpanTag {
    if (token as usize) < natural_vocab {
        SpanTag::Natural
    } else {
        SpanTag::Structured
    }
}

/// Samples from the student and records, per generated token, the student's
/// entropy, the teacher's log-probability of the identical prefix and token,
/// and the per-layer zero-expert share of the step that produced it.
pub fn record_rollouts(
    student: &MoeModel,
    teacher: &MoeModel,
    prompts: &[Vec<Token>],
    sampling: &SamplingConfig,
    natural_vocab: usize,
    seed: u64,
) -> Result<Vec<TokenRecord>> {
    let opts = ForwardOptions::default();
    let mut rollouts = generate(student, prompts, sampling, opts, seed, "analysis", 0)?;
    attach_teacher_logp(teacher, &mut rollouts)?;
    let rescored = score_responses(student, &rollouts, opts)?;
    let k = student.config().active_k() as f64;
    let mut out = Vec::new();
    for (r, again) in rollouts.iter().zip(&rescored) {
        let teacher_logp = r.teacher_logp.as_ref().expect("scored above");
        if again.len() != r.logp.len() || teacher_logp.len() != r.logp.len() {
            return Err(Error::Consistency(format!("rollout {}: pass lengths differ", r.id)));
        }
        let rollout_tag = tag_of(*r.prompt.last().expect("nonempty prompt"), natural_vocab);
        for t in 0..r.response.len() {
            if (again[t] - r.logp[t]).abs() > RESCORE_TOL {
                return Err(Error::Consistency(format!(
                    "rollout {} token {t}: sampled logp {} but rescored {}",
                    r.id, r.logp[t], again[t]
                )));
            }
            let per_layer: Vec<f64> = r.zero_selected[t].iter().map(|&z| z as f64 / k).collect();
            let r_ze_mean = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
            out.push(TokenRecord {
                rollout_id: r.id,
                position: t,
                token_id: r.response[t],
                span_tag: tag_of(r.response[t], natural_vocab),
                rollout_tag,
                entropy: r.entropy[t],
                delta_logp: teacher_logp[t] - r.logp[t],
                student_logp: r.logp[t],
                teacher_logp: teacher_logp[t],
                r_ze_mean,
                r_ze_per_layer: per_layer,
            });
        }
    }
    Ok(out)
}

const FIXED_COLUMNS: [&str; 10] = [
    "rollout_id",
    "position",
    "token_id",
    "span_tag",
    "rollout_tag",
    "entropy",
    "delta_logp",
    "student_logp",
    "teacher_logp",
    "r_ze_mean",
];

/// Columns: the fixed fields above, then `r_ze_layer_0..L-1`. Floats are
/// written in shortest round-trip form, so reading back is exact.
pub fn write_records_csv<W: Write>(out: W, records: &[TokenRecord]) -> Result<()> {
    let layers = records.first().map_or(0, |r| r.r_ze_per_layer.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..layers).map(|l| format!("r_ze_layer_{l}")));
    w.write_record(&header)?;
    for r in records {
        if r.r_ze_per_layer.len() != layers {
            return Err(Error::input("records disagree on the layer count"));
        }
        let mut row = vec![
            r.rollout_id.to_string(),
            r.position.to_string(),
            r.token_id.to_string(),
            r.span_tag.to_string(),
            r.rollout_tag.to_string(),
            r.entropy.to_string(),
            r.delta_logp.to_string(),
            r.student_logp.to_string(),
            r.teacher_logp.to_string(),
            r.r_ze_mean.to_string(),
        ];
        row.extend(r.r_ze_per_layer.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<TokenRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if header.len() < FIXED_COLUMNS.len() || header.iter().zip(FIXED_COLUMNS).any(|(a, b)| a != b) {
        return Err(Error::Format("token record CSV has an unexpected header".into()));
    }
    let layers = header.len() - FIXED_COLUMNS.len();
    let mut out = Vec::new();
    for (n, row) in rd.records().enumerate() {
        let row = row?;
        let bad = |c: &str| Error::Format(format!("record {}: bad {c}", n + 1));
        let f = |i: usize| row[i].parse::<f64>().map_err(|_| bad(FIXED_COLUMNS[i]));
        let u = |i: usize| row[i].parse::<usize>().map_err(|_| bad(FIXED_COLUMNS[i]));
        out.push(TokenRecord {
            rollout_id: u(0)?,
            position: u(1)?,
            token_id: u(2)? as Token,
            span_tag: row[3].parse()?,
            rollout_tag: row[4].parse()?,
            entropy: f(5)?,
            delta_logp: f(6)?,
            student_logp: f(7)?,
            teacher_logp: f(8)?,
            r_ze_mean: f(9)?,
            r_ze_per_layer: (0..layers)
                .map(|l| row[FIXED_COLUMNS.len() + l].parse::<f64>().map_err(|_| bad("r_ze_layer")))
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}
