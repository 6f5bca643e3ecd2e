//! Synthetic corpus, teacher training and the two-stage self-distillation.

mod corpus;
mod eval;
mod optim;
mod rollout;
mod train;

pub use corpus::{generate_corpus, generate_heldout, Corpus, CorpusGenerator, CorpusSpec, Sequence, SpanTag};
pub use eval::{evaluate, reverse_kl_estimate, unigram_ce, EvalMetrics, Tally};
pub use optim::{AdamW, OptimConfig};
pub use rollout::{
    attach_teacher_logp, generate, sample_from_teacher, score_responses, Rollout, SamplingConfig, TEACHER_LOGP_FLOOR,
};
pub use train::{
    adapt, adapt_student, advantages, lm_loss, net_baseline, opd_loss, sft_loss, surrogate_loss, train_teacher,
    write_teacher_log_csv, AdaptConfig, AdaptOutcome, Adapter, Balance, LogRow, LossParts, OpdConfig, Schedule,
    SftConfig, StageKind, StageMarker, StepReport, TeacherConfig, TeacherLogRow, TrainState,
};
