//! Teacher training, the two distillation losses and the staged driver.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::optim::{AdamW, OptimConfig};
use super::rollout::{attach_teacher_logp, generate, sample_from_teacher, Rollout, SamplingConfig};
use crate::balancing::{layer_averaged_loss, AuxConfig, BalanceKind, BatchRoutingStats};
use crate::error::{Error, Result};
use crate::injection::{inject, InjectionSpec};
use crate::model::checkpoint::{self, StorageDtype};
use crate::model::{BoundParams, ForwardOptions, LayerTrace, ModelConfig, MoeModel, Token};
use crate::numerics::{Graph, Tensor, Var};
use crate::seed;

/// Differentiable pieces of one training objective.
#[derive(Debug)]
pub struct LossParts {
    pub total: Var,
    pub task: Var,
    pub balance: Option<Var>,
    /// Log-probabilities of the scored tokens, in rollout order.
    pub token_logp: Var,
    pub stats: Vec<BatchRoutingStats>,
}

/// Balancing term applied alongside a task loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Balance {
    pub aux: AuxConfig,
    pub kind: BalanceKind,
}

/// Log-probabilities of selected `(sequence, position)` targets. The target
/// at position `p` is predicted from row `p - 1`.
fn target_logp(
    model: &MoeModel,
    g: &mut Graph,
    b: &BoundParams,
    seqs: &[Vec<Token>],
    targets: &[(usize, usize)],
    opts: ForwardOptions,
) -> Result<(Var, Vec<LayerTrace>)> {
    let out = model.forward(g, b, seqs, opts)?;
    let v = model.config().vocab_size;
    let lsm = g.log_softmax(out.logits)?;
    let flat = targets
        .iter()
        .map(|&(s, p)| {
            if p == 0 || p >= seqs[s].len() {
                return Err(Error::input(format!("target position {p} of sequence {s} has no prefix")));
            }
            Ok((out.segments[s].0 + p - 1) * v + seqs[s][p] as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((g.pick(lsm, flat)?, out.layers))
}

fn with_balance(
    model: &MoeModel,
    g: &mut Graph,
    task: Var,
    token_logp: Var,
    traces: &[LayerTrace],
    balance: &Balance,
) -> Result<LossParts> {
    let cfg = model.config();
    let (bal, stats) =
        layer_averaged_loss(g, traces, cfg.num_experts, cfg.num_zero_experts, &balance.aux, balance.kind)?;
    let total = match bal {
        Some(l) => g.add(task, l)?,
        None => task,
    };
    Ok(LossParts { total, task, balance: bal, token_logp, stats })
}

fn response_targets(rollouts: &[Rollout]) -> (Vec<Vec<Token>>, Vec<(usize, usize)>) {
    let seqs: Vec<Vec<Token>> = rollouts.iter().map(Rollout::full_sequence).collect();
    let targets = rollouts
        .iter()
        .enumerate()
        .flat_map(|(s, r)| (0..r.response.len()).map(move |t| (s, r.prompt.len() + t)))
        .collect();
    (seqs, targets)
}

/// Next-token language-modelling loss over every position, plus balancing.
pub fn lm_loss(
    model: &MoeModel,
    g: &mut Graph,
    b: &BoundParams,
    seqs: &[Vec<Token>],
    balance: &Balance,
    opts: ForwardOptions,
) -> Result<LossParts> {
    let targets: Vec<(usize, usize)> =
        seqs.iter().enumerate().flat_map(|(s, q)| (1..q.len()).map(move |p| (s, p))).collect();
    let (lp, traces) = target_logp(model, g, b, seqs, &targets, opts)?;
    let mean = g.mean_all(lp)?;
    let task = g.scale(mean, -1.0)?;
    with_balance(model, g, task, lp, &traces, balance)
}

/// Supervised distillation: mean negative log-likelihood of the response
/// tokens plus balancing over every token of the forward.
pub fn sft_loss(
    model: &MoeModel,
    g: &mut Graph,
    b: &BoundParams,
    rollouts: &[Rollout],
    balance: &Balance,
    opts: ForwardOptions,
) -> Result<LossParts> {
    let (seqs, targets) = response_targets(rollouts);
    let (lp, traces) = target_logp(model, g, b, &seqs, &targets, opts)?;
    let mean = g.mean_all(lp)?;
    let task = g.scale(mean, -1.0)?;
    with_balance(model, g, task, lp, &traces, balance)
}

/// `−mean_t(A_t · logπ(y_t))` with the advantages held constant.
pub fn surrogate_loss(g: &mut Graph, token_logp: Var, advantages: &[f64]) -> Result<Var> {
    let n = g.value(token_logp).len();
    if advantages.len() != n {
        return Err(Error::shape(format!("{} advantages for {n} tokens", advantages.len())));
    }
    let c = g.constant(Tensor::vector(advantages.iter().map(|a| -a / n as f64).collect()));
    let weighted = g.mul(token_logp, c)?;
    g.sum_all(weighted)
}

/// Per-token advantages `logπ_T − logπ_θ`.
pub fn advantages(rollouts: &[Rollout], student_logp: &[f64]) -> Result<Vec<f64>> {
    let mut teacher = Vec::with_capacity(student_logp.len());
    for r in rollouts {
        let t =
            r.teacher_logp.as_ref().ok_or_else(|| Error::State(format!("rollout {} has no teacher scores", r.id)))?;
        teacher.extend_from_slice(t);
    }
    if teacher.len() != student_logp.len() {
        return Err(Error::shape("teacher and student token counts differ"));
    }
    Ok(teacher.iter().zip(student_logp).map(|(t, s)| t - s).collect())
}

/// On-policy distillation surrogate plus balancing. When `frozen` is given
/// those advantages are used; otherwise they are computed from this forward.
/// Returns the advantages used.
pub fn opd_loss(
    model: &MoeModel,
    g: &mut Graph,
    b: &BoundParams,
    rollouts: &[Rollout],
    frozen: Option<&[f64]>,
    balance: &Balance,
    opts: ForwardOptions,
) -> Result<(LossParts, Vec<f64>)> {
    let (seqs, targets) = response_targets(rollouts);
    let (lp, traces) = target_logp(model, g, b, &seqs, &targets, opts)?;
    let adv = match frozen {
        Some(a) => a.to_vec(),
        None => advantages(rollouts, g.value(lp).data())?,
    };
    let task = surrogate_loss(g, lp, &adv)?;
    Ok((with_balance(model, g, task, lp, &traces, balance)?, adv))
}

fn mean_r_ze(stats: &[BatchRoutingStats]) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    stats.iter().map(|s| s.r_ze).sum::<f64>() / stats.len() as f64
}

// ---------------------------------------------------------------- teacher

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub lr: f64,
    pub steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    /// Weight of the expert-level balancing loss.
    #[serde(default = "default_teacher_alpha")]
    pub aux_alpha: f64,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_teacher_alpha() -> f64 {
    0.01
}

fn default_warmup() -> usize {
    20
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            steps: 300,
            batch_size: 16,
            aux_alpha: default_teacher_alpha(),
            warmup: default_warmup(),
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::config("teacher lr and batch_size must be positive"));
        }
        self.optim.validate()
    }

    /// Linear warmup, then cosine decay to a tenth of the peak.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let x = ((step - self.warmup) as f64 / span).min(1.0);
        self.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * x).cos()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TeacherLogRow {
    pub step: usize,
    pub loss: f64,
    pub l_a: f64,
    pub grad_norm: f64,
}

/// Columns `step,loss,l_a,grad_norm`.
pub fn write_teacher_log_csv<W: std::io::Write>(out: W, rows: &[TeacherLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss", "l_a", "grad_norm"])?;
    for r in rows {
        w.write_record([r.step.to_string(), r.loss.to_string(), r.l_a.to_string(), r.grad_norm.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains a static model on `corpus` with next-token loss and a small
/// expert-level balancing term.
pub fn train_teacher(
    config: ModelConfig,
    corpus: &Corpus,
    hp: &TeacherConfig,
) -> Result<(MoeModel, Vec<TeacherLogRow>)> {
    hp.validate()?;
    if config.is_augmented() {
        return Err(Error::config("the teacher must be a static model (num_zero_experts = 0)"));
    }
    if corpus.is_empty() {
        return Err(Error::input("empty training corpus"));
    }
    let mut model = MoeModel::init(config, seed::derive(hp.seed, "teacher/init"))?;
    let mut opt = AdamW::new(hp.optim, model.params());
    let balance = Balance { aux: AuxConfig { alpha: hp.aux_alpha, w: 1.0 }, kind: BalanceKind::Expert };
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    let mut log = Vec::with_capacity(hp.steps);
    for step in 0..hp.steps {
        let mut batch = Vec::with_capacity(hp.batch_size);
        while batch.len() < hp.batch_size {
            if cursor == order.len() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut seed::rng(hp.seed, &format!("teacher/epoch/{epoch}")));
                epoch += 1;
                cursor = 0;
            }
            batch.push(corpus.sequences[order[cursor]].tokens.clone());
            cursor += 1;
        }
        let mut g = Graph::new();
        let b = model.bind(&mut g, true);
        let parts = lm_loss(&model, &mut g, &b, &batch, &balance, ForwardOptions::default())?;
        let loss = g.value(parts.total).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("teacher loss {loss} at step {step}")));
        }
        let grads = g.backward(parts.total)?;
        let grad_norm = opt.step(model.params_mut(), &b, &grads, hp.lr_at(step))?;
        log.push(TeacherLogRow {
            step,
            loss: g.value(parts.task).item(),
            l_a: parts.balance.map(|v| g.value(v).item()).unwrap_or(0.0),
            grad_norm,
        });
    }
    Ok((model, log))
}

/// The static truncation baseline: the teacher with half of its top-k.
pub fn net_baseline(teacher: &MoeModel) -> Result<MoeModel> {
    let mut m = teacher.clone();
    let k = (m.config().top_k / 2).max(1);
    m.set_k_override(Some(k))?;
    Ok(m)
}

// ---------------------------------------------------------------- adaptation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Sft,
    Opd,
    SftOpd,
}

impl Schedule {
    pub fn stages(self) -> &'static [StageKind] {
        match self {
            Schedule::Sft => &[StageKind::Sft],
            Schedule::Opd => &[StageKind::Opd],
            Schedule::SftOpd => &[StageKind::Sft, StageKind::Opd],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Sft,
    Opd,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Sft => "sft",
            StageKind::Opd => "opd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub lr: f64,
    pub steps: usize,
    /// Teacher responses per step.
    pub batch_size: usize,
    /// Prompts the teacher answers once, forming the supervised pool.
    pub num_prompts: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub max_len: usize,
    /// Stage-specific balancing override.
    #[serde(default)]
    pub aux: Option<AuxConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpdConfig {
    pub lr: f64,
    pub steps: usize,
    pub prompts_per_batch: usize,
    pub responses_per_prompt: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub max_len: usize,
    #[serde(default)]
    pub aux: Option<AuxConfig>,
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    #[serde(default)]
    pub aux: AuxConfig,
    #[serde(default = "default_balance_kind")]
    pub balance: BalanceKind,
    pub schedule: Schedule,
    pub sft: SftConfig,
    pub opd: OpdConfig,
    pub prompt_len: usize,
    /// Rescale normal-expert gates to sum to one (ablation).
    #[serde(default)]
    pub renormalize: bool,
    #[serde(default = "adapt_optim")]
    pub optim: OptimConfig,
    #[serde(default)]
    pub seed: u64,
    /// Write elapsed seconds into the training log; off keeps logs byte-stable.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_balance_kind() -> BalanceKind {
    BalanceKind::Group
}

fn adapt_optim() -> OptimConfig {
    OptimConfig::default()
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            aux: AuxConfig::default(),
            balance: BalanceKind::Group,
            schedule: Schedule::SftOpd,
            sft: SftConfig {
                lr: 2e-3,
                steps: 200,
                batch_size: 16,
                num_prompts: 2048,
                temperature: 1.0,
                max_len: 16,
                aux: None,
            },
            opd: OpdConfig {
                lr: 1e-3,
                steps: 80,
                prompts_per_batch: 8,
                responses_per_prompt: 2,
                temperature: 1.0,
                max_len: 16,
                aux: None,
            },
            prompt_len: 16,
            renormalize: false,
            optim: adapt_optim(),
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.aux.validate()?;
        for a in [self.sft.aux, self.opd.aux].into_iter().flatten() {
            a.validate()?;
        }
        if !(self.sft.lr > 0.0) || !(self.opd.lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.sft.batch_size == 0 || self.sft.num_prompts == 0 {
            return Err(Error::config("sft batch_size and num_prompts must be positive"));
        }
        if self.opd.prompts_per_batch == 0 || self.opd.responses_per_prompt == 0 {
            return Err(Error::config("opd batch sizes must be positive"));
        }
        if self.prompt_len == 0 {
            return Err(Error::config("prompt_len must be positive"));
        }
        SamplingConfig { temperature: self.sft.temperature, max_len: self.sft.max_len }.validate()?;
        SamplingConfig { temperature: self.opd.temperature, max_len: self.opd.max_len }.validate()?;
        self.optim.validate()
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions { mask_extra: false, renormalize: self.renormalize }
    }

    fn balance_for(&self, stage: StageKind) -> Balance {
        let aux = match stage {
            StageKind::Sft => self.sft.aux,
            StageKind::Opd => self.opd.aux,
        };
        Balance { aux: aux.unwrap_or(self.aux), kind: self.balance }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub stage: String,
    pub task_loss: f64,
    pub l_ga: f64,
    pub r_ze: f64,
    pub kl_estimate: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageMarker {
    pub stage: StageKind,
    /// Optimizer steps completed before the stage began.
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub optimizer: AdamW,
    pub step: u64,
    pub log: Vec<LogRow>,
    pub markers: Vec<StageMarker>,
    /// Teacher log-probabilities raised to the floor.
    pub clamp_events: usize,
}

impl TrainState {
    pub fn write_log_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(["step", "stage", "task_loss", "l_ga", "r_ze", "kl_estimate", "wall_time"])?;
        for r in &self.log {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Report of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub task_loss: f64,
    pub balance_loss: f64,
    pub total: f64,
    pub r_ze: f64,
    pub kl_estimate: Option<f64>,
    pub stats: Vec<BatchRoutingStats>,
}

/// Runs distillation stages on a student against a frozen teacher.
#[derive(Clone)]
pub struct Adapter<'t> {
    teacher: &'t MoeModel,
    student: MoeModel,
    state: TrainState,
    cfg: AdaptConfig,
    prompts: Vec<Vec<Token>>,
    sft_pool: Option<Vec<Rollout>>,
    sft_order: Vec<usize>,
    sft_cursor: usize,
    sft_epoch: usize,
    clock: Instant,
}

impl<'t> Adapter<'t> {
    pub fn new(teacher: &'t MoeModel, student: MoeModel, cfg: AdaptConfig, prompts: Vec<Vec<Token>>) -> Result<Self> {
        cfg.validate()?;
        if prompts.is_empty() {
            return Err(Error::input("no prompts for adaptation"));
        }
        if prompts.iter().any(|p| p.len() != cfg.prompt_len) {
            return Err(Error::input(format!("every prompt must have {} tokens", cfg.prompt_len)));
        }
        let optimizer = AdamW::new(cfg.optim, student.params());
        Ok(Self {
            teacher,
            student,
            state: TrainState { optimizer, step: 0, log: Vec::new(), markers: Vec::new(), clamp_events: 0 },
            cfg,
            prompts,
            sft_pool: None,
            sft_order: Vec::new(),
            sft_cursor: 0,
            sft_epoch: 0,
            clock: Instant::now(),
        })
    }

    pub fn student(&self) -> &MoeModel {
        &self.student
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn into_parts(self) -> (MoeModel, TrainState) {
        (self.student, self.state)
    }

    /// Opens a stage unless the previous one is of the same kind, in which
    /// case training simply continues.
    fn enter(&mut self, stage: StageKind) {
        if self.state.markers.last().map(|m| m.stage) != Some(stage) {
            self.state.markers.push(StageMarker { stage, step: self.state.step });
            self.state.optimizer = AdamW::new(self.cfg.optim, self.student.params());
        }
    }

    fn record(&mut self, stage: StageKind, r: &StepReport) {
        self.state.log.push(LogRow {
            step: self.state.step,
            stage: stage.as_str().to_string(),
            task_loss: r.task_loss,
            l_ga: r.balance_loss,
            r_ze: r.r_ze,
            kl_estimate: r.kl_estimate,
            wall_time: if self.cfg.record_wall_time { self.clock.elapsed().as_secs_f64() } else { 0.0 },
        });
    }

    fn apply(&mut self, g: &Graph, b: &BoundParams, parts: &LossParts, lr: f64, kl: Option<f64>) -> Result<StepReport> {
        let total = g.value(parts.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss {total} at step {}", self.state.step)));
        }
        let grads = g.backward(parts.total)?;
        self.state.optimizer.step(self.student.params_mut(), b, &grads, lr)?;
        self.state.step += 1;
        Ok(StepReport {
            task_loss: g.value(parts.task).item(),
            balance_loss: parts.balance.map(|v| g.value(v).item()).unwrap_or(0.0),
            total,
            r_ze: mean_r_ze(&parts.stats),
            kl_estimate: kl,
            stats: parts.stats.clone(),
        })
    }

    fn ensure_sft_pool(&mut self) -> Result<()> {
        if self.sft_pool.is_some() {
            return Ok(());
        }
        let n = self.cfg.sft.num_prompts.min(self.prompts.len());
        let mut rng = seed::rng(self.cfg.seed, "sft/prompts");
        let picks = index::sample(&mut rng, self.prompts.len(), n);
        let prompts: Vec<Vec<Token>> = picks.iter().map(|i| self.prompts[i].clone()).collect();
        let pool = sample_from_teacher(
            self.teacher,
            &prompts,
            self.cfg.sft.temperature,
            self.cfg.sft.max_len,
            seed::derive(self.cfg.seed, "sft/teacher"),
        )?;
        self.sft_pool = Some(pool);
        Ok(())
    }

    fn next_sft_batch(&mut self) -> Vec<Rollout> {
        let pool = self.sft_pool.as_ref().expect("pool built");
        let mut batch = Vec::with_capacity(self.cfg.sft.batch_size);
        while batch.len() < self.cfg.sft.batch_size {
            if self.sft_cursor == self.sft_order.len() {
                self.sft_order = (0..pool.len()).collect();
                self.sft_order.shuffle(&mut seed::rng(self.cfg.seed, &format!("sft/epoch/{}", self.sft_epoch)));
                self.sft_epoch += 1;
                self.sft_cursor = 0;
            }
            batch.push(pool[self.sft_order[self.sft_cursor]].clone());
            self.sft_cursor += 1;
        }
        batch
    }

    /// One supervised step on an explicit batch of teacher rollouts.
    pub fn sft_step_on(&mut self, batch: &[Rollout]) -> Result<StepReport> {
        self.enter(StageKind::Sft);
        let balance = self.cfg.balance_for(StageKind::Sft);
        let opts = self.cfg.forward_options();
        let mut g = Graph::new();
        let b = self.student.bind(&mut g, true);
        let parts =
            sft_loss(&self.student, &mut g, &b, batch, &balance, opts).map_err(|e| annotate(e, self.state.step))?;
        let r = self.apply(&g, &b, &parts, self.cfg.sft.lr, None)?;
        self.record(StageKind::Sft, &r);
        Ok(r)
    }

    pub fn sft_step(&mut self) -> Result<StepReport> {
        self.ensure_sft_pool()?;
        let batch = self.next_sft_batch();
        self.sft_step_on(&batch)
    }

    /// Samples a fresh on-policy batch from the current student.
    pub fn opd_rollouts(&mut self) -> Result<Vec<Rollout>> {
        let o = &self.cfg.opd;
        let mut rng = seed::rng(self.cfg.seed, &format!("opd/prompts/{}", self.state.step));
        let n = o.prompts_per_batch.min(self.prompts.len());
        let picks = index::sample(&mut rng, self.prompts.len(), n);
        let mut batch = Vec::with_capacity(n * o.responses_per_prompt);
        for i in picks.iter() {
            for _ in 0..o.responses_per_prompt {
                batch.push(self.prompts[i].clone());
            }
        }
        let sampling = SamplingConfig { temperature: o.temperature, max_len: o.max_len };
        let mut rollouts = generate(
            &self.student,
            &batch,
            &sampling,
            self.cfg.forward_options(),
            self.cfg.seed,
            &format!("opd/rollout/{}", self.state.step),
            self.state.step,
        )?;
        self.state.clamp_events += attach_teacher_logp(self.teacher, &mut rollouts)?;
        Ok(rollouts)
    }

    /// One on-policy step on rollouts sampled by the current student.
    pub fn opd_step_on(&mut self, rollouts: &[Rollout]) -> Result<StepReport> {
        if let Some(r) = rollouts.iter().find(|r| r.policy_version != self.state.step) {
            return Err(Error::Consistency(format!(
                "rollout {} was sampled by policy {} but the student is at step {}",
                r.id, r.policy_version, self.state.step
            )));
        }
        self.enter(StageKind::Opd);
        let balance = self.cfg.balance_for(StageKind::Opd);
        let opts = self.cfg.forward_options();
        let mut g = Graph::new();
        let b = self.student.bind(&mut g, true);
        let (parts, adv) = opd_loss(&self.student, &mut g, &b, rollouts, None, &balance, opts)
            .map_err(|e| annotate(e, self.state.step))?;
        // The reverse-KL estimate is the negated mean advantage.
        let kl = -adv.iter().sum::<f64>() / adv.len() as f64;
        let r = self.apply(&g, &b, &parts, self.cfg.opd.lr, Some(kl))?;
        self.record(StageKind::Opd, &r);
        Ok(r)
    }

    pub fn opd_step(&mut self) -> Result<StepReport> {
        let rollouts = self.opd_rollouts()?;
        self.opd_step_on(&rollouts)
    }

    pub fn run_sft(&mut self, steps: usize) -> Result<()> {
        self.enter(StageKind::Sft);
        for _ in 0..steps {
            self.sft_step()?;
        }
        Ok(())
    }

    pub fn run_opd(&mut self, steps: usize) -> Result<()> {
        self.enter(StageKind::Opd);
        for _ in 0..steps {
            self.opd_step()?;
        }
        Ok(())
    }

    pub fn run_stage(&mut self, stage: StageKind) -> Result<()> {
        match stage {
            StageKind::Sft => self.run_sft(self.cfg.sft.steps),
            StageKind::Opd => self.run_opd(self.cfg.opd.steps),
        }
    }
}

fn annotate(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("batch {step}: {m}")),
        other => other,
    }
}

/// Result of [`adapt`].
pub struct AdaptOutcome {
    pub student: MoeModel,
    pub state: TrainState,
    /// Student snapshot after each completed stage.
    pub stage_models: Vec<(StageKind, MoeModel)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Injects extra experts into a copy of the teacher and runs the configured
/// stages, checkpointing after each one when `checkpoint_dir` is given.
pub fn adapt(
    teacher: &MoeModel,
    spec: &InjectionSpec,
    cfg: &AdaptConfig,
    prompts: Vec<Vec<Token>>,
    checkpoint_dir: Option<&Path>,
) -> Result<AdaptOutcome> {
    let student = inject(teacher, spec)?;
    adapt_student(teacher, student, cfg, prompts, checkpoint_dir)
}

/// [`adapt`] for an already prepared student, e.g. the truncation baseline.
pub fn adapt_student(
    teacher: &MoeModel,
    student: MoeModel,
    cfg: &AdaptConfig,
    prompts: Vec<Vec<Token>>,
    checkpoint_dir: Option<&Path>,
) -> Result<AdaptOutcome> {
    let mut a = Adapter::new(teacher, student, cfg.clone(), prompts)?;
    let mut stage_models = Vec::new();
    let mut checkpoints = Vec::new();
    for &stage in cfg.schedule.stages() {
        a.run_stage(stage)?;
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("student_{}.ckpt", stage.as_str()));
            checkpoint::save(a.student(), &path, StorageDtype::F64)?;
            checkpoints.push(path);
        }
        stage_models.push((stage, a.student().clone()));
    }
    let (student, state) = a.into_parts();
    Ok(AdaptOutcome { student, state, stage_models, checkpoints })
}
