//! The toy causal transformer with MoE feed-forward blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ExpertKind, ModelConfig};
use super::routing::{RouterParams, RoutingDecision};
use crate::error::{Error, Result};
use crate::numerics::{AttentionLayout, Graph, Tensor, Var};

pub type Token = u32;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug)]
pub(super) enum ExpertSlot {
    Normal { up: usize, gate: usize, down: usize },
    Zero,
    Copy,
}

#[derive(Clone, Debug)]
pub(super) struct LayerSlots {
    pub(super) attn_norm: usize,
    pub(super) wq: usize,
    pub(super) wk: usize,
    pub(super) wv: usize,
    pub(super) wo: usize,
    pub(super) moe_norm: usize,
    pub(super) router: usize,
    pub(super) experts: Vec<ExpertSlot>,
}

#[derive(Clone, Debug)]
pub(super) struct Layout {
    pub(super) tok_embed: usize,
    pub(super) pos_embed: usize,
    pub(super) final_norm: usize,
    pub(super) head: usize,
    pub(super) layers: Vec<LayerSlots>,
}

/// Expected `(name, shape)` of every parameter, in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (h, v) = (cfg.hidden, cfg.vocab_size);
    let mut specs = vec![("tok_embed".to_string(), vec![v, h]), ("pos_embed".to_string(), vec![cfg.max_seq_len, h])];
    for l in 0..cfg.num_layers {
        let p = format!("layers.{l}");
        specs.push((format!("{p}.attn_norm"), vec![h]));
        specs.push((format!("{p}.wq"), vec![cfg.attn_inner, h]));
        specs.push((format!("{p}.wk"), vec![cfg.kv_width(), h]));
        specs.push((format!("{p}.wv"), vec![cfg.kv_width(), h]));
        specs.push((format!("{p}.wo"), vec![h, cfg.attn_inner]));
        specs.push((format!("{p}.moe_norm"), vec![h]));
        specs.push((format!("{p}.router"), vec![cfg.num_candidates(), h]));
        for e in 0..cfg.num_experts {
            specs.push((format!("{p}.experts.{e}.up"), vec![cfg.expert_inner, h]));
            specs.push((format!("{p}.experts.{e}.gate"), vec![cfg.expert_inner, h]));
            specs.push((format!("{p}.experts.{e}.down"), vec![h, cfg.expert_inner]));
        }
    }
    specs.push(("final_norm".to_string(), vec![h]));
    specs.push(("head".to_string(), vec![v, h]));
    specs
}

fn build_layout(cfg: &ModelConfig) -> Layout {
    // Indices follow `param_specs` order.
    let mut next = 0usize;
    let mut take = || {
        next += 1;
        next - 1
    };
    let tok_embed = take();
    let pos_embed = take();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for _ in 0..cfg.num_layers {
        let attn_norm = take();
        let (wq, wk, wv, wo) = (take(), take(), take(), take());
        let moe_norm = take();
        let router = take();
        let mut experts = Vec::with_capacity(cfg.num_candidates());
        for _ in 0..cfg.num_experts {
            let (up, gate, down) = (take(), take(), take());
            experts.push(ExpertSlot::Normal { up, gate, down });
        }
        for _ in 0..cfg.num_zero_experts {
            experts.push(match cfg.extra_kind {
                ExpertKind::Copy => ExpertSlot::Copy,
                _ => ExpertSlot::Zero,
            });
        }
        layers.push(LayerSlots { attn_norm, wq, wk, wv, wo, moe_norm, router, experts });
    }
    let final_norm = take();
    let head = take();
    Layout { tok_embed, pos_embed, final_norm, head, layers }
}

/// How the MoE blocks combine their selected candidates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Mask every non-normal router row, recovering the pre-injection model.
    pub mask_extra: bool,
    /// Rescale active normal-expert gates to sum to one.
    pub renormalize: bool,
}

/// Parameter variables registered on a graph, in storage order.
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    /// Wraps variables already registered in storage order, e.g. the probes
    /// of a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Everything one MoE block recorded during a forward pass.
#[derive(Debug)]
pub struct LayerTrace {
    /// Normalised hidden states fed to the router and experts, `[T,H]`.
    pub moe_input: Var,
    /// Full router probabilities, `[T, N+N_Z]`.
    pub probs: Var,
    pub decisions: Vec<RoutingDecision>,
    /// Rows whose whole selection was non-normal while renormalising.
    pub fully_skipped: Vec<bool>,
    /// Normal-expert mixture.
    pub normal_part: Var,
    /// Copy-expert mixture, when the layer has copy experts.
    pub extra_part: Option<Var>,
    pub output: Var,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Next-token logits `[T, V]` over the packed batch.
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
    /// `(start_row, len)` of each input sequence.
    pub segments: Vec<(usize, usize)>,
}

/// Gradient-free forward results.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Tensor,
    pub segments: Vec<(usize, usize)>,
    /// `decisions[layer][row]`.
    pub decisions: Vec<Vec<RoutingDecision>>,
}

impl Inference {
    /// Logits of sequence `s`, position `p`.
    pub fn logits_at(&self, s: usize, p: usize) -> &[f64] {
        self.logits.row(self.segments[s].0 + p)
    }
}

/// Output of a single MoE block evaluated outside a full forward pass.
#[derive(Clone, Debug)]
pub struct MoeBlockOutput {
    pub output: Tensor,
    pub normal_part: Tensor,
    pub extra_part: Option<Tensor>,
    pub decisions: Vec<RoutingDecision>,
    pub fully_skipped: Vec<bool>,
}

/// Result of the renormalised variant for one token.
#[derive(Clone, Debug)]
pub struct RenormalizedOutput {
    pub output: Tensor,
    pub decision: RoutingDecision,
    /// Every selection was a zero expert, so renormalisation was undefined
    /// and the output is the zero vector.
    pub fully_skipped: bool,
}

#[derive(Clone, Debug)]
pub struct MoeModel {
    config: ModelConfig,
    params: ParamStore,
    pub(super) layout: Layout,
}

impl MoeModel {
    /// Random initialisation.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let entries = param_specs(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let fan_in = *shape.last().expect("non-empty shape") as f64;
                let std = if name.ends_with("norm") {
                    0.0
                } else if name.ends_with("embed") {
                    1.0
                } else if name.ends_with(".wo") || name.ends_with(".down") {
                    depth_scale / fan_in.sqrt()
                } else {
                    1.0 / fan_in.sqrt()
                };
                let data = if std == 0.0 {
                    vec![1.0; n]
                } else {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                };
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(config, ParamStore::new(entries))
    }

    /// Assembles a model, checking every tensor name and shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Format(format!("expected {} parameter tensors, found {}", specs.len(), params.len())));
        }
        for ((name, shape), (pname, t)) in specs.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {pname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let layout = build_layout(&config);
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.params)
    }

    /// Static top-k override (the naive truncation baseline).
    pub fn set_k_override(&mut self, k: Option<usize>) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.k_override = k;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn router(&self, layer: usize) -> RouterParams {
        RouterParams {
            weight: self.params.tensors[self.layout.layers[layer].router].clone(),
            num_normal: self.config.num_experts,
            mask_extra: false,
        }
    }

    pub fn expert_kind(&self, layer: usize, idx: usize) -> ExpertKind {
        match self.layout.layers[layer].experts[idx] {
            ExpertSlot::Normal { .. } => ExpertKind::Normal,
            ExpertSlot::Zero => ExpertKind::Zero,
            ExpertSlot::Copy => ExpertKind::Copy,
        }
    }

    /// Registers every parameter on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams(
            self.params
                .tensors
                .iter()
                .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
                .collect(),
        )
    }

    /// Binds only the router and experts of `layer` as constants; every other
    /// slot points at a placeholder scalar.
    fn bind_layer(&self, g: &mut Graph, layer: usize) -> BoundParams {
        let placeholder = g.constant(Tensor::scalar(0.0));
        let mut vars = vec![placeholder; self.params.len()];
        let slots = &self.layout.layers[layer];
        let mut used = vec![slots.router];
        for e in &slots.experts {
            if let ExpertSlot::Normal { up, gate, down } = e {
                used.extend([*up, *gate, *down]);
            }
        }
        for i in used {
            vars[i] = g.constant(self.params.tensors[i].clone());
        }
        BoundParams(vars)
    }

    fn check_batch(&self, batch: &[Vec<Token>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        for (s, seq) in batch.iter().enumerate() {
            if seq.is_empty() || seq.len() > self.config.max_seq_len {
                return Err(Error::input(format!(
                    "sequence {s} has length {} (allowed 1..={})",
                    seq.len(),
                    self.config.max_seq_len
                )));
            }
            if let Some(p) = seq.iter().position(|&t| t as usize >= self.config.vocab_size) {
                return Err(Error::input(format!(
                    "token {} at sequence {s} position {p} is outside the vocabulary of {}",
                    seq[p], self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Causal forward over a packed batch of independent sequences.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        batch: &[Vec<Token>],
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let p = b.vars();
        let lay = &self.layout;

        let mut segments = Vec::with_capacity(batch.len());
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for seq in batch {
            segments.push((ids.len(), seq.len()));
            ids.extend(seq.iter().map(|&t| t as usize));
            positions.extend(0..seq.len());
        }
        let attn_layout =
            AttentionLayout { num_heads: cfg.num_heads, num_kv_heads: cfg.kv_heads, segments: segments.clone() };

        let tok = g.gather_rows(p[lay.tok_embed], ids)?;
        let pos = g.gather_rows(p[lay.pos_embed], positions)?;
        let mut x = g.add(tok, pos)?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for (l, slots) in lay.layers.iter().enumerate() {
            let a = g.rms_norm(x, p[slots.attn_norm])?;
            let q = g.linear(a, p[slots.wq])?;
            let k = g.linear(a, p[slots.wk])?;
            let v = g.linear(a, p[slots.wv])?;
            let att = g.attention(q, k, v, attn_layout.clone())?;
            let o = g.linear(att, p[slots.wo])?;
            x = g.add(x, o)?;
            let m = g.rms_norm(x, p[slots.moe_norm])?;
            let trace = self.moe_block(g, b, l, m, opts)?;
            x = g.add(x, trace.output)?;
            layers.push(trace);
        }
        let f = g.rms_norm(x, p[lay.final_norm])?;
        let logits = g.linear(f, p[lay.head])?;
        Ok(ForwardOutput { logits, layers, segments })
    }

    /// Gradient-free forward.
    pub fn run(&self, batch: &[Vec<Token>], opts: ForwardOptions) -> Result<Inference> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let out = self.forward(&mut g, &b, batch, opts)?;
        Ok(Inference {
            logits: g.value(out.logits).clone(),
            segments: out.segments,
            decisions: out.layers.into_iter().map(|t| t.decisions).collect(),
        })
    }

    /// One MoE block applied to `hs` (`[T,H]`), recorded on `g`.
    pub fn moe_block(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        layer: usize,
        hs: Var,
        opts: ForwardOptions,
    ) -> Result<LayerTrace> {
        let cfg = &self.config;
        let slots = self
            .layout
            .layers
            .get(layer)
            .ok_or_else(|| Error::input(format!("layer {layer} out of range ({})", cfg.num_layers)))?;
        let p = b.vars();
        let (t, width) = g.value(hs).dims2("moe input")?;
        let (n, c, k) = (cfg.num_experts, cfg.num_candidates(), cfg.active_k());

        let mut logits = g.linear(hs, p[slots.router])?;
        if opts.mask_extra && c > n {
            logits = g.mask_cols(logits, (0..c).map(|i| i < n).collect())?;
        }
        let probs = g.softmax(logits)?;
        let decisions = {
            let pv = g.value(probs);
            (0..t).map(|i| RoutingDecision::from_probs(pv.row(i), k, n)).collect::<Result<Vec<_>>>()?
        };

        let flat: Vec<usize> =
            decisions.iter().enumerate().flat_map(|(i, d)| d.selected.iter().map(move |&e| i * c + e)).collect();
        let picked = g.pick(probs, flat)?;
        let picked = g.reshape(picked, vec![t, k])?;
        let mass = g.sum_last(picked)?;
        let mut gates = g.div_col(picked, mass)?;

        let mut fully_skipped = vec![false; t];
        if opts.renormalize {
            let mut keep = Vec::with_capacity(t * k);
            let mut pad = Vec::with_capacity(t);
            for (i, d) in decisions.iter().enumerate() {
                keep.extend(d.selected.iter().map(|&e| if e < n { 1.0 } else { 0.0 }));
                fully_skipped[i] = d.zero_selected == d.k();
                pad.push(if fully_skipped[i] { 1.0 } else { 0.0 });
            }
            let keep = g.constant(Tensor::new(vec![t, k], keep)?);
            let normal_gates = g.mul(gates, keep)?;
            let normal_mass = g.sum_last(normal_gates)?;
            let pad = g.constant(Tensor::vector(pad));
            let normal_mass = g.add(normal_mass, pad)?;
            gates = g.div_col(normal_gates, normal_mass)?;
        }

        // (row, slot) pairs per candidate, rows ascending.
        let mut routed: Vec<Vec<(usize, usize)>> = vec![Vec::new(); c];
        for (i, d) in decisions.iter().enumerate() {
            for (s, &e) in d.selected.iter().enumerate() {
                routed[e].push((i, s));
            }
        }

        let mut normal_part: Option<Var> = None;
        let mut extra_part: Option<Var> = None;
        for (e, slot) in slots.experts.iter().enumerate() {
            let pairs = &routed[e];
            if pairs.is_empty() {
                continue;
            }
            let rows: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
            let gate_idx: Vec<usize> = pairs.iter().map(|&(i, s)| i * k + s).collect();
            let (contribution, target) = match slot {
                ExpertSlot::Zero => continue,
                ExpertSlot::Normal { up, gate, down } => {
                    let xs = g.gather_rows(hs, rows.clone())?;
                    let u = g.linear(xs, p[*up])?;
                    let gt = g.linear(xs, p[*gate])?;
                    let act = g.silu(gt)?;
                    let hidden = g.mul(act, u)?;
                    (g.linear(hidden, p[*down])?, &mut normal_part)
                }
                ExpertSlot::Copy => (g.gather_rows(hs, rows.clone())?, &mut extra_part),
            };
            let ge = g.pick(gates, gate_idx)?;
            let weighted = g.mul_col(contribution, ge)?;
            let scattered = g.scatter_rows(weighted, rows, t)?;
            *target = Some(match *target {
                Some(acc) => g.add(acc, scattered)?,
                None => scattered,
            });
        }
        let normal_part = match normal_part {
            Some(v) => v,
            None => g.constant(Tensor::zeros(&[t, width])),
        };
        let has_copy = slots.experts.iter().any(|s| matches!(s, ExpertSlot::Copy));
        let extra_part = match (extra_part, has_copy) {
            (Some(v), _) => Some(v),
            (None, true) => Some(g.constant(Tensor::zeros(&[t, width]))),
            (None, false) => None,
        };
        let output = match extra_part {
            Some(cp) => g.add(normal_part, cp)?,
            None => normal_part,
        };
        Ok(LayerTrace { moe_input: hs, probs, decisions, fully_skipped, normal_part, extra_part, output })
    }

    /// Gradient-free MoE block on explicit hidden states (`[H]` or `[T,H]`).
    pub fn moe_layer(&self, layer: usize, hs: &Tensor, opts: ForwardOptions) -> Result<MoeBlockOutput> {
        let h = self.config.hidden;
        let hs = match hs.shape() {
            [w] if *w == h => hs.clone().reshape(vec![1, h])?,
            [_, w] if *w == h => hs.clone(),
            other => return Err(Error::shape(format!("moe input {other:?} does not end in hidden size {h}"))),
        };
        if layer >= self.config.num_layers {
            return Err(Error::input(format!("layer {layer} out of range ({})", self.config.num_layers)));
        }
        let mut g = Graph::new();
        let b = self.bind_layer(&mut g, layer);
        let x = g.constant(hs);
        let tr = self.moe_block(&mut g, &b, layer, x, opts)?;
        Ok(MoeBlockOutput {
            output: g.value(tr.output).clone(),
            normal_part: g.value(tr.normal_part).clone(),
            extra_part: tr.extra_part.map(|v| g.value(v).clone()),
            decisions: tr.decisions,
            fully_skipped: tr.fully_skipped,
        })
    }

    fn single(&self, layer: usize, h: &Tensor, opts: ForwardOptions) -> Result<MoeBlockOutput> {
        if h.shape() != [self.config.hidden] {
            return Err(Error::shape(format!(
                "expected a hidden state of shape [{}], got {:?}",
                self.config.hidden,
                h.shape()
            )));
        }
        self.moe_layer(layer, h, opts)
    }

    fn flatten(t: Tensor) -> Tensor {
        let n = t.len();
        t.reshape(vec![n]).expect("same length")
    }

    /// `y = Σ_{i∈S(h)} g_i E_i(h)` over normal experts only; extra candidates,
    /// if present, are masked out.
    pub fn moe_forward_static(&self, layer: usize, h: &Tensor) -> Result<Tensor> {
        let out = self.single(layer, h, ForwardOptions { mask_extra: true, renormalize: false })?;
        Ok(Self::flatten(out.output))
    }

    /// Dynamic output: gate mass landing on zero experts is dropped.
    pub fn moe_forward_dynamic(&self, layer: usize, h: &Tensor) -> Result<(Tensor, RoutingDecision)> {
        self.require_extra(ExpertKind::Zero)?;
        let mut out = self.single(layer, h, ForwardOptions::default())?;
        Ok((Self::flatten(out.output), out.decisions.remove(0)))
    }

    /// Dynamic output with active normal-expert gates rescaled to sum to one.
    pub fn moe_forward_renormalized(&self, layer: usize, h: &Tensor) -> Result<RenormalizedOutput> {
        self.require_extra(ExpertKind::Zero)?;
        let mut out = self.single(layer, h, ForwardOptions { mask_extra: false, renormalize: true })?;
        Ok(RenormalizedOutput {
            output: Self::flatten(out.output),
            decision: out.decisions.remove(0),
            fully_skipped: out.fully_skipped[0],
        })
    }

    /// Copy-expert output and its decomposition `(ỹ, ỹ_norm, ỹ_cp)`.
    pub fn moe_forward_copy(&self, layer: usize, h: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        self.require_extra(ExpertKind::Copy)?;
        let out = self.single(layer, h, ForwardOptions::default())?;
        let cp = out.extra_part.expect("copy layer records its copy component");
        Ok((Self::flatten(out.output), Self::flatten(out.normal_part), Self::flatten(cp)))
    }

    fn require_extra(&self, kind: ExpertKind) -> Result<()> {
        if !self.config.is_augmented() || self.config.extra_kind != kind {
            return Err(Error::State(format!(
                "model has {} extra experts of kind {:?}; this variant needs {kind:?} experts",
                self.config.num_zero_experts, self.config.extra_kind
            )));
        }
        Ok(())
    }
}
