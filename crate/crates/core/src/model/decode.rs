//! Incremental decoding with per-layer key/value caches.
//!
//! Each step appends one token to every sequence of a batch. The arithmetic
//! mirrors the graph forward term by term, so logits and routing decisions
//! agree bitwise with a full forward over the same prefixes.

use super::routing::RoutingDecision;
use super::transformer::{ForwardOptions, MoeModel, Token};
use crate::error::{Error, Result};
use crate::numerics::{inv_rms, kernels, Tensor};

/// Output of one decoding step.
#[derive(Clone, Debug)]
pub struct DecodeStep {
    /// Next-token logits `[B, V]`.
    pub logits: Tensor,
    /// `decisions[layer][b]` for the token just consumed.
    pub decisions: Vec<Vec<RoutingDecision>>,
}

pub struct Decoder<'m> {
    model: &'m MoeModel,
    opts: ForwardOptions,
    batch: usize,
    len: usize,
    /// Per layer, per sequence: keys and values `[len, kv_width]`.
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

fn rms_rows(x: &[f64], gain: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(width) {
        let r = inv_rms(row);
        out.extend(row.iter().zip(gain).map(|(a, g)| a * r * g));
    }
    out
}

fn linear(x: &[f64], w: &Tensor, rows: usize) -> Vec<f64> {
    let (p, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * p];
    kernels::matmul_bt(x, w.data(), &mut out, rows, n, p);
    out
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m MoeModel, batch: usize, opts: ForwardOptions) -> Self {
        let l = model.config().num_layers;
        Self {
            model,
            opts,
            batch,
            len: 0,
            keys: vec![vec![Vec::new(); batch]; l],
            values: vec![vec![Vec::new(); batch]; l],
        }
    }

    /// Tokens consumed so far per sequence.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Consumes one token per sequence and returns next-token logits.
    pub fn step(&mut self, tokens: &[Token]) -> Result<DecodeStep> {
        let cfg = self.model.config();
        let b = self.batch;
        if tokens.len() != b {
            return Err(Error::input(format!("expected {b} tokens, got {}", tokens.len())));
        }
        if self.len >= cfg.max_seq_len {
            return Err(Error::input(format!("position {} exceeds max_seq_len {}", self.len, cfg.max_seq_len)));
        }
        if let Some(i) = tokens.iter().position(|&t| t as usize >= cfg.vocab_size) {
            return Err(Error::input(format!(
                "token {} at sequence {i} position {} is outside the vocabulary of {}",
                tokens[i], self.len, cfg.vocab_size
            )));
        }
        let p = self.model.params().tensors();
        let lay = &self.model.layout;
        let h = cfg.hidden;
        let (qd, kd) = (cfg.attn_inner, cfg.kv_width());
        let (nh, dh) = (cfg.num_heads, cfg.head_dim());
        let group = nh / cfg.kv_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let pos = self.len;

        let mut x = Vec::with_capacity(b * h);
        for &t in tokens {
            let te = p[lay.tok_embed].row(t as usize);
            let pe = p[lay.pos_embed].row(pos);
            x.extend(te.iter().zip(pe).map(|(a, c)| a + c));
        }
        let mut decisions = Vec::with_capacity(cfg.num_layers);
        let mut scores = Vec::with_capacity(pos + 1);
        for (l, slots) in lay.layers.iter().enumerate() {
            let a = rms_rows(&x, p[slots.attn_norm].data(), h);
            let q = linear(&a, &p[slots.wq], b);
            let k = linear(&a, &p[slots.wk], b);
            let v = linear(&a, &p[slots.wv], b);
            let mut att = vec![0.0; b * qd];
            for s in 0..b {
                let kc = &mut self.keys[l][s];
                kc.extend_from_slice(&k[s * kd..(s + 1) * kd]);
                let vc = &mut self.values[l][s];
                vc.extend_from_slice(&v[s * kd..(s + 1) * kd]);
                let (kc, vc) = (&self.keys[l][s], &self.values[l][s]);
                for hd in 0..nh {
                    let kvh = hd / group;
                    let qi = &q[s * qd + hd * dh..][..dh];
                    scores.clear();
                    for j in 0..=pos {
                        scores.push(kernels::dot(qi, &kc[j * kd + kvh * dh..][..dh]) * scale);
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - m).exp();
                        z += *sc;
                    }
                    let orow = &mut att[s * qd + hd * dh..][..dh];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        *sc /= z;
                        let vj = &vc[j * kd + kvh * dh..][..dh];
                        for (o, xv) in orow.iter_mut().zip(vj) {
                            *o += *sc * xv;
                        }
                    }
                }
            }
            let o = linear(&att, &p[slots.wo], b);
            x.iter_mut().zip(&o).for_each(|(xv, ov)| *xv += ov);
            let m = rms_rows(&x, p[slots.moe_norm].data(), h);
            let blk = self.model.moe_layer(l, &Tensor::new(vec![b, h], m)?, self.opts)?;
            x.iter_mut().zip(blk.output.data()).for_each(|(xv, ov)| *xv += ov);
            decisions.push(blk.decisions);
        }
        let f = rms_rows(&x, p[lay.final_norm].data(), h);
        let logits = linear(&f, &p[lay.head], b);
        self.len += 1;
        Ok(DecodeStep { logits: Tensor::new(vec![b, cfg.vocab_size], logits)?, decisions })
    }
}
