//! Analytic per-layer FLOP counts for the original and zero-expert MoE.
//!
//! A matmul of `[m,n]` by `[n,p]` costs `2mnp`. Only the dominant matmul
//! terms are modelled. Counts are per transformer layer; multiplying by the
//! layer count leaves every ratio unchanged.
//!
//! Counts are carried in `f64`. Every term is an integer below 2^53 at the
//! sizes used here, so they are exact whenever `r_ze · K` is integral.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsConfig {
    pub hidden: u64,
    pub attn_inner: u64,
    /// Key/value heads divided by query heads.
    pub g_kv: f64,
    pub expert_inner: u64,
    pub num_experts: u64,
    #[serde(default)]
    pub num_zero_experts: u64,
    pub top_k: u64,
    /// Fraction of activated slots taken by zero experts.
    #[serde(default)]
    pub r_ze: f64,
}

impl FlopsConfig {
    /// A 30B-total / 3B-active class configuration (48 layers in the full
    /// model; per-layer counts do not depend on that).
    pub fn large_reference() -> Self {
        Self {
            hidden: 2048,
            attn_inner: 4096,
            g_kv: 1.0 / 8.0,
            expert_inner: 768,
            num_experts: 128,
            num_zero_experts: 64,
            top_k: 8,
            r_ze: 0.5,
        }
    }

    pub fn with_r_ze(self, r_ze: f64) -> Self {
        Self { r_ze, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("attn_inner", self.attn_inner),
            ("expert_inner", self.expert_inner),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.top_k > self.num_experts {
            return Err(Error::config(format!("top_k {} exceeds num_experts {}", self.top_k, self.num_experts)));
        }
        if !(self.g_kv > 0.0 && self.g_kv <= 1.0) {
            return Err(Error::config(format!("g_kv must lie in (0,1], got {}", self.g_kv)));
        }
        if !(0.0..=1.0).contains(&self.r_ze) {
            return Err(Error::config(format!("r_ze must lie in [0,1], got {}", self.r_ze)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Static MoE, every token runs `K` experts.
    Original,
    /// Augmented MoE, a fraction `r_ze` of slots is free.
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prefill,
    Decode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlopsBreakdown {
    /// Score/value products over the context.
    pub attn_context: f64,
    /// Q, K, V and output projections.
    pub attn_proj: f64,
    pub ffn: f64,
    pub router: f64,
    pub total: f64,
}

impl FlopsBreakdown {
    pub fn attention(&self) -> f64 {
        self.attn_context + self.attn_proj
    }
}

/// Expert FFN and router cost for `n` tokens.
pub fn moe_flops(cfg: &FlopsConfig, n: u64, variant: Variant) -> (f64, f64) {
    let (k, h, he, n) = (cfg.top_k as f64, cfg.hidden as f64, cfg.expert_inner as f64, n as f64);
    match variant {
        Variant::Original => (6.0 * k * n * h * he, 2.0 * cfg.num_experts as f64 * n * h),
        Variant::Dynamic => {
            (6.0 * (1.0 - cfg.r_ze) * k * n * h * he, 2.0 * (cfg.num_experts + cfg.num_zero_experts) as f64 * n * h)
        }
    }
}

/// Per-layer cost of processing (prefill) or generating (decode, with a KV
/// cache) `l` tokens.
pub fn flops_stage(cfg: &FlopsConfig, l: u64, stage: Stage, variant: Variant) -> Result<FlopsBreakdown> {
    if l == 0 {
        return Err(Error::input("sequence length must be at least 1"));
    }
    let (lf, h, ha) = (l as f64, cfg.hidden as f64, cfg.attn_inner as f64);
    let attn_context = match stage {
        Stage::Prefill => 4.0 * lf * lf * ha,
        Stage::Decode => 2.0 * lf * (lf - 1.0) * ha,
    };
    let attn_proj = 4.0 * (1.0 + cfg.g_kv) * lf * h * ha;
    let (ffn, router) = moe_flops(cfg, l, variant);
    Ok(FlopsBreakdown { attn_context, attn_proj, ffn, router, total: attn_context + attn_proj + ffn + router })
}

/// Original cost over dynamic cost.
pub fn speedup(cfg: &FlopsConfig, l: u64, stage: Stage) -> Result<f64> {
    let orig = flops_stage(cfg, l, stage, Variant::Original)?;
    let dynm = flops_stage(cfg, l, stage, Variant::Dynamic)?;
    Ok(orig.total / dynm.total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeedupRow {
    pub length: u64,
    pub r_ze: f64,
    pub prefill_speedup: f64,
    pub decode_speedup: f64,
}

pub fn speedup_table(cfg: &FlopsConfig, lengths: &[u64], r_zes: &[f64]) -> Result<Vec<SpeedupRow>> {
    if lengths.is_empty() || r_zes.is_empty() {
        return Err(Error::input("speedup table needs at least one length and one r_ze"));
    }
    let mut rows = Vec::with_capacity(lengths.len() * r_zes.len());
    for &r in r_zes {
        let c = cfg.with_r_ze(r);
        c.validate()?;
        for &l in lengths {
            rows.push(SpeedupRow {
                length: l,
                r_ze: r,
                prefill_speedup: speedup(&c, l, Stage::Prefill)?,
                decode_speedup: speedup(&c, l, Stage::Decode)?,
            });
        }
    }
    Ok(rows)
}

/// CSV with header `length,r_ze,prefill_speedup,decode_speedup`, speedups
/// printed to six decimals.
pub fn write_speedup_csv<W: Write>(out: W, rows: &[SpeedupRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["length", "r_ze", "prefill_speedup", "decode_speedup"])?;
    for r in rows {
        w.write_record([
            r.length.to_string(),
            r.r_ze.to_string(),
            format!("{:.6}", r.prefill_speedup),
            format!("{:.6}", r.decode_speedup),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-term CSV: `length,stage,variant,attn_context,attn_proj,ffn,router,total`.
pub fn write_breakdown_csv<W: Write>(out: W, cfg: &FlopsConfig, lengths: &[u64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["length", "stage", "variant", "attn_context", "attn_proj", "ffn", "router", "total"])?;
    for &l in lengths {
        for (stage, sname) in [(Stage::Prefill, "prefill"), (Stage::Decode, "decode")] {
            for (variant, vname) in [(Variant::Original, "original"), (Variant::Dynamic, "dynamic")] {
                let b = flops_stage(cfg, l, stage, variant)?;
                w.write_record([
                    l.to_string(),
                    sname.to_string(),
                    vname.to_string(),
                    b.attn_context.to_string(),
                    b.attn_proj.to_string(),
                    b.ffn.to_string(),
                    b.router.to_string(),
                    b.total.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
