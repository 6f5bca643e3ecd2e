use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kind of a routing candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    /// Gated FFN with its own parameters.
    Normal,
    /// Outputs the zero vector.
    Zero,
    /// Outputs its input unchanged.
    Copy,
}

/// Architecture hyperparameters of the toy transformer-MoE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub hidden: usize,
    /// Attention intermediate size (query width).
    pub attn_inner: usize,
    pub num_heads: usize,
    /// Key/value heads; the GQA ratio is `kv_heads / num_heads`.
    pub kv_heads: usize,
    pub expert_inner: usize,
    pub num_experts: usize,
    pub top_k: usize,
    #[serde(default)]
    pub num_zero_experts: usize,
    /// Kind used for the extra (non-normal) candidates.
    #[serde(default = "default_extra_kind")]
    pub extra_kind: ExpertKind,
    pub max_seq_len: usize,
    /// Static top-k override; `Some(top_k / 2)` is the naive truncation baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_override: Option<usize>,
}

fn default_extra_kind() -> ExpertKind {
    ExpertKind::Zero
}

impl Default for ModelConfig {
    /// Desk-scale configuration, already augmented with `N/2` zero experts.
    fn default() -> Self {
        Self {
            vocab_size: 64,
            num_layers: 4,
            hidden: 64,
            attn_inner: 64,
            num_heads: 4,
            kv_heads: 2,
            expert_inner: 32,
            num_experts: 16,
            top_k: 4,
            num_zero_experts: 8,
            extra_kind: ExpertKind::Zero,
            max_seq_len: 64,
            k_override: None,
        }
    }
}

impl ModelConfig {
    /// Desk configuration before injection (`N_Z = 0`).
    pub fn desk_static() -> Self {
        Self { num_zero_experts: 0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("attn_inner", self.attn_inner),
            ("num_heads", self.num_heads),
            ("kv_heads", self.kv_heads),
            ("expert_inner", self.expert_inner),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.attn_inner.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "num_heads {} does not divide attn_inner {}",
                self.num_heads, self.attn_inner
            )));
        }
        if self.kv_heads > self.num_heads || !self.num_heads.is_multiple_of(self.kv_heads) {
            return Err(Error::config(format!("kv_heads {} must divide num_heads {}", self.kv_heads, self.num_heads)));
        }
        if self.top_k > self.num_experts {
            return Err(Error::config(format!("top_k {} exceeds num_experts {}", self.top_k, self.num_experts)));
        }
        if let Some(k) = self.k_override {
            if k == 0 || k > self.top_k {
                return Err(Error::config(format!("k_override {k} must lie in 1..={}", self.top_k)));
            }
        }
        if self.extra_kind == ExpertKind::Normal {
            return Err(Error::config("extra_kind must be zero or copy"));
        }
        Ok(())
    }

    /// GQA ratio `g_kv`.
    pub fn kv_ratio(&self) -> f64 {
        self.kv_heads as f64 / self.num_heads as f64
    }

    pub fn head_dim(&self) -> usize {
        self.attn_inner / self.num_heads
    }

    pub fn kv_width(&self) -> usize {
        self.head_dim() * self.kv_heads
    }

    pub fn num_candidates(&self) -> usize {
        self.num_experts + self.num_zero_experts
    }

    pub fn is_augmented(&self) -> bool {
        self.num_zero_experts > 0
    }

    /// Number of candidates each token actually selects.
    pub fn active_k(&self) -> usize {
        self.k_override.unwrap_or(self.top_k)
    }

    pub fn candidate_kind(&self, idx: usize) -> ExpertKind {
        if idx < self.num_experts {
            ExpertKind::Normal
        } else {
            self.extra_kind
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_zero_experts * 2, c.num_experts);
        assert_eq!(c.kv_ratio(), 0.5);
        ModelConfig::desk_static().validate().unwrap();
    }

    #[test]
    fn rejects_bad_head_split() {
        let c = ModelConfig { num_heads: 3, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { kv_heads: 3, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_bad_k() {
        let c = ModelConfig { top_k: 17, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { k_override: Some(5), ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = ModelConfig::default();
        let s = toml::to_string(&c).unwrap();
        let back: ModelConfig = toml::from_str(&s).unwrap();
        assert_eq!(back, c);
        let bad = format!("{s}\nbogus = 1\n");
        assert!(toml::from_str::<ModelConfig>(&bad).is_err());
    }
}
