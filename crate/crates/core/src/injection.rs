//! Turning a static model into an augmented one, and measuring how far the
//! MoE outputs move at the moment of injection.

use std::io::Write;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpertKind, ForwardOptions, MoeModel, ParamStore, Token};
use crate::numerics::{kernels, Graph, Tensor};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionSpec {
    pub n_new: usize,
    #[serde(default = "default_kind")]
    pub kind: ExpertKind,
    #[serde(default)]
    pub seed: u64,
}

fn default_kind() -> ExpertKind {
    ExpertKind::Zero
}

impl InjectionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_new == 0 {
            return Err(Error::config("n_new must be at least 1"));
        }
        if self.kind == ExpertKind::Normal {
            return Err(Error::config("injected experts must be zero or copy kind"));
        }
        Ok(())
    }
}

/// Population mean and standard deviation of a block of router entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::input("moments of an empty block"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RouterMoments {
    pub original: Moments,
    pub injected: Moments,
}

/// Adds `spec.n_new` parameterless candidates to every MoE layer.
///
/// Each layer's new router rows are i.i.d. Gaussian with the mean and
/// variance of all entries of that layer's existing router. Every other
/// tensor is copied unchanged.
pub fn inject(model: &MoeModel, spec: &InjectionSpec) -> Result<MoeModel> {
    spec.validate()?;
    if model.config().is_augmented() {
        return Err(Error::State(format!("model already has {} extra experts", model.config().num_zero_experts)));
    }
    let mut cfg = model.config().clone();
    cfg.num_zero_experts = spec.n_new;
    cfg.extra_kind = spec.kind;
    let mut layer = 0usize;
    let mut entries = Vec::with_capacity(model.params().len());
    for (name, t) in model.params().iter() {
        if !name.ends_with(".router") {
            entries.push((name.to_string(), t.clone()));
            continue;
        }
        let (rows, width) = t.dims2(name)?;
        let m = Moments::of(t.data())?;
        let mut rng = seed::rng(spec.seed, &format!("inject/layer/{layer}"));
        let mut data = t.data().to_vec();
        let first = t.data()[0];
        if t.data().iter().all(|&v| v == first) {
            // Zero variance: summation rounding must not perturb the value.
            data.extend(std::iter::repeat_n(first, spec.n_new * width));
        } else {
            let dist = Normal::new(m.mean, m.std).map_err(|e| Error::Consistency(e.to_string()))?;
            data.extend((0..spec.n_new * width).map(|_| dist.sample(&mut rng)));
        }
        entries.push((name.to_string(), Tensor::new(vec![rows + spec.n_new, width], data)?));
        layer += 1;
    }
    MoeModel::from_parts(cfg, ParamStore::new(entries))
}

/// Moments of the original and injected router blocks, per layer.
pub fn router_moments(augmented: &MoeModel) -> Result<Vec<RouterMoments>> {
    let n = augmented.config().num_experts;
    if !augmented.config().is_augmented() {
        return Err(Error::State("model has no injected experts".into()));
    }
    (0..augmented.config().num_layers)
        .map(|l| {
            let w = augmented.router(l).weight;
            let split = n * w.shape()[1];
            Ok(RouterMoments { original: Moments::of(&w.data()[..split])?, injected: Moments::of(&w.data()[split..])? })
        })
        .collect()
}

/// Per-token mismatch between a reference output `y` and a variant `ỹ`,
/// averaged over tokens with `‖y‖ > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Mismatch {
    /// Mean of `|‖ỹ‖ − ‖y‖| / ‖y‖`.
    pub norm_rel: f64,
    /// Mean of `‖ỹ − y‖ / ‖y‖`.
    pub vector_rel: f64,
    /// Mean cosine similarity; a zero `ỹ` counts as 0.
    pub cosine: f64,
    pub tokens: usize,
    /// Tokens skipped because `‖y‖ = 0`.
    pub excluded: usize,
}

/// Row-wise comparison of `[T,H]` (or `[H]`) outputs.
pub fn mismatch(y: &Tensor, y_tilde: &Tensor) -> Result<Mismatch> {
    if y.shape() != y_tilde.shape() {
        return Err(Error::shape(format!("mismatch between {:?} and {:?}", y.shape(), y_tilde.shape())));
    }
    let (mut nr, mut vr, mut cs) = (0.0, 0.0, 0.0);
    let (mut used, mut excluded) = (0usize, 0usize);
    for i in 0..y.outer() {
        let (a, b) = (y.row(i), y_tilde.row(i));
        let na = kernels::dot(a, a).sqrt();
        if na == 0.0 {
            excluded += 1;
            continue;
        }
        let nb = kernels::dot(b, b).sqrt();
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, z)| z - x).collect();
        nr += (nb - na).abs() / na;
        vr += kernels::dot(&diff, &diff).sqrt() / na;
        cs += if nb == 0.0 { 0.0 } else { kernels::dot(a, b) / (na * nb) };
        used += 1;
    }
    if used == 0 {
        return Err(Error::input("every reference output has zero norm"));
    }
    let u = used as f64;
    Ok(Mismatch { norm_rel: nr / u, vector_rel: vr / u, cosine: cs / u, tokens: used, excluded })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerMismatch {
    pub layer: usize,
    /// Full variant output against the original.
    pub output: Mismatch,
    /// Normal-expert component, for copy variants.
    pub normal: Option<Mismatch>,
    /// Copy component, for copy variants.
    pub copy: Option<Mismatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InjectionReport {
    pub moments: Vec<RouterMoments>,
    pub layers: Vec<LayerMismatch>,
}

/// Compares every MoE block of `augmented` against `original` on identical
/// block inputs: the hidden states the original model produces on `batch`.
pub fn diagnose_mismatch(
    original: &MoeModel,
    augmented: &MoeModel,
    batch: &[Vec<Token>],
    opts: ForwardOptions,
) -> Result<InjectionReport> {
    let (oc, ac) = (original.config(), augmented.config());
    let mut same = ac.clone();
    same.num_zero_experts = 0;
    same.extra_kind = oc.extra_kind;
    if oc.is_augmented() || &same != oc {
        return Err(Error::input("models differ in more than the injected experts"));
    }
    let mut g = Graph::new();
    let b = original.bind(&mut g, false);
    let fwd = original.forward(&mut g, &b, batch, ForwardOptions::default())?;
    let mut layers = Vec::with_capacity(fwd.layers.len());
    for (l, tr) in fwd.layers.iter().enumerate() {
        let h = g.value(tr.moe_input);
        let y = g.value(tr.output);
        let variant = augmented.moe_layer(l, h, opts)?;
        let output = mismatch(y, &variant.output)?;
        let (normal, copy) = match &variant.extra_part {
            Some(cp) if ac.extra_kind == ExpertKind::Copy => {
                (Some(mismatch(y, &variant.normal_part)?), Some(mismatch(y, cp)?))
            }
            _ => (None, None),
        };
        layers.push(LayerMismatch { layer: l, output, normal, copy });
    }
    Ok(InjectionReport { moments: router_moments(augmented)?, layers })
}

impl InjectionReport {
    /// Long-format rows `(layer, metric, value)`.
    pub fn rows(&self) -> Vec<(usize, String, f64)> {
        let mut rows = Vec::new();
        for (l, m) in self.moments.iter().enumerate() {
            rows.push((l, "router_mean_orig".into(), m.original.mean));
            rows.push((l, "router_std_orig".into(), m.original.std));
            rows.push((l, "router_mean_new".into(), m.injected.mean));
            rows.push((l, "router_std_new".into(), m.injected.std));
        }
        for lm in &self.layers {
            let parts = [("", Some(&lm.output)), ("normal_", lm.normal.as_ref()), ("copy_", lm.copy.as_ref())];
            for (prefix, m) in parts {
                if let Some(m) = m {
                    rows.push((lm.layer, format!("{prefix}norm_rel"), m.norm_rel));
                    rows.push((lm.layer, format!("{prefix}vector_rel"), m.vector_rel));
                    rows.push((lm.layer, format!("{prefix}cosine"), m.cosine));
                }
            }
            rows.push((lm.layer, "excluded_tokens".into(), lm.output.excluded as f64));
        }
        rows
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "metric", "value"])?;
        for (l, name, v) in self.rows() {
            w.write_record([l.to_string(), name, v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_static() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            num_layers: 2,
            hidden: 8,
            attn_inner: 8,
            num_heads: 2,
            kv_heads: 1,
            expert_inner: 6,
            num_experts: 4,
            top_k: 2,
            num_zero_experts: 0,
            max_seq_len: 8,
            ..ModelConfig::default()
        }
    }

    fn batch() -> Vec<Vec<Token>> {
        vec![vec![1, 4, 2, 9, 0, 3], vec![7, 7, 5, 10]]
    }

    #[test]
    fn spec_validation() {
        assert!(InjectionSpec { n_new: 0, kind: ExpertKind::Zero, seed: 0 }.validate().is_err());
        assert!(InjectionSpec { n_new: 1, kind: ExpertKind::Normal, seed: 0 }.validate().is_err());
    }

    #[test]
    fn constant_router_gives_constant_rows() {
        let mut m = MoeModel::init(small_static(), 1).unwrap();
        let names = m.params().names().to_vec();
        for (name, t) in names.iter().zip(m.params_mut().tensors_mut()) {
            if name.ends_with(".router") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.37);
            }
        }
        let a = inject(&m, &InjectionSpec { n_new: 3, kind: ExpertKind::Zero, seed: 5 }).unwrap();
        for l in 0..2 {
            let w = a.router(l).weight;
            assert!(w.data().iter().all(|&v| v == 0.37));
            assert_eq!(w.shape(), [7, 8]);
        }
    }

    #[test]
    fn originals_are_preserved_and_twice_is_an_error() {
        let m = MoeModel::init(small_static(), 2).unwrap();
        let spec = InjectionSpec { n_new: 2, kind: ExpertKind::Zero, seed: 9 };
        let a = inject(&m, &spec).unwrap();
        for ((n0, t0), (n1, t1)) in m.params().iter().zip(a.params().iter()) {
            assert_eq!(n0, n1);
            if n0.ends_with(".router") {
                assert_eq!(&t1.data()[..t0.len()], t0.data());
            } else {
                assert_eq!(t0, t1);
            }
        }
        assert_eq!(a.expert_kind(0, 4), ExpertKind::Zero);
        assert!(matches!(inject(&a, &spec), Err(Error::State(_))));
        assert_eq!(inject(&m, &spec).unwrap().params(), a.params());
    }

    #[test]
    fn many_rows_match_moments() {
        let m = MoeModel::init(small_static(), 3).unwrap();
        let a = inject(&m, &InjectionSpec { n_new: 4096, kind: ExpertKind::Zero, seed: 11 }).unwrap();
        for rm in router_moments(&a).unwrap() {
            assert!((rm.injected.std - rm.original.std).abs() <= 0.02 * rm.original.std);
            // The mean of a zero-centred block is tiny, so compare it on the scale of the std.
            assert!((rm.injected.mean - rm.original.mean).abs() <= 0.02 * rm.original.std);
        }
    }

    #[test]
    fn masked_injection_has_no_mismatch() {
        let m = MoeModel::init(small_static(), 4).unwrap();
        let a = inject(&m, &InjectionSpec { n_new: 2, kind: ExpertKind::Zero, seed: 1 }).unwrap();
        let masked = ForwardOptions { mask_extra: true, ..Default::default() };
        let r = diagnose_mismatch(&m, &a, &batch(), masked).unwrap();
        assert_eq!(r.layers.len(), 2);
        for lm in &r.layers {
            assert_eq!(lm.output.norm_rel, 0.0);
            assert_eq!(lm.output.vector_rel, 0.0);
            assert!((lm.output.cosine - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_only_probe() {
        let y = Tensor::new(vec![3, 2], vec![1.0, 2.0, -3.0, 0.5, 0.0, 0.0]).unwrap();
        let m = mismatch(&y, &y.map(|v| 2.0 * v)).unwrap();
        assert!((m.norm_rel - 1.0).abs() < 1e-15);
        assert!((m.vector_rel - 1.0).abs() < 1e-15);
        assert!((m.cosine - 1.0).abs() < 1e-15);
        assert_eq!((m.tokens, m.excluded), (2, 1));
    }

    #[test]
    fn copy_moves_outputs_more_than_zero() {
        let m = MoeModel::init(small_static(), 6).unwrap();
        let zero = inject(&m, &InjectionSpec { n_new: 2, kind: ExpertKind::Zero, seed: 3 }).unwrap();
        let copy = inject(&m, &InjectionSpec { n_new: 2, kind: ExpertKind::Copy, seed: 3 }).unwrap();
        let rz = diagnose_mismatch(&m, &zero, &batch(), ForwardOptions::default()).unwrap();
        let rc = diagnose_mismatch(&m, &copy, &batch(), ForwardOptions::default()).unwrap();
        for (z, c) in rz.layers.iter().zip(&rc.layers) {
            assert!(c.output.norm_rel > z.output.norm_rel);
            assert!(c.output.cosine < z.output.cosine);
            assert!(c.copy.is_some() && z.copy.is_none());
        }
        let mut buf = Vec::new();
        rc.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,metric,value\n"));
        assert!(text.contains("\n1,copy_cosine,"));
    }
}
