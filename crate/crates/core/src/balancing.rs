//! Routing statistics and the two load-balancing objectives.
//!
//! `L_A  = α · (N+N_Z)/K · Σ_i f_i P_i` balances every candidate.
//! `L_GA = α · (N+N_Z·w)/K · (f_E P_E / N + f_Z P_Z / (N_Z·w))` balances only
//! the normal group against the zero group, leaving the distribution inside
//! the normal group free.
//!
//! `f_i` is the fraction of tokens whose selection contains candidate `i` and
//! is treated as a constant; `P_i` is the mean full-softmax probability and
//! carries gradients.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerTrace, RoutingDecision};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxConfig {
    pub alpha: f64,
    /// Relative weight of the zero-expert group.
    pub w: f64,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self { alpha: 0.1, w: 2.0 }
    }
}

impl AuxConfig {
    pub fn validate(&self) -> Result<()> {
        // alpha = 0 is allowed so the balancing term can be switched off.
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.w > 0.0 && self.w.is_finite()) {
            return Err(Error::config(format!("w must be > 0, got {}", self.w)));
        }
        Ok(())
    }
}

/// Aggregates over one batch of routing decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRoutingStats {
    pub num_normal: usize,
    pub num_zero: usize,
    pub k: usize,
    pub tokens: usize,
    /// Dispatch fraction per candidate.
    pub f: Vec<f64>,
    /// Mean router probability per candidate.
    pub p: Vec<f64>,
    pub f_e: f64,
    pub p_e: f64,
    pub f_z: f64,
    pub p_z: f64,
    /// Fraction of activated slots taken by zero experts.
    pub r_ze: f64,
    pub k_e_mean: f64,
    pub k_z_mean: f64,
}

pub fn batch_stats(decisions: &[RoutingDecision], num_normal: usize, num_zero: usize) -> Result<BatchRoutingStats> {
    let first = decisions.first().ok_or_else(|| Error::input("routing statistics need a nonempty batch"))?;
    let c = num_normal + num_zero;
    let k = first.k();
    let mut counts = vec![0usize; c];
    let mut psum = vec![0.0; c];
    let mut zero_slots = 0usize;
    for (t, d) in decisions.iter().enumerate() {
        if d.k() != k || d.probs_full.len() != c {
            return Err(Error::input(format!(
                "token {t}: {} selections over {} candidates, expected {k} over {c}",
                d.k(),
                d.probs_full.len()
            )));
        }
        for &e in &d.selected {
            counts[e] += 1;
        }
        zero_slots += d.selected.iter().filter(|&&e| e >= num_normal).count();
        for (s, p) in psum.iter_mut().zip(d.probs_full.data()) {
            *s += p;
        }
    }
    let tokens = decisions.len();
    let inv = 1.0 / tokens as f64;
    let f: Vec<f64> = counts.iter().map(|&n| n as f64 / tokens as f64).collect();
    let p: Vec<f64> = psum.iter().map(|s| s * inv).collect();
    let f_e = f[..num_normal].iter().sum();
    let f_z = f[num_normal..].iter().sum();
    let p_e = p[..num_normal].iter().sum();
    let p_z = p[num_normal..].iter().sum();
    let k_z_mean = zero_slots as f64 / tokens as f64;
    let k_e_mean = (tokens * k - zero_slots) as f64 / tokens as f64;
    let stats = BatchRoutingStats {
        num_normal,
        num_zero,
        k,
        tokens,
        f,
        p,
        f_e,
        p_e,
        f_z,
        p_z,
        r_ze: zero_slots as f64 / (tokens * k) as f64,
        k_e_mean,
        k_z_mean,
    };
    debug_assert!((stats.f.iter().sum::<f64>() - k as f64).abs() < 1e-10);
    debug_assert!((stats.p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    Ok(stats)
}

/// `L_A` evaluated on plain statistics.
pub fn aux_loss(stats: &BatchRoutingStats, cfg: &AuxConfig) -> f64 {
    let c = (stats.num_normal + stats.num_zero) as f64;
    let dot: f64 = stats.f.iter().zip(&stats.p).map(|(f, p)| f * p).sum();
    cfg.alpha * c / stats.k as f64 * dot
}

/// `L_GA` evaluated on plain statistics.
pub fn group_aux_loss(stats: &BatchRoutingStats, cfg: &AuxConfig) -> Result<f64> {
    let (n, nz) = (stats.num_normal as f64, stats.num_zero as f64);
    if stats.num_zero == 0 {
        return Err(Error::config("group auxiliary loss needs at least one zero expert"));
    }
    let zw = nz * cfg.w;
    Ok(cfg.alpha * (n + zw) / stats.k as f64 * (stats.f_e * stats.p_e / n + stats.f_z * stats.p_z / zw))
}

/// Closed-form equilibrium zero-expert ratio `N_Z·w / (N + N_Z·w)`.
pub fn target_rze(num_normal: usize, num_zero: usize, w: f64) -> f64 {
    let zw = num_zero as f64 * w;
    zw / (num_normal as f64 + zw)
}

/// Differentiable `L_A` for one layer: `probs` is the `[T, N+N_Z]` router
/// softmax recorded on `g`, `stats` the matching statistics.
pub fn aux_loss_var(g: &mut Graph, probs: Var, stats: &BatchRoutingStats, cfg: &AuxConfig) -> Result<Var> {
    let c = stats.num_normal + stats.num_zero;
    let coef = cfg.alpha * c as f64 / stats.k as f64;
    weighted_prob_sum(g, probs, stats.f.clone(), coef)
}

/// Differentiable `L_GA` for one layer.
pub fn group_aux_loss_var(g: &mut Graph, probs: Var, stats: &BatchRoutingStats, cfg: &AuxConfig) -> Result<Var> {
    if stats.num_zero == 0 {
        return Err(Error::config("group auxiliary loss needs at least one zero expert"));
    }
    let (n, nz) = (stats.num_normal, stats.num_zero);
    let zw = nz as f64 * cfg.w;
    let coef = cfg.alpha * (n as f64 + zw) / stats.k as f64;
    // f_E P_E / N + f_Z P_Z / (N_Z w) = Σ_i c_i P_i with a per-group c_i.
    let weights = (0..n + nz).map(|i| if i < n { stats.f_e / n as f64 } else { stats.f_z / zw }).collect();
    weighted_prob_sum(g, probs, weights, coef)
}

fn weighted_prob_sum(g: &mut Graph, probs: Var, weights: Vec<f64>, coef: f64) -> Result<Var> {
    let mean = g.mean_rows(probs)?;
    if g.value(mean).len() != weights.len() {
        return Err(Error::shape(format!(
            "router probabilities have {} columns, statistics cover {}",
            g.value(mean).len(),
            weights.len()
        )));
    }
    let w = g.constant(Tensor::vector(weights));
    let prod = g.mul(mean, w)?;
    let s = g.sum_all(prod)?;
    g.scale(s, coef)
}

/// Which balancing objective a training stage applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceKind {
    /// Expert-level `L_A` over every candidate.
    Expert,
    /// Group-level `L_GA`.
    Group,
}

/// Balancing loss averaged over MoE layers, with the per-layer statistics.
///
/// Returns `None` for the loss when the model has no zero experts and the
/// group objective was requested, since the group loss is undefined there.
pub fn layer_averaged_loss(
    g: &mut Graph,
    layers: &[LayerTrace],
    num_normal: usize,
    num_zero: usize,
    cfg: &AuxConfig,
    kind: BalanceKind,
) -> Result<(Option<Var>, Vec<BatchRoutingStats>)> {
    let mut stats = Vec::with_capacity(layers.len());
    let mut terms = Vec::with_capacity(layers.len());
    for tr in layers {
        let s = batch_stats(&tr.decisions, num_normal, num_zero)?;
        let term = match kind {
            BalanceKind::Expert => Some(aux_loss_var(g, tr.probs, &s, cfg)?),
            BalanceKind::Group if num_zero > 0 => Some(group_aux_loss_var(g, tr.probs, &s, cfg)?),
            BalanceKind::Group => None,
        };
        terms.extend(term);
        stats.push(s);
    }
    if terms.is_empty() {
        return Ok((None, stats));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let avg = g.scale(total, 1.0 / terms.len() as f64)?;
    Ok((Some(avg), stats))
}

/// `L_GA` when dispatch follows probability, `f_g = K·P_g`, as a function of `P_Z`.
pub fn coupled_group_loss(p_z: f64, num_normal: usize, num_zero: usize, k: usize, cfg: &AuxConfig) -> f64 {
    let kf = k as f64;
    let stats = BatchRoutingStats {
        num_normal,
        num_zero,
        k,
        tokens: 1,
        f: Vec::new(),
        p: Vec::new(),
        f_e: kf * (1.0 - p_z),
        p_e: 1.0 - p_z,
        f_z: kf * p_z,
        p_z,
        r_ze: p_z,
        k_e_mean: kf * (1.0 - p_z),
        k_z_mean: kf * p_z,
    };
    group_aux_loss(&stats, cfg).expect("num_zero > 0")
}

/// Grid minimiser of [`coupled_group_loss`] over `P_Z ∈ [0,1]`.
pub fn equilibrium_grid_search(num_normal: usize, num_zero: usize, w: f64, step: f64) -> f64 {
    let cfg = AuxConfig { alpha: 1.0, w };
    let n_steps = (1.0 / step).round() as usize;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=n_steps {
        let p_z = i as f64 / n_steps as f64;
        let l = coupled_group_loss(p_z, num_normal, num_zero, 1, &cfg);
        if l < best.0 {
            best = (l, p_z);
        }
    }
    best.1
}

/// One CSV row of per-layer routing statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub step: usize,
    pub layer: usize,
    pub f_e: f64,
    pub p_e: f64,
    pub f_z: f64,
    pub p_z: f64,
    pub r_ze: f64,
    pub l_a: f64,
    pub l_ga: f64,
}

impl StatsRow {
    pub fn from_stats(step: usize, layer: usize, s: &BatchRoutingStats, cfg: &AuxConfig) -> Self {
        Self {
            step,
            layer,
            f_e: s.f_e,
            p_e: s.p_e,
            f_z: s.f_z,
            p_z: s.p_z,
            r_ze: s.r_ze,
            l_a: aux_loss(s, cfg),
            l_ga: group_aux_loss(s, cfg).unwrap_or(f64::NAN),
        }
    }
}

/// Writes rows with header `step,layer,f_E,P_E,f_Z,P_Z,r_ze,L_A,L_GA`.
pub fn write_stats_csv<W: Write>(out: W, rows: &[StatsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["step", "layer", "f_E", "P_E", "f_Z", "P_Z", "r_ze", "L_A", "L_GA"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_stats_csv(path: &Path, rows: &[StatsRow]) -> Result<()> {
    write_stats_csv(std::fs::File::create(path)?, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decision(selected: Vec<usize>, c: usize, n: usize) -> RoutingDecision {
        let k = selected.len();
        RoutingDecision {
            zero_selected: selected.iter().filter(|&&e| e >= n).count(),
            gates: vec![1.0 / k as f64; k],
            selected,
            probs_full: Tensor::vector(vec![1.0 / c as f64; c]),
        }
    }

    fn uniform_stats(n: usize, nz: usize, k: usize) -> BatchRoutingStats {
        let c = n + nz;
        // c tokens, token t selects t..t+k (cyclic): every candidate chosen k times.
        let ds: Vec<_> = (0..c).map(|t| decision((0..k).map(|j| (t + j) % c).collect(), c, n)).collect();
        batch_stats(&ds, n, nz).unwrap()
    }

    #[test]
    fn counting_example() {
        // N=2, N_Z=1, K=2: A selects {E0,Z0}, B selects {E0,E1}.
        let ds = vec![decision(vec![0, 2], 3, 2), decision(vec![0, 1], 3, 2)];
        let s = batch_stats(&ds, 2, 1).unwrap();
        assert_eq!(s.f, vec![1.0, 0.5, 0.5]);
        assert_eq!(s.f_e, 1.5);
        assert_eq!(s.f_z, 0.5);
        assert_eq!(s.r_ze, 0.25);
        assert_eq!(s.k_z_mean, 0.5);
        assert_eq!(s.k_e_mean, 1.5);
    }

    #[test]
    fn uniform_router_stats() {
        let s = uniform_stats(4, 2, 2);
        for i in 0..6 {
            assert!((s.f[i] - 2.0 / 6.0).abs() < 1e-15);
            assert!((s.p[i] - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(matches!(batch_stats(&[], 2, 1), Err(Error::Input(_))));
    }

    #[test]
    fn aux_loss_examples() {
        let s = uniform_stats(4, 2, 2);
        assert!((aux_loss(&s, &AuxConfig { alpha: 0.1, w: 2.0 }) - 0.1).abs() < 1e-15);
        assert_eq!(aux_loss(&s, &AuxConfig { alpha: 0.0, w: 2.0 }), 0.0);
    }

    #[test]
    fn group_loss_examples() {
        let s = uniform_stats(4, 2, 2);
        // Direct evaluation: 0.1 · (4+4)/2 · (f_E P_E/4 + f_Z P_Z/4)
        // with f_E = 4/3, P_E = 2/3, f_Z = 2/3, P_Z = 1/3.
        let direct = 0.1 * 8.0 / 2.0 * ((4.0 / 3.0) * (2.0 / 3.0) / 4.0 + (2.0 / 3.0) * (1.0 / 3.0) / 4.0);
        let l = group_aux_loss(&s, &AuxConfig { alpha: 0.1, w: 2.0 }).unwrap();
        assert!((l - direct).abs() < 1e-15);
        assert!((l - 0.1 * 10.0 / 9.0).abs() < 1e-15);

        // All mass on the normal group.
        let boundary = BatchRoutingStats { f_e: 2.0, p_e: 1.0, f_z: 0.0, p_z: 0.0, ..s.clone() };
        let l = group_aux_loss(&boundary, &AuxConfig { alpha: 1.0, w: 2.0 }).unwrap();
        assert!((l - 2.0).abs() < 1e-15);

        let static_stats = BatchRoutingStats { num_zero: 0, ..s };
        assert!(matches!(group_aux_loss(&static_stats, &AuxConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn target_ratio_values() {
        assert_eq!(target_rze(128, 64, 2.0), 0.5);
        assert!((target_rze(128, 64, 1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(target_rze(16, 8, 2.0), 0.5);
        let mut prev = 0.0;
        for w in [0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let t = target_rze(16, 8, w);
            assert!(t > prev);
            prev = t;
        }
    }

    #[test]
    fn within_group_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, nz) = (5, 3);
        let c = n + nz;
        let probs: Vec<f64> = {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..1.0)).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|v| v / z).collect()
        };
        let d = RoutingDecision::from_probs(&probs, 2, n).unwrap();
        let s = batch_stats(&[d], n, nz).unwrap();
        let mut permuted = s.clone();
        permuted.p[..n].reverse();
        permuted.f[..n].rotate_left(2);
        let cfg = AuxConfig::default();
        assert_eq!(group_aux_loss(&s, &cfg).unwrap(), group_aux_loss(&permuted, &cfg).unwrap());
    }

    #[test]
    fn differentiable_losses_match_plain_values_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (t, n, nz, k) = (6, 4, 2, 2);
        let logits =
            Tensor::new(vec![t, n + nz], (0..t * (n + nz)).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let cfg = AuxConfig { alpha: 0.1, w: 2.0 };
        let stats_for = |g: &Graph, probs: Var| {
            let pv = g.value(probs);
            let ds: Vec<_> = (0..t).map(|i| RoutingDecision::from_probs(pv.row(i), k, n).unwrap()).collect();
            batch_stats(&ds, n, nz).unwrap()
        };
        let mut g = Graph::new();
        let x = g.constant(logits.clone());
        let probs = g.softmax(x).unwrap();
        let s = stats_for(&g, probs);
        let la = aux_loss_var(&mut g, probs, &s, &cfg).unwrap();
        let lga = group_aux_loss_var(&mut g, probs, &s, &cfg).unwrap();
        assert!((g.value(la).item() - aux_loss(&s, &cfg)).abs() < 1e-15);
        assert!((g.value(lga).item() - group_aux_loss(&s, &cfg).unwrap()).abs() < 1e-15);

        for group in [false, true] {
            let r = grad_check(
                // Dispatch fractions stay frozen at the base point, as on the tape.
                |g, v| {
                    let probs = g.softmax(v[0])?;
                    if group {
                        group_aux_loss_var(g, probs, &s, &cfg)
                    } else {
                        aux_loss_var(g, probs, &s, &cfg)
                    }
                },
                std::slice::from_ref(&logits),
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(r.passed(), "group={group}: {r:?}");
        }
    }

    #[test]
    fn equilibrium_matches_target() {
        for (n, nz, w) in [(16, 8, 1.0), (16, 8, 2.0), (128, 64, 2.0), (64, 32, 2.0)] {
            let p = equilibrium_grid_search(n, nz, w, 1e-4);
            assert!((p - target_rze(n, nz, w)).abs() <= 2e-4, "{n} {nz} {w}: {p}");
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let s = uniform_stats(4, 2, 2);
        let rows = vec![StatsRow::from_stats(3, 1, &s, &AuxConfig::default())];
        let mut buf = Vec::new();
        write_stats_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,layer,f_E,P_E,f_Z,P_Z,r_ze,L_A,L_GA");
        assert!(lines.next().unwrap().starts_with("3,1,"));
    }
}
