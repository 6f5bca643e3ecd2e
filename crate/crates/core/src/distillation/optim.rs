//! AdamW with decoupled weight decay and optional global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundParams, ParamStore};
use crate::numerics::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Rescale the full gradient when its L2 norm exceeds this.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.99
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0,1)"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("eps must be positive and weight_decay nonnegative"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: OptimConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, vars: &BoundParams, grads: &Gradients, lr: f64) -> Result<f64> {
        if vars.vars().len() != params.len() || self.m.len() != params.len() {
            return Err(Error::State("optimizer state does not match the parameter store".into()));
        }
        let mut sq = 0.0;
        for &v in vars.vars() {
            if let Some(g) = grads.get(v) {
                sq += g.data().iter().map(|x| x * x).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {norm}")));
        }
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (&var, p)) in vars.vars().iter().zip(params.tensors_mut()).enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *w -= lr * (update + c.weight_decay * *w);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    fn store(x: Vec<f64>) -> ParamStore {
        ParamStore::new(vec![("x".into(), Tensor::vector(x))])
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = store(vec![3.0, -2.0]);
        let mut opt = AdamW::new(OptimConfig { clip_norm: None, ..Default::default() }, &p);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(p.tensors()[0].clone());
            let sq = g.mul(x, x).unwrap();
            let l = g.sum_all(sq).unwrap();
            let grads = g.backward(l).unwrap();
            opt.step(&mut p, &BoundParams::from_vars(vec![x]), &grads, 0.05).unwrap();
        }
        assert!(p.tensors()[0].max_abs() < 1e-2);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = store(vec![1.5, 0.25]);
        let before = p.clone();
        let mut opt = AdamW::new(OptimConfig::default(), &p);
        let mut g = Graph::new();
        let x = g.param(p.tensors()[0].clone());
        let l = g.scale(x, 0.0).unwrap();
        let l = g.sum_all(l).unwrap();
        let grads = g.backward(l).unwrap();
        opt.step(&mut p, &BoundParams::from_vars(vec![x]), &grads, 0.1).unwrap();
        assert_eq!(p, before);
    }
}
