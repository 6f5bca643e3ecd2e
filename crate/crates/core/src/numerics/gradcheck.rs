//! Central finite-difference oracle for tape gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` receives a fresh graph and one trainable variable per entry of
/// `params`, and returns the scalar loss. For each parameter tensor the
/// error is `max_i |tape_i - fd_i| / S`, where `S` is the largest absolute
/// entry of either gradient over all parameters (at least 1e-12). Scaling
/// by the whole gradient rather than per tensor keeps tensors whose
/// gradient is nearly zero from reporting pure rounding noise.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor], probe: &str| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss {v} at probe {probe}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite("loss at base point".into()));
    }
    let grads = g.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut pairs = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        let mut numeric = vec![0.0; params[pi].len()];
        for (ei, slot) in numeric.iter_mut().enumerate() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let up = eval(&work, &format!("param {pi}[{ei}] + eps"))?;
            work[pi].data_mut()[ei] = orig - eps;
            let down = eval(&work, &format!("param {pi}[{ei}] - eps"))?;
            work[pi].data_mut()[ei] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        pairs.push((analytic, numeric));
    }
    let scale = pairs.iter().flat_map(|(a, n)| a.data().iter().chain(n)).fold(1e-12f64, |m, v| m.max(v.abs()));
    let report = pairs
        .iter()
        .map(|(a, n)| a.data().iter().zip(n).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale)
        .collect();
    Ok(GradCheckReport { max_rel_error: report, tolerance: tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AttentionLayout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check(f: impl Fn(&mut Graph, &[Var]) -> Result<Var>, params: &[Tensor]) {
        let r = grad_check(f, params, 1e-5, 1e-6).unwrap();
        assert!(r.passed(), "{:?}", r.max_rel_error);
    }

    #[test]
    fn quadratic_matches() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum_all(sq)
            },
            &[x],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn matmul_gradient_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let r = grad_check(
            |g, v| {
                let m = g.matmul(v[0], v[1])?;
                g.sum_all(m)
            },
            &[a, b],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn elementwise_and_row_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[3, 5], &mut rng);
        let w = random(&[4, 5], &mut rng);
        let c = random(&[3, 4], &mut rng);
        let s = random(&[3], &mut rng).map(|v| v.abs() + 0.5);
        let gain = random(&[5], &mut rng);
        check(
            |g, v| {
                let n = g.rms_norm(v[0], v[4])?;
                let l = g.linear(n, v[1])?;
                let a = g.silu(l)?;
                let m = g.mul(a, v[2])?;
                let m = g.sub(m, v[2])?;
                let d = g.div_col(m, v[3])?;
                let cs = g.sum_last(v[2])?;
                let e = g.mul_col(d, cs)?;
                let sm = g.softmax(e)?;
                let ls = g.log_softmax(e)?;
                let t = g.mul(sm, ls)?;
                let cols = g.mean_rows(t)?;
                let rows = g.sum_last(e)?;
                let a = g.sum_all(cols)?;
                let b = g.mean_all(rows)?;
                let b = g.scale(b, 0.3)?;
                g.add(a, b)
            },
            &[x, w, c, s, gain],
        );
    }

    #[test]
    fn indexing_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = random(&[5, 3], &mut rng);
        let weights = random(&[4, 3], &mut rng);
        check(
            |g, v| {
                let rows = g.gather_rows(v[0], vec![4, 1, 1, 0])?;
                let r = g.mul(rows, v[1])?;
                let sc = g.scatter_rows(r, vec![2, 0, 2, 1], 3)?;
                let sc = g.reshape(sc, vec![9])?;
                let masked = g.reshape(sc, vec![3, 3])?;
                let masked = g.mask_cols(masked, vec![true, false, true])?;
                let p = g.softmax(masked)?;
                let picked = g.pick(p, vec![0, 2, 5, 8, 0])?;
                let sq = g.mul(picked, picked)?;
                g.sum_all(sq)
            },
            &[table, weights],
        );
    }

    #[test]
    fn attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // 2 sequences (3 + 2 rows), 4 query heads of width 2, 2 kv heads.
        let q = random(&[5, 8], &mut rng);
        let k = random(&[5, 4], &mut rng);
        let v = random(&[5, 4], &mut rng);
        let w = random(&[5, 8], &mut rng);
        check(
            |g, p| {
                let layout = AttentionLayout { num_heads: 4, num_kv_heads: 2, segments: vec![(0, 3), (3, 2)] };
                let o = g.attention(p[0], p[1], p[2], layout)?;
                let o = g.mul(o, p[3])?;
                g.sum_all(o)
            },
            &[q, k, v, w],
        );
    }

    #[test]
    fn attention_is_causal_and_segmented() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random(&[4, 2], &mut rng);
        let k = random(&[4, 2], &mut rng);
        let v = random(&[4, 2], &mut rng);
        let layout = AttentionLayout { num_heads: 1, num_kv_heads: 1, segments: vec![(0, 2), (2, 2)] };
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v.clone()));
        let o = g.attention(qv, kv, vv, layout).unwrap();
        // First row of each segment attends only to itself.
        assert_eq!(g.value(o).row(0), v.row(0));
        assert_eq!(g.value(o).row(2), v.row(2));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let x = Tensor::vector(vec![0.0]);
        let err = grad_check(
            |g, v| {
                let one = g.constant(Tensor::vector(vec![1.0]));
                let d = g.div_col(one, v[0])?;
                g.sum_all(d)
            },
            &[x],
            1e-5,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
