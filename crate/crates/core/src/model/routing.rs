use crate::error::{Error, Result};
use crate::numerics::{kernels, softmax_lastdim, Tensor, MASKED_LOGIT};

/// Per-token routing outcome of one MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    /// Selected candidate indices, highest probability first.
    pub selected: Vec<usize>,
    /// Selected probabilities renormalised over the whole selection.
    pub gates: Vec<f64>,
    /// How many selected candidates are not normal experts.
    pub zero_selected: usize,
    /// Softmax over every candidate.
    pub probs_full: Tensor,
}

impl RoutingDecision {
    /// Builds a decision from a full probability row.
    pub fn from_probs(probs: &[f64], k: usize, num_normal: usize) -> Result<Self> {
        let selected = top_k(probs, k)?;
        let denom: f64 = selected.iter().map(|&i| probs[i]).sum();
        let gates = selected.iter().map(|&i| probs[i] / denom).collect();
        let zero_selected = selected.iter().filter(|&&i| i >= num_normal).count();
        Ok(Self { selected, gates, zero_selected, probs_full: Tensor::vector(probs.to_vec()) })
    }

    pub fn k(&self) -> usize {
        self.selected.len()
    }

    /// Gates of the selected normal experts rescaled to sum to one; `None`
    /// when every selection is a zero/copy candidate.
    pub fn renormalized_normal_gates(&self, num_normal: usize) -> Option<Vec<(usize, f64)>> {
        let normal: Vec<(usize, f64)> =
            self.selected.iter().zip(&self.gates).filter(|(&i, _)| i < num_normal).map(|(&i, &g)| (i, g)).collect();
        if normal.is_empty() {
            return None;
        }
        let mass: f64 = normal.iter().map(|(_, g)| g).sum();
        Some(normal.into_iter().map(|(i, g)| (i, g / mass)).collect())
    }
}

/// Indices of the `k` largest entries, descending; ties go to the lower index.
pub fn top_k(probs: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > probs.len() {
        return Err(Error::config(format!("top-k of {k} from {} candidates", probs.len())));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Router weight matrix of one layer, normal-expert rows first.
#[derive(Clone, Debug)]
pub struct RouterParams {
    pub weight: Tensor,
    pub num_normal: usize,
    /// Mask every non-normal row with the masked-logit sentinel.
    pub mask_extra: bool,
}

impl RouterParams {
    pub fn logits(&self, h: &Tensor) -> Result<Tensor> {
        let (c, width) = self.weight.dims2("router weight")?;
        if h.len() != width {
            return Err(Error::shape(format!(
                "router weight {:?} against hidden state {:?}",
                self.weight.shape(),
                h.shape()
            )));
        }
        // Same per-row dot kernel as the batched model path, so results agree bitwise.
        let mut z: Vec<f64> = (0..c).map(|i| kernels::dot(self.weight.row(i), h.data())).collect();
        if self.mask_extra {
            z[self.num_normal..c].iter_mut().for_each(|v| *v = MASKED_LOGIT);
        }
        Ok(Tensor::vector(z))
    }
}

/// Softmax over all candidate logits, then top-`k` with renormalised gates.
pub fn route_topk(router: &RouterParams, h: &Tensor, k: usize) -> Result<RoutingDecision> {
    if !h.is_finite() {
        return Err(Error::input("hidden state contains non-finite values"));
    }
    let probs = softmax_lastdim(&router.logits(h)?)?;
    RoutingDecision::from_probs(probs.data(), k, router.num_normal)
}
