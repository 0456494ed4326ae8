use crate::error::{Result, WamError};

use super::{Graph, Tensor, Var};

/// Denominator floor so exact zeros on both sides do not blow up the ratio.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Max relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    pub checked_entries: usize,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().cloned().fold(0.0, f64::max)
    }
}

fn eval_loss<F>(f: &F, params: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok((g, vars, loss))
}

/// Central finite differences against reverse-mode gradients for every entry.
pub fn gradcheck<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradcheck_sampled(f, params, eps, usize::MAX)
}

/// Like [`gradcheck`] but probes at most `max_per_tensor` evenly strided
/// entries of each tensor.
pub fn gradcheck_sampled<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    max_per_tensor: usize,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(WamError::InvalidArgument("eps must be positive".into()));
    }
    let params: Vec<Tensor> = params.iter().map(|p| p.clone().trainable()).collect();
    let (g, vars, loss) = eval_loss(&f, &params)?;
    if !g.value(loss).item().is_finite() {
        return Err(WamError::NonFinite("gradcheck loss at the base point".into()));
    }
    let grads = g.backward(loss)?;
    let mut per_param = Vec::with_capacity(params.len());
    let mut checked = 0;
    let mut probe = params.clone();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; params[pi].len()]);
        let n = params[pi].len();
        let stride = n.div_ceil(max_per_tensor.min(n)).max(1);
        let mut worst: f64 = 0.0;
        for e in (0..n).step_by(stride) {
            let base = params[pi].data()[e];
            probe[pi].data_mut()[e] = base + eps;
            let (gp, _, lp) = eval_loss(&f, &probe)?;
            probe[pi].data_mut()[e] = base - eps;
            let (gm, _, lm) = eval_loss(&f, &probe)?;
            probe[pi].data_mut()[e] = base;
            let (fp, fm) = (gp.value(lp).item(), gm.value(lm).item());
            if !fp.is_finite() || !fm.is_finite() {
                return Err(WamError::NonFinite(format!(
                    "gradcheck loss when perturbing parameter set {pi}, entry {e}"
                )));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
        per_param.push(worst);
    }
    Ok(GradcheckReport {
        per_param,
        checked_entries: checked,
    })
}
