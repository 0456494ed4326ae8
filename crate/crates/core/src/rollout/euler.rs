use crate::error::{Result, WamError};
use crate::tensor::Tensor;

/// Uniform grid of `steps + 1` times from `from` down to `to`.
pub fn tau_grid(from: f64, to: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|i| if i == steps { to } else { from + (to - from) * i as f64 / steps as f64 })
        .collect()
}

/// Explicit Euler over a descending uniform grid:
/// `x <- x + (tau_{i+1} - tau_i) * v(x, tau_i)`. The field also receives the step index.
pub fn euler_integrate<F>(mut field: F, x_init: Tensor, from: f64, to: f64, steps: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64, usize) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(WamError::InvalidArgument("Euler integration needs at least one step".into()));
    }
    if !(from > to) || !(0.0..=1.0).contains(&from) || !(0.0..=1.0).contains(&to) {
        return Err(WamError::InvalidArgument(format!(
            "integration must descend within [0, 1], got {from} -> {to}"
        )));
    }
    let grid = tau_grid(from, to, steps);
    let mut x = x_init;
    for i in 0..steps {
        let v = field(&x, grid[i], i)?;
        if v.shape() != x.shape() {
            return Err(WamError::shape(
                "euler_integrate",
                format!("velocity {:?} vs state {:?}", v.shape(), x.shape()),
            ));
        }
        if !v.is_finite() {
            return Err(WamError::NonFinite(format!("velocity at Euler step {i} (tau {})", grid[i])));
        }
        let dt = grid[i + 1] - grid[i];
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}
