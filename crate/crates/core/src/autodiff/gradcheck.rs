use super::{Graph, NodeId};
use crate::tensor::{Result, Tensor, TensorError};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of the relative error. Central differences at the
/// default step carry about 1e-11 of rounding noise, so exactly-zero
/// gradients would otherwise read as 1e-3 relative errors.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Compares tape gradients of a scalar function against central differences.
///
/// `build` records the function on the given graph from parameter leaves and
/// returns the scalar output node. Returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, DENOM_FLOOR)` over every
/// coordinate of every parameter.
pub fn finite_diff_check<F>(build: F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    finite_diff_check_with_step(build, params, DEFAULT_STEP)
}

pub fn finite_diff_check_with_step<F>(build: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &ids)?;
    if g.value(out).len() != 1 {
        return Err(TensorError::Contract("finite_diff_check needs a scalar function".into()));
    }
    let grads = g.backward(out)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
