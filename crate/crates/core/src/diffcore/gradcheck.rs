use super::{DiffError, Graph, NodeId, Tensor};

/// Evaluates a scalar function built on a fresh graph and returns its value
/// together with the gradient wrt the flat parameter vector `point`.
///
/// `build` receives the graph and a vector leaf holding `point`; it may
/// slice and reshape that leaf into whatever parameters it needs.
pub fn eval_with_grad<E, F>(point: &[f64], build: F) -> Result<(f64, Vec<f64>), E>
where
    E: From<DiffError>,
    F: FnOnce(&mut Graph, NodeId) -> Result<NodeId, E>,
{
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(point.to_vec()));
    let root = build(&mut g, x)?;
    let value = g.scalar_value(root).ok_or(DiffError::NonScalarRoot(g.shape(root)))?;
    let grads = g.backward(root)?;
    Ok((value, grads.wrt(x)?.data().to_vec()))
}

/// Compares the analytic gradient reported by `f` at `point` against central
/// differences with the given step.
///
/// `f` returns `(value, gradient)`. The result is the maximum over
/// coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<E, F>(mut f: F, point: &[f64], step: f64) -> Result<f64, E>
where
    E: From<DiffError>,
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(DiffError::InvalidStep(step).into());
    }
    let (_, analytic) = f(point)?;
    if analytic.len() != point.len() {
        return Err(DiffError::GradientLength {
            expected: point.len(),
            actual: analytic.len(),
        }
        .into());
    }
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let (plus, _) = f(&probe)?;
        probe[i] = point[i] - step;
        let (minus, _) = f(&probe)?;
        probe[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DiffError::NonFinite { coordinate: i }.into());
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
