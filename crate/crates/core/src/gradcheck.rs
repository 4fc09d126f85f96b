//! Numerical gradient checking.
//!
//! Central finite differences evaluated on the `f64` graph serve as the
//! independent reference for analytic gradients. The builder closure
//! reconstructs the loss from scratch for every probe, so the only shared
//! machinery between the two routes is the forward evaluation itself.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorId};

/// Leaf description fed to both the analytic and finite-difference routes.
#[derive(Debug, Clone)]
pub struct LeafSpec {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
}

impl LeafSpec {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Self {
        LeafSpec { shape: shape.to_vec(), values, requires_grad: true }
    }

    pub fn frozen(shape: &[usize], values: Vec<f64>) -> Self {
        LeafSpec { shape: shape.to_vec(), values, requires_grad: false }
    }
}

/// Central finite differences of the scalar loss w.r.t. every requires-grad
/// leaf coordinate. Leaves that do not require grad get an empty vector.
pub fn finite_diff<F>(leaves: &[LeafSpec], step: f64, build: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId>,
{
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let mut ids = Vec::with_capacity(leaves.len());
        for (spec, vals) in leaves.iter().zip(values) {
            ids.push(g.leaf(&spec.shape, vals.clone(), spec.requires_grad)?);
        }
        let loss = build(&mut g, &ids)?;
        Ok(g.scalar_value(loss))
    };

    let mut work: Vec<Vec<f64>> = leaves.iter().map(|l| l.values.clone()).collect();
    let mut grads = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        if !leaves[li].requires_grad {
            grads.push(Vec::new());
            continue;
        }
        let mut g = vec![0.0; leaves[li].values.len()];
        for ci in 0..g.len() {
            let orig = work[li][ci];
            work[li][ci] = orig + step;
            let up = eval(&work)?;
            work[li][ci] = orig - step;
            let down = eval(&work)?;
            work[li][ci] = orig;
            g[ci] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Analytic gradients from one reverse pass, converted to `f64` for
/// comparison. Instantiate with `S = f32` to test the training-precision
/// path against the 64-bit reference.
pub fn analytic<S: Scalar, F>(leaves: &[LeafSpec], build: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<S>, &[TensorId]) -> Result<TensorId>,
{
    let mut g = Graph::<S>::new();
    let mut ids = Vec::with_capacity(leaves.len());
    for spec in leaves {
        let vals: Vec<S> = spec.values.iter().map(|&v| S::from_f64(v)).collect();
        ids.push(g.leaf(&spec.shape, vals, spec.requires_grad)?);
    }
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    Ok(ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .map(|gr| gr.iter().map(|&v| v.as_f64()).collect())
                .unwrap_or_default()
        })
        .collect())
}

/// Maximum relative error over all coordinates, with a denominator floor to
/// keep near-zero gradients meaningful.
pub fn max_rel_err(analytic: &[Vec<f64>], fd: &[Vec<f64>], floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (a, f) in analytic.iter().zip(fd) {
        for (&av, &fv) in a.iter().zip(f) {
            let denom = av.abs().max(fv.abs()).max(floor);
            let rel = (av - fv).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

/// Maximum error relative to the overall gradient scale: the largest
/// coordinate disagreement divided by the largest reference-gradient
/// magnitude. Near-zero coordinates are judged against the gradient's own
/// scale instead of an arbitrary floor.
pub fn max_scaled_err(analytic: &[Vec<f64>], fd: &[Vec<f64>]) -> f64 {
    let scale = fd
        .iter()
        .flat_map(|v| v.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(1e-12);
    let mut worst = 0.0f64;
    for (a, f) in analytic.iter().zip(fd) {
        for (&av, &fv) in a.iter().zip(f) {
            worst = worst.max((av - fv).abs());
        }
    }
    worst / scale
}

/// Convenience wrapper: f64 analytic vs central differences, returning the
/// max relative error (denominator floor 1e-6).
pub fn check<F>(leaves: &[LeafSpec], step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId> + Copy,
{
    let fd = finite_diff(leaves, step, build)?;
    let an = analytic::<f64, _>(leaves, build)?;
    Ok(max_rel_err(&an, &fd, 1e-6))
}
