use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::GradMap;

/// Central-difference gradient of a scalar function of named `f64` parameters.
///
/// `f` receives the full parameter list with one coordinate shifted by `±eps`.
pub fn finite_diff_gradient<F>(mut f: F, params: &[(String, Tensor<f64>)], eps: f64) -> Result<GradMap<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut current: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut eval = |point: &[Tensor<f64>], what: &dyn Fn() -> String| -> Result<f64> {
        let v = f(point)?;
        if !v.is_finite() {
            return Err(Error::NonFinite { what: what(), value: v });
        }
        Ok(v)
    };
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let base = params[p].1.clone();
        let mut g = vec![0.0; base.len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let origin = base.data()[i];
            let shifted = |delta: f64| {
                let mut t = base.clone();
                t.data_mut()[i] = origin + delta;
                t
            };
            let label = || format!("f at {}[{i}]", params[p].0);
            current[p] = shifted(eps);
            let plus = eval(&current, &label)?;
            current[p] = shifted(-eps);
            let minus = eval(&current, &label)?;
            *gi = (plus - minus) / (2.0 * eps);
        }
        current[p] = base.clone();
        grads.push(Tensor::new(base.shape().to_vec(), g)?);
    }
    Ok(GradMap {
        names: params.iter().map(|(n, _)| n.clone()).collect(),
        grads,
        vars: None,
    })
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest coordinate-wise relative error between two gradient maps.
pub fn max_relative_error(a: &GradMap<f64>, b: &GradMap<f64>, floor: f64) -> Result<f64> {
    if a.names != b.names {
        return Err(Error::InvalidArgument(format!(
            "gradient maps cover different parameters: {:?} vs {:?}",
            a.names, b.names
        )));
    }
    let mut worst = 0.0f64;
    for (ga, gb) in a.grads.iter().zip(&b.grads) {
        if ga.shape() != gb.shape() {
            return Err(Error::shape(
                "max_relative_error",
                format!("{:?} vs {:?}", ga.shape(), gb.shape()),
            ));
        }
        for (&x, &y) in ga.data().iter().zip(gb.data()) {
            worst = worst.max(relative_error(x, y, floor));
        }
    }
    Ok(worst)
}
