use super::{Graph, Tensor, TensorError, Var};

/// `|a − n| / (|a| + |n| + 1e−12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h` and returns the largest
/// [`relative_error`] over all coordinates of `theta`.
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::Numeric(format!(
            "step must be positive, got {h}"
        )));
    }
    let eval = |t: Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.variable(t);
        let out = f(&mut g, v)?;
        let y = g.value(out);
        if y.len() != 1 {
            return Err(TensorError::NotScalar(y.shape().to_vec()));
        }
        let y = y.item();
        if !y.is_finite() {
            return Err(TensorError::Numeric("function value is not finite".into()));
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let v = g.variable(theta.clone());
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .map_or_else(|| vec![0.0; theta.len()], <[f64]>::to_vec);

    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = theta.clone();
        plus.data_mut()[i] += h;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(*a, numeric));
    }
    Ok(worst)
}
