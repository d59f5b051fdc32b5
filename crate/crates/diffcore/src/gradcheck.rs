use crate::error::{DiffError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|a - n| / max(|a|, |n|, 1e-8)`; coordinates
    /// whose discrepancy is within `resolution` count as exact.
    pub max_rel_error: f64,
    /// Roundoff bound of the central difference, `64 ε_f64 · max(1, |f|) / eps`.
    pub resolution: f64,
    /// Parameter name and flat coordinate where the max was attained.
    pub worst: Option<(String, usize)>,
    pub coords: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences `(f(θ + εe) - f(θ - εe)) / 2ε`, coordinate by coordinate, for
/// every parameter in `params`.
pub fn grad_check<F, E>(params: &mut ParamStore<f64>, eps: f64, f: F) -> Result<GradCheckReport, E>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var, E>,
    E: From<DiffError>,
{
    let (value, analytic) = {
        let mut g = Graph::new(&*params);
        let out = f(&mut g)?;
        let v = g.value(out).item();
        check_finite(v)?;
        (v, g.backward(out)?.into_param_grads())
    };
    // a few ulps of the objective, divided by the 2·eps step
    let resolution = 64.0 * f64::EPSILON * value.abs().max(1.0) / eps;

    let eval = |params: &ParamStore<f64>| -> Result<f64, E> {
        let mut g = Graph::new(params);
        let out = f(&mut g)?;
        let v = g.value(out).item();
        check_finite(v)?;
        Ok(v)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, resolution, worst: None, coords: 0 };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.value(id).len();
        for j in 0..n {
            let orig = params.value(id).data()[j];
            params.value_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(params)?;
            params.value_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(params)?;
            params.value_mut(id).data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[j]);
            let err = if (a - numeric).abs() <= resolution { 0.0 } else { relative_error(a, numeric) };
            report.coords += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.get(id).name.clone(), j));
            }
        }
    }
    Ok(report)
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(DiffError::NonFiniteValue("grad_check objective".into()))
    }
}
