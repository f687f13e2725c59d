//! Central finite-difference verification of analytic gradients (64-bit).

use super::graph::{Graph, Var};
use super::params::{reverse_gradient, BoundParams, Gradients, ParamStore};
use super::NumericError;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Denominator floor for [`relative_error`]; below it the error is effectively
/// absolute (scaled by 1e3).
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient of `loss_fn` against central differences
/// with step `h` on every coordinate.
pub fn finite_diff_check<L>(params: &ParamStore<f64>, loss_fn: L, h: f64, tol: f64) -> Result<GradCheckReport, NumericError>
where
    L: for<'a> Fn(&mut Graph<'a, f64>, &BoundParams) -> Result<Var, NumericError>,
{
    let (_, grads) = reverse_gradient(params, &loss_fn)?;
    check_against(params, &grads, loss_fn, h, tol)
}

/// Same as [`finite_diff_check`] but against caller-supplied gradients.
pub fn check_against<L>(
    params: &ParamStore<f64>,
    grads: &Gradients<f64>,
    loss_fn: L,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, NumericError>
where
    L: for<'a> Fn(&mut Graph<'a, f64>, &BoundParams) -> Result<Var, NumericError>,
{
    let eval = |p: &ParamStore<f64>| -> Result<f64, NumericError> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let loss = loss_fn(&mut g, &bound)?;
        g.check()?;
        Ok(g.value(loss).item())
    };

    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let analytic = grads
            .get(&name)
            .ok_or_else(|| NumericError::MissingGradient(name.clone()))?
            .clone();
        let mut worst = 0.0f64;
        for i in 0..analytic.len() {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().value.data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(&name).unwrap().value.data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(&name).unwrap().value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        report.push(ParamCheck {
            passed: worst <= tol,
            name,
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { params: report, tol })
}
