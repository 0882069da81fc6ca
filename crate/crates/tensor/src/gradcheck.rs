//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of the backward rules it checks.

use crate::{Graph, ParamSet, Result, TensorError, Var};

/// Denominator floor for relative errors, so entries whose true gradient is
/// ~0 are judged on absolute error at this scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backward gradients of `loss_fn` against central differences with
/// step `h` for every entry of every parameter.
pub fn check_gradients<F>(params: &ParamSet, h: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = g.bind(params);
    let loss = loss_fn(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic = g.grads_of(&vars);

    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let vars = g.bind_frozen(ps);
        let loss = loss_fn(&mut g, &vars)?;
        let v = g.value(loss);
        if v.len() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut probe = params.clone();
    for (pi, param) in params.iter().enumerate() {
        for i in 0..param.value.len() {
            let orig = param.value.data()[i];
            probe.get_mut(crate::ParamId(pi)).data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(crate::ParamId(pi)).data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(crate::ParamId(pi)).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[pi].data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_param = param.name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
