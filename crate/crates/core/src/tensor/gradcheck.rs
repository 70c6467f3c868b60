//! Central finite-difference validation of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation half-width.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Tensors with more entries are checked on a seeded subsample of this size.
    pub max_entries: usize,
    /// Denominator floor: errors are measured relative to
    /// `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            tol: 1e-4,
            max_entries: 64,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    /// `Err` naming the first failing parameter and entry.
    pub fn into_result(self) -> Result<Self> {
        if let Some(p) = self.params.iter().find(|p| p.max_rel_err > self.tol) {
            return Err(Error::GradCheck {
                param: p.name.clone(),
                index: p.worst_index,
                analytic: p.analytic,
                numeric: p.numeric,
                rel_err: p.max_rel_err,
            });
        }
        Ok(self)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences, for each named parameter.
///
/// `f` receives a fresh tape and one leaf per parameter (same order).
pub fn grad_check<F>(params: &mut [(String, Tensor)], cfg: &GradCheckConfig, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(cfg.eps > 0.0) || !(cfg.tol > 0.0) {
        return Err(Error::Contract("grad_check needs eps > 0 and tol > 0".into()));
    }
    let mut eval = |params: &[(String, Tensor)], keep_grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        if !keep_grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| tape.grad_tensor(v)).collect()))
    };

    let (_, analytic) = eval(params, true)?;
    let mut report = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let len = params[p].1.len();
        let indices: Vec<usize> = if len <= cfg.max_entries {
            (0..len).collect()
        } else {
            let mut all: Vec<usize> = (0..len).collect();
            let mut r = rng::stream(cfg.seed, rng::domain::GRAD_CHECK, p as u64);
            rng::shuffle(&mut all, &mut r);
            all.truncate(cfg.max_entries);
            all.sort_unstable();
            all
        };
        let mut check = ParamCheck {
            name: params[p].0.clone(),
            checked: indices.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &indices {
            let orig = params[p].1.data()[i];
            params[p].1.data_mut()[i] = orig + cfg.eps;
            let (plus, _) = eval(params, false)?;
            params[p].1.data_mut()[i] = orig - cfg.eps;
            let (minus, _) = eval(params, false)?;
            params[p].1.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[p].data()[i];
            let err = relative_error(a, numeric, cfg.floor);
            if err > check.max_rel_err || i == indices[0] {
                check.max_rel_err = err.max(check.max_rel_err);
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tol: cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn square_at_three() {
        let mut params = vec![("theta".into(), Tensor::scalar(3.0))];
        let report = grad_check(&mut params, &GradCheckConfig::default(), |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.passed());
        let p = &report.params[0];
        assert!((p.analytic - 6.0).abs() < 1e-12);
        assert!((p.numeric - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut params = vec![("w".into(), Tensor::full(&[3], 1.5))];
        let report = grad_check(&mut params, &GradCheckConfig::default(), |tape, _| {
            Ok(tape.constant(Tensor::scalar(4.0)))
        })
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.params[0].analytic, 0.0);
        assert_eq!(report.params[0].numeric, 0.0);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        // the tape sees x, the numeric probe sees x^2 through a side channel
        let mut params = vec![("x".into(), Tensor::scalar(2.0))];
        let report = grad_check(&mut params, &GradCheckConfig::default(), |tape, v| {
            let x = tape.value(v[0]).item();
            let k = tape.constant(Tensor::scalar(x));
            let y = tape.mul(v[0], k)?;
            let lin = tape.scale(y, 0.0);
            let s = tape.add(lin, v[0])?;
            Ok(tape.sum(s))
        })
        .unwrap();
        // analytic: d/dx (0 * x*k + x) = 1, numeric: same = 1 -> passes
        assert!(report.passed());

        let mut params = vec![("x".into(), Tensor::scalar(2.0))];
        let report = grad_check(&mut params, &GradCheckConfig::default(), |tape, v| {
            let x = tape.value(v[0]).item();
            let k = tape.constant(Tensor::scalar(x));
            tape.mul(v[0], k)
        })
        .unwrap();
        // analytic treats k as constant (2), numeric sees 2x (4)
        assert!(!report.passed());
        let err = report.into_result().unwrap_err();
        assert!(matches!(err, Error::GradCheck { ref param, index: 0, .. } if param == "x"));
    }
}
