//! Central finite-difference verification of tape gradients.

use crate::error::{NumError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub struct GradCheckReport {
    /// (parameter name, max relative error over its elements)
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn failures(&self) -> Vec<&str> {
        self.per_param
            .iter()
            .filter(|(_, e)| *e >= self.tolerance)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Compare analytic gradients from `f` against central differences.
///
/// `f` maps a parameter set to (loss, analytic gradients); it must be
/// deterministic — any internal randomness has to be seed-pinned per call.
/// The check evaluates `f` twice up front and refuses non-deterministic
/// closures.
pub fn grad_check<F>(params: &ParamSet, f: F, h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(f64, ParamSet)>,
{
    let (l0, grads) = f(params)?;
    let (l1, _) = f(params)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(NumError::NonDeterministic);
    }

    let mut per_param = Vec::new();
    let mut max_rel = 0.0f64;
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let n = params.require(name)?.len();
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.get(name).unwrap().shape().to_vec()));
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = work.get(name).unwrap().data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let (lp, _) = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let (lm, _) = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let e = rel_err(analytic.data()[i], numeric);
            if e > worst {
                worst = e;
            }
        }
        max_rel = max_rel.max(worst);
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport { per_param, max_rel_err: max_rel, tolerance })
}
