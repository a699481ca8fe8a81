//! Gradient checking against central finite differences.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

/// One evaluation of a scalar loss: its value plus analytic gradients keyed
/// by parameter name.
pub struct LossEval {
    pub loss: f64,
    pub grads: BTreeMap<String, Vec<f64>>,
}

/// Per-parameter worst relative error between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compares analytic gradients with central differences
/// `(f(theta+eps) - f(theta-eps)) / (2 eps)` at randomly sampled parameter
/// coordinates.
///
/// The relative error of one coordinate is `|g - fd| / max(|g| + |fd|, 1e-3)`;
/// the floor keeps finite-difference noise on near-zero gradients from
/// dominating the report. Runs in f64 only.
pub fn grad_check<F>(
    params: &ParamSet<f64>,
    eval: F,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet<f64>) -> Result<LossEval>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Invalid(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    if coords_per_param == 0 {
        return Err(Error::Invalid("grad_check needs coords_per_param >= 1".into()));
    }

    let base = eval(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut per_param = BTreeMap::new();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;

    let names: Vec<String> = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let numel = params.get(&name).unwrap().tensor.numel();
        let count = coords_per_param.min(numel);
        let coords = sample(&mut rng, numel, count);
        // a parameter the loss never touches has an implicit zero gradient;
        // the finite differences below still flag any real dependence
        let analytic = match base.grads.get(&name) {
            Some(g) if !g.is_empty() => g.clone(),
            _ => vec![0.0; numel],
        };
        if analytic.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {name} has {} values, parameter has {numel}",
                analytic.len()
            )));
        }
        let mut worst = 0.0f64;
        for idx in coords {
            let orig = params.get(&name).unwrap().tensor.data()[idx];

            work.get_mut(&name).unwrap().tensor.data_mut()[idx] = orig + eps;
            let plus = eval(&work)?.loss;
            work.get_mut(&name).unwrap().tensor.data_mut()[idx] = orig - eps;
            let minus = eval(&work)?.loss;
            work.get_mut(&name).unwrap().tensor.data_mut()[idx] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let g = analytic[idx];
            let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
            }
            checked += 1;
        }
        if worst > max_rel {
            max_rel = worst;
        }
        per_param.insert(name, worst);
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        coords_checked: checked,
    })
}
