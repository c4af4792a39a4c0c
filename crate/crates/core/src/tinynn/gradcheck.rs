//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, ParamGrads, Var};
use super::params::ParameterSet;
use crate::error::NnError;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Relative error denominators are clamped below at this magnitude, so
    /// entries whose gradients are both ~0 are compared absolutely.
    pub abs_floor: f64,
    /// Entries sampled per parameter tensor (all entries if smaller).
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            abs_floor: 1e-5,
            max_entries: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Runs the loss once with back-propagation and compares against central
/// differences for every parameter.
pub fn grad_check<F>(
    params: &mut ParameterSet,
    loss_fn: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&ParameterSet) -> Result<(Graph, Var), NnError>,
{
    let (g, loss) = loss_fn(params)?;
    let analytic = g.backward(loss, params)?;
    compare_gradients(params, loss_fn, &analytic, config)
}

/// Compares given gradients against central differences of `loss_fn`.
pub fn compare_gradients<F>(
    params: &mut ParameterSet,
    loss_fn: F,
    analytic: &ParamGrads,
    config: &GradCheckConfig,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&ParameterSet) -> Result<(Graph, Var), NnError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eval = |p: &ParameterSet| -> Result<f64, NnError> {
        let (g, l) = loss_fn(p)?;
        Ok(g.scalar(l))
    };
    let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.name.clone())).collect();
    let mut report = GradCheckReport {
        tolerance: config.tolerance,
        params: Vec::with_capacity(ids.len()),
    };
    for (id, name) in ids {
        let n = params.value(id).len();
        let entries: Vec<usize> = if n <= config.max_entries {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, config.max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let mut check = ParamCheck {
            name,
            checked: entries.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for k in entries {
            let orig = params.value(id).data()[k];
            params.value_mut(id).data_mut()[k] = orig + config.step;
            let plus = eval(params);
            params.value_mut(id).data_mut()[k] = orig - config.step;
            let minus = eval(params);
            params.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * config.step);
            let a = analytic[id.index()].data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(config.abs_floor);
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(rel);
        }
        report.params.push(check);
    }
    Ok(report)
}
