use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Result, TensorError, Var};

/// Which coordinates of each trainable parameter get a numeric probe.
#[derive(Debug, Clone, PartialEq)]
pub enum Probes {
    All,
    /// Up to `per_param` distinct coordinates per parameter, chosen by `seed`.
    Random { per_param: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Worst relative error seen in each parameter.
    pub per_param: BTreeMap<String, f64>,
    pub probes: usize,
}

impl FdReport {
    pub fn failing(&self, tol: f64) -> Vec<&str> {
        self.per_param
            .iter()
            .filter(|(_, &e)| e.is_nan() || e >= tol)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// Compares the analytic gradient of the scalar built by `f` with central
/// differences `(f(p+ε) - f(p-ε)) / 2ε`, coordinate by coordinate.
///
/// The error of a coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, params: &ParamStore, eps: f64, probes: &Probes) -> Result<FdReport>
where
    F: for<'g> Fn(&mut Graph<'g>) -> Result<Var>,
{
    if !(eps > 1e-8 && eps < 1e-3) {
        return Err(TensorError::BadStep(eps));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(store);
        let root = f(&mut g)?;
        g.value(root)
            .item()
            .ok_or_else(|| TensorError::NonScalarRoot(g.value(root).shape().to_vec()))
    };

    let (first, analytic) = {
        let mut g = Graph::with_params(params);
        let root = f(&mut g)?;
        let v = g.value(root).item().unwrap_or(f64::NAN);
        (v, g.backward(root)?)
    };
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(match probes {
        Probes::Random { seed, .. } => *seed,
        Probes::All => 0,
    });
    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        per_param: BTreeMap::new(),
        probes: 0,
    };
    let names: Vec<String> = params.trainable().map(|(n, _)| n.clone()).collect();
    for name in names {
        let n = params.get(&name)?.numel();
        let coords: Vec<usize> = match probes {
            Probes::All => (0..n).collect(),
            Probes::Random { per_param, .. } => {
                let mut v = rand::seq::index::sample(&mut rng, n, (*per_param).min(n)).into_vec();
                v.sort_unstable();
                v
            }
        };
        let grad = analytic.get(&name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut worst: f64 = 0.0;
        for i in coords {
            let orig = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            let err = if err.is_nan() { f64::INFINITY } else { err };
            worst = worst.max(err);
            report.probes += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.insert(name, worst);
    }
    Ok(report)
}
