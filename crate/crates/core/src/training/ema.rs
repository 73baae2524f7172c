use super::{Result, TrainError};
use crate::tensor::ParamStore;

/// Exponential moving average θ̄ of the trainable parameters, used for
/// evaluation: `θ̄ ← β·θ̄ + (1 − β)·θ` after every optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaShadow {
    pub beta: f64,
    pub shadow: ParamStore,
}

impl EmaShadow {
    /// Starts as a copy of the current trainable parameters. Frozen tensors
    /// never change and are not mirrored.
    pub fn new(params: &ParamStore, beta: f64) -> Self {
        Self {
            beta,
            shadow: params
                .trainable()
                .map(|(k, t)| (k.clone(), t.clone().with_requires_grad(false)))
                .collect(),
        }
    }

    /// `params` with every trainable tensor replaced by its average.
    pub fn evaluation_params(&self, params: &ParamStore) -> Result<ParamStore> {
        self.check(params)?;
        Ok(params
            .iter()
            .map(|(k, t)| {
                let v = match self.shadow.get(k) {
                    Ok(s) => s.clone().with_requires_grad(t.requires_grad),
                    Err(_) => t.clone(),
                };
                (k.clone(), v)
            })
            .collect())
    }

    fn check(&self, params: &ParamStore) -> Result<()> {
        let mut names = self.shadow.names();
        for (k, t) in params.trainable() {
            match (names.next(), self.shadow.get(k)) {
                (Some(n), Ok(s)) if n == k && s.shape() == t.shape() => {}
                _ => return Err(TrainError::Structure(format!("moving average does not mirror parameter `{k}`"))),
            }
        }
        if let Some(extra) = names.next() {
            return Err(TrainError::Structure(format!("moving average has unknown parameter `{extra}`")));
        }
        Ok(())
    }
}

pub fn ema_update(shadow: &mut EmaShadow, params: &ParamStore) -> Result<()> {
    shadow.check(params)?;
    let rate = 1.0 - shadow.beta;
    for (k, s) in shadow.shadow.iter_mut() {
        let theta = params.get(k)?.data();
        for (a, &t) in s.data_mut().iter_mut().zip(theta) {
            // Incremental form: with β near 1 the correction is small, so
            // rounding does not pile up over long runs the way
            // `β·a + (1 − β)·t` does.
            *a = if rate == 1.0 { t } else { *a + rate * (t - *a) };
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(v: f64) -> ParamStore {
        [
            ("a".to_string(), Tensor::vector(vec![v, v]).with_requires_grad(true)),
            ("frozen".to_string(), Tensor::vector(vec![9.0])),
        ]
        .into_iter()
        .collect()
    }

    #[test]
    fn substitution_and_endpoints() {
        let mut s = EmaShadow::new(&store(0.0), 0.9999);
        ema_update(&mut s, &store(1.0)).unwrap();
        assert!((s.shadow.get("a").unwrap().data()[0] - 0.0001).abs() < 1e-16);
        assert!(!s.shadow.contains("frozen"));

        let mut one = EmaShadow::new(&store(0.3), 1.0);
        ema_update(&mut one, &store(5.0)).unwrap();
        assert_eq!(one.shadow.get("a").unwrap().data(), &[0.3, 0.3]);
        let mut zero = EmaShadow::new(&store(0.3), 0.0);
        ema_update(&mut zero, &store(5.0)).unwrap();
        assert_eq!(zero.shadow.get("a").unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn evaluation_params_keep_frozen_tensors() {
        let mut s = EmaShadow::new(&store(0.0), 0.5);
        ema_update(&mut s, &store(2.0)).unwrap();
        let e = s.evaluation_params(&store(2.0)).unwrap();
        assert_eq!(e.get("a").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(e.get("frozen").unwrap().data(), &[9.0]);
    }

    #[test]
    fn key_mismatch_is_structural() {
        let mut s = EmaShadow::new(&store(0.0), 0.5);
        let mut other = store(0.0);
        other.insert("b", Tensor::vector(vec![1.0]).with_requires_grad(true));
        assert!(matches!(ema_update(&mut s, &other), Err(TrainError::Structure(_))));
        let reshaped: ParamStore = [("a".to_string(), Tensor::vector(vec![1.0]).with_requires_grad(true))]
            .into_iter()
            .collect();
        assert!(ema_update(&mut s, &reshaped).is_err());
    }
}
