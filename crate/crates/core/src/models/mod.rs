//! Reference networks, parameter averaging and the gradient contract.

mod score;
mod separator;

pub use score::{ScoreArch, ScoreModel};
pub(crate) use score::{score_backward, score_forward};
pub use separator::{PitObjective, SeparatorArch, SeparatorModel};

use crate::error::{check_len, Error, Result};

/// A scalar training loss over a flat parameter vector.
pub trait Objective {
    fn loss(&self, params: &[f64]) -> Result<f64>;
    /// The loss and its exact gradient with respect to `params`.
    fn loss_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Exact gradient of `objective` at `params`.
pub fn grad<O: Objective + ?Sized>(objective: &O, params: &[f64]) -> Result<Vec<f64>> {
    let (loss, g) = objective.loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite ({loss})")));
    }
    check_len("gradient", g.len(), params.len())?;
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("gradient component {i} is not finite")));
    }
    Ok(g)
}

/// Exponential moving average of a parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: Vec<f64>,
    pub decay: f64,
}

pub const DEFAULT_EMA_DECAY: f64 = 0.999;

impl EmaState {
    pub fn new(params: &[f64], decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Domain(format!("EMA decay {decay} outside [0, 1)")));
        }
        Ok(Self {
            shadow: params.to_vec(),
            decay,
        })
    }

    /// `shadow ← decay · shadow + (1 − decay) · params`.
    pub fn update(&mut self, params: &[f64]) -> Result<()> {
        check_len("ema_update", self.shadow.len(), params.len())?;
        let d = self.decay;
        self.shadow
            .iter_mut()
            .zip(params)
            .for_each(|(s, p)| *s = d * *s + (1.0 - d) * p);
        Ok(())
    }

    /// A copy of `model` carrying the averaged parameters.
    pub fn swap_in(&self, model: &ScoreModel) -> Result<ScoreModel> {
        check_len("ema_swap_in", self.shadow.len(), model.params.len())?;
        Ok(ScoreModel {
            arch: model.arch,
            params: self.shadow.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;
    impl Objective for Quadratic {
        fn loss(&self, p: &[f64]) -> Result<f64> {
            Ok(p.iter().map(|v| v * v).sum::<f64>() / 2.0)
        }
        fn loss_and_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((self.loss(p)?, p.to_vec()))
        }
    }

    /// (w - 3)^2, stationary at w = 3.
    struct Bowl;
    impl Objective for Bowl {
        fn loss(&self, p: &[f64]) -> Result<f64> {
            Ok((p[0] - 3.0).powi(2))
        }
        fn loss_and_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((self.loss(p)?, vec![2.0 * (p[0] - 3.0)]))
        }
    }

    struct Broken;
    impl Objective for Broken {
        fn loss(&self, _: &[f64]) -> Result<f64> {
            Ok(f64::NAN)
        }
        fn loss_and_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((f64::NAN, p.to_vec()))
        }
    }

    #[test]
    fn probe_gradients() {
        let p = vec![0.5, -2.0, 3.25];
        assert_eq!(grad(&Quadratic, &p).unwrap(), p);
        assert_eq!(grad(&Bowl, &[3.0]).unwrap(), vec![0.0]);
        assert!(matches!(grad(&Broken, &p), Err(Error::Numeric(_))));
    }

    #[test]
    fn ema_rules() {
        let mut e = EmaState::new(&[1.0, 2.0], 0.0).unwrap();
        e.update(&[5.0, -1.0]).unwrap();
        assert_eq!(e.shadow, vec![5.0, -1.0]);

        let mut e = EmaState::new(&[0.0], 0.9).unwrap();
        for n in 1..=20 {
            e.update(&[1.0]).unwrap();
            let gap = (1.0 - e.shadow[0]).abs();
            assert!((gap - 0.9f64.powi(n)).abs() < 1e-12);
        }
        assert!(e.update(&[1.0, 2.0]).is_err());
        assert!(EmaState::new(&[0.0], 1.0).is_err());
        assert_eq!(DEFAULT_EMA_DECAY, 0.999);
    }

    #[test]
    fn swap_in_replaces_params() {
        let m = ScoreModel::init(ScoreArch::default(), 0);
        let mut e = EmaState::new(&m.params, 0.5).unwrap();
        let zeros = vec![0.0; m.params.len()];
        e.update(&zeros).unwrap();
        let swapped = e.swap_in(&m).unwrap();
        assert_eq!(swapped.params, e.shadow);
        assert_eq!(swapped.arch, m.arch);
    }
}
