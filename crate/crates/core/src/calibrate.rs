//! Auxiliary-loss weight λ under a Gamma(α, β) prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    Fixed,
    #[default]
    Em,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaState {
    pub alpha_prior: f64,
    pub beta_prior: f64,
    pub lambda_current: f64,
    pub steps_since_update: usize,
    pub n_lambda: usize,
    pub mode: LambdaMode,
}

impl LambdaState {
    /// EM mode starts at the prior mean α/β.
    pub fn em(alpha_prior: f64, beta_prior: f64, n_lambda: usize) -> Result<Self> {
        if !(alpha_prior > 0.0 && alpha_prior.is_finite())
            || !(beta_prior > 0.0 && beta_prior.is_finite())
        {
            return Err(Error::Config(format!(
                "Gamma prior needs α, β > 0, got ({alpha_prior}, {beta_prior})"
            )));
        }
        if n_lambda == 0 {
            return Err(Error::Config("n_lambda must be at least 1".into()));
        }
        Ok(LambdaState {
            alpha_prior,
            beta_prior,
            lambda_current: alpha_prior / beta_prior,
            steps_since_update: 0,
            n_lambda,
            mode: LambdaMode::Em,
        })
    }

    pub fn fixed(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!(
                "fixed λ must be finite and ≥ 0, got {lambda}"
            )));
        }
        Ok(LambdaState {
            alpha_prior: 1.0,
            beta_prior: 1.0,
            lambda_current: lambda,
            steps_since_update: 0,
            n_lambda: 1,
            mode: LambdaMode::Fixed,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda_current
    }
}

/// Posterior mean `α / (β + L)`.
pub fn lambda_posterior_mean(alpha: f64, beta: f64, jigsaw_loss: f64) -> Result<f64> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Contract(format!(
            "Gamma prior needs α, β > 0, got ({alpha}, {beta})"
        )));
    }
    if !(jigsaw_loss >= 0.0 && jigsaw_loss.is_finite()) {
        return Err(Error::Contract(format!(
            "auxiliary loss must be finite and ≥ 0, got {jigsaw_loss}"
        )));
    }
    Ok(alpha / (beta + jigsaw_loss))
}

/// Called once per epoch with the epoch-mean auxiliary loss.
pub fn maybe_update(state: &LambdaState, epoch_mean_loss: f64) -> Result<LambdaState> {
    let mut next = state.clone();
    if state.mode == LambdaMode::Fixed {
        return Ok(next);
    }
    if state.steps_since_update + 1 >= state.n_lambda {
        next.lambda_current =
            lambda_posterior_mean(state.alpha_prior, state.beta_prior, epoch_mean_loss)?;
        next.steps_since_update = 0;
    } else {
        next.steps_since_update += 1;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_examples() {
        assert_eq!(lambda_posterior_mean(1.0, 1.0, 0.0).unwrap(), 1.0);
        assert_eq!(lambda_posterior_mean(2.0, 1.0, 3.0).unwrap(), 0.5);
        assert!(
            lambda_posterior_mean(1.0, 1.0, 0.0).unwrap()
                > lambda_posterior_mean(1.0, 1.0, 1.0).unwrap()
        );
        assert!(matches!(
            lambda_posterior_mean(1.0, 1.0, -0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fixed_mode_never_moves() {
        let mut s = LambdaState::fixed(0.1).unwrap();
        for loss in [0.0, 3.0, 100.0] {
            s = maybe_update(&s, loss).unwrap();
            assert_eq!(s.lambda(), 0.1);
        }
    }

    #[test]
    fn schedule() {
        let mut s = LambdaState::em(1.0, 1.0, 1).unwrap();
        assert_eq!(s.lambda(), 1.0);
        s = maybe_update(&s, 1.0).unwrap();
        assert_eq!(s.lambda(), 0.5);
        s = maybe_update(&s, 3.0).unwrap();
        assert_eq!(s.lambda(), 0.25);

        let mut s = LambdaState::em(1.0, 1.0, 3).unwrap();
        let mut changed = Vec::new();
        for call in 1..=9 {
            let before = s.lambda();
            s = maybe_update(&s, call as f64).unwrap();
            if s.lambda() != before {
                changed.push(call);
            }
        }
        assert_eq!(changed, vec![3, 6, 9]);
    }

    #[test]
    fn converges_to_prior_mean() {
        let mut s = LambdaState::em(2.0, 0.5, 1).unwrap();
        for epoch in 0..200 {
            let loss = 5.0 * 0.9f64.powi(epoch);
            s = maybe_update(&s, loss).unwrap();
            assert!(s.lambda() > 0.0 && s.lambda() <= 4.0);
        }
        assert!((s.lambda() - 4.0).abs() < 1e-6);
    }

    #[test]
    fn invalid_states() {
        assert!(LambdaState::em(0.0, 1.0, 1).is_err());
        assert!(LambdaState::em(1.0, 1.0, 0).is_err());
        assert!(LambdaState::fixed(-1.0).is_err());
    }
}
