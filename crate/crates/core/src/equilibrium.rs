//! Pixel-wise L1 losses and the proportional controller that balances the
//! discriminator's real and fake reconstruction terms.

use crate::error::{Error, Result};
use crate::model::{DiscriminatorSpec, ForwardCache};
use crate::ops::l1_mean;
use crate::params::ParameterSet;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_LAMBDA_K: f64 = 0.001;

/// Controller state: `k` weights the fake-pair term of the discriminator
/// objective and is driven towards `gamma * L_Dr = L_G`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumState {
    pub k: f64,
    pub gamma: f64,
    pub lambda_k: f64,
    pub step: u64,
}

impl EquilibriumState {
    /// Starts with `k = 0`, so the first discriminator update is pure
    /// reconstruction of real pairs.
    pub fn new(gamma: f64, lambda_k: f64) -> Result<Self> {
        let state = EquilibriumState {
            k: 0.0,
            gamma,
            lambda_k,
            step: 0,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Invalid(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        // lambda_k = 0 freezes the controller; negative gains are rejected.
        if !(self.lambda_k >= 0.0 && self.lambda_k.is_finite()) {
            return Err(Error::Invalid(format!(
                "lambda_k {} must be non-negative",
                self.lambda_k
            )));
        }
        if !(0.0..=1.0).contains(&self.k) {
            return Err(Error::Invalid(format!("k {} outside [0, 1]", self.k)));
        }
        Ok(())
    }
}

impl Default for EquilibriumState {
    fn default() -> Self {
        EquilibriumState::new(DEFAULT_GAMMA, DEFAULT_LAMBDA_K).expect("valid defaults")
    }
}

/// Per-step loss scalars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_g: f64,
    pub l_dr: f64,
    pub l_df: f64,
    pub l_d: f64,
    /// Controller value used for this step's discriminator objective.
    pub k: f64,
    pub m_c: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_g, self.l_dr, self.l_df, self.l_d, self.k, self.m_c]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L_G`: mean absolute error between generated and real HR images.
pub fn generator_loss<T: Real>(fake_hr: &Tensor<T>, real_hr: &Tensor<T>) -> Result<f64> {
    l1_mean(fake_hr, real_hr)
}

/// Reconstruction losses `(L_Dr, L_Df)` of real and fake pairs.
pub fn discriminator_losses<T: Real>(
    spec: &DiscriminatorSpec,
    d_params: &ParameterSet<T>,
    real_pair: &Tensor<T>,
    fake_pair: &Tensor<T>,
) -> Result<(f64, f64)> {
    let (l_dr, l_df, _, _) = discriminator_passes(spec, d_params, real_pair, fake_pair)?;
    Ok((l_dr, l_df))
}

/// Forward passes behind [`discriminator_losses`], with the caches kept for
/// the backward pass.
pub(crate) fn discriminator_passes<T: Real>(
    spec: &DiscriminatorSpec,
    d_params: &ParameterSet<T>,
    real_pair: &Tensor<T>,
    fake_pair: &Tensor<T>,
) -> Result<(f64, f64, ForwardCache<T>, ForwardCache<T>)> {
    real_pair.check_same_shape("discriminator_losses", fake_pair)?;
    let layout = spec.layout();
    let real = layout.forward(d_params, real_pair)?;
    let fake = layout.forward(d_params, fake_pair)?;
    let l_dr = l1_mean(real.output(), real_pair)?;
    let l_df = l1_mean(fake.output(), fake_pair)?;
    Ok((l_dr, l_df, real, fake))
}

/// `L_D = L_Dr - k * L_Df`, the quantity minimized over the discriminator.
/// With `k = 1` this is the unweighted difference.
pub fn discriminator_objective(l_dr: f64, l_df: f64, state: &EquilibriumState) -> f64 {
    l_dr - state.k * l_df
}

/// One controller update: `k' = clamp(k + lambda_k (gamma L_Dr - L_G), 0, 1)`.
pub fn equilibrium_step(state: &EquilibriumState, l_dr: f64, l_g: f64) -> Result<EquilibriumState> {
    if !l_dr.is_finite() || !l_g.is_finite() {
        return Err(Error::NonFinite(format!(
            "controller input (l_dr = {l_dr}, l_g = {l_g})"
        )));
    }
    let k = state.k + state.lambda_k * (state.gamma * l_dr - l_g);
    Ok(EquilibriumState {
        k: k.clamp(0.0, 1.0),
        step: state.step + 1,
        ..*state
    })
}

/// `M_c = L_Dr + |gamma L_Dr - L_G|`.
pub fn convergence_measure(l_dr: f64, l_g: f64, gamma: f64) -> f64 {
    l_dr + (gamma * l_dr - l_g).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state(k: f64) -> EquilibriumState {
        EquilibriumState {
            k,
            ..EquilibriumState::default()
        }
    }

    #[test]
    fn generator_loss_examples() {
        let real = Tensor::<f32>::from_fn(&[2, 3, 2, 2], |i| (i as f32 / 24.0) - 0.5);
        assert_eq!(generator_loss(&real, &real).unwrap(), 0.0);
        let fake = real.map(|v| v + 0.5);
        assert!((generator_loss(&fake, &real).unwrap() - 0.5).abs() < 1e-6);

        let swap = |t: &Tensor<f32>| {
            Tensor::stack(&[&t.sample(1).unwrap(), &t.sample(0).unwrap()]).unwrap()
        };
        let noisy = real.map(|v| v * 0.3 + 0.1);
        assert_eq!(
            generator_loss(&noisy, &real).unwrap(),
            generator_loss(&swap(&noisy), &swap(&real)).unwrap()
        );
    }

    #[test]
    fn objective_examples() {
        assert_eq!(discriminator_objective(0.4, 0.3, &state(0.0)), 0.4);
        assert!((discriminator_objective(0.4, 0.3, &state(0.5)) - 0.25).abs() < 1e-15);
        assert!(
            discriminator_objective(0.4, 0.3, &state(0.6))
                < discriminator_objective(0.4, 0.3, &state(0.5))
        );
    }

    #[test]
    fn controller_examples() {
        let s = state(0.3);
        assert_eq!(equilibrium_step(&s, 0.2, 0.1).unwrap().k, 0.3);

        let next = equilibrium_step(&state(0.0), 0.4, 0.1).unwrap();
        assert!((next.k - 0.0001).abs() < 1e-15);
        assert_eq!(next.step, 1);

        assert_eq!(equilibrium_step(&state(0.0), 0.1, 5.0).unwrap().k, 0.0);
        assert!(equilibrium_step(&s, f64::NAN, 0.1).is_err());
        assert!(equilibrium_step(&s, 0.1, f64::INFINITY).is_err());
    }

    #[test]
    fn convergence_examples() {
        assert_eq!(convergence_measure(0.2, 0.1, 0.5), 0.2);
        assert_eq!(convergence_measure(0.0, 0.3, 0.5), 0.3);
    }

    #[test]
    fn frozen_controller() {
        let mut s = EquilibriumState::new(0.5, 0.0).unwrap();
        for i in 0..100 {
            s = equilibrium_step(&s, i as f64 * 0.01, 0.3).unwrap();
        }
        assert_eq!(s.k, 0.0);
    }

    #[test]
    fn k_converges_when_ratio_reaches_gamma() {
        let mut s = state(0.2);
        let mut last = s.k;
        for t in 0..20_000 {
            let l_dr = 0.3;
            let l_g = 0.5 * l_dr * (1.0 + 0.5 * (-(t as f64) / 500.0).exp());
            s = equilibrium_step(&s, l_dr, l_g).unwrap();
            last = s.k;
        }
        let settled = equilibrium_step(&s, 0.3, 0.15).unwrap().k;
        assert_eq!(settled, last);
        assert!(last > 0.0 && last < 0.2);
    }

    #[test]
    fn k_decreases_to_zero_when_generator_loss_is_high() {
        let mut s = state(0.8);
        let mut prev = s.k;
        for _ in 0..10_000 {
            s = equilibrium_step(&s, 0.2, 0.3).unwrap();
            assert!(s.k <= prev);
            prev = s.k;
        }
        assert_eq!(s.k, 0.0);
    }

    #[test]
    fn invalid_states_rejected() {
        assert!(EquilibriumState::new(0.0, 0.001).is_err());
        assert!(EquilibriumState::new(1.5, 0.001).is_err());
        assert!(EquilibriumState::new(0.5, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn k_stays_in_unit_interval(
            k0 in 0.0f64..=1.0,
            losses in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..200),
            lambda in 0.0f64..1.0,
        ) {
            let mut s = EquilibriumState { k: k0, gamma: 0.5, lambda_k: lambda, step: 0 };
            for (l_dr, l_g) in losses {
                s = equilibrium_step(&s, l_dr, l_g).unwrap();
                prop_assert!((0.0..=1.0).contains(&s.k));
            }
        }

        #[test]
        fn balance_point_is_fixed(k in 0.0f64..=1.0, l_dr in 0.0f64..5.0, gamma in 0.01f64..=1.0) {
            let s = EquilibriumState { k, gamma, lambda_k: 0.001, step: 0 };
            let l_g = gamma * l_dr;
            prop_assert_eq!(equilibrium_step(&s, l_dr, l_g).unwrap().k, k);
        }

        #[test]
        fn measure_bounds_real_loss(l_dr in 0.0f64..5.0, l_g in 0.0f64..5.0, gamma in 0.01f64..=1.0) {
            prop_assert!(convergence_measure(l_dr, l_g, gamma) >= l_dr);
        }
    }
}
