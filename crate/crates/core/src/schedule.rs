//! Cosine variance-preserving diffusion schedule and the elementary
//! forward/reverse steps.

use ndarray::ArrayD;

use crate::error::{check_shape, Error, Result};

/// Smallest signal rate used when dividing by `alpha`.
const ALPHA_FLOOR: f64 = 1e-6;
/// Largest signal rate allowed at the horizon.
const ALPHA_END_MAX: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    tau_max: usize,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn tau_max(&self) -> usize {
        self.tau_max
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// `(alpha, sigma)` at step `tau`.
    pub fn rates(&self, tau: usize) -> Result<(f64, f64)> {
        self.check(tau)?;
        Ok((self.alphas[tau], self.sigmas[tau]))
    }

    pub fn alpha(&self, tau: usize) -> f64 {
        self.alphas[tau]
    }

    pub fn sigma(&self, tau: usize) -> f64 {
        self.sigmas[tau]
    }

    pub(crate) fn check(&self, tau: usize) -> Result<()> {
        if tau > self.tau_max {
            return Err(Error::invalid(format!("tau {tau} outside [0, {}]", self.tau_max)));
        }
        Ok(())
    }

    /// `n` reverse steps spaced uniformly in tau from `tau_init` down to 0,
    /// returned as the `n + 1` visited levels. Repeated levels from rounding
    /// are dropped.
    pub fn reverse_taus(&self, tau_init: usize, n: usize) -> Result<Vec<usize>> {
        self.check(tau_init)?;
        if n == 0 {
            return Err(Error::invalid("need at least one reverse step"));
        }
        let mut taus: Vec<usize> = (0..=n)
            .map(|k| (tau_init as f64 * (1.0 - k as f64 / n as f64)).round() as usize)
            .collect();
        taus.dedup();
        Ok(taus)
    }
}

pub fn make_cosine_schedule(tau_max: usize) -> Result<DiffusionSchedule> {
    if tau_max < 1 {
        return Err(Error::invalid("tau_max must be >= 1"));
    }
    let mut alphas: Vec<f64> = (0..=tau_max)
        .map(|t| (t as f64 / tau_max as f64 * std::f64::consts::FRAC_PI_2).cos())
        .collect();
    alphas[0] = 1.0;
    // keep the horizon noise-dominated but never exactly signal-free, so the
    // Tweedie division and the re-noising step use the same alpha
    let last = &mut alphas[tau_max];
    *last = last.min(ALPHA_END_MAX);
    for a in alphas.iter_mut() {
        *a = a.max(ALPHA_FLOOR);
    }
    let sigmas = alphas.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
    Ok(DiffusionSchedule {
        tau_max,
        alphas,
        sigmas,
    })
}

pub fn forward_diffuse(x0: &ArrayD<f64>, eps: &ArrayD<f64>, tau: usize, s: &DiffusionSchedule) -> Result<ArrayD<f64>> {
    check_shape(x0.shape(), eps.shape())?;
    let (a, sg) = s.rates(tau)?;
    Ok(x0 * a + eps * sg)
}

pub fn tweedie_estimate(x_tau: &ArrayD<f64>, eps_hat: &ArrayD<f64>, tau: usize, s: &DiffusionSchedule) -> Result<ArrayD<f64>> {
    check_shape(x_tau.shape(), eps_hat.shape())?;
    let (a, sg) = s.rates(tau)?;
    let a = a.max(ALPHA_FLOOR);
    Ok((x_tau - &(eps_hat * sg)) / a)
}

pub fn ddim_prior_step(x0_hat: &ArrayD<f64>, eps_hat: &ArrayD<f64>, tau_next: usize, s: &DiffusionSchedule) -> Result<ArrayD<f64>> {
    forward_diffuse(x0_hat, eps_hat, tau_next, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, IxDyn};
    use proptest::prelude::*;

    fn custom(a: f64, sg: f64) -> DiffusionSchedule {
        DiffusionSchedule {
            tau_max: 1,
            alphas: vec![1.0, a],
            sigmas: vec![0.0, sg],
        }
    }

    #[test]
    fn boundaries_and_identity() {
        assert!(make_cosine_schedule(0).is_err());
        let s = make_cosine_schedule(500).unwrap();
        assert_eq!(s.rates(0).unwrap(), (1.0, 0.0));
        let (a, sg) = s.rates(500).unwrap();
        assert!(a <= 1e-3);
        assert!((sg - 1.0).abs() < 1e-6);
        for t in 0..=500 {
            let (a, sg) = s.rates(t).unwrap();
            assert!((a * a + sg * sg - 1.0).abs() < 1e-6);
            if t > 0 {
                assert!(a <= s.alpha(t - 1) && sg >= s.sigma(t - 1));
            }
        }
        assert!(s.rates(501).is_err());
    }

    #[test]
    fn arithmetic_examples() {
        let s = custom(0.8, 0.6);
        let x0 = array![1.0].into_dyn();
        let eps = array![-1.0].into_dyn();
        let xt = forward_diffuse(&x0, &eps, 1, &s).unwrap();
        assert!((xt[[0]] - 0.2).abs() < 1e-12);
        let back = tweedie_estimate(&array![0.2].into_dyn(), &eps, 1, &s).unwrap();
        assert!((back[[0]] - 1.0).abs() < 1e-12);
        let zero = ArrayD::zeros(IxDyn(&[1]));
        assert_eq!(forward_diffuse(&x0, &zero, 1, &s).unwrap()[[0]], 0.8);
        assert_eq!(forward_diffuse(&x0, &eps, 0, &s).unwrap(), x0);
        assert_eq!(tweedie_estimate(&x0, &eps, 0, &s).unwrap(), x0);
        assert_eq!(ddim_prior_step(&x0, &eps, 0, &s).unwrap(), x0);
        assert_eq!(ddim_prior_step(&x0, &zero, 1, &s).unwrap()[[0]], 0.8);
        assert!(forward_diffuse(&x0, &array![1.0, 2.0].into_dyn(), 1, &s).is_err());
    }

    #[test]
    fn reverse_levels() {
        let s = make_cosine_schedule(500).unwrap();
        let taus = s.reverse_taus(450, 25).unwrap();
        assert_eq!(taus.len(), 26);
        assert_eq!((taus[0], taus[25]), (450, 0));
        assert_eq!(taus[1], 432);
        assert_eq!(s.reverse_taus(3, 10).unwrap(), vec![3, 2, 1, 0]);
        assert!(s.reverse_taus(10, 0).is_err());
    }

    proptest! {
        #[test]
        fn tweedie_then_prior_step_round_trips(tau in 1usize..=500, v in prop::collection::vec(-3.0f64..3.0, 8)) {
            let s = make_cosine_schedule(500).unwrap();
            let x = ArrayD::from_shape_vec(IxDyn(&[4]), v[..4].to_vec()).unwrap();
            let e = ArrayD::from_shape_vec(IxDyn(&[4]), v[4..].to_vec()).unwrap();
            let x0 = tweedie_estimate(&x, &e, tau, &s).unwrap();
            let back = ddim_prior_step(&x0, &e, tau, &s).unwrap();
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn forward_is_affine(tau in 0usize..=500, v in prop::collection::vec(-3.0f64..3.0, 8), c in -2.0f64..2.0) {
            let s = make_cosine_schedule(500).unwrap();
            let a = ArrayD::from_shape_vec(IxDyn(&[2]), v[0..2].to_vec()).unwrap();
            let b = ArrayD::from_shape_vec(IxDyn(&[2]), v[2..4].to_vec()).unwrap();
            let ea = ArrayD::from_shape_vec(IxDyn(&[2]), v[4..6].to_vec()).unwrap();
            let eb = ArrayD::from_shape_vec(IxDyn(&[2]), v[6..8].to_vec()).unwrap();
            let lhs = forward_diffuse(&(&a + &(&b * c)), &(&ea + &(&eb * c)), tau, &s).unwrap();
            let rhs = forward_diffuse(&a, &ea, tau, &s).unwrap() + forward_diffuse(&b, &eb, tau, &s).unwrap() * c;
            for (x, y) in lhs.iter().zip(&rhs) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
