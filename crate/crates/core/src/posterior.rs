//! Diffusion posterior sampling over `W`-frame stacks: the perception step.

use std::time::{Duration, Instant};

use ndarray::{ArrayD, Axis, IxDyn};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{denoise, DenoiserSpec, VjpMode};
use crate::error::{check_shape, Error, Result};
use crate::grid::Mask;
use crate::rng::substream;
use crate::schedule::{ddim_prior_step, tweedie_estimate, DiffusionSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Guidance weight, the inverse measurement noise variance.
    pub gamma: f64,
    /// Starting noise level for the first frame.
    pub steps_init: usize,
    /// Starting noise level for warm-started frames.
    pub steps_seq: usize,
    /// Reverse steps executed from `steps_seq`.
    pub num_seqdiff_steps: usize,
    /// Reverse steps executed from `steps_init` on the first frame.
    pub num_init_steps: usize,
    /// Warm-start later frames from the previous beliefs.
    pub seqdiff: bool,
    /// Limit the guidance weight to `1 / (2 |J|^2)` so one guidance step
    /// cannot overshoot the measurements. Without it the update diverges for
    /// weights above that bound.
    pub step_cap: bool,
    /// Clamp the Tweedie estimate to `[-c, c]` before re-noising. Frames live
    /// in `[-1, 1]`, so the default clamps to that range.
    pub clip_x0: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: 3.0,
            steps_init: 500,
            steps_seq: 450,
            num_seqdiff_steps: 25,
            num_init_steps: 25,
            seqdiff: true,
            step_cap: true,
            clip_x0: Some(1.0),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, s: &DiffusionSchedule) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma must be finite and >= 0"));
        }
        if !(0 < self.steps_seq && self.steps_seq <= self.steps_init && self.steps_init <= s.tau_max()) {
            return Err(Error::invalid(format!(
                "need 0 < tau_seqdiff ({}) <= tau_init ({}) <= tau_max ({})",
                self.steps_seq,
                self.steps_init,
                s.tau_max()
            )));
        }
        if self.num_seqdiff_steps == 0 || self.num_init_steps == 0 {
            return Err(Error::invalid("reverse step counts must be >= 1"));
        }
        if matches!(self.clip_x0, Some(c) if !(c > 0.0)) {
            return Err(Error::invalid("clip bound must be positive"));
        }
        Ok(())
    }
}

/// `N_p` stacks of shape `[W, frame...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleStack {
    particles: Vec<ArrayD<f64>>,
}

impl ParticleStack {
    pub fn new(particles: Vec<ArrayD<f64>>) -> Result<Self> {
        let first = particles.first().ok_or_else(|| Error::invalid("a particle stack needs at least one particle"))?;
        if first.ndim() < 2 {
            return Err(Error::invalid("particles must be [W, frame...] stacks"));
        }
        for p in &particles {
            check_shape(first.shape(), p.shape())?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("particle values must be finite"));
            }
        }
        Ok(Self { particles })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn stack_shape(&self) -> &[usize] {
        self.particles[0].shape()
    }

    pub fn window(&self) -> usize {
        self.stack_shape()[0]
    }

    pub fn particles(&self) -> &[ArrayD<f64>] {
        &self.particles
    }

    pub fn into_particles(self) -> Vec<ArrayD<f64>> {
        self.particles
    }

    /// Final slice of every stack: the belief particles for the newest frame.
    pub fn beliefs(&self) -> Vec<ArrayD<f64>> {
        let w = self.window();
        self.particles.iter().map(|p| p.index_axis(Axis(0), w - 1).to_owned()).collect()
    }
}

/// Drop the oldest slice of every stack and duplicate the newest one, the
/// initial guess for the next frame.
pub fn shift_window(p: &ParticleStack) -> ParticleStack {
    let w = p.window();
    let particles = p
        .particles
        .iter()
        .map(|x| {
            let mut out = x.clone();
            for k in 0..w {
                let src = (k + 1).min(w - 1);
                out.index_axis_mut(Axis(0), k).assign(&x.index_axis(Axis(0), src));
            }
            out
        })
        .collect();
    ParticleStack { particles }
}

fn gaussian_noise(seed: u64, frame: u64, particle: u64, shape: &[usize]) -> ArrayD<f64> {
    let mut rng = substream(seed, "particles", &[frame, particle]);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(&mut rng))
}

/// `alpha prev_i + sigma eps_i` with `eps_i` from the stream of
/// `(seed, frame, i)`.
pub fn seqdiff_init(prev: &ParticleStack, tau_init: usize, s: &DiffusionSchedule, seed: u64, frame: u64) -> Result<ParticleStack> {
    let (a, sg) = s.rates(tau_init)?;
    let particles = prev
        .particles
        .iter()
        .enumerate()
        .map(|(i, x)| {
            if sg == 0.0 {
                x.clone()
            } else {
                x * a + gaussian_noise(seed, frame, i as u64, x.shape()) * sg
            }
        })
        .collect();
    Ok(ParticleStack { particles })
}

/// Pure-noise start at level `tau_init` (zero signal).
pub fn noise_init(n_p: usize, stack_shape: &[usize], tau_init: usize, s: &DiffusionSchedule, seed: u64, frame: u64) -> Result<ParticleStack> {
    if n_p == 0 {
        return Err(Error::invalid("need at least one particle"));
    }
    let (_, sg) = s.rates(tau_init)?;
    let particles = (0..n_p).map(|i| gaussian_noise(seed, frame, i as u64, stack_shape) * sg).collect();
    Ok(ParticleStack { particles })
}

/// `r = 2 A (A X0 - Y)`.
fn residual(x0_hat: &ArrayD<f64>, y: &ArrayD<f64>, a: &ArrayD<f64>) -> ArrayD<f64> {
    let mut r = x0_hat * a - y;
    r *= a;
    r *= 2.0;
    r
}

/// Guidance direction `-gamma J^T r` with `r = 2 A (A X0 - Y)`. `J` is the
/// Jacobian of the Tweedie map at level `tau` in exact mode, the identity
/// otherwise.
pub fn likelihood_gradient(
    x0_hat: &ArrayD<f64>,
    y: &ArrayD<f64>,
    a: &Mask,
    d: &DenoiserSpec,
    tau: usize,
    s: &DiffusionSchedule,
    gamma: f64,
) -> Result<ArrayD<f64>> {
    check_shape(x0_hat.shape(), y.shape())?;
    check_shape(x0_hat.shape(), a.shape())?;
    let r = residual(x0_hat, y, a.values());
    let g = match d.vjp_mode() {
        VjpMode::Exact => d.tweedie_vjp(&r, tau, s)?,
        VjpMode::Identity => r,
    };
    Ok(g * -gamma)
}

/// Per-step diagnostics of one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub tau: usize,
    /// `|A (X0 - Y)|_2` before the guidance step.
    pub residual: f64,
    /// Guidance weight actually applied.
    pub gamma: f64,
}

/// Diagnostics of a sampling run, summed over particles.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DpsProfile {
    pub denoise: Duration,
    pub guidance: Duration,
    pub denoiser_evals: usize,
    /// `steps[i]` holds the records of particle `i`.
    pub steps: Vec<Vec<StepRecord>>,
}

fn check_finite(x: &ArrayD<f64>, tau: usize, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            step: tau,
            detail: format!("{what} is not finite"),
        })
    }
}

struct ParticleRun {
    x: ArrayD<f64>,
    denoise: Duration,
    guidance: Duration,
    steps: Vec<StepRecord>,
}

#[allow(clippy::too_many_arguments)]
fn run_particle(
    d: &DenoiserSpec,
    s: &DiffusionSchedule,
    y: &ArrayD<f64>,
    a: &Mask,
    mut x: ArrayD<f64>,
    taus: &[usize],
    g: &GuidanceConfig,
) -> Result<ParticleRun> {
    let mut run = ParticleRun {
        x: ArrayD::zeros(IxDyn(&[0])),
        denoise: Duration::ZERO,
        guidance: Duration::ZERO,
        steps: Vec::with_capacity(taus.len()),
    };
    for pair in taus.windows(2) {
        let (tau, next) = (pair[0], pair[1]);
        let t0 = Instant::now();
        let eps = denoise(d, &x, tau, s)?;
        check_finite(&eps, tau, "predicted noise")?;
        let mut x0 = tweedie_estimate(&x, &eps, tau, s)?;
        if let Some(c) = g.clip_x0 {
            x0.mapv_inplace(|v| v.clamp(-c, c));
        }
        let prior = ddim_prior_step(&x0, &eps, next, s)?;
        let t1 = Instant::now();
        let gamma = if g.step_cap {
            let j = d.jacobian_norm(tau, s)?;
            g.gamma.min(0.5 / (j * j).max(f64::MIN_POSITIVE))
        } else {
            g.gamma
        };
        let grad = likelihood_gradient(&x0, y, a, d, tau, s, gamma)?;
        let res = (&x0 - y) * a.values();
        run.steps.push(StepRecord {
            tau,
            residual: res.iter().map(|v| v * v).sum::<f64>().sqrt(),
            gamma,
        });
        x = prior + grad;
        check_finite(&x, tau, "particle state")?;
        run.denoise += t1 - t0;
        run.guidance += t1.elapsed();
    }
    run.x = x;
    Ok(run)
}

/// Run the reverse process from `tau_init` to 0 in `n_steps` uniformly
/// spaced steps, guiding every particle towards the measurements `y` on
/// mask `a`. Particles run in parallel; results do not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn dps_sample_profiled(
    d: &DenoiserSpec,
    s: &DiffusionSchedule,
    y: &ArrayD<f64>,
    a: &Mask,
    init: &ParticleStack,
    tau_init: usize,
    n_steps: usize,
    g: &GuidanceConfig,
) -> Result<(ParticleStack, DpsProfile)> {
    check_shape(&d.stack_shape(), init.stack_shape())?;
    check_shape(init.stack_shape(), y.shape())?;
    check_shape(init.stack_shape(), a.shape())?;
    if !(g.gamma >= 0.0) {
        return Err(Error::invalid("gamma must be >= 0"));
    }
    let taus = s.reverse_taus(tau_init, n_steps)?;
    let runs: Vec<Result<ParticleRun>> = init
        .particles
        .par_iter()
        .map(|x| run_particle(d, s, y, a, x.clone(), &taus, g))
        .collect();
    let mut profile = DpsProfile::default();
    let mut particles = Vec::with_capacity(runs.len());
    for r in runs {
        let r = r?;
        profile.denoise += r.denoise;
        profile.guidance += r.guidance;
        profile.denoiser_evals += taus.len() - 1;
        profile.steps.push(r.steps);
        particles.push(r.x);
    }
    Ok((ParticleStack { particles }, profile))
}

#[allow(clippy::too_many_arguments)]
pub fn dps_sample(
    d: &DenoiserSpec,
    s: &DiffusionSchedule,
    y: &ArrayD<f64>,
    a: &Mask,
    init: &ParticleStack,
    tau_init: usize,
    n_steps: usize,
    g: &GuidanceConfig,
) -> Result<ParticleStack> {
    dps_sample_profiled(d, s, y, a, init, tau_init, n_steps, g).map(|(p, _)| p)
}

/// Per-step residuals as CSV: `particle,tau,residual,gamma`.
pub fn residuals_csv(profile: &DpsProfile) -> String {
    let mut out = String::from("particle,tau,residual,gamma\n");
    for (i, steps) in profile.steps.iter().enumerate() {
        for r in steps {
            out.push_str(&format!("{i},{},{},{}\n", r.tau, r.residual, r.gamma));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reconstruction {
    /// The newest slice of the first particle.
    #[default]
    First,
    /// The mean of the newest slices over particles.
    Mean,
}

pub fn reconstruct(p: &ParticleStack, mode: Reconstruction) -> ArrayD<f64> {
    let beliefs = p.beliefs();
    match mode {
        Reconstruction::First => beliefs.into_iter().next().expect("nonempty stack"),
        Reconstruction::Mean => {
            let n = beliefs.len() as f64;
            let mut acc = beliefs[0].clone();
            for b in &beliefs[1..] {
                acc += b;
            }
            acc / n
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GaussianPrior, KernelParams};
    use crate::schedule::make_cosine_schedule;
    use ndarray::array;

    fn stack(vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[vals.len(), 1]), vals.to_vec()).unwrap()
    }

    #[test]
    fn shifting_duplicates_the_newest_slice() {
        let p = ParticleStack::new(vec![stack(&[1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(shift_window(&p).particles()[0], stack(&[2.0, 3.0, 3.0]));
        let one = ParticleStack::new(vec![stack(&[5.0])]).unwrap();
        assert_eq!(shift_window(&one), one);
    }

    #[test]
    fn seqdiff_boundaries() {
        let s = make_cosine_schedule(500).unwrap();
        let prev = ParticleStack::new(vec![stack(&[0.5, -0.5]); 3]).unwrap();
        assert_eq!(seqdiff_init(&prev, 0, &s, 1, 2).unwrap(), prev);
        let a = seqdiff_init(&prev, 300, &s, 1, 2).unwrap();
        assert_eq!(a, seqdiff_init(&prev, 300, &s, 1, 2).unwrap());
        assert_ne!(a.particles()[0], a.particles()[1]);
        assert!(seqdiff_init(&prev, 501, &s, 1, 2).is_err());

        let many = ParticleStack::new(vec![ArrayD::from_elem(IxDyn(&[2, 50]), 0.9); 40]).unwrap();
        let n = seqdiff_init(&many, 500, &s, 3, 0).unwrap();
        let vals: Vec<f64> = n.particles().iter().flat_map(|p| p.iter().copied()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.05, "{mean} {var}");
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let s = make_cosine_schedule(100).unwrap();
        let d = DenoiserSpec::gaussian(GaussianPrior::stationary(&[1, 2, 2], &KernelParams::default()).unwrap());
        let x0 = array![[[0.3, -0.2], [0.1, 0.7]]].into_dyn();
        let m = Mask::new(array![[[1.0, 0.0], [1.0, 0.0]]].into_dyn()).unwrap();
        let y = &x0 * m.values();
        let g = likelihood_gradient(&x0, &y, &m, &d, 50, &s, 3.0).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));

        let id = d.clone().with_vjp_mode(VjpMode::Identity).unwrap();
        let g = likelihood_gradient(&x0, &ArrayD::zeros(IxDyn(&[1, 2, 2])), &m, &id, 50, &s, 3.0).unwrap();
        assert_eq!(g[[0, 0, 1]], 0.0);
        assert_eq!(g[[0, 1, 1]], 0.0);
        assert!((g[[0, 0, 0]] + 3.0 * 2.0 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_modes() {
        let a = stack(&[0.0, 1.0]);
        let b = stack(&[0.0, 3.0]);
        let c = stack(&[0.0, 5.0]);
        let p = ParticleStack::new(vec![a.clone(), b.clone(), c.clone()]).unwrap();
        assert_eq!(reconstruct(&p, Reconstruction::First), array![1.0].into_dyn());
        let q = ParticleStack::new(vec![a.clone(), c, b.clone()]).unwrap();
        assert_eq!(reconstruct(&q, Reconstruction::First), array![1.0].into_dyn());
        let two = ParticleStack::new(vec![a, b]).unwrap();
        assert_eq!(reconstruct(&two, Reconstruction::Mean), array![2.0].into_dyn());
    }

    #[test]
    fn empty_mask_ignores_measurements() {
        let s = make_cosine_schedule(100).unwrap();
        let d = DenoiserSpec::gaussian(GaussianPrior::stationary(&[1, 3, 3], &KernelParams::default()).unwrap());
        let init = noise_init(2, &[1, 3, 3], 100, &s, 4, 0).unwrap();
        let m = Mask::zeros(&[1, 3, 3]);
        let g = GuidanceConfig::default();
        let y1 = ArrayD::zeros(IxDyn(&[1, 3, 3]));
        let y2 = ArrayD::from_elem(IxDyn(&[1, 3, 3]), 0.7);
        let a = dps_sample(&d, &s, &y1, &m, &init, 100, 10, &g).unwrap();
        let b = dps_sample(&d, &s, &y2, &m, &init, 100, 10, &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uncapped_large_weight_reports_the_failing_step() {
        let s = make_cosine_schedule(100).unwrap();
        let d = DenoiserSpec::gaussian(GaussianPrior::stationary(&[1, 3, 3], &KernelParams::default()).unwrap());
        let init = noise_init(1, &[1, 3, 3], 100, &s, 4, 0).unwrap();
        let g = GuidanceConfig {
            gamma: 1e6,
            step_cap: false,
            clip_x0: None,
            ..GuidanceConfig::default()
        };
        let y = ArrayD::from_elem(IxDyn(&[1, 3, 3]), 0.5);
        let err = dps_sample(&d, &s, &y, &Mask::ones(&[1, 3, 3]), &init, 100, 100, &g).unwrap_err();
        assert!(err.is_numeric(), "{err}");
    }

    #[test]
    fn config_validation() {
        let s = make_cosine_schedule(500).unwrap();
        assert!(GuidanceConfig::default().validate(&s).is_ok());
        let bad = GuidanceConfig {
            steps_seq: 600,
            ..GuidanceConfig::default()
        };
        assert!(bad.validate(&s).is_err());
        let bad = GuidanceConfig {
            num_seqdiff_steps: 0,
            ..GuidanceConfig::default()
        };
        assert!(bad.validate(&s).is_err());
    }
}
