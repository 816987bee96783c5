use ndarray::{ArrayD, IxDyn};
use ulsa_core::{
    dps_sample, noise_init, DenoiserSpec, GaussianPrior, GuidanceConfig, KernelParams, Mask,
};

fn schedule() -> ulsa_core::DiffusionSchedule {
    ulsa_core::make_cosine_schedule(500).unwrap()
}

fn prior_16() -> DenoiserSpec {
    DenoiserSpec::gaussian(GaussianPrior::stationary(&[1, 4, 4], &KernelParams::default()).unwrap())
}

fn guidance(gamma: f64) -> GuidanceConfig {
    GuidanceConfig {
        gamma,
        clip_x0: None,
        ..GuidanceConfig::default()
    }
}

fn half_mask() -> Mask {
    Mask::new(ArrayD::from_shape_fn(IxDyn(&[1, 4, 4]), |i| f64::from(i[2] % 2 == 0))).unwrap()
}

fn observation() -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[1, 4, 4]), |i| 0.4 * ((i[1] + 2 * i[2]) as f64 * 0.7).sin())
}

fn masked_residual(x: &ArrayD<f64>, y: &ArrayD<f64>, a: &Mask) -> f64 {
    x.iter()
        .zip(y.iter())
        .zip(a.values().iter())
        .map(|((x, y), m)| (m * (x - y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn stronger_guidance_fits_the_data_better() {
    let s = schedule();
    let d = prior_16();
    let (y, a) = (observation(), half_mask());
    let mean_residual = |gamma: f64| -> f64 {
        (0..20u64)
            .map(|seed| {
                let init = noise_init(1, &[1, 4, 4], 500, &s, seed, 0).unwrap();
                let out = dps_sample(&d, &s, &y, &a, &init, 500, 50, &guidance(gamma)).unwrap();
                masked_residual(&out.particles()[0], &y, &a)
            })
            .sum::<f64>()
            / 20.0
    };
    let weak = mean_residual(0.1);
    let strong = mean_residual(10.0);
    assert!(strong <= weak, "gamma 10 residual {strong} > gamma 0.1 residual {weak}");
}

#[test]
fn unguided_samples_follow_the_prior_mean() {
    let s = schedule();
    let mu = 0.3;
    let k = KernelParams::default();
    let prior = GaussianPrior::separable(ArrayD::from_elem(IxDyn(&[1, 1, 1]), mu), &k, &[]).unwrap();
    let d = DenoiserSpec::gaussian(prior);
    let y = ArrayD::zeros(IxDyn(&[1, 1, 1]));
    let a = Mask::zeros(&[1, 1, 1]);
    let init = noise_init(2000, &[1, 1, 1], 500, &s, 3, 0).unwrap();
    let out = dps_sample(&d, &s, &y, &a, &init, 500, 50, &guidance(0.0)).unwrap();
    let v: Vec<f64> = out.particles().iter().map(|p| p[[0, 0, 0]]).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd / n.sqrt();
    assert!((mean - mu).abs() <= 3.0 * se, "mean {mean} vs {mu}, se {se}");
    // the deterministic sampler maps N(0, 1) onto the prior, so the spread
    // should match the prior standard deviation too
    assert!((sd - k.variance.sqrt()).abs() < 0.05, "sd {sd}");
}

#[test]
fn full_mask_strong_guidance_reproduces_the_data() {
    let s = schedule();
    let d = prior_16();
    // smooth on the kernel length scales, like a draw from the prior
    let y = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4]), |i| 0.4 * (i[1] as f64 / 4.0 + i[2] as f64 / 3.0).sin());
    let a = Mask::ones(&[1, 4, 4]);
    for seed in 0..4 {
        let init = noise_init(8, &[1, 4, 4], 500, &s, seed, 0).unwrap();
        let out = dps_sample(&d, &s, &y, &a, &init, 500, 200, &guidance(100.0)).unwrap();
        for p in out.particles() {
            let worst = p.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst <= 1e-2, "seed {seed}: max residual {worst}");
        }
    }
}

#[test]
fn particles_do_not_depend_on_their_siblings() {
    let s = schedule();
    let d = prior_16();
    let (y, a) = (observation(), half_mask());
    let g = guidance(3.0);
    let four = dps_sample(&d, &s, &y, &a, &noise_init(4, &[1, 4, 4], 500, &s, 9, 2).unwrap(), 500, 25, &g).unwrap();
    let two = dps_sample(&d, &s, &y, &a, &noise_init(2, &[1, 4, 4], 500, &s, 9, 2).unwrap(), 500, 25, &g).unwrap();
    assert_eq!(&four.particles()[..2], two.particles());
    let again = dps_sample(&d, &s, &y, &a, &noise_init(4, &[1, 4, 4], 500, &s, 9, 2).unwrap(), 500, 25, &g).unwrap();
    assert_eq!(four.particles(), again.particles());
}
