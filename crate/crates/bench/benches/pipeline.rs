use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{ArrayD, IxDyn};
use ulsa_core::denoiser::CnnConfig;
use ulsa_core::{
    action_entropies, denoise, dps_sample, entropy_map, generate_phantom, k_greedy_select, make_cosine_schedule,
    make_line_action_space, mask_from_actions, noise_init, ActionSet, DenoiserSpec, GaussianPrior, GuidanceConfig, Grid,
    KernelParams, LearnedDenoiser, Mask, PhantomParams,
};

fn beliefs(n: usize, shape: &[usize]) -> Vec<ArrayD<f64>> {
    (0..n)
        .map(|p| {
            let mut i = 0u64;
            ArrayD::from_shape_simple_fn(IxDyn(shape), || {
                i += 1;
                ((i * 7919 + p as u64 * 104_729) as f64).sin() * 0.5
            })
        })
        .collect()
}

fn gaussian_denoiser() -> DenoiserSpec {
    let train: Vec<_> = (0..4)
        .map(|i| {
            generate_phantom(&PhantomParams {
                seed: 1000 + i,
                frames: 16,
                ..PhantomParams::default()
            })
            .unwrap()
            .sequence
        })
        .collect();
    DenoiserSpec::gaussian(GaussianPrior::fit(&train, 3, &KernelParams::default()).unwrap())
}

fn bench_entropy(c: &mut Criterion) {
    let mut g = c.benchmark_group("entropy_map_32x32");
    for n in [2, 4, 8, 16] {
        let b = beliefs(n, &[32, 32]);
        g.bench_with_input(BenchmarkId::from_parameter(n), &b, |bench, b| {
            bench.iter(|| entropy_map(b, 0.04).unwrap())
        });
    }
    g.finish();
}

fn bench_k_greedy(c: &mut Criterion) {
    let mut g = c.benchmark_group("k_greedy");
    for (l, k) in [(32, 4), (112, 7), (256, 16)] {
        let h: Vec<f64> = (0..l).map(|i| ((i * 37 % 101) as f64).sqrt()).collect();
        let w = ulsa_core::auto_rbf_width(l, k);
        g.bench_with_input(BenchmarkId::new(format!("L{l}"), k), &h, |bench, h| {
            bench.iter(|| k_greedy_select(h, k, w).unwrap())
        });
    }
    g.finish();
}

fn bench_line_entropies(c: &mut Criterion) {
    let grid = Grid::polar(32, 32).unwrap();
    let space = make_line_action_space(&grid);
    let h = entropy_map(&beliefs(4, &grid.frame_shape()), 0.04).unwrap();
    c.bench_function("action_entropies_32x32", |b| b.iter(|| action_entropies(&h, &space).unwrap()));
}

fn bench_denoisers(c: &mut Criterion) {
    let s = make_cosine_schedule(500).unwrap();
    let x = beliefs(1, &[3, 32, 32]).remove(0);
    let gauss = gaussian_denoiser();
    c.bench_function("gaussian_denoise_3x32x32", |b| b.iter(|| denoise(&gauss, &x, 250, &s).unwrap()));
    let net = DenoiserSpec::learned(LearnedDenoiser::new(CnnConfig::default(), 32, 32, 500, 0).unwrap());
    c.bench_function("learned_denoise_3x32x32", |b| b.iter(|| denoise(&net, &x, 250, &s).unwrap()));
}

fn bench_dps_frame(c: &mut Criterion) {
    let s = make_cosine_schedule(500).unwrap();
    let d = gaussian_denoiser();
    let grid = Grid::polar(32, 32).unwrap();
    let space = make_line_action_space(&grid);
    let frame_mask = mask_from_actions(&ActionSet::new(vec![0, 8, 16, 24]).unwrap(), &space).unwrap();
    let a = Mask::stack(&[frame_mask.clone(), frame_mask.clone(), frame_mask]).unwrap();
    let y = ArrayD::zeros(IxDyn(&[3, 32, 32]));
    let init = noise_init(4, &[3, 32, 32], 450, &s, 0, 0).unwrap();
    let g = GuidanceConfig::default();
    let mut group = c.benchmark_group("dps_frame");
    group.sample_size(10);
    group.bench_function("gaussian_4particles_25steps", |b| {
        b.iter(|| dps_sample(&d, &s, &y, &a, &init, 450, 25, &g).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_entropy, bench_k_greedy, bench_line_entropies, bench_denoisers, bench_dps_frame);
criterion_main!(benches);
