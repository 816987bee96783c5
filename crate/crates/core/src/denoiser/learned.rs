//! A small convolutional noise predictor trained with the standard
//! epsilon-prediction objective.
//!
//! Input channels are the `W` noisy frames plus a constant `sigma_tau^2`
//! plane. A learned per-bucket offset (32 buckets over tau) is added after
//! the first convolution. The output is a residual on top of `sigma_tau * x`,
//! which is already the right answer near the horizon.

use ndarray::{s, Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_shape, Error, Result};
use crate::grid::{FrameSequence, Grid};
use crate::rng::substream;
use crate::schedule::DiffusionSchedule;

pub const TAU_BUCKETS: usize = 32;
/// Validation epsilon-MSE a trained model must stay below.
pub const QUALIFICATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CnnConfig {
    pub window: usize,
    pub channels: usize,
    /// Number of 3x3 convolutions, at least 2.
    pub depth: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            window: 3,
            channels: 16,
            depth: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub dataset: Vec<FrameSequence>,
    /// Held-out sequences. When empty, every eighth training sequence is held out.
    pub validation: Vec<FrameSequence>,
    pub window: usize,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub channels: usize,
    pub depth: usize,
}

impl TrainConfig {
    pub fn new(dataset: Vec<FrameSequence>) -> Self {
        Self {
            dataset,
            validation: Vec::new(),
            window: 3,
            steps: 1500,
            batch: 16,
            learning_rate: 2e-3,
            seed: 0,
            channels: 16,
            depth: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-pixel epsilon-MSE on held-out stacks with tau uniform in `[1, tau_max]`.
    pub val_loss: f64,
    /// `(tau, loss)` at fixed fractions 0.1, 0.5 and 0.9 of the horizon.
    pub bucket_losses: Vec<(usize, f64)>,
    /// Same draws scored with a zero predictor.
    pub zero_baseline: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv {
    /// `[c_out, c_in * 9]`, tap index `dy * 3 + dx`.
    pub(crate) w: Array2<f32>,
    pub(crate) b: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedDenoiser {
    cfg: CnnConfig,
    n_ax: usize,
    n_lat: usize,
    tau_max: usize,
    pub(crate) layers: Vec<Conv>,
    /// `[TAU_BUCKETS, channels]`.
    pub(crate) embedding: Array2<f32>,
}

fn bucket(tau: usize, tau_max: usize) -> usize {
    (tau * TAU_BUCKETS / (tau_max + 1)).min(TAU_BUCKETS - 1)
}

/// Gather 3x3 neighbourhoods with zero padding. `h` is `[c, b * hw]`.
fn im2col(h: &Array2<f32>, ny: usize, nx: usize) -> Array2<f32> {
    let (c, n) = h.dim();
    let hw = ny * nx;
    let mut cols = Array2::<f32>::zeros((c * 9, n));
    for ci in 0..c {
        let src = h.row(ci);
        for k in 0..9 {
            let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
            let mut dst = cols.row_mut(ci * 9 + k);
            for b in 0..n / hw {
                for y in 0..ny {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= ny as isize {
                        continue;
                    }
                    for x in 0..nx {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= nx as isize {
                            continue;
                        }
                        dst[b * hw + y * nx + x] = src[b * hw + yy as usize * nx + xx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`.
fn col2im(cols: &Array2<f32>, c: usize, ny: usize, nx: usize) -> Array2<f32> {
    let n = cols.ncols();
    let hw = ny * nx;
    let mut h = Array2::<f32>::zeros((c, n));
    for ci in 0..c {
        let mut dst = h.row_mut(ci);
        for k in 0..9 {
            let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
            let src = cols.row(ci * 9 + k);
            for b in 0..n / hw {
                for y in 0..ny {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= ny as isize {
                        continue;
                    }
                    for x in 0..nx {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= nx as isize {
                            continue;
                        }
                        dst[b * hw + yy as usize * nx + xx as usize] += src[b * hw + y * nx + x];
                    }
                }
            }
        }
    }
    h
}

/// Intermediate values kept for backpropagation.
struct Trace {
    cols: Vec<Array2<f32>>,
    pre: Vec<Array2<f32>>,
}

impl LearnedDenoiser {
    pub fn new(cfg: CnnConfig, n_ax: usize, n_lat: usize, tau_max: usize, seed: u64) -> Result<Self> {
        if cfg.window == 0 || cfg.channels == 0 || cfg.depth < 2 {
            return Err(Error::invalid("network needs window >= 1, channels >= 1 and depth >= 2"));
        }
        let mut rng = substream(seed, "denoiser-init", &[]);
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let cin = if l == 0 { cfg.window + 1 } else { cfg.channels };
            let cout = if l + 1 == cfg.depth { cfg.window } else { cfg.channels };
            // He initialisation; the output layer starts small so training
            // begins near the sigma * x skip path
            let gain = if l + 1 == cfg.depth { 0.1 } else { 1.0 };
            let std = gain * (2.0 / (cin * 9) as f64).sqrt();
            let w = Array2::from_shape_fn((cout, cin * 9), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * std) as f32
            });
            layers.push(Conv {
                w,
                b: Array1::zeros(cout),
            });
        }
        Ok(Self {
            cfg,
            n_ax,
            n_lat,
            tau_max,
            layers,
            embedding: Array2::zeros((TAU_BUCKETS, cfg.channels)),
        })
    }

    pub(crate) fn from_parts(cfg: CnnConfig, n_ax: usize, n_lat: usize, tau_max: usize, layers: Vec<Conv>, embedding: Array2<f32>) -> Result<Self> {
        let fresh = Self::new(cfg, n_ax, n_lat, tau_max, 0)?;
        if layers.len() != fresh.layers.len() {
            return Err(Error::Format(format!("expected {} layers, found {}", fresh.layers.len(), layers.len())));
        }
        for (a, b) in layers.iter().zip(&fresh.layers) {
            check_shape(b.w.shape(), a.w.shape())?;
            check_shape(b.b.shape(), a.b.shape())?;
        }
        check_shape(fresh.embedding.shape(), embedding.shape())?;
        Ok(Self {
            layers,
            embedding,
            ..fresh
        })
    }

    pub fn config(&self) -> CnnConfig {
        self.cfg
    }

    pub fn tau_max(&self) -> usize {
        self.tau_max
    }

    pub fn frame_dims(&self) -> (usize, usize) {
        (self.n_ax, self.n_lat)
    }

    pub fn stack_shape(&self) -> Vec<usize> {
        vec![self.cfg.window, self.n_ax, self.n_lat]
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum::<usize>() + self.embedding.len()
    }

    /// Stacks `[b][W, ny, nx]` into `[W + 1, b * hw]` with the sigma^2 plane.
    fn pack(&self, xs: &[&[f32]], sigmas: &[f32]) -> Array2<f32> {
        let hw = self.n_ax * self.n_lat;
        let w = self.cfg.window;
        let mut h = Array2::<f32>::zeros((w + 1, xs.len() * hw));
        for (b, (x, &sg)) in xs.iter().zip(sigmas).enumerate() {
            for c in 0..w {
                h.slice_mut(s![c, b * hw..(b + 1) * hw]).assign(&ndarray::ArrayView1::from(&x[c * hw..(c + 1) * hw]));
            }
            h.slice_mut(s![w, b * hw..(b + 1) * hw]).fill(sg * sg);
        }
        h
    }

    /// Network output (before the skip term) for a packed batch.
    fn forward(&self, input: Array2<f32>, buckets: &[usize], mut trace: Option<&mut Trace>) -> Array2<f32> {
        let hw = self.n_ax * self.n_lat;
        let mut h = input;
        let last = self.layers.len() - 1;
        for (l, conv) in self.layers.iter().enumerate() {
            let cols = im2col(&h, self.n_ax, self.n_lat);
            let mut z = conv.w.dot(&cols);
            z += &conv.b.view().insert_axis(Axis(1));
            if l == 0 {
                for (b, &k) in buckets.iter().enumerate() {
                    let e = self.embedding.row(k);
                    let mut blk = z.slice_mut(s![.., b * hw..(b + 1) * hw]);
                    blk += &e.insert_axis(Axis(1));
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.cols.push(cols);
                t.pre.push(z.clone());
            }
            h = if l < last { z.mapv(|v| v.max(0.0)) } else { z };
        }
        h
    }

    /// Gradients of a loss with respect to every parameter, given the
    /// gradient `dout` with respect to the network output.
    fn backward(&self, trace: &Trace, dout: Array2<f32>, buckets: &[usize]) -> (Vec<Conv>, Array2<f32>) {
        let hw = self.n_ax * self.n_lat;
        let mut grads: Vec<Conv> = Vec::with_capacity(self.layers.len());
        let mut demb = Array2::<f32>::zeros(self.embedding.dim());
        let mut dz = dout;
        for l in (0..self.layers.len()).rev() {
            let dw = dz.dot(&trace.cols[l].t());
            let db = dz.sum_axis(Axis(1));
            if l == 0 {
                for (b, &k) in buckets.iter().enumerate() {
                    let s = dz.slice(s![.., b * hw..(b + 1) * hw]).sum_axis(Axis(1));
                    let mut row = demb.row_mut(k);
                    row += &s;
                }
            } else {
                let dcols = self.layers[l].w.t().dot(&dz);
                let dh = col2im(&dcols, self.cfg.channels, self.n_ax, self.n_lat);
                let pre = &trace.pre[l - 1];
                dz = ndarray::Zip::from(&dh).and(pre).map_collect(|&g, &z| if z > 0.0 { g } else { 0.0 });
            }
            grads.push(Conv { w: dw, b: db });
        }
        grads.reverse();
        (grads, demb)
    }

    /// Noise prediction for one `[W, n_ax, n_lat]` stack.
    pub fn predict_noise(&self, x_tau: &ArrayD<f64>, tau: usize, s: &DiffusionSchedule) -> Result<ArrayD<f64>> {
        check_shape(&self.stack_shape(), x_tau.shape())?;
        if s.tau_max() != self.tau_max {
            return Err(Error::invalid(format!(
                "denoiser trained for tau_max {} used with tau_max {}",
                self.tau_max,
                s.tau_max()
            )));
        }
        let (_, sigma) = s.rates(tau)?;
        let x: Vec<f32> = x_tau.iter().map(|&v| v as f32).collect();
        let out = self.forward(self.pack(&[&x], &[sigma as f32]), &[bucket(tau, self.tau_max)], None);
        let hw = self.n_ax * self.n_lat;
        let eps = x_tau.iter().enumerate().map(|(i, &v)| sigma * v + f64::from(out[[i / hw, i % hw]]));
        Ok(ArrayD::from_shape_vec(IxDyn(x_tau.shape()), eps.collect()).expect("same length"))
    }

    /// Per-pixel epsilon-MSE on a batch; also returns the gradient with
    /// respect to the network output when `trace` is set.
    fn batch_loss(&self, x: &[Vec<f32>], eps: &[Vec<f32>], taus: &[usize], s: &DiffusionSchedule, trace: Option<&mut Trace>) -> (f64, Array2<f32>) {
        let hw = self.n_ax * self.n_lat;
        let w = self.cfg.window;
        let sig: Vec<f32> = taus.iter().map(|&t| s.sigma(t) as f32).collect();
        let buckets: Vec<usize> = taus.iter().map(|&t| bucket(t, self.tau_max)).collect();
        let refs: Vec<&[f32]> = x.iter().map(|v| v.as_slice()).collect();
        let out = self.forward(self.pack(&refs, &sig), &buckets, trace);
        let count = (x.len() * w * hw) as f64;
        let mut grad = Array2::<f32>::zeros((w, x.len() * hw));
        let mut loss = 0.0;
        for b in 0..x.len() {
            for c in 0..w {
                for p in 0..hw {
                    let i = c * hw + p;
                    let r = sig[b] * x[b][i] + out[[c, b * hw + p]] - eps[b][i];
                    loss += f64::from(r) * f64::from(r);
                    grad[[c, b * hw + p]] = (2.0 * f64::from(r) / count) as f32;
                }
            }
        }
        (loss / count, grad)
    }
}

fn window_stacks(seqs: &[FrameSequence], w: usize) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    for seq in seqs {
        for t in 0..=seq.len() - w {
            let stack = seq.frames().slice_axis(Axis(0), (t..t + w).into());
            out.push(stack.iter().map(|&v| v as f32).collect());
        }
    }
    out
}

/// Noisy inputs `alpha x0 + sigma eps` for a batch.
fn corrupt(x0: &[f32], eps: &[f32], tau: usize, s: &DiffusionSchedule) -> Vec<f32> {
    let (a, sg) = (s.alpha(tau) as f32, s.sigma(tau) as f32);
    x0.iter().zip(eps).map(|(x, e)| a * x + sg * e).collect()
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect()
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for i in 0..p.len() {
                let gi = f64::from(g[i]);
                let m = B1 * f64::from(self.m[k][i]) + (1.0 - B1) * gi;
                let v = B2 * f64::from(self.v[k][i]) + (1.0 - B2) * gi * gi;
                self.m[k][i] = m as f32;
                self.v[k][i] = v as f32;
                p[i] -= (lr * (m / c1) / ((v / c2).sqrt() + 1e-8)) as f32;
            }
        }
    }
}

fn check_dataset(seqs: &[FrameSequence], grid: &Grid, w: usize) -> Result<()> {
    for seq in seqs {
        if seq.grid() != grid {
            return Err(Error::invalid("training sequences are on different grids"));
        }
        if seq.len() < w {
            return Err(Error::invalid(format!("sequence of {} frames is shorter than the window {w}", seq.len())));
        }
    }
    Ok(())
}

/// Train without the qualification gate.
pub fn train(cfg: &TrainConfig, s: &DiffusionSchedule) -> Result<(LearnedDenoiser, TrainReport)> {
    let first = cfg.dataset.first().ok_or_else(|| Error::invalid("empty training dataset"))?;
    let grid = *first.grid();
    if grid.is_3d() {
        return Err(Error::invalid("the convolutional denoiser supports 2D grids only"));
    }
    if cfg.window == 0 || cfg.steps == 0 || cfg.batch == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("window, steps and batch must be >= 1 and the learning rate positive"));
    }
    check_dataset(&cfg.dataset, &grid, cfg.window)?;
    check_dataset(&cfg.validation, &grid, cfg.window)?;
    let (train_set, val_set): (Vec<FrameSequence>, Vec<FrameSequence>) = if !cfg.validation.is_empty() {
        (cfg.dataset.clone(), cfg.validation.clone())
    } else if cfg.dataset.len() >= 2 {
        let (v, t): (Vec<_>, Vec<_>) = cfg.dataset.iter().enumerate().partition(|(i, _)| i % 8 == 7 || (cfg.dataset.len() < 8 && *i == cfg.dataset.len() - 1));
        (t.into_iter().map(|(_, s)| s.clone()).collect(), v.into_iter().map(|(_, s)| s.clone()).collect())
    } else {
        (cfg.dataset.clone(), cfg.dataset.clone())
    };

    let net_cfg = CnnConfig {
        window: cfg.window,
        channels: cfg.channels,
        depth: cfg.depth,
    };
    let mut net = LearnedDenoiser::new(net_cfg, grid.n_ax(), grid.n_lat(), s.tau_max(), cfg.seed)?;
    let stacks = window_stacks(&train_set, cfg.window);
    let n = stacks[0].len();
    let mut adam = Adam {
        m: Vec::new(),
        v: Vec::new(),
        t: 0,
    };
    for l in &net.layers {
        adam.m.push(vec![0.0; l.w.len()]);
        adam.m.push(vec![0.0; l.b.len()]);
    }
    adam.m.push(vec![0.0; net.embedding.len()]);
    adam.v = adam.m.clone();

    let mut rng = substream(cfg.seed, "train", &[]);
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let mut xs = Vec::with_capacity(cfg.batch);
        let mut es = Vec::with_capacity(cfg.batch);
        let mut taus = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let x0 = &stacks[rng.random_range(0..stacks.len())];
            let tau = rng.random_range(1..=s.tau_max());
            let e = normal_vec(&mut rng, n);
            xs.push(corrupt(x0, &e, tau, s));
            es.push(e);
            taus.push(tau);
        }
        let mut trace = Trace {
            cols: Vec::new(),
            pre: Vec::new(),
        };
        let (loss, dout) = net.batch_loss(&xs, &es, &taus, s, Some(&mut trace));
        if !loss.is_finite() {
            return Err(Error::Numeric {
                step: 0,
                detail: "training loss diverged".into(),
            });
        }
        final_loss = loss;
        let (grads, demb) = net.backward(&trace, dout, &taus.iter().map(|&t| bucket(t, net.tau_max)).collect::<Vec<_>>());
        let mut params: Vec<&mut [f32]> = Vec::new();
        for l in net.layers.iter_mut() {
            params.push(l.w.as_slice_mut().expect("contiguous"));
            params.push(l.b.as_slice_mut().expect("contiguous"));
        }
        params.push(net.embedding.as_slice_mut().expect("contiguous"));
        let mut gs: Vec<&[f32]> = Vec::new();
        for g in &grads {
            gs.push(g.w.as_slice().expect("contiguous"));
            gs.push(g.b.as_slice().expect("contiguous"));
        }
        gs.push(demb.as_slice().expect("contiguous"));
        adam.step(&mut params, &gs, cfg.learning_rate);
    }

    let report = validate(&net, &val_set, s, cfg.seed, final_loss)?;
    Ok((net, report))
}

/// Score a trained network on held-out sequences with seeded draws.
pub fn validate(net: &LearnedDenoiser, val: &[FrameSequence], s: &DiffusionSchedule, seed: u64, final_train_loss: f64) -> Result<TrainReport> {
    let w = net.cfg.window;
    let stacks = window_stacks(val, w);
    if stacks.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let mut rng = substream(seed, "validation", &[]);
    let draws: Vec<(usize, Vec<f32>)> = stacks
        .iter()
        .map(|x0| (rng.random_range(1..=s.tau_max()), normal_vec(&mut rng, x0.len())))
        .collect();
    let score = |fixed: Option<usize>| -> f64 {
        let mut total = 0.0;
        for (chunk_x, chunk_d) in stacks.chunks(32).zip(draws.chunks(32)) {
            let taus: Vec<usize> = chunk_d.iter().map(|(t, _)| fixed.unwrap_or(*t)).collect();
            let xs: Vec<Vec<f32>> = chunk_x.iter().zip(chunk_d).zip(&taus).map(|((x0, (_, e)), &t)| corrupt(x0, e, t, s)).collect();
            let es: Vec<Vec<f32>> = chunk_d.iter().map(|(_, e)| e.clone()).collect();
            total += net.batch_loss(&xs, &es, &taus, s, None).0 * xs.len() as f64;
        }
        total / stacks.len() as f64
    };
    let val_loss = score(None);
    let bucket_losses = [0.1, 0.5, 0.9]
        .iter()
        .map(|f| {
            let t = ((f * s.tau_max() as f64).round() as usize).max(1);
            (t, score(Some(t)))
        })
        .collect();
    let zero_baseline = draws.iter().map(|(_, e)| e.iter().map(|v| f64::from(v * v)).sum::<f64>() / e.len() as f64).sum::<f64>() / draws.len() as f64;
    Ok(TrainReport {
        val_loss,
        bucket_losses,
        zero_baseline,
        final_train_loss,
    })
}
