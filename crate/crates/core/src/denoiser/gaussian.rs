//! Gaussian prior with a closed-form noise predictor.
//!
//! For `x0 ~ N(mu, Sigma)` and `x_tau = alpha x0 + sigma eps`, the MMSE noise
//! estimate is `sigma (alpha^2 Sigma + sigma^2 I)^-1 (x_tau - alpha mu)` and
//! the Jacobian of the Tweedie map is `alpha Sigma (alpha^2 Sigma + sigma^2 I)^-1`.
//! Both are diagonal in the eigenbasis of `Sigma`, which is either a dense
//! matrix (small problems) or a Kronecker product of one factor per axis.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayD, Axis, Dimension, IxDyn, Zip};

use crate::error::{check_shape, Error, Result};
use crate::grid::FrameSequence;

/// Added to every eigenvalue of the covariance.
pub const JITTER: f64 = 1e-6;
/// Smallest eigenvalue accepted after jitter.
pub const MIN_EIGENVALUE: f64 = 1e-8;
/// Largest dimension accepted by the dense representation.
pub const DENSE_MAX_DIM: usize = 256;

/// Squared-exponential length scales (pixels, frames) and marginal variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub lateral: f64,
    pub axial: f64,
    pub elevation: f64,
    pub temporal: f64,
    pub variance: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            lateral: 2.0,
            axial: 4.0,
            elevation: 2.0,
            temporal: 1.0,
            variance: 0.25,
        }
    }
}

/// `exp(-(i - j)^2 / (2 l^2))` on `0..n`.
pub fn se_kernel(n: usize, length: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| {
        let d = i as f64 - j as f64;
        if length > 0.0 {
            (-d * d / (2.0 * length * length)).exp()
        } else if i == j {
            1.0
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone)]
struct Factor {
    cov: Array2<f64>,
    q: Array2<f64>,
    qt: Array2<f64>,
}

#[derive(Debug, Clone)]
enum Basis {
    Kronecker(Vec<Factor>),
    Dense { cov: Array2<f64>, q: Array2<f64> },
}

#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: ArrayD<f64>,
    basis: Basis,
    /// Eigenvalues of `Sigma + JITTER I`, laid out like the mean.
    lambda: ArrayD<f64>,
}

fn eigen(cov: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let n = cov.nrows();
    if cov.ncols() != n || n == 0 {
        return Err(Error::invalid("covariance must be square and nonempty"));
    }
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (cov[[i, j]], cov[[j, i]]);
            if !a.is_finite() || (a - b).abs() > 1e-10 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::invalid("covariance is not symmetric"));
            }
        }
    }
    let m = DMatrix::from_fn(n, n, |i, j| cov[[i, j]]);
    let e = SymmetricEigen::new(m);
    let q = Array2::from_shape_fn((n, n), |(i, j)| e.eigenvectors[(i, j)]);
    Ok((q, e.eigenvalues.iter().copied().collect()))
}

/// `y[.., a, ..] = sum_i m[a, i] x[.., i, ..]` along `axis`.
fn mode_product(x: &ArrayD<f64>, axis: usize, m: &Array2<f64>) -> ArrayD<f64> {
    let n = x.ndim();
    let mut perm: Vec<usize> = (0..n).filter(|&a| a != axis).collect();
    perm.push(axis);
    let xp = x.view().permuted_axes(perm.clone()).as_standard_layout().into_owned();
    let mut shape = xp.shape().to_vec();
    let k = shape[n - 1];
    let x2 = xp.into_shape_with_order((x.len() / k, k)).expect("contiguous");
    let y2 = x2.dot(&m.t());
    shape[n - 1] = m.nrows();
    let y = y2.into_shape_with_order(IxDyn(&shape)).expect("contiguous");
    let mut inv = vec![0; n];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    y.permuted_axes(inv).as_standard_layout().into_owned()
}

impl GaussianPrior {
    /// Covariance `Sigma = K_0 (x) K_1 (x) ...`, one factor per axis of `mean`.
    pub fn kronecker(mean: ArrayD<f64>, factors: Vec<Array2<f64>>) -> Result<Self> {
        if factors.len() != mean.ndim() {
            return Err(Error::invalid(format!(
                "{} covariance factors for a {}-dimensional mean",
                factors.len(),
                mean.ndim()
            )));
        }
        let mut lambda = ArrayD::from_elem(mean.raw_dim(), 1.0);
        let mut built = Vec::with_capacity(factors.len());
        for (axis, cov) in factors.into_iter().enumerate() {
            check_shape(&[mean.shape()[axis]; 2], cov.shape())?;
            let (q, vals) = eigen(&cov)?;
            for (i, mut lane) in lambda.axis_iter_mut(Axis(axis)).enumerate() {
                lane *= vals[i];
            }
            built.push(Factor {
                qt: q.t().to_owned(),
                q,
                cov,
            });
        }
        Self::finish(mean, Basis::Kronecker(built), lambda)
    }

    /// Explicit covariance over the flattened mean, for `d <= 256`.
    pub fn dense(mean: ArrayD<f64>, cov: Array2<f64>) -> Result<Self> {
        let d = mean.len();
        if d > DENSE_MAX_DIM {
            return Err(Error::invalid(format!("dense covariance limited to d <= {DENSE_MAX_DIM}, got {d}")));
        }
        check_shape(&[d, d], cov.shape())?;
        let (q, vals) = eigen(&cov)?;
        let lambda = ArrayD::from_shape_vec(mean.raw_dim(), vals).expect("d eigenvalues");
        Self::finish(mean, Basis::Dense { cov, q }, lambda)
    }

    fn finish(mean: ArrayD<f64>, basis: Basis, mut lambda: ArrayD<f64>) -> Result<Self> {
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("prior mean has non-finite values"));
        }
        lambda.mapv_inplace(|l| l + JITTER);
        let min = lambda.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min >= MIN_EIGENVALUE) {
            return Err(Error::invalid(format!("covariance is not positive definite (min eigenvalue {min:e})")));
        }
        Ok(Self { mean, basis, lambda })
    }

    /// Separable squared-exponential prior on a stack of shape
    /// `[W, n_ax, (n_el,) n_lat]`. Optional per-pixel amplitude profiles
    /// turn a factor `K` into `diag(p) K diag(p)`, giving a variance that
    /// varies along that axis.
    pub fn separable(mean: ArrayD<f64>, k: &KernelParams, profiles: &[Option<Vec<f64>>]) -> Result<Self> {
        let shape = mean.shape().to_vec();
        if !(3..=4).contains(&shape.len()) {
            return Err(Error::invalid("stack prior needs shape [W, ax, lat] or [W, ax, el, lat]"));
        }
        if !(k.variance > 0.0) {
            return Err(Error::invalid("kernel variance must be positive"));
        }
        let lengths: Vec<f64> = if shape.len() == 3 {
            vec![k.temporal, k.axial, k.lateral]
        } else {
            vec![k.temporal, k.axial, k.elevation, k.lateral]
        };
        let mut factors = Vec::with_capacity(shape.len());
        for (axis, (&n, &l)) in shape.iter().zip(&lengths).enumerate() {
            let mut f = se_kernel(n, l);
            if axis == 0 {
                f *= k.variance;
            }
            if let Some(Some(p)) = profiles.get(axis) {
                check_shape(&[n], &[p.len()])?;
                f = Array2::from_shape_fn((n, n), |(i, j)| p[i] * f[[i, j]] * p[j]);
            }
            factors.push(f);
        }
        Self::kronecker(mean, factors)
    }

    /// Zero-mean stationary prior with the given kernel.
    pub fn stationary(stack_shape: &[usize], k: &KernelParams) -> Result<Self> {
        Self::separable(ArrayD::zeros(IxDyn(stack_shape)), k, &[])
    }

    /// Fit to all `w`-frame windows of `sequences`: per-pixel mean, and a
    /// separable standard-deviation profile over the spatial axes (rank-1
    /// alternating least squares on the per-pixel std map). The kernel's
    /// length scales are kept; its variance is replaced by the profiles.
    pub fn fit(sequences: &[FrameSequence], w: usize, k: &KernelParams) -> Result<Self> {
        let first = sequences.first().ok_or_else(|| Error::invalid("no training sequences"))?;
        let grid = *first.grid();
        if w == 0 {
            return Err(Error::invalid("window must be >= 1"));
        }
        let shape = grid.stack_shape(w);
        let mut sum = ArrayD::<f64>::zeros(IxDyn(&shape));
        let mut sq = sum.clone();
        let mut n = 0usize;
        for seq in sequences {
            if *seq.grid() != grid {
                return Err(Error::invalid("training sequences are on different grids"));
            }
            if seq.len() < w {
                return Err(Error::invalid(format!("sequence of {} frames is shorter than the window {w}", seq.len())));
            }
            for t in 0..=seq.len() - w {
                let stack = seq.frames().slice_axis(Axis(0), (t..t + w).into());
                Zip::from(&mut sum).and(&mut sq).and(&stack).for_each(|s, q, &v| {
                    *s += v;
                    *q += v * v;
                });
                n += 1;
            }
        }
        let mean = sum.mapv(|s| s / n as f64);
        let var = Zip::from(&sq).and(&mean).map_collect(|&q, &m| (q / n as f64 - m * m).max(0.0));
        // std map over spatial axes, averaged across the window
        let sd = var.mean_axis(Axis(0)).expect("w >= 1").mapv(f64::sqrt);
        let spatial = rank1_profiles(&sd);
        let mut profiles = vec![None];
        profiles.extend(spatial.into_iter().map(|p| Some(p.into_iter().map(|v| v.max(1e-3)).collect())));
        let k = KernelParams { variance: 1.0, ..*k };
        Self::separable(mean, &k, &profiles)
    }

    pub fn mean(&self) -> &ArrayD<f64> {
        &self.mean
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.basis, Basis::Dense { .. })
    }

    /// Covariance factors (Kronecker) or the single dense matrix, without jitter.
    pub fn factors(&self) -> Vec<&Array2<f64>> {
        match &self.basis {
            Basis::Kronecker(f) => f.iter().map(|f| &f.cov).collect(),
            Basis::Dense { cov, .. } => vec![cov],
        }
    }

    /// Eigenvalues of the jittered covariance.
    pub fn eigenvalues(&self) -> &ArrayD<f64> {
        &self.lambda
    }

    /// Full `d x d` covariance including jitter. Intended for small `d`.
    pub fn covariance_matrix(&self) -> Array2<f64> {
        let d = self.dim();
        let mut cov = match &self.basis {
            Basis::Dense { cov, .. } => cov.clone(),
            Basis::Kronecker(factors) => {
                let mut acc = Array2::from_elem((1, 1), 1.0);
                for f in factors {
                    let (a, b) = (acc.nrows(), f.cov.nrows());
                    acc = Array2::from_shape_fn((a * b, a * b), |(i, j)| acc[[i / b, j / b]] * f.cov[[i % b, j % b]]);
                }
                acc
            }
        };
        for i in 0..d {
            cov[[i, i]] += JITTER;
        }
        cov
    }

    fn to_eigen(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        match &self.basis {
            Basis::Kronecker(factors) => factors.iter().enumerate().fold(x.clone(), |acc, (axis, f)| mode_product(&acc, axis, &f.qt)),
            Basis::Dense { q, .. } => {
                let flat = x.as_standard_layout();
                let v = ndarray::ArrayView1::from(flat.as_slice().expect("standard layout"));
                let z = q.t().dot(&v);
                ArrayD::from_shape_vec(x.raw_dim(), z.to_vec()).expect("same length")
            }
        }
    }

    fn from_eigen(&self, z: &ArrayD<f64>) -> ArrayD<f64> {
        match &self.basis {
            Basis::Kronecker(factors) => factors.iter().enumerate().fold(z.clone(), |acc, (axis, f)| mode_product(&acc, axis, &f.q)),
            Basis::Dense { q, .. } => {
                let flat = z.as_standard_layout();
                let v = ndarray::ArrayView1::from(flat.as_slice().expect("standard layout"));
                let x = q.dot(&v);
                ArrayD::from_shape_vec(z.raw_dim(), x.to_vec()).expect("same length")
            }
        }
    }

    /// Apply `f(lambda)` in the eigenbasis: `Q diag(f(lambda)) Q^T v`.
    fn spectral(&self, v: &ArrayD<f64>, f: impl Fn(f64) -> f64) -> ArrayD<f64> {
        let mut z = self.to_eigen(v);
        Zip::from(&mut z).and(&self.lambda).for_each(|z, &l| *z *= f(l));
        self.from_eigen(&z)
    }

    /// Closed-form noise prediction at signal/noise rates `(alpha, sigma)`.
    pub fn predict_noise(&self, x_tau: &ArrayD<f64>, alpha: f64, sigma: f64) -> Result<ArrayD<f64>> {
        check_shape(self.shape(), x_tau.shape())?;
        let r = x_tau - &(&self.mean * alpha);
        Ok(self.spectral(&r, |l| sigma / (alpha * alpha * l + sigma * sigma)))
    }

    /// `J^T v` for the Tweedie map `x_tau -> E[x0 | x_tau]`. `J` is symmetric.
    pub fn tweedie_vjp(&self, v: &ArrayD<f64>, alpha: f64, sigma: f64) -> Result<ArrayD<f64>> {
        check_shape(self.shape(), v.shape())?;
        Ok(self.spectral(v, |l| alpha * l / (alpha * alpha * l + sigma * sigma)))
    }

    /// Spectral norm of the Tweedie Jacobian at `(alpha, sigma)`.
    pub fn jacobian_norm(&self, alpha: f64, sigma: f64) -> f64 {
        self.lambda
            .iter()
            .map(|&l| alpha * l / (alpha * alpha * l + sigma * sigma))
            .fold(0.0, f64::max)
    }
}

/// Rank-1 fit `t[i, j, ..] ~ p0[i] p1[j] ...` by alternating least squares.
fn rank1_profiles(t: &ArrayD<f64>) -> Vec<Vec<f64>> {
    let nd = t.ndim();
    let scale = t.mean().unwrap_or(0.0).max(1e-12).powf(1.0 / nd as f64);
    let mut p: Vec<Vec<f64>> = t.shape().iter().map(|&n| vec![scale; n]).collect();
    for _ in 0..50 {
        for axis in 0..nd {
            let mut num = vec![0.0; t.shape()[axis]];
            let mut den = vec![0.0; t.shape()[axis]];
            for (idx, &v) in t.indexed_iter() {
                let mut other = 1.0;
                for (a, &i) in idx.slice().iter().enumerate() {
                    if a != axis {
                        other *= p[a][i];
                    }
                }
                num[idx[axis]] += v * other;
                den[idx[axis]] += other * other;
            }
            p[axis] = num.iter().zip(&den).map(|(n, d)| if *d > 0.0 { n / d } else { 0.0 }).collect();
        }
    }
    p
}
