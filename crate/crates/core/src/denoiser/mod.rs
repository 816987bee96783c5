//! Noise predictors: an exact Gaussian-prior oracle and a small learned
//! network, behind one dispatch type.

mod gaussian;
mod learned;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, IxDyn};

pub use gaussian::{se_kernel, GaussianPrior, KernelParams, DENSE_MAX_DIM, JITTER, MIN_EIGENVALUE};
pub use learned::{train, validate, CnnConfig, LearnedDenoiser, TrainConfig, TrainReport, QUALIFICATION_THRESHOLD, TAU_BUCKETS};

use crate::container::Container;
use crate::error::{check_shape, Error, Result};
use crate::schedule::DiffusionSchedule;

/// How the guidance step obtains the Jacobian of the Tweedie map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VjpMode {
    /// Exact vector-Jacobian product supplied by the denoiser.
    Exact,
    /// Jacobian approximated by the identity.
    Identity,
}

#[derive(Debug, Clone)]
enum Model {
    Gaussian(Arc<GaussianPrior>),
    Learned(Arc<LearnedDenoiser>),
}

/// A noise predictor `eps_theta(X_tau, tau)` over `W`-frame stacks.
#[derive(Debug, Clone)]
pub struct DenoiserSpec {
    model: Model,
    vjp_mode: VjpMode,
}

impl DenoiserSpec {
    /// Gaussian oracle with the exact Jacobian.
    pub fn gaussian(prior: GaussianPrior) -> Self {
        Self {
            model: Model::Gaussian(Arc::new(prior)),
            vjp_mode: VjpMode::Exact,
        }
    }

    pub fn learned(net: LearnedDenoiser) -> Self {
        Self {
            model: Model::Learned(Arc::new(net)),
            vjp_mode: VjpMode::Identity,
        }
    }

    /// Switch the Jacobian handling. Only the Gaussian model has an exact VJP.
    pub fn with_vjp_mode(mut self, mode: VjpMode) -> Result<Self> {
        if mode == VjpMode::Exact && !matches!(self.model, Model::Gaussian(_)) {
            return Err(Error::invalid("the learned denoiser has no exact vector-Jacobian product"));
        }
        self.vjp_mode = mode;
        Ok(self)
    }

    pub fn vjp_mode(&self) -> VjpMode {
        self.vjp_mode
    }

    pub fn kind(&self) -> &'static str {
        match self.model {
            Model::Gaussian(_) => "gaussian",
            Model::Learned(_) => "learned",
        }
    }

    /// Shape of the stacks this denoiser accepts, `[W, frame...]`.
    pub fn stack_shape(&self) -> Vec<usize> {
        match &self.model {
            Model::Gaussian(p) => p.shape().to_vec(),
            Model::Learned(n) => n.stack_shape(),
        }
    }

    pub fn window(&self) -> usize {
        self.stack_shape()[0]
    }

    pub fn gaussian_prior(&self) -> Option<&GaussianPrior> {
        match &self.model {
            Model::Gaussian(p) => Some(p),
            Model::Learned(_) => None,
        }
    }

    pub fn learned_model(&self) -> Option<&LearnedDenoiser> {
        match &self.model {
            Model::Learned(n) => Some(n),
            Model::Gaussian(_) => None,
        }
    }

    /// `J^T v` of the Tweedie map, available in exact mode only.
    pub fn tweedie_vjp(&self, v: &ArrayD<f64>, tau: usize, s: &DiffusionSchedule) -> Result<ArrayD<f64>> {
        match (&self.model, self.vjp_mode) {
            (Model::Gaussian(p), VjpMode::Exact) => {
                let (a, sg) = s.rates(tau)?;
                p.tweedie_vjp(v, a.max(1e-6), sg)
            }
            _ => Err(Error::invalid("exact vector-Jacobian product requested in identity mode")),
        }
    }

    /// Upper bound on the spectral norm of the Jacobian used by guidance:
    /// exact for the Gaussian model, 1 under the identity approximation.
    pub fn jacobian_norm(&self, tau: usize, s: &DiffusionSchedule) -> Result<f64> {
        match (&self.model, self.vjp_mode) {
            (Model::Gaussian(p), VjpMode::Exact) => {
                let (a, sg) = s.rates(tau)?;
                Ok(p.jacobian_norm(a.max(1e-6), sg))
            }
            _ => Ok(1.0),
        }
    }
}

/// Predict the noise in `x_tau`. Pure and safe to call concurrently.
pub fn denoise(d: &DenoiserSpec, x_tau: &ArrayD<f64>, tau: usize, s: &DiffusionSchedule) -> Result<ArrayD<f64>> {
    check_shape(&d.stack_shape(), x_tau.shape())?;
    match &d.model {
        Model::Gaussian(p) => {
            let (a, sg) = s.rates(tau)?;
            p.predict_noise(x_tau, a, sg)
        }
        Model::Learned(n) => n.predict_noise(x_tau, tau, s),
    }
}

/// Closed-form noise prediction for a Gaussian prior.
pub fn gaussian_denoise(x_tau: &ArrayD<f64>, tau: usize, prior: &GaussianPrior, s: &DiffusionSchedule) -> Result<ArrayD<f64>> {
    let (a, sg) = s.rates(tau)?;
    prior.predict_noise(x_tau, a, sg)
}

/// Train the network and enforce the qualification gate on held-out data.
pub fn train_epsilon_denoiser(cfg: &TrainConfig, s: &DiffusionSchedule) -> Result<(DenoiserSpec, TrainReport)> {
    let (net, report) = train(cfg, s)?;
    if !(report.val_loss < QUALIFICATION_THRESHOLD) {
        return Err(Error::Qualification {
            loss: report.val_loss,
            threshold: QUALIFICATION_THRESHOLD,
        });
    }
    Ok((DenoiserSpec::learned(net), report))
}

// Checkpoint layout: a directory holding `manifest.txt` and one ULSA float32
// container per tensor. The manifest is line oriented:
//
//   kind learned|gaussian
//   vjp exact|identity
//   <key> <values...>            model settings
//   param <name> <d0>x<d1>... f32   one line per tensor, stored as <name>.ulsa

const MANIFEST: &str = "manifest.txt";

fn dims_string(d: &[usize]) -> String {
    d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x")
}

fn write_tensor(dir: &Path, manifest: &mut String, name: &str, dims: &[usize], data: Vec<f32>) -> Result<()> {
    let c = Container::f32(dims.to_vec(), data)?;
    c.save(dir.join(format!("{name}.ulsa")))?;
    writeln!(manifest, "param {name} {} f32", dims_string(dims)).expect("string write");
    Ok(())
}

/// Write a checkpoint directory. Byte-identical for identical models.
pub fn save_checkpoint(d: &DenoiserSpec, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = String::new();
    writeln!(m, "kind {}", d.kind()).ok();
    writeln!(m, "vjp {}", if d.vjp_mode == VjpMode::Exact { "exact" } else { "identity" }).ok();
    match &d.model {
        Model::Learned(n) => {
            let c = n.config();
            let (ax, lat) = n.frame_dims();
            writeln!(m, "window {}\nchannels {}\ndepth {}\nframe {ax} {lat}\ntau_max {}", c.window, c.channels, c.depth, n.tau_max()).ok();
            for (l, conv) in n.layers.iter().enumerate() {
                let (co, k) = conv.w.dim();
                write_tensor(dir, &mut m, &format!("conv{l}.weight"), &[co, k / 9, 3, 3], conv.w.iter().copied().collect())?;
                write_tensor(dir, &mut m, &format!("conv{l}.bias"), &[co], conv.b.to_vec())?;
            }
            write_tensor(dir, &mut m, "tau_embedding", n.embedding.shape(), n.embedding.iter().copied().collect())?;
        }
        Model::Gaussian(p) => {
            writeln!(m, "shape {}", dims_string(p.shape())).ok();
            writeln!(m, "covariance {}", if p.is_dense() { "dense" } else { "kronecker" }).ok();
            // float32 storage loses precision; the prior is rebuilt from these
            write_tensor(dir, &mut m, "mean", p.shape(), p.mean().iter().map(|&v| v as f32).collect())?;
            for (i, f) in p.factors().iter().enumerate() {
                write_tensor(dir, &mut m, &format!("cov{i}"), f.shape(), f.iter().map(|&v| v as f32).collect())?;
            }
        }
    }
    std::fs::write(dir.join(MANIFEST), m).map_err(|e| Error::io(dir.join(MANIFEST), e))
}

struct Manifest {
    entries: Vec<(String, Vec<String>)>,
    params: Vec<(String, Vec<usize>)>,
}

impl Manifest {
    fn get(&self, key: &str) -> Result<&[String]> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks '{key}'")))
    }

    fn usize(&self, key: &str, i: usize) -> Result<usize> {
        self.get(key)?
            .get(i)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad value for '{key}'")))
    }
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|v| v.parse().map_err(|_| Error::Format(format!("bad dims '{s}'"))))
        .collect()
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    let mut params = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace().map(String::from);
        let key = parts.next().expect("nonempty line");
        let rest: Vec<String> = parts.collect();
        if key == "param" {
            match rest.as_slice() {
                [name, dims, dtype] if dtype == "f32" => params.push((name.clone(), parse_dims(dims)?)),
                _ => return Err(Error::Format(format!("bad param line '{line}'"))),
            }
        } else {
            entries.push((key, rest));
        }
    }
    Ok(Manifest { entries, params })
}

fn read_tensor(dir: &Path, m: &Manifest, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
    let dims = m
        .params
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, d)| d.clone())
        .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{name}'")))?;
    let c = Container::load(dir.join(format!("{name}.ulsa")))?;
    check_shape(&dims, c.dims())?;
    let data = c.as_f32().ok_or_else(|| Error::Format(format!("tensor '{name}' is not float32")))?;
    Ok((dims, data.to_vec()))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<DenoiserSpec> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let vjp = match m.get("vjp")?.first().map(String::as_str) {
        Some("exact") => VjpMode::Exact,
        Some("identity") => VjpMode::Identity,
        other => return Err(Error::Format(format!("unknown vjp mode {other:?}"))),
    };
    let spec = match m.get("kind")?.first().map(String::as_str) {
        Some("learned") => {
            let cfg = CnnConfig {
                window: m.usize("window", 0)?,
                channels: m.usize("channels", 0)?,
                depth: m.usize("depth", 0)?,
            };
            let mut layers = Vec::with_capacity(cfg.depth);
            for l in 0..cfg.depth {
                let (wd, w) = read_tensor(dir, &m, &format!("conv{l}.weight"))?;
                let (_, b) = read_tensor(dir, &m, &format!("conv{l}.bias"))?;
                let k = wd[1..].iter().product();
                layers.push(learned::Conv {
                    w: Array2::from_shape_vec((wd[0], k), w).map_err(|e| Error::Format(e.to_string()))?,
                    b: Array1::from(b),
                });
            }
            let (ed, e) = read_tensor(dir, &m, "tau_embedding")?;
            let emb = Array2::from_shape_vec((ed[0], ed.get(1).copied().unwrap_or(0)), e).map_err(|e| Error::Format(e.to_string()))?;
            let net = LearnedDenoiser::from_parts(cfg, m.usize("frame", 0)?, m.usize("frame", 1)?, m.usize("tau_max", 0)?, layers, emb)?;
            DenoiserSpec::learned(net)
        }
        Some("gaussian") => {
            let to64 = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
            let (md, mean) = read_tensor(dir, &m, "mean")?;
            let mean = ArrayD::from_shape_vec(IxDyn(&md), to64(mean)).map_err(|e| Error::Format(e.to_string()))?;
            let mut factors = Vec::new();
            for i in 0.. {
                if !m.params.iter().any(|(n, _)| n == &format!("cov{i}")) {
                    break;
                }
                let (d, v) = read_tensor(dir, &m, &format!("cov{i}"))?;
                let mut f = Array2::from_shape_vec((d[0], d[1]), to64(v)).map_err(|e| Error::Format(e.to_string()))?;
                // restore exact symmetry lost to rounding
                f = (&f + &f.t()) * 0.5;
                factors.push(f);
            }
            let prior = match m.get("covariance")?.first().map(String::as_str) {
                Some("dense") => GaussianPrior::dense(mean, factors.pop().ok_or_else(|| Error::Format("missing covariance".into()))?)?,
                Some("kronecker") => GaussianPrior::kronecker(mean, factors)?,
                other => return Err(Error::Format(format!("unknown covariance kind {other:?}"))),
            };
            DenoiserSpec::gaussian(prior)
        }
        other => return Err(Error::Format(format!("unknown denoiser kind {other:?}"))),
    };
    spec.with_vjp_mode(vjp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_cosine_schedule;

    #[test]
    fn dispatch_matches_the_closed_form() {
        let s = make_cosine_schedule(500).unwrap();
        let p = GaussianPrior::stationary(&[2, 4, 4], &KernelParams::default()).unwrap();
        let d = DenoiserSpec::gaussian(p.clone());
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 4, 4]), |i| (i[0] + 2 * i[1]) as f64 * 0.1 - i[2] as f64 * 0.2);
        let a = denoise(&d, &x, 100, &s).unwrap();
        assert_eq!(a, gaussian_denoise(&x, 100, &p, &s).unwrap());
        assert_eq!(a, denoise(&d, &x, 100, &s).unwrap());
        assert!(denoise(&d, &ArrayD::zeros(IxDyn(&[1, 4, 4])), 100, &s).is_err());
    }

    #[test]
    fn vjp_modes() {
        let s = make_cosine_schedule(10).unwrap();
        let p = GaussianPrior::stationary(&[1, 2, 2], &KernelParams::default()).unwrap();
        let d = DenoiserSpec::gaussian(p).with_vjp_mode(VjpMode::Identity).unwrap();
        assert_eq!(d.jacobian_norm(5, &s).unwrap(), 1.0);
        assert!(d.tweedie_vjp(&ArrayD::zeros(IxDyn(&[1, 2, 2])), 5, &s).is_err());
        let net = LearnedDenoiser::new(CnnConfig::default(), 4, 4, 10, 0).unwrap();
        assert!(DenoiserSpec::learned(net).with_vjp_mode(VjpMode::Exact).is_err());
    }

    #[test]
    fn checkpoints_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let s = make_cosine_schedule(20).unwrap();
        let net = LearnedDenoiser::new(CnnConfig::default(), 6, 5, 20, 3).unwrap();
        let d = DenoiserSpec::learned(net.clone());
        save_checkpoint(&d, tmp.path().join("net")).unwrap();
        let back = load_checkpoint(tmp.path().join("net")).unwrap();
        assert_eq!(back.learned_model().unwrap(), &net);
        let x = ArrayD::from_shape_fn(IxDyn(&[3, 6, 5]), |i| (i[1] as f64 - i[2] as f64) * 0.1);
        assert_eq!(denoise(&d, &x, 7, &s).unwrap(), denoise(&back, &x, 7, &s).unwrap());

        let p = GaussianPrior::stationary(&[2, 3, 4], &KernelParams::default()).unwrap();
        let g = DenoiserSpec::gaussian(p);
        save_checkpoint(&g, tmp.path().join("g")).unwrap();
        let gb = load_checkpoint(tmp.path().join("g")).unwrap();
        assert_eq!(gb.vjp_mode(), VjpMode::Exact);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| i[2] as f64 * 0.3 - 0.4);
        let (a, b) = (denoise(&g, &x, 9, &s).unwrap(), denoise(&gb, &x, 9, &s).unwrap());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-5);
        }
        let m = std::fs::read_to_string(tmp.path().join("g/manifest.txt")).unwrap();
        assert!(m.contains("param cov0 2x2 f32"));
        assert!(load_checkpoint(tmp.path().join("missing")).is_err());
    }
}
