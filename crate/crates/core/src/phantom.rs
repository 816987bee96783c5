//! Synthetic pulsating-heart phantom: a speckled bright annulus
//! (myocardium) around a dark interior (ventricle) whose radii follow a
//! raised-cosine cycle.

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::grid::{pixel_polar, FrameSequence, Grid};
use crate::rng::substream;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_VENTRICLE: u8 = 1;
pub const LABEL_MYOCARDIUM: u8 = 2;

/// Texture resolution per axis in tissue coordinates (2D, 3D).
const TEXTURE_2D: usize = 128;
const TEXTURE_3D: usize = 48;
/// Lateral half-width and depth spanned by the texture.
const TEXTURE_HALF_WIDTH: f64 = 0.7;
const TEXTURE_DEPTH: f64 = 1.05;
/// Decay length of the tissue deformation outside the heart wall.
const DEFORM_DECAY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub grid: Grid,
    pub frames: usize,
    /// Frames per beat.
    pub period: usize,
    /// Ventricle radius at rest, as a fraction of the imaging depth.
    pub inner: f64,
    /// Outer myocardium radius at rest.
    pub outer: f64,
    /// Fractional contraction of the ventricle radius at peak.
    pub amplitude: f64,
    /// Depth of the heart centre.
    pub centre_depth: f64,
    /// Strength of the multiplicative speckle, 0 for none.
    pub speckle: f64,
    /// Low-pass width of the speckle field in texture pixels.
    pub speckle_width: f64,
    /// Mean envelope of background tissue relative to the myocardium.
    pub background_level: f64,
    /// Mean envelope of the blood pool relative to the myocardium.
    pub ventricle_level: f64,
    /// Log-compression dynamic range in dB, mapped onto `[-1, 1]`.
    pub dynamic_range_db: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            grid: Grid::polar(32, 32).expect("valid grid"),
            frames: 64,
            period: 16,
            inner: 0.18,
            outer: 0.30,
            amplitude: 0.2,
            centre_depth: 0.55,
            speckle: 1.0,
            speckle_width: 2.0,
            background_level: 0.15,
            ventricle_level: 0.01,
            dynamic_range_db: 40.0,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if !self.grid.is_polar() {
            return Err(Error::invalid("phantoms are generated on polar grids"));
        }
        if self.frames == 0 {
            return Err(Error::invalid("need at least one frame"));
        }
        if self.period < 2 {
            return Err(Error::invalid("period must be >= 2 frames"));
        }
        if !(0.0 < self.inner && self.inner < self.outer && self.outer < 1.0) {
            return Err(Error::invalid("radii must satisfy 0 < inner < outer < 1"));
        }
        if !(0.0..=0.5).contains(&self.amplitude) {
            return Err(Error::invalid("pulsation amplitude must lie in [0, 0.5]"));
        }
        if !(self.speckle >= 0.0 && self.speckle_width >= 0.0 && self.dynamic_range_db > 0.0) {
            return Err(Error::invalid("speckle and dynamic range must be non-negative"));
        }
        if !(self.background_level > 0.0 && self.ventricle_level > 0.0) {
            return Err(Error::invalid("region levels must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub sequence: FrameSequence,
    /// `[T, frame...]` region codes.
    pub labels: ArrayD<u8>,
}

impl Phantom {
    pub fn labels_container(&self) -> Container {
        Container::u8(self.labels.shape().to_vec(), self.labels.iter().copied().collect()).expect("shape matches")
    }

    /// Pixel values of frame `t` carrying label `code`.
    pub fn region_values(frame: &ArrayD<f64>, labels: &ArrayD<u8>, t: usize, code: u8) -> Vec<f64> {
        let l = labels.index_axis(Axis(0), t);
        frame.iter().zip(l.iter()).filter(|(_, &c)| c == code).map(|(&v, _)| v).collect()
    }
}

/// Truncated, normalized Gaussian taps of width `sigma`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (4.0 * sigma + 0.5) as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Mirror an index into `[0, n)` (edge sample repeated).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur along every axis with reflected borders.
fn blur(x: &ArrayD<f64>, sigma: f64) -> ArrayD<f64> {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let mut cur = x.clone();
    for axis in 0..x.ndim() {
        let n = x.shape()[axis];
        let mut out = cur.clone();
        for (src, mut dst) in cur.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
            for i in 0..n {
                dst[i] = taps.iter().enumerate().map(|(k, t)| t * src[reflect(i as isize + k as isize - r, n)]).sum();
            }
        }
        cur = out;
    }
    cur
}

/// Rayleigh-distributed envelope with unit mean: the magnitude of a
/// low-pass filtered complex Gaussian field.
fn speckle_field(shape: &[usize], width: f64, seed: u64) -> ArrayD<f64> {
    let mut rng = substream(seed, "phantom-speckle", &[]);
    let re = ArrayD::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(&mut rng));
    let im = ArrayD::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(&mut rng));
    let (re, im) = (blur(&re, width), blur(&im, width));
    let mut mag = ndarray::Zip::from(&re).and(&im).map_collect(|a: &f64, b: &f64| a.hypot(*b));
    let mean = mag.mean().unwrap_or(1.0);
    mag /= mean;
    mag
}

fn lerp_clamped(n: usize, f: f64) -> (usize, usize, f64) {
    let f = f.clamp(0.0, (n - 1) as f64);
    let i0 = f.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, f - i0 as f64)
}

fn sample2(t: &Array2<f64>, v: f64, u: f64) -> f64 {
    let (n0, n1) = t.dim();
    let (a0, a1, wa) = lerp_clamped(n0, v);
    let (b0, b1, wb) = lerp_clamped(n1, u);
    (1.0 - wa) * ((1.0 - wb) * t[[a0, b0]] + wb * t[[a0, b1]]) + wa * ((1.0 - wb) * t[[a1, b0]] + wb * t[[a1, b1]])
}

fn sample3(t: &Array3<f64>, v: f64, w: f64, u: f64) -> f64 {
    let (n0, n1, n2) = t.dim();
    let (a0, a1, wa) = lerp_clamped(n0, v);
    let (b0, b1, wb) = lerp_clamped(n1, w);
    let (c0, c1, wc) = lerp_clamped(n2, u);
    let mut acc = 0.0;
    for (a, fa) in [(a0, 1.0 - wa), (a1, wa)] {
        for (b, fb) in [(b0, 1.0 - wb), (b1, wb)] {
            for (c, fc) in [(c0, 1.0 - wc), (c1, wc)] {
                acc += fa * fb * fc * t[[a, b, c]];
            }
        }
    }
    acc
}

/// Pixel centres in Cartesian coordinates `(x lateral, y elevation, z depth)`.
fn pixel_positions(grid: &Grid) -> Vec<[f64; 3]> {
    let g = grid.geometry();
    let mut out = Vec::with_capacity(grid.frame_len());
    for ax in 0..grid.n_ax() {
        for el in 0..grid.n_el() {
            for lat in 0..grid.n_lat() {
                let (r, az) = pixel_polar(grid, ax as f64, lat as f64);
                let elev = if grid.is_3d() {
                    -g.opening_angle / 2.0 + (el as f64 + 0.5) / grid.n_el() as f64 * g.opening_angle
                } else {
                    0.0
                };
                out.push([r * az.sin() * elev.cos(), r * elev.sin(), r * az.cos() * elev.cos()]);
            }
        }
    }
    out
}

pub fn generate_phantom(p: &PhantomParams) -> Result<Phantom> {
    p.validate()?;
    let grid = p.grid;
    let three_d = grid.is_3d();
    let tex_n = if three_d { TEXTURE_3D } else { TEXTURE_2D };
    let tex_shape = if three_d { vec![tex_n; 3] } else { vec![tex_n; 2] };
    let tex = speckle_field(&tex_shape, p.speckle_width, p.seed);
    let tex2 = (!three_d).then(|| tex.clone().into_dimensionality::<ndarray::Ix2>().expect("2D"));
    let tex3 = three_d.then(|| tex.clone().into_dimensionality::<ndarray::Ix3>().expect("3D"));
    let pos = pixel_positions(&grid);
    let to_tex = |c: f64| (c + TEXTURE_HALF_WIDTH) / (2.0 * TEXTURE_HALF_WIDTH) * (tex_n - 1) as f64;

    let mut frames = Vec::with_capacity(p.frames * pos.len());
    let mut labels = Vec::with_capacity(p.frames * pos.len());
    for t in 0..p.frames {
        // phase from t mod period so frames repeat bit for bit
        let phase = 2.0 * std::f64::consts::PI * (t % p.period) as f64 / p.period as f64;
        let c = 0.5 * (1.0 - phase.cos());
        let r_in = p.inner * (1.0 - p.amplitude * c);
        let r_out = p.outer * (1.0 - 0.5 * p.amplitude * c);
        let stretch = p.outer / r_out;
        for q in &pos {
            let (dx, dy, dz) = (q[0], q[1], q[2] - p.centre_depth);
            let rho = (dx * dx + dy * dy + dz * dz).sqrt();
            // tissue coordinates: the heart scales radially, the
            // surroundings relax back to rest with distance
            let scale = if rho < r_out {
                stretch
            } else {
                1.0 + (stretch - 1.0) * (-(rho - r_out) / DEFORM_DECAY).exp()
            };
            let (tx, ty, tz) = (dx * scale, dy * scale, dz * scale + p.centre_depth);
            let v = tz / TEXTURE_DEPTH * (tex_n - 1) as f64;
            let s = match (&tex2, &tex3) {
                (Some(t2), _) => sample2(t2, v, to_tex(tx)),
                (_, Some(t3)) => sample3(t3, v, to_tex(ty), to_tex(tx)),
                _ => unreachable!(),
            };
            let (level, label) = if rho < r_in {
                (p.ventricle_level, LABEL_VENTRICLE)
            } else if rho < r_out {
                (1.0, LABEL_MYOCARDIUM)
            } else {
                (p.background_level, LABEL_BACKGROUND)
            };
            let env = (level * (1.0 + p.speckle * (s - 1.0))).max(1e-6);
            let db = 20.0 * env.log10();
            frames.push((db / p.dynamic_range_db * 2.0 + 1.0).clamp(-1.0, 1.0));
            labels.push(label);
        }
    }
    let shape = grid.stack_shape(p.frames);
    let frames = ArrayD::from_shape_vec(IxDyn(&shape), frames).expect("frame count");
    let labels = ArrayD::from_shape_vec(IxDyn(&shape), labels).expect("frame count");
    Ok(Phantom {
        sequence: FrameSequence::new(grid, frames)?.with_frame_period(1.0 / 50.0),
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn periodic_and_deterministic() {
        let p = PhantomParams {
            frames: 40,
            ..PhantomParams::default()
        };
        let a = generate_phantom(&p).unwrap();
        let f = a.sequence.frames();
        for t in 0..(40 - 16) {
            assert_eq!(f.index_axis(Axis(0), t), f.index_axis(Axis(0), t + 16));
        }
        assert_eq!(a, generate_phantom(&p).unwrap());
        let b = generate_phantom(&PhantomParams { seed: 1, ..p }).unwrap();
        assert_ne!(a.sequence, b.sequence);
    }

    #[test]
    fn regions_are_disjoint_and_contrasted() {
        let ph = generate_phantom(&PhantomParams::default()).unwrap();
        for t in 0..ph.sequence.len() {
            let f = ph.sequence.frame(t).to_owned();
            let v = Phantom::region_values(&f, &ph.labels, t, LABEL_VENTRICLE);
            let m = Phantom::region_values(&f, &ph.labels, t, LABEL_MYOCARDIUM);
            assert!(v.len() > 10 && m.len() > 10);
            assert!(mean(&m) - mean(&v) >= 0.5, "frame {t}");
        }
        // one label per pixel by construction; check the codes used
        assert!(ph.labels.iter().all(|&c| c <= LABEL_MYOCARDIUM));
    }

    #[test]
    fn motion_is_smooth() {
        let ph = generate_phantom(&PhantomParams::default()).unwrap();
        let f = ph.sequence.frames();
        let diff = |a: usize, b: usize| (&f.index_axis(Axis(0), a) - &f.index_axis(Axis(0), b)).mapv(f64::abs).mean().unwrap();
        let near: f64 = (0..32).map(|t| diff(t, t + 1)).sum::<f64>() / 32.0;
        let far: f64 = (0..32).map(|t| diff(t, t + 8)).sum::<f64>() / 32.0;
        assert!(near < far, "{near} vs {far}");
    }

    #[test]
    fn three_d_phantom() {
        let p = PhantomParams {
            grid: Grid::polar3d(16, 8, 12).unwrap(),
            frames: 3,
            ..PhantomParams::default()
        };
        let ph = generate_phantom(&p).unwrap();
        assert_eq!(ph.sequence.frames().shape(), &[3, 16, 8, 12]);
        assert!(ph.labels.iter().any(|&c| c == LABEL_VENTRICLE));
        assert!(ph.labels.iter().any(|&c| c == LABEL_MYOCARDIUM));
    }

    #[test]
    fn invalid_params() {
        let d = PhantomParams::default();
        assert!(generate_phantom(&PhantomParams { inner: 0.4, ..d }).is_err());
        assert!(generate_phantom(&PhantomParams { period: 1, ..d }).is_err());
        assert!(generate_phantom(&PhantomParams { amplitude: 0.6, ..d }).is_err());
        assert!(generate_phantom(&PhantomParams { grid: Grid::cartesian(8, 8).unwrap(), ..d }).is_err());
        assert!(generate_phantom(&PhantomParams { frames: 0, ..d }).is_err());
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let x = ArrayD::from_elem(IxDyn(&[9, 7]), 0.3);
        assert!(blur(&x, 2.0).iter().all(|v| (v - 0.3).abs() < 1e-12));
        let taps = gaussian_taps(1.5);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(-6, 5), 4);
    }
}
