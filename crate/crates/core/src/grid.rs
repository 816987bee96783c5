//! Grids, frame sequences, masks and the scan-line action space.
//!
//! A frame is stored row-major with shape `[n_ax, n_lat]` (2D) or
//! `[n_ax, n_el, n_lat]` (3D). Axis 1 of a frame is always the action axis:
//! lateral lines for 2D grids and elevation planes for 3D grids.

use std::collections::HashSet;
use std::f64::consts::PI;

use ndarray::{Array2, Array3, ArrayD, ArrayViewD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{check_shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Polar2d,
    Cartesian2d,
    Polar3d,
}

/// Sector geometry used for scan conversion. Depths are normalized so the
/// deepest sample sits at 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Full opening angle of the sector in radians.
    pub opening_angle: f64,
    pub depth_start: f64,
    pub depth_end: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            opening_angle: 75f64.to_radians(),
            depth_start: 0.05,
            depth_end: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    kind: GridKind,
    n_ax: usize,
    n_lat: usize,
    n_el: usize,
    geometry: Geometry,
}

impl Grid {
    pub fn new(kind: GridKind, n_ax: usize, n_lat: usize, n_el: usize, geometry: Geometry) -> Result<Self> {
        if n_ax == 0 || n_lat == 0 || n_el == 0 {
            return Err(Error::invalid("grid counts must be >= 1"));
        }
        match kind {
            GridKind::Polar3d if n_el < 2 => {
                return Err(Error::invalid("polar3d grids need at least 2 elevation planes"))
            }
            GridKind::Polar2d | GridKind::Cartesian2d if n_el != 1 => {
                return Err(Error::invalid("2D grids have exactly one elevation plane"))
            }
            _ => {}
        }
        let g = geometry;
        if !(g.opening_angle > 0.0 && g.opening_angle <= PI) {
            return Err(Error::invalid("opening angle must lie in (0, pi]"));
        }
        if !(g.depth_start >= 0.0 && g.depth_start < g.depth_end) {
            return Err(Error::invalid("depth range must satisfy 0 <= start < end"));
        }
        Ok(Self {
            kind,
            n_ax,
            n_lat,
            n_el,
            geometry,
        })
    }

    pub fn cartesian(n_ax: usize, n_lat: usize) -> Result<Self> {
        Self::new(GridKind::Cartesian2d, n_ax, n_lat, 1, Geometry::default())
    }

    pub fn polar(n_ax: usize, n_lat: usize) -> Result<Self> {
        Self::new(GridKind::Polar2d, n_ax, n_lat, 1, Geometry::default())
    }

    pub fn polar3d(n_ax: usize, n_el: usize, n_lat: usize) -> Result<Self> {
        Self::new(GridKind::Polar3d, n_ax, n_lat, n_el, Geometry::default())
    }

    pub fn with_geometry(self, geometry: Geometry) -> Result<Self> {
        Self::new(self.kind, self.n_ax, self.n_lat, self.n_el, geometry)
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }
    pub fn n_ax(&self) -> usize {
        self.n_ax
    }
    pub fn n_lat(&self) -> usize {
        self.n_lat
    }
    pub fn n_el(&self) -> usize {
        self.n_el
    }
    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn is_3d(&self) -> bool {
        self.kind == GridKind::Polar3d
    }

    pub fn is_polar(&self) -> bool {
        matches!(self.kind, GridKind::Polar2d | GridKind::Polar3d)
    }

    pub fn frame_shape(&self) -> Vec<usize> {
        if self.is_3d() {
            vec![self.n_ax, self.n_el, self.n_lat]
        } else {
            vec![self.n_ax, self.n_lat]
        }
    }

    pub fn frame_len(&self) -> usize {
        self.n_ax * self.n_lat * self.n_el
    }

    /// Number of selectable actions: lateral lines in 2D, elevation planes in 3D.
    pub fn num_lines(&self) -> usize {
        if self.is_3d() {
            self.n_el
        } else {
            self.n_lat
        }
    }

    /// Shape of a `w`-frame stack on this grid.
    pub fn stack_shape(&self, w: usize) -> Vec<usize> {
        let mut s = vec![w];
        s.extend(self.frame_shape());
        s
    }

    /// Infer a grid from the dims of a sequence container: `[T, ax, lat]` is
    /// read as polar2d, `[T, ax, el, lat]` as polar3d.
    pub fn from_sequence_dims(dims: &[usize]) -> Result<Self> {
        match dims {
            [_, ax, lat] => Self::polar(*ax, *lat),
            [_, ax, el, lat] => Self::polar3d(*ax, *el, *lat),
            _ => Err(Error::Format(format!(
                "sequence container needs 3 or 4 dims, found {dims:?}"
            ))),
        }
    }
}

/// `T` frames on a fixed grid with intensities in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    grid: Grid,
    frames: ArrayD<f64>,
    frame_period: Option<f64>,
}

impl FrameSequence {
    pub fn new(grid: Grid, frames: ArrayD<f64>) -> Result<Self> {
        let t = frames.shape().first().copied().unwrap_or(0);
        if t == 0 {
            return Err(Error::invalid("a frame sequence needs at least one frame"));
        }
        let mut expected = vec![t];
        expected.extend(grid.frame_shape());
        check_shape(&expected, frames.shape())?;
        if let Some(bad) = frames.iter().find(|v| !(v.is_finite() && (-1.0..=1.0).contains(*v))) {
            return Err(Error::invalid(format!("frame value {bad} outside [-1, 1]")));
        }
        Ok(Self {
            grid,
            frames: frames.as_standard_layout().into_owned(),
            frame_period: None,
        })
    }

    pub fn from_frames(grid: Grid, frames: &[ArrayD<f64>]) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("a frame sequence needs at least one frame"));
        }
        let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
        let stacked = ndarray::stack(Axis(0), &views)
            .map_err(|_| Error::invalid("frames have inconsistent shapes"))?;
        Self::new(grid, stacked)
    }

    pub fn with_frame_period(mut self, seconds: f64) -> Self {
        self.frame_period = Some(seconds);
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_period(&self) -> Option<f64> {
        self.frame_period
    }

    pub fn frame(&self, t: usize) -> ArrayViewD<'_, f64> {
        self.frames.index_axis(Axis(0), t)
    }

    pub fn frames(&self) -> &ArrayD<f64> {
        &self.frames
    }

    /// Truncate to the first `n` frames.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(format!("cannot truncate {} frames to {n}", self.len())));
        }
        let frames = self.frames.slice_axis(Axis(0), (0..n).into()).to_owned();
        Ok(Self {
            grid: self.grid,
            frames,
            frame_period: self.frame_period,
        })
    }

    /// Encode as a ULSA float32 container, mapping `[-1, 1]` onto `[0, 1]`.
    pub fn to_container(&self) -> Container {
        let data = self.frames.iter().map(|&v| ((v + 1.0) * 0.5) as f32).collect();
        Container::f32(self.frames.shape().to_vec(), data).expect("shape matches payload")
    }

    /// Decode a ULSA float32 container holding `[0, 1]` intensities.
    pub fn from_container(c: &Container, grid: Grid) -> Result<Self> {
        let data = c
            .as_f32()
            .ok_or_else(|| Error::Format("frame sequences must be float32".into()))?;
        let frames = ArrayD::from_shape_vec(IxDyn(c.dims()), data.iter().map(|&v| (2.0 * f64::from(v) - 1.0).clamp(-1.0, 1.0)).collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        Self::new(grid, frames)
    }
}

/// A binary measurement mask over one frame or a stack of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    values: ArrayD<f64>,
}

impl Mask {
    pub fn new(values: ArrayD<f64>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            values: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self {
            values: ArrayD::ones(IxDyn(shape)),
        }
    }

    pub fn values(&self) -> &ArrayD<f64> {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    /// Elementwise maximum (set union) of two masks.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        check_shape(self.shape(), other.shape())?;
        let mut v = self.values.clone();
        v.zip_mut_with(&other.values, |a, &b| *a = a.max(b));
        Ok(Mask { values: v })
    }

    /// Stack per-frame masks into one `[W, ...]` mask.
    pub fn stack(masks: &[Mask]) -> Result<Mask> {
        let views: Vec<_> = masks.iter().map(|m| m.values.view()).collect();
        let values = ndarray::stack(Axis(0), &views)
            .map_err(|_| Error::invalid("masks have inconsistent shapes"))?;
        Ok(Mask { values })
    }
}

/// A set of scan-line (or elevation-plane) indices, kept in selection order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSet {
    lines: Vec<usize>,
}

impl ActionSet {
    pub fn new(lines: Vec<usize>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(lines.len());
        for &l in &lines {
            if !seen.insert(l) {
                return Err(Error::invalid(format!("line {l} selected twice")));
            }
        }
        Ok(Self { lines })
    }

    pub fn empty() -> Self {
        Self { lines: Vec::new() }
    }

    pub fn all(num_lines: usize) -> Self {
        Self {
            lines: (0..num_lines).collect(),
        }
    }

    pub fn lines(&self) -> &[usize] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn contains(&self, line: usize) -> bool {
        self.lines.contains(&line)
    }

    pub fn sorted(&self) -> Vec<usize> {
        let mut v = self.lines.clone();
        v.sort_unstable();
        v
    }

    /// Semicolon-joined indices in selection order, as written to episode logs.
    pub fn to_log_string(&self) -> String {
        self.lines.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";")
    }
}

/// The discrete set of focused transmit locations and the pixels each one
/// reveals.
#[derive(Debug, Clone, PartialEq)]
pub struct LineActionSpace {
    grid: Grid,
    lines: Vec<Vec<usize>>,
}

impl LineActionSpace {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn num_lines(&self) -> usize {
        self.lines.len()
    }

    /// Flat pixel indices measured by line `l`.
    pub fn pixels(&self, l: usize) -> &[usize] {
        &self.lines[l]
    }

    pub fn lines(&self) -> &[Vec<usize>] {
        &self.lines
    }
}

/// One action per lateral column (2D) or per elevation plane (3D).
pub fn make_line_action_space(grid: &Grid) -> LineActionSpace {
    let (n_ax, n_lat, n_el) = (grid.n_ax, grid.n_lat, grid.n_el);
    let lines = if grid.is_3d() {
        (0..n_el)
            .map(|el| {
                (0..n_ax)
                    .flat_map(|ax| (0..n_lat).map(move |lat| (ax * n_el + el) * n_lat + lat))
                    .collect()
            })
            .collect()
    } else {
        (0..n_lat)
            .map(|lat| (0..n_ax).map(|ax| ax * n_lat + lat).collect())
            .collect()
    };
    LineActionSpace { grid: *grid, lines }
}

pub fn mask_from_actions(actions: &ActionSet, space: &LineActionSpace) -> Result<Mask> {
    let mut flat = vec![0.0; space.grid.frame_len()];
    for &l in actions.lines() {
        let pixels = space
            .lines
            .get(l)
            .ok_or_else(|| Error::invalid(format!("line {l} out of range [0, {})", space.num_lines())))?;
        for &p in pixels {
            flat[p] = 1.0;
        }
    }
    let values = ArrayD::from_shape_vec(IxDyn(&space.grid.frame_shape()), flat).expect("frame shape");
    Ok(Mask { values })
}

/// Elementwise product `m ⊙ x`. A single-frame mask is broadcast over every
/// slice of a stack.
pub fn apply_mask(x: &ArrayD<f64>, m: &Mask) -> Result<ArrayD<f64>> {
    if x.shape() == m.shape() {
        return Ok(x * &m.values);
    }
    if x.ndim() == m.values.ndim() + 1 && &x.shape()[1..] == m.shape() {
        let mut out = x.clone();
        for mut slice in out.axis_iter_mut(Axis(0)) {
            slice *= &m.values;
        }
        return Ok(out);
    }
    Err(Error::ShapeMismatch {
        expected: m.shape().to_vec(),
        found: x.shape().to_vec(),
    })
}

/// Remap a polar frame onto a Cartesian sector image by bilinear
/// interpolation. Pixels outside the sector get `background`. 3D frames are
/// converted plane by plane and returned as `[n_el, out, out]`.
pub fn scan_convert(frame: &ArrayD<f64>, grid: &Grid, out_size: usize, background: f64) -> Result<ArrayD<f64>> {
    if !grid.is_polar() {
        return Err(Error::invalid("scan conversion needs a polar grid"));
    }
    if out_size == 0 {
        return Err(Error::invalid("output size must be >= 1"));
    }
    check_shape(&grid.frame_shape(), frame.shape())?;
    if grid.is_3d() {
        let mut out = Array3::from_elem((grid.n_el, out_size, out_size), background);
        for el in 0..grid.n_el {
            let plane = frame.index_axis(Axis(1), el).into_dimensionality().expect("2D plane");
            out.index_axis_mut(Axis(0), el)
                .assign(&convert_plane(plane.view(), grid, out_size, background));
        }
        return Ok(out.into_dyn());
    }
    let plane = frame.view().into_dimensionality().expect("2D frame");
    Ok(convert_plane(plane, grid, out_size, background).into_dyn())
}

/// Cartesian extent of the sector: `(x_min, x_max, z_min, z_max)`.
pub(crate) fn sector_bounds(g: &Geometry) -> (f64, f64, f64, f64) {
    let half = g.opening_angle / 2.0;
    let x_ext = g.depth_end * half.sin().min(1.0);
    let z_min = if half >= PI / 2.0 {
        -g.depth_end * (half - PI / 2.0).sin()
    } else {
        g.depth_start * half.cos()
    };
    (-x_ext, x_ext, z_min, g.depth_end)
}

/// Polar position of pixel centre `(ax, lat)`: `(radius, angle)`.
pub(crate) fn pixel_polar(grid: &Grid, ax: f64, lat: f64) -> (f64, f64) {
    let g = grid.geometry;
    let r = g.depth_start + (ax + 0.5) / grid.n_ax as f64 * (g.depth_end - g.depth_start);
    let th = -g.opening_angle / 2.0 + (lat + 0.5) / grid.n_lat as f64 * g.opening_angle;
    (r, th)
}

fn convert_plane(plane: ndarray::ArrayView2<'_, f64>, grid: &Grid, n: usize, background: f64) -> Array2<f64> {
    let g = grid.geometry;
    let (x0, x1, z0, z1) = sector_bounds(&g);
    let (n_ax, n_lat) = (grid.n_ax as f64, grid.n_lat as f64);
    let mut out = Array2::from_elem((n, n), background);
    for row in 0..n {
        let z = z0 + (row as f64 + 0.5) / n as f64 * (z1 - z0);
        for col in 0..n {
            let x = x0 + (col as f64 + 0.5) / n as f64 * (x1 - x0);
            let r = (x * x + z * z).sqrt();
            let th = x.atan2(z);
            if r < g.depth_start || r > g.depth_end || th.abs() > g.opening_angle / 2.0 {
                continue;
            }
            let fa = ((r - g.depth_start) / (g.depth_end - g.depth_start) * n_ax - 0.5).clamp(0.0, n_ax - 1.0);
            let fl = ((th + g.opening_angle / 2.0) / g.opening_angle * n_lat - 0.5).clamp(0.0, n_lat - 1.0);
            out[[row, col]] = bilinear(plane, fa, fl);
        }
    }
    out
}

fn bilinear(p: ndarray::ArrayView2<'_, f64>, fa: f64, fl: f64) -> f64 {
    let (na, nl) = p.dim();
    let a0 = fa.floor() as usize;
    let l0 = fl.floor() as usize;
    let a1 = (a0 + 1).min(na - 1);
    let l1 = (l0 + 1).min(nl - 1);
    let wa = fa - a0 as f64;
    let wl = fl - l0 as f64;
    (1.0 - wa) * ((1.0 - wl) * p[[a0, l0]] + wl * p[[a0, l1]]) + wa * ((1.0 - wl) * p[[a1, l0]] + wl * p[[a1, l1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn grid_validation() {
        assert!(Grid::polar(0, 4).is_err());
        assert!(Grid::polar3d(8, 1, 8).is_err());
        assert!(Grid::new(GridKind::Polar2d, 4, 4, 2, Geometry::default()).is_err());
        let bad = Geometry {
            opening_angle: 4.0,
            ..Geometry::default()
        };
        assert!(Grid::polar(4, 4).unwrap().with_geometry(bad).is_err());
        let g = Grid::polar3d(8, 3, 5).unwrap();
        assert_eq!(g.frame_shape(), vec![8, 3, 5]);
        assert_eq!(g.num_lines(), 3);
        assert_eq!(g.stack_shape(2), vec![2, 8, 3, 5]);
    }

    #[test]
    fn line_space_4x4() {
        let space = make_line_action_space(&Grid::cartesian(4, 4).unwrap());
        assert_eq!(space.num_lines(), 4);
        let mut all: Vec<usize> = space.lines().iter().flatten().copied().collect();
        assert!(space.lines().iter().all(|l| l.len() == 4));
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        assert_eq!(space.pixels(1), &[1, 5, 9, 13]);
    }

    #[test]
    fn line_space_112() {
        let space = make_line_action_space(&Grid::polar(112, 112).unwrap());
        assert_eq!(space.num_lines(), 112);
        assert!(space.lines().iter().all(|l| l.len() == 112));
    }

    #[test]
    fn plane_space_3d() {
        let grid = Grid::polar3d(6, 48, 5).unwrap();
        let space = make_line_action_space(&grid);
        assert_eq!(space.num_lines(), 48);
        let mask = mask_from_actions(&ActionSet::new(vec![7]).unwrap(), &space).unwrap();
        for ((ax, el, lat), &v) in mask.values().view().into_dimensionality::<ndarray::Ix3>().unwrap().indexed_iter() {
            let _ = (ax, lat);
            assert_eq!(v, if el == 7 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn masks_from_actions() {
        let space = make_line_action_space(&Grid::cartesian(4, 4).unwrap());
        let full = mask_from_actions(&ActionSet::all(4), &space).unwrap();
        assert!(full.values().iter().all(|&v| v == 1.0));
        let none = mask_from_actions(&ActionSet::empty(), &space).unwrap();
        assert!(none.values().iter().all(|&v| v == 0.0));

        let m = mask_from_actions(&ActionSet::new(vec![1, 3]).unwrap(), &space).unwrap();
        let mut expected = vec![0.0; 16];
        for l in [1, 3] {
            for &p in space.pixels(l) {
                expected[p] = 1.0;
            }
        }
        assert_eq!(m.values().iter().copied().collect::<Vec<_>>(), expected);
        assert!(mask_from_actions(&ActionSet::new(vec![4]).unwrap(), &space).is_err());
        assert!(ActionSet::new(vec![1, 1]).is_err());
    }

    #[test]
    fn masking() {
        let x = array![[1.0, 2.0], [3.0, 4.0]].into_dyn();
        let col0 = Mask::new(array![[1.0, 0.0], [1.0, 0.0]].into_dyn()).unwrap();
        assert_eq!(apply_mask(&x, &col0).unwrap(), array![[1.0, 0.0], [3.0, 0.0]].into_dyn());
        assert_eq!(apply_mask(&x, &Mask::ones(&[2, 2])).unwrap(), x);
        assert_eq!(apply_mask(&x, &Mask::zeros(&[2, 2])).unwrap(), ArrayD::<f64>::zeros(IxDyn(&[2, 2])));
        assert!(apply_mask(&x, &Mask::ones(&[3, 2])).is_err());
        assert!(Mask::new(array![0.5].into_dyn()).is_err());

        let stack = ndarray::stack(Axis(0), &[x.view(), x.view()]).unwrap();
        let out = apply_mask(&stack, &col0).unwrap();
        assert_eq!(out.index_axis(Axis(0), 1), array![[1.0, 0.0], [3.0, 0.0]].into_dyn());
    }

    #[test]
    fn sequence_validation_and_container() {
        let g = Grid::polar(2, 3).unwrap();
        assert!(FrameSequence::new(g, ArrayD::from_elem(IxDyn(&[1, 2, 3]), 1.5)).is_err());
        assert!(FrameSequence::new(g, ArrayD::zeros(IxDyn(&[1, 3, 2]))).is_err());
        let frames = ArrayD::from_shape_fn(IxDyn(&[2, 2, 3]), |d| (d[0] as f64 - 0.5) * 0.5 + d[2] as f64 * 0.25 - 0.25);
        let seq = FrameSequence::new(g, frames).unwrap();
        let c = seq.to_container();
        assert_eq!(c.dims(), &[2, 2, 3]);
        assert!(c.as_f32().unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
        let back = FrameSequence::from_container(&c, g).unwrap();
        for (a, b) in back.frames().iter().zip(seq.frames()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn scan_convert_constant_frame() {
        let g = Grid::polar(16, 16).unwrap();
        let f = ArrayD::from_elem(IxDyn(&[16, 16]), 0.3);
        let img = scan_convert(&f, &g, 112, -2.0).unwrap();
        assert_eq!(img.shape(), &[112, 112]);
        let inside = img.iter().filter(|&&v| v == 0.3).count();
        let outside = img.iter().filter(|&&v| v == -2.0).count();
        assert!(inside > 0 && outside > 0);
        assert_eq!(inside + outside, 112 * 112);
        assert!(scan_convert(&f, &Grid::cartesian(16, 16).unwrap(), 32, 0.0).is_err());
    }

    #[test]
    fn scan_convert_locates_a_bright_pixel() {
        let g = Grid::polar(20, 20).unwrap();
        let (ax, lat) = (12usize, 5usize);
        let mut f = ArrayD::zeros(IxDyn(&[20, 20]));
        f[[ax, lat]] = 1.0;
        let n = 200;
        let img = scan_convert(&f, &g, n, 0.0).unwrap();
        // forward-map the pixel centre
        let (r, th) = pixel_polar(&g, ax as f64, lat as f64);
        let (x0, x1, z0, z1) = sector_bounds(&g.geometry());
        let col = (r * th.sin() - x0) / (x1 - x0) * n as f64 - 0.5;
        let row = (r * th.cos() - z0) / (z1 - z0) * n as f64 - 0.5;
        let (mut sw, mut sr, mut sc) = (0.0, 0.0, 0.0);
        for ((i, j), &v) in img.view().into_dimensionality::<ndarray::Ix2>().unwrap().indexed_iter() {
            sw += v;
            sr += v * i as f64;
            sc += v * j as f64;
        }
        let (cr, cc) = (sr / sw, sc / sw);
        // one output pixel is 0.0083 normalized units; allow 2 px of drift
        assert!((cr - row).abs() < 2.0, "row {cr} vs {row}");
        assert!((cc - col).abs() < 2.0, "col {cc} vs {col}");
    }

    proptest! {
        #[test]
        fn mask_is_idempotent(vals in prop::collection::vec(-1.0f64..1.0, 12), bits in prop::collection::vec(any::<bool>(), 12)) {
            let x = ArrayD::from_shape_vec(IxDyn(&[3, 4]), vals).unwrap();
            let m = Mask::new(ArrayD::from_shape_vec(IxDyn(&[3, 4]), bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap()).unwrap();
            let once = apply_mask(&x, &m).unwrap();
            prop_assert_eq!(apply_mask(&once, &m).unwrap(), once);
        }

        #[test]
        fn union_of_actions_is_mask_max(a in prop::collection::btree_set(0usize..9, 0..9), b in prop::collection::btree_set(0usize..9, 0..9)) {
            let space = make_line_action_space(&Grid::polar(5, 9).unwrap());
            let ma = mask_from_actions(&ActionSet::new(a.iter().copied().collect()).unwrap(), &space).unwrap();
            let mb = mask_from_actions(&ActionSet::new(b.iter().copied().collect()).unwrap(), &space).unwrap();
            let ab = mask_from_actions(&ActionSet::new(a.union(&b).copied().collect()).unwrap(), &space).unwrap();
            prop_assert_eq!(ma.union(&mb).unwrap(), ab);
        }

        #[test]
        fn line_space_is_a_disjoint_cover(ax in 1usize..7, lat in 1usize..7, el in 2usize..4, three_d in any::<bool>()) {
            let grid = if three_d { Grid::polar3d(ax, el, lat).unwrap() } else { Grid::polar(ax, lat).unwrap() };
            let space = make_line_action_space(&grid);
            let mut seen = vec![false; grid.frame_len()];
            for line in space.lines() {
                prop_assert!(!line.is_empty());
                for &p in line {
                    prop_assert!(!seen[p]);
                    seen[p] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
    }
}
