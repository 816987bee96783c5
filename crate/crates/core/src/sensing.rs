//! Simulated acquisition and the `W`-slice measurement/mask buffers.

use ndarray::{ArrayD, Axis};

use crate::error::{check_shape, Error, Result};
use crate::grid::{apply_mask, mask_from_actions, ActionSet, FrameSequence, LineActionSpace, Mask};

/// Measure lines `actions` of frame `t`: the frame masked to those lines.
pub fn acquire(source: &FrameSequence, t: usize, actions: &ActionSet, space: &LineActionSpace) -> Result<(ArrayD<f64>, Mask)> {
    if t >= source.len() {
        return Err(Error::invalid(format!("frame {t} out of range for {} frames", source.len())));
    }
    if source.grid() != space.grid() {
        return Err(Error::invalid("action space and source are on different grids"));
    }
    let mask = mask_from_actions(actions, space)?;
    let y = apply_mask(&source.frame(t).to_owned(), &mask)?;
    Ok((y, mask))
}

/// The latest `W` measurements and masks, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBuffer {
    window: usize,
    frame_shape: Vec<usize>,
    y_slices: Vec<ArrayD<f64>>,
    m_slices: Vec<Mask>,
    filled: usize,
}

impl MeasurementBuffer {
    pub fn new(window: usize, frame_shape: &[usize]) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("window must be >= 1"));
        }
        Ok(Self {
            window,
            frame_shape: frame_shape.to_vec(),
            y_slices: Vec::new(),
            m_slices: Vec::new(),
            filled: 0,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Number of real (not padded) slices.
    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn y_slices(&self) -> &[ArrayD<f64>] {
        &self.y_slices
    }

    pub fn m_slices(&self) -> &[Mask] {
        &self.m_slices
    }

    /// Append a slice and evict the oldest. Until the buffer has seen `W`
    /// slices, the missing older slots repeat the earliest real slice.
    pub fn push(&self, y: &ArrayD<f64>, m: &Mask) -> Result<Self> {
        check_shape(&self.frame_shape, y.shape())?;
        check_shape(&self.frame_shape, m.shape())?;
        let y = apply_mask(y, m)?;
        let mut next = self.clone();
        if self.filled == 0 {
            next.y_slices = vec![y; self.window];
            next.m_slices = vec![m.clone(); self.window];
        } else {
            next.y_slices.remove(0);
            next.m_slices.remove(0);
            next.y_slices.push(y);
            next.m_slices.push(m.clone());
        }
        next.filled = (self.filled + 1).min(self.window);
        Ok(next)
    }

    /// `(Y, A)` stacked as `[W, frame...]`.
    pub fn stacks(&self) -> Result<(ArrayD<f64>, Mask)> {
        if self.filled == 0 {
            return Err(Error::invalid("measurement buffer is empty"));
        }
        let views: Vec<_> = self.y_slices.iter().map(|y| y.view()).collect();
        let y = ndarray::stack(Axis(0), &views).expect("equal shapes");
        Ok((y, Mask::stack(&self.m_slices)?))
    }
}
