//! The action step: pixel-wise entropy of the belief particles, line
//! aggregation, K-greedy selection and the baseline policies.

use ndarray::{ArrayD, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::grid::{ActionSet, LineActionSpace};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    values: ArrayD<f64>,
}

impl EntropyMap {
    pub fn new(values: ArrayD<f64>) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("entropy values must be finite and >= 0"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &ArrayD<f64> {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Active,
    Random,
    Equispaced,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Active => "active",
            PolicyKind::Random => "random",
            PolicyKind::Equispaced => "equispaced",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "active" => Ok(PolicyKind::Active),
            "random" => Ok(PolicyKind::Random),
            "equispaced" => Ok(PolicyKind::Equispaced),
            _ => Err(Error::invalid(format!("unknown policy '{s}'"))),
        }
    }
}

pub const DEFAULT_SIGMA_X2: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub k: usize,
    pub sigma_x2: f64,
    /// RBF width; `None` picks `max(1, (L / (4K))^2)`.
    pub rbf_width: Option<f64>,
    pub seed: u64,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind, k: usize) -> Self {
        Self {
            kind,
            k,
            sigma_x2: DEFAULT_SIGMA_X2,
            rbf_width: None,
            seed: 0,
        }
    }

    pub fn validate(&self, num_lines: usize) -> Result<()> {
        if self.k == 0 || self.k > num_lines {
            return Err(Error::invalid(format!("lines per frame K = {} must lie in [1, {num_lines}]", self.k)));
        }
        if !(self.sigma_x2 > 0.0) {
            return Err(Error::invalid("sigma_x2 must be positive"));
        }
        if matches!(self.rbf_width, Some(w) if !(w > 0.0)) {
            return Err(Error::invalid("RBF width must be positive"));
        }
        Ok(())
    }

    pub fn width(&self, num_lines: usize) -> f64 {
        self.rbf_width.unwrap_or_else(|| auto_rbf_width(num_lines, self.k))
    }
}

pub fn auto_rbf_width(num_lines: usize, k: usize) -> f64 {
    let r = num_lines as f64 / (4.0 * k.max(1) as f64);
    (r * r).max(1.0)
}

/// Pairwise-kernel entropy estimate per pixel over the belief particles:
/// `H = -sum_i 1/N log sum_j 1/N exp(-(x_i - x_j)^2 / (2 sigma_x2))`.
pub fn entropy_map(beliefs: &[ArrayD<f64>], sigma_x2: f64) -> Result<EntropyMap> {
    if !(sigma_x2 > 0.0) {
        return Err(Error::invalid("sigma_x2 must be positive"));
    }
    if beliefs.len() < 2 {
        return Err(Error::invalid("entropy needs at least two particles"));
    }
    for b in beliefs {
        check_shape(beliefs[0].shape(), b.shape())?;
    }
    let n = beliefs.len();
    let inv_n = 1.0 / n as f64;
    let c = 1.0 / (2.0 * sigma_x2);
    let slices: Vec<&[f64]> = beliefs.iter().map(|b| b.as_slice().expect("standard layout")).collect();
    let mut out = Vec::with_capacity(slices[0].len());
    let mut vals = vec![0.0; n];
    for p in 0..slices[0].len() {
        for (v, s) in vals.iter_mut().zip(&slices) {
            *v = s[p];
        }
        // a fixed summation order makes the result exactly invariant to
        // particle order
        vals.sort_unstable_by(f64::total_cmp);
        let mut h = 0.0;
        for &xi in &vals {
            let mut inner = 0.0;
            for &xj in &vals {
                let d = xi - xj;
                inner += (-d * d * c).exp();
            }
            h -= (inner * inv_n).ln();
        }
        // the j = i term bounds each inner mean below 1, so h >= 0 up to rounding
        out.push((h * inv_n).max(0.0));
    }
    EntropyMap::new(ArrayD::from_shape_vec(beliefs[0].raw_dim(), out).expect("same length"))
}

/// Sum of pixel entropies along each line.
pub fn linewise_entropy(h: &EntropyMap, space: &LineActionSpace) -> Result<Vec<f64>> {
    check_shape(&space.grid().frame_shape(), h.values.shape())?;
    let flat = h.values.as_slice().expect("standard layout");
    Ok(space.lines().iter().map(|line| line.iter().map(|&i| flat[i]).sum()).collect())
}

/// Mean over the azimuth (last) axis of a `[n_ax, n_el, n_az]` map.
pub fn azimuth_average(h3d: &EntropyMap) -> Result<EntropyMap> {
    if h3d.values.ndim() != 3 {
        return Err(Error::invalid("azimuth averaging needs a 3D entropy map"));
    }
    let avg = h3d.values.mean_axis(Axis(2)).expect("nonempty axis");
    EntropyMap::new(avg)
}

/// Per-action entropies: line sums in 2D; in 3D, the azimuth-averaged map
/// summed down each elevation column.
pub fn action_entropies(h: &EntropyMap, space: &LineActionSpace) -> Result<Vec<f64>> {
    if space.grid().is_3d() {
        let avg = azimuth_average(h)?;
        check_shape(&[space.grid().n_ax(), space.grid().n_el()], avg.values.shape())?;
        Ok(avg.values.sum_axis(Axis(0)).iter().copied().collect())
    } else {
        linewise_entropy(h, space)
    }
}

/// Pick the largest entry (ties to the lowest index), then damp every line
/// by `1 - exp(-(l - l*)^2 / w)`; repeat `k` times.
pub fn k_greedy_select(line_entropies: &[f64], k: usize, w: f64) -> Result<ActionSet> {
    let l = line_entropies.len();
    if k > l {
        return Err(Error::invalid(format!("cannot select {k} of {l} lines")));
    }
    if !(w > 0.0) {
        return Err(Error::invalid("RBF width must be positive"));
    }
    let mut h = line_entropies.to_vec();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best = 0;
        for i in 1..l {
            if h[i] > h[best] {
                best = i;
            }
        }
        // a line already chosen has weight exactly 0; skip it on all-zero ties
        if chosen.contains(&best) {
            best = (0..l).find(|i| !chosen.contains(i)).expect("k <= l");
        }
        chosen.push(best);
        for (i, v) in h.iter_mut().enumerate() {
            let d = i as f64 - best as f64;
            *v *= 1.0 - (-d * d / w).exp();
        }
    }
    ActionSet::new(chosen)
}

/// Lines `(o + j s) mod L` with stride `s = floor(L / K)` and offset
/// `o = (t - 1) mod s`, for 1-based frame `t`.
pub fn equispaced_policy(t: usize, num_lines: usize, k: usize) -> Result<ActionSet> {
    if k == 0 || k > num_lines {
        return Err(Error::invalid(format!("cannot select {k} of {num_lines} lines")));
    }
    if t == 0 {
        return Err(Error::invalid("frame indices are 1-based"));
    }
    let s = num_lines / k;
    let o = (t - 1) % s;
    ActionSet::new((0..k).map(|j| (o + j * s) % num_lines).collect())
}

/// `K` distinct lines uniformly at random from the stream of `(seed, t)`.
pub fn random_policy(num_lines: usize, k: usize, seed: u64, t: usize) -> Result<ActionSet> {
    if k > num_lines {
        return Err(Error::invalid(format!("cannot select {k} of {num_lines} lines")));
    }
    let mut rng = substream(seed, "policy", &[t as u64]);
    ActionSet::new(sample(&mut rng, num_lines, k).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_line_action_space, Grid};
    use ndarray::{array, IxDyn};
    use proptest::prelude::*;

    #[test]
    fn entropy_examples() {
        let a = array![0.3, -0.2].into_dyn();
        let h = entropy_map(&[a.clone(), a.clone(), a.clone()], 0.04).unwrap();
        assert!(h.values().iter().all(|&v| v == 0.0));
        let b = array![0.5, 0.1].into_dyn();
        let h = entropy_map(&[a.clone(), b.clone()], 0.04).unwrap();
        for p in 0..2 {
            let d: f64 = a[p] - b[p];
            let want = -((1.0 + (-d * d / 0.08).exp()) / 2.0).ln();
            assert!((h.values()[p] - want).abs() < 1e-12);
        }
        assert!(entropy_map(&[a.clone()], 0.04).is_err());
        assert!(entropy_map(&[a.clone(), b], 0.0).is_err());
    }

    #[test]
    fn line_sums() {
        let g = Grid::polar(3, 5).unwrap();
        let space = make_line_action_space(&g);
        let h = EntropyMap::new(ArrayD::from_elem(IxDyn(&[3, 5]), 0.5)).unwrap();
        assert_eq!(linewise_entropy(&h, &space).unwrap(), vec![1.5; 5]);
        let mut v = ArrayD::zeros(IxDyn(&[3, 5]));
        v[[1, 3]] = 2.0;
        let l = linewise_entropy(&EntropyMap::new(v).unwrap(), &space).unwrap();
        assert_eq!(l, vec![0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(k_greedy_select(&[0.0, 10.0, 0.0, 9.0], 2, 0.5).unwrap().lines(), &[1, 3]);
        assert_eq!(k_greedy_select(&[1.0, 3.0, 2.0], 1, 1.0).unwrap().lines(), &[1]);
        assert_eq!(k_greedy_select(&[1.0; 6], 1, 1.0).unwrap().lines(), &[0]);
        assert_eq!(k_greedy_select(&[0.0; 4], 4, 1.0).unwrap().sorted(), vec![0, 1, 2, 3]);
        assert!(k_greedy_select(&[1.0; 3], 4, 1.0).is_err());
    }

    #[test]
    fn equispaced_examples() {
        assert_eq!(equispaced_policy(1, 8, 2).unwrap().lines(), &[0, 4]);
        assert_eq!(equispaced_policy(2, 8, 2).unwrap().lines(), &[1, 5]);
        assert_eq!(equispaced_policy(5, 8, 2).unwrap().lines(), &[0, 4]);
        let mut seen = [false; 32];
        for t in 1..=8 {
            for &l in equispaced_policy(t, 32, 4).unwrap().lines() {
                seen[l] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert!(equispaced_policy(1, 3, 4).is_err());
    }

    #[test]
    fn random_examples() {
        assert_eq!(random_policy(6, 6, 1, 1).unwrap().sorted(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(random_policy(32, 4, 9, 3).unwrap(), random_policy(32, 4, 9, 3).unwrap());
        assert_ne!(random_policy(32, 4, 9, 3).unwrap(), random_policy(32, 4, 9, 4).unwrap());
    }

    #[test]
    fn random_inclusion_is_uniform() {
        let (l, k, n) = (16usize, 3usize, 100_000usize);
        let mut counts = vec![0usize; l];
        for t in 0..n {
            for &i in random_policy(l, k, 11, t).unwrap().lines() {
                counts[i] += 1;
            }
        }
        let p = k as f64 / l as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd + 1.0, "{c}");
        }
    }

    #[test]
    fn azimuth_examples() {
        let h = EntropyMap::new(ArrayD::from_elem(IxDyn(&[4, 3, 5]), 0.7)).unwrap();
        let a = azimuth_average(&h).unwrap();
        assert_eq!(a.values().shape(), &[4, 3]);
        assert!(a.values().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let two = EntropyMap::new(ArrayD::from_shape_fn(IxDyn(&[1, 1, 2]), |i| if i[2] == 0 { 1.0 } else { 3.0 })).unwrap();
        assert_eq!(azimuth_average(&two).unwrap().values()[[0, 0]], 2.0);
        assert!(azimuth_average(&EntropyMap::new(ArrayD::zeros(IxDyn(&[2, 2]))).unwrap()).is_err());
    }

    #[test]
    fn plane_entropies_3d() {
        let g = Grid::polar3d(2, 3, 4).unwrap();
        let space = make_line_action_space(&g);
        let mut v = ArrayD::zeros(IxDyn(&[2, 3, 4]));
        v[[1, 2, 0]] = 4.0;
        let e = action_entropies(&EntropyMap::new(v).unwrap(), &space).unwrap();
        assert_eq!(e, vec![0.0, 0.0, 1.0]);
    }

    fn naive_greedy(h: &[f64], k: usize, w: f64) -> Vec<usize> {
        let mut h = h.to_vec();
        let mut out = vec![];
        while out.len() < k {
            let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let pick = h.iter().position(|&v| v == m).unwrap();
            let pick = if out.contains(&pick) { (0..h.len()).find(|i| !out.contains(i)).unwrap() } else { pick };
            out.push(pick);
            h = h.iter().enumerate().map(|(i, v)| v * (1.0 - (-((i as f64 - pick as f64).powi(2)) / w).exp())).collect();
        }
        out
    }

    proptest! {
        #[test]
        fn entropy_is_nonnegative_and_shift_invariant(v in prop::collection::vec(-1.0f64..1.0, 12), c in -1.0f64..1.0) {
            let parts: Vec<ArrayD<f64>> = v.chunks(3).map(|c| ArrayD::from_shape_vec(IxDyn(&[3]), c.to_vec()).unwrap()).collect();
            let h = entropy_map(&parts, 0.04).unwrap();
            prop_assert!(h.values().iter().all(|&x| x >= 0.0));
            let shifted: Vec<ArrayD<f64>> = parts.iter().map(|p| p + c).collect();
            let hs = entropy_map(&shifted, 0.04).unwrap();
            for (a, b) in h.values().iter().zip(hs.values()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let mut rev = parts.clone();
            rev.reverse();
            prop_assert_eq!(entropy_map(&rev, 0.04).unwrap(), h);
        }

        #[test]
        fn greedy_matches_naive_and_is_scale_invariant(h in prop::collection::vec(0.0f64..10.0, 1..64), k in 1usize..8, w in 0.1f64..20.0, c in 0.5f64..4.0) {
            let k = k.min(h.len());
            let got = k_greedy_select(&h, k, w).unwrap();
            let naive = naive_greedy(&h, k, w);
            prop_assert_eq!(got.lines(), naive.as_slice());
            let scaled: Vec<f64> = h.iter().map(|v| v * 4.0 * c).collect();
            prop_assert_eq!(k_greedy_select(&scaled, k, w).unwrap(), got);
        }

        #[test]
        fn line_sums_partition_the_map(v in prop::collection::vec(0.0f64..2.0, 20)) {
            let g = Grid::polar(4, 5).unwrap();
            let h = EntropyMap::new(ArrayD::from_shape_vec(IxDyn(&[4, 5]), v.clone()).unwrap()).unwrap();
            let total: f64 = linewise_entropy(&h, &make_line_action_space(&g)).unwrap().iter().sum();
            prop_assert!((total - v.iter().sum::<f64>()).abs() < 1e-9);
        }
    }
}
