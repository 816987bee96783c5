//! The perception-action loop: acquire, perceive, act, frame by frame.

use std::time::Instant;

use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserSpec;
use crate::error::{Error, Result};
use crate::grid::{make_line_action_space, ActionSet, FrameSequence};
use crate::metrics::{gcnr, psnr, DEFAULT_GCNR_BINS, DYNAMIC_RANGE};
use crate::phantom::{LABEL_MYOCARDIUM, LABEL_VENTRICLE};
use crate::policy::{action_entropies, entropy_map, equispaced_policy, k_greedy_select, random_policy, PolicyConfig, PolicyKind};
use crate::posterior::{dps_sample_profiled, noise_init, reconstruct, seqdiff_init, shift_window, GuidanceConfig, ParticleStack, Reconstruction};
use crate::schedule::DiffusionSchedule;
use crate::sensing::{acquire, MeasurementBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub policy: PolicyConfig,
    pub guidance: GuidanceConfig,
    pub window: usize,
    pub particles: usize,
    pub seed: u64,
    /// Process at most this many frames.
    pub frame_limit: Option<usize>,
    pub reconstruction: Reconstruction,
    /// Record wall times; when off the time columns are 0 and logs are
    /// reproducible byte for byte.
    pub record_timings: bool,
}

impl EpisodeConfig {
    pub fn new(policy: PolicyConfig, guidance: GuidanceConfig) -> Self {
        Self {
            policy,
            guidance,
            window: 3,
            particles: 4,
            seed: 0,
            frame_limit: None,
            reconstruction: Reconstruction::First,
            record_timings: false,
        }
    }

    pub fn validate(&self, num_lines: usize, s: &DiffusionSchedule) -> Result<()> {
        self.policy.validate(num_lines)?;
        self.guidance.validate(s)?;
        if self.window == 0 {
            return Err(Error::invalid("window must be >= 1"));
        }
        if self.particles < 2 {
            return Err(Error::invalid("need at least 2 particles for the entropy map"));
        }
        if self.frame_limit == Some(0) {
            return Err(Error::invalid("frame limit must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    /// 1-based frame index.
    pub t: usize,
    pub policy: String,
    pub k: usize,
    pub psnr_db: f64,
    /// Ventricle vs. myocardium gCNR of the reconstruction.
    pub gcnr: Option<f64>,
    /// The same on the ground truth.
    pub gcnr_truth: Option<f64>,
    pub mean_entropy: f64,
    pub max_entropy: f64,
    pub perception_ms: f64,
    pub action_ms: f64,
    /// Lines measured in this frame, in selection order.
    pub lines: ActionSet,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeLog {
    pub rows: Vec<FrameRecord>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    t: usize,
    policy: &'a str,
    #[serde(rename = "K")]
    k: usize,
    psnr_db: f64,
    gcnr: Option<f64>,
    mean_entropy: f64,
    perception_ms: f64,
    action_ms: f64,
    lines: String,
}

impl EpisodeLog {
    /// `t,policy,K,psnr_db,gcnr,mean_entropy,perception_ms,action_ms,lines`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                t: r.t,
                policy: &r.policy,
                k: r.k,
                psnr_db: r.psnr_db,
                gcnr: r.gcnr,
                mean_entropy: r.mean_entropy,
                perception_ms: r.perception_ms,
                action_ms: r.action_ms,
                lines: r.lines.to_log_string(),
            })
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record(["t", "policy", "K", "psnr_db", "gcnr", "mean_entropy", "perception_ms", "action_ms", "lines"])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }

    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_gcnr(&self) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter_map(|r| r.gcnr).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Wall time spent in each stage, summed over frames.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub denoise_ms: f64,
    pub guidance_ms: f64,
    pub entropy_ms: f64,
    pub selection_ms: f64,
    pub total_ms: f64,
    pub frames: usize,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub reconstructions: FrameSequence,
    /// Belief particles (newest slices) for every frame.
    pub beliefs: Vec<Vec<ArrayD<f64>>>,
    /// Stacks handed to the warm start of each later frame, kept only when
    /// requested.
    pub converged: Vec<ParticleStack>,
    pub log: EpisodeLog,
    pub stages: StageTimes,
}

fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn first_actions(cfg: &PolicyConfig, num_lines: usize) -> Result<ActionSet> {
    match cfg.kind {
        PolicyKind::Equispaced => equispaced_policy(1, num_lines, cfg.k),
        // the active policy has no beliefs yet and starts from a random draw
        PolicyKind::Active | PolicyKind::Random => random_policy(num_lines, cfg.k, cfg.seed, 1),
    }
}

fn region_gcnr(frame: &ArrayD<f64>, labels: ndarray::ArrayViewD<'_, u8>) -> Option<f64> {
    let pick = |code: u8| -> Vec<f64> { frame.iter().zip(labels.iter()).filter(|(_, &l)| l == code).map(|(&v, _)| v).collect() };
    gcnr(&pick(LABEL_VENTRICLE), &pick(LABEL_MYOCARDIUM), DEFAULT_GCNR_BINS).ok()
}

/// Run the closed loop over `source`. Deterministic given the config.
pub fn run_episode(
    source: &FrameSequence,
    labels: Option<&ArrayD<u8>>,
    d: &DenoiserSpec,
    s: &DiffusionSchedule,
    cfg: &EpisodeConfig,
) -> Result<Episode> {
    run_episode_inner(source, labels, d, s, cfg, false)
}

/// As [`run_episode`], also keeping the warm-start stacks of every frame.
pub fn run_episode_traced(
    source: &FrameSequence,
    labels: Option<&ArrayD<u8>>,
    d: &DenoiserSpec,
    s: &DiffusionSchedule,
    cfg: &EpisodeConfig,
) -> Result<Episode> {
    run_episode_inner(source, labels, d, s, cfg, true)
}

fn run_episode_inner(
    source: &FrameSequence,
    labels: Option<&ArrayD<u8>>,
    d: &DenoiserSpec,
    s: &DiffusionSchedule,
    cfg: &EpisodeConfig,
    keep_stacks: bool,
) -> Result<Episode> {
    let grid = *source.grid();
    let space = make_line_action_space(&grid);
    let num_lines = space.num_lines();
    cfg.validate(num_lines, s)?;
    let stack_shape = grid.stack_shape(cfg.window);
    if d.stack_shape() != stack_shape {
        return Err(Error::invalid(format!(
            "denoiser expects stacks {:?} but the episode uses {:?}",
            d.stack_shape(),
            stack_shape
        )));
    }
    if let Some(l) = labels {
        crate::error::check_shape(source.frames().shape(), l.shape())?;
    }
    let frames = cfg.frame_limit.map_or(source.len(), |n| n.min(source.len()));
    let g = &cfg.guidance;
    let width = cfg.policy.width(num_lines);

    let mut buffer = MeasurementBuffer::new(cfg.window, &grid.frame_shape())?;
    let mut actions = first_actions(&cfg.policy, num_lines)?;
    let mut prev: Option<ParticleStack> = None;
    let mut recon = Vec::with_capacity(frames);
    let mut beliefs = Vec::with_capacity(frames);
    let mut converged = Vec::new();
    let mut log = EpisodeLog::default();
    let mut stages = StageTimes::default();

    for t in 0..frames {
        let frame_no = t + 1;
        let run_frame = || -> Result<_> {
            let (y, m) = acquire(source, t, &actions, &space)?;
            let buf = buffer.push(&y, &m)?;
            let (ys, ms_) = buf.stacks()?;

            let t0 = Instant::now();
            let (init, tau, n_steps) = match (&prev, g.seqdiff) {
                (Some(p), true) => {
                    let shifted = shift_window(p);
                    (seqdiff_init(&shifted, g.steps_seq, s, cfg.seed, t as u64)?, g.steps_seq, g.num_seqdiff_steps)
                }
                _ => (noise_init(cfg.particles, &stack_shape, g.steps_init, s, cfg.seed, t as u64)?, g.steps_init, g.num_init_steps),
            };
            let (particles, profile) = dps_sample_profiled(d, s, &ys, &ms_, &init, tau, n_steps, g)?;
            let x = reconstruct(&particles, cfg.reconstruction).mapv(|v| v.clamp(-1.0, 1.0));
            let perception = t0.elapsed();

            let t1 = Instant::now();
            let b = particles.beliefs();
            let h = entropy_map(&b, cfg.policy.sigma_x2)?;
            let t2 = Instant::now();
            let next = if frame_no < frames {
                Some(match cfg.policy.kind {
                    PolicyKind::Active => k_greedy_select(&action_entropies(&h, &space)?, cfg.policy.k, width)?,
                    PolicyKind::Random => random_policy(num_lines, cfg.policy.k, cfg.policy.seed, frame_no + 1)?,
                    PolicyKind::Equispaced => equispaced_policy(frame_no + 1, num_lines, cfg.policy.k)?,
                })
            } else {
                None
            };
            let t3 = Instant::now();
            Ok((buf, particles, x, b, h, next, perception, profile, t2 - t1, t3 - t2, t3 - t1))
        };
        let (buf, particles, x, b, h, next, perception, profile, entropy_t, select_t, action) =
            run_frame().map_err(|e| e.in_frame(frame_no))?;

        let truth = source.frame(t).to_owned();
        let (gc, gc_truth) = match labels {
            Some(l) => {
                let l = l.index_axis(Axis(0), t);
                (region_gcnr(&x, l.view()), region_gcnr(&truth, l))
            }
            None => (None, None),
        };
        let timed = |v: f64| if cfg.record_timings { v } else { 0.0 };
        log.rows.push(FrameRecord {
            t: frame_no,
            policy: cfg.policy.kind.name().into(),
            k: cfg.policy.k,
            psnr_db: psnr(&x, &truth, DYNAMIC_RANGE)?,
            gcnr: gc,
            gcnr_truth: gc_truth,
            mean_entropy: h.mean(),
            max_entropy: h.max(),
            perception_ms: timed(ms(perception)),
            action_ms: timed(ms(action)),
            lines: actions.clone(),
        });
        stages.denoise_ms += ms(profile.denoise);
        stages.guidance_ms += ms(profile.guidance);
        stages.entropy_ms += ms(entropy_t);
        stages.selection_ms += ms(select_t);
        stages.total_ms += ms(perception) + ms(action);
        stages.frames += 1;

        buffer = buf;
        recon.push(x);
        beliefs.push(b);
        if keep_stacks {
            converged.push(particles.clone());
        }
        prev = Some(particles);
        if let Some(n) = next {
            actions = n;
        }
    }

    let views: Vec<_> = recon.iter().map(|r| r.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views).unwrap_or_else(|_| ArrayD::zeros(IxDyn(&[0])));
    let mut reconstructions = FrameSequence::new(grid, stacked)?;
    if let Some(p) = source.frame_period() {
        reconstructions = reconstructions.with_frame_period(p);
    }
    Ok(Episode {
        reconstructions,
        beliefs,
        converged,
        log,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GaussianPrior, KernelParams};
    use crate::grid::Grid;
    use crate::schedule::make_cosine_schedule;

    fn small() -> (FrameSequence, DenoiserSpec, DiffusionSchedule) {
        let g = Grid::polar(6, 8).unwrap();
        let f = ArrayD::from_shape_fn(IxDyn(&[4, 6, 8]), |i| ((i[0] + i[1] * 3 + i[2] * 5) % 9) as f64 / 9.0 - 0.4);
        let src = FrameSequence::new(g, f).unwrap();
        let d = DenoiserSpec::gaussian(GaussianPrior::stationary(&[3, 6, 8], &KernelParams::default()).unwrap());
        (src, d, make_cosine_schedule(100).unwrap())
    }

    fn cfg(kind: PolicyKind, k: usize) -> EpisodeConfig {
        let mut c = EpisodeConfig::new(
            PolicyConfig::new(kind, k),
            GuidanceConfig {
                steps_init: 100,
                steps_seq: 80,
                num_seqdiff_steps: 10,
                num_init_steps: 10,
                ..GuidanceConfig::default()
            },
        );
        c.seed = 5;
        c
    }

    #[test]
    fn single_frame() {
        let (src, d, s) = small();
        let one = src.truncated(1).unwrap();
        let ep = run_episode(&one, None, &d, &s, &cfg(PolicyKind::Active, 2)).unwrap();
        assert_eq!(ep.log.rows.len(), 1);
        assert_eq!(ep.reconstructions.len(), 1);
    }

    #[test]
    fn reproducible() {
        let (src, d, s) = small();
        let c = cfg(PolicyKind::Active, 2);
        let a = run_episode(&src, None, &d, &s, &c).unwrap();
        let b = run_episode(&src, None, &d, &s, &c).unwrap();
        assert_eq!(a.log.to_csv().unwrap(), b.log.to_csv().unwrap());
        assert_eq!(a.reconstructions, b.reconstructions);
        assert!(a.log.to_csv().unwrap().starts_with("t,policy,K,psnr_db,gcnr,mean_entropy,perception_ms,action_ms,lines\n"));
    }

    #[test]
    fn full_sampling_is_policy_independent() {
        let (src, d, s) = small();
        let a = run_episode(&src, None, &d, &s, &cfg(PolicyKind::Active, 8)).unwrap();
        let r = run_episode(&src, None, &d, &s, &cfg(PolicyKind::Random, 8)).unwrap();
        for (x, y) in a.log.rows.iter().zip(&r.log.rows) {
            assert_eq!(x.lines.sorted(), y.lines.sorted());
        }
    }

    #[test]
    fn warm_start_uses_the_shifted_stack() {
        let (src, d, s) = small();
        let ep = run_episode_traced(&src, None, &d, &s, &cfg(PolicyKind::Equispaced, 2)).unwrap();
        assert_eq!(ep.converged.len(), 4);
        let shifted = shift_window(&ep.converged[0]);
        for p in shifted.particles() {
            assert_eq!(p.index_axis(Axis(0), 1), p.index_axis(Axis(0), 2));
        }
        assert_eq!(shifted.particles()[0].index_axis(Axis(0), 0), ep.converged[0].particles()[0].index_axis(Axis(0), 1));
    }

    #[test]
    fn rejects_bad_configs() {
        let (src, d, s) = small();
        assert!(run_episode(&src, None, &d, &s, &cfg(PolicyKind::Active, 9)).is_err());
        let mut c = cfg(PolicyKind::Active, 2);
        c.particles = 1;
        assert!(run_episode(&src, None, &d, &s, &c).is_err());
        let mut c = cfg(PolicyKind::Active, 2);
        c.window = 2;
        assert!(run_episode(&src, None, &d, &s, &c).is_err());
    }
}
