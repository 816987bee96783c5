//! Closed-loop line subsampling for ultrasound sequences.
//!
//! Each frame, a small set of scan lines is measured, a particle belief over
//! the latest `W` frames is drawn by diffusion posterior sampling, and the
//! lines for the next frame are picked where the particles disagree most.

pub mod agent;
pub mod container;
pub mod denoiser;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod phantom;
pub mod policy;
pub mod posterior;
pub mod rng;
pub mod schedule;
pub mod sensing;

pub use container::{Container, DType, Payload};
pub use error::{Error, Result};
pub use grid::{
    apply_mask, make_line_action_space, mask_from_actions, scan_convert, ActionSet, FrameSequence, Geometry, Grid,
    GridKind, LineActionSpace, Mask,
};
pub use schedule::{ddim_prior_step, forward_diffuse, make_cosine_schedule, tweedie_estimate, DiffusionSchedule};
pub use denoiser::{
    denoise, gaussian_denoise, load_checkpoint, save_checkpoint, train_epsilon_denoiser, DenoiserSpec, GaussianPrior,
    KernelParams, LearnedDenoiser, TrainConfig, TrainReport, VjpMode,
};
pub use posterior::{
    dps_sample, dps_sample_profiled, likelihood_gradient, noise_init, reconstruct, seqdiff_init, shift_window,
    GuidanceConfig, ParticleStack, Reconstruction,
};
pub use policy::{
    action_entropies, auto_rbf_width, azimuth_average, entropy_map, equispaced_policy, k_greedy_select,
    linewise_entropy, random_policy, EntropyMap, PolicyConfig, PolicyKind,
};
pub use sensing::{acquire, MeasurementBuffer};
pub use phantom::{generate_phantom, Phantom, PhantomParams};
pub use agent::{run_episode, run_episode_traced, Episode, EpisodeConfig, EpisodeLog, FrameRecord, StageTimes};
pub use metrics::{episode_report, gcnr, psnr, summary_csv, RegionPair, SummaryRow};
