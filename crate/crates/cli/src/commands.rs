use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use ulsa_core::{
    entropy_map, generate_phantom, load_checkpoint, make_cosine_schedule, run_episode, save_checkpoint, train_epsilon_denoiser,
    Container, DenoiserSpec, DiffusionSchedule, EpisodeConfig, Error, FrameSequence, GaussianPrior, GuidanceConfig, Grid,
    KernelParams, PhantomParams, PolicyConfig, Result, TrainConfig, VjpMode,
};

use crate::args::{BenchArgs, EpisodeArgs, ModelKind, PhantomArgs, ReplayArgs, RunArgs, TrainArgs};
use crate::manifest::{absolute, to_value, RunManifest};

pub const SEQUENCE_FILE: &str = "seq.ulsa";
pub const LABELS_FILE: &str = "labels.ulsa";
pub const RECON_FILE: &str = "recon.ulsa";
pub const LOG_FILE: &str = "log.csv";
pub const BENCH_FILE: &str = "bench.csv";

/// Phantoms the `gaussian` denoiser is fitted on: seeds from 1000 upwards,
/// contraction amplitudes spread over the swept range.
const PRIOR_PHANTOMS: u64 = 16;
const PRIOR_SEED: u64 = 1000;
const PRIOR_AMPLITUDES: (f64, f64) = (0.05, 0.4);

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn spread(i: u64, n: u64, lo: f64, hi: f64) -> f64 {
    if n <= 1 {
        lo
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

pub fn phantom(a: &PhantomArgs) -> Result<()> {
    let grid = match a.elevation {
        Some(el) => Grid::polar3d(a.size, el, a.size)?,
        None => Grid::polar(a.size, a.size)?,
    };
    let params = PhantomParams {
        grid,
        frames: a.frames,
        period: a.period,
        amplitude: a.amplitude,
        speckle: a.speckle,
        seed: a.seed,
        ..PhantomParams::default()
    };
    let ph = generate_phantom(&params)?;
    create_dir(&a.out)?;
    let seq_path = a.out.join(SEQUENCE_FILE);
    let labels_path = a.out.join(LABELS_FILE);
    ph.sequence.to_container().save(&seq_path)?;
    ph.labels_container().save(&labels_path)?;

    let mut args = a.clone();
    args.out = absolute(&a.out);
    let mut m = RunManifest::new("phantom", a.seed, &args)?;
    m.outputs = vec![absolute(&seq_path), absolute(&labels_path)];
    m.resolved = to_value(&params)?;
    m.write(&a.out)?;
    println!("wrote {} frames of {:?} to {}", a.frames, grid.frame_shape(), a.out.display());
    Ok(())
}

fn resolve_sequence_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(SEQUENCE_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_sequence(path: &Path) -> Result<FrameSequence> {
    let c = Container::load(path)?;
    let grid = Grid::from_sequence_dims(c.dims())?;
    FrameSequence::from_container(&c, grid)
}

fn load_labels(path: &Path, seq: &FrameSequence) -> Result<ArrayD<u8>> {
    let c = Container::load(path)?;
    let data = c
        .as_u8()
        .ok_or_else(|| Error::Format(format!("{}: labels must be uint8", path.display())))?;
    if c.dims() != seq.frames().shape() {
        return Err(Error::ShapeMismatch {
            expected: seq.frames().shape().to_vec(),
            found: c.dims().to_vec(),
        });
    }
    ArrayD::from_shape_vec(IxDyn(c.dims()), data.to_vec()).map_err(|e| Error::Format(e.to_string()))
}

/// Labels given explicitly, or `labels.ulsa` next to the sequence if present.
fn labels_path(explicit: &Option<PathBuf>, seq_path: &Path) -> Option<PathBuf> {
    explicit.clone().or_else(|| {
        let p = seq_path.parent()?.join(LABELS_FILE);
        p.is_file().then_some(p)
    })
}

fn fit_gaussian(grid: Grid, window: usize) -> Result<DenoiserSpec> {
    let train = (0..PRIOR_PHANTOMS)
        .map(|i| {
            let p = PhantomParams {
                grid,
                seed: PRIOR_SEED + i,
                amplitude: spread(i, PRIOR_PHANTOMS, PRIOR_AMPLITUDES.0, PRIOR_AMPLITUDES.1),
                ..PhantomParams::default()
            };
            generate_phantom(&p).map(|ph| ph.sequence)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DenoiserSpec::gaussian(GaussianPrior::fit(&train, window, &KernelParams::default())?))
}

fn load_denoiser(a: &EpisodeArgs, grid: Grid, s: &DiffusionSchedule) -> Result<DenoiserSpec> {
    let d = if a.denoiser == "gaussian" {
        fit_gaussian(grid, a.window)?
    } else {
        let d = load_checkpoint(&a.denoiser)?;
        if let Some(net) = d.learned_model() {
            if net.tau_max() != s.tau_max() {
                return Err(Error::InvalidInput(format!(
                    "checkpoint was trained with tau_max {} but --tau-max is {}",
                    net.tau_max(),
                    s.tau_max()
                )));
            }
        }
        d
    };
    if d.window() != a.window {
        return Err(Error::InvalidInput(format!(
            "denoiser covers {} frames but --window is {}",
            d.window(),
            a.window
        )));
    }
    match a.vjp {
        Some(v) => d.with_vjp_mode(VjpMode::from(v)),
        None => Ok(d),
    }
}

fn episode_config(a: &EpisodeArgs) -> Result<EpisodeConfig> {
    let rbf_width = match a.rbf_width.as_str() {
        "auto" => None,
        w => Some(
            w.parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad RBF width '{w}'")))?,
        ),
    };
    let policy = PolicyConfig {
        rbf_width,
        sigma_x2: a.sigma_x2,
        seed: a.seed,
        ..PolicyConfig::new(a.policy, a.lines_per_frame)
    };
    let guidance = GuidanceConfig {
        gamma: a.gamma,
        steps_init: a.tau_max,
        steps_seq: a.tau_seqdiff,
        num_init_steps: a.steps,
        num_seqdiff_steps: a.steps,
        seqdiff: !a.no_seqdiff,
        step_cap: !a.no_step_cap,
        clip_x0: (!a.no_clip).then_some(a.clip_x0),
    };
    let mut cfg = EpisodeConfig::new(policy, guidance);
    cfg.window = a.window;
    cfg.particles = a.particles;
    cfg.seed = a.seed;
    cfg.frame_limit = a.frames;
    cfg.reconstruction = a.reconstruction.into();
    cfg.record_timings = a.timings;
    Ok(cfg)
}

fn resolved(cfg: &EpisodeConfig, d: &DenoiserSpec, seq: &FrameSequence) -> Result<serde_json::Value> {
    let num_lines = seq.grid().num_lines();
    Ok(serde_json::json!({
        "episode": to_value(cfg)?,
        "rbf_width": cfg.policy.width(num_lines),
        "num_lines": num_lines,
        "frame_shape": seq.grid().frame_shape(),
        "frames": seq.len(),
        "denoiser_kind": d.kind(),
        "vjp": format!("{:?}", d.vjp_mode()).to_lowercase(),
    }))
}

pub fn run(a: &RunArgs) -> Result<()> {
    let seq_path = resolve_sequence_path(&a.input);
    let seq = load_sequence(&seq_path)?;
    let lab_path = labels_path(&a.episode.labels, &seq_path);
    let labels = lab_path.as_deref().map(|p| load_labels(p, &seq)).transpose()?;
    let s = make_cosine_schedule(a.episode.tau_max)?;
    let cfg = episode_config(&a.episode)?;
    cfg.validate(seq.grid().num_lines(), &s)?;
    let d = load_denoiser(&a.episode, *seq.grid(), &s)?;

    let ep = run_episode(&seq, labels.as_ref(), &d, &s, &cfg)?;

    create_dir(&a.out)?;
    let recon_path = a.out.join(RECON_FILE);
    let log_path = a.out.join(LOG_FILE);
    ep.reconstructions.to_container().save(&recon_path)?;
    write_file(&log_path, ep.log.to_csv()?.as_bytes())?;

    let mut args = a.clone();
    args.input = absolute(&seq_path);
    args.episode.labels = lab_path.as_deref().map(absolute);
    args.out = absolute(&a.out);
    let mut m = RunManifest::new("run", a.episode.seed, &args)?;
    m.inputs = std::iter::once(absolute(&seq_path)).chain(lab_path.as_deref().map(absolute)).collect();
    if a.episode.denoiser != "gaussian" {
        m.inputs.push(absolute(Path::new(&a.episode.denoiser)));
    }
    m.outputs = vec![absolute(&recon_path), absolute(&log_path)];
    m.resolved = resolved(&cfg, &d, &seq)?;
    m.write(&a.out)?;

    // metrics are taken on the acquisition grid, before any scan conversion
    print!("{} frames, mean PSNR {:.3} dB ({} grid)", ep.log.rows.len(), ep.log.mean_psnr(), format!("{:?}", seq.grid().kind()).to_lowercase());
    if let Some(g) = ep.log.mean_gcnr() {
        print!(", mean gCNR {g:.4}");
    }
    println!(" -> {}", a.out.display());
    Ok(())
}

/// Median wall time of `reps` entropy-map evaluations over `n` particles.
fn time_entropy(frame_shape: &[usize], n: usize, sigma_x2: f64, reps: usize) -> Result<f64> {
    let beliefs: Vec<ArrayD<f64>> = (0..n)
        .map(|p| {
            let mut i = 0u64;
            ArrayD::from_shape_simple_fn(IxDyn(frame_shape), || {
                i += 1;
                ((i * 7919 + p as u64 * 104_729) as f64).sin() * 0.5
            })
        })
        .collect();
    entropy_map(&beliefs, sigma_x2)?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(entropy_map(std::hint::black_box(&beliefs), sigma_x2)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    if a.bench_frames == 0 || a.reps == 0 {
        return Err(Error::InvalidInput("--bench-frames and --reps must be >= 1".into()));
    }
    let (seq, labels, seq_path) = match &a.input {
        Some(p) => {
            let path = resolve_sequence_path(p);
            let seq = load_sequence(&path)?;
            let labels = labels_path(&a.episode.labels, &path).map(|l| load_labels(&l, &seq)).transpose()?;
            (seq, labels, Some(path))
        }
        None => {
            let ph = generate_phantom(&PhantomParams {
                frames: a.bench_frames,
                seed: a.episode.seed,
                ..PhantomParams::default()
            })?;
            (ph.sequence, Some(ph.labels), None)
        }
    };
    let s = make_cosine_schedule(a.episode.tau_max)?;
    let mut cfg = episode_config(&a.episode)?;
    cfg.record_timings = true;
    cfg.frame_limit = Some(a.bench_frames.min(a.episode.frames.unwrap_or(usize::MAX)));
    cfg.validate(seq.grid().num_lines(), &s)?;
    let d = load_denoiser(&a.episode, *seq.grid(), &s)?;

    let ep = run_episode(&seq, labels.as_ref(), &d, &s, &cfg)?;
    let st = ep.stages;
    let n = st.frames.max(1) as f64;
    let rows = [
        ("denoiser eval", st.denoise_ms),
        ("guidance", st.guidance_ms),
        ("entropy map", st.entropy_ms),
        ("k-greedy", st.selection_ms),
        ("total", st.total_ms),
    ];
    let perception: f64 = ep.log.rows.iter().map(|r| r.perception_ms).sum::<f64>() / n;
    let action: f64 = ep.log.rows.iter().map(|r| r.action_ms).sum::<f64>() / n;
    let fps = 1e3 * n / st.total_ms.max(f64::MIN_POSITIVE);

    let frame_shape = seq.grid().frame_shape();
    let np = cfg.particles;
    let t1 = time_entropy(&frame_shape, np, cfg.policy.sigma_x2, a.reps)?;
    let t2 = time_entropy(&frame_shape, 2 * np, cfg.policy.sigma_x2, a.reps)?;
    let ratio = t2 / t1;

    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    println!(
        "environment: {} {}, {} threads, {} build, denoiser {}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        threads,
        if cfg!(debug_assertions) { "debug" } else { "release" },
        d.kind()
    );
    println!(
        "episode: {} frames of {:?}, {} particles, {} steps, K={}",
        st.frames, frame_shape, np, a.episode.steps, a.episode.lines_per_frame
    );
    println!("{:<16} {:>12} {:>12}", "stage", "total_ms", "ms_per_frame");
    let mut csv = String::from("stage,total_ms,ms_per_frame\n");
    for (name, total) in rows {
        println!("{name:<16} {total:>12.3} {:>12.4}", total / n);
        csv.push_str(&format!("{name},{total},{}\n", total / n));
    }
    println!("perception {perception:.4} ms/frame, action {action:.4} ms/frame");
    println!("frames/s: {fps:.2}");
    println!("entropy map: N_p={np} {t1:.5} ms, N_p={} {t2:.5} ms, ratio {ratio:.2}", 2 * np);
    csv.push_str(&format!("perception,{},{perception}\naction,{},{action}\n", perception * n, action * n));
    csv.push_str(&format!("frames_per_s,,{fps}\nentropy_ratio,,{ratio}\n"));

    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join(BENCH_FILE);
        write_file(&path, csv.as_bytes())?;
        let mut args = a.clone();
        args.input = seq_path.as_deref().map(absolute);
        args.out = Some(absolute(out));
        let mut m = RunManifest::new("bench", a.episode.seed, &args)?;
        m.inputs = seq_path.as_deref().map(absolute).into_iter().collect();
        m.outputs = vec![absolute(&path)];
        m.resolved = resolved(&cfg, &d, &seq)?;
        m.write(out)?;
    }
    Ok(())
}

/// `.ulsa` sequence files named by `paths`: files as given, directories
/// scanned for sequence files and for `seq.ulsa` one level down. Label
/// files are skipped.
fn collect_sequence_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if !p.is_dir() {
            out.push(p.clone());
            continue;
        }
        let mut found = Vec::new();
        for entry in fs::read_dir(p).map_err(io_err(p))? {
            let path = entry.map_err(io_err(p))?.path();
            if path.is_dir() {
                let inner = path.join(SEQUENCE_FILE);
                if inner.is_file() {
                    found.push(inner);
                }
            } else if path.extension().is_some_and(|e| e == "ulsa") && path.file_name().is_some_and(|n| n != LABELS_FILE) {
                found.push(path);
            }
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let files = collect_sequence_files(&a.data)?;
    let mut dataset = files.iter().map(|f| load_sequence(f)).collect::<Result<Vec<_>>>()?;
    let grid = Grid::polar(a.phantom_size, a.phantom_size)?;
    for i in 0..a.phantoms as u64 {
        let p = PhantomParams {
            grid,
            frames: a.phantom_frames,
            seed: a.phantom_seed + i,
            amplitude: spread(i, a.phantoms as u64, a.amplitude_min, a.amplitude_max),
            ..PhantomParams::default()
        };
        dataset.push(generate_phantom(&p)?.sequence);
    }
    if dataset.is_empty() {
        return Err(Error::InvalidInput(
            "empty training set: pass --data with sequence files or --phantoms N".into(),
        ));
    }
    let s = make_cosine_schedule(a.tau_max)?;
    let n_seq = dataset.len();
    let t = Instant::now();
    let (d, report) = match a.kind {
        ModelKind::Learned => {
            let cfg = TrainConfig {
                window: a.window,
                steps: a.steps,
                batch: a.batch,
                learning_rate: a.learning_rate,
                seed: a.seed,
                ..TrainConfig::new(dataset)
            };
            let (d, r) = train_epsilon_denoiser(&cfg, &s)?;
            println!(
                "validation eps-MSE {:.4} (zero predictor {:.4}), final training loss {:.4}",
                r.val_loss, r.zero_baseline, r.final_train_loss
            );
            for (tau, l) in &r.bucket_losses {
                println!("  tau {tau:>4}: {l:.4}");
            }
            let report = serde_json::json!({
                "val_loss": r.val_loss,
                "zero_baseline": r.zero_baseline,
                "final_train_loss": r.final_train_loss,
                "bucket_losses": r.bucket_losses,
            });
            (d, report)
        }
        ModelKind::Gaussian => {
            let prior = GaussianPrior::fit(&dataset, a.window, &KernelParams::default())?;
            (DenoiserSpec::gaussian(prior), serde_json::Value::Null)
        }
    };
    save_checkpoint(&d, &a.out)?;

    let mut args = a.clone();
    args.data = a.data.iter().map(|p| absolute(p)).collect();
    args.out = absolute(&a.out);
    let mut m = RunManifest::new("train", a.seed, &args)?;
    m.inputs = files.iter().map(|f| absolute(f)).collect();
    m.outputs = vec![absolute(&a.out)];
    m.resolved = serde_json::json!({
        "sequences": n_seq,
        "stack_shape": d.stack_shape(),
        "report": report,
    });
    m.write(&a.out)?;
    println!(
        "{} model on {n_seq} sequences written to {} in {:.1} s",
        d.kind(),
        a.out.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn replay(a: &ReplayArgs) -> Result<()> {
    let m = RunManifest::read(&a.manifest)?;
    let bad = |e: serde_json::Error| Error::Format(format!("{}: {e}", a.manifest.display()));
    match m.command.as_str() {
        "phantom" => {
            let mut args: PhantomArgs = serde_json::from_value(m.args).map_err(bad)?;
            if let Some(out) = &a.out {
                args.out = out.clone();
            }
            phantom(&args)
        }
        "run" => {
            let mut args: RunArgs = serde_json::from_value(m.args).map_err(bad)?;
            if let Some(out) = &a.out {
                args.out = out.clone();
            }
            run(&args)
        }
        "bench" => {
            let mut args: BenchArgs = serde_json::from_value(m.args).map_err(bad)?;
            if a.out.is_some() {
                args.out = a.out.clone();
            }
            bench(&args)
        }
        "train" => {
            let mut args: TrainArgs = serde_json::from_value(m.args).map_err(bad)?;
            if let Some(out) = &a.out {
                args.out = out.clone();
            }
            train(&args)
        }
        other => Err(Error::Format(format!("{}: unknown command '{other}'", a.manifest.display()))),
    }
}
