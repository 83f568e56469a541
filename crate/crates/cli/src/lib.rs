//! The `motionctl` command line: one subcommand per pipeline stage.

pub mod config;
pub mod error;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use motionctl::clip::MotionClip;
use motionctl::cvae::{Cvae, ModelConfig};
use motionctl::generate::Generator;
use motionctl::intention::{GoalSpec, JointGoal};
use motionctl::kinematics::{grounded_rest_pose, ControlJoint, KinematicSkeleton, PoseState};
use motionctl::metrics::{evaluate_grid, protocol_grid, ProtocolKind};
use motionctl::rgf::{fit_gmm, reference_features, GmmModel, StyleBank};
use motionctl::training::{preprocess, synth_dataset, Dataset, Trainer};
use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "motionctl", version, about = "Goal-conditioned motion synthesis pipeline")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Skeleton definition file (defaults to the built-in rig).
    #[arg(long, global = true)]
    pub skeleton: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Write procedurally generated clips to a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Resample, reground, window and split clips into a dataset directory.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        std_floor: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a checkpoint on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        samples_per_window: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a reference mixture to poses of a dataset's training split.
    FitGmm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        max_features: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Roll out one episode and write the clip plus a diagnostics sidecar.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        episode: EpisodeFlags,
        #[command(flatten)]
        reference: ReferenceFlags,
        /// Clip holding the initial pose (rest pose at the origin otherwise).
        #[arg(long)]
        initial: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        initial_frame: usize,
    },
    /// Run a benchmark grid and write a per-case CSV report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[command(flatten)]
        reference: ReferenceFlags,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve interactive sessions.
    Serve {
        /// `name=path` pairs; a bare path is registered under its file stem.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        /// Directory of `<label>.gmm` style mixtures.
        #[arg(long)]
        styles: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:7411")]
        tcp: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:7412")]
        http: SocketAddr,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Tiny,
    Default,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Protocol {
    Single,
    Sequential,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct EpisodeFlags {
    /// `joint=x,y,z@frame`, repeatable, e.g. `right_wrist=2,0,1.2@239`.
    #[arg(long = "goal")]
    goals: Vec<String>,
    /// Active joints (defaults to the joints that have goals).
    #[arg(long, value_delimiter = ',')]
    mask: Option<Vec<String>>,
    /// Heading goal `x,y`.
    #[arg(long)]
    heading: Option<String>,
    #[arg(long)]
    duration: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    zero_latent: bool,
}

#[derive(Debug, Args)]
pub struct ReferenceFlags {
    /// Reference mixture file, registered as the configured style label.
    #[arg(long)]
    gmm: Option<PathBuf>,
    /// Directory of style mixtures.
    #[arg(long)]
    styles: Option<PathBuf>,
    #[arg(long)]
    style: Option<String>,
    #[arg(long, value_enum)]
    rgf: Option<Switch>,
    #[arg(long)]
    alpha: Option<f64>,
}

/// Parse and run; returns the process exit status.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let skeleton = match &cli.skeleton {
        Some(p) => KinematicSkeleton::load(p)?,
        None => KinematicSkeleton::default_rig(),
    };
    match cli.command {
        Cmd::Synth { out, clips, seed } => {
            set(&mut cfg.synth.clips, clips);
            set(&mut cfg.synth.seed, seed);
            let clips = synth_dataset(cfg.synth.clips, &skeleton, &mut ChaCha8Rng::seed_from_u64(cfg.synth.seed))?;
            create_dir(&out)?;
            for (k, c) in clips.iter().enumerate() {
                c.save(&out.join(format!("clip_{k:05}.mclip")))?;
            }
            cfg.write_beside(&out)?;
            println!("wrote {} clips to {}", clips.len(), out.display());
        }
        Cmd::Preprocess {
            input,
            out,
            window,
            std_floor,
            seed,
        } => {
            set(&mut cfg.preprocess.window, window);
            set(&mut cfg.preprocess.std_floor, std_floor);
            set(&mut cfg.preprocess.seed, seed);
            let raw = load_clip_dir(&input)?;
            let data = preprocess(&raw, &skeleton, &cfg.preprocess)?;
            data.save(&out)?;
            cfg.write_beside(&out)?;
            println!(
                "{} clips -> {} / {} / {} windows",
                raw.len(),
                data.train.len(),
                data.val.len(),
                data.test.len()
            );
        }
        Cmd::Train {
            data,
            out,
            preset,
            epochs,
            lr,
            batch_size,
            samples_per_window,
            seed,
        } => {
            match preset {
                Some(Preset::Tiny) => cfg.model = ModelConfig::tiny(),
                Some(Preset::Default) => cfg.model = ModelConfig::default(),
                None => {}
            }
            set(&mut cfg.train.epochs, epochs);
            set(&mut cfg.train.learning_rate, lr);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.samples_per_window, samples_per_window);
            set(&mut cfg.train.seed, seed);
            let data = Dataset::load(&data)?;
            let model = Cvae::new(cfg.model.clone(), data.stats.clone(), cfg.train.seed)?;
            let mut trainer = Trainer::new(model, &skeleton, cfg.train.clone())?;
            let mut log = String::from("epoch,ar_steps,rollouts,total,recon,kl,joint\n");
            for _ in 0..cfg.train.epochs {
                let e = trainer.run_epoch(&data.train)?;
                let l = &e.loss;
                log.push_str(&format!(
                    "{},{},{},{:.8},{:.8},{:.8},{:.8}\n",
                    e.epoch, e.ar_steps, e.rollouts, l.total, l.recon, l.kl, l.joint
                ));
                eprintln!("epoch {:>4}  k {:>2}  loss {:.5}  ({:.1}s)", e.epoch, e.ar_steps, l.total, e.seconds);
            }
            trainer.model.save(&out)?;
            write_file(&config::sidecar(&out, ".loss.csv"), log.as_bytes())?;
            cfg.write_beside(&out)?;
        }
        Cmd::FitGmm {
            data,
            out,
            k,
            max_iter,
            stride,
            max_features,
            seed,
        } => {
            set(&mut cfg.gmm.components, k);
            set(&mut cfg.gmm.max_iter, max_iter);
            set(&mut cfg.gmm.seed, seed);
            set(&mut cfg.features.stride, stride);
            if max_features.is_some() {
                cfg.features.max_features = max_features;
            }
            let data = Dataset::load(&data)?;
            let feats = reference_features(&data.train, cfg.features.stride, cfg.features.max_features)?;
            let (gmm, log) = fit_gmm(&feats, &cfg.gmm)?;
            gmm.save(&out)?;
            cfg.write_beside(&out)?;
            println!(
                "K = {} on {} poses: {} iterations, log-likelihood {:.3}{}",
                gmm.k(),
                feats.len(),
                log.iterations,
                log.log_likelihood.last().copied().unwrap_or(f64::NAN),
                if log.converged { "" } else { " (iteration cap reached)" }
            );
        }
        Cmd::Generate {
            checkpoint,
            out,
            episode,
            reference,
            initial,
            initial_frame,
        } => {
            apply_episode_flags(&mut cfg, &episode)?;
            let styles = apply_reference_flags(&mut cfg, &reference)?;
            let model = Cvae::load(&checkpoint)?;
            cfg.model = model.config().clone();
            let generator = Generator::new(model, skeleton).with_styles(styles);
            let start = match &initial {
                Some(p) => {
                    let clip = MotionClip::load(p)?;
                    clip.frames.get(initial_frame).cloned().ok_or_else(|| {
                        CliError::Usage(format!("{} has {} frames", p.display(), clip.len()))
                    })?
                }
                None => grounded_rest_pose(&generator.skeleton)?,
            };
            let trace = generator.run_episode(&start, &cfg.episode.to_config()?)?;
            trace.save(&out, generator.skeleton.hash())?;
            cfg.write_beside(&out)?;
            let finals: Vec<String> = trace
                .diagnostics
                .last()
                .map(|d| {
                    ControlJoint::ALL
                        .iter()
                        .zip(d.dtg)
                        .filter_map(|(j, v)| v.map(|v| format!("{} {v:.3} m", j.name())))
                        .collect()
                })
                .unwrap_or_default();
            println!("{} frames; final distance to goal: {}", trace.len(), finals.join(", "));
        }
        Cmd::Evaluate {
            checkpoint,
            data,
            out,
            protocol,
            reference,
            stride,
            limit,
            seed,
        } => {
            set(&mut cfg.eval.stride, stride);
            if limit.is_some() {
                cfg.eval.limit = limit;
            }
            set(&mut cfg.grid.seed, seed);
            let styles = apply_reference_flags(&mut cfg, &reference)?;
            let model = Cvae::load(&checkpoint)?;
            cfg.model = model.config().clone();
            let generator = Generator::new(model, skeleton).with_styles(styles);
            let data = Dataset::load(&data)?;
            let kind = match protocol {
                Protocol::Single => ProtocolKind::Single,
                Protocol::Sequential => ProtocolKind::Sequential,
                Protocol::Multi => ProtocolKind::Multi,
            };
            let (initial, targets) = benchmark_poses(&data, &cfg.grid);
            let cases = protocol_grid(kind, &cfg.grid, &initial, &targets, &generator.skeleton)?;
            let cases: Vec<_> = cases
                .into_iter()
                .step_by(cfg.eval.stride.max(1))
                .take(cfg.eval.limit.unwrap_or(usize::MAX))
                .collect();
            let rgf = cfg.episode.to_config()?.rgf;
            let report = evaluate_grid(
                &generator,
                &cases,
                &initial,
                rgf.as_ref(),
                cfg.episode.success_radius,
                cfg.eval.dtg,
            )?;
            write_file(&out, report.to_csv().as_bytes())?;
            let summary = serde_json::to_string_pretty(&report.aggregate).expect("aggregates serialize");
            write_file(&config::sidecar(&out, ".summary.json"), summary.as_bytes())?;
            cfg.write_beside(&out)?;
            let a = &report.aggregate;
            println!(
                "{} episodes: SR {:.2}%  DTG {:.2} cm  FS {:.2}%",
                a.episodes,
                100.0 * a.sr,
                a.dtg_cm,
                a.fs
            );
        }
        Cmd::Serve {
            checkpoints,
            styles,
            tcp,
            http,
        } => {
            let bank = match &styles {
                Some(d) => StyleBank::load_dir(d)?,
                None => StyleBank::new(),
            };
            let mut loaded = BTreeMap::new();
            for spec in &checkpoints {
                let (name, path) = match spec.split_once('=') {
                    Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(spec);
                        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned());
                        (stem.unwrap_or_else(|| spec.clone()), p)
                    }
                };
                let g = Generator::new(Cvae::load(&path)?, skeleton.clone()).with_styles(bank.clone());
                loaded.insert(name, g);
            }
            let service = Arc::new(motionctl_service::Service::new(loaded));
            eprintln!("serving: tcp {tcp}, http {http}");
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::io(Path::new("runtime"), e))?;
            rt.block_on(motionctl_service::transport::serve(service, tcp, http))?;
        }
    }
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(p, bytes).map_err(|e| CliError::io(p, e))
}

/// Every `*.mclip` in `dir`, in file-name order.
pub fn load_clip_dir(dir: &Path) -> Result<Vec<MotionClip>> {
    let mut files = vec![];
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "mclip") {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no .mclip files in {}", dir.display())));
    }
    Ok(files.iter().map(|p| MotionClip::load(p)).collect::<motionctl::Result<_>>()?)
}

/// Initial poses are the first frames of the held-out windows; multi-joint
/// targets are their last frames.
pub fn benchmark_poses(
    data: &Dataset,
    grid: &motionctl::metrics::GridParams,
) -> (Vec<PoseState>, Vec<PoseState>) {
    let initial = data.test.iter().take(grid.initial_poses).map(|c| c.frames[0].clone()).collect();
    let targets = data
        .test
        .iter()
        .rev()
        .take(grid.targets)
        .filter_map(|c| c.frames.last().cloned())
        .collect();
    (initial, targets)
}

fn parse_floats(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("bad {what} '{s}': {e}")))?;
    if v.len() != n {
        return Err(CliError::Usage(format!("{what} '{s}' needs {n} comma-separated numbers")));
    }
    Ok(v)
}

fn parse_joint(name: &str) -> Result<ControlJoint> {
    ControlJoint::from_name(name.trim()).ok_or_else(|| CliError::Usage(format!("unknown control joint '{name}'")))
}

/// `joint=x,y,z@frame`.
pub fn parse_goal(s: &str) -> Result<(ControlJoint, JointGoal)> {
    let bad = || CliError::Usage(format!("goal '{s}' is not of the form joint=x,y,z@frame"));
    let (joint, rest) = s.split_once('=').ok_or_else(bad)?;
    let (pos, frame) = rest.split_once('@').ok_or_else(bad)?;
    let p = parse_floats(pos, 3, "goal position")?;
    let frame = frame.trim().parse().map_err(|_| bad())?;
    Ok((
        parse_joint(joint)?,
        JointGoal {
            position: Vector3::new(p[0], p[1], p[2]),
            frame,
        },
    ))
}

fn apply_episode_flags(cfg: &mut RunConfig, f: &EpisodeFlags) -> Result<()> {
    let ep = &mut cfg.episode;
    if !f.goals.is_empty() {
        let mut goals = GoalSpec::default();
        for g in &f.goals {
            let (j, goal) = parse_goal(g)?;
            goals.joints.insert(j, goal);
        }
        goals.heading = ep.goals.heading;
        ep.joints = Some(goals.joints.keys().copied().collect());
        ep.goals = goals;
    }
    if let Some(m) = &f.mask {
        ep.joints = Some(m.iter().map(|n| parse_joint(n)).collect::<Result<_>>()?);
    }
    if let Some(h) = &f.heading {
        let v = parse_floats(h, 2, "heading")?;
        ep.goals.heading = Some(Vector2::new(v[0], v[1]));
    }
    set(&mut ep.duration, f.duration);
    set(&mut ep.seed, f.seed);
    ep.zero_latent |= f.zero_latent;
    Ok(())
}

/// Resolve the feedback reference. `--rgf off` removes it; otherwise it is
/// on whenever a mixture is available.
fn apply_reference_flags(cfg: &mut RunConfig, f: &ReferenceFlags) -> Result<StyleBank> {
    let mut bank = match &f.styles {
        Some(d) => StyleBank::load_dir(d)?,
        None => StyleBank::new(),
    };
    let mut spec = cfg.episode.rgf.clone().unwrap_or_default();
    set(&mut spec.style, f.style.clone());
    set(&mut spec.alpha, f.alpha);
    if let Some(p) = &f.gmm {
        bank.insert(spec.style.clone(), GmmModel::load(p)?, None);
    }
    let enabled = match f.rgf {
        Some(Switch::Off) => false,
        Some(Switch::On) => true,
        None => cfg.episode.rgf.is_some() || !bank.is_empty(),
    };
    if enabled && bank.get(&spec.style).is_err() {
        return Err(CliError::Usage(format!(
            "feedback is on but style '{}' has no mixture (pass --gmm or --styles, or --rgf off)",
            spec.style
        )));
    }
    cfg.episode.rgf = enabled.then_some(spec);
    Ok(bank)
}
