//! Autoregressive generation: per frame, refresh the intention, sample a
//! latent, decode and apply a delta, then optionally pull the pose toward the
//! reference mixture until the character nears its goal.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clip::{MotionClip, TARGET_FPS};
use crate::cvae::Cvae;
use crate::error::{Error, Result};
use crate::intention::{assemble_intention, goal_centroid_xy, ControlMask, GoalSpec, JointGoal};
use crate::kinematics::{apply_delta, forward_kinematics, ControlJoint, KinematicSkeleton, PoseState, ZMode};
use crate::rgf::{
    apply_rgf, FeedbackLatch, GmmModel, PoseFeature, StyleBank, DEFAULT_ALPHA, DEFAULT_D_GOAL,
};
use crate::seeding::derive_seed;

pub const DEFAULT_DURATION: usize = 240;
pub const DEFAULT_SUCCESS_RADIUS: f64 = 0.10;

/// Where the feedback reference comes from.
#[derive(Debug, Clone)]
pub enum RgfReference {
    Model(Arc<GmmModel>),
    Style(String),
}

#[derive(Debug, Clone)]
pub struct RgfSettings {
    pub reference: RgfReference,
    /// Used unless the selected style carries its own α.
    pub alpha: f64,
    pub d_goal: f64,
}

impl RgfSettings {
    pub fn model(gmm: Arc<GmmModel>) -> Self {
        Self {
            reference: RgfReference::Model(gmm),
            alpha: DEFAULT_ALPHA,
            d_goal: DEFAULT_D_GOAL,
        }
    }

    pub fn style(label: impl Into<String>) -> Self {
        Self {
            reference: RgfReference::Style(label.into()),
            alpha: DEFAULT_ALPHA,
            d_goal: DEFAULT_D_GOAL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub duration: usize,
    pub mask: ControlMask,
    pub goals: GoalSpec,
    pub rgf: Option<RgfSettings>,
    pub seed: u64,
    pub success_radius: f64,
    /// Decode with z = 0 instead of sampling.
    pub zero_latent: bool,
    /// Re-arm the feedback latch when goals change mid-episode. Off by
    /// default: once feedback has switched off it stays off.
    pub rearm_latch_on_goal_change: bool,
}

impl EpisodeConfig {
    pub fn new(mask: ControlMask, goals: GoalSpec) -> Self {
        Self {
            duration: DEFAULT_DURATION,
            mask,
            goals,
            rgf: None,
            seed: 0,
            success_radius: DEFAULT_SUCCESS_RADIUS,
            zero_latent: false,
            rearm_latch_on_goal_change: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration < 2 {
            return Err(Error::Config(format!("duration must be at least 2, got {}", self.duration)));
        }
        if !(self.success_radius > 0.0) {
            return Err(Error::Config("success radius must be positive".into()));
        }
        if let Some(r) = &self.rgf {
            if !(0.0..=1.0).contains(&r.alpha) {
                return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", r.alpha)));
            }
            if !(r.d_goal >= 0.0) {
                return Err(Error::Config("d_goal must be non-negative".into()));
            }
        }
        self.goals.validate(&self.mask)
    }
}

/// Serializable episode settings for configuration files and the wire. The
/// feedback reference is named by style label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    pub duration: usize,
    /// Active control joints; the joints that have goals when absent.
    pub joints: Option<Vec<ControlJoint>>,
    pub goals: GoalSpec,
    pub seed: u64,
    pub success_radius: f64,
    pub zero_latent: bool,
    pub rearm_latch_on_goal_change: bool,
    pub rgf: Option<RgfSpec>,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            duration: DEFAULT_DURATION,
            joints: None,
            goals: GoalSpec::default(),
            seed: 0,
            success_radius: DEFAULT_SUCCESS_RADIUS,
            zero_latent: false,
            rearm_latch_on_goal_change: false,
            rgf: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RgfSpec {
    pub style: String,
    pub alpha: f64,
    pub d_goal: f64,
}

impl Default for RgfSpec {
    fn default() -> Self {
        Self {
            style: DEFAULT_STYLE.into(),
            alpha: DEFAULT_ALPHA,
            d_goal: DEFAULT_D_GOAL,
        }
    }
}

/// Style label a lone reference mixture is registered under.
pub const DEFAULT_STYLE: &str = "default";

impl EpisodeSpec {
    pub fn to_config(&self) -> Result<EpisodeConfig> {
        let cfg = EpisodeConfig {
            duration: self.duration,
            mask: match &self.joints {
                Some(j) => ControlMask::from_joints(j),
                None => ControlMask::from_joints(&self.goals.joints.keys().copied().collect::<Vec<_>>()),
            },
            goals: self.goals.clone(),
            rgf: self.rgf.as_ref().map(|r| RgfSettings {
                alpha: r.alpha,
                d_goal: r.d_goal,
                ..RgfSettings::style(r.style.clone())
            }),
            seed: self.seed,
            success_radius: self.success_radius,
            zero_latent: self.zero_latent,
            rearm_latch_on_goal_change: self.rearm_latch_on_goal_change,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// What happened while producing one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDiagnostics {
    pub frame: usize,
    /// Mixture component the pose was pulled toward, when feedback ran.
    pub component: Option<usize>,
    /// Whether feedback was applied to this frame.
    pub gate: bool,
    /// Distance to goal per control slot (meters); `None` for inactive joints.
    pub dtg: [Option<f64>; 6],
    pub latent_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeTrace {
    pub frames: Vec<PoseState>,
    /// One entry per frame after the first.
    pub diagnostics: Vec<FrameDiagnostics>,
    /// (frame, label) for every style change.
    pub style_swaps: Vec<(usize, String)>,
    /// First frame of each sequential segment.
    pub segment_starts: Vec<usize>,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamp(frame: usize) -> f64 {
        frame as f64 / TARGET_FPS
    }

    pub fn to_clip(&self, skeleton_hash: u64, source: &str) -> MotionClip {
        let mut clip = MotionClip::new(TARGET_FPS, self.frames.clone(), source);
        clip.skeleton_hash = skeleton_hash;
        clip
    }

    /// Write the motion as a clip file at `path` and the diagnostics table
    /// beside it at `<path>.csv`.
    pub fn save(&self, path: &Path, skeleton_hash: u64) -> Result<()> {
        self.to_clip(skeleton_hash, "generated").save(path)?;
        let mut csv = path.as_os_str().to_owned();
        csv.push(".csv");
        let csv = PathBuf::from(csv);
        std::fs::write(&csv, self.diagnostics_csv()).map_err(|e| Error::io(&csv, e))
    }

    /// Delimited diagnostics table, one row per generated frame.
    pub fn diagnostics_csv(&self) -> String {
        let mut s = String::from("frame,time,component,gate");
        for j in ControlJoint::ALL {
            write!(s, ",dtg_{}", j.name()).unwrap();
        }
        s.push_str(",latent_seed\n");
        for d in &self.diagnostics {
            let comp = d.component.map(|c| c.to_string()).unwrap_or_default();
            write!(s, "{},{:.6},{},{}", d.frame, Self::timestamp(d.frame), comp, d.gate as u8).unwrap();
            for v in d.dtg {
                match v {
                    Some(x) => write!(s, ",{x:.6}").unwrap(),
                    None => s.push(','),
                }
            }
            writeln!(s, ",{}", d.latent_seed).unwrap();
        }
        s
    }
}

/// Shared, read-only generation resources.
#[derive(Debug, Clone)]
pub struct Generator {
    pub model: Arc<Cvae>,
    pub skeleton: Arc<KinematicSkeleton>,
    pub styles: Arc<StyleBank>,
}

impl Generator {
    pub fn new(model: Cvae, skeleton: KinematicSkeleton) -> Self {
        Self {
            model: Arc::new(model),
            skeleton: Arc::new(skeleton),
            styles: Arc::new(StyleBank::new()),
        }
    }

    pub fn with_styles(mut self, styles: StyleBank) -> Self {
        self.styles = Arc::new(styles);
        self
    }

    pub fn start(&self, initial: PoseState, cfg: EpisodeConfig) -> Result<Episode> {
        Episode::new(self.clone(), initial, cfg)
    }

    pub fn run_episode(&self, initial: &PoseState, cfg: &EpisodeConfig) -> Result<EpisodeTrace> {
        let mut ep = self.start(initial.clone(), cfg.clone())?;
        ep.run_to_end()?;
        Ok(ep.into_trace())
    }

    /// Consecutive goals, each segment continuing from the previous final
    /// pose with a re-armed feedback latch. Every segment contributes
    /// `segment_duration` frames; goal frames are relative to the segment.
    pub fn run_sequential(
        &self,
        initial: &PoseState,
        goal_list: &[GoalSpec],
        segment_duration: usize,
        cfg: &EpisodeConfig,
    ) -> Result<EpisodeTrace> {
        if goal_list.is_empty() {
            return Err(Error::Config("sequential run needs at least one goal".into()));
        }
        let mut out = EpisodeTrace::default();
        let mut pose = initial.clone();
        for (s, goals) in goal_list.iter().enumerate() {
            let mut seg = cfg.clone();
            seg.goals = goals.clone();
            // Later segments start from an already emitted frame.
            seg.duration = if s == 0 { segment_duration } else { segment_duration + 1 };
            if s > 0 {
                seg.seed = derive_seed(cfg.seed, s as u64);
            }
            let trace = self.run_episode(&pose, &seg)?;
            if s == 0 {
                out.style_swaps = trace.style_swaps.clone();
            }
            let offset = out.frames.len() - usize::from(s > 0);
            out.segment_starts.push(out.frames.len());
            pose = trace.frames.last().unwrap().clone();
            let skip = usize::from(s > 0);
            out.frames.extend(trace.frames.into_iter().skip(skip));
            out.diagnostics.extend(trace.diagnostics.into_iter().map(|mut d| {
                d.frame += offset;
                d
            }));
        }
        Ok(out)
    }

    /// Fill the motion between two keyframes: every control joint targets
    /// its position in `end` at the last frame, and feedback pulls toward
    /// `end` itself without ever switching off.
    pub fn run_inbetween(
        &self,
        start: &PoseState,
        end: &PoseState,
        duration: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<EpisodeTrace> {
        let positions = forward_kinematics(end, &self.skeleton)?;
        let mut goals = GoalSpec {
            heading: Some(end.heading_xy()?),
            ..GoalSpec::default()
        };
        for j in ControlJoint::ALL {
            goals.joints.insert(
                j,
                JointGoal {
                    position: positions[self.skeleton.control_index(j)],
                    frame: duration.saturating_sub(1),
                },
            );
        }
        let reference = GmmModel::point_mass(&PoseFeature::extract(end)?.0);
        let mut cfg = EpisodeConfig::new(ControlMask::ALL, goals);
        cfg.duration = duration;
        cfg.seed = seed;
        cfg.rgf = Some(RgfSettings {
            reference: RgfReference::Model(Arc::new(reference)),
            alpha,
            d_goal: 0.0,
        });
        self.run_episode(start, &cfg)
    }
}

#[derive(Debug, Clone)]
struct ActiveReference {
    gmm: Arc<GmmModel>,
    alpha: f64,
}

/// A generation episode in progress. Advances one frame at a time so that
/// goals, masks and styles can change between frames.
#[derive(Debug, Clone)]
pub struct Episode {
    generator: Generator,
    cfg: EpisodeConfig,
    reference: Option<ActiveReference>,
    latch: FeedbackLatch,
    trace: EpisodeTrace,
}

impl Episode {
    pub fn new(generator: Generator, initial: PoseState, cfg: EpisodeConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.mask.count() == 0 && cfg.goals.heading.is_none() {
            return Err(Error::NoActiveJointForPelvisIntention);
        }
        if !initial.is_finite() {
            return Err(Error::Config("initial pose is not finite".into()));
        }
        let reference = match &cfg.rgf {
            None => None,
            Some(r) => Some(resolve(&generator.styles, &r.reference, r.alpha)?),
        };
        let latch = FeedbackLatch::new(cfg.rgf.as_ref().map_or(DEFAULT_D_GOAL, |r| r.d_goal));
        let mut style_swaps = vec![];
        if let Some(RgfSettings {
            reference: RgfReference::Style(label),
            ..
        }) = &cfg.rgf
        {
            style_swaps.push((0, label.clone()));
        }
        Ok(Self {
            generator,
            cfg,
            reference,
            latch,
            trace: EpisodeTrace {
                frames: vec![initial],
                style_swaps,
                segment_starts: vec![0],
                ..EpisodeTrace::default()
            },
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn trace(&self) -> &EpisodeTrace {
        &self.trace
    }

    pub fn into_trace(self) -> EpisodeTrace {
        self.trace
    }

    /// Index of the most recent frame.
    pub fn frame(&self) -> usize {
        self.trace.frames.len() - 1
    }

    pub fn is_finished(&self) -> bool {
        self.trace.frames.len() >= self.cfg.duration
    }

    pub fn gate(&self) -> bool {
        self.latch.is_active()
    }

    /// Replace goals present in `patch`. The feedback latch is re-armed only
    /// under `rearm_latch_on_goal_change`.
    pub fn set_goals(&mut self, patch: &GoalSpec) -> Result<()> {
        let mut goals = self.cfg.goals.clone();
        goals.merge(patch);
        goals.validate(&self.cfg.mask)?;
        self.cfg.goals = goals;
        if self.cfg.rearm_latch_on_goal_change {
            self.latch.reset();
        }
        Ok(())
    }

    pub fn set_mask(&mut self, mask: ControlMask) -> Result<()> {
        if mask.count() == 0 && self.cfg.goals.heading.is_none() {
            return Err(Error::NoActiveJointForPelvisIntention);
        }
        self.cfg.goals.validate(&mask)?;
        self.cfg.mask = mask;
        Ok(())
    }

    /// Switch the reference mixture from the next frame on.
    pub fn set_style(&mut self, label: &str) -> Result<()> {
        let alpha = self.cfg.rgf.as_ref().map_or(DEFAULT_ALPHA, |r| r.alpha);
        let reference = RgfReference::Style(label.to_string());
        self.reference = Some(resolve(&self.generator.styles, &reference, alpha)?);
        let d_goal = self.cfg.rgf.as_ref().map_or(DEFAULT_D_GOAL, |r| r.d_goal);
        self.cfg.rgf = Some(RgfSettings {
            reference,
            alpha,
            d_goal,
        });
        self.trace.style_swaps.push((self.frame() + 1, label.to_string()));
        Ok(())
    }

    /// Produce one frame. Steps past `duration` are allowed; interactive
    /// sessions keep going as long as they are driven.
    pub fn step(&mut self) -> Result<&PoseState> {
        let i = self.frame();
        let g = &self.generator;
        let pose = &self.trace.frames[i];
        let intention = assemble_intention(pose, &g.skeleton, &self.cfg.goals, &self.cfg.mask, i)?;
        let latent_seed = derive_seed(self.cfg.seed, i as u64);
        let dim = g.model.config().latent_dim;
        let z: Vec<f64> = if self.cfg.zero_latent {
            vec![0.0; dim]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(latent_seed);
            (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        let delta = g.model.decode(pose, &z, &intention)?;
        let mut next = apply_delta(pose, &delta, ZMode::CarryForward)?;

        let mut component = None;
        let mut gate = false;
        // α = 0 is the same as no feedback, bit for bit.
        if let Some(r) = self.reference.as_ref().filter(|r| r.alpha > 0.0) {
            if self.latch.is_active() {
                let (corrected, k) = apply_rgf(&next, &r.gmm, r.alpha, true)?;
                next = corrected;
                component = k;
                gate = true;
                let centroid = goal_centroid_xy(&self.cfg.goals, &self.cfg.mask)?;
                self.latch
                    .observe(&next.pelvis_translation.xy(), centroid.as_ref());
            }
        }
        if !next.is_finite() {
            return Err(Error::Config(format!("generation diverged at frame {}", i + 1)));
        }

        let dtg = distances_to_goal(&next, &g.skeleton, &self.cfg.goals, &self.cfg.mask)?;
        self.trace.diagnostics.push(FrameDiagnostics {
            frame: i + 1,
            component,
            gate,
            dtg,
            latent_seed,
        });
        self.trace.frames.push(next);
        Ok(self.trace.frames.last().unwrap())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }
}

fn resolve(styles: &StyleBank, reference: &RgfReference, alpha: f64) -> Result<ActiveReference> {
    Ok(match reference {
        RgfReference::Model(gmm) => ActiveReference {
            gmm: gmm.clone(),
            alpha,
        },
        RgfReference::Style(label) => {
            let s = styles.get(label)?;
            ActiveReference {
                gmm: s.gmm.clone(),
                alpha: s.alpha.unwrap_or(alpha),
            }
        }
    })
}

/// Per-slot Euclidean distance between each active joint and its goal.
pub fn distances_to_goal(
    pose: &PoseState,
    skeleton: &KinematicSkeleton,
    goals: &GoalSpec,
    mask: &ControlMask,
) -> Result<[Option<f64>; 6]> {
    let mut out = [None; 6];
    if mask.count() == 0 {
        return Ok(out);
    }
    let positions = forward_kinematics(pose, skeleton)?;
    for j in mask.active_joints() {
        let g = goals.get(j).ok_or(Error::MissingGoal(j.name()))?;
        out[j.slot()] = Some((positions[skeleton.control_index(j)] - g.position).norm());
    }
    Ok(out)
}

/// Unit heading from the pelvis toward `target`, or `None` when they coincide.
pub fn heading_toward(pose: &PoseState, target: &Vector2<f64>) -> Option<Vector2<f64>> {
    let d = target - pose.pelvis_translation.xy();
    (d.norm() > 1e-9).then(|| d.normalize())
}
