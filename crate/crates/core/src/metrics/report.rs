//! Running grid cases and summarizing them.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::protocol::{GridCase, ProtocolKind};
use super::{foot_skate, mean, min_goal_distances, DEFAULT_CONTACT_HEIGHT};
use crate::error::Result;
use crate::generate::{EpisodeTrace, Generator, RgfSettings};
use crate::kinematics::PoseState;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtgAggregate {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResult {
    pub sr: f64,
    /// Mean over active joints, centimeters.
    pub dtg_cm: f64,
    pub fs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub index: usize,
    pub kind: ProtocolKind,
    pub initial: usize,
    pub target: Option<usize>,
    pub directions: Vec<usize>,
    pub height: Option<usize>,
    pub distance: Option<usize>,
    pub trial: usize,
    pub seed: u64,
    /// Means over segments (a single segment outside the sequential grid).
    pub sr: f64,
    pub dtg_cm: f64,
    pub fs: f64,
    pub segments: Vec<SegmentResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    pub sr: f64,
    pub dtg_cm: f64,
    pub dtg_aggregate: DtgAggregate,
    pub fs: f64,
    /// Per-segment means of SR, DTG (cm) and FS.
    pub segments: Vec<SegmentResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ProtocolKind,
    pub success_radius: f64,
    pub aggregate: Aggregate,
    pub cases: Vec<CaseResult>,
}

impl EvalReport {
    pub fn from_cases(
        kind: ProtocolKind,
        success_radius: f64,
        cases: Vec<CaseResult>,
        dtg: DtgAggregate,
    ) -> Self {
        let centre = |v: Vec<f64>| match dtg {
            DtgAggregate::Mean => mean(v.into_iter()).unwrap_or(0.0),
            DtgAggregate::Median => median(v),
        };
        let n_seg = cases.iter().map(|c| c.segments.len()).max().unwrap_or(0);
        let segments = (0..n_seg)
            .map(|s| {
                let seg: Vec<&SegmentResult> = cases.iter().filter_map(|c| c.segments.get(s)).collect();
                SegmentResult {
                    sr: mean(seg.iter().map(|r| r.sr)).unwrap_or(0.0),
                    dtg_cm: centre(seg.iter().map(|r| r.dtg_cm).collect()),
                    fs: mean(seg.iter().map(|r| r.fs)).unwrap_or(0.0),
                }
            })
            .collect();
        let aggregate = Aggregate {
            episodes: cases.len(),
            sr: mean(cases.iter().map(|c| c.sr)).unwrap_or(0.0),
            dtg_cm: centre(cases.iter().map(|c| c.dtg_cm).collect()),
            dtg_aggregate: dtg,
            fs: mean(cases.iter().map(|c| c.fs)).unwrap_or(0.0),
            segments,
        };
        Self {
            kind,
            success_radius,
            aggregate,
            cases,
        }
    }

    /// One row per case.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,initial,target,directions,height,distance,trial,seed,sr,dtg_cm,fs\n");
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cases {
            let dirs: Vec<String> = c.directions.iter().map(usize::to_string).collect();
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6}",
                c.index,
                c.initial,
                opt(c.target),
                dirs.join("-"),
                opt(c.height),
                opt(c.distance),
                c.trial,
                c.seed,
                c.sr,
                c.dtg_cm,
                c.fs
            )
            .unwrap();
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Generate and score one case.
pub fn evaluate_case(
    generator: &Generator,
    case: &GridCase,
    initial_poses: &[PoseState],
    rgf: Option<&RgfSettings>,
    success_radius: f64,
) -> Result<(CaseResult, EpisodeTrace)> {
    let mut cfg = case.episode_config();
    cfg.rgf = rgf.cloned();
    cfg.success_radius = success_radius;
    let initial = &initial_poses[case.initial];
    let trace = if case.goals.len() > 1 {
        generator.run_sequential(initial, &case.goals, case.duration, &cfg)?
    } else {
        generator.run_episode(initial, &cfg)?
    };
    let skel = &generator.skeleton;
    let mut segments = vec![];
    for (s, goals) in case.goals.iter().enumerate() {
        let start = trace.segment_starts[s].saturating_sub(1);
        let end = trace.segment_starts.get(s + 1).copied().unwrap_or(trace.len());
        let frames = &trace.frames[start..end];
        let d = min_goal_distances(frames, skel, goals, &case.mask)?;
        let active: Vec<f64> = d.iter().flatten().copied().collect();
        segments.push(SegmentResult {
            sr: mean(active.iter().map(|m| f64::from(u8::from(*m <= success_radius)))).unwrap_or(0.0),
            dtg_cm: 100.0 * mean(active.iter().copied()).unwrap_or(0.0),
            fs: foot_skate(frames, skel, DEFAULT_CONTACT_HEIGHT)?,
        });
    }
    let result = CaseResult {
        index: case.index,
        kind: case.kind,
        initial: case.initial,
        target: case.target,
        directions: case.directions.clone(),
        height: case.height,
        distance: case.distance,
        trial: case.trial,
        seed: case.seed,
        sr: mean(segments.iter().map(|s| s.sr)).unwrap_or(0.0),
        dtg_cm: mean(segments.iter().map(|s| s.dtg_cm)).unwrap_or(0.0),
        fs: mean(segments.iter().map(|s| s.fs)).unwrap_or(0.0),
        segments,
    };
    Ok((result, trace))
}

/// Score every case in parallel; results keep case order.
pub fn evaluate_grid(
    generator: &Generator,
    cases: &[GridCase],
    initial_poses: &[PoseState],
    rgf: Option<&RgfSettings>,
    success_radius: f64,
    dtg: DtgAggregate,
) -> Result<EvalReport> {
    let results = cases
        .par_iter()
        .map(|c| evaluate_case(generator, c, initial_poses, rgf, success_radius).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    let kind = cases.first().map_or(ProtocolKind::Single, |c| c.kind);
    Ok(EvalReport::from_cases(kind, success_radius, results, dtg))
}
