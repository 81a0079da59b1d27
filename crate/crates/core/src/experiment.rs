//! Scene-level experiments shared by the CLI and the test suites.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::ensemble::mine_supervision_scoped;
use crate::error::{Error, Result};
use crate::fit::SupervisionMode;
use crate::geometry::{FlowField, FrameWindow, Vec3};
use crate::io::Archive;
use crate::metrics::{angle_deg, supervision_stability, STABILITY_ZERO_NORM};
use crate::segment::ClusterSet;
use crate::synth::Scene;

/// Anything that can hand out aligned windows plus per-object truth.
pub trait SceneSource {
    fn frame_count(&self) -> usize;
    fn window(&self, t: usize, h: usize) -> Result<FrameWindow>;
    /// Ground-truth displacement of every object from frame `t` to `t+1`.
    fn object_flow(&self, t: usize) -> Result<Vec<Vec3>>;
}

impl SceneSource for Scene {
    fn frame_count(&self) -> usize {
        self.frames.len()
    }

    fn window(&self, t: usize, h: usize) -> Result<FrameWindow> {
        self.window_at(t, h)
    }

    fn object_flow(&self, t: usize) -> Result<Vec<Vec3>> {
        Ok(self.objects.get(t).map(|o| o.iter().map(|x| x.flow).collect()).unwrap_or_default())
    }
}

impl SceneSource for Archive {
    fn frame_count(&self) -> usize {
        self.len()
    }

    fn window(&self, t: usize, h: usize) -> Result<FrameWindow> {
        Archive::window(self, t, h)
    }

    fn object_flow(&self, t: usize) -> Result<Vec<Vec3>> {
        Ok(self.objects(t)?.iter().map(|x| x.flow).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub frame: usize,
    pub cluster_id: u32,
    pub target: Vec3,
    pub gt: Vec3,
    pub error_deg: f64,
    /// Angle to the previous target of the same cluster.
    pub change_deg: Option<f64>,
    /// The cluster has no points in frame `t+1`.
    pub next_occluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRun {
    pub mode: SupervisionMode,
    pub mean_change_deg: f64,
    pub mean_error_deg: f64,
    pub mean_error_occluded_deg: Option<f64>,
    pub rows: Vec<StabilityRow>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mines targets at every admissible source frame with a zero network flow
/// and measures how their direction evolves.
pub fn stability<S: SceneSource + ?Sized>(
    source: &S,
    config: &Config,
    mode: SupervisionMode,
) -> Result<StabilityRun> {
    let h = config.history;
    let n = source.frame_count();
    if n < h + 2 {
        return Err(Error::OutOfRange { t: h as i64, h, frames: n });
    }
    let mut per_cluster: BTreeMap<u32, Vec<StabilityRow>> = BTreeMap::new();
    for t in h..n - 1 {
        let window = source.window(t, h)?;
        let clusters = ClusterSet::from_frame(window.source(), config.clustering.min_cluster_size);
        let flow = FlowField::zeros(window.source().len());
        let sup = mine_supervision_scoped(&window, &clusters, &flow, &config.ensembling, mode.scope())?;
        let gt = source.object_flow(t)?;
        let target_frame = window.target();
        for (&id, s) in &sup {
            let Some(&g) = gt.get(id as usize) else { continue };
            let next_occluded = !target_frame.cluster_id.contains(&Some(id));
            per_cluster.entry(id).or_default().push(StabilityRow {
                frame: t,
                cluster_id: id,
                target: s.target,
                gt: g,
                error_deg: angle_deg(&s.target, &g, STABILITY_ZERO_NORM),
                change_deg: None,
                next_occluded,
            });
        }
    }
    let mut rows = Vec::new();
    let mut changes = Vec::new();
    for (_, mut seq) in per_cluster {
        if seq.len() >= 2 {
            let targets: Vec<Vec3> = seq.iter().map(|r| r.target).collect();
            let gts: Vec<Vec3> = seq.iter().map(|r| r.gt).collect();
            let st = supervision_stability(&targets, &gts)?;
            for (r, c) in seq.iter_mut().skip(1).zip(&st.changes_deg) {
                r.change_deg = Some(*c);
            }
            changes.extend(st.changes_deg);
        }
        rows.extend(seq);
    }
    rows.sort_by_key(|r| (r.frame, r.cluster_id));
    let errors: Vec<f64> = rows.iter().map(|r| r.error_deg).collect();
    let occluded: Vec<f64> = rows.iter().filter(|r| r.next_occluded).map(|r| r.error_deg).collect();
    Ok(StabilityRun {
        mode,
        mean_change_deg: mean(&changes).unwrap_or(0.0),
        mean_error_deg: mean(&errors).unwrap_or(0.0),
        mean_error_occluded_deg: mean(&occluded),
        rows,
    })
}

pub fn stability_csv(runs: &[StabilityRun]) -> String {
    let mut s = String::from("mode,frame,cluster_id,target_x,target_y,target_z,error_deg,change_deg,next_occluded\n");
    for run in runs {
        let mode = match run.mode {
            SupervisionMode::Teflow => "teflow",
            SupervisionMode::TwoFrameBaseline => "two_frame",
        };
        for r in &run.rows {
            let change = r.change_deg.map(|c| format!("{c:.6}")).unwrap_or_default();
            s.push_str(&format!(
                "{mode},{},{},{:.9},{:.9},{:.9},{:.6},{change},{}\n",
                r.frame, r.cluster_id, r.target.x, r.target.y, r.target.z, r.error_deg, r.next_occluded
            ));
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frame: usize,
    pub history: usize,
    pub points_per_frame: Vec<usize>,
    pub clusters: usize,
    pub threads: usize,
    pub load_seconds: f64,
    pub supervise_seconds: Vec<f64>,
    pub median_seconds: f64,
}

/// Times window loading once and supervision mining `repeat` times.
pub fn bench<S: SceneSource + ?Sized>(
    source: &S,
    t: usize,
    config: &Config,
    repeat: usize,
) -> Result<BenchReport> {
    if repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    let start = Instant::now();
    let window = source.window(t, config.history)?;
    let load_seconds = start.elapsed().as_secs_f64();
    let mut times = Vec::with_capacity(repeat);
    let mut clusters = 0;
    for _ in 0..repeat {
        let start = Instant::now();
        let cs = ClusterSet::from_frame(window.source(), config.clustering.min_cluster_size);
        let flow = FlowField::zeros(window.source().len());
        let sup = mine_supervision_scoped(
            &window,
            &cs,
            &flow,
            &config.ensembling,
            crate::ensemble::Scope::Window,
        )?;
        times.push(start.elapsed().as_secs_f64());
        clusters = sup.len();
    }
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BenchReport {
        frame: t,
        history: config.history,
        points_per_frame: window.frames.iter().map(|f| f.len()).collect(),
        clusters,
        threads: rayon::current_num_threads(),
        load_seconds,
        median_seconds: sorted[sorted.len() / 2],
        supervise_seconds: times,
    })
}
