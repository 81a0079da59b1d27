//! Temporal ensembling of per-cluster motion hypotheses.
//!
//! For every dynamic cluster of the source frame a candidate pool is built
//! from the model's own mean flow (the internal candidate) and from
//! nearest-neighbor displacements to the dynamic points of every other frame
//! in the window, normalized by the temporal gap (external candidates).
//! Candidates then vote: a binary consensus matrix records directional
//! agreement, reliability weights favor recent and large motions, the
//! candidate with the largest supporting weight wins, and the target is the
//! weighted mean of the winner's supporters.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FlowField, FrameWindow, Vec3};
use crate::segment::{ClusterSet, DynamicCluster};
use crate::spatial::{dist2, NearestNeighborIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidateSource {
    Internal,
    External { frame: i64, rank: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionCandidate {
    pub vector: Vec3,
    /// Temporal distance `|t' − t|` in frames, 0 for the internal candidate.
    pub time_offset: u32,
    pub source: CandidateSource,
}

impl MotionCandidate {
    pub fn internal(vector: Vec3) -> Self {
        Self {
            vector,
            time_offset: 0,
            source: CandidateSource::Internal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub cluster_id: u32,
    /// Internal candidate first, then externals by frame (`t+1`, `t−1`, …, `t−h`)
    /// and rank.
    pub candidates: Vec<MotionCandidate>,
    /// Neighbor frames that had no dynamic points.
    pub skipped_frames: Vec<i64>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn vectors(&self) -> Vec<Vec3> {
        self.candidates.iter().map(|c| c.vector).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsemblingConfig {
    pub tau_cos: f64,
    pub top_k: usize,
    pub gamma: f64,
    pub zero_norm_eps: f64,
    pub use_consensus_matrix: bool,
    pub use_reliability_weights: bool,
    pub use_aggregation: bool,
}

impl Default for EnsemblingConfig {
    fn default() -> Self {
        Self {
            tau_cos: 0.7071,
            top_k: 5,
            gamma: 0.9,
            zero_norm_eps: 1e-6,
            use_consensus_matrix: true,
            use_reliability_weights: true,
            use_aggregation: true,
        }
    }
}

impl EnsemblingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.tau_cos) {
            return Err(Error::Config(format!("tau_cos {} outside [-1, 1]", self.tau_cos)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.zero_norm_eps >= 0.0) {
            return Err(Error::Config("zero_norm_eps must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub matrix: Vec<Vec<bool>>,
    pub weights: Vec<f64>,
    pub scores: Vec<f64>,
    pub winner: usize,
    pub target: Vec3,
    pub supporters: Vec<usize>,
}

/// Which neighbor frames contribute external candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scope {
    /// Every frame `t' ∈ {t−h, …, t−1, t+1}`.
    #[default]
    Window,
    /// Only `t + 1`, as in two-frame supervision.
    TargetOnly,
}

pub fn internal_candidate(cluster: &DynamicCluster, flow: &FlowField) -> MotionCandidate {
    let mut sum = Vec3::zeros();
    for &i in &cluster.point_indices {
        sum += flow.flow[i];
    }
    MotionCandidate::internal(sum / cluster.len() as f64)
}

/// Nearest-neighbor indices over the dynamic points of each neighbor frame.
pub struct NeighborFrames {
    source_time: i64,
    frames: Vec<(i64, Option<NearestNeighborIndex>)>,
}

impl NeighborFrames {
    pub fn new(window: &FrameWindow, scope: Scope) -> Self {
        let positions = match scope {
            Scope::Window => window.neighbor_positions(),
            Scope::TargetOnly => vec![window.source_index + 1],
        };
        let frames = positions
            .par_iter()
            .map(|&pos| {
                let f = &window.frames[pos];
                let dynamic = f.dynamic_points();
                (f.index, NearestNeighborIndex::build(&dynamic).ok())
            })
            .collect();
        Self {
            source_time: window.source_time(),
            frames,
        }
    }

    /// External candidates of `cluster` (whose points live in `source_points`)
    /// plus the frames skipped for lack of dynamic points.
    pub fn candidates(
        &self,
        cluster: &DynamicCluster,
        source_points: &[Vec3],
        top_k: usize,
    ) -> (Vec<MotionCandidate>, Vec<i64>) {
        let mut out = Vec::new();
        let mut skipped = Vec::new();
        let take = top_k.min(cluster.len());
        for (frame, index) in &self.frames {
            let Some(index) = index else {
                skipped.push(*frame);
                continue;
            };
            if take == 0 {
                continue;
            }
            let gap = frame - self.source_time;
            let mut corr: Vec<(f64, usize, Vec3, Vec3)> = cluster
                .point_indices
                .iter()
                .map(|&i| {
                    let p = source_points[i];
                    let nn = index.nearest(&p).point;
                    (dist2(&nn, &p), i, p, nn)
                })
                .collect();
            corr.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (rank, (_, _, p, nn)) in corr.into_iter().take(take).enumerate() {
                out.push(MotionCandidate {
                    vector: (nn - p) / gap as f64,
                    time_offset: gap.unsigned_abs() as u32,
                    source: CandidateSource::External {
                        frame: *frame,
                        rank,
                    },
                });
            }
        }
        (out, skipped)
    }
}

pub fn external_candidates(
    cluster: &DynamicCluster,
    window: &FrameWindow,
    top_k: usize,
) -> (Vec<MotionCandidate>, Vec<i64>) {
    NeighborFrames::new(window, Scope::Window).candidates(cluster, &window.source().points, top_k)
}

pub fn build_pool(
    cluster: &DynamicCluster,
    window: &FrameWindow,
    flow: &FlowField,
    config: &EnsemblingConfig,
) -> CandidatePool {
    let neighbors = NeighborFrames::new(window, Scope::Window);
    pool_with(&neighbors, cluster, window, flow, config)
}

fn pool_with(
    neighbors: &NeighborFrames,
    cluster: &DynamicCluster,
    window: &FrameWindow,
    flow: &FlowField,
    config: &EnsemblingConfig,
) -> CandidatePool {
    let mut candidates = vec![internal_candidate(cluster, flow)];
    let (ext, skipped_frames) =
        neighbors.candidates(cluster, &window.source().points, config.top_k);
    candidates.extend(ext);
    CandidatePool {
        cluster_id: cluster.cluster_id,
        candidates,
        skipped_frames,
    }
}

#[inline]
fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a.x * b.x + a.y * b.y + a.z * b.z
}

/// Binary directional agreement. Vectors shorter than `zero_norm_eps` have
/// cosine 0 with everything but themselves.
pub fn consensus_matrix(vectors: &[Vec3], tau_cos: f64, zero_norm_eps: f64) -> Vec<Vec<bool>> {
    let n = vectors.len();
    let norms: Vec<f64> = vectors.iter().map(|v| dot(v, v).sqrt()).collect();
    let mut m = vec![vec![false; n]; n];
    for a in 0..n {
        m[a][a] = true;
        for b in a + 1..n {
            let cos = if norms[a] < zero_norm_eps || norms[b] < zero_norm_eps {
                0.0
            } else {
                dot(&vectors[a], &vectors[b]) / (norms[a] * norms[b])
            };
            let agree = cos > tau_cos;
            m[a][b] = agree;
            m[b][a] = agree;
        }
    }
    m
}

/// `γ^m · (1 + ‖f‖²)` per candidate.
pub fn reliability_weights(pool: &[MotionCandidate], gamma: f64) -> Vec<f64> {
    pool.iter()
        .map(|c| {
            let decay = (0..c.time_offset).fold(1.0, |acc, _| acc * gamma);
            decay * (1.0 + dot(&c.vector, &c.vector))
        })
        .collect()
}

pub fn vote_and_aggregate(pool: &[MotionCandidate], config: &EnsemblingConfig) -> ConsensusResult {
    assert!(!pool.is_empty(), "candidate pool must not be empty");
    let n = pool.len();
    let vectors: Vec<Vec3> = pool.iter().map(|c| c.vector).collect();
    let matrix = if config.use_consensus_matrix {
        consensus_matrix(&vectors, config.tau_cos, config.zero_norm_eps)
    } else {
        vec![vec![true; n]; n]
    };
    let weights = if config.use_reliability_weights {
        reliability_weights(pool, config.gamma)
    } else {
        vec![1.0; n]
    };
    let scores: Vec<f64> = matrix
        .iter()
        .map(|row| {
            row.iter()
                .zip(&weights)
                .filter(|(&m, _)| m)
                .fold(0.0, |s, (_, &w)| s + w)
        })
        .collect();
    let mut winner = 0;
    for i in 1..n {
        if scores[i] > scores[winner] {
            winner = i;
        }
    }
    let supporters: Vec<usize> = (0..n).filter(|&b| matrix[winner][b]).collect();
    let target = if config.use_aggregation {
        let mut num = Vec3::zeros();
        let mut den = 0.0;
        for &b in &supporters {
            num += vectors[b] * weights[b];
            den += weights[b];
        }
        num / den
    } else {
        vectors[winner]
    };
    ConsensusResult {
        matrix,
        weights,
        scores,
        winner,
        target,
        supporters,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSupervision {
    pub target: Vec3,
    pub pool: CandidatePool,
    pub consensus: ConsensusResult,
}

pub type Supervision = BTreeMap<u32, ClusterSupervision>;

/// One consensus target per dynamic cluster of the source frame.
pub fn mine_supervision(
    window: &FrameWindow,
    clusters: &ClusterSet,
    flow: &FlowField,
    config: &EnsemblingConfig,
) -> Result<Supervision> {
    mine_supervision_scoped(window, clusters, flow, config, Scope::Window)
}

pub fn mine_supervision_scoped(
    window: &FrameWindow,
    clusters: &ClusterSet,
    flow: &FlowField,
    config: &EnsemblingConfig,
    scope: Scope,
) -> Result<Supervision> {
    config.validate()?;
    window.validate().map_err(Error::InvalidWindow)?;
    flow.check_for(window.source())?;
    if clusters.is_empty() {
        return Ok(Supervision::new());
    }
    let n = window.source().len();
    for c in &clusters.clusters {
        if c.is_empty() {
            return Err(Error::Config(format!("cluster {} is empty", c.cluster_id)));
        }
        if let Some(&bad) = c.point_indices.iter().find(|&&i| i >= n) {
            return Err(Error::length(
                format!("point index of cluster {}", c.cluster_id),
                n,
                bad,
            ));
        }
    }
    let neighbors = NeighborFrames::new(window, scope);
    let mined: Vec<(u32, ClusterSupervision)> = clusters
        .clusters
        .par_iter()
        .map(|c| {
            let pool = pool_with(&neighbors, c, window, flow, config);
            let consensus = vote_and_aggregate(&pool.candidates, config);
            (
                c.cluster_id,
                ClusterSupervision {
                    target: consensus.target,
                    pool,
                    consensus,
                },
            )
        })
        .collect();
    Ok(mined.into_iter().collect())
}

/// Target vectors only.
pub fn targets_of(s: &Supervision) -> BTreeMap<u32, Vec3> {
    s.iter().map(|(&k, v)| (k, v.target)).collect()
}
