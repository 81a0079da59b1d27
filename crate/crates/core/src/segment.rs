//! Static/dynamic masks and dynamic clusters.
//!
//! Labels normally arrive from an external segmenter and are attached with
//! [`ingest_labels`]. For synthetic scenes and demos a nearest-neighbor
//! motion heuristic and fixed-radius Euclidean clustering are provided.

use std::collections::BTreeMap;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{validate_frame, Diagnostic, Frame, FrameWindow, Vec3};
use crate::spatial::{dist2, NearestNeighborIndex};

pub const DEFAULT_MIN_CLUSTER_SIZE: usize = 5;
pub const DEFAULT_CLUSTER_EPS: f64 = 0.5;

/// Per-point label code used by label files.
pub const LABEL_STATIC: i32 = -1;
pub const LABEL_DYNAMIC_NOISE: i32 = -2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicCluster {
    pub cluster_id: u32,
    pub point_indices: Vec<usize>,
    pub centroid: [f64; 3],
}

impl DynamicCluster {
    pub fn new(cluster_id: u32, point_indices: Vec<usize>, points: &[Vec3]) -> Self {
        let mut c = Vec3::zeros();
        for &i in &point_indices {
            c += points[i];
        }
        if !point_indices.is_empty() {
            c /= point_indices.len() as f64;
        }
        Self {
            cluster_id,
            point_indices,
            centroid: [c.x, c.y, c.z],
        }
    }

    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<DynamicCluster>,
    pub noise: Vec<usize>,
}

impl ClusterSet {
    /// Groups the frame's labeled dynamic points by cluster id. Groups smaller
    /// than `min_cluster_size` and unlabeled dynamic points become noise.
    pub fn from_frame(frame: &Frame, min_cluster_size: usize) -> Self {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut noise = Vec::new();
        for i in 0..frame.len() {
            if !frame.dynamic_mask[i] {
                continue;
            }
            match frame.cluster_id[i] {
                Some(c) => groups.entry(c).or_default().push(i),
                None => noise.push(i),
            }
        }
        let mut clusters = Vec::new();
        for (id, idx) in groups {
            if idx.len() >= min_cluster_size {
                clusters.push(DynamicCluster::new(id, idx, &frame.points));
            } else {
                noise.extend(idx);
            }
        }
        noise.sort_unstable();
        Self { clusters, noise }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn get(&self, cluster_id: u32) -> Option<&DynamicCluster> {
        self.clusters.iter().find(|c| c.cluster_id == cluster_id)
    }

    /// Total number of clustered points.
    pub fn clustered_points(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).sum()
    }
}

/// Marks source points whose nearest neighbor in the target frame is farther
/// than `motion_threshold`.
pub fn heuristic_dynamic_mask(window: &FrameWindow, motion_threshold: f64) -> Result<Vec<bool>> {
    if !(motion_threshold > 0.0) {
        return Err(Error::Config("motion threshold must be positive".into()));
    }
    let source = window.source();
    let target = window.target();
    if target.is_empty() {
        return Ok(vec![true; source.len()]);
    }
    let index = NearestNeighborIndex::build(&target.points)?;
    let t2 = motion_threshold * motion_threshold;
    Ok(index
        .nearest_batch(&source.points)
        .into_iter()
        .map(|n| n.dist2 > t2)
        .collect())
}

fn moved_against(points: &[Vec3], reference: &[Vec3], t2: f64) -> Result<Vec<bool>> {
    if reference.is_empty() {
        return Ok(vec![true; points.len()]);
    }
    let index = NearestNeighborIndex::build(reference)?;
    Ok(index
        .nearest_batch(points)
        .into_iter()
        .map(|n| n.dist2 > t2)
        .collect())
}

/// Fallback labeling when no masks are supplied: the source is compared with
/// `t+1`, every other frame with the source, then each frame is clustered.
/// Returns the labeled window and the source clusters.
pub fn label_window_heuristic(
    window: &FrameWindow,
    motion_threshold: f64,
    eps: f64,
    min_cluster_size: usize,
) -> Result<(FrameWindow, ClusterSet)> {
    let source_mask = heuristic_dynamic_mask(window, motion_threshold)?;
    let t2 = motion_threshold * motion_threshold;
    let mut out = window.clone();
    let s = out.source_index;
    let source_points = out.frames[s].points.clone();
    let mut source_clusters = ClusterSet::default();
    for (k, frame) in out.frames.iter_mut().enumerate() {
        frame.dynamic_mask = if k == s {
            source_mask.clone()
        } else {
            moved_against(&frame.points, &source_points, t2)?
        };
        let set = cluster_frame(frame, eps, min_cluster_size)?;
        if k == s {
            source_clusters = set;
        }
    }
    out.validate().map_err(Error::InvalidWindow)?;
    Ok((out, source_clusters))
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Keeps the smaller index as root.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of the graph joining points at distance `<= eps`.
///
/// Components with fewer than `min_cluster_size` points go to noise. Ids are
/// assigned `0, 1, …` in order of each component's smallest point index.
pub fn euclidean_cluster(points: &[Vec3], eps: f64, min_cluster_size: usize) -> Result<ClusterSet> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Config("cluster eps must be positive".into()));
    }
    if min_cluster_size < 1 {
        return Err(Error::Config("min cluster size must be at least 1".into()));
    }
    let eps2 = eps * eps;
    let cell = |p: &Vec3| {
        (
            (p.x / eps).floor() as i64,
            (p.y / eps).floor() as i64,
            (p.z / eps).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let mut dsu = DisjointSet::new(points.len());
    for (i, p) in points.iter().enumerate() {
        let (cx, cy, cz) = cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in bucket {
                            if j > i && dist2(p, &points[j]) <= eps2 {
                                dsu.union(i, j);
                            }
                        }
                    }
                }
            }
        }
    }
    // Roots are component minima, so iterating in index order yields the id rule.
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..points.len() {
        let r = dsu.find(i);
        members.entry(r).or_default().push(i);
    }
    let mut set = ClusterSet::default();
    for (_, idx) in members {
        if idx.len() >= min_cluster_size {
            let id = set.clusters.len() as u32;
            set.clusters.push(DynamicCluster::new(id, idx, points));
        } else {
            set.noise.extend(idx);
        }
    }
    set.noise.sort_unstable();
    Ok(set)
}

/// Clusters the dynamic points of `frame` and writes the ids back onto it.
pub fn cluster_frame(frame: &mut Frame, eps: f64, min_cluster_size: usize) -> Result<ClusterSet> {
    let dyn_idx: Vec<usize> = (0..frame.len()).filter(|&i| frame.dynamic_mask[i]).collect();
    let pts: Vec<Vec3> = dyn_idx.iter().map(|&i| frame.points[i]).collect();
    let local = euclidean_cluster(&pts, eps, min_cluster_size)?;
    frame.cluster_id = vec![None; frame.len()];
    let mut set = ClusterSet::default();
    for c in local.clusters {
        let idx: Vec<usize> = c.point_indices.iter().map(|&k| dyn_idx[k]).collect();
        for &i in &idx {
            frame.cluster_id[i] = Some(c.cluster_id);
        }
        set.clusters
            .push(DynamicCluster::new(c.cluster_id, idx, &frame.points));
    }
    set.noise = local.noise.iter().map(|&k| dyn_idx[k]).collect();
    Ok(set)
}

/// Externally produced labels for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub dynamic_mask: Vec<bool>,
    pub cluster_id: Vec<Option<u32>>,
}

impl FrameLabels {
    /// Decodes label-file codes: −1 static, −2 dynamic noise, ≥ 0 cluster id.
    pub fn from_codes(codes: &[i32]) -> Result<Self> {
        let mut dynamic_mask = Vec::with_capacity(codes.len());
        let mut cluster_id = Vec::with_capacity(codes.len());
        for (i, &c) in codes.iter().enumerate() {
            match c {
                LABEL_STATIC => {
                    dynamic_mask.push(false);
                    cluster_id.push(None);
                }
                LABEL_DYNAMIC_NOISE => {
                    dynamic_mask.push(true);
                    cluster_id.push(None);
                }
                c if c >= 0 => {
                    dynamic_mask.push(true);
                    cluster_id.push(Some(c as u32));
                }
                c => {
                    return Err(Error::Config(format!("invalid label code {c} at point {i}")));
                }
            }
        }
        Ok(Self {
            dynamic_mask,
            cluster_id,
        })
    }

    pub fn to_codes(frame: &Frame) -> Vec<i32> {
        frame
            .dynamic_mask
            .iter()
            .zip(&frame.cluster_id)
            .map(|(&d, c)| match (d, c) {
                (false, _) => LABEL_STATIC,
                (true, None) => LABEL_DYNAMIC_NOISE,
                (true, Some(id)) => *id as i32,
            })
            .collect()
    }
}

/// Attaches labels to every frame of the window. Cluster ids on
/// static-masked points are dropped and reported.
pub fn ingest_labels(
    window: &FrameWindow,
    labels: &[FrameLabels],
) -> Result<(FrameWindow, Vec<Diagnostic>)> {
    if labels.len() != window.frames.len() {
        return Err(Error::length("label frames", window.frames.len(), labels.len()));
    }
    let mut out = window.clone();
    let mut diagnostics = Vec::new();
    for (frame, l) in out.frames.iter_mut().zip(labels) {
        if l.dynamic_mask.len() != frame.len() {
            return Err(Error::length(
                format!("dynamic mask of frame {}", frame.index),
                frame.len(),
                l.dynamic_mask.len(),
            ));
        }
        if l.cluster_id.len() != frame.len() {
            return Err(Error::length(
                format!("cluster ids of frame {}", frame.index),
                frame.len(),
                l.cluster_id.len(),
            ));
        }
        frame.dynamic_mask = l.dynamic_mask.clone();
        frame.cluster_id = l.cluster_id.clone();
        for i in 0..frame.len() {
            if frame.cluster_id[i].is_some() && !frame.dynamic_mask[i] {
                diagnostics.push(Diagnostic::ClusterOnStaticPoint {
                    frame: frame.index,
                    point: i,
                });
                frame.cluster_id[i] = None;
            }
        }
        let remaining = validate_frame(frame);
        if !remaining.is_empty() {
            return Err(Error::InvalidWindow(remaining));
        }
    }
    out.validate().map_err(Error::InvalidWindow)?;
    Ok((out, diagnostics))
}
