//! Self-supervised objective: dynamic cluster loss, static loss and a
//! truncated multi-frame Chamfer consistency term, plus their analytic
//! gradient with respect to the per-point flow.
//!
//! Targets are constants. Chamfer nearest-neighbor correspondences are
//! re-established on every evaluation and held fixed when differentiating.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FlowField, FrameWindow, Vec3};
use crate::segment::ClusterSet;
use crate::spatial::NearestNeighborIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DclsMode {
    #[default]
    Both,
    PointOnly,
    ClusterOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub enable_dcls: bool,
    pub enable_static: bool,
    pub enable_geom: bool,
    pub dcls_mode: DclsMode,
    /// Chamfer distances are clamped at `truncation²`.
    pub chamfer_truncation: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            enable_dcls: true,
            enable_static: true,
            enable_geom: true,
            dcls_mode: DclsMode::Both,
            chamfer_truncation: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.chamfer_truncation > 0.0) {
            return Err(Error::Config("chamfer truncation must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLoss {
    pub cluster_id: u32,
    pub points: usize,
    pub mean_sq_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub dcls_point_level: f64,
    pub dcls_cluster_level: f64,
    pub dcls_total: f64,
    pub static_loss: f64,
    pub geom_loss: f64,
    pub total: f64,
    pub disabled: Vec<String>,
    pub per_cluster: Vec<ClusterLoss>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DclsTerms {
    pub point_level: f64,
    pub cluster_level: f64,
}

fn per_cluster_errors(
    flow: &FlowField,
    clusters: &ClusterSet,
    targets: &BTreeMap<u32, Vec3>,
) -> Result<Vec<ClusterLoss>> {
    clusters
        .clusters
        .iter()
        .map(|c| {
            let target = targets
                .get(&c.cluster_id)
                .ok_or(Error::MissingTarget(c.cluster_id))?;
            let mut sum = 0.0;
            for &i in &c.point_indices {
                sum += (flow.flow[i] - target).norm_squared();
            }
            Ok(ClusterLoss {
                cluster_id: c.cluster_id,
                points: c.len(),
                mean_sq_error: sum / c.len() as f64,
            })
        })
        .collect()
}

pub fn dynamic_cluster_loss(
    flow: &FlowField,
    clusters: &ClusterSet,
    targets: &BTreeMap<u32, Vec3>,
) -> Result<DclsTerms> {
    let per = per_cluster_errors(flow, clusters, targets)?;
    Ok(dcls_from(&per))
}

fn dcls_from(per: &[ClusterLoss]) -> DclsTerms {
    if per.is_empty() {
        return DclsTerms::default();
    }
    let total_points: usize = per.iter().map(|c| c.points).sum();
    let sum_sq: f64 = per
        .iter()
        .map(|c| c.mean_sq_error * c.points as f64)
        .sum();
    let cluster_mean: f64 = per.iter().map(|c| c.mean_sq_error).sum::<f64>() / per.len() as f64;
    DclsTerms {
        point_level: sum_sq / total_points as f64,
        cluster_level: cluster_mean,
    }
}

pub fn static_loss(flow: &FlowField, static_indices: &[usize]) -> f64 {
    if static_indices.is_empty() {
        return 0.0;
    }
    let sum: f64 = static_indices
        .iter()
        .map(|&i| flow.flow[i].norm_squared())
        .sum();
    sum / static_indices.len() as f64
}

/// The moving side of a Chamfer pair: warped point `j` is
/// `base[j] + scale · flow[flow_index[j]]` (or `base[j]` when unwarped).
struct Warped {
    points: Vec<Vec3>,
    flow_index: Vec<Option<usize>>,
    scale: f64,
}

/// Symmetric truncated Chamfer distance `½(fwd + bwd)`; accumulates
/// `weight · ∂/∂flow` into `grad` when given.
fn chamfer(
    a: &Warped,
    b_points: &[Vec3],
    b_index: &NearestNeighborIndex,
    trunc2: f64,
    weight: f64,
    mut grad: Option<&mut [Vec3]>,
) -> f64 {
    if a.points.is_empty() || b_points.is_empty() {
        return 0.0;
    }
    let na = a.points.len() as f64;
    let nb = b_points.len() as f64;

    let fwd_nn = b_index.nearest_batch(&a.points);
    let mut fwd = 0.0;
    for (j, nn) in fwd_nn.iter().enumerate() {
        if nn.dist2 < trunc2 {
            fwd += nn.dist2;
            if let (Some(g), Some(fi)) = (grad.as_deref_mut(), a.flow_index[j]) {
                let coef = weight * 0.5 * 2.0 * a.scale / na;
                g[fi] += (a.points[j] - nn.point) * coef;
            }
        } else {
            fwd += trunc2;
        }
    }
    fwd /= na;

    let a_index = NearestNeighborIndex::build(&a.points).expect("non-empty");
    let bwd_nn = a_index.nearest_batch(b_points);
    let mut bwd = 0.0;
    for (j, nn) in bwd_nn.iter().enumerate() {
        if nn.dist2 < trunc2 {
            bwd += nn.dist2;
            if let (Some(g), Some(fi)) = (grad.as_deref_mut(), a.flow_index[nn.index]) {
                let coef = weight * 0.5 * 2.0 * a.scale / nb;
                g[fi] += (nn.point - b_points[j]) * coef;
            }
        } else {
            bwd += trunc2;
        }
    }
    bwd /= nb;

    0.5 * (fwd + bwd)
}

/// Fixed (non-warped) sides of every Chamfer term of a window.
pub struct GeometryContext {
    source_time: i64,
    /// `(frame time, dynamic points, index)` for neighbor frames with dynamic points.
    dynamic: Vec<(i64, Vec<Vec3>, NearestNeighborIndex)>,
    target: Option<(Vec<Vec3>, NearestNeighborIndex)>,
}

impl GeometryContext {
    pub fn new(window: &FrameWindow) -> Self {
        let dynamic = window
            .neighbor_positions()
            .into_iter()
            .filter_map(|pos| {
                let f = &window.frames[pos];
                let pts = f.dynamic_points();
                let idx = NearestNeighborIndex::build(&pts).ok()?;
                Some((f.index, pts, idx))
            })
            .collect();
        let target_pts = window.target().points.clone();
        let target = NearestNeighborIndex::build(&target_pts)
            .ok()
            .map(|i| (target_pts, i));
        Self {
            source_time: window.source_time(),
            dynamic,
            target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeomTerms {
    /// Mean over neighbor frames of the dynamic-point Chamfer distance.
    pub dynamic: f64,
    /// Two-frame Chamfer distance between the warped source and `t + 1`.
    pub full: f64,
}

impl GeomTerms {
    pub fn value(&self) -> f64 {
        0.5 * (self.dynamic + self.full)
    }
}

fn geometry_terms(
    ctx: &GeometryContext,
    flow: &FlowField,
    window: &FrameWindow,
    truncation: f64,
    mut grad: Option<&mut [Vec3]>,
) -> GeomTerms {
    let trunc2 = truncation * truncation;
    let source = window.source();
    let dyn_idx: Vec<usize> = (0..source.len()).filter(|&i| source.dynamic_mask[i]).collect();

    let mut dynamic = 0.0;
    if !dyn_idx.is_empty() && !ctx.dynamic.is_empty() {
        let weight = 0.5 / ctx.dynamic.len() as f64;
        for (time, pts, idx) in &ctx.dynamic {
            let scale = (time - ctx.source_time) as f64;
            let warped = Warped {
                points: dyn_idx
                    .iter()
                    .map(|&i| source.points[i] + flow.flow[i] * scale)
                    .collect(),
                flow_index: dyn_idx.iter().map(|&i| Some(i)).collect(),
                scale,
            };
            dynamic += chamfer(&warped, pts, idx, trunc2, weight, grad.as_deref_mut());
        }
        dynamic /= ctx.dynamic.len() as f64;
    }

    let mut full = 0.0;
    if let Some((pts, idx)) = &ctx.target {
        let warped = Warped {
            points: (0..source.len())
                .map(|i| {
                    if source.dynamic_mask[i] {
                        source.points[i] + flow.flow[i]
                    } else {
                        source.points[i]
                    }
                })
                .collect(),
            flow_index: (0..source.len())
                .map(|i| source.dynamic_mask[i].then_some(i))
                .collect(),
            scale: 1.0,
        };
        full = chamfer(&warped, pts, idx, trunc2, 0.5, grad);
    }
    GeomTerms { dynamic, full }
}

pub fn geometric_terms(flow: &FlowField, window: &FrameWindow, truncation: f64) -> GeomTerms {
    geometry_terms(&GeometryContext::new(window), flow, window, truncation, None)
}

pub fn geometric_loss(flow: &FlowField, window: &FrameWindow, truncation: f64) -> f64 {
    geometric_terms(flow, window, truncation).value()
}

/// Evaluates the objective for one window, reusing the fixed Chamfer indices.
pub struct Objective<'a> {
    pub window: &'a FrameWindow,
    pub clusters: &'a ClusterSet,
    pub config: LossConfig,
    static_indices: Vec<usize>,
    geometry: GeometryContext,
}

impl<'a> Objective<'a> {
    pub fn new(window: &'a FrameWindow, clusters: &'a ClusterSet, config: LossConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            window,
            clusters,
            config,
            static_indices: window.source().static_indices(),
            geometry: GeometryContext::new(window),
        })
    }

    pub fn report(&self, flow: &FlowField, targets: &BTreeMap<u32, Vec3>) -> Result<LossReport> {
        flow.check_for(self.window.source())?;
        let cfg = &self.config;
        let mut report = LossReport::default();
        let per = per_cluster_errors(flow, self.clusters, targets)?;
        if cfg.enable_dcls {
            let terms = dcls_from(&per);
            if cfg.dcls_mode != DclsMode::ClusterOnly {
                report.dcls_point_level = terms.point_level;
            } else {
                report.disabled.push("dcls_point_level".into());
            }
            if cfg.dcls_mode != DclsMode::PointOnly {
                report.dcls_cluster_level = terms.cluster_level;
            } else {
                report.disabled.push("dcls_cluster_level".into());
            }
        } else {
            report.disabled.push("dcls".into());
        }
        report.dcls_total = report.dcls_point_level + report.dcls_cluster_level;
        if cfg.enable_static {
            report.static_loss = static_loss(flow, &self.static_indices);
        } else {
            report.disabled.push("static".into());
        }
        if cfg.enable_geom {
            report.geom_loss = geometry_terms(
                &self.geometry,
                flow,
                self.window,
                cfg.chamfer_truncation,
                None,
            )
            .value();
        } else {
            report.disabled.push("geom".into());
        }
        report.total = report.dcls_total + report.static_loss + report.geom_loss;
        report.per_cluster = per;
        Ok(report)
    }

    pub fn gradient(&self, flow: &FlowField, targets: &BTreeMap<u32, Vec3>) -> Result<Vec<Vec3>> {
        flow.check_for(self.window.source())?;
        let cfg = &self.config;
        let mut grad = vec![Vec3::zeros(); flow.len()];
        if cfg.enable_dcls && !self.clusters.is_empty() {
            let total_points = self.clusters.clustered_points() as f64;
            let n_clusters = self.clusters.len() as f64;
            for c in &self.clusters.clusters {
                let target = targets
                    .get(&c.cluster_id)
                    .ok_or(Error::MissingTarget(c.cluster_id))?;
                let mut coef = 0.0;
                if cfg.dcls_mode != DclsMode::ClusterOnly {
                    coef += 2.0 / total_points;
                }
                if cfg.dcls_mode != DclsMode::PointOnly {
                    coef += 2.0 / (n_clusters * c.len() as f64);
                }
                for &i in &c.point_indices {
                    grad[i] += (flow.flow[i] - target) * coef;
                }
            }
        }
        if cfg.enable_static && !self.static_indices.is_empty() {
            let coef = 2.0 / self.static_indices.len() as f64;
            for &i in &self.static_indices {
                grad[i] += flow.flow[i] * coef;
            }
        }
        if cfg.enable_geom {
            geometry_terms(
                &self.geometry,
                flow,
                self.window,
                cfg.chamfer_truncation,
                Some(&mut grad),
            );
        }
        Ok(grad)
    }
}

pub fn total_loss(
    flow: &FlowField,
    window: &FrameWindow,
    clusters: &ClusterSet,
    targets: &BTreeMap<u32, Vec3>,
    config: &LossConfig,
) -> Result<LossReport> {
    Objective::new(window, clusters, *config)?.report(flow, targets)
}

pub fn loss_gradient(
    flow: &FlowField,
    window: &FrameWindow,
    clusters: &ClusterSet,
    targets: &BTreeMap<u32, Vec3>,
    config: &LossConfig,
) -> Result<Vec<Vec3>> {
    Objective::new(window, clusters, *config)?.gradient(flow, targets)
}
