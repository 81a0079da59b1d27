//! Direct gradient-descent fitting of a flow field against the
//! self-supervised objective, re-mining targets every iteration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ensemble::{mine_supervision_scoped, targets_of, EnsemblingConfig, Scope, Supervision};
use crate::error::{Error, Result};
use crate::geometry::{FlowField, FrameWindow, Vec3};
use crate::loss::{LossConfig, Objective};
use crate::segment::ClusterSet;

pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    PerPoint,
    #[default]
    PerClusterTranslation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    #[default]
    Teflow,
    TwoFrameBaseline,
}

impl SupervisionMode {
    pub fn scope(self) -> Scope {
        match self {
            SupervisionMode::Teflow => Scope::Window,
            SupervisionMode::TwoFrameBaseline => Scope::TargetOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub parameterization: Parameterization,
    pub supervision: SupervisionMode,
    pub step: f64,
    pub momentum: f64,
    pub max_iterations: usize,
    /// Stop once the loss decrease of one step falls below this.
    pub tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            parameterization: Parameterization::PerClusterTranslation,
            supervision: SupervisionMode::Teflow,
            step: 0.1,
            momentum: 0.5,
            max_iterations: 500,
            tolerance: 1e-10,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::Config("fit step must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.max_iterations < 1 {
            return Err(Error::Config("at least one iteration is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Loss right after re-mining, before the step.
    pub loss_remined: f64,
    /// Loss after the step, still against this iteration's targets.
    pub loss_after_step: f64,
    pub dcls: f64,
    pub static_loss: f64,
    pub geom: f64,
    /// Mean flow of each cluster after the step.
    pub cluster_flow: BTreeMap<u32, Vec3>,
    pub targets: BTreeMap<u32, Vec3>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitTrace {
    pub entries: Vec<TraceEntry>,
    pub converged: bool,
}

pub fn two_frame_baseline_targets(
    window: &FrameWindow,
    clusters: &ClusterSet,
    flow: &FlowField,
    config: &EnsemblingConfig,
) -> Result<Supervision> {
    mine_supervision_scoped(window, clusters, flow, config, Scope::TargetOnly)
}

fn cluster_means(flow: &FlowField, clusters: &ClusterSet) -> BTreeMap<u32, Vec3> {
    clusters
        .clusters
        .iter()
        .map(|c| {
            let s: Vec3 = c.point_indices.iter().map(|&i| flow.flow[i]).sum();
            (c.cluster_id, s / c.len() as f64)
        })
        .collect()
}

pub struct Fitter<'a> {
    objective: Objective<'a>,
    ensembling: EnsemblingConfig,
    config: FitConfig,
}

impl<'a> Fitter<'a> {
    pub fn new(
        window: &'a FrameWindow,
        clusters: &'a ClusterSet,
        ensembling: EnsemblingConfig,
        loss: LossConfig,
        config: FitConfig,
    ) -> Result<Self> {
        config.validate()?;
        ensembling.validate()?;
        window.validate().map_err(Error::InvalidWindow)?;
        Ok(Self {
            objective: Objective::new(window, clusters, loss)?,
            ensembling,
            config,
        })
    }

    fn mine(&self, flow: &FlowField) -> Result<BTreeMap<u32, Vec3>> {
        let s = mine_supervision_scoped(
            self.objective.window,
            self.objective.clusters,
            flow,
            &self.ensembling,
            self.config.supervision.scope(),
        )?;
        Ok(targets_of(&s))
    }

    pub fn run(&self, initial: &FlowField) -> Result<(FlowField, FitTrace)> {
        let clusters = self.objective.clusters;
        initial.check_for(self.objective.window.source())?;
        let mut flow = initial.clone();
        if self.config.parameterization == Parameterization::PerClusterTranslation {
            let means = cluster_means(&flow, clusters);
            for c in &clusters.clusters {
                for &i in &c.point_indices {
                    flow.flow[i] = means[&c.cluster_id];
                }
            }
        }
        let mut velocity = vec![Vec3::zeros(); flow.len()];
        let mut cluster_velocity: BTreeMap<u32, Vec3> =
            clusters.clusters.iter().map(|c| (c.cluster_id, Vec3::zeros())).collect();
        let mut trace = FitTrace::default();

        for iteration in 0..self.config.max_iterations {
            let targets = self.mine(&flow)?;
            let before = self.objective.report(&flow, &targets)?;
            let grad = self.objective.gradient(&flow, &targets)?;
            match self.config.parameterization {
                Parameterization::PerPoint => {
                    for (i, g) in grad.iter().enumerate() {
                        velocity[i] = velocity[i] * self.config.momentum - g * self.config.step;
                        flow.flow[i] += velocity[i];
                    }
                }
                Parameterization::PerClusterTranslation => {
                    for c in &clusters.clusters {
                        let g: Vec3 = c.point_indices.iter().map(|&i| grad[i]).sum();
                        let v = cluster_velocity.get_mut(&c.cluster_id).expect("cluster");
                        *v = *v * self.config.momentum - g * self.config.step;
                        for &i in &c.point_indices {
                            flow.flow[i] += *v;
                        }
                    }
                }
            }
            let after = self.objective.report(&flow, &targets)?;
            trace.entries.push(TraceEntry {
                iteration,
                loss_remined: before.total,
                loss_after_step: after.total,
                dcls: after.dcls_total,
                static_loss: after.static_loss,
                geom: after.geom_loss,
                cluster_flow: cluster_means(&flow, clusters),
                targets,
            });
            if !after.total.is_finite() || after.total > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    iteration,
                    loss: after.total,
                    trace: Box::new(trace),
                });
            }
            if (before.total - after.total).abs() < self.config.tolerance {
                trace.converged = true;
                break;
            }
        }
        Ok((flow, trace))
    }
}

pub fn fit(
    window: &FrameWindow,
    clusters: &ClusterSet,
    initial: &FlowField,
    ensembling: &EnsemblingConfig,
    loss: &LossConfig,
    config: &FitConfig,
) -> Result<(FlowField, FitTrace)> {
    Fitter::new(window, clusters, *ensembling, *loss, *config)?.run(initial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Frame, RigidTransform};

    fn wall_window(u: f64, h: usize) -> FrameWindow {
        let base: Vec<Vec3> = (0..40)
            .map(|i| Vec3::new(0.0, (i % 8) as f64 * 0.15, (i / 8) as f64 * 0.15))
            .collect();
        let frames = (0..h + 2)
            .map(|k| {
                let t = k as f64 - h as f64;
                Frame {
                    index: k as i64,
                    points: base.iter().map(|p| p + Vec3::new(u * t, 0.0, 0.0)).collect(),
                    dynamic_mask: vec![true; 40],
                    cluster_id: vec![Some(0); 40],
                }
            })
            .collect();
        FrameWindow::new(frames, vec![RigidTransform::identity(); h + 2]).unwrap()
    }

    #[test]
    fn starting_at_truth_converges_immediately() {
        let w = wall_window(0.3, 3);
        let cs = ClusterSet::from_frame(w.source(), 5);
        let init = FlowField::new(vec![Vec3::new(0.3, 0.0, 0.0); 40]);
        let (flow, trace) = fit(
            &w,
            &cs,
            &init,
            &Default::default(),
            &Default::default(),
            &Default::default(),
        )
        .unwrap();
        assert!(trace.converged);
        assert!(trace.entries.len() <= 2);
        assert!(trace.entries.last().unwrap().loss_after_step < 1e-20);
        assert!((flow.flow[0] - Vec3::new(0.3, 0.0, 0.0)).amax() < 1e-12);
    }

    #[test]
    fn recovers_translation_from_zero() {
        let w = wall_window(0.3, 3);
        let cs = ClusterSet::from_frame(w.source(), 5);
        let (flow, _) = fit(
            &w,
            &cs,
            &FlowField::zeros(40),
            &Default::default(),
            &Default::default(),
            &Default::default(),
        )
        .unwrap();
        assert!((flow.flow[7] - Vec3::new(0.3, 0.0, 0.0)).norm() < 0.02);
    }

    #[test]
    fn fixed_targets_decrease_monotonically() {
        let w = wall_window(0.3, 1);
        let cs = ClusterSet::from_frame(w.source(), 5);
        let cfg = LossConfig {
            enable_geom: false,
            ..Default::default()
        };
        let obj = Objective::new(&w, &cs, cfg).unwrap();
        let targets = BTreeMap::from([(0, Vec3::new(0.3, 0.1, 0.0))]);
        let mut flow = FlowField::new(
            (0..40)
                .map(|i| Vec3::new(i as f64 * 0.01, -0.2, 0.05))
                .collect(),
        );
        let mut last = obj.report(&flow, &targets).unwrap().total;
        for _ in 0..200 {
            let g = obj.gradient(&flow, &targets).unwrap();
            for (f, g) in flow.flow.iter_mut().zip(&g) {
                *f -= g * 0.01;
            }
            let now = obj.report(&flow, &targets).unwrap().total;
            assert!(now <= last);
            last = now;
        }
    }

    #[test]
    fn baseline_matches_window_consensus_at_next_frame() {
        let w = wall_window(0.3, 3);
        let cs = ClusterSet::from_frame(w.source(), 5);
        let flow = FlowField::zeros(40);
        let cfg = EnsemblingConfig::default();
        let b = two_frame_baseline_targets(&w, &cs, &flow, &cfg).unwrap();
        // Same consensus as a one-frame-history window restricted to t+1.
        let short = FrameWindow::new(
            w.frames[2..].to_vec(),
            vec![RigidTransform::identity(); 3],
        )
        .unwrap();
        let s = mine_supervision_scoped(&short, &cs, &flow, &cfg, Scope::TargetOnly).unwrap();
        assert_eq!(b[&0].target, s[&0].target);
        let full = crate::ensemble::mine_supervision(&w, &cs, &flow, &cfg).unwrap();
        assert!((b[&0].target - full[&0].target).amax() < 1e-9);
    }

    #[test]
    fn baseline_collapses_to_internal_when_next_frame_is_empty() {
        let mut w = wall_window(0.3, 3);
        let last = w.frames.len() - 1;
        w.frames[last].dynamic_mask = vec![false; 40];
        w.frames[last].cluster_id = vec![None; 40];
        let cs = ClusterSet::from_frame(w.source(), 5);
        let flow = FlowField::new(vec![Vec3::new(0.1, 0.2, 0.0); 40]);
        let b = two_frame_baseline_targets(&w, &cs, &flow, &Default::default()).unwrap();
        assert_eq!(b[&0].pool.len(), 1);
        assert!((b[&0].target - Vec3::new(0.1, 0.2, 0.0)).amax() < 1e-15);
    }

    #[test]
    fn divergence_is_reported() {
        let w = wall_window(0.3, 1);
        let cs = ClusterSet::from_frame(w.source(), 5);
        let cfg = FitConfig {
            parameterization: Parameterization::PerPoint,
            step: 500.0,
            momentum: 0.0,
            ..Default::default()
        };
        let init = FlowField::new(vec![Vec3::new(1.0, 1.0, 1.0); 40]);
        let err = fit(&w, &cs, &init, &Default::default(), &Default::default(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }
}
