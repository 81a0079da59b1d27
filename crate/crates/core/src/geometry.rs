//! Geometric primitives, rigid transforms, frames and frame windows.
//!
//! All coordinates are `f64`. Frame windows hold point clouds that are
//! already ego-aligned into the coordinate frame of the target frame
//! (`t + 1`); the transforms that produced that alignment are retained.

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3-D vector in meters (points) or meters per frame interval (flow).
pub type Vec3 = Vector3<f64>;

/// Maximum entry of `RᵀR − I` accepted for a rotation.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[inline]
pub fn is_finite(v: &Vec3) -> bool {
    v.x.is_finite() && v.y.is_finite() && v.z.is_finite()
}

/// Proper rigid motion `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !rotation.iter().all(|v| v.is_finite()) || !is_finite(&translation) {
            return Err(Error::InvalidTransform("non-finite entry".into()));
        }
        let residual = rotation.transpose() * rotation - Matrix3::identity();
        let worst = residual.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if worst > ORTHONORMAL_TOL {
            return Err(Error::InvalidTransform(format!(
                "rotation not orthonormal (max |RᵀR − I| = {worst:e})"
            )));
        }
        if rotation.determinant() <= 0.0 {
            return Err(Error::InvalidTransform("rotation has determinant ≤ 0".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about +z by `yaw` radians followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        #[rustfmt::skip]
        let rotation = Matrix3::new(
            c, -s, 0.0,
            s, c, 0.0,
            0.0, 0.0, 1.0,
        );
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Homogeneous 4×4 matrix, row-major.
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::length("4x4 transform", 16, m.len()));
        }
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::InvalidTransform(
                "last row must be (0, 0, 0, 1)".into(),
            ));
        }
        #[rustfmt::skip]
        let rotation = Matrix3::new(
            m[0], m[1], m[2],
            m[4], m[5], m[6],
            m[8], m[9], m[10],
        );
        Self::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }
}

pub fn apply_transform(t: &RigidTransform, cloud: &[Vec3]) -> Vec<Vec3> {
    cloud.iter().map(|p| t.apply(p)).collect()
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

/// One LiDAR sweep with per-point segmentation labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub index: i64,
    pub points: Vec<Vec3>,
    pub dynamic_mask: Vec<bool>,
    pub cluster_id: Vec<Option<u32>>,
}

impl Frame {
    /// A frame with every point marked static.
    pub fn unlabeled(index: i64, points: Vec<Vec3>) -> Self {
        let n = points.len();
        Self {
            index,
            points,
            dynamic_mask: vec![false; n],
            cluster_id: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dynamic_points(&self) -> Vec<Vec3> {
        self.points
            .iter()
            .zip(&self.dynamic_mask)
            .filter(|(_, &d)| d)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn static_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.dynamic_mask[i]).collect()
    }
}

/// A validation finding on a frame window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    TooFewFrames { frames: usize },
    SourceNotSecondToLast { source_index: usize, frames: usize },
    NonContiguousIndices { position: usize, expected: i64, found: i64 },
    TransformCountMismatch { frames: usize, transforms: usize },
    MaskLengthMismatch { frame: i64, points: usize, mask: usize },
    ClusterLengthMismatch { frame: i64, points: usize, labels: usize },
    NonFiniteCoordinate { frame: i64, point: usize },
    ClusterOnStaticPoint { frame: i64, point: usize },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::TooFewFrames { frames } => {
                write!(f, "window needs at least 3 frames (h >= 1), got {frames}")
            }
            Diagnostic::SourceNotSecondToLast {
                source_index,
                frames,
            } => write!(
                f,
                "source position {source_index} is not second-to-last of {frames} frames"
            ),
            Diagnostic::NonContiguousIndices {
                position,
                expected,
                found,
            } => write!(
                f,
                "non-contiguous indices: frame at position {position} has index {found}, expected {expected}"
            ),
            Diagnostic::TransformCountMismatch { frames, transforms } => write!(
                f,
                "{transforms} ego transforms for {frames} frames"
            ),
            Diagnostic::MaskLengthMismatch {
                frame,
                points,
                mask,
            } => write!(
                f,
                "mask-length mismatch in frame {frame}: {points} points, {mask} mask entries"
            ),
            Diagnostic::ClusterLengthMismatch {
                frame,
                points,
                labels,
            } => write!(
                f,
                "cluster-label length mismatch in frame {frame}: {points} points, {labels} labels"
            ),
            Diagnostic::NonFiniteCoordinate { frame, point } => {
                write!(f, "non-finite coordinate in frame {frame} at point {point}")
            }
            Diagnostic::ClusterOnStaticPoint { frame, point } => write!(
                f,
                "cluster id on static point {point} in frame {frame}"
            ),
        }
    }
}

/// Ego-aligned frames `t−h, …, t, t+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    pub frames: Vec<Frame>,
    /// Position of the source frame `t` in `frames`.
    pub source_index: usize,
    /// Per-frame transform into the coordinate frame of `t + 1`.
    pub ego_transforms: Vec<RigidTransform>,
}

impl FrameWindow {
    /// Builds a window from frames that are already ego-aligned.
    pub fn new(frames: Vec<Frame>, ego_transforms: Vec<RigidTransform>) -> Result<Self> {
        let source_index = frames.len().saturating_sub(2);
        let w = Self {
            frames,
            source_index,
            ego_transforms,
        };
        w.validate().map_err(Error::InvalidWindow)?;
        Ok(w)
    }

    /// Builds a window from sensor-frame clouds, aligning each with its transform.
    pub fn align(mut frames: Vec<Frame>, ego_transforms: Vec<RigidTransform>) -> Result<Self> {
        if frames.len() == ego_transforms.len() {
            for (f, t) in frames.iter_mut().zip(&ego_transforms) {
                for p in &mut f.points {
                    *p = t.apply(p);
                }
            }
        }
        Self::new(frames, ego_transforms)
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<Diagnostic>> {
        let d = validate_window(self);
        if d.is_empty() {
            Ok(())
        } else {
            Err(d)
        }
    }

    /// Number of past frames `h`.
    pub fn history(&self) -> usize {
        self.source_index
    }

    pub fn source(&self) -> &Frame {
        &self.frames[self.source_index]
    }

    pub fn target(&self) -> &Frame {
        &self.frames[self.source_index + 1]
    }

    pub fn source_time(&self) -> i64 {
        self.source().index
    }

    /// Positions of the neighbor frames in candidate order: `t+1`, then
    /// `t−1, t−2, …, t−h`.
    pub fn neighbor_positions(&self) -> Vec<usize> {
        let mut out = vec![self.source_index + 1];
        out.extend((0..self.source_index).rev());
        out
    }
}

pub fn validate_window(w: &FrameWindow) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let n = w.frames.len();
    if n < 3 {
        out.push(Diagnostic::TooFewFrames { frames: n });
    }
    if n >= 2 && w.source_index != n - 2 {
        out.push(Diagnostic::SourceNotSecondToLast {
            source_index: w.source_index,
            frames: n,
        });
    }
    if w.ego_transforms.len() != n {
        out.push(Diagnostic::TransformCountMismatch {
            frames: n,
            transforms: w.ego_transforms.len(),
        });
    }
    for (pos, pair) in w.frames.windows(2).enumerate() {
        let expected = pair[0].index + 1;
        if pair[1].index != expected {
            out.push(Diagnostic::NonContiguousIndices {
                position: pos + 1,
                expected,
                found: pair[1].index,
            });
        }
    }
    for f in &w.frames {
        out.extend(validate_frame(f));
    }
    out
}

pub(crate) fn validate_frame(f: &Frame) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if f.dynamic_mask.len() != f.points.len() {
        out.push(Diagnostic::MaskLengthMismatch {
            frame: f.index,
            points: f.points.len(),
            mask: f.dynamic_mask.len(),
        });
    }
    if f.cluster_id.len() != f.points.len() {
        out.push(Diagnostic::ClusterLengthMismatch {
            frame: f.index,
            points: f.points.len(),
            labels: f.cluster_id.len(),
        });
    }
    for (i, p) in f.points.iter().enumerate() {
        if !is_finite(p) {
            out.push(Diagnostic::NonFiniteCoordinate {
                frame: f.index,
                point: i,
            });
        }
    }
    for (i, (c, d)) in f.cluster_id.iter().zip(&f.dynamic_mask).enumerate() {
        if c.is_some() && !d {
            out.push(Diagnostic::ClusterOnStaticPoint {
                frame: f.index,
                point: i,
            });
        }
    }
    out
}

/// Per-point residual flow of the source frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowField {
    pub flow: Vec<Vec3>,
}

impl FlowField {
    pub fn new(flow: Vec<Vec3>) -> Self {
        Self { flow }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            flow: vec![Vec3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.flow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flow.is_empty()
    }

    pub fn check_for(&self, frame: &Frame) -> Result<()> {
        if self.flow.len() != frame.len() {
            return Err(Error::length("flow field", frame.len(), self.flow.len()));
        }
        if let Some(i) = self.flow.iter().position(|f| !is_finite(f)) {
            return Err(Error::Config(format!("non-finite flow at point {i}")));
        }
        Ok(())
    }
}
