//! Deterministic synthetic LiDAR scenes with exact ground-truth flow.
//!
//! Randomness comes from ChaCha8 streams: stream `1 + f` drives per-frame
//! sensor noise and dropout of frame `f`, stream `2^32 + o` the surface
//! samples of object `o`, and stream `2^40` the static background. Each
//! stream depends only on the seed and its number, so frames can be
//! generated in any order or in parallel with identical output.
//!
//! Objects are boxes (optionally with a hinged trailer) whose surface samples
//! are fixed in the body frame. A sample is emitted when its face points
//! towards the sensor, it lies within sensor range, the object is not inside
//! one of its occlusion intervals, and it survives dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FlowField, Frame, FrameWindow, RigidTransform, Vec3};
use crate::metrics::ObjectClass;

const STREAM_OBJECT: u64 = 1 << 32;
const STREAM_BACKGROUND: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub duration: usize,
    #[serde(default)]
    pub ego: EgoSpec,
    #[serde(default)]
    pub background: BackgroundSpec,
    #[serde(default)]
    pub sensor: SensorSpec,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
}

/// Ego trajectory: explicit row-major sensor-to-world poses, or a constant
/// world-frame velocity with constant yaw rate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EgoSpec {
    pub velocity: [f64; 3],
    pub yaw_rate: f64,
    pub poses: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundSpec {
    pub points: usize,
    /// Static points are uniform in `[-extent, extent]² × [0, height]`.
    pub extent: f64,
    pub height: f64,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self {
            points: 2000,
            extent: 30.0,
            height: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorSpec {
    pub range: f64,
    pub noise_sigma: f64,
    pub dropout: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            range: 80.0,
            noise_sigma: 0.0,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionSpec {
    /// World-frame translation per frame with fixed heading.
    Constant { velocity: [f64; 3] },
    /// Forward speed along the heading while the heading turns.
    Arc { speed: f64, yaw_rate: f64 },
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec::Constant {
            velocity: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrailerSpec {
    pub size: [f64; 3],
    pub samples: usize,
    /// Change of the hinge angle per frame, radians.
    #[serde(default)]
    pub hinge_rate: f64,
    /// Gap between the rear of the lead segment and the trailer front.
    #[serde(default)]
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    #[serde(default = "default_class")]
    pub class: ObjectClass,
    /// Box length (body x), width (y), height (z).
    pub size: [f64; 3],
    pub samples: usize,
    /// Initial box center in world coordinates.
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub motion: MotionSpec,
    #[serde(default)]
    pub trailer: Option<TrailerSpec>,
    /// Inclusive frame intervals during which the object emits no points.
    #[serde(default)]
    pub occlusions: Vec<[usize; 2]>,
}

fn default_class() -> ObjectClass {
    ObjectClass::Car
}

impl ObjectSpec {
    pub fn occluded_at(&self, frame: usize) -> bool {
        self.occlusions
            .iter()
            .any(|&[a, b]| frame >= a && frame <= b)
    }

    /// Body-to-world pose of the lead segment at (possibly fractional) time `t`.
    pub fn pose(&self, t: f64) -> RigidTransform {
        let p0 = Vec3::from(self.position);
        match self.motion {
            MotionSpec::Constant { velocity } => {
                RigidTransform::from_yaw(self.yaw, p0 + Vec3::from(velocity) * t)
            }
            MotionSpec::Arc { speed, yaw_rate } => {
                let yaw = self.yaw + yaw_rate * t;
                let offset = if yaw_rate.abs() < 1e-12 {
                    Vec3::new(self.yaw.cos(), self.yaw.sin(), 0.0) * (speed * t)
                } else {
                    let r = speed / yaw_rate;
                    Vec3::new(
                        r * (yaw.sin() - self.yaw.sin()),
                        r * (self.yaw.cos() - yaw.cos()),
                        0.0,
                    )
                };
                RigidTransform::from_yaw(yaw, p0 + offset)
            }
        }
    }

    pub fn trailer_pose(&self, t: f64) -> Option<RigidTransform> {
        let tr = self.trailer?;
        let hinge = RigidTransform::from_translation(Vec3::new(-self.size[0] / 2.0, 0.0, 0.0));
        let bend = RigidTransform::from_yaw(tr.hinge_rate * t, Vec3::zeros());
        // Trailer center relative to the hinge, keeping both boxes on one floor.
        let back = RigidTransform::from_translation(Vec3::new(
            -(tr.gap + tr.size[0] / 2.0),
            0.0,
            (tr.size[2] - self.size[2]) / 2.0,
        ));
        Some(self.pose(t).compose(&hinge).compose(&bend).compose(&back))
    }

    fn is_moving(&self) -> bool {
        let still = match self.motion {
            MotionSpec::Constant { velocity } => velocity == [0.0; 3],
            MotionSpec::Arc { speed, yaw_rate } => speed == 0.0 && yaw_rate == 0.0,
        };
        !still || self.trailer.is_some_and(|t| t.hinge_rate != 0.0)
    }
}

impl EgoSpec {
    pub fn pose(&self, frame: usize) -> Result<RigidTransform> {
        match &self.poses {
            Some(p) => {
                let m = p.get(frame).ok_or_else(|| {
                    Error::Config(format!("ego pose missing for frame {frame}"))
                })?;
                RigidTransform::from_row_major(m)
            }
            None => Ok(RigidTransform::from_yaw(
                self.yaw_rate * frame as f64,
                Vec3::from(self.velocity) * frame as f64,
            )),
        }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration < 2 {
            return Err(Error::Config("scene needs at least two frames".into()));
        }
        if !(self.sensor.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.sensor.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.objects.iter().any(|o| o.samples == 0) {
            return Err(Error::Config("object sample count must be at least 1".into()));
        }
        if let Some(p) = &self.ego.poses {
            if p.len() < self.duration {
                return Err(Error::Config("fewer ego poses than frames".into()));
            }
        }
        Ok(())
    }
}

/// A surface sample in body coordinates with its outward face normal.
#[derive(Debug, Clone, Copy)]
struct Sample {
    point: Vec3,
    normal: Vec3,
}

fn box_samples(size: [f64; 3], count: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let [l, w, h] = size;
    // (normal axis, sign, face area)
    let faces = [
        (0, 1.0, w * h),
        (0, -1.0, w * h),
        (1, 1.0, l * h),
        (1, -1.0, l * h),
        (2, 1.0, l * w),
        (2, -1.0, l * w),
    ];
    let total: f64 = faces.iter().map(|f| f.2).sum();
    let mut out = Vec::with_capacity(count);
    let mut assigned = 0usize;
    for (k, &(axis, sign, area)) in faces.iter().enumerate() {
        let n = if k == faces.len() - 1 {
            count - assigned
        } else {
            ((count as f64) * area / total).round() as usize
        }
        .min(count - assigned);
        assigned += n;
        for _ in 0..n {
            let mut p = Vec3::new(
                rng.random_range(-0.5..0.5) * l,
                rng.random_range(-0.5..0.5) * w,
                rng.random_range(-0.5..0.5) * h,
            );
            p[axis] = sign * size[axis] / 2.0;
            let mut normal = Vec3::zeros();
            normal[axis] = sign;
            out.push(Sample { point: p, normal });
        }
    }
    out
}

/// Ground truth for one object in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectTruth {
    /// Residual displacement of the lead-segment center to the next frame,
    /// expressed in the axes of the next sensor frame.
    pub flow: Vec3,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    /// Points in sensor coordinates with ground-truth labels.
    pub frames: Vec<Frame>,
    /// Sensor-to-world pose per frame.
    pub poses: Vec<RigidTransform>,
    /// Residual flow of each frame towards the next, in next-frame axes.
    pub gt_flow: Vec<FlowField>,
    pub classes: Vec<Vec<ObjectClass>>,
    pub objects: Vec<Vec<ObjectTruth>>,
}

struct Segment {
    object: usize,
    trailer: bool,
    samples: Vec<Sample>,
}

impl Segment {
    fn pose(&self, spec: &ObjectSpec, t: f64) -> RigidTransform {
        if self.trailer {
            spec.trailer_pose(t).expect("trailer segment")
        } else {
            spec.pose(t)
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let poses: Vec<RigidTransform> = (0..spec.duration)
        .map(|f| spec.ego.pose(f))
        .collect::<Result<_>>()?;
    // Pose for flow of the last frame.
    let next_pose = spec
        .ego
        .pose(spec.duration)
        .unwrap_or_else(|_| poses[spec.duration - 1]);

    let mut segments = Vec::new();
    for (o, obj) in spec.objects.iter().enumerate() {
        let mut rng = stream_rng(spec.seed, STREAM_OBJECT + o as u64);
        segments.push(Segment {
            object: o,
            trailer: false,
            samples: box_samples(obj.size, obj.samples, &mut rng),
        });
        if let Some(tr) = obj.trailer {
            segments.push(Segment {
                object: o,
                trailer: true,
                samples: box_samples(tr.size, tr.samples.max(1), &mut rng),
            });
        }
    }

    let bg = &spec.background;
    let mut rng = stream_rng(spec.seed, STREAM_BACKGROUND);
    let background: Vec<Vec3> = (0..bg.points)
        .map(|_| {
            Vec3::new(
                rng.random_range(-bg.extent..=bg.extent),
                rng.random_range(-bg.extent..=bg.extent),
                rng.random_range(0.0..=bg.height),
            )
        })
        .collect();

    let noise = Normal::new(0.0, spec.sensor.noise_sigma)
        .map_err(|e| Error::Config(format!("noise: {e}")))?;

    type FrameOut = (Frame, FlowField, Vec<ObjectClass>, Vec<ObjectTruth>);
    let per_frame: Vec<FrameOut> = (0..spec.duration)
        .into_par_iter()
        .map(|f| {
            let mut rng = stream_rng(spec.seed, 1 + f as u64);
            let pose = poses[f];
            let to_next = if f + 1 < spec.duration {
                poses[f + 1]
            } else {
                next_pose
            };
            let to_sensor = pose.inverse();
            let next_axes = to_next.inverse();
            let origin = *pose.translation();
            let range2 = spec.sensor.range * spec.sensor.range;
            let jitter = |rng: &mut ChaCha8Rng| {
                if spec.sensor.noise_sigma > 0.0 {
                    Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng))
                } else {
                    Vec3::zeros()
                }
            };

            let mut points = Vec::new();
            let mut flow = Vec::new();
            let mut dynamic = Vec::new();
            let mut cluster = Vec::new();
            let mut classes = Vec::new();
            let mut truth: Vec<ObjectTruth> = spec
                .objects
                .iter()
                .map(|o| {
                    let a = o.pose(f as f64);
                    let b = o.pose(f as f64 + 1.0);
                    ObjectTruth {
                        flow: next_axes.rotate(&(b.translation() - a.translation())),
                        points: 0,
                    }
                })
                .collect();

            for p in &background {
                // Draws happen for every candidate so streams stay aligned.
                let drop = rng.random::<f64>() < spec.sensor.dropout;
                let j = jitter(&mut rng);
                if drop || (p - origin).norm_squared() > range2 {
                    continue;
                }
                points.push(to_sensor.apply(&(p + j)));
                flow.push(Vec3::zeros());
                dynamic.push(false);
                cluster.push(None);
                classes.push(ObjectClass::Background);
            }

            for seg in &segments {
                let obj = &spec.objects[seg.object];
                let now = seg.pose(obj, f as f64);
                let motion = seg.pose(obj, f as f64 + 1.0).compose(&now.inverse());
                let moving = obj.is_moving();
                let hidden = obj.occluded_at(f);
                for s in &seg.samples {
                    let drop = rng.random::<f64>() < spec.sensor.dropout;
                    let j = jitter(&mut rng);
                    let pw = now.apply(&s.point);
                    let facing = now.rotate(&s.normal).dot(&(origin - pw)) > 0.0;
                    if hidden || drop || !facing || (pw - origin).norm_squared() > range2 {
                        continue;
                    }
                    let observed = pw + j;
                    points.push(to_sensor.apply(&observed));
                    flow.push(next_axes.rotate(&(motion.apply(&observed) - observed)));
                    dynamic.push(moving);
                    cluster.push(moving.then_some(seg.object as u32));
                    classes.push(obj.class);
                    truth[seg.object].points += 1;
                }
            }

            let frame = Frame {
                index: f as i64,
                points,
                dynamic_mask: dynamic,
                cluster_id: cluster,
            };
            (frame, FlowField::new(flow), classes, truth)
        })
        .collect();

    let mut scene = Scene {
        spec: spec.clone(),
        frames: Vec::with_capacity(spec.duration),
        poses,
        gt_flow: Vec::with_capacity(spec.duration),
        classes: Vec::with_capacity(spec.duration),
        objects: Vec::with_capacity(spec.duration),
    };
    for (frame, flow, classes, truth) in per_frame {
        scene.frames.push(frame);
        scene.gt_flow.push(flow);
        scene.classes.push(classes);
        scene.objects.push(truth);
    }
    Ok(scene)
}

/// Transforms taking each frame of `t−h, …, t+1` into the sensor frame of `t+1`.
pub fn alignment_transforms(poses: &[RigidTransform], t: usize, h: usize) -> Vec<RigidTransform> {
    let world_to_target = poses[t + 1].inverse();
    (t - h..=t + 1)
        .map(|f| world_to_target.compose(&poses[f]))
        .collect()
}

/// Frame window `t−h, …, t+1` cut from already-labeled sensor-frame clouds.
pub fn window_from_frames(
    frames: &[Frame],
    poses: &[RigidTransform],
    t: usize,
    h: usize,
) -> Result<FrameWindow> {
    if h < 1 || t < h || t + 1 >= frames.len() {
        return Err(Error::OutOfRange {
            t: t as i64,
            h,
            frames: frames.len(),
        });
    }
    let transforms = alignment_transforms(poses, t, h);
    FrameWindow::align(frames[t - h..=t + 1].to_vec(), transforms)
}

impl Scene {
    pub fn window_at(&self, t: usize, h: usize) -> Result<FrameWindow> {
        window_from_frames(&self.frames, &self.poses, t, h)
    }
}
