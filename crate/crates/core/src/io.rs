//! On-disk frame archives and deterministic JSON output.
//!
//! An archive is a directory holding `manifest.json` plus one binary
//! payload per frame. Payloads start with a 16-byte header:
//!
//! | bytes  | content                          |
//! |--------|----------------------------------|
//! | 0..4   | magic `TFM1`                     |
//! | 4..8   | reserved, zero                   |
//! | 8..16  | point count, `u64` little-endian |
//!
//! followed by `count` little-endian `f32` triplets. Flow fields use the
//! same layout. Label and class files are headerless `i32` arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsemblingConfig, Supervision};
use crate::error::{Error, Result};
use crate::geometry::{FlowField, Frame, FrameWindow, RigidTransform, Vec3};
use crate::metrics::ObjectClass;
use crate::segment::FrameLabels;
use crate::synth::{window_from_frames, ObjectTruth, Scene, SceneSpec};

pub const MAGIC: &[u8; 4] = b"TFM1";
pub const HEADER_LEN: usize = 16;
pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

pub fn encode_points(points: &[Vec3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + points.len() * 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        for c in p.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_points(bytes: &[u8], path: &Path) -> Result<Vec<Vec3>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload = &bytes[HEADER_LEN..];
    if count.checked_mul(12) != Some(payload.len() as u64) {
        return Err(Error::format(
            path,
            format!(
                "declared {count} points but payload holds {} bytes",
                payload.len()
            ),
        ));
    }
    let f = |b: &[u8]| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64;
    Ok(payload
        .chunks_exact(12)
        .map(|c| Vec3::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12])))
        .collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_points(path: impl AsRef<Path>) -> Result<Vec<Vec3>> {
    let path = path.as_ref();
    decode_points(&read(path)?, path)
}

pub fn write_points(path: impl AsRef<Path>, points: &[Vec3]) -> Result<()> {
    write(path.as_ref(), &encode_points(points))
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    read_points(path).map(FlowField::new)
}

pub fn write_flow(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    write_points(path, &flow.flow)
}

pub fn read_i32s(path: impl AsRef<Path>) -> Result<Vec<i32>> {
    let path = path.as_ref();
    let bytes = read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, "length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn write_i32s(path: impl AsRef<Path>, values: &[i32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write(path.as_ref(), &bytes)
}

pub fn read_classes(path: impl AsRef<Path>) -> Result<Vec<ObjectClass>> {
    read_i32s(path)?.into_iter().map(ObjectClass::from_code).collect()
}

pub fn write_classes(path: impl AsRef<Path>, classes: &[ObjectClass]) -> Result<()> {
    let codes: Vec<i32> = classes.iter().map(|c| c.code()).collect();
    write_i32s(path, &codes)
}

/// ASCII PLY with a per-vertex `label` property.
pub fn write_ply(path: impl AsRef<Path>, frame: &Frame) -> Result<()> {
    let path = path.as_ref();
    let labels = FrameLabels::to_codes(frame);
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", frame.len()));
    s.push_str("property float x\nproperty float y\nproperty float z\nproperty int label\nend_header\n");
    for (p, l) in frame.points.iter().zip(&labels) {
        s.push_str(&format!("{} {} {} {}\n", p.x as f32, p.y as f32, p.z as f32, l));
    }
    write(path, s.as_bytes())
}

/// Emits every float with 17 significant digits; non-finite values become `null`.
struct FixedFloat;

impl serde_json::ser::Formatter for FixedFloat {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        write!(w, "{v:.16e}")
    }

    fn write_f32<W: ?Sized + std::io::Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        write!(w, "{:.16e}", v as f64)
    }
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFloat);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = to_json(value)?;
    text.push('\n');
    write(path.as_ref(), text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    Ok(serde_json::from_slice(&read(path)?)?)
}

/// JSON envelope adding a schema version to any payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Versioned<T> {
    pub fn new(body: T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            body,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: i64,
    pub points: String,
    pub labels: String,
    /// Sensor-to-world pose, row-major 4×4.
    pub ego_transform: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_flow: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objects: Vec<ObjectTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
}

pub fn write_scene(dir: impl AsRef<Path>, scene: &Scene) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(scene.frames.len());
    for (i, frame) in scene.frames.iter().enumerate() {
        let name = |kind: &str| format!("{kind}_{i:04}.bin");
        let entry = FrameEntry {
            index: frame.index,
            points: name("points"),
            labels: name("labels"),
            ego_transform: scene.poses[i].to_row_major().to_vec(),
            gt_flow: scene.gt_flow.get(i).map(|_| name("gt_flow")),
            classes: scene.classes.get(i).map(|_| name("classes")),
            objects: scene.objects.get(i).cloned().unwrap_or_default(),
        };
        write_points(dir.join(&entry.points), &frame.points)?;
        write_i32s(dir.join(&entry.labels), &FrameLabels::to_codes(frame))?;
        if let (Some(p), Some(g)) = (&entry.gt_flow, scene.gt_flow.get(i)) {
            write_flow(dir.join(p), g)?;
        }
        if let (Some(p), Some(c)) = (&entry.classes, scene.classes.get(i)) {
            write_classes(dir.join(p), c)?;
        }
        frames.push(entry);
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        frames,
        scene: Some(scene.spec.clone()),
    };
    write_json(dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Writes frames that already carry labels, with explicit poses.
pub fn write_frames(dir: impl AsRef<Path>, frames: &[Frame], poses: &[RigidTransform]) -> Result<Manifest> {
    if frames.len() != poses.len() {
        return Err(Error::length("poses", frames.len(), poses.len()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (i, (frame, pose)) in frames.iter().zip(poses).enumerate() {
        let entry = FrameEntry {
            index: frame.index,
            points: format!("points_{i:04}.bin"),
            labels: format!("labels_{i:04}.bin"),
            ego_transform: pose.to_row_major().to_vec(),
            gt_flow: None,
            classes: None,
            objects: Vec::new(),
        };
        write_points(dir.join(&entry.points), &frame.points)?;
        write_i32s(dir.join(&entry.labels), &FrameLabels::to_codes(frame))?;
        entries.push(entry);
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        frames: entries,
        scene: None,
    };
    write_json(dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Archive {
    pub dir: PathBuf,
    pub manifest: Manifest,
    poses: Vec<RigidTransform>,
}

impl Archive {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest: Manifest = read_json(dir.join(MANIFEST))?;
        let bad = |reason: String| Error::format(dir.join(MANIFEST), reason);
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(bad(format!(
                "unsupported schema version {}",
                manifest.schema_version
            )));
        }
        let mut poses = Vec::with_capacity(manifest.frames.len());
        for (i, e) in manifest.frames.iter().enumerate() {
            if e.index != i as i64 {
                return Err(bad(format!("frame {i} has index {}", e.index)));
            }
            let paths = [Some(&e.points), Some(&e.labels), e.gt_flow.as_ref(), e.classes.as_ref()];
            for p in paths.into_iter().flatten() {
                if !dir.join(p).is_file() {
                    return Err(bad(format!("path {p} does not resolve")));
                }
            }
            poses.push(RigidTransform::from_row_major(&e.ego_transform)?);
        }
        Ok(Self {
            dir,
            manifest,
            poses,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    pub fn poses(&self) -> &[RigidTransform] {
        &self.poses
    }

    fn entry(&self, i: usize) -> Result<&FrameEntry> {
        self.manifest.frames.get(i).ok_or(Error::OutOfRange {
            t: i as i64,
            h: 0,
            frames: self.len(),
        })
    }

    pub fn load_frame(&self, i: usize) -> Result<Frame> {
        let e = self.entry(i)?;
        let points = read_points(self.dir.join(&e.points))?;
        let codes = read_i32s(self.dir.join(&e.labels))?;
        if codes.len() != points.len() {
            return Err(Error::length(
                format!("labels of frame {i}"),
                points.len(),
                codes.len(),
            ));
        }
        let labels = FrameLabels::from_codes(&codes)?;
        Ok(Frame {
            index: e.index,
            points,
            dynamic_mask: labels.dynamic_mask,
            cluster_id: labels.cluster_id,
        })
    }

    pub fn load_gt_flow(&self, i: usize) -> Result<Option<FlowField>> {
        match &self.entry(i)?.gt_flow {
            Some(p) => read_flow(self.dir.join(p)).map(Some),
            None => Ok(None),
        }
    }

    pub fn load_classes(&self, i: usize) -> Result<Option<Vec<ObjectClass>>> {
        match &self.entry(i)?.classes {
            Some(p) => read_classes(self.dir.join(p)).map(Some),
            None => Ok(None),
        }
    }

    pub fn objects(&self, i: usize) -> Result<&[ObjectTruth]> {
        Ok(&self.entry(i)?.objects)
    }

    /// Window `t−h, …, t+1` aligned to the sensor frame of `t+1`.
    pub fn window(&self, t: usize, h: usize) -> Result<FrameWindow> {
        if h < 1 || t < h || t + 1 >= self.len() {
            return Err(Error::OutOfRange {
                t: t as i64,
                h,
                frames: self.len(),
            });
        }
        let frames = (t - h..=t + 1)
            .map(|i| self.load_frame(i))
            .collect::<Result<Vec<_>>>()?;
        let poses = &self.poses[t - h..=t + 1];
        window_from_frames(&frames, poses, h, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub cluster_id: u32,
    pub target: Vec3,
    pub pool_size: usize,
    pub winner: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetsFile {
    pub schema_version: u32,
    pub frame: usize,
    pub history: usize,
    pub config: EnsemblingConfig,
    pub targets: Vec<TargetRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Supervision>,
}

impl TargetsFile {
    pub fn new(
        frame: usize,
        history: usize,
        config: EnsemblingConfig,
        supervision: &Supervision,
        dump_diagnostics: bool,
    ) -> Self {
        let targets = supervision
            .iter()
            .map(|(&id, s)| TargetRecord {
                cluster_id: id,
                target: s.target,
                pool_size: s.pool.len(),
                winner: s.consensus.winner,
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            frame,
            history,
            config,
            targets,
            diagnostics: dump_diagnostics.then(|| supervision.clone()),
        }
    }

    pub fn target_map(&self) -> BTreeMap<u32, Vec3> {
        self.targets.iter().map(|r| (r.cluster_id, r.target)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f32_points() -> impl Strategy<Value = Vec<Vec3>> {
        prop::collection::vec(
            (-1e4f32..1e4, -1e4f32..1e4, -1e4f32..1e4)
                .prop_map(|(x, y, z)| Vec3::new(x as f64, y as f64, z as f64)),
            0..200,
        )
    }

    proptest! {
        #[test]
        fn payload_round_trip_is_identity(points in f32_points()) {
            let bytes = encode_points(&points);
            let back = decode_points(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(&back, &points);
            prop_assert_eq!(encode_points(&back), bytes);
        }

        #[test]
        fn json_floats_round_trip(v in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..50)) {
            let back: Vec<f64> = serde_json::from_str(&to_json(&v).unwrap()).unwrap();
            prop_assert_eq!(back, v);
        }
    }

    #[test]
    fn header_layout() {
        let b = encode_points(&[Vec3::new(1.0, 2.0, 3.0)]);
        assert_eq!(b.len(), 28);
        assert_eq!(&b[..4], b"TFM1");
        assert_eq!(&b[4..8], &[0; 4]);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(b[16..20].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_bad_headers() {
        let mut b = encode_points(&[Vec3::new(1.0, 2.0, 3.0)]);
        b[0] = b'X';
        assert!(matches!(decode_points(&b, Path::new("m")), Err(Error::Format { .. })));
        let mut b = encode_points(&[Vec3::new(1.0, 2.0, 3.0)]);
        b[8] = 2;
        let e = decode_points(&b, Path::new("m")).unwrap_err();
        assert!(e.to_string().contains("declared 2 points"));
        assert!(decode_points(&b[..10], Path::new("m")).is_err());
    }

    #[test]
    fn json_floats_use_seventeen_digits() {
        let s = to_json(&[0.1f64, 1.0, -2.5e-7, f64::NAN]).unwrap();
        assert_eq!(
            s,
            "[1.0000000000000001e-1,1.0000000000000000e0,-2.4999999999999999e-7,null]"
        );
        let v: Vec<Option<f64>> = serde_json::from_str(&s).unwrap();
        assert_eq!(v[0], Some(0.1));
        assert_eq!(v[3], None);
    }

    #[test]
    fn labels_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.bin");
        write_i32s(&p, &[-1, -2, 0, 7]).unwrap();
        assert_eq!(read_i32s(&p).unwrap(), vec![-1, -2, 0, 7]);
        fs::write(&p, [1u8, 2, 3]).unwrap();
        assert!(read_i32s(&p).is_err());
    }

    #[test]
    fn archive_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Frame> = (0..3)
            .map(|i| Frame::unlabeled(i, vec![Vec3::new(i as f64, 0.0, 0.0); 4]))
            .collect();
        write_frames(dir.path(), &frames, &[RigidTransform::identity(); 3]).unwrap();
        let a = Archive::open(dir.path()).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a.load_frame(2).unwrap(), frames[2]);
        assert!(a.window(1, 1).is_ok());
        assert!(matches!(a.window(2, 1), Err(Error::OutOfRange { .. })));
        fs::remove_file(dir.path().join("labels_0001.bin")).unwrap();
        let e = Archive::open(dir.path()).unwrap_err();
        assert!(e.to_string().contains("does not resolve"));
    }
}
