//! End-point-error metrics and supervision stability statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FlowField, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ObjectClass {
    Background,
    Car,
    Other,
    Ped,
    Vru,
}

impl ObjectClass {
    pub const FOREGROUND: [ObjectClass; 4] =
        [ObjectClass::Car, ObjectClass::Other, ObjectClass::Ped, ObjectClass::Vru];

    pub fn code(self) -> i32 {
        match self {
            ObjectClass::Background => 0,
            ObjectClass::Car => 1,
            ObjectClass::Other => 2,
            ObjectClass::Ped => 3,
            ObjectClass::Vru => 4,
        }
    }

    pub fn from_code(code: i32) -> Result<Self> {
        Ok(match code {
            0 => ObjectClass::Background,
            1 => ObjectClass::Car,
            2 => ObjectClass::Other,
            3 => ObjectClass::Ped,
            4 => ObjectClass::Vru,
            c => return Err(Error::Config(format!("unknown class code {c}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Background => "BACKGROUND",
            ObjectClass::Car => "CAR",
            ObjectClass::Other => "OTHER",
            ObjectClass::Ped => "PED",
            ObjectClass::Vru => "VRU",
        }
    }

    pub fn is_foreground(self) -> bool {
        self != ObjectClass::Background
    }
}

pub const DEFAULT_SPEED_BUCKETS: [(f64, f64); 4] =
    [(0.05, 0.5), (0.5, 1.0), (1.0, 2.0), (2.0, f64::INFINITY)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Ground-truth speed above which a point counts as dynamic, m/frame.
    pub dynamic_threshold: f64,
    pub eval_region_half_extent: f64,
    /// `(lower, upper]` speed intervals in m/frame.
    pub speed_buckets: Vec<(f64, f64)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dynamic_threshold: 0.05,
            eval_region_half_extent: 35.0,
            speed_buckets: DEFAULT_SPEED_BUCKETS.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dynamic_threshold > 0.0) || !(self.eval_region_half_extent > 0.0) {
            return Err(Error::Config("evaluation thresholds must be positive".into()));
        }
        let mut b = self.speed_buckets.clone();
        b.sort_by(|x, y| x.0.total_cmp(&y.0));
        for w in b.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(Error::Config("speed buckets overlap".into()));
            }
        }
        if b.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config("empty speed bucket".into()));
        }
        Ok(())
    }

    pub fn uses_default_buckets(&self) -> bool {
        self.speed_buckets == DEFAULT_SPEED_BUCKETS.to_vec()
    }

    fn in_region(&self, p: &Vec3) -> bool {
        p.x.abs() <= self.eval_region_half_extent && p.y.abs() <= self.eval_region_half_extent
    }
}

/// Mean EPE per category; `None` when the category is empty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ThreeWay {
    pub mean: Option<f64>,
    pub fd: Option<f64>,
    pub fs: Option<f64>,
    pub bs: Option<f64>,
    pub count_fd: usize,
    pub count_fs: usize,
    pub count_bs: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketNormalized {
    pub mean: Option<f64>,
    pub per_class: BTreeMap<String, Option<f64>>,
    pub counts: BTreeMap<String, usize>,
    /// False when the bucket table differs from the built-in default.
    pub default_buckets: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub threeway: ThreeWay,
    pub bucket_normalized: BucketNormalized,
}

fn epe(a: &Vec3, b: &Vec3) -> f64 {
    (a - b).norm()
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

fn region_mask(n: usize, points: Option<&[Vec3]>, config: &EvalConfig) -> Result<Vec<bool>> {
    match points {
        None => Ok(vec![true; n]),
        Some(p) if p.len() == n => Ok(p.iter().map(|q| config.in_region(q)).collect()),
        Some(p) => Err(Error::length("evaluation points", n, p.len())),
    }
}

pub fn dynamic_mask_from_gt(gt: &FlowField, threshold: f64) -> Vec<bool> {
    gt.flow.iter().map(|f| f.norm() > threshold).collect()
}

pub fn threeway_epe(
    pred: &FlowField,
    gt: &FlowField,
    gt_dynamic: &[bool],
    foreground: &[bool],
    points: Option<&[Vec3]>,
    config: &EvalConfig,
) -> Result<ThreeWay> {
    let n = gt.len();
    for (what, len) in [
        ("prediction", pred.len()),
        ("dynamic mask", gt_dynamic.len()),
        ("foreground mask", foreground.len()),
    ] {
        if len != n {
            return Err(Error::length(what, n, len));
        }
    }
    let region = region_mask(n, points, config)?;
    let (mut fd, mut fs, mut bs) = ((0.0, 0), (0.0, 0), (0.0, 0));
    for i in 0..n {
        if !region[i] {
            continue;
        }
        let e = epe(&pred.flow[i], &gt.flow[i]);
        let slot = match (foreground[i], gt_dynamic[i]) {
            (true, true) => &mut fd,
            (true, false) => &mut fs,
            (false, false) => &mut bs,
            // Background points never count as dynamic.
            (false, true) => continue,
        };
        slot.0 += e;
        slot.1 += 1;
    }
    let parts = [mean(fd.0, fd.1), mean(fs.0, fs.1), mean(bs.0, bs.1)];
    let present: Vec<f64> = parts.iter().flatten().copied().collect();
    Ok(ThreeWay {
        mean: mean(present.iter().sum(), present.len()),
        fd: parts[0],
        fs: parts[1],
        bs: parts[2],
        count_fd: fd.1,
        count_fs: fs.1,
        count_bs: bs.1,
    })
}

pub fn bucket_normalized_epe(
    pred: &FlowField,
    gt: &FlowField,
    classes: &[ObjectClass],
    points: Option<&[Vec3]>,
    config: &EvalConfig,
) -> Result<BucketNormalized> {
    let n = gt.len();
    if pred.len() != n {
        return Err(Error::length("prediction", n, pred.len()));
    }
    if classes.len() != n {
        return Err(Error::length("class labels", n, classes.len()));
    }
    let region = region_mask(n, points, config)?;
    let nb = config.speed_buckets.len();
    // Per class and bucket: (sum EPE, sum speed, count).
    let mut acc: BTreeMap<ObjectClass, Vec<(f64, f64, usize)>> = ObjectClass::FOREGROUND
        .iter()
        .map(|&c| (c, vec![(0.0, 0.0, 0); nb]))
        .collect();
    for i in 0..n {
        let speed = gt.flow[i].norm();
        if !region[i] || !classes[i].is_foreground() || !(speed > config.dynamic_threshold) {
            continue;
        }
        let Some(b) = config
            .speed_buckets
            .iter()
            .position(|&(lo, hi)| speed > lo && speed <= hi)
        else {
            continue;
        };
        let slot = &mut acc.get_mut(&classes[i]).expect("foreground class")[b];
        slot.0 += epe(&pred.flow[i], &gt.flow[i]);
        slot.1 += speed;
        slot.2 += 1;
    }
    let mut out = BucketNormalized {
        default_buckets: config.uses_default_buckets(),
        ..Default::default()
    };
    let mut present = Vec::new();
    for (class, buckets) in &acc {
        let ratios: Vec<f64> = buckets
            .iter()
            .filter(|b| b.2 > 0)
            .map(|b| (b.0 / b.2 as f64) / (b.1 / b.2 as f64))
            .collect();
        let score = mean(ratios.iter().sum(), ratios.len());
        if let Some(s) = score {
            present.push(s);
        }
        out.per_class.insert(class.name().to_string(), score);
        out.counts
            .insert(class.name().to_string(), buckets.iter().map(|b| b.2).sum());
    }
    out.mean = mean(present.iter().sum(), present.len());
    Ok(out)
}

pub fn evaluate(
    pred: &FlowField,
    gt: &FlowField,
    classes: &[ObjectClass],
    points: Option<&[Vec3]>,
    config: &EvalConfig,
) -> Result<MetricReport> {
    config.validate()?;
    let dynamic = dynamic_mask_from_gt(gt, config.dynamic_threshold);
    let foreground: Vec<bool> = classes.iter().map(|c| c.is_foreground()).collect();
    Ok(MetricReport {
        threeway: threeway_epe(pred, gt, &dynamic, &foreground, points, config)?,
        bucket_normalized: bucket_normalized_epe(pred, gt, classes, points, config)?,
    })
}

/// Table in the benchmark's column layout, values in cm for three-way EPE.
pub fn render_table(r: &MetricReport) -> String {
    let cm = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", x * 100.0));
    let plain = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    let mut s = String::new();
    s.push_str("Three-way EPE (cm)                  | Dynamic Bucket-Normalized\n");
    s.push_str("Mean     FD       FS       BS       | Mean    CAR     OTHER   PED     VRU\n");
    let t = &r.threeway;
    let b = &r.bucket_normalized;
    let class = |n: &str| plain(b.per_class.get(n).copied().flatten());
    s.push_str(&format!(
        "{:<8} {:<8} {:<8} {:<8} | {:<7} {:<7} {:<7} {:<7} {:<7}\n",
        cm(t.mean),
        cm(t.fd),
        cm(t.fs),
        cm(t.bs),
        plain(b.mean),
        class("CAR"),
        class("OTHER"),
        class("PED"),
        class("VRU"),
    ));
    if !b.default_buckets {
        s.push_str("note: custom speed buckets\n");
    } else {
        s.push_str("note: default speed buckets (not the official table)\n");
    }
    s
}

/// Angle between two vectors in degrees; 90° when either is shorter than `eps`.
pub fn angle_deg(a: &Vec3, b: &Vec3, eps: f64) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na < eps || nb < eps {
        return 90.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub mean_change_deg: f64,
    pub mean_error_deg: f64,
    pub changes_deg: Vec<f64>,
    pub errors_deg: Vec<f64>,
}

pub const STABILITY_ZERO_NORM: f64 = 1e-6;

/// Successive direction change of a target sequence and its angular error
/// to the ground-truth direction of each step.
pub fn supervision_stability(targets: &[Vec3], gt_directions: &[Vec3]) -> Result<Stability> {
    if targets.len() < 2 {
        return Err(Error::Config("stability needs at least two targets".into()));
    }
    if gt_directions.len() != targets.len() {
        return Err(Error::length("ground-truth directions", targets.len(), gt_directions.len()));
    }
    let changes: Vec<f64> = targets
        .windows(2)
        .map(|w| angle_deg(&w[0], &w[1], STABILITY_ZERO_NORM))
        .collect();
    let errors: Vec<f64> = targets
        .iter()
        .zip(gt_directions)
        .map(|(t, g)| angle_deg(t, g, STABILITY_ZERO_NORM))
        .collect();
    Ok(Stability {
        mean_change_deg: changes.iter().sum::<f64>() / changes.len() as f64,
        mean_error_deg: errors.iter().sum::<f64>() / errors.len() as f64,
        changes_deg: changes,
        errors_deg: errors,
    })
}
