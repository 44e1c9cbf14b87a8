//! Synthetic camera views of the catheter and the trajectory metrics computed from them and
//! from the joint record: view errors, accumulated error (AE), projected and tip trajectory
//! lengths (PTL, TTL) and motion efficiency (ME).

pub mod stats;

use crate::kinematics::{forward_kinematics, CatheterShape, JointState, RigGeometry};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use stats::{compare_groups, levene, mann_whitney, shapiro_wilk, t_test, Comparison, StatsError, TestResult, TestUsed};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("camera: {0}")]
    BadCamera(&'static str),
    #[error("the whole shape is behind the camera")]
    BehindCamera,
    #[error("point counts differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} points, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("tip trajectory length is zero, motion efficiency undefined")]
    ZeroLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewLabel {
    Top,
    Sagittal,
    Axial,
}

/// Pinhole camera. The camera frame looks down +z with x to the right and y down the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub view: ViewLabel,
    pub position: Vector3<f64>,
    /// Camera frame to world.
    pub orientation: UnitQuaternion<f64>,
    pub focal: f64,
    pub principal: Vector2<f64>,
    pub width: u32,
    pub height: u32,
    /// Round projected points to whole pixels, like a tracked camera image.
    #[serde(default)]
    pub quantize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub points: Vec<Vector2<f64>>,
    pub tip: Vector2<f64>,
    /// Shape points behind the camera that were left out.
    pub dropped: usize,
}

impl CameraModel {
    /// Camera at `eye` looking at `target`, with `up` roughly toward the top of the image.
    pub fn look_at(
        view: ViewLabel,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, MetricsError> {
        let z = (target - eye).try_normalize(1e-12).ok_or(MetricsError::BadCamera("eye equals target"))?;
        let x = z.cross(&up).try_normalize(1e-12).ok_or(MetricsError::BadCamera("up parallel to view"))?;
        let y = z.cross(&x);
        let r = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
        let cam = Self {
            view,
            position: eye,
            orientation: UnitQuaternion::from_rotation_matrix(&r),
            focal,
            principal: Vector2::new(width as f64 / 2.0, height as f64 / 2.0),
            width,
            height,
            quantize: false,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(MetricsError::BadCamera("focal must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(MetricsError::BadCamera("resolution must be positive"));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse_transform_vector(&(p - self.position))
    }

    /// Pixel coordinates of a world point, or None behind the camera.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        let c = self.to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        let px = Vector2::new(self.focal * c.x / c.z, self.focal * c.y / c.z) + self.principal;
        Some(if self.quantize { px.map(f64::round) } else { px })
    }

    pub fn project(&self, shape: &CatheterShape) -> Result<Projection, MetricsError> {
        let mut points = Vec::with_capacity(shape.points.len());
        for p in &shape.points {
            if let Some(px) = self.project_point(p) {
                points.push(px);
            }
        }
        if points.is_empty() {
            return Err(MetricsError::BehindCamera);
        }
        let tip = self.project_point(&shape.tip()).ok_or(MetricsError::BehindCamera)?;
        Ok(Projection {
            dropped: shape.points.len() - points.len(),
            points,
            tip,
        })
    }
}

/// The top and sagittal views the metrics are computed in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPair {
    pub top: CameraModel,
    pub sagittal: CameraModel,
}

impl CameraPair {
    /// Orthogonal 640x480 pinholes on the +z and +x axes of a bounding box, framing all of it.
    pub fn for_bounds(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self, MetricsError> {
        let (w, h) = (640, 480);
        let c = (min + max) / 2.0;
        let half = (max - min) / 2.0;
        let radius = half.norm();
        let dist = 3.0 * radius;
        // the bounding sphere fills 90% of the shorter image side
        let focal = 0.45 * h as f64 * (dist - radius) / radius;
        let top = CameraModel::look_at(ViewLabel::Top, c + Vector3::z() * dist, c, Vector3::y(), focal, w, h)?;
        let sagittal = CameraModel::look_at(ViewLabel::Sagittal, c + Vector3::x() * dist, c, Vector3::z(), focal, w, h)?;
        Ok(Self { top, sagittal })
    }

    pub fn views(&self) -> [&CameraModel; 2] {
        [&self.top, &self.sagittal]
    }
}

/// N evenly spaced points along a polyline, by arc length.
pub fn resample_polyline(points: &[Vector2<f64>], n: usize) -> Result<Vec<Vector2<f64>>, MetricsError> {
    if n < 2 {
        return Err(MetricsError::TooFew { need: 2, got: n });
    }
    if points.is_empty() {
        return Err(MetricsError::TooFew { need: 1, got: 0 });
    }
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let s = total * i as f64 / (n - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        if points.len() == 1 || cum[seg + 1] <= cum[seg] {
            out.push(points[seg.min(points.len() - 1)]);
        } else {
            let f = ((s - cum[seg]) / (cum[seg + 1] - cum[seg])).clamp(0.0, 1.0);
            out.push(points[seg] + (points[seg + 1] - points[seg]) * f);
        }
    }
    Ok(out)
}

/// Sample points of the ideal catheter line in each view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealLine {
    pub top: Vec<Vector2<f64>>,
    pub sagittal: Vec<Vector2<f64>>,
}

impl IdealLine {
    /// Straight line from the projected base to the projected tip of `shape`, N points per view.
    pub fn from_shape(cameras: &CameraPair, shape: &CatheterShape, n: usize) -> Result<Self, MetricsError> {
        let line = |cam: &CameraModel| -> Result<Vec<Vector2<f64>>, MetricsError> {
            let base = cam.project_point(&shape.points[0]).ok_or(MetricsError::BehindCamera)?;
            let tip = cam.project_point(&shape.tip()).ok_or(MetricsError::BehindCamera)?;
            resample_polyline(&[base, tip], n)
        };
        Ok(Self {
            top: line(&cameras.top)?,
            sagittal: line(&cameras.sagittal)?,
        })
    }

    pub fn n(&self) -> usize {
        self.top.len()
    }
}

/// Mean distance between corresponding real and ideal sample points.
pub fn view_error(real: &[Vector2<f64>], ideal: &[Vector2<f64>]) -> Result<f64, MetricsError> {
    if real.len() != ideal.len() {
        return Err(MetricsError::LengthMismatch(real.len(), ideal.len()));
    }
    if real.is_empty() {
        return Err(MetricsError::TooFew { need: 1, got: 0 });
    }
    let sum: f64 = real.iter().zip(ideal).map(|(r, i)| (r - i).norm()).sum();
    Ok(sum / real.len() as f64)
}

pub fn accumulated_error(tve: &[f64], sve: &[f64]) -> Result<f64, MetricsError> {
    if tve.len() != sve.len() {
        return Err(MetricsError::LengthMismatch(tve.len(), sve.len()));
    }
    Ok(tve.iter().zip(sve).fold(0.0, |acc, (a, b)| acc + (a + b)))
}

// folds start at +0.0; an empty f64 `sum()` is -0.0, which would print as "-0"
pub fn projected_trajectory_length(tips: &[Vector2<f64>]) -> f64 {
    tips.windows(2).fold(0.0, |acc, w| acc + (w[1] - w[0]).norm())
}

pub fn path_length(points: &[Vector3<f64>]) -> f64 {
    points.windows(2).fold(0.0, |acc, w| acc + (w[1] - w[0]).norm())
}

pub fn tip_positions(joints: &[JointState], rig: &RigGeometry) -> Vec<Vector3<f64>> {
    joints.iter().map(|j| forward_kinematics(j, rig).tip()).collect()
}

pub fn tip_trajectory_length(joints: &[JointState], rig: &RigGeometry) -> f64 {
    path_length(&tip_positions(joints, rig))
}

pub fn motion_efficiency_of(tips: &[Vector3<f64>]) -> Result<f64, MetricsError> {
    let ttl = path_length(tips);
    if !(ttl > 0.0) {
        return Err(MetricsError::ZeroLength);
    }
    Ok((tips[tips.len() - 1] - tips[0]).norm() / ttl)
}

pub fn motion_efficiency(joints: &[JointState], rig: &RigGeometry) -> Result<f64, MetricsError> {
    motion_efficiency_of(&tip_positions(joints, rig))
}

/// Per-frame camera measurements of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelTrack {
    pub tve: Vec<f64>,
    pub sve: Vec<f64>,
    pub tip_top: Vec<Vector2<f64>>,
    pub tip_sagittal: Vec<Vector2<f64>>,
}

pub fn track(joints: &[JointState], rig: &RigGeometry, cameras: &CameraPair, ideal: &IdealLine) -> Result<PixelTrack, MetricsError> {
    let n = ideal.n();
    let mut t = PixelTrack {
        tve: Vec::with_capacity(joints.len()),
        sve: Vec::with_capacity(joints.len()),
        tip_top: Vec::with_capacity(joints.len()),
        tip_sagittal: Vec::with_capacity(joints.len()),
    };
    for j in joints {
        let shape = forward_kinematics(j, rig);
        let top = cameras.top.project(&shape)?;
        let sag = cameras.sagittal.project(&shape)?;
        t.tve.push(view_error(&resample_polyline(&top.points, n)?, &ideal.top)?);
        t.sve.push(view_error(&resample_polyline(&sag.points, n)?, &ideal.sagittal)?);
        t.tip_top.push(top.tip);
        t.tip_sagittal.push(sag.tip);
    }
    Ok(t)
}

/// The per-run metric panel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// px
    pub ae: f64,
    /// px, summed over the top and sagittal views
    pub ptl: f64,
    /// mm
    pub ttl: f64,
    /// None when the tip never moved.
    pub me: Option<f64>,
    pub total_time: f64,
    pub intervention_time: f64,
}

impl RunMetrics {
    pub fn compute(
        joints: &[JointState],
        rig: &RigGeometry,
        cameras: &CameraPair,
        ideal: &IdealLine,
        total_time: f64,
        intervention_time: f64,
    ) -> Result<Self, MetricsError> {
        let t = track(joints, rig, cameras, ideal)?;
        let tips = tip_positions(joints, rig);
        Ok(Self {
            ae: accumulated_error(&t.tve, &t.sve)?,
            ptl: projected_trajectory_length(&t.tip_top) + projected_trajectory_length(&t.tip_sagittal),
            ttl: path_length(&tips),
            me: motion_efficiency_of(&tips).ok(),
            total_time,
            intervention_time,
        })
    }

}

pub const METRICS_CSV_HEADER: &str = "run,ae,ptl,ttl,me,total_time,intervention_time";

/// Header plus one labelled row per run. An undefined ME is an empty field.
pub fn metrics_to_csv(rows: &[(String, RunMetrics)]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for (run, m) in rows {
        let me = m.me.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{run},{},{},{},{me},{},{}\n", m.ae, m.ptl, m.ttl, m.total_time, m.intervention_time));
    }
    s
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<(String, RunMetrics)>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_CSV_HEADER) {
        return Err("unexpected metrics header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(format!("expected 7 fields: {l}"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s}: {e}"));
            let m = RunMetrics {
                ae: num(f[1])?,
                ptl: num(f[2])?,
                ttl: num(f[3])?,
                me: if f[4].is_empty() { None } else { Some(num(f[4])?) },
                total_time: num(f[5])?,
                intervention_time: num(f[6])?,
            };
            Ok((f[0].to_string(), m))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_keeps_endpoints_and_spacing() {
        let pts = [Vector2::new(0.0, 0.0), Vector2::new(3.0, 0.0), Vector2::new(3.0, 4.0)];
        let r = resample_polyline(&pts, 8).unwrap();
        assert_eq!(r[0], pts[0]);
        assert!((r[7] - pts[2]).norm() < 1e-12);
        for w in r.windows(2) {
            assert!(((w[1] - w[0]).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn look_at_centers_the_target() {
        let cam = CameraModel::look_at(ViewLabel::Top, Vector3::new(1.0, 2.0, 50.0), Vector3::new(1.0, 2.0, 0.0), Vector3::y(), 500.0, 640, 480).unwrap();
        let p = cam.project_point(&Vector3::new(1.0, 2.0, -20.0)).unwrap();
        assert!((p - Vector2::new(320.0, 240.0)).norm() < 1e-9);
        // up in the world is up in the image
        let q = cam.project_point(&Vector3::new(1.0, 3.0, 0.0)).unwrap();
        assert!(q.y < 240.0 && (q.x - 320.0).abs() < 1e-9);
        assert!(cam.project_point(&Vector3::new(1.0, 2.0, 60.0)).is_none());
    }
}
