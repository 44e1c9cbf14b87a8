//! Constant-curvature catheter shape and forward kinematics.

use super::joints::{JointLimits, JointState};
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

/// Number of samples along the flexible segment.
pub const SHAPE_POINTS: usize = 100;

/// Position plus orthonormal orientation; the third column is the tip tangent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Frame {
    pub fn x_axis(&self) -> Vector3<f64> {
        self.rotation.column(0).into_owned()
    }

    pub fn y_axis(&self) -> Vector3<f64> {
        self.rotation.column(1).into_owned()
    }

    pub fn z_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    /// Express a world point in this frame.
    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.position)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatheterShape {
    /// Base to tip of the flexible segment, mm.
    pub points: Vec<Vector3<f64>>,
    pub tip_frame: Frame,
}

impl CatheterShape {
    pub fn tip(&self) -> Vector3<f64> {
        self.tip_frame.position
    }

    pub fn polyline_length(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    pub fn tip_pose(&self) -> TipPose {
        TipPose {
            position: self.tip_frame.position,
            axis: self.tip_frame.z_axis(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TipPose {
    pub position: Vector3<f64>,
    pub axis: Vector3<f64>,
}

/// Shape of the bendable segment in its own frame: base at the origin, straight along +z,
/// bending towards +x.
///
/// The 100 samples are equally spaced vertices of a circular arc subtending `bending_deg`,
/// with chord length `active_length / 99`, so the polyline has exactly the active length.
pub fn bend_shape(bending_deg: f64, active_length: f64) -> CatheterShape {
    let n = SHAPE_POINTS;
    let links = (n - 1) as f64;
    let chord = active_length / links;
    let theta = bending_deg.to_radians();
    let step = theta / links;
    let half_sin = (0.5 * step).sin();

    let mut points = Vec::with_capacity(n);
    for k in 0..n {
        let kf = k as f64;
        if theta.abs() < 1e-12 {
            points.push(Vector3::new(0.0, 0.0, chord * kf));
        } else {
            let a = step * kf;
            let s = (0.5 * a).sin();
            // radius of the inscribed circle is chord / (2 sin(step/2))
            let x = chord * s * s / half_sin;
            let z = chord * a.sin() / (2.0 * half_sin);
            points.push(Vector3::new(x, 0.0, z));
        }
    }

    let (st, ct) = theta.sin_cos();
    let rotation = Matrix3::from_columns(&[
        Vector3::new(ct, 0.0, -st),
        Vector3::new(0.0, 1.0, 0.0),
        Vector3::new(st, 0.0, ct),
    ]);
    let tip_frame = Frame {
        position: points[n - 1],
        rotation,
    };
    CatheterShape { points, tip_frame }
}

/// Entry point of the catheter into the anatomy. `axis` points into the body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertionPort {
    pub origin: Vector3<f64>,
    pub axis: Vector3<f64>,
}

impl InsertionPort {
    pub fn new(origin: Vector3<f64>, axis: Vector3<f64>) -> Self {
        Self {
            origin,
            axis: axis.normalize(),
        }
    }

    /// Direction the catheter bends towards at zero roll: world +x made orthogonal to the
    /// axis, or world +y when the axis is parallel to x.
    pub fn reference_normal(&self) -> Vector3<f64> {
        let a = self.axis.normalize();
        let mut r = Vector3::x() - a * a.x;
        if r.norm() < 1e-6 {
            r = Vector3::y() - a * a.y;
        }
        r.normalize()
    }
}

/// Fixed geometry of the instrument mounted at the port.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigGeometry {
    pub port: InsertionPort,
    /// Straight length from the port to the base of the bendable segment at zero translation.
    pub passive_length: f64,
    /// Bendable length with sheath and core at zero.
    pub active_length: f64,
    /// mm of exposed length lost per mm of sheath advance.
    pub sheath_gain: f64,
    /// mm of exposed length gained per mm of core advance.
    pub core_gain: f64,
    pub min_exposed_length: f64,
}

impl RigGeometry {
    pub fn new(port: InsertionPort, passive_length: f64) -> Self {
        Self {
            port,
            passive_length,
            active_length: 120.0,
            sheath_gain: 0.5,
            core_gain: 0.5,
            min_exposed_length: 10.0,
        }
    }

    pub fn exposed_length(&self, j: &JointState) -> f64 {
        (self.active_length - self.sheath_gain * j.sheath + self.core_gain * j.core)
            .max(self.min_exposed_length)
    }

    /// Base frame of the bendable segment: columns are the rolled bend direction, the bend
    /// plane normal, and the insertion axis.
    pub fn base_frame(&self, j: &JointState) -> Frame {
        let axis = self.port.axis.normalize();
        let roll = Rotation3::from_axis_angle(&Unit::new_unchecked(axis), j.rotation.to_radians());
        let e1 = roll * self.port.reference_normal();
        let e2 = axis.cross(&e1);
        Frame {
            position: self.port.origin + axis * (self.passive_length + j.translation),
            rotation: Matrix3::from_columns(&[e1, e2, axis]),
        }
    }

    /// Per-DOF Lipschitz constants of the tip position, mm per joint unit
    /// (translation, rotation, sheath, bending, core, jaw).
    ///
    /// The tip stays within `exposed` of the base, so a roll of `dφ` moves it at most
    /// `exposed · dφ`; the inscribed-arc tip is `exposed · g(θ)` with `|g'| ≤ 1` per radian.
    pub fn tip_lipschitz(&self, limits: &JointLimits) -> [f64; 6] {
        let max_exposed = (self.active_length + self.core_gain * limits.core.max.max(0.0)
            - self.sheath_gain * limits.sheath.min.min(0.0))
        .max(self.min_exposed_length);
        let per_deg = max_exposed * std::f64::consts::PI / 180.0 * 1.01;
        [1.0, per_deg, self.sheath_gain, per_deg, self.core_gain, 0.0]
    }
}

/// World-frame shape for joint state `j`. The jaw DOF does not change the shape.
pub fn forward_kinematics(j: &JointState, rig: &RigGeometry) -> CatheterShape {
    let local = bend_shape(j.bending, rig.exposed_length(j));
    let base = rig.base_frame(j);
    let points = local
        .points
        .iter()
        .map(|p| base.position + base.rotation * p)
        .collect();
    let tip_frame = Frame {
        position: base.position + base.rotation * local.tip_frame.position,
        rotation: base.rotation * local.tip_frame.rotation,
    };
    CatheterShape { points, tip_frame }
}

pub fn tip_pose(j: &JointState, rig: &RigGeometry) -> TipPose {
    forward_kinematics(j, rig).tip_pose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::Dof;
    use proptest::prelude::*;

    fn rig() -> RigGeometry {
        RigGeometry::new(
            InsertionPort::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.0, 0.0, -1.0)),
            10.0,
        )
    }

    /// Tip of a continuous arc by midpoint-rule integration of its unit tangent.
    fn integrate_arc_tip(bending_deg: f64, length: f64, steps: usize) -> Vector3<f64> {
        let theta = bending_deg.to_radians();
        let h = length / steps as f64;
        let mut p = Vector3::zeros();
        for i in 0..steps {
            let a = theta * (i as f64 + 0.5) / steps as f64;
            p += Vector3::new(a.sin(), 0.0, a.cos()) * h;
        }
        p
    }

    #[test]
    fn straight_when_unbent() {
        let s = bend_shape(0.0, 100.0);
        assert_eq!(s.points.len(), 100);
        assert!((s.tip() - Vector3::new(0.0, 0.0, 100.0)).norm() < 1e-12);
        assert!((s.tip_frame.z_axis() - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn quarter_turn_tip_matches_arc() {
        let s = bend_shape(90.0, 100.0);
        let r = 100.0 / std::f64::consts::FRAC_PI_2;
        let analytic = Vector3::new(r, 0.0, r);
        let integrated = integrate_arc_tip(90.0, 100.0, 200_000);
        assert!((analytic - integrated).norm() < 1e-6);
        // equal-chord inscription sits within 1e-3 mm of the continuous arc
        assert!((s.tip() - analytic).norm() < 1e-3, "{:?}", s.tip());
        assert!((s.tip().x - 63.662).abs() < 1e-3);
    }

    #[test]
    fn half_turn_tip_matches_arc() {
        let s = bend_shape(180.0, 100.0);
        let r = 100.0 / std::f64::consts::PI;
        let integrated = integrate_arc_tip(180.0, 100.0, 200_000);
        assert!((integrated - Vector3::new(2.0 * r, 0.0, 0.0)).norm() < 1e-6);
        assert!((s.tip() - Vector3::new(2.0 * r, 0.0, 0.0)).norm() < 5e-3);
        assert!(s.tip().z.abs() < 1e-9);
        assert!((s.tip_frame.z_axis() - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn all_zero_joints_put_tip_at_full_length() {
        let r = rig();
        let shape = forward_kinematics(&JointState::zero(), &r);
        let expect = r.port.origin + r.port.axis * (r.passive_length + r.active_length);
        assert!((shape.tip() - expect).norm() < 1e-9);
    }

    #[test]
    fn translation_moves_tip_along_axis() {
        let r = rig();
        let a = tip_pose(&JointState::zero(), &r);
        let b = tip_pose(&JointState::zero().with(Dof::Translation, 10.0), &r);
        let d = b.position - a.position;
        assert!((d - r.port.axis * 10.0).norm() < 1e-9);
    }

    #[test]
    fn half_roll_mirrors_about_axis() {
        let r = rig();
        let j = JointState::zero().with(Dof::Bending, 50.0);
        let a = tip_pose(&j, &r).position - r.port.origin;
        let b = tip_pose(&j.with(Dof::Rotation, 180.0), &r).position - r.port.origin;
        let axis = r.port.axis;
        let along_a = axis * a.dot(&axis);
        let along_b = axis * b.dot(&axis);
        assert!((along_a - along_b).norm() < 1e-9);
        assert!(((a - along_a) + (b - along_b)).norm() < 1e-9);
    }

    #[test]
    fn tip_frame_matches_last_chord() {
        let r = rig();
        let j = JointState::zero().with(Dof::Bending, 70.0).with(Dof::Rotation, 33.0);
        let s = forward_kinematics(&j, &r);
        let n = s.points.len();
        let chord = (s.points[n - 1] - s.points[n - 2]).normalize();
        // chord lags the arc tangent by half a link angle
        let lag = (70.0f64 / 99.0 / 2.0).to_radians();
        assert!((chord.dot(&s.tip_frame.z_axis()) - lag.cos()).abs() < 1e-9);
        let rot = s.tip_frame.rotation;
        assert!((rot.transpose() * rot - Matrix3::identity()).norm() < 1e-12);
        assert!((rot.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sheath_and_core_change_exposed_length() {
        let r = rig();
        let j = JointState::zero().with(Dof::Sheath, 20.0);
        assert!((forward_kinematics(&j, &r).polyline_length() - 110.0).abs() < 1e-9);
        let j = JointState::zero().with(Dof::Core, 20.0);
        assert!((forward_kinematics(&j, &r).polyline_length() - 130.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn arc_length_and_spacing_preserved(bend in 0.0f64..160.0, len in 1.0f64..300.0) {
            let s = bend_shape(bend, len);
            prop_assert_eq!(s.points.len(), SHAPE_POINTS);
            prop_assert!((s.polyline_length() - len).abs() < 1e-6);
            let c = len / 99.0;
            for w in s.points.windows(2) {
                prop_assert!(((w[1] - w[0]).norm() - c).abs() < 1e-6);
            }
        }

        #[test]
        fn roll_is_rotation_about_axis(
            t in 0.0f64..200.0, rot in -180.0f64..180.0, bend in 0.0f64..160.0
        ) {
            let r = rig();
            let j0 = JointState { translation: t, bending: bend, ..JointState::zero() };
            let s0 = forward_kinematics(&j0, &r);
            let s1 = forward_kinematics(&JointState { rotation: rot, ..j0 }, &r);
            let roll = Rotation3::from_axis_angle(&Unit::new_normalize(r.port.axis), rot.to_radians());
            for (p0, p1) in s0.points.iter().zip(&s1.points) {
                let expect = r.port.origin + roll * (p0 - r.port.origin);
                prop_assert!((expect - p1).norm() < 1e-9);
            }
        }

        #[test]
        fn tip_is_lipschitz_per_dof(
            base in proptest::array::uniform6(0.0f64..1.0),
            dof_idx in 0usize..6, delta in -5.0f64..5.0
        ) {
            let r = rig();
            let lim = crate::kinematics::JointLimits::default();
            let mut j = JointState::zero();
            for d in Dof::ALL {
                let l = lim.get(d);
                j.set(d, l.min + base[d.index()] * l.span());
            }
            let dof = Dof::ALL[dof_idx];
            let j2 = j.with(dof, j.get(dof) + delta);
            let moved = (tip_pose(&j2, &r).position - tip_pose(&j, &r).position).norm();
            prop_assert!(moved <= r.tip_lipschitz(&lim)[dof_idx] * delta.abs() + 1e-9);
        }
    }
}
