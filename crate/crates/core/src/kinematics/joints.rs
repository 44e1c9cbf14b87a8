//! Joint-space types for the six-DOF delivery catheter.

use serde::{Deserialize, Serialize};
use std::fmt;

/// One actuated degree of freedom of the catheter drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dof {
    Translation,
    Rotation,
    Sheath,
    Bending,
    Core,
    Jaw,
}

impl Dof {
    pub const ALL: [Dof; 6] = [
        Dof::Translation,
        Dof::Rotation,
        Dof::Sheath,
        Dof::Bending,
        Dof::Core,
        Dof::Jaw,
    ];

    /// The three DOFs steered during localization, in observation/action order.
    pub const PLANNING: [Dof; 3] = [Dof::Translation, Dof::Rotation, Dof::Bending];

    pub fn index(self) -> usize {
        match self {
            Dof::Translation => 0,
            Dof::Rotation => 1,
            Dof::Sheath => 2,
            Dof::Bending => 3,
            Dof::Core => 4,
            Dof::Jaw => 5,
        }
    }

    /// Position within `PLANNING`, if this is a planning DOF.
    pub fn planning_index(self) -> Option<usize> {
        Self::PLANNING.iter().position(|&d| d == self)
    }

    pub fn name(self) -> &'static str {
        match self {
            Dof::Translation => "translation",
            Dof::Rotation => "rotation",
            Dof::Sheath => "sheath",
            Dof::Bending => "bending",
            Dof::Core => "core",
            Dof::Jaw => "jaw",
        }
    }

    /// Linear DOFs are in mm, angular ones in degrees.
    pub fn is_angular(self) -> bool {
        matches!(self, Dof::Rotation | Dof::Bending | Dof::Jaw)
    }
}

impl fmt::Display for Dof {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Joint coordinates of the catheter. Millimetres for linear DOFs, degrees for angular ones.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointState {
    pub translation: f64,
    pub rotation: f64,
    pub sheath: f64,
    pub bending: f64,
    pub core: f64,
    pub jaw: f64,
}

impl JointState {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            translation: v[0],
            rotation: v[1],
            sheath: v[2],
            bending: v[3],
            core: v[4],
            jaw: v[5],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.translation,
            self.rotation,
            self.sheath,
            self.bending,
            self.core,
            self.jaw,
        ]
    }

    pub fn get(&self, dof: Dof) -> f64 {
        self.to_array()[dof.index()]
    }

    pub fn set(&mut self, dof: Dof, value: f64) {
        match dof {
            Dof::Translation => self.translation = value,
            Dof::Rotation => self.rotation = value,
            Dof::Sheath => self.sheath = value,
            Dof::Bending => self.bending = value,
            Dof::Core => self.core = value,
            Dof::Jaw => self.jaw = value,
        }
    }

    pub fn with(mut self, dof: Dof, value: f64) -> Self {
        self.set(dof, value);
        self
    }

    /// (translation, rotation, bending).
    pub fn planning(&self) -> [f64; 3] {
        [self.translation, self.rotation, self.bending]
    }

    pub fn with_planning(mut self, p: [f64; 3]) -> Self {
        self.translation = p[0];
        self.rotation = p[1];
        self.bending = p[2];
        self
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Closed interval and per-second velocity bound for a single DOF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DofLimit {
    pub min: f64,
    pub max: f64,
    /// Maximum speed in units per second.
    pub max_velocity: f64,
}

impl DofLimit {
    pub const fn new(min: f64, max: f64, max_velocity: f64) -> Self {
        Self {
            min,
            max,
            max_velocity,
        }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    /// Affine map of `[min, max]` onto `[-1, 1]`.
    pub fn normalize(&self, v: f64) -> f64 {
        2.0 * (v - self.min) / self.span() - 1.0
    }
}

/// Workspace of the drive. Defaults follow the reachable ranges of the bench prototype.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointLimits {
    pub translation: DofLimit,
    pub rotation: DofLimit,
    pub sheath: DofLimit,
    pub bending: DofLimit,
    pub core: DofLimit,
    pub jaw: DofLimit,
}

impl Default for JointLimits {
    fn default() -> Self {
        Self {
            translation: DofLimit::new(0.0, 300.0, 5.0),
            rotation: DofLimit::new(-180.0, 180.0, 15.0),
            sheath: DofLimit::new(0.0, 60.0, 5.0),
            bending: DofLimit::new(0.0, 160.0, 15.0),
            core: DofLimit::new(0.0, 60.0, 5.0),
            jaw: DofLimit::new(-360.0, 360.0, 30.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LimitsError {
    #[error("{dof}: min ({min}) must be below max ({max})")]
    EmptyInterval { dof: Dof, min: f64, max: f64 },
    #[error("{dof}: max_velocity must be positive, got {velocity}")]
    NonPositiveVelocity { dof: Dof, velocity: f64 },
}

impl JointLimits {
    pub fn get(&self, dof: Dof) -> &DofLimit {
        match dof {
            Dof::Translation => &self.translation,
            Dof::Rotation => &self.rotation,
            Dof::Sheath => &self.sheath,
            Dof::Bending => &self.bending,
            Dof::Core => &self.core,
            Dof::Jaw => &self.jaw,
        }
    }

    pub fn validate(&self) -> Result<(), LimitsError> {
        for dof in Dof::ALL {
            let l = self.get(dof);
            if !(l.min < l.max) {
                return Err(LimitsError::EmptyInterval {
                    dof,
                    min: l.min,
                    max: l.max,
                });
            }
            if !(l.max_velocity > 0.0) {
                return Err(LimitsError::NonPositiveVelocity {
                    dof,
                    velocity: l.max_velocity,
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, j: &JointState) -> bool {
        Dof::ALL.iter().all(|&d| self.get(d).contains(j.get(d)))
    }
}

/// Clip every coordinate into its interval.
pub fn clamp_joints(j: &JointState, limits: &JointLimits) -> JointState {
    let mut out = *j;
    for dof in Dof::ALL {
        out.set(dof, limits.get(dof).clamp(j.get(dof)));
    }
    out
}
