//! Right-heart lumen geometry, containment and collision queries, and the valve target.

mod bvh;
mod mesh;
mod phantom;

pub use bvh::{closest_point_on_triangle, Bvh, Nearest};
pub use mesh::{
    cuboid, detect_format, icosphere, parse_mesh, parse_obj, parse_stl_ascii, parse_stl_binary,
    MeshFormat, TriMesh,
};
pub use phantom::{synthesize_phantom, PhantomLayout, PhantomSpec};

use crate::kinematics::{CatheterShape, InsertionPort};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnatomyError {
    #[error("mesh parse error: {0}")]
    Parse(String),
    #[error("non-watertight: {open_edges} open edges")]
    NonWatertight { open_edges: usize },
    #[error("non-manifold: {edges} edges shared by more than two triangles")]
    NonManifold { edges: usize },
    #[error("inconsistent orientation on {edges} edges")]
    InconsistentOrientation { edges: usize },
    #[error("{0} degenerate triangles")]
    DegenerateTriangles(usize),
    #[error("unit_scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("insertion port origin lies outside the lumen")]
    PortOutside,
    #[error("invalid valve target: {0}")]
    InvalidTarget(String),
    #[error("invalid phantom spec: {0}")]
    InvalidPhantom(String),
}

/// Options applied while loading an external mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    /// Multiplier from file units to millimetres.
    pub unit_scale: f64,
    /// Direction pointing up the superior vena cava, out of the body.
    pub svc_axis: Vector3<f64>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            unit_scale: 1.0,
            svc_axis: Vector3::z(),
        }
    }
}

/// Signed distance is negative inside; points on the surface are inside at distance 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContainmentResult {
    pub inside: bool,
    pub distance: f64,
}

/// Distances below this count as lying on the surface.
const SURFACE_EPS: f64 = 1e-9;

/// Fixed, irrational-ish ray directions; later ones are only used when earlier rays graze
/// an edge.
const RAY_DIRS: [[f64; 3]; 4] = [
    [0.5773502691896258, 0.5773502691896257, 0.5773502691896258],
    [-0.2672612419124244, 0.8017837257372732, 0.5345224838248488],
    [0.8164965809277261, -0.4082482904638631, 0.4082482904638630],
    [0.1301889109861785, 0.2603778219723570, -0.9566892254212519],
];

#[derive(Debug, Clone)]
pub struct HeartModel {
    mesh: TriMesh,
    bvh: Bvh,
    insertion_port: InsertionPort,
    bounds: (Vector3<f64>, Vector3<f64>),
}

impl HeartModel {
    /// Wrap an already-validated mesh; the port defaults to the vertex farthest along
    /// `svc_axis`, pointing back down the axis.
    pub fn from_mesh(mesh: TriMesh, svc_axis: Vector3<f64>) -> Result<Self, AnatomyError> {
        mesh.validate()?;
        let up = svc_axis.normalize();
        let top = mesh
            .vertices
            .iter()
            .copied()
            .max_by(|a, b| a.dot(&up).total_cmp(&b.dot(&up)))
            .expect("validated mesh has vertices");
        let bounds = mesh.bounds();
        let tris = (0..mesh.triangles.len()).map(|i| mesh.triangle(i)).collect();
        Ok(Self {
            bvh: Bvh::build(tris),
            mesh,
            insertion_port: InsertionPort::new(top, -up),
            bounds,
        })
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn insertion_port(&self) -> &InsertionPort {
        &self.insertion_port
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        self.bounds
    }

    pub fn set_insertion_port(&mut self, port: InsertionPort) -> Result<(), AnatomyError> {
        if !self.contains(&port.origin) {
            return Err(AnatomyError::PortOutside);
        }
        self.insertion_port = port;
        Ok(())
    }

    pub fn query(&self, p: &Vector3<f64>) -> ContainmentResult {
        let d = self.bvh.nearest(p).map_or(f64::INFINITY, |n| n.distance);
        if d <= SURFACE_EPS {
            return ContainmentResult {
                inside: true,
                distance: 0.0,
            };
        }
        let inside = self.parity_inside(p);
        ContainmentResult {
            inside,
            distance: if inside { -d } else { d },
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let (lo, hi) = self.bounds;
        if (0..3).any(|k| p[k] < lo[k] - SURFACE_EPS || p[k] > hi[k] + SURFACE_EPS) {
            return false;
        }
        self.bvh.any_within(p, SURFACE_EPS) || self.parity_inside(p)
    }

    fn parity_inside(&self, p: &Vector3<f64>) -> bool {
        let (lo, hi) = self.bounds;
        if (0..3).any(|k| p[k] < lo[k] || p[k] > hi[k]) {
            return false;
        }
        for d in RAY_DIRS {
            if let Some(n) = self.bvh.ray_parity(p, &Vector3::new(d[0], d[1], d[2])) {
                return n % 2 == 1;
            }
        }
        // every fixed ray grazed an edge; fall back to a generalized winding number
        self.winding_number(p) > 0.5
    }

    /// Solid-angle winding number, exact for closed oriented meshes.
    fn winding_number(&self, p: &Vector3<f64>) -> f64 {
        let mut total = 0.0;
        for i in 0..self.mesh.triangles.len() {
            let [a, b, c] = self.mesh.triangle(i);
            let (a, b, c) = (a - p, b - p, c - p);
            let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
            let num = a.dot(&b.cross(&c));
            let den = la * lb * lc + a.dot(&b) * lc + b.dot(&c) * la + c.dot(&a) * lb;
            total += 2.0 * num.atan2(den);
        }
        total / (4.0 * std::f64::consts::PI)
    }

    /// True when `p` is outside or closer than `margin` to the wall.
    pub fn point_collides(&self, p: &Vector3<f64>, margin: f64) -> bool {
        if margin > 0.0 && self.bvh.any_within(p, margin) {
            // |d| <= margin here, so only the exact query can settle the boundary case
            let r = self.query(p);
            return !r.inside || r.distance > -margin;
        }
        !self.contains(p)
    }
}

/// Parse, scale and validate a mesh document.
pub fn load_heart_model(bytes: &[u8], opts: LoadOptions) -> Result<HeartModel, AnatomyError> {
    if !(opts.unit_scale > 0.0 && opts.unit_scale.is_finite()) {
        return Err(AnatomyError::InvalidScale(opts.unit_scale));
    }
    let mut mesh = parse_mesh(bytes)?;
    if opts.unit_scale != 1.0 {
        mesh.scale(opts.unit_scale);
    }
    HeartModel::from_mesh(mesh, opts.svc_axis)
}

pub fn containment_query(model: &HeartModel, points: &[Vector3<f64>]) -> Vec<ContainmentResult> {
    points.iter().map(|p| model.query(p)).collect()
}

/// Any shape point outside the lumen or with signed distance above `-wall_margin`.
pub fn collision(model: &HeartModel, shape: &CatheterShape, wall_margin: f64) -> bool {
    shape
        .points
        .iter()
        .any(|p| model.point_collides(p, wall_margin))
}

/// Two points on the valve centerline, atrial side first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValveTarget {
    pub p1: Vector3<f64>,
    pub p2: Vector3<f64>,
    pub axis: Vector3<f64>,
}

impl ValveTarget {
    pub fn new(p1: Vector3<f64>, p2: Vector3<f64>) -> Result<Self, AnatomyError> {
        let d = p2 - p1;
        let len = d.norm();
        if !(len > 0.0 && len.is_finite()) {
            return Err(AnatomyError::InvalidTarget("p1 and p2 coincide".into()));
        }
        Ok(Self {
            p1,
            p2,
            axis: d / len,
        })
    }

    /// Like `new`, additionally requiring both points inside `model`.
    pub fn within(model: &HeartModel, p1: Vector3<f64>, p2: Vector3<f64>) -> Result<Self, AnatomyError> {
        let t = Self::new(p1, p2)?;
        if !model.contains(&p1) || !model.contains(&p2) {
            return Err(AnatomyError::InvalidTarget("centerline point outside the lumen".into()));
        }
        Ok(t)
    }

    pub fn length(&self) -> f64 {
        (self.p2 - self.p1).norm()
    }

    /// Distance from `p` to the centerline (infinite line through p1, p2).
    pub fn lateral_distance(&self, p: &Vector3<f64>) -> f64 {
        let q = p - self.p1;
        (q - self.axis * q.dot(&self.axis)).norm()
    }

    /// Signed distance of `p` past the p1 plane along the axis.
    pub fn depth(&self, p: &Vector3<f64>) -> f64 {
        (p - self.p1).dot(&self.axis)
    }
}
