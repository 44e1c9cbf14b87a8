//! Procedural right-heart phantom: SVC tube into an atrial sphere, joined to a ventricular
//! sphere through a short annulus cylinder. Meshed by marching tetrahedra on the union SDF.

use super::{AnatomyError, HeartModel, TriMesh, ValveTarget};
use crate::kinematics::InsertionPort;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

type V3 = Vector3<f64>;

/// Height of the SVC tube above the insertion port, mm.
const TUBE_CAP: f64 = 5.0;

/// Phantom dimensions in mm and degrees. The port sits at the origin looking down -z; the
/// annulus axis leans `annulus_offset_angle` from -z towards +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub svc_radius: f64,
    pub svc_length: f64,
    pub atrium_radius: f64,
    pub ventricle_radius: f64,
    pub annulus_radius: f64,
    pub annulus_offset_angle: f64,
    /// Distance between the two centerline points (atrial and ventricular faces).
    pub annulus_thickness: f64,
    /// Marching-tetrahedra cell size.
    pub grid_step: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            svc_radius: 12.0,
            svc_length: 100.0,
            atrium_radius: 60.0,
            ventricle_radius: 45.0,
            annulus_radius: 16.0,
            annulus_offset_angle: 40.0,
            annulus_thickness: 10.0,
            grid_step: 2.0,
        }
    }
}

/// Resolved primitive placement with an analytic signed distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomLayout {
    pub spec: PhantomSpec,
    pub port: InsertionPort,
    pub svc_top: V3,
    pub svc_bottom: V3,
    pub atrium_center: V3,
    pub ventricle_center: V3,
    pub annulus_start: V3,
    pub annulus_end: V3,
    pub p1: V3,
    pub p2: V3,
}

impl PhantomSpec {
    pub fn layout(&self) -> Result<PhantomLayout, AnatomyError> {
        let s = self;
        let bad = |m: String| Err(AnatomyError::InvalidPhantom(m));
        let named = [
            ("svc_radius", s.svc_radius),
            ("svc_length", s.svc_length),
            ("atrium_radius", s.atrium_radius),
            ("ventricle_radius", s.ventricle_radius),
            ("annulus_radius", s.annulus_radius),
            ("annulus_thickness", s.annulus_thickness),
            ("grid_step", s.grid_step),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..90.0).contains(&s.annulus_offset_angle) {
            return bad(format!("annulus_offset_angle must lie in [0, 90), got {}", s.annulus_offset_angle));
        }
        if s.annulus_radius >= s.atrium_radius {
            return bad("annulus_radius must be smaller than atrium_radius".into());
        }
        if s.annulus_radius >= s.ventricle_radius {
            return bad("annulus_radius must be smaller than ventricle_radius".into());
        }
        if s.svc_radius >= s.atrium_radius {
            return bad("svc_radius must be smaller than atrium_radius".into());
        }

        let a = s.annulus_offset_angle.to_radians();
        let v = V3::new(a.sin(), 0.0, -a.cos());
        let svc_top = V3::new(0.0, 0.0, TUBE_CAP);
        let svc_bottom = V3::new(0.0, 0.0, -s.svc_length);
        // tube enters 40% of a radius into the atrium
        let atrium_center = V3::new(0.0, 0.0, -(s.svc_length + 0.6 * s.atrium_radius));
        let h_a = (s.atrium_radius.powi(2) - s.annulus_radius.powi(2)).sqrt();
        let h_v = (s.ventricle_radius.powi(2) - s.annulus_radius.powi(2)).sqrt();
        let p1 = atrium_center + v * h_a;
        let p2 = p1 + v * s.annulus_thickness;
        let ventricle_center = p2 + v * h_v;
        let overhang = 0.5 * s.annulus_radius;

        let gap = (ventricle_center - atrium_center).norm() - s.atrium_radius - s.ventricle_radius;
        if gap < s.grid_step {
            return bad(format!(
                "chambers overlap or touch (gap {gap:.3} mm, needs at least one grid step); increase annulus_thickness"
            ));
        }
        let tube_gap = point_segment_distance(&ventricle_center, &svc_top, &svc_bottom)
            - s.ventricle_radius
            - s.svc_radius;
        if tube_gap < s.grid_step {
            return bad(format!("ventricle intersects the SVC tube (gap {tube_gap:.3} mm)"));
        }
        Ok(PhantomLayout {
            spec: *s,
            port: InsertionPort::new(V3::zeros(), -V3::z()),
            svc_top,
            svc_bottom,
            atrium_center,
            ventricle_center,
            annulus_start: p1 - v * overhang,
            annulus_end: p2 + v * overhang,
            p1,
            p2,
        })
    }
}

fn point_segment_distance(p: &V3, a: &V3, b: &V3) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (a + ab * t - p).norm()
}

fn capped_cylinder_sdf(p: &V3, a: &V3, b: &V3, r: f64) -> f64 {
    let ab = b - a;
    let len = ab.norm();
    let u = ab / len;
    let q = p - a;
    let t = q.dot(&u);
    let radial = (q - u * t).norm();
    let dx = radial - r;
    let dy = (t - 0.5 * len).abs() - 0.5 * len;
    dx.max(dy).min(0.0) + (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt()
}

impl PhantomLayout {
    /// Union of the primitives; negative inside. Exact outside each primitive and a lower
    /// bound on depth inside, which is all containment needs.
    pub fn sdf(&self, p: &V3) -> f64 {
        let s = &self.spec;
        let tube = capped_cylinder_sdf(p, &self.svc_top, &self.svc_bottom, s.svc_radius);
        let atrium = (p - self.atrium_center).norm() - s.atrium_radius;
        let ventricle = (p - self.ventricle_center).norm() - s.ventricle_radius;
        let ring = capped_cylinder_sdf(p, &self.annulus_start, &self.annulus_end, s.annulus_radius);
        tube.min(atrium).min(ventricle).min(ring)
    }

    /// Axis-aligned box enclosing all primitives.
    pub fn bounds(&self) -> (V3, V3) {
        let s = &self.spec;
        let mut lo = V3::repeat(f64::INFINITY);
        let mut hi = V3::repeat(f64::NEG_INFINITY);
        let mut add = |c: V3, r: f64| {
            lo = lo.inf(&(c - V3::repeat(r)));
            hi = hi.sup(&(c + V3::repeat(r)));
        };
        add(self.svc_top, s.svc_radius);
        add(self.svc_bottom, s.svc_radius);
        add(self.atrium_center, s.atrium_radius);
        add(self.ventricle_center, s.ventricle_radius);
        add(self.annulus_start, s.annulus_radius);
        add(self.annulus_end, s.annulus_radius);
        (lo, hi)
    }

    pub fn annulus_center(&self) -> V3 {
        (self.p1 + self.p2) * 0.5
    }
}

/// Build the phantom mesh, port and valve centerline. Deterministic for a given spec.
pub fn synthesize_phantom(spec: &PhantomSpec) -> Result<(HeartModel, ValveTarget), AnatomyError> {
    let layout = spec.layout()?;
    let (lo, hi) = layout.bounds();
    let mesh = marching_tetrahedra(|p| layout.sdf(p), lo, hi, spec.grid_step);
    let mut model = HeartModel::from_mesh(mesh, V3::z())?;
    model.set_insertion_port(layout.port)?;
    let target = ValveTarget::within(&model, layout.p1, layout.p2)?;
    Ok((model, target))
}

/// Six tetrahedra per cube sharing the main diagonal; conforming across neighbouring cubes.
const KUHN: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Triangulate the zero level set of `f` inside `[lo, hi]` padded by two cells. Normals
/// point towards positive values.
pub(crate) fn marching_tetrahedra(f: impl Fn(&V3) -> f64, lo: V3, hi: V3, h: f64) -> TriMesh {
    let origin = lo - V3::repeat(2.0 * h);
    let dims: [usize; 3] = std::array::from_fn(|k| (((hi[k] - lo[k]) / h).ceil() as usize) + 5);
    let id = |i: usize, j: usize, k: usize| (i + dims[0] * (j + dims[1] * k)) as u32;
    let pos = |i: usize, j: usize, k: usize| origin + V3::new(i as f64, j as f64, k as f64) * h;
    // keep samples off exactly zero so every crossing lies strictly inside an edge
    let nudge = 1e-3 * h;
    let mut values = vec![0.0; dims[0] * dims[1] * dims[2]];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let v = f(&pos(i, j, k));
                values[id(i, j, k) as usize] = if v.abs() < nudge {
                    if v < 0.0 {
                        -nudge
                    } else {
                        nudge
                    }
                } else {
                    v
                };
            }
        }
    }
    let point_of = |g: u32| {
        let g = g as usize;
        let i = g % dims[0];
        let j = (g / dims[0]) % dims[1];
        let k = g / (dims[0] * dims[1]);
        pos(i, j, k)
    };

    let mut vertices: Vec<V3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut edge_vertex: HashMap<(u32, u32), u32> = HashMap::new();
    let mut crossing = |a: u32, b: u32, vertices: &mut Vec<V3>| -> u32 {
        let key = (a.min(b), a.max(b));
        *edge_vertex.entry(key).or_insert_with(|| {
            let (fa, fb) = (values[key.0 as usize], values[key.1 as usize]);
            let t = fa / (fa - fb);
            let (pa, pb) = (point_of(key.0), point_of(key.1));
            vertices.push(pa + (pb - pa) * t);
            (vertices.len() - 1) as u32
        })
    };

    for k in 0..dims[2] - 1 {
        for j in 0..dims[1] - 1 {
            for i in 0..dims[0] - 1 {
                let corner = |bits: [usize; 3]| id(i + bits[0], j + bits[1], k + bits[2]);
                let c000 = corner([0, 0, 0]);
                let first = values[c000 as usize] < 0.0;
                let mixed = (1..8).any(|b| {
                    (values[corner([b & 1, (b >> 1) & 1, (b >> 2) & 1]) as usize] < 0.0) != first
                });
                if !mixed {
                    continue;
                }
                for perm in KUHN {
                    let mut bits = [0usize; 3];
                    let mut tet = [c000; 4];
                    for (n, &axis) in perm.iter().enumerate() {
                        bits[axis] = 1;
                        tet[n + 1] = corner(bits);
                    }
                    let (ins, outs): (Vec<u32>, Vec<u32>) =
                        tet.iter().partition(|&&g| values[g as usize] < 0.0);
                    let polys: Vec<[u32; 3]> = match (ins.len(), outs.len()) {
                        (1, 3) => vec![[
                            crossing(ins[0], outs[0], &mut vertices),
                            crossing(ins[0], outs[1], &mut vertices),
                            crossing(ins[0], outs[2], &mut vertices),
                        ]],
                        (3, 1) => vec![[
                            crossing(ins[0], outs[0], &mut vertices),
                            crossing(ins[1], outs[0], &mut vertices),
                            crossing(ins[2], outs[0], &mut vertices),
                        ]],
                        (2, 2) => {
                            let ac = crossing(ins[0], outs[0], &mut vertices);
                            let ad = crossing(ins[0], outs[1], &mut vertices);
                            let bd = crossing(ins[1], outs[1], &mut vertices);
                            let bc = crossing(ins[1], outs[0], &mut vertices);
                            vec![[ac, ad, bd], [ac, bd, bc]]
                        }
                        _ => continue,
                    };
                    let centroid = |gs: &[u32]| gs.iter().map(|&g| point_of(g)).sum::<V3>() / gs.len() as f64;
                    let outward = centroid(&outs) - centroid(&ins);
                    for mut t in polys {
                        let [a, b, c] = t.map(|v| vertices[v as usize]);
                        if (b - a).cross(&(c - a)).dot(&outward) < 0.0 {
                            t.swap(1, 2);
                        }
                        triangles.push(t);
                    }
                }
            }
        }
    }
    TriMesh {
        vertices,
        triangles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_geometry() {
        let l = PhantomSpec::default().layout().unwrap();
        assert!(((l.p2 - l.p1).norm() - 10.0).abs() < 1e-12);
        assert!(l.sdf(&l.annulus_center()) < 0.0);
        assert!(l.sdf(&l.atrium_center) < 0.0);
        assert!(l.sdf(&l.port.origin) < 0.0);
        assert!(l.sdf(&V3::new(0.0, 0.0, 50.0)) > 0.0);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let s = PhantomSpec { annulus_radius: 60.0, ..Default::default() };
        assert!(s.layout().is_err());
        let s = PhantomSpec { svc_radius: 0.0, ..Default::default() };
        assert!(s.layout().is_err());
        let s = PhantomSpec { annulus_thickness: 1.0, ..Default::default() };
        assert!(matches!(s.layout(), Err(AnatomyError::InvalidPhantom(_))));
    }

    #[test]
    fn sphere_level_set_is_closed_and_outward() {
        let r = 10.0;
        let m = marching_tetrahedra(|p| p.norm() - r, V3::repeat(-r), V3::repeat(r), 1.0);
        m.validate().unwrap();
        let vol = m.signed_volume();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        assert!((vol - exact).abs() / exact < 0.02, "{vol} vs {exact}");
        for v in &m.vertices {
            assert!((v.norm() - r).abs() < 0.1);
        }
    }
}
