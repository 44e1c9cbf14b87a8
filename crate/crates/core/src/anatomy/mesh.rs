//! Triangle meshes: STL/OBJ parsing, vertex welding, watertightness checks and STL export.

use super::AnatomyError;
use nalgebra::Vector3;
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    StlBinary,
    StlAscii,
    Obj,
}

/// Triangles smaller than this (relative to the squared bounding-box diagonal) count as
/// degenerate.
const DEGENERATE_REL_AREA: f64 = 1e-14;

impl TriMesh {
    /// Build from a triangle soup, merging bit-identical vertices.
    pub fn from_soup(soup: &[[Vector3<f64>; 3]]) -> Self {
        let mut index: HashMap<[u64; 3], u32> = HashMap::new();
        let mut vertices = Vec::new();
        let mut triangles = Vec::with_capacity(soup.len());
        for tri in soup {
            let mut ids = [0u32; 3];
            for (k, v) in tri.iter().enumerate() {
                // +0.0 and -0.0 weld together
                let key = [
                    (v.x + 0.0).to_bits(),
                    (v.y + 0.0).to_bits(),
                    (v.z + 0.0).to_bits(),
                ];
                ids[k] = *index.entry(key).or_insert_with(|| {
                    vertices.push(*v);
                    (vertices.len() - 1) as u32
                });
            }
            triangles.push(ids);
        }
        Self {
            vertices,
            triangles,
        }
    }

    pub fn triangle(&self, i: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[i];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.vertices {
            *v *= k;
        }
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Number of undirected edges used by exactly one triangle.
    pub fn open_edge_count(&self) -> usize {
        self.edge_uses().values().filter(|u| u.0 + u.1 == 1).count()
    }

    /// (uses as a→b with a<b, uses as b→a) per undirected edge.
    fn edge_uses(&self) -> HashMap<(u32, u32), (u32, u32)> {
        let mut uses: HashMap<(u32, u32), (u32, u32)> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let e = uses.entry((a.min(b), a.max(b))).or_default();
                if a < b {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
            }
        }
        uses
    }

    /// Closed, manifold, consistently oriented and free of degenerate triangles.
    pub fn validate(&self) -> Result<(), AnatomyError> {
        if self.triangles.is_empty() {
            return Err(AnatomyError::Parse("mesh has no triangles".into()));
        }
        let (lo, hi) = self.bounds();
        let diag2 = (hi - lo).norm_squared();
        let degenerate = (0..self.triangles.len())
            .filter(|&i| {
                let t = self.triangles[i];
                if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                    return true;
                }
                let [a, b, c] = self.triangle(i);
                0.5 * (b - a).cross(&(c - a)).norm() <= DEGENERATE_REL_AREA * diag2
            })
            .count();
        if degenerate > 0 {
            return Err(AnatomyError::DegenerateTriangles(degenerate));
        }
        let uses = self.edge_uses();
        let open = uses.values().filter(|u| u.0 + u.1 == 1).count();
        if open > 0 {
            return Err(AnatomyError::NonWatertight { open_edges: open });
        }
        let non_manifold = uses.values().filter(|u| u.0 + u.1 > 2).count();
        if non_manifold > 0 {
            return Err(AnatomyError::NonManifold { edges: non_manifold });
        }
        let flipped = uses.values().filter(|u| u.0 != 1 || u.1 != 1).count();
        if flipped > 0 {
            return Err(AnatomyError::InconsistentOrientation { edges: flipped });
        }
        Ok(())
    }

    /// Signed enclosed volume; positive for outward-facing triangles.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|i| {
                let [a, b, c] = self.triangle(i);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn to_stl_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(84 + 50 * self.triangles.len());
        let mut header = [0u8; 80];
        let tag = b"cathtwin binary stl";
        header[..tag.len()].copy_from_slice(tag);
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.triangles.len() as u32).to_le_bytes());
        for i in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(i);
            let n = (b - a).cross(&(c - a));
            let n = if n.norm() > 0.0 { n.normalize() } else { n };
            for v in [n, a, b, c] {
                for k in 0..3 {
                    out.extend_from_slice(&(v[k] as f32).to_le_bytes());
                }
            }
            out.extend_from_slice(&[0, 0]);
        }
        out
    }
}

pub fn detect_format(bytes: &[u8]) -> Option<MeshFormat> {
    if bytes.len() >= 84 {
        let n = u32::from_le_bytes([bytes[80], bytes[81], bytes[82], bytes[83]]) as usize;
        if bytes.len() == 84 + 50 * n {
            return Some(MeshFormat::StlBinary);
        }
    }
    let text = std::str::from_utf8(bytes).ok()?;
    let trimmed = text.trim_start();
    if trimmed.starts_with("solid") && text.contains("facet") {
        return Some(MeshFormat::StlAscii);
    }
    let looks_obj = text.lines().any(|l| {
        let l = l.trim_start();
        l.starts_with("v ") || l.starts_with("f ")
    });
    looks_obj.then_some(MeshFormat::Obj)
}

pub fn parse_mesh(bytes: &[u8]) -> Result<TriMesh, AnatomyError> {
    match detect_format(bytes) {
        Some(MeshFormat::StlBinary) => parse_stl_binary(bytes),
        Some(MeshFormat::StlAscii) => parse_stl_ascii(bytes),
        Some(MeshFormat::Obj) => parse_obj(bytes),
        None => Err(AnatomyError::Parse("unrecognised mesh format".into())),
    }
}

pub fn parse_stl_binary(bytes: &[u8]) -> Result<TriMesh, AnatomyError> {
    if bytes.len() < 84 {
        return Err(AnatomyError::Parse("binary STL shorter than its header".into()));
    }
    let n = u32::from_le_bytes([bytes[80], bytes[81], bytes[82], bytes[83]]) as usize;
    if bytes.len() < 84 + 50 * n {
        return Err(AnatomyError::Parse(format!(
            "binary STL declares {n} triangles but holds {} bytes",
            bytes.len()
        )));
    }
    let f = |off: usize| f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]) as f64;
    let soup: Vec<[Vector3<f64>; 3]> = (0..n)
        .map(|i| {
            let base = 84 + 50 * i + 12;
            let v = |k: usize| {
                let o = base + 12 * k;
                Vector3::new(f(o), f(o + 4), f(o + 8))
            };
            [v(0), v(1), v(2)]
        })
        .collect();
    Ok(TriMesh::from_soup(&soup))
}

pub fn parse_stl_ascii(bytes: &[u8]) -> Result<TriMesh, AnatomyError> {
    let text = std::str::from_utf8(bytes).map_err(|e| AnatomyError::Parse(e.to_string()))?;
    let mut soup = Vec::new();
    let mut current: Vec<Vector3<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("vertex") => {
                let coords: Result<Vec<f64>, _> = tok.map(str::parse::<f64>).collect();
                let coords = coords.map_err(|e| AnatomyError::Parse(format!("line {}: {e}", lineno + 1)))?;
                if coords.len() != 3 {
                    return Err(AnatomyError::Parse(format!("line {}: vertex needs 3 coordinates", lineno + 1)));
                }
                current.push(Vector3::new(coords[0], coords[1], coords[2]));
            }
            Some("endfacet") => {
                if current.len() != 3 {
                    return Err(AnatomyError::Parse(format!(
                        "line {}: facet has {} vertices",
                        lineno + 1,
                        current.len()
                    )));
                }
                soup.push([current[0], current[1], current[2]]);
                current.clear();
            }
            _ => {}
        }
    }
    if soup.is_empty() {
        return Err(AnatomyError::Parse("ASCII STL contains no facets".into()));
    }
    Ok(TriMesh::from_soup(&soup))
}

pub fn parse_obj(bytes: &[u8]) -> Result<TriMesh, AnatomyError> {
    let text = std::str::from_utf8(bytes).map_err(|e| AnatomyError::Parse(e.to_string()))?;
    let mut vertices = Vec::new();
    let mut faces: Vec<[i64; 3]> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut tok = line.split_whitespace();
        let err = |m: String| AnatomyError::Parse(format!("line {}: {m}", lineno + 1));
        match tok.next() {
            Some("v") => {
                let c: Result<Vec<f64>, _> = tok.take(3).map(str::parse::<f64>).collect();
                let c = c.map_err(|e| err(e.to_string()))?;
                if c.len() != 3 {
                    return Err(err("vertex needs 3 coordinates".into()));
                }
                vertices.push(Vector3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Result<Vec<i64>, _> = tok
                    .map(|t| t.split('/').next().unwrap_or("").parse::<i64>())
                    .collect();
                let idx = idx.map_err(|e| err(e.to_string()))?;
                if idx.len() != 3 {
                    return Err(err(format!("only triangles are supported, face has {} corners", idx.len())));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    let n = vertices.len() as i64;
    let mut triangles = Vec::with_capacity(faces.len());
    for f in faces {
        let mut t = [0u32; 3];
        for k in 0..3 {
            // OBJ indices are 1-based; negatives count back from the end
            let i = if f[k] > 0 { f[k] - 1 } else { n + f[k] };
            if i < 0 || i >= n {
                return Err(AnatomyError::Parse(format!("face index {} out of range", f[k])));
            }
            t[k] = i as u32;
        }
        triangles.push(t);
    }
    if triangles.is_empty() {
        return Err(AnatomyError::Parse("OBJ contains no faces".into()));
    }
    // weld duplicated positions so STL-style OBJ exports validate too
    let soup: Vec<[Vector3<f64>; 3]> = triangles
        .iter()
        .map(|t| [vertices[t[0] as usize], vertices[t[1] as usize], vertices[t[2] as usize]])
        .collect();
    Ok(TriMesh::from_soup(&soup))
}

/// Outward-oriented axis-aligned box, two triangles per face.
pub fn cuboid(lo: Vector3<f64>, hi: Vector3<f64>) -> TriMesh {
    let vertices: Vec<Vector3<f64>> = (0..8)
        .map(|i| {
            Vector3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { lo.z } else { hi.z },
            )
        })
        .collect();
    let quads = [
        [0, 2, 3, 1], // z = lo
        [4, 5, 7, 6], // z = hi
        [0, 1, 5, 4], // y = lo
        [2, 6, 7, 3], // y = hi
        [0, 4, 6, 2], // x = lo
        [1, 3, 7, 5], // x = hi
    ];
    let mut triangles = Vec::new();
    for q in quads {
        triangles.push([q[0], q[1], q[2]]);
        triangles.push([q[0], q[2], q[3]]);
    }
    TriMesh {
        vertices,
        triangles,
    }
}

/// Geodesic sphere: a subdivided icosahedron projected onto the sphere.
pub fn icosphere(center: Vector3<f64>, r: f64, subdivisions: usize) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vector3<f64>> = [
        [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
        [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
        [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vector3::new(p[0], p[1], p[2]).normalize())
    .collect();
    let mut tris: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(tris.len() * 4);
        let mut midpoint = |a: u32, b: u32, vs: &mut Vec<Vector3<f64>>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                vs.push(((vs[a as usize] + vs[b as usize]) * 0.5).normalize());
                (vs.len() - 1) as u32
            })
        };
        for [a, b, c] in tris {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        tris = next;
    }
    for v in &mut vertices {
        *v = center + *v * r;
    }
    TriMesh {
        vertices,
        triangles: tris,
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn unit_cube() -> TriMesh {
        cuboid(Vector3::zeros(), Vector3::repeat(1.0))
    }

    pub fn to_ascii_stl(m: &TriMesh) -> String {
        let mut s = String::from("solid test\n");
        for i in 0..m.triangles.len() {
            let [a, b, c] = m.triangle(i);
            s.push_str("  facet normal 0 0 0\n    outer loop\n");
            for v in [a, b, c] {
                s.push_str(&format!("      vertex {} {} {}\n", v.x, v.y, v.z));
            }
            s.push_str("    endloop\n  endfacet\n");
        }
        s.push_str("endsolid test\n");
        s
    }

    pub fn to_obj(m: &TriMesh) -> String {
        let mut s = String::new();
        for v in &m.vertices {
            s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for t in &m.triangles {
            s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    /// Brute-force tally of undirected edges seen exactly once.
    fn tally_open_edges(m: &TriMesh) -> usize {
        let mut edges: Vec<(u32, u32)> = Vec::new();
        for t in &m.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.push((a.min(b), a.max(b)));
            }
        }
        edges
            .iter()
            .filter(|e| edges.iter().filter(|f| f == e).count() == 1)
            .count()
    }

    #[test]
    fn cube_is_valid_and_outward() {
        let c = unit_cube();
        c.validate().unwrap();
        assert!((c.signed_volume() - 1.0).abs() < 1e-12);
        let s = icosphere(Vector3::zeros(), 1.0, 2);
        s.validate().unwrap();
        assert!(s.signed_volume() > 0.0);
    }

    #[test]
    fn missing_face_reports_four_open_edges() {
        let mut c = unit_cube();
        c.triangles.truncate(10);
        assert_eq!(tally_open_edges(&c), 4);
        let err = c.validate().unwrap_err();
        assert_eq!(err.to_string(), "non-watertight: 4 open edges");
    }

    #[test]
    fn flipped_triangle_is_inconsistent() {
        let mut c = unit_cube();
        c.triangles[0].swap(1, 2);
        assert!(matches!(c.validate(), Err(AnatomyError::InconsistentOrientation { .. })));
    }

    #[test]
    fn degenerate_triangle_is_rejected() {
        let mut c = unit_cube();
        c.triangles[0] = [0, 0, 1];
        assert!(matches!(c.validate(), Err(AnatomyError::DegenerateTriangles(1))));
    }

    #[test]
    fn formats_round_trip_to_same_topology() {
        let c = unit_cube();
        let bin = c.to_stl_binary();
        assert_eq!(detect_format(&bin), Some(MeshFormat::StlBinary));
        let ascii = to_ascii_stl(&c);
        assert_eq!(detect_format(ascii.as_bytes()), Some(MeshFormat::StlAscii));
        let obj = to_obj(&c);
        assert_eq!(detect_format(obj.as_bytes()), Some(MeshFormat::Obj));
        for bytes in [bin, ascii.into_bytes(), obj.into_bytes()] {
            let m = parse_mesh(&bytes).unwrap();
            assert_eq!(m.vertices.len(), 8);
            assert_eq!(m.triangles.len(), 12);
            m.validate().unwrap();
        }
    }

    #[test]
    fn garbage_does_not_parse() {
        assert!(parse_mesh(b"hello world").is_err());
        assert!(parse_obj(b"v 0 0 0\nf 1 2 3 4\n").is_err());
        assert!(parse_obj(b"v 0 0 0\nf 1 2 9\n").is_err());
    }
}
