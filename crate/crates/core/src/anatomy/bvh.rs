//! Bounding-volume hierarchy over mesh triangles: nearest-triangle search and ray casting.

use nalgebra::Vector3;

type V3 = Vector3<f64>;

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone)]
struct Node {
    lo: V3,
    hi: V3,
    /// Leaf: first triangle in `order`. Interior: index of the right child (left is `self + 1`).
    start_or_right: u32,
    /// Number of triangles for a leaf, 0 for interior nodes.
    count: u32,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    tris: Vec<[V3; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest {
    pub distance: f64,
    pub triangle: usize,
    pub point: V3,
}

/// Outcome of casting a ray: a crossing count, or `None` when the ray grazed an edge or
/// vertex and parity cannot be trusted.
pub type RayParity = Option<usize>;

impl Bvh {
    pub fn build(tris: Vec<[V3; 3]>) -> Self {
        let n = tris.len();
        let centroids: Vec<V3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut nodes = Vec::with_capacity(2 * n / LEAF_SIZE + 1);
        if n > 0 {
            build_node(&tris, &centroids, &mut order, 0, n, &mut nodes);
        }
        // store triangles in leaf order so leaves address contiguous ranges
        let tris = order.iter().map(|&i| tris[i as usize]).collect();
        Self { nodes, tris }
    }

    pub fn triangle_count(&self) -> usize {
        self.tris.len()
    }

    pub fn nearest(&self, p: &V3) -> Option<Nearest> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = Nearest {
            distance: f64::INFINITY,
            triangle: usize::MAX,
            point: *p,
        };
        let mut best_d2 = f64::INFINITY;
        let mut stack: Vec<u32> = vec![0];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i as usize];
            if box_dist2(&node.lo, &node.hi, p) >= best_d2 {
                continue;
            }
            if node.count > 0 {
                let s = node.start_or_right as usize;
                for k in s..s + node.count as usize {
                    let [a, b, c] = &self.tris[k];
                    let q = closest_point_on_triangle(p, a, b, c);
                    let d2 = (q - p).norm_squared();
                    if d2 < best_d2 {
                        best_d2 = d2;
                        best.triangle = k;
                        best.point = q;
                    }
                }
            } else {
                let l = i + 1;
                let r = node.start_or_right;
                let dl = box_dist2(&self.nodes[l as usize].lo, &self.nodes[l as usize].hi, p);
                let dr = box_dist2(&self.nodes[r as usize].lo, &self.nodes[r as usize].hi, p);
                // visit the nearer child first
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best.distance = best_d2.sqrt();
        Some(best)
    }

    /// True when some triangle lies within `radius` of `p` (inclusive).
    pub fn any_within(&self, p: &V3, radius: f64) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        let r2 = radius * radius;
        let mut stack: Vec<u32> = vec![0];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i as usize];
            if box_dist2(&node.lo, &node.hi, p) > r2 {
                continue;
            }
            if node.count > 0 {
                let s = node.start_or_right as usize;
                for [a, b, c] in &self.tris[s..s + node.count as usize] {
                    if (closest_point_on_triangle(p, a, b, c) - p).norm_squared() <= r2 {
                        return true;
                    }
                }
            } else {
                stack.push(node.start_or_right);
                stack.push(i + 1);
            }
        }
        false
    }

    /// Count crossings of the half-line `origin + t·dir`, t > 0.
    pub fn ray_parity(&self, origin: &V3, dir: &V3) -> RayParity {
        if self.nodes.is_empty() {
            return Some(0);
        }
        let inv = V3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut hits = 0usize;
        let mut stack: Vec<u32> = vec![0];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i as usize];
            if !ray_hits_box(&node.lo, &node.hi, origin, &inv) {
                continue;
            }
            if node.count > 0 {
                let s = node.start_or_right as usize;
                for [a, b, c] in &self.tris[s..s + node.count as usize] {
                    match ray_triangle(origin, dir, a, b, c) {
                        RayHit::Miss => {}
                        RayHit::Hit => hits += 1,
                        RayHit::Ambiguous => return None,
                    }
                }
            } else {
                stack.push(node.start_or_right);
                stack.push(i + 1);
            }
        }
        Some(hits)
    }
}

fn build_node(
    tris: &[[V3; 3]],
    centroids: &[V3],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let mut lo = V3::repeat(f64::INFINITY);
    let mut hi = V3::repeat(f64::NEG_INFINITY);
    let mut clo = lo;
    let mut chi = hi;
    for &t in &order[start..end] {
        for v in &tris[t as usize] {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        let c = &centroids[t as usize];
        clo = clo.inf(c);
        chi = chi.sup(c);
    }
    let idx = nodes.len() as u32;
    nodes.push(Node {
        lo,
        hi,
        start_or_right: start as u32,
        count: (end - start) as u32,
    });
    let extent = chi - clo;
    if end - start <= LEAF_SIZE || extent.max() <= 0.0 {
        return idx;
    }
    let axis = extent.imax();
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |a, b| {
        centroids[*a as usize][axis].total_cmp(&centroids[*b as usize][axis])
    });
    build_node(tris, centroids, order, start, mid, nodes);
    let right = build_node(tris, centroids, order, mid, end, nodes);
    let node = &mut nodes[idx as usize];
    node.start_or_right = right;
    node.count = 0;
    idx
}

fn box_dist2(lo: &V3, hi: &V3, p: &V3) -> f64 {
    let mut d2 = 0.0;
    for k in 0..3 {
        let d = (lo[k] - p[k]).max(0.0).max(p[k] - hi[k]);
        d2 += d * d;
    }
    d2
}

fn ray_hits_box(lo: &V3, hi: &V3, o: &V3, inv: &V3) -> bool {
    let mut tmin: f64 = 0.0;
    let mut tmax = f64::INFINITY;
    for k in 0..3 {
        let t1 = (lo[k] - o[k]) * inv[k];
        let t2 = (hi[k] - o[k]) * inv[k];
        tmin = tmin.max(t1.min(t2));
        tmax = tmax.min(t1.max(t2));
    }
    // small slack so rays along a face plane are not culled
    tmin <= tmax * (1.0 + 1e-12) + 1e-12
}

enum RayHit {
    Miss,
    Hit,
    Ambiguous,
}

/// Möller–Trumbore with an explicit "too close to call" band around edges and the origin.
fn ray_triangle(o: &V3, d: &V3, a: &V3, b: &V3, c: &V3) -> RayHit {
    const EPS: f64 = 1e-10;
    let e1 = b - a;
    let e2 = c - a;
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    let scale = e1.norm() * e2.norm() * d.norm();
    if det.abs() <= EPS * scale {
        // ray parallel to the plane; only a concern if it lies in it
        let n = e1.cross(&e2);
        return if n.dot(&(o - a)).abs() <= EPS * n.norm() * (o - a).norm().max(1.0) {
            RayHit::Ambiguous
        } else {
            RayHit::Miss
        };
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = s.dot(&p) * inv;
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    let t = e2.dot(&q) * inv;
    let w = 1.0 - u - v;
    let band = 1e-9;
    if u < -band || v < -band || w < -band {
        return RayHit::Miss;
    }
    if t < -band {
        return RayHit::Miss;
    }
    if u < band || v < band || w < band || t < band {
        return RayHit::Ambiguous;
    }
    RayHit::Hit
}

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &V3, a: &V3, b: &V3, c: &V3) -> V3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}
