//! Distance queries for capsules, ellipsoids and closed triangle meshes.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

impl Capsule {
    pub fn new(a: Vec3, b: Vec3, radius: f64) -> Self {
        Self {
            a: a.into(),
            b: b.into(),
            radius,
        }
    }

    pub fn a(&self) -> Vec3 {
        Vec3::from(self.a)
    }

    pub fn b(&self) -> Vec3 {
        Vec3::from(self.b)
    }

    /// Distance from `p` to the capsule axis segment.
    pub fn axis_distance(&self, p: &Vec3) -> f64 {
        (p - closest_on_segment(&self.a(), &self.b(), p)).norm()
    }

    /// Positive outside the capsule, negative inside.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.axis_distance(p) - self.radius
    }

    /// Signed surface-to-surface distance between two capsules.
    pub fn distance_to(&self, other: &Capsule) -> f64 {
        segment_segment_distance(&self.a(), &self.b(), &other.a(), &other.b()) - self.radius - other.radius
    }

    pub fn length(&self) -> f64 {
        (self.b() - self.a()).norm()
    }
}

pub fn closest_on_segment(a: &Vec3, b: &Vec3, p: &Vec3) -> Vec3 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Minimum distance between segments `p1q1` and `p2q2`.
pub fn segment_segment_distance(p1: &Vec3, q1: &Vec3, p2: &Vec3, q2: &Vec3) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let eps = 1e-14;
    let (s, t);
    if a <= eps && e <= eps {
        return r.norm();
    }
    if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > eps {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

/// Axis-aligned ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn new(center: Vec3, semi_axes: Vec3) -> Self {
        Self {
            center: center.into(),
            semi_axes: semi_axes.into(),
        }
    }

    pub fn center(&self) -> Vec3 {
        Vec3::from(self.center)
    }

    /// Implicit value `Σ (x_i / e_i)^2`; below 1 means inside.
    pub fn level(&self, p: &Vec3) -> f64 {
        let d = p - self.center();
        (0..3).map(|i| (d[i] / self.semi_axes[i]).powi(2)).sum()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.level(p) < 1.0
    }

    /// Positive inside, negative outside; magnitude is the exact Euclidean
    /// distance to the surface.
    pub fn signed_distance_inside(&self, p: &Vec3) -> f64 {
        let d = p - self.center();
        // sort axes descending, working in the first octant
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&i, &j| self.semi_axes[j].total_cmp(&self.semi_axes[i]));
        let e = [self.semi_axes[idx[0]], self.semi_axes[idx[1]], self.semi_axes[idx[2]]];
        let y = [d[idx[0]].abs(), d[idx[1]].abs(), d[idx[2]].abs()];
        let dist = distance_point_ellipsoid(e, y);
        if self.contains(p) {
            dist
        } else {
            -dist
        }
    }
}

fn robust_length(v: &[f64]) -> f64 {
    let m = v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if m == 0.0 {
        return 0.0;
    }
    m * v.iter().map(|x| (x / m).powi(2)).sum::<f64>().sqrt()
}

const MAX_BISECTIONS: usize = 1100;

fn root_2d(r0: f64, z0: f64, z1: f64, g: f64) -> f64 {
    let n0 = r0 * z0;
    let mut s0 = z1 - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { robust_length(&[n0, z1]) - 1.0 };
    let mut s = 0.0;
    for _ in 0..MAX_BISECTIONS {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let g = (n0 / (s + r0)).powi(2) + (z1 / (s + 1.0)).powi(2) - 1.0;
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

fn root_3d(r0: f64, r1: f64, z0: f64, z1: f64, z2: f64, g: f64) -> f64 {
    let n0 = r0 * z0;
    let n1 = r1 * z1;
    let mut s0 = z2 - 1.0;
    let mut s1 = if g < 0.0 {
        0.0
    } else {
        robust_length(&[n0, n1, z2]) - 1.0
    };
    let mut s = 0.0;
    for _ in 0..MAX_BISECTIONS {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let g = (n0 / (s + r0)).powi(2) + (n1 / (s + r1)).powi(2) + (z2 / (s + 1.0)).powi(2) - 1.0;
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

/// Distance from a first-quadrant point to an ellipse with `e0 >= e1`.
fn distance_point_ellipse(e0: f64, e1: f64, y0: f64, y1: f64) -> f64 {
    if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g != 0.0 {
                let r0 = (e0 / e1).powi(2);
                let s = root_2d(r0, z0, z1, g);
                let x0 = r0 * y0 / (s + r0);
                let x1 = y1 / (s + 1.0);
                ((x0 - y0).powi(2) + (x1 - y1).powi(2)).sqrt()
            } else {
                0.0
            }
        } else {
            (y1 - e1).abs()
        }
    } else {
        let numer0 = e0 * y0;
        let denom0 = e0 * e0 - e1 * e1;
        if numer0 < denom0 {
            let xde0 = numer0 / denom0;
            let x0 = e0 * xde0;
            let x1 = e1 * (1.0 - xde0 * xde0).sqrt();
            ((x0 - y0).powi(2) + x1 * x1).sqrt()
        } else {
            (y0 - e0).abs()
        }
    }
}

/// Distance from a first-octant point to an ellipsoid with `e0 >= e1 >= e2`.
fn distance_point_ellipsoid(e: [f64; 3], y: [f64; 3]) -> f64 {
    let [e0, e1, e2] = e;
    let [y0, y1, y2] = y;
    if y2 > 0.0 {
        if y1 > 0.0 {
            if y0 > 0.0 {
                let z0 = y0 / e0;
                let z1 = y1 / e1;
                let z2 = y2 / e2;
                let g = z0 * z0 + z1 * z1 + z2 * z2 - 1.0;
                if g != 0.0 {
                    let r0 = (e0 / e2).powi(2);
                    let r1 = (e1 / e2).powi(2);
                    let s = root_3d(r0, r1, z0, z1, z2, g);
                    let x0 = r0 * y0 / (s + r0);
                    let x1 = r1 * y1 / (s + r1);
                    let x2 = y2 / (s + 1.0);
                    ((x0 - y0).powi(2) + (x1 - y1).powi(2) + (x2 - y2).powi(2)).sqrt()
                } else {
                    0.0
                }
            } else {
                distance_point_ellipse(e1, e2, y1, y2)
            }
        } else if y0 > 0.0 {
            distance_point_ellipse(e0, e2, y0, y2)
        } else {
            (y2 - e2).abs()
        }
    } else {
        let denom0 = e0 * e0 - e2 * e2;
        let denom1 = e1 * e1 - e2 * e2;
        let numer0 = e0 * y0;
        let numer1 = e1 * y1;
        if numer0 < denom0 && numer1 < denom1 {
            let xde0 = numer0 / denom0;
            let xde1 = numer1 / denom1;
            let discr = 1.0 - xde0 * xde0 - xde1 * xde1;
            if discr > 0.0 {
                let x0 = e0 * xde0;
                let x1 = e1 * xde1;
                let x2 = e2 * discr.sqrt();
                return ((x0 - y0).powi(2) + (x1 - y1).powi(2) + x2 * x2).sqrt();
            }
        }
        distance_point_ellipse(e0, e1, y0, y1)
    }
}

/// Closed, consistently oriented triangle mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    fn tri(&self, t: &[usize; 3]) -> (Vec3, Vec3, Vec3) {
        (
            Vec3::from(self.vertices[t[0]]),
            Vec3::from(self.vertices[t[1]]),
            Vec3::from(self.vertices[t[2]]),
        )
    }

    /// Generalized winding number; about 1 inside, 0 outside.
    pub fn winding_number(&self, p: &Vec3) -> f64 {
        let mut total = 0.0;
        for t in &self.triangles {
            let (a, b, c) = self.tri(t);
            let (a, b, c) = (a - p, b - p, c - p);
            let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
            let num = a.dot(&b.cross(&c));
            let den = la * lb * lc + a.dot(&b) * lc + b.dot(&c) * la + c.dot(&a) * lb;
            total += 2.0 * num.atan2(den);
        }
        total / (4.0 * std::f64::consts::PI)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.winding_number(p).abs() > 0.5
    }

    pub fn unsigned_distance(&self, p: &Vec3) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let (a, b, c) = self.tri(t);
                (closest_on_triangle(p, &a, &b, &c) - p).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn signed_distance_inside(&self, p: &Vec3) -> f64 {
        let d = self.unsigned_distance(p);
        if self.contains(p) {
            d
        } else {
            -d
        }
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            let v = Vec3::from(*v);
            lo = lo.inf(&v);
            hi = hi.sup(&v);
        }
        (lo, hi)
    }

    /// Axis-aligned box mesh with outward-facing triangles.
    pub fn cuboid(lo: Vec3, hi: Vec3) -> Self {
        let v = |x: f64, y: f64, z: f64| [x, y, z];
        let vertices = vec![
            v(lo.x, lo.y, lo.z),
            v(hi.x, lo.y, lo.z),
            v(hi.x, hi.y, lo.z),
            v(lo.x, hi.y, lo.z),
            v(lo.x, lo.y, hi.z),
            v(hi.x, lo.y, hi.z),
            v(hi.x, hi.y, hi.z),
            v(lo.x, hi.y, hi.z),
        ];
        let triangles = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [1, 2, 6],
            [1, 6, 5],
            [2, 3, 7],
            [2, 7, 6],
            [3, 0, 4],
            [3, 4, 7],
        ];
        Self { vertices, triangles }
    }
}

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
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
