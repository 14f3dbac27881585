//! Planar polygon predicates shared by region relabeling and synthesis.
//!
//! Coordinates are pixels with the origin at the top-left and y pointing
//! down; none of the predicates here depend on orientation.

pub type Point = [f64; 2];

const EDGE_EPS: f64 = 1e-9;

/// Axis-aligned bounding box `[min_x, min_y, max_x, max_y]`.
pub fn bounding_box(poly: &[Point]) -> [f64; 4] {
    let mut bb = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in poly {
        bb[0] = bb[0].min(p[0]);
        bb[1] = bb[1].min(p[1]);
        bb[2] = bb[2].max(p[0]);
        bb[3] = bb[3].max(p[1]);
    }
    bb
}

/// Signed shoelace area; positive for counter-clockwise in a y-up frame.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc / 2.0
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// True when `p` lies on the closed segment `a..b`.
pub fn on_segment(p: Point, a: Point, b: Point) -> bool {
    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    if cross(a, b, p).abs() > EDGE_EPS * len.max(1.0) {
        return false;
    }
    p[0] >= a[0].min(b[0]) - EDGE_EPS
        && p[0] <= a[0].max(b[0]) + EDGE_EPS
        && p[1] >= a[1].min(b[1]) - EDGE_EPS
        && p[1] <= a[1].max(b[1]) + EDGE_EPS
}

/// True when `p` lies on any edge of the closed polygon.
pub fn on_boundary(p: Point, poly: &[Point]) -> bool {
    let n = poly.len();
    (0..n).any(|i| on_segment(p, poly[i], poly[(i + 1) % n]))
}

/// Winding number of the closed polygon around `p` (Sunday's crossing rule).
pub fn winding_number(p: Point, poly: &[Point]) -> i32 {
    let n = poly.len();
    let mut wn = 0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if a[1] <= p[1] {
            if b[1] > p[1] && cross(a, b, p) > 0.0 {
                wn += 1;
            }
        } else if b[1] <= p[1] && cross(a, b, p) < 0.0 {
            wn -= 1;
        }
    }
    wn
}

/// Even-odd ray casting towards +x. Used as the independent check on
/// [`winding_number`]; boundary points are unspecified here.
pub fn ray_cast_inside(p: Point, poly: &[Point]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Containment with edge points counted as inside.
pub fn contains(poly: &[Point], p: Point) -> bool {
    let bb = bounding_box(poly);
    if p[0] < bb[0] - EDGE_EPS || p[0] > bb[2] + EDGE_EPS || p[1] < bb[1] - EDGE_EPS || p[1] > bb[3] + EDGE_EPS {
        return false;
    }
    on_boundary(p, poly) || winding_number(p, poly) != 0
}

fn segments_intersect(p1: Point, p2: Point, p3: Point, p4: Point) -> bool {
    let d1 = cross(p3, p4, p1);
    let d2 = cross(p3, p4, p2);
    let d3 = cross(p1, p2, p3);
    let d4 = cross(p1, p2, p4);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(p1, p3, p4))
        || (d2 == 0.0 && on_segment(p2, p3, p4))
        || (d3 == 0.0 && on_segment(p3, p1, p2))
        || (d4 == 0.0 && on_segment(p4, p1, p2))
}

/// Simple (non self-intersecting) closed polygon test, O(n²).
pub fn is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if a == b {
            return false;
        }
        for j in (i + 1)..n {
            // adjacent edges share a vertex by construction
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Drops a repeated closing vertex, if present.
pub fn strip_closing_vertex(mut poly: Vec<Point>) -> Vec<Point> {
    if poly.len() > 1 && poly.first() == poly.last() {
        poly.pop();
    }
    poly
}

/// Vertices of an ellipse sampled at `n` equal angles.
pub fn ellipse_polygon(center: Point, semi_major: f64, semi_minor: f64, angle: f64, n: usize) -> Vec<Point> {
    let (s, c) = angle.sin_cos();
    (0..n)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / n as f64;
            let (x, y) = (semi_major * t.cos(), semi_minor * t.sin());
            [center[0] + c * x - s * y, center[1] + s * x + c * y]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Vec<Point> {
        vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]]
    }

    #[test]
    fn square_containment() {
        let sq = square();
        assert!(contains(&sq, [5.0, 5.0]));
        assert!(!contains(&sq, [15.0, 5.0]));
        // edges and corners count as inside
        assert!(contains(&sq, [10.0, 5.0]));
        assert!(contains(&sq, [0.0, 0.0]));
    }

    #[test]
    fn winding_is_orientation_independent_in_magnitude() {
        let mut sq = square();
        assert_eq!(winding_number([5.0, 5.0], &sq).abs(), 1);
        sq.reverse();
        assert_eq!(winding_number([5.0, 5.0], &sq).abs(), 1);
    }

    #[test]
    fn simple_polygon_checks() {
        assert!(is_simple(&square()));
        let bowtie = vec![[0.0, 0.0], [10.0, 10.0], [10.0, 0.0], [0.0, 10.0]];
        assert!(!is_simple(&bowtie));
        assert!(!is_simple(&[[0.0, 0.0], [1.0, 1.0]]));
    }

    #[test]
    fn shoelace_area() {
        assert_eq!(signed_area(&square()).abs(), 100.0);
    }
}
