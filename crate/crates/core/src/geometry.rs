//! Planar polygon helpers in lon/lat degrees.

use serde::{Deserialize, Serialize};

/// `[lon, lat]` in WGS84 degrees.
pub type Coord = [f64; 2];

/// Exterior ring followed by zero or more holes. Rings are closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub rings: Vec<Vec<Coord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiPolygon {
    pub polygons: Vec<Polygon>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl BBox {
    pub fn contains(&self, p: Coord) -> bool {
        p[0] >= self.min_lon && p[0] <= self.max_lon && p[1] >= self.min_lat && p[1] <= self.max_lat
    }

    pub fn intersects(&self, other: &BBox, tol: f64) -> bool {
        self.min_lon <= other.max_lon + tol
            && other.min_lon <= self.max_lon + tol
            && self.min_lat <= other.max_lat + tol
            && other.min_lat <= self.max_lat + tol
    }
}

/// Signed shoelace area and area-weighted centroid of a closed ring.
fn ring_moments(ring: &[Coord]) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for w in ring.windows(2) {
        let (p, q) = (w[0], w[1]);
        let cross = p[0] * q[1] - q[0] * p[1];
        a += cross;
        cx += (p[0] + q[0]) * cross;
        cy += (p[1] + q[1]) * cross;
    }
    (a / 2.0, cx / 6.0, cy / 6.0)
}

fn ring_contains(ring: &[Coord], p: Coord) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

impl Polygon {
    pub fn contains(&self, p: Coord) -> bool {
        let Some((outer, holes)) = self.rings.split_first() else {
            return false;
        };
        ring_contains(outer, p) && !holes.iter().any(|h| ring_contains(h, p))
    }
}

impl MultiPolygon {
    pub fn contains(&self, p: Coord) -> bool {
        self.polygons.iter().any(|poly| poly.contains(p))
    }

    pub fn rings(&self) -> impl Iterator<Item = &Vec<Coord>> {
        self.polygons.iter().flat_map(|p| p.rings.iter())
    }

    pub fn vertices(&self) -> impl Iterator<Item = Coord> + '_ {
        self.rings().flat_map(|r| r.iter().copied())
    }

    pub fn segments(&self) -> impl Iterator<Item = (Coord, Coord)> + '_ {
        self.rings().flat_map(|r| r.windows(2).map(|w| (w[0], w[1])))
    }

    pub fn bbox(&self) -> BBox {
        let mut b = BBox {
            min_lon: f64::INFINITY,
            min_lat: f64::INFINITY,
            max_lon: f64::NEG_INFINITY,
            max_lat: f64::NEG_INFINITY,
        };
        for v in self.vertices() {
            b.min_lon = b.min_lon.min(v[0]);
            b.min_lat = b.min_lat.min(v[1]);
            b.max_lon = b.max_lon.max(v[0]);
            b.max_lat = b.max_lat.max(v[1]);
        }
        b
    }

    /// Area-weighted centroid. Falls back to the vertex mean for zero-area shapes.
    pub fn centroid(&self) -> Coord {
        let (mut area, mut cx, mut cy) = (0.0, 0.0, 0.0);
        for poly in &self.polygons {
            for (k, ring) in poly.rings.iter().enumerate() {
                let (a, x, y) = ring_moments(ring);
                // exterior counts positive, holes negative, whatever the winding
                let sign = if k == 0 { a.signum() } else { -a.signum() };
                area += sign * a;
                cx += sign * x;
                cy += sign * y;
            }
        }
        if area.abs() > 1e-15 {
            [cx / area, cy / area]
        } else {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for v in self.vertices() {
                sx += v[0];
                sy += v[1];
                n += 1.0;
            }
            [sx / n, sy / n]
        }
    }

    /// True when the two boundaries share at least one point (vertex contact,
    /// shared edge, or a vertex lying on the other's edge).
    pub fn touches(&self, other: &MultiPolygon, tol: f64) -> bool {
        let on_boundary = |a: &MultiPolygon, b: &MultiPolygon| {
            a.vertices()
                .any(|v| b.segments().any(|(p, q)| point_segment_distance(v, p, q) <= tol))
        };
        on_boundary(self, other) || on_boundary(other, self)
    }
}

fn point_segment_distance(v: Coord, p: Coord, q: Coord) -> f64 {
    let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((v[0] - p[0]) * dx + (v[1] - p[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (ex, ey) = (p[0] + t * dx - v[0], p[1] + t * dy - v[1]);
    (ex * ex + ey * ey).sqrt()
}

const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Great-circle distance in kilometres.
pub fn haversine_km(a: Coord, b: Coord) -> f64 {
    let (lat1, lat2) = (a[1].to_radians(), b[1].to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b[0] - a[0]).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Axis-aligned square as a closed counter-clockwise ring.
pub fn square(min_lon: f64, min_lat: f64, size: f64) -> MultiPolygon {
    let ring = vec![
        [min_lon, min_lat],
        [min_lon + size, min_lat],
        [min_lon + size, min_lat + size],
        [min_lon, min_lat + size],
        [min_lon, min_lat],
    ];
    MultiPolygon {
        polygons: vec![Polygon { rings: vec![ring] }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_centroid_and_containment() {
        let sq = square(0.0, 0.0, 2.0);
        assert_eq!(sq.centroid(), [1.0, 1.0]);
        assert!(sq.contains([0.5, 1.5]));
        assert!(!sq.contains([2.5, 1.0]));
    }

    #[test]
    fn hole_is_excluded() {
        let mut sq = square(0.0, 0.0, 4.0);
        let hole = square(1.0, 1.0, 2.0).polygons[0].rings[0].clone();
        sq.polygons[0].rings.push(hole);
        assert!(!sq.contains([2.0, 2.0]));
        assert!(sq.contains([0.5, 0.5]));
        let c = sq.centroid();
        assert!((c[0] - 2.0).abs() < 1e-12 && (c[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn corner_and_t_junction_contacts() {
        let a = square(0.0, 0.0, 1.0);
        let diag = square(1.0, 1.0, 1.0);
        let far = square(3.0, 3.0, 1.0);
        // big square whose edge contains a's corner mid-way along it
        let t = square(1.0, -0.5, 2.0);
        assert!(a.touches(&diag, 1e-9));
        assert!(!a.touches(&far, 1e-9));
        assert!(a.touches(&t, 1e-9));
    }

    #[test]
    fn haversine_one_degree_equator() {
        let d = haversine_km([0.0, 0.0], [1.0, 0.0]);
        assert!((d - 111.195).abs() < 0.01, "{d}");
    }
}
