//! Uniform lat/lon grid for radius queries over point sets.

use std::collections::HashMap;

use crate::model::{haversine_m, GeoPoint, EARTH_RADIUS_M};

const M_PER_DEG: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

/// Bucketed point index. Queries return item indices in ascending order.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell_lat: f64,
    cell_lon: f64,
    points: Vec<GeoPoint>,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl GridIndex {
    /// `cell_m` is the approximate cell edge; it only affects speed.
    pub fn new(points: Vec<GeoPoint>, cell_m: f64) -> Self {
        let cell_lat = (cell_m / M_PER_DEG).max(1e-7);
        let max_lat = points.iter().map(|p| p.lat().abs()).fold(0.0f64, f64::max);
        let cell_lon = cell_lat / max_lat.min(89.0).to_radians().cos();
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            let key = (
                (p.lat() / cell_lat).floor() as i64,
                (p.lon() / cell_lon).floor() as i64,
            );
            cells.entry(key).or_default().push(i);
        }
        GridIndex {
            cell_lat,
            cell_lon,
            points,
            cells,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> GeoPoint {
        self.points[i]
    }

    /// Indices of all points within `radius_m` (inclusive) of `p`.
    pub fn within(&self, p: GeoPoint, radius_m: f64) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .candidates(p, radius_m)
            .filter(|&i| haversine_m(p, self.points[i]) <= radius_m)
            .collect();
        out.sort_unstable();
        out
    }

    /// Indices and distances of points within `radius_m`, sorted by
    /// (distance, index).
    pub fn within_sorted(&self, p: GeoPoint, radius_m: f64) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self
            .candidates(p, radius_m)
            .map(|i| (i, haversine_m(p, self.points[i])))
            .filter(|&(_, d)| d <= radius_m)
            .collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    /// Closest point within `radius_m`, ties broken by lower index.
    pub fn nearest(&self, p: GeoPoint, radius_m: f64) -> Option<(usize, f64)> {
        self.within_sorted(p, radius_m).into_iter().next()
    }

    fn candidates(&self, p: GeoPoint, radius_m: f64) -> impl Iterator<Item = usize> + '_ {
        // Padding absorbs the sphere-vs-grid mismatch near cell borders.
        let dlat = radius_m * 1.001 / M_PER_DEG + 1e-9;
        let far_lat = (p.lat().abs() + dlat).min(89.999);
        let dlon = (dlat / far_lat.to_radians().cos()).min(360.0);
        let lat0 = ((p.lat() - dlat) / self.cell_lat).floor() as i64;
        let lat1 = ((p.lat() + dlat) / self.cell_lat).floor() as i64;
        let lon0 = ((p.lon() - dlon) / self.cell_lon).floor() as i64;
        let lon1 = ((p.lon() + dlon) / self.cell_lon).floor() as i64;
        (lat0..=lat1)
            .flat_map(move |a| (lon0..=lon1).map(move |b| (a, b)))
            .filter_map(|k| self.cells.get(&k))
            .flatten()
            .copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn radius_query_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<GeoPoint> = (0..400)
            .map(|_| {
                GeoPoint::new(60.0 + rng.random::<f64>() * 0.05, 5.0 + rng.random::<f64>() * 0.1)
                    .unwrap()
            })
            .collect();
        let idx = GridIndex::new(pts.clone(), 150.0);
        for q in pts.iter().take(50) {
            for r in [50.0, 300.0, 1200.0] {
                let brute: Vec<usize> = (0..pts.len())
                    .filter(|&i| haversine_m(*q, pts[i]) <= r)
                    .collect();
                assert_eq!(idx.within(*q, r), brute);
            }
        }
    }

    #[test]
    fn nearest_breaks_ties_by_index() {
        let o = GeoPoint::new(10.0, 10.0).unwrap();
        let a = o.offset_m(0.0, 20.0).unwrap();
        let b = o.offset_m(0.0, -20.0).unwrap();
        let idx = GridIndex::new(vec![b, a, b], 10.0);
        assert_eq!(idx.nearest(b, 5.0).unwrap().0, 0);
        assert!(idx.nearest(o.offset_m(1000.0, 0.0).unwrap(), 30.0).is_none());
    }
}
