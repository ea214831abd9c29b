use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Read;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{GeoPoint, EARTH_RADIUS_M};
use crate::osm::RoadGraph;
use crate::spatial::GridIndex;

/// Region reachable from an origin within a travel-time budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Isochrone {
    pub origin: GeoPoint,
    pub budget_s: f64,
    pub reached: Vec<(GeoPoint, f64)>,
    /// Convex hull vertices, counter-clockwise in (lon, lat).
    pub hull: Vec<GeoPoint>,
    pub area_km2: f64,
    pub reach_factor: f64,
    pub totpop: f64,
}

#[derive(Copy, Clone, PartialEq)]
struct Pending {
    cost: f64,
    node: usize,
}

impl Eq for Pending {}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from `source` (node index), keeping nodes whose travel time is
/// within `budget_s`. Returns (node index, seconds) sorted by node index.
pub fn reachable(graph: &RoadGraph, source: usize, budget_s: f64) -> Vec<(usize, f64)> {
    let mut dist: std::collections::HashMap<usize, f64> = std::collections::HashMap::new();
    let mut heap = BinaryHeap::new();
    dist.insert(source, 0.0);
    heap.push(Pending { cost: 0.0, node: source });
    while let Some(Pending { cost, node }) = heap.pop() {
        if cost > dist[&node] {
            continue;
        }
        for e in graph.out_edges(node) {
            let next = graph.index_of(e.to).expect("edge endpoint exists");
            let c = cost + e.travel_s();
            if c <= budget_s && dist.get(&next).is_none_or(|&d| c < d) {
                dist.insert(next, c);
                heap.push(Pending { cost: c, node: next });
            }
        }
    }
    let mut out: Vec<(usize, f64)> = dist.into_iter().collect();
    out.sort_unstable_by_key(|&(n, _)| n);
    out
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain. Returns the hull counter-clockwise without
/// collinear points; fewer than three vertices for degenerate inputs.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Polygon area in square metres using an equirectangular projection about
/// the vertex centroid.
pub fn polygon_area_m2(poly: &[GeoPoint]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let n = poly.len() as f64;
    let lat0 = poly.iter().map(|p| p.lat()).sum::<f64>() / n;
    let lon0 = poly.iter().map(|p| p.lon()).sum::<f64>() / n;
    let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
    let xy: Vec<(f64, f64)> = poly
        .iter()
        .map(|p| ((p.lon() - lon0) * k * lat0.to_radians().cos(), (p.lat() - lat0) * k))
        .collect();
    let mut twice = 0.0;
    for i in 0..xy.len() {
        let (a, b) = (xy[i], xy[(i + 1) % xy.len()]);
        twice += a.0 * b.1 - b.0 * a.1;
    }
    twice.abs() / 2.0
}

/// Travel-time isochrone from the graph node nearest to `origin`.
///
/// The origin must lie within 100 m of a node. `reach_factor` is the hull
/// area divided by the area of the circle of radius `budget_s * v_max`.
pub fn compute_isochrone(
    graph: &RoadGraph,
    origin: GeoPoint,
    budget_s: f64,
    v_max_kmh: f64,
) -> Result<Isochrone> {
    if !(budget_s > 0.0 && v_max_kmh > 0.0) {
        return Err(Error::InvalidConfig("budget and v_max must be positive".into()));
    }
    let (start, _) = graph
        .nearest_node(origin, 100.0)
        .ok_or(Error::UnroutableOrigin {
            lat: origin.lat(),
            lon: origin.lon(),
        })?;
    let reached: Vec<(GeoPoint, f64)> = reachable(graph, start, budget_s)
        .into_iter()
        .map(|(n, t)| (graph.point(n), t))
        .collect();
    let lonlat: Vec<(f64, f64)> = reached.iter().map(|(p, _)| (p.lon(), p.lat())).collect();
    let hull: Vec<GeoPoint> = convex_hull(&lonlat)
        .into_iter()
        .map(|(lon, lat)| GeoPoint::new(lat, lon))
        .collect::<Result<_>>()?;
    let area_m2 = polygon_area_m2(&hull);
    let radius_m = budget_s * v_max_kmh / 3.6;
    Ok(Isochrone {
        origin,
        budget_s,
        reached,
        hull,
        area_km2: area_m2 / 1e6,
        reach_factor: area_m2 / (std::f64::consts::PI * radius_m * radius_m),
        totpop: 0.0,
    })
}

/// Population grid given as cell centres with counts.
#[derive(Debug, Clone)]
pub struct PopulationRaster {
    counts: Vec<f64>,
    index: GridIndex,
}

#[derive(Deserialize)]
struct CellRecord {
    lon: f64,
    lat: f64,
    pop: f64,
}

impl PopulationRaster {
    pub fn new(cells: Vec<(GeoPoint, f64)>) -> Self {
        let (points, counts): (Vec<_>, Vec<_>) = cells.into_iter().unzip();
        PopulationRaster {
            counts,
            index: GridIndex::new(points, 1000.0),
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    /// Reads the `lon,lat,pop` table.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut cells = Vec::new();
        for rec in rdr.deserialize::<CellRecord>() {
            let rec = rec?;
            cells.push((GeoPoint::new(rec.lat, rec.lon)?, rec.pop));
        }
        Ok(Self::new(cells))
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

fn on_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> bool {
    let scale = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1e-12);
    if cross(a, b, p).abs() > 1e-12 * scale {
        return false;
    }
    p.0 >= a.0.min(b.0) - 1e-12
        && p.0 <= a.0.max(b.0) + 1e-12
        && p.1 >= a.1.min(b.1) - 1e-12
        && p.1 <= a.1.max(b.1) + 1e-12
}

/// Point-in-polygon in (lon, lat) with the boundary counted as inside.
fn contains(poly: &[(f64, f64)], p: (f64, f64)) -> bool {
    match poly.len() {
        0 => false,
        1 => poly[0] == p,
        n => {
            for i in 0..n {
                if on_segment(p, poly[i], poly[(i + 1) % n]) {
                    return true;
                }
            }
            if n < 3 {
                return false;
            }
            let mut inside = false;
            let mut j = n - 1;
            for i in 0..n {
                let (a, b) = (poly[i], poly[j]);
                if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
                    inside = !inside;
                }
                j = i;
            }
            inside
        }
    }
}

/// Sum of raster counts whose cell centres fall inside or on `hull`.
pub fn population_in(hull: &[GeoPoint], raster: &PopulationRaster) -> f64 {
    if hull.is_empty() || raster.is_empty() {
        return 0.0;
    }
    let poly: Vec<(f64, f64)> = hull.iter().map(|p| (p.lon(), p.lat())).collect();
    let n = hull.len() as f64;
    let centre = GeoPoint::new(
        hull.iter().map(|p| p.lat()).sum::<f64>() / n,
        hull.iter().map(|p| p.lon()).sum::<f64>() / n,
    )
    .expect("mean of valid coordinates");
    let radius = hull
        .iter()
        .map(|&p| crate::model::haversine_m(centre, p))
        .fold(0.0, f64::max);
    raster
        .index
        .within(centre, radius + 1.0)
        .into_iter()
        .filter(|&i| {
            let c = raster.index.point(i);
            contains(&poly, (c.lon(), c.lat()))
        })
        .map(|i| raster.counts[i])
        .sum()
}
