use std::collections::BTreeMap;
use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::isochrone::{compute_isochrone, population_in, PopulationRaster};
use super::{FeatureMatrix, FeatureSchema, HIGHWAY_CLASSES, SURFACES};
use crate::error::{Error, Result};
use crate::model::RoadSegment;
use crate::osm::{snap_segment, OsmWayAttributes, RoadGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    /// Maximum distance from a segment midpoint to the node it snaps to.
    pub snap_max_m: f64,
    /// Radius of the "nodes" count.
    pub nodes_radius_m: f64,
    pub budget_s: f64,
    pub v_max_kmh: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            snap_max_m: 30.0,
            nodes_radius_m: 100.0,
            budget_s: 900.0,
            v_max_kmh: 130.0,
        }
    }
}

/// One row of the traffic table. Direction is encoded fwd=0, bwd=1, both=2.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrafficRecord {
    pub direction: Option<u8>,
    pub aadt: Option<f64>,
    pub mean_speed: Option<f64>,
    pub p85_speed: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JoinReport {
    pub segments: usize,
    pub unsnapped: usize,
    pub unroutable: usize,
    pub traffic_rows: usize,
    /// Traffic rows whose id matches no segment.
    pub traffic_unknown_ids: usize,
}

fn opt_num(s: Option<&str>, line: usize) -> Result<Option<f64>> {
    match s.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| Error::Parse {
            line,
            message: format!("bad number {v:?}"),
        }),
    }
}

/// Reads `id,direction,aadt,mean_speed,p85_speed`.
pub fn read_traffic<R: Read>(reader: R) -> Result<BTreeMap<String, TrafficRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let direction = match rec.get(1).map(str::trim) {
            None | Some("") => None,
            Some("fwd") => Some(0),
            Some("bwd") => Some(1),
            Some("both") => Some(2),
            Some(v) => {
                return Err(Error::Parse {
                    line,
                    message: format!("bad direction {v:?}"),
                })
            }
        };
        out.insert(
            rec.get(0).unwrap_or_default().to_string(),
            TrafficRecord {
                direction,
                aadt: opt_num(rec.get(2), line)?,
                mean_speed: opt_num(rec.get(3), line)?,
                p85_speed: opt_num(rec.get(4), line)?,
            },
        );
    }
    Ok(out)
}

/// OSM smoothness scale, `excellent` = 7 down to `impassable` = 0.
pub fn smoothness_level(tag: &str) -> Option<f64> {
    Some(match tag {
        "excellent" => 7.0,
        "good" => 6.0,
        "intermediate" => 5.0,
        "bad" => 4.0,
        "very_bad" => 3.0,
        "horrible" => 2.0,
        "very_horrible" => 1.0,
        "impassable" => 0.0,
        _ => return None,
    })
}

fn one_hot(members: &[&str], value: &str, out: &mut Vec<Option<f64>>) {
    let hit = members.iter().position(|m| *m == value).unwrap_or(members.len() - 1);
    out.extend((0..members.len()).map(|i| Some(if i == hit { 1.0 } else { 0.0 })));
}

fn flag(b: Option<bool>) -> Option<f64> {
    b.map(|v| if v { 1.0 } else { 0.0 })
}

fn way_columns(w: Option<&OsmWayAttributes>, out: &mut Vec<Option<f64>>) {
    let Some(w) = w else {
        out.extend(std::iter::repeat_n(None, HIGHWAY_CLASSES.len() + 2 + SURFACES.len() + 4));
        return;
    };
    one_hot(&HIGHWAY_CLASSES, &w.highway, out);
    out.push(flag(w.oneway));
    out.push(w.maxspeed.map(f64::from));
    match &w.surface {
        Some(s) => one_hot(&SURFACES, s, out),
        None => out.extend(std::iter::repeat_n(None, SURFACES.len())),
    }
    out.push(w.smoothness.as_deref().and_then(smoothness_level));
    out.push(flag(w.lit));
    // An absent bridge tag means the way is not a bridge.
    out.push(Some(if w.bridge == Some(true) { 1.0 } else { 0.0 }));
    out.push(w.lanes.map(f64::from));
}

/// Builds the full feature matrix (OSM and traffic columns) for `segments`,
/// sorted by segment id. Without a traffic table the traffic columns are
/// missing.
pub fn extract_features(
    segments: &[RoadSegment],
    graph: &RoadGraph,
    ways: &BTreeMap<i64, OsmWayAttributes>,
    raster: &PopulationRaster,
    traffic: Option<&BTreeMap<String, TrafficRecord>>,
    cfg: &ExtractConfig,
) -> Result<(FeatureMatrix, JoinReport)> {
    let schema = FeatureSchema::road_safety();
    let mut order: Vec<&RoadSegment> = segments.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));

    struct RowOut {
        cells: Vec<Option<f64>>,
        snapped: bool,
        routable: bool,
    }

    let rows: Vec<RowOut> = order
        .par_iter()
        .map(|seg| {
            let mut cells = Vec::with_capacity(schema.width());
            let way = if graph.is_empty() {
                None
            } else {
                snap_segment(graph, seg.midpoint, cfg.snap_max_m).and_then(|id| ways.get(&id))
            };
            way_columns(way, &mut cells);
            cells.push(Some(graph.nodes_within(seg.midpoint, cfg.nodes_radius_m).len() as f64));
            let iso = compute_isochrone(graph, seg.midpoint, cfg.budget_s, cfg.v_max_kmh).ok();
            match &iso {
                Some(iso) => {
                    cells.push(Some(iso.area_km2));
                    cells.push(Some(iso.reach_factor));
                    cells.push(Some(population_in(&iso.hull, raster)));
                }
                None => cells.extend([None, None, None]),
            }
            let t = traffic.and_then(|t| t.get(&seg.id)).copied().unwrap_or_default();
            cells.push(t.direction.map(f64::from));
            cells.push(t.aadt);
            cells.push(t.mean_speed);
            cells.push(t.p85_speed);
            RowOut {
                cells,
                snapped: way.is_some(),
                routable: iso.is_some(),
            }
        })
        .collect();

    let mut report = JoinReport {
        segments: rows.len(),
        unsnapped: rows.iter().filter(|r| !r.snapped).count(),
        unroutable: rows.iter().filter(|r| !r.routable).count(),
        ..Default::default()
    };
    if let Some(t) = traffic {
        report.traffic_rows = t.len();
        let known: std::collections::HashSet<&str> =
            segments.iter().map(|s| s.id.as_str()).collect();
        report.traffic_unknown_ids = t.keys().filter(|k| !known.contains(k.as_str())).count();
    }
    let ids = order.iter().map(|s| s.id.clone()).collect();
    let matrix = FeatureMatrix::new(schema, ids, rows.into_iter().map(|r| r.cells).collect())?;
    Ok((matrix, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GeoPoint;
    use crate::osm::parse_osm_str;

    const OSM: &str = r#"<osm>
  <node id="1" lat="52.0000" lon="4.0000"/>
  <node id="2" lat="52.0000" lon="4.0010"/>
  <node id="3" lat="52.0000" lon="4.0020"/>
  <node id="4" lat="52.0100" lon="4.0000"/>
  <node id="5" lat="52.0100" lon="4.0010"/>
  <way id="100"><nd ref="1"/><nd ref="2"/><nd ref="3"/>
    <tag k="highway" v="primary"/><tag k="surface" v="asphalt"/><tag k="smoothness" v="excellent"/>
    <tag k="lit" v="yes"/><tag k="maxspeed" v="50"/><tag k="lanes" v="2"/><tag k="oneway" v="no"/></way>
  <way id="200"><nd ref="4"/><nd ref="5"/><tag k="highway" v="cycleway"/><tag k="surface" v="sett"/></way>
</osm>"#;

    fn segs() -> Vec<RoadSegment> {
        vec![
            RoadSegment::new("b", GeoPoint::new(52.01, 4.0).unwrap(), None, None).unwrap(),
            RoadSegment::new("a", GeoPoint::new(52.0, 4.001).unwrap(), None, None).unwrap(),
            RoadSegment::new("z", GeoPoint::new(53.0, 4.0).unwrap(), None, None).unwrap(),
        ]
    }

    #[test]
    fn osm_columns_and_order() {
        let ex = parse_osm_str(OSM).unwrap();
        let (m, rep) = extract_features(
            &segs(),
            &ex.graph,
            &ex.ways,
            &PopulationRaster::empty(),
            None,
            &ExtractConfig::default(),
        )
        .unwrap();
        assert_eq!(m.ids(), &["a", "b", "z"]);
        let s = m.schema();
        let col = |name: &str| s.column_index(name).unwrap();
        let hw = s.offset_of("highway").unwrap();
        let a: Vec<f64> = (hw..hw + 10).map(|c| m.get(0, c).unwrap()).collect();
        assert_eq!(a, vec![0., 0., 1., 0., 0., 0., 0., 0., 0., 0.]);
        assert_eq!(m.get(0, col("smoothness")), Some(7.0));
        assert_eq!(m.get(0, col("maxspeed")), Some(50.0));
        assert_eq!(m.get(0, col("lit")), Some(1.0));
        assert_eq!(m.get(0, col("oneway")), Some(0.0));
        assert_eq!(m.get(0, col("surface_asphalt")), Some(1.0));
        assert_eq!(m.get(0, col("bridge")), Some(0.0));
        assert_eq!(m.get(0, col("nodes")), Some(3.0));
        // cycleway -> other, sett -> other; untagged lit stays missing
        assert_eq!(m.get(1, col("highway_other")), Some(1.0));
        assert_eq!(m.get(1, col("surface_other")), Some(1.0));
        assert_eq!(m.get(1, col("lit")), None);
        assert_eq!(m.get(1, col("maxspeed")), None);
        // no traffic table: traffic columns missing
        for c in ["direction", "aadt", "mean_speed", "p85_speed"] {
            assert!(m.rows().iter().all(|r| r[col(c)].is_none()));
        }
        // far segment: nothing snaps, nothing routable
        assert!(m.get(2, col("highway_primary")).is_none());
        assert!(m.get(2, col("iso_area")).is_none());
        assert_eq!(rep.unsnapped, 1);
        assert_eq!(rep.unroutable, 1);
    }

    #[test]
    fn smoothness_table() {
        let table = [
            ("excellent", 7.0),
            ("good", 6.0),
            ("intermediate", 5.0),
            ("bad", 4.0),
            ("very_bad", 3.0),
            ("horrible", 2.0),
            ("very_horrible", 1.0),
            ("impassable", 0.0),
        ];
        for (tag, v) in table {
            assert_eq!(smoothness_level(tag), Some(v));
        }
        assert_eq!(smoothness_level("great"), None);
    }

    #[test]
    fn traffic_join() {
        let ex = parse_osm_str(OSM).unwrap();
        let traffic = read_traffic(
            "id,direction,aadt,mean_speed,p85_speed\na,both,12000,48,61\nq,fwd,1,2,3\nb,,,,\n"
                .as_bytes(),
        )
        .unwrap();
        let (m, rep) = extract_features(
            &segs(),
            &ex.graph,
            &ex.ways,
            &PopulationRaster::empty(),
            Some(&traffic),
            &ExtractConfig::default(),
        )
        .unwrap();
        let s = m.schema();
        assert_eq!(m.get(0, s.column_index("direction").unwrap()), Some(2.0));
        assert_eq!(m.get(0, s.column_index("aadt").unwrap()), Some(12000.0));
        assert_eq!(m.get(1, s.column_index("aadt").unwrap()), None);
        assert_eq!(rep.traffic_unknown_ids, 1);
    }
}
