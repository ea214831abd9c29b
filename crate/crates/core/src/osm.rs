//! OpenStreetMap XML ingestion: a routable road graph plus the tag table of
//! every retained highway way.
//!
//! Only `node` and `way` elements are read. Relations, areas (`area=yes`) and
//! ways without a `highway` tag are ignored. Each consecutive node pair of a
//! way becomes one directed edge, or two when the way is not one-way.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{haversine_m, GeoPoint};
use crate::spatial::GridIndex;

/// Tags of a retained highway way. Unparseable numeric tags are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsmWayAttributes {
    pub way_id: i64,
    pub highway: String,
    pub oneway: Option<bool>,
    pub maxspeed: Option<u32>,
    pub surface: Option<String>,
    pub smoothness: Option<String>,
    pub lit: Option<bool>,
    pub bridge: Option<bool>,
    pub lanes: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: i64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: i64,
    pub to: i64,
    pub len_m: f64,
    pub kmh: f64,
    pub way: i64,
}

impl Edge {
    pub fn travel_s(&self) -> f64 {
        self.len_m / (self.kmh / 3.6)
    }
}

/// Routing speed used when a way has no usable `maxspeed`. The feature
/// column stays missing; this only feeds travel times.
pub fn default_speed_kmh(highway: &str) -> f64 {
    let base = highway.strip_suffix("_link").unwrap_or(highway);
    match base {
        "motorway" => 110.0,
        "trunk" => 90.0,
        "primary" => 70.0,
        "secondary" => 60.0,
        "tertiary" => 50.0,
        "residential" | "unclassified" => 30.0,
        "service" | "track" => 15.0,
        _ => 30.0,
    }
}

/// Directed road network with a spatial index over its nodes.
#[derive(Debug, Clone)]
pub struct RoadGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<Edge>,
    index_of: HashMap<i64, usize>,
    /// Outgoing edge indices per node index.
    out_edges: Vec<Vec<usize>>,
    /// Sorted ids of the ways touching each node index.
    node_ways: Vec<Vec<i64>>,
    grid: GridIndex,
}

impl RoadGraph {
    /// Builds a graph, checking that edges reference known nodes and carry
    /// positive length and speed.
    pub fn new(mut nodes: Vec<GraphNode>, edges: Vec<Edge>) -> Result<Self> {
        nodes.sort_by_key(|n| n.id);
        let points = nodes
            .iter()
            .map(|n| GeoPoint::new(n.lat, n.lon))
            .collect::<Result<Vec<_>>>()?;
        let index_of: HashMap<i64, usize> =
            nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        if index_of.len() != nodes.len() {
            return Err(Error::InvalidInput("duplicate node id in graph".into()));
        }
        let mut out_edges = vec![Vec::new(); nodes.len()];
        let mut node_ways: Vec<Vec<i64>> = vec![Vec::new(); nodes.len()];
        for (ei, e) in edges.iter().enumerate() {
            let (Some(&a), Some(&b)) = (index_of.get(&e.from), index_of.get(&e.to)) else {
                return Err(Error::InvalidInput(format!(
                    "edge {}->{} references unknown node",
                    e.from, e.to
                )));
            };
            if !(e.len_m > 0.0 && e.kmh > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "edge {}->{} has non-positive length or speed",
                    e.from, e.to
                )));
            }
            out_edges[a].push(ei);
            node_ways[a].push(e.way);
            node_ways[b].push(e.way);
        }
        for w in &mut node_ways {
            w.sort_unstable();
            w.dedup();
        }
        Ok(RoadGraph {
            grid: GridIndex::new(points, 100.0),
            nodes,
            edges,
            index_of,
            out_edges,
            node_ways,
        })
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: i64) -> Option<usize> {
        self.index_of.get(&id).copied()
    }

    pub fn point(&self, idx: usize) -> GeoPoint {
        self.grid.point(idx)
    }

    pub fn out_edges(&self, idx: usize) -> impl Iterator<Item = &Edge> {
        self.out_edges[idx].iter().map(move |&e| &self.edges[e])
    }

    pub fn ways_at(&self, idx: usize) -> &[i64] {
        &self.node_ways[idx]
    }

    /// Node indices within `radius_m` of `p`.
    pub fn nodes_within(&self, p: GeoPoint, radius_m: f64) -> Vec<usize> {
        self.grid.within(p, radius_m)
    }

    /// Nearest node index within `radius_m`.
    pub fn nearest_node(&self, p: GeoPoint, radius_m: f64) -> Option<(usize, f64)> {
        self.grid.nearest(p, radius_m)
    }

    /// SHA-256 over the canonical JSON of nodes and edges.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.nodes).expect("nodes serialize"));
        h.update(serde_json::to_vec(&self.edges).expect("edges serialize"));
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Counters collected while parsing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub nodes_read: usize,
    pub ways_read: usize,
    pub ways_retained: usize,
    /// Ways dropped because they reference a node absent from the extract.
    pub ways_unknown_node: usize,
    pub ways_degenerate: usize,
}

/// Result of parsing one extract.
#[derive(Debug, Clone)]
pub struct OsmExtract {
    pub graph: RoadGraph,
    pub ways: BTreeMap<i64, OsmWayAttributes>,
    pub report: ParseReport,
}

#[derive(Default)]
struct PendingWay {
    id: i64,
    refs: Vec<i64>,
    tags: BTreeMap<String, String>,
}

pub fn parse_maxspeed(v: &str) -> Option<u32> {
    let v = v.trim();
    if let Ok(n) = v.parse::<u32>() {
        return Some(n);
    }
    let (num, unit) = v.split_at(v.find(|c: char| !c.is_ascii_digit()).unwrap_or(v.len()));
    let n: u32 = num.parse().ok()?;
    match unit.trim() {
        "km/h" | "kmh" | "kph" => Some(n),
        "mph" => Some((n as f64 * 1.609_344).round() as u32),
        _ => None,
    }
}

/// Returns `(flag, reversed)`.
fn parse_oneway(v: &str) -> (Option<bool>, bool) {
    match v.trim() {
        "yes" | "true" | "1" => (Some(true), false),
        "-1" => (Some(true), true),
        "no" | "false" | "0" => (Some(false), false),
        _ => (None, false),
    }
}

fn parse_lit(v: &str) -> Option<bool> {
    match v.trim() {
        "yes" | "24/7" | "automatic" | "limited" | "interval" => Some(true),
        "no" | "disused" => Some(false),
        _ => None,
    }
}

fn parse_bridge(v: &str) -> Option<bool> {
    match v.trim() {
        "" => None,
        "no" => Some(false),
        _ => Some(true),
    }
}

fn line_of(src: &str, pos: usize) -> usize {
    let pos = pos.min(src.len());
    src.as_bytes()[..pos].iter().filter(|&&b| b == b'\n').count() + 1
}

fn attr(e: &BytesStart<'_>, key: &[u8], src: &str, pos: usize) -> Result<Option<String>> {
    for a in e.attributes() {
        let a = a.map_err(|err| Error::Parse {
            line: line_of(src, pos),
            message: err.to_string(),
        })?;
        if a.key.as_ref() == key {
            let v = a.unescape_value().map_err(|err| Error::Parse {
                line: line_of(src, pos),
                message: err.to_string(),
            })?;
            return Ok(Some(v.into_owned()));
        }
    }
    Ok(None)
}

fn required<T: std::str::FromStr>(
    e: &BytesStart<'_>,
    key: &[u8],
    src: &str,
    pos: usize,
) -> Result<T> {
    let raw = attr(e, key, src, pos)?;
    raw.as_deref()
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Parse {
            line: line_of(src, pos),
            message: format!(
                "<{}> missing or invalid attribute {}",
                String::from_utf8_lossy(e.name().as_ref()),
                String::from_utf8_lossy(key)
            ),
        })
}

/// Parses an OSM XML document.
pub fn parse_osm<R: Read>(mut input: R) -> Result<OsmExtract> {
    let mut src = String::new();
    input
        .read_to_string(&mut src)
        .map_err(|e| Error::io("<osm input>", e))?;
    parse_osm_str(&src)
}

pub fn parse_osm_str(src: &str) -> Result<OsmExtract> {
    let mut reader = Reader::from_str(src);
    reader.config_mut().check_end_names = true;

    let mut report = ParseReport::default();
    let mut coords: HashMap<i64, (f64, f64)> = HashMap::new();
    let mut raw_ways: Vec<PendingWay> = Vec::new();
    let mut current: Option<PendingWay> = None;
    let mut depth: Vec<Vec<u8>> = Vec::new();

    loop {
        let pos = reader.buffer_position() as usize;
        let ev = reader.read_event().map_err(|e| Error::Parse {
            line: line_of(src, reader.buffer_position() as usize),
            message: e.to_string(),
        })?;
        let (e, is_empty) = match &ev {
            Event::Start(e) => (Some(e), false),
            Event::Empty(e) => (Some(e), true),
            Event::End(e) => {
                depth.pop();
                if e.name().as_ref() == b"way" {
                    if let Some(w) = current.take() {
                        raw_ways.push(w);
                    }
                }
                continue;
            }
            Event::Eof => break,
            _ => continue,
        };
        let e = e.expect("start or empty");
        if !is_empty {
            depth.push(e.name().as_ref().to_vec());
        }
        match e.name().as_ref() {
            b"node" => {
                let id: i64 = required(e, b"id", src, pos)?;
                let lat: f64 = required(e, b"lat", src, pos)?;
                let lon: f64 = required(e, b"lon", src, pos)?;
                GeoPoint::new(lat, lon).map_err(|err| Error::Parse {
                    line: line_of(src, pos),
                    message: err.to_string(),
                })?;
                coords.insert(id, (lat, lon));
                report.nodes_read += 1;
            }
            b"way" => {
                let id: i64 = required(e, b"id", src, pos)?;
                report.ways_read += 1;
                let w = PendingWay {
                    id,
                    ..Default::default()
                };
                if is_empty {
                    raw_ways.push(w);
                } else {
                    current = Some(w);
                }
            }
            b"nd" => {
                if let Some(w) = current.as_mut() {
                    w.refs.push(required(e, b"ref", src, pos)?);
                }
            }
            b"tag" => {
                if let Some(w) = current.as_mut() {
                    let k = attr(e, b"k", src, pos)?.unwrap_or_default();
                    let v = attr(e, b"v", src, pos)?.unwrap_or_default();
                    w.tags.insert(k, v);
                }
            }
            _ => {}
        }
    }
    if let Some(open) = depth.last() {
        return Err(Error::Parse {
            line: line_of(src, src.len()),
            message: format!(
                "unexpected end of input inside <{}>",
                String::from_utf8_lossy(open)
            ),
        });
    }

    raw_ways.sort_by_key(|w| w.id);
    let mut ways = BTreeMap::new();
    let mut edges = Vec::new();
    let mut used: BTreeMap<i64, GraphNode> = BTreeMap::new();
    for w in raw_ways {
        let Some(highway) = w.tags.get("highway").filter(|h| !h.trim().is_empty()) else {
            continue;
        };
        if w.tags.get("area").map(String::as_str) == Some("yes") {
            continue;
        }
        if w.refs.iter().any(|r| !coords.contains_key(r)) {
            report.ways_unknown_node += 1;
            log::warn!("way {} references a node missing from the extract; skipped", w.id);
            continue;
        }
        if w.refs.len() < 2 {
            report.ways_degenerate += 1;
            continue;
        }
        let tag = |k: &str| w.tags.get(k).map(String::as_str);
        let (oneway, reversed) = tag("oneway").map(parse_oneway).unwrap_or((None, false));
        let maxspeed = tag("maxspeed").and_then(parse_maxspeed);
        let attrs = OsmWayAttributes {
            way_id: w.id,
            highway: highway.trim().to_string(),
            oneway,
            maxspeed,
            surface: tag("surface").map(|s| s.trim().to_string()),
            smoothness: tag("smoothness").map(|s| s.trim().to_string()),
            lit: tag("lit").and_then(parse_lit),
            bridge: tag("bridge").and_then(parse_bridge),
            lanes: tag("lanes").and_then(|v| v.trim().parse().ok()),
        };
        let kmh = maxspeed
            .filter(|&s| s > 0)
            .map(f64::from)
            .unwrap_or_else(|| default_speed_kmh(&attrs.highway));
        let forward = !reversed;
        let backward = reversed || oneway != Some(true);
        for pair in w.refs.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (pa, pb) = (coords[&a], coords[&b]);
            let ga = GeoPoint::new(pa.0, pa.1)?;
            let gb = GeoPoint::new(pb.0, pb.1)?;
            let len_m = haversine_m(ga, gb);
            used.insert(a, GraphNode { id: a, lat: pa.0, lon: pa.1 });
            used.insert(b, GraphNode { id: b, lat: pb.0, lon: pb.1 });
            if len_m <= 0.0 {
                continue;
            }
            if forward {
                edges.push(Edge { from: a, to: b, len_m, kmh, way: w.id });
            }
            if backward {
                edges.push(Edge { from: b, to: a, len_m, kmh, way: w.id });
            }
        }
        ways.insert(w.id, attrs);
        report.ways_retained += 1;
    }

    let graph = RoadGraph::new(used.into_values().collect(), edges)?;
    Ok(OsmExtract { graph, ways, report })
}

/// Way whose nearest node is closest to `p`, if that node lies within
/// `max_m`. Equidistant candidates resolve to the smaller way id.
pub fn snap_segment(graph: &RoadGraph, p: GeoPoint, max_m: f64) -> Option<i64> {
    let hits = graph.grid.within_sorted(p, max_m);
    let best = hits.first()?.1;
    hits.iter()
        .take_while(|(_, d)| *d <= best + 1e-6)
        .flat_map(|&(i, _)| graph.ways_at(i).iter().copied())
        .min()
}

/// On-disk graph cache. Field order is stable: `source_hash`, `graph_hash`,
/// `nodes`, `edges`, `ways`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphCache {
    pub source_hash: String,
    pub graph_hash: String,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<Edge>,
    pub ways: Vec<OsmWayAttributes>,
}

impl GraphCache {
    pub fn from_extract(source_hash: String, ex: &OsmExtract) -> Self {
        GraphCache {
            source_hash,
            graph_hash: ex.graph.content_hash(),
            nodes: ex.graph.nodes().to_vec(),
            edges: ex.graph.edges().to_vec(),
            ways: ex.ways.values().cloned().collect(),
        }
    }

    pub fn into_parts(self) -> Result<(RoadGraph, BTreeMap<i64, OsmWayAttributes>)> {
        let graph = RoadGraph::new(self.nodes, self.edges)?;
        let ways = self.ways.into_iter().map(|w| (w.way_id, w)).collect();
        Ok((graph, ways))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Reads the extract at `osm_path`, reusing `cache_path` when its stored
/// source hash matches the extract's content. Returns whether the cache was
/// rebuilt.
pub fn load_or_build(
    osm_path: &Path,
    cache_path: &Path,
) -> Result<(RoadGraph, BTreeMap<i64, OsmWayAttributes>, bool)> {
    let bytes = std::fs::read(osm_path).map_err(|e| Error::io(osm_path, e))?;
    let source_hash = sha256_hex(&bytes);
    if let Ok(cached) = std::fs::read(cache_path) {
        if let Ok(cache) = serde_json::from_slice::<GraphCache>(&cached) {
            if cache.source_hash == source_hash {
                let (g, w) = cache.into_parts()?;
                return Ok((g, w, false));
            }
        }
    }
    let src = String::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let ex = parse_osm_str(&src)?;
    let cache = GraphCache::from_extract(source_hash, &ex);
    write_cache(cache_path, &cache)?;
    Ok((ex.graph, ex.ways, true))
}

pub fn write_cache(path: &Path, cache: &GraphCache) -> Result<()> {
    let json = serde_json::to_vec(cache)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}
