//! Synthetic ground truth: a world of small towns with an OpenStreetMap
//! extract, traffic and population tables, rated segments, and labels drawn
//! from a known latent risk rule.
//!
//! Every town is a jittered street grid with 250 m blocks. Each block edge is
//! a three-node way whose middle node is the midpoint of a rated segment, so
//! midpoints snap exactly. Road attributes depend on the road class and on a
//! per-town quality level, which makes neighbouring segments alike. Tags are
//! removed from the extract at the configured per-feature rates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_features, read_traffic, ExtractConfig, FeatureMatrix, PopulationRaster};
use crate::model::{write_labels, write_segments, GeoPoint, RoadSegment, SafetyLabel, StarRating};
use crate::osm::parse_osm_str;

/// Tags whose absence is simulated.
pub const MASKABLE_TAGS: [&str; 5] = ["oneway", "maxspeed", "surface", "smoothness", "lit"];

const BLOCK_M: f64 = 250.0;
const JITTER_M: f64 = 20.0;
const TOWN_SPACING_M: f64 = 9000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "HR")]
    Hr,
    #[serde(rename = "GR")]
    Gr,
    #[serde(rename = "SL")]
    Sl,
    #[serde(rename = "NL")]
    Nl,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Hr, Preset::Gr, Preset::Sl, Preset::Nl];

    pub fn code(self) -> &'static str {
        match self {
            Preset::Hr => "HR",
            Preset::Gr => "GR",
            Preset::Sl => "SL",
            Preset::Nl => "NL",
        }
    }

    /// High-risk share of the rated segments.
    pub fn minority_frac(self) -> f64 {
        match self {
            Preset::Hr => 0.1171,
            Preset::Gr => 0.0839,
            Preset::Sl => 0.1631,
            Preset::Nl => 0.0800,
        }
    }

    /// Missing rates for oneway, maxspeed, surface, smoothness, lit.
    pub fn missing_rates(self) -> [f64; 5] {
        match self {
            Preset::Hr => [0.092, 0.332, 0.357, 0.653, 0.413],
            Preset::Gr => [0.233, 0.627, 0.431, 0.785, 0.472],
            Preset::Sl => [0.1203, 0.410, 0.449, 0.682, 0.458],
            Preset::Nl => [0.197, 0.514, 0.503, 0.735, 0.476],
        }
    }

    /// Number of labelled segments in the full-size dataset.
    pub fn full_size(self) -> usize {
        match self {
            Preset::Hr => 6320,
            Preset::Gr => 41582,
            Preset::Sl => 22873,
            Preset::Nl => 55985,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HR" => Ok(Preset::Hr),
            "GR" => Ok(Preset::Gr),
            "SL" => Ok(Preset::Sl),
            "NL" => Ok(Preset::Nl),
            _ => Err(Error::InvalidConfig(format!("unknown preset {s:?} (HR, GR, SL, NL)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_segments: usize,
    pub minority_frac: f64,
    /// Keyed by tag name; see [`MASKABLE_TAGS`]. Absent keys mean 0.
    pub missing_rates: BTreeMap<String, f64>,
    /// Half the side length of a town.
    pub spatial_cluster_km: f64,
    pub segments_per_cluster: usize,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::preset(Preset::Nl, 10_000, 0)
    }
}

impl SynthConfig {
    pub fn preset(p: Preset, n_segments: usize, seed: u64) -> Self {
        SynthConfig {
            n_segments,
            minority_frac: p.minority_frac(),
            missing_rates: MASKABLE_TAGS
                .iter()
                .zip(p.missing_rates())
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            spatial_cluster_km: 0.75,
            segments_per_cluster: 4,
            label_noise: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_segments < 100 {
            return Err(Error::InvalidConfig("n_segments must be >= 100".into()));
        }
        if !(self.minority_frac > 0.0 && self.minority_frac < 1.0) {
            return Err(Error::InvalidConfig("minority_frac must be in (0, 1)".into()));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::InvalidConfig("label_noise must be in [0, 0.5)".into()));
        }
        for (k, v) in &self.missing_rates {
            if !MASKABLE_TAGS.contains(&k.as_str()) {
                return Err(Error::InvalidConfig(format!("cannot mask tag {k:?}")));
            }
            if !(0.0..1.0).contains(v) {
                return Err(Error::InvalidConfig(format!("missing rate for {k} must be in [0, 1)")));
            }
        }
        if !(self.spatial_cluster_km >= 0.5) {
            return Err(Error::InvalidConfig("spatial_cluster_km must be >= 0.5".into()));
        }
        if self.segments_per_cluster == 0 {
            return Err(Error::InvalidConfig("segments_per_cluster must be >= 1".into()));
        }
        Ok(())
    }

    fn rate(&self, tag: &str) -> f64 {
        self.missing_rates.get(tag).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Motorway,
    Trunk,
    Primary,
    Secondary,
    Tertiary,
    Unclassified,
    Residential,
}

impl Class {
    const ALL: [Class; 7] = [
        Class::Motorway,
        Class::Trunk,
        Class::Primary,
        Class::Secondary,
        Class::Tertiary,
        Class::Unclassified,
        Class::Residential,
    ];
    const WEIGHTS: [f64; 7] = [0.07, 0.10, 0.22, 0.22, 0.16, 0.08, 0.15];

    fn tag(self) -> &'static str {
        match self {
            Class::Motorway => "motorway",
            Class::Trunk => "trunk",
            Class::Primary => "primary",
            Class::Secondary => "secondary",
            Class::Tertiary => "tertiary",
            Class::Unclassified => "unclassified",
            Class::Residential => "residential",
        }
    }

    fn base_speed(self) -> f64 {
        match self {
            Class::Motorway => 120.0,
            Class::Trunk => 100.0,
            Class::Primary => 80.0,
            Class::Secondary => 70.0,
            Class::Tertiary => 60.0,
            Class::Unclassified => 50.0,
            Class::Residential => 30.0,
        }
    }

    /// Added to the town quality when drawing pavement and lighting.
    fn upkeep(self) -> f64 {
        match self {
            Class::Motorway | Class::Trunk => 1.5,
            Class::Primary => 1.0,
            Class::Secondary => 0.5,
            Class::Tertiary => 0.0,
            Class::Unclassified => -1.0,
            Class::Residential => 0.5,
        }
    }

    fn base_aadt(self) -> f64 {
        match self {
            Class::Motorway => 40_000.0,
            Class::Trunk => 20_000.0,
            Class::Primary => 10_000.0,
            Class::Secondary => 5_000.0,
            Class::Tertiary => 2_500.0,
            Class::Unclassified => 800.0,
            Class::Residential => 600.0,
        }
    }
}

const SMOOTHNESS: [&str; 8] = [
    "impassable",
    "very_horrible",
    "horrible",
    "very_bad",
    "bad",
    "intermediate",
    "good",
    "excellent",
];

/// True attributes of a way before any tag is hidden.
#[derive(Debug, Clone)]
struct WayTruth {
    class: Class,
    oneway: bool,
    maxspeed: f64,
    surface: &'static str,
    surface_quality: f64,
    smoothness: usize,
    lit: bool,
    bridge: bool,
    lanes: u32,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn draw_way(class: Class, quality: f64, rng: &mut ChaCha8Rng) -> WayTruth {
    let shift: f64 = Normal::<f64>::new(0.0, 0.8).expect("valid sd").sample(rng).round().clamp(-2.0, 2.0);
    let maxspeed = (class.base_speed() + 10.0 * shift).max(20.0);
    let care = quality + class.upkeep();
    let (surface, surface_quality) = if rng.random::<f64>() < sigmoid(1.5 + 1.5 * care) {
        match rng.random_range(0..10) {
            0 => ("concrete", 1.0),
            1 => ("paving_stones", 0.7),
            _ => ("asphalt", 1.0),
        }
    } else {
        match rng.random_range(0..3) {
            0 => ("gravel", 0.3),
            1 => ("dirt", 0.0),
            _ => ("ground", 0.0),
        }
    };
    let smooth: f64 = 2.0 + 3.5 * surface_quality + 0.8 * quality + Normal::<f64>::new(0.0, 0.7).expect("valid sd").sample(rng);
    let lit = rng.random::<f64>() < sigmoid(0.2 + 1.2 * quality + 0.8 * class.upkeep() - 0.02 * (maxspeed - 60.0));
    let lanes = match class {
        Class::Motorway => rng.random_range(4..=6),
        Class::Trunk => rng.random_range(2..=4),
        Class::Primary | Class::Secondary => rng.random_range(2..=3),
        _ => rng.random_range(1..=2),
    };
    WayTruth {
        class,
        oneway: class == Class::Motorway || rng.random::<f64>() < 0.1,
        maxspeed,
        surface,
        surface_quality,
        smoothness: smooth.round().clamp(0.0, 7.0) as usize,
        lit,
        bridge: rng.random::<f64>() < 0.03,
        lanes,
    }
}

fn pick_class(rng: &mut ChaCha8Rng) -> Class {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, w) in Class::ALL.iter().zip(Class::WEIGHTS) {
        acc += w;
        if u < acc {
            return *c;
        }
    }
    Class::Residential
}

struct WayOut {
    nodes: [usize; 3],
    truth: WayTruth,
    town: usize,
}

/// Realised properties of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub n_segments: usize,
    pub n_towns: usize,
    pub high_risk: usize,
    pub minority_frac: f64,
    /// Share of segments whose latent risk is above the threshold.
    pub latent_positive_frac: f64,
    pub latent_threshold: f64,
    pub missing_rates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub osm_xml: String,
    pub segments: Vec<RoadSegment>,
    pub traffic_csv: String,
    pub population_csv: String,
    /// Extracted from the generated artefacts, rows sorted by id.
    pub features: FeatureMatrix,
    pub labels: BTreeMap<String, SafetyLabel>,
    /// Noise-free risk score per segment, same order as `features`.
    pub latent: Vec<f64>,
    pub summary: SynthSummary,
}

/// Paths of the files written by [`SynthDataset::write_to`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthFiles {
    pub osm: PathBuf,
    pub segments: PathBuf,
    pub traffic: PathBuf,
    pub population: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
}

impl SynthFiles {
    pub fn in_dir(dir: &Path) -> Self {
        SynthFiles {
            osm: dir.join("world.osm"),
            segments: dir.join("segments.csv"),
            traffic: dir.join("traffic.csv"),
            population: dir.join("population.csv"),
            features: dir.join("features.csv"),
            labels: dir.join("labels.csv"),
        }
    }
}

fn fmt_coord(v: f64) -> String {
    format!("{v:.7}")
}

/// Draws `round(rate * n)` distinct positions out of `n`.
fn exact_mask(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let k = (rate * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut mask = vec![false; n];
    for &i in &order[..k.min(n)] {
        mask[i] = true;
    }
    mask
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let eps = cfg.label_noise;
    let m0 = (cfg.minority_frac - eps) / (1.0 - 2.0 * eps);
    if !(m0 > 0.0 && m0 < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "minority_frac {} is unreachable with label_noise {}: noise alone yields {}",
            cfg.minority_frac, eps, eps
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_towns = cfg.n_segments.div_ceil(cfg.segments_per_cluster);
    let side = (n_towns as f64).sqrt().ceil() as usize;
    let origin = GeoPoint::new(45.0, 5.0)?;
    let max_nodes = ((2.0 * cfg.spatial_cluster_km * 1000.0 / BLOCK_M).floor() as usize + 1).max(3);
    let min_nodes = (max_nodes / 2).max(3);

    let mut nodes: Vec<GeoPoint> = Vec::new();
    let mut ways: Vec<WayOut> = Vec::new();
    let mut rated: Vec<usize> = Vec::with_capacity(cfg.n_segments);
    let mut pop_cells: Vec<(GeoPoint, f64)> = Vec::new();
    let q_dist = Normal::new(0.0, 1.0).expect("valid sd");

    for town in 0..n_towns {
        let quality: f64 = q_dist.sample(&mut rng);
        let centre = origin.offset_m(
            (town / side) as f64 * TOWN_SPACING_M + rng.random_range(-2000.0..2000.0),
            (town % side) as f64 * TOWN_SPACING_M + rng.random_range(-2000.0..2000.0),
        )?;
        let nx = rng.random_range(min_nodes..=max_nodes);
        let ny = rng.random_range(min_nodes..=max_nodes);
        let base = nodes.len();
        for a in 0..nx {
            for b in 0..ny {
                nodes.push(centre.offset_m(
                    a as f64 * BLOCK_M + rng.random_range(-JITTER_M..JITTER_M),
                    b as f64 * BLOCK_M + rng.random_range(-JITTER_M..JITTER_M),
                )?);
            }
        }
        // One road class per grid line.
        let row_class: Vec<Class> = (0..nx).map(|_| pick_class(&mut rng)).collect();
        let col_class: Vec<Class> = (0..ny).map(|_| pick_class(&mut rng)).collect();
        let first_way = ways.len();
        let mut edge = |p: usize, q: usize, class: Class, rng: &mut ChaCha8Rng, nodes: &mut Vec<GeoPoint>| {
            let (a, b) = (nodes[p], nodes[q]);
            let mid = GeoPoint::new(0.5 * (a.lat() + b.lat()), 0.5 * (a.lon() + b.lon())).expect("midpoint of valid points");
            nodes.push(mid);
            ways.push(WayOut {
                nodes: [p, nodes.len() - 1, q],
                truth: draw_way(class, quality, rng),
                town,
            });
        };
        for a in 0..nx {
            for b in 0..ny {
                let here = base + a * ny + b;
                if b + 1 < ny {
                    edge(here, here + 1, row_class[a], &mut rng, &mut nodes);
                }
                if a + 1 < nx {
                    edge(here, here + ny, col_class[b], &mut rng, &mut nodes);
                }
            }
        }
        let n_here = cfg.segments_per_cluster.min(cfg.n_segments - rated.len());
        let mut pick: Vec<usize> = (first_way..ways.len()).collect();
        pick.shuffle(&mut rng);
        rated.extend(pick.into_iter().take(n_here));

        let density = 400.0 * (1.0 + 0.5 * quality).max(0.2);
        for a in 0..nx.saturating_sub(1) {
            for b in 0..ny.saturating_sub(1) {
                let cell = centre.offset_m((a as f64 + 0.5) * BLOCK_M, (b as f64 + 0.5) * BLOCK_M)?;
                pop_cells.push((cell, (density * rng.random_range(0.5..1.5)).round()));
            }
        }
    }
    rated.sort_unstable();

    // Hidden tags: exact counts over rated ways, i.i.d. elsewhere.
    let mut hidden: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for tag in MASKABLE_TAGS {
        let rate = cfg.rate(tag);
        let mut mask: Vec<bool> = (0..ways.len()).map(|_| rng.random::<f64>() < rate).collect();
        for (i, m) in rated.iter().zip(exact_mask(rated.len(), rate, &mut rng)) {
            mask[*i] = m;
        }
        hidden.insert(tag, mask);
    }

    let seg_id = |w: usize| format!("s{w:07}");
    let osm_xml = write_osm(&nodes, &ways, &hidden);
    let mut traffic_csv = String::from("id,direction,aadt,mean_speed,p85_speed\n");
    let aadt_noise = Normal::new(0.0, 0.4).expect("valid sd");
    for &w in &rated {
        let t = &ways[w].truth;
        let aadt = (t.class.base_aadt().ln() + aadt_noise.sample(&mut rng)).exp().round();
        let mean = (t.maxspeed * rng.random_range(0.7..0.95)).round();
        let p85 = (mean * rng.random_range(1.1..1.2)).round();
        let dir = if t.oneway { "fwd" } else { "both" };
        let _ = writeln!(traffic_csv, "{},{dir},{aadt},{mean},{p85}", seg_id(w));
    }
    let mut population_csv = String::from("lon,lat,pop\n");
    for (p, v) in &pop_cells {
        let _ = writeln!(population_csv, "{},{},{v}", fmt_coord(p.lon()), fmt_coord(p.lat()));
    }

    // Extract features exactly as the pipeline would from the files.
    let extract = parse_osm_str(&osm_xml)?;
    let unlabelled: Vec<RoadSegment> = rated
        .iter()
        .map(|&w| {
            let mid = nodes[ways[w].nodes[1]];
            let p = GeoPoint::new(fmt_coord(mid.lat()).parse().expect("formatted"), fmt_coord(mid.lon()).parse().expect("formatted"))?;
            RoadSegment::new(seg_id(w), p, None, None)
        })
        .collect::<Result<_>>()?;
    let traffic = read_traffic(traffic_csv.as_bytes())?;
    let raster = PopulationRaster::read_csv(population_csv.as_bytes())?;
    let (features, report) = extract_features(
        &unlabelled,
        &extract.graph,
        &extract.ways,
        &raster,
        Some(&traffic),
        &ExtractConfig::default(),
    )?;
    if report.unsnapped > 0 || report.unroutable > 0 {
        return Err(Error::InvalidInput(format!(
            "generator produced {} unsnapped and {} unroutable segments",
            report.unsnapped, report.unroutable
        )));
    }

    // Latent risk from true speed, pavement, lighting and network reach.
    // Rows of `features` are sorted by id, which follows `rated` order.
    let reach_col = features.schema().column_index("reach_factor").expect("schema column");
    let reach: Vec<f64> = (0..features.n_rows())
        .map(|i| features.get(i, reach_col).expect("reach is never missing"))
        .collect();
    let speeds: Vec<f64> = rated.iter().map(|&w| ways[w].truth.maxspeed).collect();
    let (rm, rs) = mean_sd(&reach);
    let (sm, ss) = mean_sd(&speeds);
    let latent: Vec<f64> = rated
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let t = &ways[w].truth;
            1.2 * (t.maxspeed - sm) / ss.max(1e-12) - 1.0 * t.surface_quality - 0.8 * f64::from(u8::from(t.lit))
                - 0.5 * (reach[i] - rm) / rs.max(1e-12)
        })
        .collect();
    let n = latent.len();
    let k = ((m0 * n as f64).round() as usize).clamp(1, n - 1);
    let mut sorted = latent.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[k - 1];

    let mut labels = BTreeMap::new();
    let mut segments = Vec::with_capacity(n);
    let mut high_risk = 0usize;
    for (i, seg) in unlabelled.into_iter().enumerate() {
        let mut risky = latent[i] >= threshold;
        if rng.random::<f64>() < eps {
            risky = !risky;
        }
        let label = if risky { SafetyLabel::HighRisk } else { SafetyLabel::Safe };
        high_risk += usize::from(risky);
        let star = if risky { rng.random_range(1..=2) } else { rng.random_range(3..=5) };
        labels.insert(seg.id.clone(), label);
        segments.push(RoadSegment::new(seg.id, seg.midpoint, Some(StarRating::new(star)?), Some(label))?);
    }

    let missing_rates = MASKABLE_TAGS
        .iter()
        .map(|&tag| {
            let col = match tag {
                "surface" => "surface_asphalt",
                other => other,
            };
            let c = features.schema().column_index(col).expect("schema column");
            (tag.to_string(), features.missing_rate(c))
        })
        .collect();
    let summary = SynthSummary {
        n_segments: n,
        n_towns,
        high_risk,
        minority_frac: high_risk as f64 / n as f64,
        latent_positive_frac: latent.iter().filter(|&&s| s >= threshold).count() as f64 / n as f64,
        latent_threshold: threshold,
        missing_rates,
    };
    log::info!(
        "synthetic world: {} towns, {} segments, {} high risk",
        n_towns,
        n,
        high_risk
    );
    Ok(SynthDataset {
        config: cfg.clone(),
        osm_xml,
        segments,
        traffic_csv,
        population_csv,
        features,
        labels,
        latent,
        summary,
    })
}

fn write_osm(nodes: &[GeoPoint], ways: &[WayOut], hidden: &BTreeMap<&str, Vec<bool>>) -> String {
    let mut s = String::with_capacity(nodes.len() * 64 + ways.len() * 256);
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<osm version=\"0.6\" generator=\"roadsafe-synth\">\n");
    for (i, p) in nodes.iter().enumerate() {
        let _ = writeln!(
            s,
            "  <node id=\"{}\" lat=\"{}\" lon=\"{}\"/>",
            i + 1,
            fmt_coord(p.lat()),
            fmt_coord(p.lon())
        );
    }
    let shown = |tag: &str, w: usize| !hidden.get(tag).is_some_and(|m| m[w]);
    for (w, way) in ways.iter().enumerate() {
        let t = &way.truth;
        let _ = writeln!(s, "  <way id=\"{}\">", w + 1);
        for n in way.nodes {
            let _ = writeln!(s, "    <nd ref=\"{}\"/>", n + 1);
        }
        let mut tag = |k: &str, v: &str| {
            let _ = writeln!(s, "    <tag k=\"{k}\" v=\"{v}\"/>");
        };
        tag("highway", t.class.tag());
        if shown("oneway", w) {
            tag("oneway", if t.oneway { "yes" } else { "no" });
        }
        if shown("maxspeed", w) {
            tag("maxspeed", &format!("{}", t.maxspeed));
        }
        if shown("surface", w) {
            tag("surface", t.surface);
        }
        if shown("smoothness", w) {
            tag("smoothness", SMOOTHNESS[t.smoothness]);
        }
        if shown("lit", w) {
            tag("lit", if t.lit { "yes" } else { "no" });
        }
        if t.bridge {
            tag("bridge", "yes");
        }
        tag("lanes", &t.lanes.to_string());
        let _ = writeln!(s, "    <tag k=\"town\" v=\"{}\"/>", way.town);
        s.push_str("  </way>\n");
    }
    s.push_str("</osm>\n");
    s
}

impl SynthDataset {
    pub fn write_to(&self, dir: &Path) -> Result<SynthFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = SynthFiles::in_dir(dir);
        let put = |path: &Path, bytes: &[u8]| std::fs::write(path, bytes).map_err(|e| Error::io(path, e));
        put(&files.osm, self.osm_xml.as_bytes())?;
        put(&files.traffic, self.traffic_csv.as_bytes())?;
        put(&files.population, self.population_csv.as_bytes())?;
        let mut buf = Vec::new();
        write_segments(&mut buf, &self.segments)?;
        put(&files.segments, &buf)?;
        buf.clear();
        self.features.write_csv(&mut buf)?;
        put(&files.features, &buf)?;
        buf.clear();
        write_labels(&mut buf, self.labels.iter().map(|(k, v)| (k.as_str(), *v)))?;
        put(&files.labels, &buf)?;
        Ok(files)
    }

    /// Labels encoded 0/1 in feature-row order.
    pub fn label_vector(&self) -> Vec<u8> {
        self.features.ids().iter().map(|id| self.labels[id].encode()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::score;

    fn small(p: Preset, seed: u64) -> SynthConfig {
        SynthConfig::preset(p, 1000, seed)
    }

    #[test]
    fn minority_fraction_and_missingness() {
        for p in Preset::ALL {
            let d = generate(&small(p, 1)).unwrap();
            assert_eq!(d.features.n_rows(), 1000);
            assert!((d.summary.minority_frac - p.minority_frac()).abs() <= 0.025, "{p:?} {}", d.summary.minority_frac);
            for (tag, rate) in MASKABLE_TAGS.iter().zip(p.missing_rates()) {
                let got = d.summary.missing_rates[*tag];
                assert!((got - rate).abs() <= 0.01, "{tag}: {got} vs {rate}");
            }
            let hw = d.features.schema().column_index("highway_primary").unwrap();
            assert_eq!(d.features.missing_rate(hw), 0.0);
        }
    }

    #[test]
    fn nl_label_count_at_full_scale() {
        let d = generate(&SynthConfig::preset(Preset::Nl, 10_000, 3)).unwrap();
        assert!((700..=900).contains(&d.summary.high_risk), "{}", d.summary.high_risk);
    }

    #[test]
    fn no_masking_gives_dense_osm_columns() {
        let mut cfg = small(Preset::Hr, 2);
        cfg.missing_rates.clear();
        let d = generate(&cfg).unwrap();
        assert_eq!(d.features.missing_count(), 0);
    }

    #[test]
    fn noiseless_labels_follow_latent_threshold() {
        let mut cfg = small(Preset::Sl, 4);
        cfg.label_noise = 0.0;
        let d = generate(&cfg).unwrap();
        let y = d.label_vector();
        let oracle: Vec<u8> = d.latent.iter().map(|&s| u8::from(s >= d.summary.latent_threshold)).collect();
        let s = score(&y, &oracle).unwrap();
        assert_eq!(s.high_risk.f1, 1.0);
        assert_eq!(s.safe.f1, 1.0);
    }

    #[test]
    fn deterministic_bytes() {
        let a = generate(&small(Preset::Gr, 9)).unwrap();
        let b = generate(&small(Preset::Gr, 9)).unwrap();
        let c = generate(&small(Preset::Gr, 10)).unwrap();
        assert_eq!(a.osm_xml, b.osm_xml);
        assert_eq!(a.traffic_csv, b.traffic_csv);
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.osm_xml, c.osm_xml);
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (f1, f2) = (a.write_to(d1.path()).unwrap(), b.write_to(d2.path()).unwrap());
        for (x, y) in [
            (f1.osm, f2.osm),
            (f1.segments, f2.segments),
            (f1.features, f2.features),
            (f1.labels, f2.labels),
            (f1.traffic, f2.traffic),
            (f1.population, f2.population),
        ] {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn infeasible_fraction() {
        let mut cfg = small(Preset::Nl, 0);
        cfg.minority_frac = 0.04;
        assert!(matches!(generate(&cfg), Err(Error::InvalidConfig(_))));
        cfg.minority_frac = 0.05;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn presets_parse() {
        assert_eq!("nl".parse::<Preset>().unwrap(), Preset::Nl);
        assert!("XX".parse::<Preset>().is_err());
    }
}
