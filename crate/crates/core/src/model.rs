//! Domain types shared across the pipeline: coordinates, star ratings,
//! binary safety labels and rated road segments.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used for every great-circle distance in the crate.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// A WGS84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() || lat.abs() > 90.0 || lon.abs() > 180.0 {
            return Err(Error::InvalidCoordinate { lat, lon });
        }
        Ok(GeoPoint { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Point displaced by the given metres north and east on a local
    /// spherical approximation. Used by fixtures and the synthetic generator.
    pub fn offset_m(&self, north_m: f64, east_m: f64) -> Result<Self> {
        let dlat = (north_m / EARTH_RADIUS_M).to_degrees();
        let dlon = (east_m / (EARTH_RADIUS_M * self.lat.to_radians().cos())).to_degrees();
        GeoPoint::new(self.lat + dlat, self.lon + dlon)
    }
}

/// Great-circle distance in metres on a spherical Earth.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// iRAP star rating, 1 (most dangerous) to 5 (safest).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct StarRating(u8);

impl StarRating {
    pub fn new(value: i64) -> Result<Self> {
        if (1..=5).contains(&value) {
            Ok(StarRating(value as u8))
        } else {
            Err(Error::InvalidStar(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for StarRating {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        StarRating::new(v as i64)
    }
}

impl From<StarRating> for u8 {
    fn from(s: StarRating) -> u8 {
        s.0
    }
}

/// Binary road-safety class. `HighRisk` is the positive class (encoded 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyLabel {
    Safe,
    HighRisk,
}

impl SafetyLabel {
    pub const ALL: [SafetyLabel; 2] = [SafetyLabel::Safe, SafetyLabel::HighRisk];

    pub fn encode(self) -> u8 {
        match self {
            SafetyLabel::Safe => 0,
            SafetyLabel::HighRisk => 1,
        }
    }

    pub fn decode(v: u8) -> Option<Self> {
        match v {
            0 => Some(SafetyLabel::Safe),
            1 => Some(SafetyLabel::HighRisk),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SafetyLabel::Safe => "safe",
            SafetyLabel::HighRisk => "high_risk",
        }
    }
}

impl fmt::Display for SafetyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SafetyLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "safe" => Ok(SafetyLabel::Safe),
            "high_risk" => Ok(SafetyLabel::HighRisk),
            other => Err(Error::InvalidLabel(other.to_string())),
        }
    }
}

/// Three stars and above are safe; one or two stars are high-risk.
pub fn derive_label(star: StarRating) -> SafetyLabel {
    if star.value() >= 3 {
        SafetyLabel::Safe
    } else {
        SafetyLabel::HighRisk
    }
}

/// A rated 100 m piece of road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: String,
    pub midpoint: GeoPoint,
    pub star: Option<StarRating>,
    pub label: Option<SafetyLabel>,
}

impl RoadSegment {
    pub fn new(
        id: impl Into<String>,
        midpoint: GeoPoint,
        star: Option<StarRating>,
        label: Option<SafetyLabel>,
    ) -> Result<Self> {
        let id = id.into();
        let label = match (star, label) {
            (Some(s), Some(l)) if derive_label(s) != l => {
                return Err(Error::LabelMismatch {
                    id,
                    star: s.value(),
                    label: l.to_string(),
                })
            }
            (Some(s), None) => Some(derive_label(s)),
            (_, l) => l,
        };
        Ok(RoadSegment {
            id,
            midpoint,
            star,
            label,
        })
    }
}

#[derive(Debug, Deserialize)]
struct SegmentRecord {
    id: String,
    lat: f64,
    lon: f64,
    star: Option<String>,
}

/// Reads the `id,lat,lon,star` segments table. Star may be blank.
pub fn read_segments<R: Read>(reader: R) -> Result<Vec<RoadSegment>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<SegmentRecord>().enumerate() {
        let rec = rec?;
        let star = match rec.star.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(s) => Some(StarRating::new(s.parse::<i64>().map_err(|_| Error::Parse {
                line: i + 2,
                message: format!("bad star value {s:?}"),
            })?)?),
        };
        out.push(RoadSegment::new(rec.id, GeoPoint::new(rec.lat, rec.lon)?, star, None)?);
    }
    Ok(out)
}

pub fn write_segments<W: Write>(writer: W, segments: &[RoadSegment]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "lat", "lon", "star"])?;
    for s in segments {
        let star = s.star.map(|s| s.value().to_string()).unwrap_or_default();
        w.write_record([
            s.id.as_str(),
            &s.midpoint.lat().to_string(),
            &s.midpoint.lon().to_string(),
            &star,
        ])?;
    }
    w.flush().map_err(|e| Error::io("<segments>", e))?;
    Ok(())
}

/// Reads the `id,label` table.
pub fn read_labels<R: Read>(reader: R) -> Result<BTreeMap<String, SafetyLabel>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let label: SafetyLabel = rec.get(1).unwrap_or_default().parse()?;
        out.insert(id, label);
    }
    Ok(out)
}

pub fn write_labels<'a, W: Write>(
    writer: W,
    labels: impl IntoIterator<Item = (&'a str, SafetyLabel)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "label"])?;
    for (id, l) in labels {
        w.write_record([id, l.as_str()])?;
    }
    w.flush().map_err(|e| Error::io("<labels>", e))?;
    Ok(())
}

/// Attaches labels to segments, checking consistency with any star rating.
pub fn attach_labels(
    segments: &mut [RoadSegment],
    labels: &BTreeMap<String, SafetyLabel>,
) -> Result<()> {
    for seg in segments.iter_mut() {
        if let Some(&l) = labels.get(&seg.id) {
            if let Some(s) = seg.star {
                if derive_label(s) != l {
                    return Err(Error::LabelMismatch {
                        id: seg.id.clone(),
                        star: s.value(),
                        label: l.to_string(),
                    });
                }
            }
            seg.label = Some(l);
        }
    }
    Ok(())
}
