//! Feature schema and the segment × feature matrix with missing cells.

mod extract;
mod isochrone;

use std::collections::HashSet;
use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::osm::sha256_hex;

pub use extract::{
    extract_features, read_traffic, smoothness_level, ExtractConfig, JoinReport, TrafficRecord,
};
pub use isochrone::{
    compute_isochrone, convex_hull, polygon_area_m2, population_in, reachable, PopulationRaster,
    Isochrone,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum FeatureKind {
    Binary,
    Integer,
    Real,
    OneHot { members: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Osm,
    Traffic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
    pub source: FeatureSource,
}

/// Kind of one flattened matrix column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Binary,
    Integer,
    Real,
    /// Member of the one-hot group at this feature index.
    OneHot { feature: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    pub source: FeatureSource,
}

/// Ordered list of features. One-hot features expand to one column per
/// member, named `<feature>_<member>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<Feature>,
}

pub const HIGHWAY_CLASSES: [&str; 10] = [
    "motorway",
    "trunk",
    "primary",
    "secondary",
    "tertiary",
    "unclassified",
    "residential",
    "service",
    "track",
    "other",
];

pub const SURFACES: [&str; 7] = [
    "asphalt",
    "concrete",
    "paving_stones",
    "gravel",
    "dirt",
    "ground",
    "other",
];

impl FeatureSchema {
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        let schema = FeatureSchema { features };
        schema.validate()?;
        Ok(schema)
    }

    /// The twelve OSM features followed by the four traffic features.
    pub fn road_safety() -> Self {
        use FeatureKind::*;
        use FeatureSource::*;
        let f = |name: &str, kind, source| Feature {
            name: name.to_string(),
            kind,
            source,
        };
        let members = |m: &[&str]| m.iter().map(|s| s.to_string()).collect();
        FeatureSchema {
            features: vec![
                f("highway", OneHot { members: members(&HIGHWAY_CLASSES) }, Osm),
                f("oneway", Binary, Osm),
                f("maxspeed", Integer, Osm),
                f("surface", OneHot { members: members(&SURFACES) }, Osm),
                f("smoothness", Integer, Osm),
                f("lit", Binary, Osm),
                f("bridge", Binary, Osm),
                f("lanes", Integer, Osm),
                f("nodes", Integer, Osm),
                f("iso_area", Real, Osm),
                f("reach_factor", Real, Osm),
                f("totpop", Real, Osm),
                f("direction", Integer, Traffic),
                f("aadt", Integer, Traffic),
                f("mean_speed", Integer, Traffic),
                f("p85_speed", Integer, Traffic),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for f in &self.features {
            if let FeatureKind::OneHot { members } = &f.kind {
                if !members.iter().any(|m| m == "other") {
                    return Err(Error::InvalidInput(format!(
                        "one-hot feature {} lacks an \"other\" member",
                        f.name
                    )));
                }
            }
        }
        for c in self.columns() {
            if !seen.insert(c.name.clone()) {
                return Err(Error::InvalidInput(format!("duplicate column name {}", c.name)));
            }
        }
        Ok(())
    }

    pub fn columns(&self) -> Vec<Column> {
        let mut out = Vec::new();
        for (fi, f) in self.features.iter().enumerate() {
            match &f.kind {
                FeatureKind::OneHot { members } => {
                    for m in members {
                        out.push(Column {
                            name: format!("{}_{}", f.name, m),
                            kind: ColumnKind::OneHot { feature: fi },
                            source: f.source,
                        });
                    }
                }
                k => out.push(Column {
                    name: f.name.clone(),
                    kind: match k {
                        FeatureKind::Binary => ColumnKind::Binary,
                        FeatureKind::Integer => ColumnKind::Integer,
                        _ => ColumnKind::Real,
                    },
                    source: f.source,
                }),
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.features
            .iter()
            .map(|f| match &f.kind {
                FeatureKind::OneHot { members } => members.len(),
                _ => 1,
            })
            .sum()
    }

    /// Column offset of the first column of feature `name`.
    pub fn offset_of(&self, name: &str) -> Option<usize> {
        let mut off = 0;
        for f in &self.features {
            if f.name == name {
                return Some(off);
            }
            off += match &f.kind {
                FeatureKind::OneHot { members } => members.len(),
                _ => 1,
            };
        }
        None
    }

    pub fn column_index(&self, column: &str) -> Option<usize> {
        self.columns().iter().position(|c| c.name == column)
    }

    pub fn restrict_to(&self, source: FeatureSource) -> FeatureSchema {
        FeatureSchema {
            features: self
                .features
                .iter()
                .filter(|f| f.source == source)
                .cloned()
                .collect(),
        }
    }

    /// SHA-256 of the schema JSON; models record it to refuse mismatched input.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("schema serializes"))
    }
}

/// Rows are segments (sorted by id), columns follow the schema.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    schema: FeatureSchema,
    columns: Vec<Column>,
    ids: Vec<String>,
    rows: Vec<Vec<Option<f64>>>,
}

impl FeatureMatrix {
    pub fn new(schema: FeatureSchema, ids: Vec<String>, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        schema.validate()?;
        let columns = schema.columns();
        if ids.len() != rows.len() {
            return Err(Error::InvalidInput("id count differs from row count".into()));
        }
        for (id, r) in ids.iter().zip(&rows) {
            if r.len() != columns.len() {
                return Err(Error::SchemaMismatch(format!(
                    "row {id} has {} cells, schema has {}",
                    r.len(),
                    columns.len()
                )));
            }
            for (c, v) in columns.iter().zip(r) {
                match (c.kind, v) {
                    (_, Some(x)) if x.is_nan() => {
                        return Err(Error::InvalidInput(format!("NaN in row {id}, column {}", c.name)))
                    }
                    (ColumnKind::Binary, Some(x)) if *x != 0.0 && *x != 1.0 => {
                        return Err(Error::InvalidInput(format!(
                            "binary column {} holds {x} in row {id}",
                            c.name
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(FeatureMatrix {
            schema,
            columns,
            ids,
            rows,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.rows[row][col]
    }

    pub fn missing_count(&self) -> usize {
        self.rows.iter().flatten().filter(|v| v.is_none()).count()
    }

    /// Fraction of rows missing the given column.
    pub fn missing_rate(&self, col: usize) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r[col].is_none()).count() as f64 / self.rows.len() as f64
    }

    /// Copy restricted to the features of `schema`, which must be a subset
    /// of this matrix's features.
    pub fn select(&self, schema: &FeatureSchema) -> Result<FeatureMatrix> {
        let mut picks = Vec::new();
        for f in &schema.features {
            let own = self
                .schema
                .features
                .iter()
                .find(|g| g.name == f.name)
                .filter(|g| *g == f)
                .ok_or_else(|| Error::SchemaMismatch(format!("feature {} not present", f.name)))?;
            let off = self.schema.offset_of(&own.name).expect("feature exists");
            let w = match &own.kind {
                FeatureKind::OneHot { members } => members.len(),
                _ => 1,
            };
            picks.extend(off..off + w);
        }
        let rows = self
            .rows
            .iter()
            .map(|r| picks.iter().map(|&c| r[c]).collect())
            .collect();
        FeatureMatrix::new(schema.clone(), self.ids.clone(), rows)
    }

    /// Rows in the given order of ids.
    pub fn subset(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            schema: self.schema.clone(),
            columns: self.columns.clone(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Dense copy; fails if any cell is missing.
    pub fn to_dense(&self) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.n_rows(), self.n_cols()));
        for (i, r) in self.rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                out[[i, j]] = v.ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "missing cell in row {}, column {}",
                        self.ids[i], self.columns[j].name
                    ))
                })?;
            }
        }
        Ok(out)
    }

    pub fn from_dense(schema: FeatureSchema, ids: Vec<String>, data: &Array2<f64>) -> Result<Self> {
        let rows = data
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| Some(v)).collect())
            .collect();
        FeatureMatrix::new(schema, ids, rows)
    }

    /// CSV with an `id` column followed by schema columns; missing cells are
    /// empty strings.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for (id, r) in self.ids.iter().zip(&self.rows) {
            let mut rec = vec![id.clone()];
            rec.extend(r.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<features>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, schema: FeatureSchema) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let columns = schema.columns();
        let expected: Vec<&str> = std::iter::once("id")
            .chain(columns.iter().map(|c| c.name.as_str()))
            .collect();
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(Error::SchemaMismatch(
                "feature CSV header does not match schema".into(),
            ));
        }
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            ids.push(rec.get(0).unwrap_or_default().to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|cell| {
                    let cell = cell.trim();
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>().map(Some).map_err(|_| Error::Parse {
                            line: i + 2,
                            message: format!("bad number {cell:?}"),
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        FeatureMatrix::new(schema, ids, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_shape() {
        let s = FeatureSchema::road_safety();
        s.validate().unwrap();
        assert_eq!(s.features.len(), 16);
        assert_eq!(s.width(), 10 + 1 + 1 + 7 + 1 + 1 + 1 + 1 + 1 + 1 + 1 + 1 + 4);
        assert_eq!(s.columns().len(), s.width());
        assert_eq!(s.offset_of("oneway"), Some(10));
        let osm = s.restrict_to(FeatureSource::Osm);
        assert_eq!(osm.features.len(), 12);
        assert!(osm.columns().iter().all(|c| c.source == FeatureSource::Osm));
        assert_ne!(osm.fingerprint(), s.fingerprint());
    }

    #[test]
    fn schema_rejects_duplicates_and_missing_other() {
        let f = |n: &str| Feature {
            name: n.into(),
            kind: FeatureKind::Real,
            source: FeatureSource::Osm,
        };
        assert!(FeatureSchema::new(vec![f("a"), f("a")]).is_err());
        let oh = Feature {
            name: "x".into(),
            kind: FeatureKind::OneHot {
                members: vec!["p".into()],
            },
            source: FeatureSource::Osm,
        };
        assert!(FeatureSchema::new(vec![oh]).is_err());
    }

    #[test]
    fn csv_roundtrip_keeps_missing() {
        let schema = FeatureSchema::new(vec![
            Feature {
                name: "lit".into(),
                kind: FeatureKind::Binary,
                source: FeatureSource::Osm,
            },
            Feature {
                name: "aadt".into(),
                kind: FeatureKind::Integer,
                source: FeatureSource::Traffic,
            },
        ])
        .unwrap();
        let m = FeatureMatrix::new(
            schema.clone(),
            vec!["a".into(), "b".into()],
            vec![vec![Some(1.0), None], vec![None, Some(1234.0)]],
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "id,lit,aadt\na,1,\nb,,1234\n");
        assert_eq!(FeatureMatrix::read_csv(buf.as_slice(), schema.clone()).unwrap(), m);
        assert_eq!(m.missing_rate(0), 0.5);
        let sel = m.select(&schema.restrict_to(FeatureSource::Osm)).unwrap();
        assert_eq!(sel.n_cols(), 1);
    }

    #[test]
    fn binary_cells_checked() {
        let schema = FeatureSchema::new(vec![Feature {
            name: "lit".into(),
            kind: FeatureKind::Binary,
            source: FeatureSource::Osm,
        }])
        .unwrap();
        assert!(FeatureMatrix::new(schema, vec!["a".into()], vec![vec![Some(0.5)]]).is_err());
    }
}
