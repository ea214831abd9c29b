//! End-to-end orchestration: configuration, cross-validated evaluation,
//! training, prediction and the file-level commands used by the CLI.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::{build_folds, CvConfig, FoldPlan};
use crate::error::{Error, Result};
use crate::features::{
    extract_features, read_traffic, ExtractConfig, FeatureMatrix, FeatureSchema, FeatureSource, JoinReport,
    PopulationRaster,
};
use crate::gbt::{self, GbtConfig, GbtModel};
use crate::impute::{soft_impute, ImputeConfig, ImputeReport};
use crate::metrics::{
    class_distribution, render_table, score, stratified_baseline, BaselineExpectation, ClassReport, TableEntry,
};
use crate::model::{attach_labels, read_labels, read_segments, GeoPoint, RoadSegment, SafetyLabel};
use crate::osm::{self, GraphCache};
use crate::smote::{smote_oversample, SmoteConfig};
use crate::synth::{self, SynthConfig, SynthFiles};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    #[default]
    All,
    OsmOnly,
}

impl FeatureSet {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSet::All => "all",
            FeatureSet::OsmOnly => "osm_only",
        }
    }

    pub fn schema(self) -> FeatureSchema {
        let full = FeatureSchema::road_safety();
        match self {
            FeatureSet::All => full,
            FeatureSet::OsmOnly => full.restrict_to(FeatureSource::Osm),
        }
    }
}

impl FromStr for FeatureSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(FeatureSet::All),
            "osm_only" | "osm-only" => Ok(FeatureSet::OsmOnly),
            _ => Err(Error::InvalidConfig(format!("unknown feature set {s:?}"))),
        }
    }
}

/// Input and output locations. Not part of the config hash.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub osm: Option<PathBuf>,
    pub graph_cache: Option<PathBuf>,
    pub segments: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub traffic: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub feature_set: FeatureSet,
    pub extract: ExtractConfig,
    pub impute: ImputeConfig,
    pub smote: SmoteConfig,
    pub gbt: GbtConfig,
    pub cv: CvConfig,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<()> {
        self.impute.validate()?;
        self.smote.validate()?;
        self.gbt.validate()?;
        if self.cv.folds < 2 {
            return Err(Error::InvalidConfig(format!("folds must be >= 2, got {}", self.cv.folds)));
        }
        if !(self.cv.min_dist_m > 0.0) {
            return Err(Error::InvalidConfig("min_dist_m must be > 0".into()));
        }
        Ok(())
    }

    /// Extra check when features are built from raw inputs: the full
    /// feature set needs a traffic table.
    pub fn validate_extraction(&self) -> Result<()> {
        self.validate()?;
        if self.feature_set == FeatureSet::All && self.paths.traffic.is_none() {
            return Err(Error::InvalidConfig(
                "feature_set=all requires a traffic path".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of every setting except paths.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let json = serde_json::to_vec(&c).expect("config serializes");
        osm::sha256_hex(&json)
    }

    fn required<'a>(&self, p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        p.as_deref().ok_or_else(|| Error::MissingInput {
            path: PathBuf::from(format!("<{what} path not configured>")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeSummary {
    pub iterations: usize,
    pub converged: bool,
    pub rank: usize,
    pub final_delta: f64,
    pub missing_cells: usize,
    pub missing_fraction: f64,
}

impl ImputeSummary {
    fn new(m: &FeatureMatrix, r: &ImputeReport) -> Self {
        let missing = m.missing_count();
        ImputeSummary {
            iterations: r.iterations,
            converged: r.converged,
            rank: r.rank,
            final_delta: r.final_delta,
            missing_cells: missing,
            missing_fraction: missing as f64 / (m.n_rows() * m.n_cols()).max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: usize,
    pub min_dist_m: f64,
    pub feasible: bool,
    pub swaps: usize,
    pub dropped: usize,
    pub achieved_min_dist_m: Vec<Option<f64>>,
    pub test_positive_frac_initial: Vec<f64>,
    pub test_positive_frac_final: Vec<f64>,
    pub policy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRun {
    pub fold: usize,
    pub n_train: usize,
    pub n_train_resampled: usize,
    pub n_test: usize,
    pub smote_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_hash: String,
    pub seed: u64,
    pub feature_set: FeatureSet,
    pub schema_fingerprint: String,
    pub n_segments: usize,
    pub n_columns: usize,
    pub class_distribution: [f64; 2],
    pub imputation: ImputeSummary,
    pub cv: CvSummary,
    pub folds: Vec<FoldRun>,
    pub model: ClassReport,
    pub baseline: ClassReport,
    pub baseline_expected: BaselineExpectation,
}

impl EvaluationReport {
    pub fn table(&self) -> String {
        render_table(&[TableEntry {
            feature_set: self.feature_set.as_str(),
            model: &self.model,
            baseline: &self.baseline,
        }])
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvaluationReport,
    pub plan: FoldPlan,
}

fn check_labels(features: &FeatureMatrix, labels: &[u8]) -> Result<()> {
    if labels.len() != features.n_rows() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.n_rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidInput(format!("label {bad} is not 0/1")));
    }
    Ok(())
}

fn impute_selected(features: &FeatureMatrix, set: FeatureSet, cfg: &ImputeConfig) -> Result<(FeatureMatrix, ImputeSummary)> {
    let selected = features.select(&set.schema())?;
    let (done, rep) = soft_impute(&selected, cfg)?;
    Ok((done, ImputeSummary::new(&selected, &rep)))
}

fn rows_of(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Cross-validated evaluation of the model and the stratified baseline.
/// `labels` and `points` are aligned with the rows of `features`.
pub fn evaluate(
    features: &FeatureMatrix,
    labels: &[u8],
    points: &[GeoPoint],
    cfg: &PipelineConfig,
) -> Result<Evaluation> {
    cfg.validate()?;
    check_labels(features, labels)?;
    let seed = cfg.seed;
    let config_hash = cfg.config_hash();
    info!("evaluate config_hash={config_hash} seed={seed} feature_set={}", cfg.feature_set.as_str());

    let (imputed, imputation) = impute_selected(features, cfg.feature_set, &cfg.impute)?;
    info!(
        "imputation rank={} iterations={} converged={}",
        imputation.rank, imputation.iterations, imputation.converged
    );
    let x = imputed.to_dense()?;
    let plan = build_folds(features.ids(), points, labels, &cfg.cv, seed)?;
    if !plan.feasible() {
        warn!("fold plan dropped {} samples to reach min_dist", plan.n_dropped());
    }

    let row_of: BTreeMap<&str, usize> = features
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let index = |ids: &[String]| -> Vec<usize> { ids.iter().map(|id| row_of[id.as_str()]).collect() };

    let results: Vec<Option<(FoldRun, crate::metrics::Score, crate::metrics::Score)>> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| {
            if fold.test.is_empty() {
                warn!("fold {k} has an empty test set and is skipped");
                return Ok(None);
            }
            let tr = index(&fold.train);
            let te = index(&fold.test);
            let x_tr = rows_of(&x, &tr);
            let y_tr: Vec<u8> = tr.iter().map(|&i| labels[i]).collect();
            let x_te = rows_of(&x, &te);
            let y_te: Vec<u8> = te.iter().map(|&i| labels[i]).collect();

            let smote_cfg = SmoteConfig {
                seed: seed ^ k as u64,
                ..cfg.smote.clone()
            };
            let n_test_before = x_te.nrows();
            let res = smote_oversample(x_tr.view(), &y_tr, &smote_cfg)?;
            assert_eq!(x_te.nrows(), n_test_before, "resampling must not touch the test partition");

            let gbt_cfg = GbtConfig { seed, ..cfg.gbt.clone() };
            let model = gbt::train(res.x.view(), &res.y, &gbt_cfg)?;
            let pred = model.predict(x_te.view())?;
            let model_score = score(&y_te, &pred)?;
            let (base_score, _) =
                stratified_baseline(class_distribution(&y_tr), &y_te, seed ^ k as u64 ^ 0xB45E_0000_0000)?;
            info!(
                "fold {k} train={} resampled={} test={} high_risk_f1={:.4}",
                tr.len(),
                res.y.len(),
                te.len(),
                model_score.high_risk.f1
            );
            Ok(Some((
                FoldRun {
                    fold: k,
                    n_train: tr.len(),
                    n_train_resampled: res.y.len(),
                    n_test: te.len(),
                    smote_k: res.k_used,
                },
                model_score,
                base_score,
            )))
        })
        .collect::<Result<_>>()?;

    let mut folds = Vec::new();
    let mut model_scores = Vec::new();
    let mut base_scores = Vec::new();
    for (run, m, b) in results.into_iter().flatten() {
        folds.push(run);
        model_scores.push(m);
        base_scores.push(b);
    }
    let dist = class_distribution(labels);
    let (_, baseline_expected) = stratified_baseline(dist, labels, seed)?;

    let report = EvaluationReport {
        config_hash,
        seed,
        feature_set: cfg.feature_set,
        schema_fingerprint: imputed.schema().fingerprint(),
        n_segments: features.n_rows(),
        n_columns: imputed.n_cols(),
        class_distribution: dist,
        imputation,
        cv: CvSummary {
            folds: plan.folds.len(),
            min_dist_m: plan.min_dist,
            feasible: plan.feasible(),
            swaps: plan.swaps,
            dropped: plan.n_dropped(),
            achieved_min_dist_m: plan.achieved_min_dist_m.clone(),
            test_positive_frac_initial: plan.test_positive_frac_initial.clone(),
            test_positive_frac_final: plan.test_positive_frac_final.clone(),
            policy: plan.policy.clone(),
        },
        folds,
        model: ClassReport::from_folds(model_scores)?,
        baseline: ClassReport::from_folds(base_scores)?,
        baseline_expected,
    };
    Ok(Evaluation { report, plan })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub seed: u64,
    pub feature_set: FeatureSet,
    pub n_train: usize,
    pub n_train_resampled: usize,
    pub smote_k: usize,
    pub imputation: ImputeSummary,
}

/// Fits a model on all labelled rows: impute, SMOTE, boost.
pub fn train_model(
    features: &FeatureMatrix,
    labels: &[u8],
    cfg: &PipelineConfig,
) -> Result<(GbtModel, FeatureSchema, TrainReport)> {
    cfg.validate()?;
    check_labels(features, labels)?;
    let config_hash = cfg.config_hash();
    info!("train config_hash={config_hash} seed={}", cfg.seed);
    let (imputed, imputation) = impute_selected(features, cfg.feature_set, &cfg.impute)?;
    let x = imputed.to_dense()?;
    let smote_cfg = SmoteConfig {
        seed: cfg.seed,
        ..cfg.smote.clone()
    };
    let res = smote_oversample(x.view(), labels, &smote_cfg)?;
    let gbt_cfg = GbtConfig {
        seed: cfg.seed,
        ..cfg.gbt.clone()
    };
    let mut model = gbt::train(res.x.view(), &res.y, &gbt_cfg)?;
    let schema = imputed.schema().clone();
    model.schema_hash = schema.fingerprint();
    model.config_hash = config_hash.clone();
    let report = TrainReport {
        config_hash,
        seed: cfg.seed,
        feature_set: cfg.feature_set,
        n_train: labels.len(),
        n_train_resampled: res.y.len(),
        smote_k: res.k_used,
        imputation,
    };
    Ok((model, schema, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub p_high_risk: f64,
    pub label: SafetyLabel,
}

/// Scores `features` with a saved model. The matrix is restricted to the
/// model's schema and imputed on its own before prediction.
pub fn predict_segments(
    model: &GbtModel,
    schema: &FeatureSchema,
    features: &FeatureMatrix,
    impute: &ImputeConfig,
) -> Result<Vec<Prediction>> {
    if schema.fingerprint() != model.schema_hash {
        return Err(Error::SchemaMismatch(format!(
            "schema fingerprint {} does not match model {}",
            schema.fingerprint(),
            model.schema_hash
        )));
    }
    let selected = features.select(schema)?;
    let x = if selected.missing_count() == 0 {
        selected.to_dense()?
    } else {
        soft_impute(&selected, impute)?.0.to_dense()?
    };
    let p = model.predict_proba(x.view())?;
    Ok(selected
        .ids()
        .iter()
        .zip(p)
        .map(|(id, p)| Prediction {
            id: id.clone(),
            p_high_risk: p,
            label: if p >= 0.5 { SafetyLabel::HighRisk } else { SafetyLabel::Safe },
        })
        .collect())
}

// File-level commands.

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

/// Path of the JSON sidecar written next to an artifact.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub source_hash: String,
    pub graph_hash: String,
    pub nodes: usize,
    pub edges: usize,
    pub ways: usize,
    pub rebuilt: bool,
}

/// Parses an OSM extract into a graph cache (reused when the source is
/// unchanged).
pub fn cmd_ingest(osm_path: &Path, cache_path: &Path) -> Result<IngestReport> {
    let (graph, ways, rebuilt) = osm::load_or_build(osm_path, cache_path)?;
    let bytes = std::fs::read(cache_path).map_err(|e| Error::io(cache_path, e))?;
    let cache: GraphCache = serde_json::from_slice(&bytes)?;
    Ok(IngestReport {
        source_hash: cache.source_hash,
        graph_hash: graph.content_hash(),
        nodes: graph.node_count(),
        edges: graph.edges().len(),
        ways: ways.len(),
        rebuilt,
    })
}

fn load_segments(cfg: &PipelineConfig) -> Result<Vec<RoadSegment>> {
    let path = cfg.required(&cfg.paths.segments, "segments")?;
    let mut segments = read_segments(open(path)?)?;
    if let Some(lp) = &cfg.paths.labels {
        let labels = read_labels(open(lp)?)?;
        attach_labels(&mut segments, &labels)?;
    }
    Ok(segments)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesMeta {
    pub config_hash: String,
    pub seed: u64,
    pub schema: FeatureSchema,
    pub schema_fingerprint: String,
    pub join: JoinReport,
    pub missing_rate: BTreeMap<String, f64>,
}

/// Extracts the feature matrix from raw inputs and writes it with a
/// `.meta.json` sidecar.
pub fn cmd_features(cfg: &PipelineConfig, out: &Path) -> Result<FeaturesMeta> {
    cfg.validate_extraction()?;
    let osm_path = cfg.required(&cfg.paths.osm, "osm")?;
    let segments = load_segments(cfg)?;
    let cache = cfg
        .paths
        .graph_cache
        .clone()
        .unwrap_or_else(|| sidecar(osm_path, ".cache.json"));
    let (graph, ways, _) = osm::load_or_build(osm_path, &cache)?;
    let raster = match &cfg.paths.population {
        Some(p) => PopulationRaster::read_csv(open(p)?)?,
        None => PopulationRaster::empty(),
    };
    let traffic = match (&cfg.paths.traffic, cfg.feature_set) {
        (Some(p), FeatureSet::All) => Some(read_traffic(open(p)?)?),
        _ => None,
    };
    let (matrix, join) = extract_features(&segments, &graph, &ways, &raster, traffic.as_ref(), &cfg.extract)?;
    if join.unsnapped > 0 || join.unroutable > 0 {
        warn!("{} segments unsnapped, {} unroutable", join.unsnapped, join.unroutable);
    }
    let mut buf = Vec::new();
    matrix.write_csv(&mut buf)?;
    write_file(out, &buf)?;
    let schema = cfg.feature_set.schema();
    let missing_rate = matrix
        .columns()
        .iter()
        .enumerate()
        .map(|(j, c)| (c.name.clone(), matrix.missing_rate(j)))
        .collect();
    let meta = FeaturesMeta {
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        schema_fingerprint: schema.fingerprint(),
        schema,
        join,
        missing_rate,
    };
    write_json(&sidecar(out, ".meta.json"), &meta)?;
    Ok(meta)
}

fn load_features(cfg: &PipelineConfig) -> Result<FeatureMatrix> {
    load_features_as(cfg, &[FeatureSchema::road_safety()])
}

/// Reads the feature CSV with the first schema whose header matches.
fn load_features_as(cfg: &PipelineConfig, schemas: &[FeatureSchema]) -> Result<FeatureMatrix> {
    let path = cfg.required(&cfg.paths.features, "features")?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut last = None;
    for schema in schemas {
        match FeatureMatrix::read_csv(bytes.as_slice(), schema.clone()) {
            Err(e @ Error::SchemaMismatch(_)) => last = Some(e),
            other => return other,
        }
    }
    Err(last.unwrap_or_else(|| Error::SchemaMismatch("no schema to read features with".into())))
}

/// Labelled rows of the feature matrix, with labels and segment midpoints
/// aligned to the returned matrix.
fn labelled(cfg: &PipelineConfig) -> Result<(FeatureMatrix, Vec<u8>, Vec<GeoPoint>)> {
    let features = load_features(cfg)?;
    let segments = load_segments(cfg)?;
    let by_id: BTreeMap<&str, &RoadSegment> = segments.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut keep = Vec::new();
    let mut labels = Vec::new();
    let mut points = Vec::new();
    for (i, id) in features.ids().iter().enumerate() {
        if let Some(seg) = by_id.get(id.as_str()) {
            if let Some(l) = seg.label.or(seg.star.map(crate::model::derive_label)) {
                keep.push(i);
                labels.push(l.encode());
                points.push(seg.midpoint);
            }
        }
    }
    if keep.is_empty() {
        return Err(Error::InvalidInput("no labelled segments match the feature rows".into()));
    }
    if keep.len() < features.n_rows() {
        warn!("{} feature rows have no label and are ignored", features.n_rows() - keep.len());
    }
    Ok((features.subset(&keep), labels, points))
}

/// Writes `report.json`, `report.txt`, `folds.json` and `schema.json` into
/// `out_dir`.
pub fn cmd_evaluate(cfg: &PipelineConfig, out_dir: &Path) -> Result<EvaluationReport> {
    let (features, labels, points) = labelled(cfg)?;
    let ev = evaluate(&features, &labels, &points, cfg)?;
    write_json(&out_dir.join("report.json"), &ev.report)?;
    let txt = format!(
        "config_hash {}\nseed {}\n\n{}",
        ev.report.config_hash,
        ev.report.seed,
        ev.report.table()
    );
    write_file(&out_dir.join("report.txt"), txt.as_bytes())?;
    write_json(&out_dir.join("folds.json"), &FoldsArtifact {
        config_hash: &ev.report.config_hash,
        seed: ev.report.seed,
        plan: &ev.plan,
    })?;
    write_json(&out_dir.join("schema.json"), &SchemaArtifact {
        config_hash: ev.report.config_hash.clone(),
        seed: ev.report.seed,
        schema: cfg.feature_set.schema(),
    })?;
    Ok(ev.report)
}

#[derive(Serialize)]
struct FoldsArtifact<'a> {
    config_hash: &'a str,
    seed: u64,
    plan: &'a FoldPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub schema: FeatureSchema,
}

/// Trains on every labelled row; writes the model JSON plus a
/// `.schema.json` sidecar.
pub fn cmd_train(cfg: &PipelineConfig, out: &Path) -> Result<TrainReport> {
    let (features, labels, _) = labelled(cfg)?;
    let (model, schema, report) = train_model(&features, &labels, cfg)?;
    let mut json = model.to_json()?;
    json.push('\n');
    write_file(out, json.as_bytes())?;
    write_json(
        &sidecar(out, ".schema.json"),
        &SchemaArtifact {
            config_hash: report.config_hash.clone(),
            seed: report.seed,
            schema,
        },
    )?;
    write_json(&sidecar(out, ".train.json"), &report)?;
    Ok(report)
}

/// Loads a model and its schema sidecar.
pub fn load_model(path: &Path) -> Result<(GbtModel, FeatureSchema)> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model = GbtModel::from_json(&s)?;
    let sp = sidecar(path, ".schema.json");
    let ss = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let art: SchemaArtifact = serde_json::from_str(&ss)?;
    Ok((model, art.schema))
}

/// Scores the configured feature matrix with the configured model and
/// writes `id,p_high_risk,label` rows.
pub fn cmd_predict(cfg: &PipelineConfig, out: &Path) -> Result<Vec<Prediction>> {
    cfg.validate()?;
    let model_path = cfg.required(&cfg.paths.model, "model")?;
    let (model, schema) = load_model(model_path)?;
    let features = load_features_as(cfg, &[FeatureSchema::road_safety(), schema.clone()])?;
    info!("predict config_hash={} seed={} model_config_hash={}", cfg.config_hash(), cfg.seed, model.config_hash);
    let preds = predict_segments(&model, &schema, &features, &cfg.impute)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "p_high_risk", "label"])?;
    for p in &preds {
        w.write_record([p.id.as_str(), &p.p_high_risk.to_string(), p.label.as_str()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(out, e.into_error()))?;
    write_file(out, &bytes)?;
    Ok(preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub config_hash: String,
    pub seed: u64,
    pub config: SynthConfig,
    pub summary: synth::SynthSummary,
}

/// Generates a synthetic dataset into `out_dir` with a `synth.json` record.
pub fn cmd_synth(cfg: &SynthConfig, out_dir: &Path) -> Result<(SynthFiles, SynthMeta)> {
    let ds = synth::generate(cfg)?;
    let files = ds.write_to(out_dir)?;
    let json = serde_json::to_vec(cfg)?;
    let meta = SynthMeta {
        config_hash: osm::sha256_hex(&json),
        seed: cfg.seed,
        config: cfg.clone(),
        summary: ds.summary.clone(),
    };
    write_json(&out_dir.join("synth.json"), &meta)?;
    Ok((files, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Preset;

    #[test]
    fn feature_set_parsing() {
        assert_eq!("osm-only".parse::<FeatureSet>().unwrap(), FeatureSet::OsmOnly);
        assert_eq!("osm_only".parse::<FeatureSet>().unwrap(), FeatureSet::OsmOnly);
        assert_eq!("all".parse::<FeatureSet>().unwrap(), FeatureSet::All);
        assert!("traffic".parse::<FeatureSet>().is_err());
        let osm = FeatureSet::OsmOnly.schema();
        assert!(osm.columns().iter().all(|c| !["aadt", "mean_speed", "p85_speed"].contains(&c.name.as_str())));
        assert!(osm.width() < FeatureSet::All.schema().width());
    }

    #[test]
    fn config_validation_and_hash() {
        let mut cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert!(cfg.validate_extraction().is_err());
        cfg.paths.traffic = Some("t.csv".into());
        cfg.validate_extraction().unwrap();

        let h = cfg.config_hash();
        cfg.paths.out = Some("elsewhere".into());
        assert_eq!(cfg.config_hash(), h);
        cfg.seed = 1;
        assert_ne!(cfg.config_hash(), h);

        cfg.cv.folds = 1;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));

        let parsed = PipelineConfig::from_json(r#"{"feature_set":"osm_only","cv":{"folds":3}}"#).unwrap();
        assert_eq!(parsed.feature_set, FeatureSet::OsmOnly);
        assert_eq!(parsed.cv.folds, 3);
        assert_eq!(parsed.cv.min_dist_m, 500.0);
    }

    fn small_cfg() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.cv.folds = 3;
        cfg.gbt.n_trees = 20;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn evaluate_small_dataset() {
        let ds = synth::generate(&SynthConfig::preset(Preset::Nl, 600, 2)).unwrap();
        let y = ds.label_vector();
        let points: Vec<GeoPoint> = {
            let by: BTreeMap<&str, GeoPoint> = ds.segments.iter().map(|s| (s.id.as_str(), s.midpoint)).collect();
            ds.features.ids().iter().map(|id| by[id.as_str()]).collect()
        };
        let cfg = small_cfg();
        let a = evaluate(&ds.features, &y, &points, &cfg).unwrap();
        let b = evaluate(&ds.features, &y, &points, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
        let r = &a.report;
        assert_eq!(r.folds.len(), r.model.per_fold.len());
        let tested: usize = r.folds.iter().map(|f| f.n_test).sum();
        assert_eq!(tested + r.cv.dropped, y.len());
        for f in &r.folds {
            assert!(f.n_train_resampled > f.n_train);
        }
        assert!(r.model.safe.f1 > 0.0 && r.model.high_risk.f1 > 0.0);
        assert_eq!(r.config_hash, cfg.config_hash());

        let osm = evaluate(&ds.features, &y, &points, &PipelineConfig {
            feature_set: FeatureSet::OsmOnly,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(osm.report.n_columns, FeatureSet::OsmOnly.schema().width());
    }

    #[test]
    fn evaluate_rejects_bad_labels() {
        let ds = synth::generate(&SynthConfig::preset(Preset::Nl, 200, 1)).unwrap();
        let pts = vec![GeoPoint::new(45.0, 5.0).unwrap(); ds.features.n_rows()];
        let y = vec![2u8; ds.features.n_rows()];
        assert!(evaluate(&ds.features, &y, &pts, &small_cfg()).is_err());
        assert!(evaluate(&ds.features, &y[1..], &pts, &small_cfg()).is_err());
    }

    #[test]
    fn train_then_predict() {
        let ds = synth::generate(&SynthConfig::preset(Preset::Gr, 400, 5)).unwrap();
        let y = ds.label_vector();
        let cfg = small_cfg();
        let (model, schema, rep) = train_model(&ds.features, &y, &cfg).unwrap();
        assert_eq!(model.schema_hash, schema.fingerprint());
        assert_eq!(model.config_hash, rep.config_hash);
        let preds = predict_segments(&model, &schema, &ds.features, &cfg.impute).unwrap();
        assert_eq!(preds.len(), y.len());
        assert!(preds.iter().all(|p| (0.0..=1.0).contains(&p.p_high_risk)));

        let other = FeatureSet::OsmOnly.schema();
        assert!(matches!(
            predict_segments(&model, &other, &ds.features, &cfg.impute),
            Err(Error::SchemaMismatch(_))
        ));
        let narrow = ds.features.select(&other).unwrap();
        assert!(matches!(
            predict_segments(&model, &schema, &narrow, &cfg.impute),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn commands_round_trip_files() {
        let dir = tempfile::tempdir().unwrap();
        let scfg = SynthConfig::preset(Preset::Sl, 300, 3);
        let (files, meta) = cmd_synth(&scfg, dir.path()).unwrap();
        assert_eq!(meta.summary.n_segments, 300);

        let cache = dir.path().join("graph.json");
        let first = cmd_ingest(&files.osm, &cache).unwrap();
        let second = cmd_ingest(&files.osm, &cache).unwrap();
        assert!(first.rebuilt && !second.rebuilt);
        assert_eq!(first.graph_hash, second.graph_hash);

        let mut cfg = small_cfg();
        cfg.paths = Paths {
            osm: Some(files.osm.clone()),
            graph_cache: Some(cache),
            segments: Some(files.segments.clone()),
            labels: Some(files.labels.clone()),
            traffic: Some(files.traffic.clone()),
            population: Some(files.population.clone()),
            ..Paths::default()
        };
        let feats = dir.path().join("out/features.csv");
        cmd_features(&cfg, &feats).unwrap();
        assert_eq!(
            std::fs::read(&feats).unwrap(),
            std::fs::read(&files.features).unwrap()
        );
        cfg.paths.features = Some(feats);

        let model_path = dir.path().join("out/model.json");
        cmd_train(&cfg, &model_path).unwrap();
        cfg.paths.model = Some(model_path);
        let preds_path = dir.path().join("out/pred.csv");
        let preds = cmd_predict(&cfg, &preds_path).unwrap();
        assert_eq!(preds.len(), 300);

        let missing = PipelineConfig {
            paths: Paths {
                features: Some(dir.path().join("nope.csv")),
                ..cfg.paths.clone()
            },
            ..cfg.clone()
        };
        assert!(matches!(cmd_predict(&missing, &preds_path), Err(Error::MissingInput { .. })));
    }
}
