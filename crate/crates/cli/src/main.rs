use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, LevelFilter, Log, Metadata, Record};
use roadsafe::pipeline::{self, FeatureSet, PipelineConfig};
use roadsafe::synth::{Preset, SynthConfig};
use roadsafe::Error;

/// Road-segment safety classification pipeline.
#[derive(Parser, Debug)]
#[command(name = "roadsafe", version)]
struct Cli {
    /// JSON pipeline configuration. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `all` or `osm-only`.
    #[arg(long, global = true)]
    feature_set: Option<FeatureSet>,
    #[arg(long, global = true)]
    folds: Option<usize>,
    #[arg(long, global = true)]
    min_dist_m: Option<f64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(flatten)]
    tuning: Tuning,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Tuning {
    #[arg(long, global = true)]
    n_trees: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    max_depth: Option<usize>,
    #[arg(long, global = true)]
    lambda_l2: Option<f64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    min_child_weight: Option<f64>,
    #[arg(long, global = true)]
    smote_k: Option<usize>,
    #[arg(long, global = true)]
    smote_ratio: Option<f64>,
    #[arg(long, global = true)]
    impute_lambda: Option<f64>,
    #[arg(long, global = true)]
    snap_max_m: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct Inputs {
    #[arg(long)]
    osm: Option<PathBuf>,
    #[arg(long)]
    graph_cache: Option<PathBuf>,
    #[arg(long)]
    segments: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    traffic: Option<PathBuf>,
    #[arg(long)]
    population: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse an OSM XML extract into a graph cache.
    IngestOsm {
        /// OSM XML file.
        osm: PathBuf,
    },
    /// Build the feature matrix from OSM, segments, traffic and population.
    Features(Inputs),
    /// Fit a model on all labelled segments.
    Train(Inputs),
    /// Spatially cross-validated evaluation against the stratified baseline.
    Evaluate(Inputs),
    /// Score segments with a saved model.
    Predict(Inputs),
    /// Generate a synthetic dataset.
    Synth {
        /// HR, GR, SL or NL.
        #[arg(long, default_value = "NL")]
        preset: Preset,
        #[arg(long, default_value_t = 10_000)]
        n_segments: usize,
        #[arg(long)]
        label_noise: Option<f64>,
    },
}

struct JsonLogger {
    level: LevelFilter,
}

impl Log for JsonLogger {
    fn enabled(&self, m: &Metadata<'_>) -> bool {
        m.level() <= self.level
    }

    fn log(&self, record: &Record<'_>) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let line = serde_json::json!({
            "ts_ms": ts,
            "level": record.level().as_str(),
            "target": record.target(),
            "msg": record.args().to_string(),
        });
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "{line}");
    }

    fn flush(&self) {}
}

fn init_logging() {
    let level = std::env::var("ROADSAFE_LOG")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(LevelFilter::Info);
    if log::set_boxed_logger(Box::new(JsonLogger { level })).is_ok() {
        log::set_max_level(level);
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingInput { .. } => 1,
        Error::Parse { .. }
        | Error::Csv(_)
        | Error::Json(_)
        | Error::InvalidStar(_)
        | Error::InvalidLabel(_)
        | Error::InvalidCoordinate { .. } => 2,
        Error::SchemaMismatch(_) => 3,
        _ => 4,
    }
}

fn merge<T>(flag: Option<T>, slot: &mut Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(f) = cli.feature_set {
        cfg.feature_set = f;
    }
    if let Some(k) = cli.folds {
        cfg.cv.folds = k;
    }
    if let Some(d) = cli.min_dist_m {
        cfg.cv.min_dist_m = d;
    }
    let t = &cli.tuning;
    if let Some(v) = t.n_trees {
        cfg.gbt.n_trees = v;
    }
    if let Some(v) = t.learning_rate {
        cfg.gbt.learning_rate = v;
    }
    if let Some(v) = t.max_depth {
        cfg.gbt.max_depth = v;
    }
    if let Some(v) = t.lambda_l2 {
        cfg.gbt.lambda_l2 = v;
    }
    if let Some(v) = t.gamma {
        cfg.gbt.gamma = v;
    }
    if let Some(v) = t.min_child_weight {
        cfg.gbt.min_child_weight = v;
    }
    if let Some(v) = t.smote_k {
        cfg.smote.k_neighbors = v;
    }
    if let Some(v) = t.smote_ratio {
        cfg.smote.target_ratio = v;
    }
    if let Some(v) = t.impute_lambda {
        cfg.impute.lambda = v;
    }
    if let Some(v) = t.snap_max_m {
        cfg.extract.snap_max_m = v;
    }
    merge(cli.out.clone(), &mut cfg.paths.out);
    if let Command::Features(i) | Command::Train(i) | Command::Evaluate(i) | Command::Predict(i) = &cli.command {
        let p = &mut cfg.paths;
        merge(i.osm.clone(), &mut p.osm);
        merge(i.graph_cache.clone(), &mut p.graph_cache);
        merge(i.segments.clone(), &mut p.segments);
        merge(i.labels.clone(), &mut p.labels);
        merge(i.traffic.clone(), &mut p.traffic);
        merge(i.population.clone(), &mut p.population);
        merge(i.features.clone(), &mut p.features);
        merge(i.model.clone(), &mut p.model);
    }
    Ok(cfg)
}

fn out_or(cfg: &PipelineConfig, default: &str) -> PathBuf {
    cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth {
            preset,
            n_segments,
            label_noise,
        } => {
            let mut scfg = match &cli.config {
                Some(p) => {
                    let s = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str::<SynthConfig>(&s)?
                }
                None => SynthConfig::preset(*preset, *n_segments, 0),
            };
            if let Some(s) = cli.seed {
                scfg.seed = s;
            }
            if let Some(e) = label_noise {
                scfg.label_noise = *e;
            }
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
            let (files, meta) = pipeline::cmd_synth(&scfg, &out)?;
            info!(
                "synth config_hash={} seed={} segments={} high_risk={} out={}",
                meta.config_hash,
                meta.seed,
                meta.summary.n_segments,
                meta.summary.high_risk,
                show(&out)
            );
            info!("wrote {}", show(&files.features));
            return Ok(());
        }
        Command::IngestOsm { osm } => {
            let cfg = build_config(&cli)?;
            let cache = cfg.paths.out.clone().unwrap_or_else(|| pipeline::sidecar(osm, ".cache.json"));
            let rep = pipeline::cmd_ingest(osm, &cache)?;
            info!(
                "ingest-osm config_hash={} seed={} graph_hash={} nodes={} edges={} ways={} rebuilt={} out={}",
                cfg.config_hash(),
                cfg.seed,
                rep.graph_hash,
                rep.nodes,
                rep.edges,
                rep.ways,
                rep.rebuilt,
                show(&cache)
            );
            return Ok(());
        }
        _ => {}
    }

    let cfg = build_config(&cli)?;
    info!("config_hash={} seed={}", cfg.config_hash(), cfg.seed);
    match &cli.command {
        Command::Features(_) => {
            let out = out_or(&cfg, "features.csv");
            let meta = pipeline::cmd_features(&cfg, &out)?;
            info!(
                "features segments={} unsnapped={} unroutable={} out={}",
                meta.join.segments,
                meta.join.unsnapped,
                meta.join.unroutable,
                show(&out)
            );
        }
        Command::Train(_) => {
            let out = out_or(&cfg, "model.json");
            let rep = pipeline::cmd_train(&cfg, &out)?;
            info!(
                "train rows={} resampled={} out={}",
                rep.n_train,
                rep.n_train_resampled,
                show(&out)
            );
        }
        Command::Evaluate(_) => {
            let out = out_or(&cfg, "evaluation");
            let rep = pipeline::cmd_evaluate(&cfg, &out)?;
            info!(
                "evaluate high_risk_f1={:.4} baseline_high_risk_f1={:.4} safe_f1={:.4} baseline_safe_f1={:.4} out={}",
                rep.model.high_risk.f1,
                rep.baseline.high_risk.f1,
                rep.model.safe.f1,
                rep.baseline.safe.f1,
                show(&out)
            );
            print!("{}", rep.table());
        }
        Command::Predict(_) => {
            let out = out_or(&cfg, "predictions.csv");
            let preds = pipeline::cmd_predict(&cfg, &out)?;
            info!("predict rows={} out={}", preds.len(), show(&out));
        }
        Command::IngestOsm { .. } | Command::Synth { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            error!("{e}");
            ExitCode::from(code)
        }
    }
}
