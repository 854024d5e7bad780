//! Dataset ingestion, stage wiring, persistence and reporting.

mod config;
mod ingest;
mod stages;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

pub use config::{DatasetFormat, PipelineConfig};
pub use ingest::{ingest, read_feature_csv, stratified_split, write_feature_csv, Dataset, Samples, Splits};
pub use stages::{
    balance, extract_split, graph_heldout, graph_stage, graph_train, preprocess_image, preprocess_split, select_stage, split_features, split_images,
    Classifier, Extracted, Extractor, ImageSet, Labeled, PerSplit, Scaler, SelectOutcome,
};

use crate::features::FeatureMatrix;
use crate::grafr::write_diagnostics;
use crate::hdlc::{confusion, metrics, roc_auc, write_metrics_csv, write_roc_csv, ConfusionMatrix, Metrics};
use crate::nn::{load_records, save_records};
use crate::selector::write_trace;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("ingestion error: {0}")]
    Ingest(String),
    #[error("stage {stage} failed: {cause}")]
    Stage { stage: &'static str, cause: String },
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub fn stage(&self) -> &str {
        match self {
            Self::Config(_) => "config",
            Self::Ingest(_) => "ingest",
            Self::Stage { stage, .. } => stage,
            Self::Report(_) => "report",
            Self::Io(_) => "io",
        }
    }

    fn cause(&self) -> String {
        match self {
            Self::Stage { cause, .. } => cause.clone(),
            Self::Config(m) | Self::Ingest(m) | Self::Report(m) => m.clone(),
            Self::Io(e) => e.to_string(),
        }
    }
}

/// Tags any error with the stage it happened in.
pub(crate) trait AtStage<T> {
    fn at(self, stage: &'static str) -> Result<T, PipelineError>;
}

impl<T, E: std::fmt::Display> AtStage<T> for Result<T, E> {
    fn at(self, stage: &'static str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Stage { stage, cause: e.to_string() })
    }
}

pub const FAILED_MARKER: &str = "FAILED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub out: PathBuf,
    pub metrics: Metrics,
    pub auc: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub selected: usize,
    pub total_features: usize,
    /// Wall-clock seconds per stage in execution order.
    pub timings: Vec<(String, f64)>,
}

struct Timer {
    timings: Vec<(String, f64)>,
    start: Instant,
}

impl Timer {
    fn new() -> Self {
        Self { timings: Vec::new(), start: Instant::now() }
    }

    fn lap(&mut self, stage: &str) {
        let s = self.start.elapsed().as_secs_f64();
        log::info!("stage {stage} done in {s:.2}s");
        self.timings.push((stage.to_string(), s));
        self.start = Instant::now();
    }
}

/// Runs every enabled stage and writes the artifacts to `config.out`. On
/// failure a `FAILED` file naming the stage is left next to whatever was
/// already written.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunArtifacts, PipelineError> {
    config.validate()?;
    std::fs::create_dir_all(&config.out)?;
    let marker = config.out.join(FAILED_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker)?;
    }
    let mut timer = Timer::new();
    let result = run_stages(config, &mut timer);
    let manifest = manifest_text(config, &timer.timings, result.as_ref().ok());
    std::fs::write(config.out.join("manifest.txt"), manifest)?;
    if let Err(e) = &result {
        std::fs::write(&marker, format!("{}: {}\n", e.stage(), e.cause()))?;
    }
    result
}

fn run_stages(config: &PipelineConfig, timer: &mut Timer) -> Result<RunArtifacts, PipelineError> {
    let out = &config.out;
    std::fs::write(out.join("config.txt"), config.to_text())?;
    let ds = ingest(config)?;
    let splits = stratified_split(&ds.labels, config.split, config.split_seed)?;
    timer.lap("ingest");

    let joined = match ds.samples {
        Samples::Features(_) => {
            let feats = split_features(&ds, &splits)?;
            feats.try_map(|_, l| {
                let empty = FeatureMatrix::new(l.features.rows(), 0, Vec::new()).expect("empty matrix");
                Ok::<_, PipelineError>((l.clone(), empty))
            })?
        }
        Samples::Images(_) => {
            let raw = split_images(&ds, &splits)?;
            let pre = raw.try_map(|_, s| preprocess_split(config, s))?;
            timer.lap("preprocess");
            let train = balance(config, pre.train)?;
            let (n0, n1) = ingest::count(&train.labels);
            log::info!("training split after balancing: {n0} label 0, {n1} label 1");
            let images = PerSplit { train, val: pre.val, test: pre.test };
            timer.lap("augment");

            let mut ext = Extractor::init(config)?;
            ext.pretrain(config, &images.train)?;
            save_records(&out.join("extractor.ctcn"), &ext.records()).at("extract")?;
            let extracted = images.try_map(|_, s| extract_split(&mut ext, s, config.extract_batch))?;
            timer.lap("extract");
            extracted.try_map(|_, e| {
                let l = Labeled { ids: e.ids.clone(), labels: e.labels.clone(), features: e.global.clone() };
                Ok::<_, PipelineError>((l, e.spatial.clone()))
            })?
        }
    };

    let feats = if config.grafr {
        let g = graph_stage(config, &joined)?;
        for (name, (_, out)) in g.named() {
            write_diagnostics(&config.out.join(format!("grafr_{name}.csv")), out).at("graph")?;
        }
        let g = g.try_map(|_, (l, _)| Ok::<_, PipelineError>(l.clone()))?;
        timer.lap("graph");
        g
    } else {
        joined.try_map(|_, (l, spatial)| {
            let features = l.features.concat_columns(spatial).at("graph")?;
            Ok::<_, PipelineError>(Labeled { ids: l.ids.clone(), labels: l.labels.clone(), features })
        })?
    };

    let sel = select_stage(config, &feats.train, &feats.val)?;
    write_trace(&out.join("fitness_trace.csv"), &sel.trace).at("select")?;
    write_mask(&out.join("selected.csv"), &sel.mask)?;
    if config.select {
        timer.lap("select");
    }

    let (clf, _) = Classifier::fit(config, &feats.train, &sel.mask)?;
    save_records(&out.join("hdlc.ctcn"), &clf.records()).at("train")?;
    timer.lap("train");

    let ev = evaluate(&clf, &feats.test, config.threshold, out)?;
    timer.lap("eval");
    Ok(RunArtifacts {
        out: out.clone(),
        metrics: ev.0,
        auc: ev.1,
        confusion: ev.2,
        selected: sel.mask.iter().filter(|&&m| m).count(),
        total_features: sel.mask.len(),
        timings: timer.timings.clone(),
    })
}

/// Test-split metrics; writes `metrics.csv` and `roc.csv` into `out`.
pub fn evaluate(clf: &Classifier, test: &Labeled, threshold: f64, out: &Path) -> Result<(Metrics, Option<f64>, ConfusionMatrix), PipelineError> {
    let probs = clf.predict(&test.features)?;
    let cm = confusion(&probs, &test.labels, threshold).at("eval")?;
    let m = metrics(&cm).at("eval")?;
    let roc = roc_auc(&probs, &test.labels).ok();
    write_metrics_csv(&out.join("metrics.csv"), &m, roc.as_ref().map(|r| r.auc), &cm).at("eval")?;
    if let Some(r) = &roc {
        write_roc_csv(&out.join("roc.csv"), r).at("eval")?;
    }
    Ok((m, roc.map(|r| r.auc), cm))
}

/// `feature_index,selected`
pub fn write_mask(path: &Path, mask: &[bool]) -> Result<(), PipelineError> {
    let mut s = String::from("feature_index,selected\n");
    for (i, &m) in mask.iter().enumerate() {
        writeln!(s, "{i},{}", u8::from(m)).expect("string write");
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Vec<bool>, PipelineError> {
    let err = |m: String| PipelineError::Report(format!("{}: {m}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut lines = text.lines();
    if lines.next() != Some("feature_index,selected") {
        return Err(err("header must be feature_index,selected".into()));
    }
    lines
        .enumerate()
        .map(|(i, l)| match l.split_once(',') {
            Some((idx, v)) if idx.parse() == Ok(i) && (v == "0" || v == "1") => Ok(v == "1"),
            _ => Err(err(format!("line {}: malformed row `{l}`", i + 2))),
        })
        .collect()
}

pub fn load_classifier(path: &Path) -> Result<Classifier, PipelineError> {
    let records = load_records(path).map_err(|e| PipelineError::Report(format!("{}: {e}", path.display())))?;
    Classifier::from_records(&records).map_err(|e| PipelineError::Report(format!("{}: {e}", path.display())))
}

fn manifest_text(config: &PipelineConfig, timings: &[(String, f64)], run: Option<&RunArtifacts>) -> String {
    let mut s = String::new();
    writeln!(s, "config_hash = {}", config.hash()).expect("string write");
    writeln!(s, "seed = {}", config.seed).expect("string write");
    writeln!(s, "split_seed = {}", config.split_seed).expect("string write");
    writeln!(s, "status = {}", if run.is_some() { "ok" } else { "failed" }).expect("string write");
    if let Some(r) = run {
        writeln!(s, "selected = {} / {}", r.selected, r.total_features).expect("string write");
    }
    for (stage, secs) in timings {
        writeln!(s, "timing.{stage} = {secs:.3}").expect("string write");
    }
    s.push_str("# full configuration (also in config.txt)\n");
    for line in config.to_text().lines() {
        writeln!(s, "#   {line}").expect("string write");
    }
    s
}

/// Human-readable summary of a finished run directory.
pub fn report(out: &Path) -> Result<String, PipelineError> {
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        let why = std::fs::read_to_string(&marker).unwrap_or_default();
        return Err(PipelineError::Report(format!("run failed at {}", why.trim())));
    }
    let metrics_path = out.join("metrics.csv");
    let text = std::fs::read_to_string(&metrics_path)
        .map_err(|e| PipelineError::Report(format!("{}: {e}", metrics_path.display())))?;
    let mut s = String::new();
    for line in text.lines().skip(1) {
        let Some((k, v)) = line.split_once(',') else {
            return Err(PipelineError::Report(format!("malformed metrics row `{line}`")));
        };
        if k.ends_with("_undefined") {
            if v == "1" {
                writeln!(s, "note: {} was undefined and reported as 0", k.trim_end_matches("_undefined")).expect("string write");
            }
            continue;
        }
        if v.contains('.') || v.contains('e') {
            let x: f64 = v.parse().map_err(|_| PipelineError::Report(format!("bad value in `{line}`")))?;
            writeln!(s, "{k} {x:.4}").expect("string write");
        } else {
            writeln!(s, "{k} {v}").expect("string write");
        }
    }
    let mask = read_mask(&out.join("selected.csv"))?;
    writeln!(s, "selected features {} of {}", mask.iter().filter(|&&m| m).count(), mask.len()).expect("string write");
    if let Ok(manifest) = std::fs::read_to_string(out.join("manifest.txt")) {
        for line in manifest.lines().filter(|l| l.starts_with("timing.")) {
            if let Some((k, v)) = line.split_once(" = ") {
                writeln!(s, "time {} {v}s", k.trim_start_matches("timing.")).expect("string write");
            }
        }
    }
    Ok(s)
}
