use std::path::Path;

use rand::seq::SliceRandom;

use super::config::{DatasetFormat, PipelineConfig};
use super::PipelineError;
use crate::features::FeatureMatrix;
use crate::preprocess::Image;
use crate::{rng, synth};

#[derive(Debug, Clone)]
pub enum Samples {
    Images(Vec<Image>),
    Features(FeatureMatrix),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    pub samples: Samples,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        count(&self.labels)
    }
}

pub(crate) fn count(labels: &[u8]) -> (usize, usize) {
    let ones = labels.iter().filter(|&&l| l == 1).count();
    (labels.len() - ones, ones)
}

/// Indices into a [`Dataset`], fixed once per run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn ingest(config: &PipelineConfig) -> Result<Dataset, PipelineError> {
    let ds = match config.format {
        DatasetFormat::ImageDir => read_image_dir(&config.dataset_path, config)?,
        DatasetFormat::FeatureCsv => {
            let (ids, labels, fm) = read_feature_csv(&config.dataset_path)?;
            Dataset { ids, labels, samples: Samples::Features(fm) }
        }
        DatasetFormat::Blobs => {
            let (p, n) = config.blobs;
            let data = synth::blob_dataset(config.gmod.height, p, n, config.seed);
            let ids = (0..data.len()).map(|i| format!("blob{i:05}")).collect();
            let (images, labels) = data.into_iter().unzip();
            Dataset { ids, labels, samples: Samples::Images(images) }
        }
    };
    let (n0, n1) = ds.class_counts();
    if n0 == 0 || n1 == 0 {
        return Err(PipelineError::Ingest(format!("both classes need samples, got {n0} label-0 and {n1} label-1")));
    }
    log::info!("ingested {} samples ({n0} label 0, {n1} label 1)", ds.len());
    Ok(ds)
}

fn read_image_dir(root: &Path, config: &PipelineConfig) -> Result<Dataset, PipelineError> {
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut images = Vec::new();
    for (class, label) in &config.classes {
        let dir = root.join(class);
        let entries = std::fs::read_dir(&dir)
            .map_err(|e| PipelineError::Ingest(format!("class directory {}: {e}", dir.display())))?;
        let mut files: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
                matches!(ext.as_deref(), Some("png" | "ppm" | "pgm"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(PipelineError::Ingest(format!("class `{class}` has no images in {}", dir.display())));
        }
        for f in files {
            let img = Image::load(&f).map_err(|e| PipelineError::Ingest(format!("{}: {e}", f.display())))?;
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            ids.push(format!("{class}/{stem}"));
            labels.push(*label);
            images.push(img);
        }
    }
    Ok(Dataset { ids, labels, samples: Samples::Images(images) })
}

/// Per class: shuffle with a class-keyed stream, then cut by rounded
/// fractions. Each part keeps ascending index order.
pub fn stratified_split(labels: &[u8], fractions: (f64, f64, f64), seed: u64) -> Result<Splits, PipelineError> {
    let mut s = Splits { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng::stream(seed, "split", u64::from(class)));
        let n = idx.len();
        let n_train = ((n as f64 * fractions.0).round() as usize).min(n);
        let n_val = ((n as f64 * fractions.1).round() as usize).min(n - n_train);
        s.train.extend_from_slice(&idx[..n_train]);
        s.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        s.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    for part in [&mut s.train, &mut s.val, &mut s.test] {
        part.sort_unstable();
    }
    for (name, part) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        let (n0, n1) = count(&part.iter().map(|&i| labels[i]).collect::<Vec<_>>());
        if n0 == 0 || n1 == 0 {
            return Err(PipelineError::Ingest(format!("{name} split lacks a class ({n0} label 0, {n1} label 1)")));
        }
        log::info!("{name} split: {n0} label 0, {n1} label 1");
    }
    Ok(s)
}

/// Reads `id,label,f0,...,f{d-1}`.
pub fn read_feature_csv(path: &Path) -> Result<(Vec<String>, Vec<u8>, FeatureMatrix), PipelineError> {
    let err = |m: String| PipelineError::Ingest(format!("{}: {m}", path.display()));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| err(e.to_string()))?;
    let header = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    let d = header.len().checked_sub(2).filter(|&d| d > 0).ok_or_else(|| err("header needs id,label,f0,...".into()))?;
    let ok = header.get(0) == Some("id")
        && header.get(1) == Some("label")
        && (0..d).all(|j| header.get(j + 2) == Some(format!("f{j}").as_str()));
    if !ok {
        return Err(err(format!("header must be id,label,f0,...,f{}", d - 1)));
    }
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| err(format!("line {line}: {e}")))?;
        if rec.len() != d + 2 {
            return Err(err(format!("line {line}: expected {} fields, got {}", d + 2, rec.len())));
        }
        ids.push(rec[0].to_string());
        let label = match &rec[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("line {line}: label `{other}` is not 0 or 1"))),
        };
        labels.push(label);
        for j in 0..d {
            let v: f64 = rec[j + 2].parse().map_err(|_| err(format!("line {line}: bad value `{}` in f{j}", &rec[j + 2])))?;
            data.push(v);
        }
    }
    let fm = FeatureMatrix::new(labels.len(), d, data).map_err(|e| err(e.to_string()))?;
    Ok((ids, labels, fm))
}

pub fn write_feature_csv(path: &Path, ids: &[String], labels: &[u8], features: &FeatureMatrix) -> Result<(), PipelineError> {
    let io = |e: csv::Error| PipelineError::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..features.cols()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(io)?;
    for (i, row) in features.iter_rows().enumerate() {
        let mut rec = vec![ids[i].clone(), labels[i].to_string()];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
