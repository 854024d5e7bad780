use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::PipelineError;
use crate::gmod::GModConfig;
use crate::hdlc::{HdlcConfig, TrainConfig};
use crate::preprocess::ClaheConfig;
use crate::selector::{AbhcConfig, ScaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// `root/<class-name>/<file>` with PNG or binary PPM/PGM files.
    ImageDir,
    /// Header `id,label,f0,...,f{d-1}`.
    FeatureCsv,
    /// Generated gray blob images, see [`crate::synth::blob_dataset`].
    Blobs,
}

impl DatasetFormat {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "image-dir" => Some(Self::ImageDir),
            "feature-csv" => Some(Self::FeatureCsv),
            "blobs" => Some(Self::Blobs),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::ImageDir => "image-dir",
            Self::FeatureCsv => "feature-csv",
            Self::Blobs => "blobs",
        }
    }
}

/// Full description of a run. Parsed from flat `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dataset_path: PathBuf,
    pub format: DatasetFormat,
    /// (class name, label) pairs.
    pub classes: Vec<(String, u8)>,
    /// Label-1 and label-0 counts for generated blobs.
    pub blobs: (usize, usize),
    pub split: (f64, f64, f64),
    pub split_seed: u64,
    pub seed: u64,
    pub out: PathBuf,
    pub enhance: bool,
    pub augment: bool,
    pub grafr: bool,
    pub select: bool,
    pub clahe: ClaheConfig,
    pub gmod: GModConfig,
    pub smod_dropout: f64,
    pub extract_epochs: usize,
    pub extract_lr: f64,
    pub extract_batch: usize,
    /// 0 selects the default hidden-set size.
    pub grafr_k: usize,
    pub sca: ScaConfig,
    pub abhc: AbhcConfig,
    pub lambda: f64,
    pub hdlc_filters: usize,
    pub hdlc_widths: Vec<usize>,
    pub hdlc_train: TrainConfig,
    pub threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let h = HdlcConfig::new(3);
        Self {
            dataset_path: PathBuf::from("data"),
            format: DatasetFormat::ImageDir,
            classes: vec![("hem".into(), 0), ("all".into(), 1)],
            blobs: (180, 120),
            split: (0.7, 0.15, 0.15),
            split_seed: 0,
            seed: 0,
            out: PathBuf::from("out"),
            enhance: true,
            augment: true,
            grafr: true,
            select: true,
            clahe: ClaheConfig::default(),
            gmod: GModConfig::default(),
            smod_dropout: 0.2,
            extract_epochs: 0,
            extract_lr: 0.01,
            extract_batch: 16,
            grafr_k: 0,
            sca: ScaConfig::default(),
            abhc: AbhcConfig::default(),
            lambda: 0.01,
            hdlc_filters: h.filters,
            hdlc_widths: h.widths,
            hdlc_train: TrainConfig::default(),
            threshold: 0.5,
        }
    }
}

impl PipelineConfig {
    /// Small settings for the generated 32×32 blob dataset.
    pub fn toy() -> Self {
        let mut c = Self { format: DatasetFormat::Blobs, split: (4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0), ..Self::default() };
        c.gmod = GModConfig { height: 32, width: 32, channels: 1, patch: 8, dim: 16, depth: 2, heads: 2, mlp_hidden: 32 };
        c.clahe.tiles = (4, 4);
        c.extract_epochs = 12;
        c.extract_lr = 0.02;
        c.sca = ScaConfig { population: 8, iterations: 15, ..ScaConfig::default() };
        c.abhc = AbhcConfig { iterations: 15, ..AbhcConfig::default() };
        c.hdlc_widths = vec![16, 16, 8, 8, 4, 1];
        c.hdlc_train = TrainConfig { epochs: 40, lr: 0.01, batch: 32, seed: 0 };
        c
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut c = Self::default();
        c.apply(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<(), PipelineError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| PipelineError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for {key}"))
        }
        fn flag(key: &str, v: &str) -> Result<bool, String> {
            match v {
                "on" | "true" | "1" => Ok(true),
                "off" | "false" | "0" => Ok(false),
                _ => Err(format!("bad switch `{v}` for {key}")),
            }
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>, String> {
            v.split(',').map(|s| num(key, s.trim())).collect()
        }
        match key {
            "dataset.path" => self.dataset_path = PathBuf::from(v),
            "dataset.format" => self.format = DatasetFormat::parse(v).ok_or_else(|| format!("unknown format `{v}`"))?,
            "dataset.classes" => {
                self.classes = v
                    .split(',')
                    .map(|p| {
                        let (name, label) = p.split_once(':').ok_or_else(|| format!("class entry `{p}` needs name:label"))?;
                        Ok((name.trim().to_string(), num(key, label.trim())?))
                    })
                    .collect::<Result<_, String>>()?
            }
            "dataset.blobs" => {
                let l = list(key, v)?;
                if l.len() != 2 {
                    return Err("dataset.blobs takes `positives, negatives`".into());
                }
                self.blobs = (l[0], l[1]);
            }
            "split.train" => self.split.0 = num(key, v)?,
            "split.val" => self.split.1 = num(key, v)?,
            "split.test" => self.split.2 = num(key, v)?,
            "split.seed" => self.split_seed = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "stages.enhance" => self.enhance = flag(key, v)?,
            "stages.augment" => self.augment = flag(key, v)?,
            "stages.grafr" => self.grafr = flag(key, v)?,
            "stages.select" => self.select = flag(key, v)?,
            "image.height" => self.gmod.height = num(key, v)?,
            "image.width" => self.gmod.width = num(key, v)?,
            "image.channels" => self.gmod.channels = num(key, v)?,
            "clahe.clip" => self.clahe.clip_limit = num(key, v)?,
            "clahe.tiles" => {
                let l = list(key, v)?;
                if l.len() != 2 {
                    return Err("clahe.tiles takes `rows, cols`".into());
                }
                self.clahe.tiles = (l[0], l[1]);
            }
            "gmod.patch" => self.gmod.patch = num(key, v)?,
            "gmod.dim" => self.gmod.dim = num(key, v)?,
            "gmod.depth" => self.gmod.depth = num(key, v)?,
            "gmod.heads" => self.gmod.heads = num(key, v)?,
            "gmod.mlp" => self.gmod.mlp_hidden = num(key, v)?,
            "smod.dropout" => self.smod_dropout = num(key, v)?,
            "extract.epochs" => self.extract_epochs = num(key, v)?,
            "extract.lr" => self.extract_lr = num(key, v)?,
            "extract.batch" => self.extract_batch = num(key, v)?,
            "grafr.k" => self.grafr_k = num(key, v)?,
            "select.pop" => self.sca.population = num(key, v)?,
            "select.iters" => self.sca.iterations = num(key, v)?,
            "select.alpha" => self.sca.alpha = num(key, v)?,
            "select.lambda" => self.lambda = num(key, v)?,
            "select.abhc_iters" => self.abhc.iterations = num(key, v)?,
            "select.abhc_p" => self.abhc.p = num(key, v)?,
            "select.beta_min" => self.abhc.beta_min = num(key, v)?,
            "select.beta_max" => self.abhc.beta_max = num(key, v)?,
            "hdlc.filters" => self.hdlc_filters = num(key, v)?,
            "hdlc.widths" => self.hdlc_widths = list(key, v)?,
            "hdlc.epochs" => self.hdlc_train.epochs = num(key, v)?,
            "hdlc.lr" => self.hdlc_train.lr = num(key, v)?,
            "hdlc.batch" => self.hdlc_train.batch = num(key, v)?,
            "hdlc.threshold" => self.threshold = num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let (a, b, c) = self.split;
        if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions must be positive and sum to 1, got {a}/{b}/{c}"));
        }
        if self.classes.len() < 2 {
            return bad("at least two classes are required".into());
        }
        let labels: Vec<u8> = self.classes.iter().map(|c| c.1).collect();
        if !labels.contains(&0) || !labels.contains(&1) || labels.iter().any(|&l| l > 1) {
            return bad(format!("class labels must cover 0 and 1 only, got {labels:?}"));
        }
        if self.format == DatasetFormat::Blobs && (self.blobs.0 == 0 || self.blobs.1 == 0) {
            return bad("blob counts must be positive".into());
        }
        if self.format != DatasetFormat::FeatureCsv {
            self.gmod.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if !(0.0..1.0).contains(&self.smod_dropout) {
            return bad(format!("smod.dropout {} outside [0, 1)", self.smod_dropout));
        }
        if self.extract_batch < 2 {
            return bad("extract.batch must be at least 2 for batch normalization".into());
        }
        if self.select {
            self.sca.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
            self.abhc.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
            if self.lambda.is_nan() || self.lambda < 0.0 {
                return bad(format!("select.lambda must be non-negative, got {}", self.lambda));
            }
        }
        if self.hdlc_widths.len() != crate::hdlc::DENSE_LAYERS || self.hdlc_widths.last() != Some(&1) {
            return bad(format!("hdlc.widths needs 6 entries ending in 1, got {:?}", self.hdlc_widths));
        }
        if self.hdlc_filters == 0 || self.hdlc_train.batch == 0 {
            return bad("hdlc.filters and hdlc.batch must be positive".into());
        }
        Ok(())
    }

    /// Canonical `key = value` text; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let onoff = |b: bool| if b { "on" } else { "off" };
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        let classes = self.classes.iter().map(|(n, l)| format!("{n}:{l}")).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("dataset.path", self.dataset_path.display().to_string());
        kv("dataset.format", self.format.name().into());
        kv("dataset.classes", classes);
        kv("dataset.blobs", format!("{}, {}", self.blobs.0, self.blobs.1));
        kv("split.train", format!("{:?}", self.split.0));
        kv("split.val", format!("{:?}", self.split.1));
        kv("split.test", format!("{:?}", self.split.2));
        kv("split.seed", self.split_seed.to_string());
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("stages.enhance", onoff(self.enhance).into());
        kv("stages.augment", onoff(self.augment).into());
        kv("stages.grafr", onoff(self.grafr).into());
        kv("stages.select", onoff(self.select).into());
        kv("image.height", self.gmod.height.to_string());
        kv("image.width", self.gmod.width.to_string());
        kv("image.channels", self.gmod.channels.to_string());
        kv("clahe.clip", format!("{:?}", self.clahe.clip_limit));
        kv("clahe.tiles", format!("{}, {}", self.clahe.tiles.0, self.clahe.tiles.1));
        kv("gmod.patch", self.gmod.patch.to_string());
        kv("gmod.dim", self.gmod.dim.to_string());
        kv("gmod.depth", self.gmod.depth.to_string());
        kv("gmod.heads", self.gmod.heads.to_string());
        kv("gmod.mlp", self.gmod.mlp_hidden.to_string());
        kv("smod.dropout", format!("{:?}", self.smod_dropout));
        kv("extract.epochs", self.extract_epochs.to_string());
        kv("extract.lr", format!("{:?}", self.extract_lr));
        kv("extract.batch", self.extract_batch.to_string());
        kv("grafr.k", self.grafr_k.to_string());
        kv("select.pop", self.sca.population.to_string());
        kv("select.iters", self.sca.iterations.to_string());
        kv("select.alpha", format!("{:?}", self.sca.alpha));
        kv("select.lambda", format!("{:?}", self.lambda));
        kv("select.abhc_iters", self.abhc.iterations.to_string());
        kv("select.abhc_p", format!("{:?}", self.abhc.p));
        kv("select.beta_min", format!("{:?}", self.abhc.beta_min));
        kv("select.beta_max", format!("{:?}", self.abhc.beta_max));
        kv("hdlc.filters", self.hdlc_filters.to_string());
        kv("hdlc.widths", join(&self.hdlc_widths));
        kv("hdlc.epochs", self.hdlc_train.epochs.to_string());
        kv("hdlc.lr", format!("{:?}", self.hdlc_train.lr));
        kv("hdlc.batch", self.hdlc_train.batch.to_string());
        kv("hdlc.threshold", format!("{:?}", self.threshold));
        s
    }

    /// FNV-1a of the canonical text, as 16 hex digits.
    pub fn hash(&self) -> String {
        format!("{:016x}", crate::rng::fnv1a64(&self.to_text()))
    }

    /// Label for a class directory name.
    pub fn label_of(&self, class: &str) -> Option<u8> {
        self.classes.iter().find(|(n, _)| n == class).map(|c| c.1)
    }

    pub fn hdlc_config(&self, input_dim: usize) -> HdlcConfig {
        HdlcConfig { input_dim, filters: self.hdlc_filters, kernel: 3, widths: self.hdlc_widths.clone() }
    }
}
