use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ctcn_core::features::FeatureMatrix;
use ctcn_core::grafr::write_diagnostics;
use ctcn_core::nn::save_records;
use ctcn_core::pipeline::{
    self, balance, evaluate, extract_split, graph_stage, ingest, load_classifier, preprocess_split, read_feature_csv,
    read_mask, select_stage, split_images, stratified_split, write_feature_csv, write_mask, Classifier, Extractor,
    Labeled, PerSplit, PipelineConfig,
};
use ctcn_core::selector::write_trace;
use ctcn_core::synth;

#[derive(Parser, Debug)]
#[command(name = "ctcn", version, about = "Coupled transformer/convolution leukocyte classifier")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// `key = value` configuration file, applied on top of the preset
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root random seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Starting values before the config file is applied
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Extra `key=value` overrides, applied last
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Log more (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Default,
    Toy,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Enhance, resize and balance the image splits and save them as PNG
    Preprocess,
    /// Train the extractor and write per-split feature CSVs
    Extract,
    /// Graph reconstruction of per-split feature CSVs
    Graph {
        #[arg(long)]
        features: PathBuf,
        /// Also write `grafr_<split>.csv` (node_index,mean_similarity,selected)
        #[arg(long)]
        diagnostics: bool,
    },
    /// Wrapper feature selection on train/val feature CSVs
    Select {
        #[arg(long)]
        features: PathBuf,
        #[command(flatten)]
        knobs: SelectKnobs,
    },
    /// Train the classifier on `train.csv`
    Train {
        #[arg(long)]
        features: PathBuf,
        /// Feature mask (`feature_index,selected`); all features when absent
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Test metrics for a saved classifier
    Eval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run every enabled stage end to end
    Pipeline,
    /// Summarize a run directory
    Report,
    /// Write a generated blob image dataset as `<dir>/<class>/<n>.png`
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 150)]
        positives: usize,
        #[arg(long, default_value_t = 150)]
        negatives: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
}

#[derive(Args, Debug)]
struct SelectKnobs {
    #[arg(long)]
    pop: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    abhc_iters: Option<usize>,
    #[arg(long)]
    abhc_p: Option<f64>,
    #[arg(long)]
    beta_min: Option<f64>,
    #[arg(long)]
    beta_max: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
}

impl SelectKnobs {
    fn apply(&self, c: &mut PipelineConfig) {
        let s = &mut c.sca;
        let a = &mut c.abhc;
        self.pop.inspect(|&v| s.population = v);
        self.iters.inspect(|&v| s.iterations = v);
        self.alpha.inspect(|&v| s.alpha = v);
        self.abhc_iters.inspect(|&v| a.iterations = v);
        self.abhc_p.inspect(|&v| a.p = v);
        self.beta_min.inspect(|&v| a.beta_min = v);
        self.beta_max.inspect(|&v| a.beta_max = v);
        self.lambda.inspect(|&v| c.lambda = v);
    }
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut c = match g.preset {
        Preset::Default => PipelineConfig::default(),
        Preset::Toy => PipelineConfig::toy(),
    };
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        c.apply(&text).with_context(|| format!("in {}", path.display()))?;
    }
    for o in &g.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
        c.set(k.trim(), v.trim()).map_err(anyhow::Error::msg)?;
    }
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(o) = &g.out {
        c.out.clone_from(o);
    }
    c.validate()?;
    Ok(c)
}

fn read_split(dir: &Path, name: &str) -> Result<Labeled> {
    let (ids, labels, features) = read_feature_csv(&dir.join(format!("{name}.csv")))?;
    Ok(Labeled { ids, labels, features })
}

fn read_splits(dir: &Path) -> Result<PerSplit<Labeled>> {
    Ok(PerSplit { train: read_split(dir, "train")?, val: read_split(dir, "val")?, test: read_split(dir, "test")? })
}

fn prepared_images(c: &PipelineConfig) -> Result<PerSplit<pipeline::ImageSet>> {
    let ds = ingest(c)?;
    let splits = stratified_split(&ds.labels, c.split, c.split_seed)?;
    let raw = split_images(&ds, &splits)?;
    let pre = raw.try_map(|_, s| preprocess_split(c, s))?;
    let train = balance(c, pre.train)?;
    Ok(PerSplit { train, val: pre.val, test: pre.test })
}

fn run(cli: Cli) -> Result<()> {
    let c = load_config(&cli.global)?;
    let out = &c.out.clone();
    match cli.command {
        Command::Preprocess => {
            let images = prepared_images(&c)?;
            let mut index = String::from("split,id,label,file\n");
            for (name, set) in images.named() {
                let dir = out.join("preprocessed").join(name);
                std::fs::create_dir_all(&dir)?;
                for (i, (img, label)) in set.images.iter().zip(&set.labels).enumerate() {
                    let file = format!("{name}/{i:05}.png");
                    img.save_png(&dir.join(format!("{i:05}.png")))?;
                    index.push_str(&format!("{name},{},{label},{file}\n", set.ids[i]));
                }
                println!("{name}: {} images", set.images.len());
            }
            std::fs::write(out.join("preprocessed").join("index.csv"), index)?;
        }
        Command::Extract => {
            let images = prepared_images(&c)?;
            let mut ext = Extractor::init(&c)?;
            ext.pretrain(&c, &images.train)?;
            std::fs::create_dir_all(out.join("features"))?;
            save_records(&out.join("extractor.ctcn"), &ext.records())?;
            for (name, set) in images.named() {
                let e = extract_split(&mut ext, set, c.extract_batch)?.joined()?;
                write_feature_csv(&out.join("features").join(format!("{name}.csv")), &e.ids, &e.labels, &e.features)?;
            }
            println!("features: {} global + {} spatial columns", ext.global_len(), ext.spatial_len());
        }
        Command::Graph { features, diagnostics } => {
            let feats = read_splits(&features)?;
            let dir = out.join("graph");
            std::fs::create_dir_all(&dir)?;
            let joined = feats.try_map(|_, l| {
                let empty = FeatureMatrix::new(l.features.rows(), 0, Vec::new())?;
                Ok::<_, anyhow::Error>((l.clone(), empty))
            })?;
            for (name, (rec, diag)) in graph_stage(&c, &joined)?.named() {
                write_feature_csv(&dir.join(format!("{name}.csv")), &rec.ids, &rec.labels, &rec.features)?;
                if diagnostics {
                    write_diagnostics(&out.join(format!("grafr_{name}.csv")), diag)?;
                }
                println!("{name}: {} rows, hidden set {:?}", rec.ids.len(), diag.hidden.indices);
            }
        }
        Command::Select { features, knobs } => {
            let (train, val) = (read_split(&features, "train")?, read_split(&features, "val")?);
            let mut c = PipelineConfig { select: true, ..c };
            knobs.apply(&mut c);
            c.validate()?;
            let sel = select_stage(&c, &train, &val)?;
            std::fs::create_dir_all(out)?;
            write_trace(&out.join("fitness_trace.csv"), &sel.trace)?;
            write_mask(&out.join("selected.csv"), &sel.mask)?;
            let k = sel.mask.iter().filter(|&&m| m).count();
            println!("selected {k} of {} features", sel.mask.len());
            if let (Some(a), Some(b)) = (sel.sca_fitness, sel.refined_fitness) {
                println!("fitness {a:.6} after search, {b:.6} after refinement");
            }
        }
        Command::Train { features, mask } => {
            let train = read_split(&features, "train")?;
            let mask = match mask {
                Some(p) => read_mask(&p)?,
                None => vec![true; train.features.cols()],
            };
            if mask.len() != train.features.cols() {
                bail!("mask has {} entries for {} features", mask.len(), train.features.cols());
            }
            let (clf, trace) = Classifier::fit(&c, &train, &mask)?;
            std::fs::create_dir_all(out)?;
            save_records(&out.join("hdlc.ctcn"), &clf.records())?;
            println!("final training loss {:.6}", trace.last().copied().unwrap_or(f64::NAN));
        }
        Command::Eval { features, model } => {
            let test = read_split(&features, "test")?;
            let clf = load_classifier(&model)?;
            std::fs::create_dir_all(out)?;
            let (m, auc, _) = evaluate(&clf, &test, c.threshold, out)?;
            println!("accuracy {:.4}\nprecision {:.4}\nrecall {:.4}\nf1 {:.4}", m.accuracy, m.precision, m.recall, m.f1);
            if let Some(a) = auc {
                println!("auc {a:.4}");
            }
        }
        Command::Pipeline => {
            pipeline::run_pipeline(&c)?;
            print!("{}", pipeline::report(out)?);
        }
        Command::Report => print!("{}", pipeline::report(out)?),
        Command::Synth { dir, positives, negatives, size } => {
            let data = synth::blob_dataset(size, positives, negatives, c.seed);
            for class in synth::BLOB_CLASSES {
                std::fs::create_dir_all(dir.join(class))?;
            }
            for (i, (img, label)) in data.iter().enumerate() {
                img.save_png(&dir.join(synth::BLOB_CLASSES[*label as usize]).join(format!("{i:05}.png")))?;
            }
            println!("wrote {} images to {}", data.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
