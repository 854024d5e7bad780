use rand::seq::SliceRandom;

use super::config::PipelineConfig;
use super::ingest::{Dataset, Samples, Splits};
use super::{AtStage, PipelineError};
use crate::features::FeatureMatrix;
use crate::gmod::{gmod_forward, GModParams};
use crate::grafr::{default_k, grafr_apply, reconstruct_queries, FeatureGraph, GrafrOutput, HiddenSet};
use crate::hdlc::{self, HdlcParams, TrainConfig};
use crate::nn::{register, sgd_step, ModelError, Parameters};
use crate::preprocess::{augment_balance, clahe, resize, sharpen, Image};
use crate::selector::{select_features, MaskFitness, ScaConfig, TraceRow};
use crate::smod::{smod_forward, token_grid, SModConfig, SModParams};
use crate::tensor::{take_tensor, ContainerError, Tape, Tensor};
use crate::rng;


/// One value per split.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSplit<T> {
    pub train: T,
    pub val: T,
    pub test: T,
}

impl<T> PerSplit<T> {
    pub fn named(&self) -> [(&'static str, &T); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&'static str, &T) -> Result<U, E>) -> Result<PerSplit<U>, E> {
        Ok(PerSplit { train: f("train", &self.train)?, val: f("val", &self.val)?, test: f("test", &self.test)? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    pub images: Vec<Image>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    pub features: FeatureMatrix,
}

impl Labeled {
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            features: self.features.select_rows(idx),
        }
    }
}

/// Splits an image dataset by index.
pub fn split_images(ds: &Dataset, splits: &Splits) -> Result<PerSplit<ImageSet>, PipelineError> {
    let Samples::Images(images) = &ds.samples else {
        return Err(PipelineError::Config("dataset holds feature vectors, not images".into()));
    };
    let take = |idx: &[usize]| ImageSet {
        ids: idx.iter().map(|&i| ds.ids[i].clone()).collect(),
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        images: idx.iter().map(|&i| images[i].clone()).collect(),
    };
    Ok(PerSplit { train: take(&splits.train), val: take(&splits.val), test: take(&splits.test) })
}

pub fn split_features(ds: &Dataset, splits: &Splits) -> Result<PerSplit<Labeled>, PipelineError> {
    let Samples::Features(fm) = &ds.samples else {
        return Err(PipelineError::Config("dataset holds images, not feature vectors".into()));
    };
    let all = Labeled { ids: ds.ids.clone(), labels: ds.labels.clone(), features: fm.clone() };
    Ok(PerSplit { train: all.select(&splits.train), val: all.select(&splits.val), test: all.select(&splits.test) })
}

fn to_channels(img: &Image, channels: usize) -> Result<Image, PipelineError> {
    match (img.channels(), channels) {
        (a, b) if a == b => Ok(img.clone()),
        (3, 1) => {
            let px = img
                .pixels()
                .chunks(3)
                .map(|p| (0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])).round() as u8)
                .collect();
            Image::new(img.height(), img.width(), 1, px).at("preprocess")
        }
        (1, 3) => Image::new(img.height(), img.width(), 3, img.pixels().iter().flat_map(|&p| [p; 3]).collect()).at("preprocess"),
        (a, b) => Err(PipelineError::Stage { stage: "preprocess", cause: format!("cannot convert {a} channels to {b}") }),
    }
}

/// Channel conversion, optional CLAHE + sharpening, resize to the model input.
pub fn preprocess_image(config: &PipelineConfig, img: &Image) -> Result<Image, PipelineError> {
    let mut x = to_channels(img, config.gmod.channels)?;
    if config.enhance {
        x = sharpen(&clahe(&x, &config.clahe).at("preprocess")?);
    }
    if (x.height(), x.width()) != (config.gmod.height, config.gmod.width) {
        x = resize(&x, config.gmod.height, config.gmod.width).at("preprocess")?;
    }
    Ok(x)
}

pub fn preprocess_split(config: &PipelineConfig, set: &ImageSet) -> Result<ImageSet, PipelineError> {
    let images = set.images.iter().map(|im| preprocess_image(config, im)).collect::<Result<_, _>>()?;
    Ok(ImageSet { ids: set.ids.clone(), labels: set.labels.clone(), images })
}

/// Class balancing of the training split; identity when augmentation is off.
pub fn balance(config: &PipelineConfig, train: ImageSet) -> Result<ImageSet, PipelineError> {
    if !config.augment {
        return Ok(train);
    }
    let n = train.ids.len();
    let data = train.images.into_iter().zip(train.labels).collect();
    let out = augment_balance(data, &mut rng::stream(config.seed, "augment", 0)).at("augment")?;
    let mut ids = train.ids;
    ids.extend((0..out.len() - n).map(|k| format!("aug{k:05}")));
    let (images, labels) = out.into_iter().unzip();
    Ok(ImageSet { ids, labels, images })
}

#[derive(Debug, Clone, PartialEq)]
struct Head {
    weight: Tensor,
    bias: Tensor,
}

impl Parameters for Head {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

/// GMod and SMod coupled through the token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub gmod: GModParams,
    pub smod: SModParams,
}

impl Extractor {
    pub fn init(config: &PipelineConfig) -> Result<Self, PipelineError> {
        let gmod = GModParams::init(config.gmod, &mut rng::stream(config.seed, "gmod.init", 0)).at("extract")?;
        let smod_cfg = SModConfig { dropout: config.smod_dropout, ..SModConfig::new(config.gmod.dim) };
        let smod = SModParams::init(smod_cfg, &mut rng::stream(config.seed, "smod.init", 0)).at("extract")?;
        Ok(Self { gmod, smod })
    }

    pub fn global_len(&self) -> usize {
        self.gmod.config.dim
    }

    pub fn spatial_len(&self) -> usize {
        let side = (self.gmod.config.tokens() as f64).sqrt().round() as usize;
        self.smod.config.output_len(side, side)
    }

    /// Short supervised warm-up of both branches through a linear probe on
    /// the joined features. Batches of one sample are skipped.
    pub fn pretrain(&mut self, config: &PipelineConfig, train: &ImageSet) -> Result<Vec<f64>, PipelineError> {
        let d = self.global_len() + self.spatial_len();
        let mut head = Head {
            weight: Tensor::randn(&[d, 1], (1.0 / d as f64).sqrt(), &mut rng::stream(config.seed, "extract.head", 0)),
            bias: Tensor::zeros(&[1]),
        };
        let tensors: Vec<Tensor> = train.images.iter().map(Image::to_tensor).collect();
        let mut order: Vec<usize> = (0..tensors.len()).collect();
        let mut trace = Vec::with_capacity(config.extract_epochs);
        for epoch in 0..config.extract_epochs {
            order.shuffle(&mut rng::stream(config.seed, "extract.shuffle", epoch as u64));
            let (mut total, mut batches) = (0.0, 0);
            for (bi, chunk) in order.chunks(config.extract_batch).enumerate() {
                if chunk.len() < 2 {
                    continue;
                }
                let images: Vec<Tensor> = chunk.iter().map(|&i| tensors[i].clone()).collect();
                let targets: Vec<f64> = chunk.iter().map(|&i| f64::from(train.labels[i])).collect();
                let mut drop = rng::stream2(config.seed, "extract.dropout", epoch as u64, bi as u64);
                total += self.pretrain_step(&mut head, &images, &targets, config.extract_lr, &mut drop).at("extract")?;
                batches += 1;
            }
            let mean = if batches > 0 { total / batches as f64 } else { f64::NAN };
            log::debug!("extractor epoch {epoch}: loss {mean:.5}");
            trace.push(mean);
        }
        Ok(trace)
    }

    /// Inference-mode (global, spatial) features, one row per image.
    pub fn features(&mut self, images: &[Image], batch: usize) -> Result<(FeatureMatrix, FeatureMatrix), PipelineError> {
        let (dg, ds) = (self.global_len(), self.spatial_len());
        let mut global = Vec::with_capacity(images.len() * dg);
        let mut spatial = Vec::with_capacity(images.len() * ds);
        for chunk in images.chunks(batch.max(1)) {
            let tensors: Vec<Tensor> = chunk.iter().map(Image::to_tensor).collect();
            let (g, s) = self.forward_eval(&tensors).at("extract")?;
            global.extend(g);
            spatial.extend(s);
        }
        let g = FeatureMatrix::new(images.len(), dg, global).at("extract")?;
        let s = FeatureMatrix::new(images.len(), ds, spatial).at("extract")?;
        Ok((g, s))
    }

    fn pretrain_step<R: rand::Rng + ?Sized>(&mut self, head: &mut Head, images: &[Tensor], targets: &[f64], lr: f64, rng: &mut R) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let gv = self.gmod.bind(&mut tape, true);
        let sv = self.smod.bind(&mut tape, true);
        let hv = register(head, &mut tape);
        let out = gmod_forward(&mut tape, &gv, &self.gmod.config, images)?;
        let grid = token_grid(&mut tape, out.tokens)?;
        let spatial = smod_forward(&mut tape, &sv, &mut self.smod, grid, true, rng)?;
        let joined = tape.concat(&[out.global, spatial], 1)?;
        let logits = tape.matmul(joined, hv[0])?;
        let logits = tape.add(logits, hv[1])?;
        let loss = tape.bce_with_logits(logits, targets)?;
        let value = tape.value(loss).item()?;
        tape.backward(loss)?;
        sgd_step(&mut self.gmod, &tape, &gv.all, lr);
        sgd_step(&mut self.smod, &tape, &sv.all, lr);
        sgd_step(head, &tape, &hv, lr);
        Ok(value)
    }

    fn forward_eval(&mut self, images: &[Tensor]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let mut tape = Tape::new();
        let gv = self.gmod.bind(&mut tape, false);
        let sv = self.smod.bind(&mut tape, false);
        let out = gmod_forward(&mut tape, &gv, &self.gmod.config, images)?;
        let grid = token_grid(&mut tape, out.tokens)?;
        // dropout is inactive in eval mode, so this stream is never drawn from
        let mut unused = rng::stream(0, "extract.eval", 0);
        let s = smod_forward(&mut tape, &sv, &mut self.smod, grid, false, &mut unused)?;
        Ok((tape.value(out.global).data().to_vec(), tape.value(s).data().to_vec()))
    }

    pub fn records(&self) -> Vec<(String, Tensor)> {
        let mut r = self.gmod.records("gmod");
        r.extend(self.smod.records("smod"));
        r.extend(self.smod.state_records("smod"));
        r
    }

    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<(), ContainerError> {
        self.gmod.load_records("gmod", records)?;
        self.smod.load_records("smod", records)?;
        self.smod.load_state_records("smod", records)
    }
}

/// Extracted features of one split, kept as the two branch outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    pub global: FeatureMatrix,
    pub spatial: FeatureMatrix,
}

impl Extracted {
    pub fn joined(&self) -> Result<Labeled, PipelineError> {
        let features = self.global.concat_columns(&self.spatial).at("extract")?;
        Ok(Labeled { ids: self.ids.clone(), labels: self.labels.clone(), features })
    }
}

pub fn extract_split(extractor: &mut Extractor, set: &ImageSet, batch: usize) -> Result<Extracted, PipelineError> {
    let (global, spatial) = extractor.features(&set.images, batch)?;
    Ok(Extracted { ids: set.ids.clone(), labels: set.labels.clone(), global, spatial })
}

/// Graph reconstruction of the training split. `global` may have zero columns.
pub fn graph_train(config: &PipelineConfig, ids: &[String], labels: &[u8], global: &FeatureMatrix, spatial: &FeatureMatrix) -> Result<(Labeled, GrafrOutput), PipelineError> {
    let k = (config.grafr_k > 0).then_some(config.grafr_k);
    let out = grafr_apply(global, spatial, k).at("graph")?;
    let l = Labeled { ids: ids.to_vec(), labels: labels.to_vec(), features: out.features.clone() };
    Ok((l, out))
}

/// Reconstructs held-out rows against the training graph, one anchor at a
/// time, so held-out rows never enter each other's or the training rows'
/// reconstructions. The hidden set lists the queries closest to the graph.
pub fn graph_heldout(config: &PipelineConfig, graph: &FeatureGraph, l: &Labeled, spatial: &FeatureMatrix) -> Result<(Labeled, GrafrOutput), PipelineError> {
    let joined = l.features.concat_columns(spatial).at("graph")?;
    let (features, mean_similarity) = reconstruct_queries(graph, &joined).at("graph")?;
    let n = features.rows();
    let k = if config.grafr_k > 0 { config.grafr_k.min(n) } else { default_k(n) };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mean_similarity[b].total_cmp(&mean_similarity[a]).then(a.cmp(&b)));
    order.truncate(k);
    let hidden = HiddenSet { scores: order.iter().map(|&i| mean_similarity[i]).collect(), indices: order };
    let out = Labeled { ids: l.ids.clone(), labels: l.labels.clone(), features: features.clone() };
    Ok((out, GrafrOutput { graph: graph.clone(), features, hidden, mean_similarity }))
}

/// Graph stage over all splits from (features, spatial) pairs, where the
/// features hold the global part. Returns the reconstructed rows and the
/// per-split diagnostics.
pub fn graph_stage(config: &PipelineConfig, joined: &PerSplit<(Labeled, FeatureMatrix)>) -> Result<PerSplit<(Labeled, GrafrOutput)>, PipelineError> {
    let (l, s) = &joined.train;
    let train = graph_train(config, &l.ids, &l.labels, &l.features, s)?;
    let graph = train.1.graph.clone();
    let val = graph_heldout(config, &graph, &joined.val.0, &joined.val.1)?;
    let test = graph_heldout(config, &graph, &joined.test.0, &joined.test.1)?;
    Ok(PerSplit { train, val, test })
}

/// Column standardization with training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: &FeatureMatrix) -> Self {
        let (mean, std) = x.column_stats();
        Self { mean, std }
    }

    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix, PipelineError> {
        x.standardize(&self.mean, &self.std).at("scale")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectOutcome {
    pub mask: Vec<bool>,
    pub trace: Vec<TraceRow>,
    pub sca_fitness: Option<f64>,
    pub refined_fitness: Option<f64>,
}

/// Wrapper selection on standardized train/val features; with selection off
/// every feature is kept.
pub fn select_stage(config: &PipelineConfig, train: &Labeled, val: &Labeled) -> Result<SelectOutcome, PipelineError> {
    let d = train.features.cols();
    if !config.select {
        return Ok(SelectOutcome { mask: vec![true; d], trace: Vec::new(), sca_fitness: None, refined_fitness: None });
    }
    let scaler = Scaler::fit(&train.features);
    let yt = train.labels.iter().map(|&y| y == 1).collect();
    let yv = val.labels.iter().map(|&y| y == 1).collect();
    let mut objective =
        MaskFitness::new(scaler.apply(&train.features)?, yt, scaler.apply(&val.features)?, yv, config.lambda).at("select")?;
    let sca = ScaConfig { seed: rng::derive_seed(config.seed, "select", 0), ..config.sca };
    let sel = select_features(&mut objective, &sca, &config.abhc).at("select")?;
    log::info!(
        "selection kept {} of {d} features after {} fitness evaluations",
        sel.refined.selected(),
        objective.evaluations()
    );
    Ok(SelectOutcome {
        mask: sel.refined.mask.clone(),
        trace: sel.sca.trace,
        sca_fitness: sel.sca.best.fitness,
        refined_fitness: sel.refined.fitness,
    })
}

/// Scaler, feature mask and HDLC weights, persisted together.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub scaler: Scaler,
    pub mask: Vec<bool>,
    pub hdlc: HdlcParams,
}

impl Classifier {
    pub fn fit(config: &PipelineConfig, train: &Labeled, mask: &[bool]) -> Result<(Self, Vec<f64>), PipelineError> {
        let scaler = Scaler::fit(&train.features);
        let x = scaler.apply(&train.features)?.select_columns(mask).at("train")?;
        let mut hdlc = HdlcParams::init(config.hdlc_config(x.cols()), &mut rng::stream(config.seed, "hdlc.init", 0)).at("train")?;
        let cfg = TrainConfig { seed: rng::derive_seed(config.seed, "hdlc", 0), ..config.hdlc_train };
        let trace = hdlc::train(&mut hdlc, &x, &train.labels, &cfg).at("train")?;
        Ok((Self { scaler, mask: mask.to_vec(), hdlc }, trace))
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>, PipelineError> {
        let z = self.scaler.apply(x)?.select_columns(&self.mask).at("eval")?;
        self.hdlc.predict(&z).at("eval")
    }

    pub fn records(&self) -> Vec<(String, Tensor)> {
        let d = self.mask.len();
        let mask = self.mask.iter().map(|&m| f64::from(u8::from(m))).collect();
        let mut r = vec![
            ("input.mean".to_string(), Tensor::new(vec![d], self.scaler.mean.clone()).expect("length d")),
            ("input.std".to_string(), Tensor::new(vec![d], self.scaler.std.clone()).expect("length d")),
            ("input.mask".to_string(), Tensor::new(vec![d], mask).expect("length d")),
        ];
        r.extend(self.hdlc.records("hdlc"));
        r
    }

    /// Rebuilds the classifier; layer sizes are read off the stored shapes.
    pub fn from_records(records: &[(String, Tensor)]) -> Result<Self, ContainerError> {
        let find = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| ContainerError::Missing(name.to_string()))
        };
        let mask_t = find("input.mask")?;
        let d = mask_t.len();
        let mean = take_tensor(records, "input.mean", &[d])?.into_data();
        let std = take_tensor(records, "input.std", &[d])?.into_data();
        let mask: Vec<bool> = mask_t.data().iter().map(|&m| m != 0.0).collect();
        let kernel = find("hdlc.conv.kernel")?.shape().to_vec();
        if kernel.len() != 3 {
            return Err(ContainerError::Missing("hdlc.conv.kernel with 3 axes".into()));
        }
        let widths = (0..hdlc::DENSE_LAYERS)
            .map(|i| find(&format!("hdlc.dense{i}.bias")).map(|t| t.len()))
            .collect::<Result<Vec<_>, _>>()?;
        let input_dim = mask.iter().filter(|&&m| m).count();
        let config = hdlc::HdlcConfig { input_dim, filters: kernel[0], kernel: kernel[2], widths };
        let mut hdlc = HdlcParams::init(config, &mut rng::stream(0, "hdlc.load", 0))
            .map_err(|e| ContainerError::Missing(format!("consistent classifier layout ({e})")))?;
        hdlc.load_records("hdlc", records)?;
        Ok(Self { scaler: Scaler { mean, std }, mask, hdlc })
    }
}
