//! Conv1d + dense classifier over feature vectors, and its evaluation metrics.

mod metrics;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::features::FeatureMatrix;
use crate::nn::{register, sgd_step, ModelError, Parameters, VarCursor};
use crate::rng;
use crate::tensor::{Activation, Tape, Tensor, TensorError, Var};

pub use metrics::{
    confusion, metrics, roc_auc, write_metrics_csv, write_roc_csv, ConfusionMatrix, Metrics, MetricsError, Roc,
    RocPoint,
};

pub const DENSE_LAYERS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct HdlcConfig {
    pub input_dim: usize,
    pub filters: usize,
    pub kernel: usize,
    /// Six dense widths; the last must be 1.
    pub widths: Vec<usize>,
}

impl HdlcConfig {
    pub fn new(input_dim: usize) -> Self {
        Self { input_dim, filters: 128, kernel: 3, widths: vec![512, 256, 128, 64, 32, 1] }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim < self.kernel {
            return Err(TensorError::Dimension {
                op: "hdlc",
                msg: format!("{} features do not fit a length-{} window", self.input_dim, self.kernel),
            }
            .into());
        }
        if self.filters == 0 || self.kernel.is_multiple_of(2) {
            return Err(ModelError::Config(format!("need filters > 0 and an odd window, got {self:?}")));
        }
        if self.widths.len() != DENSE_LAYERS || self.widths.contains(&0) || self.widths[DENSE_LAYERS - 1] != 1 {
            return Err(ModelError::Config(format!(
                "need {DENSE_LAYERS} positive dense widths ending in 1, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdlcParams {
    pub config: HdlcConfig,
    /// `[filters, 1, kernel]`
    pub conv_kernel: Tensor,
    pub conv_bias: Tensor,
    /// `(weight [in, out], bias [out])` per dense layer.
    pub dense: Vec<(Tensor, Tensor)>,
}

impl HdlcParams {
    pub fn init<R: Rng + ?Sized>(config: HdlcConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let k = config.kernel;
        let conv_kernel = Tensor::randn(&[config.filters, 1, k], (2.0 / k as f64).sqrt(), rng);
        let mut fan_in = config.filters * config.input_dim;
        let mut dense = Vec::with_capacity(DENSE_LAYERS);
        for (i, &w) in config.widths.iter().enumerate() {
            let std = if i + 1 == DENSE_LAYERS { (1.0 / fan_in as f64).sqrt() } else { (2.0 / fan_in as f64).sqrt() };
            dense.push((Tensor::randn(&[fan_in, w], std, rng), Tensor::zeros(&[w])));
            fan_in = w;
        }
        Ok(Self { conv_bias: Tensor::zeros(&[config.filters]), config, conv_kernel, dense })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HdlcVars {
        let vars = if trainable {
            register(self, tape)
        } else {
            let mut v = Vec::new();
            self.visit(&mut |_, t| v.push(tape.constant(t.clone())));
            v
        };
        let mut cur = VarCursor::new(&vars);
        let conv_kernel = cur.next();
        let conv_bias = cur.next();
        let dense = (0..self.dense.len()).map(|_| (cur.next(), cur.next())).collect();
        HdlcVars { all: vars.clone(), conv_kernel, conv_bias, dense }
    }

    /// Probabilities for every row of `x`.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let input = tape.constant(matrix_tensor(x)?);
        let logits = hdlc_forward(&mut tape, &vars, input)?;
        let p = tape.activation(logits, Activation::Sigmoid);
        Ok(tape.value(p).data().to_vec())
    }
}

impl Parameters for HdlcParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("conv.kernel", &self.conv_kernel);
        f("conv.bias", &self.conv_bias);
        for (i, (w, b)) in self.dense.iter().enumerate() {
            f(&format!("dense{i}.weight"), w);
            f(&format!("dense{i}.bias"), b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("conv.kernel", &mut self.conv_kernel);
        f("conv.bias", &mut self.conv_bias);
        for (i, (w, b)) in self.dense.iter_mut().enumerate() {
            f(&format!("dense{i}.weight"), w);
            f(&format!("dense{i}.bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct HdlcVars {
    pub all: Vec<Var>,
    pub conv_kernel: Var,
    pub conv_bias: Var,
    pub dense: Vec<(Var, Var)>,
}

fn matrix_tensor(x: &FeatureMatrix) -> Result<Tensor, TensorError> {
    Tensor::new(vec![x.rows(), x.cols()], x.data().to_vec())
}

/// `[b, d]` features to `[b, 1]` logits: conv1d + ReLU, flatten, dense
/// layers with ReLU between them. Apply a sigmoid for probabilities.
pub fn hdlc_forward(tape: &mut Tape, vars: &HdlcVars, input: Var) -> Result<Var, TensorError> {
    let s = tape.shape(input).to_vec();
    let k = tape.shape(vars.conv_kernel)[2];
    if s.len() != 2 || s[1] < k {
        return Err(TensorError::Dimension { op: "hdlc_forward", msg: format!("expected [b, d >= {k}], got {s:?}") });
    }
    let x = tape.reshape(input, &[s[0], 1, s[1]])?;
    let x = tape.conv1d(x, vars.conv_kernel, Some(vars.conv_bias))?;
    let x = tape.relu(x);
    let flat = tape.value(x).len() / s[0];
    let mut h = tape.reshape(x, &[s[0], flat])?;
    for (i, &(w, b)) in vars.dense.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add(h, b)?;
        if i + 1 < vars.dense.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 1e-3, batch: 32, seed: 0 }
    }
}

/// Mini-batch gradient descent on mean binary cross-entropy. Samples are
/// reshuffled every epoch from a stream keyed by `(seed, epoch)`. Returns
/// the mean batch loss of each epoch.
pub fn train(params: &mut HdlcParams, x: &FeatureMatrix, labels: &[u8], cfg: &TrainConfig) -> Result<Vec<f64>, ModelError> {
    if x.rows() != labels.len() || x.rows() == 0 {
        return Err(ModelError::Training(format!("{} rows for {} labels", x.rows(), labels.len())));
    }
    if x.cols() != params.config.input_dim {
        return Err(ModelError::Training(format!(
            "model expects {} features, got {}",
            params.config.input_dim,
            x.cols()
        )));
    }
    if !labels.contains(&0) || !labels.contains(&1) || labels.iter().any(|&y| y > 1) {
        return Err(ModelError::Training("labels must contain both 0 and 1 and nothing else".into()));
    }
    if cfg.batch == 0 || cfg.lr.is_nan() || cfg.lr < 0.0 {
        return Err(ModelError::Config(format!("invalid training settings {cfg:?}")));
    }
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "hdlc.shuffle", epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let xb = x.select_rows(chunk);
            let yb: Vec<f64> = chunk.iter().map(|&i| f64::from(labels[i])).collect();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, true);
            let input = tape.constant(matrix_tensor(&xb)?);
            let logits = hdlc_forward(&mut tape, &vars, input)?;
            let loss = tape.bce_with_logits(logits, &yb)?;
            total += tape.value(loss).item()?;
            batches += 1;
            tape.backward(loss)?;
            sgd_step(params, &tape, &vars.all, cfg.lr);
        }
        trace.push(total / batches as f64);
    }
    Ok(trace)
}
