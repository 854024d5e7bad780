//! Convolutional spatial feature module.

use rand::Rng;

use crate::nn::{register, ModelError, Parameters, VarCursor};
use crate::tensor::{take_tensor, ContainerError, NormMode, Padding, Tape, Tensor, TensorError, Var};

pub const FILTERS: [usize; 5] = [32, 64, 128, 256, 256];
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SModConfig {
    pub in_channels: usize,
    pub filters: Vec<usize>,
    pub dropout: f64,
}

impl SModConfig {
    pub fn new(in_channels: usize) -> Self {
        Self { in_channels, filters: FILTERS.to_vec(), dropout: 0.2 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 || self.filters.is_empty() || self.filters.contains(&0) {
            return Err(ModelError::Config(format!("invalid SMod layout {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Flattened feature length for an `h × w` input map.
    pub fn output_len(&self, mut h: usize, mut w: usize) -> usize {
        for _ in &self.filters {
            if h >= 2 && w >= 2 {
                h /= 2;
                w /= 2;
            }
        }
        self.filters.last().copied().unwrap_or(0) * h * w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SflParams {
    /// `[f, c, 3, 3]`, no bias (the norm's shift takes its place).
    pub kernel: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl SflParams {
    pub fn init<R: Rng + ?Sized>(in_channels: usize, filters: usize, rng: &mut R) -> Self {
        let std = (2.0 / (in_channels * 9) as f64).sqrt();
        Self {
            kernel: Tensor::randn(&[filters, in_channels, 3, 3], std, rng),
            gamma: Tensor::ones(&[filters]),
            beta: Tensor::zeros(&[filters]),
            running_mean: vec![0.0; filters],
            running_var: vec![1.0; filters],
        }
    }

    fn update_running(&mut self, stats: &crate::tensor::BatchStats) {
        let unbias = stats.count as f64 / (stats.count as f64 - 1.0).max(1.0);
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * stats.mean[c];
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * stats.var[c] * unbias;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SModParams {
    pub config: SModConfig,
    pub blocks: Vec<SflParams>,
}

impl SModParams {
    pub fn init<R: Rng + ?Sized>(config: SModConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let mut c = config.in_channels;
        let mut blocks = Vec::with_capacity(config.filters.len());
        for &f in &config.filters {
            blocks.push(SflParams::init(c, f, rng));
            c = f;
        }
        Ok(Self { config, blocks })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> SModVars {
        let vars = if trainable {
            register(self, tape)
        } else {
            let mut v = Vec::new();
            self.visit(&mut |_, t| v.push(tape.constant(t.clone())));
            v
        };
        let mut cur = VarCursor::new(&vars);
        let blocks = self.blocks.iter().map(|_| (cur.next(), cur.next(), cur.next())).collect();
        SModVars { all: vars.clone(), blocks }
    }

    /// Trainable tensors followed by the running statistics.
    pub fn state_records(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.records(prefix);
        for (i, b) in self.blocks.iter().enumerate() {
            let n = b.running_mean.len();
            let t = |v: &[f64]| Tensor::new(vec![n], v.to_vec()).expect("length matches");
            out.push((format!("{prefix}.block{i}.running_mean"), t(&b.running_mean)));
            out.push((format!("{prefix}.block{i}.running_var"), t(&b.running_var)));
        }
        out
    }

    pub fn load_state_records(&mut self, prefix: &str, records: &[(String, Tensor)]) -> Result<(), ContainerError> {
        self.load_records(prefix, records)?;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let n = b.running_mean.len();
            b.running_mean = take_tensor(records, &format!("{prefix}.block{i}.running_mean"), &[n])?.into_data();
            b.running_var = take_tensor(records, &format!("{prefix}.block{i}.running_var"), &[n])?.into_data();
        }
        Ok(())
    }
}

impl Parameters for SModParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("block{i}.conv.kernel"), &b.kernel);
            f(&format!("block{i}.bn.gamma"), &b.gamma);
            f(&format!("block{i}.bn.beta"), &b.beta);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.conv.kernel"), &mut b.kernel);
            f(&format!("block{i}.bn.gamma"), &mut b.gamma);
            f(&format!("block{i}.bn.beta"), &mut b.beta);
        }
    }
}

#[derive(Debug, Clone)]
pub struct SModVars {
    pub all: Vec<Var>,
    /// (kernel, gamma, beta) per block.
    pub blocks: Vec<(Var, Var, Var)>,
}

/// Arranges `[b, n, d]` patch tokens as a `[b, d, √n, √n]` map in row-major
/// patch order.
pub fn token_grid(tape: &mut Tape, tokens: Var) -> Result<Var, TensorError> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(TensorError::Dimension { op: "token_grid", msg: format!("expected [b, n, d], got {s:?}") });
    }
    let side = (s[1] as f64).sqrt().round() as usize;
    if side * side != s[1] {
        return Err(TensorError::Dimension { op: "token_grid", msg: format!("{} tokens do not form a square", s[1]) });
    }
    let grid = tape.reshape(tokens, &[s[0], side, side, s[2]])?;
    tape.permute(grid, &[0, 3, 1, 2])
}

/// How a block uses batch normalization.
#[derive(Debug)]
pub enum BlockMode<'a> {
    /// Batch statistics; the running averages in the params are updated.
    Train(&'a mut SflParams),
    Eval(&'a SflParams),
}

/// conv 3×3 (same) → batchnorm → ReLU → maxpool 2×2/2 → dropout.
///
/// Fails when either spatial extent is below 2.
pub fn sfl_block<R: Rng + ?Sized>(
    tape: &mut Tape,
    input: Var,
    vars: (Var, Var, Var),
    mode: BlockMode<'_>,
    dropout: f64,
    rng: &mut R,
) -> Result<Var, TensorError> {
    sfl(tape, input, vars, mode, dropout, rng, true)
}

fn sfl<R: Rng + ?Sized>(
    tape: &mut Tape,
    input: Var,
    (kernel, gamma, beta): (Var, Var, Var),
    mode: BlockMode<'_>,
    dropout: f64,
    rng: &mut R,
    strict: bool,
) -> Result<Var, TensorError> {
    let s = tape.shape(input).to_vec();
    if s.len() != 4 {
        return Err(TensorError::Dimension { op: "sfl_block", msg: format!("expected [b, c, h, w], got {s:?}") });
    }
    let pool = s[2] >= 2 && s[3] >= 2;
    if strict && !pool {
        return Err(TensorError::Dimension {
            op: "sfl_block",
            msg: format!("spatial extents {}x{} are below 2", s[2], s[3]),
        });
    }
    let x = tape.conv2d(input, kernel, None, Padding::Same)?;
    let training = matches!(mode, BlockMode::Train(_));
    let x = match mode {
        BlockMode::Train(p) => {
            let (y, stats) = tape.batchnorm2d(x, gamma, beta, BN_EPS, NormMode::Train)?;
            p.update_running(&stats.expect("training mode reports statistics"));
            y
        }
        BlockMode::Eval(p) => {
            let mode = NormMode::Eval { mean: &p.running_mean, var: &p.running_var };
            tape.batchnorm2d(x, gamma, beta, BN_EPS, mode)?.0
        }
    };
    let x = tape.relu(x);
    let x = if pool { tape.maxpool2d(x)? } else { x };
    tape.dropout(x, dropout, training, rng)
}

/// Runs every block and flattens to `[b, features]`. Pooling is skipped
/// once a spatial extent has reached 1.
pub fn smod_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &SModVars,
    params: &mut SModParams,
    map: Var,
    training: bool,
    rng: &mut R,
) -> Result<Var, ModelError> {
    let s = tape.shape(map).to_vec();
    if s.len() != 4 || s[1] != params.config.in_channels {
        return Err(TensorError::Dimension {
            op: "smod_forward",
            msg: format!("expected [b, {}, h, w], got {s:?}", params.config.in_channels),
        }
        .into());
    }
    let rate = params.config.dropout;
    let mut x = map;
    for (p, &v) in params.blocks.iter_mut().zip(&vars.blocks) {
        let mode = if training { BlockMode::Train(p) } else { BlockMode::Eval(p) };
        x = sfl(tape, x, v, mode, rate, rng, false)?;
    }
    let len = tape.value(x).len() / s[0];
    Ok(tape.reshape(x, &[s[0], len])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn ladder_and_lengths() {
        let cfg = SModConfig::new(64);
        assert_eq!(cfg.filters, FILTERS);
        assert_eq!(cfg.output_len(32, 32), 256);
        assert_eq!(cfg.output_len(4, 4), 256);
        assert_eq!(cfg.output_len(64, 64), 256 * 4);
    }

    #[test]
    fn grid_layout() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 4 * 3).map(f64::from).collect();
        let t = tape.constant(Tensor::new(vec![2, 4, 3], data).unwrap());
        let g = token_grid(&mut tape, t).unwrap();
        assert_eq!(tape.shape(g), [2, 3, 2, 2]);
        // token 2 (row 1, col 0) of sample 1, channel 1
        assert_eq!(tape.value(g).at(&[1, 1, 1, 0]), (12 + 2 * 3 + 1) as f64);
        let bad = tape.constant(Tensor::zeros(&[1, 5, 2]));
        assert!(token_grid(&mut tape, bad).is_err());
    }

    #[test]
    fn extent_trace() {
        let mut r = rng::stream(2, "t", 0);
        let mut p = SModParams::init(SModConfig::new(4), &mut r).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::randn(&[2, 4, 32, 32], 1.0, &mut r));
        let out = smod_forward(&mut tape, &vars, &mut p, x, false, &mut r).unwrap();
        assert_eq!(tape.shape(out), [2, 256]);
    }

    #[test]
    fn running_stats_move_in_training() {
        let mut r = rng::stream(2, "t", 1);
        let cfg = SModConfig { in_channels: 2, filters: vec![3], dropout: 0.0 };
        let mut p = SModParams::init(cfg, &mut r).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, true);
        let x = tape.constant(Tensor::randn(&[4, 2, 4, 4], 1.0, &mut r));
        smod_forward(&mut tape, &vars, &mut p, x, true, &mut r).unwrap();
        assert!(p.blocks[0].running_mean.iter().any(|&m| m != 0.0));
        assert!(p.blocks[0].running_var.iter().all(|&v| v > 0.0 && v != 1.0));
        let recs = p.state_records("smod");
        let mut q = SModParams::init(p.config.clone(), &mut r).unwrap();
        q.load_state_records("smod", &recs).unwrap();
        assert_eq!(p, q);
    }
}
