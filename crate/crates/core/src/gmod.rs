//! Transformer global feature module.

use rand::Rng;

use crate::nn::{register, ModelError, Parameters, VarCursor};
use crate::tensor::{Activation, Tape, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GModConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for GModConfig {
    fn default() -> Self {
        Self { height: 32, width: 32, channels: 1, patch: 4, dim: 64, depth: 4, heads: 4, mlp_hidden: 128 }
    }
}

impl GModConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let c = self;
        if [c.height, c.width, c.channels, c.patch, c.dim, c.depth, c.heads, c.mlp_hidden].contains(&0) {
            return Err(ModelError::Config(format!("all extents must be positive: {c:?}")));
        }
        if !c.height.is_multiple_of(c.patch) || !c.width.is_multiple_of(c.patch) {
            return Err(ModelError::Config(format!(
                "patch {} does not divide {}x{}",
                c.patch, c.height, c.width
            )));
        }
        if !c.dim.is_multiple_of(c.heads) {
            return Err(ModelError::Config(format!("embed dim {} not divisible by {} heads", c.dim, c.heads)));
        }
        Ok(())
    }

    /// Patch tokens per image, without the class token.
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// Per-head query/key/value projections, each `dim × head_dim`.
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BlockParams {
    fn init<R: Rng + ?Sized>(c: &GModConfig, rng: &mut R) -> Self {
        let (d, dk, m) = (c.dim, c.head_dim(), c.mlp_hidden);
        let heads = |rng: &mut R| (0..c.heads).map(|_| Tensor::trunc_normal(&[d, dk], INIT_STD, rng)).collect();
        let wq = heads(rng);
        let wk = heads(rng);
        let wv = heads(rng);
        Self {
            ln1_gamma: Tensor::ones(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            wq,
            wk,
            wv,
            wo: Tensor::trunc_normal(&[d, d], INIT_STD, rng),
            bo: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::ones(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            w1: Tensor::trunc_normal(&[d, m], INIT_STD, rng),
            b1: Tensor::zeros(&[m]),
            w2: Tensor::trunc_normal(&[m, d], INIT_STD, rng),
            b2: Tensor::zeros(&[d]),
        }
    }
}

impl Parameters for BlockParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("ln1.gamma", &self.ln1_gamma);
        f("ln1.beta", &self.ln1_beta);
        for (name, ws) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            for (h, w) in ws.iter().enumerate() {
                f(&format!("head{h}.{name}"), w);
            }
        }
        f("attn.wo", &self.wo);
        f("attn.bo", &self.bo);
        f("ln2.gamma", &self.ln2_gamma);
        f("ln2.beta", &self.ln2_beta);
        f("mlp.w1", &self.w1);
        f("mlp.b1", &self.b1);
        f("mlp.w2", &self.w2);
        f("mlp.b2", &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("ln1.gamma", &mut self.ln1_gamma);
        f("ln1.beta", &mut self.ln1_beta);
        for (name, ws) in [("wq", &mut self.wq), ("wk", &mut self.wk), ("wv", &mut self.wv)] {
            for (h, w) in ws.iter_mut().enumerate() {
                f(&format!("head{h}.{name}"), w);
            }
        }
        f("attn.wo", &mut self.wo);
        f("attn.bo", &mut self.bo);
        f("ln2.gamma", &mut self.ln2_gamma);
        f("ln2.beta", &mut self.ln2_beta);
        f("mlp.w1", &mut self.w1);
        f("mlp.b1", &mut self.b1);
        f("mlp.w2", &mut self.w2);
        f("mlp.b2", &mut self.b2);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GModParams {
    pub config: GModConfig,
    /// Patch projection `E`, `(p²·c) × dim`.
    pub patch_proj: Tensor,
    /// `(n + 1) × dim`; row 0 belongs to the class token.
    pub pos_embed: Tensor,
    pub class_token: Tensor,
    pub blocks: Vec<BlockParams>,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

impl GModParams {
    pub fn init<R: Rng + ?Sized>(config: GModConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.dim;
        let patch_proj = Tensor::trunc_normal(&[config.patch_len(), d], INIT_STD, rng);
        let pos_embed = Tensor::trunc_normal(&[config.tokens() + 1, d], INIT_STD, rng);
        let blocks = (0..config.depth).map(|_| BlockParams::init(&config, rng)).collect();
        Ok(Self {
            config,
            patch_proj,
            pos_embed,
            class_token: Tensor::zeros(&[1, d]),
            blocks,
            ln_gamma: Tensor::ones(&[d]),
            ln_beta: Tensor::zeros(&[d]),
        })
    }

    /// Records every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GModVars {
        let vars = if trainable {
            register(self, tape)
        } else {
            let mut v = Vec::new();
            self.visit(&mut |_, t| v.push(tape.constant(t.clone())));
            v
        };
        let h = self.config.heads;
        let mut cur = VarCursor::new(&vars);
        let patch_proj = cur.next();
        let pos_embed = cur.next();
        let class_token = cur.next();
        let blocks = (0..self.blocks.len())
            .map(|_| BlockVars {
                ln1_gamma: cur.next(),
                ln1_beta: cur.next(),
                wq: cur.take(h),
                wk: cur.take(h),
                wv: cur.take(h),
                wo: cur.next(),
                bo: cur.next(),
                ln2_gamma: cur.next(),
                ln2_beta: cur.next(),
                w1: cur.next(),
                b1: cur.next(),
                w2: cur.next(),
                b2: cur.next(),
            })
            .collect();
        let ln_gamma = cur.next();
        let ln_beta = cur.next();
        GModVars { all: vars.clone(), patch_proj, pos_embed, class_token, blocks, ln_gamma, ln_beta }
    }

    /// Inference-mode global feature vector of a single `h × w × c` image.
    pub fn global_features(&self, image: &Tensor) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = gmod_forward(&mut tape, &vars, &self.config, std::slice::from_ref(image))?;
        Ok(tape.value(out.global).data().to_vec())
    }
}

impl Parameters for GModParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("patch_proj", &self.patch_proj);
        f("pos_embed", &self.pos_embed);
        f("class_token", &self.class_token);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&mut |name, t| f(&format!("block{i}.{name}"), t));
        }
        f("ln.gamma", &self.ln_gamma);
        f("ln.beta", &self.ln_beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("patch_proj", &mut self.patch_proj);
        f("pos_embed", &mut self.pos_embed);
        f("class_token", &mut self.class_token);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&mut |name, t| f(&format!("block{i}.{name}"), t));
        }
        f("ln.gamma", &mut self.ln_gamma);
        f("ln.beta", &mut self.ln_beta);
    }
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct GModVars {
    /// Every bound var in visiting order, for [`crate::nn::sgd_step`].
    pub all: Vec<Var>,
    pub patch_proj: Var,
    pub pos_embed: Var,
    pub class_token: Var,
    pub blocks: Vec<BlockVars>,
    pub ln_gamma: Var,
    pub ln_beta: Var,
}

/// Splits an `h × w × c` image into non-overlapping `p × p` patches, one row
/// per patch in row-major patch order, each patch flattened row-major.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor, TensorError> {
    let s = image.shape();
    if s.len() != 3 || p == 0 || !s[0].is_multiple_of(p) || !s[1].is_multiple_of(p) {
        return Err(TensorError::Dimension { op: "patchify", msg: format!("patch {p} does not tile {s:?}") });
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (gy, gx) = (h / p, w / p);
    let x = image.data();
    let mut out = Vec::with_capacity(x.len());
    for py in 0..gy {
        for px in 0..gx {
            for y in py * p..(py + 1) * p {
                let start = (y * w + px * p) * c;
                out.extend_from_slice(&x[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![gy * gx, p * p * c], out)
}

pub fn unpatchify(patches: &Tensor, h: usize, w: usize, c: usize, p: usize) -> Result<Tensor, TensorError> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || patches.shape() != [(h / p) * (w / p), p * p * c] {
        return Err(TensorError::Dimension {
            op: "unpatchify",
            msg: format!("{:?} patches do not form a {h}x{w}x{c} image with patch {p}", patches.shape()),
        });
    }
    let gx = w / p;
    let mut out = vec![0.0; h * w * c];
    for (i, patch) in patches.data().chunks(p * p * c).enumerate() {
        let (py, px) = (i / gx, i % gx);
        for (r, row) in patch.chunks(p * c).enumerate() {
            let start = ((py * p + r) * w + px * p) * c;
            out[start..start + p * c].copy_from_slice(row);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Row-wise `x · w (+ b)` over the last axis of a tensor of any rank.
fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
    let s = tape.shape(x).to_vec();
    let k = *s.last().expect("rank >= 1");
    let rows = s.iter().product::<usize>() / k;
    let flat = tape.reshape(x, &[rows, k])?;
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        y = tape.add(y, b)?;
    }
    let mut out_shape = s;
    *out_shape.last_mut().expect("rank >= 1") = tape.shape(y)[1];
    tape.reshape(y, &out_shape)
}

/// Projects `[b, n, p²·c]` patches and prepends the class token:
/// `[class; patches·E] + E_pos`, giving `[b, n + 1, dim]`.
pub fn embed(tape: &mut Tape, vars: &GModVars, patches: Var) -> Result<Var, TensorError> {
    let s = tape.shape(patches).to_vec();
    if s.len() != 3 {
        return Err(TensorError::Dimension { op: "embed", msg: format!("expected [b, n, p²c], got {s:?}") });
    }
    let tokens = linear(tape, patches, vars.patch_proj, None)?;
    let d = tape.shape(vars.class_token)[1];
    let cls = tape.reshape(vars.class_token, &[1, 1, d])?;
    let cls = tape.concat(&vec![cls; s[0]], 0)?;
    let z = tape.concat(&[cls, tokens], 1)?;
    tape.add(z, vars.pos_embed)
}

/// Scaled dot-product attention of `[b, t, dim]` tokens for one head.
/// Returns the head output `[b, t, head_dim]` and the attention weights `[b, t, t]`.
pub fn self_attention(tape: &mut Tape, tokens: Var, wq: Var, wk: Var, wv: Var) -> Result<(Var, Var), TensorError> {
    let q = linear(tape, tokens, wq, None)?;
    let k = linear(tape, tokens, wk, None)?;
    let v = linear(tape, tokens, wv, None)?;
    let dk = tape.shape(k)[2];
    let kt = tape.transpose(k)?;
    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = tape.softmax(scores);
    Ok((tape.bmm(weights, v)?, weights))
}

/// Multi-head attention: heads concatenated along features, then `·W + b`.
pub fn msa(tape: &mut Tape, tokens: Var, block: &BlockVars) -> Result<Var, TensorError> {
    let mut heads = Vec::with_capacity(block.wq.len());
    for h in 0..block.wq.len() {
        heads.push(self_attention(tape, tokens, block.wq[h], block.wk[h], block.wv[h])?.0);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 2)? };
    linear(tape, cat, block.wo, Some(block.bo))
}

/// Pre-norm residual attention followed by a pre-norm residual GeLU MLP.
pub fn transformer_block(tape: &mut Tape, z: Var, block: &BlockVars) -> Result<Var, TensorError> {
    let n1 = tape.layernorm(z, block.ln1_gamma, block.ln1_beta, LN_EPS)?;
    let a = msa(tape, n1, block)?;
    let z = tape.add(a, z)?;
    let n2 = tape.layernorm(z, block.ln2_gamma, block.ln2_beta, LN_EPS)?;
    let h = linear(tape, n2, block.w1, Some(block.b1))?;
    let h = tape.activation(h, Activation::Gelu);
    let m = linear(tape, h, block.w2, Some(block.b2))?;
    tape.add(m, z)
}

#[derive(Debug, Clone, Copy)]
pub struct GModOutput {
    /// Class-token rows after the final norm, `[b, dim]`.
    pub global: Var,
    /// Remaining normalized tokens, `[b, n, dim]`.
    pub tokens: Var,
}

/// Batched forward over `h × w × c` images.
pub fn gmod_forward(tape: &mut Tape, vars: &GModVars, config: &GModConfig, images: &[Tensor]) -> Result<GModOutput, ModelError> {
    config.validate()?;
    if images.is_empty() {
        return Err(ModelError::Config("empty image batch".into()));
    }
    let expect = [config.height, config.width, config.channels];
    let mut flat = Vec::with_capacity(images.len() * config.tokens() * config.patch_len());
    for img in images {
        if img.shape() != expect {
            return Err(TensorError::Shape { op: "gmod_forward", lhs: expect.to_vec(), rhs: img.shape().to_vec() }.into());
        }
        flat.extend(patchify(img, config.patch)?.into_data());
    }
    let (b, n, d) = (images.len(), config.tokens(), config.dim);
    let patches = tape.constant(Tensor::new(vec![b, n, config.patch_len()], flat)?);
    let mut z = embed(tape, vars, patches)?;
    for block in &vars.blocks {
        z = transformer_block(tape, z, block)?;
    }
    let z = tape.layernorm(z, vars.ln_gamma, vars.ln_beta, LN_EPS)?;
    let cls = tape.narrow(z, 1, 0, 1)?;
    let global = tape.reshape(cls, &[b, d])?;
    let tokens = tape.narrow(z, 1, 1, n)?;
    Ok(GModOutput { global, tokens })
}
