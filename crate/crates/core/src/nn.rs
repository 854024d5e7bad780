//! Parameter plumbing shared by the trainable models.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{read_container, take_tensor, write_container, ContainerError, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training error: {0}")]
    Training(String),
}

/// A collection of named parameter tensors with a fixed visiting order.
///
/// The order defines both the persisted record order and the order of the
/// [`Var`]s returned by [`register`].
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn records(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((format!("{prefix}.{name}"), t.clone())));
        out
    }

    /// Overwrites every parameter from `records`; names and shapes must match.
    fn load_records(&mut self, prefix: &str, records: &[(String, Tensor)]) -> Result<(), ContainerError> {
        let mut result = Ok(());
        self.visit_mut(&mut |name, t| {
            if result.is_ok() {
                match take_tensor(records, &format!("{prefix}.{name}"), t.shape()) {
                    Ok(loaded) => *t = loaded,
                    Err(e) => result = Err(e),
                }
            }
        });
        result
    }

    fn count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

/// Adds every parameter to `tape` as a trainable leaf, in visiting order.
pub fn register<P: Parameters + ?Sized>(params: &P, tape: &mut Tape) -> Vec<Var> {
    let mut vars = Vec::new();
    params.visit(&mut |_, t| vars.push(tape.param(t.clone())));
    vars
}

/// Plain gradient-descent update `θ ← θ − lr·∇θ`.
pub fn sgd_step<P: Parameters + ?Sized>(params: &mut P, tape: &Tape, vars: &[Var], lr: f64) {
    let mut i = 0;
    params.visit_mut(&mut |_, t| {
        if let Some(g) = tape.grad(vars[i]) {
            t.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
        }
        i += 1;
    });
}

pub fn save_records(path: &Path, records: &[(String, Tensor)]) -> Result<(), ContainerError> {
    write_container(BufWriter::new(File::create(path)?), records)
}

pub fn load_records(path: &Path) -> Result<Vec<(String, Tensor)>, ContainerError> {
    read_container(BufReader::new(File::open(path)?))
}

/// Pops the next `n` vars off a registration list.
pub(crate) struct VarCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> VarCursor<'a> {
    pub(crate) fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub(crate) fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub(crate) fn take(&mut self, n: usize) -> Vec<Var> {
        (0..n).map(|_| self.next()).collect()
    }
}
