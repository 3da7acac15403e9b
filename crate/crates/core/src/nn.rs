//! Layer vocabulary as functions over a [`Tape`]: activations, dense,
//! batch normalization, dropout, drop-connect, pooling and squeeze-and-excitation.
//!
//! Parameters arrive as [`Var`]s already bound on the tape; ownership of the
//! underlying tensors lives with the model (see `crate::models`).

use crate::error::{Error, Result};
use crate::tensor::{PoolGeometry, SeededRng, Tape, Tensor, Var};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    Swish,
    Sigmoid,
}

pub fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
        Activation::Swish => tape.swish(x),
        Activation::Sigmoid => tape.sigmoid(x),
    }
}

pub fn relu(tape: &mut Tape, x: Var) -> Var {
    tape.relu(x)
}

pub fn swish(tape: &mut Tape, x: Var) -> Var {
    tape.swish(x)
}

pub fn softmax(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.softmax(x)
}

/// `x·W + b` for `x: [N, F_in]`, `W: [F_in, F_out]`, `b: [F_out]`.
pub fn dense(tape: &mut Tape, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let (xs, ws) = (tape.shape(x), tape.shape(weight));
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::Shape(format!("dense input {xs:?} does not match weight {ws:?}")));
    }
    let out_width = ws[1];
    let y = tape.matmul(x, weight)?;
    match bias {
        Some(b) => {
            if tape.shape(b) != [out_width] {
                return Err(Error::Shape(format!(
                    "dense bias {:?} does not match {out_width} outputs",
                    tape.shape(b)
                )));
            }
            tape.add(y, b)
        }
        None => Ok(y),
    }
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn fresh(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn blend(&self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) -> Self {
        let mix = |r: &[f64], b: &[f64]| -> Vec<f64> {
            r.iter().zip(b).map(|(r, b)| momentum * r + (1.0 - momentum) * b).collect()
        };
        Self {
            mean: mix(&self.mean, batch_mean),
            var: mix(&self.var, batch_var),
        }
    }
}

/// Batch normalization over axis 1. In train mode the batch statistics are
/// used and the blended running statistics are returned; in eval mode the
/// running statistics are used and nothing is returned.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running: &RunningStats,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<(Var, Option<RunningStats>)> {
    match mode {
        Mode::Train => {
            let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, eps)?;
            Ok((y, Some(running.blend(&mean, &var, momentum))))
        }
        Mode::Eval => {
            let y = tape.batch_norm_eval(x, gamma, beta, &running.mean, &running.var, eps)?;
            Ok((y, None))
        }
    }
}

fn check_dropout_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidProbability { name: "dropout rate", value: p });
    }
    Ok(())
}

/// Inverted dropout: elements survive with probability `1 − p` and are scaled by `1/(1 − p)`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, mode: Mode, rng: &mut SeededRng) -> Result<Var> {
    check_dropout_rate(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = tape.constant(Tensor::new(&shape, mask)?);
    tape.mul(x, mask)
}

/// Stochastic depth on a residual branch: each sample's whole branch is kept
/// with probability `survival` (and scaled by `1/survival`) or zeroed.
pub fn drop_connect(tape: &mut Tape, x: Var, survival: f64, mode: Mode, rng: &mut SeededRng) -> Result<Var> {
    if !(survival > 0.0 && survival <= 1.0) {
        return Err(Error::InvalidProbability { name: "survival probability", value: survival });
    }
    if mode == Mode::Eval || survival == 1.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let mut mask_shape = vec![1; shape.len()];
    mask_shape[0] = shape[0];
    let mask: Vec<f64> = (0..shape[0])
        .map(|_| if rng.bernoulli(survival) { 1.0 / survival } else { 0.0 })
        .collect();
    let mask = tape.constant(Tensor::new(&mask_shape, mask)?);
    tape.mul(x, mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
    GlobalAvg,
}

/// Window pooling; `GlobalAvg` ignores `geom` and yields `[N, C, 1, 1]`.
pub fn pool(tape: &mut Tape, x: Var, kind: PoolKind, geom: PoolGeometry) -> Result<Var> {
    match kind {
        PoolKind::Max => tape.max_pool(x, geom),
        PoolKind::Avg => tape.avg_pool(x, geom),
        PoolKind::GlobalAvg => global_avg_pool(tape, x),
    }
}

pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("global pooling needs NCHW, got {s:?}")));
    }
    let m = tape.mean(x, &[2, 3])?;
    tape.reshape(m, &[s[0], s[1], 1, 1])
}

/// Parameters of a squeeze-and-excitation gate, already bound on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SeVars {
    pub reduce_w: Var,
    pub reduce_b: Var,
    pub expand_w: Var,
    pub expand_b: Var,
}

/// global average → dense C→S → swish → dense S→C → sigmoid → channel rescale.
pub fn se_block(tape: &mut Tape, x: Var, p: SeVars) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("squeeze-excitation needs NCHW, got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    if tape.shape(p.reduce_w).first() != Some(&c) {
        return Err(Error::Shape(format!(
            "squeeze weight {:?} does not match {c} channels",
            tape.shape(p.reduce_w)
        )));
    }
    let pooled = tape.mean(x, &[2, 3])?;
    let z = dense(tape, pooled, p.reduce_w, Some(p.reduce_b))?;
    let z = tape.swish(z);
    let e = dense(tape, z, p.expand_w, Some(p.expand_b))?;
    let gate = tape.sigmoid(e);
    let gate = tape.reshape(gate, &[n, c, 1, 1])?;
    tape.mul(x, gate)
}
