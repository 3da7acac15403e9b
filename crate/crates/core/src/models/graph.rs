use std::fmt::Write as _;
use std::ops::Range;

use sha2::{Digest, Sha256};

use super::params::{CountMode, Initializer, ParamCount, ParamId, ParamRole, ParamStore, Parameter};
use super::spec::{InputSpec, StageSpec};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Mode, RunningStats, SeVars, BN_EPSILON, BN_MOMENTUM};
use crate::tensor::{conv_output_extent, ConvGeometry, PoolGeometry, SeededRng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

/// Convolution (no bias), batch normalization, activation.
#[derive(Clone, Copy, Debug)]
pub struct ConvBn {
    pub weight: ParamId,
    pub geom: ConvGeometry,
    pub bn: BnParams,
    pub act: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SeParams {
    pub reduce: DenseParams,
    pub expand: DenseParams,
}

#[derive(Clone, Debug)]
pub enum Block {
    Conv(ConvBn),
    MaxPool(PoolGeometry),
    Bottleneck {
        conv1: ConvBn,
        conv2: ConvBn,
        conv3: ConvBn,
        shortcut: Option<ConvBn>,
    },
    MbConv {
        expand: Option<ConvBn>,
        depthwise: ConvBn,
        se: SeParams,
        project: ConvBn,
        /// Survival probability of the residual branch; `None` means no skip.
        skip: Option<f64>,
    },
    /// `[N, C, H, W]` → `[N, C]`.
    GlobalPool,
    /// Global pool, dropout, dense, softmax.
    Classifier { dropout: f64, dense: DenseParams },
    /// Dense, batch normalization, ReLU, dropout.
    DenseLayer { dense: DenseParams, bn: BnParams, dropout: f64 },
    /// Dense then softmax.
    Output { dense: DenseParams },
}

impl Block {
    pub fn has_skip(&self) -> bool {
        match self {
            Block::Bottleneck { .. } => true,
            Block::MbConv { skip, .. } => skip.is_some(),
            _ => false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub label: String,
    pub spec: StageSpec,
    pub blocks: Vec<Block>,
    /// Indices into the owning store.
    pub params: Range<usize>,
}

/// A pending running-statistics write produced by a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: RunningStats,
}

/// Result of binding a graph onto a tape.
#[derive(Debug)]
pub struct GraphPass {
    pub output: Var,
    /// Every parameter read by the pass and the tape leaf holding it.
    pub bindings: Vec<(ParamId, Var)>,
    pub stat_updates: Vec<StatUpdate>,
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub name: String,
    pub input: InputSpec,
    pub stages: Vec<Stage>,
    pub store: ParamStore,
    /// When set, batch normalization in frozen layers normalizes with its
    /// running statistics and never updates them.
    pub freeze_bn_stats: bool,
}

struct Pass<'a> {
    store: &'a ParamStore,
    tape: &'a mut Tape,
    mode: Mode,
    rng: &'a mut SeededRng,
    freeze_bn_stats: bool,
    bindings: Vec<(ParamId, Var)>,
    stat_updates: Vec<StatUpdate>,
}

impl Pass<'_> {
    fn bind(&mut self, id: ParamId) -> Var {
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), p.learns());
        self.bindings.push((id, v));
        v
    }

    fn bn(&mut self, x: Var, bn: BnParams) -> Result<Var> {
        let gamma = self.bind(bn.gamma);
        let beta = self.bind(bn.beta);
        let running = RunningStats {
            mean: self.store.get(bn.mean).value.data().to_vec(),
            var: self.store.get(bn.var).value.data().to_vec(),
        };
        let frozen = !self.store.get(bn.gamma).trainable && self.freeze_bn_stats;
        let mode = if frozen { Mode::Eval } else { self.mode };
        let (y, update) = nn::batchnorm(self.tape, x, gamma, beta, &running, mode, BN_MOMENTUM, BN_EPSILON)?;
        if let Some(stats) = update {
            self.stat_updates.push(StatUpdate { mean: bn.mean, var: bn.var, stats });
        }
        Ok(y)
    }

    fn conv_bn(&mut self, x: Var, c: &ConvBn) -> Result<Var> {
        let w = self.bind(c.weight);
        let y = self.tape.conv2d(x, w, c.geom)?;
        let y = self.bn(y, c.bn)?;
        Ok(nn::activate(self.tape, y, c.act))
    }

    fn dense(&mut self, x: Var, d: DenseParams) -> Result<Var> {
        let w = self.bind(d.weight);
        let b = self.bind(d.bias);
        nn::dense(self.tape, x, w, Some(b))
    }

    fn flat_pool(&mut self, x: Var) -> Result<Var> {
        if self.tape.shape(x).len() != 4 {
            return Err(Error::Shape(format!("global pooling needs NCHW, got {:?}", self.tape.shape(x))));
        }
        self.tape.mean(x, &[2, 3])
    }

    fn block(&mut self, x: Var, block: &Block) -> Result<Var> {
        match block {
            Block::Conv(c) => self.conv_bn(x, c),
            Block::MaxPool(g) => self.tape.max_pool(x, *g),
            Block::Bottleneck { conv1, conv2, conv3, shortcut } => {
                let h = self.conv_bn(x, conv1)?;
                let h = self.conv_bn(h, conv2)?;
                let h = self.conv_bn(h, conv3)?;
                let sc = match shortcut {
                    Some(s) => self.conv_bn(x, s)?,
                    None => x,
                };
                let y = self.tape.add(h, sc)?;
                Ok(self.tape.relu(y))
            }
            Block::MbConv { expand, depthwise, se, project, skip } => {
                let mut h = x;
                if let Some(e) = expand {
                    h = self.conv_bn(h, e)?;
                }
                h = self.conv_bn(h, depthwise)?;
                let vars = SeVars {
                    reduce_w: self.bind(se.reduce.weight),
                    reduce_b: self.bind(se.reduce.bias),
                    expand_w: self.bind(se.expand.weight),
                    expand_b: self.bind(se.expand.bias),
                };
                h = nn::se_block(self.tape, h, vars)?;
                h = self.conv_bn(h, project)?;
                if let Some(survival) = *skip {
                    h = nn::drop_connect(self.tape, h, survival, self.mode, self.rng)?;
                    h = self.tape.add(h, x)?;
                }
                Ok(h)
            }
            Block::GlobalPool => self.flat_pool(x),
            Block::Classifier { dropout, dense } => {
                let h = self.flat_pool(x)?;
                let h = nn::dropout(self.tape, h, *dropout, self.mode, self.rng)?;
                let logits = self.dense(h, *dense)?;
                self.tape.softmax(logits)
            }
            Block::DenseLayer { dense, bn, dropout } => {
                let h = self.dense(x, *dense)?;
                let h = self.bn(h, *bn)?;
                let h = self.tape.relu(h);
                nn::dropout(self.tape, h, *dropout, self.mode, self.rng)
            }
            Block::Output { dense } => {
                let logits = self.dense(x, *dense)?;
                self.tape.softmax(logits)
            }
        }
    }
}

fn conv_shape(store: &ParamStore, c: &ConvBn, input: &[usize]) -> Result<Vec<usize>> {
    let w = store.get(c.weight).value.shape();
    let [n, ch, h, wd] = *input else {
        return Err(Error::Shape(format!("convolution needs NCHW, got {input:?}")));
    };
    if w[1] * c.geom.groups != ch {
        return Err(Error::Shape(format!("kernel {w:?} with {} groups cannot read {ch} channels", c.geom.groups)));
    }
    let ho = conv_output_extent(h, w[2], c.geom.stride.0, c.geom.padding.0);
    let wo = conv_output_extent(wd, w[3], c.geom.stride.1, c.geom.padding.1);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(vec![n, w[0], ho, wo]),
        _ => Err(Error::Shape(format!("kernel {w:?} does not fit input {input:?}"))),
    }
}

fn dense_shape(store: &ParamStore, d: DenseParams, input: &[usize]) -> Result<Vec<usize>> {
    let w = store.get(d.weight).value.shape();
    match *input {
        [n, f] if f == w[0] => Ok(vec![n, w[1]]),
        _ => Err(Error::Shape(format!("dense weight {w:?} cannot read {input:?}"))),
    }
}

fn block_shape(store: &ParamStore, block: &Block, input: &[usize]) -> Result<Vec<usize>> {
    let flat = |s: &[usize]| -> Result<Vec<usize>> {
        match *s {
            [n, c, _, _] => Ok(vec![n, c]),
            _ => Err(Error::Shape(format!("global pooling needs NCHW, got {s:?}"))),
        }
    };
    match block {
        Block::Conv(c) => conv_shape(store, c, input),
        Block::MaxPool(g) => match *input {
            [n, c, h, w] => {
                let ho = conv_output_extent(h, g.kernel.0, g.stride.0, g.padding.0);
                let wo = conv_output_extent(w, g.kernel.1, g.stride.1, g.padding.1);
                match (ho, wo) {
                    (Some(ho), Some(wo)) => Ok(vec![n, c, ho, wo]),
                    _ => Err(Error::Shape(format!("pool window does not fit {input:?}"))),
                }
            }
            _ => Err(Error::Shape(format!("pooling needs NCHW, got {input:?}"))),
        },
        Block::Bottleneck { conv1, conv2, conv3, shortcut } => {
            let h = conv_shape(store, conv1, input)?;
            let h = conv_shape(store, conv2, &h)?;
            let h = conv_shape(store, conv3, &h)?;
            let sc = match shortcut {
                Some(s) => conv_shape(store, s, input)?,
                None => input.to_vec(),
            };
            if sc != h {
                return Err(Error::Shape(format!("residual {h:?} does not match shortcut {sc:?}")));
            }
            Ok(h)
        }
        Block::MbConv { expand, depthwise, se, project, skip } => {
            let mut h = input.to_vec();
            if let Some(e) = expand {
                h = conv_shape(store, e, &h)?;
            }
            h = conv_shape(store, depthwise, &h)?;
            let squeezed = dense_shape(store, se.reduce, &[h[0], h[1]])?;
            let gate = dense_shape(store, se.expand, &squeezed)?;
            if gate[1] != h[1] {
                return Err(Error::Shape(format!("excitation width {} does not match {} channels", gate[1], h[1])));
            }
            h = conv_shape(store, project, &h)?;
            if skip.is_some() && h != input {
                return Err(Error::Shape(format!("skip connection across {input:?} → {h:?}")));
            }
            Ok(h)
        }
        Block::GlobalPool => flat(input),
        Block::Classifier { dense, .. } => dense_shape(store, *dense, &flat(input)?),
        Block::DenseLayer { dense, .. } | Block::Output { dense } => dense_shape(store, *dense, input),
    }
}

impl ModelGraph {
    /// Parameters in the half-open range of `stage`.
    pub fn stage_params(&self, stage: usize) -> impl Iterator<Item = (ParamId, &Parameter)> {
        let range = self.stages[stage].params.clone();
        self.store.iter().filter(move |(id, _)| range.contains(&id.index()))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut SeededRng) -> Result<GraphPass> {
        self.run(tape, x, mode, rng, None)
    }

    /// Forward pass that also records the output shape of every stage.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<(GraphPass, Vec<Vec<usize>>)> {
        let mut trace = Vec::with_capacity(self.stages.len());
        let pass = self.run(tape, x, mode, rng, Some(&mut trace))?;
        Ok((pass, trace))
    }

    fn run(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        rng: &mut SeededRng,
        mut trace: Option<&mut Vec<Vec<usize>>>,
    ) -> Result<GraphPass> {
        let expected = self.input.shape(tape.shape(x)[0]);
        let got = tape.shape(x);
        let ok = match self.input {
            InputSpec::Image { channels, .. } => got.len() == 4 && got[1] == channels,
            InputSpec::Vector { .. } => got == expected.as_slice(),
        };
        if !ok {
            return Err(Error::Shape(format!("{} expects input like {expected:?}, got {got:?}", self.name)));
        }
        let mut pass = Pass {
            store: &self.store,
            tape,
            mode,
            rng,
            freeze_bn_stats: self.freeze_bn_stats,
            bindings: Vec::new(),
            stat_updates: Vec::new(),
        };
        let mut h = x;
        for stage in &self.stages {
            for block in &stage.blocks {
                h = pass.block(h, block)?;
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(pass.tape.shape(h).to_vec());
            }
        }
        Ok(GraphPass {
            output: h,
            bindings: pass.bindings,
            stat_updates: pass.stat_updates,
        })
    }

    /// Eval-mode forward on a plain tensor.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut rng = SeededRng::new(0);
        let pass = self.forward(&mut tape, xv, Mode::Eval, &mut rng)?;
        Ok(tape.value(pass.output).clone())
    }

    /// Stage output shapes computed from parameter shapes and the extent
    /// formula alone, without evaluating any layer.
    pub fn infer_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shape = input.to_vec();
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in &stage.blocks {
                shape = block_shape(&self.store, block, &shape)?;
            }
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Shape of the final output for a batch of `batch` nominal inputs.
    pub fn output_shape(&self, batch: usize) -> Result<Vec<usize>> {
        let shapes = self.infer_shapes(&self.input.shape(batch))?;
        Ok(shapes.last().cloned().unwrap_or_else(|| self.input.shape(batch)))
    }

    /// Width of the flat vector this graph emits.
    pub fn output_width(&self) -> Result<usize> {
        match self.output_shape(1)?.as_slice() {
            [_, w] => Ok(*w),
            other => Err(Error::Shape(format!("{} emits non-flat output {other:?}", self.name))),
        }
    }

    pub fn commit(&mut self, updates: Vec<StatUpdate>) {
        for u in updates {
            self.store.get_mut(u.mean).value.data_mut().copy_from_slice(&u.stats.mean);
            self.store.get_mut(u.var).value.data_mut().copy_from_slice(&u.stats.var);
        }
    }

    pub fn count_params(&self, mode: CountMode) -> ParamCount {
        self.store.count(mode)
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for p in self.store.iter_mut() {
            p.trainable = flag;
        }
    }

    pub fn specs(&self) -> Vec<StageSpec> {
        self.stages.iter().map(|s| s.spec.clone()).collect()
    }

    /// SHA-256 over the stage table and every parameter's name, role and shape.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.input).expect("input spec serializes"));
        h.update(serde_json::to_vec(&self.specs()).expect("stage specs serialize"));
        for (_, p) in self.store.iter() {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update(format!("{:?}", p.role).as_bytes());
            for &e in p.value.shape() {
                h.update((e as u64).to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Text table: one row per stage, then the parameter totals.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:<12} {:<18} {:>6} {:>6} {:>8} {:>7} {:>11}",
            "stage", "label", "kind", "kernel", "stride", "channels", "repeats", "params"
        );
        for (i, st) in self.stages.iter().enumerate() {
            let n: usize = self.stage_params(i).map(|(_, p)| p.value.numel()).sum();
            let _ = writeln!(
                s,
                "{:<6} {:<12} {:<18} {:>6} {:>6} {:>8} {:>7} {:>11}",
                i + 1,
                st.label,
                st.spec.kind.to_string(),
                st.spec.kernel,
                st.spec.stride,
                st.spec.out_channels,
                st.spec.repeats,
                n
            );
        }
        let c = self.count_params(CountMode::Architecture);
        let _ = writeln!(s, "total params:         {}", c.total);
        let _ = writeln!(s, "trainable params:     {}", c.trainable);
        let _ = write!(s, "non-trainable params: {}", c.non_trainable);
        s
    }
}

/// Incremental construction of a [`ModelGraph`]; every tensor is created
/// through here so naming and initialization stay uniform.
pub(crate) struct GraphBuilder {
    name: String,
    input: InputSpec,
    store: ParamStore,
    init: Initializer,
    stages: Vec<Stage>,
    open: Option<(String, StageSpec, Vec<Block>, usize)>,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>, input: InputSpec, seed: u64) -> Self {
        Self {
            name: name.into(),
            input,
            store: ParamStore::new(),
            init: Initializer { seed },
            stages: Vec::new(),
            open: None,
        }
    }

    pub fn begin_stage(&mut self, label: impl Into<String>, spec: StageSpec) -> Result<()> {
        spec.validate()?;
        self.end_stage();
        self.open = Some((label.into(), spec, Vec::new(), self.store.len()));
        Ok(())
    }

    fn end_stage(&mut self) {
        if let Some((label, spec, blocks, start)) = self.open.take() {
            self.stages.push(Stage {
                label,
                spec,
                blocks,
                params: start..self.store.len(),
            });
        }
    }

    pub fn push(&mut self, block: Block) {
        self.open.as_mut().expect("push outside a stage").2.push(block);
    }

    pub fn bn(&mut self, prefix: &str, channels: usize) -> BnParams {
        let mut add = |suffix: &str, value: f64, role: ParamRole| {
            let t = Tensor::full(&[channels], value).expect("positive channels");
            self.store.push(format!("{prefix}.{suffix}"), t, role)
        };
        BnParams {
            gamma: add("gamma", 1.0, ParamRole::Gamma),
            beta: add("beta", 0.0, ParamRole::Beta),
            mean: add("running_mean", 0.0, ParamRole::RunningMean),
            var: add("running_var", 1.0, ParamRole::RunningVar),
        }
    }

    /// `prefix.conv.weight` plus `prefix.bn.*`; padding keeps `k/2` on each side.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_bn(
        &mut self,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        act: Activation,
    ) -> ConvBn {
        let name = format!("{prefix}.conv.weight");
        let fan_in = in_ch / groups * kernel * kernel;
        let w = self.init.he_normal(&name, &[out_ch, in_ch / groups, kernel, kernel], fan_in);
        let weight = self.store.push(name, w, ParamRole::Weight);
        let bn = self.bn(&format!("{prefix}.bn"), out_ch);
        ConvBn {
            weight,
            geom: ConvGeometry::new(stride, kernel / 2, groups),
            bn,
            act,
        }
    }

    pub fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> DenseParams {
        let wname = format!("{prefix}.weight");
        let w = self.init.fan_in_uniform(&wname, &[fan_in, fan_out], fan_in);
        let weight = self.store.push(wname, w, ParamRole::Weight);
        let bias = self.store.push(
            format!("{prefix}.bias"),
            Tensor::zeros(&[fan_out]).expect("positive width"),
            ParamRole::Bias,
        );
        DenseParams { weight, bias }
    }

    pub fn finish(mut self) -> Result<ModelGraph> {
        self.end_stage();
        let graph = ModelGraph {
            name: self.name,
            input: self.input,
            stages: self.stages,
            store: self.store,
            freeze_bn_stats: true,
        };
        graph.output_shape(2)?;
        Ok(graph)
    }
}
