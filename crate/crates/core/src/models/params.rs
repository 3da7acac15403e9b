use crate::tensor::{derive_seed, Init, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    /// Batch-normalization statistics: updated by forward passes, never by gradients.
    pub fn is_statistic(self) -> bool {
        matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
    /// Meaningless for statistics, which never train.
    pub trainable: bool,
}

impl Parameter {
    /// Whether the optimizer updates this tensor.
    pub fn learns(&self) -> bool {
        self.trainable && !self.role.is_statistic()
    }
}

/// Flat, name-unique parameter storage for one model graph.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor, role: ParamRole) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter {
            name,
            value,
            role,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Deterministic initializer: every tensor's values depend only on
/// (model seed, parameter name).
pub(crate) struct Initializer {
    pub seed: u64,
}

impl Initializer {
    fn seed_for(&self, name: &str) -> u64 {
        derive_seed(self.seed, &[name.as_bytes()])
    }

    /// He-normal over the fan-in, for convolution kernels.
    pub fn he_normal(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        Tensor::create(shape, Init::Normal { mean: 0.0, std, seed: self.seed_for(name) })
            .expect("initializer shapes are positive")
    }

    /// Uniform in ±1/√fan_in, for dense kernels.
    pub fn fan_in_uniform(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::create(shape, Init::Uniform { lo: -bound, hi: bound, seed: self.seed_for(name) })
            .expect("initializer shapes are positive")
    }
}

/// How frozen parameters are classified by [`ParamStore::count`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CountMode {
    /// Batch-normalization statistics are the only non-trainables.
    #[default]
    Architecture,
    /// Frozen parameters are also reported as non-trainable.
    RespectFreeze,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;

    fn add(self, rhs: ParamCount) -> ParamCount {
        ParamCount {
            total: self.total + rhs.total,
            trainable: self.trainable + rhs.trainable,
            non_trainable: self.non_trainable + rhs.non_trainable,
        }
    }
}

impl ParamStore {
    pub fn count(&self, mode: CountMode) -> ParamCount {
        let mut c = ParamCount::default();
        for p in &self.params {
            let n = p.value.numel();
            c.total += n;
            let counts_as_trainable = match mode {
                CountMode::Architecture => !p.role.is_statistic(),
                CountMode::RespectFreeze => p.learns(),
            };
            if counts_as_trainable {
                c.trainable += n;
            } else {
                c.non_trainable += n;
            }
        }
        c
    }
}
