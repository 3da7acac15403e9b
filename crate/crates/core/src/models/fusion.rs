use sha2::{Digest, Sha256};

use super::graph::{ModelGraph, StatUpdate};
use super::params::{CountMode, ParamCount, ParamId, Parameter};
use super::spec::InputSpec;
use super::zoo::build_head;
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{SeededRng, Tape, Tensor, Var};

/// Fusion head hidden width.
pub const HEAD_HIDDEN: usize = 128;
/// Default metadata branch widths.
pub const FNN_HIDDEN: [usize; 2] = [64, 32];
pub const CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Image,
    Tabular,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selector {
    All,
    ImageBranch,
    TabularBranch,
    Head,
}

impl Selector {
    fn matches(self, part: Part) -> bool {
        match self {
            Selector::All => true,
            Selector::ImageBranch => part == Part::Image,
            Selector::TabularBranch => part == Part::Tabular,
            Selector::Head => part == Part::Head,
        }
    }
}

#[derive(Debug)]
pub struct FusionPass {
    /// Class probabilities `[N, 2]`; column 1 is the malignant score.
    pub output: Var,
    pub bindings: Vec<(Part, ParamId, Var)>,
    pub stat_updates: Vec<(Part, StatUpdate)>,
}

/// Image branch and optional metadata branch, concatenated into a dense head.
/// Without a metadata branch the head sees image features alone.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub image: ModelGraph,
    pub tabular: Option<ModelGraph>,
    pub head: ModelGraph,
}

/// Both branches must emit flat vectors; the head's input width is their sum.
pub fn build_fusion(
    image: ModelGraph,
    tabular: Option<ModelGraph>,
    head_hidden: usize,
    dropout_p: f64,
    seed: u64,
) -> Result<FusionModel> {
    if !matches!(image.input, InputSpec::Image { .. }) {
        return Err(Error::Shape(format!("{} does not consume images", image.name)));
    }
    let mut width = image.output_width()?;
    if let Some(t) = &tabular {
        if !matches!(t.input, InputSpec::Vector { .. }) {
            return Err(Error::Shape(format!("{} does not consume feature vectors", t.name)));
        }
        width += t.output_width()?;
    }
    let head = build_head(width, head_hidden, dropout_p, CLASSES, seed)?;
    Ok(FusionModel { image, tabular, head })
}

impl FusionModel {
    pub fn graphs(&self) -> impl Iterator<Item = (Part, &ModelGraph)> {
        std::iter::once((Part::Image, &self.image))
            .chain(self.tabular.as_ref().map(|t| (Part::Tabular, t)))
            .chain(std::iter::once((Part::Head, &self.head)))
    }

    pub fn graph(&self, part: Part) -> Option<&ModelGraph> {
        match part {
            Part::Image => Some(&self.image),
            Part::Tabular => self.tabular.as_ref(),
            Part::Head => Some(&self.head),
        }
    }

    pub fn graph_mut(&mut self, part: Part) -> Option<&mut ModelGraph> {
        match part {
            Part::Image => Some(&mut self.image),
            Part::Tabular => self.tabular.as_mut(),
            Part::Head => Some(&mut self.head),
        }
    }

    /// Every parameter in canonical order: image, tabular, head.
    pub fn params(&self) -> impl Iterator<Item = (Part, ParamId, &Parameter)> {
        self.graphs()
            .flat_map(|(part, g)| g.store.iter().map(move |(id, p)| (part, id, p)))
    }

    pub fn find(&self, name: &str) -> Option<(Part, ParamId)> {
        self.graphs()
            .find_map(|(part, g)| g.store.find(name).map(|id| (part, id)))
    }

    pub fn param_mut(&mut self, part: Part, id: ParamId) -> &mut Parameter {
        self.graph_mut(part).expect("binding refers to an existing branch").store.get_mut(id)
    }

    /// Width of the metadata vector the model expects, if it reads one.
    pub fn feature_width(&self) -> Option<usize> {
        self.tabular.as_ref().map(|t| match t.input {
            InputSpec::Vector { width } => width,
            InputSpec::Image { .. } => unreachable!("tabular branch consumes vectors"),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        images: Var,
        features: Option<Var>,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<FusionPass> {
        let mut bindings = Vec::new();
        let mut stat_updates = Vec::new();
        let mut absorb = |part: Part, pass: super::graph::GraphPass| {
            bindings.extend(pass.bindings.into_iter().map(|(id, v)| (part, id, v)));
            stat_updates.extend(pass.stat_updates.into_iter().map(|u| (part, u)));
            pass.output
        };
        let img = absorb(Part::Image, self.image.forward(tape, images, mode, rng)?);
        let joined = match (&self.tabular, features) {
            (Some(t), Some(f)) => {
                let tab = absorb(Part::Tabular, t.forward(tape, f, mode, rng)?);
                tape.concat(&[img, tab], 1)?
            }
            (Some(_), None) => {
                return Err(Error::Shape("fusion model needs a metadata feature batch".into()))
            }
            (None, _) => img,
        };
        let out = absorb(Part::Head, self.head.forward(tape, joined, mode, rng)?);
        Ok(FusionPass { output: out, bindings, stat_updates })
    }

    /// Eval-mode class probabilities `[N, 2]`.
    pub fn predict(&self, images: &Tensor, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let f = self.tabular.is_some().then(|| tape.constant(features.clone()));
        if images.shape()[0] != features.shape()[0] {
            return Err(Error::Shape(format!(
                "{} images but {} feature rows",
                images.shape()[0],
                features.shape()[0]
            )));
        }
        let mut rng = SeededRng::new(0);
        let pass = self.forward(&mut tape, x, f, Mode::Eval, &mut rng)?;
        Ok(tape.value(pass.output).clone())
    }

    pub fn commit(&mut self, updates: Vec<(Part, StatUpdate)>) {
        for (part, u) in updates {
            if let Some(g) = self.graph_mut(part) {
                g.commit(vec![u]);
            }
        }
    }

    pub fn count_params(&self, mode: CountMode) -> ParamCount {
        self.graphs()
            .map(|(_, g)| g.count_params(mode))
            .fold(ParamCount::default(), |a, b| a + b)
    }

    pub fn set_trainable(&mut self, selector: Selector, flag: bool) -> Result<()> {
        let mut touched = 0;
        for part in [Part::Image, Part::Tabular, Part::Head] {
            if !selector.matches(part) {
                continue;
            }
            if let Some(g) = self.graph_mut(part) {
                touched += g.store.len();
                g.set_trainable(flag);
            }
        }
        if touched == 0 {
            return Err(Error::Selector(format!("{selector:?}")));
        }
        Ok(())
    }

    /// Applies to every branch; see [`ModelGraph::freeze_bn_stats`].
    pub fn set_freeze_bn_stats(&mut self, flag: bool) {
        self.image.freeze_bn_stats = flag;
        if let Some(t) = &mut self.tabular {
            t.freeze_bn_stats = flag;
        }
        self.head.freeze_bn_stats = flag;
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (part, g) in self.graphs() {
            h.update(format!("{part:?}").as_bytes());
            h.update(g.fingerprint());
        }
        h.finalize().into()
    }
}
