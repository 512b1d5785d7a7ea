//! The full network: backbone, part dictionary and region head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::grouping::{AssignmentMap, PartDictionary, SmoothingKernel};
use crate::head::{AttentionVector, HeadConfig, HeadOutput, HeadParameters, Heads};
use crate::nn::{Mode, Parameters, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub parts: usize,
    pub blocks: usize,
    pub heads: Heads,
    pub attention: bool,
    pub kernel_size: usize,
    pub kernel_bandwidth: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            parts: 5,
            blocks: 2,
            heads: Heads::Single { classes: 4 },
            attention: true,
            kernel_size: 3,
            kernel_bandwidth: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub backbone: Backbone,
    pub dictionary: PartDictionary,
    pub head: HeadParameters,
    kernel: SmoothingKernel,
}

/// Graph nodes of one batched forward pass.
pub struct Forward {
    pub features: Var,
    /// `N×K×h×w` assignment.
    pub assignment: Var,
    /// `N×K` occurrence scores.
    pub occurrence: Var,
    /// `N×D×K` region features.
    pub regions: Var,
    pub head: HeadOutput,
}

/// Per-sample inference results.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub probabilities: Vec<f64>,
    pub assignment: AssignmentMap,
    pub occurrence: Vec<f64>,
    /// One attention vector per head.
    pub attention: Vec<AttentionVector>,
}

impl Model {
    /// Fresh parameters; every tensor is drawn from one generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.parts == 0 {
            return Err(Error::Config("number of parts must be positive".into()));
        }
        let kernel = SmoothingKernel::gaussian(config.kernel_size, config.kernel_bandwidth)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config.backbone.clone(), &mut rng)?;
        let dim = config.backbone.dim();
        let dictionary = PartDictionary::init(config.parts, dim, &mut rng);
        let head = HeadParameters::new(
            HeadConfig {
                dim,
                blocks: config.blocks,
                heads: config.heads,
                attention: config.attention,
            },
            &mut rng,
        )?;
        Ok(Self {
            config,
            backbone,
            dictionary,
            head,
            kernel,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stride(&self) -> usize {
        self.config.backbone.total_stride()
    }

    /// Runs the network on `N×3×H×W` images.
    pub fn forward(&mut self, s: &mut Session, images: Var) -> Result<Forward> {
        let features = self.backbone.forward(s, images)?;
        let parts = s.bind("dictionary.parts", self.dictionary.parts());
        let raw = s.bind("dictionary.raw_smoothing", self.dictionary.raw_smoothing());
        let sigmas = s.graph.sigmoid(raw);
        let assignment = s.graph.assign(features, parts, sigmas)?;
        let smoothed = s.graph.smooth(assignment, &self.kernel)?;
        let occurrence = s.graph.spatial_max(smoothed)?;
        let regions = s.graph.pool_regions(features, assignment, parts, sigmas)?;
        let head = self.head.forward(s, regions)?;
        Ok(Forward {
            features,
            assignment,
            occurrence,
            regions,
            head,
        })
    }

    /// Evaluation-mode inference in batches of `batch`.
    pub fn infer(&mut self, images: &[&Tensor], batch: usize) -> Result<Vec<Inference>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let stacked = Tensor::stack(&chunk.iter().map(|t| (*t).clone()).collect::<Vec<_>>())?;
            let mut s = Session::frozen(Mode::Eval);
            let x = s.graph.constant(stacked);
            let f = self.forward(&mut s, x)?;
            let probs = self.head.probabilities(&s.graph, &f.head.logits)?;
            let q = s.graph.value(f.assignment);
            let t = s.graph.value(f.occurrence);
            let k = self.config.parts;
            for (i, p) in probs.into_iter().enumerate() {
                out.push(Inference {
                    probabilities: p,
                    assignment: AssignmentMap::new(q.outer(i))?,
                    occurrence: t.data()[i * k..(i + 1) * k].to_vec(),
                    attention: f
                        .head
                        .attention
                        .iter()
                        .map(|&a| AttentionVector(s.graph.value(a).data()[i * k..(i + 1) * k].to_vec()))
                        .collect(),
                });
            }
        }
        Ok(out)
    }
}

impl Parameters for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit(f);
        f("dictionary.parts", self.dictionary.parts());
        f("dictionary.raw_smoothing", self.dictionary.raw_smoothing());
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_mut(f);
        f("dictionary.parts", self.dictionary.parts_mut());
        f("dictionary.raw_smoothing", self.dictionary.raw_smoothing_mut());
        self.head.visit_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit_buffers(f);
        self.head.visit_buffers(f);
    }

    fn load_buffer(&mut self, name: &str, value: &Tensor) -> Result<bool> {
        Ok(self.backbone.load_buffer(name, value)? || self.head.load_buffer(name, value)?)
    }
}
