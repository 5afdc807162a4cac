//! The assembled network: encoder, prototype source, manifold graph and
//! classifier, all sharing one parameter store.

use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{EdgeMatrix, GraphConfig, ManifoldGraph};
use crate::params::{Bound, ParamStore};
use crate::prototypes::{PrototypeConfig, PrototypeGenerator, PrototypeSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Where the prototype nodes of the graph come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtoSource {
    Generator,
    /// Encoder features of labeled inputs drawn at random per class,
    /// redrawn every step and never differentiated.
    RandomImages,
}

impl ProtoSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtoSource::Generator => "generator",
            ProtoSource::RandomImages => "random_images",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "generator" => Ok(ProtoSource::Generator),
            "random_images" => Ok(ProtoSource::RandomImages),
            other => Err(Error::config(format!("unknown prototype source {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prototypes: PrototypeConfig,
    pub graph: GraphConfig,
    /// Route features through the graph after warm-up. Off gives the plain
    /// consistency baseline.
    pub use_graph: bool,
    pub proto_source: ProtoSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            prototypes: PrototypeConfig::default(),
            graph: GraphConfig::default(),
            use_graph: true,
            proto_source: ProtoSource::Generator,
        }
    }
}

impl ModelConfig {
    /// Compact config with every feature width set to `feature_dim`.
    pub fn with_dims(input_dim: usize, classes: usize, feature_dim: usize) -> Self {
        let mut c = Self::default();
        c.encoder.input_dim = input_dim;
        c.encoder.feature_dim = feature_dim;
        c.prototypes.output_dim = feature_dim;
        c.prototypes.classes = classes;
        c.graph.feature_dim = feature_dim;
        c.graph.classes = classes;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prototypes.validate()?;
        self.graph.validate()?;
        let d = self.encoder.feature_dim;
        if self.prototypes.output_dim != d || self.graph.feature_dim != d {
            return Err(Error::config(format!(
                "feature widths disagree: encoder {d}, prototypes {}, graph {}",
                self.prototypes.output_dim, self.graph.feature_dim
            )));
        }
        if self.prototypes.classes != self.graph.classes {
            return Err(Error::config(format!(
                "class counts disagree: prototypes {}, classifier {}",
                self.prototypes.classes, self.graph.classes
            )));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.graph.classes
    }
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub generator: PrototypeGenerator,
    pub graph: ManifoldGraph,
    /// Raw inputs whose encoder features serve as prototypes when the
    /// source is [`ProtoSource::RandomImages`]; rows grouped by class.
    pub random_images: Option<Tensor>,
    graph_calls: AtomicU64,
    proto_calls: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            encoder: self.encoder.clone(),
            generator: self.generator.clone(),
            graph: self.graph.clone(),
            random_images: self.random_images.clone(),
            graph_calls: AtomicU64::new(self.graph_calls()),
            proto_calls: AtomicU64::new(self.proto_calls()),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::init(config.encoder.clone(), &mut store)?;
        let generator = PrototypeGenerator::init(config.prototypes.clone(), &mut store)?;
        let graph = ManifoldGraph::init(config.graph.clone(), &mut store)?;
        Ok(Self {
            config,
            store,
            encoder,
            generator,
            graph,
            random_images: None,
            graph_calls: AtomicU64::new(0),
            proto_calls: AtomicU64::new(0),
        })
    }

    pub fn classes(&self) -> usize {
        self.config.classes()
    }

    pub fn proto_labels(&self) -> Vec<usize> {
        self.generator.labels()
    }

    /// Number of graph evaluations so far.
    pub fn graph_calls(&self) -> u64 {
        self.graph_calls.load(Ordering::Relaxed)
    }

    /// Number of prototype evaluations so far.
    pub fn proto_calls(&self) -> u64 {
        self.proto_calls.load(Ordering::Relaxed)
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, x: Var, dropout: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.encoder.encode(tape, p, x, dropout)
    }

    /// Prototype node, P×d_f. Random-image prototypes enter as constants.
    pub fn prototypes(&self, tape: &mut Tape, p: &Bound) -> Result<Var> {
        self.proto_calls.fetch_add(1, Ordering::Relaxed);
        match self.config.proto_source {
            ProtoSource::Generator => self.generator.generate_all(tape, p),
            ProtoSource::RandomImages => {
                let images = self
                    .random_images
                    .as_ref()
                    .ok_or_else(|| Error::contract("random-image prototypes have not been drawn"))?;
                let features = self.features(images)?;
                Ok(tape.constant(features))
            }
        }
    }

    pub fn refine(&self, tape: &mut Tape, p: &Bound, features: Var, protos: Var) -> Result<Var> {
        self.graph_calls.fetch_add(1, Ordering::Relaxed);
        self.graph.refine_batch(tape, p, features, protos)
    }

    /// Class probabilities for already-computed (refined or raw) features.
    pub fn classify_probs(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<Var> {
        let logits = self.graph.classify(tape, p, features)?;
        tape.softmax_rows(logits, None)
    }

    /// Deterministic encoder features.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = self.encode(&mut tape, &p, xv, None)?;
        Ok(tape.value(f).clone())
    }

    /// Current prototypes as values.
    pub fn prototype_set(&self, iteration: u64) -> Result<PrototypeSet> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let v = self.prototypes(&mut tape, &p)?;
        let cfg = &self.config.prototypes;
        PrototypeSet::new(tape.value(v).clone(), cfg.k, cfg.classes, iteration)
    }

    /// Deterministic class probabilities. With `use_graph` each row is
    /// refined by its own graph over the current prototypes.
    pub fn predict(&self, x: &Tensor, use_graph: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut f = self.encode(&mut tape, &p, xv, None)?;
        if use_graph {
            let protos = self.prototypes(&mut tape, &p)?;
            f = self.refine(&mut tape, &p, f, protos)?;
        }
        let probs = self.classify_probs(&mut tape, &p, f)?;
        Ok(tape.value(probs).clone())
    }

    /// Edge matrices for the graph of one input row.
    pub fn adjacency(&self, input: &[f64]) -> Result<Vec<Vec<EdgeMatrix>>> {
        let x = Tensor::new(1, input.len(), input.to_vec())?;
        let f = self.features(&x)?;
        let protos = self.prototype_set(0)?;
        self.graph_calls.fetch_add(1, Ordering::Relaxed);
        self.graph.instance_edges(&self.store, f.row(0), &protos.values)
    }
}
