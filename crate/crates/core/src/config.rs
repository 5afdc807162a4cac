//! Flat `key = value` run configuration covering data, model, loss and
//! training settings.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `data.generator` | `two_moons` | `two_moons`, `blobs`, `rings` or `csv` |
//! | `data.path` | | CSV file when the generator is `csv` |
//! | `data.n` | 1000 | training rows |
//! | `data.classes` | 2 | classes (blobs, rings) |
//! | `data.noise` | 0.1 | Gaussian noise std |
//! | `data.spread` | 3.0 | blob center radius |
//! | `data.radii` | `1,2` | ring radii |
//! | `data.n_labeled` | 6 | labeled rows kept after splitting |
//! | `data.stratified` | true | stratified split |
//! | `data.seed` | 0 | generator and split seed |
//! | `data.test_n` | 1000 | rows in the held-out test set |
//! | `model.hidden` | `128,128` | encoder hidden widths |
//! | `model.feature_dim` | 64 | feature width |
//! | `model.leaky_slope` | 0.1 | leaky ReLU slope everywhere |
//! | `model.dropout` | 0.0 | encoder dropout |
//! | `model.k` | 20 | prototypes per class |
//! | `model.embed_dim_k`, `model.embed_dim_c` | 32 | generator embedding widths |
//! | `model.proto_hidden` | `128` | generator MLP hidden widths |
//! | `model.embed_init_std` | 0.05 | generator embedding init std |
//! | `model.heads` | 1 | attention heads |
//! | `model.edge_dim` | 64 | edge embedding width |
//! | `model.layers` | 1 | graph layers |
//! | `model.logit_scaling` | false | divide edge logits by sqrt(edge_dim) |
//! | `model.use_graph` | true | graph after warm-up |
//! | `model.proto_source` | `generator` | `generator` or `random_images` |
//! | `model.init_seed` | 0 | base init seed |
//! | `loss.consistency`, `loss.entropy`, `loss.anchor`, `loss.divergence`, `loss.proto_clf` | 1, 0.1, 1, 1, 0.1 | term weights |
//! | `loss.margin_l`, `loss.margin_a`, `loss.margin_d` | 0.1, 0.15, 0.75 | margins |
//! | `loss.triplet_cap` | 20000 | triplets per step |
//! | `vat.eps`, `vat.xi`, `vat.power_iters` | 0.5, 1e-6, 1 | perturbation settings |
//! | `train.iters` | 5000 | iterations |
//! | `train.frac_warmup`, `train.frac_rampup`, `train.frac_rampdown`, `train.frac_ending` | 2/282, 120/282, 120/282, 40/282 | stage shares |
//! | `train.lr_warm_start`, `train.lr_base`, `train.lr_max`, `train.lr_final` | 2e-4, 2e-3, 2e-2, 2e-5 | learning-rate anchors |
//! | `train.momentum_high`, `train.momentum_low` | 0.95, 0.85 | momentum anchors |
//! | `train.batch_labeled`, `train.batch_unlabeled` | 32, 128 | batch composition |
//! | `train.clip_norm` | 10 | gradient clipping, 0 disables |

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{gen_blobs, gen_rings, gen_two_moons, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::model::{ModelConfig, ProtoSource};
use crate::trainer::{TrainConfig, TrainSetup};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    TwoMoons,
    Blobs,
    Rings,
    Csv,
}

impl Generator {
    pub fn as_str(self) -> &'static str {
        match self {
            Generator::TwoMoons => "two_moons",
            Generator::Blobs => "blobs",
            Generator::Rings => "rings",
            Generator::Csv => "csv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "two_moons" => Generator::TwoMoons,
            "blobs" => Generator::Blobs,
            "rings" => Generator::Rings,
            "csv" => Generator::Csv,
            other => return Err(Error::config(format!("unknown generator {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub generator: Generator,
    pub path: Option<String>,
    pub n: usize,
    pub classes: usize,
    pub noise: f64,
    pub spread: f64,
    pub radii: Vec<f64>,
    pub n_labeled: usize,
    pub stratified: bool,
    pub seed: u64,
    pub test_n: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            generator: Generator::TwoMoons,
            path: None,
            n: 1000,
            classes: 2,
            noise: 0.1,
            spread: 3.0,
            radii: vec![1.0, 2.0],
            n_labeled: 6,
            stratified: true,
            seed: 0,
            test_n: 1000,
        }
    }
}

impl DataSpec {
    fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        match self.generator {
            Generator::TwoMoons => gen_two_moons(n, self.noise, seed),
            Generator::Blobs => gen_blobs(n, self.classes, self.spread, self.noise, seed),
            Generator::Rings => gen_rings(n, self.classes, &self.radii, self.noise, seed),
            Generator::Csv => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::config("data.generator = csv needs data.path"))?;
                Dataset::load_csv(path)
            }
        }
    }

    /// Full generated dataset before any labels are hidden.
    pub fn full(&self) -> Result<Dataset> {
        self.generate(self.n, self.seed)
    }

    /// Training set with `n_labeled` visible labels. A CSV file that already
    /// hides labels is used as is.
    pub fn train_set(&self) -> Result<Dataset> {
        let ds = self.full()?;
        if self.generator == Generator::Csv && ds.labeled_indices().len() < ds.len() {
            return Ok(ds);
        }
        ds.split_labeled(&SplitSpec {
            n_labeled: self.n_labeled,
            stratified: self.stratified,
            seed: self.seed,
        })
    }

    /// Held-out set drawn from the same generator with a different seed.
    pub fn test_set(&self) -> Result<Dataset> {
        if self.generator == Generator::Csv {
            return Err(Error::config("csv data has no generated test set"));
        }
        self.generate(self.test_n, self.seed.wrapping_add(0x5EED_7E57))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSpec,
    pub model: ModelConfig,
    pub objective: Objective,
    pub train: TrainConfig,
    /// Base value of the three init seeds.
    pub init_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSpec::default(),
            model: ModelConfig::default(),
            objective: Objective::default(),
            train: TrainConfig::default(),
            init_seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Set one documented key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.data;
        let m = &mut self.model;
        let w = &mut self.objective.weights;
        let mg = &mut self.objective.margins;
        let t = &mut self.train;
        match key {
            "data.generator" => d.generator = Generator::parse(v)?,
            "data.path" => d.path = if v.is_empty() { None } else { Some(v.to_string()) },
            "data.n" => d.n = parse(key, v)?,
            "data.classes" => d.classes = parse(key, v)?,
            "data.noise" => d.noise = parse(key, v)?,
            "data.spread" => d.spread = parse(key, v)?,
            "data.radii" => d.radii = parse_list(key, v)?,
            "data.n_labeled" => d.n_labeled = parse(key, v)?,
            "data.stratified" => d.stratified = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "data.test_n" => d.test_n = parse(key, v)?,
            "model.hidden" => m.encoder.hidden_dims = parse_list(key, v)?,
            "model.feature_dim" => m.encoder.feature_dim = parse(key, v)?,
            "model.leaky_slope" => m.encoder.leaky_slope = parse(key, v)?,
            "model.dropout" => m.encoder.dropout_rate = parse(key, v)?,
            "model.k" => m.prototypes.k = parse(key, v)?,
            "model.embed_dim_k" => m.prototypes.embed_dim_k = parse(key, v)?,
            "model.embed_dim_c" => m.prototypes.embed_dim_c = parse(key, v)?,
            "model.proto_hidden" => m.prototypes.mlp_hidden = parse_list(key, v)?,
            "model.embed_init_std" => m.prototypes.embed_init_std = parse(key, v)?,
            "model.heads" => m.graph.heads = parse(key, v)?,
            "model.edge_dim" => m.graph.edge_dim = parse(key, v)?,
            "model.layers" => m.graph.layers = parse(key, v)?,
            "model.logit_scaling" => m.graph.logit_scaling = parse(key, v)?,
            "model.use_graph" => m.use_graph = parse(key, v)?,
            "model.proto_source" => m.proto_source = ProtoSource::parse(v)?,
            "model.init_seed" => self.init_seed = parse(key, v)?,
            "loss.consistency" => w.consistency = parse(key, v)?,
            "loss.entropy" => w.entropy = parse(key, v)?,
            "loss.anchor" => w.anchor = parse(key, v)?,
            "loss.divergence" => w.divergence = parse(key, v)?,
            "loss.proto_clf" => w.proto_clf = parse(key, v)?,
            "loss.margin_l" => mg.magnitude = parse(key, v)?,
            "loss.margin_a" => mg.angle = parse(key, v)?,
            "loss.margin_d" => mg.divergence = parse(key, v)?,
            "loss.triplet_cap" => self.objective.triplet_cap = parse(key, v)?,
            "vat.eps" => self.objective.vat.eps = parse(key, v)?,
            "vat.xi" => self.objective.vat.xi = parse(key, v)?,
            "vat.power_iters" => self.objective.vat.power_iters = parse(key, v)?,
            "train.iters" => t.total_iters = parse(key, v)?,
            "train.frac_warmup" => t.stage_fractions[0] = parse(key, v)?,
            "train.frac_rampup" => t.stage_fractions[1] = parse(key, v)?,
            "train.frac_rampdown" => t.stage_fractions[2] = parse(key, v)?,
            "train.frac_ending" => t.stage_fractions[3] = parse(key, v)?,
            "train.lr_warm_start" => t.lr_warm_start = parse(key, v)?,
            "train.lr_base" => t.lr_base = parse(key, v)?,
            "train.lr_max" => t.lr_max = parse(key, v)?,
            "train.lr_final" => t.lr_final = parse(key, v)?,
            "train.momentum_high" => t.momentum_high = parse(key, v)?,
            "train.momentum_low" => t.momentum_low = parse(key, v)?,
            "train.batch_labeled" => t.batch_labeled = parse(key, v)?,
            "train.batch_unlabeled" => t.batch_unlabeled = parse(key, v)?,
            "train.clip_norm" => {
                let c: f64 = parse(key, v)?;
                t.clip_norm = if c == 0.0 { None } else { Some(c) };
            }
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let m = &self.model;
        let w = &self.objective.weights;
        let mg = &self.objective.margins;
        let t = &self.train;
        vec![
            ("data.generator", d.generator.as_str().to_string()),
            ("data.path", d.path.clone().unwrap_or_default()),
            ("data.n", d.n.to_string()),
            ("data.classes", d.classes.to_string()),
            ("data.noise", d.noise.to_string()),
            ("data.spread", d.spread.to_string()),
            ("data.radii", list(&d.radii)),
            ("data.n_labeled", d.n_labeled.to_string()),
            ("data.stratified", d.stratified.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.test_n", d.test_n.to_string()),
            ("model.hidden", list(&m.encoder.hidden_dims)),
            ("model.feature_dim", m.encoder.feature_dim.to_string()),
            ("model.leaky_slope", m.encoder.leaky_slope.to_string()),
            ("model.dropout", m.encoder.dropout_rate.to_string()),
            ("model.k", m.prototypes.k.to_string()),
            ("model.embed_dim_k", m.prototypes.embed_dim_k.to_string()),
            ("model.embed_dim_c", m.prototypes.embed_dim_c.to_string()),
            ("model.proto_hidden", list(&m.prototypes.mlp_hidden)),
            ("model.embed_init_std", m.prototypes.embed_init_std.to_string()),
            ("model.heads", m.graph.heads.to_string()),
            ("model.edge_dim", m.graph.edge_dim.to_string()),
            ("model.layers", m.graph.layers.to_string()),
            ("model.logit_scaling", m.graph.logit_scaling.to_string()),
            ("model.use_graph", m.use_graph.to_string()),
            ("model.proto_source", m.proto_source.as_str().to_string()),
            ("model.init_seed", self.init_seed.to_string()),
            ("loss.consistency", w.consistency.to_string()),
            ("loss.entropy", w.entropy.to_string()),
            ("loss.anchor", w.anchor.to_string()),
            ("loss.divergence", w.divergence.to_string()),
            ("loss.proto_clf", w.proto_clf.to_string()),
            ("loss.margin_l", mg.magnitude.to_string()),
            ("loss.margin_a", mg.angle.to_string()),
            ("loss.margin_d", mg.divergence.to_string()),
            ("loss.triplet_cap", self.objective.triplet_cap.to_string()),
            ("vat.eps", self.objective.vat.eps.to_string()),
            ("vat.xi", self.objective.vat.xi.to_string()),
            ("vat.power_iters", self.objective.vat.power_iters.to_string()),
            ("train.iters", t.total_iters.to_string()),
            ("train.frac_warmup", t.stage_fractions[0].to_string()),
            ("train.frac_rampup", t.stage_fractions[1].to_string()),
            ("train.frac_rampdown", t.stage_fractions[2].to_string()),
            ("train.frac_ending", t.stage_fractions[3].to_string()),
            ("train.lr_warm_start", t.lr_warm_start.to_string()),
            ("train.lr_base", t.lr_base.to_string()),
            ("train.lr_max", t.lr_max.to_string()),
            ("train.lr_final", t.lr_final.to_string()),
            ("train.momentum_high", t.momentum_high.to_string()),
            ("train.momentum_low", t.momentum_low.to_string()),
            ("train.batch_labeled", t.batch_labeled.to_string()),
            ("train.batch_unlabeled", t.batch_unlabeled.to_string()),
            ("train.clip_norm", t.clip_norm.unwrap_or(0.0).to_string()),
        ]
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            cfg.set(k.trim(), v).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form: every key, one per line.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Data spec for run `seed`: the data seed is offset by the run seed, so
    /// each run gets its own draw and split.
    pub fn data_for(&self, seed: u64) -> DataSpec {
        let mut d = self.data.clone();
        d.seed = d.seed.wrapping_add(seed);
        d
    }

    pub fn train_set_for(&self, seed: u64) -> Result<Dataset> {
        self.data_for(seed).train_set()
    }

    pub fn test_set_for(&self, seed: u64) -> Result<Dataset> {
        self.data_for(seed).test_set()
    }

    /// Training setup for a dataset with `input_dim` columns and `classes`
    /// classes.
    pub fn setup(&self, input_dim: usize, classes: usize) -> TrainSetup {
        let mut model = self.model.clone();
        model.encoder.input_dim = input_dim;
        model.prototypes.output_dim = model.encoder.feature_dim;
        model.graph.feature_dim = model.encoder.feature_dim;
        model.prototypes.classes = classes;
        model.graph.classes = classes;
        model.encoder.init_seed = self.init_seed;
        model.prototypes.init_seed = self.init_seed.wrapping_add(1);
        model.graph.init_seed = self.init_seed.wrapping_add(2);
        TrainSetup {
            model,
            objective: self.objective.clone(),
            train: self.train.clone(),
        }
    }
}
