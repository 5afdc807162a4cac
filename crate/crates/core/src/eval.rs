//! Metrics, diagnostic exports, checkpoints and the ablation driver.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ProtoSource};
use crate::tensor::{cosine_similarity, Tensor};
use crate::trainer::{argmax, train_with_state, OptimizerState, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub error_rate: f64,
    /// `None` for classes with no rows.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::contract(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= classes || t >= classes {
                return Err(Error::contract(format!("class index outside [0, {classes})")));
            }
            confusion[t][p] += 1;
        }
        let n = truth.len();
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[c] as f64 / total as f64)
            })
            .collect();
        Ok(Self {
            error_rate: if n == 0 { 0.0 } else { 1.0 - correct as f64 / n as f64 },
            per_class_accuracy,
            confusion,
        })
    }
}

/// Metrics of `model` against the ground truth of every row of `ds`.
/// Inference is deterministic: no dropout, no perturbation.
pub fn evaluate(model: &Model, ds: &Dataset, use_graph: bool) -> Result<Metrics> {
    let truth = ds.true_labels()?;
    let probs = model.predict(&ds.x, use_graph)?;
    let predicted: Vec<usize> = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
    Metrics::from_predictions(&predicted, &truth, model.classes())
}

/// Dominant eigenpair of a symmetric PSD matrix within the complement of
/// `exclude` (orthonormal vectors already found).
fn power_iteration(m: &Tensor, exclude: &[Vec<f64>], tol: f64) -> (Vec<f64>, f64) {
    let d = m.rows();
    let project = |v: &mut Vec<f64>| {
        for e in exclude {
            let c: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(e).for_each(|(x, b)| *x -= c * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        n
    };
    let mut v: Vec<f64> = (0..d).map(|j| 1.0 + 0.1 * j as f64).collect();
    project(&mut v);
    let mut best = f64::INFINITY;
    for _ in 0..100_000 {
        let mut w = vec![0.0; d];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = m.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        if project(&mut w) == 0.0 {
            return (v, 0.0);
        }
        let diff = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        // past the tolerance, keep going while it still improves
        if diff < tol && diff >= best {
            break;
        }
        best = best.min(diff);
    }
    let mv: Vec<f64> = (0..d).map(|i| m.row(i).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
    let lambda = mv.iter().zip(&v).map(|(a, b)| a * b).sum();
    // Fixed sign: the largest-magnitude entry is positive.
    let big = (0..d).fold(0, |b, j| if v[j].abs() > v[b].abs() { j } else { b });
    if v[big] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (v, lambda)
}

/// Two-dimensional PCA projection of the rows of `x`, with the top two
/// covariance eigenvectors found by projected power iteration.
pub fn pca_2d(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.shape();
    if n == 0 {
        return Ok(Tensor::zeros(0, 2));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let centered = Tensor::from_fn(n, d, |i, j| x.get(i, j) - mean[j]);
    let cov = centered.t_matmul(&centered)?.map(|v| v / n as f64);
    let mut out = Tensor::zeros(n, 2);
    let mut found: Vec<Vec<f64>> = Vec::new();
    for k in 0..2.min(d) {
        let (v, _) = power_iteration(&cov, &found, 1e-9);
        for i in 0..n {
            out.set(i, k, centered.row(i).iter().zip(&v).map(|(a, b)| a * b).sum());
        }
        found.push(v);
    }
    Ok(out)
}

/// CSV of encoder features of every row of `ds` plus every prototype,
/// projected jointly to two dimensions. Rows without a known label get -1.
pub fn export_embeddings(model: &Model, ds: &Dataset) -> Result<String> {
    let feats = model.features(&ds.x)?;
    let protos = model.prototype_set(0)?;
    let mut rows = feats.to_rows();
    rows.extend(protos.values.to_rows());
    let proj = pca_2d(&Tensor::from_rows(&rows)?)?;
    let mut out = String::from("pc1,pc2,label,is_prototype,is_labeled\n");
    for i in 0..proj.rows() {
        let (label, is_proto, is_labeled) = if i < ds.len() {
            let l = ds.true_label(i).map_or(-1, |c| c as i64);
            (l, 0, ds.is_labeled(i) as u8)
        } else {
            (protos.labels[i - ds.len()] as i64, 1, 0)
        };
        writeln!(out, "{},{},{label},{is_proto},{is_labeled}", proj.get(i, 0), proj.get(i, 1)).unwrap();
    }
    Ok(out)
}

/// Edge matrix of the first layer and head for the graph of one input row.
pub fn export_adjacency(model: &Model, input: &[f64]) -> Result<String> {
    let edges = model.adjacency(input)?;
    Ok(edges[0][0].to_csv())
}

pub fn export_prototypes(model: &Model) -> Result<String> {
    Ok(model.prototype_set(0)?.to_csv())
}

/// Share of prototypes whose most cosine-similar feature row in `features`
/// has the prototype's own class.
pub fn prototype_alignment(protos: &Tensor, proto_labels: &[usize], features: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut hits = 0;
    for (r, &c) in proto_labels.iter().enumerate() {
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..features.rows() {
            let s = cosine_similarity(protos.row(r), features.row(i))?;
            if s > best.1 {
                best = (i, s);
            }
        }
        hits += (labels[best.0] == c) as usize;
    }
    Ok(hits as f64 / proto_labels.len().max(1) as f64)
}

/// Share of same-class prototype pairs with cosine similarity above `threshold`.
pub fn collapse_rate(protos: &Tensor, proto_labels: &[usize], threshold: f64) -> Result<f64> {
    let (mut pairs, mut collapsed) = (0, 0);
    for i in 0..protos.rows() {
        for j in i + 1..protos.rows() {
            if proto_labels[i] == proto_labels[j] {
                pairs += 1;
                collapsed += (cosine_similarity(protos.row(i), protos.row(j))? > threshold) as usize;
            }
        }
    }
    Ok(if pairs == 0 { 0.0 } else { collapsed as f64 / pairs as f64 })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Canonical `key = value` text of the run configuration.
    pub config: String,
    pub config_hash: String,
    pub input_dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub iteration: u64,
    pub params: Vec<(String, Tensor)>,
    pub velocity: Vec<Tensor>,
    pub random_images: Option<Tensor>,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn new(cfg: &RunConfig, model: &Model, opt: &OptimizerState, seed: u64) -> Self {
        Self {
            format_version: Self::VERSION,
            config: cfg.to_text(),
            config_hash: cfg.hash(),
            input_dim: model.config.encoder.input_dim,
            classes: model.classes(),
            seed,
            iteration: opt.iteration,
            params: model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            velocity: opt.velocity.clone(),
            random_images: model.random_images.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format_version != Self::VERSION {
            return Err(Error::Schema(format!(
                "checkpoint format {} is not supported",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let cfg = RunConfig::parse_str(&self.config)?;
        if cfg.hash() != self.config_hash {
            return Err(Error::Schema("checkpoint config does not match its hash".into()));
        }
        Ok(cfg)
    }

    /// Rebuild the model the checkpoint was taken from.
    pub fn model(&self) -> Result<Model> {
        let cfg = self.run_config()?;
        let setup = cfg.setup(self.input_dim, self.classes);
        let mut model = Model::new(crate::trainer::seeded_model_config(&setup.model, self.seed))?;
        model.store.load(self.params.clone())?;
        model.random_images = self.random_images.clone();
        Ok(model)
    }
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub error_rate: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    pub seed: u64,
    pub config_hash: String,
    pub iters: usize,
    pub wall_clock_s: f64,
}

/// Outcome of one training run with held-out evaluation.
#[derive(Debug)]
pub struct RunResult {
    pub model: Model,
    pub report: TrainReport,
    pub optimizer: OptimizerState,
    pub train_set: Dataset,
    pub test_metrics: Metrics,
}

impl RunResult {
    pub fn metrics_report(&self, cfg: &RunConfig) -> MetricsReport {
        MetricsReport {
            error_rate: self.test_metrics.error_rate,
            per_class_accuracy: self.test_metrics.per_class_accuracy.clone(),
            confusion: self.test_metrics.confusion.clone(),
            seed: self.report.seed,
            config_hash: cfg.hash(),
            iters: self.report.log.len(),
            wall_clock_s: self.report.wall_clock_s,
        }
    }
}

/// Build the data described by `cfg`, train with `seed` and evaluate on the
/// held-out set (or, for CSV input, on the rows whose labels are visible).
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<RunResult> {
    let train_set = cfg.train_set_for(seed)?;
    let setup = cfg.setup(train_set.dim(), train_set.classes);
    let (model, report, optimizer) = train_with_state(&train_set, &setup, seed)?;
    let use_graph = model.config.use_graph;
    let test_metrics = match cfg.test_set_for(seed) {
        Ok(test) => evaluate(&model, &test, use_graph)?,
        Err(_) => {
            let labeled = train_set.labeled_indices();
            let probs = model.predict(&train_set.x.select_rows(&labeled), use_graph)?;
            let predicted: Vec<usize> = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
            let truth: Vec<usize> = labeled.iter().map(|&i| train_set.visible_label(i).unwrap()).collect();
            Metrics::from_predictions(&predicted, &truth, model.classes())?
        }
    };
    Ok(RunResult {
        model,
        report,
        optimizer,
        train_set,
        test_metrics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    RandomImages,
    NoAnchor,
    NoDivergence,
    Neither,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::RandomImages,
        Variant::NoAnchor,
        Variant::NoDivergence,
        Variant::Neither,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::RandomImages => "random_images",
            Variant::NoAnchor => "no_anchor",
            Variant::NoDivergence => "no_divergence",
            Variant::Neither => "no_anchor_no_divergence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        let w = &mut c.objective.weights;
        match self {
            Variant::Full => {}
            Variant::RandomImages => {
                c.model.proto_source = ProtoSource::RandomImages;
                w.anchor = 0.0;
                w.divergence = 0.0;
                w.proto_clf = 0.0;
            }
            Variant::NoAnchor => w.anchor = 0.0,
            Variant::NoDivergence => w.divergence = 0.0,
            Variant::Neither => {
                w.anchor = 0.0;
                w.divergence = 0.0;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub errors: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per variant with the test error over `seeds`. Runs are
/// independent and execute in parallel.
pub fn run_ablation(base: &RunConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.len() < 2 {
        return Err(Error::config("ablation needs at least 2 seeds"));
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let errors: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(v, s)| Ok(run_seed(&variants[v].apply(base), s)?.test_metrics.error_rate))
        .collect();
    let mut rows = Vec::with_capacity(variants.len());
    let mut it = errors.into_iter();
    for v in variants {
        let errs = it.by_ref().take(seeds.len()).collect::<Result<Vec<f64>>>()?;
        let (mean, std) = mean_std(&errs);
        rows.push(AblationRow {
            variant: v.name().to_string(),
            errors: errs,
            mean,
            std,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,mean_error,std_error,n_seeds,errors\n");
    for r in rows {
        let errs: Vec<String> = r.errors.iter().map(|e| e.to_string()).collect();
        writeln!(out, "{},{},{},{},{}", r.variant, r.mean, r.std, r.errors.len(), errs.join(";")).unwrap();
    }
    out
}
