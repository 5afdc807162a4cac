//! Nesterov SGD under a four-stage one-cycle schedule, with a warm-up stage
//! that trains encoder and classifier without the graph.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossContext, Objective, Stage};
use crate::model::{Model, ModelConfig, ProtoSource};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_iters: usize,
    /// Warm-up, ramp-up, ramp-down and ending shares of `total_iters`.
    pub stage_fractions: [f64; 4],
    pub lr_warm_start: f64,
    pub lr_base: f64,
    pub lr_max: f64,
    pub lr_final: f64,
    pub momentum_high: f64,
    pub momentum_low: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 5000,
            stage_fractions: [2.0 / 282.0, 120.0 / 282.0, 120.0 / 282.0, 40.0 / 282.0],
            lr_warm_start: 2e-4,
            lr_base: 2e-3,
            lr_max: 2e-2,
            lr_final: 2e-5,
            momentum_high: 0.95,
            momentum_low: 0.85,
            batch_labeled: 32,
            batch_unlabeled: 128,
            clip_norm: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::config("total_iters must be >= 1"));
        }
        let f = &self.stage_fractions;
        if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("stage fractions must be >= 0 and sum to 1: {f:?}")));
        }
        let lrs = [self.lr_warm_start, self.lr_base, self.lr_max, self.lr_final];
        if lrs.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("learning rates must be > 0: {lrs:?}")));
        }
        for m in [self.momentum_high, self.momentum_low] {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::config(format!("momentum {m} outside [0, 1)")));
            }
        }
        if self.batch_labeled == 0 {
            return Err(Error::config("batch_labeled must be >= 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm must be > 0"));
            }
        }
        Ok(())
    }

    /// Iteration at which each stage ends, rounded to whole iterations.
    pub fn stage_ends(&self) -> [usize; 4] {
        let t = self.total_iters as f64;
        let mut acc = 0.0;
        let mut ends = [0; 4];
        for (e, f) in ends.iter_mut().zip(&self.stage_fractions) {
            acc += f;
            *e = ((acc * t).round() as usize).min(self.total_iters);
        }
        ends[3] = self.total_iters;
        ends
    }

    pub fn stage_at(&self, iter: usize) -> Stage {
        if iter < self.stage_ends()[0] {
            Stage::WarmUp
        } else {
            Stage::Full
        }
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (1.0 - t) * a + t * b
}

fn progress(iter: usize, start: usize, end: usize) -> f64 {
    if end == start {
        1.0
    } else {
        (iter - start) as f64 / (end - start) as f64
    }
}

/// Learning rate and momentum at `iter`, for `0 <= iter <= total_iters`.
pub fn schedule_at(cfg: &TrainConfig, iter: usize) -> Result<(f64, f64)> {
    if iter > cfg.total_iters {
        return Err(Error::contract(format!(
            "schedule queried at iteration {iter} beyond total {}",
            cfg.total_iters
        )));
    }
    let [w, up, down, _] = cfg.stage_ends();
    let (hi, lo) = (cfg.momentum_high, cfg.momentum_low);
    Ok(if iter <= w {
        (lerp(cfg.lr_warm_start, cfg.lr_base, progress(iter, 0, w)), hi)
    } else if iter <= up {
        let t = progress(iter, w, up);
        (lerp(cfg.lr_base, cfg.lr_max, t), lerp(hi, lo, t))
    } else if iter <= down {
        let t = progress(iter, up, down);
        (lerp(cfg.lr_max, cfg.lr_base, t), lerp(lo, hi, t))
    } else {
        let t = progress(iter, down, cfg.total_iters);
        (lerp(cfg.lr_base, cfg.lr_final, t), hi)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub iteration: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            velocity: store.values().iter().map(|v| Tensor::zeros(v.rows(), v.cols())).collect(),
            iteration: 0,
        }
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One Nesterov step: `v <- mu v - lr g`, `p <- p + mu v - lr g`.
pub fn sgd_step(store: &mut ParamStore, grads: &[Tensor], state: &mut OptimizerState, lr: f64, momentum: f64) -> Result<()> {
    if grads.len() != store.len() || state.velocity.len() != store.len() {
        return Err(Error::contract(format!(
            "{} gradients and {} velocities for {} parameters",
            grads.len(),
            state.velocity.len(),
            store.len()
        )));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::Dimension {
                op: "sgd_step",
                left: store.get(id).shape(),
                right: g.shape(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, (g, v)) in ids.into_iter().zip(grads.iter().zip(state.velocity.iter_mut())) {
        let p = store.get_mut(id);
        for ((pk, vk), gk) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vk = momentum * *vk - lr * gk;
            *pk += momentum * *vk - lr * gk;
        }
    }
    state.iteration += 1;
    Ok(())
}

/// Everything `train` needs besides the data and the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub objective: Objective,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: usize,
    pub lr: f64,
    pub momentum: f64,
    pub warm_up: bool,
    pub losses: [f64; 9],
}

impl IterLog {
    pub fn breakdown(&self) -> LossBreakdown {
        let l = self.losses;
        LossBreakdown {
            clf_i: l[0],
            con: l[1],
            em: l[2],
            mag: l[3],
            ang: l[4],
            bound: l[5],
            div: l[6],
            clf_p: l[7],
            total: l[8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub log: Vec<IterLog>,
    /// Error of the final model on the labeled rows it was trained on.
    pub labeled_error: f64,
    pub wall_clock_s: f64,
    /// Steps whose triplet set was subsampled.
    pub triplet_subsampled_steps: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("iter,{},lr,momentum\n", LossBreakdown::CSV_HEADER);
        for r in &self.log {
            out.push_str(&r.iter.to_string());
            for v in r.losses {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push_str(&format!(",{},{}\n", r.lr, r.momentum));
        }
        out
    }
}

/// Offset every init seed in `cfg` by a function of the run seed.
pub fn seeded_model_config(cfg: &ModelConfig, seed: u64) -> ModelConfig {
    let mix = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut c = cfg.clone();
    c.encoder.init_seed = c.encoder.init_seed.wrapping_add(mix);
    c.prototypes.init_seed = c.prototypes.init_seed.wrapping_add(mix);
    c.graph.init_seed = c.graph.init_seed.wrapping_add(mix);
    c
}

/// Draw K labeled inputs per class, without replacement where the class has
/// at least K labeled rows.
pub fn draw_random_images(ds: &Dataset, k: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(k * classes);
    for c in 0..classes {
        let pool: Vec<usize> = ds
            .labeled_indices()
            .into_iter()
            .filter(|&i| ds.visible_label(i) == Some(c))
            .collect();
        if pool.is_empty() {
            return Err(Error::config(format!("class {c} has no labeled rows")));
        }
        let mut picked = Vec::with_capacity(k);
        while picked.len() < k {
            let take = (k - picked.len()).min(pool.len());
            picked.extend(sample(rng, pool.len(), take).into_iter().map(|j| pool[j]));
        }
        rows.extend(picked);
    }
    Ok(ds.x.select_rows(&rows))
}

/// Fraction of rows whose argmax disagrees with `labels`.
pub(crate) fn error_rate(probs: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(probs.row(i)) != y)
        .count();
    wrong as f64 / labels.len() as f64
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Train a fresh model. The result depends only on the inputs.
pub fn train(ds: &Dataset, setup: &TrainSetup, seed: u64) -> Result<(Model, TrainReport)> {
    let (model, report, _) = train_with_state(ds, setup, seed)?;
    Ok((model, report))
}

/// [`train`], also returning the final optimizer state.
pub fn train_with_state(ds: &Dataset, setup: &TrainSetup, seed: u64) -> Result<(Model, TrainReport, OptimizerState)> {
    setup.validate()?;
    let tcfg = &setup.train;
    if ds.labeled_indices().is_empty() {
        return Err(Error::config("dataset has no labeled rows"));
    }
    if ds.dim() != setup.model.encoder.input_dim || ds.classes != setup.model.classes() {
        return Err(Error::config(format!(
            "dataset is {}-dimensional with {} classes, model expects {} and {}",
            ds.dim(),
            ds.classes,
            setup.model.encoder.input_dim,
            setup.model.classes()
        )));
    }
    let tainted_before = ds.hidden_labels_touched();
    let start = Instant::now();
    let mut model = Model::new(seeded_model_config(&setup.model, seed))?;
    let b_u = tcfg.batch_unlabeled.min(ds.unlabeled_indices().len());
    let mut sampler = BatchSampler::new(ds, tcfg.batch_labeled, b_u)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = OptimizerState::new(&model.store);
    let mut log = Vec::with_capacity(tcfg.total_iters);
    let mut subsampled = 0;
    let pcfg = setup.model.prototypes.clone();

    for iter in 0..tcfg.total_iters {
        let stage = tcfg.stage_at(iter);
        let (lr, mu) = schedule_at(tcfg, iter)?;
        let batch = sampler.sample(ds, &mut rng)?;
        if stage == Stage::Full && setup.model.proto_source == ProtoSource::RandomImages {
            model.random_images = Some(draw_random_images(ds, pcfg.k, pcfg.classes, &mut rng)?);
        }
        let step = (|| {
            let ctx = LossContext::prepare(&model, &batch, &setup.objective, stage, &mut rng)?;
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, true);
            let (loss, breakdown) = total_loss(&mut tape, &model, &p, &batch, &ctx, &setup.objective)?;
            let g = tape.backward(loss)?;
            let grads: Vec<Tensor> = p.vars().iter().map(|&v| g.wrt(v)).collect();
            Ok::<_, Error>((breakdown, grads, ctx.triplets.subsampled))
        })();
        let (breakdown, mut grads, sub) = step.map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!(
                "{m} at iteration {iter}; last good parameters are from iteration {}",
                iter.saturating_sub(1)
            )),
            other => other,
        })?;
        subsampled += sub as usize;
        if let Some(c) = tcfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        sgd_step(&mut model.store, &grads, &mut opt, lr, mu)?;
        log.push(IterLog {
            iter,
            lr,
            momentum: mu,
            warm_up: stage == Stage::WarmUp,
            losses: breakdown.values(),
        });
    }

    if !tainted_before && ds.hidden_labels_touched() {
        return Err(Error::contract("training read a hidden label"));
    }
    let use_graph = setup.model.use_graph && tcfg.stage_ends()[0] < tcfg.total_iters;
    let labeled = ds.labeled_indices();
    let probs = model.predict(&ds.x.select_rows(&labeled), use_graph)?;
    let labels: Vec<usize> = labeled.iter().map(|&i| ds.visible_label(i).expect("labeled")).collect();
    let report = TrainReport {
        seed,
        log,
        labeled_error: error_rate(&probs, &labels),
        wall_clock_s: start.elapsed().as_secs_f64(),
        triplet_subsampled_steps: subsampled,
    };
    Ok((model, report, opt))
}
