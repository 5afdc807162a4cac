use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::terms::{
    anchor_boundary, anchor_magnitude, anchor_triplet, consistency, cross_entropy, divergence, entropy_min,
    enumerate_triplets, pseudo_label, TripletSample,
};
use super::vat::vat_direction;
use super::{LossWeights, Margins, VatConfig};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::Bound;
use crate::prototypes::{averaging_matrix, class_centers};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Training stage. Warm-up trains the encoder and classifier alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    WarmUp,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub margins: Margins,
    pub vat: VatConfig,
    /// Upper bound on triplets per step before uniform subsampling.
    pub triplet_cap: usize,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            margins: Margins::default(),
            vat: VatConfig::default(),
            triplet_cap: 20_000,
        }
    }
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.margins.validate()?;
        self.vat.validate()?;
        if self.triplet_cap == 0 {
            return Err(Error::config("triplet_cap must be >= 1"));
        }
        Ok(())
    }
}

/// Whether a step in `stage` evaluates prototypes at all.
pub fn needs_prototypes(config: &ModelConfig, weights: &LossWeights, stage: Stage) -> bool {
    stage == Stage::Full && (config.use_graph || weights.uses_prototypes())
}

/// Per-term values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub clf_i: f64,
    pub con: f64,
    pub em: f64,
    pub mag: f64,
    pub ang: f64,
    pub bound: f64,
    pub div: f64,
    pub clf_p: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "l_clf_i,l_con,l_em,l_mag,l_ang,l_bound,l_div,l_clf_p,total";

    pub fn values(&self) -> [f64; 9] {
        [
            self.clf_i, self.con, self.em, self.mag, self.ang, self.bound, self.div, self.clf_p, self.total,
        ]
    }

    /// Weighted sum of the terms, recomputed from the breakdown.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.clf_i
            + w.consistency * self.con
            + w.entropy * self.em
            + w.anchor * (self.mag + self.ang + self.bound)
            + w.divergence * self.div
            + w.proto_clf * self.clf_p
    }
}

/// Everything one step treats as fixed: the adversarial perturbation, the
/// clean predictions it is compared against, the length scales, pseudo-labels,
/// the triplet sample and the dropout seeds. Fixing these makes the objective
/// a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub stage: Stage,
    /// Per unlabeled row, `None` when the consistency term is off.
    pub r_adv: Option<Tensor>,
    pub clean_probs: Option<Tensor>,
    /// Mean feature length over the batch.
    pub feature_scale: f64,
    /// Mean prototype length.
    pub proto_scale: f64,
    pub pseudo_labels: Vec<usize>,
    /// Labels of batch rows followed by prototype labels.
    pub entity_labels: Vec<usize>,
    pub triplets: TripletSample,
    pub dropout_seeds: (u64, u64),
}

fn mean_row_norm(t: &Tensor) -> f64 {
    let n = t.row_norms();
    if n.is_empty() {
        0.0
    } else {
        n.iter().sum::<f64>() / n.len() as f64
    }
}

fn range(a: usize, b: usize) -> Vec<usize> {
    (a..b).collect()
}

impl LossContext {
    pub fn prepare(model: &Model, batch: &Batch, obj: &Objective, stage: Stage, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = &obj.weights;
        let (n_l, n) = (batch.n_labeled(), batch.x.rows());
        let n_u = n - n_l;
        let dropout_seeds = (rng.random(), rng.random());
        let with_protos = needs_prototypes(&model.config, w, stage);
        let graph_on = stage == Stage::Full && model.config.use_graph;

        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let x = tape.constant(batch.x.clone());
        let mut drop = ChaCha8Rng::seed_from_u64(dropout_seeds.0);
        let feats = model.encode(&mut tape, &p, x, Some(&mut drop))?;
        let protos = if with_protos {
            Some(model.prototypes(&mut tape, &p)?)
        } else {
            None
        };
        let head = match protos {
            Some(pv) if graph_on => model.refine(&mut tape, &p, feats, pv)?,
            _ => feats,
        };
        let probs = model.classify_probs(&mut tape, &p, head)?;
        let feat_values = tape.value(feats).clone();
        let proto_values = protos.map(|v| tape.value(v).clone());

        let mut ctx = LossContext {
            stage,
            r_adv: None,
            clean_probs: None,
            feature_scale: mean_row_norm(&feat_values),
            proto_scale: proto_values.as_ref().map_or(0.0, mean_row_norm),
            pseudo_labels: Vec::new(),
            entity_labels: Vec::new(),
            triplets: TripletSample::default(),
            dropout_seeds,
        };

        if n_u > 0 && w.consistency > 0.0 {
            let clean = tape.value(probs).select_rows(&range(n_l, n));
            let xu = batch.x.select_rows(&range(n_l, n));
            let fixed_protos = if graph_on { proto_values.clone() } else { None };
            let predict = |t: &mut Tape, xr: Var| {
                let p = model.store.bind(t, false);
                let mut f = model.encode(t, &p, xr, None)?;
                if let Some(pv) = &fixed_protos {
                    let pc = t.constant(pv.clone());
                    f = model.refine(t, &p, f, pc)?;
                }
                model.classify_probs(t, &p, f)
            };
            ctx.r_adv = Some(vat_direction(predict, &xu, &clean, &obj.vat, rng)?);
            ctx.clean_probs = Some(clean);
        }

        if let Some(pv) = &proto_values {
            let cfg = &model.config.prototypes;
            let centers = averaging_matrix(cfg.k, cfg.classes).matmul(pv)?;
            let unlabeled = feat_values.select_rows(&range(n_l, n));
            ctx.pseudo_labels = pseudo_label(&unlabeled, &centers)?;
            ctx.entity_labels = batch
                .labels
                .iter()
                .chain(&ctx.pseudo_labels)
                .copied()
                .chain(model.proto_labels())
                .collect();
            if w.anchor > 0.0 {
                if !(ctx.feature_scale > 0.0) {
                    return Err(Error::DegenerateVector("mean feature length"));
                }
                ctx.triplets = enumerate_triplets(&ctx.entity_labels, cfg.classes, obj.triplet_cap, rng);
            }
            if w.divergence > 0.0 && !(ctx.proto_scale > 0.0) {
                return Err(Error::DegenerateVector("mean prototype length"));
            }
        }
        Ok(ctx)
    }
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss term {name}")))
    }
}

/// Weighted objective on `tape`, differentiable with respect to `p`.
///
/// Terms with zero weight are not evaluated. During warm-up the graph and
/// every prototype term are skipped.
pub fn total_loss(
    tape: &mut Tape,
    model: &Model,
    p: &Bound,
    batch: &Batch,
    ctx: &LossContext,
    obj: &Objective,
) -> Result<(Var, LossBreakdown)> {
    let w = &obj.weights;
    let stage = ctx.stage;
    let (n_l, n) = (batch.n_labeled(), batch.x.rows());
    let n_u = n - n_l;
    let graph_on = stage == Stage::Full && model.config.use_graph;
    let mut out = LossBreakdown::default();

    let x = tape.constant(batch.x.clone());
    let mut drop = ChaCha8Rng::seed_from_u64(ctx.dropout_seeds.0);
    let feats = model.encode(tape, p, x, Some(&mut drop))?;
    let protos = if needs_prototypes(&model.config, w, stage) {
        Some(model.prototypes(tape, p)?)
    } else {
        None
    };
    let head = match protos {
        Some(pv) if graph_on => model.refine(tape, p, feats, pv)?,
        _ => feats,
    };
    let probs = model.classify_probs(tape, p, head)?;

    let lp = tape.select_rows(probs, &range(0, n_l))?;
    let mut total = cross_entropy(tape, lp, &batch.labels)?;
    out.clf_i = finite("clf_i", tape.value(total).item())?;

    let add = |tape: &mut Tape, total: &mut Var, term: Var, weight: f64, name: &str| -> Result<f64> {
        let v = finite(name, tape.value(term).item())?;
        let scaled = tape.scale(term, weight);
        *total = tape.add(*total, scaled)?;
        Ok(v)
    };

    if n_u > 0 {
        if w.entropy > 0.0 {
            let up = tape.select_rows(probs, &range(n_l, n))?;
            let em = entropy_min(tape, up)?;
            out.em = add(tape, &mut total, em, w.entropy, "em")?;
        }
        if w.consistency > 0.0 {
            let (r_adv, clean) = ctx
                .r_adv
                .as_ref()
                .zip(ctx.clean_probs.as_ref())
                .ok_or_else(|| Error::contract("loss context has no perturbation for the consistency term"))?;
            let mut xu = batch.x.select_rows(&range(n_l, n));
            if xu.shape() != r_adv.shape() {
                return Err(Error::Dimension {
                    op: "consistency perturbation",
                    left: xu.shape(),
                    right: r_adv.shape(),
                });
            }
            xu.add_assign(r_adv);
            let xv = tape.constant(xu);
            let mut drop = ChaCha8Rng::seed_from_u64(ctx.dropout_seeds.1);
            let mut fu = model.encode(tape, p, xv, Some(&mut drop))?;
            if let (Some(pv), true) = (protos, graph_on) {
                fu = model.refine(tape, p, fu, pv)?;
            }
            let pu = model.classify_probs(tape, p, fu)?;
            let con = consistency(tape, clean, pu)?;
            out.con = add(tape, &mut total, con, w.consistency, "con")?;
        }
    }

    if let Some(pv) = protos {
        let cfg = &model.config.prototypes;
        let labels = model.proto_labels();
        if w.anchor > 0.0 {
            let centers = class_centers(tape, pv, cfg.k, cfg.classes)?;
            let entities = tape.concat_rows(&[feats, pv])?;
            let mag = anchor_magnitude(tape, centers, ctx.feature_scale, obj.margins.magnitude)?;
            out.mag = add(tape, &mut total, mag, w.anchor, "mag")?;
            let ang = anchor_triplet(tape, centers, entities, &ctx.triplets.triplets, obj.margins.angle)?;
            out.ang = add(tape, &mut total, ang, w.anchor, "ang")?;
            let bound = anchor_boundary(tape, centers, entities, &ctx.entity_labels)?;
            out.bound = add(tape, &mut total, bound, w.anchor, "bound")?;
        }
        if w.divergence > 0.0 {
            let div = divergence(tape, pv, &labels, ctx.proto_scale, obj.margins.divergence)?;
            out.div = add(tape, &mut total, div, w.divergence, "div")?;
        }
        if w.proto_clf > 0.0 {
            let pp = model.classify_probs(tape, p, pv)?;
            let clf_p = cross_entropy(tape, pp, &labels)?;
            out.clf_p = add(tape, &mut total, clf_p, w.proto_clf, "clf_p")?;
        }
    }

    out.total = finite("total", tape.value(total).item())?;
    Ok((total, out))
}
