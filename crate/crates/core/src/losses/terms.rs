use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{cosine_similarity, Tensor};

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Mean of `-log p[label]` over rows of a probability matrix.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape.shape(probs);
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: (n, c),
            right: (labels.len(), 1),
        });
    }
    if n == 0 {
        return Ok(zero(tape));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::contract(format!("label {bad} outside [0, {c})")));
    }
    let picked = tape.gather(probs, labels.iter().copied().enumerate().collect())?;
    let clamped = tape.clamp_min(picked, PROB_FLOOR);
    let logs = tape.log(clamped)?;
    let m = tape.mean(logs);
    Ok(tape.scale(m, -1.0))
}

/// Mean row entropy `-sum_c p log p`.
pub fn entropy_min(tape: &mut Tape, probs: Var) -> Result<Var> {
    let (n, _) = tape.shape(probs);
    if n == 0 {
        return Ok(zero(tape));
    }
    let clamped = tape.clamp_min(probs, PROB_FLOOR);
    let logs = tape.log(clamped)?;
    let plogp = tape.mul(probs, logs)?;
    let s = tape.sum(plogp);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// `KL(p || q)` for one pair of distributions, with `0 log 0 = 0`.
pub fn kl_rows(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.max(PROB_FLOOR).ln()))
        .sum()
}

/// Mean over rows of `KL(clean || perturbed)`. The clean distribution is a
/// constant, so gradients flow only into the perturbed branch.
pub fn consistency(tape: &mut Tape, clean: &Tensor, perturbed: Var) -> Result<Var> {
    let (n, c) = tape.shape(perturbed);
    if clean.shape() != (n, c) {
        return Err(Error::Dimension {
            op: "consistency",
            left: clean.shape(),
            right: (n, c),
        });
    }
    if n == 0 {
        return Ok(zero(tape));
    }
    let self_term: f64 = clean
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
        / n as f64;
    let target = tape.constant(clean.clone());
    let clamped = tape.clamp_min(perturbed, PROB_FLOOR);
    let logs = tape.log(clamped)?;
    let cross = tape.mul(target, logs)?;
    let cross = tape.sum(cross);
    let cross = tape.scale(cross, -1.0 / n as f64);
    Ok(tape.add_scalar(cross, self_term))
}

/// Nearest center by cosine similarity; ties go to the lowest class index.
pub fn pseudo_label(features: &Tensor, centers: &Tensor) -> Result<Vec<usize>> {
    if features.cols() != centers.cols() {
        return Err(Error::Dimension {
            op: "pseudo_label",
            left: features.shape(),
            right: centers.shape(),
        });
    }
    (0..features.rows())
        .map(|i| {
            let f = features.row(i);
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..centers.rows() {
                let s = cosine_similarity(f, centers.row(c))?;
                if s > best.1 {
                    best = (c, s);
                }
            }
            Ok(best.0)
        })
        .collect()
}

/// Mean over classes of `max(|l_c / l_avg - 1| - margin, 0)^2`, where `l_c`
/// is the length of center `c`. `l_avg` is a constant.
pub fn anchor_magnitude(tape: &mut Tape, centers: Var, l_avg: f64, margin: f64) -> Result<Var> {
    if !(l_avg > 0.0) {
        return Err(Error::contract(format!("l_avg must be > 0, got {l_avg}")));
    }
    let norms = tape.rows_l2_norm(centers);
    let ratio = tape.scale(norms, 1.0 / l_avg);
    let dev = tape.add_scalar(ratio, -1.0);
    let dev = tape.abs(dev);
    let excess = tape.add_scalar(dev, -margin);
    let h = tape.hinge(excess);
    let sq = tape.square(h);
    Ok(tape.mean(sq))
}

/// Triplets `(class, positive entity, negative entity)` drawn for one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletSample {
    pub triplets: Vec<(usize, usize, usize)>,
    /// Number of triplets before any subsampling.
    pub total: usize,
    pub subsampled: bool,
    /// Fewer than two classes were present, so no triplet exists.
    pub degenerate: bool,
}

/// Every `(c, j, k)` with entity `j` of class `c` and entity `k` of another
/// class, or a uniform subsample of `cap` of them when there are more.
pub fn enumerate_triplets(labels: &[usize], classes: usize, cap: usize, rng: &mut ChaCha8Rng) -> TripletSample {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (e, &l) in labels.iter().enumerate() {
        members[l].push(e);
    }
    let present = members.iter().filter(|m| !m.is_empty()).count();
    if present < 2 {
        return TripletSample {
            degenerate: true,
            ..Default::default()
        };
    }
    let negatives: Vec<Vec<usize>> = (0..classes)
        .map(|c| (0..labels.len()).filter(|&e| labels[e] != c).collect())
        .collect();
    let blocks: Vec<usize> = (0..classes).map(|c| members[c].len() * negatives[c].len()).collect();
    let total: usize = blocks.iter().sum();
    let decode = |mut r: usize| {
        let mut c = 0;
        while r >= blocks[c] {
            r -= blocks[c];
            c += 1;
        }
        let nn = negatives[c].len();
        (c, members[c][r / nn], negatives[c][r % nn])
    };
    if total <= cap {
        TripletSample {
            triplets: (0..total).map(decode).collect(),
            total,
            subsampled: false,
            degenerate: false,
        }
    } else {
        let mut pick = sample(rng, total, cap).into_vec();
        pick.sort_unstable();
        TripletSample {
            triplets: pick.into_iter().map(decode).collect(),
            total,
            subsampled: true,
            degenerate: false,
        }
    }
}

/// Mean over the strictly positive terms of
/// `max(S(center_c, neg) - S(center_c, pos) + margin, 0)^2`.
pub fn anchor_triplet(
    tape: &mut Tape,
    centers: Var,
    entities: Var,
    triplets: &[(usize, usize, usize)],
    margin: f64,
) -> Result<Var> {
    if triplets.is_empty() {
        return Ok(zero(tape));
    }
    let sim = tape.cosine_matrix(centers, entities)?;
    let pos = tape.gather(sim, triplets.iter().map(|&(c, j, _)| (c, j)).collect())?;
    let neg = tape.gather(sim, triplets.iter().map(|&(c, _, k)| (c, k)).collect())?;
    let diff = tape.sub(neg, pos)?;
    let shifted = tape.add_scalar(diff, margin);
    let h = tape.hinge(shifted);
    let sq = tape.square(h);
    Ok(tape.mean_nonzero(sq))
}

/// Mean over strictly positive terms of `max(m_c - S(entity, center_c), 0)`,
/// where `m_c` is the highest cosine similarity from center `c` to any other
/// center. With a single class there is no boundary and the loss is 0.
pub fn anchor_boundary(tape: &mut Tape, centers: Var, entities: Var, labels: &[usize]) -> Result<Var> {
    let c = tape.shape(centers).0;
    if c < 2 || labels.is_empty() {
        return Ok(zero(tape));
    }
    let cc = tape.cosine_matrix(centers, centers)?;
    let diag: Vec<bool> = (0..c * c).map(|k| k / c == k % c).collect();
    let margins = tape.row_max(cc, Some(&diag))?;
    let ce = tape.cosine_matrix(centers, entities)?;
    let sims = tape.gather(ce, labels.iter().enumerate().map(|(e, &l)| (l, e)).collect())?;
    let per_entity = tape.select_rows(margins, labels)?;
    let gap = tape.sub(per_entity, sims)?;
    let h = tape.hinge(gap);
    Ok(tape.mean_nonzero(h))
}

/// Sum over unordered same-class prototype pairs of
/// `min(magnitude term, angle term)`, each normalised to [0, 1] by
/// `1 - margin`. `l_avg` is a constant.
pub fn divergence(tape: &mut Tape, protos: Var, labels: &[usize], l_avg: f64, margin: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&margin) {
        return Err(Error::config(format!("divergence margin {margin} must lie in [0, 1)")));
    }
    if !(l_avg > 0.0) {
        return Err(Error::contract(format!("l_avg must be > 0, got {l_avg}")));
    }
    let p = tape.shape(protos).0;
    if labels.len() != p {
        return Err(Error::Dimension {
            op: "divergence",
            left: (p, 0),
            right: (labels.len(), 1),
        });
    }
    let mask = Tensor::from_fn(p, p, |i, j| if i < j && labels[i] == labels[j] { 1.0 } else { 0.0 });
    if mask.sum() == 0.0 {
        return Ok(zero(tape));
    }
    let scale = 1.0 / (1.0 - margin);

    let norms = tape.rows_l2_norm(protos);
    let ones = tape.constant(Tensor::filled(1, p, 1.0));
    let rows = tape.matmul(norms, ones)?;
    let cols = tape.transpose(rows);
    let diff = tape.sub(rows, cols)?;
    let diff = tape.abs(diff);
    let closeness = tape.scale(diff, -1.0 / (2.0 * l_avg));
    let closeness = tape.add_scalar(closeness, 1.0 - margin);
    let mag = tape.hinge(closeness);
    let mag = tape.scale(mag, scale);

    let sim = tape.cosine_matrix(protos, protos)?;
    let sim = tape.add_scalar(sim, -margin);
    let ang = tape.hinge(sim);
    let ang = tape.scale(ang, scale);

    let both = tape.minimum(mag, ang)?;
    let mask = tape.constant(mask);
    let pairs = tape.mul(both, mask)?;
    Ok(tape.sum(pairs))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    /// Unit vector at angle `a`.
    fn unit(a: f64) -> Vec<f64> {
        vec![a.cos(), a.sin()]
    }

    #[test]
    fn cross_entropy_cases() {
        let ce = |rows: &[Vec<f64>], labels: &[usize]| {
            eval(|tp| {
                let p = tp.constant(t(rows));
                cross_entropy(tp, p, labels)
            })
        };
        assert_eq!(ce(&[vec![0.0, 1.0]], &[1]), 0.0);
        assert!((ce(&[vec![0.25; 4]], &[2]) - 4f64.ln()).abs() < 1e-12);
        assert!((ce(&[vec![0.5, 0.5]], &[0]) - 2f64.ln()).abs() < 1e-12);
        // clamped rather than infinite
        assert!(ce(&[vec![0.0, 1.0]], &[0]).is_finite());
    }

    #[test]
    fn entropy_cases() {
        let em = |rows: &[Vec<f64>]| {
            eval(|tp| {
                let p = tp.constant(t(rows));
                entropy_min(tp, p)
            })
        };
        assert_eq!(em(&[vec![1.0, 0.0, 0.0]]), 0.0);
        assert!((em(&[vec![0.25; 4]]) - 4f64.ln()).abs() < 1e-12);
        assert!((em(&[vec![0.5, 0.5, 0.0, 0.0]]) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn consistency_cases() {
        let kl = |p: &[Vec<f64>], q: &[Vec<f64>]| {
            eval(|tp| {
                let qv = tp.constant(t(q));
                consistency(tp, &t(p), qv)
            })
        };
        let d = vec![vec![0.2, 0.3, 0.5]];
        assert!(kl(&d, &d).abs() < 1e-15);
        assert!((kl(&[vec![1.0, 0.0]], &[vec![0.5, 0.5]]) - 2f64.ln()).abs() < 1e-9);
        assert!(kl(&[vec![0.9, 0.1]], &[vec![0.1, 0.9]]) > 0.0);
    }

    #[test]
    fn consistency_does_not_differentiate_the_clean_branch() {
        let mut tape = Tape::new();
        let q = tape.leaf(t(&[vec![0.4, 0.6]]));
        let loss = consistency(&mut tape, &t(&[vec![0.7, 0.3]]), q).unwrap();
        let g = tape.backward(loss).unwrap().wrt(q);
        assert!((g.get(0, 0) + 0.7 / 0.4).abs() < 1e-12);
        assert!((g.get(0, 1) + 0.3 / 0.6).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_cases() {
        let centers = t(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let f = t(&[vec![0.0, 2.0], vec![1.0, 1.0], vec![-3.0, 0.1]]);
        assert_eq!(pseudo_label(&f, &centers).unwrap(), vec![1, 0, 2]);
        assert!(matches!(
            pseudo_label(&t(&[vec![0.0, 0.0]]), &centers),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn anchor_magnitude_cases() {
        let mag = |center: Vec<f64>, l_avg: f64| {
            eval(|tp| {
                let c = tp.constant(t(&[center]));
                anchor_magnitude(tp, c, l_avg, 0.1)
            })
        };
        assert_eq!(mag(vec![3.0, 4.0], 5.0), 0.0);
        assert!((mag(vec![1.3, 0.0], 1.0) - 0.04).abs() < 1e-12);
        assert_eq!(mag(vec![0.0, 0.95], 1.0), 0.0);
    }

    #[test]
    fn anchor_triplet_cases() {
        // center at angle 0, positive with S = 0.8, negative with S = 0.9
        let trip = |s_pos: f64, s_neg: f64| {
            eval(|tp| {
                let c = tp.constant(t(&[unit(0.0), unit(1.0)]));
                let e = tp.constant(t(&[unit(s_pos.acos()), unit(-s_neg.acos())]));
                anchor_triplet(tp, c, e, &[(0, 0, 1)], 0.15)
            })
        };
        assert!((trip(0.8, 0.9) - 0.0625).abs() < 1e-12);
        assert_eq!(trip(0.95, 0.5), 0.0);

        // a second, inactive triplet does not dilute the mean
        let two = eval(|tp| {
            let c = tp.constant(t(&[unit(0.0), unit(2.0)]));
            let e = tp.constant(t(&[unit(0.8f64.acos()), unit(-(0.9f64.acos())), unit(0.0), unit(2.0)]));
            anchor_triplet(tp, c, e, &[(0, 0, 1), (1, 3, 2)], 0.15)
        });
        assert!((two - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn triplet_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = enumerate_triplets(&[0, 0, 1, 2], 3, 1000, &mut rng);
        // class 0: 2 positives x 2 negatives; classes 1 and 2: 1 x 3 each
        assert_eq!(s.total, 10);
        assert_eq!(s.triplets.len(), 10);
        for &(c, j, k) in &s.triplets {
            assert_eq!([0, 0, 1, 2][j], c);
            assert_ne!([0, 0, 1, 2][k], c);
        }
        let capped = enumerate_triplets(&[0, 0, 1, 2], 3, 4, &mut rng);
        assert!(capped.subsampled);
        assert_eq!(capped.triplets.len(), 4);
        assert!(capped.triplets.iter().all(|t| s.triplets.contains(t)));
        assert!(enumerate_triplets(&[1, 1], 3, 10, &mut rng).degenerate);
    }

    #[test]
    fn anchor_boundary_cases() {
        let a = 0.2f64.acos();
        let bound = |s: f64| {
            eval(|tp| {
                let c = tp.constant(t(&[unit(0.0), unit(a)]));
                let e = tp.constant(t(&[unit(-s.acos())]));
                anchor_boundary(tp, c, e, &[0])
            })
        };
        assert_eq!(bound(0.5), 0.0);
        assert!((bound(0.1) - 0.1).abs() < 1e-12);
        let at_margin = bound(0.2);
        assert!(at_margin.abs() < 1e-12);

        // single class: no boundary
        let one = eval(|tp| {
            let c = tp.constant(t(&[unit(0.0)]));
            let e = tp.constant(t(&[unit(2.0)]));
            anchor_boundary(tp, c, e, &[0])
        });
        assert_eq!(one, 0.0);
    }

    #[test]
    fn divergence_cases() {
        let div = |rows: &[Vec<f64>], labels: &[usize], l_avg: f64| {
            eval(|tp| {
                let p = tp.constant(t(rows));
                divergence(tp, p, labels, l_avg, 0.75)
            })
        };
        assert!((div(&[vec![0.6, 0.8], vec![0.6, 0.8]], &[0, 0], 1.0) - 1.0).abs() < 1e-9);
        assert_eq!(div(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 0], 1.0), 0.0);
        // lengths 3 and 1 with l_avg 1: |3 - 1| = 2 * l_avg
        assert_eq!(div(&[vec![3.0, 0.0], vec![1.0, 0.0]], &[0, 0], 1.0), 0.0);
        // different classes never pair up
        assert_eq!(div(&[vec![1.0, 0.0], vec![1.0, 0.0]], &[0, 1], 1.0), 0.0);

        let mut tape = Tape::new();
        let p = tape.constant(t(&[vec![1.0, 0.0], vec![1.0, 0.0]]));
        assert!(matches!(divergence(&mut tape, p, &[0, 0], 1.0, 1.0), Err(Error::Config(_))));
    }
}
