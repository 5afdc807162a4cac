use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::terms::consistency;
use super::VatConfig;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{norm, Tensor};

fn random_unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut d = Tensor::zeros(rows, cols);
    for i in 0..rows {
        loop {
            for v in d.row_mut(i) {
                *v = rng.sample(StandardNormal);
            }
            let n = norm(d.row(i));
            if n > 0.0 {
                d.row_mut(i).iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
    }
    d
}

/// Virtual adversarial perturbation for each row of `x`: the direction that
/// most increases `KL(clean || predict(x + r))`, found by power iteration
/// from a random start and scaled to length `cfg.eps`.
///
/// `predict` maps an input node to a probability node. The result is a plain
/// tensor, so nothing downstream differentiates through it. Rows whose
/// gradient vanishes keep their random direction.
pub fn vat_direction<F>(predict: F, x: &Tensor, clean: &Tensor, cfg: &VatConfig, rng: &mut ChaCha8Rng) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    cfg.validate()?;
    if clean.rows() != x.rows() {
        return Err(Error::Dimension {
            op: "vat_direction",
            left: x.shape(),
            right: clean.shape(),
        });
    }
    let (n, d) = x.shape();
    let mut dir = random_unit_rows(n, d, rng);
    for _ in 0..cfg.power_iters {
        let mut tape = Tape::new();
        let r = tape.leaf(dir.map(|v| v * cfg.xi));
        let xv = tape.constant(x.clone());
        let xr = tape.add(xv, r)?;
        let probs = predict(&mut tape, xr)?;
        let kl = consistency(&mut tape, clean, probs)?;
        let g = tape.backward(kl)?.wrt(r);
        for i in 0..n {
            let gn = norm(g.row(i));
            if gn > 0.0 && gn.is_finite() {
                for (o, v) in dir.row_mut(i).iter_mut().zip(g.row(i)) {
                    *o = v / gn;
                }
            }
        }
    }
    Ok(dir.map(|v| v * cfg.eps))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::losses::kl_rows;

    /// Fixed linear-softmax model on 2-D inputs with three classes.
    fn weights() -> Tensor {
        Tensor::from_rows(&[vec![1.5, -0.5, 0.2], vec![0.3, 1.0, -1.2]]).unwrap()
    }

    fn probs(x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = predict(&mut tape, xv).unwrap();
        tape.value(p).clone()
    }

    fn predict(tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.constant(weights());
        let z = tape.matmul(x, w)?;
        tape.softmax_rows(z, None)
    }

    #[test]
    fn rows_have_length_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(7, 2, |i, j| (i as f64 - 3.0) * 0.4 + j as f64 * 0.1);
        let clean = probs(&x);
        let cfg = VatConfig::default();
        let r = vat_direction(predict, &x, &clean, &cfg, &mut rng).unwrap();
        for i in 0..7 {
            assert!((norm(r.row(i)) - cfg.eps).abs() < 1e-9);
        }
    }

    #[test]
    fn doubling_eps_doubles_the_result() {
        let x = Tensor::from_rows(&[vec![0.2, -0.4], vec![1.0, 0.5]]).unwrap();
        let clean = probs(&x);
        let cfg = VatConfig::default();
        let big = VatConfig {
            eps: 2.0 * cfg.eps,
            ..cfg.clone()
        };
        let a = vat_direction(predict, &x, &clean, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = vat_direction(predict, &x, &clean, &big, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(2.0 * u, *v);
        }
    }

    #[test]
    fn beats_random_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_rows(&[vec![0.3, 0.1]]).unwrap();
        let clean = probs(&x);
        let cfg = VatConfig::default();
        let r = vat_direction(predict, &x, &clean, &cfg, &mut rng).unwrap();
        let kl_at = |r: &Tensor| {
            let mut xr = x.clone();
            xr.add_assign(r);
            kl_rows(clean.row(0), probs(&xr).row(0))
        };
        let adv = kl_at(&r);
        let beaten = (0..100)
            .filter(|_| {
                let d = random_unit_rows(1, 2, &mut rng).map(|v| v * cfg.eps);
                adv >= kl_at(&d)
            })
            .count();
        assert!(beaten >= 95, "{beaten}");
    }

    #[test]
    fn flat_model_falls_back_to_random_direction() {
        let flat = |tape: &mut Tape, x: Var| {
            let z = tape.scale(x, 0.0);
            tape.softmax_rows(z, None)
        };
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let clean = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let r = vat_direction(flat, &x, &clean, &VatConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((norm(r.row(0)) - 0.5).abs() < 1e-12);
    }
}
