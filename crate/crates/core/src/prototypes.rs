//! Prototype generator: K prototypes for each of C classes, built from a
//! per-slot embedding and a per-class embedding fed through a shared MLP.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeConfig {
    /// Prototypes per class.
    pub k: usize,
    pub classes: usize,
    pub embed_dim_k: usize,
    pub embed_dim_c: usize,
    pub mlp_hidden: Vec<usize>,
    /// Must equal the encoder's feature dimension.
    pub output_dim: usize,
    pub leaky_slope: f64,
    pub embed_init_std: f64,
    pub init_seed: u64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self {
            k: 20,
            classes: 2,
            embed_dim_k: 32,
            embed_dim_c: 32,
            mlp_hidden: vec![128],
            output_dim: 64,
            leaky_slope: 0.1,
            embed_init_std: 0.05,
            init_seed: 1,
        }
    }
}

impl PrototypeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("prototypes per class must be >= 1"));
        }
        if self.classes < 2 {
            return Err(Error::config("prototype generator needs at least 2 classes"));
        }
        if self.embed_dim_k == 0 || self.embed_dim_c == 0 || self.output_dim == 0 || self.mlp_hidden.contains(&0) {
            return Err(Error::config("prototype dimensions must be >= 1"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.k * self.classes
    }
}

/// Generated prototypes as plain values. Rows are grouped by class: row
/// `c * K + i` is prototype `i` of class `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub values: Tensor,
    pub labels: Vec<usize>,
    pub k: usize,
    pub classes: usize,
    pub iteration: u64,
}

impl PrototypeSet {
    pub fn new(values: Tensor, k: usize, classes: usize, iteration: u64) -> Result<Self> {
        if values.rows() != k * classes {
            return Err(Error::Schema(format!(
                "prototype set has {} rows, expected {k}x{classes}",
                values.rows()
            )));
        }
        Ok(Self {
            values,
            labels: prototype_labels(k, classes),
            k,
            classes,
            iteration,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    /// Per-class mean prototype, C×d_f.
    pub fn class_centers(&self) -> Tensor {
        averaging_matrix(self.k, self.classes)
            .matmul(&self.values)
            .expect("prototype shapes are consistent")
    }

    /// One row per prototype: class, then the feature values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for j in 0..self.values.cols() {
            write!(out, ",v{j}").unwrap();
        }
        out.push('\n');
        for (r, &c) in self.labels.iter().enumerate() {
            write!(out, "{c}").unwrap();
            for v in self.values.row(r) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn prototype_labels(k: usize, classes: usize) -> Vec<usize> {
    (0..classes).flat_map(|c| std::iter::repeat_n(c, k)).collect()
}

/// C×(K·C) matrix whose product with the prototypes gives class means.
pub fn averaging_matrix(k: usize, classes: usize) -> Tensor {
    let w = 1.0 / k as f64;
    Tensor::from_fn(classes, k * classes, |c, r| if r / k == c { w } else { 0.0 })
}

/// Differentiable class centers from a P×d_f prototype node.
pub fn class_centers(tape: &mut Tape, protos: Var, k: usize, classes: usize) -> Result<Var> {
    let avg = tape.constant(averaging_matrix(k, classes));
    tape.matmul(avg, protos)
}

#[derive(Clone, Debug)]
pub struct PrototypeGenerator {
    pub config: PrototypeConfig,
    pub embed_k: ParamId,
    pub embed_c: ParamId,
    pub mlp: Vec<Linear>,
}

impl PrototypeGenerator {
    pub fn init(config: PrototypeConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let std = config.embed_init_std;
        let embed_k = store.add_normal("proto.embed_k", config.k, config.embed_dim_k, std, &mut rng);
        let embed_c = store.add_normal("proto.embed_c", config.classes, config.embed_dim_c, std, &mut rng);
        let mut dims = vec![config.embed_dim_k + config.embed_dim_c];
        dims.extend(&config.mlp_hidden);
        dims.push(config.output_dim);
        let mlp = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("proto.mlp.{i}"), w[0], w[1], &mut rng))
            .collect();
        Ok(Self {
            config,
            embed_k,
            embed_c,
            mlp,
        })
    }

    pub fn labels(&self) -> Vec<usize> {
        prototype_labels(self.config.k, self.config.classes)
    }

    /// Number of parameters this generator owns.
    pub fn num_params(&self, store: &ParamStore) -> usize {
        let mut n = store.get(self.embed_k).len() + store.get(self.embed_c).len();
        for l in &self.mlp {
            n += store.get(l.weight).len() + store.get(l.bias).len();
        }
        n
    }

    /// All K·C prototypes as a P×d_f node.
    pub fn generate_all(&self, tape: &mut Tape, p: &Bound) -> Result<Var> {
        let (k, c) = (self.config.k, self.config.classes);
        let slot_idx: Vec<usize> = (0..c).flat_map(|_| 0..k).collect();
        let class_idx = prototype_labels(k, c);
        let ek = tape.select_rows(p[self.embed_k], &slot_idx)?;
        let ec = tape.select_rows(p[self.embed_c], &class_idx)?;
        let mut h = tape.concat_cols(&[ek, ec])?;
        let last = self.mlp.len() - 1;
        for (i, layer) in self.mlp.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i != last {
                h = tape.leaky_relu(h, self.config.leaky_slope);
            }
        }
        Ok(h)
    }

    /// Evaluate the generator off-tape.
    pub fn generate_values(&self, store: &ParamStore, iteration: u64) -> Result<PrototypeSet> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let v = self.generate_all(&mut tape, &p)?;
        PrototypeSet::new(tape.value(v).clone(), self.config.k, self.config.classes, iteration)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(k: usize, classes: usize) -> PrototypeConfig {
        PrototypeConfig {
            k,
            classes,
            embed_dim_k: 3,
            embed_dim_c: 2,
            mlp_hidden: vec![6],
            output_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn output_shape_and_labels() {
        let mut store = ParamStore::new();
        let g = PrototypeGenerator::init(small(3, 4), &mut store).unwrap();
        let set = g.generate_values(&store, 0).unwrap();
        assert_eq!(set.values.shape(), (12, 4));
        for c in 0..4 {
            assert_eq!(set.labels.iter().filter(|&&l| l == c).count(), 3);
        }
    }

    #[test]
    fn equal_slot_embeddings_give_equal_prototypes() {
        let mut store = ParamStore::new();
        let g = PrototypeGenerator::init(small(2, 3), &mut store).unwrap();
        let row0 = store.get(g.embed_k).row(0).to_vec();
        store.get_mut(g.embed_k).row_mut(1).copy_from_slice(&row0);
        let set = g.generate_values(&store, 0).unwrap();
        for c in 0..3 {
            assert_eq!(set.values.row(c * 2), set.values.row(c * 2 + 1));
        }
    }

    #[test]
    fn parameters_scale_with_k_plus_c_not_k_times_c() {
        let count = |k, c| {
            let mut store = ParamStore::new();
            let g = PrototypeGenerator::init(small(k, c), &mut store).unwrap();
            g.num_params(&store)
        };
        let base = count(5, 4);
        // doubling C adds exactly C * embed_dim_c entries
        assert_eq!(count(5, 8) - base, 4 * 2);
        // doubling K adds exactly K * embed_dim_k entries
        assert_eq!(count(10, 4) - base, 5 * 3);
    }

    #[test]
    fn center_examples() {
        let set = PrototypeSet::new(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 1, 2, 0).unwrap();
        assert_eq!(set.class_centers(), set.values);

        let v = vec![0.3, -1.2];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let set = PrototypeSet::new(
            Tensor::from_rows(&[v, neg, vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            2,
            2,
            0,
        )
        .unwrap();
        let c = set.class_centers();
        assert_eq!(c.row(0), &[0.0, 0.0]);
        assert_eq!(c.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn csv_export_has_one_row_per_prototype() {
        let mut store = ParamStore::new();
        let g = PrototypeGenerator::init(small(2, 2), &mut store).unwrap();
        let csv = g.generate_values(&store, 0).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,v0,v1,v2,v3");
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("1,"));
    }
}
