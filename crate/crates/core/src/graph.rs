//! Manifold graph: one graph per instance over the instance and every
//! prototype, with attention edges learned from an embedding of the node
//! features and a residual refinement of each node.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphConfig {
    pub heads: usize,
    pub edge_dim: usize,
    pub layers: usize,
    /// Slope of the leaky ReLU used both in the edge embedding and as the
    /// residual activation.
    pub leaky_slope: f64,
    /// Divide edge logits by sqrt(edge_dim).
    pub logit_scaling: bool,
    pub feature_dim: usize,
    pub classes: usize,
    pub init_seed: u64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            heads: 1,
            edge_dim: 64,
            layers: 1,
            leaky_slope: 0.1,
            logit_scaling: false,
            feature_dim: 64,
            classes: 2,
            init_seed: 2,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.layers == 0 {
            return Err(Error::config("graph heads and layers must be >= 1"));
        }
        if self.edge_dim == 0 || self.feature_dim == 0 || self.classes == 0 {
            return Err(Error::config("graph dimensions must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GraphLayer {
    /// Edge embedding per head.
    pub embed: Vec<Linear>,
    /// Maps `[g_i, sum_j w_ij g_j]` (all heads) back to the feature space.
    pub mix: Linear,
}

#[derive(Clone, Debug)]
pub struct ManifoldGraph {
    pub config: GraphConfig,
    pub layers: Vec<GraphLayer>,
    pub classifier: Linear,
}

/// Per-instance graph result.
#[derive(Clone, Debug)]
pub struct InstanceGraph {
    pub refined_instance: Var,
    pub refined_protos: Var,
    /// `edges[layer][head]`, each (P+1)×(P+1).
    pub edges: Vec<Vec<Var>>,
}

/// Row-stochastic attention weights for one graph and one head.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMatrix {
    pub weights: Tensor,
}

impl EdgeMatrix {
    /// Largest deviation of a row sum from 1, or `None` if the diagonal is not
    /// exactly zero or an entry is negative.
    pub fn row_sum_error(&self) -> Option<f64> {
        let w = &self.weights;
        let mut worst: f64 = 0.0;
        for i in 0..w.rows() {
            if w.get(i, i) != 0.0 || w.row(i).iter().any(|v| *v < 0.0) {
                return None;
            }
            worst = worst.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        Some(worst)
    }

    /// Dense CSV; node 0 is the instance, nodes 1.. are prototypes.
    pub fn to_csv(&self) -> String {
        let n = self.weights.cols();
        let mut out = String::new();
        for j in 0..n {
            if j > 0 {
                out.push(',');
            }
            write!(out, "n{j}").unwrap();
        }
        out.push('\n');
        for i in 0..self.weights.rows() {
            for (j, v) in self.weights.row(i).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

impl ManifoldGraph {
    pub fn init(config: GraphConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (d, e, h) = (config.feature_dim, config.edge_dim, config.heads);
        let layers = (0..config.layers)
            .map(|l| GraphLayer {
                embed: (0..h)
                    .map(|k| Linear::new(store, &format!("graph.{l}.embed.{k}"), d, e, &mut rng))
                    .collect(),
                mix: Linear::new(store, &format!("graph.{l}.mix"), 2 * h * e, d, &mut rng),
            })
            .collect();
        let classifier = Linear::new(store, "classifier", d, config.classes, &mut rng);
        Ok(Self {
            config,
            layers,
            classifier,
        })
    }

    fn embed(&self, tape: &mut Tape, p: &Bound, layer: &GraphLayer, head: usize, x: Var) -> Result<Var> {
        let g = layer.embed[head].forward(tape, p, x)?;
        Ok(tape.leaky_relu(g, self.config.leaky_slope))
    }

    fn edge_logits(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let z = tape.matmul_t(a, b)?;
        Ok(if self.config.logit_scaling {
            tape.scale(z, 1.0 / (self.config.edge_dim as f64).sqrt())
        } else {
            z
        })
    }

    /// Edge embeddings and attention weights of one layer, per head, for a
    /// fully connected graph over the rows of `nodes`. Self edges are excluded.
    pub fn learn_edges(&self, tape: &mut Tape, p: &Bound, layer: usize, nodes: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let n = tape.shape(nodes).0;
        if n < 2 {
            return Err(Error::DegenerateGraph(n));
        }
        let diag: Vec<bool> = (0..n * n).map(|k| k / n == k % n).collect();
        let layer = &self.layers[layer];
        let mut gs = Vec::with_capacity(layer.embed.len());
        let mut ws = Vec::with_capacity(layer.embed.len());
        for head in 0..layer.embed.len() {
            let g = self.embed(tape, p, layer, head, nodes)?;
            let z = self.edge_logits(tape, g, g)?;
            let w = tape.softmax_rows(z, Some(&diag))?;
            gs.push(g);
            ws.push(w);
        }
        Ok((gs, ws))
    }

    /// Residual refinement `sigma(f + mix([g, W g]))` given embeddings and edges.
    pub fn refine(&self, tape: &mut Tape, p: &Bound, layer: usize, nodes: Var, gs: &[Var], ws: &[Var]) -> Result<Var> {
        let mut parts = gs.to_vec();
        for (&g, &w) in gs.iter().zip(ws) {
            parts.push(tape.matmul(w, g)?);
        }
        self.mix_residual(tape, p, layer, nodes, &parts)
    }

    fn mix_residual(&self, tape: &mut Tape, p: &Bound, layer: usize, nodes: Var, parts: &[Var]) -> Result<Var> {
        let cat = tape.concat_cols(parts)?;
        let h = self.layers[layer].mix.forward(tape, p, cat)?;
        let s = tape.add(nodes, h)?;
        Ok(tape.leaky_relu(s, self.config.leaky_slope))
    }

    /// Build the (P+1)-node graph for one instance and run every layer.
    pub fn forward_instance(&self, tape: &mut Tape, p: &Bound, instance: Var, protos: Var) -> Result<InstanceGraph> {
        let d = self.config.feature_dim;
        let (ir, ic) = tape.shape(instance);
        let (pr, pc) = tape.shape(protos);
        if ir != 1 || ic != d || pc != d {
            return Err(Error::Dimension {
                op: "forward_instance",
                left: (ir, ic),
                right: (pr, pc),
            });
        }
        let mut nodes = tape.concat_rows(&[instance, protos])?;
        let mut edges = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let (gs, ws) = self.learn_edges(tape, p, l, nodes)?;
            nodes = self.refine(tape, p, l, nodes, &gs, &ws)?;
            edges.push(ws);
        }
        let refined_instance = tape.select_rows(nodes, &[0])?;
        let rest: Vec<usize> = (1..=pr).collect();
        let refined_protos = tape.select_rows(nodes, &rest)?;
        Ok(InstanceGraph {
            refined_instance,
            refined_protos,
            edges,
        })
    }

    /// Refined features for a B×d_f batch; each row gets its own graph with
    /// the shared prototypes, and rows never see each other.
    ///
    /// With a single layer only the instance row of each graph matters, so
    /// the B graphs are evaluated together as one B×P attention block. Deeper
    /// stacks fall back to one full graph per instance.
    pub fn refine_batch(&self, tape: &mut Tape, p: &Bound, features: Var, protos: Var) -> Result<Var> {
        let (b, d) = tape.shape(features);
        let (np, pd) = tape.shape(protos);
        if d != self.config.feature_dim || pd != d {
            return Err(Error::Dimension {
                op: "refine_batch",
                left: (b, d),
                right: (np, pd),
            });
        }
        if np < 1 {
            return Err(Error::DegenerateGraph(np + 1));
        }
        if self.layers.len() == 1 {
            let layer = &self.layers[0];
            let mut gx = Vec::with_capacity(layer.embed.len());
            let mut agg = Vec::with_capacity(layer.embed.len());
            for head in 0..layer.embed.len() {
                let g_inst = self.embed(tape, p, layer, head, features)?;
                let g_proto = self.embed(tape, p, layer, head, protos)?;
                let z = self.edge_logits(tape, g_inst, g_proto)?;
                let w = tape.softmax_rows(z, None)?;
                agg.push(tape.matmul(w, g_proto)?);
                gx.push(g_inst);
            }
            gx.extend(agg);
            return self.mix_residual(tape, p, 0, features, &gx);
        }
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let inst = tape.select_rows(features, &[i])?;
            rows.push(self.forward_instance(tape, p, inst, protos)?.refined_instance);
        }
        tape.concat_rows(&rows)
    }

    /// Class logits, N×C.
    pub fn classify(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<Var> {
        self.classifier.forward(tape, p, features)
    }

    /// Edge matrices (last layer's input graph per layer, per head) for one
    /// instance feature row, evaluated off-tape.
    pub fn instance_edges(&self, store: &ParamStore, instance: &[f64], protos: &Tensor) -> Result<Vec<Vec<EdgeMatrix>>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let inst = tape.constant(Tensor::new(1, instance.len(), instance.to_vec())?);
        let pv = tape.constant(protos.clone());
        let out = self.forward_instance(&mut tape, &p, inst, pv)?;
        Ok(out
            .edges
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|&w| EdgeMatrix {
                        weights: tape.value(w).clone(),
                    })
                    .collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(cfg: GraphConfig) -> (ManifoldGraph, ParamStore) {
        let mut store = ParamStore::new();
        let g = ManifoldGraph::init(cfg, &mut store).unwrap();
        (g, store)
    }

    fn small_cfg() -> GraphConfig {
        GraphConfig {
            edge_dim: 3,
            feature_dim: 4,
            classes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn softmax_edge_examples() {
        // Direct check of the attention rule on fixed embeddings.
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap());
        let z = tape.matmul_t(g, g).unwrap();
        let diag: Vec<bool> = (0..9).map(|k| k / 3 == k % 3).collect();
        let w = tape.softmax_rows(z, Some(&diag)).unwrap();
        let w = tape.value(w);
        assert_eq!(w.get(0, 0), 0.0);
        assert!((w.get(0, 1) - 0.268_94).abs() < 1e-5);
        assert!((w.get(0, 2) - 0.731_06).abs() < 1e-5);

        let (gr, store) = graph(small_cfg());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let nodes = tape.constant(Tensor::from_fn(2, 4, |i, j| (i + j) as f64 * 0.3));
        let (_, ws) = gr.learn_edges(&mut tape, &p, 0, nodes).unwrap();
        assert_eq!(tape.value(ws[0]).data(), &[0.0, 1.0, 1.0, 0.0]);

        let nodes = tape.constant(Tensor::from_fn(3, 4, |_, j| j as f64 * 0.3 - 0.2));
        let (_, ws) = gr.learn_edges(&mut tape, &p, 0, nodes).unwrap();
        let w = tape.value(ws[0]);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { 0.5 };
                assert!((w.get(i, j) - expect).abs() < 1e-15);
            }
        }

        let single = tape.constant(Tensor::zeros(1, 4));
        assert!(matches!(gr.learn_edges(&mut tape, &p, 0, single), Err(Error::DegenerateGraph(1))));
    }

    #[test]
    fn zero_message_is_residual_identity() {
        let (gr, mut store) = graph(small_cfg());
        let mix = gr.layers[0].mix.clone();
        *store.get_mut(mix.weight) = Tensor::zeros(mix.fan_in, mix.fan_out);
        let f = Tensor::from_fn(5, 4, |i, j| (i as f64 - 2.0) * 0.5 + j as f64 * 0.1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let nodes = tape.constant(f.clone());
        let (gs, ws) = gr.learn_edges(&mut tape, &p, 0, nodes).unwrap();
        let out = gr.refine(&mut tape, &p, 0, nodes, &gs, &ws).unwrap();
        let expect = f.map(|v| if v > 0.0 { v } else { 0.1 * v });
        assert_eq!(tape.value(out), &expect);
    }

    #[test]
    fn uniform_edges_over_identical_rows_aggregate_to_the_row() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::from_fn(4, 3, |_, j| j as f64 - 0.7));
        let w = tape.constant(Tensor::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 1.0 / 3.0 }));
        let a = tape.matmul(w, g).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert!((tape.value(a).get(i, j) - tape.value(g).get(0, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn graph_size_is_prototypes_plus_one() {
        let cfg = GraphConfig {
            edge_dim: 4,
            feature_dim: 4,
            classes: 10,
            ..Default::default()
        };
        let (gr, store) = graph(cfg);
        let protos = Tensor::from_fn(200, 4, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.1 - 0.5);
        let edges = gr.instance_edges(&store, &[0.1, 0.2, -0.3, 0.4], &protos).unwrap();
        assert_eq!(edges[0][0].weights.shape(), (201, 201));
        assert!(edges[0][0].row_sum_error().unwrap() < 1e-9);
    }

    #[test]
    fn batched_path_matches_full_graph() {
        let cfg = GraphConfig {
            heads: 2,
            ..small_cfg()
        };
        let (gr, store) = graph(cfg);
        let feats = Tensor::from_fn(4, 4, |i, j| ((i * 5 + j) % 7) as f64 * 0.3 - 0.9);
        let protos = Tensor::from_fn(6, 4, |i, j| ((i * 3 + j * 2) % 5) as f64 * 0.4 - 0.8);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let f = tape.constant(feats);
        let pr = tape.constant(protos);
        let fast = gr.refine_batch(&mut tape, &p, f, pr).unwrap();
        for i in 0..4 {
            let inst = tape.select_rows(f, &[i]).unwrap();
            let full = gr.forward_instance(&mut tape, &p, inst, pr).unwrap();
            assert_eq!(tape.value(full.refined_instance).row(0), tape.value(fast).row(i));
        }
    }

    #[test]
    fn instance_matching_a_prototype_shares_its_edges() {
        let (gr, store) = graph(small_cfg());
        let protos = Tensor::from_fn(4, 4, |i, j| ((i * 3 + j) % 5) as f64 * 0.5 - 1.0);
        let inst = protos.row(2).to_vec();
        let e = &gr.instance_edges(&store, &inst, &protos).unwrap()[0][0].weights;
        // node 0 is the instance, node 3 is prototype 2; they have identical
        // embeddings, so their rows agree everywhere except at each other's
        // slots, where the diagonal mask differs.
        let (a, b) = (e.row(0), e.row(3));
        for j in [1, 2, 4] {
            assert!((a[j] - b[j]).abs() < 1e-12);
        }
        assert_eq!(a[0], 0.0);
        assert_eq!(b[3], 0.0);
        assert!((a[3] - b[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_classifier_gives_uniform_probabilities() {
        let (gr, mut store) = graph(small_cfg());
        *store.get_mut(gr.classifier.weight) = Tensor::zeros(4, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let f = tape.constant(Tensor::from_fn(2, 4, |i, j| (i + j) as f64));
        let logits = gr.classify(&mut tape, &p, f).unwrap();
        assert_eq!(tape.shape(logits), (2, 3));
        let probs = tape.softmax_rows(logits, None).unwrap();
        assert!(tape.value(probs).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn multilayer_stacks_and_keeps_invariants() {
        let cfg = GraphConfig {
            layers: 2,
            heads: 2,
            ..small_cfg()
        };
        let (gr, store) = graph(cfg);
        let protos = Tensor::from_fn(5, 4, |i, j| ((i * 3 + j) % 5) as f64 * 0.5 - 1.0);
        let edges = gr.instance_edges(&store, &[0.3, -0.2, 0.5, 1.0], &protos).unwrap();
        assert_eq!(edges.len(), 2);
        for layer in &edges {
            assert_eq!(layer.len(), 2);
            for e in layer {
                assert!(e.row_sum_error().unwrap() < 1e-9);
            }
        }
    }
}
