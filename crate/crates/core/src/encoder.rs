//! Feature extractor: a leaky-ReLU MLP from raw inputs to the shared feature space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub leaky_slope: f64,
    pub dropout_rate: f64,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_dims: vec![128, 128],
            feature_dim: 64,
            leaky_slope: 0.1,
            dropout_rate: 0.0,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config("encoder dimensions must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "encoder dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<Linear>,
}

impl Encoder {
    /// Register the encoder's parameters in `store`, seeded by `config.init_seed`.
    pub fn init(config: EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden_dims);
        dims.push(config.feature_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("encoder.{i}"), w[0], w[1], &mut rng))
            .collect();
        Ok(Self { config, layers })
    }

    /// Map a B×d batch to B×d_f features. Dropout masks on hidden activations
    /// are drawn from `dropout_rng` when one is given and the rate is nonzero.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (_, d) = tape.shape(x);
        if d != self.config.input_dim {
            return Err(Error::Dimension {
                op: "encode",
                left: tape.shape(x),
                right: (self.config.input_dim, self.config.feature_dim),
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i == last {
                break;
            }
            h = tape.leaky_relu(h, self.config.leaky_slope);
            let rate = self.config.dropout_rate;
            if rate > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    let (r, c) = tape.shape(h);
                    let keep = 1.0 / (1.0 - rate);
                    let mask = Tensor::from_fn(r, c, |_, _| if rng.random::<f64>() < rate { 0.0 } else { keep });
                    let m = tape.constant(mask);
                    h = tape.mul(h, m)?;
                }
            }
        }
        Ok(h)
    }
}
