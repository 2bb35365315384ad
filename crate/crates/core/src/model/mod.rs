//! A small decoder-only transformer whose forward pass exposes every node's
//! additive contribution to the residual stream.
//!
//! Layernorm (when enabled) is pre-norm and lives inside each node: it is
//! applied to the node's summed input and never written to the residual
//! stream. That keeps the stream a plain sum of node outputs, which is what
//! makes per-edge patching exact.

mod forward;
mod io;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Topology;

pub use forward::{output_distribution, ActivationCache, Distribution};
pub(crate) use forward::{run_pass, Routing};
pub use io::{load_model, save_model, MODEL_FORMAT_VERSION};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub use_mlp: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_mlp: Option<usize>,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub use_layernorm: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be at least 2".into()));
        }
        match (self.use_mlp, self.d_mlp) {
            (true, Some(0)) => Err(Error::InvalidConfig("d_mlp must be at least 1".into())),
            (true, None) => Err(Error::InvalidConfig("use_mlp requires d_mlp".into())),
            (false, Some(_)) => Err(Error::InvalidConfig(
                "d_mlp given but use_mlp is false".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Hex SHA-256 of the canonical JSON rendering; binds circuits to configs.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn d_mlp(&self) -> usize {
        self.d_mlp.unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        LayerNorm {
            scale: Array1::ones(d),
            shift: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub b_q: Array1<f64>,
    pub b_k: Array1<f64>,
    pub b_v: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln: Option<LayerNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub ln: Option<LayerNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub token_embedding: Array2<f64>,
    pub positional_embedding: Array2<f64>,
    /// Indexed `[layer][head]`.
    pub heads: Vec<Vec<HeadWeights>>,
    /// One per layer when `use_mlp`, else empty.
    pub mlps: Vec<MlpWeights>,
    pub final_ln: Option<LayerNorm>,
    pub unembed_w: Array2<f64>,
    pub unembed_b: Array1<f64>,
    topology: Topology,
}

impl Model {
    /// All-zero weights (layernorm, when enabled, is the identity affine map).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, dh, v) = (config.d_model, config.d_head, config.vocab_size);
        let ln = |on: bool| on.then(|| LayerNorm::identity(d));
        let heads = (0..config.n_layers)
            .map(|_| {
                (0..config.n_heads)
                    .map(|_| HeadWeights {
                        w_q: Array2::zeros((d, dh)),
                        w_k: Array2::zeros((d, dh)),
                        w_v: Array2::zeros((d, dh)),
                        b_q: Array1::zeros(dh),
                        b_k: Array1::zeros(dh),
                        b_v: Array1::zeros(dh),
                        w_o: Array2::zeros((dh, d)),
                        b_o: Array1::zeros(d),
                        ln: ln(config.use_layernorm),
                    })
                    .collect()
            })
            .collect();
        let mlps = if config.use_mlp {
            let m = config.d_mlp();
            (0..config.n_layers)
                .map(|_| MlpWeights {
                    w_in: Array2::zeros((d, m)),
                    b_in: Array1::zeros(m),
                    w_out: Array2::zeros((m, d)),
                    b_out: Array1::zeros(d),
                    ln: ln(config.use_layernorm),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Model {
            token_embedding: Array2::zeros((v, d)),
            positional_embedding: Array2::zeros((config.max_seq_len, d)),
            heads,
            mlps,
            final_ln: ln(config.use_layernorm),
            unembed_w: Array2::zeros((d, v)),
            unembed_b: Array1::zeros(v),
            topology: Topology::new(&config),
            config,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Runs the unablated forward pass.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Array2<f64>, ActivationCache)> {
        let cache = run_pass(self, tokens, None, true)?;
        Ok((cache.logits().clone(), cache))
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceLength {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }
}

/// Seeded random model: weights and biases i.i.d. normal with standard
/// deviation `1/sqrt(d_model)`; layernorm scales start at one and shifts at
/// zero.
pub fn random_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let mut model = Model::zeros(config.clone())?;
    let normal = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt()).expect("positive scale");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |values: &mut [f64]| {
        for v in values {
            *v = normal.sample(&mut rng);
        }
    };
    fn slice<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
        a.as_slice_mut().expect("standard layout")
    }

    fill(slice(&mut model.token_embedding));
    fill(slice(&mut model.positional_embedding));
    for layer in model.heads.iter_mut() {
        for h in layer.iter_mut() {
            fill(slice(&mut h.w_q));
            fill(slice(&mut h.w_k));
            fill(slice(&mut h.w_v));
            fill(slice(&mut h.b_q));
            fill(slice(&mut h.b_k));
            fill(slice(&mut h.b_v));
            fill(slice(&mut h.w_o));
            fill(slice(&mut h.b_o));
        }
    }
    for m in model.mlps.iter_mut() {
        fill(slice(&mut m.w_in));
        fill(slice(&mut m.b_in));
        fill(slice(&mut m.w_out));
        fill(slice(&mut m.b_out));
    }
    fill(slice(&mut model.unembed_w));
    fill(slice(&mut model.unembed_b));
    Ok(model)
}
