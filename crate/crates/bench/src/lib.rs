//! Fixtures shared by the benchmarks.

use advcirc_core::graph::enumerate_edges;
use advcirc_core::{random_model, Circuit, Model, ModelConfig};

/// Toy model of the desk-scale pipeline: 2 layers, 4 heads, MLPs.
pub fn toy_model(vocab_size: usize) -> Model {
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 32,
        d_head: 8,
        use_mlp: true,
        d_mlp: Some(64),
        vocab_size,
        max_seq_len: 32,
        use_layernorm: true,
    };
    random_model(&config, 1).expect("valid config")
}

/// Every other edge in canonical order.
pub fn half_circuit(model: &Model) -> Circuit {
    let edges = enumerate_edges(&model.config).into_iter().step_by(2);
    Circuit::new(&model.config, edges).expect("edges are valid")
}

pub fn tokens(len: usize, vocab_size: usize, salt: usize) -> Vec<usize> {
    (0..len)
        .map(|i| (i * 31 + salt * 17) % vocab_size)
        .collect()
}
