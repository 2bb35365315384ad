//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use advcirc_core::graph::enumerate_edges;
use advcirc_core::model::LayerNorm;
use advcirc_core::{random_model, Circuit, Model, ModelConfig};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn config(
    n_layers: usize,
    n_heads: usize,
    use_mlp: bool,
    use_layernorm: bool,
    vocab_size: usize,
) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model: 12,
        d_head: 4,
        use_mlp,
        d_mlp: use_mlp.then_some(16),
        vocab_size,
        max_seq_len: 40,
        use_layernorm,
    }
}

/// A small random model with random shape, drawn from `rng`.
pub fn random_case_model(rng: &mut ChaCha8Rng) -> Model {
    let cfg = config(
        rng.random_range(1..=4),
        rng.random_range(1..=4),
        rng.random_bool(0.5),
        rng.random_bool(0.5),
        rng.random_range(5..=30),
    );
    random_model(&cfg, rng.random()).unwrap()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Each edge kept independently with probability `keep`.
pub fn random_circuit(rng: &mut ChaCha8Rng, config: &ModelConfig, keep: f64) -> Circuit {
    let edges: Vec<_> = enumerate_edges(config)
        .into_iter()
        .filter(|_| rng.random_bool(keep))
        .collect();
    Circuit::new(config, edges).unwrap()
}

pub fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    items.choose(rng).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Dense reference transformer: one residual vector per position, updated
// layer by layer with plain loops.

type Mat = Vec<Vec<f64>>;

pub fn ln(x: &[f64], w: Option<&LayerNorm>) -> Vec<f64> {
    let Some(w) = w else { return x.to_vec() };
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let sd = (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / sd * w.scale[i] + w.shift[i])
        .collect()
}

pub fn matvec(x: &[f64], w: &ndarray::Array2<f64>, b: &ndarray::Array1<f64>) -> Vec<f64> {
    (0..w.ncols())
        .map(|j| b[j] + (0..w.nrows()).map(|i| x[i] * w[[i, j]]).sum::<f64>())
        .collect()
}

pub fn dense_forward(model: &Model, tokens: &[usize]) -> Mat {
    let c = &model.config;
    let n = tokens.len();
    let mut resid: Mat = (0..n)
        .map(|i| {
            (0..c.d_model)
                .map(|k| model.token_embedding[[tokens[i], k]] + model.positional_embedding[[i, k]])
                .collect()
        })
        .collect();
    for l in 0..c.n_layers {
        let mut update = vec![vec![0.0; c.d_model]; n];
        for w in &model.heads[l] {
            let x: Mat = resid.iter().map(|r| ln(r, w.ln.as_ref())).collect();
            let q: Mat = x.iter().map(|r| matvec(r, &w.w_q, &w.b_q)).collect();
            let k: Mat = x.iter().map(|r| matvec(r, &w.w_k, &w.b_k)).collect();
            let v: Mat = x.iter().map(|r| matvec(r, &w.w_v, &w.b_v)).collect();
            for i in 0..n {
                let s: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>()
                            / (c.d_head as f64).sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut mix = vec![0.0; c.d_head];
                for j in 0..=i {
                    for t in 0..c.d_head {
                        mix[t] += e[j] / z * v[j][t];
                    }
                }
                let out = matvec(&mix, &w.w_o, &w.b_o);
                for t in 0..c.d_model {
                    update[i][t] += out[t];
                }
            }
        }
        for i in 0..n {
            for t in 0..c.d_model {
                resid[i][t] += update[i][t];
            }
        }
        if c.use_mlp {
            let w = &model.mlps[l];
            for r in resid.iter_mut() {
                let h: Vec<f64> = matvec(&ln(r, w.ln.as_ref()), &w.w_in, &w.b_in)
                    .into_iter()
                    .map(|a| a / (1.0 + (-a).exp()))
                    .collect();
                let out = matvec(&h, &w.w_out, &w.b_out);
                for t in 0..c.d_model {
                    r[t] += out[t];
                }
            }
        }
    }
    resid
        .iter()
        .map(|r| {
            matvec(
                &ln(r, model.final_ln.as_ref()),
                &model.unembed_w,
                &model.unembed_b,
            )
        })
        .collect()
}

/// `‖a − b‖∞ / ‖b‖∞`.
pub fn relative_error(a: &ndarray::Array2<f64>, b: &Mat) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            diff = diff.max((a[[i, j]] - v).abs());
            scale = scale.max(v.abs());
        }
    }
    diff / scale.max(f64::MIN_POSITIVE)
}
