//! Resample ablation at edge granularity.
//!
//! `C(x, x̃)` is a forward pass on the clean input `x` in which every edge
//! outside the circuit carries the source node's contribution from an
//! unablated pass on the corrupted input `x̃`. Edges inside the circuit carry
//! the value the source produced within the ablated pass itself, so effects
//! of upstream ablations propagate along circuit edges. Because the residual
//! stream is a plain sum, each node channel's input is assembled edge by
//! edge from the two sources.
//!
//! Divergence is measured at the final position only:
//! `KL(M(x) ‖ C(x, x̃))` in nats.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Circuit, EdgeId};
use crate::model::{output_distribution, run_pass, ActivationCache, Distribution, Model, Routing};
use crate::stats::kl_divergence;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchedRunResult {
    /// Logits of the ablated pass, `[seq × vocab]`.
    pub logits: Array2<f64>,
    pub circuit_distribution: Distribution,
    pub model_distribution: Distribution,
    pub kl_nats: f64,
}

/// A circuit resolved against a model's topology.
#[derive(Debug, Clone)]
pub struct CompiledCircuit {
    routing: Routing,
}

impl CompiledCircuit {
    pub fn new(model: &Model, circuit: &Circuit) -> Result<Self> {
        circuit.check_config(&model.config)?;
        let topo = model.topology();
        let own = topo
            .nodes
            .iter()
            .zip(&topo.upstream)
            .map(|(dst, upstream)| {
                dst.channels()
                    .iter()
                    .map(|&channel| {
                        upstream
                            .iter()
                            .map(|&src| {
                                circuit.contains(&EdgeId {
                                    src: topo.nodes[src],
                                    dst: *dst,
                                    channel,
                                })
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(CompiledCircuit {
            routing: Routing::new(own),
        })
    }
}

/// Node contributions of an unablated pass on a corrupted input.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptCache {
    len: usize,
    contributions: Vec<Array2<f64>>,
}

impl CorruptCache {
    pub fn new(model: &Model, corrupt: &[usize]) -> Result<Self> {
        let cache = run_pass(model, corrupt, None, false)?;
        Ok(CorruptCache {
            len: corrupt.len(),
            contributions: cache.into_contributions(),
        })
    }
}

/// Next-token distribution of the unablated model at the last position.
pub fn model_distribution(model: &Model, clean: &[usize]) -> Result<Distribution> {
    let cache = run_pass(model, clean, None, false)?;
    output_distribution(cache.logits(), clean.len() - 1)
}

/// The ablated pass alone, returning every node's contribution within it.
pub fn patched_pass(
    model: &Model,
    compiled: &CompiledCircuit,
    clean: &[usize],
    corrupt: &CorruptCache,
) -> Result<ActivationCache> {
    if clean.len() != corrupt.len {
        return Err(Error::LengthMismatch {
            clean: clean.len(),
            corrupt: corrupt.len,
        });
    }
    run_pass(
        model,
        clean,
        Some((&compiled.routing, &corrupt.contributions)),
        false,
    )
}

/// Ablated pass plus the divergence from a precomputed model distribution.
pub fn evaluate_pair(
    model: &Model,
    compiled: &CompiledCircuit,
    clean: &[usize],
    model_dist: &Distribution,
    corrupt: &CorruptCache,
) -> Result<PatchedRunResult> {
    let logits = patched_pass(model, compiled, clean, corrupt)?.into_logits();
    let circuit_distribution = output_distribution(&logits, clean.len() - 1)?;
    let kl_nats = kl_divergence(model_dist, &circuit_distribution)?;
    Ok(PatchedRunResult {
        logits,
        circuit_distribution,
        model_distribution: model_dist.clone(),
        kl_nats,
    })
}

/// Computes `C(x, x̃)` and `KL(M(x) ‖ C(x, x̃))`: an unablated pass on the
/// corrupted input, an unablated pass on the clean input, then the ablated
/// pass.
pub fn patched_forward(
    model: &Model,
    circuit: &Circuit,
    clean: &[usize],
    corrupt: &[usize],
) -> Result<PatchedRunResult> {
    let compiled = CompiledCircuit::new(model, circuit)?;
    if clean.len() != corrupt.len() {
        return Err(Error::LengthMismatch {
            clean: clean.len(),
            corrupt: corrupt.len(),
        });
    }
    let corrupt_cache = CorruptCache::new(model, corrupt)?;
    let model_dist = model_distribution(model, clean)?;
    evaluate_pair(model, &compiled, clean, &model_dist, &corrupt_cache)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    /// Worker threads; 0 means rayon's default.
    pub workers: usize,
    /// Share one corrupt cache and one model distribution per distinct input.
    pub memoize: bool,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            workers: 0,
            memoize: true,
        }
    }
}

/// Runs `f` on a dedicated pool of `workers` threads (0 = rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn tag(index: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Pair {
        index,
        source: Box::new(e),
    }
}

/// KL divergence for every `(clean, corrupt)` pair, in input order.
///
/// Each pair is evaluated independently, so the output does not depend on
/// the worker count or on memoization.
pub fn batch_patched_kl<T: AsRef<[usize]> + Sync>(
    model: &Model,
    circuit: &Circuit,
    pairs: &[(T, T)],
    options: BatchOptions,
) -> Result<Vec<f64>> {
    let compiled = CompiledCircuit::new(model, circuit)?;
    with_workers(options.workers, || {
        if !options.memoize {
            return pairs
                .par_iter()
                .enumerate()
                .map(|(i, (clean, corrupt))| {
                    patched_forward(model, circuit, clean.as_ref(), corrupt.as_ref())
                        .map(|r| r.kl_nats)
                        .map_err(tag(i))
                })
                .collect::<Vec<_>>()
                .into_iter()
                .collect();
        }

        // First occurrence of each distinct input owns the error report.
        let mut corrupt_first: HashMap<&[usize], usize> = HashMap::new();
        let mut clean_first: HashMap<&[usize], usize> = HashMap::new();
        for (i, (clean, corrupt)) in pairs.iter().enumerate() {
            clean_first.entry(clean.as_ref()).or_insert(i);
            corrupt_first.entry(corrupt.as_ref()).or_insert(i);
        }
        let (corrupt_caches, corrupt_err) = split_failures(
            corrupt_first
                .into_par_iter()
                .map(|(tokens, i)| {
                    (
                        i,
                        CorruptCache::new(model, tokens).map(|c| (tokens, Arc::new(c))),
                    )
                })
                .collect(),
        );
        let (clean_dists, clean_err) = split_failures(
            clean_first
                .into_par_iter()
                .map(|(tokens, i)| (i, model_distribution(model, tokens).map(|d| (tokens, d))))
                .collect(),
        );
        // A failed input fails its first pair; every earlier pair only uses
        // inputs that were prepared successfully.
        let failure = [corrupt_err, clean_err]
            .into_iter()
            .flatten()
            .min_by_key(|(i, _)| *i);
        let limit = failure.as_ref().map_or(pairs.len(), |(i, _)| *i);

        let results: Vec<Result<f64>> = pairs[..limit]
            .par_iter()
            .enumerate()
            .map(|(i, (clean, corrupt))| {
                let clean = clean.as_ref();
                evaluate_pair(
                    model,
                    &compiled,
                    clean,
                    &clean_dists[clean],
                    &corrupt_caches[corrupt.as_ref()],
                )
                .map(|r| r.kl_nats)
                .map_err(tag(i))
            })
            .collect();
        let kls = results.into_iter().collect::<Result<Vec<f64>>>()?;
        match failure {
            Some((i, e)) => Err(tag(i)(e)),
            None => Ok(kls),
        }
    })?
}

/// Separates successes from failures, keeping the failure of the lowest
/// pair index so the outcome does not depend on scheduling.
fn split_failures<K: Eq + std::hash::Hash, V>(
    items: Vec<(usize, Result<(K, V)>)>,
) -> (HashMap<K, V>, Option<(usize, Error)>) {
    let mut ok = HashMap::with_capacity(items.len());
    let mut err: Option<(usize, Error)> = None;
    for (i, r) in items {
        match r {
            Ok((k, v)) => {
                ok.insert(k, v);
            }
            Err(e) if err.as_ref().is_none_or(|(j, _)| i < *j) => err = Some((i, e)),
            Err(_) => {}
        }
    }
    (ok, err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{enumerate_edges, Topology};
    use crate::model::{random_model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(ln: bool) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            use_mlp: true,
            d_mlp: Some(12),
            vocab_size: 13,
            max_seq_len: 8,
            use_layernorm: ln,
        }
    }

    fn tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
        (0..len).map(|_| rng.random_range(0..vocab)).collect()
    }

    fn random_circuit(rng: &mut ChaCha8Rng, config: &ModelConfig) -> Circuit {
        let keep: f64 = rng.random();
        let edges: Vec<_> = enumerate_edges(config)
            .into_iter()
            .filter(|_| rng.random::<f64>() < keep)
            .collect();
        Circuit::new(config, edges).unwrap()
    }

    #[test]
    fn full_circuit_is_identity() {
        let c = config(true);
        let model = random_model(&c, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y) = (tokens(&mut rng, 6, 13), tokens(&mut rng, 6, 13));
        let r = patched_forward(&model, &Circuit::full(&c), &x, &y).unwrap();
        assert_eq!(r.logits, model.forward(&x).unwrap().0);
        assert_eq!(r.kl_nats, 0.0);
    }

    #[test]
    fn empty_circuit_is_corrupt_pass() {
        let c = config(false);
        let model = random_model(&c, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = (tokens(&mut rng, 5, 13), tokens(&mut rng, 5, 13));
        let r = patched_forward(&model, &Circuit::empty(&c), &x, &y).unwrap();
        assert_eq!(r.logits, model.forward(&y).unwrap().0);
    }

    #[test]
    fn same_input_any_circuit() {
        let c = config(true);
        let model = random_model(&c, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = tokens(&mut rng, 7, 13);
            let circuit = random_circuit(&mut rng, &c);
            let r = patched_forward(&model, &circuit, &x, &x).unwrap();
            assert!(r.kl_nats < 1e-9);
            assert_eq!(r.logits, model.forward(&x).unwrap().0);
        }
    }

    #[test]
    fn errors() {
        let c = config(false);
        let model = random_model(&c, 4).unwrap();
        let full = Circuit::full(&c);
        assert!(matches!(
            patched_forward(&model, &full, &[1, 2], &[1, 2, 3]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            patched_forward(&model, &full, &[1, 99], &[1, 2]),
            Err(Error::TokenOutOfRange { .. })
        ));
        let mut other = c.clone();
        other.d_model = 10;
        assert!(matches!(
            patched_forward(&model, &Circuit::full(&other), &[1], &[2]),
            Err(Error::ConfigHashMismatch { .. })
        ));
        let pairs = vec![(vec![1, 2], vec![3, 4]), (vec![1, 2], vec![3, 40])];
        match batch_patched_kl(&model, &full, &pairs, BatchOptions::default()) {
            Err(Error::Pair { index: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn patch_locality() {
        let c = config(true);
        let model = random_model(&c, 5).unwrap();
        let topo = Topology::new(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = (tokens(&mut rng, 6, 13), tokens(&mut rng, 6, 13));
        let (_, clean) = model.forward(&x).unwrap();
        let corrupt = CorruptCache::new(&model, &y).unwrap();
        let all = enumerate_edges(&c);
        for removed in &all {
            let circuit = Circuit::new(&c, all.iter().copied().filter(|e| e != removed)).unwrap();
            let compiled = CompiledCircuit::new(&model, &circuit).unwrap();
            let patched = patched_pass(&model, &compiled, &x, &corrupt).unwrap();
            for node in &topo.nodes {
                // Downstream of Y means Y itself or anything Y feeds, transitively.
                let downstream = *node == removed.dst || reaches(&topo, removed.dst, *node);
                if !downstream {
                    assert_eq!(
                        patched.contribution(node),
                        clean.contribution(node),
                        "{removed} {node}"
                    );
                }
            }
        }
    }

    fn reaches(topo: &Topology, from: crate::graph::NodeId, to: crate::graph::NodeId) -> bool {
        from.feeds(&to)
            || topo
                .nodes
                .iter()
                .any(|mid| from.feeds(mid) && mid.feeds(&to))
    }

    #[test]
    fn batch_matches_single_and_is_order_preserving() {
        let c = config(true);
        let model = random_model(&c, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let circuit = random_circuit(&mut rng, &c);
        let inputs: Vec<Vec<usize>> = (0..5).map(|_| tokens(&mut rng, 6, 13)).collect();
        let mut pairs = Vec::new();
        for a in &inputs {
            for b in &inputs {
                pairs.push((a.clone(), b.clone()));
            }
        }
        pairs.push(pairs[3].clone());
        let memo = batch_patched_kl(
            &model,
            &circuit,
            &pairs,
            BatchOptions {
                workers: 3,
                memoize: true,
            },
        )
        .unwrap();
        let plain = batch_patched_kl(
            &model,
            &circuit,
            &pairs,
            BatchOptions {
                workers: 2,
                memoize: false,
            },
        )
        .unwrap();
        assert_eq!(memo, plain);
        assert_eq!(memo[3], memo[pairs.len() - 1]);
        for (i, (a, b)) in pairs.iter().enumerate() {
            assert_eq!(
                memo[i],
                patched_forward(&model, &circuit, a, b).unwrap().kl_nats
            );
            if a == b {
                assert!(memo[i] < 1e-9);
            }
            assert!(memo[i].is_finite() && memo[i] >= 0.0);
        }
    }
}
