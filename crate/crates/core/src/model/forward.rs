use ndarray::{Array1, Array2, ArrayView1};

use super::{LayerNorm, Model, LN_EPS};
use crate::error::{Error, Result};
use crate::graph::{InputChannel, NodeId};

/// Per node, per input channel, per upstream source: whether the channel
/// reads the source's value from the current pass (`true`) or from an
/// externally supplied set of contributions (`false`).
#[derive(Debug, Clone)]
pub(crate) struct Routing {
    own: Vec<Vec<Vec<bool>>>,
}

impl Routing {
    pub(crate) fn new(own: Vec<Vec<Vec<bool>>>) -> Self {
        Routing { own }
    }
}

/// Contributions each node wrote to the residual stream during one pass.
///
/// The readout node has no outgoing edges; its entry is its normalized
/// input, the vector the unembedding is applied to.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    nodes: Vec<NodeId>,
    contributions: Vec<Array2<f64>>,
    inputs: Vec<Vec<(InputChannel, Array2<f64>)>>,
    logits: Array2<f64>,
}

impl ActivationCache {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn contribution(&self, node: &NodeId) -> Option<&Array2<f64>> {
        let idx = self.nodes.binary_search(node).ok()?;
        Some(&self.contributions[idx])
    }

    pub fn contributions(&self) -> &[Array2<f64>] {
        &self.contributions
    }

    /// Summed input a node channel received; present only when the pass
    /// recorded inputs.
    pub fn input(&self, node: &NodeId, channel: InputChannel) -> Option<&Array2<f64>> {
        let idx = self.nodes.binary_search(node).ok()?;
        self.inputs
            .get(idx)?
            .iter()
            .find(|(c, _)| *c == channel)
            .map(|(_, m)| m)
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn into_logits(self) -> Array2<f64> {
        self.logits
    }

    pub(crate) fn into_contributions(self) -> Vec<Array2<f64>> {
        self.contributions
    }
}

/// Categorical distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    /// Checks entries are finite, nonnegative and sum to one within 1e-9.
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::Distribution("empty support".into()));
        }
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Distribution(
                "entries must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Distribution(format!("entries sum to {total}")));
        }
        Ok(Distribution(probabilities))
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Softmax of one logits row, with max subtraction.
///
/// Entries that would underflow to zero are floored at the smallest positive
/// normal `f64`, so every entry stays strictly positive.
pub fn output_distribution(logits: &Array2<f64>, position: usize) -> Result<Distribution> {
    if position >= logits.nrows() {
        return Err(Error::Range(format!(
            "position {position} outside sequence of length {}",
            logits.nrows()
        )));
    }
    let row = logits.row(position);
    if row.iter().any(|x| !x.is_finite()) {
        return Err(Error::Distribution("non-finite logits".into()));
    }
    Ok(Distribution(softmax(row)))
}

fn softmax(row: ArrayView1<f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter()
        .map(|e| (e / total).max(f64::MIN_POSITIVE))
        .collect()
}

fn layer_norm(x: &Array2<f64>, ln: &LayerNorm) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * inv);
        row *= &ln.scale;
        row += &ln.shift;
    }
    out
}

fn normalize(x: Array2<f64>, ln: Option<&LayerNorm>) -> Array2<f64> {
    match ln {
        Some(ln) => layer_norm(&x, ln),
        None => x,
    }
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Causal softmax attention; position `i` only ever reads positions `0..=i`.
fn attend(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let seq = q.nrows();
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut z = Array2::zeros((seq, v.ncols()));
    let mut scores = Vec::with_capacity(seq);
    for i in 0..seq {
        scores.clear();
        let qi = q.row(i);
        scores.extend((0..=i).map(|j| qi.dot(&k.row(j)) * scale));
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        let mut zi = z.row_mut(i);
        for (j, w) in scores.iter().enumerate() {
            zi.scaled_add(w / total, &v.row(j));
        }
    }
    z
}

/// Evaluates every node in topological order.
///
/// With `external = None` all inputs come from the pass itself (the plain
/// forward pass). Otherwise `routing` decides per edge whether the source's
/// contribution comes from this pass or from the supplied contributions.
/// Inputs are always summed in upstream order, so identical routing
/// decisions give bitwise-identical results.
pub(crate) fn run_pass(
    model: &Model,
    tokens: &[usize],
    external: Option<(&Routing, &[Array2<f64>])>,
    record_inputs: bool,
) -> Result<ActivationCache> {
    model.check_tokens(tokens)?;
    let config = &model.config;
    let topo = model.topology();
    let seq = tokens.len();
    let d = config.d_model;

    let mut contributions: Vec<Array2<f64>> = Vec::with_capacity(topo.nodes.len());
    let mut inputs = Vec::with_capacity(if record_inputs { topo.nodes.len() } else { 0 });
    let mut logits = Array2::zeros((seq, config.vocab_size));

    for (idx, node) in topo.nodes.iter().enumerate() {
        let upstream = &topo.upstream[idx];
        let gather = |channel_idx: usize| -> Array2<f64> {
            let mut sum = Array2::<f64>::zeros((seq, d));
            for (pos, &src) in upstream.iter().enumerate() {
                let value = match external {
                    Some((routing, ext)) if !routing.own[idx][channel_idx][pos] => &ext[src],
                    _ => &contributions[src],
                };
                sum += value;
            }
            sum
        };
        let channel_inputs: Vec<Array2<f64>> = match (node, external) {
            (NodeId::Embed, _) => Vec::new(),
            // Unrouted passes feed q, k and v the same sum.
            (NodeId::Head { .. }, None) => {
                let x = gather(0);
                vec![x.clone(), x.clone(), x]
            }
            _ => (0..node.channels().len()).map(gather).collect(),
        };

        let out = match *node {
            NodeId::Embed => {
                let mut e = Array2::zeros((seq, d));
                for (i, &t) in tokens.iter().enumerate() {
                    let mut row = e.row_mut(i);
                    row.assign(&model.token_embedding.row(t));
                    row += &model.positional_embedding.row(i);
                }
                e
            }
            NodeId::Head { layer, head } => {
                let w = &model.heads[layer][head];
                let ln = w.ln.as_ref();
                let q = affine(&normalize(channel_inputs[0].clone(), ln), &w.w_q, &w.b_q);
                let k = affine(&normalize(channel_inputs[1].clone(), ln), &w.w_k, &w.b_k);
                let v = affine(&normalize(channel_inputs[2].clone(), ln), &w.w_v, &w.b_v);
                affine(&attend(&q, &k, &v), &w.w_o, &w.b_o)
            }
            NodeId::Mlp { layer } => {
                let w = &model.mlps[layer];
                let x = normalize(channel_inputs[0].clone(), w.ln.as_ref());
                let h = affine(&x, &w.w_in, &w.b_in).mapv_into(silu);
                affine(&h, &w.w_out, &w.b_out)
            }
            NodeId::Final => {
                let x = normalize(channel_inputs[0].clone(), model.final_ln.as_ref());
                logits = affine(&x, &model.unembed_w, &model.unembed_b);
                x
            }
        };
        contributions.push(out);
        if record_inputs {
            inputs.push(
                node.channels()
                    .iter()
                    .copied()
                    .zip(channel_inputs)
                    .collect(),
            );
        }
    }

    Ok(ActivationCache {
        nodes: topo.nodes.clone(),
        contributions,
        inputs,
        logits,
    })
}
