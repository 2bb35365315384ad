//! JSON model documents.
//!
//! ```text
//! { "format_version": 1,
//!   "config": { ...ModelConfig fields... },
//!   "tensors": { "embed.token": [[...], ...], "a0.h1.W_Q": [[...]], ... } }
//! ```
//!
//! Canonical tensor names (matrices are nested row-major arrays, vectors are
//! flat arrays):
//!
//! | name | shape |
//! |------|-------|
//! | `embed.token` | `vocab_size × d_model` |
//! | `embed.pos` | `max_seq_len × d_model` |
//! | `a{l}.h{h}.W_Q`, `.W_K`, `.W_V` | `d_model × d_head` |
//! | `a{l}.h{h}.b_Q`, `.b_K`, `.b_V` | `d_head` |
//! | `a{l}.h{h}.W_O` | `d_head × d_model` |
//! | `a{l}.h{h}.b_O` | `d_model` |
//! | `a{l}.h{h}.ln.w`, `.ln.b` | `d_model` (layernorm only) |
//! | `m{l}.W_in` / `m{l}.b_in` | `d_model × d_mlp` / `d_mlp` |
//! | `m{l}.W_out` / `m{l}.b_out` | `d_mlp × d_model` / `d_model` |
//! | `m{l}.ln.w`, `.ln.b` | `d_model` (layernorm only) |
//! | `final.ln.w`, `.ln.b` | `d_model` (layernorm only) |
//! | `unembed.W` / `unembed.b` | `d_model × vocab_size` / `vocab_size` |

use std::collections::BTreeMap;

use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{LayerNorm, Model, ModelConfig};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    format_version: u32,
    config: ModelConfig,
    tensors: BTreeMap<String, Value>,
}

type Named<'a> = (String, Vec<usize>, &'a mut [f64]);

fn push<'a, D: Dimension>(out: &mut Vec<Named<'a>>, name: String, a: &'a mut Array<f64, D>) {
    let shape = a.shape().to_vec();
    out.push((name, shape, a.as_slice_mut().expect("standard layout")));
}

fn push_ln<'a>(out: &mut Vec<Named<'a>>, prefix: &str, ln: &'a mut Option<LayerNorm>) {
    if let Some(ln) = ln {
        push(out, format!("{prefix}.ln.w"), &mut ln.scale);
        push(out, format!("{prefix}.ln.b"), &mut ln.shift);
    }
}

/// Every tensor of the model under its canonical name.
fn tensors_mut(model: &mut Model) -> Vec<Named<'_>> {
    let mut out = Vec::new();
    push(&mut out, "embed.token".into(), &mut model.token_embedding);
    push(
        &mut out,
        "embed.pos".into(),
        &mut model.positional_embedding,
    );
    for (l, layer) in model.heads.iter_mut().enumerate() {
        for (h, w) in layer.iter_mut().enumerate() {
            let p = format!("a{l}.h{h}");
            push(&mut out, format!("{p}.W_Q"), &mut w.w_q);
            push(&mut out, format!("{p}.W_K"), &mut w.w_k);
            push(&mut out, format!("{p}.W_V"), &mut w.w_v);
            push(&mut out, format!("{p}.b_Q"), &mut w.b_q);
            push(&mut out, format!("{p}.b_K"), &mut w.b_k);
            push(&mut out, format!("{p}.b_V"), &mut w.b_v);
            push(&mut out, format!("{p}.W_O"), &mut w.w_o);
            push(&mut out, format!("{p}.b_O"), &mut w.b_o);
            push_ln(&mut out, &p, &mut w.ln);
        }
    }
    for (l, m) in model.mlps.iter_mut().enumerate() {
        let p = format!("m{l}");
        push(&mut out, format!("{p}.W_in"), &mut m.w_in);
        push(&mut out, format!("{p}.b_in"), &mut m.b_in);
        push(&mut out, format!("{p}.W_out"), &mut m.w_out);
        push(&mut out, format!("{p}.b_out"), &mut m.b_out);
        push_ln(&mut out, &p, &mut m.ln);
    }
    push_ln(&mut out, "final", &mut model.final_ln);
    push(&mut out, "unembed.W".into(), &mut model.unembed_w);
    push(&mut out, "unembed.b".into(), &mut model.unembed_b);
    out
}

fn to_value(shape: &[usize], data: &[f64]) -> Value {
    match shape {
        [] | [_] => Value::from(data.to_vec()),
        [_, rest @ ..] => {
            let stride: usize = rest.iter().product();
            Value::Array(
                data.chunks(stride.max(1))
                    .map(|chunk| to_value(rest, chunk))
                    .collect(),
            )
        }
    }
}

/// Flattens a nested array, returning its shape. Ragged arrays are malformed.
fn flatten(name: &str, value: &Value, out: &mut Vec<f64>) -> Result<Vec<usize>> {
    match value {
        Value::Number(n) => {
            out.push(
                n.as_f64()
                    .ok_or_else(|| Error::Malformed(format!("`{name}`: bad number")))?,
            );
            Ok(Vec::new())
        }
        Value::Array(items) => {
            let mut inner: Option<Vec<usize>> = None;
            for item in items {
                let shape = flatten(name, item, out)?;
                match &inner {
                    None => inner = Some(shape),
                    Some(s) if *s == shape => {}
                    Some(_) => return Err(Error::Malformed(format!("`{name}` is ragged"))),
                }
            }
            let mut shape = vec![items.len()];
            shape.extend(inner.unwrap_or_default());
            Ok(shape)
        }
        _ => Err(Error::Malformed(format!(
            "`{name}` must be a nested numeric array"
        ))),
    }
}

pub fn save_model(model: &Model) -> String {
    let mut copy = model.clone();
    let tensors = tensors_mut(&mut copy)
        .into_iter()
        .map(|(name, shape, data)| (name, to_value(&shape, data)))
        .collect();
    let doc = ModelDocument {
        format_version: MODEL_FORMAT_VERSION,
        config: model.config.clone(),
        tensors,
    };
    serde_json::to_string(&doc).expect("model document serializes")
}

pub fn load_model(document: &str) -> Result<Model> {
    let mut doc: ModelDocument =
        serde_json::from_str(document).map_err(|e| Error::Malformed(e.to_string()))?;
    if doc.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::FormatVersion(doc.format_version));
    }
    let mut model = Model::zeros(doc.config)?;
    for (name, expected, slot) in tensors_mut(&mut model) {
        let value = doc
            .tensors
            .remove(&name)
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        let mut data = Vec::with_capacity(slot.len());
        let found = flatten(&name, &value, &mut data)?;
        if found != expected {
            return Err(Error::ShapeMismatch {
                name,
                expected,
                found,
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        slot.copy_from_slice(&data);
    }
    if let Some(name) = doc.tensors.keys().next() {
        return Err(Error::UnknownTensor(name.clone()));
    }
    Ok(model)
}
