use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{PromptInstance, Role, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingMode {
    #[default]
    Cross,
    Matched,
}

impl fmt::Display for PairingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairingMode::Cross => "cross",
            PairingMode::Matched => "matched",
        })
    }
}

impl FromStr for PairingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(PairingMode::Cross),
            "matched" => Ok(PairingMode::Matched),
            _ => Err(Error::InvalidConfig(format!("unknown pairing mode `{s}`"))),
        }
    }
}

/// Join key of a prompt under matched pairing, or `None` if the prompt
/// cannot take part in any matched pair.
///
/// - ioi: place and object
/// - greaterthan: noun and century; corrupt prompts must end the year in `01`
/// - docstring: the function signature
pub fn matched_key(
    kind: TaskKind,
    role: Role,
    fields: &BTreeMap<String, String>,
) -> Option<Vec<String>> {
    let get = |k: &str| fields.get(k).cloned();
    match kind {
        TaskKind::Ioi => Some(vec![get("place")?, get("object")?]),
        TaskKind::GreaterThan => {
            if role == Role::Corrupt && fields.get("yy").map(String::as_str) != Some("01") {
                return None;
            }
            Some(vec![get("noun")?, get("century")?])
        }
        TaskKind::Docstring => Some(vec![get("signature")?]),
    }
}

/// Row-major stream of `(clean_index, corrupt_index)` pairs.
#[derive(Debug, Clone)]
pub struct PairStream {
    inner: Inner,
    len: usize,
}

#[derive(Debug, Clone)]
enum Inner {
    Cross {
        n_corrupt: usize,
        next: usize,
        end: usize,
    },
    Matched {
        /// Matching corrupt indices for each clean index, ascending.
        rows: Vec<Arc<Vec<usize>>>,
        row: usize,
        col: usize,
    },
}

impl PairStream {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Iterator for PairStream {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        let item = match &mut self.inner {
            Inner::Cross {
                n_corrupt,
                next,
                end,
            } => {
                if *next == *end {
                    return None;
                }
                let i = *next;
                *next += 1;
                (i / *n_corrupt, i % *n_corrupt)
            }
            Inner::Matched { rows, row, col } => loop {
                let r = rows.get(*row)?;
                if let Some(&j) = r.get(*col) {
                    *col += 1;
                    break (*row, j);
                }
                *row += 1;
                *col = 0;
            },
        };
        self.len -= 1;
        Some(item)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.len, Some(self.len))
    }
}

impl ExactSizeIterator for PairStream {}

pub fn generate_pairs(
    clean: &[PromptInstance],
    corrupt: &[PromptInstance],
    mode: PairingMode,
    kind: TaskKind,
) -> Result<PairStream> {
    if clean.is_empty() || corrupt.is_empty() {
        return Err(Error::Range(
            "clean and corrupt sets must be nonempty".into(),
        ));
    }
    match mode {
        PairingMode::Cross => {
            let end = clean.len() * corrupt.len();
            Ok(PairStream {
                inner: Inner::Cross {
                    n_corrupt: corrupt.len(),
                    next: 0,
                    end,
                },
                len: end,
            })
        }
        PairingMode::Matched => {
            let mut groups: HashMap<Vec<String>, Vec<usize>> = HashMap::new();
            for (j, p) in corrupt.iter().enumerate() {
                if let Some(key) = matched_key(kind, Role::Corrupt, &p.fields) {
                    groups.entry(key).or_default().push(j);
                }
            }
            let groups: HashMap<_, _> = groups.into_iter().map(|(k, v)| (k, Arc::new(v))).collect();
            let empty = Arc::new(Vec::new());
            let rows: Vec<_> = clean
                .iter()
                .map(|p| {
                    matched_key(kind, Role::Clean, &p.fields)
                        .and_then(|k| groups.get(&k).cloned())
                        .unwrap_or_else(|| empty.clone())
                })
                .collect();
            let len: usize = rows.iter().map(|r| r.len()).sum();
            if len == 0 {
                return Err(Error::EmptyJoin);
            }
            Ok(PairStream {
                inner: Inner::Matched {
                    rows,
                    row: 0,
                    col: 0,
                },
                len,
            })
        }
    }
}
