//! Template-based prompt datasets for the three task families.
//!
//! | task | clean prompt | expected next token |
//! |------|--------------|---------------------|
//! | `ioi` | `Then, {name1} and {name2} went to the {place}. {name2} gave a {object} to` | `name1` |
//! | `greaterthan` | `The {noun} lasted from the year {century}{yy} to {century}` | any two-digit token above `yy` |
//! | `docstring` | `def {signature}: """{summary} :param {doc1}: {desc1} :param {doc2}: {desc2} :param` | the fifth parameter |
//!
//! Corrupted prompts: `ioi` names three distinct people (`name3` gives the
//! object); `greaterthan` always ends the year in `01`; `docstring`
//! describes two parameters drawn independently of the signature.

mod lists;
mod pairing;
mod tokenizer;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lists::LISTS_VERSION;
pub use pairing::{generate_pairs, matched_key, PairStream, PairingMode};
pub use tokenizer::{pretokenize, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Ioi,
    GreaterThan,
    Docstring,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Ioi, TaskKind::GreaterThan, TaskKind::Docstring];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Ioi => "ioi",
            TaskKind::GreaterThan => "greaterthan",
            TaskKind::Docstring => "docstring",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Clean,
    Corrupt,
}

impl Role {
    fn stream(&self) -> u64 {
        match self {
            Role::Clean => 0x636c_6561_6e00_0000,
            Role::Corrupt => 0x636f_7272_7570_7400,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Clean => "clean",
            Role::Corrupt => "corrupt",
        })
    }
}

/// How the expected next tokens follow from a prompt's slot values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerRule {
    /// The value of this slot, preceded by a space.
    SlotWord(String),
    /// Every two-digit token strictly greater than this slot's value.
    TwoDigitsAbove(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskTemplate {
    pub kind: TaskKind,
    /// Slots filled in a clean prompt, in render order of first use.
    pub slots: Vec<String>,
    pub vocab_lists: BTreeMap<String, Vec<String>>,
    /// Clean template with `{slot}` markers.
    pub render: String,
    pub corrupt_render: String,
    pub answer_rule: AnswerRule,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn signature_string(name: &str, params: &[&str; 6]) -> String {
    format!("{name}(self, {})", params.join(", "))
}

fn parse_signature(sig: &str) -> Option<Vec<&str>> {
    let (_, rest) = sig.split_once('(')?;
    let inner = rest.strip_suffix(')')?;
    Some(inner.split(", ").skip(1).collect())
}

fn param_names() -> Vec<String> {
    let mut set: BTreeSet<&str> = lists::EXTRA_PARAMS.iter().copied().collect();
    for (_, params) in lists::SIGNATURES {
        set.extend(params.iter().copied());
    }
    set.into_iter().map(String::from).collect()
}

impl TaskTemplate {
    pub fn builtin(kind: TaskKind) -> Self {
        let mut vocab_lists = BTreeMap::new();
        let (slots, render, corrupt_render, answer_rule) = match kind {
            TaskKind::Ioi => {
                vocab_lists.insert("name".to_string(), strings(lists::NAMES));
                vocab_lists.insert("place".to_string(), strings(lists::PLACES));
                vocab_lists.insert("object".to_string(), strings(lists::OBJECTS));
                (
                    strings(&["name1", "name2", "place", "object"]),
                    "Then, {name1} and {name2} went to the {place}. {name2} gave a {object} to",
                    "Then, {name1} and {name2} went to the {place}. {name3} gave a {object} to",
                    AnswerRule::SlotWord("name1".into()),
                )
            }
            TaskKind::GreaterThan => {
                vocab_lists.insert("noun".to_string(), strings(lists::NOUNS));
                vocab_lists.insert("century".to_string(), strings(lists::CENTURIES));
                vocab_lists.insert(
                    "yy".to_string(),
                    (2..=98).map(|v| format!("{v:02}")).collect(),
                );
                (
                    strings(&["noun", "century", "yy"]),
                    "The {noun} lasted from the year {century}{yy} to {century}",
                    "The {noun} lasted from the year {century}{yy} to {century}",
                    AnswerRule::TwoDigitsAbove("yy".into()),
                )
            }
            TaskKind::Docstring => {
                vocab_lists.insert(
                    "signature".to_string(),
                    lists::SIGNATURES
                        .iter()
                        .map(|(n, p)| signature_string(n, p))
                        .collect(),
                );
                vocab_lists.insert("param".to_string(), param_names());
                vocab_lists.insert("summary".to_string(), strings(lists::SUMMARIES));
                vocab_lists.insert("desc".to_string(), strings(lists::DESCRIPTIONS));
                let render = r#"def {signature}: """{summary} :param {doc1}: {desc1} :param {doc2}: {desc2} :param"#;
                (
                    strings(&["signature", "summary", "doc1", "desc1", "doc2", "desc2"]),
                    render,
                    render,
                    AnswerRule::SlotWord("answer".into()),
                )
            }
        };
        TaskTemplate {
            kind,
            slots,
            vocab_lists,
            render: render.to_string(),
            corrupt_render: corrupt_render.to_string(),
            answer_rule,
        }
    }

    /// IOI variant with the names in the first sentence swapped
    /// (`Then, {name2} and {name1} ...`).
    pub fn ioi_swapped() -> Self {
        let mut t = TaskTemplate::builtin(TaskKind::Ioi);
        t.render = t
            .render
            .replacen("{name1} and {name2}", "{name2} and {name1}", 1);
        t.corrupt_render =
            t.corrupt_render
                .replacen("{name1} and {name2}", "{name2} and {name1}", 1);
        t
    }

    pub fn template_for(&self, role: Role) -> &str {
        match role {
            Role::Clean => &self.render,
            Role::Corrupt => &self.corrupt_render,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |reason: String| Error::Template {
            template: self.kind.to_string(),
            reason,
        };
        for slot in &self.slots {
            if !self.render.contains(&format!("{{{slot}}}")) {
                return Err(err(format!("slot `{slot}` missing from template")));
            }
        }
        for (name, list) in &self.vocab_lists {
            if list.is_empty() {
                return Err(err(format!("candidate list `{name}` is empty")));
            }
        }
        Ok(())
    }

    fn list(&self, name: &str) -> &[String] {
        &self.vocab_lists[name]
    }

    /// Draws slot values for one prompt.
    fn sample_fields(&self, role: Role, rng: &mut ChaCha8Rng) -> BTreeMap<String, String> {
        let mut f = BTreeMap::new();
        let pick = |rng: &mut ChaCha8Rng, list: &str| -> String {
            let l = self.list(list);
            l[rng.random_range(0..l.len())].clone()
        };
        match self.kind {
            TaskKind::Ioi => {
                let names = self.list("name");
                let count = if role == Role::Clean { 2 } else { 3 };
                for (i, idx) in sample(rng, names.len(), count).into_iter().enumerate() {
                    f.insert(format!("name{}", i + 1), names[idx].clone());
                }
                f.insert("place".into(), pick(rng, "place"));
                f.insert("object".into(), pick(rng, "object"));
            }
            TaskKind::GreaterThan => {
                f.insert("noun".into(), pick(rng, "noun"));
                f.insert("century".into(), pick(rng, "century"));
                let yy = match role {
                    Role::Clean => pick(rng, "yy"),
                    Role::Corrupt => "01".to_string(),
                };
                f.insert("yy".into(), yy);
            }
            TaskKind::Docstring => {
                let sig = pick(rng, "signature");
                let params: Vec<String> = parse_signature(&sig)
                    .expect("built-in signatures parse")
                    .into_iter()
                    .map(String::from)
                    .collect();
                f.insert("summary".into(), pick(rng, "summary"));
                f.insert("desc1".into(), pick(rng, "desc"));
                f.insert("desc2".into(), pick(rng, "desc"));
                match role {
                    Role::Clean => {
                        f.insert("doc1".into(), params[2].clone());
                        f.insert("doc2".into(), params[3].clone());
                    }
                    Role::Corrupt => {
                        let pool = self.list("param");
                        let chosen = sample(rng, pool.len(), 2);
                        f.insert("doc1".into(), pool[chosen.index(0)].clone());
                        f.insert("doc2".into(), pool[chosen.index(1)].clone());
                    }
                }
                f.insert("answer".into(), params[4].clone());
                f.insert("signature".into(), sig);
            }
        }
        f
    }

    fn expected(
        &self,
        fields: &BTreeMap<String, String>,
        tokenizer: &Tokenizer,
    ) -> Result<BTreeSet<usize>> {
        match &self.answer_rule {
            AnswerRule::SlotWord(slot) => {
                let word = fields
                    .get(slot)
                    .ok_or_else(|| Error::UnknownField(slot.clone()))?;
                Ok(BTreeSet::from([tokenizer.id(&format!(" {word}"))?]))
            }
            AnswerRule::TwoDigitsAbove(slot) => {
                let v: u32 = fields
                    .get(slot)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::UnknownField(slot.clone()))?;
                ((v + 1)..100)
                    .map(|d| tokenizer.id(&format!("{d:02}")))
                    .collect()
            }
        }
    }
}

/// Replaces every `{slot}` marker with its value.
pub fn render(template: &str, fields: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len() + 32);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Malformed(format!("unclosed slot in `{template}`")))?
            + open;
        let slot = &rest[open + 1..close];
        out.push_str(
            fields
                .get(slot)
                .ok_or_else(|| Error::UnknownField(slot.to_string()))?,
        );
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptInstance {
    pub text: String,
    pub tokens: Vec<usize>,
    pub fields: BTreeMap<String, String>,
    pub expected_tokens: BTreeSet<usize>,
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for item `index` of stream `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(seed) ^ stream) ^ index)
}

/// `n` prompts for `role`. Prompt `i` depends only on `(seed, role, i)`.
pub fn generate_prompts(
    template: &TaskTemplate,
    tokenizer: &Tokenizer,
    n: usize,
    seed: u64,
    role: Role,
) -> Result<Vec<PromptInstance>> {
    if n < 1 {
        return Err(Error::Range("n must be at least 1".into()));
    }
    template.validate()?;
    let mut expected_len = None;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, role.stream(), i as u64));
            let fields = template.sample_fields(role, &mut rng);
            let text = render(template.template_for(role), &fields)?;
            let tokens = tokenizer.tokenize(&text)?;
            match expected_len {
                None => expected_len = Some(tokens.len()),
                Some(len) if len != tokens.len() => {
                    return Err(Error::Template {
                        template: template.kind.to_string(),
                        reason: format!("prompt {i} has {} tokens, expected {len}", tokens.len()),
                    })
                }
                Some(_) => {}
            }
            let expected_tokens = template.expected(&fields, tokenizer)?;
            Ok(PromptInstance {
                text,
                tokens,
                fields,
                expected_tokens,
            })
        })
        .collect()
}

/// Vocabulary covering every prompt and answer of the built-in templates.
pub fn builtin_tokenizer() -> &'static Tokenizer {
    static TOKENIZER: OnceLock<Tokenizer> = OnceLock::new();
    TOKENIZER.get_or_init(|| {
        let mut words: BTreeSet<String> = (0..100).map(|d| format!("{d:02}")).collect();
        let mut templates: Vec<TaskTemplate> = TaskKind::ALL
            .into_iter()
            .map(TaskTemplate::builtin)
            .collect();
        templates.push(TaskTemplate::ioi_swapped());
        for t in &templates {
            // Vary one list at a time; every candidate then appears in every
            // slot position it can occupy.
            for role_template in [&t.render, &t.corrupt_render] {
                let slots = slot_names(role_template);
                for (list_name, list) in &t.vocab_lists {
                    for value in list {
                        let fields: BTreeMap<String, String> = slots
                            .iter()
                            .map(|s| {
                                let source = slot_list(t.kind, s);
                                let v = if source == list_name {
                                    value.clone()
                                } else {
                                    t.vocab_lists[source][0].clone()
                                };
                                (s.clone(), v)
                            })
                            .collect();
                        let text = render(role_template, &fields).expect("all slots filled");
                        for piece in pretokenize(&text).expect("template text pretokenizes") {
                            words.insert(piece.to_string());
                        }
                    }
                }
            }
        }
        // Answers are spaced words drawn from name and parameter lists.
        for t in &templates {
            for list in ["name", "param"] {
                if let Some(l) = t.vocab_lists.get(list) {
                    words.extend(l.iter().map(|w| format!(" {w}")));
                }
            }
        }
        Tokenizer::from_words(words.into_iter().collect()).expect("distinct words")
    })
}

fn slot_names(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let close = rest[open..].find('}').expect("closed slot") + open;
        let s = rest[open + 1..close].to_string();
        if !out.contains(&s) {
            out.push(s);
        }
        rest = &rest[close + 1..];
    }
    out
}

/// Candidate list a slot draws from.
fn slot_list(kind: TaskKind, slot: &str) -> &'static str {
    match (kind, slot) {
        (TaskKind::Ioi, s) if s.starts_with("name") => "name",
        (TaskKind::Docstring, "doc1" | "doc2" | "answer") => "param",
        (TaskKind::Docstring, "desc1" | "desc2") => "desc",
        (_, "place") => "place",
        (_, "object") => "object",
        (_, "noun") => "noun",
        (_, "century") => "century",
        (_, "yy") => "yy",
        (_, "signature") => "signature",
        (_, "summary") => "summary",
        _ => unreachable!("unknown slot {slot}"),
    }
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    role: Role,
    index: usize,
    text: &'a str,
    fields: &'a BTreeMap<String, String>,
    expected_tokens: &'a BTreeSet<usize>,
}

/// One line of a dataset dump: `{role, index, text, fields, expected_tokens}`.
pub fn dump_record(role: Role, index: usize, prompt: &PromptInstance) -> String {
    serde_json::to_string(&DumpRecord {
        role,
        index,
        text: &prompt.text,
        fields: &prompt.fields,
        expected_tokens: &prompt.expected_tokens,
    })
    .expect("record serializes")
}
