//! Built-in candidate lists, version 1.
//!
//! Changing any list changes the vocabulary and every generated dataset, so
//! edits must bump [`LISTS_VERSION`].

pub const LISTS_VERSION: u32 = 1;

pub const NAMES: &[&str] = &[
    "Adam", "Allison", "Benjamin", "Brian", "Brittany", "Charles", "Crystal", "Daniel", "David",
    "Erica", "Gregory", "Jason", "Jesse", "John", "Joseph", "Justin", "Kevin", "Mark", "Paul",
    "Samuel", "Sean", "Thomas", "Tiffany", "Timothy", "Tyler", "William",
];

pub const PLACES: &[&str] = &[
    "garden",
    "hospital",
    "house",
    "office",
    "restaurant",
    "school",
    "station",
    "store",
];

pub const OBJECTS: &[&str] = &[
    "ring",
    "kiss",
    "bone",
    "basketball",
    "computer",
    "necklace",
    "drink",
    "snack",
];

pub const NOUNS: &[&str] = &[
    "campaign",
    "conflict",
    "dispute",
    "expedition",
    "journey",
    "pilgrimage",
    "raids",
    "reign",
    "sanctions",
    "siege",
    "strike",
    "voyage",
    "war",
];

/// First two digits of a year, rendered after a space.
pub const CENTURIES: &[&str] = &["11", "12", "13", "14", "15", "16", "17"];

/// Function name plus six parameters after `self`.
pub const SIGNATURES: &[(&str, [&str; 6])] = &[
    (
        "port",
        ["order", "match", "fields", "model", "old", "parent"],
    ),
    (
        "default",
        ["node", "user", "current", "text", "port", "item"],
    ),
    (
        "create",
        ["token", "field", "request", "content", "order", "new"],
    ),
    (
        "values",
        ["json", "module", "count", "end", "model", "index"],
    ),
    (
        "match",
        ["results", "default", "order", "check", "row", "field"],
    ),
    (
        "command",
        ["code", "instance", "create", "size", "sub", "run"],
    ),
    ("item", ["old", "code", "header", "response", "node", "sub"]),
    (
        "expected",
        ["root", "results", "host", "module", "names", "files"],
    ),
    (
        "image",
        ["key", "file", "filename", "files", "line", "expected"],
    ),
    (
        "error",
        ["order", "shape", "match", "filename", "message", "results"],
    ),
];

/// Extra names a corrupted docstring may describe beyond those in signatures.
pub const EXTRA_PARAMS: &[&str] = &["command", "host", "page", "task", "new"];

pub const SUMMARIES: &[&str] = &[
    "agent rule manager",
    "export manager mission",
    "tree cut season",
    "lead respect dust",
    "activity path strength",
    "border horse trip",
    "game phase birth",
    "horse boot sector",
];

pub const DESCRIPTIONS: &[&str] = &[
    "set song",
    "plane action",
    "song spot",
    "delay draft",
    "king bar",
    "income creation",
    "volume pair",
    "product plane",
    "fan bell",
    "bishop attack",
    "duty horse",
    "cap session",
    "break player",
    "thinking rock",
    "rent tie",
    "race staff",
];
